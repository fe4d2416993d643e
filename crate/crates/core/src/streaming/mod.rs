//! Stride-1 sliding-window classification of a frame stream.

use std::collections::VecDeque;
use std::io::Read;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::data::io::{AssemblyMetadata, DatasetMetadata};
use crate::data::{spans_from_labels, Agent, Dataset, LandmarkFrame, Recording, COORDS, FRAME_RATE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::models::argmax;
use crate::numerics::Tensor;
use crate::par;
use crate::training::{standardize_rows, write_csv, Checkpoint, Classifier};

/// Window over the most recent frames of a stream.
#[derive(Debug, Clone)]
pub struct StreamState {
    t_max: usize,
    standardize: bool,
    buffer: VecDeque<LandmarkFrame>,
    frames_seen: usize,
    suppressed: bool,
    trace: Vec<Vec<f64>>,
}

impl StreamState {
    pub fn new(t_max: usize, standardize: bool) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("stream window must hold at least one frame".into()));
        }
        Ok(Self {
            t_max,
            standardize,
            buffer: VecDeque::with_capacity(t_max),
            frames_seen: 0,
            suppressed: false,
            trace: Vec::new(),
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Frames ingested so far.
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn buffer(&self) -> impl Iterator<Item = &LandmarkFrame> {
        self.buffer.iter()
    }

    /// While set (a robot module is running), posteriors are reported as
    /// all-zero vectors.
    pub fn set_suppressed(&mut self, on: bool) {
        self.suppressed = on;
    }

    pub fn suppressed(&self) -> bool {
        self.suppressed
    }

    /// One posterior per ingested frame, oldest first.
    pub fn trace(&self) -> &[Vec<f64>] {
        &self.trace
    }

    /// The current window: zero rows (masked) followed by the buffered
    /// frames, `t_max` rows in all.
    pub fn window(&self) -> (Tensor, Vec<bool>) {
        let fill = self.t_max - self.buffer.len();
        let mut data = vec![0.0; fill * COORDS];
        for f in &self.buffer {
            data.extend_from_slice(&f.coords);
        }
        let mut mask = vec![false; fill];
        mask.resize(self.t_max, true);
        (Tensor::matrix(self.t_max, COORDS, data), mask)
    }

    /// Appends a frame and returns the posterior for the window ending at it.
    pub fn ingest(&mut self, frame: LandmarkFrame, model: &dyn Classifier) -> Result<Vec<f64>> {
        if frame.coords.len() != COORDS {
            return Err(Error::Shape(format!(
                "frame {} has {} coordinates, model expects {COORDS}",
                frame.frame_index,
                frame.coords.len()
            )));
        }
        if self.buffer.len() == self.t_max {
            self.buffer.pop_front();
        }
        self.buffer.push_back(frame);
        self.frames_seen += 1;
        let posterior = if self.suppressed {
            vec![0.0; NUM_CLASSES]
        } else {
            let (x, mask) = self.window();
            let x = if self.standardize { standardize_rows(&x, &mask) } else { x };
            let p = model.classify(&x, &mask)?;
            if p.len() != NUM_CLASSES {
                return Err(Error::Shape(format!(
                    "model returned {} classes, expected {NUM_CLASSES}",
                    p.len()
                )));
            }
            p
        };
        self.trace.push(posterior.clone());
        Ok(posterior)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub frame_index: usize,
    pub true_label: i32,
    pub suppressed: bool,
    pub posterior: Vec<f64>,
    pub argmax: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayOptions {
    pub t_max: usize,
    pub standardize: bool,
    /// Sleep one frame period between frames.
    pub paced: bool,
}

/// Streams a recording through `model`, suppressing output during robot
/// modules listed in `meta`.
pub fn replay(rec: &Recording, meta: Option<&AssemblyMetadata>, model: &dyn Classifier, opts: ReplayOptions) -> Result<Vec<TraceRow>> {
    let meta = meta.ok_or_else(|| {
        Error::Data(format!(
            "assembly {} has no module boundary metadata",
            rec.assembly_id
        ))
    })?;
    if meta.assembly_id != rec.assembly_id || meta.frames != rec.len() {
        return Err(Error::Data(format!(
            "metadata does not describe assembly {}",
            rec.assembly_id
        )));
    }
    let mut robot = vec![false; rec.len()];
    for m in meta.modules.iter().filter(|m| m.agent == Agent::Robot) {
        for r in robot.iter_mut().skip(m.start).take(m.len) {
            *r = true;
        }
    }
    let mut state = StreamState::new(opts.t_max, opts.standardize)?;
    let mut rows = Vec::with_capacity(rec.len());
    for (t, frame) in rec.frames.iter().enumerate() {
        if opts.paced && t > 0 {
            std::thread::sleep(Duration::from_secs_f64(1.0 / FRAME_RATE));
        }
        state.set_suppressed(robot[t]);
        let posterior = state.ingest(frame.clone(), model)?;
        rows.push(TraceRow {
            frame_index: frame.frame_index,
            true_label: rec.labels[t],
            suppressed: robot[t],
            argmax: argmax(&posterior),
            posterior,
        });
    }
    Ok(rows)
}

fn trace_header() -> Vec<String> {
    let mut h = vec!["frame_index".to_string(), "true_label".into(), "suppressed".into()];
    h.extend((0..NUM_CLASSES).map(|i| format!("p{i}")));
    h.push("argmax".into());
    h
}

pub fn trace_csv(rows: &[TraceRow]) -> Result<Vec<u8>> {
    let header = trace_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &header,
        rows.iter().map(|r| {
            let mut v = vec![
                r.frame_index.to_string(),
                r.true_label.to_string(),
                u8::from(r.suppressed).to_string(),
            ];
            v.extend(r.posterior.iter().map(|p| p.to_string()));
            v.push(r.argmax.to_string());
            v
        }),
    )
}

/// Parses a trace file written by [`trace_csv`].
pub fn read_trace(reader: impl Read) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(trace_header().iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected trace header".into(),
        });
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let line = i + 2;
            let rec = rec?;
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("invalid {what}"),
            };
            let posterior = (3..3 + NUM_CLASSES)
                .map(|c| rec[c].parse::<f64>().map_err(|_| bad("posterior")))
                .collect::<Result<Vec<_>>>()?;
            let argmax_col: usize = rec[3 + NUM_CLASSES].parse().map_err(|_| bad("argmax"))?;
            if argmax_col != argmax(&posterior) {
                return Err(bad("argmax (inconsistent with posterior)"));
            }
            Ok(TraceRow {
                frame_index: rec[0].parse().map_err(|_| bad("frame_index"))?,
                true_label: rec[1].parse().map_err(|_| bad("true_label"))?,
                suppressed: match &rec[2] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("suppressed flag")),
                },
                posterior,
                argmax: argmax_col,
            })
        })
        .collect()
}

/// Accuracy against the fraction of a module observed so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionCurve {
    pub correct: Vec<usize>,
    pub counts: Vec<usize>,
}

impl ProportionCurve {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
        }
        Ok(Self {
            correct: vec![0; bins],
            counts: vec![0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Bin `i` covers observed fractions in `(i / bins, (i + 1) / bins]`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let b = self.bins() as f64;
        (i as f64 / b, (i + 1) as f64 / b)
    }

    pub fn accuracy(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.correct[i] as f64 / self.counts[i] as f64)
    }

    /// Scores frame `t` (1-based) of a module of length `len`.
    pub fn record(&mut self, t: usize, len: usize, correct: bool) {
        let b = self.bins();
        let bin = ((t * b).div_ceil(len)).clamp(1, b) - 1;
        self.counts[bin] += 1;
        self.correct[bin] += usize::from(correct);
    }

    pub fn merge(&mut self, other: &ProportionCurve) -> Result<()> {
        if other.bins() != self.bins() {
            return Err(Error::Shape("curves have different bin counts".into()));
        }
        for i in 0..self.bins() {
            self.counts[i] += other.counts[i];
            self.correct[i] += other.correct[i];
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        write_csv(
            &["bin", "lower", "upper", "count", "correct", "accuracy"],
            (0..self.bins()).map(|i| {
                let (lo, hi) = self.edges(i);
                vec![
                    i.to_string(),
                    format!("{lo:.6}"),
                    format!("{hi:.6}"),
                    self.counts[i].to_string(),
                    self.correct[i].to_string(),
                    self.accuracy(i).map(|a| format!("{a:.6}")).unwrap_or_default(),
                ]
            }),
        )
    }
}

/// Curve from a trace: modules are the runs of equal non-negative labels.
pub fn curve_from_trace(rows: &[TraceRow], bins: usize) -> Result<ProportionCurve> {
    let mut curve = ProportionCurve::new(bins)?;
    let labels: Vec<i32> = rows.iter().map(|r| r.true_label).collect();
    for span in spans_from_labels(&labels) {
        for t in 1..=span.len {
            let row = &rows[span.start + t - 1];
            curve.record(t, span.len, !row.suppressed && row.argmax == span.class);
        }
    }
    Ok(curve)
}

/// Streaming accuracy over every human-module frame and at module-final
/// frames only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamAccuracy {
    pub frames: usize,
    pub frames_correct: usize,
    pub modules: usize,
    pub modules_correct: usize,
}

impl StreamAccuracy {
    pub fn from_trace(rows: &[TraceRow]) -> Self {
        let labels: Vec<i32> = rows.iter().map(|r| r.true_label).collect();
        let mut acc = Self::default();
        for span in spans_from_labels(&labels) {
            for (k, row) in rows[span.start..span.end()].iter().enumerate() {
                let hit = !row.suppressed && row.argmax == span.class;
                acc.frames += 1;
                acc.frames_correct += usize::from(hit);
                if k + 1 == span.len {
                    acc.modules += 1;
                    acc.modules_correct += usize::from(hit);
                }
            }
        }
        acc
    }

    pub fn add(&mut self, o: &StreamAccuracy) {
        self.frames += o.frames;
        self.frames_correct += o.frames_correct;
        self.modules += o.modules;
        self.modules_correct += o.modules_correct;
    }

    pub fn frame_accuracy(&self) -> f64 {
        self.frames_correct as f64 / self.frames.max(1) as f64
    }

    pub fn final_accuracy(&self) -> f64 {
        self.modules_correct as f64 / self.modules.max(1) as f64
    }
}

/// Replays recordings in parallel, unpaced.
pub fn replay_all(
    recs: &[(&Recording, Option<&AssemblyMetadata>)],
    model: &dyn Classifier,
    t_max: usize,
    standardize: bool,
) -> Result<Vec<Vec<TraceRow>>> {
    let opts = ReplayOptions {
        t_max,
        standardize,
        paced: false,
    };
    par::map(recs, |(r, m)| replay(r, *m, model, opts))
        .into_iter()
        .collect()
}

/// Proportion curve over every human module of the given recordings.
pub fn proportion_curve(
    model: &dyn Classifier,
    recs: &[(&Recording, Option<&AssemblyMetadata>)],
    t_max: usize,
    standardize: bool,
    bins: usize,
) -> Result<ProportionCurve> {
    let mut curve = ProportionCurve::new(bins)?;
    for trace in replay_all(recs, model, t_max, standardize)? {
        curve.merge(&curve_from_trace(&trace, bins)?)?;
    }
    Ok(curve)
}

/// Streams the given assemblies through every checkpoint and pools the
/// module-final accuracy and the proportion curve over all of them.
pub fn evaluate_stream(
    checkpoints: &[Checkpoint],
    ds: &Dataset,
    meta: &DatasetMetadata,
    ids: &[u32],
    bins: usize,
) -> Result<(StreamAccuracy, ProportionCurve)> {
    if checkpoints.is_empty() {
        return Err(Error::Data("no checkpoints to stream".into()));
    }
    let recs = ids
        .iter()
        .map(|id| {
            ds.recording(*id)
                .map(|r| (r, meta.assembly(*id)))
                .ok_or_else(|| Error::Data(format!("assembly {id} is not in the dataset")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = StreamAccuracy::default();
    let mut curve = ProportionCurve::new(bins)?;
    for cp in checkpoints {
        let net = cp.network()?;
        for trace in replay_all(&recs, &net, cp.t_max, cp.config.standardize)? {
            acc.add(&StreamAccuracy::from_trace(&trace));
            curve.merge(&curve_from_trace(&trace, bins)?)?;
        }
    }
    Ok((acc, curve))
}
