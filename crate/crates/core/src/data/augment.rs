use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::frame::LandmarkFrame;
use super::pad::{pad, FrameOrigin, PadKind, PadSources, PaddedSequence};
use super::segment::TaskModuleSequence;
use crate::error::{Error, Result};

/// Resize factors are drawn from `Normal(1, resize_std)` restricted to this
/// range.
pub const RESIZE_FACTOR_RANGE: (f64, f64) = (0.5, 1.5);

/// Length after resizing `len` frames by `factor`: the number of intervals
/// scales by `factor`.
pub fn resized_length(len: usize, factor: f64) -> usize {
    ((len.saturating_sub(1)) as f64 * factor).round() as usize + 1
}

/// Linear interpolation of `seq` onto `new_len` uniformly spaced points. The
/// first and last frames are copied unchanged.
pub fn resample(seq: &TaskModuleSequence, new_len: usize) -> Result<TaskModuleSequence> {
    let len = seq.len();
    if len < 2 || new_len < 2 {
        return Err(Error::Data(format!(
            "cannot resample {len} frames to {new_len}"
        )));
    }
    let first = seq.frames[0].frame_index;
    let frames = (0..new_len)
        .map(|j| {
            let coords = if j == 0 {
                seq.frames[0].coords.clone()
            } else if j == new_len - 1 {
                seq.frames[len - 1].coords.clone()
            } else {
                let pos = j as f64 * (len - 1) as f64 / (new_len - 1) as f64;
                let i = (pos.floor() as usize).min(len - 2);
                let w = pos - i as f64;
                let (a, b) = (&seq.frames[i].coords, &seq.frames[i + 1].coords);
                a.iter().zip(b).map(|(x, y)| x + (y - x) * w).collect()
            };
            LandmarkFrame {
                frame_index: first + j,
                coords,
            }
        })
        .collect();
    Ok(TaskModuleSequence {
        frames,
        ..seq.clone_without_frames()
    })
}

impl TaskModuleSequence {
    fn clone_without_frames(&self) -> TaskModuleSequence {
        TaskModuleSequence {
            frames: Vec::new(),
            label: self.label,
            operator_id: self.operator_id,
            assembly_id: self.assembly_id,
            start: self.start,
            preceding: self.preceding.clone(),
        }
    }
}

/// Shortens or lengthens `seq` by `factor` with linear interpolation.
pub fn augment_resize(
    seq: &TaskModuleSequence,
    factor: f64,
    t_max: usize,
) -> Result<TaskModuleSequence> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Data(format!("resize factor {factor} must be positive")));
    }
    let new_len = resized_length(seq.len(), factor);
    if new_len < 2 || new_len > t_max {
        return Err(Error::Data(format!(
            "resizing {} frames by {factor} gives {new_len}, outside 2..={t_max}",
            seq.len()
        )));
    }
    resample(seq, new_len)
}

/// Adds i.i.d. `Normal(0, std)` noise to every coordinate of the data rows.
/// Padding rows are left untouched.
pub fn augment_noise(seq: &PaddedSequence, std: f64, rng: &mut impl Rng) -> Result<PaddedSequence> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Data(format!("noise std {std} must be non-negative")));
    }
    let mut out = seq.clone();
    if std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Data(e.to_string()))?;
    let cols = out.frames.cols();
    let data = out.frames.data_mut();
    for (r, o) in seq.origin.iter().enumerate() {
        if *o == FrameOrigin::Data {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v += normal.sample(rng);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub noise_probability: f64,
    pub resize_probability: f64,
    pub noise_std: f64,
    pub resize_std: f64,
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("noise probability", self.noise_probability),
            ("resize probability", self.resize_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        for (name, s) in [("noise std", self.noise_std), ("resize std", self.resize_std)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} {s} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Training-time augmentation with an audit counter of every application.
#[derive(Debug, Default)]
pub struct AugmentationPolicy {
    pub config: AugmentationConfig,
    resized: AtomicUsize,
    noised: AtomicUsize,
}

impl AugmentationPolicy {
    pub fn new(config: AugmentationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ..Self::default()
        })
    }

    /// Total augmentations applied so far.
    pub fn applied(&self) -> usize {
        self.resized() + self.noised()
    }

    pub fn resized(&self) -> usize {
        self.resized.load(Ordering::Relaxed)
    }

    pub fn noised(&self) -> usize {
        self.noised.load(Ordering::Relaxed)
    }

    fn draw_factor(&self, rng: &mut impl Rng) -> f64 {
        let s = self.config.resize_std;
        if s == 0.0 {
            return 1.0;
        }
        let normal = Normal::new(1.0, s).expect("validated std");
        let (lo, hi) = RESIZE_FACTOR_RANGE;
        loop {
            let f = normal.sample(rng);
            if (lo..=hi).contains(&f) {
                return f;
            }
        }
    }

    /// Possibly resizes `seq`, pads it, then possibly adds noise to its data
    /// rows. Each augmentation fires independently with its probability.
    /// Resized lengths are clamped to `2..=t_max`.
    pub fn augment(
        &self,
        seq: &TaskModuleSequence,
        kind: PadKind,
        t_max: usize,
        sources: PadSources<'_>,
        rng: &mut impl Rng,
    ) -> Result<PaddedSequence> {
        let c = &self.config;
        let resize = rng.random::<f64>() < c.resize_probability;
        let noise = rng.random::<f64>() < c.noise_probability;
        let resized;
        let base = if resize && seq.len() >= 2 {
            let f = self.draw_factor(rng);
            let len = resized_length(seq.len(), f).clamp(2, t_max);
            self.resized.fetch_add(1, Ordering::Relaxed);
            resized = resample(seq, len)?;
            &resized
        } else {
            seq
        };
        let padded = pad(base, kind, t_max, sources, rng)?;
        if noise {
            self.noised.fetch_add(1, Ordering::Relaxed);
            augment_noise(&padded, c.noise_std, rng)
        } else {
            Ok(padded)
        }
    }
}

/// Applies `policy` to every sequence of `batch`, drawing from `rng` in order.
pub fn apply_augmentation_policy(
    batch: &[TaskModuleSequence],
    policy: &AugmentationPolicy,
    kind: PadKind,
    t_max: usize,
    sources: PadSources<'_>,
    rng: &mut impl Rng,
) -> Result<Vec<PaddedSequence>> {
    batch
        .iter()
        .map(|s| policy.augment(s, kind, t_max, sources, rng))
        .collect()
}
