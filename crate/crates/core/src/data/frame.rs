use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HANDS: usize = 2;
pub const LANDMARKS: usize = 21;
/// Values per frame: two hands, 21 landmarks, `x, y, z` each. Left hand
/// first, coordinates interleaved per landmark.
pub const COORDS: usize = HANDS * LANDMARKS * 3;
/// Nominal capture rate in frames per second.
pub const FRAME_RATE: f64 = 10.0;
pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFrame {
    pub frame_index: usize,
    pub coords: Vec<f64>,
}

impl LandmarkFrame {
    pub fn new(frame_index: usize, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != COORDS {
            return Err(Error::Data(format!(
                "frame {frame_index} has {} coordinates, expected {COORDS}",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "frame {frame_index} coordinate {i} is not finite"
            )));
        }
        Ok(Self {
            frame_index,
            coords,
        })
    }

    pub fn zeros(frame_index: usize) -> Self {
        Self {
            frame_index,
            coords: vec![0.0; COORDS],
        }
    }

    /// Flat index of coordinate `axis` of `landmark` on `hand` (0 = left).
    pub fn index(hand: usize, landmark: usize, axis: usize) -> usize {
        (hand * LANDMARKS + landmark) * 3 + axis
    }
}

/// Who performs a task module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Human,
    Robot,
}

/// A labelled span of a recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpan {
    pub start: usize,
    pub len: usize,
    /// Sub-assembly class.
    pub class: usize,
    pub agent: Agent,
}

impl ModuleSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Frame label used in files for idle and robot frames.
pub const NO_LABEL: i32 = -1;

/// One continuous capture of a single assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub assembly_id: u32,
    pub operator_id: u32,
    pub frames: Vec<LandmarkFrame>,
    /// Per-frame class of the human module covering it, or [`NO_LABEL`].
    pub labels: Vec<i32>,
    /// Module boundaries, human and robot, in order.
    pub modules: Vec<ModuleSpan>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Whether frame `t` lies inside a robot module.
    pub fn robot_active(&self, t: usize) -> bool {
        self.modules
            .iter()
            .any(|m| m.agent == Agent::Robot && (m.start..m.end()).contains(&t))
    }

    /// Frames outside every module.
    pub fn idle_frames(&self) -> Vec<&LandmarkFrame> {
        let mut covered = vec![false; self.frames.len()];
        for m in &self.modules {
            for c in covered.iter_mut().skip(m.start).take(m.len) {
                *c = true;
            }
        }
        self.frames
            .iter()
            .zip(covered)
            .filter(|(_, c)| !c)
            .map(|(f, _)| f)
            .collect()
    }
}

/// Human module spans recovered from per-frame labels: each maximal run of
/// one non-negative label is a module.
pub fn spans_from_labels(labels: &[i32]) -> Vec<ModuleSpan> {
    let mut spans = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        let l = labels[t];
        let start = t;
        while t < labels.len() && labels[t] == l {
            t += 1;
        }
        if l >= 0 {
            spans.push(ModuleSpan {
                start,
                len: t - start,
                class: l as usize,
                agent: Agent::Human,
            });
        }
    }
    spans
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
}

impl Dataset {
    pub fn assembly_ids(&self) -> Vec<u32> {
        self.recordings.iter().map(|r| r.assembly_id).collect()
    }

    pub fn recording(&self, assembly_id: u32) -> Option<&Recording> {
        self.recordings.iter().find(|r| r.assembly_id == assembly_id)
    }

    pub fn operators(&self) -> Vec<u32> {
        let mut ops: Vec<u32> = self.recordings.iter().map(|r| r.operator_id).collect();
        ops.sort_unstable();
        ops.dedup();
        ops
    }

    /// Longest human module, which sets the padded length.
    pub fn t_max(&self) -> usize {
        self.recordings
            .iter()
            .flat_map(|r| r.modules.iter())
            .filter(|m| m.agent == Agent::Human)
            .map(|m| m.len)
            .max()
            .unwrap_or(0)
    }
}
