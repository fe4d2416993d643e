use serde::{Deserialize, Serialize};

use super::frame::{Agent, LandmarkFrame, Recording, NUM_CLASSES};
use crate::error::{Error, Result};

/// One human task module cut from a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModuleSequence {
    pub frames: Vec<LandmarkFrame>,
    pub label: usize,
    pub operator_id: u32,
    pub assembly_id: u32,
    /// Index of the first frame within its recording.
    pub start: usize,
    /// Frames that preceded the module in the recording, oldest first.
    pub preceding: Vec<LandmarkFrame>,
}

impl TaskModuleSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Identity of the module within a dataset.
    pub fn key(&self) -> (u32, usize) {
        (self.assembly_id, self.start)
    }
}

/// Checks that module spans are ordered, disjoint, inside the recording and
/// carry valid classes.
pub fn validate_spans(rec: &Recording) -> Result<()> {
    let mut end = 0;
    for (i, m) in rec.modules.iter().enumerate() {
        if m.len == 0 {
            return Err(Error::Data(format!(
                "assembly {}: module {i} is empty",
                rec.assembly_id
            )));
        }
        if m.start < end {
            return Err(Error::Data(format!(
                "assembly {}: module {i} starts at frame {} before the previous module ends at {end}",
                rec.assembly_id, m.start
            )));
        }
        if m.end() > rec.frames.len() {
            return Err(Error::Data(format!(
                "assembly {}: module {i} ends at frame {} past the recording length {}",
                rec.assembly_id,
                m.end(),
                rec.frames.len()
            )));
        }
        if m.class >= NUM_CLASSES {
            return Err(Error::Data(format!(
                "assembly {}: module {i} has class {} outside 0..{NUM_CLASSES}",
                rec.assembly_id, m.class
            )));
        }
        end = m.end();
    }
    Ok(())
}

/// Cuts every human module out of `rec`. Each sequence keeps up to
/// `history` frames of the recording that preceded it.
pub fn segment(rec: &Recording, history: usize) -> Result<Vec<TaskModuleSequence>> {
    validate_spans(rec)?;
    Ok(rec
        .modules
        .iter()
        .filter(|m| m.agent == Agent::Human)
        .map(|m| TaskModuleSequence {
            frames: rec.frames[m.start..m.end()].to_vec(),
            label: m.class,
            operator_id: rec.operator_id,
            assembly_id: rec.assembly_id,
            start: m.start,
            preceding: rec.frames[m.start.saturating_sub(history)..m.start].to_vec(),
        })
        .collect())
}

/// Frames of every recording that lie outside all modules, concatenated.
pub fn idle_pool(recordings: &[&Recording]) -> Vec<LandmarkFrame> {
    recordings
        .iter()
        .flat_map(|r| r.idle_frames().into_iter().cloned())
        .collect()
}
