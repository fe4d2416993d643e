use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frame::{LandmarkFrame, COORDS};
use super::segment::TaskModuleSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadKind {
    Zero,
    Idle,
    Random,
    Real,
}

impl PadKind {
    pub const ALL: [PadKind; 4] = [Self::Zero, Self::Idle, Self::Random, Self::Real];

    pub fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Idle => "idle",
            Self::Random => "random",
            Self::Real => "real",
        }
    }
}

impl std::str::FromStr for PadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pad kind {s:?}")))
    }
}

/// Where a row of a padded sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameOrigin {
    Data,
    /// Synthetic all-zero fill. The only origin excluded by the mask.
    Zero,
    Idle,
    Random,
    History,
}

/// A module padded at the front to exactly `t_max` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaddedSequence {
    /// `t_max x COORDS`
    pub frames: Tensor,
    pub origin: Vec<FrameOrigin>,
    pub valid_length: usize,
    pub pad_kind: PadKind,
    pub label: usize,
    pub operator_id: u32,
    pub assembly_id: u32,
}

impl PaddedSequence {
    pub fn t_max(&self) -> usize {
        self.origin.len()
    }

    /// True for rows holding recorded (or recorded-looking) frames.
    pub fn mask(&self) -> Vec<bool> {
        self.origin.iter().map(|&o| o != FrameOrigin::Zero).collect()
    }

    /// Builds a sequence from explicit rows, oldest first.
    pub fn from_rows(
        rows: Vec<(&[f64], FrameOrigin)>,
        valid_length: usize,
        pad_kind: PadKind,
        seq: &TaskModuleSequence,
    ) -> Self {
        let t = rows.len();
        let mut data = Vec::with_capacity(t * COORDS);
        let mut origin = Vec::with_capacity(t);
        for (r, o) in rows {
            data.extend_from_slice(r);
            origin.push(o);
        }
        Self {
            frames: Tensor::matrix(t, COORDS, data),
            origin,
            valid_length,
            pad_kind,
            label: seq.label,
            operator_id: seq.operator_id,
            assembly_id: seq.assembly_id,
        }
    }
}

/// Sources for the non-zero padding kinds.
#[derive(Debug, Clone, Copy)]
pub struct PadSources<'a> {
    /// Idle-state frames; idle padding takes a contiguous run (wrapping) from
    /// a random start.
    pub idle_pool: &'a [LandmarkFrame],
    /// Sequences whose tails feed random padding.
    pub corpus: &'a [TaskModuleSequence],
}

impl PadSources<'_> {
    pub const EMPTY: PadSources<'static> = PadSources {
        idle_pool: &[],
        corpus: &[],
    };
}

static ZERO_FRAME: [f64; COORDS] = [0.0; COORDS];

/// Pads `seq` at the front to `t_max` frames.
///
/// * zero: all-zero frames.
/// * idle: a contiguous chunk of the idle pool from a random start.
/// * random: the tail of a uniformly chosen other sequence, prepending tails
///   of further draws if one is too short.
/// * real: the frames that preceded the module, zero-filled once the history
///   runs out.
pub fn pad(
    seq: &TaskModuleSequence,
    kind: PadKind,
    t_max: usize,
    sources: PadSources<'_>,
    rng: &mut impl Rng,
) -> Result<PaddedSequence> {
    let n = seq.len();
    if n == 0 {
        return Err(Error::Data("cannot pad an empty sequence".into()));
    }
    if n > t_max {
        return Err(Error::Data(format!(
            "sequence of length {n} exceeds T_max {t_max}"
        )));
    }
    let need = t_max - n;
    let mut prefix: Vec<(&[f64], FrameOrigin)> = Vec::with_capacity(t_max);
    match kind {
        PadKind::Zero => prefix.extend((0..need).map(|_| (&ZERO_FRAME[..], FrameOrigin::Zero))),
        PadKind::Idle if need > 0 => {
            let pool = sources.idle_pool;
            if pool.is_empty() {
                return Err(Error::Data("idle padding needs a non-empty idle pool".into()));
            }
            let start = rng.random_range(0..pool.len());
            prefix.extend(
                (0..need).map(|i| (&pool[(start + i) % pool.len()].coords[..], FrameOrigin::Idle)),
            );
        }
        PadKind::Random if need > 0 => {
            let others: Vec<&TaskModuleSequence> = sources
                .corpus
                .iter()
                .filter(|o| o.key() != seq.key() && !o.is_empty())
                .collect();
            if others.is_empty() {
                return Err(Error::Data(
                    "random padding needs at least one other sequence".into(),
                ));
            }
            // Collected newest first, then reversed.
            let mut rev: Vec<&[f64]> = Vec::with_capacity(need);
            while rev.len() < need {
                let other = others[rng.random_range(0..others.len())];
                let take = (need - rev.len()).min(other.len());
                rev.extend(other.frames.iter().rev().take(take).map(|f| &f.coords[..]));
            }
            prefix.extend(rev.into_iter().rev().map(|r| (r, FrameOrigin::Random)));
        }
        PadKind::Real => {
            let hist = &seq.preceding;
            let have = hist.len().min(need);
            prefix.extend((0..need - have).map(|_| (&ZERO_FRAME[..], FrameOrigin::Zero)));
            prefix.extend(
                hist[hist.len() - have..]
                    .iter()
                    .map(|f| (&f.coords[..], FrameOrigin::History)),
            );
        }
        PadKind::Idle | PadKind::Random => {}
    }
    prefix.extend(seq.frames.iter().map(|f| (&f.coords[..], FrameOrigin::Data)));
    Ok(PaddedSequence::from_rows(prefix, n, kind, seq))
}
