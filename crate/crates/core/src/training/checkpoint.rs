use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::data::io::write_atomic;
use crate::error::{Error, Result};
use crate::models::{ArchitectureDescription, Network};
use crate::numerics::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "taskseq-checkpoint v1";

/// A trained model: configuration, architecture summary and every named
/// parameter tensor, sealed with a SHA-256 of the contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub description: ArchitectureDescription,
    pub t_max: usize,
    pub fold: usize,
    pub best_epoch: usize,
    pub parameters: ParamStore,
    pub state_hash: String,
}

fn state_hash(config: &ModelConfig, t_max: usize, params: &ParamStore) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update((t_max as u64).to_le_bytes());
    for (name, t) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, net: &Network, t_max: usize, fold: usize, best_epoch: usize) -> Self {
        let state_hash = state_hash(config, t_max, &net.store).expect("config serialises");
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config: config.clone(),
            description: net.description(),
            t_max,
            fold,
            best_epoch,
            parameters: net.store.clone(),
            state_hash,
        }
    }

    /// Rebuilds the network and installs the stored parameters.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::build(&self.config.network, 0)?;
        let fresh = &net.store;
        let same_layout = fresh.len() == self.parameters.len()
            && fresh
                .iter()
                .zip(self.parameters.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !same_layout {
            return Err(Error::Data(
                "checkpoint parameters do not match the configured architecture".into(),
            ));
        }
        net.store = self.parameters.clone();
        Ok(net)
    }

    pub fn verify(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format {:?}", self.format)));
        }
        if state_hash(&self.config, self.t_max, &self.parameters)? != self.state_hash {
            return Err(Error::Data("checkpoint hash mismatch".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(bytes)?;
        c.verify()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
