use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cells::{ForgetMode, SlstmGating};
use crate::data::{AugmentationConfig, PadKind, COORDS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::layers::Pooling;
use crate::models::{Architecture, LstmConfig, NetworkConfig, TransformerConfig};
use crate::numerics::DEFAULT_LAYER_NORM_EPS;
use crate::xlstm::{BlockStyle, XlstmStackConfig};

/// Everything needed to train one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Preset the configuration was derived from.
    pub preset: String,
    pub network: NetworkConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augmentation: AugmentationConfig,
    pub pad_kind: PadKind,
    /// Standardise each sequence's data rows to zero mean and unit variance.
    pub standardize: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        self.network.architecture
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.augmentation.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if self.network.input_dim != COORDS || self.network.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "networks take {COORDS} inputs and {NUM_CLASSES} classes"
            )));
        }
        Ok(())
    }

    /// Merges a JSON object of overrides into this configuration. Keys must
    /// name existing fields.
    pub fn with_overrides(&self, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overrides, "")?;
        let cfg: ModelConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::Config(format!("unknown config key {here:?}"))),
                }
            }
            Ok(())
        }
        _ => Err(Error::Config(format!("override at {path:?} must be an object"))),
    }
}

fn base_network(architecture: Architecture) -> NetworkConfig {
    NetworkConfig {
        architecture,
        input_dim: COORDS,
        num_classes: NUM_CLASSES,
        dense_units: 128,
        dense_dropout: 0.0,
        layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        lstm: LstmConfig {
            units: 256,
            dropout: 0.0,
            recurrent_dropout: 0.0,
        },
        transformer: TransformerConfig {
            model_dim: None,
            heads: 4,
            head_dim: 256,
            blocks: 2,
            conv_width: 2,
            dropout: 0.2,
            positional_encoding: true,
            mask_padding: true,
            pooling: Pooling::Mean,
        },
        xlstm: XlstmStackConfig {
            num_blocks: 7,
            slstm_positions: vec![3, 5],
            heads: 4,
            head_dim: 256,
            forget_mode: ForgetMode::Sigmoid,
            slstm_gating: SlstmGating::Stabilized,
            dropout: 0.0,
            style: BlockStyle::ResidualPrenorm,
        },
    }
}

fn aug(noise_p: f64, resize_p: f64, noise_std: f64, resize_std: f64) -> AugmentationConfig {
    AugmentationConfig {
        noise_probability: noise_p,
        resize_probability: resize_p,
        noise_std,
        resize_std,
    }
}

/// Hyperparameters tuned on zero-padded sequences.
fn full_zero(arch: Architecture) -> ModelConfig {
    let network = base_network(arch);
    let (epochs, batch_size, learning_rate, augmentation) = match arch {
        Architecture::Lstm => (500, 64, 1e-5, aug(0.0, 0.0, 0.0, 0.0)),
        Architecture::Transformer => (1000, 32, 2.5e-5, aug(0.3, 0.3, 0.05, 0.1)),
        Architecture::Xlstm => (300, 32, 2.5e-5, aug(0.2, 0.0, 0.05, 0.0)),
    };
    ModelConfig {
        preset: format!("paper-zero-{}", arch.name()),
        network,
        epochs,
        batch_size,
        learning_rate,
        augmentation,
        pad_kind: PadKind::Zero,
        standardize: false,
        seed: 0,
    }
}

/// Differences for real-padded sequences.
fn full_real(arch: Architecture) -> ModelConfig {
    let mut c = full_zero(arch);
    c.preset = format!("paper-real-{}", arch.name());
    c.pad_kind = PadKind::Real;
    match arch {
        Architecture::Lstm => {
            c.augmentation = aug(0.2, 0.2, 0.025, 0.025);
            c.network.lstm.recurrent_dropout = 0.2;
        }
        Architecture::Transformer => c.augmentation = aug(0.2, 0.2, 0.05, 0.05),
        Architecture::Xlstm => {
            c.augmentation = aug(0.2, 0.2, 0.01, 0.005);
            c.network.xlstm.dropout = 0.2;
        }
    }
    c
}

/// Small models and budgets that train in well under a minute per fold on
/// the synthetic data.
fn desk(pad: PadKind, arch: Architecture) -> ModelConfig {
    let mut c = full_zero(arch);
    c.preset = format!("{}-{}-desk", pad.name(), arch.name());
    c.pad_kind = pad;
    c.network.dense_units = 32;
    c.batch_size = 16;
    match arch {
        Architecture::Lstm => {
            c.network.lstm.units = 32;
            c.epochs = 120;
            c.learning_rate = 3e-3;
        }
        Architecture::Transformer => {
            let t = &mut c.network.transformer;
            t.heads = 2;
            t.head_dim = 16;
            t.blocks = 1;
            t.dropout = 0.1;
            t.positional_encoding = false;
            t.mask_padding = false;
            c.epochs = 60;
            c.learning_rate = 1e-3;
            c.augmentation = aug(0.3, 0.3, 0.005, 0.1);
        }
        Architecture::Xlstm => {
            let x = &mut c.network.xlstm;
            x.num_blocks = 3;
            x.slstm_positions = vec![2];
            x.heads = 2;
            x.head_dim = 8;
            c.epochs = 60;
            c.learning_rate = 2e-3;
            c.augmentation = aug(0.2, 0.0, 0.005, 0.0);
        }
    }
    c
}

/// Every preset name, full-size presets first.
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for pad in ["zero", "real"] {
        for arch in Architecture::ALL {
            names.push(format!("paper-{pad}-{}", arch.name()));
        }
    }
    for pad in PadKind::ALL {
        for arch in Architecture::ALL {
            names.push(format!("{}-{}-desk", pad.name(), arch.name()));
        }
    }
    names
}

/// Resolves a preset by name.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let unknown = || Error::Config(format!("unknown preset {name:?}"));
    let parts: Vec<&str> = name.split('-').collect();
    match parts.as_slice() {
        ["paper", "zero", arch] => Ok(full_zero(arch.parse().map_err(|_| unknown())?)),
        ["paper", "real", arch] => Ok(full_real(arch.parse().map_err(|_| unknown())?)),
        [pad, arch, "desk"] => Ok(desk(
            pad.parse().map_err(|_| unknown())?,
            arch.parse().map_err(|_| unknown())?,
        )),
        _ => Err(unknown()),
    }
}

/// The desk preset for an architecture and padding kind.
pub fn desk_preset(arch: Architecture, pad: PadKind) -> ModelConfig {
    desk(pad, arch)
}
