//! The three sequence classifiers behind one [`Network`] type.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encoder_block, positional_encode, BlockOptions, EncoderBlockParams};
use crate::cells::{unroll, CellKind, LstmParams, RecurrentCell};
use crate::error::{Error, Result};
use crate::layers::{pool, ClassifierHead, Linear, Pooling};
use crate::numerics::{maybe_dropout, Dropout, Graph, ParamStore, Tensor, Var};
use crate::xlstm::{build_stack, xlstm_forward, XlstmNet, XlstmStackConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    Transformer,
    Xlstm,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Self::Lstm, Self::Transformer, Self::Xlstm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lstm => "lstm",
            Self::Transformer => "transformer",
            Self::Xlstm => "xlstm",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Self::Lstm),
            "transformer" => Ok(Self::Transformer),
            "xlstm" => Ok(Self::Xlstm),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub units: usize,
    /// Dropout on the input features.
    pub dropout: f64,
    /// Dropout on `h_{t-1}`, one mask per sequence.
    pub recurrent_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Width of the input projection; `None` attends over raw features.
    pub model_dim: Option<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub blocks: usize,
    pub conv_width: usize,
    pub dropout: f64,
    pub positional_encoding: bool,
    pub mask_padding: bool,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub dense_units: usize,
    pub dense_dropout: f64,
    pub layer_norm_eps: f64,
    pub lstm: LstmConfig,
    pub transformer: TransformerConfig,
    pub xlstm: XlstmStackConfig,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..1.0).contains(&r);
        let rates = [
            ("dense dropout", self.dense_dropout),
            ("lstm dropout", self.lstm.dropout),
            ("recurrent dropout", self.lstm.recurrent_dropout),
            ("transformer dropout", self.transformer.dropout),
            ("xlstm dropout", self.xlstm.dropout),
        ];
        for (name, r) in rates {
            if !rate_ok(r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1)")));
            }
        }
        if self.input_dim == 0 || self.num_classes < 2 || self.dense_units == 0 {
            return Err(Error::Config(
                "input dim, dense units must be positive and classes >= 2".into(),
            ));
        }
        if self.layer_norm_eps < 0.0 {
            return Err(Error::Config("layer norm eps must be non-negative".into()));
        }
        match self.architecture {
            Architecture::Lstm if self.lstm.units == 0 => {
                Err(Error::Config("LSTM needs at least one unit".into()))
            }
            Architecture::Transformer => {
                let t = &self.transformer;
                if t.heads == 0 || t.head_dim == 0 || t.blocks == 0 || t.conv_width == 0 {
                    Err(Error::Config(
                        "transformer heads, head dim, blocks and conv width must be positive".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            Architecture::Xlstm => self.xlstm.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Body {
    Lstm {
        cell: LstmParams,
        head: ClassifierHead,
    },
    Transformer {
        input_proj: Option<Linear>,
        blocks: Vec<EncoderBlockParams>,
        head: ClassifierHead,
    },
    Xlstm(XlstmNet),
}

/// Human-readable summary of a built network, stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureDescription {
    pub architecture: Architecture,
    pub layers: Vec<String>,
    pub num_parameters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub body: Body,
}

impl Network {
    /// Builds and initialises a network from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let body = match c.architecture {
            Architecture::Lstm => {
                let cell = LstmParams::init(&mut store, "lstm", c.input_dim, c.lstm.units, &mut rng);
                let head = ClassifierHead::init(
                    &mut store,
                    "head",
                    c.lstm.units,
                    c.dense_units,
                    c.num_classes,
                    &mut rng,
                );
                Body::Lstm { cell, head }
            }
            Architecture::Transformer => {
                let t = &c.transformer;
                let input_proj = t
                    .model_dim
                    .map(|d| Linear::init(&mut store, "input", c.input_dim, d, &mut rng));
                let d = t.model_dim.unwrap_or(c.input_dim);
                let blocks = (0..t.blocks)
                    .map(|i| {
                        EncoderBlockParams::init(
                            &mut store,
                            &format!("encoder{}", i + 1),
                            d,
                            t.heads,
                            t.head_dim,
                            t.conv_width,
                            t.head_dim,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let head =
                    ClassifierHead::init(&mut store, "head", d, c.dense_units, c.num_classes, &mut rng);
                Body::Transformer {
                    input_proj,
                    blocks,
                    head,
                }
            }
            Architecture::Xlstm => Body::Xlstm(build_stack(
                &mut store,
                &c.xlstm,
                c.input_dim,
                c.dense_units,
                c.num_classes,
                &mut rng,
            )?),
        };
        Ok(Self {
            config: config.clone(),
            store,
            body,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn description(&self) -> ArchitectureDescription {
        let layers = match &self.body {
            Body::Lstm { cell, .. } => vec![format!("lstm({})", cell.hidden)],
            Body::Transformer {
                input_proj, blocks, ..
            } => {
                let mut v: Vec<String> = input_proj
                    .iter()
                    .map(|p| format!("linear({})", p.output_dim))
                    .collect();
                v.extend(blocks.iter().map(|b| {
                    format!(
                        "encoder(heads={}, head_dim={}, conv={})",
                        b.attention.heads, b.attention.head_dim, b.conv_width
                    )
                }));
                v
            }
            Body::Xlstm(net) => net
                .blocks
                .iter()
                .map(|b| match b.kind() {
                    CellKind::Slstm => "slstm".to_string(),
                    _ => "mlstm".to_string(),
                })
                .collect(),
        };
        ArchitectureDescription {
            architecture: self.config.architecture,
            layers,
            num_parameters: self.num_parameters(),
        }
    }

    /// Class posterior (`1 x classes`) for one padded sequence. `mask` marks
    /// positions holding data rather than synthetic fill. Dropout is active
    /// only when `dropout` is given.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        xs: &Tensor,
        mask: &[bool],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let c = &self.config;
        let (t, width) = xs.dims2();
        if width != c.input_dim || mask.len() != t || t == 0 {
            return Err(Error::Shape(format!(
                "network input {:?} with mask length {}, expected width {}",
                xs.shape(),
                mask.len(),
                c.input_dim
            )));
        }
        let x = g.input(xs.clone());
        match &self.body {
            Body::Lstm { cell, head } => {
                let mut bound = cell.bind(g);
                let x = maybe_dropout(g, x, c.lstm.dropout, dropout.as_deref_mut());
                if let Some(d) = dropout.as_deref_mut() {
                    if c.lstm.recurrent_dropout > 0.0 {
                        let m = d.mask(1, cell.hidden, c.lstm.recurrent_dropout);
                        bound.recurrent_mask = Some(g.input(m));
                    }
                }
                let s0 = bound.zero_state(g);
                let (hs, _) = unroll(g, &bound, x, s0)?;
                let pooled = pool(g, hs, mask, Pooling::LastUnmasked)?;
                Ok(head.forward(g, pooled, c.dense_dropout, dropout))
            }
            Body::Transformer {
                input_proj,
                blocks,
                head,
            } => {
                let tc = &c.transformer;
                let mut h = match input_proj {
                    Some(p) => p.forward(g, x),
                    None => x,
                };
                if tc.positional_encoding {
                    h = positional_encode(g, h);
                }
                let opts = BlockOptions {
                    mask_attention: tc.mask_padding,
                    dropout: tc.dropout,
                    layer_norm_eps: c.layer_norm_eps,
                };
                for block in blocks {
                    let bound = block.bind(g);
                    h = encoder_block(g, &bound, h, mask, opts, dropout.as_deref_mut())?;
                }
                let pool_mask: Vec<bool> = if tc.mask_padding {
                    mask.to_vec()
                } else {
                    vec![true; t]
                };
                let pooled = pool(g, h, &pool_mask, tc.pooling)?;
                Ok(head.forward(g, pooled, c.dense_dropout, dropout))
            }
            Body::Xlstm(net) => xlstm_forward(
                g,
                net,
                x,
                mask,
                c.layer_norm_eps,
                c.dense_dropout,
                dropout,
            ),
        }
    }

    /// Evaluation-mode posterior as a plain vector.
    pub fn posterior(&self, xs: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let p = self.forward(&mut g, xs, mask, None)?;
        Ok(g.value(p).data().to_vec())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
