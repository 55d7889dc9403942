//! The recogniser: a four-layer convolutional encoder with three batch
//! normalisation layers, read column by column, and a stack of cross-attention
//! layers driven by learned position queries.
//!
//! Every learnable or persistent value lives in [`ModelParams::tensors`], in
//! the order given by [`ModelConfig::param_shapes`]:
//!
//! | slots            | contents                                              |
//! |------------------|-------------------------------------------------------|
//! | 0–7              | conv1..conv4 kernel `[Cout, Cin, 3, 3]`, bias `[Cout]` |
//! | 8–19             | BN1..BN3 gamma, beta, running mean, running var `[C]`  |
//! | 20–21            | column projection weight `[C4·H/4, D]`, bias `[D]`     |
//! | 22 + 8l + 2p     | attention layer `l`, projection `p` (q, k, v, o) weight `[D, D]`, then bias `[D]` |
//! | 22 + 8L          | position queries `[max_len, D]`                        |
//! | 23 + 8L, 24 + 8L | output projection weight `[D, A]`, bias `[A]`          |

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{Graph, Mode, Prediction};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::imagegen::Canvas;
use crate::{Error, Result, SplitMix64, ALPHABET_SIZE};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_channels: [usize; 4],
    pub attn_dim: usize,
    pub attn_layers: usize,
    pub max_len: usize,
    pub alphabet_size: usize,
    pub canvas: Canvas,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_channels: [16, 32, 48, 64],
            attn_dim: 128,
            attn_layers: 2,
            max_len: 8,
            alphabet_size: ALPHABET_SIZE,
            canvas: Canvas::default(),
        }
    }
}

/// Attention projections in slot order.
pub const ATTN_PROJECTIONS: [&str; 4] = ["query", "key", "value", "output"];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.contains(&0) || self.attn_dim == 0 || self.attn_layers == 0 {
            return Err(Error::Config("layer widths and counts must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.alphabet_size != ALPHABET_SIZE {
            return Err(Error::Config(format!(
                "alphabet_size must be {ALPHABET_SIZE}, got {}",
                self.alphabet_size
            )));
        }
        let Canvas { width, height } = self.canvas;
        if width < 4 || height < 4 || width % 4 != 0 || height % 4 != 0 {
            return Err(Error::Config(format!(
                "canvas {width}x{height} must be a positive multiple of 4 on both sides"
            )));
        }
        Ok(())
    }

    /// Length of the feature sequence the decoder attends over.
    pub fn seq_len(&self) -> usize {
        self.canvas.width / 4
    }

    /// Flattened length of one feature-map column.
    pub fn column_dim(&self) -> usize {
        self.conv_channels[3] * self.canvas.height / 4
    }

    pub fn attn_slot(&self, layer: usize, projection: usize) -> usize {
        22 + 8 * layer + 2 * projection
    }

    pub fn position_slot(&self) -> usize {
        22 + 8 * self.attn_layers
    }

    pub fn output_slot(&self) -> usize {
        self.position_slot() + 1
    }

    pub fn n_tensors(&self) -> usize {
        self.output_slot() + 2
    }

    /// Slots belonging to the encoder (convolutions, batch norm, column
    /// projection).
    pub fn is_encoder_slot(slot: usize) -> bool {
        slot < 22
    }

    /// Running statistics are persisted but never receive gradients.
    pub fn is_running_stat_slot(slot: usize) -> bool {
        (8..20).contains(&slot) && (slot - 8) % 4 >= 2
    }

    /// Named shapes in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.conv_channels;
        let d = self.attn_dim;
        let mut out = Vec::with_capacity(self.n_tensors());
        let mut cin = 1;
        for (i, &cout) in c.iter().enumerate() {
            out.push((format!("conv{}.kernel", i + 1), vec![cout, cin, 3, 3]));
            out.push((format!("conv{}.bias", i + 1), vec![cout]));
            cin = cout;
        }
        for (j, &ch) in c[..3].iter().enumerate() {
            for part in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("bn{}.{part}", j + 1), vec![ch]));
            }
        }
        out.push(("columns.weight".into(), vec![self.column_dim(), d]));
        out.push(("columns.bias".into(), vec![d]));
        for l in 0..self.attn_layers {
            for p in ATTN_PROJECTIONS {
                out.push((format!("attn{}.{p}.weight", l + 1), vec![d, d]));
                out.push((format!("attn{}.{p}.bias", l + 1), vec![d]));
            }
        }
        out.push(("position_queries".into(), vec![self.max_len, d]));
        out.push(("output.weight".into(), vec![d, self.alphabet_size]));
        out.push(("output.bias".into(), vec![self.alphabet_size]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// All weights and persistent statistics of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform initialisation: conv kernels U(±√(6/fan_in)),
    /// linear weights U(±√(3/fan_in)), position queries U(±1). Biases and
    /// beta start at 0, gamma at 1, running mean 0 and running var 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let shapes = config.param_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        for (slot, (name, shape)) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let fill = |v: f64| Tensor::full(shape, T::of(v));
            let t = if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("running_mean") {
                fill(0.0)
            } else if name.ends_with(".gamma") || name.ends_with("running_var") {
                fill(1.0)
            } else {
                let bound = if slot == config.position_slot() {
                    1.0
                } else if shape.len() == 4 {
                    (6.0 / (shape[1] * 9) as f64).sqrt()
                } else {
                    (3.0 / shape[0] as f64).sqrt()
                };
                let data = (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect();
                Tensor::new(shape, data)?
            };
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Checks tensor count and shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
