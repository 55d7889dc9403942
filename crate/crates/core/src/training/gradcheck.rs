use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::imagegen::Canvas;
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::rng::derive_seed;
use crate::{Error, Result, SplitMix64, ALPHABET_SIZE};

const STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Probe {
    pub slot: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    /// Coordinates redrawn because ±h crossed a ReLU or max-pool kink.
    pub redrawn: usize,
}

impl ModelConfig {
    /// Small canvas and channels with the full decoder; used for gradient
    /// checks.
    pub fn tiny() -> Self {
        Self {
            conv_channels: [4, 6, 8, 8],
            attn_dim: 128,
            attn_layers: 2,
            max_len: 4,
            alphabet_size: ALPHABET_SIZE,
            canvas: Canvas {
                width: 32,
                height: 16,
            },
        }
    }
}

/// Compares the analytic gradient of the training loss (train-mode batch
/// norm, batch of two random images) with central differences at
/// `n_probes` trainable coordinates drawn from `seed`. Runs in f64.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
///
/// Central differences are meaningless across a non-differentiable point,
/// so a coordinate whose ±h evaluations take different ReLU or max-pool
/// branches than the base point is replaced by a fresh draw.
pub fn gradient_check(config: &ModelConfig, seed: u64, n_probes: usize) -> Result<GradCheckReport> {
    if n_probes == 0 {
        return Err(Error::Config("n_probes must be at least 1".into()));
    }
    let mut params = ModelParams::<f64>::init(config, derive_seed(seed, 0))?;
    let mut rng = SplitMix64::new(derive_seed(seed, 1));
    let (w, h) = (config.canvas.width, config.canvas.height);
    let n = 2;
    let input = Tensor::new(&[n, 1, h, w], (0..n * w * h).map(|_| rng.next_f64()).collect())?;
    let targets: Vec<usize> = (0..n * config.max_len)
        .map(|_| rng.below(config.alphabet_size))
        .collect();

    let trainable = |slot: usize| !ModelConfig::is_running_stat_slot(slot);
    let loss_of = |p: &ModelParams<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let g = p.forward(&mut tape, input.clone(), Mode::Train, &trainable)?;
        let l = tape.cross_entropy(g.logits, &targets)?;
        Ok((tape.value(l).item(), tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let g = params.forward(&mut tape, input.clone(), Mode::Train, &trainable)?;
    let l = tape.cross_entropy(g.logits, &targets)?;
    let grads = tape.backward(l)?;
    let base_signature = tape.branch_signature();

    let slots: Vec<usize> = (0..params.tensors.len()).filter(|&s| trainable(s)).collect();
    let total: usize = slots.iter().map(|&s| params.tensors[s].numel()).sum();
    let mut probe_rng = SplitMix64::new(derive_seed(seed, 2));
    let mut probes = Vec::with_capacity(n_probes);
    let mut redrawn = 0;
    while probes.len() < n_probes {
        let mut k = probe_rng.below(total);
        let mut slot = slots[0];
        for &s in &slots {
            let len = params.tensors[s].numel();
            if k < len {
                slot = s;
                break;
            }
            k -= len;
        }
        let index = k;
        let analytic = g.leaves[slot]
            .and_then(|v| grads.get(v))
            .map_or(0.0, |t| t.data()[index]);
        let orig = params.tensors[slot].data()[index];
        params.tensors[slot].data_mut()[index] = orig + STEP;
        let (plus, sig_plus) = loss_of(&params)?;
        params.tensors[slot].data_mut()[index] = orig - STEP;
        let (minus, sig_minus) = loss_of(&params)?;
        params.tensors[slot].data_mut()[index] = orig;
        if sig_plus != base_signature || sig_minus != base_signature {
            redrawn += 1;
            if redrawn > 100 * n_probes {
                return Err(Error::Contract("no smooth coordinates found to probe".into()));
            }
            continue;
        }
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        probes.push(Probe {
            slot,
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_rel_error,
        redrawn,
    })
}
