use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, FreezePolicy, TrainConfig};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::harness::mean_char_accuracy;
use crate::imagegen::{GrayImage, LabeledImage};
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::rng::derive_seed;
use crate::{Alphabet, Error, Result, SplitMix64};

/// Mean over batch and positions of `−log softmax(logits)[target]`.
/// `targets` is row-major over `[B, max_len]`, PAD included.
pub fn cross_entropy_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// PAD-padded label indices for a batch, flattened.
pub fn encode_targets<S: AsRef<str>>(labels: &[S], max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(labels.len() * max_len);
    for l in labels {
        out.extend(Alphabet.encode_padded(l.as_ref(), max_len)?);
    }
    Ok(out)
}

/// Where training starts from.
#[derive(Clone, Debug)]
pub enum Start {
    Init { model: ModelConfig, seed: u64 },
    Checkpoint(ModelParams<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    /// Held-out character accuracy, when a held-out set was given.
    pub char_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    /// CSV with header `iteration,loss,char_acc`; a missing accuracy is an
    /// empty field.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "loss", "char_acc"])?;
        for e in &self.entries {
            out.write_record([
                e.iteration.to_string(),
                e.loss.to_string(),
                e.char_acc.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|e| Error::storage("<csv>", e))?;
        Ok(())
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

/// Mean character accuracy of inference-mode predictions.
pub fn evaluate_char_accuracy(params: &ModelParams<f32>, samples: &[LabeledImage]) -> Result<f64> {
    let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let preds = params.predict_batch(&images)?;
    let pairs: Vec<(&str, &str)> = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| (p.text.as_str(), s.label.as_str()))
        .collect();
    mean_char_accuracy(&pairs)
}

pub fn train_loop(
    train: &[LabeledImage],
    held_out: &[LabeledImage],
    config: &TrainConfig,
    start: Start,
) -> Result<(ModelParams<f32>, TrainLog)> {
    train_loop_with(train, held_out, config, start, &mut |_| {})
}

/// [`train_loop`] with a callback invoked on every log entry.
pub fn train_loop_with(
    train: &[LabeledImage],
    held_out: &[LabeledImage],
    config: &TrainConfig,
    start: Start,
    on_log: &mut dyn FnMut(&LogEntry),
) -> Result<(ModelParams<f32>, TrainLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut params = match start {
        Start::Init { model, seed } => {
            if config.freeze_policy == FreezePolicy::EncoderFrozen {
                return Err(Error::Config(
                    "an encoder-frozen run must start from a checkpoint".into(),
                ));
            }
            ModelParams::<f32>::init(&model, seed)?
        }
        Start::Checkpoint(p) => {
            p.validate()?;
            p
        }
    };
    let cfg = params.config.clone();
    let (w, h) = (cfg.canvas.width, cfg.canvas.height);
    let mut inputs = Vec::with_capacity(train.len());
    let mut targets = Vec::with_capacity(train.len());
    for s in train {
        if s.image.width() != w || s.image.height() != h {
            return Err(Error::Data(format!(
                "sample {} is {}x{}, model expects {w}x{h}",
                s.id,
                s.image.width(),
                s.image.height()
            )));
        }
        inputs.push(s.image.pixels().iter().map(|&p| 1.0 - p).collect::<Vec<f32>>());
        targets.push(
            Alphabet
                .encode_padded(&s.label, cfg.max_len)
                .map_err(|e| Error::Data(format!("sample {}: {e}", s.id)))?,
        );
    }
    let held_out = &held_out[..held_out.len().min(config.eval_samples)];

    let freeze = config.freeze_policy;
    let trainable = move |slot: usize| {
        !ModelConfig::is_running_stat_slot(slot)
            && !(freeze == FreezePolicy::EncoderFrozen && ModelConfig::is_encoder_slot(slot))
    };
    let mut adam = AdamState::new(&params.tensors);
    let mut order_rng = SplitMix64::new(derive_seed(config.seed, 1));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = TrainLog::default();
    let (mut window_loss, mut window_n) = (0.0, 0usize);

    for it in 1..=config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut x = Vec::with_capacity(batch.len() * w * h);
        let mut y = Vec::with_capacity(batch.len() * cfg.max_len);
        for &i in &batch {
            x.extend_from_slice(&inputs[i]);
            y.extend_from_slice(&targets[i]);
        }
        let input = Tensor::new(&[batch.len(), 1, h, w], x)?;
        let mut tape = Tape::<f32>::new();
        let graph = params.forward(&mut tape, input, Mode::Train, &trainable)?;
        let loss = cross_entropy_loss(&mut tape, graph.logits, &y)?;
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Data(format!("loss diverged at iteration {it}")));
        }
        let mut grads = tape.backward(loss)?;
        let slot_grads: Vec<Option<Tensor<f32>>> = graph
            .leaves
            .iter()
            .map(|leaf| leaf.and_then(|v| grads.take(v)))
            .collect();
        drop(tape);
        params.apply_running(&graph);
        adam_step(&mut params.tensors, &slot_grads, &mut adam, &config.adam, config.learning_rate)?;

        window_loss += loss_value;
        window_n += 1;
        if it == 1 || it % config.eval_every == 0 || it == config.iterations {
            let char_acc = if held_out.is_empty() {
                None
            } else {
                Some(evaluate_char_accuracy(&params, held_out)?)
            };
            let entry = LogEntry {
                iteration: it,
                loss: window_loss / window_n as f64,
                char_acc,
            };
            on_log(&entry);
            log.entries.push(entry);
            window_loss = 0.0;
            window_n = 0;
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_alphabet() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[3, 8, 37]));
        let targets: Vec<usize> = (0..24).map(|i| i % 37).collect();
        let l = cross_entropy_loss(&mut tape, z, &targets).unwrap();
        assert!((tape.value(l).item() - 37f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_cost_nothing() {
        let targets = [3usize, 0, 36, 5];
        let mut data = vec![0.0f64; 4 * 37];
        for (r, t) in targets.iter().enumerate() {
            data[r * 37 + t] = 1000.0;
        }
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(&[2, 2, 37], data).unwrap());
        let l = cross_entropy_loss(&mut tape, z, &targets).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn hand_computed_loss() {
        // Position 1: logits (1, 2, 3), target 2. Position 2: (0, 0, ln 2), target 0.
        // −log(e³/(e+e²+e³)) = 0.40760596; −log(1/4) = 1.38629436.
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64(&[1, 2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 2f64.ln()]).unwrap());
        let l = cross_entropy_loss(&mut tape, z, &[2, 0]).unwrap();
        assert!((tape.value(l).item() - (0.40760596 + 1.38629436) / 2.0).abs() < 1e-7);
        assert!(matches!(cross_entropy_loss(&mut tape, z, &[3, 0]), Err(Error::Contract(_))));
    }

    #[test]
    fn targets_are_padded() {
        let t = encode_targets(&["AB", ""], 3).unwrap();
        assert_eq!(t, vec![0, 1, 36, 36, 36, 36]);
        assert!(encode_targets(&["ABCD"], 3).is_err());
    }

    #[test]
    fn log_csv() {
        let log = TrainLog {
            entries: vec![
                LogEntry { iteration: 1, loss: 3.5, char_acc: None },
                LogEntry { iteration: 10, loss: 1.25, char_acc: Some(0.5) },
            ],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,loss,char_acc\n1,3.5,\n10,1.25,0.5\n");
    }

    #[test]
    fn empty_and_frozen_init_are_rejected() {
        let cfg = TrainConfig::default();
        let start = || Start::Init { model: ModelConfig::default(), seed: 0 };
        assert!(matches!(train_loop(&[], &[], &cfg, start()), Err(Error::Data(_))));
        let sample = LabeledImage { id: 0, label: "A".into(), image: GrayImage::white(160, 32) };
        let frozen = TrainConfig { freeze_policy: FreezePolicy::EncoderFrozen, ..cfg };
        assert!(matches!(train_loop(&[sample], &[], &frozen, start()), Err(Error::Config(_))));
    }
}
