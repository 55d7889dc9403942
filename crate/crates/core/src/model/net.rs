use super::{ModelConfig, ModelParams, BN_EPS, BN_MOMENTUM};
use crate::autodiff::{BatchNormMode, Scalar, Tape, Tensor, Var};
use crate::imagegen::GrayImage;
use crate::{Alphabet, Result, PAD_INDEX};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the encoder; running statistics are refreshed.
    Train,
    /// Running statistics only; outputs do not depend on the batch.
    Infer,
}

/// Handles into one forward pass.
pub struct Graph {
    /// `[N, max_len, alphabet]`
    pub logits: Var,
    /// `[N, S, D]`
    pub features: Var,
    /// Per decoder layer, `[N, max_len, S]`.
    pub attention: Vec<Var>,
    /// Leaf per parameter slot; `None` for running statistics.
    pub leaves: Vec<Option<Var>>,
    /// Refreshed running statistics `(slot, value)` from a train-mode pass.
    pub running: Vec<(usize, Tensor<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub text: String,
    /// One value in (0, 1] per character of `text`.
    pub confidences: Vec<f32>,
}

impl Prediction {
    pub fn mean_confidence(&self) -> f64 {
        if self.confidences.is_empty() {
            return 0.0;
        }
        self.confidences.iter().map(|&c| c as f64).sum::<f64>() / self.confidences.len() as f64
    }
}

/// Fixed sinusoidal position code added to the projected columns so that
/// position queries can address absolute locations.
pub(crate) fn position_code(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for s in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = s as f64 / rate;
            out[s * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

impl<T: Scalar> ModelParams<T> {
    /// Stacks images into `[N, 1, H, W]` with ink mapped to 1 and paper to 0.
    pub fn input_tensor(&self, images: &[&GrayImage]) -> Result<Tensor<T>> {
        let (w, h) = (self.config.canvas.width, self.config.canvas.height);
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if img.width() != w || img.height() != h {
                return Err(crate::Error::Shape(format!(
                    "image is {}x{}, model expects {w}x{h}",
                    img.width(),
                    img.height()
                )));
            }
            data.extend(img.pixels().iter().map(|&p| T::of(1.0 - p as f64)));
        }
        Tensor::new(&[images.len(), 1, h, w], data)
    }

    fn add_leaves(&self, tape: &mut Tape<T>, trainable: &dyn Fn(usize) -> bool) -> Vec<Option<Var>> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(slot, t)| {
                (!ModelConfig::is_running_stat_slot(slot))
                    .then(|| tape.leaf(t.clone(), trainable(slot)))
            })
            .collect()
    }

    /// Records the full network on `tape`. Slots for which `trainable`
    /// returns false become constants. The encoder uses batch statistics
    /// only in [`Mode::Train`] and only while its batch-norm parameters are
    /// trainable, so a frozen encoder behaves exactly as at inference.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: Tensor<T>,
        mode: Mode,
        trainable: &dyn Fn(usize) -> bool,
    ) -> Result<Graph> {
        let leaves = self.add_leaves(tape, trainable);
        let p = |slot: usize| leaves[slot].expect("parameter leaf");
        let input_shape = input.shape().to_vec();
        let n = input_shape[0];
        let x = tape.constant(input);
        let mut running = Vec::new();

        let mut bn = |tape: &mut Tape<T>, x: Var, j: usize| -> Result<Var> {
            let s = 8 + 4 * j;
            let batch_stats = mode == Mode::Train && trainable(s);
            if batch_stats {
                let mut mean = self.tensors[s + 2].data().to_vec();
                let mut var = self.tensors[s + 3].data().to_vec();
                let m = BatchNormMode::Train {
                    running_mean: &mut mean,
                    running_var: &mut var,
                    momentum: T::of(BN_MOMENTUM),
                };
                let y = tape.batchnorm2d(x, p(s), p(s + 1), T::of(BN_EPS), m)?;
                let c = mean.len();
                running.push((s + 2, Tensor::new(&[c], mean.iter().map(|v| v.f64()).collect())?));
                running.push((s + 3, Tensor::new(&[c], var.iter().map(|v| v.f64()).collect())?));
                Ok(y)
            } else {
                let m = BatchNormMode::Infer {
                    running_mean: self.tensors[s + 2].data(),
                    running_var: self.tensors[s + 3].data(),
                };
                tape.batchnorm2d(x, p(s), p(s + 1), T::of(BN_EPS), m)
            }
        };

        let h = tape.conv2d(x, p(0), p(1))?;
        let h = bn(tape, h, 0)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, p(2), p(3))?;
        let h = bn(tape, h, 1)?;
        let h = tape.relu(h);
        let h = tape.max_pool2d(h)?;
        let h = tape.conv2d(h, p(4), p(5))?;
        let h = bn(tape, h, 2)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, p(6), p(7))?;
        let h = tape.relu(h);
        let h = tape.max_pool2d(h)?;
        let cols = tape.columns(h)?;
        let proj = tape.linear(cols, p(20), p(21))?;

        let cfg = &self.config;
        let (s_len, d) = (cfg.seq_len(), cfg.attn_dim);
        let code = position_code(s_len, d);
        let code: Vec<T> = (0..n).flat_map(|_| code.iter().map(|&v| T::of(v))).collect();
        let code = tape.constant(Tensor::new(&[n, s_len, d], code)?);
        let features = tape.add(proj, code)?;

        let mut state = tape.tile(p(cfg.position_slot()), n);
        let mut attention = Vec::with_capacity(cfg.attn_layers);
        for l in 0..cfg.attn_layers {
            let lin = |tape: &mut Tape<T>, x: Var, proj: usize| {
                let s = cfg.attn_slot(l, proj);
                tape.linear(x, p(s), p(s + 1))
            };
            let q = lin(tape, state, 0)?;
            let k = lin(tape, features, 1)?;
            let v = lin(tape, features, 2)?;
            let (ctx, weights) = tape.attention(q, k, v)?;
            let o = lin(tape, ctx, 3)?;
            let o = tape.relu(o);
            state = tape.add(state, o)?;
            attention.push(weights);
        }
        let out = cfg.output_slot();
        let logits = tape.linear(state, p(out), p(out + 1))?;
        Ok(Graph {
            logits,
            features,
            attention,
            leaves,
            running,
        })
    }

    /// Writes refreshed running statistics back into the parameters.
    pub fn apply_running(&mut self, graph: &Graph) {
        for (slot, t) in &graph.running {
            self.tensors[*slot] = t.cast();
        }
    }

    /// Inference-mode column features of one image, `[S, D]`.
    pub fn encode(&self, image: &GrayImage) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let g = self.forward(&mut tape, self.input_tensor(&[image])?, Mode::Infer, &|_| false)?;
        let (s, d) = (self.config.seq_len(), self.config.attn_dim);
        tape.value(g.features).clone().reshape(&[s, d])
    }

    /// Decoder only: `[S, D]` features to `[max_len, alphabet]` logits, plus
    /// the attention weights `[max_len, S]` of every layer.
    pub fn decode(&self, features: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let cfg = &self.config;
        let d = cfg.attn_dim;
        if features.rank() != 2 || features.dim(1) != d {
            return Err(crate::Error::Shape(format!(
                "decode expects [S, {d}] features, got {:?}",
                features.shape()
            )));
        }
        let mut tape = Tape::new();
        let leaf = |tape: &mut Tape<T>, s: usize| tape.constant(self.tensors[s].clone());
        let f = tape.constant(features.clone());
        let mut state = leaf(&mut tape, cfg.position_slot());
        let mut weights = Vec::new();
        for l in 0..cfg.attn_layers {
            let lin = |tape: &mut Tape<T>, x: Var, proj: usize| {
                let s = cfg.attn_slot(l, proj);
                let (w, b) = (leaf(tape, s), leaf(tape, s + 1));
                tape.linear(x, w, b)
            };
            let q = lin(&mut tape, state, 0)?;
            let k = lin(&mut tape, f, 1)?;
            let v = lin(&mut tape, f, 2)?;
            let (ctx, w) = tape.attention(q, k, v)?;
            let o = lin(&mut tape, ctx, 3)?;
            let o = tape.relu(o);
            state = tape.add(state, o)?;
            weights.push(tape.value(w).clone());
        }
        let (w, b) = (leaf(&mut tape, cfg.output_slot()), leaf(&mut tape, cfg.output_slot() + 1));
        let logits = tape.linear(state, w, b)?;
        Ok((tape.value(logits).clone(), weights))
    }

    /// Inference-mode logits `[N, max_len, alphabet]`.
    pub fn logits(&self, images: &[&GrayImage]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let g = self.forward(&mut tape, self.input_tensor(images)?, Mode::Infer, &|_| false)?;
        Ok(tape.value(g.logits).clone())
    }

    pub fn predict(&self, image: &GrayImage) -> Result<Prediction> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    /// Runs inference in chunks; results do not depend on the chunking.
    pub fn predict_batch(&self, images: &[&GrayImage]) -> Result<Vec<Prediction>> {
        let a = self.config.alphabet_size;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = self.logits(chunk)?;
            for sample in logits.data().chunks(self.config.max_len * a) {
                out.push(read_logits(sample, a));
            }
        }
        Ok(out)
    }
}

/// Argmax per position (lowest index on ties), PAD positions dropped.
pub fn read_logits<T: Scalar>(logits: &[T], alphabet_size: usize) -> Prediction {
    let mut text = String::new();
    let mut confidences = Vec::new();
    for row in logits.chunks(alphabet_size) {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        if best == PAD_INDEX {
            continue;
        }
        let mx = row[best].f64();
        let z: f64 = row.iter().map(|v| (v.f64() - mx).exp()).sum();
        text.push(Alphabet.symbol(best).expect("non-PAD symbol"));
        confidences.push((1.0 / z) as f32);
    }
    Prediction { text, confidences }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagegen::{render_text, Canvas};
    use crate::ALPHABET_SIZE;

    fn small_config() -> ModelConfig {
        ModelConfig {
            conv_channels: [4, 6, 8, 8],
            attn_dim: 16,
            attn_layers: 2,
            max_len: 4,
            alphabet_size: ALPHABET_SIZE,
            canvas: Canvas {
                width: 32,
                height: 16,
            },
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let img = render_text("HELLO", 160, 32).unwrap();
        let f = p.encode(&img).unwrap();
        assert_eq!(f.shape(), &[40, 128]);
        assert!(f.all_finite());
        assert_eq!(f, p.encode(&img).unwrap());
        let (logits, weights) = p.decode(&f).unwrap();
        assert_eq!(logits.shape(), &[8, 37]);
        assert_eq!(weights.len(), 2);
        for w in &weights {
            assert_eq!(w.shape(), &[8, 40]);
            for row in w.data().chunks(40) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
        let full = p.logits(&[&img]).unwrap();
        for (a, b) in full.data().iter().zip(logits.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn wrong_canvas_is_a_shape_error() {
        let p = ModelParams::<f32>::init(&small_config(), 1).unwrap();
        let img = GrayImage::white(160, 32);
        assert!(matches!(p.encode(&img), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn zeroed_output_projection_is_uniform() {
        let cfg = small_config();
        let mut p = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let o = cfg.output_slot();
        p.tensors[o] = Tensor::zeros(p.tensors[o].shape());
        let img = GrayImage::white(32, 16);
        let logits = p.logits(&[&img]).unwrap();
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(logits);
        let s = tape.softmax(l, 2).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 37.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_is_batch_independent() {
        let cfg = small_config();
        let p = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let a = render_text("AB", 32, 16).unwrap();
        let b = render_text("7", 32, 16).unwrap();
        let alone = p.logits(&[&a]).unwrap();
        let together = p.logits(&[&a, &b]).unwrap();
        let n = alone.numel();
        assert_eq!(alone.data(), &together.data()[..n]);
    }

    #[test]
    fn train_mode_refreshes_running_stats() {
        let cfg = small_config();
        let mut p = ModelParams::<f32>::init(&cfg, 4).unwrap();
        let imgs = [render_text("AB", 32, 16).unwrap(), render_text("C", 32, 16).unwrap()];
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        let mut tape = Tape::new();
        let g = p.forward(&mut tape, p.input_tensor(&refs).unwrap(), Mode::Train, &|_| true).unwrap();
        assert_eq!(g.running.len(), 6);
        let before = p.tensors[10].clone();
        p.apply_running(&g);
        assert_ne!(before, p.tensors[10]);
        let mut tape = Tape::new();
        let g = p.forward(&mut tape, p.input_tensor(&refs).unwrap(), Mode::Train, &|s| s >= 22).unwrap();
        assert!(g.running.is_empty());
        assert!(g.leaves[0].is_some() && !tape.requires_grad(g.leaves[0].unwrap()));
    }

    #[test]
    fn read_logits_rules() {
        let a = ALPHABET_SIZE;
        let mut pad = vec![0.0f32; 3 * a];
        for r in 0..3 {
            pad[r * a + PAD_INDEX] = 10.0;
        }
        let p = read_logits(&pad, a);
        assert_eq!(p.text, "");
        assert!(p.confidences.is_empty());

        let mut l = vec![0.0f32; 2 * a];
        l[7] = 2.0; // H
        l[a + 4] = 1.0; // E and B tie; lower index wins
        l[a + 1] = 1.0;
        let p = read_logits(&l, a);
        assert_eq!(p.text, "HB");
        assert!(p.confidences.iter().all(|c| *c > 0.0 && *c <= 1.0));
        let zero = read_logits(&vec![0.0f32; a], a);
        assert_eq!(zero.text, "A");
        assert!((zero.confidences[0] - 1.0 / 37.0).abs() < 1e-7);
    }

    #[test]
    fn position_code_values() {
        let c = position_code(3, 4);
        assert_eq!(&c[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((c[4] - 1f64.sin()).abs() < 1e-15);
        assert!((c[6] - (0.01f64).sin()).abs() < 1e-15);
    }
}
