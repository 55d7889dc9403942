use super::kernels::{conv3x3_backward, conv3x3_forward, ConvDims};
use super::{gemm, MatView, Scalar, Tensor};
use crate::error::shape_err;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalisation behaviour for one call.
///
/// In train mode the running statistics are blended as
/// `running = momentum·running + (1 − momentum)·batch`, using the unbiased
/// batch variance.
pub enum BatchNormMode<'a, T> {
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
        momentum: T,
    },
    Infer {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Tile(Var, usize),
    Columns(Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass. Inputs of a node always precede
/// it, so the node order is already topological.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not depend on any trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims4(t: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err!("{what} expects a rank-4 tensor, got {t:?}")),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|v| *v * c).collect())
            .expect("same shape");
        self.push(out, Op::Scale(a, c), self.rg(&[a]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape(), va.data().iter().map(|v| v.max(T::zero())).collect())
            .expect("same shape");
        self.push(out, Op::Relu(a), self.rg(&[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), self.rg(&[a])))
    }

    /// Stacks `n` copies of `a` along a new leading axis.
    pub fn tile(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(va.shape());
        let mut data = Vec::with_capacity(n * va.numel());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let out = Tensor::new(&shape, data).expect("tile shape");
        self.push(out, Op::Tile(a, n), self.rg(&[a]))
    }

    /// Reads a `[N, C, H, W]` map column by column: `[N, W, C·H]`, with
    /// element `c·H + h` of column `w` taken from `(c, h, w)`.
    pub fn columns(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (n, c, h, w) = dims4(va.shape(), "columns")?;
        let src = va.data();
        let mut out = vec![T::zero(); src.len()];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    let s = &src[((ni * c + ci) * h + hi) * w..][..w];
                    for (wi, v) in s.iter().enumerate() {
                        out[(ni * w + wi) * c * h + ci * h + hi] = *v;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, w, c * h], out)?;
        Ok(self.push(out, Op::Columns(a), self.rg(&[a])))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1 (output keeps H×W).
    ///
    /// `x: [N, Cin, H, W]`, `k: [Cout, Cin, 3, 3]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let (n, cin, h, w) = dims4(self.value(x).shape(), "conv2d input")?;
        let (cout, kc, kh, kw) = dims4(self.value(k).shape(), "conv2d kernel")?;
        if kc != cin {
            return Err(shape_err!("conv2d: kernel expects {kc} channels, input has {cin}"));
        }
        if (kh, kw) != (3, 3) {
            return Err(shape_err!("conv2d supports 3x3 kernels only, got {kh}x{kw}"));
        }
        if self.value(b).shape() != [cout] {
            return Err(shape_err!("conv2d bias {:?} for {cout} outputs", self.value(b).shape()));
        }
        let dims = ConvDims { n, cin, cout, h, w };
        let mut out = vec![T::zero(); n * cout * h * w];
        conv3x3_forward(
            &dims,
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &mut out,
        );
        let out = Tensor::new(&[n, cout, h, w], out)?;
        Ok(self.push(out, Op::Conv2d { x, k, b }, self.rg(&[x, k, b])))
    }

    /// Per-channel batch normalisation of `[N, C, H, W]`:
    /// `gamma·(x − mean)/sqrt(var + eps) + beta`.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BatchNormMode<'_, T>,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "batchnorm2d")?;
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).shape() != [c] {
                return Err(shape_err!("batchnorm {name} {:?} for {c} channels", self.value(v).shape()));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xs = self.value(x).data();
        let (mean, var, batch_stats): (Vec<f64>, Vec<f64>, bool) = match &mode {
            BatchNormMode::Train { .. } => {
                if m < 2 {
                    return Err(Error::DegenerateBatch);
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ci in 0..c {
                    let planes = || (0..n).map(|ni| &xs[(ni * c + ci) * hw..][..hw]);
                    let s: f64 = planes().map(|p| row_sums(p, w, |v| v)).sum();
                    let mu = s / m as f64;
                    let mu_t = T::of(mu);
                    let s2: f64 = planes()
                        .map(|p| row_sums(p, w, |v| (v - mu_t) * (v - mu_t)))
                        .sum();
                    mean[ci] = mu;
                    var[ci] = s2 / m as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Infer {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(shape_err!("batchnorm running stats for {c} channels"));
                }
                (
                    running_mean.iter().map(|v| v.f64()).collect(),
                    running_var.iter().map(|v| v.f64()).collect(),
                    false,
                )
            }
        };
        let eps_f = eps.f64();
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps_f).sqrt())).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mu = T::of(mean[ci]);
                for i in base..base + hw {
                    let xh = (xs[i] - mu) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        if let BatchNormMode::Train {
            running_mean,
            running_var,
            momentum,
        } = mode
        {
            if running_mean.len() != c || running_var.len() != c {
                return Err(shape_err!("batchnorm running stats for {c} channels"));
            }
            let unbias = m as f64 / (m as f64 - 1.0);
            let mom = momentum.f64();
            for ci in 0..c {
                running_mean[ci] = T::of(mom * running_mean[ci].f64() + (1.0 - mom) * mean[ci]);
                running_var[ci] =
                    T::of(mom * running_var[ci].f64() + (1.0 - mom) * var[ci] * unbias);
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties go to the first element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "max_pool2d")?;
        if h < 2 || w < 2 {
            return Err(shape_err!("max_pool2d needs at least 2x2 input, got {h}x{w}"));
        }
        let (h2, w2) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h2 * w2);
        let mut argmax = Vec::with_capacity(n * c * h2 * w2);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[n, c, h2, w2], out)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, self.rg(&[x])))
    }

    /// `y = x·W + b` over the last axis of `x`: `[.., D] × [D, M] → [.., M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (d, m) = match ws[..] {
            [d, m] => (d, m),
            _ => return Err(shape_err!("linear weight must be rank 2, got {ws:?}")),
        };
        if xs.is_empty() || xs[xs.len() - 1] != d {
            return Err(shape_err!("linear: input {xs:?} against weight {ws:?}"));
        }
        if self.value(b).shape() != [m] {
            return Err(shape_err!("linear bias {:?} for {m} outputs", self.value(b).shape()));
        }
        let rows = self.value(x).numel() / d;
        let mut out = vec![T::zero(); rows * m];
        gemm(
            MatView::new(self.value(x).data(), rows, d),
            MatView::new(self.value(w).data(), d, m),
            T::zero(),
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(m) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v = *v + *bb;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, self.rg(&[x, w, b])))
    }

    /// Batched product `[B, M, K] × [B, K, N]`, or `[B, M, K] × [B, N, K]ᵀ`
    /// when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let ((ba, m, k), (bb, r, c)) = match (&sa[..], &sb[..]) {
            (&[ba, m, k], &[bb, r, c]) => ((ba, m, k), (bb, r, c)),
            _ => return Err(shape_err!("batch_matmul expects rank-3 operands, got {sa:?} and {sb:?}")),
        };
        let (kb, n) = if transpose_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(shape_err!("batch_matmul: {sa:?} × {sb:?} (transpose_b = {transpose_b})"));
        }
        let mut out = vec![T::zero(); ba * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..ba {
            let av = MatView::new(&da[bi * m * k..(bi + 1) * m * k], m, k);
            let bs = &db[bi * r * c..(bi + 1) * r * c];
            let bv = if transpose_b {
                MatView::new(bs, n, k).t()
            } else {
                MatView::new(bs, k, n)
            };
            gemm(av, bv, T::zero(), &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let out = Tensor::new(&[ba, m, n], out)?;
        Ok(self.push(
            out,
            Op::BatchMatMul {
                a,
                b,
                transpose_b,
            },
            self.rg(&[a, b]),
        ))
    }

    /// Softmax along `axis`, stabilised by subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} for shape {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xs[at(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..len {
                    let e = (xs[at(j)] - mx).exp();
                    out[at(j)] = e;
                    s = s + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, self.rg(&[x])))
    }

    /// Scaled dot-product attention.
    ///
    /// `weights = softmax(Q·Kᵀ/√d)` over the source axis and
    /// `context = weights·V`. Operands are `[T, d]`/`[S, d]`, or carry a
    /// leading batch axis. Returns `(context, weights)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let rank = self.value(q).rank();
        if self.value(k).rank() != rank || self.value(v).rank() != rank {
            return Err(shape_err!("attention operands must share rank"));
        }
        let (q3, k3, v3) = match rank {
            3 => (q, k, v),
            2 => {
                let lift = |t: &mut Self, x: Var| {
                    let s = t.value(x).shape().to_vec();
                    t.reshape(x, &[1, s[0], s[1]])
                };
                (lift(self, q)?, lift(self, k)?, lift(self, v)?)
            }
            _ => return Err(shape_err!("attention expects rank 2 or 3")),
        };
        let d = self.value(q3).dim(2);
        if self.value(k3).dim(2) != d || self.value(v3).dim(2) != d {
            return Err(shape_err!(
                "attention inner dims: Q {:?}, K {:?}, V {:?}",
                self.value(q3).shape(),
                self.value(k3).shape(),
                self.value(v3).shape()
            ));
        }
        if self.value(k3).dim(1) != self.value(v3).dim(1) {
            return Err(shape_err!("attention: K and V source lengths differ"));
        }
        let scores = self.batch_matmul(q3, k3, true)?;
        let scaled = self.scale(scores, T::of(1.0 / (d as f64).sqrt()));
        let weights = self.softmax(scaled, 2)?;
        let context = self.batch_matmul(weights, v3, false)?;
        if rank == 2 {
            let (tq, s) = (self.value(weights).dim(1), self.value(weights).dim(2));
            let ctx = self.reshape(context, &[tq, d])?;
            let w = self.reshape(weights, &[tq, s])?;
            return Ok((ctx, w));
        }
        Ok((context, weights))
    }

    /// Mean over rows of `−log softmax(logits)[target]`; rows run over every
    /// axis but the last.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let a = *lv
            .shape()
            .last()
            .ok_or_else(|| shape_err!("cross_entropy on a scalar"))?;
        let rows = lv.numel() / a;
        if targets.len() != rows {
            return Err(shape_err!("cross_entropy: {} targets for {rows} rows", targets.len()));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= a) {
            return Err(Error::Contract(format!("target index {t} outside [0, {a})")));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = 0.0f64;
        for (r, row) in lv.data().chunks_exact(a).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (p, v) in probs[r * a..(r + 1) * a].iter_mut().zip(row) {
                *p = (*v - mx).exp();
                s = s + *p;
            }
            for p in &mut probs[r * a..(r + 1) * a] {
                *p = *p / s;
            }
            let logp = (row[targets[r]] - mx).f64() - s.f64().ln();
            total -= logp;
        }
        let loss = Tensor::scalar(T::of(total / rows as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Fingerprint of every piecewise-linear branch taken in the forward
    /// pass: ReLU input signs and max-pool winners. Two passes with equal
    /// signatures lie on the same linear piece of those operations.
    pub fn branch_signature(&self) -> u64 {
        let mut h = crate::rng::Fnv1a64::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.value(*a).data() {
                        h.write(&[u8::from(*v > T::zero())]);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    for i in argmax {
                        h.write(&(*i as u64).to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`. d(loss)/d(loss) = 1; a node used
    /// k times receives the sum of its k contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.backprop(i, &g, &mut grads)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(v).shape(), data).expect("gradient shape")
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| *g * *y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(va).map(|(g, x)| *g * *x).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|g| *g * *c).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
            }
            Op::Tile(a, n) => {
                let len = self.value(*a).numel();
                let mut d = vec![T::zero(); len];
                for k in 0..*n {
                    for (acc, v) in d.iter_mut().zip(&gd[k * len..(k + 1) * len]) {
                        *acc = *acc + *v;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Columns(a) => {
                let (n, c, h, w) = dims4(self.value(*a).shape(), "columns")?;
                let mut d = vec![T::zero(); gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            let dst = &mut d[((ni * c + ci) * h + hi) * w..][..w];
                            for (wi, v) in dst.iter_mut().enumerate() {
                                *v = gd[(ni * w + wi) * c * h + ci * h + hi];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Conv2d { x, k, b } => {
                let (n, cin, h, w) = dims4(self.value(*x).shape(), "conv2d")?;
                let cout = self.value(*k).dim(0);
                let dims = ConvDims { n, cin, cout, h, w };
                let mut dx = self.needs(*x).then(|| vec![T::zero(); n * cin * h * w]);
                let mut dk = self.needs(*k).then(|| vec![T::zero(); cout * cin * 9]);
                let mut db = self.needs(*b).then(|| vec![T::zero(); cout]);
                conv3x3_backward(
                    &dims,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gd,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if let Some(d) = dk {
                    self.accumulate(grads, *k, self.like(*k, d));
                }
                if let Some(d) = db {
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = dims4(self.value(*x).shape(), "batchnorm2d")?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let (gs, xh) = (&gd[base..base + hw], &xhat[base..base + hw]);
                        dbeta[ci] += row_sums(gs, w, |v| v);
                        dgamma[ci] += gs
                            .chunks(w)
                            .zip(xh.chunks(w))
                            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| *p * *q).sum::<T>().f64())
                            .sum::<f64>();
                    }
                }
                if self.needs(*x) {
                    // dx = γσ⁻¹·g − γσ⁻¹·Σg/m − x̂·γσ⁻¹·Σ(g·x̂)/m, the last two
                    // terms only when the statistics came from the batch.
                    let coef: Vec<(T, T, T)> = (0..c)
                        .map(|ci| {
                            let a = gam[ci].f64() * inv_std[ci].f64();
                            if *batch_stats {
                                (T::of(a), T::of(-a * dgamma[ci] / m), T::of(-a * dbeta[ci] / m))
                            } else {
                                (T::of(a), T::zero(), T::zero())
                            }
                        })
                        .collect();
                    let mut dx = vec![T::zero(); gd.len()];
                    for ni in 0..n {
                        for (ci, &(a, b, cc)) in coef.iter().enumerate() {
                            let base = (ni * c + ci) * hw;
                            for j in base..base + hw {
                                dx[j] = a * gd[j] + b * xhat[j] + cc;
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.needs(*gamma) {
                    let d = dgamma.into_iter().map(T::of).collect();
                    self.accumulate(grads, *gamma, self.like(*gamma, d));
                }
                if self.needs(*beta) {
                    let d = dbeta.into_iter().map(T::of).collect();
                    self.accumulate(grads, *beta, self.like(*beta, d));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (g, &src) in gd.iter().zip(argmax) {
                    d[src] = d[src] + *g;
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Linear { x, w, b } => {
                let (d, m) = (self.value(*w).dim(0), self.value(*w).dim(1));
                let rows = self.value(*x).numel() / d;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * d];
                    gemm(
                        MatView::new(gd, rows, m),
                        MatView::new(self.value(*w).data(), d, m).t(),
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); d * m];
                    gemm(
                        MatView::new(self.value(*x).data(), rows, d).t(),
                        MatView::new(gd, rows, m),
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); m];
                    for row in gd.chunks_exact(m) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc = *acc + *v;
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let (r, c) = (sb[1], sb[2]);
                let n = if *transpose_b { r } else { c };
                let (da_src, db_src) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![T::zero(); bn * m * k];
                    for bi in 0..bn {
                        let gv = MatView::new(&gd[bi * m * n..(bi + 1) * m * n], m, n);
                        let bs = &db_src[bi * r * c..(bi + 1) * r * c];
                        // dA = dC · Bᵀ (with B the effective right operand).
                        let bt = if *transpose_b {
                            MatView::new(bs, n, k)
                        } else {
                            MatView::new(bs, k, n).t()
                        };
                        gemm(gv, bt, T::zero(), &mut da[bi * m * k..(bi + 1) * m * k]);
                    }
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.needs(*b) {
                    let mut dbv = vec![T::zero(); bn * r * c];
                    for bi in 0..bn {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let av = MatView::new(&da_src[bi * m * k..(bi + 1) * m * k], m, k);
                        let out = &mut dbv[bi * r * c..(bi + 1) * r * c];
                        if *transpose_b {
                            // stored B is [n, k]: dB = dCᵀ · A
                            gemm(MatView::new(gs, m, n).t(), av, T::zero(), out);
                        } else {
                            gemm(av.t(), MatView::new(gs, m, n), T::zero(), out);
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, dbv));
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = split_axis(self.value(*x).shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dot = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let a = probs.len() / targets.len();
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * a + t] = d[r * a + t] - scale;
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
        }
        Ok(())
    }
}

/// Sum of `f` over `data`, accumulated in `T` within rows of `w` values and
/// in f64 across rows.
fn row_sums<T: Scalar>(data: &[T], w: usize, f: impl Fn(T) -> T) -> f64 {
    data.chunks(w.max(1))
        .map(|r| r.iter().map(|&v| f(v)).sum::<T>().f64())
        .sum()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SplitMix64;
    use proptest::prelude::*;

    fn rand_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (n, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let cout = k.dim(0);
        let mut out = vec![0.0; n * cout * h * w];
        for ni in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ni * cin + ci) * h + sy as usize) * w + sx as usize;
                                    let ki = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                    s += x.data()[xi] * k.data()[ki];
                                }
                            }
                        }
                        out[((ni * cout + co) * h + y) * w + xx] = s;
                    }
                }
            }
        }
        out
    }

    /// Central differences of `build` against its analytic gradient, for
    /// every coordinate of every input. `build` must return a scalar.
    fn fd_check(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let eval = |ts: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
            let loss = build(&mut tape, &vars);
            (tape, vars, loss)
        };
        let (tape, vars, loss) = eval(inputs);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-3;
        let mut worst = 0.0f64;
        for (i, t) in inputs.iter().enumerate() {
            let g = grads.get(vars[i]).expect("gradient for input");
            for j in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let (tp, _, lp) = eval(&plus);
                let (tm, _, lm) = eval(&minus);
                let num = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
                let ana = g.data()[j];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    /// Reduces any output to a scalar through fixed random weights.
    fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let shape = tape.value(y).shape().to_vec();
        let w = rand_tensor(&mut SplitMix64::new(seed), &shape);
        let w = tape.constant(w);
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = SplitMix64::new(1);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
        let mut k = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            k[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(Tensor::new(&[3, 3, 3, 3], k).unwrap());
        let bv = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(xv, kv, bv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_all_ones_padding() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 5], 0.5));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 2.0);
        assert_eq!(v[4], 2.0);
        assert_eq!(v[19], 2.0);
        assert_eq!(v[5 + 1], 4.5);
        assert_eq!(v[1], 3.0);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.conv2d(x, k, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_matches_loop_on_fixed_case() {
        let mut rng = SplitMix64::new(9);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut tape = Tape::<f64>::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, bv).unwrap();
        assert!(close(tape.value(y).data(), &conv_oracle(&x, &k, &b), 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn conv_matches_loop_oracle(
            seed in any::<u64>(), n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
            h in 1usize..7, w in 1usize..7,
        ) {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, &[n, cin, h, w]);
            let k = rand_tensor(&mut rng, &[cout, cin, 3, 3]);
            let b = rand_tensor(&mut rng, &[cout]);
            let mut tape = Tape::<f64>::new();
            let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(xv, kv, bv).unwrap();
            prop_assert!(close(tape.value(y).data(), &conv_oracle(&x, &k, &b), 1e-6));
        }

        #[test]
        fn linear_matches_loop_oracle(
            seed in any::<u64>(), rows in 1usize..6, d in 1usize..9, m in 1usize..9,
        ) {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, &[rows, d]);
            let w = rand_tensor(&mut rng, &[d, m]);
            let b = rand_tensor(&mut rng, &[m]);
            let mut expect = vec![0.0; rows * m];
            for r in 0..rows {
                for j in 0..m {
                    let mut s = b.data()[j];
                    for i in 0..d {
                        s += x.data()[r * d + i] * w.data()[i * m + j];
                    }
                    expect[r * m + j] = s;
                }
            }
            let mut tape = Tape::<f64>::new();
            let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
            let y = tape.linear(xv, wv, bv).unwrap();
            prop_assert!(close(tape.value(y).data(), &expect, 1e-6));
        }

        #[test]
        fn softmax_normalises_and_is_shift_invariant(
            seed in any::<u64>(), rows in 1usize..5, len in 1usize..9, c in -50.0f64..50.0,
        ) {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, &[rows, len]);
            let shifted = Tensor::new(&[rows, len], x.data().iter().map(|v| v * 5.0 + c).collect()).unwrap();
            let base = Tensor::new(&[rows, len], x.data().iter().map(|v| v * 5.0).collect()).unwrap();
            let mut tape = Tape::<f64>::new();
            let (a, b) = (tape.constant(base), tape.constant(shifted));
            let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
            for row in tape.value(sa).data().chunks(len) {
                prop_assert!(row.iter().all(|p| *p > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            prop_assert!(close(tape.value(sa).data(), tape.value(sb).data(), 1e-9));
        }
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let mut rng = SplitMix64::new(4);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::new(&[4, 4], eye).unwrap());
        let b0 = tape.constant(Tensor::zeros(&[4]));
        let y = tape.linear(xv, w, b0).unwrap();
        assert_eq!(tape.value(y), &x);

        let wz = tape.constant(Tensor::zeros(&[4, 2]));
        let b = tape.constant(Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap());
        let y = tape.linear(xv, wz, b).unwrap();
        for row in tape.value(y).data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn linear_rank3_and_shape_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 5]);
        let bad = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(tape.linear(x, bad, b).is_err());
    }

    fn bn_forward(x: Tensor<f64>, gamma: f64, beta: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = x.dim(1);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[c], gamma));
        let b = tape.constant(Tensor::full(&[c], beta));
        let mut rm = vec![0.0; c];
        let mut rv = vec![1.0; c];
        let mode = BatchNormMode::Train {
            running_mean: &mut rm,
            running_var: &mut rv,
            momentum: 0.9,
        };
        let y = tape.batchnorm2d(xv, g, b, 1e-5, mode).unwrap();
        (tape.value(y).data().to_vec(), rm, rv)
    }

    #[test]
    fn batchnorm_constant_input_is_zero() {
        let (y, _, _) = bn_forward(Tensor::full(&[2, 3, 2, 2], 0.7), 1.0, 0.0);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batchnorm_two_values() {
        let x = Tensor::from_f64(&[2, 1, 1, 1], &[0.0, 2.0]).unwrap();
        let (y, rm, rv) = bn_forward(x, 2.0, 3.0);
        // mean 1, biased variance 1: xhat = ±1/sqrt(1 + 1e-5)
        assert!((y[0] - 1.0).abs() < 1e-3 && (y[1] - 5.0).abs() < 1e-3);
        assert!((rm[0] - 0.1).abs() < 1e-12);
        // unbiased variance 2
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_normalises_per_channel() {
        let mut rng = SplitMix64::new(12);
        let x = rand_tensor(&mut rng, &[3, 2, 4, 5]);
        let (y, _, _) = bn_forward(x, 1.0, 0.0);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y[(n * 2 + c) * 20..][..20].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let mode = BatchNormMode::Train {
            running_mean: &mut rm,
            running_var: &mut rv,
            momentum: 0.9,
        };
        assert!(matches!(tape.batchnorm2d(x, g, b, 1e-5, mode), Err(Error::DegenerateBatch)));
        // Inference mode has no such restriction.
        let mode = BatchNormMode::Infer {
            running_mean: &rm,
            running_var: &rv,
        };
        assert!(tape.batchnorm2d(x, g, b, 1e-5, mode).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[4]));
        let s = tape.softmax(z, 0).unwrap();
        assert!(close(tape.value(s).data(), &[0.25; 4], 1e-12));
        let x = tape.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        assert!(close(tape.value(s).data(), &[0.25, 0.75], 1e-12));
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_middle_axis() {
        let mut rng = SplitMix64::new(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(&mut rng, &[2, 3, 4]));
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s).data();
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|j| v[(o * 3 + j) * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_examples() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 2], &[10.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let (ctx, w) = tape.attention(q, k, v).unwrap();
        assert_eq!(tape.value(w).shape(), &[1, 2]);
        assert!(tape.value(w).data()[0] >= 0.999);
        // w0 = 1 / (1 + e^{-10/√2}); the leftover mass pulls the context
        // about 1.7e-3 towards the second value row.
        assert!(close(tape.value(w).data(), &[0.9991513950372889, 0.0008486049627111], 1e-12));
        assert!(close(tape.value(ctx).data(), &[1.0016972099254222, 2.001697209925422], 1e-12));
        assert!(close(tape.value(ctx).data(), &[1.0, 2.0], 2e-3));

        let mut rng = SplitMix64::new(5);
        let q = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let k = tape.constant(rand_tensor(&mut rng, &[1, 4]));
        let vv = rand_tensor(&mut rng, &[1, 4]);
        let v = tape.constant(vv.clone());
        let (ctx, w) = tape.attention(q, k, v).unwrap();
        for row in tape.value(ctx).data().chunks(4) {
            assert!(close(row, vv.data(), 1e-12));
        }
        assert!(tape.value(w).data().iter().all(|p| (*p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = SplitMix64::new(6);
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(rand_tensor(&mut rng, &[2, 5, 8]).cast());
        let k = tape.constant(rand_tensor(&mut rng, &[2, 7, 8]).cast());
        let v = tape.constant(rand_tensor(&mut rng, &[2, 7, 8]).cast());
        let (ctx, w) = tape.attention(q, k, v).unwrap();
        assert_eq!(tape.value(ctx).shape(), &[2, 5, 8]);
        for row in tape.value(w).data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let bad = tape.constant(Tensor::zeros(&[2, 7, 3]));
        assert!(tape.attention(q, k, bad).is_err());
    }

    #[test]
    fn max_pool_picks_first_maximum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(
            Tensor::from_f64(&[1, 1, 2, 3], &[1.0, 3.0, 9.0, 3.0, 0.0, 9.0]).unwrap(),
        );
        let y = tape.max_pool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn columns_layout() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..12).map(f64::from).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 2, 2, 3], &vals).unwrap());
        let c = tape.columns(x).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 3, 4]);
        // column 1: (c0,h0), (c0,h1), (c1,h0), (c1,h1)
        assert_eq!(&tape.value(c).data()[4..8], &[1.0, 4.0, 7.0, 10.0]);
    }

    #[test]
    fn backward_simple_sums() {
        let mut rng = SplitMix64::new(8);
        let xv = rand_tensor(&mut rng, &[2, 3]);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(xv.clone());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let twice: Vec<f64> = xv.data().iter().map(|v| 2.0 * v).collect();
        assert!(close(g.get(x).unwrap().data(), &twice, 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[2], 1.0));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = SplitMix64::new(21);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(rand_tensor(&mut rng, &[2, 2, 4, 4]).cast());
            let k = tape.param(rand_tensor(&mut rng, &[3, 2, 3, 3]).cast());
            let b = tape.param(Tensor::zeros(&[3]));
            let y = tape.conv2d(x, k, b).unwrap();
            let r = tape.relu(y);
            let s = tape.sum(r);
            let g = tape.backward(s).unwrap();
            g.get(k).unwrap().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = SplitMix64::new(31);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        let err = fd_check(&[a, b], |t, v| {
            let p = t.mul(v[0], v[1]).unwrap();
            let q = t.add(p, v[0]).unwrap();
            let r = t.relu(q);
            let s = t.scale(r, 1.7);
            let tiled = t.tile(s, 2);
            let back = t.reshape(tiled, &[12]).unwrap();
            project(t, back, 1)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_conv_pool_columns() {
        let mut rng = SplitMix64::new(32);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 6]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let err = fd_check(&[x, k, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]).unwrap();
            let p = t.max_pool2d(y).unwrap();
            let c = t.columns(p).unwrap();
            project(t, c, 2)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_batchnorm_train_and_infer() {
        let mut rng = SplitMix64::new(33);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 3]);
        let g = rand_tensor(&mut rng, &[2]);
        let b = rand_tensor(&mut rng, &[2]);
        let inputs = [x, g, b];
        let err = fd_check(&inputs, |t, v| {
            let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
            let mode = BatchNormMode::Train {
                running_mean: &mut rm,
                running_var: &mut rv,
                momentum: 0.9,
            };
            let y = t.batchnorm2d(v[0], v[1], v[2], 1e-5, mode).unwrap();
            project(t, y, 3)
        });
        assert!(err < 1e-4, "{err}");
        let err = fd_check(&inputs, |t, v| {
            let mode = BatchNormMode::Infer {
                running_mean: &[0.2, -0.1],
                running_var: &[0.5, 1.5],
            };
            let y = t.batchnorm2d(v[0], v[1], v[2], 1e-5, mode).unwrap();
            project(t, y, 4)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_linear_attention_softmax() {
        let mut rng = SplitMix64::new(34);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let kv = rand_tensor(&mut rng, &[2, 5, 4]);
        let err = fd_check(&[x, w, b, kv], |t, v| {
            let q = t.linear(v[0], v[1], v[2]).unwrap();
            let (ctx, wts) = t.attention(q, v[3], v[3]).unwrap();
            let sm = t.softmax(ctx, 1).unwrap();
            let a = project(t, sm, 5);
            let bb = project(t, wts, 6);
            t.add(a, bb).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_batch_matmul_both_layouts() {
        let mut rng = SplitMix64::new(35);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 4, 5]);
        let bt = rand_tensor(&mut rng, &[2, 5, 4]);
        let err = fd_check(&[a, b, bt], |t, v| {
            let p = t.batch_matmul(v[0], v[1], false).unwrap();
            let q = t.batch_matmul(v[0], v[2], true).unwrap();
            let s = t.add(p, q).unwrap();
            project(t, s, 7)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_cross_entropy() {
        let mut rng = SplitMix64::new(36);
        let logits = rand_tensor(&mut rng, &[2, 3, 5]);
        let err = fd_check(&[logits], |t, v| t.cross_entropy(v[0], &[0, 4, 2, 2, 1, 3]).unwrap());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 37]));
        let l = tape.cross_entropy(z, &[0, 36]).unwrap();
        assert!((tape.value(l).item() - 37f64.ln()).abs() < 1e-12);
        assert!(matches!(tape.cross_entropy(z, &[0, 37]), Err(Error::Contract(_))));
        assert!(tape.cross_entropy(z, &[0]).is_err());
    }
}
