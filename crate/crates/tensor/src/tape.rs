//! Reverse-mode differentiation over a linear tape of recorded ops.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the vector-Jacobian product. `backward` walks the tape once in
//! reverse. Leaves registered with `requires_grad` accumulate into
//! [`Tensor::grad`], so two backward passes without zeroing double it.

use crate::conv::{conv2d_backward, conv2d_forward, Conv2dSpec, ConvGeom};
use crate::error::{invalid, mismatch, Result, TensorError};
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential moving update with the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let m = T::from_usize(batch.count).unwrap();
        let unbias = m / (m - T::one());
        for c in 0..self.mean.len() {
            self.mean[c] = (T::one() - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (T::one() - momentum) * self.var[c] + momentum * batch.var[c] * unbias;
        }
    }
}

/// Batch statistics produced by a training-mode batch norm (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(usize),
    Upsample {
        x: usize,
        factor: usize,
        mode: UpsampleMode,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ChannelScale {
        x: usize,
        s: usize,
    },
    Sum(usize),
    Mean(usize),
    FocalLoss {
        logits: usize,
        target: Vec<T>,
        gamma: T,
        alpha: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can differentiate it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LOG_CLAMP: f64 = 1e-12;

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

    /// Registers an input or parameter. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.grad = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.grad.is_none());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn data(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.k] {
                return Err(mismatch("conv2d bias", self.shape(b), &[geom.k]));
            }
        }
        let out = conv2d_forward(self.data(x.0), self.data(w.0), b.map(|b| self.data(b.0)), &geom);
        let value = Tensor::from_vec(geom.out_shape(), out)?;
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let needs = self.needs(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            needs,
        ))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("batchnorm2d", self.shape(x), self.shape(p)));
            }
        }
        Ok((n, c, h * w))
    }

    /// Batch norm using the statistics of this batch over `(N, H, W)`.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        let count = n * plane;
        if count < 2 {
            return Err(invalid(
                "batchnorm2d",
                format!("training mode needs at least 2 values per channel, got {count}"),
            ));
        }
        let xs = self.data(x.0);
        let m = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut v = T::zero();
            for b in 0..n {
                for &val in &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    v += (val - mu) * (val - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| (v + T::from_f64_lossy(eps)).sqrt().recip())
            .collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((
            out,
            BatchStats {
                mean,
                var,
                count,
            },
        ))
    }

    /// Batch norm using fixed running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_check(x, gamma, beta)?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(mismatch("batchnorm2d running stats", self.shape(x), &[running.mean.len()]));
        }
        let inv_std: Vec<T> = running
            .var
            .iter()
            .map(|&v| (v + T::from_f64_lossy(eps)).sqrt().recip())
            .collect();
        self.bn_apply(x, gamma, beta, &running.mean, &inv_std, false)
    }

    /// Dispatching wrapper: in training mode the running statistics are updated in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: BatchNormMode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        match mode {
            BatchNormMode::Train => {
                let (out, stats) = self.batchnorm2d_train(x, gamma, beta, eps)?;
                running.update(&stats, T::from_f64_lossy(momentum));
                Ok(out)
            }
            BatchNormMode::Eval => self.batchnorm2d_eval(x, gamma, beta, running, eps),
        }
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        let plane = h * w;
        let (xs, g, bt) = (self.data(x.0), self.data(gamma.0), self.data(beta.0));
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, h, w], out)?;
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Relu(x.0), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Sigmoid(x.0), needs)
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("maxpool2d")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(invalid("maxpool2d", format!("input {h}x{w} too small for 2x2 pooling")));
        }
        let xs = self.data(x.0);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
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
        let value = Tensor::from_vec(vec![n, c, ho, wo], out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::MaxPool2 { x: x.0, argmax }, needs))
    }

    /// Spatial mean, `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        let denom = T::from_usize(plane).unwrap();
        let xs = self.data(x.0);
        let out = (0..n * c)
            .map(|i| xs[i * plane..(i + 1) * plane].iter().copied().sum::<T>() / denom)
            .collect();
        let value = Tensor::from_vec(vec![n, c, 1, 1], out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::GlobalAvgPool(x.0), needs))
    }

    /// Integer-factor spatial upsampling. Bilinear uses half-pixel centers
    /// with edge clamping.
    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        if factor == 0 {
            return Err(invalid("upsample", "factor must be a positive integer"));
        }
        let (n, c, h, w) = self.value(x).dims4("upsample")?;
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.data(x.0);
        let mut out = vec![T::zero(); n * c * ho * wo];
        match mode {
            UpsampleMode::Nearest => {
                for (src_row, dst) in xs.chunks_exact(w).zip(out.chunks_exact_mut(factor * wo)) {
                    let (first, rest) = dst.split_at_mut(wo);
                    for (&v, d) in src_row.iter().zip(first.chunks_exact_mut(factor)) {
                        d.fill(v);
                    }
                    for r in rest.chunks_exact_mut(wo) {
                        r.copy_from_slice(first);
                    }
                }
            }
            UpsampleMode::Bilinear => {
                let ys = bilinear_taps::<T>(h, factor);
                let xs_taps = bilinear_taps::<T>(w, factor);
                for nc in 0..n * c {
                    let src = &xs[nc * h * w..(nc + 1) * h * w];
                    let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs_taps.iter().enumerate() {
                            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                            let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                            dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, ho, wo], out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Upsample { x: x.0, factor, mode }, needs))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let span = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(v.0)[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Concat { inputs: idx, axis }, needs))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let xs = self.data(x.0);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[o * row + start * inner..o * row + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::from_vec(out_shape, out)?, Op::Narrow { x: x.0, axis, start }, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a.0).iter().zip(self.data(b.0)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a.0).iter().zip(self.data(b.0)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul(a.0, b.0), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v * c);
        let needs = self.needs(&[a.0]);
        self.push(value, Op::Scale(a.0, c), needs)
    }

    /// Multiplies each `[H,W]` plane of `x: [N,C,H,W]` by `s: [N,C,1,1]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_scale")?;
        if self.shape(s) != [n, c, 1, 1] {
            return Err(mismatch("channel_scale", self.shape(x), self.shape(s)));
        }
        let plane = h * w;
        let (xs, ss) = (self.data(x.0), self.data(s.0));
        let data = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ss[i / plane])
            .collect();
        let value = Tensor::from_vec(vec![n, c, h, w], data)?;
        let needs = self.needs(&[x.0, s.0]);
        Ok(self.push(value, Op::ChannelScale { x: x.0, s: s.0 }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x.0).iter().copied().sum::<T>();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(total), Op::Sum(x.0), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.data(x.0);
        let m = xs.iter().copied().sum::<T>() / T::from_usize(xs.len()).unwrap();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(m), Op::Mean(x.0), needs)
    }

    /// Mean sigmoid focal loss over every element of `logits`; `target` must be 0/1.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>, gamma: f64, alpha: f64) -> Result<Var> {
        if gamma.is_nan() || gamma < 0.0 {
            return Err(invalid("focal_loss", format!("gamma must be >= 0, got {gamma}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid("focal_loss", format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if self.shape(logits) != target.shape() {
            return Err(mismatch("focal_loss", self.shape(logits), target.shape()));
        }
        if let Some(bad) = target.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(invalid("focal_loss", format!("targets must be 0 or 1, found {bad}")));
        }
        let (g, a) = (T::from_f64_lossy(gamma), T::from_f64_lossy(alpha));
        let zs = self.data(logits.0);
        let total: T = zs
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| focal_term(z, y, g, a).0)
            .sum();
        let m = total / T::from_usize(zs.len().max(1)).unwrap();
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(m),
            Op::FocalLoss {
                logits: logits.0,
                target: target.data().to_vec(),
                gamma: g,
                alpha: a,
            },
            needs,
        ))
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            for (j, gj) in self.vjp(i, &g) {
                if !self.nodes[j].needs_grad {
                    continue;
                }
                match &mut adj[j] {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gj),
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with respect to each of its inputs.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let need = |j: usize| self.nodes[j].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let grads = conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    geom,
                    (need(*x), need(*w), b.is_some_and(need)),
                );
                out.extend(grads.dx.map(|d| (*x, d)));
                out.extend(grads.dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, grads.db) {
                    out.push((*b, d));
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
                let [n, c, h, w] = node.value.shape()[..] else { unreachable!() };
                let plane = h * w;
                let gm = self.data(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for k in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            dbeta[ch] += g[k];
                            dgamma[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if need(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * plane).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gm[ch] * inv_std[ch];
                            for k in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                                dx[k] = if *batch_stats {
                                    scale * (g[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                out.push((*x, g.iter().zip(xs).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect()));
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                out.push((*x, g.iter().zip(ys).map(|(&d, &y)| d * y * (T::one() - y)).collect()));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.data(*x).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.nodes[*x].value.shape()[..] else { unreachable!() };
                let plane = h * w;
                let inv = T::from_usize(plane).unwrap().recip();
                let dx = (0..g.len() * plane).map(|k| g[k / plane] * inv).collect();
                out.push((*x, dx));
            }
            Op::Upsample { x, factor, mode } => {
                let [n, c, h, w] = self.nodes[*x].value.shape()[..] else { unreachable!() };
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); n * c * h * w];
                match mode {
                    UpsampleMode::Nearest => {
                        for (d_row, g_rows) in dx.chunks_exact_mut(w).zip(g.chunks_exact(factor * wo)) {
                            for g_row in g_rows.chunks_exact(wo) {
                                for (d, gs) in d_row.iter_mut().zip(g_row.chunks_exact(*factor)) {
                                    *d += gs.iter().copied().sum::<T>();
                                }
                            }
                        }
                    }
                    UpsampleMode::Bilinear => {
                        let ys = bilinear_taps::<T>(h, *factor);
                        let xt = bilinear_taps::<T>(w, *factor);
                        for nc in 0..n * c {
                            let d = &mut dx[nc * h * w..(nc + 1) * h * w];
                            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                                for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                                    let go = g[nc * ho * wo + oy * wo + ox];
                                    let (top, bot) = (go * (T::one() - fy), go * fy);
                                    d[y0 * w + x0] += top * (T::one() - fx);
                                    d[y0 * w + x1] += top * fx;
                                    d[y1 * w + x0] += bot * (T::one() - fx);
                                    d[y1 * w + x1] += bot * fx;
                                }
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                let row = shape[*axis] * inner;
                for &j in inputs {
                    let span = self.nodes[j].value.shape()[*axis] * inner;
                    if need(j) {
                        let mut d = Vec::with_capacity(outer * span);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + span]);
                        }
                        out.push((j, d));
                    }
                    offset += span;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full = self.nodes[*x].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = full[..*axis].iter().product();
                let inner: usize = full[axis + 1..].iter().product();
                let row = full[*axis] * inner;
                let mut dx = vec![T::zero(); outer * row];
                for o in 0..outer {
                    dx[o * row + start * inner..o * row + (start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                out.push((*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect()));
                out.push((*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect()));
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&d| d * *c).collect())),
            Op::ChannelScale { x, s } => {
                let (xs, ss) = (self.data(*x), self.data(*s));
                let plane = xs.len() / ss.len();
                out.push((*x, g.iter().enumerate().map(|(k, &d)| d * ss[k / plane]).collect()));
                let ds = (0..ss.len())
                    .map(|k| {
                        g[k * plane..(k + 1) * plane]
                            .iter()
                            .zip(&xs[k * plane..(k + 1) * plane])
                            .map(|(&d, &v)| d * v)
                            .sum::<T>()
                    })
                    .collect();
                out.push((*s, ds));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.data(*x).len()])),
            Op::Mean(x) => {
                let len = self.data(*x).len();
                out.push((*x, vec![g[0] / T::from_usize(len).unwrap(); len]));
            }
            Op::FocalLoss {
                logits,
                target,
                gamma,
                alpha,
            } => {
                let zs = self.data(*logits);
                let scale = g[0] / T::from_usize(zs.len().max(1)).unwrap();
                let d = zs
                    .iter()
                    .zip(target)
                    .map(|(&z, &y)| scale * focal_term(z, y, *gamma, *alpha).1)
                    .collect();
                out.push((*logits, d));
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Focal loss of one logit and its derivative with respect to the logit.
fn focal_term<T: Scalar>(z: T, y: T, gamma: T, alpha: T) -> (T, T) {
    let clamp = T::from_f64_lossy(LOG_CLAMP);
    let one = T::one();
    let p = sigmoid(z);
    let q = one - p;
    let dp = p * q;
    // integer exponents (the common gamma = 2) avoid powf
    let int_gamma = (gamma.fract() == T::zero() && gamma <= T::from_f64_lossy(16.0)).then(|| gamma.to_i32().unwrap());
    let pow = |base: T, e: T| match int_gamma {
        Some(k) => base.powi(k),
        None => base.powf(e),
    };
    let dpow = |base: T, e: T| match int_gamma {
        Some(0) => T::zero(),
        Some(k) => e * base.powi(k - 1),
        None => e * base.powf(e - one),
    };
    // targets are binary, so only one branch contributes.
    // d/dv of ln(max(v, clamp)) is 1/v above the clamp and 0 below it.
    if y == one {
        let (log_p, dlog_p) = if p > clamp { (p.ln(), p.recip()) } else { (clamp.ln(), T::zero()) };
        let loss = -alpha * pow(q, gamma) * log_p;
        let d = -alpha * (-dpow(q, gamma) * log_p + pow(q, gamma) * dlog_p);
        (loss, d * dp)
    } else {
        let (log_q, dlog_q) = if q > clamp { (q.ln(), -q.recip()) } else { (clamp.ln(), T::zero()) };
        let loss = -(one - alpha) * pow(p, gamma) * log_q;
        let d = -(one - alpha) * (dpow(p, gamma) * log_q + pow(p, gamma) * dlog_q);
        (loss, d * dp)
    }
}

/// For each output index: the two source indices and the weight of the second.
fn bilinear_taps<T: Scalar>(len: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = factor as f64;
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, T::from_f64_lossy(src - i0 as f64))
        })
        .collect()
}
