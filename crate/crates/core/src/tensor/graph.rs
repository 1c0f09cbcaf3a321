//! Tape-based reverse-mode differentiation.

use rand::Rng;
use rand_distr::StandardNormal;

use super::conv::{self, ConvSpec};
use super::{check_same_shape, norm, pool, Real, Result, Tensor4, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Log-variance clamp applied by the variational ops.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: (usize, usize),
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNormTrain {
        gamma: Var,
        beta: Var,
        x: Var,
        xhat: Tensor4<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Reparameterize {
        mu: Var,
        log_var: Var,
        noise: Tensor4<T>,
    },
    Kl {
        mu: Var,
        log_var: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    AddScaled {
        a: Var,
        b: Var,
        weight: T,
    },
    WeightedSum {
        x: Var,
        weights: Tensor4<T>,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch-norm behaviour for one forward call.
pub enum BatchNormMode<'a, T> {
    /// Normalize by batch statistics.
    Train { eps: T },
    /// Normalize by the given running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics of the batch seen by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Values per channel that produced the statistics.
    pub count: usize,
}

/// Recorded forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn clamp_log_var<T: Real>(v: T) -> T {
    v.max(T::of(LOG_VAR_MIN)).min(T::of(LOG_VAR_MAX))
}

fn in_clamp_range<T: Real>(v: T) -> bool {
    v > T::of(LOG_VAR_MIN) && v < T::of(LOG_VAR_MAX)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_needs(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|&v| self.needs(v))
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let rg = self.any_needs(&[Some(x), Some(w), b]);
        Ok(self.push(y, Op::Conv2d { x, w, b, spec: *spec }, rg))
    }

    /// Per-channel `same` convolution, weights `(C, 1, kh, kw)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: (usize, usize)) -> Result<Var> {
        let y = conv::depthwise_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), dilation)?;
        let rg = self.any_needs(&[Some(x), Some(w), b]);
        Ok(self.push(y, Op::Depthwise { x, w, b, dilation }, rg))
    }

    /// Depthwise stage (`dw_w`: `(C_in, 1, kh, kw)`) followed by a pointwise 1x1 stage
    /// (`pw_w`: `(C_out, C_in, 1, 1)`).
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        dw_w: Var,
        dw_b: Option<Var>,
        pw_w: Var,
        pw_b: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        let [_, _, kh, kw] = self.shape(dw_w);
        if (kh, kw) != spec.kernel {
            return Err(TensorError::ShapeMismatch {
                op: "separable_conv2d kernel",
                expected: vec![spec.kernel.0, spec.kernel.1],
                got: vec![kh, kw],
            });
        }
        let mid = self.depthwise_conv2d(x, dw_w, dw_b, spec.dilation)?;
        self.conv2d(
            mid,
            pw_w,
            pw_b,
            &ConvSpec::pointwise(spec.in_channels, spec.out_channels),
        )
    }

    /// Transposed convolution with a 2x2 kernel and stride 2, weights `(C_in, C_out, 2, 2)`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = conv::conv_transpose2x2_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.any_needs(&[Some(x), Some(w), b]);
        Ok(self.push(y, Op::ConvTranspose { x, w, b }, rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = pool::max_pool2_forward(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    fn check_channel_param(&self, op: &'static str, p: Var, channels: usize) -> Result<()> {
        if self.shape(p) != [1, channels, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: vec![1, channels, 1, 1],
                got: self.shape(p).to_vec(),
            });
        }
        Ok(())
    }

    /// Batch normalization; `gamma`/`beta` are `(1, C, 1, 1)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [n, c, h, w] = self.shape(x);
        self.check_channel_param("batch_norm gamma", gamma, c)?;
        self.check_channel_param("batch_norm beta", beta, c)?;
        let rg = self.any_needs(&[Some(x), Some(gamma), Some(beta)]);
        match mode {
            BatchNormMode::Train { eps } => {
                let out =
                    norm::batch_norm_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
                let stats = BatchStats {
                    mean: out.mean,
                    var: out.var,
                    count: n * h * w,
                };
                let v = self.push(
                    out.y,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        xhat: out.xhat,
                        inv_std: out.inv_std,
                    },
                    rg,
                );
                Ok((v, Some(stats)))
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::ShapeMismatch {
                        op: "batch_norm running stats",
                        expected: vec![c],
                        got: vec![mean.len(), var.len()],
                    });
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let g = self.value(gamma).data();
                let bt = self.value(beta).data();
                let plane = h * w;
                let mut y = self.value(x).clone();
                for ni in 0..n {
                    for (ci, chunk) in y.item_mut(ni).chunks_mut(plane).enumerate() {
                        let scale = g[ci] * inv_std[ci];
                        let shift = bt[ci] - mean[ci] * scale;
                        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
                    }
                }
                let v = self.push(
                    y,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean: mean.to_vec(),
                        inv_std,
                    },
                    rg,
                );
                Ok((v, None))
            }
        }
    }

    /// Parametric ReLU with per-channel slope `(1, C, 1, 1)`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        self.check_channel_param("prelu slope", slope, c)?;
        let a = self.value(slope).data().to_vec();
        let mut y = self.value(x).clone();
        for ni in 0..n {
            for (ci, chunk) in y.item_mut(ni).chunks_mut(h * w).enumerate() {
                chunk.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v *= a[ci]
                    }
                });
            }
        }
        let rg = self.any_needs(&[Some(x), Some(slope)]);
        Ok(self.push(y, Op::Prelu { x, slope }, rg))
    }

    /// Concatenate along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: vec![na, ha, wa],
                got: vec![nb, hb, wb],
            });
        }
        let mut y = Tensor4::zeros([na, ca + cb, ha, wa]);
        let (va, vb) = (self.value(a), self.value(b));
        for ni in 0..na {
            let dst = y.item_mut(ni);
            let split = va.item(ni).len();
            dst[..split].copy_from_slice(va.item(ni));
            dst[split..].copy_from_slice(vb.item(ni));
        }
        let rg = self.any_needs(&[Some(a), Some(b)]);
        Ok(self.push(y, Op::Concat { a, b }, rg))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_channels",
                msg: format!("range {start}..{} outside {c} channels", start + len),
            });
        }
        let plane = h * w;
        let mut y = Tensor4::zeros([n, len, h, w]);
        let vx = self.value(x);
        for ni in 0..n {
            y.item_mut(ni)
                .copy_from_slice(&vx.item(ni)[start * plane..(start + len) * plane]);
        }
        let rg = self.needs(x);
        Ok(self.push(y, Op::Slice { x, start }, rg))
    }

    /// `z = mu + exp(0.5 * log_var) * eps` with `eps ~ N(0, I)` drawn from `rng`.
    pub fn reparameterize<R: Rng + ?Sized>(&mut self, mu: Var, log_var: Var, rng: &mut R) -> Result<Var> {
        let shape = self.shape(mu);
        let noise = Tensor4::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)));
        self.reparameterize_with_noise(mu, log_var, noise)
    }

    /// Reparameterization with caller-supplied noise; `log_var` is clamped to [-20, 20].
    pub fn reparameterize_with_noise(&mut self, mu: Var, log_var: Var, noise: Tensor4<T>) -> Result<Var> {
        check_same_shape("reparameterize", self.value(mu), self.value(log_var))?;
        check_same_shape("reparameterize noise", self.value(mu), &noise)?;
        let mut z = self.value(mu).clone();
        for ((zv, &lv), &e) in z
            .data_mut()
            .iter_mut()
            .zip(self.value(log_var).data())
            .zip(noise.data())
        {
            *zv += (T::of(0.5) * clamp_log_var(lv)).exp() * e;
        }
        let rg = self.any_needs(&[Some(mu), Some(log_var)]);
        Ok(self.push(z, Op::Reparameterize { mu, log_var, noise }, rg))
    }

    /// KL divergence of `N(mu, exp(log_var))` from the standard normal, summed over all
    /// latent elements and averaged over the batch.
    pub fn kl_standard_normal(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        check_same_shape("kl_standard_normal", self.value(mu), self.value(log_var))?;
        let batch = self.shape(mu)[0];
        let total: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_var).data())
            .map(|(&m, &lv)| {
                let lv = clamp_log_var(lv).as_f64();
                let m = m.as_f64();
                m * m + lv.exp() - lv - 1.0
            })
            .sum();
        let value = Tensor4::scalar(T::of(0.5 * total / batch as f64));
        let rg = self.any_needs(&[Some(mu), Some(log_var)]);
        Ok(self.push(value, Op::Kl { mu, log_var }, rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        check_same_shape("mse", p, t)?;
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let value = Tensor4::scalar(T::of(sum / p.numel() as f64));
        let rg = self.any_needs(&[Some(pred), Some(target)]);
        Ok(self.push(value, Op::Mse { pred, target }, rg))
    }

    /// `a + weight * b` for equally shaped `a`, `b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, weight: T) -> Result<Var> {
        check_same_shape("add_scaled", self.value(a), self.value(b))?;
        let mut y = self.value(a).clone();
        for (o, &v) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += weight * v;
        }
        let rg = self.any_needs(&[Some(a), Some(b)]);
        Ok(self.push(y, Op::AddScaled { a, b, weight }, rg))
    }

    /// Scalar `sum(x * weights)`; handy as a probe loss.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor4<T>) -> Result<Var> {
        check_same_shape("weighted_sum", self.value(x), &weights)?;
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor4::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape != [1, 1, 1, 1] {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let cg =
                    conv::conv2d_backward(self.value(*x), self.value(*w), g, spec, self.needs(*x), self.needs(*w))?;
                self.apply_conv_grads(grads, *x, *w, *b, cg);
            }
            Op::Depthwise { x, w, b, dilation } => {
                let cg = conv::depthwise_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *dilation,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                self.apply_conv_grads(grads, *x, *w, *b, cg);
            }
            Op::ConvTranspose { x, w, b } => {
                let cg = conv::conv_transpose2x2_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                self.apply_conv_grads(grads, *x, *w, *b, cg);
            }
            Op::MaxPool { x, argmax } => {
                let dx = pool::max_pool2_backward(self.shape(*x), argmax, g);
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dgamma, dbeta) = norm::batch_norm_train_backward(xhat, inv_std, self.value(*gamma).data(), g);
                let c = dgamma.len();
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor4::from_vec([1, c, 1, 1], dgamma)?);
                self.accumulate(grads, *beta, Tensor4::from_vec([1, c, 1, 1], dbeta)?);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let gm = self.value(*gamma).data();
                let xv = self.value(*x);
                let mut dx = g.clone();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    let xi = xv.item(ni);
                    let gi = g.item(ni);
                    for ci in 0..c {
                        let r = ci * plane..(ci + 1) * plane;
                        for (&gv, &xval) in gi[r.clone()].iter().zip(&xi[r.clone()]) {
                            dbeta[ci] += gv;
                            dgamma[ci] += gv * (xval - mean[ci]) * inv_std[ci];
                        }
                        let k = gm[ci] * inv_std[ci];
                        dx.item_mut(ni)[r].iter_mut().for_each(|v| *v *= k);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor4::from_vec([1, c, 1, 1], dgamma)?);
                self.accumulate(grads, *beta, Tensor4::from_vec([1, c, 1, 1], dbeta)?);
            }
            Op::Prelu { x, slope } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let a = self.value(*slope).data();
                let xv = self.value(*x);
                let mut dx = g.clone();
                let mut da = vec![T::zero(); c];
                for ni in 0..n {
                    let xi = xv.item(ni);
                    let gi = g.item(ni);
                    let di = dx.item_mut(ni);
                    for ci in 0..c {
                        let r = ci * plane..(ci + 1) * plane;
                        for ((d, &gv), &xval) in di[r.clone()].iter_mut().zip(&gi[r.clone()]).zip(&xi[r]) {
                            if xval < T::zero() {
                                *d = gv * a[ci];
                                da[ci] += gv * xval;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *slope, Tensor4::from_vec([1, c, 1, 1], da)?);
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.shape(*a);
                let cb = self.shape(*b)[1];
                let split = ca * h * w;
                let mut da = Tensor4::zeros([n, ca, h, w]);
                let mut db = Tensor4::zeros([n, cb, h, w]);
                for ni in 0..n {
                    let gi = g.item(ni);
                    da.item_mut(ni).copy_from_slice(&gi[..split]);
                    db.item_mut(ni).copy_from_slice(&gi[split..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Slice { x, start } => {
                let [n, _, h, w] = self.shape(*x);
                let plane = h * w;
                let len = g.shape()[1];
                let mut dx = Tensor4::zeros(self.shape(*x));
                for ni in 0..n {
                    dx.item_mut(ni)[start * plane..(start + len) * plane].copy_from_slice(g.item(ni));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reparameterize { mu, log_var, noise } => {
                let lv = self.value(*log_var);
                let mut dlv = Tensor4::zeros(lv.shape());
                for (((d, &gv), &l), &e) in dlv.data_mut().iter_mut().zip(g.data()).zip(lv.data()).zip(noise.data()) {
                    if in_clamp_range(l) {
                        *d = gv * e * T::of(0.5) * (T::of(0.5) * l).exp();
                    }
                }
                self.accumulate(grads, *mu, g.clone());
                self.accumulate(grads, *log_var, dlv);
            }
            Op::Kl { mu, log_var } => {
                let gs = g.item_value();
                let batch = T::of(self.shape(*mu)[0] as f64);
                let k = gs / batch;
                let dmu = self.value(*mu).map(|m| k * m);
                let dlv = self.value(*log_var).map(|l| {
                    if in_clamp_range(l) {
                        k * T::of(0.5) * (l.exp() - T::one())
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *mu, dmu);
                self.accumulate(grads, *log_var, dlv);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let k = T::of(2.0) * g.item_value() / T::of(p.numel() as f64);
                let mut dp = p.clone();
                for (d, &tv) in dp.data_mut().iter_mut().zip(t.data()) {
                    *d = k * (*d - tv);
                }
                if self.needs(*target) {
                    self.accumulate(grads, *target, dp.map(|v| -v));
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::AddScaled { a, b, weight } => {
                self.accumulate(grads, *a, g.clone());
                let w = *weight;
                self.accumulate(grads, *b, g.map(|v| v * w));
            }
            Op::WeightedSum { x, weights } => {
                let gs = g.item_value();
                self.accumulate(grads, *x, weights.map(|v| v * gs));
            }
        }
        Ok(())
    }

    fn apply_conv_grads(
        &self,
        grads: &mut [Option<Tensor4<T>>],
        x: Var,
        w: Var,
        b: Option<Var>,
        cg: conv::ConvGrads<T>,
    ) {
        if let Some(dx) = cg.dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(dw) = cg.dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(b) = b {
            self.accumulate(grads, b, cg.db);
        }
    }
}

/// Gradients of the leaves reached by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
