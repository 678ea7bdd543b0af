use super::conv::{add_channel_bias, channel_sums, ConvGeometry};
use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::norm::{channel_moments, BatchNormMode, BatchNormStats, BN_EPSILON, BN_MOMENTUM};
use super::{dim_err, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mse {
        prediction: Var,
        target: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::GlobalAvgPool(_) => "global_avg_pool2d",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mse { .. } => "mse_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Records operations in execution order so [`Tape::backward`] can replay
/// them in reverse. Inputs always precede the nodes that consume them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward fills its gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node { tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].tensor.grad.take()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].tensor.data
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        let requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        let tensor = Tensor::new(shape, data)?.requires_grad(requires_grad);
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { tensor, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, len: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [len] {
                return dim_err(op, format!("bias shape {:?}, expected [{len}]", self.shape(b)));
            }
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::conv2d(self.shape(input), self.shape(kernel), stride, padding)?;
        self.check_bias("conv2d", bias, geom.out_channels)?;
        let out = geom.forward(
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
        );
        let shape = vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w];
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(shape, out, Op::Conv2d { input, kernel, bias, geom }, &inputs)
    }

    /// Transposed convolution with kernel `[C_in, C_out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::conv_transpose2d(self.shape(input), self.shape(kernel), stride, padding)?;
        self.check_bias("conv_transpose2d", bias, geom.in_channels)?;
        let mut out = geom.backward_input(self.data(input), self.data(kernel));
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.data(b), geom.in_h * geom.in_w);
        }
        let shape = vec![geom.batch, geom.in_channels, geom.in_h, geom.in_w];
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(shape, out, Op::ConvTranspose2d { input, kernel, bias, geom }, &inputs)
    }

    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm2d";
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return dim_err(OP, format!("expected [N,C,H,W], got {shape:?}"));
        }
        let (n, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return dim_err(OP, format!("axis 1: {c} channels vs gamma {:?}, beta {:?}, stats {}", self.shape(gamma), self.shape(beta), stats.channels()));
        }
        let eps = T::from_f64_lossy(BN_EPSILON);
        let x = self.data(input);
        let (mean, var, train) = match mode {
            BatchNormMode::Train { update_running } => {
                let (mean, var) = channel_moments(x, n, c, l);
                if update_running {
                    let momentum = T::from_f64_lossy(BN_MOMENTUM);
                    let count = n * l;
                    for ch in 0..c {
                        let unbiased = if count > 1 {
                            var[ch] * T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
                        } else {
                            var[ch]
                        };
                        stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean[ch];
                        stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                    }
                }
                (mean, var, true)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (i, (xv, (xh, o))) in x.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / l) % c;
            *xh = (*xv - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        self.push(
            shape,
            out,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train },
            &[input, gamma, beta],
        )
    }

    /// `input[N, D_in] · weight[D_out, D_in]ᵀ + bias[D_out]`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return dim_err(OP, format!("inner dimension: input {xs:?}, weight {ws:?}"));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        self.check_bias(OP, bias, dout)?;
        let mut out = vec![T::zero(); n * dout];
        gemm_nt(self.data(input), self.data(weight), &mut out, n, din, dout);
        if let Some(b) = bias {
            add_channel_bias(&mut out, self.data(b), 1);
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(vec![n, dout], out, Op::Linear { input, weight, bias }, &inputs)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.data(input).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(input).to_vec(), out, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self
            .data(input)
            .iter()
            .map(|&v| {
                // Split by sign so exp never overflows.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        self.push(self.shape(input).to_vec(), out, Op::Sigmoid(input), &[input])
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return dim_err("global_avg_pool2d", format!("expected [N,C,H,W], got {shape:?}"));
        }
        let l = shape[2] * shape[3];
        let denom = T::from_usize_lossy(l);
        let out = self.data(input).chunks(l).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        self.push(vec![shape[0], shape[1]], out, Op::GlobalAvgPool(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(input).numel() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape(input)));
        }
        let data = self.data(input).to_vec();
        self.push(shape, data, Op::Reshape(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.data(input).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(input), &[input])
    }

    /// Mean of squared differences, as a `[1]` tensor.
    pub fn mse_loss(&mut self, prediction: Var, target: Var) -> Result<Var> {
        if self.shape(prediction) != self.shape(target) {
            return dim_err(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(prediction), self.shape(target)),
            );
        }
        let p = self.data(prediction);
        let t = self.data(target);
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = s / T::from_usize_lossy(p.len());
        self.push(vec![1], vec![loss], Op::Mse { prediction, target }, &[prediction, target])
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return dim_err(OP, format!("logits {shape:?} vs {} labels", labels.len()));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return dim_err(OP, format!("label {bad} out of range for {k} classes"));
        }
        let z = self.data(logits);
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / denom;
            }
            total += denom.ln() - (row[y] - max);
        }
        let loss = total / T::from_usize_lossy(labels.len());
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>, op: &'static str) -> Result<()> {
        if !self.needs_grad(v) {
            return Ok(());
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let slot = &mut self.nodes[v.0].tensor.grad;
        match slot {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(g) {
                    *e += d;
                }
            }
            None => *slot = Some(g),
        }
        Ok(())
    }

    /// Seeds `d loss / d loss = 1` and replays the tape in reverse, leaving
    /// gradients on every reachable tensor that requires them. Previous
    /// gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        if !self.needs_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].tensor.grad.take() else { continue };
            let contributions = self.backward_rule(i, &g)?;
            self.nodes[i].tensor.grad = Some(g);
            let name = self.nodes[i].op.name();
            for (v, dv) in contributions {
                self.accumulate(v, dv, name)?;
            }
        }
        Ok(())
    }

    fn backward_rule(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                if self.needs_grad(*input) {
                    out.push((*input, geom.backward_input(g, self.data(*kernel))));
                }
                if self.needs_grad(*kernel) {
                    out.push((*kernel, geom.backward_kernel(g, self.data(*input))));
                }
                if let Some(b) = bias {
                    out.push((*b, geom.backward_bias(g)));
                }
            }
            Op::ConvTranspose2d { input, kernel, bias, geom } => {
                if self.needs_grad(*input) {
                    out.push((*input, geom.forward(g, self.data(*kernel), None)));
                }
                if self.needs_grad(*kernel) {
                    out.push((*kernel, geom.backward_kernel(self.data(*input), g)));
                }
                if let Some(b) = bias {
                    out.push((*b, channel_sums(g, geom.in_channels, geom.in_h * geom.in_w)));
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let shape = node.tensor.shape();
                let (n, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
                let gam = self.data(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (idx, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (idx / l) % c;
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
                if self.needs_grad(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *train {
                        let m = T::from_usize_lossy(n * l);
                        for (idx, d) in dx.iter_mut().enumerate() {
                            let ch = (idx / l) % c;
                            let dxhat = g[idx] * gam[ch];
                            let sum_dxhat = dbeta[ch] * gam[ch];
                            let sum_dxhat_xhat = dgamma[ch] * gam[ch];
                            *d = inv_std[ch] / m * (m * dxhat - sum_dxhat - xhat[idx] * sum_dxhat_xhat);
                        }
                    } else {
                        for (idx, d) in dx.iter_mut().enumerate() {
                            let ch = (idx / l) % c;
                            *d = g[idx] * gam[ch] * inv_std[ch];
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Linear { input, weight, bias } => {
                let (n, din) = (self.shape(*input)[0], self.shape(*input)[1]);
                let dout = self.shape(*weight)[0];
                if self.needs_grad(*input) {
                    let mut dx = vec![T::zero(); n * din];
                    gemm_nn(g, self.data(*weight), &mut dx, n, dout, din);
                    out.push((*input, dx));
                }
                if self.needs_grad(*weight) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm_tn(g, self.data(*input), &mut dw, dout, n, din);
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    out.push((*b, channel_sums(g, dout, 1)));
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let y = node.tensor.data();
                let dx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let l = s[2] * s[3];
                let denom = T::from_usize_lossy(l);
                let mut dx = Vec::with_capacity(g.len() * l);
                for &gv in g {
                    dx.extend(std::iter::repeat(gv / denom).take(l));
                }
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    out.push((*a, g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect()));
                }
                if self.needs_grad(*b) {
                    out.push((*b, g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mse { prediction, target } => {
                let p = self.data(*prediction);
                let t = self.data(*target);
                let scale = T::from_f64_lossy(2.0) * g[0] / T::from_usize_lossy(p.len());
                let d: Vec<T> = p.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect();
                if self.needs_grad(*target) {
                    out.push((*target, d.iter().map(|&v| -v).collect()));
                }
                out.push((*prediction, d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize_lossy(labels.len());
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= scale;
                }
                out.push((*logits, d));
            }
        }
        Ok(out)
    }
}
