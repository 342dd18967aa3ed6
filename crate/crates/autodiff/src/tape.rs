//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its output value and the data its backward
//! rule needs. Nodes are only ever appended, so insertion order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{dims_like, nchw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolOp {
    Max,
    Avg,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm mode. Training normalizes by batch statistics and folds them
/// into the running stats; evaluation reads the running stats.
pub enum BnMode<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelScale {
        features: Var,
        weights: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    AdaptiveAvgPool {
        input: Var,
        grid: usize,
    },
    GlobalAvgPool(Var),
    Bilinear {
        input: Var,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        dlogits: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Finite-value checks follow `debug_assertions`.
    pub fn new() -> Self {
        Self::with_checks(cfg!(debug_assertions))
    }

    pub fn with_checks(check_finite: bool) -> Self {
        Self {
            nodes: Vec::new(),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &str) -> Result<Var> {
        if self.check_finite {
            value.check_finite(name)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let (n, cin, h, w) = nchw(&xd)?;
        let wd = self.dims(weight).to_vec();
        let [cout, wcin, kh, kw] = wd[..] else {
            return shape_err(format!("conv2d weight must be [Cout,Cin,k,k], got {wd:?}"));
        };
        if wcin != cin || kh != kw || kh == 0 {
            return shape_err(format!("conv2d weight {wd:?} does not fit input {xd:?}"));
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(format!("conv2d kernel {kh} larger than padded input {xd:?}"));
        }
        if let Some(b) = bias {
            if self.dims(b) != [cout] {
                return shape_err(format!("conv2d bias must be [{cout}], got {:?}", self.dims(b)));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad: padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let dims = dims_like(&xd, n, cout, geom.out_h(), geom.out_w());
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            Tensor::new(dims, out)?,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    /// Per-channel batch normalization over the N, H and W axes.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let (n, c, h, w) = nchw(&xd)?;
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return shape_err(format!(
                "batch_norm gamma/beta must be [{c}], got {:?}/{:?}",
                self.dims(gamma),
                self.dims(beta)
            ));
        }
        let m = n * h * w;
        let plane = h * w;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let train = matches!(mode, BnMode::Train(_));
        let mut batch_mean = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        match &mode {
            BnMode::Train(rs) => {
                if m < 2 {
                    return Err(TensorError::Contract(format!(
                        "batch_norm in train mode needs N*H*W >= 2, got {m}"
                    )));
                }
                if rs.mean.len() != c {
                    return shape_err("running stats channel mismatch");
                }
                for ch in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        let o = (ni * c + ch) * plane;
                        s += x[o..o + plane].iter().sum::<f64>();
                    }
                    let mean = s / m as f64;
                    let mut v = 0.0;
                    for ni in 0..n {
                        let o = (ni * c + ch) * plane;
                        v += x[o..o + plane].iter().map(|t| (t - mean) * (t - mean)).sum::<f64>();
                    }
                    let var = v / m as f64;
                    batch_mean[ch] = mean;
                    batch_var[ch] = var;
                    inv_std[ch] = 1.0 / (var + BN_EPS).sqrt();
                }
            }
            BnMode::Eval(rs) => {
                if rs.mean.len() != c {
                    return shape_err("running stats channel mismatch");
                }
                batch_mean.copy_from_slice(&rs.mean);
                for ch in 0..c {
                    inv_std[ch] = 1.0 / (rs.var[ch] + BN_EPS).sqrt();
                }
            }
        }
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ch in 0..c {
                let o = (ni * c + ch) * plane;
                for i in o..o + plane {
                    let xh = (x[i] - batch_mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        if let BnMode::Train(rs) = mode {
            // Running variance uses the unbiased estimate.
            let unbias = m as f64 / (m as f64 - 1.0);
            for ch in 0..c {
                rs.mean[ch] = (1.0 - BN_MOMENTUM) * rs.mean[ch] + BN_MOMENTUM * batch_mean[ch];
                rs.var[ch] = (1.0 - BN_MOMENTUM) * rs.var[ch] + BN_MOMENTUM * batch_var[ch] * unbias;
            }
        }
        self.push(
            Tensor::new(xd, out)?,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            "batch_norm",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        // NaN passes through so numeric failures stay visible downstream.
        let v = self.value(x).map(|t| if t > 0.0 || t.is_nan() { t } else { 0.0 });
        self.push(v, &[x], Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, &[x], Op::Sigmoid(x), "sigmoid")
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(self.dims(a).to_vec(), data)?;
        self.push(v, &[a, b], Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(self.dims(a).to_vec(), data)?;
        self.push(v, &[a, b], Op::Mul(a, b), "mul")
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t * factor);
        self.push(v, &[x], Op::Scale(x, factor), "scale")
    }

    /// `out[n,c,h,w] = features[n,c,h,w] * weights[n,c]`.
    ///
    /// Weights may be shaped `[C]` / `[N,C]` / `[N,C,1,1]`; only the element
    /// count `N*C` matters.
    pub fn channel_scale(&mut self, features: Var, weights: Var) -> Result<Var> {
        let fd = self.dims(features).to_vec();
        let (n, c, h, w) = nchw(&fd)?;
        if self.value(weights).numel() != n * c {
            return shape_err(format!(
                "channel_scale: {} weights for {n}x{c} channels",
                self.value(weights).numel()
            ));
        }
        let plane = h * w;
        let f = self.value(features).data();
        let wt = self.value(weights).data();
        let mut out = vec![0.0; f.len()];
        for (nc, &s) in wt.iter().enumerate() {
            for i in nc * plane..(nc + 1) * plane {
                out[i] = f[i] * s;
            }
        }
        self.push(
            Tensor::new(fd, out)?,
            &[features, weights],
            Op::ChannelScale { features, weights },
            "channel_scale",
        )
    }

    pub fn pool(&mut self, op: PoolOp, input: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let (n, c, h, w) = nchw(&xd)?;
        if k == 0 || stride == 0 {
            return Err(TensorError::Contract("pool window and stride must be >= 1".into()));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return shape_err(format!("pool window {k} larger than plane {h}x{w}"));
        }
        if padding > 0 && (op == PoolOp::Avg || 2 * padding > k) {
            return Err(TensorError::Contract(
                "padding is supported for max pooling with padding <= k/2 only".into(),
            ));
        }
        let geom = PoolGeom {
            planes: n * c,
            h,
            w,
            k,
            stride,
            pad: padding,
        };
        let dims = dims_like(&xd, n, c, geom.out_h(), geom.out_w());
        match op {
            PoolOp::Max => {
                let (out, argmax) = kernels::max_pool_forward(&geom, self.value(input).data());
                self.push(Tensor::new(dims, out)?, &[input], Op::MaxPool { input, argmax }, "max_pool")
            }
            PoolOp::Avg => {
                let out = kernels::avg_pool_forward(&geom, self.value(input).data());
                self.push(Tensor::new(dims, out)?, &[input], Op::AvgPool { input, geom }, "avg_pool")
            }
        }
    }

    /// Average over an aligned `grid x grid` partition of each plane.
    pub fn adaptive_avg_pool(&mut self, input: Var, grid: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let (n, c, h, w) = nchw(&xd)?;
        if grid == 0 || grid > h || grid > w {
            return shape_err(format!("grid {grid} does not fit plane {h}x{w}"));
        }
        let out = kernels::adaptive_avg_pool_forward(n * c, h, w, grid, self.value(input).data());
        let dims = dims_like(&xd, n, c, grid, grid);
        self.push(
            Tensor::new(dims, out)?,
            &[input],
            Op::AdaptiveAvgPool { input, grid },
            "adaptive_avg_pool",
        )
    }

    /// `[C,H,W] -> [C]`, `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let (n, c, h, w) = nchw(&xd)?;
        let plane = h * w;
        let x = self.value(input).data();
        let out: Vec<f64> = (0..n * c)
            .map(|i| x[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let dims = if xd.len() == 3 { vec![c] } else { vec![n, c, 1, 1] };
        self.push(Tensor::new(dims, out)?, &[input], Op::GlobalAvgPool(input), "global_avg_pool")
    }

    /// Bilinear resize with half-pixel centers (no corner alignment).
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        let (n, c, h, w) = nchw(&xd)?;
        if out_h == 0 || out_w == 0 {
            return shape_err("bilinear_resize output must be at least 1x1");
        }
        let out = kernels::bilinear_forward(n * c, h, w, out_h, out_w, self.value(input).data());
        let dims = dims_like(&xd, n, c, out_h, out_w);
        self.push(Tensor::new(dims, out)?, &[input], Op::Bilinear { input }, "bilinear_resize")
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        let fd = self.dims(first).to_vec();
        let (n, _, h, w) = nchw(&fd)?;
        let mut total_c = 0;
        for &v in inputs {
            let d = self.dims(v);
            let (vn, vc, vh, vw) = nchw(d)?;
            if d.len() != fd.len() || vn != n || vh != h || vw != w {
                return shape_err(format!("concat: {d:?} vs {fd:?}"));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for ni in 0..n {
            for &v in inputs {
                let (_, vc, _, _) = nchw(self.dims(v))?;
                let x = self.value(v).data();
                out.extend_from_slice(&x[ni * vc * plane..(ni + 1) * vc * plane]);
            }
        }
        let dims = dims_like(&fd, n, total_c, h, w);
        self.push(Tensor::new(dims, out)?, inputs, Op::Concat(inputs.to_vec()), "concat")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(dims)?;
        self.push(v, &[x], Op::Reshape(x), "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x), "sum")
    }

    /// Pixel-weighted softmax cross entropy.
    ///
    /// For each sample, the loss is `sum_p w_p * -log softmax(logits_p)[label_p]`
    /// divided by `sum_p w_p` (zero when every weight is zero). Batched
    /// `[N,K,H,W]` logits reduce by the mean over samples. `labels` and
    /// `weights` are `N*H*W` long. Pixels labelled `ignore_id` must carry
    /// weight 0.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u32],
        weights: &[f64],
        ignore_id: u32,
    ) -> Result<Var> {
        let ld = self.dims(logits).to_vec();
        let (n, k, h, w) = nchw(&ld)?;
        let plane = h * w;
        if labels.len() != n * plane || weights.len() != n * plane {
            return shape_err(format!(
                "cross entropy: {} labels / {} weights for {n} x {h}x{w}",
                labels.len(),
                weights.len()
            ));
        }
        let x = self.value(logits).data();
        let mut dlogits = vec![0.0; x.len()];
        let mut total = 0.0;
        let mut probs = vec![0.0; k];
        for ni in 0..n {
            let lw = &weights[ni * plane..(ni + 1) * plane];
            let ll = &labels[ni * plane..(ni + 1) * plane];
            let mut wsum = 0.0;
            for (p, (&wp, &lab)) in lw.iter().zip(ll).enumerate() {
                if !(wp >= 0.0) || !wp.is_finite() {
                    return Err(TensorError::Data(format!("pixel weight {wp} at {p} is not a finite non-negative value")));
                }
                if wp > 0.0 {
                    if lab == ignore_id {
                        return Err(TensorError::Data(format!("ignore-labelled pixel {p} has weight {wp}")));
                    }
                    if lab as usize >= k {
                        return Err(TensorError::Data(format!("label {lab} out of range for {k} classes")));
                    }
                }
                wsum += wp;
            }
            if wsum == 0.0 {
                continue;
            }
            let base = ni * k * plane;
            let mut sample_loss = 0.0;
            for p in 0..plane {
                let wp = lw[p];
                if wp == 0.0 {
                    continue;
                }
                let mut mx = f64::NEG_INFINITY;
                for c in 0..k {
                    mx = mx.max(x[base + c * plane + p]);
                }
                let mut z = 0.0;
                for c in 0..k {
                    probs[c] = (x[base + c * plane + p] - mx).exp();
                    z += probs[c];
                }
                let lab = ll[p] as usize;
                let log_p = x[base + lab * plane + p] - mx - z.ln();
                sample_loss += wp * -log_p;
                let coef = wp / (wsum * n as f64);
                for c in 0..k {
                    let target = if c == lab { 1.0 } else { 0.0 };
                    dlogits[base + c * plane + p] = coef * (probs[c] / z - target);
                }
            }
            total += sample_loss / wsum;
        }
        let loss = total / n as f64;
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy { logits, dlogits },
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate across fan-out. Every node that requires a
    /// gradient gets one, zero-filled when it does not influence `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let dims = node.value.dims().to_vec();
                Some(match g {
                    Some(data) => Tensor::new(dims, data).expect("gradient dims"),
                    None => Tensor::zeros(&dims),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, g: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gy,
                    self.wants(*input),
                );
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                if self.wants(*weight) {
                    acc(*weight, dw);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        acc(*b, db);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = nchw(self.dims(*input)).expect("validated in forward");
                let plane = h * w;
                let m = (n * plane) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let o = (ni * c + ch) * plane;
                        for i in o..o + plane {
                            dgamma[ch] += gy[i] * xhat[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; gy.len()];
                    for ni in 0..n {
                        for ch in 0..c {
                            let o = (ni * c + ch) * plane;
                            let scale = g[ch] * inv_std[ch];
                            for i in o..o + plane {
                                dx[i] = if *train {
                                    scale / m * (m * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    scale * gy[i]
                                };
                            }
                        }
                    }
                    acc(*input, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, gy.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, gy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    acc(*a, gy.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, gy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, f) => acc(*x, gy.iter().map(|g| g * f).collect()),
            Op::ChannelScale { features, weights } => {
                let fv = self.value(*features);
                let wv = self.value(*weights).data();
                let plane = fv.numel() / wv.len();
                if self.wants(*features) {
                    let mut df = vec![0.0; gy.len()];
                    for (nc, &s) in wv.iter().enumerate() {
                        for i in nc * plane..(nc + 1) * plane {
                            df[i] = gy[i] * s;
                        }
                    }
                    acc(*features, df);
                }
                if self.wants(*weights) {
                    let f = fv.data();
                    let dw = (0..wv.len())
                        .map(|nc| {
                            (nc * plane..(nc + 1) * plane)
                                .map(|i| gy[i] * f[i])
                                .sum::<f64>()
                        })
                        .collect();
                    acc(*weights, dw);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (o, &i) in argmax.iter().enumerate() {
                    dx[i] += gy[o];
                }
                acc(*input, dx);
            }
            Op::AvgPool { input, geom } => acc(*input, kernels::avg_pool_backward(geom, gy)),
            Op::AdaptiveAvgPool { input, grid } => {
                let (n, c, h, w) = nchw(self.dims(*input)).expect("validated in forward");
                acc(*input, kernels::adaptive_avg_pool_backward(n * c, h, w, *grid, gy));
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = nchw(self.dims(*x)).expect("validated in forward");
                let plane = h * w;
                let mut dx = vec![0.0; n * c * plane];
                for (nc, g) in gy.iter().enumerate() {
                    let v = g / plane as f64;
                    dx[nc * plane..(nc + 1) * plane].fill(v);
                }
                acc(*x, dx);
            }
            Op::Bilinear { input } => {
                let (n, c, h, w) = nchw(self.dims(*input)).expect("validated in forward");
                let (_, _, oh, ow) = nchw(node.value.dims()).expect("validated in forward");
                acc(*input, kernels::bilinear_backward(n * c, h, w, oh, ow, gy));
            }
            Op::Concat(inputs) => {
                let (n, total_c, h, w) = nchw(node.value.dims()).expect("validated in forward");
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let (_, vc, _, _) = nchw(self.dims(v)).expect("validated in forward");
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(n * vc * plane);
                        for ni in 0..n {
                            let s = (ni * total_c + offset) * plane;
                            dv.extend_from_slice(&gy[s..s + vc * plane]);
                        }
                        acc(v, dv);
                    }
                    offset += vc;
                }
            }
            Op::Reshape(x) => acc(*x, gy.to_vec()),
            Op::Sum(x) => acc(*x, vec![gy[0]; self.value(*x).numel()]),
            Op::CrossEntropy { logits, dlogits } => {
                acc(*logits, dlogits.iter().map(|d| d * gy[0]).collect());
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
