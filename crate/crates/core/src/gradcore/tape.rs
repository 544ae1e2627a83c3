use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{config_err, Error, Result};

/// BatchNorm variance guard.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistic update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero fill so that the output keeps the input's spatial extent.
    #[default]
    Same,
    Valid,
}

/// Per-channel running statistics used by BatchNorm in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving average towards `batch`.
    pub fn update(&mut self, batch: &BnStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics; the op reports them for the caller to fold in.
    Train,
    Infer(&'a BnStats),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Channel layout of a BatchNorm input: `outer x channels x inner`.
#[derive(Debug, Clone, Copy)]
struct BnLayout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl BnLayout {
    fn of(shape: &[usize]) -> Self {
        match shape.len() {
            1 => Self { outer: 1, channels: shape[0], inner: 1 },
            _ => Self { outer: shape[0], channels: shape[1], inner: shape[2..].iter().product() },
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn for_each_in_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for o in 0..self.outer {
            let base = (o * self.channels + c) * self.inner;
            for i in 0..self.inner {
                f(base + i);
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cols: Vec<f64> },
    Dense { input: Var, weight: Var, bias: Var, rows: usize, fan_in: usize, fan_out: usize },
    Relu { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, layout: BnLayout, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    SoftmaxXent { logits: Var, probs: Vec<f64>, labels: Vec<usize>, classes: usize, scale: f64 },
    NeighborMean { input: Var, group: usize, features: usize },
    Concat { a: Var, b: Var, rows: usize, fa: usize, fb: usize },
    Reshape { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
    Scale { input: Var, factor: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Wengert list for reverse-mode differentiation. Nodes are appended in
/// evaluation order, so the list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of `shape` when the output does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// 2-D cross-correlation over `[N, C_i, H, W]` (or unbatched `[C_i, H, W]`)
    /// with kernels `[C_o, C_i, k_h, k_w]` and per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let (batched, n, ci, h, w) = match xs.len() {
            3 => (false, 1, xs[0], xs[1], xs[2]),
            4 => (true, xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(config_err(format!("conv2d input must be rank 3 or 4, got shape {xs:?}"))),
        };
        if ks.len() != 4 {
            return Err(config_err(format!("conv2d kernel must be rank 4, got shape {ks:?}")));
        }
        let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kci != ci {
            return Err(config_err(format!(
                "conv2d input channel count {ci} does not match kernel input channels {kci}"
            )));
        }
        if bs != [co] {
            return Err(config_err(format!("conv2d bias shape {bs:?} does not match output channels {co}")));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => (kh - 1, kw - 1),
            Padding::Valid => (0, 0),
        };
        if kh > h + pad_h {
            return Err(config_err(format!("conv2d kernel height {kh} exceeds padded input height {}", h + pad_h)));
        }
        if kw > w + pad_w {
            return Err(config_err(format!("conv2d kernel width {kw} exceeds padded input width {}", w + pad_w)));
        }
        let geom = ConvGeom {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            oh: h + pad_h - kh + 1,
            ow: w + pad_w - kw + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let np = geom.n * geom.positions();
        let mut mat = vec![0.0; co * np];
        gemm(co, geom.patch(), np, self.value(kernel).data(), false, &cols, false, 0.0, &mut mat);
        let b = self.value(bias).data();
        let p = geom.positions();
        let mut out = vec![0.0; n * co * p];
        for s in 0..n {
            for c in 0..co {
                let dst = &mut out[(s * co + c) * p..(s * co + c + 1) * p];
                let src = &mat[c * np + s * p..c * np + (s + 1) * p];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + b[c];
                }
            }
        }
        let shape = if batched { vec![n, co, geom.oh, geom.ow] } else { vec![co, geom.oh, geom.ow] };
        Ok(self.push(Op::Conv2d { input, kernel, bias, geom, cols }, Tensor::from_parts(shape, out)))
    }

    /// Affine map `x W^T + b` over `[N, F_i]` rows or a single `[F_i]` vector.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if ws.len() != 2 {
            return Err(config_err(format!("dense weight must be rank 2, got {ws:?}")));
        }
        let (fan_out, fan_in) = (ws[0], ws[1]);
        let (rows, fi) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => return Err(config_err(format!("dense input must be rank 1 or 2, got {xs:?}"))),
        };
        if fi != fan_in {
            return Err(config_err(format!("dense input width {fi} does not match weight fan-in {fan_in}")));
        }
        if bs != [fan_out] {
            return Err(config_err(format!("dense bias shape {bs:?} does not match fan-out {fan_out}")));
        }
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        gemm(rows, fan_in, fan_out, self.value(input).data(), false, self.value(weight).data(), true, 1.0, &mut out);
        let shape = if xs.len() == 1 { vec![fan_out] } else { vec![rows, fan_out] };
        Ok(self.push(Op::Dense { input, weight, bias, rows, fan_in, fan_out }, Tensor::from_parts(shape, out)))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = x.shape().to_vec();
        self.push(Op::Relu { input }, Tensor::from_parts(shape, out))
    }

    /// BatchNorm over the batch axis (and spatial axes for rank-4 input), one
    /// statistic per channel at axis 1. Train mode also returns the batch
    /// statistics (unbiased variance) for the running-average update.
    pub fn batchnorm(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BnStats>)> {
        let x = self.value(input);
        let layout = BnLayout::of(x.shape());
        let c = layout.channels;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(config_err(format!(
                "batchnorm affine parameters must have shape [{c}], got {:?} and {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let xd = x.data();
        let count = layout.count() as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut report = None;
        match mode {
            BnMode::Train => {
                let mut unbiased = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    layout.for_each_in_channel(ch, |i| s += xd[i]);
                    let mu = s / count;
                    let mut ss = 0.0;
                    layout.for_each_in_channel(ch, |i| ss += (xd[i] - mu) * (xd[i] - mu));
                    mean[ch] = mu;
                    var[ch] = ss / count;
                    unbiased[ch] = if count > 1.0 { ss / (count - 1.0) } else { ss };
                }
                report = Some(BnStats { mean: mean.clone(), var: unbiased });
            }
            BnMode::Infer(stats) => {
                if stats.channels() != c {
                    return Err(config_err(format!(
                        "batchnorm running statistics cover {} channels, input has {c}",
                        stats.channels()
                    )));
                }
                mean.copy_from_slice(&stats.mean);
                var.copy_from_slice(&stats.var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            layout.for_each_in_channel(ch, |i| {
                let z = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = z;
                out[i] = g[ch] * z + b[ch];
            });
        }
        let shape = x.shape().to_vec();
        let train = matches!(mode, BnMode::Train);
        let var_out = self.push(
            Op::BatchNorm { input, gamma, beta, layout, xhat, inv_std, train },
            Tensor::from_parts(shape, out),
        );
        Ok((var_out, report))
    }

    /// Softmax over the last axis of `[N, C]` logits (or one `[C]` row) fused with
    /// base-10 cross-entropy against `labels`. The returned scalar is
    /// `scale * sum_n -log10 p[n, label_n]`; the tensor holds the probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], scale: f64) -> Result<(Var, Tensor)> {
        let z = self.value(logits);
        let (rows, classes) = match z.shape().len() {
            1 => (1, z.shape()[0]),
            2 => (z.shape()[0], z.shape()[1]),
            _ => return Err(config_err(format!("softmax logits must be rank 1 or 2, got {:?}", z.shape()))),
        };
        if labels.len() != rows {
            return Err(config_err(format!("{} labels supplied for {rows} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z.data()[r * classes..(r + 1) * classes];
            let lse = stable_softmax_into(row, &mut probs[r * classes..(r + 1) * classes]);
            loss += lse - row[label];
        }
        let loss = scale * loss / LN_10;
        let probs_t = Tensor::from_parts(z.shape().to_vec(), probs.clone());
        let var = self.push(
            Op::SoftmaxXent { logits, probs, labels: labels.to_vec(), classes, scale },
            Tensor::scalar(loss),
        );
        Ok((var, probs_t))
    }

    /// For every row `u` of each contiguous block of `group` rows, the
    /// element-wise mean of the other rows in that block. A block of one row
    /// yields zeros. Summation runs over sorted values, so the result for a
    /// row depends only on the multiset of its neighbours.
    pub fn neighbor_mean(&mut self, input: Var, group: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(config_err(format!("neighbour mean expects [rows, features], got {:?}", x.shape())));
        }
        let (rows, features) = (x.shape()[0], x.shape()[1]);
        if group == 0 || rows % group != 0 {
            return Err(config_err(format!("{rows} rows cannot be split into groups of {group}")));
        }
        let xd = x.data();
        let mut out = vec![0.0; rows * features];
        if group > 1 {
            let norm = 1.0 / (group - 1) as f64;
            let mut buf = Vec::with_capacity(group - 1);
            for g0 in (0..rows).step_by(group) {
                for u in 0..group {
                    for f in 0..features {
                        buf.clear();
                        buf.extend((0..group).filter(|&i| i != u).map(|i| xd[(g0 + i) * features + f]));
                        buf.sort_by(f64::total_cmp);
                        out[(g0 + u) * features + f] = buf.iter().sum::<f64>() * norm;
                    }
                }
            }
        }
        Ok(self.push(Op::NeighborMean { input, group, features }, Tensor::from_parts(vec![rows, features], out)))
    }

    /// Row-wise concatenation `[N, F_a] ++ [N, F_b] -> [N, F_a + F_b]`.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(config_err(format!("cannot concatenate feature rows of shapes {sa:?} and {sb:?}")));
        }
        let (rows, fa, fb) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (fa + fb));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * fa..(r + 1) * fa]);
            out.extend_from_slice(&bd[r * fb..(r + 1) * fb]);
        }
        Ok(self.push(Op::Concat { a, b, rows, fa, fb }, Tensor::from_parts(vec![rows, fa + fb], out)))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape { input }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::from_parts(shape, out)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor::from_parts(shape, out)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Op::Sum { input }, Tensor::scalar(s))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|v| v * factor).collect();
        let shape = x.shape().to_vec();
        self.push(Op::Scale { input, factor }, Tensor::from_parts(shape, out))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(config_err(format!(
                "{what} operands differ in shape: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `output`, visiting nodes in reverse insertion order.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.value(output).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let (co, p, np, patch) = (geom.co, geom.positions(), geom.n * geom.positions(), geom.patch());
                let mut dmat = vec![0.0; co * np];
                for s in 0..geom.n {
                    for c in 0..co {
                        dmat[c * np + s * p..c * np + (s + 1) * p]
                            .copy_from_slice(&dy[(s * co + c) * p..(s * co + c + 1) * p]);
                    }
                }
                let mut dk = vec![0.0; co * patch];
                gemm(co, np, patch, &dmat, false, cols, true, 0.0, &mut dk);
                accumulate(grads, *kernel, &dk);
                let db: Vec<f64> = (0..co).map(|c| dmat[c * np..(c + 1) * np].iter().sum()).collect();
                accumulate(grads, *bias, &db);
                let mut dcols = vec![0.0; patch * np];
                gemm(patch, co, np, self.value(*kernel).data(), true, &dmat, false, 0.0, &mut dcols);
                accumulate(grads, *input, &col2im(&dcols, geom));
            }
            Op::Dense { input, weight, bias, rows, fan_in, fan_out } => {
                let (rows, fi, fo) = (*rows, *fan_in, *fan_out);
                let mut dx = vec![0.0; rows * fi];
                gemm(rows, fo, fi, dy, false, self.value(*weight).data(), false, 0.0, &mut dx);
                accumulate(grads, *input, &dx);
                let mut dw = vec![0.0; fo * fi];
                gemm(fo, rows, fi, dy, true, self.value(*input).data(), false, 0.0, &mut dw);
                accumulate(grads, *weight, &dw);
                let mut db = vec![0.0; fo];
                for r in 0..rows {
                    for (d, g) in db.iter_mut().zip(&dy[r * fo..(r + 1) * fo]) {
                        *d += g;
                    }
                }
                accumulate(grads, *bias, &db);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let dx: Vec<f64> = x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                accumulate(grads, *input, &dx);
            }
            Op::BatchNorm { input, gamma, beta, layout, xhat, inv_std, train } => {
                let c = layout.channels;
                let g = self.value(*gamma).data();
                let count = layout.count() as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; dy.len()];
                for ch in 0..c {
                    let (mut s_dy, mut s_dyx) = (0.0, 0.0);
                    layout.for_each_in_channel(ch, |i| {
                        s_dy += dy[i];
                        s_dyx += dy[i] * xhat[i];
                    });
                    dgamma[ch] = s_dyx;
                    dbeta[ch] = s_dy;
                    let k = g[ch] * inv_std[ch];
                    if *train {
                        layout.for_each_in_channel(ch, |i| {
                            dx[i] = k / count * (count * dy[i] - s_dy - xhat[i] * s_dyx);
                        });
                    } else {
                        layout.for_each_in_channel(ch, |i| dx[i] = k * dy[i]);
                    }
                }
                accumulate(grads, *input, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::SoftmaxXent { logits, probs, labels, classes, scale } => {
                let k = dy[0] * scale / LN_10;
                let mut dz: Vec<f64> = probs.iter().map(|p| k * p).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * classes + l] -= k;
                }
                accumulate(grads, *logits, &dz);
            }
            Op::NeighborMean { input, group, features } => {
                let (group, features) = (*group, *features);
                let mut dx = vec![0.0; dy.len()];
                if group > 1 {
                    let norm = 1.0 / (group - 1) as f64;
                    let rows = dy.len() / features;
                    for g0 in (0..rows).step_by(group) {
                        for i in 0..group {
                            for u in (0..group).filter(|&u| u != i) {
                                let src = &dy[(g0 + u) * features..(g0 + u + 1) * features];
                                let dst = &mut dx[(g0 + i) * features..(g0 + i + 1) * features];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s * norm;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *input, &dx);
            }
            Op::Concat { a, b, rows, fa, fb } => {
                let (fa, fb) = (*fa, *fb);
                let mut da = Vec::with_capacity(rows * fa);
                let mut db = Vec::with_capacity(rows * fb);
                for r in 0..*rows {
                    let row = &dy[r * (fa + fb)..(r + 1) * (fa + fb)];
                    da.extend_from_slice(&row[..fa]);
                    db.extend_from_slice(&row[fa..]);
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Reshape { input } => accumulate(grads, *input, dy),
            Op::Add { a, b } => {
                accumulate(grads, *a, dy);
                accumulate(grads, *b, dy);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = dy.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = dy.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Sum { input } => {
                let n = self.value(*input).len();
                accumulate(grads, *input, &vec![dy[0]; n]);
            }
            Op::Scale { input, factor } => {
                let dx: Vec<f64> = dy.iter().map(|g| g * factor).collect();
                accumulate(grads, *input, &dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Writes softmax of `row` into `out` and returns `ln(sum exp(row - max)) + max`.
pub(crate) fn stable_softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    total.ln() + max
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    stable_softmax_into(logits, &mut out);
    out
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.positions(), g.n * g.positions());
    let mut cols = vec![0.0; g.patch() * np];
    for c in 0..g.ci {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * np..(row + 1) * np];
                for s in 0..g.n {
                    let plane = &x[(s * g.ci + c) * g.h * g.w..(s * g.ci + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(y) = (oy + i).checked_sub(g.pad_top).filter(|&y| y < g.h) else { continue };
                        for ox in 0..g.ow {
                            if let Some(xx) = (ox + j).checked_sub(g.pad_left).filter(|&xx| xx < g.w) {
                                dst[s * p + oy * g.ow + ox] = plane[y * g.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.positions(), g.n * g.positions());
    let mut x = vec![0.0; g.n * g.ci * g.h * g.w];
    for c in 0..g.ci {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * np..(row + 1) * np];
                for s in 0..g.n {
                    let plane = &mut x[(s * g.ci + c) * g.h * g.w..(s * g.ci + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(y) = (oy + i).checked_sub(g.pad_top).filter(|&y| y < g.h) else { continue };
                        for ox in 0..g.ow {
                            if let Some(xx) = (ox + j).checked_sub(g.pad_left).filter(|&xx| xx < g.w) {
                                plane[y * g.w + xx] += src[s * p + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
