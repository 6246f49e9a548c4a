//! Differentiable operations and their backward rules.

use super::conv::ConvGeom;
use super::{GradSink, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Whether normalization layers use batch statistics or stored ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormStats {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) enum Op {
    Leaf,
    Conv {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        outer: usize,
        inner: usize,
    },
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        input: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Softmax {
        input: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        input: usize,
        /// `source[i]` is the input offset feeding output offset `i`.
        source: Vec<usize>,
    },
    Reshape {
        input: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        /// Contiguous block length contributed by each input per outer step.
        widths: Vec<usize>,
    },
    Mean {
        input: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Sum {
        input: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv {
                input, weight, bias, ..
            }
            | Op::Linear {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            }
            | Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu { input }
            | Op::Softmax { input, .. }
            | Op::Permute { input, .. }
            | Op::Reshape { input }
            | Op::Mean { input, .. }
            | Op::Scale { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Matmul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    pub(super) fn backward(&self, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        match self {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = sink.value(*input).data().to_vec();
                let w = sink.value(*weight).data().to_vec();
                let mut gx = sink.wants(*input).then(|| vec![0.0; x.len()]);
                let mut gw = sink.wants(*weight).then(|| vec![0.0; w.len()]);
                let mut gb = sink.wants(*bias).then(|| vec![0.0; geom.c_out]);
                geom.backward(&x, &w, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(v) = gx {
                    sink.add(*input, v);
                }
                if let Some(v) = gw {
                    sink.add(*weight, v);
                }
                if let Some(v) = gb {
                    sink.add(*bias, v);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                outer,
                inner,
            } => {
                let channels = inv_std.len();
                let gam = sink.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut mean_dxhat = vec![0.0; channels];
                let mut mean_dxhat_xhat = vec![0.0; channels];
                for o in 0..*outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        for j in base..base + inner {
                            dbeta[c] += g[j];
                            dgamma[c] += g[j] * xhat[j];
                            mean_dxhat[c] += g[j] * gam[c];
                            mean_dxhat_xhat[c] += g[j] * gam[c] * xhat[j];
                        }
                    }
                }
                let count = (outer * inner) as f64;
                if let Some(gx) = sink.buf(*input) {
                    for o in 0..*outer {
                        for c in 0..channels {
                            let base = (o * channels + c) * inner;
                            for j in base..base + inner {
                                let dxh = g[j] * gam[c];
                                gx[j] += if *batch_stats {
                                    inv_std[c]
                                        * (dxh
                                            - mean_dxhat[c] / count
                                            - xhat[j] * mean_dxhat_xhat[c] / count)
                                } else {
                                    dxh * inv_std[c]
                                };
                            }
                        }
                    }
                }
                sink.add(*gamma, dgamma);
                sink.add(*beta, dbeta);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let len = sink.value(*gamma).numel();
                let gam = sink.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; len];
                let mut dbeta = vec![0.0; len];
                for (grow, xrow) in g.chunks(len).zip(xhat.chunks(len)) {
                    for j in 0..len {
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if let Some(gx) = sink.buf(*input) {
                    let n = len as f64;
                    for (r, ((gxrow, grow), xrow)) in gx
                        .chunks_mut(len)
                        .zip(g.chunks(len))
                        .zip(xhat.chunks(len))
                        .enumerate()
                    {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..len {
                            let dxh = grow[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xrow[j];
                        }
                        for j in 0..len {
                            let dxh = grow[j] * gam[j];
                            gxrow[j] += inv_std[r] * (dxh - s1 / n - xrow[j] * s2 / n);
                        }
                    }
                }
                sink.add(*gamma, dgamma);
                sink.add(*beta, dbeta);
            }
            Op::Relu { input } => {
                let x = sink.value(*input).data().to_vec();
                sink.add(
                    *input,
                    x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }),
                );
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let w_shape = sink.value(*weight).shape().to_vec();
                let (fan_out, fan_in) = (w_shape[0], w_shape[1]);
                let x = sink.value(*input).data().to_vec();
                let w = sink.value(*weight).data().to_vec();
                let rows = x.len() / fan_in;
                if let Some(gx) = sink.buf(*input) {
                    for r in 0..rows {
                        let grow = &g[r * fan_out..][..fan_out];
                        let dst = &mut gx[r * fan_in..][..fan_in];
                        for (o, &gv) in grow.iter().enumerate() {
                            for (d, wv) in dst.iter_mut().zip(&w[o * fan_in..][..fan_in]) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
                if let Some(gw) = sink.buf(*weight) {
                    for r in 0..rows {
                        let grow = &g[r * fan_out..][..fan_out];
                        let xrow = &x[r * fan_in..][..fan_in];
                        for (o, &gv) in grow.iter().enumerate() {
                            for (d, xv) in gw[o * fan_in..][..fan_in].iter_mut().zip(xrow) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
                if let Some(gb) = sink.buf(*bias) {
                    for grow in g.chunks(fan_out) {
                        for (d, gv) in gb.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                if let Some(gx) = sink.buf(*input) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Matmul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = sink.value(*a).data().to_vec();
                let bv = sink.value(*b).data().to_vec();
                if let Some(ga) = sink.buf(*a) {
                    // dA = G Bᵀ
                    for t in 0..*batch {
                        for i in 0..m {
                            let grow = &g[(t * m + i) * n..][..n];
                            for p in 0..k {
                                let brow = &bv[(t * k + p) * n..][..n];
                                ga[(t * m + i) * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gb) = sink.buf(*b) {
                    // dB = Aᵀ G
                    for t in 0..*batch {
                        for i in 0..m {
                            let grow = &g[(t * m + i) * n..][..n];
                            for p in 0..k {
                                let av = av[(t * m + i) * k + p];
                                for (d, gv) in gb[(t * k + p) * n..][..n].iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Permute { input, source } => {
                if let Some(gx) = sink.buf(*input) {
                    for (o, &s) in source.iter().enumerate() {
                        gx[s] += g[o];
                    }
                }
            }
            Op::Reshape { input } => sink.add(*input, g.iter().copied()),
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut start = 0;
                for (&idx, &w) in inputs.iter().zip(widths) {
                    if let Some(gx) = sink.buf(idx) {
                        for o in 0..*outer {
                            for (d, gv) in gx[o * w..][..w].iter_mut().zip(&g[o * total + start..][..w]) {
                                *d += gv;
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::Mean {
                input,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = sink.buf(*input) {
                    let scale = 1.0 / *len as f64;
                    for o in 0..*outer {
                        for j in 0..*len {
                            for i in 0..*inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                sink.add(*a, g.iter().copied());
                if let Some(gb) = sink.buf(*b) {
                    let n = gb.len();
                    for chunk in g.chunks(n) {
                        for (d, gv) in gb.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = sink.value(*a).data().to_vec();
                let bv = sink.value(*b).data().to_vec();
                sink.add(*a, g.iter().zip(&bv).map(|(g, b)| g * b));
                sink.add(*b, g.iter().zip(&av).map(|(g, a)| g * a));
            }
            Op::Scale { input, factor } => sink.add(*input, g.iter().map(|g| g * factor)),
            Op::Sum { input } => {
                let n = sink.value(*input).numel();
                sink.add(*input, std::iter::repeat_n(g[0], n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                if let Some(gx) = sink.buf(*logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gx[r * classes + c] += (probs[r * classes + c] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn conv_extent(op: &'static str, input: usize, kernel: usize, pad: usize) -> Result<usize> {
    (input + 2 * pad)
        .checked_sub(kernel)
        .map(|e| e + 1)
        .ok_or_else(|| {
            Error::shape(
                op,
                format!("non-positive output extent (input {input}, kernel {kernel}, pad {pad})"),
            )
        })
}

impl Tape {
    /// Stride-1 zero-padded 3-D convolution. `input` is `[C_in, D, H, W]` or
    /// `[B, C_in, D, H, W]`; `weight` is `[C_out, C_in, kd, kh, kw]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, pad: [usize; 3]) -> Result<Var> {
        self.conv("conv3d", input, weight, bias, pad, 3)
    }

    /// Stride-1 zero-padded 2-D convolution. `input` is `[C_in, H, W]` or
    /// `[B, C_in, H, W]`; `weight` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: [usize; 2]) -> Result<Var> {
        self.conv("conv2d", input, weight, bias, [0, pad[0], pad[1]], 2)
    }

    fn conv(
        &mut self,
        name: &'static str,
        input: Var,
        weight: Var,
        bias: Var,
        pad: [usize; 3],
        spatial: usize,
    ) -> Result<Var> {
        let (i, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let xs = self.nodes[i].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let bs = self.nodes[b].value.shape().to_vec();
        let batched = match xs.len() {
            r if r == spatial + 2 => true,
            r if r == spatial + 1 => false,
            _ => return Err(Error::shape(name, format!("bad input rank for {xs:?}"))),
        };
        if ws.len() != spatial + 2 {
            return Err(Error::shape(name, format!("bad weight rank for {ws:?}")));
        }
        let (batch, c_in) = if batched { (xs[0], xs[1]) } else { (1, xs[0]) };
        let c_out = ws[0];
        if ws[1] != c_in {
            return Err(Error::shape(
                name,
                format!("weight expects {} input channels, input has {c_in}", ws[1]),
            ));
        }
        if bs != [c_out] {
            return Err(Error::shape(name, format!("bias {bs:?} for {c_out} output channels")));
        }
        let sp = &xs[xs.len() - spatial..];
        let ks = &ws[2..];
        let lift = |v: &[usize]| -> [usize; 3] {
            if spatial == 3 {
                [v[0], v[1], v[2]]
            } else {
                [1, v[0], v[1]]
            }
        };
        let (in3, k3) = (lift(sp), lift(ks));
        let mut out3 = [0; 3];
        for a in 0..3 {
            out3[a] = conv_extent(name, in3[a], k3[a], pad[a])?;
        }
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            input: in3,
            kernel: k3,
            pad,
            output: out3,
        };
        let data = geom.forward(
            self.nodes[i].value.data(),
            self.nodes[w].value.data(),
            self.nodes[b].value.data(),
        );
        let mut shape = Vec::with_capacity(spatial + 2);
        if batched {
            shape.push(batch);
        }
        shape.push(c_out);
        shape.extend_from_slice(&out3[3 - spatial..]);
        let value = Tensor::new(shape, data)?;
        self.push(
            name,
            value,
            Op::Conv {
                input: i,
                weight: w,
                bias: b,
                geom,
            },
        )
    }

    /// Batch normalization over every axis except `axis`.
    ///
    /// In [`NormMode::Train`] with more than one sample along the leading
    /// axes, the batch statistics normalize the input and are folded into
    /// `stats` with its momentum. With a single sample, or in
    /// [`NormMode::Eval`], the stored statistics are used and left untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        axis: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        stats: &mut BatchNormStats,
    ) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(Error::InvalidArgument(format!("batchnorm eps must be > 0, got {eps}")));
        }
        let (i, gi, bi) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let (outer, channels, inner) = split_axis("batchnorm", self.nodes[i].value.shape(), axis)?;
        for (what, n) in [
            ("gamma", self.nodes[gi].value.numel()),
            ("beta", self.nodes[bi].value.numel()),
            ("running stats", stats.channels()),
        ] {
            if n != channels {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{what} has {n} entries for {channels} channels"),
                ));
            }
        }
        let x = self.nodes[i].value.data();
        let batch_stats = mode == NormMode::Train && outer > 1;
        let count = (outer * inner) as f64;
        let (mean, inv_std) = if batch_stats {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for o in 0..outer {
                for c in 0..channels {
                    mean[c] += x[(o * channels + c) * inner..][..inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for o in 0..outer {
                for c in 0..channels {
                    var[c] += x[(o * channels + c) * inner..][..inner]
                        .iter()
                        .map(|v| (v - mean[c]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let m = stats.momentum;
            let unbias = count / (count - 1.0);
            for c in 0..channels {
                stats.mean[c] = (1.0 - m) * stats.mean[c] + m * mean[c];
                stats.var[c] = (1.0 - m) * stats.var[c] + m * var[c] * unbias;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let inv_std = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (stats.mean.clone(), inv_std)
        };
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for j in base..base + inner {
                    xhat[j] = (x[j] - mean[c]) * inv_std[c];
                    y[j] = g[c] * xhat[j] + b[c];
                }
            }
        }
        let value = Tensor::new(self.nodes[i].value.shape().to_vec(), y)?;
        self.push(
            "batchnorm",
            value,
            Op::BatchNorm {
                input: i,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                batch_stats,
                outer,
                inner,
            },
        )
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(Error::InvalidArgument(format!("layernorm eps must be > 0, got {eps}")));
        }
        let (i, gi, bi) = (self.check(input)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.nodes[i].value.shape().to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| Error::shape("layernorm", "scalar input"))?;
        if len == 0 {
            return Err(Error::shape("layernorm", "empty normalized axis"));
        }
        if self.nodes[gi].value.numel() != len || self.nodes[bi].value.numel() != len {
            return Err(Error::shape("layernorm", format!("gamma/beta must have {len} entries")));
        }
        let x = self.nodes[i].value.data();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / len);
        for (r, row) in x.chunks(len).enumerate() {
            let mean = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            for j in 0..len {
                let k = r * len + j;
                xhat[k] = (row[j] - mean) * s;
                y[k] = g[j] * xhat[k] + b[j];
            }
        }
        let value = Tensor::new(shape, y)?;
        self.push(
            "layernorm",
            value,
            Op::LayerNorm {
                input: i,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu { input: i })
    }

    /// Affine map over the last axis: `x[..., in] · Wᵀ + b` with `W: [out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let xs = self.nodes[i].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let fan_in = *xs.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::shape("linear", format!("weight {ws:?} for input {xs:?}")));
        }
        let fan_out = ws[0];
        if self.nodes[b].value.shape() != [fan_out] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} for {fan_out} outputs", self.nodes[b].value.shape()),
            ));
        }
        let x = self.nodes[i].value.data();
        let wv = self.nodes[w].value.data();
        let bv = self.nodes[b].value.data();
        let rows = x.len().checked_div(fan_in).unwrap_or_else(|| numel(&xs[..xs.len() - 1]));
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let xrow = &x[r * fan_in..][..fan_in];
            for o in 0..fan_out {
                let wrow = &wv[o * fan_in..][..fan_in];
                out[r * fan_out + o] =
                    bv[o] + xrow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fan_out;
        let value = Tensor::new(shape, out)?;
        self.push(
            "linear",
            value,
            Op::Linear {
                input: i,
                weight: w,
                bias: b,
            },
        )
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let i = self.check(input)?;
        let shape = self.nodes[i].value.shape().to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        if len == 0 {
            return Err(Error::shape("softmax", "empty axis"));
        }
        let x = self.nodes[i].value.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for k in 0..inner {
                let at = |j: usize| (o * len + j) * inner + k;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, y)?;
        self.push(
            "softmax",
            value,
            Op::Softmax {
                input: i,
                outer,
                len,
                inner,
            },
        )
    }

    /// Matrix product over the last two axes; leading axes must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let as_ = self.nodes[ai].value.shape().to_vec();
        let bs = self.nodes[bi].value.shape().to_vec();
        if as_.len() < 2 || as_.len() != bs.len() {
            return Err(Error::shape("matmul", format!("{as_:?} × {bs:?}")));
        }
        let r = as_.len();
        let (m, k, k2, n) = (as_[r - 2], as_[r - 1], bs[r - 2], bs[r - 1]);
        if k != k2 || as_[..r - 2] != bs[..r - 2] {
            return Err(Error::shape("matmul", format!("{as_:?} × {bs:?}")));
        }
        let batch = numel(&as_[..r - 2]);
        let av = self.nodes[ai].value.data();
        let bv = self.nodes[bi].value.data();
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            for i in 0..m {
                let dst = &mut out[(t * m + i) * n..][..n];
                for p in 0..k {
                    let a = av[(t * m + i) * k + p];
                    for (d, b) in dst.iter_mut().zip(&bv[(t * k + p) * n..][..n]) {
                        *d += a * b;
                    }
                }
            }
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            value,
            Op::Matmul {
                a: ai,
                b: bi,
                batch,
                m,
                k,
                n,
            },
        )
    }

    /// Reorders axes: output axis `j` is input axis `axes[j]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let i = self.check(input)?;
        let shape = self.nodes[i].value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", format!("axes {axes:?} for {shape:?}")));
        }
        let mut strides = vec![1; shape.len()];
        for a in (0..shape.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * shape[a + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let total = numel(&shape);
        let mut source = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        let mut offset = 0usize;
        for _ in 0..total {
            source.push(offset);
            for a in (0..idx.len()).rev() {
                idx[a] += 1;
                offset += out_strides[a];
                if idx[a] < out_shape[a] {
                    break;
                }
                offset -= out_strides[a] * out_shape[a];
                idx[a] = 0;
            }
        }
        let x = self.nodes[i].value.data();
        let data = source.iter().map(|&s| x[s]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, Op::Permute { input: i, source })
    }

    pub fn transpose(&mut self, input: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.value(input).rank();
        if a >= rank || b >= rank {
            return Err(Error::shape("transpose", format!("axes ({a}, {b}) for rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(input, &axes)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(input)?;
        let value = self.nodes[i].value.clone().with_requires_grad(false);
        let mut value = value.reshaped(shape.to_vec())?;
        value.zero_grad();
        self.push("reshape", value, Op::Reshape { input: i })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let first = idx
            .first()
            .map(|&i| self.nodes[i].value.shape().to_vec())
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (outer, _, inner) = split_axis("concat", &first, axis)?;
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[o * w..][..w]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: idx,
                outer,
                widths,
            },
        )
    }

    /// Mean along `axis`, removing it from the shape.
    pub fn mean_over_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let i = self.check(input)?;
        let shape = self.nodes[i].value.shape().to_vec();
        let (outer, len, inner) = split_axis("mean_over_axis", &shape, axis)?;
        if len == 0 {
            return Err(Error::shape("mean_over_axis", "empty axis"));
        }
        let x = self.nodes[i].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for k in 0..inner {
                    out[o * inner + k] += x[(o * len + j) * inner + k];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "mean_over_axis",
            value,
            Op::Mean {
                input: i,
                outer,
                len,
                inner,
            },
        )
    }

    /// Elementwise sum. `b` may match a trailing block of `a`'s shape, in
    /// which case it is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let as_ = self.nodes[ai].value.shape();
        let bs = self.nodes[bi].value.shape();
        if bs.len() > as_.len() || as_[as_.len() - bs.len()..] != *bs {
            return Err(Error::shape("add", format!("{as_:?} + {bs:?}")));
        }
        let bv = self.nodes[bi].value.data();
        let data = self.nodes[ai]
            .value
            .data()
            .chunks(bv.len().max(1))
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(as_.to_vec(), data)?;
        self.push("add", value, Op::Add { a: ai, b: bi })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} ⊙ {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a: ai, b: bi })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { input: i, factor })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let total = self.nodes[i].value.data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { input: i })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed in log-sum-exp form. `logits` is `[B, n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let shape = self.nodes[i].value.shape();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} for {} labels", labels.len()),
            ));
        }
        let classes = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let x = self.nodes[i].value.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * classes..][..classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[label];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let loss = total / labels.len() as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: i,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}
