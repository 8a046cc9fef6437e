//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each differentiable operation validates its inputs, computes its forward
//! result eagerly and appends a node to the [`Tape`]. Node order is therefore
//! a topological order of the forward computation, and [`Tape::backward`]
//! replays it in reverse, accumulating vector-Jacobian products. Gradients of
//! [`Parameter`] leaves are added into the owning [`ParamSet`], so repeated
//! backward calls accumulate until `zero_grads`.
//!
//! All kernels are sequential with fixed reduction order: identical inputs
//! give bit-identical tapes, values and gradients.

pub mod gradcheck;
pub mod kernels;
mod params;

pub use gradcheck::{grad_check, FnTarget, GradCheckConfig, GradCheckReport, GradCheckTarget};
pub use params::{ParamId, ParamSet, Parameter};

use crate::error::{MagnetError, Result};
use crate::tensor::Tensor;
use kernels::*;

/// Normalization epsilon for batch norm.
pub const BN_EPSILON: f64 = 1e-5;
/// Running statistics retain this fraction of their previous value per step.
pub const BN_MOMENTUM: f64 = 0.9;

/// Forward execution mode. Train mode uses batch statistics in batch norm and
/// updates running statistics; eval mode is a pure function of parameters,
/// running statistics and input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics owned by a batch-norm site.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    AvgPool {
        input: Var,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Entropy {
        probs: Var,
    },
    NllLoss {
        logits: Var,
        labels: Vec<usize>,
    },
    MmdBiased {
        zs: Var,
        zt: Var,
        sigmas: Vec<f64>,
        weights: Vec<f64>,
        sq_ss: Vec<f64>,
        sq_tt: Vec<f64>,
        sq_st: Vec<f64>,
    },
    GateBelowMedian {
        input: Var,
        mask: Vec<f64>,
    },
    SumAll {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record of one forward computation; owns every intermediate value.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const PROB_FLOOR: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        crate::tune_allocator();
        Tape::default()
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

    /// Gradient of the last backward pass w.r.t. `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward result");
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf: gradient never flows to it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// Leaf that tracks its gradient but is not bound to a parameter.
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf { param: None })
    }

    /// Leaf bound to a parameter; backward accumulates into its `grad`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let value = params.get(id).value.clone();
        self.push(value, true, Op::Leaf { param: Some(id) })
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MagnetError::Dimension(format!(
                "matmul of {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, req, Op::Matmul { a, b }))
    }

    /// 2-D cross-correlation (no kernel flip), `input: N x C x H x W`,
    /// `weight: F x C x kh x kw`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        if si.len() != 4 || sw.len() != 4 {
            return Err(MagnetError::Dimension(format!(
                "conv2d expects 4-D input and weight, got {si:?} and {sw:?}"
            )));
        }
        if si[1] != sw[1] {
            return Err(MagnetError::Dimension(format!(
                "conv2d channel mismatch: input {si:?} vs weight {sw:?}"
            )));
        }
        if stride < 1 {
            return Err(MagnetError::Parameter("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(MagnetError::Dimension(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = conv_out_extent(h, kh, stride, padding);
        let ow = conv_out_extent(w, kw, stride, padding);
        let ck = c * kh * kw;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
        let direct3 = kh == 3 && kw == 3 && stride == 1 && padding == 1;
        let mut out = vec![0.0; n * f * oh * ow];
        {
            let x = self.value(input).data();
            let wdat = self.value(weight).data();
            // A 1x1 stride-1 convolution is a plain channel mix and a 3x3
            // pad-1 one has a direct stencil; only other shapes pay for the
            // patch matrix.
            let mut cols = vec![0.0; if pointwise || direct3 { 0 } else { ck * oh * ow }];
            for s in 0..n {
                let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                let os = &mut out[s * f * oh * ow..(s + 1) * f * oh * ow];
                if pointwise {
                    gemm(wdat, xs, os, f, c, h * w);
                } else if direct3 {
                    conv3x3_forward(xs, c, h, w, wdat, f, os);
                } else {
                    im2col(xs, c, h, w, kh, kw, stride, padding, &mut cols);
                    gemm(wdat, &cols, os, f, ck, oh * ow);
                }
            }
        }
        let req = self.requires(input) || self.requires(weight);
        Ok(self.push(
            Tensor::from_vec(vec![n, f, oh, ow], out)?,
            req,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel batch normalization with affine transform.
    ///
    /// Train mode normalizes by biased batch statistics and folds them into
    /// `state` (`new = BN_MOMENTUM * old + (1 - BN_MOMENTUM) * batch`); eval
    /// mode normalizes by `state` without touching it.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        if si.len() != 4 {
            return Err(MagnetError::Dimension(format!(
                "batchnorm2d expects 4-D input, got {si:?}"
            )));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(MagnetError::Dimension(format!(
                "batchnorm2d affine shapes {:?}/{:?} for {c} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if state.running_mean.len() != c {
            return Err(MagnetError::Dimension(format!(
                "batchnorm2d state holds {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let m = n * h * w;
        if mode == Mode::Train && m < 2 {
            return Err(MagnetError::Contract(
                "degenerate batch: batchnorm2d in train mode needs N*H*W >= 2".into(),
            ));
        }

        let hw = h * w;
        let (mean, var) = {
            let x = self.value(input).data();
            match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; c];
                    for (idx, plane) in x.chunks_exact(hw).enumerate() {
                        let mut acc = 0.0;
                        for &v in plane {
                            acc += v;
                        }
                        mean[idx % c] += acc;
                    }
                    for mu in &mut mean {
                        *mu /= m as f64;
                    }
                    let mut var = vec![0.0; c];
                    for (idx, plane) in x.chunks_exact(hw).enumerate() {
                        let mu = mean[idx % c];
                        let mut acc = 0.0;
                        for &v in plane {
                            let d = v - mu;
                            acc += d * d;
                        }
                        var[idx % c] += acc;
                    }
                    for vv in &mut var {
                        *vv /= m as f64;
                    }
                    (mean, var)
                }
                Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
            }
        };
        if mode == Mode::Train {
            for ch in 0..c {
                state.running_mean[ch] =
                    BN_MOMENTUM * state.running_mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                state.running_var[ch] =
                    BN_MOMENTUM * state.running_var[ch] + (1.0 - BN_MOMENTUM) * var[ch];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();

        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![0.0; si.iter().product()];
        {
            let x = self.value(input).data();
            for (idx, (plane, oplane)) in x
                .chunks_exact(hw)
                .zip(out.chunks_exact_mut(hw))
                .enumerate()
            {
                let ch = idx % c;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for (o, &v) in oplane.iter_mut().zip(plane) {
                    *o = ga * (v - mu) * is + be;
                }
            }
        }
        let req = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::from_vec(si, out)?,
            req,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            },
        ))
    }

    // ---- elementwise and structural -------------------------------------

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .map(|&x| x.max(0.0))
            .collect();
        let shape = self.value(input).shape().to_vec();
        let req = self.requires(input);
        self.push(
            Tensor::from_vec(shape, out).expect("shape preserved"),
            req,
            Op::Relu { input },
        )
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        if si.len() != 4 {
            return Err(MagnetError::Dimension(format!(
                "avg_pool2d expects 4-D input, got {si:?}"
            )));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        if k > h || k > w {
            return Err(MagnetError::Dimension(format!(
                "avg_pool2d window {k} exceeds spatial extent {h}x{w}"
            )));
        }
        if stride < 1 {
            return Err(MagnetError::Parameter(
                "avg_pool2d stride must be >= 1".into(),
            ));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        {
            let x = self.value(input).data();
            for s in 0..n {
                for ch in 0..c {
                    let src = &x[(s * c + ch) * h * w..];
                    let base = (s * c + ch) * oh * ow;
                    for y in 0..oh {
                        for xo in 0..ow {
                            let mut acc = 0.0;
                            for i in 0..k {
                                let row = (y * stride + i) * w + xo * stride;
                                for j in 0..k {
                                    acc += src[row + j];
                                }
                            }
                            out[base + y * ow + xo] = acc * inv;
                        }
                    }
                }
            }
        }
        let req = self.requires(input);
        Ok(self.push(
            Tensor::from_vec(vec![n, c, oh, ow], out)?,
            req,
            Op::AvgPool { input, k, stride },
        ))
    }

    /// Mean over the spatial dimensions: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        if si.len() != 4 {
            return Err(MagnetError::Dimension(format!(
                "global_avg_pool expects 4-D input, got {si:?}"
            )));
        }
        let (n, c, hw) = (si[0], si[1], si[2] * si[3]);
        let mut out = vec![0.0; n * c];
        {
            let x = self.value(input).data();
            for (i, o) in out.iter_mut().enumerate() {
                let base = i * hw;
                let mut acc = 0.0;
                for v in &x[base..base + hw] {
                    acc += v;
                }
                *o = acc / hw as f64;
            }
        }
        let req = self.requires(input);
        Ok(self.push(
            Tensor::from_vec(vec![n, c], out)?,
            req,
            Op::GlobalAvgPool { input },
        ))
    }

    /// Concatenate `N x Ci x H x W` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(MagnetError::Dimension(
                "concat_channels of no inputs".into(),
            ));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(MagnetError::Dimension(format!(
                "concat_channels expects 4-D inputs, got {first:?}"
            )));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(MagnetError::Dimension(format!(
                    "concat_channels spatial mismatch: {first:?} vs {s:?}"
                )));
            }
            c_total += s[1];
        }
        let plane = h * w;
        let mut out = vec![0.0; n * c_total * plane];
        for s in 0..n {
            let mut c_off = 0;
            for &v in inputs {
                let t = self.value(v);
                let ci = t.shape()[1];
                let src = &t.data()[s * ci * plane..(s + 1) * ci * plane];
                let dst_base = (s * c_total + c_off) * plane;
                out[dst_base..dst_base + ci * plane].copy_from_slice(src);
                c_off += ci;
            }
        }
        let req = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Tensor::from_vec(vec![n, c_total, h, w], out)?,
            req,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(MagnetError::Dimension(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, req, Op::Add { a, b }))
    }

    /// Broadcast-add a length-`D` bias to every row of an `N x D` tensor.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if si.len() != 2 || sb.len() != 1 || sb[0] != si[1] {
            return Err(MagnetError::Dimension(format!(
                "add_bias of {si:?} and {sb:?}"
            )));
        }
        let d = si[1];
        let b = self.value(bias).data().to_vec();
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % d])
            .collect();
        let req = self.requires(input) || self.requires(bias);
        Ok(self.push(Tensor::from_vec(si, out)?, req, Op::AddBias { input, bias }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .map(|x| x * factor)
            .collect();
        let shape = self.value(input).shape().to_vec();
        let req = self.requires(input);
        self.push(
            Tensor::from_vec(shape, out).expect("shape preserved"),
            req,
            Op::Scale { input, factor },
        )
    }

    /// Slice `len` consecutive samples starting at `start` along dim 0.
    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        if si.is_empty() || len == 0 || start + len > si[0] {
            return Err(MagnetError::Dimension(format!(
                "slice_rows [{start}, {}) of first extent {}",
                start + len,
                si.first().copied().unwrap_or(0)
            )));
        }
        let row: usize = si[1..].iter().product();
        let out = self.value(input).data()[start * row..(start + len) * row].to_vec();
        let mut shape = si;
        shape[0] = len;
        let req = self.requires(input);
        Ok(self.push(
            Tensor::from_vec(shape, out)?,
            req,
            Op::SliceRows { input, start },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape)?;
        let req = self.requires(input);
        Ok(self.push(t, req, Op::Reshape { input }))
    }

    // ---- losses ----------------------------------------------------------

    /// Row-wise softmax of `N x C` logits, max-subtracted for stability.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        if si.len() != 2 {
            return Err(MagnetError::Dimension(format!(
                "softmax expects N x C logits, got {si:?}"
            )));
        }
        let (n, c) = (si[0], si[1]);
        let mut out = vec![0.0; n * c];
        {
            let x = self.value(input).data();
            for i in 0..n {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[i * c..(i + 1) * c];
                let mut z = 0.0;
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = (v - m).exp();
                    z += *o;
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
        }
        let req = self.requires(input);
        Ok(self.push(Tensor::from_vec(si, out)?, req, Op::Softmax { input }))
    }

    /// Mean Shannon entropy of the rows of an `N x C` probability matrix.
    ///
    /// `0 * ln 0` is defined as 0 by flooring probabilities at `1e-12` inside
    /// the logarithm. Rows must sum to 1 within `1e-6`.
    pub fn entropy(&mut self, probs: Var) -> Result<Var> {
        let sp = self.value(probs).shape().to_vec();
        if sp.len() != 2 {
            return Err(MagnetError::Dimension(format!(
                "entropy expects N x C probabilities, got {sp:?}"
            )));
        }
        let (n, c) = (sp[0], sp[1]);
        let mut acc = 0.0;
        {
            let p = self.value(probs).data();
            for i in 0..n {
                let row = &p[i * c..(i + 1) * c];
                if let Some(neg) = row.iter().find(|&&v| v < 0.0) {
                    return Err(MagnetError::Contract(format!(
                        "entropy: negative probability {neg} in row {i}"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(MagnetError::Contract(format!(
                        "entropy: row {i} sums to {sum}, expected 1 within {ROW_SUM_TOL}"
                    )));
                }
            }
            for &v in p {
                acc -= v * v.max(PROB_FLOOR).ln();
            }
        }
        let value = acc / n as f64;
        let req = self.requires(probs);
        Ok(self.push(Tensor::scalar(value), req, Op::Entropy { probs }))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits`,
    /// computed in the fused log-sum-exp form.
    pub fn nll_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.value(logits).shape().to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(MagnetError::Dimension(format!(
                "nll_loss: logits {sl:?} with {} labels",
                labels.len()
            )));
        }
        let (n, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(MagnetError::Parameter(format!(
                "nll_loss: label {bad} out of range for {c} classes"
            )));
        }
        let mut acc = 0.0;
        {
            let x = self.value(logits).data();
            for (i, &y) in labels.iter().enumerate() {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                acc += lse - row[y];
            }
        }
        let value = acc / n as f64;
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(value),
            req,
            Op::NllLoss {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Biased MMD V-statistic between the rows of `zs` and `zt` under a
    /// weighted sum of Gaussian kernels. Diagonal terms are included; the
    /// bandwidths are constants with respect to gradients.
    pub fn mmd_biased(&mut self, zs: Var, zt: Var, sigmas: &[f64], weights: &[f64]) -> Result<Var> {
        let ss = self.value(zs).shape().to_vec();
        let st = self.value(zt).shape().to_vec();
        if ss.len() != 2 || st.len() != 2 || ss[1] != st[1] {
            return Err(MagnetError::Dimension(format!(
                "mmd_biased of {ss:?} and {st:?}"
            )));
        }
        if sigmas.is_empty() || sigmas.len() != weights.len() {
            return Err(MagnetError::Parameter(format!(
                "mmd_biased: {} bandwidths with {} weights",
                sigmas.len(),
                weights.len()
            )));
        }
        if let Some(&s) = sigmas.iter().find(|&&s| s <= 0.0) {
            return Err(MagnetError::Parameter(format!(
                "mmd_biased: bandwidth {s} must be > 0"
            )));
        }
        let (ns, nt, d) = (ss[0], st[0], ss[1]);
        let (sq_ss, sq_tt, sq_st) = {
            let a = self.value(zs).data();
            let b = self.value(zt).data();
            (
                pairwise_sq_dists(a, a, ns, ns, d),
                pairwise_sq_dists(b, b, nt, nt, d),
                pairwise_sq_dists(a, b, ns, nt, d),
            )
        };

        let mut value = 0.0;
        for (&sigma, &wt) in sigmas.iter().zip(weights) {
            let inv = 1.0 / (2.0 * sigma * sigma);
            let mean_k = |sq: &[f64]| -> f64 {
                let mut acc = 0.0;
                for &v in sq {
                    acc += (-v * inv).exp();
                }
                acc / sq.len() as f64
            };
            value += wt * (mean_k(&sq_ss) + mean_k(&sq_tt) - 2.0 * mean_k(&sq_st));
        }
        let req = self.requires(zs) || self.requires(zt);
        Ok(self.push(
            Tensor::scalar(value),
            req,
            Op::MmdBiased {
                zs,
                zt,
                sigmas: sigmas.to_vec(),
                weights: weights.to_vec(),
                sq_ss,
                sq_tt,
                sq_st,
            },
        ))
    }

    /// Zero every entry whose absolute value falls below the per-sample
    /// median absolute activation, keeping exactly `ceil(D/2)` entries per
    /// sample (ties broken by first occurrence in row-major order). The mask
    /// is a constant with respect to gradients.
    pub fn gate_below_median(&mut self, input: Var) -> Result<Var> {
        let si = self.value(input).shape().to_vec();
        if si.len() < 2 {
            return Err(MagnetError::Dimension(format!(
                "gate_below_median expects a batched tensor, got {si:?}"
            )));
        }
        let n = si[0];
        let d: usize = si[1..].iter().product();
        let keep = d.div_ceil(2);
        let mut mask = vec![0.0; n * d];
        {
            let x = self.value(input).data();
            let mut magnitudes: Vec<f64> = Vec::with_capacity(d);
            for s in 0..n {
                let row = &x[s * d..(s + 1) * d];
                magnitudes.clear();
                magnitudes.extend(row.iter().map(|v| v.abs()));
                // Threshold = the keep-th largest magnitude; entries above it
                // always survive, entries equal to it survive in row-major
                // order until the quota is filled (first occurrence wins).
                let threshold = if keep == d {
                    f64::NEG_INFINITY
                } else {
                    let mut scratch = magnitudes.clone();
                    let (_, t, _) =
                        scratch.select_nth_unstable_by(keep - 1, |a, b| b.total_cmp(a));
                    *t
                };
                let mrow = &mut mask[s * d..(s + 1) * d];
                let mut quota = keep;
                for (m, &mag) in mrow.iter_mut().zip(&magnitudes) {
                    if mag > threshold {
                        *m = 1.0;
                        quota -= 1;
                    }
                }
                if quota > 0 {
                    for (m, &mag) in mrow.iter_mut().zip(&magnitudes) {
                        if mag == threshold && *m == 0.0 {
                            *m = 1.0;
                            quota -= 1;
                            if quota == 0 {
                                break;
                            }
                        }
                    }
                }
            }
        }
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let req = self.requires(input);
        Ok(self.push(
            Tensor::from_vec(si, out)?,
            req,
            Op::GateBelowMedian { input, mask },
        ))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let value: f64 = self.value(input).data().iter().sum();
        let req = self.requires(input);
        self.push(Tensor::scalar(value), req, Op::SumAll { input })
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; adds parameter gradients into
    /// `params`. Tape-local gradients are reset at the start of each call, so
    /// calling backward twice doubles the parameter gradients.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(MagnetError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        let Tape { nodes, grads } = self;
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad || grads[id].is_none() {
                continue;
            }
            backward_node(nodes, grads, id);
        }

        for (node, grad) in nodes.iter().zip(grads.iter()) {
            if let (Op::Leaf { param: Some(pid) }, Some(g)) = (&node.op, grad) {
                params.accumulate_grad(*pid, g);
            }
        }
        Ok(())
    }
}

fn value(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let numel = nodes[v.0].value.numel();
    debug_assert_eq!(delta.len(), numel);
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
    for (dst, src) in slot.iter_mut().zip(delta) {
        *dst += src;
    }
}

/// Like [`accumulate`], but takes ownership so a first contribution moves in
/// without a zero-fill-and-add pass.
fn accumulate_owned(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    debug_assert_eq!(delta.len(), nodes[v.0].value.numel());
    match &mut grads[v.0] {
        Some(slot) => {
            for (dst, src) in slot.iter_mut().zip(&delta) {
                *dst += src;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize) {
    let g = grads[id].take().expect("grad present");
    dispatch_backward(nodes, grads, id, &g);
    grads[id] = Some(g);
}


fn dispatch_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &nodes[id].op {
        Op::Leaf { .. } => {}

        Op::Matmul { a, b } => {
            let (sa, sb) = (value(nodes, *a).shape(), value(nodes, *b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if nodes[a.0].requires_grad {
                let mut da = vec![0.0; m * k];
                gemm_a_bt(g, value(nodes, *b).data(), &mut da, m, n, k);
                accumulate_owned(nodes, grads, *a, da);
            }
            if nodes[b.0].requires_grad {
                let mut db = vec![0.0; k * n];
                gemm_at_b(value(nodes, *a).data(), g, &mut db, k, m, n);
                accumulate_owned(nodes, grads, *b, db);
            }
        }

        Op::Conv2d {
            input,
            weight,
            stride,
            padding,
        } => {
            let si = value(nodes, *input).shape();
            let sw = value(nodes, *weight).shape();
            let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
            let (f, kh, kw) = (sw[0], sw[2], sw[3]);
            let oh = conv_out_extent(h, kh, *stride, *padding);
            let ow = conv_out_extent(w, kw, *stride, *padding);
            let ck = c * kh * kw;
            let pointwise = kh == 1 && kw == 1 && *stride == 1 && *padding == 0;
            let direct3 = kh == 3 && kw == 3 && *stride == 1 && *padding == 1;
            let x = value(nodes, *input).data();
            let wdat = value(nodes, *weight).data();
            let need_dx = nodes[input.0].requires_grad;
            let need_dw = nodes[weight.0].requires_grad;
            let im2col_path = !pointwise && !direct3;
            let mut cols = vec![0.0; if im2col_path { ck * oh * ow } else { 0 }];
            let mut dcols = vec![0.0; if im2col_path && need_dx { ck * oh * ow } else { 0 }];
            let mut dinput = vec![0.0; if need_dx { n * c * h * w } else { 0 }];
            let mut dweight = vec![0.0; if need_dw { f * ck } else { 0 }];
            for s in 0..n {
                let gslice = &g[s * f * oh * ow..(s + 1) * f * oh * ow];
                let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                if pointwise {
                    if need_dw {
                        gemm_a_bt(gslice, xs, &mut dweight, f, oh * ow, ck);
                    }
                    if need_dx {
                        gemm_at_b(
                            wdat,
                            gslice,
                            &mut dinput[s * c * h * w..(s + 1) * c * h * w],
                            ck,
                            f,
                            oh * ow,
                        );
                    }
                    continue;
                }
                if direct3 {
                    if need_dw {
                        conv3x3_backward_weight(gslice, xs, c, h, w, f, &mut dweight);
                    }
                    if need_dx {
                        conv3x3_backward_input(
                            gslice,
                            c,
                            h,
                            w,
                            wdat,
                            f,
                            &mut dinput[s * c * h * w..(s + 1) * c * h * w],
                        );
                    }
                    continue;
                }
                if need_dw {
                    im2col(xs, c, h, w, kh, kw, *stride, *padding, &mut cols);
                    gemm_a_bt(gslice, &cols, &mut dweight, f, oh * ow, ck);
                }
                if need_dx {
                    dcols.fill(0.0);
                    gemm_at_b(wdat, gslice, &mut dcols, ck, f, oh * ow);
                    col2im_accumulate(
                        &dcols,
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        *stride,
                        *padding,
                        &mut dinput[s * c * h * w..(s + 1) * c * h * w],
                    );
                }
            }
            if need_dx {
                accumulate_owned(nodes, grads, *input, dinput);
            }
            if need_dw {
                accumulate_owned(nodes, grads, *weight, dweight);
            }
        }

        Op::BatchNorm {
            input,
            gamma,
            beta,
            mode,
            mean,
            inv_std,
        } => {
            let si = value(nodes, *input).shape();
            let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
            let hw = h * w;
            let m = (n * h * w) as f64;
            let x = value(nodes, *input).data();
            let ga = value(nodes, *gamma).data();

            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (idx, (plane, gplane)) in
                x.chunks_exact(hw).zip(g.chunks_exact(hw)).enumerate()
            {
                let ch = idx % c;
                let (mu, is) = (mean[ch], inv_std[ch]);
                let mut acc_g = 0.0;
                let mut acc_gx = 0.0;
                for (&v, &gv) in plane.iter().zip(gplane) {
                    acc_g += gv;
                    acc_gx += gv * (v - mu) * is;
                }
                sum_g[ch] += acc_g;
                sum_gx[ch] += acc_gx;
            }

            if nodes[input.0].requires_grad {
                let mut dx = vec![0.0; x.len()];
                match mode {
                    Mode::Train => {
                        for (idx, (plane, (gplane, dplane))) in x
                            .chunks_exact(hw)
                            .zip(g.chunks_exact(hw).zip(dx.chunks_exact_mut(hw)))
                            .enumerate()
                        {
                            let ch = idx % c;
                            let (mu, is, gam) = (mean[ch], inv_std[ch], ga[ch]);
                            let coef = gam * is / m;
                            let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                            for ((&v, &gv), d) in
                                plane.iter().zip(gplane).zip(dplane.iter_mut())
                            {
                                let xhat = (v - mu) * is;
                                *d = coef * (m * gv - sg - xhat * sgx);
                            }
                        }
                    }
                    Mode::Eval => {
                        for (idx, (gplane, dplane)) in g
                            .chunks_exact(hw)
                            .zip(dx.chunks_exact_mut(hw))
                            .enumerate()
                        {
                            let ch = idx % c;
                            let coef = ga[ch] * inv_std[ch];
                            for (&gv, d) in gplane.iter().zip(dplane.iter_mut()) {
                                *d = coef * gv;
                            }
                        }
                    }
                }
                accumulate_owned(nodes, grads, *input, dx);
            }
            accumulate_owned(nodes, grads, *gamma, sum_gx);
            accumulate_owned(nodes, grads, *beta, sum_g);
        }

        Op::Relu { input } => {
            let dx: Vec<f64> = value(nodes, *input)
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                .collect();
            accumulate_owned(nodes, grads, *input, dx);
        }

        Op::AvgPool { input, k, stride } => {
            let si = value(nodes, *input).shape();
            let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
            let (k, stride) = (*k, *stride);
            let oh = (h - k) / stride + 1;
            let ow = (w - k) / stride + 1;
            let inv = 1.0 / (k * k) as f64;
            let mut dx = vec![0.0; n * c * h * w];
            for s in 0..n {
                for ch in 0..c {
                    let gbase = (s * c + ch) * oh * ow;
                    let xbase = (s * c + ch) * h * w;
                    for y in 0..oh {
                        for xo in 0..ow {
                            let gi = g[gbase + y * ow + xo] * inv;
                            for i in 0..k {
                                let row = xbase + (y * stride + i) * w + xo * stride;
                                for j in 0..k {
                                    dx[row + j] += gi;
                                }
                            }
                        }
                    }
                }
            }
            accumulate_owned(nodes, grads, *input, dx);
        }

        Op::GlobalAvgPool { input } => {
            let si = value(nodes, *input).shape();
            let hw = si[2] * si[3];
            let inv = 1.0 / hw as f64;
            let mut dx = vec![0.0; si.iter().product()];
            for (plane, &gi) in dx.chunks_exact_mut(hw).zip(g.iter()) {
                let gv = gi * inv;
                for d in plane {
                    *d = gv;
                }
            }
            accumulate_owned(nodes, grads, *input, dx);
        }

        Op::ConcatChannels { inputs } => {
            let s_out = nodes[id].value.shape();
            let (n, c_total, plane) = (s_out[0], s_out[1], s_out[2] * s_out[3]);
            let mut c_off = 0;
            for &v in inputs {
                let ci = value(nodes, v).shape()[1];
                if nodes[v.0].requires_grad {
                    let mut dv = vec![0.0; n * ci * plane];
                    for s in 0..n {
                        let src = (s * c_total + c_off) * plane;
                        let dst = s * ci * plane;
                        dv[dst..dst + ci * plane].copy_from_slice(&g[src..src + ci * plane]);
                    }
                    accumulate_owned(nodes, grads, v, dv);
                }
                c_off += ci;
            }
        }

        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g);
            accumulate(nodes, grads, *b, g);
        }

        Op::AddBias { input, bias } => {
            let d = value(nodes, *bias).shape()[0];
            accumulate(nodes, grads, *input, g);
            if nodes[bias.0].requires_grad {
                let mut db = vec![0.0; d];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
                accumulate_owned(nodes, grads, *bias, db);
            }
        }

        Op::Scale { input, factor } => {
            let dx: Vec<f64> = g.iter().map(|&gi| gi * factor).collect();
            accumulate_owned(nodes, grads, *input, dx);
        }

        Op::SliceRows { input, start } => {
            let si = value(nodes, *input).shape();
            let row: usize = si[1..].iter().product();
            let mut dx = vec![0.0; si.iter().product()];
            dx[start * row..start * row + g.len()].copy_from_slice(g);
            accumulate_owned(nodes, grads, *input, dx);
        }

        Op::Reshape { input } => {
            accumulate(nodes, grads, *input, g);
        }

        Op::Softmax { input } => {
            let p = nodes[id].value.data();
            let shape = nodes[id].value.shape();
            let (n, c) = (shape[0], shape[1]);
            let mut dx = vec![0.0; n * c];
            for i in 0..n {
                let prow = &p[i * c..(i + 1) * c];
                let grow = &g[i * c..(i + 1) * c];
                let dot: f64 = prow.iter().zip(grow).map(|(pj, gj)| pj * gj).sum();
                for j in 0..c {
                    dx[i * c + j] = prow[j] * (grow[j] - dot);
                }
            }
            accumulate_owned(nodes, grads, *input, dx);
        }

        Op::Entropy { probs } => {
            let gscale = g[0];
            let p = value(nodes, *probs).data();
            let n = value(nodes, *probs).shape()[0] as f64;
            let dx: Vec<f64> = p
                .iter()
                .map(|&v| {
                    let local = if v >= PROB_FLOOR {
                        -(v.ln() + 1.0)
                    } else {
                        -PROB_FLOOR.ln()
                    };
                    gscale * local / n
                })
                .collect();
            accumulate_owned(nodes, grads, *probs, dx);
        }

        Op::NllLoss { logits, labels } => {
            let gscale = g[0];
            let sl = value(nodes, *logits).shape();
            let (n, c) = (sl[0], sl[1]);
            let x = value(nodes, *logits).data();
            let mut dx = vec![0.0; n * c];
            for (i, &y) in labels.iter().enumerate() {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                let drow = &mut dx[i * c..(i + 1) * c];
                for (d, &v) in drow.iter_mut().zip(row) {
                    *d = (v - m).exp();
                    z += *d;
                }
                for d in drow.iter_mut() {
                    *d /= z;
                }
                drow[y] -= 1.0;
                for d in drow.iter_mut() {
                    *d *= gscale / n as f64;
                }
            }
            accumulate_owned(nodes, grads, *logits, dx);
        }

        Op::MmdBiased {
            zs,
            zt,
            sigmas,
            weights,
            sq_ss,
            sq_tt,
            sq_st,
        } => {
            let gscale = g[0];
            let szs = value(nodes, *zs).shape();
            let (ns, d) = (szs[0], szs[1]);
            let nt = value(nodes, *zt).shape()[0];
            let a = value(nodes, *zs).data();
            let b = value(nodes, *zt).data();
            let mut dzs = vec![0.0; ns * d];
            let mut dzt = vec![0.0; nt * d];
            for (&sigma, &wt) in sigmas.iter().zip(weights) {
                let inv2 = 1.0 / (2.0 * sigma * sigma);
                let invs = 1.0 / (sigma * sigma);
                // d/dza k(za, zb) = k(za, zb) * (zb - za) / sigma^2
                for i in 0..ns {
                    let drow = &mut dzs[i * d..(i + 1) * d];
                    let arow = &a[i * d..(i + 1) * d];
                    for j in 0..ns {
                        let kk = (-sq_ss[i * ns + j] * inv2).exp();
                        let coef = gscale * wt * 2.0 * kk * invs / (ns * ns) as f64;
                        let brow = &a[j * d..(j + 1) * d];
                        for ((dv, &av), &bv) in drow.iter_mut().zip(arow).zip(brow) {
                            *dv += coef * (bv - av);
                        }
                    }
                    for j in 0..nt {
                        let kk = (-sq_st[i * nt + j] * inv2).exp();
                        let coef = gscale * wt * -2.0 * kk * invs / (ns * nt) as f64;
                        let brow = &b[j * d..(j + 1) * d];
                        for ((dv, &av), &bv) in drow.iter_mut().zip(arow).zip(brow) {
                            *dv += coef * (bv - av);
                        }
                    }
                }
                for i in 0..nt {
                    let drow = &mut dzt[i * d..(i + 1) * d];
                    let arow = &b[i * d..(i + 1) * d];
                    for j in 0..nt {
                        let kk = (-sq_tt[i * nt + j] * inv2).exp();
                        let coef = gscale * wt * 2.0 * kk * invs / (nt * nt) as f64;
                        let brow = &b[j * d..(j + 1) * d];
                        for ((dv, &av), &bv) in drow.iter_mut().zip(arow).zip(brow) {
                            *dv += coef * (bv - av);
                        }
                    }
                    for j in 0..ns {
                        let kk = (-sq_st[j * nt + i] * inv2).exp();
                        let coef = gscale * wt * -2.0 * kk * invs / (ns * nt) as f64;
                        let brow = &a[j * d..(j + 1) * d];
                        for ((dv, &av), &bv) in drow.iter_mut().zip(arow).zip(brow) {
                            *dv += coef * (bv - av);
                        }
                    }
                }
            }
            accumulate_owned(nodes, grads, *zs, dzs);
            accumulate_owned(nodes, grads, *zt, dzt);
        }

        Op::GateBelowMedian { input, mask } => {
            let dx: Vec<f64> = mask.iter().zip(g).map(|(m, gi)| m * gi).collect();
            accumulate_owned(nodes, grads, *input, dx);
        }

        Op::SumAll { input } => {
            let gi = g[0];
            let dx = vec![gi; value(nodes, *input).numel()];
            accumulate_owned(nodes, grads, *input, dx);
        }
    }
}
