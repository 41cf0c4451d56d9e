//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends one record to a [`Tape`]. A record
//! keeps handles to its operands, whatever intermediates its backward rule
//! needs, and the computed value. [`Tape::backward`] walks the records in
//! exact reverse order and returns [`Gradients`] for every tensor that was
//! registered with `requires_grad`.
//!
//! A tape can be differentiated once. After that it must be [`Tape::reset`]
//! before new operations are recorded.

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{nchw, sigmoid, Tensor};
use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-sample channel → group assignment, used by the group-aware ops.
pub type GroupIds = [Vec<usize>];

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f32),
    Hadamard(Var, Var),
    ScaleAdd(Var, Var, f32),
    SpatialMean(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    SelectSum {
        input: Var,
        classes: Vec<usize>,
    },
    Sum(Var),
    GroupGather {
        input: Var,
        ids: Vec<Vec<usize>>,
    },
    GroupWeightedMean {
        input: Var,
        weights: Vec<Vec<f32>>,
        ids: Vec<Vec<usize>>,
        groups: usize,
    },
    GroupOverlap {
        input: Var,
        ids: Vec<Vec<usize>>,
        groups: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Magnitude below which group-overlap products are flushed to zero.
pub const OVERLAP_FLUSH: f32 = 1e-30;

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` for untracked values.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all records so the tape can be used again.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, requires_grad, Op::Leaf)
    }

    /// Registers a tensor whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Registers a tensor treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name, node });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(node))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation without bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c_in, h, w) = nchw("conv2d", self.value(input).shape())?;
        let (c_out, kc, kh, kw) = nchw("conv2d", self.value(kernel).shape())?;
        if kc != c_in || kh != kw {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {:?} incompatible with input {:?}",
                    self.value(kernel).shape(),
                    self.value(input).shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {h}×{w} (+{padding})"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad: padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        // One sample at a time keeps the column buffer cache-sized and
        // writes the output directly in N×C×H×W order.
        let (kl, p) = (geom.patch_len(), geom.positions());
        let mut cols = vec![0.0f32; kl * p];
        let mut out = vec![0.0f32; n * c_out * p];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        for (xs, ys) in x.chunks_exact(geom.input_len()).zip(out.chunks_exact_mut(c_out * p)) {
            kernels::im2col(xs, &geom, &mut cols);
            kernels::gemm(c_out, kl, p, k, (kl as isize, 1), &cols, (p as isize, 1), ys);
        }
        let value = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(&[input, kernel]);
        self.push(
            "conv2d",
            value,
            rg,
            Op::Conv2d { input, kernel, geom },
        )
    }

    /// Adds a per-channel bias to an `N×C×H×W` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = nchw("channel_bias", self.value(input).shape())?;
        if self.value(bias).shape() != [c] {
            return Err(Error::dim(
                "channel_bias",
                format!("bias {:?} for {c} channels", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(input).clone();
        for (i, chunk) in value.data_mut().chunks_mut(h * w).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let rg = self.rg(&[input, bias]);
        self.push("channel_bias", value, rg, Op::ChannelBias { input, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.rg(&[input]);
        self.push("relu", value, rg, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(sigmoid);
        let rg = self.rg(&[input]);
        self.push("sigmoid", value, rg, Op::Sigmoid(input))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push("scale", value, rg, Op::Scale(input, factor))
    }

    /// Elementwise product. `b` may broadcast along any axis where its
    /// extent is 1 (e.g. one map shared by every channel of a group).
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let map = broadcast_map(&sa, &sb).ok_or_else(|| {
            Error::dim("hadamard", format!("{sb:?} does not broadcast to {sa:?}"))
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = match &map {
            None => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            Some(idx) => av.iter().zip(idx).map(|(x, &j)| x * bv[j]).collect(),
        };
        let value = Tensor::new(sa, data)?;
        let rg = self.rg(&[a, b]);
        self.push("hadamard", value, rg, Op::Hadamard(a, b))
    }

    /// `a + alpha·b` for equally shaped operands.
    pub fn scale_add(&mut self, a: Var, b: Var, alpha: f32) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                "scale_add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + alpha * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("scale_add", value, rg, Op::ScaleAdd(a, b, alpha))
    }

    /// Mean over the two trailing (spatial) axes: `[…, H, W] → […]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("spatial_mean", format!("rank {} < 2", shape.len())));
        }
        let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
        if hw == 0 {
            return Err(Error::dim("spatial_mean", "empty spatial extent"));
        }
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f32>() / hw as f32)
            .collect();
        let value = Tensor::new(shape[..shape.len() - 2].to_vec(), data)?;
        let rg = self.rg(&[input]);
        self.push("spatial_mean", value, rg, Op::SpatialMean(input))
    }

    /// Global average pooling, `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        nchw("global_avg_pool", self.value(input).shape())?;
        self.spatial_mean(input)
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("max_pool2d", self.value(input).shape())?;
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::dim(
                "max_pool2d",
                format!("window {window} stride {stride} on {h}×{w}"),
            ));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(&[input]);
        self.push("max_pool2d", value, rg, Op::MaxPool { input, argmax })
    }

    /// Affine layer: `x·Wᵀ + b` with `x: N×F`, `W: O×F`, `b: O`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, f) = match *self.value(input).shape() {
            [n, f] => (n, f),
            ref s => return Err(Error::dim("dense", format!("input must be N×F, got {s:?}"))),
        };
        let o = match *self.value(weight).shape() {
            [o, wf] if wf == f => o,
            ref s => {
                return Err(Error::dim(
                    "dense",
                    format!("weight {s:?} incompatible with {f} features"),
                ))
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::dim(
                    "dense",
                    format!("bias {:?} for {o} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![0.0f32; n * o];
        kernels::gemm(
            n,
            f,
            o,
            self.value(input).data(),
            (f as isize, 1),
            self.value(weight).data(),
            (1, f as isize),
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(r, bb)| *r += bb);
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let mut operands = vec![input, weight];
        operands.extend(bias);
        let rg = self.rg(&operands);
        self.push(
            "dense",
            value,
            rg,
            Op::Dense {
                input,
                weight,
                bias,
            },
        )
    }

    /// Batch-mean softmax cross-entropy of `N×K` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match *self.value(logits).shape() {
            [n, k] => (n, k),
            ref s => {
                return Err(Error::dim(
                    "softmax_cross_entropy",
                    format!("logits must be N×K, got {s:?}"),
                ))
            }
        };
        if labels.len() != n || n == 0 {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: k,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f32;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            total += lse - row[y];
            kernels::softmax_row(row, &mut probs[i * k..(i + 1) * k]);
        }
        let value = Tensor::scalar((total / n as f32).max(0.0));
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `Σ_n input[n, classes[n]]` — picks one score per row and sums them.
    pub fn select_sum(&mut self, input: Var, classes: &[usize]) -> Result<Var> {
        let (n, k) = match *self.value(input).shape() {
            [n, k] => (n, k),
            ref s => return Err(Error::dim("select_sum", format!("expected N×K, got {s:?}"))),
        };
        if classes.len() != n || classes.iter().any(|&c| c >= k) {
            return Err(Error::dim("select_sum", "class indices do not match input"));
        }
        let v = self.value(input).data();
        let total = classes.iter().enumerate().map(|(i, &c)| v[i * k + c]).sum();
        let rg = self.rg(&[input]);
        self.push(
            "select_sum",
            Tensor::scalar(total),
            rg,
            Op::SelectSum {
                input,
                classes: classes.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).sum();
        let rg = self.rg(&[input]);
        self.push("sum", Tensor::scalar(total), rg, Op::Sum(input))
    }

    /// Expands per-group maps `N×G×H×W` to per-channel maps `N×C×H×W`,
    /// channel `j` of sample `n` receiving group `ids[n][j]`.
    pub fn group_gather(&mut self, input: Var, ids: &GroupIds) -> Result<Var> {
        let (n, g, h, w) = nchw("group_gather", self.value(input).shape())?;
        check_ids("group_gather", ids, n, g)?;
        let c = ids[0].len();
        let hw = h * w;
        let src = self.value(input).data();
        let mut out = vec![0.0f32; n * c * hw];
        for (ni, sample) in ids.iter().enumerate() {
            for (j, &l) in sample.iter().enumerate() {
                out[(ni * c + j) * hw..][..hw].copy_from_slice(&src[(ni * g + l) * hw..][..hw]);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[input]);
        self.push(
            "group_gather",
            value,
            rg,
            Op::GroupGather {
                input,
                ids: ids.to_vec(),
            },
        )
    }

    /// Per-group weighted mean maps: `out[n,l] = (1/n_l) Σ_{ids[n][j]=l} w[n][j]·x[n,j]`.
    /// The weights are constants.
    pub fn group_weighted_mean(
        &mut self,
        input: Var,
        weights: &[Vec<f32>],
        ids: &GroupIds,
        groups: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = nchw("group_weighted_mean", self.value(input).shape())?;
        check_ids("group_weighted_mean", ids, n, groups)?;
        if ids[0].len() != c || weights.len() != n || weights.iter().any(|r| r.len() != c) {
            return Err(Error::dim("group_weighted_mean", "weights/ids do not cover channels"));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0f32; n * groups * hw];
        for ni in 0..n {
            let sizes = group_sizes(&ids[ni], groups);
            for j in 0..c {
                let l = ids[ni][j];
                let coef = weights[ni][j] / sizes[l] as f32;
                let dst = &mut out[(ni * groups + l) * hw..][..hw];
                let src = &x[(ni * c + j) * hw..][..hw];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += coef * s);
            }
        }
        let value = Tensor::new(vec![n, groups, h, w], out)?;
        let rg = self.rg(&[input]);
        self.push(
            "group_weighted_mean",
            value,
            rg,
            Op::GroupWeightedMean {
                input,
                weights: weights.to_vec(),
                ids: ids.to_vec(),
                groups,
            },
        )
    }

    /// Spatial overlap of group-sum maps, averaged over the batch:
    /// `mean_n mean_p Π_l S_{n,l}(p)` with `S_{n,l} = Σ_{ids[n][j]=l} x[n,j]`.
    pub fn group_overlap(&mut self, input: Var, ids: &GroupIds, groups: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("group_overlap", self.value(input).shape())?;
        check_ids("group_overlap", ids, n, groups)?;
        if ids[0].len() != c {
            return Err(Error::dim("group_overlap", "ids do not cover channels"));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut total = 0.0f64;
        for ni in 0..n {
            let sums = group_sums(&x[ni * c * hw..(ni + 1) * c * hw], &ids[ni], groups, hw);
            let mut acc = 0.0f64;
            for p in 0..hw {
                let prod = (0..groups).fold(1.0f32, |a, l| a * sums[l * hw + p]);
                if prod.abs() >= OVERLAP_FLUSH {
                    acc += prod as f64;
                }
            }
            total += acc / hw as f64;
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        let rg = self.rg(&[input]);
        self.push(
            "group_overlap",
            value,
            rg,
            Op::GroupOverlap {
                input,
                ids: ids.to_vec(),
                groups,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (kl, p, c_out) = (geom.patch_len(), geom.positions(), geom.c_out);
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let mut cols = vec![0.0f32; kl * p];
                let mut dk = wants(*kernel).then(|| vec![0.0f32; c_out * kl]);
                let mut dx = wants(*input).then(|| vec![0.0f32; x.len()]);
                for (s, gs) in g.chunks_exact(c_out * p).enumerate() {
                    if let Some(dk) = dk.as_mut() {
                        kernels::im2col(&x[s * geom.input_len()..][..geom.input_len()], geom, &mut cols);
                        kernels::gemm_beta(c_out, p, kl, gs, (p as isize, 1), &cols, (1, p as isize), 1.0, dk);
                    }
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm(kl, c_out, p, k, (1, kl as isize), gs, (p as isize, 1), &mut cols);
                        kernels::col2im(&cols, geom, &mut dx[s * geom.input_len()..][..geom.input_len()]);
                    }
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
            }
            Op::ChannelBias { input, bias } => {
                let (_, c, h, w) = nchw("channel_bias", node.value.shape()).expect("nchw");
                if wants(*bias) {
                    let mut db = vec![0.0f32; c];
                    for (i, chunk) in g.chunks(h * w).enumerate() {
                        db[i % c] += chunk.iter().sum::<f32>();
                    }
                    accumulate(grads, *bias, db);
                }
                if wants(*input) {
                    accumulate(grads, *input, g.to_vec());
                }
            }
            Op::Relu(input) => {
                if wants(*input) {
                    let x = self.value(*input).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(grads, *input, d);
                }
            }
            Op::Sigmoid(input) => {
                if wants(*input) {
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gi, s)| gi * s * (1.0 - s))
                        .collect();
                    accumulate(grads, *input, d);
                }
            }
            Op::Scale(input, f) => {
                if wants(*input) {
                    accumulate(grads, *input, g.iter().map(|v| v * f).collect());
                }
            }
            Op::Hadamard(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let map = broadcast_map(av.shape(), bv.shape()).expect("checked in forward");
                if wants(*a) {
                    let d = match &map {
                        None => g.iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                        Some(idx) => g.iter().zip(idx).map(|(x, &j)| x * bv.data()[j]).collect(),
                    };
                    accumulate(grads, *a, d);
                }
                if wants(*b) {
                    let d = match &map {
                        None => g.iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                        Some(idx) => {
                            let mut d = vec![0.0f32; bv.len()];
                            for ((gi, ai), &j) in g.iter().zip(av.data()).zip(idx) {
                                d[j] += gi * ai;
                            }
                            d
                        }
                    };
                    accumulate(grads, *b, d);
                }
            }
            Op::ScaleAdd(a, b, alpha) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| v * alpha).collect());
                }
            }
            Op::SpatialMean(input) => {
                if wants(*input) {
                    let shape = self.value(*input).shape();
                    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
                    let inv = 1.0 / hw as f32;
                    let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, hw)).collect();
                    accumulate(grads, *input, d);
                }
            }
            Op::MaxPool { input, argmax } => {
                if wants(*input) {
                    let mut d = vec![0.0f32; self.value(*input).len()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        d[src] += gi;
                    }
                    accumulate(grads, *input, d);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let o = node.value.shape()[1];
                if wants(*input) {
                    let mut dx = vec![0.0f32; n * f];
                    kernels::gemm(
                        n,
                        o,
                        f,
                        g,
                        (o as isize, 1),
                        self.value(*weight).data(),
                        (f as isize, 1),
                        &mut dx,
                    );
                    accumulate(grads, *input, dx);
                }
                if wants(*weight) {
                    let mut dw = vec![0.0f32; o * f];
                    kernels::gemm(o, n, f, g, (1, o as isize), x.data(), (f as isize, 1), &mut dw);
                    accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        let mut db = vec![0.0f32; o];
                        for row in g.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f32;
                    let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * k + y] -= scale;
                    }
                    accumulate(grads, *logits, d);
                }
            }
            Op::SelectSum { input, classes } => {
                if wants(*input) {
                    let k = self.value(*input).shape()[1];
                    let mut d = vec![0.0f32; self.value(*input).len()];
                    for (i, &c) in classes.iter().enumerate() {
                        d[i * k + c] = g[0];
                    }
                    accumulate(grads, *input, d);
                }
            }
            Op::Sum(input) => {
                if wants(*input) {
                    accumulate(grads, *input, vec![g[0]; self.value(*input).len()]);
                }
            }
            Op::GroupGather { input, ids } => {
                if wants(*input) {
                    let (n, groups, h, w) = nchw("group_gather", self.value(*input).shape()).expect("nchw");
                    let hw = h * w;
                    let c = ids[0].len();
                    let mut d = vec![0.0f32; n * groups * hw];
                    for (ni, sample) in ids.iter().enumerate() {
                        for (j, &l) in sample.iter().enumerate() {
                            let dst = &mut d[(ni * groups + l) * hw..][..hw];
                            let src = &g[(ni * c + j) * hw..][..hw];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    accumulate(grads, *input, d);
                }
            }
            Op::GroupWeightedMean {
                input,
                weights,
                ids,
                groups,
            } => {
                if wants(*input) {
                    let (n, c, h, w) = nchw("group_weighted_mean", self.value(*input).shape()).expect("nchw");
                    let hw = h * w;
                    let mut d = vec![0.0f32; n * c * hw];
                    for ni in 0..n {
                        let sizes = group_sizes(&ids[ni], *groups);
                        for j in 0..c {
                            let l = ids[ni][j];
                            let coef = weights[ni][j] / sizes[l] as f32;
                            let src = &g[(ni * groups + l) * hw..][..hw];
                            let dst = &mut d[(ni * c + j) * hw..][..hw];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a = coef * b);
                        }
                    }
                    accumulate(grads, *input, d);
                }
            }
            Op::GroupOverlap { input, ids, groups } => {
                if wants(*input) {
                    let xv = self.value(*input);
                    let (n, c, h, w) = nchw("group_overlap", xv.shape()).expect("nchw");
                    let hw = h * w;
                    let scale = g[0] / (n * hw) as f32;
                    let mut d = vec![0.0f32; n * c * hw];
                    for ni in 0..n {
                        let sums = group_sums(&xv.data()[ni * c * hw..(ni + 1) * c * hw], &ids[ni], *groups, hw);
                        // Product of every group except one, per pixel.
                        let mut others = vec![0.0f32; groups * hw];
                        for p in 0..hw {
                            let full = (0..*groups).fold(1.0f32, |a, l| a * sums[l * hw + p]);
                            if full.abs() < OVERLAP_FLUSH && full != 0.0 {
                                continue;
                            }
                            let mut prefix = 1.0f32;
                            for l in 0..*groups {
                                others[l * hw + p] = prefix;
                                prefix *= sums[l * hw + p];
                            }
                            let mut suffix = 1.0f32;
                            for l in (0..*groups).rev() {
                                others[l * hw + p] *= suffix;
                                suffix *= sums[l * hw + p];
                            }
                        }
                        for j in 0..c {
                            let l = ids[ni][j];
                            let src = &others[l * hw..][..hw];
                            let dst = &mut d[(ni * c + j) * hw..][..hw];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a = b * scale);
                        }
                    }
                    accumulate(grads, *input, d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .iter_mut()
            .zip(&contribution)
            .for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

/// `None` when shapes are equal; otherwise, for every element of `a`, the
/// flat index into `b` it pairs with. `None` wrapped in `None` on mismatch.
fn broadcast_map(a: &[usize], b: &[usize]) -> Option<Option<Vec<usize>>> {
    if a == b {
        return Some(None);
    }
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return None;
    }
    let total: usize = a.iter().product();
    let mut strides = vec![0usize; b.len()];
    let mut s = 1;
    for i in (0..b.len()).rev() {
        strides[i] = if b[i] == 1 { 0 } else { s };
        s *= b[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; a.len()];
    for _ in 0..total {
        map.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..a.len()).rev() {
            index[ax] += 1;
            if index[ax] < a[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Some(Some(map))
}

fn check_ids(op: &'static str, ids: &GroupIds, n: usize, groups: usize) -> Result<()> {
    if ids.len() != n {
        return Err(Error::dim(op, format!("{} id rows for batch of {n}", ids.len())));
    }
    let c = ids.first().map_or(0, Vec::len);
    if ids.iter().any(|r| r.len() != c) {
        return Err(Error::dim(op, "ragged id rows"));
    }
    if ids.iter().flatten().any(|&l| l >= groups) {
        return Err(Error::dim(op, format!("group index out of range for {groups} groups")));
    }
    Ok(())
}

pub(crate) fn group_sizes(ids: &[usize], groups: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; groups];
    for &l in ids {
        sizes[l] += 1;
    }
    sizes
}

/// Per-group channel sums of one `C×H×W` sample, laid out `G×HW`.
pub(crate) fn group_sums(sample: &[f32], ids: &[usize], groups: usize, hw: usize) -> Vec<f32> {
    let mut sums = vec![0.0f32; groups * hw];
    for (j, &l) in ids.iter().enumerate() {
        let dst = &mut sums[l * hw..][..hw];
        dst.iter_mut()
            .zip(&sample[j * hw..][..hw])
            .for_each(|(d, s)| *d += s);
    }
    sums
}
