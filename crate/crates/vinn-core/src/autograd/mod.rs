//! Reverse-mode automatic differentiation over rank-4 feature maps.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operation
//! methods append nodes and return [`NodeId`]s; [`Graph::backward`] walks the
//! tape in reverse, accumulating gradients additively so fan-out sums
//! correctly. The tape is append-only, which makes insertion order a valid
//! topological order. Every forward result is checked for NaN/Inf on the spot
//! so numerical blow-ups surface at the op that produced them.

mod conv;

pub use conv::{conv2d_backward, conv2d_forward};

use crate::resnorm::{self, SampleKernel, SamplingGrid};
use crate::tensor::{find_non_finite, FeatureMap, Real};
use ndarray::{s, Array1, Array4, Axis};
use thiserror::Error;

/// Identity of a node within one computation graph.
pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: kernel dims must be odd, got {kh}x{kw}")]
    EvenKernel { op: &'static str, kh: usize, kw: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("maxout over an empty input list")]
    EmptyMaxout,
    #[error("maxpool2 requires even spatial dims, got {h}x{w}")]
    OddPoolDims { h: usize, w: usize },
    #[error("unpool2 input {input} is not a maxpool2 node")]
    NotAPoolNode { input: NodeId },
    #[error("backward root must be scalar (1x1x1x1), got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this graph; re-run forward first")]
    Consumed,
    #[error("backward on a non-tracking graph")]
    NotTracking,
    #[error("symmetric pad {pad} exceeds dim {dim}")]
    PadTooLarge { pad: usize, dim: usize },
}

/// Whether batch normalization uses batch statistics (training) or the
/// caller-provided running statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics emitted by a training-mode batch-norm node, used by the
/// caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<T>,
        inv_std: Array1<T>,
        train: bool,
    },
    Prelu {
        x: NodeId,
        alpha: NodeId,
    },
    Maxout {
        xs: Vec<NodeId>,
    },
    MaxPool2 {
        x: NodeId,
        indices: Array4<u32>,
        in_hw: (usize, usize),
    },
    Unpool2 {
        x: NodeId,
        pool: NodeId,
    },
    SoftmaxChannels {
        x: NodeId,
    },
    ConcatChannels {
        xs: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    LogClamped {
        x: NodeId,
        eps: T,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    SumAll {
        x: NodeId,
    },
    SumNhw {
        x: NodeId,
    },
    DivGuarded {
        num: NodeId,
        den: NodeId,
    },
    MulChannelScalar {
        a: NodeId,
        s: NodeId,
    },
    SliceChannels {
        x: NodeId,
        from: usize,
    },
    Sample {
        x: NodeId,
        grid: SamplingGrid,
        kernel: SampleKernel,
    },
    PadReflect {
        x: NodeId,
        pad: [usize; 4], // top, bottom, left, right
    },
    Crop2d {
        x: NodeId,
        off: (usize, usize),
    },
}

struct Node<T: Real> {
    value: FeatureMap<T>,
    grad: Option<FeatureMap<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Tape of one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    track: bool,
}

impl<T: Real> Graph<T> {
    /// `track = false` builds values only; `backward` is then an error.
    pub fn new(track: bool) -> Self {
        Graph { nodes: Vec::new(), consumed: false, track }
    }

    pub fn value(&self, id: NodeId) -> &FeatureMap<T> {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` root with respect to node `id`.
    /// `None` if the node did not require a gradient.
    pub fn grad(&self, id: NodeId) -> Option<&FeatureMap<T>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: FeatureMap<T>) -> NodeId {
        self.push_unchecked(value, false, Op::Leaf)
    }

    /// Leaf that participates in `backward` (parameters, or inputs under a
    /// finite-difference probe).
    pub fn leaf(&mut self, value: FeatureMap<T>, needs_grad: bool) -> NodeId {
        self.push_unchecked(value, needs_grad && self.track, Op::Leaf)
    }

    fn push_unchecked(&mut self, value: FeatureMap<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        self.nodes.len() - 1
    }

    fn push(
        &mut self,
        name: &'static str,
        value: FeatureMap<T>,
        inputs: &[NodeId],
        op: Op<T>,
    ) -> Result<NodeId, GraphError> {
        if find_non_finite(&value).is_some() {
            return Err(GraphError::NonFinite { op: name });
        }
        let needs = self.track && inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_unchecked(value, needs, op))
    }

    /// 2-D convolution with stride 1 and zero-filled same padding. Weights
    /// are (c_out, c_in, kh, kw) with odd kh, kw; bias is (1, c_out, 1, 1).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (xs, ws, bs) = (
            self.nodes[x].value.dim(),
            self.nodes[w].value.dim(),
            self.nodes[b].value.dim(),
        );
        if ws.3 % 2 == 0 || ws.2 % 2 == 0 {
            return Err(GraphError::EvenKernel { op: "conv2d", kh: ws.2, kw: ws.3 });
        }
        if xs.1 != ws.1 {
            return Err(GraphError::Shape {
                op: "conv2d",
                detail: format!("input channels {} vs weight c_in {}", xs.1, ws.1),
            });
        }
        if bs != (1, ws.0, 1, 1) {
            return Err(GraphError::Shape {
                op: "conv2d",
                detail: format!("bias shape {bs:?}, want (1, {}, 1, 1)", ws.0),
            });
        }
        let out = conv::conv2d_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        self.push("conv2d", out, &[x, w, b], Op::Conv2d { x, w, b })
    }

    /// Batch normalization over (batch, height, width) per channel with
    /// eps 1e-5. Training mode uses population batch statistics and returns
    /// them for the running-stat update; eval mode normalizes with the given
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        running: Option<(&Array1<T>, &Array1<T>)>,
    ) -> Result<(NodeId, Option<BnBatchStats<T>>), GraphError> {
        let xs = self.nodes[x].value.dim();
        let c = xs.1;
        for (pid, pname) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[pid].value.dim() != (1, c, 1, 1) {
                return Err(GraphError::Shape {
                    op: "batch_norm",
                    detail: format!("{pname} shape {:?}, want (1, {c}, 1, 1)", self.nodes[pid].value.dim()),
                });
            }
        }
        let eps = T::from_f64(BN_EPS);
        let (mean, var): (Array1<T>, Array1<T>) = match mode {
            BnMode::Train => {
                let m = T::from_f64((xs.0 * xs.2 * xs.3) as f64);
                let xv = &self.nodes[x].value;
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let lane = xv.slice(s![.., ch, .., ..]);
                    let mu = lane.iter().fold(T::zero(), |a, &v| a + v) / m;
                    let vr = lane.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / m;
                    mean[ch] = mu;
                    var[ch] = vr;
                }
                (mean, var)
            }
            BnMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| GraphError::Shape {
                    op: "batch_norm",
                    detail: "eval mode requires running statistics".into(),
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(GraphError::Shape {
                        op: "batch_norm",
                        detail: format!("running stats length {} / {}, want {c}", rm.len(), rv.len()),
                    });
                }
                (rm.clone(), rv.clone())
            }
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        let mut out = xv.clone();
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (gv[[0, ch, 0, 0]], bv[[0, ch, 0, 0]]);
            out.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - mu) * is * g + b);
        }
        let stats = match mode {
            BnMode::Train => Some(BnBatchStats { mean: mean.clone(), var: var.clone() }),
            BnMode::Eval => None,
        };
        let id = self.push(
            "batch_norm",
            out,
            &[x, gamma, beta],
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train: mode == BnMode::Train },
        )?;
        Ok((id, stats))
    }

    /// PReLU with one learnable slope per channel, alpha shaped (1, c, 1, 1).
    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId, GraphError> {
        let c = self.nodes[x].value.dim().1;
        if self.nodes[alpha].value.dim() != (1, c, 1, 1) {
            return Err(GraphError::Shape {
                op: "prelu",
                detail: format!("alpha shape {:?}, want (1, {c}, 1, 1)", self.nodes[alpha].value.dim()),
            });
        }
        let av = &self.nodes[alpha].value;
        let mut out = self.nodes[x].value.clone();
        for ch in 0..c {
            let a = av[[0, ch, 0, 0]];
            out.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|v| if v > T::zero() { v } else { a * v });
        }
        self.push("prelu", out, &[x, alpha], Op::Prelu { x, alpha })
    }

    /// Elementwise maximum over a non-empty list of same-shaped maps. Ties
    /// route the gradient to the lowest list index.
    pub fn maxout(&mut self, xs: &[NodeId]) -> Result<NodeId, GraphError> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(GraphError::EmptyMaxout);
        };
        let shape = self.nodes[first].value.dim();
        for &x in rest {
            if self.nodes[x].value.dim() != shape {
                return Err(GraphError::Shape {
                    op: "maxout",
                    detail: format!("{:?} vs {:?}", self.nodes[x].value.dim(), shape),
                });
            }
        }
        let mut out = self.nodes[first].value.clone();
        for &x in rest {
            out.zip_mut_with(&self.nodes[x].value, |o, &v| {
                if v > *o {
                    *o = v;
                }
            });
        }
        self.push("maxout", out, xs, Op::Maxout { xs: xs.to_vec() })
    }

    /// 2x2 stride-2 max pooling. Ties pick the first maximum in row-major
    /// window order; argmax indices ride along for unpooling.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (n, c, h, w) = self.nodes[x].value.dim();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(GraphError::OddPoolDims { h, w });
        }
        let xv = &self.nodes[x].value;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut indices = Array4::<u32>::zeros((n, c, oh, ow));
        for bn in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = xv[[bn, ch, 2 * oy, 2 * ox]];
                        let mut best_idx = (2 * oy * w + 2 * ox) as u32;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (y, x2) = (2 * oy + dy, 2 * ox + dx);
                                let v = xv[[bn, ch, y, x2]];
                                if v > best {
                                    best = v;
                                    best_idx = (y * w + x2) as u32;
                                }
                            }
                        }
                        out[[bn, ch, oy, ox]] = best;
                        indices[[bn, ch, oy, ox]] = best_idx;
                    }
                }
            }
        }
        self.push("maxpool2", out, &[x], Op::MaxPool2 { x, indices, in_hw: (h, w) })
    }

    /// Max-unpooling: scatters `x` to the argmax positions recorded by the
    /// `pool` node, zero elsewhere.
    pub fn unpool2(&mut self, x: NodeId, pool: NodeId) -> Result<NodeId, GraphError> {
        let Op::MaxPool2 { indices, in_hw, .. } = &self.nodes[pool].op else {
            return Err(GraphError::NotAPoolNode { input: pool });
        };
        let (indices, in_hw) = (indices.clone(), *in_hw);
        let (n, c, h, w) = self.nodes[x].value.dim();
        if indices.dim() != (n, c, h, w) {
            return Err(GraphError::Shape {
                op: "unpool2",
                detail: format!("input {:?} vs pooled {:?}", (n, c, h, w), indices.dim()),
            });
        }
        let xv = &self.nodes[x].value;
        let mut out = Array4::zeros((n, c, in_hw.0, in_hw.1));
        for bn in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x2 in 0..w {
                        let flat = indices[[bn, ch, y, x2]] as usize;
                        out[[bn, ch, flat / in_hw.1, flat % in_hw.1]] = xv[[bn, ch, y, x2]];
                    }
                }
            }
        }
        self.push("unpool2", out, &[x], Op::Unpool2 { x, pool })
    }

    /// Channel softmax per pixel, stabilized by subtracting the channel max.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (n, c, h, w) = self.nodes[x].value.dim();
        let xv = &self.nodes[x].value;
        let mut out = Array4::zeros((n, c, h, w));
        for bn in 0..n {
            for y in 0..h {
                for x2 in 0..w {
                    let mut mx = xv[[bn, 0, y, x2]];
                    for ch in 1..c {
                        mx = mx.max(xv[[bn, ch, y, x2]]);
                    }
                    let mut z = T::zero();
                    for ch in 0..c {
                        let e = (xv[[bn, ch, y, x2]] - mx).exp();
                        out[[bn, ch, y, x2]] = e;
                        z += e;
                    }
                    for ch in 0..c {
                        out[[bn, ch, y, x2]] /= z;
                    }
                }
            }
        }
        self.push("softmax_channels", out, &[x], Op::SoftmaxChannels { x })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId, GraphError> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(GraphError::Shape { op: "concat_channels", detail: "empty input list".into() });
        };
        let (n, _, h, w) = self.nodes[first].value.dim();
        for &x in rest {
            let d = self.nodes[x].value.dim();
            if (d.0, d.2, d.3) != (n, h, w) {
                return Err(GraphError::Shape {
                    op: "concat_channels",
                    detail: format!("{:?} vs (n={n}, h={h}, w={w})", d),
                });
            }
        }
        let views: Vec<_> = xs.iter().map(|&x| self.nodes[x].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("validated shapes");
        self.push("concat_channels", out, xs, Op::ConcatChannels { xs: xs.to_vec() })
    }

    /// Elementwise sum of two same-shaped maps.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("add", a, b)?;
        let out = &self.nodes[a].value + &self.nodes[b].value;
        self.push("add", out, &[a, b], Op::Add { a, b })
    }

    /// Elementwise product of two same-shaped maps.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("mul", a, b)?;
        let out = &self.nodes[a].value * &self.nodes[b].value;
        self.push("mul", out, &[a, b], Op::Mul { a, b })
    }

    /// Natural log of `max(x, eps)`; the clamp keeps vanishing probabilities
    /// finite and zeroes the gradient below `eps`.
    pub fn log_clamped(&mut self, x: NodeId, eps: T) -> Result<NodeId, GraphError> {
        let out = self.nodes[x].value.mapv(|v| v.max(eps).ln());
        self.push("log_clamped", out, &[x], Op::LogClamped { x, eps })
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId, GraphError> {
        let out = self.nodes[x].value.mapv(|v| v * c);
        self.push("scale", out, &[x], Op::Scale { x, c })
    }

    /// Sum of all elements, as a (1,1,1,1) scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.nodes[x].value.iter().fold(T::zero(), |a, &v| a + v);
        let out = Array4::from_elem((1, 1, 1, 1), s);
        self.push("sum_all", out, &[x], Op::SumAll { x })
    }

    /// Per-channel sum over batch and space, shaped (1, c, 1, 1).
    pub fn sum_nhw(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let c = self.nodes[x].value.dim().1;
        let mut out = Array4::zeros((1, c, 1, 1));
        for ch in 0..c {
            out[[0, ch, 0, 0]] = self.nodes[x].value.slice(s![.., ch, .., ..]).iter().fold(T::zero(), |a, &v| a + v);
        }
        self.push("sum_nhw", out, &[x], Op::SumNhw { x })
    }

    /// Elementwise `num / den` where `den > 0`, and 0 elsewhere (guarded
    /// division for ratio terms whose denominator can be structurally empty).
    pub fn div_guarded(&mut self, num: NodeId, den: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("div_guarded", num, den)?;
        let mut out = self.nodes[num].value.clone();
        out.zip_mut_with(&self.nodes[den].value, |o, &d| {
            *o = if d > T::zero() { *o / d } else { T::zero() };
        });
        self.push("div_guarded", out, &[num, den], Op::DivGuarded { num, den })
    }

    /// Multiplies every channel of `a` by the single-channel map `s`
    /// (broadcast along the channel axis).
    pub fn mul_channel_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, GraphError> {
        let (n, _, h, w) = self.nodes[a].value.dim();
        if self.nodes[s].value.dim() != (n, 1, h, w) {
            return Err(GraphError::Shape {
                op: "mul_channel_scalar",
                detail: format!(
                    "scalar map {:?}, want ({n}, 1, {h}, {w})",
                    self.nodes[s].value.dim()
                ),
            });
        }
        let sv = &self.nodes[s].value;
        let mut out = self.nodes[a].value.clone();
        let c = out.dim().1;
        for ch in 0..c {
            let mut lane = out.slice_mut(s![.., ch, .., ..]);
            lane *= &sv.slice(s![.., 0, .., ..]);
        }
        self.push("mul_channel_scalar", out, &[a, s], Op::MulChannelScalar { a, s })
    }

    /// Channel-range view `x[:, from..to]` as a new node.
    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId, GraphError> {
        let c = self.nodes[x].value.dim().1;
        if from >= to || to > c {
            return Err(GraphError::Shape {
                op: "slice_channels",
                detail: format!("range {from}..{to} of {c} channels"),
            });
        }
        let out = self.nodes[x].value.slice(s![.., from..to, .., ..]).to_owned();
        self.push("slice_channels", out, &[x], Op::SliceChannels { x, from })
    }

    /// Resamples `x` through `grid` with the given kernel. The backward pass
    /// is the exact adjoint of the interpolation.
    pub fn sample(
        &mut self,
        x: NodeId,
        grid: &SamplingGrid,
        kernel: SampleKernel,
    ) -> Result<NodeId, GraphError> {
        let (_, _, h, w) = self.nodes[x].value.dim();
        if (h, w) != grid.in_hw() {
            return Err(GraphError::Shape {
                op: "sample",
                detail: format!("input {}x{} vs grid source {:?}", h, w, grid.in_hw()),
            });
        }
        let out = resnorm::sample_forward(&self.nodes[x].value, grid, kernel);
        self.push("sample", out, &[x], Op::Sample { x, grid: grid.clone(), kernel })
    }

    /// Reflection padding (mirror about the edge sample, which is not
    /// repeated); each pad must be strictly smaller than the input dim.
    pub fn pad_reflect(&mut self, x: NodeId, pad: [usize; 4]) -> Result<NodeId, GraphError> {
        let (n, c, h, w) = self.nodes[x].value.dim();
        let [pt, pb, pl, pr] = pad;
        for (p, dim) in [(pt, h), (pb, h), (pl, w), (pr, w)] {
            if p >= dim {
                return Err(GraphError::PadTooLarge { pad: p, dim });
            }
        }
        let xv = &self.nodes[x].value;
        let (oh, ow) = (h + pt + pb, w + pl + pr);
        let mut out = Array4::zeros((n, c, oh, ow));
        for oy in 0..oh {
            let sy = mirror_index(oy as isize - pt as isize, h);
            for ox in 0..ow {
                let sx = mirror_index(ox as isize - pl as isize, w);
                for bn in 0..n {
                    for ch in 0..c {
                        out[[bn, ch, oy, ox]] = xv[[bn, ch, sy, sx]];
                    }
                }
            }
        }
        self.push("pad_reflect", out, &[x], Op::PadReflect { x, pad })
    }

    /// Spatial crop starting at `off` with output size `out_hw`.
    pub fn crop2d(
        &mut self,
        x: NodeId,
        off: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<NodeId, GraphError> {
        let (_, _, h, w) = self.nodes[x].value.dim();
        if off.0 + out_hw.0 > h || off.1 + out_hw.1 > w {
            return Err(GraphError::Shape {
                op: "crop2d",
                detail: format!("crop {off:?}+{out_hw:?} exceeds input {h}x{w}"),
            });
        }
        let out = self
            .nodes[x]
            .value
            .slice(s![.., .., off.0..off.0 + out_hw.0, off.1..off.1 + out_hw.1])
            .to_owned();
        self.push("crop2d", out, &[x], Op::Crop2d { x, off })
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        if self.nodes[a].value.dim() != self.nodes[b].value.dim() {
            return Err(GraphError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a].value.dim(), self.nodes[b].value.dim()),
            });
        }
        Ok(())
    }

    /// Reverse pass from a scalar root. Gradients of fan-out nodes accumulate
    /// additively. A second call without a fresh forward pass is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<(), GraphError> {
        if !self.track {
            return Err(GraphError::NotTracking);
        }
        if self.consumed {
            return Err(GraphError::Consumed);
        }
        let rshape = self.nodes[root].value.dim();
        if rshape != (1, 1, 1, 1) {
            return Err(GraphError::NonScalarRoot { shape: vec![rshape.0, rshape.1, rshape.2, rshape.3] });
        }
        self.consumed = true;
        self.nodes[root].grad = Some(Array4::from_elem((1, 1, 1, 1), T::one()));
        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            self.backprop_node(id);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, delta: &FeatureMap<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += delta,
            None => self.nodes[id].grad = Some(delta.clone()),
        }
    }

    fn backprop_node(&mut self, id: NodeId) {
        let g = self.nodes[id].grad.clone().expect("checked by caller");
        // Ops are matched by moving lightweight copies of their input ids out
        // first so `self` stays borrowable for accumulation.
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    &g,
                    &self.nodes[x].value,
                    &self.nodes[w].value,
                    self.nodes[x].needs_grad,
                );
                if let Some(dx) = dx {
                    self.accum(x, &dx);
                }
                self.accum(w, &dw);
                self.accum(b, &db);
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let (n, c, h, w) = self.nodes[x].value.dim();
                let m = T::from_f64((n * h * w) as f64);
                let xv = &self.nodes[x].value;
                let gv = &self.nodes[gamma].value;
                let mut dgamma = Array4::zeros((1, c, 1, 1));
                let mut dbeta = Array4::zeros((1, c, 1, 1));
                let mut dx = Array4::zeros((n, c, h, w));
                for ch in 0..c {
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let gam = gv[[0, ch, 0, 0]];
                    let gl = g.slice(s![.., ch, .., ..]);
                    let xl = xv.slice(s![.., ch, .., ..]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&gi, &xi) in gl.iter().zip(xl.iter()) {
                        sum_g += gi;
                        sum_gx += gi * (xi - mu) * is;
                    }
                    dgamma[[0, ch, 0, 0]] = sum_gx;
                    dbeta[[0, ch, 0, 0]] = sum_g;
                    let mut dxl = dx.slice_mut(s![.., ch, .., ..]);
                    if train {
                        for ((di, &gi), &xi) in dxl.iter_mut().zip(gl.iter()).zip(xl.iter()) {
                            let xh = (xi - mu) * is;
                            *di = gam * is * (gi - sum_g / m - xh * sum_gx / m);
                        }
                    } else {
                        for (di, &gi) in dxl.iter_mut().zip(gl.iter()) {
                            *di = gam * is * gi;
                        }
                    }
                }
                self.accum(x, &dx);
                self.accum(gamma, &dgamma);
                self.accum(beta, &dbeta);
            }
            &Op::Prelu { x, alpha } => {
                let (n, c, h, w) = self.nodes[x].value.dim();
                let xv = &self.nodes[x].value;
                let av = &self.nodes[alpha].value;
                let mut dx = Array4::zeros((n, c, h, w));
                let mut dalpha = Array4::zeros((1, c, 1, 1));
                for ch in 0..c {
                    let a = av[[0, ch, 0, 0]];
                    let mut da = T::zero();
                    let gl = g.slice(s![.., ch, .., ..]);
                    let xl = xv.slice(s![.., ch, .., ..]);
                    let mut dxl = dx.slice_mut(s![.., ch, .., ..]);
                    for ((di, &gi), &xi) in dxl.iter_mut().zip(gl.iter()).zip(xl.iter()) {
                        if xi > T::zero() {
                            *di = gi;
                        } else {
                            *di = gi * a;
                            da += gi * xi;
                        }
                    }
                    dalpha[[0, ch, 0, 0]] = da;
                }
                self.accum(x, &dx);
                self.accum(alpha, &dalpha);
            }
            Op::Maxout { xs } => {
                let xs = xs.clone();
                let shape = self.nodes[xs[0]].value.dim();
                // Winner per element: lowest index among ties, recomputed from
                // the stored forward values.
                let mut winner = ndarray::Array4::<u8>::zeros(shape);
                let mut best = self.nodes[xs[0]].value.clone();
                for (k, &x) in xs.iter().enumerate().skip(1) {
                    let xv = &self.nodes[x].value;
                    ndarray::Zip::from(&mut winner).and(&mut best).and(xv).for_each(
                        |wn, bv, &v| {
                            if v > *bv {
                                *bv = v;
                                *wn = k as u8;
                            }
                        },
                    );
                }
                for (k, &x) in xs.iter().enumerate() {
                    if !self.nodes[x].needs_grad {
                        continue;
                    }
                    let mut dx = Array4::zeros(shape);
                    ndarray::Zip::from(&mut dx).and(&winner).and(&g).for_each(|d, &wn, &gi| {
                        if wn == k as u8 {
                            *d = gi;
                        }
                    });
                    self.accum(x, &dx);
                }
            }
            Op::MaxPool2 { x, indices, in_hw } => {
                let (x, in_hw) = (*x, *in_hw);
                let indices = indices.clone();
                let (n, c, oh, ow) = indices.dim();
                let mut dx = Array4::zeros((n, c, in_hw.0, in_hw.1));
                for bn in 0..n {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x2 in 0..ow {
                                let flat = indices[[bn, ch, y, x2]] as usize;
                                dx[[bn, ch, flat / in_hw.1, flat % in_hw.1]] += g[[bn, ch, y, x2]];
                            }
                        }
                    }
                }
                self.accum(x, &dx);
            }
            &Op::Unpool2 { x, pool } => {
                let Op::MaxPool2 { indices, in_hw, .. } = &self.nodes[pool].op else {
                    unreachable!("validated at construction");
                };
                let (indices, in_w) = (indices.clone(), in_hw.1);
                let (n, c, h, w) = indices.dim();
                let mut dx = Array4::zeros((n, c, h, w));
                for bn in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for x2 in 0..w {
                                let flat = indices[[bn, ch, y, x2]] as usize;
                                dx[[bn, ch, y, x2]] = g[[bn, ch, flat / in_w, flat % in_w]];
                            }
                        }
                    }
                }
                self.accum(x, &dx);
            }
            &Op::SoftmaxChannels { x } => {
                let y = self.nodes[id].value.clone();
                let (n, c, h, w) = y.dim();
                let mut dx = Array4::zeros((n, c, h, w));
                for bn in 0..n {
                    for py in 0..h {
                        for px in 0..w {
                            let mut dot = T::zero();
                            for ch in 0..c {
                                dot += y[[bn, ch, py, px]] * g[[bn, ch, py, px]];
                            }
                            for ch in 0..c {
                                dx[[bn, ch, py, px]] =
                                    y[[bn, ch, py, px]] * (g[[bn, ch, py, px]] - dot);
                            }
                        }
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatChannels { xs } => {
                let xs = xs.clone();
                let mut off = 0;
                for &x in &xs {
                    let cx = self.nodes[x].value.dim().1;
                    let dx = g.slice(s![.., off..off + cx, .., ..]).to_owned();
                    self.accum(x, &dx);
                    off += cx;
                }
            }
            &Op::Add { a, b } => {
                self.accum(a, &g);
                self.accum(b, &g);
            }
            &Op::Mul { a, b } => {
                let da = &g * &self.nodes[b].value;
                let db = &g * &self.nodes[a].value;
                self.accum(a, &da);
                self.accum(b, &db);
            }
            &Op::LogClamped { x, eps } => {
                let mut dx = g.clone();
                dx.zip_mut_with(&self.nodes[x].value, |d, &v| {
                    *d = if v > eps { *d / v } else { T::zero() };
                });
                self.accum(x, &dx);
            }
            &Op::Scale { x, c } => {
                let dx = g.mapv(|v| v * c);
                self.accum(x, &dx);
            }
            &Op::SumAll { x } => {
                let dx = Array4::from_elem(self.nodes[x].value.dim(), g[[0, 0, 0, 0]]);
                self.accum(x, &dx);
            }
            &Op::SumNhw { x } => {
                let (n, c, h, w) = self.nodes[x].value.dim();
                let mut dx = Array4::zeros((n, c, h, w));
                for ch in 0..c {
                    dx.slice_mut(s![.., ch, .., ..]).fill(g[[0, ch, 0, 0]]);
                }
                self.accum(x, &dx);
            }
            &Op::DivGuarded { num, den } => {
                let dv = &self.nodes[den].value;
                let nv = &self.nodes[num].value;
                let mut dnum = g.clone();
                dnum.zip_mut_with(dv, |d, &de| {
                    *d = if de > T::zero() { *d / de } else { T::zero() };
                });
                let mut dden = g.clone();
                ndarray::Zip::from(&mut dden).and(nv).and(dv).for_each(|d, &nu, &de| {
                    *d = if de > T::zero() { -*d * nu / (de * de) } else { T::zero() };
                });
                self.accum(num, &dnum);
                self.accum(den, &dden);
            }
            &Op::MulChannelScalar { a, s } => {
                let c = self.nodes[a].value.dim().1;
                if self.nodes[a].needs_grad {
                    let mut da = g.clone();
                    let sv = &self.nodes[s].value;
                    for ch in 0..c {
                        let mut lane = da.slice_mut(s![.., ch, .., ..]);
                        lane *= &sv.slice(s![.., 0, .., ..]);
                    }
                    self.accum(a, &da);
                }
                if self.nodes[s].needs_grad {
                    let av = &self.nodes[a].value;
                    let prod = &g * av;
                    let mut ds = prod.slice(s![.., 0..1, .., ..]).to_owned();
                    for ch in 1..c {
                        let mut lane = ds.slice_mut(s![.., 0, .., ..]);
                        lane += &prod.slice(s![.., ch, .., ..]);
                    }
                    self.accum(s, &ds);
                }
            }
            &Op::SliceChannels { x, from } => {
                let (n, c, h, w) = self.nodes[x].value.dim();
                let gc = g.dim().1;
                let mut dx = Array4::zeros((n, c, h, w));
                dx.slice_mut(s![.., from..from + gc, .., ..]).assign(&g);
                self.accum(x, &dx);
            }
            Op::Sample { x, grid, kernel } => {
                let (x, kernel) = (*x, *kernel);
                let grid = grid.clone();
                if self.nodes[x].needs_grad {
                    let dx = resnorm::sample_backward(&g, self.nodes[x].value.dim(), &grid, kernel);
                    self.accum(x, &dx);
                }
            }
            &Op::PadReflect { x, pad } => {
                let (n, c, h, w) = self.nodes[x].value.dim();
                let [pt, _, pl, _] = pad;
                let (oh, ow) = (g.dim().2, g.dim().3);
                let mut dx = Array4::zeros((n, c, h, w));
                for oy in 0..oh {
                    let sy = mirror_index(oy as isize - pt as isize, h);
                    for ox in 0..ow {
                        let sx = mirror_index(ox as isize - pl as isize, w);
                        for bn in 0..n {
                            for ch in 0..c {
                                dx[[bn, ch, sy, sx]] += g[[bn, ch, oy, ox]];
                            }
                        }
                    }
                }
                self.accum(x, &dx);
            }
            &Op::Crop2d { x, off } => {
                let (n, c, h, w) = self.nodes[x].value.dim();
                let (gh, gw) = (g.dim().2, g.dim().3);
                let mut dx = Array4::zeros((n, c, h, w));
                dx.slice_mut(s![.., .., off.0..off.0 + gh, off.1..off.1 + gw]).assign(&g);
                self.accum(x, &dx);
            }
        }
        // Interior gradients are dropped once consumed to bound peak memory;
        // leaves keep theirs for the optimizer.
        if !matches!(self.nodes[id].op, Op::Leaf) {
            self.nodes[id].grad = None;
        }
    }
}

/// Batch-norm epsilon inside the variance square root.
pub const BN_EPS: f64 = 1e-5;

/// Momentum of the running-statistics update
/// (`new = (1 - momentum) * old + momentum * batch`).
pub const BN_MOMENTUM: f64 = 0.1;

fn mirror_index(i: isize, dim: usize) -> usize {
    let d = dim as isize;
    let m = if i < 0 {
        -i
    } else if i >= d {
        2 * d - 2 - i
    } else {
        i
    };
    debug_assert!((0..d).contains(&m));
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array4;

    fn map4(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_ones_kernel_center() {
        // 3x3 ones kernel over a ones image: the center pixel sees all nine
        // taps, the corner only four.
        let mut g = Graph::<f64>::new(true);
        let x = g.input(Array4::ones((1, 1, 3, 3)));
        let w = g.leaf(Array4::ones((1, 1, 3, 3)), true);
        let b = g.leaf(Array4::zeros((1, 1, 1, 1)), true);
        let y = g.conv2d(x, w, b).unwrap();
        assert_relative_eq!(g.value(y)[[0, 0, 1, 1]], 9.0);
        assert_relative_eq!(g.value(y)[[0, 0, 0, 0]], 4.0);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(Array4::ones((1, 1, 4, 4)));
        let w = g.leaf(Array4::ones((1, 1, 2, 2)), true);
        let b = g.leaf(Array4::zeros((1, 1, 1, 1)), true);
        assert!(matches!(g.conv2d(x, w, b), Err(GraphError::EvenKernel { .. })));
    }

    #[test]
    fn prelu_negative_slope() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(map4(vec![-2.0, 3.0], (1, 1, 1, 2)));
        let a = g.leaf(Array4::from_elem((1, 1, 1, 1), 0.25), true);
        let y = g.prelu(x, a).unwrap();
        assert_relative_eq!(g.value(y)[[0, 0, 0, 0]], -0.5);
        assert_relative_eq!(g.value(y)[[0, 0, 0, 1]], 3.0);
    }

    #[test]
    fn maxpool_ramp_and_unpool_roundtrip() {
        let mut g = Graph::<f64>::new(true);
        let ramp: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.leaf(map4(ramp, (1, 1, 4, 4)), true);
        let p = g.maxpool2(x).unwrap();
        assert_eq!(
            g.value(p).iter().copied().collect::<Vec<_>>(),
            vec![5.0, 7.0, 13.0, 15.0]
        );
        let u = g.unpool2(p, p).unwrap();
        // Peaks return to their argmax positions, zero elsewhere.
        assert_relative_eq!(g.value(u)[[0, 0, 1, 1]], 5.0);
        assert_relative_eq!(g.value(u)[[0, 0, 0, 0]], 0.0);
        assert_relative_eq!(g.value(u)[[0, 0, 3, 3]], 15.0);
        let s = g.sum_all(u).unwrap();
        g.backward(s).unwrap();
        // Gradient flows only through the pooled positions.
        let gx = g.grad(x).unwrap();
        assert_relative_eq!(gx[[0, 0, 1, 1]], 1.0);
        assert_relative_eq!(gx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn maxpool_tie_picks_first_row_major() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Array4::ones((1, 1, 2, 2)), true);
        let p = g.maxpool2(x).unwrap();
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        assert_relative_eq!(gx[[0, 0, 0, 0]], 1.0);
        assert_relative_eq!(gx[[0, 0, 0, 1]], 0.0);
        assert_relative_eq!(gx[[0, 0, 1, 0]], 0.0);
        assert_relative_eq!(gx[[0, 0, 1, 1]], 0.0);
    }

    #[test]
    fn softmax_two_channel_example() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(map4(vec![0.0, 3.0f64.ln()], (1, 2, 1, 1)));
        let y = g.softmax_channels(x).unwrap();
        assert_relative_eq!(g.value(y)[[0, 0, 0, 0]], 0.25, max_relative = 1e-12);
        assert_relative_eq!(g.value(y)[[0, 1, 0, 0]], 0.75, max_relative = 1e-12);
    }

    #[test]
    fn maxout_tie_gradient_goes_to_lowest_index() {
        let mut g = Graph::<f64>::new(true);
        let a = g.leaf(Array4::from_elem((1, 1, 1, 1), 2.0), true);
        let b = g.leaf(Array4::from_elem((1, 1, 1, 1), 2.0), true);
        let m = g.maxout(&[a, b]).unwrap();
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        assert_relative_eq!(g.grad(a).unwrap()[[0, 0, 0, 0]], 1.0);
        assert_relative_eq!(g.grad(b).unwrap()[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x * x + x, dy/dx = 2x + 1 = 7 at x = 3.
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Array4::from_elem((1, 1, 1, 1), 3.0), true);
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        g.backward(y).unwrap();
        assert_relative_eq!(g.grad(x).unwrap()[[0, 0, 0, 0]], 7.0);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Array4::from_elem((1, 1, 1, 1), 3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::Consumed)));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(Array4::ones((1, 1, 2, 2)), true);
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarRoot { .. })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(Array4::from_elem((1, 1, 1, 1), 1e308));
        assert!(matches!(g.mul(x, x), Err(GraphError::NonFinite { .. })));
    }

    #[test]
    fn batch_norm_normalizes_batch() {
        let mut g = Graph::<f64>::new(true);
        let x = g.input(map4(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2)));
        let gamma = g.leaf(Array4::ones((1, 1, 1, 1)), true);
        let beta = g.leaf(Array4::zeros((1, 1, 1, 1)), true);
        let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train, None).unwrap();
        let stats = stats.unwrap();
        assert_relative_eq!(stats.mean[0], 2.5);
        assert_relative_eq!(stats.var[0], 1.25);
        let mean_out: f64 = g.value(y).iter().sum::<f64>() / 4.0;
        assert!(mean_out.abs() < 1e-12);
        let var_out: f64 = g.value(y).iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_relative_eq!(var_out, 1.25 / (1.25 + BN_EPS), max_relative = 1e-10);
    }

    #[test]
    fn batch_norm_single_element_is_finite() {
        // Zero variance: epsilon keeps the output finite (and zero).
        let mut g = Graph::<f64>::new(true);
        let x = g.input(Array4::from_elem((1, 1, 1, 1), 42.0));
        let gamma = g.leaf(Array4::ones((1, 1, 1, 1)), true);
        let beta = g.leaf(Array4::zeros((1, 1, 1, 1)), true);
        let (y, _) = g.batch_norm(x, gamma, beta, BnMode::Train, None).unwrap();
        assert_relative_eq!(g.value(y)[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn concat_then_backward_splits() {
        let mut g = Graph::<f64>::new(true);
        let a = g.leaf(Array4::ones((1, 2, 2, 2)), true);
        let b = g.leaf(Array4::ones((1, 3, 2, 2)), true);
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).dim(), (1, 5, 2, 2));
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().dim(), (1, 2, 2, 2));
        assert_eq!(g.grad(b).unwrap().dim(), (1, 3, 2, 2));
    }

    #[test]
    fn pad_crop_inverse() {
        let mut g = Graph::<f64>::new(true);
        let data = map4((0..12).map(|v| v as f64).collect(), (1, 1, 3, 4));
        let x = g.leaf(data.clone(), true);
        let p = g.pad_reflect(x, [2, 1, 0, 3]).unwrap();
        assert_eq!(g.value(p).dim(), (1, 1, 6, 7));
        // Edge sample is not repeated: output row 0 mirrors input row 2.
        assert_relative_eq!(g.value(p)[[0, 0, 0, 0]], data[[0, 0, 2, 0]]);
        let c = g.crop2d(p, (2, 0), (3, 4)).unwrap();
        assert_eq!(g.value(c), &data);
    }
}
