//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! Forward evaluation is eager: every builder method computes its output
//! tensor immediately and records the op. `backward` walks the tape in
//! reverse, accumulating gradients into every node that can reach a
//! parameter. A graph is confined to one worker; distinct graphs share
//! nothing mutable.
//!
//! Complex values travel as real tensors with a trailing extent-2 axis of
//! interleaved (re, im) parts, which keeps every node a plain [`Tensor`].

use crate::conv::{
    conv2d_bias_grad, conv2d_forward, conv2d_input_grad, conv2d_kernel_grad, conv_transpose_out_dim,
    ConvDims,
};
use crate::error::{Error, Result};
use crate::fft::dft2_batched;
use crate::scalar::{cast, to_f64, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddConst(NodeId, S),
    MulConst(NodeId, S),
    Relu(NodeId),
    Sigmoid(NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: (usize, usize),
    },
    ConvTranspose2d {
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    MaxPool2(NodeId),
    GlobalAvgPool(NodeId),
    GlobalMaxPool(NodeId),
    Reshape(NodeId),
    ScaleBroadcast {
        feature: NodeId,
        weights: NodeId,
    },
    CrossCorrelate {
        template: NodeId,
        search: NodeId,
    },
    Fft2(NodeId),
    Ifft2Real(NodeId),
    ComplexMul {
        a: NodeId,
        b: NodeId,
    },
    ComplexAbsSq(NodeId),
    ComplexRealDiv {
        num: NodeId,
        denom: NodeId,
    },
    ChannelSum(NodeId),
    ScalarMul {
        t: NodeId,
        s: NodeId,
    },
    ScalarAdd {
        t: NodeId,
        s: NodeId,
    },
    Sum(NodeId),
    /// Weighted logistic loss sum_u w[u] * ln(1 + exp(-y[u]*o[u])),
    /// evaluated in the overflow-free form.
    LogisticLoss {
        scores: NodeId,
        labels: Tensor<S>,
        weights: Tensor<S>,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Trainable leaf: receives a gradient in `backward`.
    pub fn param(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Non-trainable leaf (inputs, fixed labels, windows).
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn add_const(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(Op::AddConst(a, c), v, ng)
    }

    pub fn mul_const(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(Op::MulConst(a, c), v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(S::zero()));
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid_scalar);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    /// Valid/padded cross-correlation of [C,H,W] with kernels [K,C,kh,kw].
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let d = ConvDims::infer(self.shape(input), self.shape(kernels), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [d.out_ch] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?}, expected [{}]", self.shape(b), d.out_ch),
                });
            }
        }
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(kernels).data(),
            bias_data.as_deref(),
            &d,
        );
        let v = Tensor::new(vec![d.out_ch, d.oh, d.ow], out)?;
        let ng = self.needs(input)
            || self.needs(kernels)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            },
            v,
            ng,
        ))
    }

    /// Adjoint of conv2d. Input [A,h,w], kernels [A,B,kh,kw], output
    /// [B,(h-1)*stride+kh,(w-1)*stride+kw].
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let k_shape = self.shape(kernels).to_vec();
        if in_shape.len() != 3 || k_shape.len() != 4 || k_shape[0] != in_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input {:?}, kernels {:?}", in_shape, k_shape),
            });
        }
        let oh = conv_transpose_out_dim(in_shape[1], k_shape[2], stride);
        let ow = conv_transpose_out_dim(in_shape[2], k_shape[3], stride);
        // The transposed conv output plays the "input" role of the paired conv.
        let d = ConvDims::infer(
            &[k_shape[1], oh, ow],
            &[k_shape[0], k_shape[1], k_shape[2], k_shape[3]],
            stride,
            (0, 0),
        )?;
        debug_assert_eq!(d.oh, in_shape[1]);
        let mut out = conv2d_input_grad(self.value(input).data(), self.value(kernels).data(), &d);
        if let Some(b) = bias {
            if self.shape(b) != [k_shape[1]] {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d",
                    detail: format!("bias {:?}, expected [{}]", self.shape(b), k_shape[1]),
                });
            }
            for ch in 0..k_shape[1] {
                let bk = self.value(b).data()[ch];
                for v in out[ch * oh * ow..(ch + 1) * oh * ow].iter_mut() {
                    *v += bk;
                }
            }
        }
        let v = Tensor::new(vec![k_shape[1], oh, ow], out)?;
        let ng = self.needs(input)
            || self.needs(kernels)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Op::ConvTranspose2d {
                input,
                kernels,
                bias,
                stride,
            },
            v,
            ng,
        ))
    }

    /// 2x2 max pooling with stride 2; trailing row/column dropped.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 || sh[1] < 2 || sh[2] < 2 {
            return Err(Error::InputTooSmall {
                op: "max_pool2",
                detail: format!("{:?}", sh),
            });
        }
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = (ch * h + 2 * i) * w + 2 * j;
                    let m = x[base]
                        .max(x[base + 1])
                        .max(x[base + w])
                        .max(x[base + w + 1]);
                    out[(ch * oh + i) * ow + j] = m;
                }
            }
        }
        let v = Tensor::new(vec![c, oh, ow], out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::MaxPool2(a), v, ng))
    }

    /// Per-channel mean over the spatial extent: [C,H,W] -> [C].
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        require_chw(&sh, "global_avg_pool")?;
        let (c, hw) = (sh[0], sh[1] * sh[2]);
        let x = self.value(a).data();
        let inv = cast::<S>(1.0 / hw as f64);
        let out: Vec<S> = (0..c)
            .map(|ch| {
                x[ch * hw..(ch + 1) * hw]
                    .iter()
                    .fold(S::zero(), |s, &v| s + v)
                    * inv
            })
            .collect();
        let v = Tensor::new(vec![c], out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::GlobalAvgPool(a), v, ng))
    }

    /// Per-channel maximum over the spatial extent: [C,H,W] -> [C].
    pub fn global_max_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        require_chw(&sh, "global_max_pool")?;
        let (c, hw) = (sh[0], sh[1] * sh[2]);
        let x = self.value(a).data();
        let out: Vec<S> = (0..c)
            .map(|ch| {
                x[ch * hw..(ch + 1) * hw]
                    .iter()
                    .fold(S::neg_infinity(), |s, &v| s.max(v))
            })
            .collect();
        let v = Tensor::new(vec![c], out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::GlobalMaxPool(a), v, ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), v, ng))
    }

    /// Elementwise product with a weight vector broadcast over space
    /// (weights [C]) or over channels (weights [1,H,W] or [H,W]).
    pub fn scale_broadcast(&mut self, feature: NodeId, weights: NodeId) -> Result<NodeId> {
        let fs = self.shape(feature).to_vec();
        require_chw(&fs, "scale_broadcast")?;
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let ws = self.shape(weights).to_vec();
        let mode = broadcast_mode(&ws, c, h, w)?;
        let f = self.value(feature).data();
        let wd = self.value(weights).data();
        let mut out = vec![S::zero(); c * h * w];
        match mode {
            Broadcast::Channel => {
                for ch in 0..c {
                    let k = wd[ch];
                    for i in 0..h * w {
                        out[ch * h * w + i] = f[ch * h * w + i] * k;
                    }
                }
            }
            Broadcast::Spatial => {
                for ch in 0..c {
                    for i in 0..h * w {
                        out[ch * h * w + i] = f[ch * h * w + i] * wd[i];
                    }
                }
            }
        }
        let v = Tensor::new(fs, out)?;
        let ng = self.needs(feature) || self.needs(weights);
        Ok(self.push(Op::ScaleBroadcast { feature, weights }, v, ng))
    }

    /// Valid cross-correlation of template [C,h,w] over search [C,H,W],
    /// producing an (H-h+1) x (W-w+1) similarity map.
    pub fn cross_correlate(&mut self, template: NodeId, search: NodeId) -> Result<NodeId> {
        let ts = self.shape(template).to_vec();
        let ss = self.shape(search).to_vec();
        require_chw(&ts, "cross_correlate")?;
        require_chw(&ss, "cross_correlate")?;
        if ts[0] != ss[0] || ts[1] > ss[1] || ts[2] > ss[2] {
            return Err(Error::ShapeMismatch {
                op: "cross_correlate",
                detail: format!("template {:?} vs search {:?}", ts, ss),
            });
        }
        let d = ConvDims::infer(&ss, &[1, ts[0], ts[1], ts[2]], 1, (0, 0))?;
        let out = conv2d_forward(
            self.value(search).data(),
            self.value(template).data(),
            None,
            &d,
        );
        let v = Tensor::new(vec![d.oh, d.ow], out)?;
        let ng = self.needs(template) || self.needs(search);
        Ok(self.push(Op::CrossCorrelate { template, search }, v, ng))
    }

    /// Forward DFT of each H x W plane: [C,H,W] -> [C,H,W,2] interleaved.
    pub fn fft2(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        require_chw(&sh, "fft2")?;
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let x = self.value(a).data();
        let mut data = vec![S::zero(); 2 * c * h * w];
        for (i, &v) in x.iter().enumerate() {
            data[2 * i] = v;
        }
        dft2_batched(&mut data, c, h, w, false);
        let v = Tensor::new(vec![c, h, w, 2], data)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Fft2(a), v, ng))
    }

    /// Real part of the inverse DFT of each plane: [C,H,W,2] -> [C,H,W].
    pub fn ifft2_real(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        require_packed(&sh, "ifft2_real")?;
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut data = self.value(a).data().to_vec();
        dft2_batched(&mut data, c, h, w, true);
        let re: Vec<S> = (0..c * h * w).map(|i| data[2 * i]).collect();
        let v = Tensor::new(vec![c, h, w], re)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Ifft2Real(a), v, ng))
    }

    /// Elementwise complex product; `b` may be a single [H,W,2] plane
    /// broadcast over the channels of `a`.
    pub fn complex_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        require_packed(&sa, "complex_mul")?;
        let sb = self.shape(b).to_vec();
        let broadcast = match () {
            _ if sb == sa => false,
            _ if sb.len() == 3 && sb[0] == sa[1] && sb[1] == sa[2] && sb[2] == 2 => true,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "complex_mul",
                    detail: format!("{:?} vs {:?}", sa, sb),
                })
            }
        };
        let (c, hw) = (sa[0], sa[1] * sa[2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); 2 * c * hw];
        for ch in 0..c {
            for i in 0..hw {
                let ia = 2 * (ch * hw + i);
                let ib = if broadcast { 2 * i } else { ia };
                let (ar, ai) = (av[ia], av[ia + 1]);
                let (br, bi) = (bv[ib], bv[ib + 1]);
                out[ia] = ar * br - ai * bi;
                out[ia + 1] = ar * bi + ai * br;
            }
        }
        let v = Tensor::new(sa, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ComplexMul { a, b }, v, ng))
    }

    /// Squared modulus per bin: [C,H,W,2] -> [C,H,W].
    pub fn complex_abs_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        require_packed(&sh, "complex_abs_sq")?;
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let av = self.value(a).data();
        let out: Vec<S> = (0..c * h * w)
            .map(|i| av[2 * i] * av[2 * i] + av[2 * i + 1] * av[2 * i + 1])
            .collect();
        let v = Tensor::new(vec![c, h, w], out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::ComplexAbsSq(a), v, ng))
    }

    /// Complex numerator divided by a real positive map broadcast over
    /// channels: [C,H,W,2] / [H,W] -> [C,H,W,2].
    pub fn complex_real_div(&mut self, num: NodeId, denom: NodeId) -> Result<NodeId> {
        let sn = self.shape(num).to_vec();
        require_packed(&sn, "complex_real_div")?;
        let sd = self.shape(denom).to_vec();
        if sd != [sn[1], sn[2]] {
            return Err(Error::ShapeMismatch {
                op: "complex_real_div",
                detail: format!("{:?} / {:?}", sn, sd),
            });
        }
        let dv = self.value(denom).data();
        for &d in dv {
            if to_f64(d).abs() < crate::fft::DIV_GUARD {
                return Err(Error::DegenerateDenominator {
                    op: "complex_real_div",
                    value: to_f64(d).abs(),
                    guard: crate::fft::DIV_GUARD,
                });
            }
        }
        let (c, hw) = (sn[0], sn[1] * sn[2]);
        let nv = self.value(num).data();
        let dv = self.value(denom).data();
        let mut out = vec![S::zero(); 2 * c * hw];
        for ch in 0..c {
            for i in 0..hw {
                let ia = 2 * (ch * hw + i);
                out[ia] = nv[ia] / dv[i];
                out[ia + 1] = nv[ia + 1] / dv[i];
            }
        }
        let v = Tensor::new(sn, out)?;
        let ng = self.needs(num) || self.needs(denom);
        Ok(self.push(Op::ComplexRealDiv { num, denom }, v, ng))
    }

    /// Sum over the channel axis: [C,H,W] -> [H,W].
    pub fn channel_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.shape(a).to_vec();
        require_chw(&sh, "channel_sum")?;
        let (c, hw) = (sh[0], sh[1] * sh[2]);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); hw];
        for ch in 0..c {
            for i in 0..hw {
                out[i] += x[ch * hw + i];
            }
        }
        let v = Tensor::new(vec![sh[1], sh[2]], out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::ChannelSum(a), v, ng))
    }

    /// Multiply every entry by a learnable scalar node of shape [1].
    pub fn scalar_mul(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        require_scalar(self.shape(s), "scalar_mul")?;
        let k = self.value(s).data()[0];
        let v = self.value(t).scale(k);
        let ng = self.needs(t) || self.needs(s);
        Ok(self.push(Op::ScalarMul { t, s }, v, ng))
    }

    /// Add a learnable scalar node of shape [1] to every entry.
    pub fn scalar_add(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        require_scalar(self.shape(s), "scalar_add")?;
        let k = self.value(s).data()[0];
        let v = self.value(t).map(|x| x + k);
        let ng = self.needs(t) || self.needs(s);
        Ok(self.push(Op::ScalarAdd { t, s }, v, ng))
    }

    /// Reduce to a [1]-shaped scalar by summation.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), v, ng)
    }

    /// Weighted logistic loss of a score map against labels in {-1,+1}.
    pub fn logistic_loss(
        &mut self,
        scores: NodeId,
        labels: &Tensor<S>,
        weights: &Tensor<S>,
    ) -> Result<NodeId> {
        if self.shape(scores) != labels.shape() || labels.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "logistic_loss",
                detail: format!(
                    "scores {:?}, labels {:?}, weights {:?}",
                    self.shape(scores),
                    labels.shape(),
                    weights.shape()
                ),
            });
        }
        let o = self.value(scores).data();
        let mut acc = S::zero();
        for i in 0..o.len() {
            let yo = labels.data()[i] * o[i];
            acc += weights.data()[i] * softplus_neg(yo);
        }
        let v = Tensor::scalar(acc);
        let ng = self.needs(scores);
        Ok(self.push(
            Op::LogisticLoss {
                scores,
                labels: labels.clone(),
                weights: weights.clone(),
            },
            v,
            ng,
        ))
    }

    /// Reverse pass from a scalar loss node. Every parameter leaf gets a
    /// gradient tensor; leaves unreachable from the loss keep zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for n in self.nodes.iter_mut() {
            n.grad = if n.needs_grad {
                Some(Tensor::zeros(n.value.shape()))
            } else {
                None
            };
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any parameter; all grads stay zero.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(S::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match &self.nodes[idx].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[S]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            for (a, &b) in g.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
    }

    fn propagate(&mut self, out_idx: usize, op: &Op<S>, g: &Tensor<S>) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(a) {
                    self.accumulate(a, g.data());
                }
                if self.needs(b) {
                    self.accumulate(b, g.data());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let d: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accumulate(a, &d);
                }
                if self.needs(b) {
                    let d: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accumulate(b, &d);
                }
            }
            Op::AddConst(a, _) => {
                if self.needs(a) {
                    self.accumulate(a, g.data());
                }
            }
            Op::MulConst(a, c) => {
                if self.needs(a) {
                    let d: Vec<S> = g.data().iter().map(|&x| x * c).collect();
                    self.accumulate(a, &d);
                }
            }
            Op::Relu(a) => {
                if self.needs(a) {
                    // Subgradient at 0 is 0.
                    let d: Vec<S> = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() })
                        .collect();
                    self.accumulate(a, &d);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(a) {
                    let out = self.nodes[out_idx].value.data();
                    let d: Vec<S> = g
                        .data()
                        .iter()
                        .zip(out)
                        .map(|(&gv, &s)| gv * s * (S::one() - s))
                        .collect();
                    self.accumulate(a, &d);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            } => {
                let d = ConvDims::infer(self.shape(input), self.shape(kernels), stride, pad)?;
                if self.needs(input) {
                    let dx = conv2d_input_grad(g.data(), self.value(kernels).data(), &d);
                    self.accumulate(input, &dx);
                }
                if self.needs(kernels) {
                    let dk = conv2d_kernel_grad(self.value(input).data(), g.data(), &d);
                    self.accumulate(kernels, &dk);
                }
                if let Some(b) = bias {
                    if self.needs(b) {
                        let db = conv2d_bias_grad(g.data(), &d);
                        self.accumulate(b, &db);
                    }
                }
            }
            Op::ConvTranspose2d {
                input,
                kernels,
                bias,
                stride,
            } => {
                let k_shape = self.shape(kernels).to_vec();
                let out_shape = self.nodes[out_idx].value.shape().to_vec();
                let d = ConvDims::infer(
                    &out_shape,
                    &[k_shape[0], k_shape[1], k_shape[2], k_shape[3]],
                    stride,
                    (0, 0),
                )?;
                if self.needs(input) {
                    let dx = conv2d_forward(g.data(), self.value(kernels).data(), None, &d);
                    self.accumulate(input, &dx);
                }
                if self.needs(kernels) {
                    let dk = conv2d_kernel_grad(g.data(), self.value(input).data(), &d);
                    self.accumulate(kernels, &dk);
                }
                if let Some(b) = bias {
                    if self.needs(b) {
                        let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
                        let db: Vec<S> = (0..c_out)
                            .map(|ch| {
                                g.data()[ch * oh * ow..(ch + 1) * oh * ow]
                                    .iter()
                                    .fold(S::zero(), |a, &b| a + b)
                            })
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
            }
            Op::MaxPool2(a) => {
                if self.needs(a) {
                    let sh = self.shape(a).to_vec();
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let x = self.value(a).data().to_vec();
                    let mut dx = vec![S::zero(); c * h * w];
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let base = (ch * h + 2 * i) * w + 2 * j;
                                let idxs = [base, base + 1, base + w, base + w + 1];
                                let mut best = idxs[0];
                                for &cand in &idxs[1..] {
                                    if x[cand] > x[best] {
                                        best = cand;
                                    }
                                }
                                dx[best] += g.data()[(ch * oh + i) * ow + j];
                            }
                        }
                    }
                    self.accumulate(a, &dx);
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.needs(a) {
                    let sh = self.shape(a).to_vec();
                    let (c, hw) = (sh[0], sh[1] * sh[2]);
                    let inv = cast::<S>(1.0 / hw as f64);
                    let mut dx = vec![S::zero(); c * hw];
                    for ch in 0..c {
                        let gv = g.data()[ch] * inv;
                        for i in 0..hw {
                            dx[ch * hw + i] = gv;
                        }
                    }
                    self.accumulate(a, &dx);
                }
            }
            Op::GlobalMaxPool(a) => {
                if self.needs(a) {
                    let sh = self.shape(a).to_vec();
                    let (c, hw) = (sh[0], sh[1] * sh[2]);
                    let x = self.value(a).data().to_vec();
                    let mut dx = vec![S::zero(); c * hw];
                    for ch in 0..c {
                        let mut best = 0;
                        for i in 1..hw {
                            if x[ch * hw + i] > x[ch * hw + best] {
                                best = i;
                            }
                        }
                        dx[ch * hw + best] = g.data()[ch];
                    }
                    self.accumulate(a, &dx);
                }
            }
            Op::Reshape(a) => {
                if self.needs(a) {
                    self.accumulate(a, g.data());
                }
            }
            Op::ScaleBroadcast { feature, weights } => {
                let fs = self.shape(feature).to_vec();
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                let mode = broadcast_mode(self.shape(weights), c, h, w)?;
                let f = self.value(feature).data().to_vec();
                let wd = self.value(weights).data().to_vec();
                if self.needs(feature) {
                    let mut df = vec![S::zero(); c * h * w];
                    match mode {
                        Broadcast::Channel => {
                            for ch in 0..c {
                                for i in 0..h * w {
                                    df[ch * h * w + i] = g.data()[ch * h * w + i] * wd[ch];
                                }
                            }
                        }
                        Broadcast::Spatial => {
                            for ch in 0..c {
                                for i in 0..h * w {
                                    df[ch * h * w + i] = g.data()[ch * h * w + i] * wd[i];
                                }
                            }
                        }
                    }
                    self.accumulate(feature, &df);
                }
                if self.needs(weights) {
                    match mode {
                        Broadcast::Channel => {
                            let mut dw = vec![S::zero(); c];
                            for ch in 0..c {
                                for i in 0..h * w {
                                    dw[ch] += g.data()[ch * h * w + i] * f[ch * h * w + i];
                                }
                            }
                            self.accumulate(weights, &dw);
                        }
                        Broadcast::Spatial => {
                            let mut dw = vec![S::zero(); h * w];
                            for ch in 0..c {
                                for i in 0..h * w {
                                    dw[i] += g.data()[ch * h * w + i] * f[ch * h * w + i];
                                }
                            }
                            self.accumulate(weights, &dw);
                        }
                    }
                }
            }
            Op::CrossCorrelate { template, search } => {
                let ts = self.shape(template).to_vec();
                let ss = self.shape(search).to_vec();
                let d = ConvDims::infer(&ss, &[1, ts[0], ts[1], ts[2]], 1, (0, 0))?;
                if self.needs(template) {
                    let dt = conv2d_kernel_grad(self.value(search).data(), g.data(), &d);
                    self.accumulate(template, &dt);
                }
                if self.needs(search) {
                    let dsd = conv2d_input_grad(g.data(), self.value(template).data(), &d);
                    self.accumulate(search, &dsd);
                }
            }
            Op::Fft2(a) => {
                if self.needs(a) {
                    // d/dx of X = DFT(x): real part of the unnormalized
                    // inverse transform of the packed cotangent.
                    let sh = self.shape(a).to_vec();
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let mut data = g.data().to_vec();
                    dft2_batched(&mut data, c, h, w, true);
                    let n = cast::<S>((h * w) as f64);
                    let dx: Vec<S> = (0..c * h * w).map(|i| data[2 * i] * n).collect();
                    self.accumulate(a, &dx);
                }
            }
            Op::Ifft2Real(a) => {
                if self.needs(a) {
                    // d/dC of y = Re(IDFT(C)): (1/N) * DFT of the real cotangent.
                    let sh = self.shape(a).to_vec();
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let mut data = vec![S::zero(); 2 * c * h * w];
                    for (i, &gv) in g.data().iter().enumerate() {
                        data[2 * i] = gv;
                    }
                    dft2_batched(&mut data, c, h, w, false);
                    let inv_n = cast::<S>(1.0 / (h * w) as f64);
                    for v in data.iter_mut() {
                        *v = *v * inv_n;
                    }
                    self.accumulate(a, &data);
                }
            }
            Op::ComplexMul { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let broadcast = sb.len() == 3;
                let (c, hw) = (sa[0], sa[1] * sa[2]);
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                if self.needs(a) {
                    // da = g * conj(b)
                    let mut da = vec![S::zero(); 2 * c * hw];
                    for ch in 0..c {
                        for i in 0..hw {
                            let ia = 2 * (ch * hw + i);
                            let ib = if broadcast { 2 * i } else { ia };
                            let (gr, gi) = (g.data()[ia], g.data()[ia + 1]);
                            let (br, bi) = (bv[ib], bv[ib + 1]);
                            da[ia] = gr * br + gi * bi;
                            da[ia + 1] = gi * br - gr * bi;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    // db = g * conj(a), summed over channels when broadcast.
                    let blen = if broadcast { 2 * hw } else { 2 * c * hw };
                    let mut db = vec![S::zero(); blen];
                    for ch in 0..c {
                        for i in 0..hw {
                            let ia = 2 * (ch * hw + i);
                            let ib = if broadcast { 2 * i } else { ia };
                            let (gr, gi) = (g.data()[ia], g.data()[ia + 1]);
                            let (ar, ai) = (av[ia], av[ia + 1]);
                            db[ib] += gr * ar + gi * ai;
                            db[ib + 1] += gi * ar - gr * ai;
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::ComplexAbsSq(a) => {
                if self.needs(a) {
                    let av = self.value(a).data().to_vec();
                    let mut da = vec![S::zero(); av.len()];
                    let two = cast::<S>(2.0);
                    for i in 0..av.len() / 2 {
                        let gv = g.data()[i];
                        da[2 * i] = two * gv * av[2 * i];
                        da[2 * i + 1] = two * gv * av[2 * i + 1];
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::ComplexRealDiv { num, denom } => {
                let sn = self.shape(num).to_vec();
                let (c, hw) = (sn[0], sn[1] * sn[2]);
                let dv = self.value(denom).data().to_vec();
                if self.needs(num) {
                    let mut dn = vec![S::zero(); 2 * c * hw];
                    for ch in 0..c {
                        for i in 0..hw {
                            let ia = 2 * (ch * hw + i);
                            dn[ia] = g.data()[ia] / dv[i];
                            dn[ia + 1] = g.data()[ia + 1] / dv[i];
                        }
                    }
                    self.accumulate(num, &dn);
                }
                if self.needs(denom) {
                    let nv = self.value(num).data().to_vec();
                    let mut dd = vec![S::zero(); hw];
                    for ch in 0..c {
                        for i in 0..hw {
                            let ia = 2 * (ch * hw + i);
                            let d2 = dv[i] * dv[i];
                            dd[i] -= (g.data()[ia] * nv[ia] + g.data()[ia + 1] * nv[ia + 1]) / d2;
                        }
                    }
                    self.accumulate(denom, &dd);
                }
            }
            Op::ChannelSum(a) => {
                if self.needs(a) {
                    let sh = self.shape(a).to_vec();
                    let (c, hw) = (sh[0], sh[1] * sh[2]);
                    let mut dx = vec![S::zero(); c * hw];
                    for ch in 0..c {
                        dx[ch * hw..(ch + 1) * hw].copy_from_slice(g.data());
                    }
                    self.accumulate(a, &dx);
                }
            }
            Op::ScalarMul { t, s } => {
                let k = self.value(s).data()[0];
                if self.needs(t) {
                    let d: Vec<S> = g.data().iter().map(|&x| x * k).collect();
                    self.accumulate(t, &d);
                }
                if self.needs(s) {
                    let acc = g
                        .data()
                        .iter()
                        .zip(self.value(t).data())
                        .fold(S::zero(), |a, (&gv, &tv)| a + gv * tv);
                    self.accumulate(s, &[acc]);
                }
            }
            Op::ScalarAdd { t, s } => {
                if self.needs(t) {
                    self.accumulate(t, g.data());
                }
                if self.needs(s) {
                    let acc = g.data().iter().fold(S::zero(), |a, &b| a + b);
                    self.accumulate(s, &[acc]);
                }
            }
            Op::Sum(a) => {
                if self.needs(a) {
                    let gv = g.data()[0];
                    let d = vec![gv; self.value(a).numel()];
                    self.accumulate(a, &d);
                }
            }
            Op::LogisticLoss {
                scores,
                ref labels,
                ref weights,
            } => {
                if self.needs(scores) {
                    let gv = g.data()[0];
                    let o = self.value(scores).data();
                    let mut d = vec![S::zero(); o.len()];
                    for i in 0..o.len() {
                        let y = labels.data()[i];
                        // d/do w*softplus(-y*o) = -w*y*sigmoid(-y*o)
                        d[i] = -gv * weights.data()[i] * y * sigmoid_scalar(-(y * o[i]));
                    }
                    self.accumulate(scores, &d);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Channel,
    Spatial,
}

fn broadcast_mode(ws: &[usize], c: usize, h: usize, w: usize) -> Result<Broadcast> {
    if ws == [c] {
        Ok(Broadcast::Channel)
    } else if ws == [1, h, w] || ws == [h, w] {
        Ok(Broadcast::Spatial)
    } else {
        Err(Error::ShapeMismatch {
            op: "scale_broadcast",
            detail: format!(
                "weights {:?} fit neither [{}] nor [1,{},{}]",
                ws, c, h, w
            ),
        })
    }
}

fn require_chw(shape: &[usize], op: &'static str) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected [C,H,W], got {:?}", shape),
        });
    }
    Ok(())
}

fn require_packed(shape: &[usize], op: &'static str) -> Result<()> {
    if shape.len() != 4 || shape[3] != 2 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected [C,H,W,2], got {:?}", shape),
        });
    }
    Ok(())
}

fn require_scalar(shape: &[usize], op: &'static str) -> Result<()> {
    if shape != [1] {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected [1], got {:?}", shape),
        });
    }
    Ok(())
}

#[inline]
fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    // Branch on sign to avoid exp overflow either way.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// ln(1 + exp(-x)) without overflow: max(-x, 0) + ln(1 + exp(-|x|)).
#[inline]
fn softplus_neg<S: Scalar>(x: S) -> S {
    (-x).max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn sigmoid_values_and_range() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[0.0, -30.0, 30.0]).unwrap());
        let s = g.sigmoid(x);
        let v = g.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[2] < 1.0, "sigmoid must stay in (0,1)");
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[-3.0, 3.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_scaled_loss_gives_zero_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[4], &[1.0, -2.0, 3.0, 4.0]).unwrap());
        let s = g.sum(x);
        let loss = g.mul_const(s, 0.0);
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let used = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::scalar(5.0));
        let loss = g.sum(used);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0]);
        assert_eq!(g.grad(used).unwrap().data(), &[1.0]);
    }

    #[test]
    fn global_pools() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap());
        let a = g.global_avg_pool(x).unwrap();
        let m = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(a).data(), &[4.0]);
        assert_eq!(g.value(m).data(), &[7.0]);
    }

    #[test]
    fn pools_on_1x1_and_constant_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 1, 1], &[2.5, -1.0]).unwrap());
        let a = g.global_avg_pool(x).unwrap();
        let m = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(a).data(), &[2.5, -1.0]);
        assert_eq!(g.value(m).data(), &[2.5, -1.0]);
        let c = g.constant(Tensor::filled(&[1, 3, 4], 0.7));
        let ac = g.global_avg_pool(c).unwrap();
        let mc = g.global_max_pool(c).unwrap();
        assert!((g.value(ac).data()[0] - 0.7).abs() < 1e-15);
        assert_eq!(g.value(mc).data()[0], 0.7);
    }

    #[test]
    fn scale_broadcast_modes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 1, 1], &[4.0, 3.0]).unwrap());
        let w = g.constant(Tensor::from_f64(&[2], &[0.5, 2.0]).unwrap());
        let y = g.scale_broadcast(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 6.0]);

        let ones = g.constant(Tensor::filled(&[2], 1.0));
        let id = g.scale_broadcast(x, ones).unwrap();
        assert_eq!(g.value(id).data(), g.value(x).data());

        let zeros = g.constant(Tensor::zeros(&[1, 1, 1]));
        let z = g.scale_broadcast(x, zeros).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);

        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.scale_broadcast(x, bad).is_err());
    }

    #[test]
    fn cross_correlate_small_cases() {
        let mut g = Graph::<f64>::new();
        // Template equal to search: single cell holding squared Frobenius norm.
        let t = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.cross_correlate(t, t).unwrap();
        assert_eq!(g.shape(m), &[1, 1]);
        assert_eq!(g.value(m).data(), &[30.0]);

        // Diagonal template over 2x2 search: 1*1 + 1*4 = 5.
        let tpl = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let m2 = g.cross_correlate(tpl, s).unwrap();
        assert_eq!(g.value(m2).data(), &[5.0]);

        // All-ones 1x1x1 template: map equals channel-summed search.
        let one = g.constant(Tensor::filled(&[2, 1, 1], 1.0));
        let srch = g.constant(Tensor::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40.]).unwrap());
        let m3 = g.cross_correlate(one, srch).unwrap();
        assert_eq!(g.value(m3).data(), &[11.0, 22.0, 33.0, 44.0]);

        // Template larger than search is an error.
        let big = g.constant(Tensor::zeros(&[1, 3, 3]));
        let small = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(g.cross_correlate(big, small).is_err());
    }

    #[test]
    fn logistic_loss_values() {
        let mut g = Graph::<f64>::new();
        // All-positive labels at o = 0: loss is ln 2.
        let o = g.constant(Tensor::zeros(&[2, 2]));
        let y = Tensor::filled(&[2, 2], 1.0);
        let w = Tensor::filled(&[2, 2], 0.25);
        let l = g.logistic_loss(o, &y, &w).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // Strongly correct scores: loss tends to 0.
        let o2 = g.constant(Tensor::filled(&[2, 2], 50.0));
        let l2 = g.logistic_loss(o2, &y, &w).unwrap();
        assert!(g.value(l2).data()[0] < 1e-20);

        // Strongly wrong score stays finite and near |o|.
        let o3 = g.constant(Tensor::from_f64(&[1], &[-40.0]).unwrap());
        let y3 = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let w3 = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let l3 = g.logistic_loss(o3, &y3, &w3).unwrap();
        let v = g.value(l3).data()[0];
        assert!(v.is_finite() && (v - 40.0).abs() < 1e-12);
    }

    #[test]
    fn finiteness_after_random_chain() {
        let mut rng = SplitMix64::new(4);
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::randn(&[3, 8, 8], 1.0, &mut rng));
        let k = g.param(Tensor::randn(&[2, 3, 3, 3], 0.5, &mut rng));
        let b = g.param(Tensor::randn(&[2], 0.5, &mut rng));
        let c = g.conv2d(x, k, Some(b), 1, (1, 1)).unwrap();
        let r = g.relu(c);
        let f = g.fft2(r).unwrap();
        let aa = g.complex_abs_sq(f).unwrap();
        let cs = g.channel_sum(aa).unwrap();
        let d = g.add_const(cs, 0.01);
        let q = g.complex_real_div(f, d).unwrap();
        let back = g.ifft2_real(q).unwrap();
        let s = g.sigmoid(back);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert!(g.value(loss).all_finite());
        assert!(g.grad(x).unwrap().all_finite());
        assert!(g.grad(k).unwrap().all_finite());
    }
}
