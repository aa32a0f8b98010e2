//! Wengert tape: operations are recorded in forward order and replayed in
//! reverse to propagate gradients. One tape covers one forward/backward pass;
//! `backward` consumes it.

// index-style loops are the house style in these kernels: most bodies
// address several arrays at related offsets
#![allow(clippy::needless_range_loop)]

use super::ops::{self, BnSaved, Reduction};
use super::{Scalar, Shape, Tensor, TensorError};
use crate::params::{ParamId, ParamStore};

/// Reference to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Batch-norm mode for a single application.
#[derive(Clone, Debug)]
pub enum BnMode<T> {
    /// Normalize with batch statistics; the caller receives them to update
    /// its running buffers.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { mean: Vec<T>, var: Vec<T> },
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, dilation: usize },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    Relu { input: Var },
    Sigmoid { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { inputs: Vec<Var> },
    ChannelScale { x: Var, v: Var },
    GlobalAvgPool { input: Var },
    Linear { x: Var, w: Var, b: Var },
    Sum { input: Var },
    ScaleConst { input: Var, factor: T },
    BceLoss { probs: Var, labels: Tensor<T>, reduction: Reduction },
    IouLoss { probs: Var, labels: Tensor<T>, hw_scaling: bool },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward pass over rank-4 tensors.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bindings: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (an input under gradient check, for example).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a parameter; `Gradients::accumulate_into` adds its
    /// gradient to `Parameter.grad` after backward.
    pub fn bind_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.param(id).value.clone(), Op::Leaf, true);
        self.bindings.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // -- primitives ---------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var, TensorError> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            dilation,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_requires(&deps);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, dilation }, rg))
    }

    pub fn maxpool2(&mut self, input: Var, ceil_mode: bool) -> Result<Var, TensorError> {
        let (out, argmax) = ops::maxpool2(self.value(input), ceil_mode)?;
        let rg = self.any_requires(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample_bilinear(
        &mut self,
        input: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        let out = ops::upsample_bilinear(self.value(input), out_h, out_w)?;
        let rg = self.any_requires(&[input]);
        Ok(self.push(out, Op::Upsample { input }, rg))
    }

    /// Batch normalization. In train mode the returned stats are the batch
    /// statistics for the caller's running-buffer update.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<T>,
        eps: T,
    ) -> Result<(Var, Option<ops::BnBatchStats<T>>), TensorError> {
        let train = matches!(mode, BnMode::Train);
        ops::batchnorm_check(self.value(input), self.value(gamma), self.value(beta), train)?;
        let (stats, report) = match mode {
            BnMode::Train => {
                let s = ops::batch_stats(self.value(input));
                (s.clone(), Some(s))
            }
            BnMode::Eval { mean, var } => (ops::BnBatchStats { mean, var }, None),
        };
        let (out, saved) = ops::batchnorm_apply(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            &stats.mean,
            &stats.var,
            eps,
            train,
        );
        let rg = self.any_requires(&[input, gamma, beta]);
        let v = self.push(out, Op::BatchNorm { input, gamma, beta, saved }, rg);
        Ok((v, report))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.any_requires(&[input]);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.any_requires(&[input]);
        self.push(out, Op::Sigmoid { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{sa} vs {sb}"),
            });
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{sa} vs {sb}"),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(sa, data);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let first = self.shape(inputs[0]);
        let mut c_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{s} vs {first}"),
                });
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let plane = first.h * first.w;
        let mut out = Tensor::zeros(out_shape);
        {
            let od = out.data_mut();
            for b in 0..first.n {
                let mut c_off = 0;
                for &v in inputs {
                    let s = self.nodes[v.0].value.shape();
                    let src = &self.nodes[v.0].value.data()[b * s.c * plane..(b + 1) * s.c * plane];
                    let dst_base = (b * c_total + c_off) * plane;
                    od[dst_base..dst_base + s.c * plane].copy_from_slice(src);
                    c_off += s.c;
                }
            }
        }
        let rg = self.any_requires(inputs);
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec() }, rg))
    }

    /// Multiply each channel plane of `x` by the matching entry of `v`,
    /// where `v` has shape `(n, c, 1, 1)` or `(1, c, 1, 1)` (batch broadcast).
    pub fn channel_scale(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if vs.c != xs.c || vs.h != 1 || vs.w != 1 || (vs.n != xs.n && vs.n != 1) {
            return Err(TensorError::ShapeMismatch {
                op: "channel_scale",
                detail: format!("x {xs} vs v {vs}"),
            });
        }
        let plane = xs.h * xs.w;
        let mut out = self.value(x).clone();
        {
            let od = out.data_mut();
            let vd = self.nodes[v.0].value.data();
            for b in 0..xs.n {
                let vb = if vs.n == 1 { 0 } else { b };
                for c in 0..xs.c {
                    let s = vd[vb * xs.c + c];
                    let base = (b * xs.c + c) * plane;
                    od[base..base + plane].iter_mut().for_each(|o| *o *= s);
                }
            }
        }
        let rg = self.any_requires(&[x, v]);
        Ok(self.push(out, Op::ChannelScale { x, v }, rg))
    }

    /// Spatial mean per (n, c): output shape `(n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.shape(input);
        if s.h == 0 || s.w == 0 {
            return Err(TensorError::EmptyInput { op: "global_avg_pool", h: s.h, w: s.w });
        }
        let plane = s.h * s.w;
        let m = T::from_f64(plane as f64);
        let xd = self.value(input).data();
        let data = (0..s.n * s.c)
            .map(|bc| {
                let mut acc = T::zero();
                for &v in &xd[bc * plane..(bc + 1) * plane] {
                    acc += v;
                }
                acc / m
            })
            .collect();
        let out = Tensor::from_vec(Shape::vector(s.n, s.c), data);
        let rg = self.any_requires(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    /// Fully connected layer on `(n, c_in, 1, 1)` vectors; weight is
    /// `(c_out, c_in, 1, 1)`, bias `(1, c_out, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.h != 1 || xs.w != 1 || ws.c != xs.c || ws.h != 1 || ws.w != 1
            || bs != Shape::vector(1, ws.n)
        {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("x {xs}, w {ws}, b {bs}"),
            });
        }
        let (c_in, c_out) = (xs.c, ws.n);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut data = vec![T::zero(); xs.n * c_out];
        for n in 0..xs.n {
            for o in 0..c_out {
                let mut acc = bd[o];
                for i in 0..c_in {
                    acc += wd[o * c_in + i] * xd[n * c_in + i];
                }
                data[n * c_out + o] = acc;
            }
        }
        let out = Tensor::from_vec(Shape::vector(xs.n, c_out), data);
        let rg = self.any_requires(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(input).data() {
            acc += v;
        }
        let rg = self.any_requires(&[input]);
        self.push(Tensor::scalar(acc), Op::Sum { input }, rg)
    }

    pub fn scale_const(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.any_requires(&[input]);
        self.push(out, Op::ScaleConst { input, factor }, rg)
    }

    /// Binary cross-entropy of probabilities against a constant {0,1} label
    /// map, as a scalar node.
    pub fn bce_loss(
        &mut self,
        probs: Var,
        labels: Tensor<T>,
        reduction: Reduction,
    ) -> Result<Var, TensorError> {
        if self.shape(probs) != labels.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                detail: format!("probs {} vs labels {}", self.shape(probs), labels.shape()),
            });
        }
        let v = ops::bce_value(self.value(probs), &labels, reduction);
        let rg = self.any_requires(&[probs]);
        Ok(self.push(Tensor::scalar(v), Op::BceLoss { probs, labels, reduction }, rg))
    }

    /// Soft-IoU loss of probabilities against a constant {0,1} label map,
    /// as a scalar node.
    pub fn iou_loss(
        &mut self,
        probs: Var,
        labels: Tensor<T>,
        hw_scaling: bool,
    ) -> Result<Var, TensorError> {
        if self.shape(probs) != labels.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "iou_loss",
                detail: format!("probs {} vs labels {}", self.shape(probs), labels.shape()),
            });
        }
        let v = ops::iou_value(self.value(probs), &labels, hw_scaling);
        let rg = self.any_requires(&[probs]);
        Ok(self.push(Tensor::scalar(v), Op::IouLoss { probs, labels, hw_scaling }, rg))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; each node is
    /// visited exactly once. Gradients of all differentiable leaves are
    /// returned; bound parameters can then be updated via
    /// [`Gradients::accumulate_into`].
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::DetachedLoss);
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DetachedLoss);
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        let nodes = &self.nodes;
        let requires = |v: Var| nodes[v.0].requires_grad;
        for id in (0..nodes.len()).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            let scatter = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, g: Tensor<T>| {
                if !requires(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(gout); // keep leaf gradients for the caller
                    continue;
                }
                Op::Conv2d { input, weight, bias, dilation } => {
                    let (gi, gw, gb) = ops::conv2d_backward(
                        &nodes[input.0].value,
                        &nodes[weight.0].value,
                        bias.is_some(),
                        *dilation,
                        &gout,
                    );
                    scatter(&mut grads, *input, gi);
                    scatter(&mut grads, *weight, gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        scatter(&mut grads, *b, gb);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let gi = ops::maxpool2_backward(nodes[input.0].value.shape(), argmax, &gout);
                    scatter(&mut grads, *input, gi);
                }
                Op::Upsample { input } => {
                    let gi = ops::upsample_bilinear_backward(nodes[input.0].value.shape(), &gout);
                    scatter(&mut grads, *input, gi);
                }
                Op::BatchNorm { input, gamma, beta, saved } => {
                    let (gi, gg, gb) = ops::batchnorm_backward(
                        &nodes[input.0].value,
                        &nodes[gamma.0].value,
                        saved,
                        &gout,
                    );
                    scatter(&mut grads, *input, gi);
                    scatter(&mut grads, *gamma, gg);
                    scatter(&mut grads, *beta, gb);
                }
                Op::Relu { input } => {
                    let x = nodes[input.0].value.data();
                    let mut gi = gout;
                    for (g, &v) in gi.data_mut().iter_mut().zip(x.iter()) {
                        if v <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    scatter(&mut grads, *input, gi);
                }
                Op::Sigmoid { input } => {
                    let y = nodes[id].value.data();
                    let mut gi = gout;
                    for (g, &s) in gi.data_mut().iter_mut().zip(y.iter()) {
                        *g = *g * s * (T::one() - s);
                    }
                    scatter(&mut grads, *input, gi);
                }
                Op::Add { a, b } => {
                    scatter(&mut grads, *a, gout.clone());
                    scatter(&mut grads, *b, gout);
                }
                Op::Mul { a, b } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let mut ga = gout.clone();
                    for (g, &v) in ga.data_mut().iter_mut().zip(bv.iter()) {
                        *g *= v;
                    }
                    let mut gb = gout;
                    for (g, &v) in gb.data_mut().iter_mut().zip(av.iter()) {
                        *g *= v;
                    }
                    scatter(&mut grads, *a, ga);
                    scatter(&mut grads, *b, gb);
                }
                Op::Concat { inputs } => {
                    let os = nodes[id].value.shape();
                    let plane = os.h * os.w;
                    let mut c_off = 0;
                    for &v in inputs {
                        let s = nodes[v.0].value.shape();
                        let mut gi = Tensor::zeros(s);
                        for b in 0..os.n {
                            let src = ((b * os.c + c_off) * plane, s.c * plane);
                            gi.data_mut()[b * s.c * plane..(b + 1) * s.c * plane]
                                .copy_from_slice(&gout.data()[src.0..src.0 + src.1]);
                        }
                        c_off += s.c;
                        scatter(&mut grads, v, gi);
                    }
                }
                Op::ChannelScale { x, v } => {
                    let xs = nodes[x.0].value.shape();
                    let vs = nodes[v.0].value.shape();
                    let plane = xs.h * xs.w;
                    let vd = nodes[v.0].value.data();
                    let xd = nodes[x.0].value.data();
                    let mut gx = Tensor::zeros(xs);
                    let mut gv = Tensor::zeros(vs);
                    for b in 0..xs.n {
                        let vb = if vs.n == 1 { 0 } else { b };
                        for c in 0..xs.c {
                            let s = vd[vb * xs.c + c];
                            let base = (b * xs.c + c) * plane;
                            let mut acc = T::zero();
                            for i in base..base + plane {
                                gx.data_mut()[i] = gout.data()[i] * s;
                                acc += gout.data()[i] * xd[i];
                            }
                            gv.data_mut()[vb * xs.c + c] += acc;
                        }
                    }
                    scatter(&mut grads, *x, gx);
                    scatter(&mut grads, *v, gv);
                }
                Op::GlobalAvgPool { input } => {
                    let s = nodes[input.0].value.shape();
                    let plane = s.h * s.w;
                    let m = T::from_f64(plane as f64);
                    let mut gi = Tensor::zeros(s);
                    for bc in 0..s.n * s.c {
                        let g = gout.data()[bc] / m;
                        gi.data_mut()[bc * plane..(bc + 1) * plane]
                            .iter_mut()
                            .for_each(|v| *v = g);
                    }
                    scatter(&mut grads, *input, gi);
                }
                Op::Linear { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let c_in = xs.c;
                    let c_out = nodes[w.0].value.shape().n;
                    let xd = nodes[x.0].value.data();
                    let wd = nodes[w.0].value.data();
                    let gd = gout.data();
                    let mut gx = Tensor::zeros(xs);
                    let mut gw = Tensor::zeros(nodes[w.0].value.shape());
                    let mut gb = Tensor::zeros(nodes[b.0].value.shape());
                    for n in 0..xs.n {
                        for o in 0..c_out {
                            let g = gd[n * c_out + o];
                            gb.data_mut()[o] += g;
                            for i in 0..c_in {
                                gx.data_mut()[n * c_in + i] += g * wd[o * c_in + i];
                                gw.data_mut()[o * c_in + i] += g * xd[n * c_in + i];
                            }
                        }
                    }
                    scatter(&mut grads, *x, gx);
                    scatter(&mut grads, *w, gw);
                    scatter(&mut grads, *b, gb);
                }
                Op::Sum { input } => {
                    let g = gout.item();
                    let gi = Tensor::full(nodes[input.0].value.shape(), g);
                    scatter(&mut grads, *input, gi);
                }
                Op::ScaleConst { input, factor } => {
                    let f = *factor;
                    let mut gi = gout;
                    gi.data_mut().iter_mut().for_each(|g| *g *= f);
                    scatter(&mut grads, *input, gi);
                }
                Op::BceLoss { probs, labels, reduction } => {
                    let gi = ops::bce_grad(&nodes[probs.0].value, labels, *reduction, gout.item());
                    scatter(&mut grads, *probs, gi);
                }
                Op::IouLoss { probs, labels, hw_scaling } => {
                    let gi = ops::iou_grad(&nodes[probs.0].value, labels, *hw_scaling, gout.item());
                    scatter(&mut grads, *probs, gi);
                }
            }
        }

        Ok(Gradients { grads, bindings: self.bindings })
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add each bound parameter's gradient into `Parameter.grad`. Gradients
    /// accumulate across calls; the optimizer zeroes them between steps.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(var, pid) in &self.bindings {
            if let Some(g) = &self.grads[var.0] {
                store.param_mut(pid).grad.add_assign(g);
            }
        }
    }
}
