//! Tape-based reverse-mode differentiation over the layer kernels.
//!
//! A [`Graph`] records one forward computation (typically one mini-batch)
//! and propagates gradients back through it in reverse insertion order.
//! Spatial activations are held channels-last (`[H, W, C]`); parameters keep
//! their canonical layouts and are bound once per graph.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::ParamSet;
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    /// `input` is `[H, W, C_in]`, `weight` canonical `[C_out, C_in, 3, 3]`.
    Conv3x3 { input: NodeId, weight: NodeId, bias: NodeId, h: usize, w: usize },
    MaxPool2x2 { input: NodeId, idx: Vec<u8>, oh: usize, ow: usize, c: usize },
    Relu { input: NodeId },
    Fc { input: NodeId, weight: NodeId, bias: NodeId },
    Dropout { input: NodeId, mask: Option<Vec<bool>>, keep: T },
    Sub { a: NodeId, b: NodeId },
    Concat { parts: Vec<NodeId> },
    /// `max(0, x) + eps`, elementwise.
    RectifyStabilize { input: NodeId },
    /// Normalized weighted average of `y` by `alpha` (both 1-D, same length).
    WeightedPool { y: NodeId, alpha: NodeId, p: Vec<T>, q_hat: T, denom: T },
    MeanAll { input: NodeId },
    /// Elementwise `|x - target|`.
    AbsError { input: NodeId, target: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    mode: Mode,
    backward_done: bool,
    /// Param index in the bound set, per leaf node.
    param_of: HashMap<usize, usize>,
    packed_conv: HashMap<usize, kernels::PackedConvWeight<T>>,
    /// Conv weight gradients accumulated in packed `[ky, kx, ci, co]` layout.
    packed_conv_grad: HashMap<usize, Vec<T>>,
    pad_scratch: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            backward_done: false,
            param_of: HashMap::new(),
            packed_conv: HashMap::new(),
            packed_conv_grad: HashMap::new(),
            pad_scratch: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (e.g. an input patch).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient (parameters, or probed inputs in
    /// gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds every parameter of `set` as a gradient-accumulating leaf.
    /// Returns node ids in the set's iteration order.
    pub fn bind_params(&mut self, set: &ParamSet<T>) -> Vec<NodeId> {
        let mut ids = Vec::with_capacity(set.len());
        for (idx, (_, tensor)) in set.iter().enumerate() {
            let id = self.variable(tensor.clone());
            self.param_of.insert(id.0, idx);
            ids.push(id);
        }
        ids
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    fn child_needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn conv3x3(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (h, w, c_in) = match *self.nodes[input.0].value.shape() {
            [h, w, c] => (h, w, c),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv input must be [H, W, C], got {:?}",
                    self.nodes[input.0].value.shape()
                )))
            }
        };
        let (c_out, wc_in) = match *self.nodes[weight.0].value.shape() {
            [co, ci, 3, 3] => (co, ci),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv weight must be [C_out, C_in, 3, 3], got {:?}",
                    self.nodes[weight.0].value.shape()
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::Dimension(format!(
                "conv input-channel axis mismatch: input has {c_in}, weight expects {wc_in}"
            )));
        }
        if !self.packed_conv.contains_key(&weight.0) {
            let packed =
                kernels::pack_conv_weight(self.nodes[weight.0].value.data(), c_out, c_in);
            self.packed_conv.insert(weight.0, packed);
        }
        let mut pad = std::mem::take(&mut self.pad_scratch);
        kernels::pad_hwc(self.nodes[input.0].value.data(), h, w, c_in, &mut pad);
        let mut out = vec![T::zero(); h * w * c_out];
        kernels::conv3x3_fwd_hwc(
            &pad,
            h,
            w,
            c_in,
            &self.packed_conv[&weight.0].fwd,
            self.nodes[bias.0].value.data(),
            c_out,
            &mut out,
        );
        self.pad_scratch = pad;
        let needs = self.child_needs_grad(input)
            || self.child_needs_grad(weight)
            || self.child_needs_grad(bias);
        Ok(self.push(
            Tensor::new(vec![h, w, c_out], out)?,
            Op::Conv3x3 { input, weight, bias, h, w },
            needs,
        ))
    }

    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let (h, w, c) = match *self.nodes[input.0].value.shape() {
            [h, w, c] => (h, w, c),
            _ => {
                return Err(Error::Dimension(format!(
                    "maxpool input must be [H, W, C], got {:?}",
                    self.nodes[input.0].value.shape()
                )))
            }
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool input spatial size must be even, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); oh * ow * c];
        let mut idx = vec![0u8; oh * ow * c];
        kernels::maxpool2x2_fwd_hwc(self.nodes[input.0].value.data(), h, w, c, &mut out, &mut idx);
        let needs = self.child_needs_grad(input);
        Ok(self.push(
            Tensor::new(vec![oh, ow, c], out)?,
            Op::MaxPool2x2 { input, idx, oh, ow, c },
            needs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0]
            .value
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.child_needs_grad(input);
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn fc(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let d_in = self.nodes[input.0].value.len();
        let (d_out, wd_in) = match *self.nodes[weight.0].value.shape() {
            [dout, din] => (dout, din),
            _ => {
                return Err(Error::Dimension(format!(
                    "fc weight must be [D_out, D_in], got {:?}",
                    self.nodes[weight.0].value.shape()
                )))
            }
        };
        if wd_in != d_in {
            return Err(Error::Dimension(format!(
                "fc input axis mismatch: input has {d_in}, weight expects {wd_in}"
            )));
        }
        let mut out = vec![T::zero(); d_out];
        kernels::fc_fwd(
            self.nodes[input.0].value.data(),
            self.nodes[weight.0].value.data(),
            self.nodes[bias.0].value.data(),
            &mut out,
        );
        let needs = self.child_needs_grad(input)
            || self.child_needs_grad(weight)
            || self.child_needs_grad(bias);
        Ok(self.push(Tensor::new(vec![d_out], out)?, Op::Fc { input, weight, bias }, needs))
    }

    /// Classic dropout: train mode zeroes units with probability `1 - keep`
    /// (no rescaling); eval mode multiplies deterministically by `keep`.
    pub fn dropout(&mut self, input: NodeId, keep: f64, rng: &mut ChaCha8Rng) -> NodeId {
        let keep_t = T::from_f64(keep);
        let needs = self.child_needs_grad(input);
        match self.mode {
            Mode::Eval => {
                let value = self.nodes[input.0].value.map(|v| v * keep_t);
                self.push(value, Op::Dropout { input, mask: None, keep: keep_t }, needs)
            }
            Mode::Train => {
                let src = &self.nodes[input.0].value;
                let mask: Vec<bool> = (0..src.len()).map(|_| rng.gen::<f64>() < keep).collect();
                let data = src
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &m)| if m { v } else { T::zero() })
                    .collect();
                let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
                self.push(value, Op::Dropout { input, mask: Some(mask), keep: keep_t }, needs)
            }
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::Dimension(format!(
                "sub operands differ in shape: {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let data = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let needs = self.child_needs_grad(a) || self.child_needs_grad(b);
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    /// Concatenates 1-D nodes in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let n = data.len();
        let needs = parts.iter().any(|&p| self.child_needs_grad(p));
        self.push(
            Tensor::new(vec![n], data).expect("1-D"),
            Op::Concat { parts: parts.to_vec() },
            needs,
        )
    }

    /// `max(0, x) + eps`, the stabilized patch weight.
    pub fn rectify_stabilize(&mut self, input: NodeId, eps: f64) -> NodeId {
        let e = T::from_f64(eps);
        let value = self.nodes[input.0]
            .value
            .map(|v| if v > T::zero() { v + e } else { e });
        let needs = self.child_needs_grad(input);
        self.push(value, Op::RectifyStabilize { input }, needs)
    }

    /// Normalized weighted average: `sum(alpha_i * y_i) / sum(alpha_i)`.
    /// All weights must be strictly positive.
    pub fn weighted_pool(&mut self, y: NodeId, alpha: NodeId) -> Result<NodeId> {
        let yv = self.nodes[y.0].value.data();
        let av = self.nodes[alpha.0].value.data();
        if yv.len() != av.len() || yv.is_empty() {
            return Err(Error::Dimension(format!(
                "weighted pool needs equal non-empty lengths, got {} and {}",
                yv.len(),
                av.len()
            )));
        }
        if av.iter().any(|&a| a <= T::zero()) {
            return Err(Error::Contract(
                "weighted pool requires strictly positive weights".into(),
            ));
        }
        let denom: T = av.iter().copied().sum();
        let p: Vec<T> = av.iter().map(|&a| a / denom).collect();
        let q_hat: T = p.iter().zip(yv).map(|(&pi, &yi)| pi * yi).sum();
        let needs = self.child_needs_grad(y) || self.child_needs_grad(alpha);
        Ok(self.push(
            Tensor::scalar(q_hat),
            Op::WeightedPool { y, alpha, p, q_hat, denom },
            needs,
        ))
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let data = self.nodes[input.0].value.data();
        let n = T::from_f64(data.len() as f64);
        let mean = data.iter().copied().sum::<T>() / n;
        let needs = self.child_needs_grad(input);
        self.push(Tensor::scalar(mean), Op::MeanAll { input }, needs)
    }

    /// Elementwise `|x - target|`.
    pub fn abs_error(&mut self, input: NodeId, target: f64) -> NodeId {
        let t = T::from_f64(target);
        let value = self.nodes[input.0].value.map(|v| (v - t).abs());
        let needs = self.child_needs_grad(input);
        self.push(value, Op::AbsError { input, target: t }, needs)
    }

    fn ensure_grad(&mut self, id: NodeId) {
        if self.grads[id.0].is_none() {
            let n = self.nodes[id.0].value.len();
            self.grads[id.0] = Some(vec![T::zero(); n]);
        }
    }

    /// Reverse-mode accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                self.grads[id] = None;
                continue;
            }
            let Some(go) = self.grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    // Keep leaf gradients for export/inspection.
                    self.grads[id] = Some(go);
                }
                Op::Conv3x3 { input, weight, bias, h, w } => {
                    let (input, weight, bias, h, w) = (*input, *weight, *bias, *h, *w);
                    let c_out = self.nodes[id].value.shape()[2];
                    let c_in = self.nodes[input.0].value.shape()[2];
                    if self.child_needs_grad(bias) {
                        self.ensure_grad(bias);
                        let gb = self.grads[bias.0].as_mut().unwrap();
                        for pos in 0..h * w {
                            kernels::add_assign(gb, &go[pos * c_out..][..c_out]);
                        }
                    }
                    if self.child_needs_grad(weight) {
                        let mut pad = std::mem::take(&mut self.pad_scratch);
                        kernels::pad_hwc(self.nodes[input.0].value.data(), h, w, c_in, &mut pad);
                        let gw = self
                            .packed_conv_grad
                            .entry(weight.0)
                            .or_insert_with(|| vec![T::zero(); 9 * c_in * c_out]);
                        let mut gb_scratch = vec![T::zero(); c_out];
                        kernels::conv3x3_grad_weight_hwc(
                            &pad, h, w, c_in, &go, c_out, gw, &mut gb_scratch,
                        );
                        self.pad_scratch = pad;
                    }
                    if self.child_needs_grad(input) {
                        let mut pad = std::mem::take(&mut self.pad_scratch);
                        kernels::pad_hwc(&go, h, w, c_out, &mut pad);
                        self.ensure_grad(input);
                        let packed = &self.packed_conv[&weight.0];
                        let gin = self.grads[input.0].as_mut().unwrap();
                        kernels::conv3x3_grad_input_hwc(
                            &pad, h, w, c_out, &packed.bwd, c_in, gin,
                        );
                        self.pad_scratch = pad;
                    }
                }
                Op::MaxPool2x2 { input, idx, oh, ow, c } => {
                    let (input, oh, ow, c) = (*input, *oh, *ow, *c);
                    let idx = idx.clone();
                    if self.child_needs_grad(input) {
                        self.ensure_grad(input);
                        let gin = self.grads[input.0].as_mut().unwrap();
                        kernels::maxpool2x2_bwd_hwc(&go, oh, ow, c, &idx, gin);
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    if self.child_needs_grad(input) {
                        self.ensure_grad(input);
                        let out = self.nodes[id].value.data();
                        let gin = self.grads[input.0].as_mut().unwrap();
                        for ((g, &v), &o) in gin.iter_mut().zip(out).zip(&go) {
                            if v > T::zero() {
                                *g = *g + o;
                            }
                        }
                    }
                }
                Op::Fc { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    if self.child_needs_grad(input) {
                        self.ensure_grad(input);
                        let wdata = self.nodes[weight.0].value.data();
                        let gin = self.grads[input.0].as_mut().unwrap();
                        kernels::fc_grad_input(&go, wdata, gin);
                    }
                    if self.child_needs_grad(weight) || self.child_needs_grad(bias) {
                        self.ensure_grad(weight);
                        self.ensure_grad(bias);
                        let inp = self.nodes[input.0].value.data();
                        // Split the two grad buffers without aliasing.
                        let (lo, hi) = (weight.0.min(bias.0), weight.0.max(bias.0));
                        let (left, right) = self.grads.split_at_mut(hi);
                        let (gw, gb) = if weight.0 < bias.0 {
                            (left[lo].as_mut().unwrap(), right[0].as_mut().unwrap())
                        } else {
                            (right[0].as_mut().unwrap(), left[lo].as_mut().unwrap())
                        };
                        kernels::fc_grad_weight(&go, inp, gw, gb);
                    }
                }
                Op::Dropout { input, mask, keep } => {
                    let input = *input;
                    let keep = *keep;
                    if self.child_needs_grad(input) {
                        self.ensure_grad(input);
                        match mask {
                            Some(mask) => {
                                let mask = mask.clone();
                                let gin = self.grads[input.0].as_mut().unwrap();
                                for ((g, &m), &o) in gin.iter_mut().zip(&mask).zip(&go) {
                                    if m {
                                        *g = *g + o;
                                    }
                                }
                            }
                            None => {
                                let gin = self.grads[input.0].as_mut().unwrap();
                                for (g, &o) in gin.iter_mut().zip(&go) {
                                    *g = keep.mul_add(o, *g);
                                }
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.child_needs_grad(a) {
                        self.ensure_grad(a);
                        kernels::add_assign(self.grads[a.0].as_mut().unwrap(), &go);
                    }
                    if self.child_needs_grad(b) {
                        self.ensure_grad(b);
                        let gb = self.grads[b.0].as_mut().unwrap();
                        for (g, &o) in gb.iter_mut().zip(&go) {
                            *g = *g - o;
                        }
                    }
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        if self.child_needs_grad(p) {
                            self.ensure_grad(p);
                            kernels::add_assign(
                                self.grads[p.0].as_mut().unwrap(),
                                &go[offset..offset + n],
                            );
                        }
                        offset += n;
                    }
                }
                Op::RectifyStabilize { input } => {
                    let input = *input;
                    if self.child_needs_grad(input) {
                        self.ensure_grad(input);
                        let (nodes, grads) = (&self.nodes, &mut self.grads);
                        let xs = nodes[input.0].value.data();
                        let gin = grads[input.0].as_mut().unwrap();
                        for ((g, &v), &o) in gin.iter_mut().zip(xs).zip(&go) {
                            if v > T::zero() {
                                *g = *g + o;
                            }
                        }
                    }
                }
                Op::WeightedPool { y, alpha, p, q_hat, denom } => {
                    let (y, alpha) = (*y, *alpha);
                    let (p, q_hat, denom) = (p.clone(), *q_hat, *denom);
                    let g = go[0];
                    if self.child_needs_grad(y) {
                        self.ensure_grad(y);
                        let gy = self.grads[y.0].as_mut().unwrap();
                        for (gi, &pi) in gy.iter_mut().zip(&p) {
                            *gi = (g * pi) + *gi;
                        }
                    }
                    if self.child_needs_grad(alpha) {
                        let yv = self.nodes[y.0].value.data().to_vec();
                        self.ensure_grad(alpha);
                        let ga = self.grads[alpha.0].as_mut().unwrap();
                        for (gi, &yi) in ga.iter_mut().zip(&yv) {
                            *gi = *gi + g * (yi - q_hat) / denom;
                        }
                    }
                }
                Op::MeanAll { input } => {
                    let input = *input;
                    if self.child_needs_grad(input) {
                        self.ensure_grad(input);
                        let n = self.nodes[input.0].value.len();
                        let share = go[0] / T::from_f64(n as f64);
                        let gin = self.grads[input.0].as_mut().unwrap();
                        for g in gin.iter_mut() {
                            *g = *g + share;
                        }
                    }
                }
                Op::AbsError { input, target } => {
                    let (input, target) = (*input, *target);
                    if self.child_needs_grad(input) {
                        self.ensure_grad(input);
                        let (nodes, grads) = (&self.nodes, &mut self.grads);
                        let xs = nodes[input.0].value.data();
                        let gin = grads[input.0].as_mut().unwrap();
                        for ((g, &v), &o) in gin.iter_mut().zip(xs).zip(&go) {
                            // subgradient 0 at the kink
                            if v > target {
                                *g = *g + o;
                            } else if v < target {
                                *g = *g - o;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the gradients of bound parameters into `set` (replacing any
    /// previous contents of the grad slots).
    pub fn export_grads(&self, set: &mut ParamSet<T>) -> Result<()> {
        if !self.backward_done {
            return Err(Error::State("export_grads called before backward".into()));
        }
        set.zero_grads();
        for (&node_idx, &param_idx) in &self.param_of {
            let tensor = set.tensor_mut_by_index(param_idx);
            if let Some(g) = self.grads[node_idx].as_deref() {
                let dst = tensor.grad_mut().ok_or_else(|| {
                    Error::State("parameter missing its gradient slot".into())
                })?;
                kernels::add_assign(dst, g);
            }
            if let Some(pg) = self.packed_conv_grad.get(&node_idx) {
                let (c_out, c_in) = match *tensor.shape() {
                    [co, ci, 3, 3] => (co, ci),
                    _ => {
                        return Err(Error::State(
                            "packed conv grad recorded for a non-conv parameter".into(),
                        ))
                    }
                };
                let dst = tensor.grad_mut().ok_or_else(|| {
                    Error::State("parameter missing its gradient slot".into())
                })?;
                kernels::unpack_conv_grad_add(pg, c_out, c_in, dst);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn sum_through_identity_layers_gives_unit_gradients() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let x = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        // identity fc
        let eye = g.input(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let zero_b = g.input(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let h = g.fc(x, eye, zero_b).unwrap();
        let m = g.mean_all(h);
        g.backward(m).unwrap();
        // d(mean)/dx_i = 1/3
        let gx = g.grad(x).unwrap();
        for &v in gx {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax_only() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        // HWC with C=1: [[1,2],[3,4]]
        let x = g.variable(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.maxpool2x2(x).unwrap();
        let m = g.mean_all(p);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_matches_analytic() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let x = g.variable(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let s = g.mean_all(r);
        g.backward(s).unwrap();
        // d(mean(relu(x)))/dx = [0, 0.5]; the spec's sum formulation scales by n.
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let x = g.variable(Tensor::scalar(2.0));
        let l = g.mean_all(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn weighted_pool_gradients_match_quotient_rule() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let y = g.variable(Tensor::new(vec![2], vec![2.0, 6.0]).unwrap());
        let a = g.variable(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let q = g.weighted_pool(y, a).unwrap();
        assert!((g.value(q).item().unwrap() - 5.0).abs() < 1e-12);
        g.backward(q).unwrap();
        // dq/dy_i = p_i; dq/da_i = (y_i - q)/sum(a)
        assert_eq!(g.grad(y).unwrap(), &[0.25, 0.75]);
        let ga = g.grad(a).unwrap();
        assert!((ga[0] - (2.0 - 5.0) / 4.0).abs() < 1e-12);
        assert!((ga[1] - (6.0 - 5.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_pool_rejects_non_positive_weights() {
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let y = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let a = g.variable(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.weighted_pool(y, a), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_train_mask_is_reused_in_backward() {
        let mut rng = stream_rng(9, Stream::Dropout);
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let x = g.variable(Tensor::new(vec![64], vec![1.0; 64]).unwrap());
        let d = g.dropout(x, 0.5, &mut rng);
        let kept: Vec<bool> = g.value(d).iter().map(|&v| v != 0.0).collect();
        let s = g.mean_all(d);
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        for (i, &k) in kept.iter().enumerate() {
            let want = if k { 1.0 / 64.0 } else { 0.0 };
            assert_eq!(gx[i], want);
        }
    }

    #[test]
    fn conv_forward_agrees_with_public_op() {
        let mut rng = stream_rng(2, Stream::Init);
        let (ci, co, h, w) = (3, 4, 6, 6);
        let input_chw =
            Tensor::new(vec![ci, h, w], (0..ci * h * w).map(|_| rng.gen::<f64>()).collect())
                .unwrap();
        let weight = Tensor::new(
            vec![co, ci, 3, 3],
            (0..co * ci * 9).map(|_| rng.gen::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let bias =
            Tensor::new(vec![co], (0..co).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap();

        let want = crate::ops::conv3x3_forward(&input_chw, &weight, &bias).unwrap();

        let mut hwc = vec![0.0f64; input_chw.len()];
        kernels::chw_to_hwc(input_chw.data(), ci, h, w, &mut hwc);
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let x = g.input(Tensor::new(vec![h, w, ci], hwc).unwrap());
        let wn = g.input(weight);
        let bn = g.input(bias);
        let out = g.conv3x3(x, wn, bn).unwrap();
        let mut got_chw = vec![0.0f64; want.len()];
        kernels::hwc_to_chw(g.value(out).data(), h, w, co, &mut got_chw);
        for (a, b) in got_chw.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
