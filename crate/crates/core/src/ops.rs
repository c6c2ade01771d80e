//! Standalone layer operations on channels-first tensors.
//!
//! These are the building blocks in their contract form: `[C, H, W]`
//! activations and `[C_out, C_in, 3, 3]` conv weights. The training graph in
//! [`crate::graph`] runs the same kernels on channels-last buffers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dropout (and, through the graph, every layer) behaves differently in
/// training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn expect_rank3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!(
            "{what} must have shape [C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

/// 3x3 convolution with zero padding 1 and stride 1: spatial size is
/// preserved.
pub fn conv3x3_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = expect_rank3(input, "conv input")?;
    let (c_out, wc_in) = match *weight.shape() {
        [co, ci, 3, 3] => (co, ci),
        _ => {
            return Err(Error::Dimension(format!(
                "conv weight must have shape [C_out, C_in, 3, 3], got {:?}",
                weight.shape()
            )))
        }
    };
    if wc_in != c_in {
        return Err(Error::Dimension(format!(
            "conv input-channel axis mismatch: input has {c_in}, weight expects {wc_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Dimension(format!(
            "conv bias must have shape [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let mut hwc = vec![T::zero(); input.len()];
    kernels::chw_to_hwc(input.data(), c_in, h, w, &mut hwc);
    let mut pad = Vec::new();
    kernels::pad_hwc(&hwc, h, w, c_in, &mut pad);
    let packed = kernels::pack_conv_weight(weight.data(), c_out, c_in);
    let mut out_hwc = vec![T::zero(); c_out * h * w];
    kernels::conv3x3_fwd_hwc(&pad, h, w, c_in, &packed.fwd, bias.data(), c_out, &mut out_hwc);
    let mut out = vec![T::zero(); c_out * h * w];
    kernels::hwc_to_chw(&out_hwc, h, w, c_out, &mut out);
    Tensor::new(vec![c_out, h, w], out)
}

/// Argmax record of a max-pool: flat input offset per output element.
#[derive(Clone, Debug)]
pub struct MaxPoolIndices {
    pub offsets: Vec<usize>,
}

/// 2x2 max pooling with stride 2 over disjoint windows.
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolIndices)> {
    let (c, h, w) = expect_rank3(input, "maxpool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool input spatial size must be even, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = vec![T::zero(); c * oh * ow];
    let mut offsets = vec![0usize; c * oh * ow];
    for ch in 0..c {
        let plane = &data[ch * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_off = 2 * oy * w + 2 * ox;
                let mut best = plane[best_off];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let off = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[off] > best {
                        best = plane[off];
                        best_off = off;
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
                offsets[(ch * oh + oy) * ow + ox] = ch * h * w + best_off;
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, MaxPoolIndices { offsets }))
}

/// Elementwise `max(0, x)`.
pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Affine map `weight * input + bias` for a 1-D input.
pub fn fc_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d_in = match *input.shape() {
        [d] => d,
        _ => {
            return Err(Error::Dimension(format!(
                "fc input must be 1-D, got {:?}",
                input.shape()
            )))
        }
    };
    let d_out = match *weight.shape() {
        [dout, din] if din == d_in => dout,
        _ => {
            return Err(Error::Dimension(format!(
                "fc weight must have shape [D_out, {d_in}], got {:?}",
                weight.shape()
            )))
        }
    };
    if bias.shape() != [d_out] {
        return Err(Error::Dimension(format!(
            "fc bias must have shape [{d_out}], got {:?}",
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); d_out];
    kernels::fc_fwd(input.data(), weight.data(), bias.data(), &mut out);
    Tensor::new(vec![d_out], out)
}

/// Classic (non-inverted) dropout. Training zeroes units with probability
/// `1 - keep` and passes survivors through unscaled; evaluation multiplies
/// deterministically by `keep`.
pub fn dropout_apply<T: Scalar>(
    input: &Tensor<T>,
    keep: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    debug_assert!(keep > 0.0 && keep <= 1.0);
    match mode {
        Mode::Eval => {
            let k = T::from_f64(keep);
            input.map(|v| v * k)
        }
        Mode::Train => {
            let data = input
                .iter()
                .map(|&v| if rng.gen::<f64>() < keep { v } else { T::zero() })
                .collect();
            Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
        }
    }
}
