//! Low-level layer kernels.
//!
//! Convolution and pooling run on channels-last (`[H, W, C]`) buffers so the
//! innermost loops walk contiguous channel runs; weights are re-packed from
//! the canonical `[C_out, C_in, 3, 3]` layout once per graph. All reductions
//! use a fixed lane order, so results are bit-deterministic.

use crate::scalar::Scalar;

const LANES: usize = 8;

#[inline]
pub(crate) fn axpy<T: Scalar>(out: &mut [T], a: T, xs: &[T]) {
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = a.mul_add(x, *o);
    }
}

#[inline]
pub(crate) fn add_assign<T: Scalar>(out: &mut [T], xs: &[T]) {
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = *o + x;
    }
}

/// Lane-chunked dot product with a fixed accumulation order.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / LANES;
    let mut acc = [T::zero(); LANES];
    for i in 0..chunks {
        let ar = &a[i * LANES..][..LANES];
        let br = &b[i * LANES..][..LANES];
        for l in 0..LANES {
            acc[l] = ar[l].mul_add(br[l], acc[l]);
        }
    }
    let mut sum = T::zero();
    for i in chunks * LANES..a.len() {
        sum = a[i].mul_add(b[i], sum);
    }
    for l in 0..LANES {
        sum = sum + acc[l];
    }
    sum
}

/// Copies `[H, W, C]` into a zero-padded `[H+2, W+2, C]` buffer.
pub(crate) fn pad_hwc<T: Scalar>(inp: &[T], h: usize, w: usize, c: usize, out: &mut Vec<T>) {
    let pw = w + 2;
    out.clear();
    out.resize((h + 2) * pw * c, T::zero());
    for y in 0..h {
        let src = &inp[y * w * c..][..w * c];
        let dst = &mut out[((y + 1) * pw + 1) * c..][..w * c];
        dst.copy_from_slice(src);
    }
}

pub(crate) fn chw_to_hwc<T: Scalar>(inp: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    debug_assert_eq!(inp.len(), c * h * w);
    debug_assert_eq!(out.len(), c * h * w);
    for ch in 0..c {
        let plane = &inp[ch * h * w..][..h * w];
        for (pos, &v) in plane.iter().enumerate() {
            out[pos * c + ch] = v;
        }
    }
}

pub(crate) fn hwc_to_chw<T: Scalar>(inp: &[T], h: usize, w: usize, c: usize, out: &mut [T]) {
    debug_assert_eq!(inp.len(), c * h * w);
    debug_assert_eq!(out.len(), c * h * w);
    for ch in 0..c {
        let plane = &mut out[ch * h * w..][..h * w];
        for (pos, dst) in plane.iter_mut().enumerate() {
            *dst = inp[pos * c + ch];
        }
    }
}

/// Conv weights re-packed for the channels-last kernels.
pub(crate) struct PackedConvWeight<T> {
    /// `[ky, kx, c_in, c_out]` — forward and weight-gradient layout.
    pub fwd: Vec<T>,
    /// `[ky, kx, c_out, c_in]` — input-gradient layout.
    pub bwd: Vec<T>,
    pub c_in: usize,
    pub c_out: usize,
}

pub(crate) fn pack_conv_weight<T: Scalar>(
    canonical: &[T],
    c_out: usize,
    c_in: usize,
) -> PackedConvWeight<T> {
    debug_assert_eq!(canonical.len(), c_out * c_in * 9);
    let mut fwd = vec![T::zero(); canonical.len()];
    let mut bwd = vec![T::zero(); canonical.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for k in 0..9 {
                let v = canonical[(co * c_in + ci) * 9 + k];
                fwd[(k * c_in + ci) * c_out + co] = v;
                bwd[(k * c_out + co) * c_in + ci] = v;
            }
        }
    }
    PackedConvWeight { fwd, bwd, c_in, c_out }
}

/// Folds a `[ky, kx, c_in, c_out]`-layout weight gradient back into the
/// canonical `[C_out, C_in, 3, 3]` buffer.
pub(crate) fn unpack_conv_grad_add<T: Scalar>(
    packed: &[T],
    c_out: usize,
    c_in: usize,
    canonical: &mut [T],
) {
    debug_assert_eq!(packed.len(), c_out * c_in * 9);
    debug_assert_eq!(canonical.len(), c_out * c_in * 9);
    for k in 0..9 {
        for ci in 0..c_in {
            let row = &packed[(k * c_in + ci) * c_out..][..c_out];
            for (co, &g) in row.iter().enumerate() {
                canonical[(co * c_in + ci) * 9 + k] = canonical[(co * c_in + ci) * 9 + k] + g;
            }
        }
    }
}

/// 3x3 convolution, zero padding 1, stride 1, on a pre-padded input.
pub(crate) fn conv3x3_fwd_hwc<T: Scalar>(
    pad: &[T],
    h: usize,
    w: usize,
    c_in: usize,
    wfwd: &[T],
    bias: &[T],
    c_out: usize,
    out: &mut [T],
) {
    let pw = w + 2;
    debug_assert_eq!(pad.len(), (h + 2) * pw * c_in);
    debug_assert_eq!(out.len(), h * w * c_out);
    debug_assert_eq!(bias.len(), c_out);
    for y in 0..h {
        for x in 0..w {
            let orow = &mut out[(y * w + x) * c_out..][..c_out];
            orow.copy_from_slice(bias);
            for ky in 0..3 {
                // For a fixed ky the three kx taps cover 3*c_in consecutive
                // input scalars, matching 3*c_in consecutive weight rows.
                let prow = &pad[((y + ky) * pw + x) * c_in..][..3 * c_in];
                let wbase = ky * 3 * c_in;
                for (k, &a) in prow.iter().enumerate() {
                    let wrow = &wfwd[(wbase + k) * c_out..][..c_out];
                    axpy(orow, a, wrow);
                }
            }
        }
    }
}

/// Input gradient of the 3x3 convolution; accumulates into `gin`.
pub(crate) fn conv3x3_grad_input_hwc<T: Scalar>(
    go_pad: &[T],
    h: usize,
    w: usize,
    c_out: usize,
    wbwd: &[T],
    c_in: usize,
    gin: &mut [T],
) {
    let pw = w + 2;
    debug_assert_eq!(go_pad.len(), (h + 2) * pw * c_out);
    debug_assert_eq!(gin.len(), h * w * c_in);
    for v in 0..h {
        for u in 0..w {
            let grow = &mut gin[(v * w + u) * c_in..][..c_in];
            for ky in 0..3 {
                let gop = &go_pad[((v + 2 - ky) * pw + u) * c_out..][..3 * c_out];
                for col in 0..3 {
                    let kx = 2 - col;
                    let gorow = &gop[col * c_out..][..c_out];
                    let wbase = (ky * 3 + kx) * c_out;
                    for (co, &a) in gorow.iter().enumerate() {
                        let wrow = &wbwd[(wbase + co) * c_in..][..c_in];
                        axpy(grow, a, wrow);
                    }
                }
            }
        }
    }
}

/// Weight and bias gradient of the 3x3 convolution; accumulates into
/// `gw` (`[ky, kx, c_in, c_out]` layout) and `gb`.
pub(crate) fn conv3x3_grad_weight_hwc<T: Scalar>(
    pad: &[T],
    h: usize,
    w: usize,
    c_in: usize,
    go: &[T],
    c_out: usize,
    gw: &mut [T],
    gb: &mut [T],
) {
    let pw = w + 2;
    debug_assert_eq!(gw.len(), 9 * c_in * c_out);
    debug_assert_eq!(gb.len(), c_out);
    for pos in 0..h * w {
        add_assign(gb, &go[pos * c_out..][..c_out]);
    }
    if h * w <= 64 {
        // Few spatial positions: keep one accumulator row register/L1
        // resident so the large gw buffer is touched once per tap.
        let mut acc = vec![T::zero(); c_out];
        for ky in 0..3 {
            for k in 0..3 * c_in {
                acc.fill(T::zero());
                for y in 0..h {
                    for x in 0..w {
                        let a = pad[((y + ky) * pw + x) * c_in + k];
                        let gorow = &go[(y * w + x) * c_out..][..c_out];
                        axpy(&mut acc, a, gorow);
                    }
                }
                add_assign(&mut gw[(ky * 3 * c_in + k) * c_out..][..c_out], &acc);
            }
        }
    } else {
        // Many positions but small gw: stream positions, accumulate in gw.
        for y in 0..h {
            for x in 0..w {
                let gorow = &go[(y * w + x) * c_out..][..c_out];
                for ky in 0..3 {
                    let prow = &pad[((y + ky) * pw + x) * c_in..][..3 * c_in];
                    let wbase = ky * 3 * c_in;
                    for (k, &a) in prow.iter().enumerate() {
                        let gwrow = &mut gw[(wbase + k) * c_out..][..c_out];
                        axpy(gwrow, a, gorow);
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2; records the argmax corner (ky*2+kx) per
/// output element for exact backward routing. Ties pick the first maximum.
pub(crate) fn maxpool2x2_fwd_hwc<T: Scalar>(
    inp: &[T],
    h: usize,
    w: usize,
    c: usize,
    out: &mut [T],
    idx: &mut [u8],
) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), oh * ow * c);
    debug_assert_eq!(idx.len(), oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (2 * oy * w + 2 * ox) * c;
            let r0 = &inp[base..][..2 * c];
            let r1 = &inp[base + w * c..][..2 * c];
            let opos = (oy * ow + ox) * c;
            let orow = &mut out[opos..][..c];
            let irow = &mut idx[opos..][..c];
            for j in 0..c {
                let mut best = r0[j];
                let mut code = 0u8;
                if r0[c + j] > best {
                    best = r0[c + j];
                    code = 1;
                }
                if r1[j] > best {
                    best = r1[j];
                    code = 2;
                }
                if r1[c + j] > best {
                    best = r1[c + j];
                    code = 3;
                }
                orow[j] = best;
                irow[j] = code;
            }
        }
    }
}

/// Routes pooled gradients back to the recorded argmax positions.
pub(crate) fn maxpool2x2_bwd_hwc<T: Scalar>(
    go: &[T],
    oh: usize,
    ow: usize,
    c: usize,
    idx: &[u8],
    gin: &mut [T],
) {
    let w = ow * 2;
    debug_assert_eq!(gin.len(), oh * 2 * w * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let opos = (oy * ow + ox) * c;
            let gorow = &go[opos..][..c];
            let irow = &idx[opos..][..c];
            let base = (2 * oy * w + 2 * ox) * c;
            for j in 0..c {
                let code = irow[j] as usize;
                let off = (code >> 1) * w * c + (code & 1) * c + j;
                gin[base + off] = gin[base + off] + gorow[j];
            }
        }
    }
}

/// Fully-connected forward: `out = weight * inp + bias`, weight `[D_out, D_in]`.
pub(crate) fn fc_fwd<T: Scalar>(inp: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let d_in = inp.len();
    debug_assert_eq!(weight.len(), out.len() * d_in);
    debug_assert_eq!(bias.len(), out.len());
    for (o, (wrow, &b)) in out.iter_mut().zip(weight.chunks_exact(d_in).zip(bias)) {
        *o = dot(inp, wrow) + b;
    }
}

pub(crate) fn fc_grad_input<T: Scalar>(go: &[T], weight: &[T], gin: &mut [T]) {
    let d_in = gin.len();
    for (&g, wrow) in go.iter().zip(weight.chunks_exact(d_in)) {
        axpy(gin, g, wrow);
    }
}

pub(crate) fn fc_grad_weight<T: Scalar>(go: &[T], inp: &[T], gw: &mut [T], gb: &mut [T]) {
    let d_in = inp.len();
    for ((&g, gwrow), b) in go.iter().zip(gw.chunks_exact_mut(d_in)).zip(gb.iter_mut()) {
        axpy(gwrow, g, inp);
        *b = *b + g;
    }
}
