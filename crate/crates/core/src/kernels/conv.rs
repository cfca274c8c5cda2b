//! Direct convolution kernels (forward and both backward passes).
//!
//! Layouts follow the usual NCHW convention: conv weights are
//! `Cout × Cin/groups × kh × kw`, transposed-conv weights are
//! `Cin × Cout × k × k`. Output planes are filled chunk-wise so every
//! output element is accumulated in a fixed order on one worker.

use crate::error::{shape_err, Result};
use crate::exec::for_each_chunk;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub s: usize,
    pub p: usize,
}

pub(crate) fn conv_geometry(
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
    spec: ConvSpec,
) -> Result<ConvGeom> {
    let [b, cin, h, w] = input[..] else {
        return Err(shape_err!("conv2d input must be rank 4, got {input:?}"));
    };
    let [cout, cin_g, kh, kw] = weight[..] else {
        return Err(shape_err!("conv2d weight must be rank 4, got {weight:?}"));
    };
    let ConvSpec {
        stride: s,
        padding: p,
        groups,
    } = spec;
    if s == 0 || groups == 0 {
        return Err(shape_err!("conv2d stride and groups must be positive"));
    }
    if cin % groups != 0 {
        return Err(shape_err!(
            "conv2d input channels {cin} not divisible by groups {groups}"
        ));
    }
    if cout % groups != 0 {
        return Err(shape_err!(
            "conv2d output channels {cout} not divisible by groups {groups}"
        ));
    }
    if cin_g * groups != cin {
        return Err(shape_err!(
            "conv2d weight dim 1 is {cin_g}, expected input channels / groups = {}",
            cin / groups
        ));
    }
    if let Some(bs) = bias {
        if bs != [cout] {
            return Err(shape_err!("conv2d bias {bs:?} does not match {cout} outputs"));
        }
    }
    if h + 2 * p < kh || w + 2 * p < kw {
        return Err(shape_err!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * p,
            w + 2 * p
        ));
    }
    Ok(ConvGeom {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: (h + 2 * p - kh) / s + 1,
        wo: (w + 2 * p - kw) / s + 1,
        cin_g,
        cout_g: cout / groups,
        s,
        p,
    })
}

/// Output positions `[lo, hi)` whose input index `o*s + k - p` lands in `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    if n_in + p <= k {
        return (0, 0);
    }
    let hi = ((n_in - 1 + p - k) / s + 1).min(n_out);
    (lo.min(hi), hi)
}

#[inline]
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    x.iter().zip(y).fold(S::zero(), |acc, (&a, &b)| acc + a * b)
}

pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: ConvSpec,
) -> Result<Tensor<S>> {
    let g = conv_geometry(input.shape(), weight.shape(), bias.map(|b| b.shape()), spec)?;
    let mut out = vec![S::zero(); g.b * g.cout * g.ho * g.wo];
    let (x, wt) = (input.data(), weight.data());
    let bias = bias.map(|b| b.data());
    for_each_chunk(&mut out, g.ho * g.wo, |idx, plane| {
        let (b, o) = (idx / g.cout, idx % g.cout);
        plane.fill(bias.map_or(S::zero(), |bv| bv[o]));
        let grp = o / g.cout_g;
        for ci in 0..g.cin_g {
            let c = grp * g.cin_g + ci;
            let inp = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.s, g.p);
                for kx in 0..g.kw {
                    let wv = wt[((o * g.cin_g + ci) * g.kh + ky) * g.kw + kx];
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.s, g.p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.s + ky - g.p;
                        let row_in = &inp[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut plane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                        if g.s == 1 {
                            let ix0 = ox_lo + kx - g.p;
                            axpy(wv, &row_in[ix0..ix0 + row_out.len()], row_out);
                        } else {
                            for (k, o) in row_out.iter_mut().enumerate() {
                                *o = *o + wv * row_in[(ox_lo + k) * g.s + kx - g.p];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[g.b, g.cout, g.ho, g.wo], out)
}

/// Gradient of a conv2d output with respect to its input.
pub fn conv2d_backward_input<S: Scalar>(
    grad_out: &Tensor<S>,
    weight: &Tensor<S>,
    input_shape: &[usize],
    spec: ConvSpec,
) -> Result<Tensor<S>> {
    let g = conv_geometry(input_shape, weight.shape(), None, spec)?;
    if grad_out.shape() != [g.b, g.cout, g.ho, g.wo] {
        return Err(shape_err!("conv2d upstream gradient {:?}", grad_out.shape()));
    }
    let mut gin = vec![S::zero(); g.b * g.cin * g.h * g.w];
    let (go, wt) = (grad_out.data(), weight.data());
    for_each_chunk(&mut gin, g.h * g.w, |idx, plane| {
        let (b, c) = (idx / g.cin, idx % g.cin);
        let grp = c / g.cin_g;
        let ci = c - grp * g.cin_g;
        for o in grp * g.cout_g..(grp + 1) * g.cout_g {
            let gplane = &go[(b * g.cout + o) * g.ho * g.wo..][..g.ho * g.wo];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.s, g.p);
                for kx in 0..g.kw {
                    let wv = wt[((o * g.cin_g + ci) * g.kh + ky) * g.kw + kx];
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.s, g.p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.s + ky - g.p;
                        let grow = &gplane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                        let row_in = &mut plane[iy * g.w..(iy + 1) * g.w];
                        if g.s == 1 {
                            let ix0 = ox_lo + kx - g.p;
                            axpy(wv, grow, &mut row_in[ix0..ix0 + grow.len()]);
                        } else {
                            for (k, &gv) in grow.iter().enumerate() {
                                let ix = (ox_lo + k) * g.s + kx - g.p;
                                row_in[ix] = row_in[ix] + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(input_shape, gin)
}

/// Gradients of a conv2d output with respect to weight and bias.
pub fn conv2d_backward_params<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight_shape: &[usize],
    spec: ConvSpec,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let g = conv_geometry(input.shape(), weight_shape, None, spec)?;
    if grad_out.shape() != [g.b, g.cout, g.ho, g.wo] {
        return Err(shape_err!("conv2d upstream gradient {:?}", grad_out.shape()));
    }
    let (go, x) = (grad_out.data(), input.data());
    let per_o = g.cin_g * g.kh * g.kw;
    let mut gw = vec![S::zero(); g.cout * per_o];
    for_each_chunk(&mut gw, per_o, |o, wchunk| {
        let grp = o / g.cout_g;
        for b in 0..g.b {
            let gplane = &go[(b * g.cout + o) * g.ho * g.wo..][..g.ho * g.wo];
            for ci in 0..g.cin_g {
                let c = grp * g.cin_g + ci;
                let inp = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.s, g.p);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.s, g.p);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = S::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.s + ky - g.p;
                            let grow = &gplane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                            let row_in = &inp[iy * g.w..(iy + 1) * g.w];
                            if g.s == 1 {
                                let ix0 = ox_lo + kx - g.p;
                                acc = acc + dot(grow, &row_in[ix0..ix0 + grow.len()]);
                            } else {
                                for (k, &gv) in grow.iter().enumerate() {
                                    acc = acc + gv * row_in[(ox_lo + k) * g.s + kx - g.p];
                                }
                            }
                        }
                        let wi = (ci * g.kh + ky) * g.kw + kx;
                        wchunk[wi] = wchunk[wi] + acc;
                    }
                }
            }
        }
    });
    let gb = bias_grad(grad_out)?;
    Ok((Tensor::from_vec(weight_shape, gw)?, gb))
}

/// Sum of a rank-4 gradient over batch and spatial axes, per channel.
pub fn bias_grad<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, h, w) = grad_out.dims4()?;
    let go = grad_out.data();
    let mut gb = vec![S::zero(); c];
    for bi in 0..b {
        for (ci, acc) in gb.iter_mut().enumerate() {
            let plane = &go[(bi * c + ci) * h * w..][..h * w];
            *acc = *acc + plane.iter().copied().sum::<S>();
        }
    }
    Tensor::from_vec(&[c], gb)
}

fn tconv_dims(input: &[usize], weight: &[usize], stride: usize) -> Result<[usize; 6]> {
    let [b, cin, h, w] = input[..] else {
        return Err(shape_err!("conv_transpose2d input must be rank 4"));
    };
    let [wcin, cout, kh, kw] = weight[..] else {
        return Err(shape_err!("conv_transpose2d weight must be rank 4"));
    };
    if wcin != cin {
        return Err(shape_err!(
            "conv_transpose2d weight dim 0 is {wcin}, input has {cin} channels"
        ));
    }
    if kh != stride || kw != stride || stride == 0 {
        return Err(shape_err!(
            "conv_transpose2d kernel {kh}x{kw} must equal stride {stride}"
        ));
    }
    Ok([b, cin, h, w, cout, stride])
}

pub fn conv_transpose2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
) -> Result<Tensor<S>> {
    let [b, cin, h, w, cout, s] = tconv_dims(input.shape(), weight.shape(), stride)?;
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(shape_err!("conv_transpose2d bias {:?}", bt.shape()));
        }
    }
    let (ho, wo) = (h * s, w * s);
    let (x, wt) = (input.data(), weight.data());
    let bias = bias.map(|b| b.data());
    let mut out = vec![S::zero(); b * cout * ho * wo];
    for_each_chunk(&mut out, ho * wo, |idx, plane| {
        let (bi, o) = (idx / cout, idx % cout);
        plane.fill(bias.map_or(S::zero(), |bv| bv[o]));
        for c in 0..cin {
            let inp = &x[(bi * cin + c) * h * w..][..h * w];
            for ky in 0..s {
                for kx in 0..s {
                    let wv = wt[((c * cout + o) * s + ky) * s + kx];
                    for i in 0..h {
                        let row = &mut plane[(i * s + ky) * wo..][..wo];
                        for j in 0..w {
                            row[j * s + kx] = row[j * s + kx] + wv * inp[i * w + j];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[b, cout, ho, wo], out)
}

pub fn conv_transpose2d_backward_input<S: Scalar>(
    grad_out: &Tensor<S>,
    weight: &Tensor<S>,
    input_shape: &[usize],
    stride: usize,
) -> Result<Tensor<S>> {
    let [b, cin, h, w, cout, s] = tconv_dims(input_shape, weight.shape(), stride)?;
    let (ho, wo) = (h * s, w * s);
    if grad_out.shape() != [b, cout, ho, wo] {
        return Err(shape_err!("conv_transpose2d upstream gradient {:?}", grad_out.shape()));
    }
    let (go, wt) = (grad_out.data(), weight.data());
    let mut gin = vec![S::zero(); b * cin * h * w];
    for_each_chunk(&mut gin, h * w, |idx, plane| {
        let (bi, c) = (idx / cin, idx % cin);
        for o in 0..cout {
            let gplane = &go[(bi * cout + o) * ho * wo..][..ho * wo];
            for ky in 0..s {
                for kx in 0..s {
                    let wv = wt[((c * cout + o) * s + ky) * s + kx];
                    for i in 0..h {
                        let row = &gplane[(i * s + ky) * wo..][..wo];
                        for j in 0..w {
                            plane[i * w + j] = plane[i * w + j] + wv * row[j * s + kx];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(input_shape, gin)
}

pub fn conv_transpose2d_backward_params<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight_shape: &[usize],
    stride: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let [b, cin, h, w, cout, s] = tconv_dims(input.shape(), weight_shape, stride)?;
    let (ho, wo) = (h * s, w * s);
    let (go, x) = (grad_out.data(), input.data());
    let per_c = cout * s * s;
    let mut gw = vec![S::zero(); cin * per_c];
    for_each_chunk(&mut gw, per_c, |c, wchunk| {
        for o in 0..cout {
            for ky in 0..s {
                for kx in 0..s {
                    let mut acc = S::zero();
                    for bi in 0..b {
                        let inp = &x[(bi * cin + c) * h * w..][..h * w];
                        let gplane = &go[(bi * cout + o) * ho * wo..][..ho * wo];
                        for i in 0..h {
                            let row = &gplane[(i * s + ky) * wo..][..wo];
                            for j in 0..w {
                                acc = acc + inp[i * w + j] * row[j * s + kx];
                            }
                        }
                    }
                    wchunk[(o * s + ky) * s + kx] = acc;
                }
            }
        }
    });
    Ok((Tensor::from_vec(weight_shape, gw)?, bias_grad(grad_out)?))
}
