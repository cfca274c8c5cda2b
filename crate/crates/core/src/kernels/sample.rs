//! Bilinear sampling at fractional positions with border clamping.
//!
//! `coords` is `B × 2K × H × W` holding absolute `(row, col)` pairs,
//! interleaved as `[y_0, x_0, y_1, x_1, ...]`. The output stacks the K
//! samples of every feature channel contiguously: slot `c·K + k`.

use crate::error::{shape_err, Error, Result};
use crate::exec::for_each_chunk;
use crate::tensor::{Scalar, Tensor};

/// The four grid neighbours of one clamped sampling position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<S> {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: S,
    fx: S,
    /// False when the coordinate was clamped, which zeroes its derivative.
    y_free: bool,
    x_free: bool,
}

impl<S: Scalar> Tap<S> {
    #[inline]
    fn new(y: S, x: S, h: usize, w: usize) -> Self {
        let (yc, y_free) = clamp(y, h);
        let (xc, x_free) = clamp(x, w);
        let y0 = (yc.floor().to_f64() as usize).min(h - 1);
        let x0 = (xc.floor().to_f64() as usize).min(w - 1);
        Tap {
            y0,
            y1: (y0 + 1).min(h - 1),
            x0,
            x1: (x0 + 1).min(w - 1),
            fy: yc - S::from_f64(y0 as f64),
            fx: xc - S::from_f64(x0 as f64),
            y_free,
            x_free,
        }
    }

    #[inline]
    fn corners(&self, w: usize) -> [usize; 4] {
        [
            self.y0 * w + self.x0,
            self.y0 * w + self.x1,
            self.y1 * w + self.x0,
            self.y1 * w + self.x1,
        ]
    }

    #[inline]
    fn weights(&self) -> [S; 4] {
        let one = S::one();
        [
            (one - self.fy) * (one - self.fx),
            (one - self.fy) * self.fx,
            self.fy * (one - self.fx),
            self.fy * self.fx,
        ]
    }

    /// Discrete cell/clamp state, used to detect derivative kinks.
    pub(crate) fn signature(&self) -> (usize, usize, bool, bool) {
        (self.y0, self.x0, self.y_free, self.x_free)
    }
}

#[inline]
fn clamp<S: Scalar>(v: S, n: usize) -> (S, bool) {
    let hi = S::from_f64((n - 1) as f64);
    if v < S::zero() {
        (S::zero(), false)
    } else if v > hi {
        (hi, false)
    } else {
        (v, true)
    }
}

fn check<S: Scalar>(
    features: &Tensor<S>,
    coords: &Tensor<S>,
    k: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = features.dims4()?;
    let (cb, cc, ch, cw) = coords.dims4()?;
    if k == 0 || cc != 2 * k {
        return Err(shape_err!("sampling coordinates need {} channels, got {cc}", 2 * k));
    }
    if (cb, ch, cw) != (b, h, w) {
        return Err(shape_err!(
            "coordinates {:?} do not match features {:?}",
            coords.shape(),
            features.shape()
        ));
    }
    if !coords.all_finite() {
        return Err(Error::Numerical("non-finite sampling coordinate".into()));
    }
    Ok((b, c, h, w))
}

pub(crate) fn taps<S: Scalar>(coords: &Tensor<S>, k: usize, h: usize, w: usize) -> Vec<Tap<S>> {
    let hw = h * w;
    let b = coords.shape()[0];
    let cd = coords.data();
    let mut out = Vec::with_capacity(b * k * hw);
    for bi in 0..b {
        for ki in 0..k {
            let ys = &cd[(bi * 2 * k + 2 * ki) * hw..][..hw];
            let xs = &cd[(bi * 2 * k + 2 * ki + 1) * hw..][..hw];
            out.extend(ys.iter().zip(xs).map(|(&y, &x)| Tap::new(y, x, h, w)));
        }
    }
    out
}

/// Samples every feature channel at K positions per pixel.
pub fn sample_forward<S: Scalar>(
    features: &Tensor<S>,
    coords: &Tensor<S>,
    k: usize,
) -> Result<Tensor<S>> {
    let (b, c, h, w) = check(features, coords, k)?;
    let hw = h * w;
    let taps = taps(coords, k, h, w);
    let f = features.data();
    let mut out = vec![S::zero(); b * c * k * hw];
    for_each_chunk(&mut out, hw, |idx, plane| {
        let bi = idx / (c * k);
        let (ci, ki) = ((idx / k) % c, idx % k);
        let src = &f[(bi * c + ci) * hw..][..hw];
        let tp = &taps[(bi * k + ki) * hw..][..hw];
        for (o, t) in plane.iter_mut().zip(tp) {
            let q = t.corners(w);
            let wt = t.weights();
            *o = wt[0] * src[q[0]] + wt[1] * src[q[1]] + wt[2] * src[q[2]] + wt[3] * src[q[3]];
        }
    });
    Tensor::from_vec(&[b, c * k, h, w], out)
}

/// Gradients of [`sample_forward`] with respect to features and coordinates.
pub fn sample_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    features: &Tensor<S>,
    coords: &Tensor<S>,
    k: usize,
    need_features: bool,
    need_coords: bool,
) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>)> {
    let (b, c, h, w) = check(features, coords, k)?;
    if grad_out.shape() != [b, c * k, h, w] {
        return Err(shape_err!("sample upstream gradient {:?}", grad_out.shape()));
    }
    let hw = h * w;
    let taps = taps(coords, k, h, w);
    let (go, f) = (grad_out.data(), features.data());

    let gf = if need_features {
        let mut gf = vec![S::zero(); b * c * hw];
        for_each_chunk(&mut gf, hw, |idx, plane| {
            let (bi, ci) = (idx / c, idx % c);
            for ki in 0..k {
                let g = &go[((bi * c + ci) * k + ki) * hw..][..hw];
                let tp = &taps[(bi * k + ki) * hw..][..hw];
                for (&gv, t) in g.iter().zip(tp) {
                    let q = t.corners(w);
                    let wt = t.weights();
                    for j in 0..4 {
                        plane[q[j]] = plane[q[j]] + wt[j] * gv;
                    }
                }
            }
        });
        Some(Tensor::from_vec(features.shape(), gf)?)
    } else {
        None
    };

    let gc = if need_coords {
        let mut gc = vec![S::zero(); b * 2 * k * hw];
        let one = S::one();
        for_each_chunk(&mut gc, 2 * hw, |idx, pair| {
            let (bi, ki) = (idx / k, idx % k);
            let tp = &taps[(bi * k + ki) * hw..][..hw];
            let (gy, gx) = pair.split_at_mut(hw);
            for ci in 0..c {
                let src = &f[(bi * c + ci) * hw..][..hw];
                let g = &go[((bi * c + ci) * k + ki) * hw..][..hw];
                for (p, t) in tp.iter().enumerate() {
                    let q = t.corners(w);
                    let (f00, f01, f10, f11) = (src[q[0]], src[q[1]], src[q[2]], src[q[3]]);
                    if t.y_free {
                        let d = (one - t.fx) * (f10 - f00) + t.fx * (f11 - f01);
                        gy[p] = gy[p] + g[p] * d;
                    }
                    if t.x_free {
                        let d = (one - t.fy) * (f01 - f00) + t.fy * (f11 - f10);
                        gx[p] = gx[p] + g[p] * d;
                    }
                }
            }
        });
        Some(Tensor::from_vec(coords.shape(), gc)?)
    } else {
        None
    };
    Ok((gf, gc))
}

/// Absolute coordinates `offsets + (row, col)` for relative offsets `B × 2K × H × W`.
pub fn offsets_to_coords<S: Scalar>(offsets: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c2, h, w) = offsets.dims4()?;
    if c2 % 2 != 0 {
        return Err(shape_err!("offset tensor needs an even channel count, got {c2}"));
    }
    let mut out = offsets.clone();
    let hw = h * w;
    for (idx, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let is_x = (idx % c2) % 2 == 1;
        for (p, v) in plane.iter_mut().enumerate() {
            let base = if is_x { p % w } else { p / w };
            *v = *v + S::from_f64(base as f64);
        }
    }
    debug_assert_eq!(out.shape()[0], b);
    Ok(out)
}
