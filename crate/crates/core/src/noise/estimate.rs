//! Noise level function estimation.
//!
//! Both estimators collect `(mean intensity, noise variance)` points per
//! intensity bin and fit `σ²(x) = a·x + b` by least squares weighted by
//! the bin sample counts.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Bins with fewer residual samples are discarded by the paired estimator.
pub const MIN_BIN_SAMPLES: usize = 50;
/// Bins whose mean exceeds this fraction of the brightest intensity are outliers.
pub const HIGH_INTENSITY_CUTOFF: f64 = 0.9;

const BLOCK: usize = 8;
/// Lower quantile of block variances taken as the noise level of a bin.
pub const SINGLE_IMAGE_QUANTILE: f64 = 0.005;
const MIN_BIN_BLOCKS: usize = 8;
/// Surviving bins spanning less intensity than this are fitted with `a = 0`.
const MIN_SLOPE_SPAN: f64 = 0.25;

/// Expected sample variance of an 8×8 block of 3×3-box residuals, relative
/// to the variance of the underlying white noise.
pub(crate) const RESIDUAL_VARIANCE_FACTOR: f64 = 0.9013;
/// Effective χ² degrees of freedom of that block variance.
pub(crate) const RESIDUAL_DOF: f64 = 52.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
    pub inlier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlfFit {
    pub a: f64,
    pub b: f64,
    pub bins: Vec<BinStat>,
}

impl NlfFit {
    pub fn variance_at(&self, x: f64) -> f64 {
        self.a * x + self.b
    }
}

fn bin_index(x: f64, n_bins: usize) -> Option<usize> {
    if !(0.0..=1.0).contains(&x) {
        return None;
    }
    Some(((x * n_bins as f64) as usize).min(n_bins - 1))
}

/// Weighted least-squares line through the inlier bins. Returns `(a, b)`
/// with `b ≥ 0` and `a + b ≥ 0`, so the fit is non-negative on `[0, 1]`.
fn fit_line(bins: &[BinStat], allow_constant: bool) -> Result<(f64, f64)> {
    let inl: Vec<&BinStat> = bins.iter().filter(|b| b.inlier).collect();
    let need = if allow_constant { 1 } else { 2 };
    if inl.len() < need {
        return Err(Error::Estimation(format!(
            "{} usable intensity bins, need at least {need}",
            inl.len()
        )));
    }
    let wsum: f64 = inl.iter().map(|b| b.count as f64).sum();
    let mx = inl.iter().map(|b| b.count as f64 * b.mean).sum::<f64>() / wsum;
    let my = inl.iter().map(|b| b.count as f64 * b.variance).sum::<f64>() / wsum;
    let span = inl.iter().map(|b| b.mean).fold(f64::NEG_INFINITY, f64::max)
        - inl.iter().map(|b| b.mean).fold(f64::INFINITY, f64::min);
    let (a, b) = if allow_constant && (inl.len() < 2 || span < MIN_SLOPE_SPAN) {
        (0.0, my)
    } else {
        let sxx: f64 = inl
            .iter()
            .map(|b| b.count as f64 * (b.mean - mx).powi(2))
            .sum();
        let sxy: f64 = inl
            .iter()
            .map(|b| b.count as f64 * (b.mean - mx) * (b.variance - my))
            .sum();
        if sxx <= 0.0 {
            return Err(Error::Estimation("bin intensities are all identical".into()));
        }
        let a = sxy / sxx;
        (a, my - a * mx)
    };
    let b = b.max(0.0);
    let a = a.max(-b);
    // normalise -0.0
    Ok((a + 0.0, b + 0.0))
}

/// Estimates the NLF from a clean/noisy pair via the residual `noisy − clean`,
/// binned by clean intensity into `n_bins` equal bins over `[0, 1]`.
pub fn estimate_nlf_paired(clean: &Tensor, noisy: &Tensor, n_bins: usize) -> Result<NlfFit> {
    clean.expect_same_shape(noisy)?;
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    // per bin: count, sum x, sum r, sum r^2 (shifted by bin-free mean 0 is fine in f64)
    let mut acc = vec![(0usize, 0.0f64, 0.0f64, 0.0f64); n_bins];
    let mut max_x = f64::NEG_INFINITY;
    for (&c, &n) in clean.data().iter().zip(noisy.data()) {
        let x = c as f64;
        max_x = max_x.max(x);
        if let Some(i) = bin_index(x, n_bins) {
            let r = n as f64 - x;
            let e = &mut acc[i];
            e.0 += 1;
            e.1 += x;
            e.2 += r;
            e.3 += r * r;
        }
    }
    let bins: Vec<BinStat> = acc
        .into_iter()
        .filter(|e| e.0 > 0)
        .map(|(n, sx, sr, srr)| {
            let nf = n as f64;
            let mean = sx / nf;
            let variance = if n > 1 {
                ((srr - sr * sr / nf) / (nf - 1.0)).max(0.0)
            } else {
                0.0
            };
            BinStat {
                mean,
                variance,
                count: n,
                inlier: n >= MIN_BIN_SAMPLES && mean <= HIGH_INTENSITY_CUTOFF * max_x,
            }
        })
        .collect();
    let (a, b) = fit_line(&bins, false)?;
    Ok(NlfFit { a, b, bins })
}

fn box_residual_block_stats(plane: &[f32], h: usize, w: usize, out: &mut Vec<(f64, f64)>) {
    // Residual is defined where the 3x3 window fits; blocks tile that interior.
    let by = (h.saturating_sub(2)) / BLOCK;
    let bx = (w.saturating_sub(2)) / BLOCK;
    let at = |y: usize, x: usize| plane[y * w + x] as f64;
    for j in 0..by {
        for i in 0..bx {
            let (mut s, mut ss, mut sum_x) = (0.0, 0.0, 0.0);
            for dy in 0..BLOCK {
                for dx in 0..BLOCK {
                    let (y, x) = (1 + j * BLOCK + dy, 1 + i * BLOCK + dx);
                    let mut box_sum = 0.0;
                    for yy in y - 1..=y + 1 {
                        for xx in x - 1..=x + 1 {
                            box_sum += at(yy, xx);
                        }
                    }
                    let v = at(y, x);
                    let r = v - box_sum / 9.0;
                    s += r;
                    ss += r * r;
                    sum_x += v;
                }
            }
            let n = (BLOCK * BLOCK) as f64;
            let var = ((ss - s * s / n) / (n - 1.0)).max(0.0);
            out.push((sum_x / n, var));
        }
    }
}

/// Estimates the NLF from a single noisy image.
///
/// The last two axes of `noisy` are image planes (at least 64×64); every
/// leading index is treated as an independent plane. For each 8×8 block the
/// variance of the residual after 3×3 box smoothing is measured, then per
/// intensity bin the 0.5% lower quantile of block variances (the flattest
/// blocks) is rescaled to a white-noise variance using the calibrated block
/// statistics. Bins with fewer than 8 blocks are dropped; when the remaining
/// bins span too little intensity to identify a slope, a constant-variance
/// fit (`a = 0`) is returned.
pub fn estimate_nlf_single(noisy: &Tensor, n_bins: usize) -> Result<NlfFit> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    let shape = noisy.shape();
    if shape.len() < 2 {
        return Err(shape_err!("single-image estimation needs a 2-D plane, got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < 64 || w < 64 {
        return Err(shape_err!("single-image estimation needs at least 64x64, got {h}x{w}"));
    }
    let mut blocks = Vec::new();
    for plane in noisy.data().chunks(h * w) {
        box_residual_block_stats(plane, h, w, &mut blocks);
    }
    let mut per_bin: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_bins];
    for &(m, v) in &blocks {
        if let Some(i) = bin_index(m, n_bins) {
            per_bin[i].push((m, v));
        }
    }
    let chi = ChiSquared::new(RESIDUAL_DOF).expect("positive dof");
    let bins: Vec<BinStat> = per_bin
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(|mut b| {
            let n = b.len();
            b.sort_by(|x, y| x.1.total_cmp(&y.1));
            let k = ((SINGLE_IMAGE_QUANTILE * n as f64).ceil() as usize).max(1);
            let p = k as f64 / (n as f64 + 1.0);
            let ratio = chi.inverse_cdf(p) / RESIDUAL_DOF;
            let variance = b[k - 1].1 / (RESIDUAL_VARIANCE_FACTOR * ratio);
            BinStat {
                mean: b.iter().map(|e| e.0).sum::<f64>() / n as f64,
                variance,
                count: n,
                inlier: n >= MIN_BIN_BLOCKS,
            }
        })
        .collect();
    let (a, b) = fit_line(&bins, true)?;
    Ok(NlfFit { a, b, bins })
}
