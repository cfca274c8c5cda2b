//! Sensor noise model: Poisson-Gaussian synthesis, noise maps, ISO
//! interpolation of noise level functions, and NLF estimation.
//!
//! All coefficients are in black-level-subtracted, saturation-normalised
//! units, so intensity `x ∈ [0, 1]` has variance `a·x + b`.

mod estimate;

pub use estimate::{estimate_nlf_paired, estimate_nlf_single, BinStat, NlfFit, SINGLE_IMAGE_QUANTILE};

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub iso: f64,
    /// Shot-noise coefficient.
    pub a: f64,
    /// Read-noise variance.
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub sensor_id: String,
    pub points: Vec<NoisePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl NoiseProfile {
    pub fn new(sensor_id: impl Into<String>, points: Vec<NoisePoint>) -> Result<Self> {
        let p = NoiseProfile {
            sensor_id: sensor_id.into(),
            points,
            note: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Config(format!("profile {} has no points", self.sensor_id)));
        }
        for w in self.points.windows(2) {
            if !(w[0].iso < w[1].iso) {
                return Err(Error::Config(format!(
                    "profile {}: ISO values must be strictly increasing",
                    self.sensor_id
                )));
            }
        }
        for p in &self.points {
            if !(p.iso > 0.0) || !(p.a >= 0.0) || !(p.b >= 0.0) || !(p.a + p.b > 0.0) {
                return Err(Error::Config(format!(
                    "profile {}: invalid point {p:?}",
                    self.sensor_id
                )));
            }
        }
        Ok(())
    }

    pub fn iso_range(&self) -> (f64, f64) {
        (self.points[0].iso, self.points[self.points.len() - 1].iso)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: NoiseProfile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("profile serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a single profile file, or every `*.json` file of a directory in name order.
    pub fn load_all(path: &Path) -> Result<Vec<Self>> {
        if !path.is_dir() {
            return Ok(vec![Self::load(path)?]);
        }
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files.iter().map(|f| Self::load(f)).collect()
    }

    /// Coefficients at `iso`, interpolated linearly in `(log iso, log a)` and
    /// `(log iso, log b)` between bracketing points. A coefficient that is
    /// zero at either bracket is interpolated in the linear domain instead.
    pub fn interpolate_iso(&self, iso: f64) -> Result<(f64, f64)> {
        let (lo, hi) = self.iso_range();
        if !(iso >= lo && iso <= hi) {
            return Err(Error::InvalidArgument(format!(
                "ISO {iso} outside {lo}..={hi} for sensor {}",
                self.sensor_id
            )));
        }
        if let Some(p) = self.points.iter().find(|p| p.iso == iso) {
            return Ok((p.a, p.b));
        }
        let i = self.points.partition_point(|p| p.iso < iso);
        let (p0, p1) = (self.points[i - 1], self.points[i]);
        let t = (iso.ln() - p0.iso.ln()) / (p1.iso.ln() - p0.iso.ln());
        let lerp = |u: f64, v: f64| {
            if u > 0.0 && v > 0.0 {
                (u.ln() + t * (v.ln() - u.ln())).exp()
            } else {
                u + t * (v - u)
            }
        };
        Ok((lerp(p0.a, p1.a), lerp(p0.b, p1.b)))
    }
}

fn check_coefficients(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0) || !(b >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise coefficients must be non-negative, got a={a}, b={b}"
        )));
    }
    Ok(())
}

/// Draws `a·Poisson(x/a) + N(0, b)` independently per pixel (`x` clamped at 0).
/// With `a = 0` only the Gaussian term remains. The result is not clipped.
pub fn sample_poisson_gaussian(clean: &Tensor, a: f64, b: f64, rng: &mut impl Rng) -> Result<Tensor> {
    check_coefficients(a, b)?;
    let sd = b.sqrt();
    let mut out = clean.clone();
    for v in out.data_mut() {
        let x = (*v as f64).max(0.0);
        let shot = if a > 0.0 {
            let lambda = x / a;
            if lambda > 0.0 {
                let d = Poisson::new(lambda)
                    .map_err(|e| Error::Numerical(format!("Poisson({lambda}): {e}")))?;
                a * d.sample(rng)
            } else {
                0.0
            }
        } else {
            *v as f64
        };
        let read = if sd > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        } else {
            0.0
        };
        *v = (shot + read) as f32;
    }
    Ok(out)
}

/// Per-pixel noise standard deviation `sqrt(a·max(x, 0) + b)` from noisy intensities.
pub fn build_noise_map(noisy: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    check_coefficients(a, b)?;
    let (a32, b32) = (a as f32, b as f32);
    Ok(noisy.map(|x| (a32 * x.max(0.0) + b32).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingNoise {
    pub sensor_id: String,
    pub iso: f64,
    pub a: f64,
    pub b: f64,
}

/// Picks a sensor uniformly, then an ISO log-uniformly within its range.
pub fn sample_training_noise(profiles: &[NoiseProfile], rng: &mut impl Rng) -> Result<TrainingNoise> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("no noise profiles".into()));
    }
    let prof = &profiles[rng.random_range(0..profiles.len())];
    let (lo, hi) = prof.iso_range();
    let iso = if lo == hi {
        lo
    } else {
        let u: f64 = rng.random();
        (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
    };
    let (a, b) = prof.interpolate_iso(iso)?;
    Ok(TrainingNoise {
        sensor_id: prof.sensor_id.clone(),
        iso,
        a,
        b,
    })
}
