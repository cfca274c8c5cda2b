//! Bayer packing, black-level normalisation, dihedral augmentation and the
//! on-disk RAW exchange format (NTF mosaic plus JSON sidecar).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Canonical packed channel order.
pub const PACKED_CHANNELS: [&str; 4] = ["R", "Gr", "B", "Gb"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Cfa {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl Cfa {
    /// `(row, col)` of the R, Gr, B and Gb sites inside the 2×2 tile.
    pub fn sites(self) -> [(usize, usize); 4] {
        match self {
            Cfa::Rggb => [(0, 0), (0, 1), (1, 1), (1, 0)],
            Cfa::Bggr => [(1, 1), (1, 0), (0, 0), (0, 1)],
            Cfa::Grbg => [(0, 1), (0, 0), (1, 0), (1, 1)],
            Cfa::Gbrg => [(1, 0), (1, 1), (0, 1), (0, 0)],
        }
    }
}

impl FromStr for Cfa {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(Cfa::Rggb),
            "BGGR" => Ok(Cfa::Bggr),
            "GRBG" => Ok(Cfa::Grbg),
            "GBRG" => Ok(Cfa::Gbrg),
            _ => Err(Error::InvalidArgument(format!(
                "unknown CFA pattern {s:?} (expected RGGB, BGGR, GRBG or GBRG)"
            ))),
        }
    }
}

impl TryFrom<String> for Cfa {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Cfa> for String {
    fn from(c: Cfa) -> String {
        c.to_string()
    }
}

impl fmt::Display for Cfa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cfa::Rggb => "RGGB",
            Cfa::Bggr => "BGGR",
            Cfa::Grbg => "GRBG",
            Cfa::Gbrg => "GBRG",
        })
    }
}

/// Black level, either shared or per packed channel in R, Gr, B, Gb order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlackLevel {
    Scalar(f64),
    PerChannel([f64; 4]),
}

impl BlackLevel {
    pub fn channel(&self, c: usize) -> f64 {
        match *self {
            BlackLevel::Scalar(v) => v,
            BlackLevel::PerChannel(v) => v[c],
        }
    }
}

/// The JSON sidecar stored next to a mosaic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub cfa: Cfa,
    pub black_level: BlackLevel,
    pub saturation: f64,
    pub iso: f64,
    pub sensor_id: String,
}

impl RawMeta {
    pub fn validate(&self) -> Result<()> {
        for c in 0..4 {
            let bl = self.black_level.channel(c);
            if !bl.is_finite() || !self.saturation.is_finite() || self.saturation <= bl {
                return Err(Error::InvalidArgument(format!(
                    "saturation {} must exceed black level {bl} ({})",
                    self.saturation, PACKED_CHANNELS[c]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    /// `1×1×H×W` sensor values.
    pub mosaic: Tensor,
    pub meta: RawMeta,
}

/// Half-resolution four-channel image in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedRaw {
    /// `1×4×H/2×W/2`.
    pub data: Tensor,
    pub meta: RawMeta,
}

fn mosaic_dims(mosaic: &Tensor) -> Result<(usize, usize)> {
    match *mosaic.shape() {
        [1, 1, h, w] | [h, w] => {
            if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                return Err(shape_err!("mosaic must have even non-zero dimensions, got {h}x{w}"));
            }
            Ok((h, w))
        }
        ref s => Err(shape_err!("mosaic must be HxW or 1x1xHxW, got {s:?}")),
    }
}

impl RawImage {
    pub fn new(mosaic: Tensor, meta: RawMeta) -> Result<Self> {
        let (h, w) = mosaic_dims(&mosaic)?;
        meta.validate()?;
        Ok(RawImage {
            mosaic: mosaic.reshape(&[1, 1, h, w])?,
            meta,
        })
    }

    /// Reads `<stem>.ntf` and its `<stem>.json` sidecar.
    pub fn load(ntf: &Path) -> Result<Self> {
        let side = sidecar_path(ntf);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: RawMeta = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        RawImage::new(Tensor::load(ntf)?, meta).map_err(|e| match e {
            Error::Shape(msg) | Error::InvalidArgument(msg) => Error::Format {
                path: ntf.to_path_buf(),
                msg,
            },
            e => e,
        })
    }

    pub fn save(&self, ntf: &Path) -> Result<()> {
        self.mosaic.save(ntf)?;
        let side = sidecar_path(ntf);
        let text = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json(&side, e))?;
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }
}

pub fn sidecar_path(ntf: &Path) -> PathBuf {
    ntf.with_extension("json")
}

/// Lists `*.ntf` files in `dir` that have a JSON sidecar, sorted by name.
pub fn raw_pairs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "ntf") && sidecar_path(&p).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn pack(raw: &RawImage) -> Result<PackedRaw> {
    let (h, w) = mosaic_dims(&raw.mosaic)?;
    let (ph, pw) = (h / 2, w / 2);
    let src = raw.mosaic.data();
    let mut data = vec![0.0f32; 4 * ph * pw];
    for (c, &(dy, dx)) in raw.meta.cfa.sites().iter().enumerate() {
        let plane = &mut data[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                plane[y * pw + x] = src[(2 * y + dy) * w + 2 * x + dx];
            }
        }
    }
    Ok(PackedRaw {
        data: Tensor::from_vec(&[1, 4, ph, pw], data)?,
        meta: raw.meta.clone(),
    })
}

pub fn unpack(packed: &PackedRaw) -> Result<RawImage> {
    let (b, c, ph, pw) = packed.data.dims4()?;
    if b != 1 || c != 4 {
        return Err(shape_err!("packed RAW must be 1x4xHxW, got {:?}", packed.data.shape()));
    }
    let (h, w) = (2 * ph, 2 * pw);
    let src = packed.data.data();
    let mut data = vec![0.0f32; h * w];
    for (c, &(dy, dx)) in packed.meta.cfa.sites().iter().enumerate() {
        let plane = &src[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                data[(2 * y + dy) * w + 2 * x + dx] = plane[y * pw + x];
            }
        }
    }
    Ok(RawImage {
        mosaic: Tensor::from_vec(&[1, 1, h, w], data)?,
        meta: packed.meta.clone(),
    })
}

fn per_channel(x: &Tensor, meta: &RawMeta, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
    meta.validate()?;
    let (_, c, h, w) = x.dims4()?;
    if c != 4 {
        return Err(shape_err!("expected 4 packed channels, got {c}"));
    }
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let bl = meta.black_level.channel(i % 4);
        for v in plane {
            *v = f(*v as f64, bl, meta.saturation) as f32;
        }
    }
    Ok(out)
}

/// `(x − black) / (saturation − black)` per packed channel, without clamping.
pub fn normalize(packed: &PackedRaw) -> Result<Tensor> {
    per_channel(&packed.data, &packed.meta, |x, bl, sat| (x - bl) / (sat - bl))
}

pub fn denormalize(y: &Tensor, meta: &RawMeta) -> Result<Tensor> {
    per_channel(y, meta, |y, bl, sat| y * (sat - bl) + bl)
}

/// Clamps to `[0, 1]`, for export only.
pub fn clip_unit(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Loads an input for the command line tools as a normalised `B×4×H×W`
/// tensor: a mosaic with a sidecar is packed and normalised, a bare tensor
/// is taken as already normalised (a missing batch axis is added).
pub fn load_normalized(path: &Path) -> Result<Tensor> {
    if sidecar_path(path).is_file() {
        return normalize(&pack(&RawImage::load(path)?)?);
    }
    let t = Tensor::load(path)?;
    let t = match *t.shape() {
        [_, _, _, _] => t,
        [c, h, w] => t.reshape(&[1, c, h, w])?,
        ref s => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected CxHxW or BxCxHxW tensor, got {s:?}"),
            })
        }
    };
    Ok(t)
}

/// An element of the dihedral group of the square: `flip^s ∘ rot90^k`,
/// indexed as `g = 4·s + k`. Rotations are counter-clockwise and the
/// rotation is applied before the flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn new(g: usize) -> Result<Self> {
        if g > 7 {
            return Err(Error::InvalidArgument(format!("dihedral index {g} not in 0..=7")));
        }
        Ok(Dihedral(g as u8))
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    fn parts(self) -> (u8, u8) {
        (self.0 / 4, self.0 % 4)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        let (s1, k1) = self.parts();
        let (s2, k2) = other.parts();
        // rot ∘ flip = flip ∘ rot⁻¹
        let k1 = if s2 == 1 { (4 - k1) % 4 } else { k1 };
        Dihedral(4 * ((s1 + s2) % 2) + (k1 + k2) % 4)
    }

    pub fn inverse(self) -> Dihedral {
        match self.parts() {
            (0, k) => Dihedral((4 - k) % 4),
            _ => self,
        }
    }
}

fn rot90_ccw<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for p in 0..b * c {
        let (s, o) = (&src[p * h * w..(p + 1) * h * w], &mut out[p * h * w..(p + 1) * h * w]);
        // output is w×h; out[i][j] = in[j][w-1-i]
        for i in 0..w {
            for j in 0..h {
                o[i * h + j] = s[j * w + (w - 1 - i)];
            }
        }
    }
    Tensor::from_vec(&[b, c, w, h], out)
}

fn flip_h<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, _, _, w) = x.dims4()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Applies dihedral element `g` to every channel of a `B×C×H×W` tensor.
pub fn dihedral_transform<S: Scalar>(x: &Tensor<S>, g: Dihedral) -> Result<Tensor<S>> {
    let (s, k) = g.parts();
    let mut y = x.clone();
    x.dims4()?;
    for _ in 0..k {
        y = rot90_ccw(&y)?;
    }
    if s == 1 {
        y = flip_h(&y)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(cfa: Cfa) -> RawMeta {
        RawMeta {
            cfa,
            black_level: BlackLevel::Scalar(64.0),
            saturation: 1023.0,
            iso: 100.0,
            sensor_id: "test".into(),
        }
    }

    #[test]
    fn rggb_and_bggr_pack_to_canonical_order() {
        let (r, g1, g2, b) = (1.0, 2.0, 3.0, 4.0);
        let rggb = RawImage::new(Tensor::from_vec(&[2, 2], vec![r, g1, g2, b]).unwrap(), meta(Cfa::Rggb)).unwrap();
        assert_eq!(pack(&rggb).unwrap().data.data(), &[r, g1, b, g2]);
        // BGGR: B and Gb on the first row, Gr and R on the second.
        let bggr = RawImage::new(Tensor::from_vec(&[2, 2], vec![b, g2, g1, r]).unwrap(), meta(Cfa::Bggr)).unwrap();
        assert_eq!(pack(&bggr).unwrap().data.data(), &[r, g1, b, g2]);
    }

    #[test]
    fn odd_dimensions_and_unknown_cfa_rejected() {
        assert!(RawImage::new(Tensor::zeros(&[3, 4]), meta(Cfa::Rggb)).is_err());
        assert!("RGBW".parse::<Cfa>().is_err());
        assert_eq!("gbrg".parse::<Cfa>().unwrap(), Cfa::Gbrg);
        assert!(serde_json::from_str::<RawMeta>(
            r#"{"cfa":"XYZW","black_level":0,"saturation":1,"iso":100,"sensor_id":"s"}"#
        )
        .is_err());
    }

    #[test]
    fn sidecar_accepts_scalar_and_per_channel_black() {
        let m: RawMeta = serde_json::from_str(
            r#"{"cfa":"RGGB","black_level":[60,64,62,64],"saturation":1023,"iso":800,"sensor_id":"s"}"#,
        )
        .unwrap();
        assert_eq!(m.black_level.channel(2), 62.0);
        let back: RawMeta = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let p = PackedRaw {
            data: Tensor::from_vec(&[1, 4, 1, 3], [64.0, 1023.0, 543.5].repeat(4)).unwrap(),
            meta: meta(Cfa::Rggb),
        };
        let y = normalize(&p).unwrap();
        assert_eq!(&y.data()[..2], &[0.0, 1.0]);
        assert!((y.data()[2] - 0.5).abs() < 1e-6);
        let mut bad = meta(Cfa::Rggb);
        bad.saturation = 64.0;
        assert!(normalize(&PackedRaw { data: p.data.clone(), meta: bad }).is_err());
    }

    #[test]
    fn negative_values_are_not_clamped() {
        let p = PackedRaw {
            data: Tensor::full(&[1, 4, 1, 1], 60.0),
            meta: meta(Cfa::Rggb),
        };
        assert!(normalize(&p).unwrap().data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = dihedral_transform(&x, Dihedral::new(1).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 2]);
        assert_eq!(y.data(), &[3.0, 6.0, 2.0, 5.0, 1.0, 4.0]);
        assert!(Dihedral::new(8).is_err());
    }
}
