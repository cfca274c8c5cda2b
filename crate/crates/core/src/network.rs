//! The multiscale UNet denoiser.
//!
//! ```text
//! concat(noisy, noise map) -> head 3x3
//!   scale 0: NL block ----------------------------------+ (add) -> NL block -> tail 3x3
//!            down 2x2/2                                 up 2x2/2
//!   scale 1: NL block -------------------+ (add) -> NL block
//!            down 2x2/2                  up 2x2/2
//!   scale 2:           NL block (bottom)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nlfemf::{Matching, NlBlock, NlfemfConfig};
use crate::nn::{self, Bound, Conv, Module, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Packed Bayer input: 4 image channels plus a 4-channel noise map.
    #[default]
    Raw,
    /// RGB input with a single constant σ/255 noise-map channel.
    Awgn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub scales: usize,
    pub k_per_scale: Vec<usize>,
    pub c_per_scale: Vec<usize>,
    pub search_radius: f64,
    #[serde(default)]
    pub matching: Matching,
    #[serde(default)]
    pub mode: Mode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            scales: 3,
            k_per_scale: vec![15, 9, 7],
            c_per_scale: vec![48, 96, 192],
            search_radius: 9.0,
            matching: Matching::LearnedOffsets,
            mode: Mode::Raw,
        }
    }
}

impl NetworkConfig {
    /// Two scales, `C = [4, 8]`, `K = [2, 2]`: small enough for exhaustive gradient checks.
    pub fn micro() -> Self {
        NetworkConfig {
            scales: 2,
            k_per_scale: vec![2, 2],
            c_per_scale: vec![4, 8],
            search_radius: 2.0,
            ..Default::default()
        }
    }

    pub fn single_scale(channels: usize, neighbors: usize, radius: f64) -> Self {
        NetworkConfig {
            scales: 1,
            k_per_scale: vec![neighbors],
            c_per_scale: vec![channels],
            search_radius: radius,
            ..Default::default()
        }
    }

    /// Same core for RGB images with additive Gaussian noise; only the
    /// head and tail channel counts change.
    pub fn build_awgn_variant(&self) -> Self {
        NetworkConfig {
            mode: Mode::Awgn,
            ..self.clone()
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.mode {
            Mode::Raw => 4,
            Mode::Awgn => 3,
        }
    }

    pub fn noise_map_channels(&self) -> usize {
        match self.mode {
            Mode::Raw => 4,
            Mode::Awgn => 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.out_channels() + self.noise_map_channels()
    }

    /// Spatial extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales.max(1) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.k_per_scale.len() != self.scales || self.c_per_scale.len() != self.scales {
            return Err(Error::Config(format!(
                "{} scales but {} neighbor counts and {} widths",
                self.scales,
                self.k_per_scale.len(),
                self.c_per_scale.len()
            )));
        }
        for s in 0..self.scales {
            self.nlfemf_config(s).validate()?;
        }
        Ok(())
    }

    pub fn nlfemf_config(&self, scale: usize) -> NlfemfConfig {
        NlfemfConfig {
            matching: self.matching,
            ..NlfemfConfig::new(
                self.c_per_scale[scale],
                self.k_per_scale[scale],
                self.search_radius,
            )
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: NetworkConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Layer graph of the denoiser for one [`NetworkConfig`].
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: NetworkConfig,
    pub head: Conv,
    pub encoders: Vec<NlBlock>,
    pub downs: Vec<Conv>,
    pub bottom: NlBlock,
    pub ups: Vec<Conv>,
    pub decoders: Vec<NlBlock>,
    pub tail: Conv,
}

impl Denoiser {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.c_per_scale;
        let last = cfg.scales - 1;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for s in 0..last {
            encoders.push(NlBlock::new(&format!("enc{s}"), cfg.nlfemf_config(s))?);
            downs.push(Conv::strided_down(format!("down{s}"), c[s], c[s + 1], 2));
            ups.push(Conv::strided_up(format!("up{s}"), c[s + 1], c[s], 2));
            decoders.push(NlBlock::new(&format!("dec{s}"), cfg.nlfemf_config(s))?);
        }
        Ok(Denoiser {
            head: Conv::new("head", cfg.in_channels(), c[0], 3),
            bottom: NlBlock::new("bottom", cfg.nlfemf_config(last))?,
            tail: Conv::new("tail", c[0], cfg.out_channels(), 3),
            encoders,
            downs,
            ups,
            decoders,
            cfg: cfg.clone(),
        })
    }

    fn check_input(&self, noisy: &Tensor<impl Scalar>, map: &Tensor<impl Scalar>) -> Result<()> {
        let (b, c, h, w) = noisy.dims4()?;
        let (mb, mc, mh, mw) = map.dims4()?;
        if c != self.cfg.out_channels() {
            return Err(shape_err!(
                "noisy input has {c} channels, expected {}",
                self.cfg.out_channels()
            ));
        }
        if mc != self.cfg.noise_map_channels() || (mb, mh, mw) != (b, h, w) {
            return Err(shape_err!(
                "noise map {:?} incompatible with input {:?}",
                map.shape(),
                noisy.shape()
            ));
        }
        let m = self.cfg.size_multiple();
        if h % m != 0 || w % m != 0 {
            let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
            return Err(shape_err!(
                "spatial size {h}x{w} must be a multiple of {m}; pad by {} rows and {} columns to {ph}x{pw}",
                ph - h,
                pw - w
            ));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, noisy: Var, noise_map: Var) -> Result<Var> {
        self.check_input(tape.value(noisy), tape.value(noise_map))?;
        let x = tape.concat_channels(&[noisy, noise_map])?;
        let mut f = self.head.forward(tape, p, x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            f = enc.forward(tape, p, f)?;
            skips.push(f);
            f = down.forward(tape, p, f)?;
        }
        f = self.bottom.forward(tape, p, f)?;
        for ((up, dec), skip) in self.ups.iter().zip(&self.decoders).zip(skips).rev() {
            f = up.forward(tape, p, f)?;
            f = tape.add(f, skip)?;
            f = dec.forward(tape, p, f)?;
        }
        self.tail.forward(tape, p, f)
    }

    /// Inference on arbitrary spatial sizes: reflect-pads to the required
    /// multiple, runs the network and crops back.
    pub fn denoise(&self, store: &ParamStore, noisy: &Tensor, noise_map: &Tensor) -> Result<Tensor> {
        let m = self.cfg.size_multiple();
        let (noisy_p, rec) = pad_reflect_to_multiple(noisy, m)?;
        let (map_p, _) = pad_reflect_to_multiple(noise_map, m)?;
        let mut tape = Tape::<f32>::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(noisy_p);
        let nm = tape.constant(map_p);
        let y = self.forward(&mut tape, &p, x, nm)?;
        rec.crop(tape.value(y))
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        nn::init_module(self, seed)
    }

    pub fn count_params(&self) -> usize {
        nn::count_module_params(self)
    }

    fn all_blocks(&self) -> impl Iterator<Item = &NlBlock> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.bottom))
            .chain(&self.decoders)
    }

    /// Sets every NL block to its identity configuration.
    pub fn set_identity_blocks(&self, store: &mut ParamStore) -> Result<()> {
        self.all_blocks().try_for_each(|b| b.set_identity(store))
    }
}

impl Module for Denoiser {
    fn visit_convs<'a>(&'a self, f: &mut dyn FnMut(&'a Conv)) {
        f(&self.head);
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            enc.visit_convs(f);
            f(down);
        }
        self.bottom.visit_convs(f);
        for (up, dec) in self.ups.iter().zip(&self.decoders).rev() {
            f(up);
            dec.visit_convs(f);
        }
        f(&self.tail);
    }
}

pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    Denoiser::new(cfg)?.init_params(seed)
}

pub fn count_params(cfg: &NetworkConfig) -> Result<usize> {
    Ok(Denoiser::new(cfg)?.count_params())
}

/// Constant noise map `B × 1 × H × W` holding `sigma / 255`.
pub fn awgn_noise_map(batch: usize, h: usize, w: usize, sigma_255: f64) -> Tensor {
    Tensor::full(&[batch, 1, h, w], (sigma_255 / 255.0) as f32)
}

/// Original spatial size of a padded tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    pub fn crop<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (b, c, h, w) = x.dims4()?;
        if self.height > h || self.width > w {
            return Err(shape_err!(
                "cannot crop {h}x{w} to {}x{}",
                self.height,
                self.width
            ));
        }
        if (h, w) == (self.height, self.width) {
            return Ok(x.clone());
        }
        let (oh, ow) = (self.height, self.width);
        let src = x.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in src.chunks(h * w) {
            for row in plane.chunks(w).take(oh) {
                out.extend_from_slice(&row[..ow]);
            }
        }
        Tensor::from_vec(&[b, c, oh, ow], out)
    }
}

/// Mirror index without edge repetition, valid for any `i`.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges so height and width become multiples of `m`.
pub fn pad_reflect_to_multiple<S: Scalar>(x: &Tensor<S>, m: usize) -> Result<(Tensor<S>, CropRecord)> {
    if m == 0 {
        return Err(Error::InvalidArgument("padding multiple must be >= 1".into()));
    }
    let (b, c, h, w) = x.dims4()?;
    let rec = CropRecord {
        height: h,
        width: w,
    };
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok((x.clone(), rec));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * ph * pw);
    for plane in src.chunks(h * w) {
        for y in 0..ph {
            let row = &plane[reflect_index(y, h) * w..][..w];
            out.extend((0..pw).map(|xi| row[reflect_index(xi, w)]));
        }
    }
    Ok((Tensor::from_vec(&[b, c, ph, pw], out)?, rec))
}
