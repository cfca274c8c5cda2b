//! Training: sample preparation, L1 loss, Adam with a cosine schedule,
//! checkpoints and PSNR validation.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::network::{Denoiser, NetworkConfig};
use crate::nn::{ParamEntry, ParamStore};
use crate::noise::{build_noise_map, sample_poisson_gaussian, sample_training_noise, NoiseProfile};
use crate::raw::{dihedral_transform, load_normalized, Dihedral};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Reported PSNR when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Side of the square crop, in packed pixels.
    pub crop_size: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_size: 128,
            batch_size: 4,
            total_steps: 1000,
            lr_start: 1e-4,
            lr_end: 5e-7,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_interval: 0,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let min_crop = self.network.size_multiple() * 8;
        if self.crop_size % 2 != 0 || self.crop_size < min_crop {
            return Err(Error::Config(format!(
                "crop_size {} must be even and at least {min_crop}",
                self.crop_size
            )));
        }
        if self.crop_size % self.network.size_multiple() != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be a multiple of {}",
                self.crop_size,
                self.network.size_multiple()
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        if !(self.lr_end < self.lr_start && self.lr_end >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 <= lr_end < lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(s / pred.len().max(1) as f64)
}

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))`, exact at both ends.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule 0..={total_steps}"
        )));
    }
    if step == 0 {
        return Ok(lr_start);
    }
    if step == total_steps {
        return Ok(lr_end);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (PI * t).cos()))
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// zeroed afterwards. A non-finite gradient aborts the step and leaves the
/// store untouched.
pub fn adam_step(store: &mut ParamStore, lr: f64, adam: &AdamConfig) -> Result<()> {
    for (name, p) in store.iter() {
        if !p.grad.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient in {name}; optimizer step aborted"
            )));
        }
    }
    store.adam_steps += 1;
    let t = store.adam_steps as i32;
    let (b1, b2) = (adam.beta1, adam.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (_, p) in store.iter_mut() {
        let grad = p.grad.data();
        let (m, v) = (p.m.data_mut(), p.v.data_mut());
        let value = p.value.data_mut();
        for i in 0..value.len() {
            let g = grad[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let upd = lr * (mi / c1) / ((vi / c2).sqrt() + adam.eps);
            value[i] = (value[i] as f64 - upd) as f32;
        }
    }
    store.zero_grads();
    Ok(())
}

/// `10·log10(1/MSE)` with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.is_empty() {
        return Err(shape_err!("PSNR of empty tensors"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub y: usize,
    pub x: usize,
    pub dihedral: usize,
    pub sensor_id: String,
    pub iso: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub noisy: Tensor,
    pub noise_map: Tensor,
    pub clean: Tensor,
    pub record: SampleRecord,
}

fn crop(x: &Tensor, y0: usize, x0: usize, size: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = Vec::with_capacity(b * c * size * size);
    for plane in x.data().chunks(h * w) {
        for y in y0..y0 + size {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + size]);
        }
    }
    Tensor::from_vec(&[b, c, size, size], out)
}

/// Random crop, random dihedral element, then synthetic noise on the crop.
/// The noise map is built from the noisy crop. Returns `None` (with a
/// warning) when the image is smaller than the crop.
pub fn make_training_sample(
    clean: &Tensor,
    profiles: &[NoiseProfile],
    crop_size: usize,
    rng: &mut impl Rng,
) -> Result<Option<TrainingSample>> {
    let (_, _, h, w) = clean.dims4()?;
    if h < crop_size || w < crop_size {
        log::warn!("skipping {h}x{w} image smaller than crop {crop_size}");
        return Ok(None);
    }
    let y = rng.random_range(0..=h - crop_size);
    let x = rng.random_range(0..=w - crop_size);
    let g = Dihedral::new(rng.random_range(0..8))?;
    let clean = dihedral_transform(&crop(clean, y, x, crop_size)?, g)?;
    let noise = sample_training_noise(profiles, rng)?;
    let noisy = sample_poisson_gaussian(&clean, noise.a, noise.b, rng)?;
    let noise_map = build_noise_map(&noisy, noise.a, noise.b)?;
    Ok(Some(TrainingSample {
        noisy,
        noise_map,
        clean,
        record: SampleRecord {
            y,
            x,
            dihedral: g.index(),
            sensor_id: noise.sensor_id,
            iso: noise.iso,
            a: noise.a,
            b: noise.b,
        },
    }))
}

/// A held-out image with fixed noise.
#[derive(Clone, Debug)]
pub struct ValSample {
    pub noisy: Tensor,
    pub noise_map: Tensor,
    pub clean: Tensor,
}

impl ValSample {
    /// Synthesises fixed noise with coefficients `(a, b)` on `clean`.
    pub fn synthesize(clean: Tensor, a: f64, b: f64, rng: &mut impl Rng) -> Result<Self> {
        let noisy = sample_poisson_gaussian(&clean, a, b, rng)?;
        let noise_map = build_noise_map(&noisy, a, b)?;
        Ok(ValSample {
            noisy,
            noise_map,
            clean,
        })
    }
}

/// Mean PSNR of the denoised validation images (full size, reflect-padded).
pub fn validate(net: &Denoiser, store: &ParamStore, val: &[ValSample]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let mut total = 0.0;
    for v in val {
        total += psnr(&net.denoise(store, &v.noisy, &v.noise_map)?, &v.clean)?;
    }
    Ok(total / val.len() as f64)
}

/// Mean PSNR of the noisy inputs, for reference.
pub fn noisy_psnr(val: &[ValSample]) -> Result<f64> {
    let mut total = 0.0;
    for v in val {
        total += psnr(&v.noisy, &v.clean)?;
    }
    Ok(total / val.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self, path: &Path) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad word_pos {:?}", self.word_pos),
        })?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub adam_steps: u64,
    pub config: TrainConfig,
    pub entries: Vec<ParamEntry>,
    pub last_val: Option<ValRecord>,
    pub best_val: Option<ValRecord>,
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub store: ParamStore,
    pub rng: ChaCha8Rng,
    pub last_val: Option<ValRecord>,
    pub best_val: Option<ValRecord>,
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("step_{step}"))
}

/// Writes `step_<N>/` with parameters, moments, `manifest.json` and `rng.json`.
pub fn save_checkpoint(out: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<PathBuf> {
    let dir = checkpoint_dir(out, state.step);
    state.store.save(&dir, true)?;
    let manifest = Manifest {
        step: state.step,
        adam_steps: state.store.adam_steps,
        config: cfg.clone(),
        entries: state.store.entries(),
        last_val: state.last_val,
        best_val: state.best_val,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("rng.json"), &RngState::capture(&state.rng))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join("manifest.json"))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, TrainState)> {
    let manifest = load_manifest(dir)?;
    let mut store = ParamStore::load(dir, &manifest.entries)?;
    store.adam_steps = manifest.adam_steps;
    let rng_path = dir.join("rng.json");
    let rng = read_json::<RngState>(&rng_path)?.restore(&rng_path)?;
    let state = TrainState {
        step: manifest.step,
        store,
        rng,
        last_val: manifest.last_val,
        best_val: manifest.best_val,
    };
    Ok((manifest, state))
}

/// Reads training images from a directory: RAW mosaics with sidecars are
/// packed and normalised, bare tensors are taken as normalised packed data.
/// Batched tensors are split into single images.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "ntf") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let t = load_normalized(&p)?;
        for b in 0..t.shape()[0] {
            out.push(t.batch_item(b)?);
        }
    }
    Ok(out)
}

/// Runs optimisation steps over a fixed data set.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Denoiser,
    data: Vec<Tensor>,
    profiles: Vec<NoiseProfile>,
    val: Vec<ValSample>,
}

impl Trainer {
    /// Images smaller than the crop are dropped with a warning.
    pub fn new(cfg: TrainConfig, data: Vec<Tensor>, profiles: Vec<NoiseProfile>) -> Result<Self> {
        cfg.validate()?;
        if profiles.is_empty() {
            return Err(Error::InvalidArgument("no noise profiles".into()));
        }
        let net = Denoiser::new(&cfg.network)?;
        let want = cfg.network.out_channels();
        let mut kept = Vec::with_capacity(data.len());
        for (i, img) in data.into_iter().enumerate() {
            let (b, c, h, w) = img.dims4()?;
            if b != 1 || c != want {
                return Err(shape_err!("training image {i} is {:?}, expected 1x{want}xHxW", img.shape()));
            }
            if h < cfg.crop_size || w < cfg.crop_size {
                log::warn!("skipping training image {i}: {h}x{w} is smaller than crop {}", cfg.crop_size);
                continue;
            }
            kept.push(img);
        }
        if kept.is_empty() {
            return Err(Error::InvalidArgument("no usable training images".into()));
        }
        Ok(Trainer {
            cfg,
            net,
            data: kept,
            profiles,
            val: Vec::new(),
        })
    }

    pub fn with_validation(mut self, val: Vec<ValSample>) -> Self {
        self.val = val;
        self
    }

    pub fn num_images(&self) -> usize {
        self.data.len()
    }

    pub fn init_state(&self) -> Result<TrainState> {
        Ok(TrainState {
            step: 0,
            store: self.net.init_params(self.cfg.seed)?,
            rng: ChaCha8Rng::seed_from_u64(self.cfg.seed),
            last_val: None,
            best_val: None,
        })
    }

    /// Image order within epoch `epoch`, derived from the seed alone so that
    /// resuming needs no extra state.
    fn image_index(&self, sample: usize) -> usize {
        let n = self.data.len();
        let epoch = sample / n;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        perm.shuffle(&mut rng);
        perm[sample % n]
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let lr = cosine_lr(state.step, self.cfg.total_steps, self.cfg.lr_start, self.cfg.lr_end)?;
        let bs = self.cfg.batch_size;
        let mut noisy = Vec::with_capacity(bs);
        let mut maps = Vec::with_capacity(bs);
        let mut clean = Vec::with_capacity(bs);
        for i in 0..bs {
            let img = &self.data[self.image_index(state.step * bs + i)];
            let s = make_training_sample(img, &self.profiles, self.cfg.crop_size, &mut state.rng)?
                .expect("images are pre-filtered by size");
            noisy.push(s.noisy);
            maps.push(s.noise_map);
            clean.push(s.clean);
        }
        let mut tape = Tape::<f32>::new();
        let bound = state.store.bind(&mut tape);
        let x = tape.constant(Tensor::stack_batch(&noisy)?);
        let m = tape.constant(Tensor::stack_batch(&maps)?);
        let target = tape.constant(Tensor::stack_batch(&clean)?);
        let pred = self.net.forward(&mut tape, &bound, x, m)?;
        let loss = tape.l1_loss(pred, target)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}", state.step)));
        }
        let grads = tape.backward(loss)?;
        state.store.accumulate_grads(&bound, &grads);
        adam_step(&mut state.store, lr, &self.cfg.adam)?;
        state.step += 1;
        Ok(StepRecord {
            step: state.step,
            lr,
            loss: loss_value,
        })
    }

    fn run_validation(&self, state: &mut TrainState) -> Result<()> {
        if self.val.is_empty() {
            return Ok(());
        }
        let rec = ValRecord {
            step: state.step,
            psnr: validate(&self.net, &state.store, &self.val)?,
        };
        state.last_val = Some(rec);
        if state.best_val.is_none_or(|b| rec.psnr > b.psnr) {
            state.best_val = Some(rec);
        }
        Ok(())
    }

    /// Trains until `total_steps`. With `out`, appends to `out/train.log` and
    /// writes checkpoints every `checkpoint_interval` steps and at the end.
    pub fn run(
        &self,
        state: &mut TrainState,
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train.log");
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(f)))
            }
            None => None,
        };
        let mut records = Vec::new();
        let interval = self.cfg.checkpoint_interval;
        while state.step < self.cfg.total_steps {
            let rec = self.step(state)?;
            on_step(&rec);
            records.push(rec);
            if let Some((path, w)) = log.as_mut() {
                let line = serde_json::to_string(&rec).map_err(|e| Error::json(&*path, e))?;
                writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            let last = state.step == self.cfg.total_steps;
            if last || (interval > 0 && state.step % interval == 0) {
                self.run_validation(state)?;
                if let Some(dir) = out {
                    if let Some((path, w)) = log.as_mut() {
                        w.flush().map_err(|e| Error::io(&*path, e))?;
                    }
                    save_checkpoint(dir, &self.cfg, state)?;
                }
            }
        }
        Ok(records)
    }
}

/// Trains from scratch and returns the final state.
pub fn train(
    cfg: TrainConfig,
    data: Vec<Tensor>,
    profiles: Vec<NoiseProfile>,
    out: Option<&Path>,
) -> Result<TrainState> {
    let trainer = Trainer::new(cfg, data, profiles)?;
    let mut state = trainer.init_state()?;
    trainer.run(&mut state, out, |_| {})?;
    Ok(state)
}

/// Mean over trailing windows of `window` losses: `(first window, last window)`.
pub fn windowed_losses(records: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if window == 0 || records.len() < window {
        return None;
    }
    let mean = |r: &[StepRecord]| r.iter().map(|s| s.loss).sum::<f64>() / r.len() as f64;
    Some((mean(&records[..window]), mean(&records[records.len() - window..])))
}

/// Smooth random textures in `[0.05, 0.95]`: sums of oriented sinusoids
/// with a few sharp-edged rectangles, shared across channels with small
/// per-channel gains.
pub fn synthetic_textures(count: usize, channels: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let waves: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    let theta = rng.random_range(0.0..PI);
                    let freq = rng.random_range(0.03..0.25);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let amp = rng.random_range(0.05..0.2);
                    (theta, freq, phase, amp)
                })
                .collect();
            let rects: Vec<(usize, usize, usize, usize, f64)> = (0..3)
                .map(|_| {
                    let y0 = rng.random_range(0..h);
                    let x0 = rng.random_range(0..w);
                    let rh = rng.random_range(h / 8..=h / 2);
                    let rw = rng.random_range(w / 8..=w / 2);
                    (y0, x0, rh, rw, rng.random_range(-0.2..0.2))
                })
                .collect();
            let base = rng.random_range(0.3..0.7);
            let gains: Vec<f64> = (0..channels).map(|_| rng.random_range(0.8..1.2)).collect();
            let mut plane = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut v = base;
                    for &(theta, freq, phase, amp) in &waves {
                        let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                        v += amp * (2.0 * PI * freq * u + phase).sin();
                    }
                    for &(y0, x0, rh, rw, d) in &rects {
                        if (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x) {
                            v += d;
                        }
                    }
                    plane[y * w + x] = v;
                }
            }
            let mut data = Vec::with_capacity(channels * h * w);
            for g in &gains {
                data.extend(plane.iter().map(|&v| ((v - 0.5) * g + 0.5).clamp(0.05, 0.95) as f32));
            }
            Tensor::from_vec(&[1, channels, h, w], data).expect("consistent shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_examples() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f32);
        assert_eq!(l1_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(l1_loss(&t.map(|v| v + 0.5), &t).unwrap(), 0.5);
        assert!(l1_loss(&t, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn cosine_endpoints_midpoint_and_range() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 5e-7).unwrap(), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 5e-7).unwrap(), 5e-7);
        let mid = cosine_lr(50, 100, 1e-4, 5e-7).unwrap();
        assert!((mid - (1e-4 + 5e-7) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 1e-4, 5e-7).is_err());
    }

    #[test]
    fn psnr_examples() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32 / 16.0);
        assert!(psnr(&x, &x).unwrap() >= 99.0);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig {
            crop_size: 30,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.crop_size = 128;
        c.lr_end = 1e-3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn textures_are_in_range_and_seeded() {
        let a = synthetic_textures(2, 4, 16, 16, 3);
        let b = synthetic_textures(2, 4, 16, 16, 3);
        assert_eq!(a, b);
        assert!(a[0].data().iter().all(|&v| (0.05..=0.95).contains(&v)));
    }
}
