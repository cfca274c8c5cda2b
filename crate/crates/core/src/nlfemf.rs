//! Nonlocal feature matching and filtering.
//!
//! For every pixel the block
//!
//! 1. predicts `K` sub-pixel offsets inside a search window of radius `r`
//!    (or uses a fixed local window) and bilinearly gathers the features at
//!    those positions into a `C·K`-channel stack, slot `c·K + k`;
//! 2. filters the stack collaboratively: a per-channel `K→K` linear map
//!    (1×1 conv with `C` groups), elementwise shrinkage by a `(0,1)`
//!    modulation map computed from the untransformed stack by three
//!    depthwise 3×3 convs, then a second per-channel `K→K` map;
//! 3. aggregates the `C·K` filtered channels back to `C` with a 1×1 conv.
//!
//! [`NlBlock`] wraps the block between two ConvNeXt blocks.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv, ConvNeXtBlock, Module, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const OFFSET_LEAKY_SLOPE: f64 = 0.1;
const OFFSET_CNN_DEPTH: usize = 6;
const MODULATION_DEPTH: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Offsets predicted per pixel by a small CNN.
    #[default]
    LearnedOffsets,
    /// Fixed integer displacements over a centred rectangular window.
    LocalWindow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlfemfConfig {
    pub channels: usize,
    pub neighbors: usize,
    pub search_radius: f64,
    pub offset_hidden: usize,
    pub matching: Matching,
}

impl NlfemfConfig {
    pub fn new(channels: usize, neighbors: usize, search_radius: f64) -> Self {
        NlfemfConfig {
            channels,
            neighbors,
            search_radius,
            offset_hidden: channels,
            matching: Matching::LearnedOffsets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.neighbors == 0 || self.offset_hidden == 0 {
            return Err(Error::Config(format!(
                "channels, neighbors and offset width must be positive: {self:?}"
            )));
        }
        if !(self.search_radius >= 1.0) || !self.search_radius.is_finite() {
            return Err(Error::Config(format!(
                "search radius must be >= 1, got {}",
                self.search_radius
            )));
        }
        if self.matching == Matching::LocalWindow {
            local_window_shape(self.neighbors)?;
        }
        Ok(())
    }
}

/// Rows × columns of the local window holding `k` neighbours: the most
/// square factorisation into odd extents with rows ≤ columns (15 → 3×5).
pub fn local_window_shape(k: usize) -> Result<(usize, usize)> {
    (1..=k)
        .rev()
        .filter(|&h| h % 2 == 1 && k % h == 0)
        .map(|h| (h, k / h))
        .find(|&(h, w)| h <= w && w % 2 == 1)
        .ok_or_else(|| {
            Error::Config(format!(
                "local window matching needs K with an odd rectangular window, got {k}"
            ))
        })
}

/// Constant offsets `1 × 2K × h × w` for the centred local window, row-major.
pub fn local_window_offsets<S: Scalar>(k: usize, batch: usize, h: usize, w: usize) -> Result<Tensor<S>> {
    let (wh, ww) = local_window_shape(k)?;
    let mut pairs = Vec::with_capacity(k);
    for dy in 0..wh {
        for dx in 0..ww {
            pairs.push((dy as f64 - (wh / 2) as f64, dx as f64 - (ww / 2) as f64));
        }
    }
    let hw = h * w;
    Ok(Tensor::from_fn(&[batch, 2 * k, h, w], |i| {
        let ch = (i / hw) % (2 * k);
        let (dy, dx) = pairs[ch / 2];
        S::from_f64(if ch % 2 == 0 { dy } else { dx })
    }))
}

#[derive(Clone, Debug)]
pub struct NlfemfBlock {
    pub cfg: NlfemfConfig,
    pub offset_cnn: Vec<Conv>,
    pub transform: Conv,
    pub modulation: Vec<Conv>,
    pub inverse: Conv,
    pub aggregate: Conv,
}

impl NlfemfBlock {
    pub fn new(prefix: &str, cfg: NlfemfConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, k, hid) = (cfg.channels, cfg.neighbors, cfg.offset_hidden);
        let ck = c * k;
        let offset_cnn = match cfg.matching {
            Matching::LocalWindow => Vec::new(),
            Matching::LearnedOffsets => (0..OFFSET_CNN_DEPTH)
                .map(|i| {
                    let cin = if i == 0 { c } else { hid };
                    let name = format!("{prefix}.offset.conv{}", i + 1);
                    if i + 1 == OFFSET_CNN_DEPTH {
                        Conv::new(name, cin, 2 * k, 3).zeroed()
                    } else {
                        Conv::new(name, cin, hid, 3)
                    }
                })
                .collect(),
        };
        Ok(NlfemfBlock {
            offset_cnn,
            transform: Conv::new(format!("{prefix}.transform"), ck, ck, 1).grouped(c),
            modulation: (0..MODULATION_DEPTH)
                .map(|i| Conv::new(format!("{prefix}.modulation.conv{}", i + 1), ck, ck, 3).grouped(ck))
                .collect(),
            inverse: Conv::new(format!("{prefix}.inverse"), ck, ck, 1).grouped(c),
            aggregate: Conv::new(format!("{prefix}.aggregate"), ck, c, 1),
            cfg,
        })
    }

    fn check_features<S: Scalar>(&self, tape: &Tape<S>, x: Var) -> Result<()> {
        let c = tape.value(x).dims4()?.1;
        if c != self.cfg.channels {
            return Err(shape_err!(
                "NLFeMF block expects {} feature channels, got {c}",
                self.cfg.channels
            ));
        }
        Ok(())
    }

    fn check_stack<S: Scalar>(&self, tape: &Tape<S>, stack: Var) -> Result<()> {
        let ck = tape.value(stack).dims4()?.1;
        let (c, k) = (self.cfg.channels, self.cfg.neighbors);
        if ck % k != 0 || ck != c * k {
            return Err(shape_err!(
                "neighbor stack has {ck} channels, expected C*K = {c}*{k}"
            ));
        }
        Ok(())
    }

    /// Offsets `B × 2K × H × W`, interleaved `(dy, dx)`, each inside `(-r, r)`.
    pub fn predict_offsets<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, features: Var) -> Result<Var> {
        self.check_features(tape, features)?;
        if self.cfg.matching == Matching::LocalWindow {
            let (b, _, h, w) = tape.value(features).dims4()?;
            let off = local_window_offsets(self.cfg.neighbors, b, h, w)?;
            return Ok(tape.constant(off));
        }
        let mut h = features;
        for (i, conv) in self.offset_cnn.iter().enumerate() {
            h = conv.forward(tape, p, h)?;
            if i + 1 < self.offset_cnn.len() {
                h = tape.leaky_relu(h, OFFSET_LEAKY_SLOPE);
            }
        }
        Ok(tape.tanh_scaled(h, self.cfg.search_radius))
    }

    pub fn gather<S: Scalar>(&self, tape: &mut Tape<S>, features: Var, offsets: Var) -> Result<Var> {
        tape.gather_neighbors(features, offsets)
    }

    /// The first grouped `K→K` map on its own.
    pub fn transform<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, stack: Var) -> Result<Var> {
        self.check_stack(tape, stack)?;
        self.transform.forward(tape, p, stack)
    }

    /// Shrinkage coefficients in `(0, 1)`, one per stack slot.
    pub fn modulation<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, stack: Var) -> Result<Var> {
        self.check_stack(tape, stack)?;
        let mut h = stack;
        for (i, conv) in self.modulation.iter().enumerate() {
            h = conv.forward(tape, p, h)?;
            h = if i + 1 < self.modulation.len() {
                tape.relu(h)
            } else {
                tape.sigmoid(h)
            };
        }
        Ok(h)
    }

    pub fn collaborative_filter<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, stack: Var) -> Result<Var> {
        let t = self.transform(tape, p, stack)?;
        let m = self.modulation(tape, p, stack)?;
        let shrunk = tape.mul(t, m)?;
        self.inverse.forward(tape, p, shrunk)
    }

    pub fn aggregate<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, stack: Var) -> Result<Var> {
        self.check_stack(tape, stack)?;
        self.aggregate.forward(tape, p, stack)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, features: Var) -> Result<Var> {
        let offsets = self.predict_offsets(tape, p, features)?;
        let stack = self.gather(tape, features, offsets)?;
        let filtered = self.collaborative_filter(tape, p, stack)?;
        self.aggregate(tape, p, filtered)
    }

    /// Overwrites this block's parameters with the identity configuration:
    /// zero offsets, identity grouped maps, modulation saturated near 1 and
    /// per-channel averaging aggregation.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let (c, k) = (self.cfg.channels, self.cfg.neighbors);
        let mut set = |name: String, f: &dyn Fn(usize) -> f32| -> Result<()> {
            let p = store
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = f(i);
            }
            Ok(())
        };
        for conv in &self.offset_cnn[self.offset_cnn.len().saturating_sub(1)..] {
            set(conv.weight_name(), &|_| 0.0)?;
            set(conv.bias_name(), &|_| 0.0)?;
        }
        // grouped 1x1 weight is (C*K) x K: row o = c*K + k, column k'
        let eye = |i: usize| if (i / k) % k == i % k { 1.0 } else { 0.0 };
        for conv in [&self.transform, &self.inverse] {
            set(conv.weight_name(), &eye)?;
            set(conv.bias_name(), &|_| 0.0)?;
        }
        for (i, conv) in self.modulation.iter().enumerate() {
            let last = i + 1 == self.modulation.len();
            set(conv.weight_name(), &|_| 0.0)?;
            set(conv.bias_name(), &|_| if last { 20.0 } else { 0.0 })?;
        }
        // aggregate weight is C x (C*K)
        let avg = |i: usize| if (i % (c * k)) / k == i / (c * k) { 1.0 / k as f32 } else { 0.0 };
        set(self.aggregate.weight_name(), &avg)?;
        set(self.aggregate.bias_name(), &|_| 0.0)
    }
}

impl Module for NlfemfBlock {
    fn visit_convs<'a>(&'a self, f: &mut dyn FnMut(&'a Conv)) {
        self.offset_cnn.iter().for_each(&mut *f);
        f(&self.transform);
        self.modulation.iter().for_each(&mut *f);
        f(&self.inverse);
        f(&self.aggregate);
    }
}

/// ConvNeXt → NLFeMF → ConvNeXt.
#[derive(Clone, Debug)]
pub struct NlBlock {
    pub pre: ConvNeXtBlock,
    pub nlfemf: NlfemfBlock,
    pub post: ConvNeXtBlock,
}

impl NlBlock {
    pub fn new(prefix: &str, cfg: NlfemfConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(NlBlock {
            pre: ConvNeXtBlock::new(&format!("{prefix}.convnext_in"), c),
            nlfemf: NlfemfBlock::new(&format!("{prefix}.nlfemf"), cfg)?,
            post: ConvNeXtBlock::new(&format!("{prefix}.convnext_out"), c),
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.pre.forward(tape, p, x)?;
        let h = self.nlfemf.forward(tape, p, h)?;
        self.post.forward(tape, p, h)
    }

    /// Identity NLFeMF between zeroed ConvNeXt blocks.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        for cn in [&self.pre, &self.post] {
            let mut names = Vec::new();
            cn.visit_convs(&mut |c| names.extend([c.weight_name(), c.bias_name()]));
            for n in names {
                if let Some(p) = store.get_mut(&n) {
                    p.value.data_mut().fill(0.0);
                }
            }
        }
        self.nlfemf.set_identity(store)
    }
}

impl Module for NlBlock {
    fn visit_convs<'a>(&'a self, f: &mut dyn FnMut(&'a Conv)) {
        self.pre.visit_convs(f);
        self.nlfemf.visit_convs(f);
        self.post.visit_convs(f);
    }
}
