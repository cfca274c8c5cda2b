//! Tape-based reverse-mode differentiation over tensors.
//!
//! Every differentiable operation appends a node holding its output value
//! and the handles of its inputs. [`Tape::backward`] walks the nodes in
//! reverse order, so gradients reach each node only after all of its
//! consumers have been processed. Recorded values are never mutated.
//!
//! A tape is single-threaded; kernels parallelize internally.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, sample, ConvSpec};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient corruption used as a negative control for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Multiplies every conv2d weight gradient by the factor.
    ScaleConvWeightGrad(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    /// With `relative`, `coords` holds offsets from each pixel position.
    Sample {
        features: Var,
        coords: Var,
        k: usize,
        relative: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    TanhScaled(Var, f64),
    Gelu(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    kinks: Option<DefaultHasher>,
    fault: Option<Fault>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kinks: None,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value whose gradient will be computed.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Starts hashing every branch decision (activation signs, sampling cells,
    /// clamps). Two forward passes with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(DefaultHasher::new());
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|h| h.finish())
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record_kinks(&mut self, f: impl FnOnce(&mut DefaultHasher)) {
        if let Some(h) = self.kinks.as_mut() {
            f(h);
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Transposed convolution with kernel size equal to `stride`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let out = kernels::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
        )?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride }, rg))
    }

    /// Bilinear sampling at absolute `(row, col)` coordinates `B × 2 × H × W`.
    pub fn grid_sample_bilinear(&mut self, features: Var, coords: Var) -> Result<Var> {
        self.sample(features, coords, 1, false)
    }

    /// Samples `K` neighbours per pixel at `pixel + offset`, where `offsets`
    /// is `B × 2K × H × W` with interleaved `(dy, dx)` channels. The result
    /// is `B × (C·K) × H × W`, slot `c·K + k`.
    pub fn gather_neighbors(&mut self, features: Var, offsets: Var) -> Result<Var> {
        let c2 = self.value(offsets).dims4()?.1;
        if c2 == 0 || c2 % 2 != 0 {
            return Err(shape_err!("offset tensor needs an even channel count, got {c2}"));
        }
        self.sample(features, offsets, c2 / 2, true)
    }

    fn sample(&mut self, features: Var, coords: Var, k: usize, relative: bool) -> Result<Var> {
        let abs;
        let coords_abs = if relative {
            abs = kernels::offsets_to_coords(self.value(coords))?;
            &abs
        } else {
            self.value(coords)
        };
        let out = kernels::sample_forward(self.value(features), coords_abs, k)?;
        if self.kinks.is_some() {
            let (_, _, h, w) = self.value(features).dims4()?;
            let taps = sample::taps(coords_abs, k, h, w);
            self.record_kinks(|hs| taps.iter().for_each(|t| t.signature().hash(hs)));
        }
        let rg = self.any_grad(&[features, coords]);
        Ok(self.push(
            out,
            Op::Sample {
                features,
                coords,
                k,
                relative,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let out = self.value(x).map(|v| v * cs);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let sl = S::from_f64(slope);
        let out = self
            .value(x)
            .map(|v| if v >= S::zero() { v } else { v * sl });
        self.record_sign_kinks(x);
        let rg = self.requires_grad(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = S::one();
        let out = self.value(x).map(|v| one / (one + (-v).exp()));
        let rg = self.requires_grad(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `r · tanh(x)`, bounded to `(-r, r)`. Where `tanh` rounds to ±1 the
    /// output saturates at the largest representable magnitude below `r`.
    pub fn tanh_scaled(&mut self, x: Var, r: f64) -> Var {
        let rs = S::from_f64(r);
        let cap = rs * (S::one() - S::epsilon());
        let out = self.value(x).map(|v| (rs * v.tanh()).max(-cap).min(cap));
        let rg = self.requires_grad(x);
        self.push(out, Op::TanhScaled(x, r), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.requires_grad(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&vals)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / S::from_f64(t.len() as f64));
        let rg = self.requires_grad(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape(t)?;
        let n = S::from_f64(p.len() as f64);
        let s: S = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        if self.kinks.is_some() {
            let signs: Vec<bool> = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| a >= b)
                .collect();
            self.record_kinks(|h| signs.hash(h));
        }
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::L1(pred, target), rg))
    }

    fn record_sign_kinks(&mut self, x: Var) {
        if self.kinks.is_some() {
            let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v >= S::zero()).collect();
            self.record_kinks(|h| signs.hash(h));
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &g)?;
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(gv),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<S>, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                if rg(*x) {
                    let gi = kernels::conv2d_backward_input(g, val(*w), val(*x).shape(), *spec)?;
                    out.push((*x, gi));
                }
                if rg(*w) || b.is_some_and(|b| rg(b)) {
                    let (mut gw, gb) =
                        kernels::conv2d_backward_params(g, val(*x), val(*w).shape(), *spec)?;
                    if let Some(Fault::ScaleConvWeightGrad(f)) = self.fault {
                        let fs = S::from_f64(f);
                        gw.data_mut().iter_mut().for_each(|v| *v = *v * fs);
                    }
                    out.push((*w, gw));
                    if let Some(b) = b {
                        out.push((*b, gb));
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                if rg(*x) {
                    let gi = kernels::conv_transpose2d_backward_input(
                        g,
                        val(*w),
                        val(*x).shape(),
                        *stride,
                    )?;
                    out.push((*x, gi));
                }
                if rg(*w) || b.is_some_and(|b| rg(b)) {
                    let (gw, gb) = kernels::conv_transpose2d_backward_params(
                        g,
                        val(*x),
                        val(*w).shape(),
                        *stride,
                    )?;
                    out.push((*w, gw));
                    if let Some(b) = b {
                        out.push((*b, gb));
                    }
                }
            }
            Op::Sample {
                features,
                coords,
                k,
                relative,
            } => {
                let abs;
                let c = if *relative {
                    abs = kernels::offsets_to_coords(val(*coords))?;
                    &abs
                } else {
                    val(*coords)
                };
                let (gf, gc) =
                    kernels::sample_backward(g, val(*features), c, *k, rg(*features), rg(*coords))?;
                if let Some(gf) = gf {
                    out.push((*features, gf));
                }
                if let Some(gc) = gc {
                    out.push((*coords, gc));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                }
                if rg(*b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
                }
            }
            Op::Scale(x, c) => {
                let cs = S::from_f64(*c);
                out.push((*x, g.map(|v| v * cs)));
            }
            Op::LeakyRelu(x, slope) => {
                let sl = S::from_f64(*slope);
                let gi = g.zip_map(val(*x), |gv, xv| if xv >= S::zero() { gv } else { gv * sl })?;
                out.push((*x, gi));
            }
            Op::Sigmoid(x) => {
                let one = S::one();
                out.push((*x, g.zip_map(&node.value, |gv, y| gv * y * (one - y))?));
            }
            Op::TanhScaled(x, r) => {
                let rs = S::from_f64(*r);
                let one = S::one();
                let gi = g.zip_map(&node.value, |gv, y| {
                    let t = y / rs;
                    gv * rs * (one - t * t)
                })?;
                out.push((*x, gi));
            }
            Op::Gelu(x) => {
                out.push((*x, g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv))?));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = val(*p).shape()[1];
                    if rg(*p) {
                        out.push((*p, g.channels(start, c)?));
                    }
                    start += c;
                }
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape(), g.data()[0])));
            }
            Op::Mean(x) => {
                let t = val(*x);
                let gv = g.data()[0] / S::from_f64(t.len() as f64);
                out.push((*x, Tensor::full(t.shape(), gv)));
            }
            Op::L1(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let scale = g.data()[0] / S::from_f64(pv.len() as f64);
                let gp = pv.zip_map(tv, |a, b| if a >= b { scale } else { -scale })?;
                if rg(*t) {
                    out.push((*t, gp.map(|v| -v)));
                }
                out.push((*p, gp));
            }
        }
        Ok(out)
    }
}

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let u = S::from_f64(GELU_C) * (x + S::from_f64(GELU_A) * x * x * x);
    half * x * (S::one() + u.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let one = S::one();
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (one + t) + half * x * (one - t * t) * c * (one + S::from_f64(3.0) * a * x * x)
}
