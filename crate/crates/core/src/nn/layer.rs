use rand::Rng;

use super::params::{Bound, ParamStore};
use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Anything built from convolutions. Visiting order defines parameter
/// registration order and therefore checkpoint layout.
pub trait Module {
    fn visit_convs<'a>(&'a self, f: &mut dyn FnMut(&'a Conv));
}

/// A (possibly grouped or transposed) 2-D convolution with bias,
/// registered as `<name>.weight` and `<name>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub transpose: bool,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            transpose: false,
            zero_init: false,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// `k×k` convolution with stride `k` and no padding.
    pub fn strided_down(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Conv {
            stride: k,
            padding: 0,
            ..Conv::new(name, cin, cout, k)
        }
    }

    /// Transposed `k×k` convolution with stride `k`.
    pub fn strided_up(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Conv {
            stride: k,
            padding: 0,
            transpose: true,
            ..Conv::new(name, cin, cout, k)
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let k = self.kernel;
        if self.transpose {
            [self.cin, self.cout, k, k]
        } else {
            [self.cout, self.cin / self.groups, k, k]
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.cout
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.padding, self.groups)
    }

    pub(crate) fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let shape = self.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = 1.0 / (fan_in as f32).sqrt();
        let weight = if self.zero_init {
            Tensor::zeros(&shape)
        } else {
            Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound))
        };
        store.register(self.weight_name(), weight)?;
        store.register(self.bias_name(), Tensor::zeros(&[self.cout]))
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        if self.transpose {
            tape.conv_transpose2d(x, w, Some(b), self.stride)
        } else {
            tape.conv2d(x, w, Some(b), self.spec())
        }
    }
}

impl Module for Conv {
    fn visit_convs<'a>(&'a self, f: &mut dyn FnMut(&'a Conv)) {
        f(self)
    }
}
