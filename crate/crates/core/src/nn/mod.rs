//! Parameterised layers and the parameter registry.

mod convnext;
mod layer;
mod params;

pub use convnext::ConvNeXtBlock;
pub use layer::{Conv, Module};
pub use params::{Bound, Param, ParamEntry, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Registers every convolution of `module`, in visiting order, with
/// Kaiming-uniform weights (bound `1/sqrt(fan_in)`) and zero biases.
/// Convolutions flagged `zero_init` get all-zero weights.
pub fn init_module(module: &dyn Module, seed: u64) -> crate::Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut result = Ok(());
    module.visit_convs(&mut |conv| {
        if result.is_ok() {
            result = conv.register(&mut store, &mut rng);
        }
    });
    result.map(|_| store)
}

/// Exact number of learnable scalars in `module`.
pub fn count_module_params(module: &dyn Module) -> usize {
    let mut n = 0;
    module.visit_convs(&mut |conv| n += conv.param_count());
    n
}
