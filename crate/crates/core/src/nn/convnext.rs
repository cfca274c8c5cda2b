use super::layer::{Conv, Module};
use super::params::Bound;
use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// ConvNeXt block without normalisation, layer scale or stochastic depth:
/// `y = x + pw2(gelu(pw1(dw7x7(x))))`.
#[derive(Clone, Debug)]
pub struct ConvNeXtBlock {
    pub channels: usize,
    pub dw: Conv,
    pub pw1: Conv,
    pub pw2: Conv,
}

pub const EXPANSION: usize = 4;

impl ConvNeXtBlock {
    pub fn new(prefix: &str, channels: usize) -> Self {
        ConvNeXtBlock {
            channels,
            dw: Conv::new(format!("{prefix}.dw"), channels, channels, 7).grouped(channels),
            pw1: Conv::new(format!("{prefix}.pw1"), channels, EXPANSION * channels, 1),
            pw2: Conv::new(format!("{prefix}.pw2"), EXPANSION * channels, channels, 1),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let c = tape.value(x).dims4()?.1;
        if c != self.channels {
            return Err(shape_err!(
                "ConvNeXt block {} expects {} channels, got {c}",
                self.dw.name,
                self.channels
            ));
        }
        let h = self.dw.forward(tape, p, x)?;
        let h = self.pw1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.pw2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

impl Module for ConvNeXtBlock {
    fn visit_convs<'a>(&'a self, f: &mut dyn FnMut(&'a Conv)) {
        f(&self.dw);
        f(&self.pw1);
        f(&self.pw2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_module, ParamStore};
    use crate::tensor::Tensor;

    fn zero_store(block: &ConvNeXtBlock) -> ParamStore {
        let mut store = init_module(block, 1).unwrap();
        for (_, p) in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        store
    }

    #[test]
    fn zero_weights_give_identity() {
        let block = ConvNeXtBlock::new("cn", 3);
        let store = zero_store(&block);
        for (h, w) in [(5, 7), (8, 8), (1, 3)] {
            let mut tape = Tape::<f32>::new();
            let p = store.bind(&mut tape);
            let xv = Tensor::from_fn(&[2, 3, h, w], |i| (i as f32 * 0.61).cos());
            let x = tape.constant(xv.clone());
            let y = block.forward(&mut tape, &p, x).unwrap();
            assert_eq!(tape.value(y), &xv);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let block = ConvNeXtBlock::new("cn", 3);
        let store = init_module(&block, 0).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        assert!(block.forward(&mut tape, &p, x).is_err());
    }
}
