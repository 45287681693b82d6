use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

/// `x W + b` with row-vector bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), input, output, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, output));
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two linear maps with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), input, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, output, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

/// Row standardisation followed by a learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), crate::Tensor::filled(1, dim, 1.0)),
            shift: store.add_zeros(format!("{name}.shift"), 1, dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, 1e-5);
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        let y = tape.mul(n, g)?;
        tape.add(y, s)
    }
}
