use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::scalar::Real;

/// Train/eval switch plus the seeded generator behind dropout.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    train: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    /// Evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn dropout<T: Real>(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Result<Var> {
        if self.train {
            g.dropout(x, rate, &mut self.rng)
        } else {
            Ok(x)
        }
    }
}
