use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, Sample};
use crate::autodiff::Graph;
use crate::ctx::ForwardCtx;
use crate::error::TensorError;
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimizer and loop settings. Defaults: learning rate 5e-4, weight decay
/// 0.01.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed of the per-iteration dropout masks.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iters: 200,
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, opts: &TrainOptions) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            beta1: opts.beta1,
            beta2: opts.beta2,
            eps: opts.eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter from gradients in store order.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Tensor<T>],
    ) -> Result<(), TensorError> {
        if grads.len() != store.len() {
            return Err(TensorError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = T::lit(self.lr);
        let decay = T::lit(self.lr * self.weight_decay);
        let eps = T::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w = *w - decay * *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.check_finite("adamw")?;
        }
        Ok(())
    }
}

/// Overfits `model` to a single sample with pixelwise two-class
/// cross-entropy, returning the loss measured at each iteration before its
/// update.
pub fn train_smoke<T: Real>(
    model: &mut Model<T>,
    sample: &Sample<T>,
    opts: &TrainOptions,
) -> Result<Vec<f64>, TrainError> {
    if opts.iters == 0 {
        return Err(
            TensorError::Contract("train_smoke needs at least one iteration".into()).into(),
        );
    }
    let mut optim = AdamW::new(&model.store, opts);
    let mut history = Vec::with_capacity(opts.iters);
    for iteration in 0..opts.iters {
        let diverged = |e: TensorError| match e {
            TensorError::NonFinite { op } => TrainError::Diverged {
                iteration,
                reason: format!("non-finite value in {op}"),
            },
            other => TrainError::Tensor(other),
        };
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, true);
        let image = g.constant(sample.image.clone());
        let mut ctx =
            ForwardCtx::train(opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ iteration as u64);
        let logits = model
            .forward(&mut g, &bound, image, &sample.tokens, &mut ctx)
            .map_err(diverged)?;
        let loss = g
            .cross_entropy_2class(logits, sample.mask.bits())
            .map_err(diverged)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                iteration,
                reason: "non-finite loss".into(),
            });
        }
        history.push(value);
        g.backward(loss).map_err(diverged)?;
        let grads = model.store.grads(&g, &bound);
        optim.step(&mut model.store, &grads).map_err(diverged)?;
    }
    Ok(history)
}
