use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// RMSProp state shared by all parameters of a run.
///
/// Accumulators are created lazily, so parameters added to the store after
/// the first step (the label transfer network) start from zero.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    accumulators: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn rmsprop(learning_rate: f64) -> Self {
        Self::with_decay(learning_rate, DEFAULT_DECAY, DEFAULT_EPSILON)
    }

    pub fn with_decay(learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            decay,
            epsilon,
            accumulators: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accumulators
    }

    /// `acc <- decay*acc + (1-decay)*g^2; theta <- theta - lr*g/(sqrt(acc)+eps)`
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Usage(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        while self.accumulators.len() < store.len() {
            let id = super::ParamId(self.accumulators.len());
            self.accumulators
                .push(vec![0.0; store.get(id).values.len()]);
        }
        let (lr, decay, eps) = (self.learning_rate, self.decay, self.epsilon);
        for id in store.ids().collect::<Vec<_>>() {
            let acc = &mut self.accumulators[id.0];
            let g = grads.get(id);
            for ((theta, a), &g) in store.values_mut(id).iter_mut().zip(acc.iter_mut()).zip(g) {
                *a = decay * *a + (1.0 - decay) * g * g;
                *theta -= lr * g / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}
