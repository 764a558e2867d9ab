use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// `base_lr * (1 - iter / total)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, total_iters: usize, power: f64) -> Result<f64> {
    if iter > total_iters || total_iters == 0 {
        return Err(Error::Schedule { iter, total: total_iters });
    }
    Ok(base_lr * (1.0 - iter as f64 / total_iters as f64).powf(power))
}

/// Momentum SGD state with the poly schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_iters: usize,
    pub iter: usize,
    velocity: Vec<Option<Vec<f64>>>,
}

impl OptimState {
    pub fn new(base_lr: f64, total_iters: usize) -> Self {
        OptimState {
            base_lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            total_iters,
            iter: 0,
            velocity: Vec::new(),
        }
    }

    /// Learning rate for the current iteration.
    pub fn lr(&self) -> Result<f64> {
        poly_lr(self.base_lr, self.iter, self.total_iters, self.power)
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(id.index()).and_then(|v| v.as_deref())
    }
}

/// `v = momentum * v + g + wd * theta; theta -= lr * v`, with weight decay
/// only on parameters whose kind decays. Nothing is modified if any gradient
/// is non-finite. Advances `state.iter`.
pub fn sgd_step(store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], state: &mut OptimState, lr: f64) -> Result<()> {
    for (id, g) in grads {
        let p = store.get(*id);
        if g.len() != p.value.numel() {
            return Err(Error::Dimension(format!("gradient of {} has {} entries, expected {}", p.name, g.len(), p.value.numel())));
        }
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iter: state.iter,
                detail: format!("non-finite gradient in {} at index {bad}", p.name),
            });
        }
    }
    if state.velocity.len() < store.len() {
        state.velocity.resize(store.len(), None);
    }
    for (id, g) in grads {
        let p = store.get_mut(*id);
        let wd = if p.kind.decays() { state.weight_decay } else { 0.0 };
        let v = state.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
        for ((theta, v), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *v = state.momentum * *v + g + wd * *theta;
            *theta -= lr * *v;
        }
    }
    state.iter += 1;
    Ok(())
}
