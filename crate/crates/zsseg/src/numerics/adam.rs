//! Adam with bias correction, and the poly learning-rate schedule.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::mlp::ParamStore;

/// Per-parameter first/second moment estimates tied to one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    moments: Vec<(String, Matrix, Matrix)>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, base_lr: f64) -> Self {
        let moments = store
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    Matrix::zeros(p.value.rows(), p.value.cols()),
                    Matrix::zeros(p.value.rows(), p.value.cols()),
                )
            })
            .collect();
        AdamState {
            moments,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the store's accumulated gradients. Gradients are
/// zeroed afterwards.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, lr: f64) -> Result<()> {
    if state.moments.len() != store.len() {
        return Err(Error::State(format!(
            "Adam state tracks {} parameters, store has {}",
            state.moments.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (p, (name, m, v)) in store.iter_mut().zip(state.moments.iter_mut()) {
        if p.name != *name {
            return Err(Error::State(format!(
                "Adam state parameter {name} does not match store parameter {}",
                p.name
            )));
        }
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = p.grad.data();
        let pd = p.value.data_mut();
        for i in 0..gd.len() {
            let g = gd[i];
            md[i] = state.beta1 * md[i] + (1.0 - state.beta1) * g;
            vd[i] = state.beta2 * vd[i] + (1.0 - state.beta2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

/// Poly schedule: base * (1 - iter/total)^power.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Argument("poly_lr total must be positive".into()));
    }
    if iter > total {
        return Err(Error::Argument(format!(
            "poly_lr iter {iter} exceeds total {total}"
        )));
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(power))
}
