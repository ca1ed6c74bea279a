use super::{NnError, Result, Weights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.0005, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Weights,
    pub v: Weights,
}

impl AdamState {
    pub fn new(like: &Weights) -> Self {
        let mut zero = like.clone();
        zero.iter_mut().for_each(|x| *x = 0.0);
        Self { m: zero.clone(), v: zero }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(weights: &mut Weights, grads: &Weights, state: &mut AdamState, t: u64, cfg: &AdamConfig) -> Result<()> {
    if t == 0 {
        return Err(NnError::InvalidConfig("adam step counter starts at 1".into()));
    }
    if !weights.same_shape(grads) || !weights.same_shape(&state.m) || !weights.same_shape(&state.v) {
        return Err(NnError::ShapeMismatch { expected: "weights shape".into(), got: "grads/state shape".into() });
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((w, &g), m), v) in weights.iter_mut().zip(grads.iter()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}
