//! SGD with momentum and L2 weight decay.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(invalid!("learning rate must be positive, got {learning_rate}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid!("momentum must lie in [0, 1), got {momentum}"));
        }
        if !(weight_decay >= 0.0) {
            return Err(invalid!("weight decay must be nonnegative, got {weight_decay}"));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v ← μ·v + g + λ·θ; θ ← θ − η·v` for every parameter.
///
/// Velocities are created lazily on the first call and must keep mirroring
/// the parameter shapes afterwards.
pub fn sgd_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(shape_err!(
            "optimizer tracks {} parameters but {} were given",
            state.velocity.len(),
            params.len()
        ));
    }
    for (i, (p, v)) in params.iter().zip(&state.velocity).enumerate() {
        if v.len() != p.len() {
            return Err(shape_err!("velocity {i} does not mirror parameter shape {:?}", p.shape()));
        }
        if p.grad.is_none() {
            return Err(invalid!("parameter {i} has no gradient"));
        }
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let g = p.grad.take().expect("checked above");
        for ((theta, vel), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vel = mu * *vel + gi + wd * *theta;
            *theta -= lr * *vel;
        }
        p.grad = Some(g);
    }
    Ok(())
}
