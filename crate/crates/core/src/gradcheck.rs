//! Central finite-difference gradient checking.

use crate::assign::NoobjRule;
use crate::autograd::{Tape, Var};
use crate::boxes::GroundTruth;
use crate::error::{invalid, Error, Result};
use crate::head::Model;
use crate::loss::{loss_and_gradients, total_loss, LossWeights};
use crate::semantics::PrototypeTable;
use crate::tensor::Tensor;

/// Relative discrepancy between an analytic and a numerical derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the taped gradient of a scalar function against central
/// differences at every coordinate of `point`; returns the max relative error.
pub fn grad_check<F>(function: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {step}"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(&point.clone().with_grad())?;
    let y = function(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(point.shape(), data)?)?;
        let y = function(&mut tape, x)?;
        let v = tape.value(y);
        if v.len() != 1 || !v[0].is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v[0])
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.data().to_vec();
        plus[i] += step;
        let mut minus = point.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Outcome of checking every model parameter on one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheck {
    /// Largest relative error between the analytic and central-difference
    /// derivative over all parameters.
    pub max_relative_error: f64,
    /// Largest relative disagreement between the forward and backward
    /// one-sided differences of any coordinate. A large value means a
    /// perturbation crossed a kink or an assignment change.
    pub max_one_sided_gap: f64,
}

/// Checks the gradient of the total loss with respect to every parameter of
/// `model` against finite differences of [`total_loss`].
pub fn check_model_gradients(
    model: &Model,
    image: &Tensor,
    gts: &[GroundTruth],
    prototypes: &PrototypeTable,
    weights: &LossWeights,
    rule: NoobjRule,
    step: f64,
) -> Result<ModelCheck> {
    if !(step > 0.0) {
        return Err(invalid!("finite-difference step must be positive, got {step}"));
    }
    let (base, analytic) = loss_and_gradients(image, gts, model, prototypes, weights, rule)?;
    let mut probe = model.clone();
    let mut eval = |pi: usize, i: usize, delta: f64| -> Result<f64> {
        let orig = probe.params[pi].data()[i];
        probe.params[pi].data_mut()[i] = orig + delta;
        let v = total_loss(image, gts, &probe, prototypes, weights, rule);
        probe.params[pi].data_mut()[i] = orig;
        Ok(v?.total)
    };
    let mut check = ModelCheck {
        max_relative_error: 0.0,
        max_one_sided_gap: 0.0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let plus = eval(pi, i, step)?;
            let minus = eval(pi, i, -step)?;
            let numeric = (plus - minus) / (2.0 * step);
            let forward = (plus - base.total) / step;
            let backward = (base.total - minus) / step;
            check.max_relative_error = check.max_relative_error.max(relative_error(a, numeric));
            check.max_one_sided_gap = check.max_one_sided_gap.max(relative_error(forward, backward));
        }
    }
    Ok(check)
}
