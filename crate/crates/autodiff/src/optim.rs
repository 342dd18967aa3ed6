//! Adam with decoupled weight decay and per-group multipliers, plus the
//! per-epoch cosine learning-rate schedule.

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning-rate and weight-decay multipliers of a parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupScale {
    pub lr: f64,
    pub wd: f64,
}

impl GroupScale {
    pub const UNIT: GroupScale = GroupScale { lr: 1.0, wd: 1.0 };

    pub fn uniform(mult: f64) -> Self {
        Self { lr: mult, wd: mult }
    }
}

/// Per-parameter Adam moments and group multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub scales: Vec<GroupScale>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], scales: Vec<GroupScale>) -> Result<Self> {
        if scales.len() != params.len() {
            return shape_err(format!(
                "{} group scales for {} parameters",
                scales.len(),
                params.len()
            ));
        }
        if let Some(s) = scales.iter().find(|s| !(s.lr > 0.0 && s.wd > 0.0)) {
            return Err(TensorError::Contract(format!(
                "group multipliers must be positive, got {s:?}"
            )));
        }
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.dims())).collect();
        Ok(Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            scales,
            step: 0,
        })
    }
}

/// One Adam update over every parameter.
///
/// For parameter `i` with group scale `s`, `lr = base_lr * s.lr` and
/// `wd = base_wd * s.wd`. Weight decay is decoupled: `p -= lr * wd * p` runs
/// before the bias-corrected moment update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    base_lr: f64,
    base_wd: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return shape_err(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || p.dims() != state.first_moment[i].dims() {
            return shape_err(format!(
                "adam: param {i} dims {:?}, grad {:?}, moments {:?}",
                p.dims(),
                g.dims(),
                state.first_moment[i].dims()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let scale = state.scales[i];
        let lr = base_lr * scale.lr;
        let decay = lr * base_wd * scale.wd;
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *pj -= decay * *pj;
            *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
            *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at the last epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_epochs == 0 || epoch >= total_epochs {
        return Err(TensorError::Contract(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    // Both endpoints are returned verbatim so they hold exactly.
    if epoch == 0 {
        return Ok(lr_max);
    }
    if epoch == total_epochs - 1 {
        return Ok(lr_min);
    }
    let phase = std::f64::consts::PI * epoch as f64 / (total_epochs - 1) as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(scale: GroupScale) -> OptimizerState {
        OptimizerState::new(&[Tensor::scalar(0.0)], vec![scale]).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = OptimizerState::new(&p, vec![GroupScale::UNIT]).unwrap();
        for _ in 0..3 {
            adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 0.1, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = scalar_state(GroupScale::UNIT);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, 0.1, 0.0).unwrap();
        // Bias correction makes the first step exactly lr / (1 + eps).
        assert!((p[0].item() + 0.1).abs() < 1e-8, "{}", p[0].item());
    }

    /// Scalar Adam written out longhand.
    fn reference_adam(x0: f64, steps: usize, lr: f64, wd: f64, grad: impl Fn(f64) -> f64) -> f64 {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = grad(x);
            x -= lr * wd * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        x
    }

    #[test]
    fn five_steps_on_quadratic_match_reference() {
        // f(x) = 1.5 (x - 2)^2
        let grad = |x: f64| 3.0 * (x - 2.0);
        let mut p = vec![Tensor::scalar(-1.0)];
        let mut st = scalar_state(GroupScale::UNIT);
        for _ in 0..5 {
            let g = Tensor::scalar(grad(p[0].item()));
            adam_step(&mut p, &[g], &mut st, 0.05, 1e-2).unwrap();
        }
        let want = reference_adam(-1.0, 5, 0.05, 1e-2, grad);
        assert!((p[0].item() - want).abs() <= 1e-12);
    }

    #[test]
    fn group_scale_applies_to_lr_and_decay() {
        let quarter = GroupScale::uniform(0.25);
        let grad = |x: f64| 2.0 * x + 1.0;
        let mut p = vec![Tensor::scalar(0.7)];
        let mut st = scalar_state(quarter);
        for _ in 0..4 {
            let g = Tensor::scalar(grad(p[0].item()));
            adam_step(&mut p, &[g], &mut st, 4e-4, 1e-4).unwrap();
        }
        let want = reference_adam(0.7, 4, 1e-4, 1e-4 * 0.25, grad);
        assert!((p[0].item() - want).abs() <= 1e-15);
    }

    #[test]
    fn rejects_nonpositive_multiplier() {
        assert!(OptimizerState::new(&[Tensor::scalar(0.0)], vec![GroupScale::uniform(0.0)]).is_err());
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 200, 4e-4, 1e-6).unwrap(), 4e-4);
        assert_eq!(cosine_lr(199, 200, 4e-4, 1e-6).unwrap(), 1e-6);
        let mid = cosine_lr(100, 201, 4e-4, 1e-6).unwrap();
        assert!((mid - (4e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(0, 1, 4e-4, 1e-6).unwrap(), 4e-4);
        assert!(cosine_lr(5, 5, 4e-4, 1e-6).is_err());
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let lrs: Vec<f64> = (0..30).map(|e| cosine_lr(e, 30, 4e-4, 1e-6).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
