use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// All gradients are checked before anything is modified, so a rejected
/// step leaves both `params` and `state` untouched.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(AutodiffError::Contract(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(AutodiffError::Contract(format!(
            "adam_step got {} params, {} grads, {}/{} moment buffers",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for (index, ((p, g), m)) in params.iter().zip(grads).zip(&state.m).enumerate() {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(AutodiffError::NonFiniteGradient { index });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut state = AdamState::new(&params);
        state.m[0] = Tensor::vector(vec![0.5, 0.5]);
        state.v[0] = Tensor::vector(vec![0.25, 0.25]);
        state.step = 3;
        let before_v = state.v[0].clone();
        // Moments are nonzero, so the parameters do move; only a fresh state stays put.
        let mut fresh_params = params.clone();
        let mut fresh = AdamState::new(&fresh_params);
        let zero = vec![Tensor::zeros(&[2])];
        adam_step(
            &mut fresh_params,
            &zero,
            &mut fresh,
            1e-3,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(fresh_params, params);

        adam_step(&mut params, &zero, &mut state, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(state.m[0].data(), &[0.45, 0.45]);
        for (a, b) in state.v[0].data().iter().zip(before_v.data()) {
            assert!(a < b);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::scalar(0.1)];
        adam_step(
            &mut params,
            &grads,
            &mut state,
            1e-3,
            &AdamConfig::default(),
        )
        .unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let want = -1e-3 * 0.1 / (0.1 + 1e-8);
        assert!((params[0].item() - want).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::scalar(-0.3)];
        let mut last = 0.0;
        for _ in 0..2 {
            adam_step(
                &mut params,
                &grads,
                &mut state,
                1e-2,
                &AdamConfig::default(),
            )
            .unwrap();
            assert!(params[0].item() > last);
            last = params[0].item();
        }
    }

    #[test]
    fn rejects_non_finite_gradient_without_mutation() {
        let mut params = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::scalar(0.1), Tensor::scalar(f64::NAN)];
        let err = adam_step(
            &mut params,
            &grads,
            &mut state,
            1e-3,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient { index: 1 });
        assert_eq!(params[0].item(), 1.0);
        assert_eq!(state.step, 0);
    }
}
