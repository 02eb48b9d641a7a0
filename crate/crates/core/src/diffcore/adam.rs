use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Moment buffers and hyperparameters for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamState {
    /// Zero moments shaped like `params`, with the usual β₁ = 0.9,
    /// β₂ = 0.999, ε = 1e-8.
    pub fn new(params: &[Parameter], learning_rate: f32) -> Result<Self> {
        Self::with_hyper(params, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(
        params: &[Parameter],
        learning_rate: f32,
        beta1: f32,
        beta2: f32,
        epsilon: f32,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate {learning_rate} must be > 0")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::invalid(format!("betas ({beta1}, {beta2}) must lie in [0, 1)")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon {epsilon} must be > 0")));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            learning_rate,
            beta1,
            beta2,
            epsilon,
        })
    }
}

/// Applies one Adam update to `params` from their accumulated gradients.
/// Gradients are left untouched.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters but state tracks {}",
                params.len(),
                state.first_moment.len()
            ),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - (b1 as f64).powi(t);
    let bc2 = 1.0 - (b2 as f64).powi(t);
    let lr = state.learning_rate as f64;
    for ((p, m), v) in params
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        if m.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("moment {:?} vs parameter {} {:?}", m.shape(), p.name, p.value.shape()),
            ));
        }
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for (((x, &g), mi), vi) in value
            .iter_mut()
            .zip(grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            *x -= (lr * m_hat / (v_hat.sqrt() + state.epsilon as f64)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32, g: f32) -> Parameter {
        let mut p = Parameter::new("x", Tensor::scalar(v));
        p.grad = Tensor::scalar(g);
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε).
        let mut params = vec![scalar_param(1.0, 1.0)];
        let mut state = AdamState::new(&params, 0.1).unwrap();
        adam_step(&mut params, &mut state).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((params[0].value.data()[0] as f64 - expected).abs() < 1e-7);
        assert_eq!(state.step_count, 1);
        assert_eq!(params[0].grad.data(), &[1.0]);
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut params = vec![scalar_param(0.25, 0.0)];
        let mut state = AdamState::new(&params, 0.1).unwrap();
        adam_step(&mut params, &mut state).unwrap();
        assert_eq!(params[0].value.data(), &[0.25]);
    }

    #[test]
    fn second_moment_grows_under_constant_grad() {
        let mut params = vec![scalar_param(1.0, 0.5)];
        let mut state = AdamState::new(&params, 0.01).unwrap();
        adam_step(&mut params, &mut state).unwrap();
        let v1 = state.second_moment[0].data()[0];
        adam_step(&mut params, &mut state).unwrap();
        let v2 = state.second_moment[0].data()[0];
        assert!(v2 > v1);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let params = vec![scalar_param(1.0, 0.0)];
        assert!(AdamState::new(&params, 0.0).is_err());
        assert!(AdamState::with_hyper(&params, 0.1, 1.0, 0.9, 1e-8).is_err());
        assert!(AdamState::with_hyper(&params, 0.1, 0.9, 0.9, 0.0).is_err());
    }
}
