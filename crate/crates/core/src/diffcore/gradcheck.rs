//! Central finite-difference verification of [`Tape::backward`].

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of one [`grad_check`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest deviation `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_deviation: f64,
    /// Flat index of the entry with the largest deviation.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
    /// Set when the function produced a non-finite value.
    pub failure: Option<String>,
}

/// Compares backward gradients of `f` at `point` with central differences.
///
/// `f` must build a scalar from its input on the supplied tape. The
/// deviation is relative for gradients larger than one and absolute below,
/// which keeps `f32` cancellation noise in the numeric estimate from
/// dominating tiny gradients.
pub fn grad_check<F>(f: F, point: &Tensor, step: f32, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid(format!("step {step} and tol {tol} must be positive")));
    }
    let eval = |x: &Tensor| -> Result<f32> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let out = f(&mut tape, x)?;
    let fx = tape.value(out).item()?;
    let fail = |msg: String| GradCheckReport {
        max_deviation: f64::INFINITY,
        worst_index: 0,
        analytic: vec![],
        numeric: vec![],
        passed: false,
        failure: Some(msg),
    };
    if !fx.is_finite() {
        return Ok(fail(format!("f(point) = {fx}")));
    }
    let analytic: Vec<f64> = match tape.backward(out)?.get(x) {
        Some(g) => g.data().iter().map(|&v| v as f64).collect(),
        None => vec![0.0; point.numel()],
    };

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Ok(fail(format!("non-finite output when perturbing entry {i}")));
        }
        numeric.push((fp as f64 - fm as f64) / (2.0 * step as f64));
    }

    let (mut max_deviation, mut worst_index) = (0.0f64, 0usize);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        if !a.is_finite() {
            return Ok(fail(format!("non-finite analytic gradient at entry {i}")));
        }
        let dev = (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs());
        if dev > max_deviation {
            max_deviation = dev;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_deviation,
        worst_index,
        analytic,
        numeric,
        passed: max_deviation <= tol,
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tightly() {
        let p = Tensor::from_slice(&[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &p,
            1e-2,
            1e-3,
        )
        .unwrap();
        assert!(r.passed);
        // central differences are exact on quadratics; what remains is f32 rounding
        assert!(r.max_deviation < 1e-4, "{}", r.max_deviation);
    }

    #[test]
    fn wrong_gradient_fails() {
        let p = Tensor::from_slice(&[0.5, -1.5, 2.0]).unwrap();
        let r = grad_check(
            |t, x| {
                // claims d(x²)/dx = 3x
                let y = t.map(x, |v| v * v, |v| 3.0 * v);
                Ok(t.sum(y))
            },
            &p,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_finite_output_reported() {
        let p = Tensor::from_slice(&[0.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let y = t.map(x, |v| 1.0 / v, |v| -1.0 / (v * v));
                Ok(t.sum(y))
            },
            &p,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.failure.is_some());
    }

    #[test]
    fn rejects_bad_step() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &p, 0.0, 1e-3).is_err());
    }
}
