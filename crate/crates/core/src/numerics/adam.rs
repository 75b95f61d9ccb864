//! Adam optimizer with bias correction.

use crate::error::Error;
use crate::Result;

use super::params::ParamSet;

/// Adam hyperparameters. The learning rate defaults to 0.001 and the
/// moment decays to the usual 0.9/0.999 with epsilon 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first and second moment accumulators plus the step
/// counter. The counter increases by exactly one per applied update.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        let first = params
            .iter()
            .map(|(_, p)| vec![0.0; p.values.len()])
            .collect::<Vec<_>>();
        let second = first.clone();
        Self {
            hyper,
            step: 0,
            first,
            second,
        }
    }
}

/// What an [`adam_step`] call did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// A non-finite gradient was found; the update was skipped and the
    /// offending parameter is reported. Moments and the step counter are
    /// left untouched.
    SkippedNonFinite { param: String },
}

/// One bias-corrected Adam update applied in place:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<AdamOutcome> {
    if state.first.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state tracks {} parameters, set has {}",
            state.first.len(),
            params.len()
        )));
    }
    for (id, p) in params.iter() {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        if state.first[id.0].len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state for {} has {} coordinates, gradient has {}",
                p.name,
                state.first[id.0].len(),
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Ok(AdamOutcome::SkippedNonFinite {
                param: p.name.clone(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bias1 = 1.0 - h.beta1.powi(t);
    let bias2 = 1.0 - h.beta2.powi(t);

    for id in params.ids().collect::<Vec<_>>() {
        let (values, grad) = params.values_and_grad_mut(id);
        let grad = grad.expect("checked above");
        let m = &mut state.first[id.0];
        let v = &mut state.second[id.0];
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            values[j] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(AdamOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(value: f64) -> ParamSet {
        let mut params = ParamSet::new();
        params.add("w", vec![1], vec![value]);
        params
    }

    fn set_grad(params: &mut ParamSet, g: f64) {
        let id = params.find("w").unwrap();
        params.zero_grads();
        params.grad_acc(id)[0] = g;
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = scalar_set(1.5);
        set_grad(&mut params, 0.0);
        let mut state = AdamState::new(&params, AdamHyper::default());
        adam_step(&mut params, &mut state).unwrap();
        assert_eq!(params.values(params.find("w").unwrap())[0], 1.5);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With zero moments the first update is lr * g / (|g| + eps).
        let mut params = scalar_set(1.0);
        set_grad(&mut params, 0.5);
        let mut state = AdamState::new(&params, AdamHyper::default());
        adam_step(&mut params, &mut state).unwrap();
        let expected = 1.0 - 0.001 * (0.5 / (0.5 + 1e-8));
        let got = params.values(params.find("w").unwrap())[0];
        assert!((got - expected).abs() < 1e-12, "got {got}");
        assert!((got - 0.999).abs() < 1e-6);
    }

    #[test]
    fn three_steps_match_scalar_oracle() {
        let g = 0.3;
        let (lr, b1, b2, eps) = (0.001, 0.9, 0.999, 1e-8);
        // Independent scalar recurrence.
        let mut w_ref = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1_pow(b1, t));
            let v_hat = v / (1.0 - b1_pow(b2, t));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut params = scalar_set(2.0);
        let mut state = AdamState::new(&params, AdamHyper::default());
        for _ in 0..3 {
            set_grad(&mut params, g);
            adam_step(&mut params, &mut state).unwrap();
        }
        let got = params.values(params.find("w").unwrap())[0];
        assert!((got - w_ref).abs() < 1e-12, "got {got}, oracle {w_ref}");
        assert_eq!(state.step, 3);
    }

    fn b1_pow(b: f64, t: usize) -> f64 {
        let mut acc = 1.0;
        for _ in 0..t {
            acc *= b;
        }
        acc
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let mut params = scalar_set(1.0);
        set_grad(&mut params, f64::NAN);
        let mut state = AdamState::new(&params, AdamHyper::default());
        let outcome = adam_step(&mut params, &mut state).unwrap();
        assert_eq!(
            outcome,
            AdamOutcome::SkippedNonFinite {
                param: "w".to_string()
            }
        );
        assert_eq!(params.values(params.find("w").unwrap())[0], 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = scalar_set(1.0);
        params.zero_grads();
        let mut state = AdamState::new(&params, AdamHyper::default());
        assert!(matches!(
            adam_step(&mut params, &mut state),
            Err(crate::Error::MissingGradient(_))
        ));
    }
}
