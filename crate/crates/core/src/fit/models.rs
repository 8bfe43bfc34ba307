use crate::model::{stretched_gradient, stretched_value, two_state_gradient, two_state_value};

/// A scalar decay model `f(τ; θ)` with its gradient in θ.
pub trait DecayModel: Sync {
    fn name(&self) -> &'static str;
    fn param_names(&self) -> &'static [&'static str];
    fn value(&self, tau: f64, p: &[f64]) -> f64;
    fn gradient(&self, tau: f64, p: &[f64], grad: &mut [f64]);

    fn n_params(&self) -> usize {
        self.param_names().len()
    }

    fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| *n == name)
    }
}

/// `A·exp(−2Γ₁τ) + c` with parameters (gamma1, amplitude, offset).
#[derive(Debug, Clone, Copy, Default)]
pub struct SingleExp;

/// `A·exp(−(τΓ₁)^p) + c` with parameters (gamma1, stretch, amplitude, offset).
#[derive(Debug, Clone, Copy, Default)]
pub struct StretchedExp;

/// `(η − 1)/(η − A·exp(2Γ₁τ)) + c` with parameters (gamma1, eta, amplitude, offset).
#[derive(Debug, Clone, Copy, Default)]
pub struct TwoState;

impl DecayModel for SingleExp {
    fn name(&self) -> &'static str {
        "single"
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["gamma1", "amplitude", "offset"]
    }
    fn value(&self, tau: f64, p: &[f64]) -> f64 {
        p[1] * (-2.0 * p[0] * tau).exp() + p[2]
    }
    fn gradient(&self, tau: f64, p: &[f64], grad: &mut [f64]) {
        let r = (-2.0 * p[0] * tau).exp();
        grad[0] = -2.0 * tau * p[1] * r;
        grad[1] = r;
        grad[2] = 1.0;
    }
}

impl DecayModel for StretchedExp {
    fn name(&self) -> &'static str {
        "stretched"
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["gamma1", "stretch", "amplitude", "offset"]
    }
    fn value(&self, tau: f64, p: &[f64]) -> f64 {
        stretched_value(tau, p[0], p[1], p[2], p[3])
    }
    fn gradient(&self, tau: f64, p: &[f64], grad: &mut [f64]) {
        grad.copy_from_slice(&stretched_gradient(tau, p[0], p[1], p[2]));
    }
}

impl DecayModel for TwoState {
    fn name(&self) -> &'static str {
        "two-state"
    }
    fn param_names(&self) -> &'static [&'static str] {
        &["gamma1", "eta", "amplitude", "offset"]
    }
    fn value(&self, tau: f64, p: &[f64]) -> f64 {
        two_state_value(tau, p[0], p[1], p[2], p[3])
    }
    fn gradient(&self, tau: f64, p: &[f64], grad: &mut [f64]) {
        grad.copy_from_slice(&two_state_gradient(tau, p[0], p[1], p[2]));
    }
}

/// Wraps a model and replaces its analytic gradient by central differences.
#[derive(Debug, Clone, Copy)]
pub struct NumericGradient<M>(pub M);

impl<M: DecayModel> DecayModel for NumericGradient<M> {
    fn name(&self) -> &'static str {
        self.0.name()
    }
    fn param_names(&self) -> &'static [&'static str] {
        self.0.param_names()
    }
    fn value(&self, tau: f64, p: &[f64]) -> f64 {
        self.0.value(tau, p)
    }
    fn gradient(&self, tau: f64, p: &[f64], grad: &mut [f64]) {
        central_difference(|q| self.0.value(tau, q), p, grad);
    }
}

/// Central-difference gradient with steps scaled by the cube root of machine epsilon.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, p: &[f64], grad: &mut [f64]) {
    let h0 = f64::EPSILON.cbrt();
    let mut q = p.to_vec();
    for j in 0..p.len() {
        let h = h0 * p[j].abs().max(1.0);
        q[j] = p[j] + h;
        let up = f(&q);
        q[j] = p[j] - h;
        let down = f(&q);
        q[j] = p[j];
        grad[j] = (up - down) / (2.0 * h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_values_match_reference_functions() {
        use crate::model::*;
        let p = TwoStateParams::new(400.0, 0.3, 1.1, 0.02).unwrap();
        let tau = 1.3e-3;
        assert_eq!(TwoState.value(tau, &p.as_array()), pl_two_state(tau, &p));
        assert_eq!(SingleExp.value(tau, &[400.0, 0.9, 0.1]), pl_single_exp(tau, 400.0, 0.9, 0.1));
        let s = StretchedExpParams::new(900.0, 0.8, 1.0, 0.0).unwrap();
        assert_eq!(StretchedExp.value(tau, &s.as_array()), pl_stretched_exp(tau, &s));
    }

    #[test]
    fn numeric_gradient_is_close_to_analytic() {
        let p = [700.0, 0.45, 1.05, -0.01];
        let mut a = [0.0; 4];
        let mut n = [0.0; 4];
        TwoState.gradient(8e-4, &p, &mut a);
        NumericGradient(TwoState).gradient(8e-4, &p, &mut n);
        for j in 0..4 {
            assert!((a[j] - n[j]).abs() <= 1e-7 * a[j].abs().max(1e-6), "{j}: {} vs {}", a[j], n[j]);
        }
    }
}
