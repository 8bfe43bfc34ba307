use serde::{Deserialize, Serialize};

use super::lm::{lm_minimize, FitResult, LmOptions, ParamSpec};
use super::models::{DecayModel, SingleExp, StretchedExp, TwoState};
use crate::curve::DecayCurve;
use crate::error::{Error, Result};
use crate::model::PolEfficiency;

/// Margin keeping the two-state amplitude strictly above η.
pub const AMPLITUDE_MARGIN: f64 = 1e-6;
const AMPLITUDE_MIN: f64 = 0.5;
const AMPLITUDE_MAX: f64 = 2.0;
const ETA_START: f64 = 0.5;

/// The three decay models the fitter knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Single,
    Stretched,
    TwoState,
}

impl ModelKind {
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Single => SingleExp.param_names(),
            ModelKind::Stretched => StretchedExp.param_names(),
            ModelKind::TwoState => TwoState.param_names(),
        }
    }

    /// Data-driven starting point and bounds (η free for the two-state model).
    pub fn initial_specs(self, curve: &DecayCurve) -> Vec<ParamSpec> {
        let guess = Guess::from_curve(curve);
        match self {
            ModelKind::Single => single_specs(&guess),
            ModelKind::Stretched => stretched_specs(&guess),
            ModelKind::TwoState => two_state_specs(&guess, EtaSpec::Free),
        }
    }

    /// Fits with the default specs, after pinning the parameters named in `fixes`.
    pub fn fit_with_fixes(self, curve: &DecayCurve, fixes: &[(String, f64)], opts: &LmOptions) -> Result<FitResult> {
        let names = self.param_names();
        for (name, _) in fixes {
            if !names.contains(&name.as_str()) {
                return Err(Error::Precondition(format!(
                    "unknown parameter {name:?} for model {self:?}; expected one of {names:?}"
                )));
            }
        }
        let guess = Guess::from_curve(curve);
        let mut specs = match self {
            ModelKind::Single => single_specs(&guess),
            ModelKind::Stretched => stretched_specs(&guess),
            ModelKind::TwoState => {
                let eta = fixes.iter().find(|(n, _)| n == "eta").map(|(_, v)| *v);
                match eta {
                    Some(v) => two_state_specs(&guess, EtaSpec::Fixed(PolEfficiency::new(v)?)),
                    None => two_state_specs(&guess, EtaSpec::Free),
                }
            }
        };
        for (name, value) in fixes {
            let spec = specs.iter_mut().find(|s| &s.name == name).unwrap();
            if *value < spec.lower || *value > spec.upper {
                return Err(Error::Precondition(format!(
                    "{name}={value} outside [{}, {}]",
                    spec.lower, spec.upper
                )));
            }
            spec.value = *value;
            spec.fixed = true;
        }
        match self {
            ModelKind::Single => lm_minimize(&SingleExp, curve, &specs, opts),
            ModelKind::Stretched => lm_minimize(&StretchedExp, curve, &specs, opts),
            ModelKind::TwoState => lm_minimize(&TwoState, curve, &specs, opts),
        }
    }
}

/// How η enters a two-state fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaSpec {
    /// Fitted together with Γ₁, bounded to [0, 1).
    Free,
    /// Held at a characterized value.
    Fixed(PolEfficiency),
}

/// Starting values read off a normalized decay.
#[derive(Debug, Clone, Copy)]
struct Guess {
    first: f64,
    tail: f64,
    /// Dark time where the decay has fallen to 1/e of its initial height.
    t_e: f64,
}

impl Guess {
    fn from_curve(curve: &DecayCurve) -> Self {
        let y = &curve.signal;
        let tau = &curve.tau;
        let n = y.len();
        let k = (n / 8).clamp(1, 3).min(n);
        let tail = y[n - k..].iter().sum::<f64>() / k as f64;
        let first = y[0];
        let height = first - tail;
        let fallback = (tau[0].max(1e-9) * tau[n - 1]).sqrt();
        let mut t_e = fallback;
        if height > 0.0 {
            let level = (-1.0f64).exp();
            if let Some(i) = (1..n).find(|&i| (y[i] - tail) / height < level) {
                let z0 = ((y[i - 1] - tail) / height).max(1e-12);
                let z1 = ((y[i] - tail) / height).max(1e-12);
                let (l0, l1) = (z0.ln(), z1.ln());
                let frac = if l0 != l1 { (l0 + 1.0) / (l0 - l1) } else { 0.5 };
                let (a, b) = (tau[i - 1].max(1e-12).ln(), tau[i].ln());
                t_e = (a + frac.clamp(0.0, 1.0) * (b - a)).exp();
            } else {
                t_e = tau[n - 1];
            }
        }
        Self { first, tail, t_e }
    }
}

fn rate_spec(value: f64) -> ParamSpec {
    let v = if value.is_finite() && value > 0.0 { value } else { 1.0 };
    ParamSpec::free("gamma1", v).bounded(0.0, f64::INFINITY)
}

fn single_specs(g: &Guess) -> Vec<ParamSpec> {
    vec![
        rate_spec(1.0 / (2.0 * g.t_e)),
        ParamSpec::free("amplitude", g.first - g.tail),
        ParamSpec::free("offset", g.tail),
    ]
}

fn stretched_specs(g: &Guess) -> Vec<ParamSpec> {
    vec![
        rate_spec(1.0 / g.t_e),
        ParamSpec::free("stretch", 1.0).bounded(0.0, 2.0),
        ParamSpec::free("amplitude", g.first - g.tail),
        ParamSpec::free("offset", g.tail),
    ]
}

fn two_state_specs(g: &Guess, eta: EtaSpec) -> Vec<ParamSpec> {
    let eta0 = match eta {
        EtaSpec::Free => ETA_START,
        EtaSpec::Fixed(e) => e.value(),
    };
    // contrast (1 − η)r/(1 − ηr) crosses 1/e at r = 1/(e(1 − η) + η)
    let gamma = (std::f64::consts::E * (1.0 - eta0) + eta0).ln() / (2.0 * g.t_e);
    let height = g.first - g.tail;
    let lower = AMPLITUDE_MIN.max(eta0 + AMPLITUDE_MARGIN);
    let mut amp = if height > 0.0 {
        eta0 + (1.0 - eta0) / height
    } else {
        1.0
    };
    if !amp.is_finite() {
        amp = 1.0;
    }
    let amp = amp.clamp(lower + 1e-6 * (AMPLITUDE_MAX - lower), AMPLITUDE_MAX * (1.0 - 1e-6));

    let eta_spec = match eta {
        EtaSpec::Free => ParamSpec::free("eta", eta0).bounded(0.0, 1.0),
        EtaSpec::Fixed(e) => ParamSpec::fixed("eta", e.value()).bounded(0.0, 1.0),
    };
    let amp_spec = match eta {
        EtaSpec::Free => ParamSpec::free("amplitude", amp)
            .bounded(AMPLITUDE_MIN, AMPLITUDE_MAX)
            .with_floor(1, AMPLITUDE_MARGIN),
        EtaSpec::Fixed(_) => ParamSpec::free("amplitude", amp).bounded(lower, AMPLITUDE_MAX),
    };
    vec![rate_spec(gamma), eta_spec, amp_spec, ParamSpec::free("offset", g.tail)]
}

/// Fits `A·exp(−2Γ₁τ) + c` to a normalized curve.
pub fn fit_single_exp(curve: &DecayCurve) -> Result<FitResult> {
    lm_minimize(&SingleExp, curve, &single_specs(&Guess::from_curve(curve)), &LmOptions::default())
}

/// Fits `A·exp(−(τΓ₁)^p) + c` with p ∈ (0, 2], starting from p = 1.
pub fn fit_stretched_exp(curve: &DecayCurve) -> Result<FitResult> {
    lm_minimize(&StretchedExp, curve, &stretched_specs(&Guess::from_curve(curve)), &LmOptions::default())
}

/// Fits the two-state model with A ∈ [max(η + ε, 0.5), 2].
pub fn fit_two_state(curve: &DecayCurve, eta: EtaSpec) -> Result<FitResult> {
    fit_two_state_with(curve, eta, &LmOptions::default())
}

pub fn fit_two_state_with(curve: &DecayCurve, eta: EtaSpec, opts: &LmOptions) -> Result<FitResult> {
    lm_minimize(&TwoState, curve, &two_state_specs(&Guess::from_curve(curve), eta), opts)
}

/// Two-state fit with Γ₁ held fixed and η free: the polarization characterization step.
pub fn fit_two_state_fixed_rate(curve: &DecayCurve, gamma1: f64) -> Result<FitResult> {
    if !(gamma1 > 0.0) {
        return Err(Error::Domain(format!("fixed gamma1 must be > 0, got {gamma1}")));
    }
    let mut specs = two_state_specs(&Guess::from_curve(curve), EtaSpec::Free);
    specs[0] = ParamSpec::fixed("gamma1", gamma1).bounded(0.0, f64::INFINITY);
    lm_minimize(&TwoState, curve, &specs, &LmOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::log_spaced;

    fn curve_from(model: &dyn Fn(f64) -> f64) -> DecayCurve {
        let tau = log_spaced(1e-6, 5e-3, 25);
        let y = tau.iter().map(|&t| model(t)).collect();
        DecayCurve::from_signal(tau, y).unwrap()
    }

    #[test]
    fn guess_finds_one_over_e_time() {
        let c = curve_from(&|t| (-2.0 * 500.0 * t).exp());
        let g = Guess::from_curve(&c);
        // tail of a 5 ms window is not exactly zero, so allow a loose match
        assert!((g.t_e * 1000.0 - 1.0).abs() < 0.1, "{}", g.t_e);
    }

    #[test]
    fn unknown_fix_name_is_rejected() {
        let c = curve_from(&|t| (-2.0 * 500.0 * t).exp());
        let err = ModelKind::Single
            .fit_with_fixes(&c, &[("bogus".into(), 1.0)], &LmOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn fixed_rate_characterization_recovers_eta() {
        let p = [180.0, 0.55, 1.0, 0.0];
        let c = curve_from(&|t| TwoState.value(t, &p));
        let fit = fit_two_state_fixed_rate(&c, 180.0).unwrap();
        assert!(fit.converged);
        assert!((fit.value("eta").unwrap() - 0.55).abs() < 1e-6);
        assert_eq!(fit.value("gamma1"), Some(180.0));
    }
}
