//! Two-state population dynamics of an optically pumped spin.
//!
//! The spin is reduced to a polarized state `|0⟩` and a mixed partner `|1⟩`.
//! Relaxation at rate Γ₁ mixes the two; optical pumping at rate Γ_p returns
//! population to `|0⟩`. A measurement cycle is a polarizing laser pulse
//! followed by a dark time τ, after which the state is read out. Repeating the
//! cycle drives the populations to a steady state that depends on the
//! polarization inefficiency η = exp(−t_p·Γ_p).
//!
//! All times are in seconds and all rates in Hz. The relaxation contrast decays
//! as `exp(−2Γ₁τ)`, and every model in this crate uses that convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Γ_p must exceed Γ₁ by this factor for relaxation during the pulse to be negligible.
pub const WEAK_RELAXATION_RATIO: f64 = 100.0;

/// Relaxation and optical pumping rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    gamma1: f64,
    gamma_p: f64,
}

impl Rates {
    pub fn new(gamma1: f64, gamma_p: f64) -> Result<Self> {
        if !(gamma1 > 0.0 && gamma1.is_finite()) {
            return Err(Error::Domain(format!("gamma1 must be > 0, got {gamma1}")));
        }
        if !(gamma_p >= 0.0 && gamma_p.is_finite()) {
            return Err(Error::Domain(format!("gamma_p must be >= 0, got {gamma_p}")));
        }
        Ok(Self { gamma1, gamma_p })
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn gamma_p(&self) -> f64 {
        self.gamma_p
    }

    /// True when pumping dominates relaxation enough for the pulse to be
    /// treated as a pure polarization step.
    pub fn is_weak_relaxation(&self) -> bool {
        self.gamma_p >= WEAK_RELAXATION_RATIO * self.gamma1
    }
}

/// Polarization inefficiency η ∈ [0, 1). Zero means perfect state preparation.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PolEfficiency(f64);

impl PolEfficiency {
    pub fn new(eta: f64) -> Result<Self> {
        if (0.0..1.0).contains(&eta) {
            Ok(Self(eta))
        } else {
            Err(Error::Domain(format!("eta must lie in [0, 1), got {eta}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PolEfficiency {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PolEfficiency> for f64 {
    fn from(e: PolEfficiency) -> f64 {
        e.0
    }
}

/// Occupation probabilities of `|0⟩` and `|1⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationVector {
    pub n0: f64,
    pub n1: f64,
}

impl PopulationVector {
    pub const POLARIZED: Self = Self { n0: 1.0, n1: 0.0 };
    pub const MIXED: Self = Self { n0: 0.5, n1: 0.5 };

    pub fn new(n0: f64, n1: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&n0) && (0.0..=1.0).contains(&n1) && (n0 + n1 - 1.0).abs() <= 1e-12;
        if ok {
            Ok(Self { n0, n1 })
        } else {
            Err(Error::Domain(format!("not a population vector: ({n0}, {n1})")))
        }
    }

    pub fn from_n0(n0: f64) -> Self {
        Self { n0, n1: 1.0 - n0 }
    }

    /// Population difference n0 − n1.
    pub fn contrast(&self) -> f64 {
        self.n0 - self.n1
    }

    fn from_contrast(d: f64) -> Self {
        Self {
            n0: 0.5 * (1.0 + d),
            n1: 0.5 * (1.0 - d),
        }
    }
}

/// A 2×2 matrix, `m[row][col]`, acting on column vectors `(n0, n1)`.
///
/// Propagators built in this module are column-stochastic; rate matrices
/// returned by [`transition_matrix`] have zero column sums instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagator2x2 {
    pub m: [[f64; 2]; 2],
}

impl Propagator2x2 {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0], [0.0, 1.0]],
    };

    pub fn new(m: [[f64; 2]; 2]) -> Self {
        Self { m }
    }

    pub fn apply(&self, n: PopulationVector) -> PopulationVector {
        PopulationVector {
            n0: self.m[0][0] * n.n0 + self.m[0][1] * n.n1,
            n1: self.m[1][0] * n.n0 + self.m[1][1] * n.n1,
        }
    }

    /// Matrix product `self · rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &Self) -> Self {
        let a = &self.m;
        let b = &rhs.m;
        let mut m = [[0.0; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Self { m }
    }

    pub fn column_sums(&self) -> [f64; 2] {
        [self.m[0][0] + self.m[1][0], self.m[0][1] + self.m[1][1]]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        d
    }
}

/// Parameters of the normalized two-state photoluminescence model
/// `PL(τ) = (η − 1)/(η − A·exp(2Γ₁τ)) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStateParams {
    pub gamma1: f64,
    pub eta: f64,
    pub amplitude: f64,
    pub offset: f64,
}

impl TwoStateParams {
    /// Requires Γ₁ > 0, η ∈ [0, 1) and A > η so the denominator never vanishes for τ ≥ 0.
    pub fn new(gamma1: f64, eta: f64, amplitude: f64, offset: f64) -> Result<Self> {
        if !(gamma1 > 0.0 && gamma1.is_finite()) {
            return Err(Error::Domain(format!("gamma1 must be > 0, got {gamma1}")));
        }
        PolEfficiency::new(eta)?;
        if !(amplitude > eta && amplitude.is_finite()) {
            return Err(Error::Domain(format!(
                "amplitude must exceed eta ({eta}), got {amplitude}"
            )));
        }
        if !offset.is_finite() {
            return Err(Error::Domain("offset must be finite".into()));
        }
        Ok(Self {
            gamma1,
            eta,
            amplitude,
            offset,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.gamma1, self.eta, self.amplitude, self.offset]
    }
}

/// Parameters of `A·exp(−(τΓ₁)^p) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StretchedExpParams {
    pub gamma1: f64,
    pub stretch: f64,
    pub amplitude: f64,
    pub offset: f64,
}

impl StretchedExpParams {
    pub fn new(gamma1: f64, stretch: f64, amplitude: f64, offset: f64) -> Result<Self> {
        if !(gamma1 > 0.0 && gamma1.is_finite()) {
            return Err(Error::Domain(format!("gamma1 must be > 0, got {gamma1}")));
        }
        if !(stretch > 0.0 && stretch <= 2.0) {
            return Err(Error::Domain(format!("stretch must lie in (0, 2], got {stretch}")));
        }
        Ok(Self {
            gamma1,
            stretch,
            amplitude,
            offset,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.gamma1, self.stretch, self.amplitude, self.offset]
    }
}

/// Rate matrix T of `dn/dt = T·n`.
pub fn transition_matrix(rates: &Rates) -> Propagator2x2 {
    let g1 = rates.gamma1;
    let gp = rates.gamma_p;
    Propagator2x2::new([[-g1, g1 + gp], [g1, -g1 - gp]])
}

/// Closed-form `exp(T·t)` for the two-state rate matrix.
pub fn full_propagator(rates: &Rates, t: f64) -> Propagator2x2 {
    let g1 = rates.gamma1;
    let gp = rates.gamma_p;
    let s = 2.0 * g1 + gp;
    let decay = (-s * t).exp();
    // 1 − e^{−st}, accurate for small st
    let grown = -(-s * t).exp_m1();
    let up = (g1 + gp) / s;
    let down = g1 / s;
    Propagator2x2::new([
        [up + down * decay, up * grown],
        [down * grown, down + up * decay],
    ])
}

/// η = exp(−t_p·Γ_p). Fails when the result is 1 (no pumping).
pub fn eta_from_pulse(t_p: f64, gamma_p: f64) -> Result<PolEfficiency> {
    if !(t_p > 0.0) {
        return Err(Error::Domain(format!("pulse length must be > 0, got {t_p}")));
    }
    if !(gamma_p >= 0.0) {
        return Err(Error::Domain(format!("gamma_p must be >= 0, got {gamma_p}")));
    }
    PolEfficiency::new((-t_p * gamma_p).exp())
}

/// Polarizing pulse: moves a fraction 1 − η of `|1⟩` into `|0⟩`.
pub fn pol_propagator(eta: PolEfficiency) -> Propagator2x2 {
    let e = eta.0;
    Propagator2x2::new([[1.0, 1.0 - e], [0.0, e]])
}

/// Free relaxation over a dark time τ.
pub fn relax_propagator(gamma1: f64, tau: f64) -> Propagator2x2 {
    let r = (-2.0 * gamma1 * tau).exp();
    let mix = -(-2.0 * gamma1 * tau).exp_m1();
    Propagator2x2::new([
        [0.5 * (1.0 + r), 0.5 * mix],
        [0.5 * mix, 0.5 * (1.0 + r)],
    ])
}

/// How [`population_finite_n`] evaluates the repeated cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CycleMethod {
    #[default]
    ClosedForm,
    Iterated,
}

/// Population at readout after `n` pulse/dark-time cycles from `n_init`.
///
/// Each cycle applies the polarizing pulse and then relaxes for τ, so readout
/// happens at the end of a dark time.
pub fn population_finite_n(
    eta: PolEfficiency,
    gamma1: f64,
    tau: f64,
    n: u32,
    n_init: PopulationVector,
    method: CycleMethod,
) -> Result<PopulationVector> {
    if n == 0 {
        return Err(Error::Domain("repetitions must be >= 1".into()));
    }
    match method {
        CycleMethod::Iterated => {
            let cycle = relax_propagator(gamma1, tau).compose(&pol_propagator(eta));
            let mut state = n_init;
            for _ in 0..n {
                state = cycle.apply(state);
            }
            Ok(state)
        }
        CycleMethod::ClosedForm => {
            // contrast obeys d ← r(1 − η) + ηr·d, a geometric approach to d*
            let e = eta.0;
            let r = (-2.0 * gamma1 * tau).exp();
            let fixed = steady_contrast(e, r);
            let d = fixed + (e * r).powi(n as i32) * (n_init.contrast() - fixed);
            Ok(PopulationVector::from_contrast(d))
        }
    }
}

fn steady_contrast(eta: f64, r: f64) -> f64 {
    (1.0 - eta) * r / (1.0 - eta * r)
}

/// Steady-state population after infinitely many cycles:
/// `n0 = ½(1 + (η − 1)/(η − exp(2Γ₁τ)))`.
pub fn population_steady(eta: PolEfficiency, gamma1: f64, tau: f64) -> PopulationVector {
    let r = (-2.0 * gamma1 * tau).exp();
    PopulationVector::from_contrast(steady_contrast(eta.0, r))
}

/// Rate reported by the initial decay of an imperfectly polarized spin: Γ₁/(1 − η).
pub fn apparent_rate(gamma1: f64, eta: PolEfficiency) -> f64 {
    gamma1 / (1.0 - eta.0)
}

/// Two-state PL model, evaluated in a form that cannot overflow for large Γ₁τ.
pub fn pl_two_state(tau: f64, p: &TwoStateParams) -> f64 {
    two_state_value(tau, p.gamma1, p.eta, p.amplitude, p.offset)
}

#[inline]
pub(crate) fn two_state_value(tau: f64, gamma1: f64, eta: f64, amplitude: f64, offset: f64) -> f64 {
    let r = (-2.0 * gamma1 * tau).exp();
    (1.0 - eta) * r / (amplitude - eta * r) + offset
}

/// `A·exp(−2Γ₁τ) + c`.
pub fn pl_single_exp(tau: f64, gamma1: f64, amplitude: f64, offset: f64) -> f64 {
    amplitude * (-2.0 * gamma1 * tau).exp() + offset
}

/// `A·exp(−(τΓ₁)^p) + c`. Note the rate enters without the factor of two used
/// by the other models, so at p = 1 this equals [`pl_single_exp`] at Γ₁/2.
pub fn pl_stretched_exp(tau: f64, p: &StretchedExpParams) -> f64 {
    stretched_value(tau, p.gamma1, p.stretch, p.amplitude, p.offset)
}

#[inline]
pub(crate) fn stretched_value(tau: f64, gamma1: f64, stretch: f64, amplitude: f64, offset: f64) -> f64 {
    amplitude * (-(tau * gamma1).powf(stretch)).exp() + offset
}

/// Partials of the two-state model in the order (Γ₁, η, A, c).
pub fn jacobian_two_state(tau: f64, p: &TwoStateParams) -> [f64; 4] {
    two_state_gradient(tau, p.gamma1, p.eta, p.amplitude)
}

#[inline]
pub(crate) fn two_state_gradient(tau: f64, gamma1: f64, eta: f64, amplitude: f64) -> [f64; 4] {
    let r = (-2.0 * gamma1 * tau).exp();
    let den = amplitude - eta * r;
    let den2 = den * den;
    [
        -2.0 * tau * (1.0 - eta) * amplitude * r / den2,
        r * (r - amplitude) / den2,
        -(1.0 - eta) * r / den2,
        1.0,
    ]
}

/// Partials of the single exponential in the order (Γ₁, A, c).
pub fn jacobian_single_exp(tau: f64, gamma1: f64, amplitude: f64) -> [f64; 3] {
    let r = (-2.0 * gamma1 * tau).exp();
    [-2.0 * tau * amplitude * r, r, 1.0]
}

/// Partials of the stretched exponential in the order (Γ₁, p, A, c).
pub fn jacobian_stretched_exp(tau: f64, p: &StretchedExpParams) -> [f64; 4] {
    stretched_gradient(tau, p.gamma1, p.stretch, p.amplitude)
}

#[inline]
pub(crate) fn stretched_gradient(tau: f64, gamma1: f64, stretch: f64, amplitude: f64) -> [f64; 4] {
    let x = tau * gamma1;
    if x <= 0.0 {
        return [0.0, 0.0, 1.0, 1.0];
    }
    let u = x.powf(stretch);
    let e = (-u).exp();
    [
        -amplitude * e * stretch * u / gamma1,
        -amplitude * e * u * x.ln(),
        e,
        1.0,
    ]
}

/// Rate attributed to an external target: measured minus intrinsic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRate {
    pub value: f64,
    /// Set when the measured rate is below the intrinsic rate.
    pub unphysical: bool,
}

pub fn target_rate(gamma_measured: f64, gamma_intrinsic: f64) -> TargetRate {
    let value = gamma_measured - gamma_intrinsic;
    TargetRate {
        value,
        unphysical: value < 0.0,
    }
}

/// Room-temperature ensemble relaxation rate (s⁻¹) for an NV density in ppm.
pub fn jarmola_intrinsic_rate(nv_density_ppm: f64) -> f64 {
    0.82 * nv_density_ppm + 175.5
}
