//! Per-pixel widefield analysis: polarization characterization and rate mapping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::DecayCurve;
use crate::error::{Error, Result};
use crate::fit::{fit_stretched_exp, fit_two_state, fit_two_state_fixed_rate, normalize_curve, EtaSpec, FitResult};
use crate::map::ScalarMap;
use crate::model::PolEfficiency;
use crate::stack::ImageStack;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub version: u32,
    /// Rate assumed for the polarization characterization fit (s⁻¹).
    pub fixed_gamma1: f64,
    /// Pixels whose first-τ contrast is below this many standard deviations are masked.
    pub snr_threshold: f64,
    pub binning: usize,
    /// Worker threads; `None` uses all available cores.
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            fixed_gamma1: 180.0,
            snr_threshold: 10.0,
            binning: 1,
            workers: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported pipeline config version {}", self.version)));
        }
        if !(self.fixed_gamma1 > 0.0 && self.fixed_gamma1.is_finite()) {
            return Err(Error::Config("fixed_gamma1 must be > 0".into()));
        }
        if !(self.snr_threshold >= 0.0) {
            return Err(Error::Config("snr_threshold must be >= 0".into()));
        }
        if self.binning == 0 {
            return Err(Error::Config("binning must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fit maps from the two-state model with η held at its characterized value.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMaps {
    pub gamma1: ScalarMap,
    pub amplitude: ScalarMap,
    pub offset: ScalarMap,
    pub reduced_chi2: ScalarMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StretchedMaps {
    /// Fitted rate halved, so it is directly comparable with two-state Γ₁.
    pub gamma1: ScalarMap,
    pub stretch: ScalarMap,
    pub reduced_chi2: ScalarMap,
}

/// Whether the first-τ contrast stands out from shot noise.
fn passes_snr(raw: &DecayCurve, threshold: f64) -> bool {
    let s0 = raw.signal[0];
    let (diff, var) = match &raw.reference {
        Some(r) => (s0 - r[0], s0 + r[0]),
        None => {
            let n = raw.len();
            let k = n.min(3);
            let tail = raw.signal[n - k..].iter().sum::<f64>() / k as f64;
            (s0 - tail, s0 + tail)
        }
    };
    if !diff.is_finite() || diff <= 0.0 {
        return false;
    }
    threshold <= 0.0 || diff >= threshold * var.max(1.0).sqrt()
}

fn prepared(stack: &ImageStack, pixel: usize, cfg: &PipelineConfig) -> Option<DecayCurve> {
    let raw = stack.pixel_curve(pixel);
    if !passes_snr(&raw, cfg.snr_threshold) {
        return None;
    }
    normalize_curve(&raw).ok()
}

fn accepted(fit: Result<FitResult>) -> Option<FitResult> {
    fit.ok().filter(|f| f.converged && f.values().iter().all(|v| v.is_finite()))
}

fn run_pixels<T, F>(n: usize, workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match workers {
        None => Ok((0..n).into_par_iter().map(&f).collect()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {k} workers: {e}")))?;
            Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
        }
    }
}

fn prepare_stack<'a>(stack: &'a ImageStack, cfg: &PipelineConfig) -> Result<std::borrow::Cow<'a, ImageStack>> {
    cfg.validate()?;
    if stack.taus.len() < 5 {
        return Err(Error::Precondition(format!(
            "need at least 5 dark times per pixel, stack has {}",
            stack.taus.len()
        )));
    }
    Ok(if cfg.binning > 1 {
        std::borrow::Cow::Owned(stack.binned(cfg.binning)?)
    } else {
        std::borrow::Cow::Borrowed(stack)
    })
}

/// η as seen by a curve normalized at dark time `tau0`.
///
/// Dividing the contrast by its value at `tau0` leaves the two-state form
/// intact with η replaced by `η·exp(−2Γ₁τ₀)`.
pub fn normalized_eta(eta: f64, gamma1: f64, tau0: f64) -> f64 {
    eta * (-2.0 * gamma1 * tau0).exp()
}

const RATE_ITERATIONS: usize = 8;
const RATE_TOLERANCE: f64 = 1e-10;

/// Per-pixel η from a two-state fit with Γ₁ fixed at `cfg.fixed_gamma1`.
pub fn characterize_eta(stack: &ImageStack, cfg: &PipelineConfig) -> Result<ScalarMap> {
    let stack = prepare_stack(stack, cfg)?;
    let tau0 = stack.taus[0];
    let values = run_pixels(stack.n_pixels(), cfg.workers, |i| {
        let curve = prepared(&stack, i, cfg)?;
        let seen = accepted(fit_two_state_fixed_rate(&curve, cfg.fixed_gamma1))?.value("eta")?;
        let eta = seen / normalized_eta(1.0, cfg.fixed_gamma1, tau0);
        (eta < 1.0).then_some(eta)
    })?;
    Ok(ScalarMap::from_options(stack.width, stack.height, "eta", "1", &values)
        .with_provenance("model", "two-state")
        .with_provenance("fixed_gamma1", cfg.fixed_gamma1)
        .with_provenance("snr_threshold", cfg.snr_threshold)
        .with_provenance("binning", stack.metadata.binning.max(1)))
}

/// Per-pixel Γ₁ from a two-state fit with η taken from `eta_map`.
///
/// Pixels masked in `eta_map`, failing the SNR gate or failing to converge
/// are masked in every output map.
pub fn fit_rate_map(stack: &ImageStack, eta_map: &ScalarMap, cfg: &PipelineConfig) -> Result<RateMaps> {
    let stack = prepare_stack(stack, cfg)?;
    if eta_map.width != stack.width || eta_map.height != stack.height {
        return Err(Error::Dimension(format!(
            "eta map is {}×{}, stack is {}×{}",
            eta_map.width, eta_map.height, stack.width, stack.height
        )));
    }
    let tau0 = stack.taus[0];
    let fits = run_pixels(stack.n_pixels(), cfg.workers, |i| {
        let eta = eta_map.mask[i].then(|| eta_map.values[i])?;
        let curve = prepared(&stack, i, cfg)?;
        let fit = fit_self_consistent(&curve, eta, tau0)?;
        Some([
            fit.value("gamma1")?,
            fit.value("amplitude")?,
            fit.value("offset")?,
            fit.reduced_chi2,
        ])
    })?;
    let column = |k: usize| fits.iter().map(|f| f.map(|v| v[k])).collect::<Vec<_>>();
    let (w, h) = (stack.width, stack.height);
    let tag = |m: ScalarMap| {
        m.with_provenance("model", "two-state")
            .with_provenance("eta", "fixed per pixel")
            .with_provenance("snr_threshold", cfg.snr_threshold)
            .with_provenance("binning", stack.metadata.binning.max(1))
    };
    Ok(RateMaps {
        gamma1: tag(ScalarMap::from_options(w, h, "gamma1", "s^-1", &column(0))),
        amplitude: tag(ScalarMap::from_options(w, h, "amplitude", "1", &column(1))),
        offset: tag(ScalarMap::from_options(w, h, "offset", "1", &column(2))),
        reduced_chi2: tag(ScalarMap::from_options(w, h, "reduced_chi2", "1", &column(3))),
    })
}

/// Fixed-η two-state fit where the effective η depends on the fitted Γ₁
/// through the normalization; iterated to a fixed point.
fn fit_self_consistent(curve: &DecayCurve, eta: f64, tau0: f64) -> Option<FitResult> {
    let mut eta_eff = eta;
    let mut fit = accepted(fit_two_state(curve, EtaSpec::Fixed(PolEfficiency::new(eta_eff).ok()?)))?;
    for _ in 0..RATE_ITERATIONS {
        let gamma = fit.value("gamma1")?;
        let next = normalized_eta(eta, gamma, tau0);
        if (next - eta_eff).abs() <= RATE_TOLERANCE {
            break;
        }
        eta_eff = next;
        fit = accepted(fit_two_state(curve, EtaSpec::Fixed(PolEfficiency::new(eta_eff).ok()?)))?;
    }
    Some(fit)
}

/// Per-pixel stretched-exponential fit, the polarization-agnostic comparison.
pub fn fit_rate_map_stretched(stack: &ImageStack, cfg: &PipelineConfig) -> Result<StretchedMaps> {
    let stack = prepare_stack(stack, cfg)?;
    let fits = run_pixels(stack.n_pixels(), cfg.workers, |i| {
        let curve = prepared(&stack, i, cfg)?;
        let fit = accepted(fit_stretched_exp(&curve))?;
        Some([fit.value("gamma1")? / 2.0, fit.value("stretch")?, fit.reduced_chi2])
    })?;
    let column = |k: usize| fits.iter().map(|f| f.map(|v| v[k])).collect::<Vec<_>>();
    let (w, h) = (stack.width, stack.height);
    let tag = |m: ScalarMap| {
        m.with_provenance("model", "stretched")
            .with_provenance("rate_convention", "fitted rate / 2")
            .with_provenance("snr_threshold", cfg.snr_threshold)
            .with_provenance("binning", stack.metadata.binning.max(1))
    };
    Ok(StretchedMaps {
        gamma1: tag(ScalarMap::from_options(w, h, "gamma1", "s^-1", &column(0))),
        stretch: tag(ScalarMap::from_options(w, h, "stretch", "1", &column(1))),
        reduced_chi2: tag(ScalarMap::from_options(w, h, "reduced_chi2", "1", &column(2))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_widefield, SceneConfig};

    fn small_scene(noise: bool) -> SceneConfig {
        let mut s = SceneConfig::with_eta_span(6, 5, 0.4, 0.7, 10e-6).unwrap();
        s.readout.shot_noise = noise;
        s.tau_grid = crate::curve::log_spaced(1e-6, 9e-3, 25);
        s
    }

    #[test]
    fn noiseless_characterization_recovers_eta_at_the_true_rate() {
        let scene = small_scene(false);
        let sim = simulate_widefield(&scene).unwrap();
        let cfg = PipelineConfig {
            fixed_gamma1: scene.gamma1_background,
            ..Default::default()
        };
        let eta = characterize_eta(&sim.stack, &cfg).unwrap();
        assert_eq!(eta.n_valid(), 30);
        for i in 0..30 {
            assert!((eta.values[i] - sim.eta_truth.values[i]).abs() < 1e-6);
        }
        let rates = fit_rate_map(&sim.stack, &eta, &cfg).unwrap();
        for &g in &rates.gamma1.valid_values() {
            assert!((g - 200.0).abs() < 1e-3, "{g}");
        }
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let sim = simulate_widefield(&small_scene(true)).unwrap();
        let one = PipelineConfig {
            workers: Some(1),
            ..Default::default()
        };
        let three = PipelineConfig {
            workers: Some(3),
            ..Default::default()
        };
        assert_eq!(characterize_eta(&sim.stack, &one).unwrap(), characterize_eta(&sim.stack, &three).unwrap());
    }

    #[test]
    fn mismatched_eta_map_is_rejected() {
        let sim = simulate_widefield(&small_scene(false)).unwrap();
        let eta = ScalarMap::empty(3, 3, "eta", "1");
        assert!(matches!(
            fit_rate_map(&sim.stack, &eta, &PipelineConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"snr": 3}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"binning": 2}"#).unwrap();
        assert_eq!(c.fixed_gamma1, 180.0);
    }
}
