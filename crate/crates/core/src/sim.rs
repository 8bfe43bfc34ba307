//! Synthetic relaxometry data: single decay curves, rate-distributed
//! ensembles and widefield image stacks under a Gaussian pump beam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::curve::DecayCurve;
use crate::error::{Error, Result};
use crate::map::ScalarMap;
use crate::model::{population_finite_n, population_steady, CycleMethod, PolEfficiency, PopulationVector};
use crate::stack::{Channel, ImageStack, StackMetadata};

/// Repetition count from which the steady state replaces the finite-N recursion.
pub const STEADY_STATE_REPETITIONS: u64 = 50;

const NOISE_STREAM: u64 = 0;
const MEMBER_STREAM: u64 = 1;

/// Photon counts per repetition: `counts_bright · (1 − contrast · n1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutModel {
    pub counts_bright: f64,
    pub contrast: f64,
    pub shot_noise: bool,
}

impl Default for ReadoutModel {
    fn default() -> Self {
        Self {
            counts_bright: 0.05,
            contrast: 0.3,
            shot_noise: true,
        }
    }
}

impl ReadoutModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.counts_bright > 0.0 && self.counts_bright.is_finite()) {
            return Err(Error::Config(format!("counts_bright must be > 0, got {}", self.counts_bright)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config(format!("contrast must lie in (0, 1], got {}", self.contrast)));
        }
        Ok(())
    }

    pub fn counts_per_shot(&self, n1: f64) -> f64 {
        self.counts_bright * (1.0 - self.contrast * n1)
    }
}

/// How the polarizing step is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pumping {
    /// A pulse of length `t_p` at pump rate `gamma_p`; η = exp(−t_p·Γp).
    Pulse { t_p: f64, gamma_p: f64 },
    /// η given directly.
    Direct(PolEfficiency),
}

impl Pumping {
    pub fn eta(&self) -> Result<PolEfficiency> {
        match *self {
            Pumping::Pulse { t_p, gamma_p } => crate::model::eta_from_pulse(t_p, gamma_p),
            Pumping::Direct(e) => Ok(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PopulationMode {
    /// Steady state from [`STEADY_STATE_REPETITIONS`] repetitions on, finite-N below.
    #[default]
    Auto,
    Steady,
    FiniteN,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSimConfig {
    pub gamma1: f64,
    pub pumping: Pumping,
    pub tau_grid: Vec<f64>,
    pub repetitions: u64,
    pub readout: ReadoutModel,
    pub reference_channel: bool,
    pub seed: u64,
    pub population: PopulationMode,
    /// Population before the first cycle in finite-N mode.
    pub initial: PopulationVector,
}

impl CurveSimConfig {
    pub fn new(gamma1: f64, pumping: Pumping, tau_grid: Vec<f64>) -> Self {
        Self {
            gamma1,
            pumping,
            tau_grid,
            repetitions: 1000,
            readout: ReadoutModel::default(),
            reference_channel: true,
            seed: 0,
            population: PopulationMode::Auto,
            initial: PopulationVector::MIXED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 > 0.0 && self.gamma1.is_finite()) {
            return Err(Error::Config(format!("gamma1 must be > 0, got {}", self.gamma1)));
        }
        if let Pumping::Pulse { t_p, gamma_p } = self.pumping {
            if !(t_p > 0.0 && gamma_p > 0.0) {
                return Err(Error::Config("pulse length and pump rate must be > 0".into()));
            }
        }
        self.pumping.eta()?;
        validate_grid(&self.tau_grid)?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        self.readout.validate()
    }

    fn uses_steady_state(&self) -> bool {
        match self.population {
            PopulationMode::Auto => self.repetitions >= STEADY_STATE_REPETITIONS,
            PopulationMode::Steady => true,
            PopulationMode::FiniteN => false,
        }
    }
}

fn validate_grid(tau: &[f64]) -> Result<()> {
    if tau.is_empty() {
        return Err(Error::Config("tau grid is empty".into()));
    }
    if tau.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::Config("tau values must be finite and >= 0".into()));
    }
    if tau.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("tau grid must be strictly increasing".into()));
    }
    Ok(())
}

fn population_n1(cfg: &CurveSimConfig, eta: PolEfficiency, gamma1: f64, tau: f64) -> Result<f64> {
    let pop = if cfg.uses_steady_state() {
        population_steady(eta, gamma1, tau)
    } else {
        let n = u32::try_from(cfg.repetitions).map_err(|_| Error::Config("repetitions too large for finite-N".into()))?;
        population_finite_n(eta, gamma1, tau, n, cfg.initial, CycleMethod::ClosedForm)?
    };
    Ok(pop.n1)
}

fn poisson_draw(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    match Poisson::new(mean) {
        Ok(d) => d.sample(rng),
        Err(_) => mean,
    }
}

/// Expected or noisy counts for given readout-time populations.
///
/// The reference sequence inverts the spin before readout, so it reads `n0`
/// where the signal reads `n1`.
fn counts_from_n1(n1: &[f64], cfg: &CurveSimConfig) -> Result<DecayCurve> {
    let scale = cfg.repetitions as f64;
    let ro = &cfg.readout;
    let mut signal: Vec<f64> = n1.iter().map(|&p| scale * ro.counts_per_shot(p)).collect();
    let mut reference: Option<Vec<f64>> = cfg
        .reference_channel
        .then(|| n1.iter().map(|&p| scale * ro.counts_per_shot(1.0 - p)).collect());
    let mut sigma = None;
    if ro.shot_noise {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(NOISE_STREAM);
        for i in 0..signal.len() {
            // one draw of Poisson(N·μ) equals the sum of N per-shot draws
            signal[i] = poisson_draw(&mut rng, signal[i]);
            if let Some(r) = reference.as_mut() {
                r[i] = poisson_draw(&mut rng, r[i]);
            }
        }
        sigma = Some(signal.iter().map(|v| v.max(1.0).sqrt()).collect());
    }
    DecayCurve::new(cfg.tau_grid.clone(), signal, reference, sigma)
}

/// Raw signal (and reference) counts for one spin species.
///
/// Sigma is `√counts` when shot noise is on; noiseless curves carry none.
/// Same config and seed give bit-identical output.
pub fn simulate_curve(cfg: &CurveSimConfig) -> Result<DecayCurve> {
    cfg.validate()?;
    let eta = cfg.pumping.eta()?;
    let n1 = cfg
        .tau_grid
        .iter()
        .map(|&t| population_n1(cfg, eta, cfg.gamma1, t))
        .collect::<Result<Vec<_>>>()?;
    counts_from_n1(&n1, cfg)
}

/// Normally distributed relaxation rates around `CurveSimConfig::gamma1`,
/// truncated to positive values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleSpec {
    pub rate_sd: f64,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCurve {
    pub curve: DecayCurve,
    pub member_rates: Vec<f64>,
}

impl EnsembleCurve {
    pub fn mean_rate(&self) -> f64 {
        self.member_rates.iter().sum::<f64>() / self.member_rates.len() as f64
    }
}

/// Curve from a population-averaged ensemble of spins sharing η.
///
/// With `rate_sd = 0` this is exactly [`simulate_curve`].
pub fn simulate_ensemble_curve(cfg: &CurveSimConfig, spec: &EnsembleSpec) -> Result<EnsembleCurve> {
    cfg.validate()?;
    if !(spec.rate_sd >= 0.0 && spec.rate_sd.is_finite()) {
        return Err(Error::Config(format!("rate_sd must be >= 0, got {}", spec.rate_sd)));
    }
    if spec.members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    if spec.rate_sd == 0.0 {
        return Ok(EnsembleCurve {
            curve: simulate_curve(cfg)?,
            member_rates: vec![cfg.gamma1; spec.members],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(MEMBER_STREAM);
    let normal = Normal::new(cfg.gamma1, spec.rate_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut rates = Vec::with_capacity(spec.members);
    let mut attempts = 0usize;
    while rates.len() < spec.members {
        let g: f64 = normal.sample(&mut rng);
        attempts += 1;
        if g > 0.0 {
            rates.push(g);
        } else if attempts > 1000 * spec.members {
            return Err(Error::Config("rate distribution has almost no positive support".into()));
        }
    }
    let eta = cfg.pumping.eta()?;
    let m = rates.len() as f64;
    let n1 = cfg
        .tau_grid
        .iter()
        .map(|&t| {
            let mut sum = 0.0;
            for &g in &rates {
                sum += population_n1(cfg, eta, g, t)?;
            }
            Ok(sum / m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleCurve {
        curve: counts_from_n1(&n1, cfg)?,
        member_rates: rates,
    })
}

/// Gaussian pump intensity: `Γp(r) = peak · exp(−2r²/w²)`, w the 1/e² radius in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beam {
    pub center: (f64, f64),
    pub radius: f64,
    pub peak_gamma_p: f64,
}

impl Beam {
    pub fn gamma_p(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.center.0).powi(2) + (y - self.center.1).powi(2);
        self.peak_gamma_p * (-2.0 * r2 / (self.radius * self.radius)).exp()
    }
}

/// A square patch of spins relaxed faster by a nearby target.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParticle {
    pub x: f64,
    pub y: f64,
    /// Half-width: pixels with `x − r ≤ px < x + r` (and likewise in y) are covered.
    pub radius: f64,
    /// Rate added to the background inside the footprint.
    pub gamma_target: f64,
}

impl SceneParticle {
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (px, py) = (px as f64, py as f64);
        px >= self.x - self.radius && px < self.x + self.radius && py >= self.y - self.radius && py < self.y + self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub beam: Beam,
    pub gamma1_background: f64,
    pub particles: Vec<SceneParticle>,
    pub t_p: f64,
    pub tau_grid: Vec<f64>,
    pub repetitions: u64,
    pub readout: ReadoutModel,
    pub seed: u64,
    pub population: PopulationMode,
}

impl SceneConfig {
    /// A centered beam sized so η runs from `eta_center` in the middle to
    /// `eta_edge` at the farthest corner.
    pub fn with_eta_span(width: usize, height: usize, eta_center: f64, eta_edge: f64, t_p: f64) -> Result<Self> {
        if !(0.0 < eta_center && eta_center < eta_edge && eta_edge < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < eta_center < eta_edge < 1, got {eta_center} and {eta_edge}"
            )));
        }
        if !(t_p > 0.0) {
            return Err(Error::Config("pulse length must be > 0".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("image must be non-empty".into()));
        }
        let center = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let corner = center.0.hypot(center.1).max(0.5);
        let ratio = eta_edge.ln() / eta_center.ln();
        let radius = corner * (2.0 / -ratio.ln()).sqrt();
        Ok(Self {
            width,
            height,
            beam: Beam {
                center,
                radius,
                peak_gamma_p: -eta_center.ln() / t_p,
            },
            gamma1_background: 200.0,
            particles: Vec::new(),
            t_p,
            tau_grid: crate::curve::log_spaced(10e-6, 9e-3, 25),
            repetitions: 1_000_000,
            readout: ReadoutModel::default(),
            seed: 0,
            population: PopulationMode::Auto,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image must be non-empty".into()));
        }
        if !(self.gamma1_background > 0.0) {
            return Err(Error::Config("background rate must be > 0".into()));
        }
        if !(self.t_p > 0.0) {
            return Err(Error::Config("pulse length must be > 0".into()));
        }
        if !(self.beam.radius > 0.0 && self.beam.peak_gamma_p >= 0.0) {
            return Err(Error::Config("beam radius must be > 0 and peak rate >= 0".into()));
        }
        for (i, p) in self.particles.iter().enumerate() {
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64;
            if !inside {
                return Err(Error::Config(format!("particle {i} at ({}, {}) is outside the image", p.x, p.y)));
            }
            if !(p.radius > 0.0 && p.gamma_target > 0.0) {
                return Err(Error::Config(format!("particle {i} needs radius > 0 and rate > 0")));
            }
        }
        validate_grid(&self.tau_grid)?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        self.readout.validate()
    }

    pub fn eta_at(&self, x: usize, y: usize) -> f64 {
        (-self.t_p * self.beam.gamma_p(x as f64, y as f64)).exp()
    }

    pub fn gamma1_at(&self, x: usize, y: usize) -> f64 {
        self.gamma1_background
            + self
                .particles
                .iter()
                .filter(|p| p.covers(x, y))
                .map(|p| p.gamma_target)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidefieldSim {
    pub stack: ImageStack,
    pub eta_truth: ScalarMap,
    pub gamma1_truth: ScalarMap,
}

/// Signal and reference stacks for every pixel of the scene.
///
/// Each pixel draws its noise from its own RNG stream, so the result does not
/// depend on thread count or evaluation order.
pub fn simulate_widefield(scene: &SceneConfig) -> Result<WidefieldSim> {
    scene.validate()?;
    let n_px = scene.width * scene.height;
    let n_tau = scene.tau_grid.len();
    let probe = CurveSimConfig {
        gamma1: scene.gamma1_background,
        pumping: Pumping::Direct(PolEfficiency::new(0.0)?),
        tau_grid: scene.tau_grid.clone(),
        repetitions: scene.repetitions,
        readout: scene.readout,
        reference_channel: true,
        seed: scene.seed,
        population: scene.population,
        initial: PopulationVector::MIXED,
    };
    let scale = scene.repetitions as f64;
    let pixels: Vec<Vec<f32>> = (0..n_px)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % scene.width, i / scene.width);
            let eta = scene.eta_at(x, y);
            let gamma1 = scene.gamma1_at(x, y);
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
            rng.set_stream(i as u64);
            let mut out = vec![0.0f32; 2 * n_tau];
            for (t, &tau) in scene.tau_grid.iter().enumerate() {
                let n1 = match PolEfficiency::new(eta) {
                    Ok(e) => population_n1(&probe, e, gamma1, tau)?,
                    // no pumping at all: the spin stays thermally mixed
                    Err(_) => 0.5,
                };
                let mut s = scale * scene.readout.counts_per_shot(n1);
                let mut r = scale * scene.readout.counts_per_shot(1.0 - n1);
                if scene.readout.shot_noise {
                    s = poisson_draw(&mut rng, s);
                    r = poisson_draw(&mut rng, r);
                }
                out[t] = s as f32;
                out[n_tau + t] = r as f32;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut planes = vec![vec![0.0f32; n_px]; 2 * n_tau];
    for (i, px) in pixels.iter().enumerate() {
        for (k, &v) in px.iter().enumerate() {
            planes[k][i] = v;
        }
    }
    let metadata = StackMetadata {
        shot_noise: scene.readout.shot_noise,
        t_p: Some(scene.t_p),
        repetitions: Some(scene.repetitions),
        seed: Some(scene.seed),
        binning: 1,
        extra: Default::default(),
    };
    let stack = ImageStack::new(
        scene.width,
        scene.height,
        scene.tau_grid.clone(),
        vec![Channel::Signal, Channel::Reference],
        planes,
        metadata,
    )?;

    let mut eta_vals = Vec::with_capacity(n_px);
    let mut rate_vals = Vec::with_capacity(n_px);
    for i in 0..n_px {
        let (x, y) = (i % scene.width, i / scene.width);
        let eta = scene.eta_at(x, y);
        let pumped = eta < 1.0;
        eta_vals.push(pumped.then_some(eta));
        rate_vals.push(pumped.then(|| scene.gamma1_at(x, y)));
    }
    let eta_truth = ScalarMap::from_options(scene.width, scene.height, "eta", "1", &eta_vals)
        .with_provenance("source", "simulation ground truth");
    let gamma1_truth = ScalarMap::from_options(scene.width, scene.height, "gamma1", "s^-1", &rate_vals)
        .with_provenance("source", "simulation ground truth");
    Ok(WidefieldSim {
        stack,
        eta_truth,
        gamma1_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::log_spaced;

    fn base() -> CurveSimConfig {
        let mut c = CurveSimConfig::new(
            500.0,
            Pumping::Direct(PolEfficiency::new(0.4).unwrap()),
            log_spaced(1e-6, 5e-3, 25),
        );
        c.seed = 11;
        c
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = simulate_curve(&base()).unwrap();
        let b = simulate_curve(&base()).unwrap();
        assert_eq!(a, b);
        let mut other = base();
        other.seed = 12;
        assert_ne!(simulate_curve(&other).unwrap(), a);
    }

    #[test]
    fn noiseless_signal_plus_reference_is_constant() {
        let mut c = base();
        c.readout.shot_noise = false;
        let curve = simulate_curve(&c).unwrap();
        assert!(curve.sigma.is_none());
        let r = curve.reference.unwrap();
        let total = 1000.0 * 0.05 * (2.0 - 0.3);
        for (s, r) in curve.signal.iter().zip(&r) {
            assert!((s + r - total).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_sd_ensemble_matches_single_curve() {
        let spec = EnsembleSpec {
            rate_sd: 0.0,
            members: 50,
        };
        let e = simulate_ensemble_curve(&base(), &spec).unwrap();
        assert_eq!(e.curve, simulate_curve(&base()).unwrap());
    }

    #[test]
    fn eta_span_hits_both_ends() {
        let s = SceneConfig::with_eta_span(65, 33, 0.36, 0.77, 10e-6).unwrap();
        assert!((s.eta_at(32, 16) - 0.36).abs() < 1e-12);
        assert!((s.eta_at(0, 0) - 0.77).abs() < 1e-12);
        assert!((s.eta_at(64, 32) - 0.77).abs() < 1e-12);
    }

    #[test]
    fn particle_footprint_is_a_square_of_side_two_r() {
        let p = SceneParticle {
            x: 10.0,
            y: 10.0,
            radius: 5.0,
            gamma_target: 100.0,
        };
        let n = (0..30).flat_map(|x| (0..30).map(move |y| (x, y))).filter(|&(x, y)| p.covers(x, y)).count();
        assert_eq!(n, 100);
        assert!(p.covers(5, 5) && !p.covers(15, 10));
    }

    #[test]
    fn widefield_truth_and_planes_agree() {
        let mut s = SceneConfig::with_eta_span(8, 6, 0.4, 0.7, 10e-6).unwrap();
        s.readout.shot_noise = false;
        s.particles.push(SceneParticle {
            x: 3.0,
            y: 3.0,
            radius: 1.0,
            gamma_target: 300.0,
        });
        let sim = simulate_widefield(&s).unwrap();
        assert_eq!(sim.gamma1_truth.get(2, 2), Some(500.0));
        assert_eq!(sim.gamma1_truth.get(3, 4), Some(200.0));
        let i = 2 * 8 + 2;
        let eta = PolEfficiency::new(s.eta_at(2, 2)).unwrap();
        let n1 = population_steady(eta, 500.0, s.tau_grid[4]).n1;
        let expect = 1e6 * s.readout.counts_per_shot(n1);
        assert!((sim.stack.plane(Channel::Signal, 4).unwrap()[i] as f64 - expect).abs() / expect < 1e-6);
    }
}
