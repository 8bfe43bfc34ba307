//! JSON schemas for `relaxo simulate`.

use serde::Deserialize;

use relaxo::curve::log_spaced;
use relaxo::model::PolEfficiency;
use relaxo::sim::{
    Beam, CurveSimConfig, EnsembleSpec, PopulationMode, Pumping, ReadoutModel, SceneConfig, SceneParticle,
};

use crate::units::{Rate, Seconds};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimConfig {
    Curve(CurveFile),
    Ensemble(EnsembleFile),
    Scene(SceneFile),
}

impl SimConfig {
    pub fn version(&self) -> u32 {
        match self {
            SimConfig::Curve(c) => c.version,
            SimConfig::Ensemble(e) => e.curve.version,
            SimConfig::Scene(s) => s.version,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum TauGrid {
    List(Vec<Seconds>),
    Range {
        start: Seconds,
        stop: Seconds,
        points: usize,
        #[serde(default)]
        spacing: Spacing,
    },
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Log,
    Linear,
}

impl TauGrid {
    pub fn values(&self) -> Result<Vec<f64>, String> {
        match *self {
            TauGrid::List(ref v) => Ok(v.iter().map(|s| s.0).collect()),
            TauGrid::Range {
                start,
                stop,
                points,
                spacing,
            } => {
                if points < 2 || stop.0 <= start.0 || stop.0.is_nan() || start.0 < 0.0 {
                    return Err("tau range needs points >= 2 and 0 <= start < stop".into());
                }
                match spacing {
                    Spacing::Log if start.0 <= 0.0 => Err("log spacing needs start > 0".into()),
                    Spacing::Log => Ok(log_spaced(start.0, stop.0, points)),
                    Spacing::Linear => Ok((0..points)
                        .map(|i| start.0 + (stop.0 - start.0) * i as f64 / (points - 1) as f64)
                        .collect()),
                }
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutFile {
    #[serde(default = "default_counts")]
    pub counts_bright: f64,
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    #[serde(default = "yes")]
    pub shot_noise: bool,
}

fn default_counts() -> f64 {
    ReadoutModel::default().counts_bright
}
fn default_contrast() -> f64 {
    ReadoutModel::default().contrast
}
fn yes() -> bool {
    true
}

impl From<&ReadoutFile> for ReadoutModel {
    fn from(r: &ReadoutFile) -> Self {
        ReadoutModel {
            counts_bright: r.counts_bright,
            contrast: r.contrast,
            shot_noise: r.shot_noise,
        }
    }
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopulationFile {
    #[default]
    Auto,
    Steady,
    FiniteN,
}

impl From<PopulationFile> for PopulationMode {
    fn from(p: PopulationFile) -> Self {
        match p {
            PopulationFile::Auto => PopulationMode::Auto,
            PopulationFile::Steady => PopulationMode::Steady,
            PopulationFile::FiniteN => PopulationMode::FiniteN,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseFile {
    pub t_p: Seconds,
    pub gamma_p: Rate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveFile {
    pub version: u32,
    pub gamma1: Rate,
    /// Either `eta` or `pulse`.
    pub eta: Option<f64>,
    pub pulse: Option<PulseFile>,
    pub tau: TauGrid,
    #[serde(default = "default_curve_reps")]
    pub repetitions: u64,
    pub readout: Option<ReadoutFile>,
    #[serde(default = "yes")]
    pub reference: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub population: PopulationFile,
}

fn default_curve_reps() -> u64 {
    1000
}

impl CurveFile {
    pub fn to_config(&self) -> Result<CurveSimConfig, String> {
        let pumping = match (&self.eta, &self.pulse) {
            (Some(e), None) => Pumping::Direct(PolEfficiency::new(*e).map_err(|e| e.to_string())?),
            (None, Some(p)) => Pumping::Pulse {
                t_p: p.t_p.0,
                gamma_p: p.gamma_p.0,
            },
            _ => return Err("give exactly one of `eta` or `pulse`".into()),
        };
        let mut cfg = CurveSimConfig::new(self.gamma1.0, pumping, self.tau.values()?);
        cfg.repetitions = self.repetitions;
        if let Some(r) = &self.readout {
            cfg.readout = r.into();
        }
        cfg.reference_channel = self.reference;
        cfg.seed = self.seed;
        cfg.population = self.population.into();
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    pub rate_sd: Rate,
    pub members: usize,
}

#[derive(Debug, Deserialize)]
pub struct EnsembleFile {
    pub ensemble: EnsembleBlock,
    #[serde(flatten)]
    pub curve: CurveFile,
}

impl EnsembleFile {
    pub fn spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            rate_sd: self.ensemble.rate_sd.0,
            members: self.ensemble.members,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamFile {
    pub center: [f64; 2],
    /// 1/e² radius in pixels.
    pub radius: f64,
    pub peak_gamma_p: Rate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleFile {
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_particle_radius")]
    pub radius: f64,
    pub gamma_target: Rate,
}

fn default_particle_radius() -> f64 {
    5.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub t_p: Seconds,
    /// Either `eta_span: [center, edge]` or an explicit `beam`.
    pub eta_span: Option<[f64; 2]>,
    pub beam: Option<BeamFile>,
    pub gamma1_background: Rate,
    #[serde(default)]
    pub particles: Vec<ParticleFile>,
    pub tau: Option<TauGrid>,
    pub repetitions: Option<u64>,
    pub readout: Option<ReadoutFile>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub population: PopulationFile,
}

impl SceneFile {
    pub fn to_config(&self) -> Result<SceneConfig, String> {
        let mut scene = match (&self.eta_span, &self.beam) {
            (Some([center, edge]), None) => {
                SceneConfig::with_eta_span(self.width, self.height, *center, *edge, self.t_p.0)
                    .map_err(|e| e.to_string())?
            }
            (None, Some(b)) => {
                let mut s = SceneConfig::with_eta_span(self.width, self.height, 0.3, 0.8, self.t_p.0)
                    .map_err(|e| e.to_string())?;
                s.beam = Beam {
                    center: (b.center[0], b.center[1]),
                    radius: b.radius,
                    peak_gamma_p: b.peak_gamma_p.0,
                };
                s
            }
            _ => return Err("give exactly one of `eta_span` or `beam`".into()),
        };
        scene.gamma1_background = self.gamma1_background.0;
        scene.particles = self
            .particles
            .iter()
            .map(|p| SceneParticle {
                x: p.x,
                y: p.y,
                radius: p.radius,
                gamma_target: p.gamma_target.0,
            })
            .collect();
        if let Some(t) = &self.tau {
            scene.tau_grid = t.values()?;
        }
        if let Some(n) = self.repetitions {
            scene.repetitions = n;
        }
        if let Some(r) = &self.readout {
            scene.readout = r.into();
        }
        scene.seed = self.seed;
        scene.population = self.population.into();
        scene.validate().map_err(|e| e.to_string())?;
        Ok(scene)
    }
}
