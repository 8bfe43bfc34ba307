//! τ-indexed image stacks and their on-disk manifest format.
//!
//! A stack is a JSON manifest plus one raw plane per (τ, channel): little-endian
//! `f32`, row-major, `width × height` values, no header. Plane paths in the
//! manifest are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curve::DecayCurve;
use crate::error::{Error, Result};

pub const STACK_FORMAT: &str = "relaxo-stack";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    /// Plain relaxometry sequence.
    Signal,
    /// Same sequence with a π-pulse inverting the spin before readout.
    Reference,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Signal => "signal",
            Channel::Reference => "reference",
        }
    }
}

/// Acquisition parameters carried alongside the planes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackMetadata {
    /// Plane values are Poisson photon counts; fits are weighted accordingly.
    pub shot_noise: bool,
    pub t_p: Option<f64>,
    pub repetitions: Option<u64>,
    pub seed: Option<u64>,
    pub binning: u32,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub width: usize,
    pub height: usize,
    pub taus: Vec<f64>,
    pub channels: Vec<Channel>,
    /// `planes[c * taus.len() + t]` for channel index `c` and τ index `t`.
    pub planes: Vec<Vec<f32>>,
    pub metadata: StackMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    width: usize,
    height: usize,
    dtype: String,
    layout: String,
    taus: Vec<f64>,
    channels: Vec<Channel>,
    planes: Vec<PlaneEntry>,
    metadata: StackMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneEntry {
    channel: Channel,
    tau_index: usize,
    file: String,
}

impl ImageStack {
    pub fn new(
        width: usize,
        height: usize,
        taus: Vec<f64>,
        channels: Vec<Channel>,
        planes: Vec<Vec<f32>>,
        metadata: StackMetadata,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("empty image".into()));
        }
        if taus.is_empty() {
            return Err(Error::Dimension("stack has no dark times".into()));
        }
        check_taus(&taus).map_err(Error::Dimension)?;
        if channels.is_empty() || !channels.contains(&Channel::Signal) {
            return Err(Error::Dimension("stack needs a signal channel".into()));
        }
        let mut sorted = channels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != channels.len() {
            return Err(Error::Dimension("duplicate channel".into()));
        }
        if planes.len() != channels.len() * taus.len() {
            return Err(Error::Dimension(format!(
                "{} planes for {} channels × {} dark times",
                planes.len(),
                channels.len(),
                taus.len()
            )));
        }
        if let Some(p) = planes.iter().find(|p| p.len() != width * height) {
            return Err(Error::Dimension(format!(
                "plane of {} values in a {width}×{height} stack",
                p.len()
            )));
        }
        Ok(Self {
            width,
            height,
            taus,
            channels,
            planes,
            metadata,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn has_channel(&self, channel: Channel) -> bool {
        self.channels.contains(&channel)
    }

    pub fn plane(&self, channel: Channel, tau_index: usize) -> Option<&[f32]> {
        let c = self.channels.iter().position(|&ch| ch == channel)?;
        self.planes.get(c * self.taus.len() + tau_index).map(|p| p.as_slice())
    }

    fn channel_series(&self, channel: Channel, pixel: usize) -> Option<Vec<f64>> {
        let c = self.channels.iter().position(|&ch| ch == channel)?;
        let n = self.taus.len();
        Some((0..n).map(|t| self.planes[c * n + t][pixel] as f64).collect())
    }

    /// Raw decay at pixel index `y * width + x`. Carries Poisson sigma when
    /// the stack holds shot-noise counts.
    pub fn pixel_curve(&self, pixel: usize) -> DecayCurve {
        let signal = self.channel_series(Channel::Signal, pixel).unwrap_or_default();
        let reference = self.channel_series(Channel::Reference, pixel);
        let sigma = self
            .metadata
            .shot_noise
            .then(|| signal.iter().map(|v| v.max(1.0).sqrt()).collect());
        DecayCurve {
            tau: self.taus.clone(),
            signal,
            reference,
            sigma,
        }
    }

    /// Sums k×k blocks. Trailing rows/columns that do not fill a block are dropped.
    pub fn binned(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("binning factor must be >= 1".into()));
        }
        if k == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / k, self.height / k);
        if w == 0 || h == 0 {
            return Err(Error::Dimension(format!(
                "cannot bin a {}×{} stack by {k}",
                self.width, self.height
            )));
        }
        let planes = self
            .planes
            .iter()
            .map(|p| {
                let mut out = vec![0.0f32; w * h];
                for (by, row) in out.chunks_mut(w).enumerate() {
                    for (bx, v) in row.iter_mut().enumerate() {
                        let mut sum = 0.0f64;
                        for dy in 0..k {
                            let start = (by * k + dy) * self.width + bx * k;
                            sum += p[start..start + k].iter().map(|&x| x as f64).sum::<f64>();
                        }
                        *v = sum as f32;
                    }
                }
                out
            })
            .collect();
        let mut metadata = self.metadata.clone();
        metadata.binning = metadata.binning.max(1) * k as u32;
        Self::new(w, h, self.taus.clone(), self.channels.clone(), planes, metadata)
    }

    fn plane_file(channel: Channel, tau_index: usize) -> String {
        format!("{}_{:03}.f32", channel.as_str(), tau_index)
    }

    /// Writes `manifest.json` and the plane files into `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (c, &channel) in self.channels.iter().enumerate() {
            for t in 0..self.taus.len() {
                let file = Self::plane_file(channel, t);
                write_f32_plane(&dir.join(&file), &self.planes[c * self.taus.len() + t])?;
                entries.push(PlaneEntry {
                    channel,
                    tau_index: t,
                    file,
                });
            }
        }
        let manifest = Manifest {
            format: STACK_FORMAT.into(),
            version: FORMAT_VERSION,
            width: self.width,
            height: self.height,
            dtype: "float32-le".into(),
            layout: "row-major".into(),
            taus: self.taus.clone(),
            channels: self.channels.clone(),
            planes: entries,
            metadata: self.metadata.clone(),
        };
        let path = dir.join("manifest.json");
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

fn check_taus(taus: &[f64]) -> std::result::Result<(), String> {
    if taus.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err("dark times must be finite and non-negative".into());
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err("duplicate dark time".into());
    }
    if taus.windows(2).any(|w| w[1] < w[0]) {
        return Err("dark times must be increasing".into());
    }
    Ok(())
}

/// Loads a stack from its manifest, optionally summing k×k pixel blocks.
pub fn load_stack(manifest_path: &Path, binning: usize) -> Result<ImageStack> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    if manifest.format != STACK_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            manifest_path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    if manifest.dtype != "float32-le" || manifest.layout != "row-major" {
        return Err(Error::format(manifest_path, "only float32-le row-major planes are supported"));
    }
    check_taus(&manifest.taus).map_err(|e| Error::format(manifest_path, e))?;
    let n_tau = manifest.taus.len();
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut planes: Vec<Option<Vec<f32>>> = vec![None; manifest.channels.len() * n_tau];
    for entry in &manifest.planes {
        let c = manifest
            .channels
            .iter()
            .position(|&ch| ch == entry.channel)
            .ok_or_else(|| Error::format(manifest_path, format!("plane {} has undeclared channel", entry.file)))?;
        if entry.tau_index >= n_tau {
            return Err(Error::format(
                manifest_path,
                format!("plane {} has tau_index {} beyond {n_tau} dark times", entry.file, entry.tau_index),
            ));
        }
        let slot = &mut planes[c * n_tau + entry.tau_index];
        if slot.is_some() {
            return Err(Error::format(manifest_path, format!("duplicate plane for {}", entry.file)));
        }
        *slot = Some(read_f32_plane(&dir.join(&entry.file), manifest.width * manifest.height)?);
    }
    let planes = planes
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            p.ok_or_else(|| {
                Error::format(
                    manifest_path,
                    format!(
                        "no plane for channel {} tau_index {}",
                        manifest.channels[i / n_tau].as_str(),
                        i % n_tau
                    ),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = manifest.metadata;
    metadata.binning = metadata.binning.max(1);
    let stack = ImageStack::new(manifest.width, manifest.height, manifest.taus, manifest.channels, planes, metadata)
        .map_err(|e| Error::format(manifest_path, e.to_string()))?;
    stack.binned(binning)
}

pub(crate) fn write_f32_plane(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32_plane(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
