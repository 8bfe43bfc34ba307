//! Region statistics over a rate map: per-particle ROIs, background and
//! shared-edge histograms.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{mean_sd, ScalarMap};
use crate::model::{target_rate, TargetRate};

/// Bin cap guarding against a handful of extreme outliers.
const MAX_BINS: usize = 512;

fn default_half_size() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleRef {
    pub id: String,
    pub x: i64,
    pub y: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleList {
    /// ROI is the square `[x − h, x + h) × [y − h, y + h)`.
    #[serde(default = "default_half_size")]
    pub roi_half_size: usize,
    pub particles: Vec<ParticleRef>,
}

impl ParticleList {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub n_valid: usize,
    pub mean: f64,
    pub sd: f64,
}

impl RegionStats {
    fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        Self {
            n_valid: values.len(),
            mean,
            sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleStats {
    pub id: String,
    pub x: i64,
    pub y: i64,
    #[serde(flatten)]
    pub stats: RegionStats,
    /// Mean minus the intrinsic rate, when one was supplied.
    pub target: Option<TargetRate>,
}

/// Normalized histograms over common bin edges.
///
/// Each count is divided by the total number of pixels in both populations,
/// so the two series together sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub background: Vec<f64>,
    pub particles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub quantity: String,
    pub units: String,
    pub roi_half_size: usize,
    pub intrinsic_rate: Option<f64>,
    pub particles: Vec<ParticleStats>,
    pub background: RegionStats,
    pub histogram: Histogram,
}

impl RegionReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::stack::write_json(path, self)
    }

    /// `id,x,y,n_valid,mean,sd,target_rate,unphysical` plus a trailing background row.
    pub fn write_particles_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,x,y,n_valid,mean,sd,target_rate,unphysical\n");
        for p in &self.particles {
            let (t, u) = match p.target {
                Some(t) => (t.value.to_string(), t.unphysical.to_string()),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{t},{u}\n",
                p.id, p.x, p.y, p.stats.n_valid, p.stats.mean, p.stats.sd
            ));
        }
        let b = &self.background;
        out.push_str(&format!("background,,,{},{},{},,\n", b.n_valid, b.mean, b.sd));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// `bin_left,bin_right,background,particles`.
    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let h = &self.histogram;
        let mut text = String::from("bin_left,bin_right,background,particles\n");
        for i in 0..h.background.len() {
            text.push_str(&format!(
                "{},{},{},{}\n",
                h.edges[i], h.edges[i + 1], h.background[i], h.particles[i]
            ));
        }
        file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn roi_pixels(p: &ParticleRef, half: usize, map: &ScalarMap) -> Result<Vec<usize>> {
    let h = half as i64;
    let (x0, y0, x1, y1) = (p.x - h, p.y - h, p.x + h, p.y + h);
    if x0 < 0 || y0 < 0 || x1 > map.width as i64 || y1 > map.height as i64 {
        return Err(Error::Precondition(format!(
            "ROI of particle {} at ({}, {}) extends outside the {}×{} map",
            p.id, p.x, p.y, map.width, map.height
        )));
    }
    Ok((y0..y1)
        .flat_map(|y| (x0..x1).map(move |x| y as usize * map.width + x as usize))
        .collect())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bin edges spanning both populations, width from the Freedman–Diaconis rule.
pub fn shared_edges(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    if all.is_empty() {
        return Vec::new();
    }
    all.sort_by(f64::total_cmp);
    let (lo, hi) = (all[0], all[all.len() - 1]);
    if hi <= lo {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 1e-6 };
        return vec![lo - pad, hi + pad];
    }
    let iqr = quantile(&all, 0.75) - quantile(&all, 0.25);
    let n = all.len() as f64;
    let width = 2.0 * iqr / n.cbrt();
    let bins = if width > 0.0 {
        ((hi - lo) / width).ceil() as usize
    } else {
        n.sqrt().ceil() as usize
    }
    .clamp(1, MAX_BINS);
    let step = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * step).collect();
    edges.push(hi);
    edges
}

fn bin_counts(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

/// ROI and background statistics for the listed particles.
///
/// The background is every valid pixel outside all ROIs. Overlapping ROIs are
/// allowed; a pixel shared by two ROIs counts toward both.
pub fn analyze_particles(map: &ScalarMap, list: &ParticleList, intrinsic_rate: Option<f64>) -> Result<RegionReport> {
    if map.n_valid() == 0 {
        return Err(Error::EmptyMap);
    }
    if list.roi_half_size == 0 {
        return Err(Error::Config("roi_half_size must be >= 1".into()));
    }
    let mut in_roi = HashSet::new();
    let mut particles = Vec::with_capacity(list.particles.len());
    for p in &list.particles {
        let pixels = roi_pixels(p, list.roi_half_size, map)?;
        let overlaps = pixels.iter().any(|i| in_roi.contains(i));
        if overlaps {
            log::warn!("ROI of particle {} overlaps an earlier ROI", p.id);
        }
        let values: Vec<f64> = pixels.iter().filter(|&&i| map.mask[i]).map(|&i| map.values[i]).collect();
        in_roi.extend(pixels);
        let stats = RegionStats::of(&values);
        let target = intrinsic_rate.filter(|_| stats.n_valid > 0).map(|g| target_rate(stats.mean, g));
        particles.push(ParticleStats {
            id: p.id.clone(),
            x: p.x,
            y: p.y,
            stats,
            target,
        });
    }
    let mut roi_sorted: Vec<usize> = in_roi.into_iter().collect();
    roi_sorted.sort_unstable();
    let roi_values: Vec<f64> = roi_sorted.iter().filter(|&&i| map.mask[i]).map(|&i| map.values[i]).collect();
    let background: Vec<f64> = (0..map.values.len())
        .filter(|i| map.mask[*i] && roi_sorted.binary_search(i).is_err())
        .map(|i| map.values[i])
        .collect();

    let edges = shared_edges(&background, &roi_values);
    let total = (background.len() + roi_values.len()) as f64;
    let norm = |c: Vec<usize>| c.into_iter().map(|k| k as f64 / total).collect();
    let histogram = Histogram {
        background: norm(bin_counts(&background, &edges)),
        particles: norm(bin_counts(&roi_values, &edges)),
        edges,
    };
    Ok(RegionReport {
        quantity: map.quantity.clone(),
        units: map.units.clone(),
        roi_half_size: list.roi_half_size,
        intrinsic_rate,
        particles,
        background: RegionStats::of(&background),
        histogram,
    })
}

/// Finds bright spots: 4-connected groups of valid pixels exceeding the
/// map's median by `n_sd` robust standard deviations (1.4826 × MAD). Ids are `p1`, `p2`, ... in
/// raster order of each group's first pixel.
pub fn detect_particles(map: &ScalarMap, n_sd: f64, roi_half_size: usize) -> Result<ParticleList> {
    let mut valid = map.valid_values();
    if valid.is_empty() {
        return Err(Error::EmptyMap);
    }
    valid.sort_by(f64::total_cmp);
    let median = quantile(&valid, 0.5);
    let mut dev: Vec<f64> = valid.iter().map(|v| (v - median).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let level = median + n_sd * 1.4826 * quantile(&dev, 0.5);
    let hot: Vec<bool> = (0..map.values.len()).map(|i| map.mask[i] && map.values[i] > level).collect();
    let mut seen = vec![false; hot.len()];
    let mut particles = Vec::new();
    for start in 0..hot.len() {
        if !hot[start] || seen[start] {
            continue;
        }
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % map.width, i / map.width);
            sx += x as f64;
            sy += y as f64;
            n += 1.0;
            let mut push = |j: usize| {
                if hot[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < map.width {
                push(i + 1);
            }
            if y > 0 {
                push(i - map.width);
            }
            if y + 1 < map.height {
                push(i + map.width);
            }
        }
        particles.push(ParticleRef {
            id: format!("p{}", particles.len() + 1),
            x: (sx / n + 0.5).floor() as i64,
            y: (sy / n + 0.5).floor() as i64,
        });
    }
    Ok(ParticleList {
        roi_half_size,
        particles,
    })
}
