//! Grayscale rendering of scalar maps as 16-bit binary PGM.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::ScalarMap;

const MID_GRAY: u16 = 32768;

/// Display range: explicit values win over percentiles of the valid pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangePolicy {
    pub lo_percentile: f64,
    pub hi_percentile: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl Default for RangePolicy {
    fn default() -> Self {
        Self {
            lo_percentile: 1.0,
            hi_percentile: 99.0,
            lo: None,
            hi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderInfo {
    pub quantity: String,
    pub units: String,
    pub lo: f64,
    pub hi: f64,
    pub lo_percentile: Option<f64>,
    pub hi_percentile: Option<f64>,
    pub valid_pixels: usize,
    pub masked_value: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
    pub info: RenderInfo,
}

fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Maps valid values linearly onto 0..=65535, clipping outside the range.
/// Masked pixels are black; a zero-width range renders mid-gray.
pub fn render_map(map: &ScalarMap, policy: &RangePolicy) -> Result<Rendered> {
    let mut valid = map.valid_values();
    if valid.is_empty() {
        return Err(Error::EmptyMap);
    }
    if !(0.0..=100.0).contains(&policy.lo_percentile)
        || !(0.0..=100.0).contains(&policy.hi_percentile)
        || policy.lo_percentile > policy.hi_percentile
    {
        return Err(Error::Config("percentiles must satisfy 0 <= lo <= hi <= 100".into()));
    }
    valid.sort_by(f64::total_cmp);
    let lo = policy.lo.unwrap_or_else(|| percentile(&valid, policy.lo_percentile));
    let hi = policy.hi.unwrap_or_else(|| percentile(&valid, policy.hi_percentile));
    if !(lo.is_finite() && hi.is_finite()) || hi < lo {
        return Err(Error::Config(format!("invalid display range [{lo}, {hi}]")));
    }
    let pixels = map
        .values
        .iter()
        .zip(&map.mask)
        .map(|(&v, &m)| {
            if !m {
                0
            } else if hi == lo {
                MID_GRAY
            } else {
                (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 65535.0).round() as u16
            }
        })
        .collect();
    Ok(Rendered {
        width: map.width,
        height: map.height,
        pixels,
        info: RenderInfo {
            quantity: map.quantity.clone(),
            units: map.units.clone(),
            lo,
            hi,
            lo_percentile: policy.lo.is_none().then_some(policy.lo_percentile),
            hi_percentile: policy.hi.is_none().then_some(policy.hi_percentile),
            valid_pixels: valid.len(),
            masked_value: 0,
        },
    })
}

impl Rendered {
    /// Binary P5 image, big-endian samples, maxval 65535.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flat_map(|p| p.to_be_bytes()));
        out
    }

    /// Writes the image and a `<path>.json` sidecar recording the display range.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".json");
        crate::stack::write_json(Path::new(&sidecar), &self.info)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_masked_map_is_an_error() {
        let m = ScalarMap::empty(3, 3, "gamma1", "s^-1");
        assert!(matches!(render_map(&m, &RangePolicy::default()), Err(Error::EmptyMap)));
    }

    #[test]
    fn constant_map_is_mid_gray_and_masked_is_black() {
        let m = ScalarMap::from_options(2, 1, "eta", "1", &[Some(0.5), None]);
        let r = render_map(&m, &RangePolicy::default()).unwrap();
        assert_eq!(r.pixels, vec![MID_GRAY, 0]);
    }

    #[test]
    fn explicit_range_clips() {
        let m = ScalarMap::from_options(3, 1, "x", "1", &[Some(-1.0), Some(5.0), Some(20.0)]);
        let policy = RangePolicy {
            lo: Some(0.0),
            hi: Some(10.0),
            ..Default::default()
        };
        let r = render_map(&m, &policy).unwrap();
        assert_eq!(r.pixels, vec![0, 32768, 65535]);
        let pgm = r.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 1\n65535\n"));
        assert_eq!(pgm.len(), 13 + 6);
    }
}
