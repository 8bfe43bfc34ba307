//! Per-pixel scalar maps with a validity mask.
//!
//! On disk a map is three files sharing a stem: `<stem>.json` (sidecar),
//! `<stem>.f32` (little-endian float32, row-major) and `<stem>.mask`
//! (one byte per pixel, 1 = valid).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::{read_f32_plane, write_f32_plane, write_json};

pub const MAP_FORMAT: &str = "relaxo-map";

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub quantity: String,
    pub units: String,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    version: u32,
    quantity: String,
    units: String,
    width: usize,
    height: usize,
    data_file: String,
    mask_file: String,
    valid_pixels: usize,
    provenance: BTreeMap<String, String>,
}

impl ScalarMap {
    /// An all-invalid map.
    pub fn empty(width: usize, height: usize, quantity: &str, units: &str) -> Self {
        Self {
            width,
            height,
            values: vec![f64::NAN; width * height],
            mask: vec![false; width * height],
            quantity: quantity.into(),
            units: units.into(),
            provenance: BTreeMap::new(),
        }
    }

    /// A map from per-pixel optional values; `None` and non-finite values become invalid.
    pub fn from_options(width: usize, height: usize, quantity: &str, units: &str, values: &[Option<f64>]) -> Self {
        let mut map = Self::empty(width, height, quantity, units);
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                map.values[i] = v;
                map.mask[i] = true;
            }
        }
        map
    }

    pub fn with_provenance(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.insert(key.into(), value.to_string());
        self
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.mask[i].then(|| self.values[i])
    }

    pub fn invalidate(&mut self, i: usize) {
        self.values[i] = f64::NAN;
        self.mask[i] = false;
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn same_shape(&self, other: &ScalarMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Writes `<stem>.json`, `<stem>.f32` and `<stem>.mask`; returns the sidecar path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data_file = format!("{stem}.f32");
        let mask_file = format!("{stem}.mask");
        let data: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        write_f32_plane(&dir.join(&data_file), &data)?;
        let mask: Vec<u8> = self.mask.iter().map(|&m| m as u8).collect();
        std::fs::write(dir.join(&mask_file), mask).map_err(|e| Error::io(dir.join(&mask_file), e))?;
        let sidecar = Sidecar {
            format: MAP_FORMAT.into(),
            version: 1,
            quantity: self.quantity.clone(),
            units: self.units.clone(),
            width: self.width,
            height: self.height,
            data_file,
            mask_file,
            valid_pixels: self.n_valid(),
            provenance: self.provenance.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        write_json(&path, &sidecar)?;
        Ok(path)
    }

    pub fn read(sidecar_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::format(sidecar_path, e.to_string()))?;
        if sidecar.format != MAP_FORMAT {
            return Err(Error::format(sidecar_path, format!("not a map sidecar: {}", sidecar.format)));
        }
        let n = sidecar.width * sidecar.height;
        let dir = sidecar_path.parent().unwrap_or(Path::new("."));
        let data = read_f32_plane(&dir.join(&sidecar.data_file), n)?;
        let mask_path = dir.join(&sidecar.mask_file);
        let mask = std::fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        if mask.len() != n {
            return Err(Error::format(&mask_path, format!("expected {n} bytes, found {}", mask.len())));
        }
        let mut map = Self::empty(sidecar.width, sidecar.height, &sidecar.quantity, &sidecar.units);
        map.provenance = sidecar.provenance;
        for i in 0..n {
            if mask[i] != 0 && data[i].is_finite() {
                map.values[i] = data[i] as f64;
                map.mask[i] = true;
            }
        }
        Ok(map)
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
