//! Decay curves and their CSV representation (`tau_s,signal,reference,sigma`).

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signal (and optional π-pulse reference) sampled at increasing dark times.
///
/// Depending on where the curve comes from, `signal` holds raw photon counts
/// or normalized PL; `sigma` is the per-point uncertainty of `signal` and is
/// `None` when the data should be fitted with unit weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub tau: Vec<f64>,
    pub signal: Vec<f64>,
    pub reference: Option<Vec<f64>>,
    pub sigma: Option<Vec<f64>>,
}

impl DecayCurve {
    pub fn new(
        tau: Vec<f64>,
        signal: Vec<f64>,
        reference: Option<Vec<f64>>,
        sigma: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = tau.len();
        if signal.len() != n {
            return Err(Error::Dimension(format!("signal has {} points, tau has {n}", signal.len())));
        }
        if let Some(r) = &reference {
            if r.len() != n {
                return Err(Error::Dimension(format!("reference has {} points, tau has {n}", r.len())));
            }
        }
        if let Some(s) = &sigma {
            if s.len() != n {
                return Err(Error::Dimension(format!("sigma has {} points, tau has {n}", s.len())));
            }
            if s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Precondition("sigma must be positive".into()));
            }
        }
        Ok(Self {
            tau,
            signal,
            reference,
            sigma,
        })
    }

    /// Curve without reference or uncertainties.
    pub fn from_signal(tau: Vec<f64>, signal: Vec<f64>) -> Result<Self> {
        Self::new(tau, signal, None, None)
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.write_csv_to(&mut out).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "tau_s,signal,reference,sigma")?;
        for i in 0..self.len() {
            let reference = self.reference.as_ref().map(|r| r[i].to_string()).unwrap_or_default();
            let sigma = self.sigma.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", self.tau[i], self.signal[i], reference, sigma)?;
        }
        Ok(())
    }

    /// Reads a curve CSV. Empty `reference`/`sigma` cells mean the column is absent;
    /// a column must be either fully present or fully empty.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?
            .clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let tau_col = col("tau_s").ok_or_else(|| Error::format(path, "missing column tau_s"))?;
        let sig_col = col("signal").ok_or_else(|| Error::format(path, "missing column signal"))?;
        let ref_col = col("reference");
        let sigma_col = col("sigma");

        let mut tau = Vec::new();
        let mut signal = Vec::new();
        let mut reference: Vec<Option<f64>> = Vec::new();
        let mut sigma: Vec<Option<f64>> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::format(path, e.to_string()))?;
            let row = line + 2;
            let num = |idx: usize| -> Result<Option<f64>> {
                match record.get(idx) {
                    None | Some("") => Ok(None),
                    Some(s) => s
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::format(path, format!("row {row}: cannot parse {s:?}"))),
                }
            };
            tau.push(num(tau_col)?.ok_or_else(|| Error::format(path, format!("row {row}: empty tau_s")))?);
            signal.push(num(sig_col)?.ok_or_else(|| Error::format(path, format!("row {row}: empty signal")))?);
            reference.push(match ref_col {
                Some(c) => num(c)?,
                None => None,
            });
            sigma.push(match sigma_col {
                Some(c) => num(c)?,
                None => None,
            });
        }
        if tau.is_empty() {
            return Err(Error::format(path, "no data rows"));
        }
        if tau.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::format(path, "tau_s must be strictly increasing"));
        }
        let collect = |v: Vec<Option<f64>>, name: &str| -> Result<Option<Vec<f64>>> {
            let present = v.iter().filter(|x| x.is_some()).count();
            if present == 0 {
                Ok(None)
            } else if present == v.len() {
                Ok(Some(v.into_iter().flatten().collect()))
            } else {
                Err(Error::format(path, format!("column {name} is partially empty")))
            }
        };
        let reference = collect(reference, "reference")?;
        let sigma = collect(sigma, "sigma")?;
        Self::new(tau, signal, reference, sigma).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// `n` log-spaced points from `start` to `stop` inclusive.
pub fn log_spaced(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let (a, b) = (start.ln(), stop.ln());
            let step = (b - a) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|i| (a + step * i as f64).exp()).collect();
            v[0] = start;
            v[n - 1] = stop;
            v
        }
    }
}
