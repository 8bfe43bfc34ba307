//! Numbers with optional unit suffixes, converted to SI.

use serde::{Deserialize, Deserializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Time,
    Rate,
}

/// Suffix and its power of ten.
const TIME_UNITS: &[(&str, i32)] = &[("ns", -9), ("us", -6), ("µs", -6), ("ms", -3), ("s", 0)];
const RATE_UNITS: &[(&str, i32)] = &[("MHz", 6), ("kHz", 3), ("Hz", 0), ("s^-1", 0), ("/s", 0)];

/// Parses `"10us"`, `"0.5 kHz"` or a bare number (already SI).
pub fn parse(text: &str, dim: Dimension) -> Result<f64, String> {
    let t = text.trim();
    let table = match dim {
        Dimension::Time => TIME_UNITS,
        Dimension::Rate => RATE_UNITS,
    };
    let (number, exp) = table
        .iter()
        .find_map(|(suffix, exp)| t.strip_suffix(suffix).map(|n| (n.trim_end(), *exp)))
        .unwrap_or((t, 0));
    let bad = || {
        let names: Vec<&str> = table.iter().map(|(s, _)| *s).collect();
        format!("cannot read {text:?} as a number with optional unit {names:?}")
    };
    let plain: f64 = number.parse().map_err(|_| bad())?;
    // shifting the decimal exponent keeps "10us" exactly equal to 10e-6
    let value = if number.contains(['e', 'E']) || exp == 0 {
        plain * 10f64.powi(exp)
    } else {
        format!("{number}e{exp}").parse().map_err(|_| bad())?
    };
    if !value.is_finite() {
        return Err(format!("{text:?} is not finite"));
    }
    Ok(value)
}

#[cfg(test)]
fn parse_time(text: &str) -> Result<f64, String> {
    parse(text, Dimension::Time)
}

pub fn parse_rate(text: &str) -> Result<f64, String> {
    parse(text, Dimension::Rate)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Raw {
    Number(f64),
    Text(String),
}

fn quantity<'de, D: Deserializer<'de>>(d: D, dim: Dimension) -> Result<f64, D::Error> {
    match Raw::deserialize(d)? {
        Raw::Number(v) => Ok(v),
        Raw::Text(s) => parse(&s, dim).map_err(serde::de::Error::custom),
    }
}

/// A duration in seconds; JSON accepts a number or a string such as `"10us"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seconds(pub f64);

impl<'de> Deserialize<'de> for Seconds {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        quantity(d, Dimension::Time).map(Seconds)
    }
}

/// A rate in s⁻¹; JSON accepts a number or a string such as `"0.5kHz"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate(pub f64);

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        quantity(d, Dimension::Rate).map(Rate)
    }
}
