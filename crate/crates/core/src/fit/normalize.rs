use super::drivers::fit_single_exp;
use crate::curve::DecayCurve;
use crate::error::{Error, Result};

/// Turns raw photon counts into a normalized PL curve.
///
/// With a π-pulse reference: `PL = (S − R)/(S₀ − R₀)`. Without one:
/// `PL = (S − S∞)/(S₀ − S∞)`, with `S∞` taken from a single-exponential fit
/// to the raw signal (falling back to the mean of the last three points).
///
/// When the raw curve carries uncertainties its counts are treated as Poisson
/// and the output sigma is `√(S + R)/|S₀ − R₀|` (first order, normalizer held
/// fixed). Without input uncertainties the output is unweighted.
pub fn normalize_curve(raw: &DecayCurve) -> Result<DecayCurve> {
    if raw.is_empty() {
        return Err(Error::Precondition("empty curve".into()));
    }
    let poisson = raw.sigma.is_some();
    let s = &raw.signal;
    match &raw.reference {
        Some(r) => {
            if r.len() != s.len() {
                return Err(Error::Dimension("signal and reference lengths differ".into()));
            }
            let denom = s[0] - r[0];
            if denom == 0.0 || !denom.is_finite() {
                return Err(Error::ZeroDenominator);
            }
            let pl = s.iter().zip(r).map(|(a, b)| (a - b) / denom).collect();
            let sigma = poisson.then(|| {
                s.iter()
                    .zip(r)
                    .map(|(a, b)| (a + b).max(1.0).sqrt() / denom.abs())
                    .collect()
            });
            DecayCurve::new(raw.tau.clone(), pl, None, sigma)
        }
        None => {
            let tail = fitted_tail(raw);
            let denom = s[0] - tail;
            if denom == 0.0 || !denom.is_finite() {
                return Err(Error::ZeroDenominator);
            }
            let pl = s.iter().map(|a| (a - tail) / denom).collect();
            let sigma = poisson.then(|| s.iter().map(|a| a.max(1.0).sqrt() / denom.abs()).collect());
            DecayCurve::new(raw.tau.clone(), pl, None, sigma)
        }
    }
}

fn fitted_tail(raw: &DecayCurve) -> f64 {
    let n = raw.len();
    let k = n.min(3);
    let mean_tail = raw.signal[n - k..].iter().sum::<f64>() / k as f64;
    if n < 4 {
        return mean_tail;
    }
    let unweighted = DecayCurve {
        tau: raw.tau.clone(),
        signal: raw.signal.clone(),
        reference: None,
        sigma: None,
    };
    match fit_single_exp(&unweighted) {
        Ok(fit) if fit.converged => fit.value("offset").filter(|v| v.is_finite()).unwrap_or(mean_tail),
        _ => mean_tail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> DecayCurve {
        DecayCurve::new(
            vec![1e-5, 1e-4, 1e-3, 3e-3],
            vec![100.0, 96.0, 90.0, 86.0],
            Some(vec![70.0, 74.0, 80.0, 84.0]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn reference_equal_to_signal_is_an_error() {
        let mut c = pair();
        c.reference = Some(c.signal.clone());
        assert!(matches!(normalize_curve(&c), Err(Error::ZeroDenominator)));
    }

    #[test]
    fn common_mode_drift_cancels() {
        let c = pair();
        let mut drifted = c.clone();
        let k = 1.37;
        drifted.signal.iter_mut().for_each(|v| *v *= k);
        drifted.reference.as_mut().unwrap().iter_mut().for_each(|v| *v *= k);
        let a = normalize_curve(&c).unwrap();
        let b = normalize_curve(&drifted).unwrap();
        for (x, y) in a.signal.iter().zip(&b.signal) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert_eq!(a.signal[0], 1.0);
    }

    #[test]
    fn poisson_sigma_propagates() {
        let mut c = pair();
        c.sigma = Some(c.signal.iter().map(|v: &f64| v.sqrt()).collect());
        let n = normalize_curve(&c).unwrap();
        let s = n.sigma.unwrap();
        assert!((s[1] - (96.0f64 + 74.0).sqrt() / 30.0).abs() < 1e-15);
    }

    #[test]
    fn without_reference_uses_tail() {
        let tau: Vec<f64> = (0..20).map(|i| 1e-5 + i as f64 * 3e-4).collect();
        let s: Vec<f64> = tau.iter().map(|t| 40.0 + 60.0 * (-1000.0 * t).exp()).collect();
        let c = DecayCurve::from_signal(tau, s).unwrap();
        let n = normalize_curve(&c).unwrap();
        assert!((n.signal[0] - 1.0).abs() < 1e-12);
        assert!(n.signal.last().unwrap().abs() < 1e-2);
        assert!(n.sigma.is_none());
    }
}
