//! Weighted Levenberg–Marquardt with box bounds handled by smooth reparameterization.
//!
//! Free parameters are mapped to an unconstrained vector `u`:
//!
//! | bounds            | map                              |
//! |-------------------|----------------------------------|
//! | `[lo, hi]`        | `lo + (hi − lo)·σ(u)` (logistic) |
//! | `[lo, ∞)`         | `lo + exp(u)`                    |
//! | `(−∞, hi]`        | `hi − exp(u)`                    |
//! | unbounded         | `u`                              |
//!
//! A parameter may also carry a floor linked to another parameter
//! (`x ≥ other + margin`), which is how the two-state amplitude is kept above η.
//! Covariance is computed in the natural parameters from the undamped normal
//! matrix at the solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::models::DecayModel;
use crate::curve::DecayCurve;
use crate::error::{Error, Result};

/// Lower bound `x ≥ params[param] + margin`, combined with the static lower bound by `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorLink {
    pub param: usize,
    pub margin: f64,
}

/// Initial value, fixed flag and bounds for one model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub value: f64,
    pub fixed: bool,
    pub lower: f64,
    pub upper: f64,
    pub floor: Option<FloorLink>,
}

impl ParamSpec {
    pub fn free(name: &str, value: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            fixed: false,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            floor: None,
        }
    }

    pub fn fixed(name: &str, value: f64) -> Self {
        Self {
            fixed: true,
            ..Self::free(name, value)
        }
    }

    pub fn bounded(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_floor(mut self, param: usize, margin: f64) -> Self {
        self.floor = Some(FloorLink { param, margin });
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum JacobianMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Relative cost change below which an accepted step ends the search.
    pub ftol: f64,
    /// Infinity norm of the gradient below which the search ends.
    pub gtol: f64,
    pub jacobian: JacobianMode,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_damping: 1e-3,
            ftol: 1e-10,
            gtol: 1e-12,
            jacobian: JacobianMode::Analytic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AllFixed,
    CostStalled,
    SmallGradient,
    /// Damping grew without finding a lower cost.
    NoImprovement,
    MaxIterations,
    /// Parameters became non-finite at the start point.
    InvalidStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedParam {
    pub name: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub fixed: bool,
}

/// Outcome of a fit. Immutable once produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub params: Vec<FittedParam>,
    /// Names of the free parameters, in covariance order.
    pub free_params: Vec<String>,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub dof: usize,
    pub n_points: usize,
    pub weighted: bool,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub singular: bool,
    /// Set when |corr(Γ₁, η)| exceeds 0.99.
    pub degenerate: bool,
    pub failure: Option<String>,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn stderr(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).and_then(|p| p.stderr)
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    /// Correlation between two free parameters, if the covariance exists.
    pub fn correlation(&self, a: &str, b: &str) -> Option<f64> {
        let cov = self.covariance.as_ref()?;
        let i = self.free_params.iter().position(|n| n == a)?;
        let j = self.free_params.iter().position(|n| n == b)?;
        let denom = (cov[i][i] * cov[j][j]).sqrt();
        (denom > 0.0).then(|| cov[i][j] / denom)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["model".to_string()];
        for p in &self.params {
            cols.push(p.name.clone());
            cols.push(format!("{}_stderr", p.name));
        }
        cols.extend(
            ["reduced_chi2", "iterations", "converged", "degenerate"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.model.clone()];
        for p in &self.params {
            cols.push(p.value.to_string());
            cols.push(p.stderr.map(|s| s.to_string()).unwrap_or_default());
        }
        cols.push(self.reduced_chi2.to_string());
        cols.push(self.iterations.to_string());
        cols.push(self.converged.to_string());
        cols.push(self.degenerate.to_string());
        cols.join(",")
    }
}

#[derive(Debug, Clone, Copy)]
enum Map {
    Logistic { lo: f64, hi: f64 },
    Lower(f64),
    Upper(f64),
    Identity,
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

struct Problem<'a, M> {
    model: &'a M,
    tau: &'a [f64],
    y: &'a [f64],
    inv_sigma: Option<Vec<f64>>,
    specs: &'a [ParamSpec],
    free: Vec<usize>,
    mode: JacobianMode,
}

impl<'a, M: DecayModel> Problem<'a, M> {
    fn map_for(&self, i: usize, x: &[f64]) -> Map {
        let s = &self.specs[i];
        let mut lo = s.lower;
        if let Some(link) = s.floor {
            lo = lo.max(x[link.param] + link.margin);
        }
        match (lo.is_finite(), s.upper.is_finite()) {
            (true, true) => Map::Logistic { lo, hi: s.upper },
            (true, false) => Map::Lower(lo),
            (false, true) => Map::Upper(s.upper),
            (false, false) => Map::Identity,
        }
    }

    /// Free parameters in an order where linked floors are resolved after their source.
    fn eval_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.free.len())
            .filter(|&k| self.specs[self.free[k]].floor.is_none())
            .collect();
        order.extend((0..self.free.len()).filter(|&k| self.specs[self.free[k]].floor.is_some()));
        order
    }

    /// Natural parameters from the unconstrained vector, plus dx/du for each free slot.
    fn natural(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut x: Vec<f64> = self.specs.iter().map(|s| s.value).collect();
        let mut dxdu = vec![0.0; self.free.len()];
        for k in self.eval_order() {
            let i = self.free[k];
            let (v, d) = match self.map_for(i, &x) {
                Map::Logistic { lo, hi } => {
                    let s = logistic(u[k]);
                    (lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s))
                }
                Map::Lower(lo) => {
                    let e = u[k].exp();
                    (lo + e, e)
                }
                Map::Upper(hi) => {
                    let e = u[k].exp();
                    (hi - e, -e)
                }
                Map::Identity => (u[k], 1.0),
            };
            x[i] = v;
            dxdu[k] = d;
        }
        (x, dxdu)
    }

    fn unconstrained(&self, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.free.len()];
        for k in self.eval_order() {
            let i = self.free[k];
            let v = x[i];
            u[k] = match self.map_for(i, x) {
                Map::Logistic { lo, hi } => {
                    let s = ((v - lo) / (hi - lo)).clamp(1e-9, 1.0 - 1e-9);
                    (s / (1.0 - s)).ln()
                }
                Map::Lower(lo) => (v - lo).max(1e-12 * lo.abs().max(1e-3)).ln(),
                Map::Upper(hi) => (hi - v).max(1e-12 * hi.abs().max(1e-3)).ln(),
                Map::Identity => v,
            };
        }
        u
    }

    fn weight(&self, i: usize) -> f64 {
        self.inv_sigma.as_ref().map_or(1.0, |w| w[i])
    }

    fn residuals(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let mut cost = 0.0;
        for (i, r) in out.iter_mut().enumerate() {
            *r = (self.model.value(self.tau[i], x) - self.y[i]) * self.weight(i);
            cost += *r * *r;
        }
        cost
    }

    /// Weighted Jacobian with respect to the free natural parameters.
    fn natural_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.tau.len();
        let n = self.free.len();
        let mut grad = vec![0.0; self.specs.len()];
        let mut jac = DMatrix::zeros(m, n);
        for i in 0..m {
            match self.mode {
                JacobianMode::Analytic => self.model.gradient(self.tau[i], x, &mut grad),
                JacobianMode::FiniteDifference => {
                    super::models::central_difference(|q| self.model.value(self.tau[i], q), x, &mut grad)
                }
            }
            let w = self.weight(i);
            for (k, &p) in self.free.iter().enumerate() {
                jac[(i, k)] = grad[p] * w;
            }
        }
        jac
    }

    /// Jacobian in the unconstrained coordinates (chain rule through the bound maps).
    fn jacobian_u(&self, u: &[f64], x: &[f64], dxdu: &[f64]) -> DMatrix<f64> {
        let mut jac = self.natural_jacobian(x);
        let n = self.free.len();
        // linked floors: x_a depends on u_a and on u of its source parameter
        let mut extra: Vec<(usize, usize, f64)> = Vec::new();
        for (k, &i) in self.free.iter().enumerate() {
            let Some(link) = self.specs[i].floor else { continue };
            let Some(src) = self.free.iter().position(|&f| f == link.param) else { continue };
            let s = &self.specs[i];
            let active = x[link.param] + link.margin > s.lower;
            if active && s.upper.is_finite() {
                let sig = logistic(u[k]);
                extra.push((k, src, (1.0 - sig) * dxdu[src]));
            } else if active {
                extra.push((k, src, dxdu[src]));
            }
        }
        let natural = jac.clone();
        for (k, d) in dxdu.iter().enumerate().take(n) {
            jac.column_mut(k).scale_mut(*d);
        }
        for (k, src, factor) in extra {
            let col = natural.column(k) * factor;
            let mut target = jac.column_mut(src);
            target += col;
        }
        jac
    }
}

/// Minimizes Σ((y − f)/σ)² over the free parameters in `specs`.
///
/// `specs` must list every model parameter in model order. Non-convergence is
/// not an error: the best point found is returned with `converged == false`.
pub fn lm_minimize<M: DecayModel>(
    model: &M,
    curve: &DecayCurve,
    specs: &[ParamSpec],
    opts: &LmOptions,
) -> Result<FitResult> {
    validate_specs(model, specs)?;
    let free: Vec<usize> = (0..specs.len()).filter(|&i| !specs[i].fixed).collect();
    let m = curve.len();
    if m < free.len() || m == 0 {
        return Err(Error::Precondition(format!(
            "{m} data points for {} free parameters",
            free.len()
        )));
    }
    if curve.signal.iter().chain(&curve.tau).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("curve contains non-finite values".into()));
    }
    let problem = Problem {
        model,
        tau: &curve.tau,
        y: &curve.signal,
        inv_sigma: curve.sigma.as_ref().map(|s| s.iter().map(|v| 1.0 / v).collect()),
        specs,
        free,
        mode: opts.jacobian,
    };

    let start: Vec<f64> = specs.iter().map(|s| s.value).collect();
    let mut resid = vec![0.0; m];

    if problem.free.is_empty() {
        let cost = problem.residuals(&start, &mut resid);
        return Ok(finish(&problem, &start, cost, 0, true, Termination::AllFixed));
    }

    let mut u = problem.unconstrained(&start);
    let (mut x, mut dxdu) = problem.natural(&u);
    let mut cost = problem.residuals(&x, &mut resid);
    if !cost.is_finite() {
        return Ok(finish(&problem, &x, cost, 0, false, Termination::InvalidStart));
    }

    let n = problem.free.len();
    let mut lambda = opts.initial_damping;
    let mut trial_resid = vec![0.0; m];
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        let jac = problem.jacobian_u(&u, &x, &dxdu);
        let r = DVector::from_column_slice(&resid);
        let grad = jac.tr_mul(&r);
        if grad.amax() < opts.gtol || cost == 0.0 {
            termination = Termination::SmallGradient;
            break;
        }
        let normal = jac.tr_mul(&jac);
        let diag_max = (0..n).map(|k| normal[(k, k)]).fold(0.0, f64::max);
        let floor = (diag_max * 1e-12).max(f64::MIN_POSITIVE);

        loop {
            let mut damped = normal.clone();
            for k in 0..n {
                damped[(k, k)] += lambda * normal[(k, k)].max(floor);
            }
            let step = damped.cholesky().map(|c| c.solve(&(-&grad)));
            if let Some(step) = step {
                let trial_u: Vec<f64> = u.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let (trial_x, trial_dxdu) = problem.natural(&trial_u);
                let trial_cost = problem.residuals(&trial_x, &mut trial_resid);
                if trial_cost.is_finite() && trial_cost < cost {
                    let rel = (cost - trial_cost) / cost;
                    u = trial_u;
                    x = trial_x;
                    dxdu = trial_dxdu;
                    cost = trial_cost;
                    std::mem::swap(&mut resid, &mut trial_resid);
                    lambda = (lambda / 10.0).max(1e-300);
                    if rel < opts.ftol {
                        termination = Termination::CostStalled;
                        break 'outer;
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                termination = Termination::NoImprovement;
                break 'outer;
            }
        }
    }

    let converged = termination != Termination::MaxIterations;
    Ok(finish(&problem, &x, cost, iterations, converged, termination))
}

fn validate_specs<M: DecayModel>(model: &M, specs: &[ParamSpec]) -> Result<()> {
    let names = model.param_names();
    if specs.len() != names.len() {
        return Err(Error::Precondition(format!(
            "model {} takes {} parameters, got {}",
            model.name(),
            names.len(),
            specs.len()
        )));
    }
    for (spec, name) in specs.iter().zip(names) {
        if spec.name != *name {
            return Err(Error::Precondition(format!("expected parameter {name}, got {}", spec.name)));
        }
        if !spec.value.is_finite() {
            return Err(Error::Precondition(format!("{name}: initial value not finite")));
        }
        if spec.lower > spec.upper || (!spec.fixed && spec.lower == spec.upper) {
            return Err(Error::Precondition(format!("{name}: empty bounds")));
        }
        if spec.value < spec.lower || spec.value > spec.upper {
            return Err(Error::Precondition(format!(
                "{name}: initial value {} outside [{}, {}]",
                spec.value, spec.lower, spec.upper
            )));
        }
        if let Some(link) = spec.floor {
            if link.param >= specs.len() || specs[link.param].floor.is_some() {
                return Err(Error::Precondition(format!("{name}: invalid floor link")));
            }
        }
    }
    Ok(())
}

fn finish<M: DecayModel>(
    problem: &Problem<'_, M>,
    x: &[f64],
    cost: f64,
    iterations: usize,
    converged: bool,
    termination: Termination,
) -> FitResult {
    let m = problem.tau.len();
    let n = problem.free.len();
    let dof = m - n;
    let reduced_chi2 = cost / dof.max(1) as f64;

    let mut covariance = None;
    let mut singular = false;
    if n > 0 && cost.is_finite() {
        let jac = problem.natural_jacobian(x);
        let normal = jac.tr_mul(&jac);
        let inverse = normal
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| normal.try_inverse())
            .filter(|inv| inv.iter().all(|v| v.is_finite()));
        match inverse {
            Some(inv) => {
                let scaled = inv * reduced_chi2;
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|i| (0..n).map(|j| 0.5 * (scaled[(i, j)] + scaled[(j, i)])).collect())
                    .collect();
                if (0..n).any(|i| rows[i][i] < 0.0) {
                    singular = true;
                } else {
                    covariance = Some(rows);
                }
            }
            None => singular = true,
        }
    }

    let params: Vec<FittedParam> = problem
        .specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let stderr = if s.fixed {
                Some(0.0)
            } else {
                let k = problem.free.iter().position(|&f| f == i).unwrap();
                covariance.as_ref().map(|c| c[k][k].sqrt())
            };
            FittedParam {
                name: s.name.clone(),
                value: x[i],
                stderr,
                fixed: s.fixed,
            }
        })
        .collect();

    let free_params: Vec<String> = problem.free.iter().map(|&i| problem.specs[i].name.clone()).collect();
    let mut result = FitResult {
        model: problem.model.name().to_string(),
        params,
        free_params,
        covariance,
        chi2: cost,
        reduced_chi2,
        dof,
        n_points: m,
        weighted: problem.inv_sigma.is_some(),
        iterations,
        converged,
        termination,
        singular,
        degenerate: false,
        failure: None,
    };
    result.degenerate = result
        .correlation("gamma1", "eta")
        .is_some_and(|c| c.abs() > 0.99);
    result.failure = match (converged, singular) {
        (false, _) if termination == Termination::InvalidStart => Some("non-finite cost at start point".into()),
        (false, _) => Some(format!("no convergence after {iterations} iterations")),
        (true, true) => Some("singular normal matrix at solution".into()),
        _ => None,
    };
    result
}
