//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

pub type M2 = [[f64; 2]; 2];

fn mul(a: &M2, b: &M2) -> M2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// exp(A) by scaling and squaring with a 24-term Taylor series.
///
/// Works on `E = exp(B) − I` throughout, squaring as `2E + E²`, so the small
/// off-identity part keeps full precision across many squarings.
pub fn expm(a: &M2) -> M2 {
    let norm = a
        .iter()
        .map(|r| r[0].abs() + r[1].abs())
        .fold(0.0f64, f64::max);
    let mut s = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        s += 1;
    }
    let b = [[a[0][0] * scale, a[0][1] * scale], [a[1][0] * scale, a[1][1] * scale]];
    let mut e = [[0.0; 2]; 2];
    let mut term = [[1.0, 0.0], [0.0, 1.0]];
    for k in 1..=24 {
        term = mul(&term, &b);
        for row in term.iter_mut() {
            for v in row.iter_mut() {
                *v /= k as f64;
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                e[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        let sq = mul(&e, &e);
        for i in 0..2 {
            for j in 0..2 {
                e[i][j] = 2.0 * e[i][j] + sq[i][j];
            }
        }
    }
    [[1.0 + e[0][0], e[0][1]], [e[1][0], 1.0 + e[1][1]]]
}

pub fn mat_pow(a: &M2, n: u32) -> M2 {
    let mut r = [[1.0, 0.0], [0.0, 1.0]];
    for _ in 0..n {
        r = mul(&r, a);
    }
    r
}

pub fn mat_mul(a: &M2, b: &M2) -> M2 {
    mul(a, b)
}

/// Central difference of `f` in parameter `k`, step cbrt(ε)·max(|p_k|, 1).
pub fn central_fd(f: &dyn Fn(&[f64]) -> f64, p: &[f64], k: usize) -> f64 {
    let h = f64::EPSILON.cbrt() * p[k].abs().max(1.0);
    let mut up = p.to_vec();
    let mut dn = p.to_vec();
    up[k] += h;
    dn[k] -= h;
    (f(&up) - f(&dn)) / (up[k] - dn[k])
}

/// Relative agreement within `rel`. Partials whose size is below the
/// truncation floor of the difference quotient are compared against that floor.
pub fn partial_agrees(analytic: f64, fd: f64, value_scale: f64, p_k: f64, rel: f64) -> bool {
    let floor = 1e-4 * value_scale.abs().max(1.0) / p_k.abs().max(1.0);
    (analytic - fd).abs() <= rel * analytic.abs().max(fd.abs()).max(floor)
}

pub fn log_uniform(u: f64, lo: f64, hi: f64) -> f64 {
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}
