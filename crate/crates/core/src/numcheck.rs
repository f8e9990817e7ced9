//! Finite-difference and complex-step derivative oracles.

use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdKind {
    /// Points `w + iδv`, `i = 0..=p`.
    Forward,
    /// Points `w - iδv`, `i = 0..=p`.
    Backward,
    /// Points `w + iδv`, `i = -p..=p`.
    Central,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdScheme {
    pub kind: FdKind,
    pub delta: f64,
    /// Stencil extent `p`.
    pub accuracy: usize,
    /// Derivative order `k`.
    pub order: usize,
}

impl FdScheme {
    pub fn new(kind: FdKind, delta: f64, accuracy: usize, order: usize) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("δ must be positive, got {delta}")));
        }
        if accuracy == 0 || order == 0 {
            return Err(Error::InvalidArgument("p and k must be at least 1".into()));
        }
        Ok(FdScheme {
            kind,
            delta,
            accuracy,
            order,
        })
    }

    /// First derivative by central differences with step `delta`.
    pub fn central(delta: f64) -> Self {
        FdScheme {
            kind: FdKind::Central,
            delta,
            accuracy: 1,
            order: 1,
        }
    }

    pub fn forward(delta: f64) -> Self {
        FdScheme {
            kind: FdKind::Forward,
            delta,
            accuracy: 1,
            order: 1,
        }
    }
}

/// Default step for a coordinate of magnitude `|w|`.
pub fn default_delta(w: f64) -> f64 {
    1e-5 * (1.0 + w.abs())
}

/// Stencil offsets in the order matching [`fd_coefficients`].
pub fn stencil(kind: FdKind, p: usize) -> Vec<i64> {
    let p = p as i64;
    match kind {
        FdKind::Forward => (0..=p).collect(),
        FdKind::Backward => (0..=p).map(|i| -i).collect(),
        FdKind::Central => (-p..=p).collect(),
    }
}

/// Coefficients `a_i` with `Σ a_i f(w + s_i δ v) / δ^k ≈ ∂^k f(w)[v, ..., v]`,
/// from the Taylor moment conditions `Σ a_i s_i^j / j! = [j = k]`.
pub fn fd_coefficients(kind: FdKind, p: usize, k: usize) -> Result<Vec<f64>> {
    if p == 0 || k == 0 {
        return Err(Error::InvalidArgument("p and k must be at least 1".into()));
    }
    let s = stencil(kind, p);
    let n = s.len();
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "a {n}-point stencil cannot resolve derivative order {k}"
        )));
    }
    if n > 25 {
        return Err(Error::InvalidArgument("stencil too large".into()));
    }
    let mut fact = 1.0;
    let mut rows = Vec::with_capacity(n * n);
    for j in 0..n {
        if j > 0 {
            fact *= j as f64;
        }
        for &si in &s {
            rows.push((si as f64).powi(j as i32) / fact);
        }
    }
    let mut rhs = vec![0.0; n];
    rhs[k] = 1.0;
    Matrix::new(n, n, rows)?.solve(&rhs)
}

/// Finite-difference approximation of `∂^k f(w)[v, ..., v]`.
pub fn directional_derivative(
    f: impl Fn(&[f64]) -> f64,
    w: &[f64],
    v: &[f64],
    scheme: &FdScheme,
) -> Result<f64> {
    crate::error::check_len("direction", v.len(), w.len())?;
    let coeffs = fd_coefficients(scheme.kind, scheme.accuracy, scheme.order)?;
    let offs = stencil(scheme.kind, scheme.accuracy);
    let mut acc = 0.0;
    for (a, s) in coeffs.iter().zip(offs) {
        if *a == 0.0 {
            continue;
        }
        let x: Vec<f64> = w
            .iter()
            .zip(v)
            .map(|(wi, vi)| wi + s as f64 * scheme.delta * vi)
            .collect();
        let fx = f(&x);
        if !fx.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "function is not finite at stencil offset {s}"
            )));
        }
        acc += a * fx;
    }
    Ok(acc / scheme.delta.powi(scheme.order as i32))
}

/// `Im f(w + iδv) / δ`
pub fn complex_step(
    f: impl Fn(&[Complex64]) -> Complex64,
    w: &[f64],
    v: &[f64],
    delta: f64,
) -> Result<f64> {
    crate::error::check_len("direction", v.len(), w.len())?;
    let x: Vec<Complex64> = w
        .iter()
        .zip(v)
        .map(|(wi, vi)| Complex64::new(*wi, delta * vi))
        .collect();
    let y = f(&x);
    if !y.re.is_finite() || !y.im.is_finite() {
        return Err(Error::InvalidArgument("function is not finite at the complex point".into()));
    }
    Ok(y.im / delta)
}

/// Central-difference gradient with per-coordinate default steps.
pub fn numerical_gradient(f: impl Fn(&[f64]) -> f64, w: &[f64]) -> Result<Vec<f64>> {
    (0..w.len())
        .map(|i| {
            let mut e = vec![0.0; w.len()];
            e[i] = 1.0;
            directional_derivative(&f, w, &e, &FdScheme::central(default_delta(w[i])))
        })
        .collect()
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6}  {:>24}  {:>24}  {:>12}", "index", "analytic", "numeric", "rel_error")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:>6}  {:>24.16e}  {:>24.16e}  {:>12.3e}",
                e.index, e.analytic, e.numeric, e.rel_error
            )?;
        }
        writeln!(
            f,
            "max rel error {:.3e} (tolerance {:.1e}): {}",
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compare `grad_f(w)` with central differences of `f`, coordinate by coordinate.
pub fn gradcheck(
    f: impl Fn(&[f64]) -> f64,
    grad_f: impl Fn(&[f64]) -> Vec<f64>,
    w: &[f64],
    tolerance: f64,
) -> GradcheckReport {
    let analytic = grad_f(w);
    let mut entries = Vec::with_capacity(w.len());
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut e = vec![0.0; w.len()];
        e[i] = 1.0;
        let numeric = directional_derivative(&f, w, &e, &FdScheme::central(default_delta(w[i])))
            .unwrap_or(f64::NAN);
        let a = analytic.get(i).copied().unwrap_or(f64::NAN);
        let mut rel = relative_error(a, numeric);
        if rel.is_nan() {
            rel = f64::INFINITY;
        }
        worst = worst.max(rel);
        entries.push(GradcheckEntry {
            index: i,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    if analytic.len() != w.len() {
        worst = f64::INFINITY;
    }
    GradcheckReport {
        entries,
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn coefficient_examples() {
        assert!(close(&fd_coefficients(FdKind::Forward, 1, 1).unwrap(), &[-1.0, 1.0]));
        assert!(close(&fd_coefficients(FdKind::Central, 1, 2).unwrap(), &[1.0, -2.0, 1.0]));
        assert!(close(&fd_coefficients(FdKind::Forward, 2, 1).unwrap(), &[-1.5, 2.0, -0.5]));
        assert!(close(&fd_coefficients(FdKind::Forward, 2, 2).unwrap(), &[1.0, -2.0, 1.0]));
        assert!(close(&fd_coefficients(FdKind::Central, 1, 1).unwrap(), &[-0.5, 0.0, 0.5]));
        assert!(fd_coefficients(FdKind::Forward, 1, 2).is_err());
    }

    #[test]
    fn central_derivative_of_square() {
        let d = directional_derivative(|w| w[0] * w[0], &[3.0], &[1.0], &FdScheme::central(1e-4)).unwrap();
        assert!((d - 6.0).abs() < 1e-7);
        let c = directional_derivative(|_| 4.2, &[3.0], &[1.0], &FdScheme::central(1e-4)).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn complex_step_cubic() {
        let d = complex_step(|w| w[0] * w[0] * w[0], &[2.0], &[1.0], 1e-20).unwrap();
        assert_eq!(d, 12.0);
    }

    #[test]
    fn gradcheck_pass_and_fail() {
        let f = |w: &[f64]| 0.5 * w.iter().map(|x| x * x).sum::<f64>();
        let w = [1.0, -2.0, 0.5];
        assert!(gradcheck(f, |w| w.to_vec(), &w, 1e-6).passed);
        let bad = gradcheck(f, |w| w.iter().map(|x| 2.0 * x).collect(), &w, 1e-6);
        assert!(!bad.passed);
        assert!(bad.to_string().contains("FAIL"));
    }
}
