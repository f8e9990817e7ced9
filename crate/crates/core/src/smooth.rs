//! Smoothed and relaxed operators: soft/sparse ReLU, step, max and argmax,
//! proximal operators and Moreau envelopes, discrete conjugates, Gaussian
//! smoothing on a grid and Fenchel–Young losses.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::scalar::{logistic, softplus};

/// Regularization family behind a smoothed operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmoothKind {
    /// Negative entropy: softplus, logistic, logsumexp, softargmax.
    Shannon,
    /// Gini / squared norm: sparseplus, sparsesigmoid, sparsemax, sparseargmax.
    Gini,
    /// Gaussian convolution: closed-form smoothed ReLU and normal CDF.
    Gaussian,
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn sparseplus(u: f64) -> f64 {
    if u <= -1.0 {
        0.0
    } else if u >= 1.0 {
        u
    } else {
        0.25 * (u + 1.0) * (u + 1.0)
    }
}

pub fn sparsesigmoid(u: f64) -> f64 {
    (0.5 * (u + 1.0)).clamp(0.0, 1.0)
}

/// Smoothed ReLU `scale · f(u / scale)` and its derivative.
pub fn smoothed_relu(kind: SmoothKind, u: f64, scale: f64) -> Result<(f64, f64)> {
    check_scale(scale)?;
    let x = u / scale;
    Ok(match kind {
        SmoothKind::Shannon => (scale * softplus(&x), logistic(&x)),
        SmoothKind::Gini => (scale * sparseplus(x), sparsesigmoid(x)),
        SmoothKind::Gaussian => (u * normal_cdf(x) + scale * normal_pdf(x), normal_cdf(x)),
    })
}

/// Smoothed Heaviside step, the derivative of [`smoothed_relu`].
pub fn smoothed_step(kind: SmoothKind, u: f64, scale: f64) -> Result<f64> {
    Ok(smoothed_relu(kind, u, scale)?.1)
}

fn check_nonempty(u: &[f64]) -> Result<()> {
    if u.is_empty() {
        return Err(Error::InvalidArgument("empty vector".into()));
    }
    Ok(())
}

/// `γ log Σ exp(u_i / γ)`, stable for any shift.
pub fn logsumexp(u: &[f64], temperature: f64) -> f64 {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = u.iter().map(|x| ((x - m) / temperature).exp()).sum();
    m + temperature * s.ln()
}

pub fn softargmax(u: &[f64], temperature: f64) -> Vec<f64> {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|x| ((x - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Threshold `τ*` with `Σ [u_i - τ*]₊ = 1`.
pub fn sparse_threshold(u: &[f64]) -> f64 {
    let mut s = u.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = s[0] - 1.0;
    for (j, &x) in s.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    tau
}

/// Euclidean projection onto the probability simplex.
pub fn simplex_project(u: &[f64]) -> Vec<f64> {
    if u.is_empty() {
        return Vec::new();
    }
    let tau = sparse_threshold(u);
    u.iter().map(|x| (x - tau).max(0.0)).collect()
}

pub fn sparseargmax(u: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = u.iter().map(|x| x / temperature).collect();
    simplex_project(&scaled)
}

/// `γ max_π ⟨u/γ, π⟩ - ½⟨π, π - 1⟩` over the simplex.
pub fn sparsemax(u: &[f64], temperature: f64) -> f64 {
    let x: Vec<f64> = u.iter().map(|v| v / temperature).collect();
    let p = simplex_project(&x);
    temperature * (dot(&x, &p) - 0.5 * dot(&p, &p) + 0.5)
}

/// Smoothed maximum of a vector.
pub fn softmax_value(kind: SmoothKind, u: &[f64], temperature: f64) -> Result<f64> {
    check_nonempty(u)?;
    check_scale(temperature)?;
    match kind {
        SmoothKind::Shannon => Ok(logsumexp(u, temperature)),
        SmoothKind::Gini => Ok(sparsemax(u, temperature)),
        SmoothKind::Gaussian => Err(Error::Unsupported(
            "the Gaussian family has no closed-form vector max".into(),
        )),
    }
}

/// Relaxed argmax: the gradient of [`softmax_value`].
pub fn argmax_relaxed(kind: SmoothKind, u: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_nonempty(u)?;
    check_scale(temperature)?;
    match kind {
        SmoothKind::Shannon => Ok(softargmax(u, temperature)),
        SmoothKind::Gini => Ok(sparseargmax(u, temperature)),
        SmoothKind::Gaussian => Err(Error::Unsupported(
            "the Gaussian family has no closed-form vector argmax".into(),
        )),
    }
}

/// One-hot of the first maximizer.
pub fn hard_argmax(u: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; u.len()];
    if !u.is_empty() {
        e[crate::graph::argmax_re(u)] = 1.0;
    }
    e
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProxTag {
    Zero,
    /// `‖w‖₁`
    L1,
    /// `½‖w‖²`
    ScaledL2,
    /// `Σ_g ‖w_g‖₂` over a partition of the coordinates.
    GroupL1(Vec<Vec<usize>>),
}

fn check_partition(groups: &[Vec<usize>], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    for g in groups {
        for &i in g {
            if i >= dim || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "group partition is malformed at index {i}"
                )));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidArgument("groups do not cover every coordinate".into()));
    }
    Ok(())
}

/// `prox_{scale·Ω}(v)` for the tagged `Ω`.
pub fn prox(tag: &ProxTag, v: &[f64], scale: f64) -> Result<Vec<f64>> {
    if scale < 0.0 {
        return Err(Error::InvalidArgument("prox scale must be non-negative".into()));
    }
    Ok(match tag {
        ProxTag::Zero => v.to_vec(),
        ProxTag::L1 => v
            .iter()
            .map(|x| x.signum() * (x.abs() - scale).max(0.0))
            .collect(),
        ProxTag::ScaledL2 => v.iter().map(|x| x / (1.0 + scale)).collect(),
        ProxTag::GroupL1(groups) => {
            check_partition(groups, v.len())?;
            let mut out = v.to_vec();
            for g in groups {
                let n = g.iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt();
                let f = if n > 0.0 { (1.0 - scale / n).max(0.0) } else { 0.0 };
                for &i in g {
                    out[i] = f * v[i];
                }
            }
            out
        }
    })
}

/// Value of the tagged `Ω`.
pub fn penalty(tag: &ProxTag, v: &[f64]) -> f64 {
    match tag {
        ProxTag::Zero => 0.0,
        ProxTag::L1 => v.iter().map(|x| x.abs()).sum(),
        ProxTag::ScaledL2 => 0.5 * dot(v, v),
        ProxTag::GroupL1(groups) => groups
            .iter()
            .map(|g| g.iter().map(|&i| v[i] * v[i]).sum::<f64>().sqrt())
            .sum(),
    }
}

/// `Ω` scaled by `λ`, with its proximal operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxOracle {
    pub tag: ProxTag,
    pub lambda: f64,
}

impl ProxOracle {
    pub fn value(&self, v: &[f64]) -> f64 {
        self.lambda * penalty(&self.tag, v)
    }

    pub fn prox(&self, v: &[f64]) -> Result<Vec<f64>> {
        prox(&self.tag, v, self.lambda)
    }
}

/// Moreau envelope value and gradient `μ - prox(μ)`.
pub fn moreau_envelope(
    prox: impl Fn(&[f64]) -> Vec<f64>,
    f_value: impl Fn(&[f64]) -> f64,
    mu: &[f64],
) -> (f64, Vec<f64>) {
    let p = prox(mu);
    let d: Vec<f64> = mu.iter().zip(&p).map(|(m, q)| m - q).collect();
    (f_value(&p) + 0.5 * dot(&d, &d), d)
}

/// Huber function, the Moreau envelope of `|·|`.
pub fn huber(mu: f64) -> f64 {
    if mu.abs() <= 1.0 {
        0.5 * mu * mu
    } else {
        mu.abs() - 0.5
    }
}

/// A function sampled on a strictly increasing grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        crate::error::check_len("grid values", values.len(), grid.len())?;
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn from_fn(grid: Vec<f64>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.iter().map(|&x| f(x)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "f"])?;
        for (x, f) in self.grid.iter().zip(&self.values) {
            w.write_record([x.to_string(), f.to_string()])?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut grid = Vec::new();
        let mut values = Vec::new();
        for rec in r.deserialize() {
            let (x, f): (f64, f64) = rec?;
            grid.push(x);
            values.push(f);
        }
        Self::new(grid, values)
    }
}

/// Evenly spaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Default stand-in for `+∞` in discrete conjugates.
pub const DEFAULT_SENTINEL: f64 = 1e30;

fn conjugate_at(f: &GridFunction, v: f64) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, (u, fu)) in f.grid.iter().zip(&f.values).enumerate() {
        let g = u * v - fu;
        if g > best {
            best = g;
            arg = i;
        }
    }
    (best, arg)
}

/// `f*(v) = max_i u_i v - f(u_i)` on every dual grid point.
pub fn discrete_conjugate(f: &GridFunction, dual_grid: &[f64]) -> Result<GridFunction> {
    GridFunction::from_fn(dual_grid.to_vec(), |v| conjugate_at(f, v).0)
}

/// Like [`discrete_conjugate`], but a supremum that would keep increasing past
/// either end of the primal grid is reported as `sentinel`.
pub fn discrete_conjugate_extended(f: &GridFunction, dual_grid: &[f64], sentinel: f64) -> Result<GridFunction> {
    let n = f.len();
    GridFunction::from_fn(dual_grid.to_vec(), |v| {
        let (best, arg) = conjugate_at(f, v);
        if n < 2 {
            return best;
        }
        let g = |i: usize| f.grid[i] * v - f.values[i];
        let tol = 1e-9 * (1.0 + best.abs());
        let escapes = (arg == 0 && g(0) > g(1) + tol) || (arg == n - 1 && g(n - 1) > g(n - 2) + tol);
        if escapes {
            sentinel
        } else {
            best
        }
    })
}

/// Convolution with a Gaussian kernel sampled on the grid spacing, truncated at
/// ±4σ and renormalized (also at the boundary).
pub fn gaussian_conv_1d(signal: &GridFunction, sigma: f64) -> Result<GridFunction> {
    check_scale(sigma)?;
    let n = signal.len();
    if n < 2 {
        return Ok(signal.clone());
    }
    let h = signal.grid[1] - signal.grid[0];
    for w in signal.grid.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(1.0) {
            return Err(Error::InvalidArgument("gaussian_conv_1d needs a uniform grid".into()));
        }
    }
    let half = ((4.0 * sigma) / h).floor() as usize;
    let kernel: Vec<f64> = (0..=half)
        .map(|j| {
            let x = j as f64 * h / sigma;
            (-0.5 * x * x).exp()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let mut num = 0.0;
        let mut den = 0.0;
        for j in lo..=hi {
            let k = kernel[i.abs_diff(j)];
            num += k * signal.values[j];
            den += k;
        }
        out.push(num / den);
    }
    GridFunction::new(signal.grid.clone(), out)
}

/// Regularizer defining a Fenchel–Young loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FyTag {
    ShannonSimplex,
    GiniSimplex,
    HalfSqL2,
}

fn check_simplex(t: &[f64]) -> Result<()> {
    let s: f64 = t.iter().sum();
    if t.iter().any(|&x| x < -1e-12) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("target must lie in the probability simplex".into()));
    }
    Ok(())
}

/// `Ω*(θ) + Ω(t) - ⟨θ, t⟩` and its gradient `∇Ω*(θ) - t`.
pub fn fy_loss(tag: FyTag, theta: &[f64], t: &[f64]) -> Result<(f64, Vec<f64>)> {
    crate::error::check_len("target", t.len(), theta.len())?;
    check_nonempty(theta)?;
    let (conj, omega, grad_conj) = match tag {
        FyTag::ShannonSimplex => {
            check_simplex(t)?;
            let neg_entropy: f64 = t.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum();
            (logsumexp(theta, 1.0), neg_entropy, softargmax(theta, 1.0))
        }
        FyTag::GiniSimplex => {
            check_simplex(t)?;
            (sparsemax(theta, 1.0), 0.5 * dot(t, t) - 0.5, sparseargmax(theta, 1.0))
        }
        FyTag::HalfSqL2 => (0.5 * dot(theta, theta), 0.5 * dot(t, t), theta.to_vec()),
    };
    let value = (conj + omega - dot(theta, t)).max(0.0);
    let grad = grad_conj.iter().zip(t).map(|(g, ti)| g - ti).collect();
    Ok((value, grad))
}

/// `KL(p, q) = Σ p log(p / q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_family_values() {
        let (v, _) = smoothed_relu(SmoothKind::Shannon, 0.0, 1.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sparseplus(0.0), 0.25);
        assert_eq!(sparseplus(2.0), 2.0);
        assert_eq!(sparseplus(-2.0), 0.0);
        let (g, _) = smoothed_relu(SmoothKind::Gaussian, 0.0, 1.0).unwrap();
        assert!((g - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn step_family_values() {
        assert_eq!(smoothed_step(SmoothKind::Shannon, 0.0, 1.0).unwrap(), 0.5);
        assert_eq!(sparsesigmoid(1.0), 1.0);
        assert_eq!(sparsesigmoid(-1.0), 0.0);
        assert_eq!(normal_cdf(0.0), 0.5);
    }

    #[test]
    fn lse_pairs_with_softplus_and_shifts() {
        assert!((logsumexp(&[1.3, 0.0], 1.0) - softplus(&1.3)).abs() < 1e-15);
        let u = [0.2, -1.0, 0.7];
        let shifted: Vec<f64> = u.iter().map(|x| x + 100.0).collect();
        assert!((logsumexp(&shifted, 1.0) - logsumexp(&u, 1.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_examples() {
        assert_eq!(sparsemax(&[1.0, 0.0], 1.0), 1.0);
        let p = sparseargmax(&[0.3, 0.1], 1.0);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.4).abs() < 1e-15);
        assert!((sparse_threshold(&[0.3, 0.1]) + 0.3).abs() < 1e-15);
        assert_eq!(sparseargmax(&[2.0, 0.0, 0.0], 1.0), vec![1.0, 0.0, 0.0]);
        let s = softargmax(&[0.0, 0.0, 0.0], 1.0);
        assert!(s.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn gaussian_vector_max_is_unsupported() {
        assert!(softmax_value(SmoothKind::Gaussian, &[1.0], 1.0).is_err());
        assert!(softmax_value(SmoothKind::Shannon, &[], 1.0).is_err());
    }

    #[test]
    fn prox_examples() {
        assert_eq!(prox(&ProxTag::L1, &[2.0, 0.5, -3.0], 1.0).unwrap(), vec![1.0, 0.0, -2.0]);
        assert_eq!(prox(&ProxTag::L1, &[2.0, -0.5], 0.0).unwrap(), vec![2.0, -0.5]);
        let g = ProxTag::GroupL1(vec![vec![0, 1], vec![2]]);
        let out = prox(&g, &[0.3, 0.4, 5.0], 1.0).unwrap();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] - 4.0).abs() < 1e-15);
        assert!(prox(&ProxTag::GroupL1(vec![vec![0, 0]]), &[1.0], 1.0).is_err());
    }

    #[test]
    fn huber_is_envelope_of_abs() {
        for mu in [0.5, 2.0, -1.7, 0.0] {
            let (v, _) = moreau_envelope(
                |m| prox(&ProxTag::L1, m, 1.0).unwrap(),
                |p| penalty(&ProxTag::L1, p),
                &[mu],
            );
            assert!((v - huber(mu)).abs() < 1e-15);
        }
        assert_eq!(huber(0.5), 0.125);
        assert_eq!(huber(2.0), 1.5);
    }

    #[test]
    fn affine_conjugate_support_point() {
        let f = GridFunction::from_fn(linspace(-3.0, 3.0, 61), |u| 2.0 * u + 1.0).unwrap();
        let c = discrete_conjugate_extended(&f, &[1.0, 2.0, 3.0], DEFAULT_SENTINEL).unwrap();
        assert_eq!(c.values()[0], DEFAULT_SENTINEL);
        assert!((c.values()[1] + 1.0).abs() < 1e-12);
        assert_eq!(c.values()[2], DEFAULT_SENTINEL);
    }

    #[test]
    fn conv_edge_cases() {
        let grid = linspace(-2.0, 2.0, 81);
        let c = GridFunction::from_fn(grid.clone(), |_| 3.0).unwrap();
        let out = gaussian_conv_1d(&c, 0.4).unwrap();
        assert!(out.values().iter().all(|v| (v - 3.0).abs() < 1e-12));
        let f = GridFunction::from_fn(grid.clone(), |x| x.sin()).unwrap();
        let id = gaussian_conv_1d(&f, 1e-3).unwrap();
        assert!(id.values().iter().zip(f.values()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(gaussian_conv_1d(&GridFunction::new(vec![0.0, 1.0, 3.0], vec![0.0; 3]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn fy_examples() {
        let (v, g) = fy_loss(FyTag::ShannonSimplex, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (v, _) = fy_loss(FyTag::HalfSqL2, &[1.0, 2.0], &[0.0, 4.0]).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
        assert!(fy_loss(FyTag::GiniSimplex, &[0.0, 0.0], &[0.7, 0.7]).is_err());
    }

    #[test]
    fn grid_csv_round_trip() {
        let f = GridFunction::from_fn(linspace(0.0, 1.0, 5), |x| x * x).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        assert_eq!(GridFunction::read_csv(buf.as_slice()).unwrap(), f);
    }
}
