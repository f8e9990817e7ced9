//! Relaxed program constructs: comparisons, logic, branching, loops, lists
//! and dictionaries.
//!
//! Branch values and list entries are flat `Vec<f64>`s. Distributions over
//! indices of a multi-dimensional list are flattened row-major, see
//! [`product_distribution`].

use crate::error::{Error, Result};
use crate::scalar::logistic;
use crate::smooth::{normal_cdf, softargmax};

/// A probability in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SoftBool(f64);

impl SoftBool {
    pub const TRUE: SoftBool = SoftBool(1.0);
    pub const FALSE: SoftBool = SoftBool(0.0);

    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("truth value {p} is outside [0, 1]")));
        }
        Ok(SoftBool(p))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Whether the value is exactly 0 or 1.
    pub fn is_hard(self) -> bool {
        self.0 == 0.0 || self.0 == 1.0
    }

    fn clamped(p: f64) -> Self {
        SoftBool(p.clamp(0.0, 1.0))
    }
}

impl From<bool> for SoftBool {
    fn from(b: bool) -> Self {
        if b {
            SoftBool::TRUE
        } else {
            SoftBool::FALSE
        }
    }
}

/// CDF used to smooth the step function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmoidKind {
    Logistic,
    Gaussian,
}

impl SigmoidKind {
    /// `sigmoid_σ(t)`, the CDF of `σZ` at `t`.
    pub fn cdf(self, t: f64, sigma: f64) -> f64 {
        match self {
            SigmoidKind::Logistic => logistic(&(t / sigma)),
            SigmoidKind::Gaussian => normal_cdf(t / sigma),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// `exp(-t² / 2σ²)`
    Gaussian,
    /// `sech²(t / 2σ)`
    Logistic,
}

impl Kernel {
    /// `log κ_σ(t)`, normalized so that `κ_σ(0) = 1`.
    pub fn log_value(self, t: f64, sigma: f64) -> f64 {
        match self {
            Kernel::Gaussian => -t * t / (2.0 * sigma * sigma),
            Kernel::Logistic => {
                let x = (t / (2.0 * sigma)).abs();
                // sech²(x) = 4 e^{-2x} / (1 + e^{-2x})²
                2.0 * (-x - (-2.0 * x).exp().ln_1p()) + 4f64.ln()
            }
        }
    }
}

/// `sigmoid_σ(μ₁ − μ₂)`
pub fn soft_gt(kind: SigmoidKind, mu1: f64, mu2: f64, sigma: f64) -> SoftBool {
    SoftBool::clamped(kind.cdf(mu1 - mu2, sigma))
}

pub fn soft_lt(kind: SigmoidKind, mu1: f64, mu2: f64, sigma: f64) -> SoftBool {
    soft_gt(kind, mu2, mu1, sigma)
}

/// `κ_σ(μ₁ − μ₂) / κ_σ(0)`
pub fn soft_eq(kernel: Kernel, mu1: f64, mu2: f64, sigma: f64) -> SoftBool {
    SoftBool::clamped(kernel.log_value(mu1 - mu2, sigma).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TNorm {
    Probabilistic,
    Extremum,
    Lukasiewicz,
}

pub fn soft_not(p: SoftBool) -> SoftBool {
    SoftBool(1.0 - p.0)
}

/// Relaxed `and`.
pub fn tnorm(kind: TNorm, a: SoftBool, b: SoftBool) -> SoftBool {
    soft_all(kind, &[a, b])
}

/// Relaxed `or`.
pub fn tconorm(kind: TNorm, a: SoftBool, b: SoftBool) -> SoftBool {
    soft_any(kind, &[a, b])
}

/// Relaxed `all`; `1` for an empty argument list.
pub fn soft_all(kind: TNorm, args: &[SoftBool]) -> SoftBool {
    let it = args.iter().map(|p| p.0);
    SoftBool::clamped(match kind {
        TNorm::Probabilistic => it.product(),
        TNorm::Extremum => it.fold(1.0, f64::min),
        TNorm::Lukasiewicz => (it.sum::<f64>() - (args.len() as f64 - 1.0)).max(0.0),
    })
}

/// Relaxed `any`; `0` for an empty argument list.
pub fn soft_any(kind: TNorm, args: &[SoftBool]) -> SoftBool {
    let it = args.iter().map(|p| p.0);
    SoftBool::clamped(match kind {
        TNorm::Probabilistic => 1.0 - it.map(|p| 1.0 - p).product::<f64>(),
        TNorm::Extremum => it.fold(0.0, f64::max),
        TNorm::Lukasiewicz => it.sum::<f64>().min(1.0),
    })
}

fn mix(pi: f64, v1: &[f64], v0: &[f64]) -> Result<Vec<f64>> {
    if v1.len() != v0.len() {
        return Err(Error::Dimension(format!(
            "branches have lengths {} and {}",
            v1.len(),
            v0.len()
        )));
    }
    Ok(v1.iter().zip(v0).map(|(a, b)| pi * a + (1.0 - pi) * b).collect())
}

/// `π v₁ + (1 − π) v₀`
pub fn soft_ifelse(pi: SoftBool, v1: &[f64], v0: &[f64]) -> Result<Vec<f64>> {
    match pi.0 {
        1.0 => mix(1.0, v1, v0).map(|_| v1.to_vec()),
        0.0 => mix(0.0, v1, v0).map(|_| v0.to_vec()),
        p => mix(p, v1, v0),
    }
}

/// As [`soft_ifelse`], evaluating only the taken branch when `π` is 0 or 1.
pub fn soft_ifelse_lazy(
    pi: SoftBool,
    v1: impl FnOnce() -> Vec<f64>,
    v0: impl FnOnce() -> Vec<f64>,
) -> Result<Vec<f64>> {
    match pi.0 {
        1.0 => Ok(v1()),
        0.0 => Ok(v0()),
        p => mix(p, &v1(), &v0()),
    }
}

/// Check that `pi` is a probability vector of length `len`.
pub fn check_simplex(pi: &[f64], len: usize) -> Result<()> {
    if pi.len() != len {
        return Err(Error::Dimension(format!(
            "distribution has {} entries, expected {len}",
            pi.len()
        )));
    }
    if pi.iter().any(|p| !(*p >= 0.0)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("weights must be non-negative and sum to 1".into()));
    }
    Ok(())
}

fn combine(pi: &[f64], values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = values.first().map_or(0, Vec::len);
    if values.iter().any(|v| v.len() != dim) {
        return Err(Error::Dimension("values have different lengths".into()));
    }
    let mut out = vec![0.0; dim];
    for (p, v) in pi.iter().zip(values) {
        // skip zero weights so unused entries never contaminate the result
        if *p != 0.0 {
            for (o, x) in out.iter_mut().zip(v) {
                *o += p * x;
            }
        }
    }
    Ok(out)
}

/// `Σ πᵢ vᵢ`
pub fn soft_cond(pi: &[f64], values: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_simplex(pi, values.len())?;
    combine(pi, values)
}

/// Soft-thresholding written as a three-way conditional with
/// `π = softargmax((λ − |u|, u − λ, −u − λ) / σ)`.
pub fn soft_threshold_cond(u: f64, lambda: f64, sigma: f64) -> f64 {
    let pi = softargmax(&[lambda - u.abs(), u - lambda, -u - lambda], sigma);
    combine(&pi, &[vec![0.0], vec![u - lambda], vec![u + lambda]]).expect("equal lengths")[0]
}

/// Weights `π̃ᵢ = πᵢ ∏_{j<i}(1 − πⱼ)` over iterations `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct StopDistribution {
    pub weights: Vec<f64>,
}

/// Relaxed `while`: states `s_{i+1} = g(s_i)`, stop probabilities `πᵢ = stop(sᵢ)`
/// for `i < T` and `π_T = 1`. Returns `Σ π̃ᵢ sᵢ`.
///
/// States past the point where the remaining mass is exactly zero are not computed.
pub fn soft_while(
    g: impl Fn(&[f64]) -> Vec<f64>,
    stop: impl Fn(&[f64]) -> f64,
    s0: &[f64],
    max_iter: usize,
) -> Result<(Vec<f64>, StopDistribution)> {
    let mut weights = vec![0.0; max_iter + 1];
    let mut out = vec![0.0; s0.len()];
    let mut s = s0.to_vec();
    let mut remaining = 1.0;
    for (i, w) in weights.iter_mut().enumerate() {
        let pi = if i == max_iter { 1.0 } else { stop(&s) };
        if !(0.0..=1.0).contains(&pi) {
            return Err(Error::InvalidArgument(format!(
                "stop probability {pi} at iteration {i} is outside [0, 1]"
            )));
        }
        *w = remaining * pi;
        if *w != 0.0 {
            if s.len() != out.len() {
                return Err(Error::Dimension(format!("state {i} changed length")));
            }
            for (o, x) in out.iter_mut().zip(&s) {
                *o += *w * x;
            }
        }
        remaining *= 1.0 - pi;
        if remaining == 0.0 {
            break;
        }
        s = g(&s);
    }
    Ok((out, StopDistribution { weights }))
}

/// `Σⱼ πⱼ lⱼ`
pub fn list_soft_get(l: &[Vec<f64>], pi: &[f64]) -> Result<Vec<f64>> {
    check_simplex(pi, l.len())?;
    combine(pi, l)
}

/// `l'ⱼ = πⱼ v + (1 − πⱼ) lⱼ`
pub fn list_soft_set(l: &[Vec<f64>], pi: &[f64], v: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_simplex(pi, l.len())?;
    l.iter().zip(pi).map(|(lj, p)| mix(*p, v, lj)).collect()
}

/// `l'ⱼ = P(I > j) lⱼ + P(I = j) v + P(I < j) l_{j−1}` with `I ~ π` over `K + 1` slots.
pub fn list_soft_insert(l: &[Vec<f64>], pi: &[f64], v: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = l.len();
    check_simplex(pi, k + 1)?;
    if l.iter().any(|x| x.len() != v.len()) {
        return Err(Error::Dimension("list entries and value differ in length".into()));
    }
    let mut below = 0.0;
    let mut out = Vec::with_capacity(k + 1);
    for j in 0..=k {
        let above: f64 = pi[j + 1..].iter().sum();
        let mut e: Vec<f64> = v.iter().map(|x| pi[j] * x).collect();
        if j < k && above != 0.0 {
            for (o, x) in e.iter_mut().zip(&l[j]) {
                *o += above * x;
            }
        }
        if j > 0 && below != 0.0 {
            for (o, x) in e.iter_mut().zip(&l[j - 1]) {
                *o += below * x;
            }
        }
        below += pi[j];
        out.push(e);
    }
    Ok(out)
}

/// Joint distribution of independent per-axis distributions, flattened row-major.
pub fn product_distribution(axes: &[Vec<f64>]) -> Vec<f64> {
    axes.iter().fold(vec![1.0], |acc, ax| {
        acc.iter().flat_map(|a| ax.iter().map(move |b| a * b)).collect()
    })
}

/// Key-value store queried by kernel regression.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftDict {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pub sigma: f64,
    pub kernel: Kernel,
}

impl SoftDict {
    pub fn new(keys: Vec<Vec<f64>>, values: Vec<Vec<f64>>, sigma: f64, kernel: Kernel) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::InvalidArgument("dictionary is empty".into()));
        }
        if keys.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} keys but {} values",
                keys.len(),
                values.len()
            )));
        }
        if keys.iter().any(|k| k.len() != keys[0].len()) || values.iter().any(|v| v.len() != values[0].len()) {
            return Err(Error::Dimension("keys or values differ in length".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("σ must be positive, got {sigma}")));
        }
        Ok(SoftDict {
            keys,
            values,
            sigma,
            kernel,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Normalized kernel weights `κ_σ(k − kᵢ) / Σⱼ κ_σ(k − kⱼ)`.
    pub fn weights(&self, k: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len("query key", k.len(), self.keys[0].len())?;
        let logits: Vec<f64> = self
            .keys
            .iter()
            .map(|ki| {
                let d = k.iter().zip(ki).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                self.kernel.log_value(d, self.sigma)
            })
            .collect();
        Ok(softargmax(&logits, 1.0))
    }

    pub fn soft_get(&self, k: &[f64]) -> Result<Vec<f64>> {
        combine(&self.weights(k)?, &self.values)
    }

    /// `softargmax(⟨k, kᵢ⟩ / σ²)`, equal to the Gaussian weights when all keys
    /// and the query have unit norm.
    pub fn attention_weights(&self, k: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_len("query key", k.len(), self.keys[0].len())?;
        let s2 = self.sigma * self.sigma;
        let logits: Vec<f64> = self
            .keys
            .iter()
            .map(|ki| k.iter().zip(ki).map(|(a, b)| a * b).sum::<f64>() / s2)
            .collect();
        Ok(softargmax(&logits, 1.0))
    }
}

/// Gate `1[a ≤ x ≤ b]` smoothed comparison by comparison: `π_a π_b`.
pub fn gate_local(kind: SigmoidKind, x: f64, a: f64, b: f64, sigma: f64) -> f64 {
    let pa = soft_gt(kind, x, a, sigma);
    let pb = soft_lt(kind, x, b, sigma);
    tnorm(TNorm::Probabilistic, pa, pb).value()
}

/// Gate smoothed as a whole: `P(a ≤ x + σZ ≤ b) = π_b − π_a`.
pub fn gate_global(kind: SigmoidKind, x: f64, a: f64, b: f64, sigma: f64) -> f64 {
    kind.cdf(b - x, sigma) - kind.cdf(a - x, sigma)
}
