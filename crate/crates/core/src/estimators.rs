//! Monte-Carlo gradient estimators.
//!
//! Sampling is deterministic given a seed: samples are drawn in fixed-size
//! batches, batch `b` using the ChaCha stream `b` of the seed, and reduced in
//! batch order.

use std::io::Write;

use rand::distr::Open01;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::smooth::softargmax;

pub type Rng = ChaCha8Rng;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const BATCH: usize = 1024;

/// Mean of per-sample terms with their empirical variance.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorReport {
    pub estimate: Vec<f64>,
    pub num_samples: usize,
    /// Per-coordinate sample variance of the per-sample terms.
    pub variance: Vec<f64>,
    pub seed: u64,
}

impl EstimatorReport {
    /// Standard error of each coordinate of the estimate.
    pub fn std_error(&self) -> Vec<f64> {
        let n = self.num_samples as f64;
        self.variance.iter().map(|v| (v / n).sqrt()).collect()
    }

    /// Sum of per-coordinate variances.
    pub fn total_variance(&self) -> f64 {
        self.variance.iter().sum()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = (0..self.estimate.len()).map(|i| format!("estimate_{i}")).collect();
        h.extend(["n".into(), "variance".into(), "seed".into()]);
        h
    }

    /// `estimate..., n, variance, seed`, with `variance` the total variance.
    pub fn csv_record(&self) -> Vec<String> {
        let mut r: Vec<String> = self.estimate.iter().map(|x| x.to_string()).collect();
        r.push(self.num_samples.to_string());
        r.push(self.total_variance().to_string());
        r.push(self.seed.to_string());
        r
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        w.write_record(self.csv_record())?;
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("number of samples must be positive".into()));
    }
    Ok(())
}

pub(crate) fn batch_rng(seed: u64, batch: usize) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    rng
}

/// Draw `n` values with `draw`, in seeded batches.
pub fn sample_stream<T>(seed: u64, n: usize, mut draw: impl FnMut(&mut Rng) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    let mut batch = 0;
    while out.len() < n {
        let mut rng = batch_rng(seed, batch);
        let take = BATCH.min(n - out.len());
        for _ in 0..take {
            out.push(draw(&mut rng));
        }
        batch += 1;
    }
    out
}

/// Average `n` per-sample vectors produced by `term`, tracking variance.
pub fn monte_carlo<F>(seed: u64, n: usize, mut term: F) -> Result<EstimatorReport>
where
    F: FnMut(&mut Rng) -> Result<Vec<f64>>,
{
    check_samples(n)?;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    let mut count = 0usize;
    let mut batch = 0;
    while count < n {
        let mut rng = batch_rng(seed, batch);
        let take = BATCH.min(n - count);
        for _ in 0..take {
            let x = term(&mut rng)?;
            if count == 0 {
                mean = vec![0.0; x.len()];
                m2 = vec![0.0; x.len()];
            }
            check_len("per-sample estimate", x.len(), mean.len())?;
            count += 1;
            for i in 0..x.len() {
                let d = x[i] - mean[i];
                mean[i] += d / count as f64;
                m2[i] += d * (x[i] - mean[i]);
            }
        }
        batch += 1;
    }
    let variance = if n > 1 {
        m2.iter().map(|v| v / (n - 1) as f64).collect()
    } else {
        vec![0.0; mean.len()]
    };
    Ok(EstimatorReport {
        estimate: mean,
        num_samples: n,
        variance,
        seed,
    })
}

/// Base noise distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseModel {
    /// Standard normal.
    Gaussian,
    /// Standard Gumbel shifted to zero mean.
    GumbelShifted,
    /// Uniform on (0, 1).
    Uniform,
    /// Standard logistic.
    Logistic,
}

impl NoiseModel {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            NoiseModel::Gaussian => StandardNormal.sample(rng),
            NoiseModel::GumbelShifted => {
                let u: f64 = rng.sample(Open01);
                -(-u.ln()).ln() - EULER_GAMMA
            }
            NoiseModel::Uniform => rng.sample(Open01),
            NoiseModel::Logistic => {
                let u: f64 = rng.sample(Open01);
                (u / (1.0 - u)).ln()
            }
        }
    }

    pub fn sample_vec(&self, rng: &mut Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.sample(rng)).collect()
    }

    /// Negative log-density up to an additive constant.
    pub fn nu(&self, z: f64) -> f64 {
        match self {
            NoiseModel::Gaussian => 0.5 * z * z,
            NoiseModel::GumbelShifted => {
                let g = z + EULER_GAMMA;
                g + (-g).exp()
            }
            NoiseModel::Uniform => 0.0,
            NoiseModel::Logistic => z + 2.0 * crate::scalar::softplus(&-z),
        }
    }

    pub fn nu_grad(&self, z: f64) -> f64 {
        match self {
            NoiseModel::Gaussian => z,
            NoiseModel::GumbelShifted => 1.0 - (-(z + EULER_GAMMA)).exp(),
            NoiseModel::Uniform => 0.0,
            NoiseModel::Logistic => (0.5 * z).tanh(),
        }
    }
}

/// Baseline subtracted from `g` in the score-function estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    None,
    Constant(f64),
    /// Mean of `g` over the previous samples (0 for the first).
    RunningMean,
}

/// `h` with known `∇_θ E[h(Y)]`, used as `(g - γ h) ∇log p + γ ∇E[h]`.
pub struct ControlVariate<'a, Y> {
    pub h: &'a dyn Fn(&Y) -> f64,
    pub expected_grad: Vec<f64>,
    pub weight: f64,
}

pub struct SfeOptions<'a, Y> {
    pub baseline: Baseline,
    pub control_variate: Option<ControlVariate<'a, Y>>,
}

impl<Y> Default for SfeOptions<'_, Y> {
    fn default() -> Self {
        SfeOptions {
            baseline: Baseline::None,
            control_variate: None,
        }
    }
}

/// Score-function estimate of `∇_θ E_{Y~p_θ}[g(Y)]`.
pub fn sfe_gradient<Y>(
    sampler: impl Fn(&[f64], &mut Rng) -> Y,
    logp_grad: impl Fn(&[f64], &Y) -> Vec<f64>,
    g: impl Fn(&Y) -> f64,
    theta: &[f64],
    n: usize,
    seed: u64,
    options: &SfeOptions<'_, Y>,
) -> Result<EstimatorReport> {
    if let Some(cv) = &options.control_variate {
        check_len("control variate gradient", cv.expected_grad.len(), theta.len())?;
    }
    let mut g_sum = 0.0;
    let mut seen = 0usize;
    monte_carlo(seed, n, |rng| {
        let y = sampler(theta, rng);
        let gy = g(&y);
        let beta = match options.baseline {
            Baseline::None => 0.0,
            Baseline::Constant(b) => b,
            Baseline::RunningMean if seen == 0 => 0.0,
            Baseline::RunningMean => g_sum / seen as f64,
        };
        g_sum += gy;
        seen += 1;
        let score = logp_grad(theta, &y);
        check_len("score", score.len(), theta.len())?;
        let mut coef = gy - beta;
        if let Some(cv) = &options.control_variate {
            coef -= cv.weight * (cv.h)(&y);
        }
        let mut term: Vec<f64> = score.iter().map(|s| coef * s).collect();
        if let Some(cv) = &options.control_variate {
            for (t, e) in term.iter_mut().zip(&cv.expected_grad) {
                *t += cv.weight * e;
            }
        }
        Ok(term)
    })
}

/// Draw an index from a probability vector by inverting its CDF.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut c = 0.0;
    for (i, p) in probs.iter().enumerate() {
        c += p;
        if u < c {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Sampler for `Categorical(softargmax(θ))`.
pub fn categorical_sampler(theta: &[f64], rng: &mut Rng) -> usize {
    sample_categorical(&softargmax(theta, 1.0), rng)
}

/// `∇_θ log softargmax(θ)_y = e_y - softargmax(θ)`.
pub fn categorical_score(theta: &[f64], y: &usize) -> Vec<f64> {
    let mut s: Vec<f64> = softargmax(theta, 1.0).iter().map(|p| -p).collect();
    s[*y] += 1.0;
    s
}

/// A sampling path `y = T(z, θ)` differentiable in `θ`.
pub trait Transform {
    fn noise_dim(&self, theta: &[f64]) -> Result<usize>;
    fn apply(&self, z: &[f64], theta: &[f64]) -> Vec<f64>;
    /// `∂₂T(z, θ)*[u]`
    fn vjp_theta(&self, z: &[f64], theta: &[f64], u: &[f64]) -> Vec<f64>;
}

/// `y = μ + σ ⊙ z` with `θ = (μ, σ)`.
pub struct LocationScale;

impl Transform for LocationScale {
    fn noise_dim(&self, theta: &[f64]) -> Result<usize> {
        if !theta.len().is_multiple_of(2) || theta.is_empty() {
            return Err(Error::Dimension(
                "location-scale parameters must be (μ, σ) of equal length".into(),
            ));
        }
        Ok(theta.len() / 2)
    }

    fn apply(&self, z: &[f64], theta: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..d).map(|i| theta[i] + theta[d + i] * z[i]).collect()
    }

    fn vjp_theta(&self, z: &[f64], _theta: &[f64], u: &[f64]) -> Vec<f64> {
        let mut g = u.to_vec();
        g.extend(u.iter().zip(z).map(|(ui, zi)| ui * zi));
        g
    }
}

/// Pathwise estimate of `∇_θ E[g(T(Z, θ))]`.
pub fn reparam_gradient(
    transform: &dyn Transform,
    grad_g: impl Fn(&[f64]) -> Vec<f64>,
    noise: NoiseModel,
    theta: &[f64],
    n: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    let d = transform.noise_dim(theta)?;
    monte_carlo(seed, n, |rng| {
        let z = noise.sample_vec(rng, d);
        let y = transform.apply(&z, theta);
        Ok(transform.vjp_theta(&z, theta, &grad_g(&y)))
    })
}

/// `Q(U, θ)` for `U ~ Uniform(0, 1)`.
pub fn inverse_transform_sample(
    quantile: impl Fn(f64, &[f64]) -> f64,
    theta: &[f64],
    n: usize,
    seed: u64,
) -> Vec<f64> {
    sample_stream(seed, n, |rng| quantile(rng.sample(Open01), theta))
}

/// Quantile of `Exponential(λ)`, `θ = (λ)`.
pub fn exponential_quantile(pi: f64, theta: &[f64]) -> f64 {
    -(1.0 - pi).ln() / theta[0]
}

/// Quantile of `N(μ, σ²)`, `θ = (μ, σ)`.
pub fn gaussian_quantile(pi: f64, theta: &[f64]) -> f64 {
    theta[0] + theta[1] * std::f64::consts::SQRT_2 * statrs::function::erf::erf_inv(2.0 * pi - 1.0)
}

/// Zero-mean Gumbel samples `-log(-log U) - γ`.
pub fn gumbel_sample(n: usize, seed: u64) -> Vec<f64> {
    sample_stream(seed, n, |rng| NoiseModel::GumbelShifted.sample(rng))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("σ must be positive, got {sigma}")));
    }
    Ok(())
}

fn perturbed(mu: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    mu.iter()
        .map(|m| m + sigma * NoiseModel::GumbelShifted.sample(rng))
        .collect()
}

/// Mean of `onehot(argmax(μ + σZ))` under Gumbel noise.
pub fn perturbed_argmax_expectation(mu: &[f64], sigma: f64, n: usize, seed: u64) -> Result<EstimatorReport> {
    check_sigma(sigma)?;
    monte_carlo(seed, n, |rng| {
        let u = perturbed(mu, sigma, rng);
        let mut e = vec![0.0; mu.len()];
        e[crate::graph::argmax_re(&u)] = 1.0;
        Ok(e)
    })
}

/// Mean of `max(μ + σZ)` under zero-mean Gumbel noise.
pub fn perturbed_max_expectation(mu: &[f64], sigma: f64, n: usize, seed: u64) -> Result<EstimatorReport> {
    check_sigma(sigma)?;
    monte_carlo(seed, n, |rng| {
        let u = perturbed(mu, sigma, rng);
        Ok(vec![u.iter().cloned().fold(f64::NEG_INFINITY, f64::max)])
    })
}

/// Mean of `[μ₁ + σZ₁ > μ₂ + σZ₂]` under Gumbel noise.
pub fn perturbed_gt(mu1: f64, mu2: f64, sigma: f64, n: usize, seed: u64) -> Result<EstimatorReport> {
    check_sigma(sigma)?;
    monte_carlo(seed, n, |rng| {
        let u = perturbed(&[mu1, mu2], sigma, rng);
        Ok(vec![if u[0] > u[1] { 1.0 } else { 0.0 }])
    })
}

/// Softargmax of Gumbel-perturbed logits.
pub fn gumbel_softargmax(mu: &[f64], temperature: f64, rng: &mut Rng) -> Vec<f64> {
    softargmax(&perturbed(mu, 1.0, rng), temperature)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EsScheme {
    Vanilla,
    ForwardDiff,
    CentralDiff,
}

/// Gaussian-smoothing gradient estimate of `∇ E[f(μ + σZ)]` from function values only.
pub fn es_gradient(
    f: impl Fn(&[f64]) -> f64,
    mu: &[f64],
    sigma: f64,
    n: usize,
    seed: u64,
    scheme: EsScheme,
) -> Result<EstimatorReport> {
    check_sigma(sigma)?;
    let f_mu = f(mu);
    monte_carlo(seed, n, |rng| {
        let z = NoiseModel::Gaussian.sample_vec(rng, mu.len());
        let plus: Vec<f64> = mu.iter().zip(&z).map(|(m, zi)| m + sigma * zi).collect();
        let coef = match scheme {
            EsScheme::Vanilla => f(&plus) / sigma,
            EsScheme::ForwardDiff => (f(&plus) - f_mu) / sigma,
            EsScheme::CentralDiff => {
                let minus: Vec<f64> = mu.iter().zip(&z).map(|(m, zi)| m - sigma * zi).collect();
                (f(&plus) - f(&minus)) / (2.0 * sigma)
            }
        };
        Ok(z.iter().map(|zi| coef * NoiseModel::Gaussian.nu_grad(*zi)).collect())
    })
}

/// Mean of `⟨∇f(μ + σZ), Z⟩ Z`; `σ = 0` is the forward-gradient limit.
pub fn stein_gradient(
    grad_f: impl Fn(&[f64]) -> Vec<f64>,
    mu: &[f64],
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<EstimatorReport> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument("σ must be non-negative".into()));
    }
    monte_carlo(seed, n, |rng| {
        let z = NoiseModel::Gaussian.sample_vec(rng, mu.len());
        let x: Vec<f64> = mu.iter().zip(&z).map(|(m, zi)| m + sigma * zi).collect();
        let d = crate::linalg::dot(&grad_f(&x), &z);
        Ok(z.iter().map(|zi| d * zi).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(gumbel_sample(3000, 9), gumbel_sample(3000, 9));
        assert_ne!(gumbel_sample(10, 9), gumbel_sample(10, 10));
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(monte_carlo(0, 0, |_| Ok(vec![1.0])).is_err());
    }

    #[test]
    fn variance_of_constant_terms_is_zero() {
        let r = monte_carlo(1, 50, |_| Ok(vec![2.0, -1.0])).unwrap();
        assert_eq!(r.estimate, vec![2.0, -1.0]);
        assert_eq!(r.variance, vec![0.0, 0.0]);
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = sample_stream(4, 3000, |rng| NoiseModel::Logistic.sample(rng));
        let mut i = 0;
        let r = monte_carlo(4, 3000, |_| {
            i += 1;
            Ok(vec![xs[i - 1]])
        })
        .unwrap();
        let m = xs.iter().sum::<f64>() / 3000.0;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 2999.0;
        assert!((r.estimate[0] - m).abs() < 1e-12);
        assert!((r.variance[0] - v).abs() < 1e-9);
    }

    #[test]
    fn noise_gradients_match_finite_differences() {
        for nm in [NoiseModel::Gaussian, NoiseModel::GumbelShifted, NoiseModel::Logistic] {
            for z in [-1.3, 0.2, 2.1] {
                let h = 1e-6;
                let fd = (nm.nu(z + h) - nm.nu(z - h)) / (2.0 * h);
                assert!((fd - nm.nu_grad(z)).abs() < 1e-7, "{nm:?}");
            }
        }
    }

    #[test]
    fn csv_row_layout() {
        let r = EstimatorReport {
            estimate: vec![1.5, 2.0],
            num_samples: 10,
            variance: vec![0.25, 0.5],
            seed: 3,
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "estimate_0,estimate_1,n,variance,seed\n1.5,2,10,0.75,3\n"
        );
    }

    #[test]
    fn linear_es_differences_cancel_the_offset() {
        // for linear f both difference schemes reduce to <a,z> z sample by sample
        let a = [1.0, -2.0];
        let f = |u: &[f64]| 5.0 + a[0] * u[0] + a[1] * u[1];
        let mu = [0.3, 0.4];
        let fwd = es_gradient(f, &mu, 0.5, 500, 1, EsScheme::ForwardDiff).unwrap();
        let cen = es_gradient(f, &mu, 0.5, 500, 1, EsScheme::CentralDiff).unwrap();
        let van = es_gradient(f, &mu, 0.5, 500, 1, EsScheme::Vanilla).unwrap();
        for i in 0..2 {
            assert!((fwd.estimate[i] - cen.estimate[i]).abs() < 1e-12);
            assert!((fwd.variance[i] - cen.variance[i]).abs() < 1e-9);
        }
        assert!(van.total_variance() > cen.total_variance());
    }
}
