//! Chain-structured models with log-potentials `θ_{k,i,j}`: forward-backward,
//! Viterbi, semiring dynamic programming and marginals as gradients.
//!
//! Steps are 0-based. Step 0 starts from a single initial state and only uses
//! the row `θ_{0,0,·}`; step `k ≥ 1` scores the transition `i → j`.

use std::io::Read;

use crate::error::{Error, Result};
use crate::smooth::{logsumexp, softargmax};

#[derive(Clone, Debug, PartialEq)]
pub struct ChainPotentials {
    pub steps: usize,
    pub states: usize,
    theta: Vec<f64>,
}

impl ChainPotentials {
    pub fn new(steps: usize, states: usize, theta: Vec<f64>) -> Result<Self> {
        if steps == 0 || states == 0 {
            return Err(Error::InvalidArgument("K and M must be at least 1".into()));
        }
        crate::error::check_len("potentials", theta.len(), steps * states * states)?;
        if let Some(p) = theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("potential {p} is not finite")));
        }
        Ok(ChainPotentials { steps, states, theta })
    }

    pub fn from_fn(steps: usize, states: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut theta = Vec::with_capacity(steps * states * states);
        for k in 0..steps {
            for i in 0..states {
                for j in 0..states {
                    theta.push(f(k, i, j));
                }
            }
        }
        Self::new(steps, states, theta)
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.theta[(k * self.states + i) * self.states + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.theta
    }

    /// Read `k,i,j,value` rows (0-based indices, header required). Missing
    /// entries are zero; the shape is the largest index plus one.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 4 {
                return Err(Error::Csv(format!("line {line}: expected 4 fields, got {}", rec.len())));
            }
            let idx = |c: usize| -> Result<usize> {
                rec[c]
                    .parse()
                    .map_err(|_| Error::Csv(format!("line {line}: bad index `{}`", &rec[c])))
            };
            let v: f64 = rec[3]
                .parse()
                .map_err(|_| Error::Csv(format!("line {line}: bad value `{}`", &rec[3])))?;
            rows.push((idx(0)?, idx(1)?, idx(2)?, v));
        }
        if rows.is_empty() {
            return Err(Error::Csv("no potentials".into()));
        }
        let steps = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let states = rows.iter().map(|r| r.1.max(r.2)).max().unwrap() + 1;
        let mut theta = vec![0.0; steps * states * states];
        let mut seen = vec![false; theta.len()];
        for (k, i, j, v) in rows {
            let p = (k * states + i) * states + j;
            if seen[p] {
                return Err(Error::Csv(format!("duplicate entry ({k},{i},{j})")));
            }
            seen[p] = true;
            theta[p] = v;
        }
        Self::new(steps, states, theta)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "i", "j", "value"])?;
        for k in 0..self.steps {
            for i in 0..self.states {
                for j in 0..self.states {
                    w.write_record([k.to_string(), i.to_string(), j.to_string(), self.get(k, i, j).to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))
    }

    /// Score of a state path `(s_0, ..., s_{K-1})`.
    pub fn path_score(&self, path: &[usize]) -> f64 {
        assert_eq!(path.len(), self.steps);
        let mut s = self.get(0, 0, path[0]);
        for k in 1..self.steps {
            s += self.get(k, path[k - 1], path[k]);
        }
        s
    }

    /// One-hot pairwise encoding of a path, same layout as the potentials.
    pub fn path_encoding(&self, path: &[usize]) -> Vec<f64> {
        let mut e = vec![0.0; self.theta.len()];
        let m = self.states;
        e[path[0]] = 1.0;
        for k in 1..self.steps {
            e[(k * m + path[k - 1]) * m + path[k]] = 1.0;
        }
        e
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ChainPotentials {
            steps: self.steps,
            states: self.states,
            theta: self.theta.iter().map(|x| f(*x)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Semiring {
    /// `(+, ×)` on potentials `e^θ`.
    SumProduct,
    /// `(max, +)` on log-potentials.
    MaxPlus,
    /// `(max_ε, +)` with `max_ε(a, b) = ε log(e^{a/ε} + e^{b/ε})`.
    LogSumExp(f64),
}

impl Semiring {
    pub fn zero(self) -> f64 {
        match self {
            Semiring::SumProduct => 0.0,
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn one(self) -> f64 {
        match self {
            Semiring::SumProduct => 1.0,
            _ => 0.0,
        }
    }

    pub fn plus(self, a: f64, b: f64) -> f64 {
        match self {
            Semiring::SumProduct => a + b,
            Semiring::MaxPlus => a.max(b),
            Semiring::LogSumExp(eps) => {
                if a == f64::NEG_INFINITY {
                    return b;
                }
                if b == f64::NEG_INFINITY {
                    return a;
                }
                let m = a.max(b);
                m + eps * (-(a - b).abs() / eps).exp().ln_1p()
            }
        }
    }

    pub fn times(self, a: f64, b: f64) -> f64 {
        match self {
            Semiring::SumProduct => a * b,
            _ => a + b,
        }
    }

    /// Element representing the log-potential `θ`.
    pub fn lift(self, theta: f64) -> f64 {
        match self {
            Semiring::SumProduct => theta.exp(),
            _ => theta,
        }
    }

    pub fn sum(self, xs: impl IntoIterator<Item = f64>) -> f64 {
        xs.into_iter().fold(self.zero(), |acc, x| self.plus(acc, x))
    }
}

/// `⊕_{paths} ⊗_k θ_k(s_{k-1}, s_k)`: `Z` for sum-product, the best path score for
/// max-plus and `ε A(θ/ε)` for `LogSumExp(ε)`.
pub fn semiring_forward(theta: &ChainPotentials, sr: Semiring) -> f64 {
    let m = theta.states;
    let mut a: Vec<f64> = (0..m).map(|j| sr.lift(theta.get(0, 0, j))).collect();
    for k in 1..theta.steps {
        a = (0..m)
            .map(|j| sr.sum((0..m).map(|i| sr.times(sr.lift(theta.get(k, i, j)), a[i]))))
            .collect();
    }
    sr.sum(a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainPosterior {
    /// `log α_k(j)`, `K × M`.
    pub log_alpha: Vec<f64>,
    /// `log β_k(j)`, `K × M`.
    pub log_beta: Vec<f64>,
    /// `A = log Z` from the forward messages.
    pub log_partition: f64,
    /// `A` from the backward messages.
    pub log_partition_backward: f64,
    /// `P(S_k = j)`, `K × M`.
    pub unary: Vec<f64>,
    /// `P(S_{k-1} = i, S_k = j)`, `K × M × M`; step 0 uses row `i = 0`.
    pub pairwise: Vec<f64>,
    pub viterbi_path: Vec<usize>,
    pub viterbi_score: f64,
}

/// Log-domain forward-backward.
pub fn forward_backward(theta: &ChainPotentials) -> ChainPosterior {
    let (kk, m) = (theta.steps, theta.states);
    let mut la = vec![0.0; kk * m];
    for j in 0..m {
        la[j] = theta.get(0, 0, j);
    }
    for k in 1..kk {
        for j in 0..m {
            let terms: Vec<f64> = (0..m).map(|i| theta.get(k, i, j) + la[(k - 1) * m + i]).collect();
            la[k * m + j] = logsumexp(&terms, 1.0);
        }
    }
    let mut lb = vec![0.0; kk * m];
    for k in (0..kk - 1).rev() {
        for i in 0..m {
            let terms: Vec<f64> = (0..m).map(|j| theta.get(k + 1, i, j) + lb[(k + 1) * m + j]).collect();
            lb[k * m + i] = logsumexp(&terms, 1.0);
        }
    }
    let a = logsumexp(&la[(kk - 1) * m..], 1.0);
    let first: Vec<f64> = (0..m).map(|j| theta.get(0, 0, j) + lb[j]).collect();
    let a_back = logsumexp(&first, 1.0);
    let unary: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| (x + y - a).exp()).collect();
    let mut pairwise = vec![0.0; kk * m * m];
    pairwise[..m].copy_from_slice(&unary[..m]);
    for k in 1..kk {
        for i in 0..m {
            for j in 0..m {
                pairwise[(k * m + i) * m + j] =
                    (la[(k - 1) * m + i] + theta.get(k, i, j) + lb[k * m + j] - a).exp();
            }
        }
    }
    let (viterbi_path, viterbi_score) = viterbi(theta);
    ChainPosterior {
        log_alpha: la,
        log_beta: lb,
        log_partition: a,
        log_partition_backward: a_back,
        unary,
        pairwise,
        viterbi_path,
        viterbi_score,
    }
}

/// Highest-scoring path with backtracking; ties go to the lowest index.
pub fn viterbi(theta: &ChainPotentials) -> (Vec<usize>, f64) {
    let (kk, m) = (theta.steps, theta.states);
    let mut delta: Vec<f64> = (0..m).map(|j| theta.get(0, 0, j)).collect();
    let mut back = vec![0usize; kk * m];
    for k in 1..kk {
        let mut next = vec![0.0; m];
        for j in 0..m {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, d) in delta.iter().enumerate() {
                let s = theta.get(k, i, j) + d;
                if s > best.1 {
                    best = (i, s);
                }
            }
            back[k * m + j] = best.0;
            next[j] = best.1;
        }
        delta = next;
    }
    let mut last = 0;
    for j in 1..m {
        if delta[j] > delta[last] {
            last = j;
        }
    }
    let score = delta[last];
    let mut path = vec![last; kk];
    for k in (1..kk).rev() {
        path[k - 1] = back[k * m + path[k]];
    }
    (path, score)
}

/// `A_ε(θ) = max_ε` over paths and its gradient `μ = ∇A_ε(θ)`, computed by a
/// forward pass storing soft backpointers `q_{k,j} = argmax_ε` and a backward
/// pass `μ_{k,i,j} = r_{k,j} q_{k,j,i}`, `r_{k-1,i} = Σ_j μ_{k,i,j}`.
pub fn marginals_via_grad(theta: &ChainPotentials, eps: f64) -> Result<(f64, Vec<f64>)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("ε must be positive, got {eps}")));
    }
    let (kk, m) = (theta.steps, theta.states);
    let mut a: Vec<f64> = (0..m).map(|j| theta.get(0, 0, j)).collect();
    // q[k][j][i]
    let mut q = vec![0.0; kk * m * m];
    for k in 1..kk {
        let mut next = vec![0.0; m];
        for j in 0..m {
            let terms: Vec<f64> = (0..m).map(|i| theta.get(k, i, j) + a[i]).collect();
            next[j] = logsumexp(&terms, eps);
            q[(k * m + j) * m..(k * m + j + 1) * m].copy_from_slice(&softargmax(&terms, eps));
        }
        a = next;
    }
    let value = logsumexp(&a, eps);
    let mut r = softargmax(&a, eps);
    let mut mu = vec![0.0; kk * m * m];
    for k in (1..kk).rev() {
        let mut prev = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                let x = r[j] * q[(k * m + j) * m + i];
                mu[(k * m + i) * m + j] = x;
                prev[i] += x;
            }
        }
        r = prev;
    }
    mu[..m].copy_from_slice(&r);
    Ok((value, mu))
}

/// `A(θ)` at temperature `ε`, i.e. `ε A(θ/ε)`.
pub fn log_partition(theta: &ChainPotentials, eps: f64) -> f64 {
    if eps == 1.0 {
        return semiring_forward(theta, Semiring::LogSumExp(1.0));
    }
    eps * semiring_forward(&theta.map(|x| x / eps), Semiring::LogSumExp(1.0))
}
