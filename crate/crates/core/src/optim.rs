//! First- and second-order optimizers sharing one state type.
//!
//! Step functions take a state and return the next one. Second-order steps
//! solve their linear systems matrix-free with CG and raise the damping
//! `η ← max(2η, 1e-8)` whenever CG fails.

use std::cell::Cell;
use std::collections::VecDeque;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{value_and_gradient_flat, vjp_flat};
use crate::error::{check_len, Error, Result};
use crate::estimators::{batch_rng, sample_categorical, sample_stream};
use crate::graph::Graph;
use crate::implicit::{solve_linear, SolveMethod};
use crate::linalg::{axpy, dot, norm2, Matrix};
use crate::linear_map::{symmetric, LinearMap, Shifted};
use crate::second_order::{hvp, CategoricalModel, GaussNewtonOracle, HvpMethod};
use crate::smooth::{simplex_project, ProxOracle};

/// A differentiable objective `L(w)`.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> Result<f64>;
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>>;
    fn hvp(&self, _w: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported("objective has no Hessian-vector product".into()))
    }
}

/// A scalar-output graph as an objective.
pub struct GraphObjective<'a> {
    graph: &'a Graph,
}

impl<'a> GraphObjective<'a> {
    pub fn new(graph: &'a Graph) -> Result<Self> {
        if crate::graph::numel(graph.output_shape()) != 1 {
            return Err(Error::NotScalar(graph.output_shape().to_vec()));
        }
        Ok(GraphObjective { graph })
    }
}

impl Objective for GraphObjective<'_> {
    fn dim(&self) -> usize {
        self.graph.input_dim()
    }
    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(self.graph.eval_flat(w)?.data()[0])
    }
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(value_and_gradient_flat(self.graph, w)?.1)
    }
    fn hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        hvp(self.graph, w, v, HvpMethod::FwdOnRev)
    }
}

/// Adds seeded Gaussian noise of standard deviation `noise` to every gradient
/// call. Call `i` draws from stream `i` of `seed`.
pub struct NoisyGradient<'a> {
    pub inner: &'a dyn Objective,
    pub noise: f64,
    pub seed: u64,
    calls: Cell<u64>,
}

impl<'a> NoisyGradient<'a> {
    pub fn new(inner: &'a dyn Objective, noise: f64, seed: u64) -> Self {
        NoisyGradient {
            inner,
            noise,
            seed,
            calls: Cell::new(0),
        }
    }
}

impl Objective for NoisyGradient<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, w: &[f64]) -> Result<f64> {
        self.inner.value(w)
    }
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.inner.gradient(w)?;
        let i = self.calls.get();
        self.calls.set(i + 1);
        let mut rng = batch_rng(self.seed, i as usize);
        for gi in &mut g {
            let z: f64 = StandardNormal.sample(&mut rng);
            *gi += self.noise * z;
        }
        Ok(g)
    }
    fn hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.inner.hvp(w, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineSearch {
    /// Step of length `γ`.
    Fixed,
    /// Backtracking from `γ` with `c = 1e-4`, `ρ = 0.5`.
    Armijo,
    /// Weak Wolfe conditions by bracketing and bisection, `c₁ = 1e-4`,
    /// `c₂ = 0.9`. Keeps LBFGS curvature pairs positive on non-convex problems.
    Wolfe,
    /// Minimizer along the direction of the local quadratic model, from one HVP.
    /// Exact on quadratics.
    Exact,
}

pub const ARMIJO_C: f64 = 1e-4;
pub const ARMIJO_RHO: f64 = 0.5;
pub const WOLFE_C2: f64 = 0.9;
/// Curvature pairs with `⟨s, y⟩` at or below this are dropped.
pub const CURVATURE_EPS: f64 = 1e-12;
const MAX_ESCALATIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    /// `γ`
    pub stepsize: f64,
    /// `ν` for heavy-ball and Nesterov.
    pub momentum: f64,
    /// Adam `ν₁`.
    pub beta1: f64,
    /// Adam `ν₂`.
    pub beta2: f64,
    /// Adam `ε`, added under the square root.
    pub eps: f64,
    /// Initial damping `η`.
    pub damping: f64,
    /// LBFGS history length `m`.
    pub history: usize,
    pub linesearch: LineSearch,
    /// Relative residual for inner CG solves.
    pub cg_tol: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            stepsize: 0.1,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            damping: 0.0,
            history: 10,
            linesearch: LineSearch::Fixed,
            cg_tol: 1e-12,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.stepsize > 0.0) {
            return bad("stepsize γ must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum ν must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam ν₁, ν₂ must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("Adam ε must be positive");
        }
        if !(self.damping >= 0.0) {
            return bad("damping η must be non-negative");
        }
        if self.history == 0 {
            return bad("LBFGS history must be at least 1");
        }
        if !(self.cg_tol > 0.0) {
            return bad("CG tolerance must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    /// `1 / ⟨s, y⟩`
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub w: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Adam first moment.
    pub m: Vec<f64>,
    /// Adam second moment.
    pub v: Vec<f64>,
    /// Steps taken.
    pub t: usize,
    /// Current damping, after any escalation.
    pub damping: f64,
    /// Oldest first.
    pub pairs: VecDeque<CurvaturePair>,
    pub rejected_pairs: usize,
}

impl OptState {
    pub fn new(w: Vec<f64>, config: &StepConfig) -> Self {
        let n = w.len();
        OptState {
            w,
            velocity: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            damping: config.damping,
            pairs: VecDeque::new(),
            rejected_pairs: 0,
        }
    }

    fn advanced(&self, w: Vec<f64>) -> OptState {
        let mut next = self.clone();
        next.w = w;
        next.t += 1;
        next
    }
}

fn grad_checked(obj: &dyn Objective, w: &[f64]) -> Result<Vec<f64>> {
    let g = obj.gradient(w)?;
    check_len("gradient", g.len(), w.len())?;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("gradient is not finite".into()));
    }
    Ok(g)
}

fn begin(state: &OptState, obj: &dyn Objective, config: &StepConfig) -> Result<Vec<f64>> {
    config.validate()?;
    check_len("iterate", state.w.len(), obj.dim())?;
    grad_checked(obj, &state.w)
}

/// `w - γ∇L(w)`
pub fn gd_step(state: &OptState, obj: &dyn Objective, config: &StepConfig) -> Result<OptState> {
    let g = begin(state, obj, config)?;
    let mut w = state.w.clone();
    axpy(-config.stepsize, &g, &mut w);
    Ok(state.advanced(w))
}

/// `v ← νv - γ∇L(w)`, `w ← w + v`
pub fn heavyball_step(state: &OptState, obj: &dyn Objective, config: &StepConfig) -> Result<OptState> {
    let g = begin(state, obj, config)?;
    let v: Vec<f64> = state
        .velocity
        .iter()
        .zip(&g)
        .map(|(v, g)| config.momentum * v - config.stepsize * g)
        .collect();
    let w = crate::linalg::add(&state.w, &v);
    let mut next = state.advanced(w);
    next.velocity = v;
    Ok(next)
}

/// Heavy-ball with the gradient taken at the look-ahead point `w + νv`.
pub fn nesterov_step(state: &OptState, obj: &dyn Objective, config: &StepConfig) -> Result<OptState> {
    config.validate()?;
    check_len("iterate", state.w.len(), obj.dim())?;
    let mut ahead = state.w.clone();
    axpy(config.momentum, &state.velocity, &mut ahead);
    let g = grad_checked(obj, &ahead)?;
    let v: Vec<f64> = state
        .velocity
        .iter()
        .zip(&g)
        .map(|(v, g)| config.momentum * v - config.stepsize * g)
        .collect();
    let w = crate::linalg::add(&state.w, &v);
    let mut next = state.advanced(w);
    next.velocity = v;
    Ok(next)
}

/// Adam with bias correction by `1 - ν^t`, `t` counting from 1.
pub fn adam_step(state: &OptState, obj: &dyn Objective, config: &StepConfig) -> Result<OptState> {
    let g = begin(state, obj, config)?;
    let t = state.t as i32 + 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let m: Vec<f64> = state.m.iter().zip(&g).map(|(m, g)| b1 * m + (1.0 - b1) * g).collect();
    let v: Vec<f64> = state.v.iter().zip(&g).map(|(v, g)| b2 * v + (1.0 - b2) * g * g).collect();
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let w: Vec<f64> = state
        .w
        .iter()
        .zip(m.iter().zip(&v))
        .map(|(w, (m, v))| w - config.stepsize * (m / c1) / (v / c2 + config.eps).sqrt())
        .collect();
    let mut next = state.advanced(w);
    next.m = m;
    next.v = v;
    Ok(next)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    None,
    Box { lo: f64, hi: f64 },
    Simplex,
    Nonneg,
}

impl Projection {
    pub fn apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            Projection::None => w.to_vec(),
            Projection::Box { lo, hi } => {
                if !(lo <= hi) {
                    return Err(Error::InvalidArgument(format!("empty box [{lo}, {hi}]")));
                }
                w.iter().map(|x| x.clamp(*lo, *hi)).collect()
            }
            Projection::Simplex => simplex_project(w),
            Projection::Nonneg => w.iter().map(|x| x.max(0.0)).collect(),
        })
    }

    pub fn contains(&self, w: &[f64], tol: f64) -> bool {
        match self {
            Projection::None => true,
            Projection::Box { lo, hi } => w.iter().all(|x| *x >= lo - tol && *x <= hi + tol),
            Projection::Simplex => {
                w.iter().all(|x| *x >= -tol) && (w.iter().sum::<f64>() - 1.0).abs() <= tol
            }
            Projection::Nonneg => w.iter().all(|x| *x >= -tol),
        }
    }
}

impl std::str::FromStr for Projection {
    type Err = Error;
    /// `none`, `simplex`, `nonneg` or `box:LO:HI`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Projection::None),
            "simplex" => Ok(Projection::Simplex),
            "nonneg" => Ok(Projection::Nonneg),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                if parts.len() == 3 && parts[0] == "box" {
                    let lo = parts[1].parse().map_err(|_| Error::InvalidArgument(format!("bad box bound {}", parts[1])))?;
                    let hi = parts[2].parse().map_err(|_| Error::InvalidArgument(format!("bad box bound {}", parts[2])))?;
                    Ok(Projection::Box { lo, hi })
                } else {
                    Err(Error::InvalidArgument(format!(
                        "unknown projection {s:?}; expected none, simplex, nonneg or box:LO:HI"
                    )))
                }
            }
        }
    }
}

/// `proj_C(w - γ∇L(w))`
pub fn projected_step(
    state: &OptState,
    obj: &dyn Objective,
    projection: &Projection,
    config: &StepConfig,
) -> Result<OptState> {
    let g = begin(state, obj, config)?;
    let mut w = state.w.clone();
    axpy(-config.stepsize, &g, &mut w);
    Ok(state.advanced(projection.apply(&w)?))
}

/// `prox_{γλΩ}(w - γ∇L(w))` for the penalty `λΩ` in `prox`.
pub fn prox_step(state: &OptState, obj: &dyn Objective, prox: &ProxOracle, config: &StepConfig) -> Result<OptState> {
    let g = begin(state, obj, config)?;
    let mut w = state.w.clone();
    axpy(-config.stepsize, &g, &mut w);
    let scaled = ProxOracle {
        tag: prox.tag.clone(),
        lambda: prox.lambda * config.stepsize,
    };
    Ok(state.advanced(scaled.prox(&w)?))
}

/// Solve `(A + ηI) d = b` by CG, doubling `η` (from at least 1e-8) until CG
/// succeeds. Returns the solution and the damping used.
pub fn damped_solve(a: &dyn LinearMap, b: &[f64], damping: f64, tol: f64) -> Result<(Vec<f64>, f64)> {
    let mut eta = damping;
    let mut last = None;
    for _ in 0..MAX_ESCALATIONS {
        let op = Shifted { inner: a, shift: eta };
        match solve_linear(&op, b, tol, SolveMethod::Cg) {
            Ok(s) => return Ok((s.solution, eta)),
            Err(e @ (Error::Indefinite { .. } | Error::NotConverged { .. })) => {
                last = Some(e);
                eta = (2.0 * eta).max(1e-8);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Largest `t = γρ^j` with `L(w + t d) ≤ L(w) + c t ⟨∇L(w), d⟩`.
pub fn armijo(obj: &dyn Objective, w: &[f64], value: f64, g: &[f64], d: &[f64], t0: f64) -> Result<f64> {
    let slope = dot(g, d);
    if !(slope < 0.0) {
        return Err(Error::InvalidArgument(format!("not a descent direction: ⟨∇L, d⟩ = {slope:e}")));
    }
    let mut t = t0;
    for _ in 0..100 {
        let mut x = w.to_vec();
        axpy(t, d, &mut x);
        let fx = obj.value(&x).unwrap_or(f64::INFINITY);
        if fx <= value + ARMIJO_C * t * slope {
            return Ok(t);
        }
        t *= ARMIJO_RHO;
    }
    Ok(t)
}

/// A step satisfying the weak Wolfe conditions, starting from `t0`.
pub fn wolfe(obj: &dyn Objective, w: &[f64], value: f64, g: &[f64], d: &[f64], t0: f64) -> Result<f64> {
    let slope = dot(g, d);
    if !(slope < 0.0) {
        return Err(Error::InvalidArgument(format!("not a descent direction: ⟨∇L, d⟩ = {slope:e}")));
    }
    let (mut lo, mut hi, mut t) = (0.0, f64::INFINITY, t0);
    for _ in 0..100 {
        let mut x = w.to_vec();
        axpy(t, d, &mut x);
        let fx = obj.value(&x).unwrap_or(f64::INFINITY);
        if !(fx <= value + ARMIJO_C * t * slope) {
            hi = t;
        } else if dot(&grad_checked(obj, &x)?, d) < WOLFE_C2 * slope {
            lo = t;
        } else {
            return Ok(t);
        }
        t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo };
    }
    Ok(if lo > 0.0 { lo } else { t })
}

fn step_length(obj: &dyn Objective, w: &[f64], g: &[f64], d: &[f64], config: &StepConfig) -> Result<f64> {
    match config.linesearch {
        LineSearch::Fixed => Ok(config.stepsize),
        LineSearch::Armijo => armijo(obj, w, obj.value(w)?, g, d, config.stepsize),
        LineSearch::Wolfe => wolfe(obj, w, obj.value(w)?, g, d, config.stepsize),
        LineSearch::Exact => {
            let hd = obj.hvp(w, d)?;
            let curv = dot(d, &hd);
            if !(curv > 0.0) {
                return Err(Error::Indefinite {
                    iteration: 0,
                    curvature: curv,
                    advice: "exact line search needs positive curvature along the direction".into(),
                });
            }
            Ok(-dot(g, d) / curv)
        }
    }
}

/// Damped Newton: `d = -(∇²L + ηI)⁻¹∇L`, `w ← w + t d`.
pub fn newton_step(state: &OptState, obj: &dyn Objective, config: &StepConfig) -> Result<OptState> {
    let g = begin(state, obj, config)?;
    let w = state.w.clone();
    let hess = symmetric(w.len(), |v: &[f64]| obj.hvp(&w, v).expect("Hessian-vector product"));
    obj.hvp(&w, &g)?;
    let (sol, eta) = damped_solve(&hess, &g, state.damping, config.cg_tol)?;
    let d: Vec<f64> = sol.iter().map(|x| -x).collect();
    let t = step_length(obj, &w, &g, &d, config)?;
    let mut x = w.clone();
    axpy(t, &d, &mut x);
    let mut next = state.advanced(x);
    next.damping = eta;
    Ok(next)
}

/// `L(w) = ℓ(f(w))` with a vector-valued graph `f` and scalar graph `ℓ`.
pub struct Composite<'a> {
    pub inner: &'a Graph,
    pub outer: &'a Graph,
}

impl Objective for Composite<'_> {
    fn dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn value(&self, w: &[f64]) -> Result<f64> {
        let z = self.inner.eval_flat(w)?.into_data();
        Ok(self.outer.eval_flat(&z)?.data()[0])
    }
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let z = self.inner.eval_flat(w)?.into_data();
        let (_, q) = value_and_gradient_flat(self.outer, &z)?;
        vjp_flat(self.inner, w, &q)
    }
}

/// Gauss-Newton direction `(J* Q J + ηI)⁻¹ J* q` and the damping used.
pub fn gauss_newton_direction(model: &Composite, w: &[f64], damping: f64, tol: f64) -> Result<(Vec<f64>, f64)> {
    let g = model.gradient(w)?;
    let gn = GaussNewtonOracle::new(model.inner, model.outer, w)?;
    damped_solve(&gn, &g, damping, tol)
}

/// `w ← w - t (J* Q J + ηI)⁻¹ J* q` (Levenberg-Marquardt when `η > 0`).
pub fn gauss_newton_step(state: &OptState, model: &Composite, config: &StepConfig) -> Result<OptState> {
    let g = begin(state, model, config)?;
    let (sol, eta) = gauss_newton_direction(model, &state.w, state.damping, config.cg_tol)?;
    let d: Vec<f64> = sol.iter().map(|x| -x).collect();
    let t = match config.linesearch {
        LineSearch::Armijo => armijo(model, &state.w, model.value(&state.w)?, &g, &d, config.stepsize)?,
        LineSearch::Wolfe => wolfe(model, &state.w, model.value(&state.w)?, &g, &d, config.stepsize)?,
        _ => config.stepsize,
    };
    let mut x = state.w.clone();
    axpy(t, &d, &mut x);
    let mut next = state.advanced(x);
    next.damping = eta;
    Ok(next)
}

/// `H v` for the LBFGS inverse-Hessian approximation by the two-loop
/// recursion, with initial scaling `⟨s, y⟩ / ⟨y, y⟩` from the newest pair.
pub fn lbfgs_inverse_apply(pairs: &VecDeque<CurvaturePair>, v: &[f64]) -> Vec<f64> {
    let mut q = v.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        axpy(-a, &p.y, &mut q);
        alphas.push(a);
    }
    let gamma0 = pairs.back().map_or(1.0, |p| 1.0 / (p.rho * dot(&p.y, &p.y)));
    let mut r: Vec<f64> = q.iter().map(|x| gamma0 * x).collect();
    for (p, a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &r);
        axpy(a - b, &p.s, &mut r);
    }
    r
}

/// One LBFGS iteration. A direction that fails to descend resets the history
/// and falls back to `-∇L`.
pub fn lbfgs_step(state: &OptState, obj: &dyn Objective, config: &StepConfig) -> Result<OptState> {
    let g = begin(state, obj, config)?;
    let mut pairs = state.pairs.clone();
    let mut d: Vec<f64> = lbfgs_inverse_apply(&pairs, &g).iter().map(|x| -x).collect();
    if !(dot(&d, &g) < 0.0) {
        pairs.clear();
        d = g.iter().map(|x| -x).collect();
    }
    let t = step_length(obj, &state.w, &g, &d, config)?;
    let mut x = state.w.clone();
    axpy(t, &d, &mut x);
    let g_new = grad_checked(obj, &x)?;
    let s = crate::linalg::sub(&x, &state.w);
    let y = crate::linalg::sub(&g_new, &g);
    let sy = dot(&s, &y);
    let mut next = state.advanced(x);
    if sy > CURVATURE_EPS {
        pairs.push_back(CurvaturePair { s, y, rho: 1.0 / sy });
        while pairs.len() > config.history {
            pairs.pop_front();
        }
    } else {
        next.rejected_pairs += 1;
    }
    next.pairs = pairs;
    Ok(next)
}

/// Negative log-likelihood `-log softargmax(f(w))_y` of an observed label.
pub struct CategoricalNll<'a> {
    pub logits: &'a Graph,
    pub label: usize,
}

impl CategoricalNll<'_> {
    /// The same loss as a [`Composite`] with `ℓ(θ) = logsumexp(θ) - θ_y`.
    pub fn outer_graph(&self) -> Result<Graph> {
        use crate::graph::{GraphBuilder, Reduction, Unary};
        let m = crate::graph::numel(self.logits.output_shape());
        let mut b = GraphBuilder::new();
        let th = b.input(&[m]);
        let lse = b.reduce(Reduction::LogSumExp, th);
        let pick = b.slice(th, self.label, 1);
        let pick = b.reduce(Reduction::Sum, pick);
        let neg = b.unary(Unary::Neg, pick);
        let out = b.add(lse, neg);
        b.finish(out)
    }
}

impl Objective for CategoricalNll<'_> {
    fn dim(&self) -> usize {
        self.logits.input_dim()
    }
    fn value(&self, w: &[f64]) -> Result<f64> {
        let model = CategoricalModel::new(self.logits, w)?;
        model
            .probs()
            .get(self.label)
            .map(|p| -p.ln())
            .ok_or_else(|| Error::InvalidArgument(format!("label {} out of range", self.label)))
    }
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let model = CategoricalModel::new(self.logits, w)?;
        if self.label >= model.num_classes() {
            return Err(Error::InvalidArgument(format!("label {} out of range", self.label)));
        }
        Ok(model.score(self.label).iter().map(|x| -x).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherMode {
    /// Empirical `E[s sᵀ]` over labels drawn from the model.
    Sampled { samples: usize, seed: u64 },
    /// `Σ_y p_y s_y s_yᵀ` over every label.
    Exhaustive,
}

/// Natural-gradient direction `(F + ηI)⁻¹ ∇L` and the damping used.
pub fn natural_gradient_direction(nll: &CategoricalNll, w: &[f64], damping: f64, fisher: FisherMode, tol: f64) -> Result<(Vec<f64>, f64)> {
    let model = CategoricalModel::new(nll.logits, w)?;
    let g = nll.gradient(w)?;
    let m = model.num_classes();
    let weights = match fisher {
        FisherMode::Exhaustive => model.probs().to_vec(),
        FisherMode::Sampled { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidArgument("need at least one sample".into()));
            }
            let mut counts = vec![0.0; m];
            for y in sample_stream(seed, samples, |rng| sample_categorical(model.probs(), rng)) {
                counts[y] += 1.0;
            }
            counts.iter().map(|c| c / samples as f64).collect()
        }
    };
    let scores: Vec<&[f64]> = (0..m).map(|y| model.score(y)).collect();
    let fvp = |v: &[f64]| {
        let mut out = vec![0.0; v.len()];
        for (wt, s) in weights.iter().zip(&scores) {
            if *wt > 0.0 {
                axpy(wt * dot(s, v), s, &mut out);
            }
        }
        out
    };
    damped_solve(&symmetric(w.len(), fvp), &g, damping, tol)
}

pub fn natural_gradient_step(
    state: &OptState,
    nll: &CategoricalNll,
    config: &StepConfig,
    fisher: FisherMode,
) -> Result<OptState> {
    begin(state, nll, config)?;
    let (d, eta) = natural_gradient_direction(nll, &state.w, state.damping, fisher, config.cg_tol)?;
    let mut x = state.w.clone();
    axpy(-config.stepsize, &d, &mut x);
    let mut next = state.advanced(x);
    next.damping = eta;
    Ok(next)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Gd,
    HeavyBall,
    Nesterov,
    Adam,
    Projected(Projection),
    Prox(ProxOracle),
    Newton,
    Lbfgs,
}

pub fn step(method: &Method, state: &OptState, obj: &dyn Objective, config: &StepConfig) -> Result<OptState> {
    match method {
        Method::Gd => gd_step(state, obj, config),
        Method::HeavyBall => heavyball_step(state, obj, config),
        Method::Nesterov => nesterov_step(state, obj, config),
        Method::Adam => adam_step(state, obj, config),
        Method::Projected(p) => projected_step(state, obj, p, config),
        Method::Prox(p) => prox_step(state, obj, p, config),
        Method::Newton => newton_step(state, obj, config),
        Method::Lbfgs => lbfgs_step(state, obj, config),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV `iter,objective,gradnorm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["iter", "objective", "gradnorm"])?;
        for r in &self.rows {
            wtr.write_record([r.iter.to_string(), r.objective.to_string(), r.grad_norm.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stopping {
    pub max_iter: usize,
    pub grad_tol: f64,
}

/// Run `method` until the stationarity measure drops to `grad_tol` or
/// `max_iter` steps are taken; one trace row per step.
///
/// The measure is `‖∇L‖`, except for projected and proximal methods where it
/// is the gradient mapping `‖w_t - w_{t+1}‖ / γ` of the step just taken, and
/// the objective column then includes the penalty.
pub fn minimize(
    obj: &dyn Objective,
    w0: Vec<f64>,
    method: &Method,
    config: &StepConfig,
    stop: Stopping,
) -> Result<(OptState, Trace)> {
    config.validate()?;
    check_len("initial point", w0.len(), obj.dim())?;
    let state = OptState::new(w0, config);
    let measure = |prev: &OptState, next: &OptState| -> Result<(f64, f64)> {
        let gap = || norm2(&crate::linalg::sub(&prev.w, &next.w)) / config.stepsize;
        Ok(match method {
            Method::Prox(p) => (obj.value(&next.w)? + p.value(&next.w), gap()),
            Method::Projected(_) => (obj.value(&next.w)?, gap()),
            _ => (obj.value(&next.w)?, norm2(&grad_checked(obj, &next.w)?)),
        })
    };
    let mapping = matches!(method, Method::Projected(_) | Method::Prox(_));
    run(obj, state, stop, !mapping, measure, |s| step(method, s, obj, config))
}

/// [`minimize`] for any step function, stopping on `‖∇L‖`.
pub fn minimize_with(
    obj: &dyn Objective,
    state: OptState,
    stop: Stopping,
    step: impl FnMut(&OptState) -> Result<OptState>,
) -> Result<(OptState, Trace)> {
    check_len("initial point", state.w.len(), obj.dim())?;
    let measure = |_: &OptState, next: &OptState| Ok((obj.value(&next.w)?, norm2(&grad_checked(obj, &next.w)?)));
    run(obj, state, stop, true, measure, step)
}

fn run(
    obj: &dyn Objective,
    mut state: OptState,
    stop: Stopping,
    check_start: bool,
    measure: impl Fn(&OptState, &OptState) -> Result<(f64, f64)>,
    mut step: impl FnMut(&OptState) -> Result<OptState>,
) -> Result<(OptState, Trace)> {
    let mut rows = Vec::new();
    if stop.max_iter == 0 || (check_start && norm2(&grad_checked(obj, &state.w)?) <= stop.grad_tol) {
        return Ok((state, Trace { rows }));
    }
    for it in 1..=stop.max_iter {
        let next = step(&state)?;
        let (objective, grad_norm) = measure(&state, &next)?;
        state = next;
        rows.push(TraceRow {
            iter: it,
            objective,
            grad_norm,
        });
        if !objective.is_finite() {
            return Err(Error::BlowUp { step: it });
        }
        if grad_norm <= stop.grad_tol {
            break;
        }
    }
    Ok((state, Trace { rows }))
}

/// Bundled problems.
pub mod fixtures {
    use super::*;
    use crate::graph::{GraphBuilder, Unary};

    /// `½ wᵀ A w - bᵀ w` with symmetric `A`.
    #[derive(Clone, Debug, PartialEq)]
    pub struct Quadratic {
        pub a: Matrix,
        pub b: Vec<f64>,
    }

    impl Quadratic {
        pub fn new(a: Matrix, b: Vec<f64>) -> Result<Self> {
            check_len("A columns", a.cols, a.rows)?;
            check_len("b", b.len(), a.rows)?;
            Ok(Quadratic { a, b })
        }

        pub fn diagonal(d: &[f64], b: Vec<f64>) -> Self {
            let n = d.len();
            let a = Matrix::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 });
            Quadratic::new(a, b).expect("square")
        }

        pub fn minimizer(&self) -> Result<Vec<f64>> {
            self.a.solve(&self.b)
        }
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn value(&self, w: &[f64]) -> Result<f64> {
            check_len("w", w.len(), self.b.len())?;
            Ok(0.5 * dot(w, &self.a.matvec(w)) - dot(&self.b, w))
        }
        fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
            check_len("w", w.len(), self.b.len())?;
            Ok(crate::linalg::sub(&self.a.matvec(w), &self.b))
        }
        fn hvp(&self, _w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
            check_len("v", v.len(), self.b.len())?;
            Ok(self.a.matvec(v))
        }
    }

    /// `0.05 w₁² + 0.5 w₂²`
    pub fn elongated_quadratic() -> Quadratic {
        Quadratic::diagonal(&[0.1, 1.0], vec![0.0, 0.0])
    }

    /// `½ wᵀ diag(1, 10) w - (1, 1)ᵀ w`
    pub fn diag_quadratic() -> Quadratic {
        Quadratic::diagonal(&[1.0, 10.0], vec![1.0, 1.0])
    }

    /// `Σ ¼ w_i⁴ - ½ w_i²`, non-convex near 0 with minima at `±1`.
    pub fn double_well(n: usize) -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[n]);
        let q = b.unary(Unary::Powi(4), x);
        let q = b.unary(Unary::Scale(0.25), q);
        let s = b.square(x);
        let s = b.unary(Unary::Scale(-0.5), s);
        let t = b.add(q, s);
        let out = b.sum(t);
        b.finish(out).expect("valid graph")
    }

    /// `100 (w₂ - w₁²)² + (1 - w₁)²`
    pub fn rosenbrock() -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let x1 = b.slice(x, 0, 1);
        let x2 = b.slice(x, 1, 1);
        let x1sq = b.square(x1);
        let nx1sq = b.unary(Unary::Neg, x1sq);
        let d = b.add(x2, nx1sq);
        let d = b.square(d);
        let d = b.unary(Unary::Scale(100.0), d);
        let nx1 = b.unary(Unary::Neg, x1);
        let e = b.unary(Unary::Offset(1.0), nx1);
        let e = b.square(e);
        let s = b.add(d, e);
        let out = b.sum(s);
        b.finish(out).expect("valid graph")
    }

    /// `½ (w - 1)²`, the smooth part of the 1-D lasso.
    pub fn lasso_smooth() -> Quadratic {
        Quadratic::diagonal(&[1.0], vec![1.0])
    }

    /// `½‖z‖²` on `n` entries.
    pub fn half_sq(n: usize) -> Graph {
        crate::graph::fixtures::half_sq_norm_graph(n)
    }

    pub const LSQ_A: [f64; 6] = [1.0, 2.0, -1.0, 0.5, 0.3, 1.0];
    pub const LSQ_Y: [f64; 3] = [1.0, 0.0, -2.0];

    /// Residual graph `A w - y` for the 3×2 system [`LSQ_A`], [`LSQ_Y`] and
    /// the outer loss `½‖r‖²`.
    pub fn least_squares() -> (Graph, Graph) {
        let mut b = GraphBuilder::new();
        let w = b.input(&[2]);
        let ac = b.constant(crate::graph::Tensor::matrix(3, 2, LSQ_A.to_vec()).expect("3x2"));
        let aw = b.matvec(ac, w);
        let yc = b.constant(crate::graph::Tensor::vector(LSQ_Y.iter().map(|v| -v).collect()));
        let r = b.add(aw, yc);
        (b.finish(r).expect("valid graph"), half_sq(3))
    }

    /// `f(w) = w² - 1` on one coordinate.
    pub fn square_minus_one() -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1]);
        let s = b.square(x);
        let out = b.unary(Unary::Offset(-1.0), s);
        b.finish(out).expect("valid graph")
    }
}
