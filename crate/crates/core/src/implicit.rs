//! Differentiating through solutions of equations: implicit-function JVPs and
//! VJPs, the adjoint state method, Danskin gradients and inverse functions.
//!
//! Inner solvers are black boxes. Only the linearized residual at the
//! solution is ever differentiated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{jvp_flat, vjp_flat, FeedforwardSpec, Layer};
use crate::error::{check_len, Error, Result};
use crate::graph::{numel, Graph};
use crate::linalg::{axpy, dot, norm2, Matrix};
use crate::linear_map::{FnMap, GraphLinearization, LinearMap};
use crate::second_order::cg_solve;

/// `A*` as a linear map.
pub struct Adjoint<'a>(pub &'a dyn LinearMap);

impl LinearMap for Adjoint<'_> {
    fn in_dim(&self) -> usize {
        self.0.out_dim()
    }
    fn out_dim(&self) -> usize {
        self.0.in_dim()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.0.adjoint_apply(v)
    }
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64> {
        self.0.apply(u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    /// Conjugate gradient; needs a symmetric positive definite operator.
    Cg,
    /// Conjugate gradient on `AᵀA x = Aᵀb`, tracking the residual `b - Ax`.
    NormalEquations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSolve {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `‖b - Ax‖ / ‖b‖`, recomputed from the returned solution.
    pub relative_residual: f64,
    pub method: SolveMethod,
}

fn max_iterations(n: usize) -> usize {
    10 * n.max(10)
}

fn true_residual(a: &dyn LinearMap, x: &[f64], b: &[f64]) -> f64 {
    let mut r = b.to_vec();
    axpy(-1.0, &a.apply(x), &mut r);
    let bn = norm2(b);
    if bn == 0.0 {
        norm2(&r)
    } else {
        norm2(&r) / bn
    }
}

fn check_square(a: &dyn LinearMap, b: &[f64]) -> Result<()> {
    check_len("operator output", a.out_dim(), a.in_dim())?;
    check_len("right-hand side", b.len(), a.out_dim())
}

fn cgnr(a: &dyn LinearMap, b: &[f64], tol: f64) -> Result<LinearSolve> {
    let n = a.in_dim();
    let bn = norm2(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = a.adjoint_apply(&r);
    let mut p = z.clone();
    let mut zz = dot(&z, &z);
    let max_iter = max_iterations(n);
    let mut it = 0;
    while norm2(&r) > tol * bn && it < max_iter {
        let ap = a.apply(&p);
        let curv = dot(&ap, &ap);
        if !(curv > 0.0) || zz == 0.0 {
            break;
        }
        let alpha = zz / curv;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        z = a.adjoint_apply(&r);
        let zz_new = dot(&z, &z);
        let beta = zz_new / zz;
        zz = zz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
        it += 1;
    }
    let relative_residual = true_residual(a, &x, b);
    if !(relative_residual <= tol) {
        return Err(Error::NotConverged {
            residual: relative_residual,
            iterations: it,
        });
    }
    Ok(LinearSolve {
        solution: x,
        iterations: it,
        relative_residual,
        method: SolveMethod::NormalEquations,
    })
}

/// Solve the square system `A x = b` to `‖b - Ax‖ ≤ tol ‖b‖` with the given method.
pub fn solve_linear(a: &dyn LinearMap, b: &[f64], tol: f64, method: SolveMethod) -> Result<LinearSolve> {
    check_square(a, b)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    match method {
        SolveMethod::NormalEquations => cgnr(a, b, tol),
        SolveMethod::Cg => {
            let out = cg_solve(a, b, tol, max_iterations(b.len()))?;
            let relative_residual = true_residual(a, &out.solution, b);
            if !(relative_residual <= tol) {
                return Err(Error::NotConverged {
                    residual: relative_residual,
                    iterations: out.iterations,
                });
            }
            Ok(LinearSolve {
                solution: out.solution,
                iterations: out.iterations,
                relative_residual,
                method: SolveMethod::Cg,
            })
        }
    }
}

/// Whether `⟨Au, v⟩ = ⟨u, Av⟩` on a pair of fixed random probes.
pub fn looks_symmetric(a: &dyn LinearMap) -> bool {
    if a.in_dim() != a.out_dim() {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let n = a.in_dim();
    let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let lhs = dot(&a.apply(&u), &v);
    let rhs = dot(&u, &a.apply(&v));
    (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0)
}

/// Solve `A x = b` for an invertible square `A`.
///
/// Operators that pass a symmetry probe are tried with CG first; anything
/// else, or a CG failure, goes to CG on the normal equations. Note that the
/// normal equations square the condition number.
pub fn solve_linear_general(a: &dyn LinearMap, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_square(a, b)?;
    if looks_symmetric(a) {
        if let Ok(s) = solve_linear(a, b, tol, SolveMethod::Cg) {
            return Ok(s.solution);
        }
    }
    solve_linear(a, b, tol, SolveMethod::NormalEquations).map(|s| s.solution)
}

/// `F(w, λ) = 0` with a black-box solver `λ ↦ w*(λ)`.
pub trait RootProblem {
    fn w_dim(&self) -> usize;
    fn lambda_dim(&self) -> usize;
    fn residual(&self, w: &[f64], lambda: &[f64]) -> Result<Vec<f64>>;
    fn solve(&self, lambda: &[f64]) -> Result<Vec<f64>>;
    /// `∂₁F(w, λ)`
    fn d1<'a>(&'a self, w: &[f64], lambda: &[f64]) -> Result<Box<dyn LinearMap + 'a>>;
    /// `∂₂F(w, λ)`
    fn d2<'a>(&'a self, w: &[f64], lambda: &[f64]) -> Result<Box<dyn LinearMap + 'a>>;
}

type Solver = Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;

/// A root problem whose residual is a graph with inputs `(w, λ)`.
pub struct GraphRootProblem {
    graph: Graph,
    w_dim: usize,
    lambda_dim: usize,
    solver: Solver,
}

impl GraphRootProblem {
    pub fn new(graph: Graph, solver: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static) -> Result<Self> {
        let shapes = graph.input_shapes();
        if shapes.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "residual graph needs inputs (w, λ), found {}",
                shapes.len()
            )));
        }
        let w_dim = numel(&shapes[0]);
        check_len("residual", numel(graph.output_shape()), w_dim)?;
        Ok(GraphRootProblem {
            lambda_dim: numel(&shapes[1]),
            w_dim,
            graph,
            solver: Box::new(solver),
        })
    }

    /// Use Newton's method with a dense Jacobian from `w0` as the solver.
    pub fn newton(graph: Graph, w0: Vec<f64>, tol: f64, max_iter: usize) -> Result<Self> {
        let g = graph.clone();
        let shapes = graph.input_shapes();
        check_len("initial point", w0.len(), shapes.first().map_or(0, |s| numel(s)))?;
        GraphRootProblem::new(graph, move |lambda| newton_root(&g, &w0, lambda, tol, max_iter))
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn point(&self, w: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        check_len("w", w.len(), self.w_dim)?;
        check_len("λ", lambda.len(), self.lambda_dim)?;
        let mut p = w.to_vec();
        p.extend_from_slice(lambda);
        Ok(p)
    }
}

fn newton_root(graph: &Graph, w0: &[f64], lambda: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = w0.len();
    let mut w = w0.to_vec();
    let mut point = w.clone();
    point.extend_from_slice(lambda);
    for it in 0..=max_iter {
        let f = graph.eval_flat(&point)?.into_data();
        if norm2(&f) <= tol {
            return Ok(w);
        }
        if it == max_iter {
            return Err(Error::NotConverged {
                residual: norm2(&f),
                iterations: it,
            });
        }
        let mut jac = Matrix::zeros(n, n);
        let mut e = vec![0.0; point.len()];
        for j in 0..n {
            e[j] = 1.0;
            let col = jvp_flat(graph, &point, &e)?;
            e[j] = 0.0;
            for i in 0..n {
                jac.set(i, j, col[i]);
            }
        }
        let step = jac.solve(&f)?;
        for (wi, si) in w.iter_mut().zip(&step) {
            *wi -= si;
        }
        point[..n].copy_from_slice(&w);
    }
    unreachable!()
}

impl RootProblem for GraphRootProblem {
    fn w_dim(&self) -> usize {
        self.w_dim
    }
    fn lambda_dim(&self) -> usize {
        self.lambda_dim
    }
    fn residual(&self, w: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        Ok(self.graph.eval_flat(&self.point(w, lambda)?)?.into_data())
    }
    fn solve(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        check_len("λ", lambda.len(), self.lambda_dim)?;
        let w = (self.solver)(lambda)?;
        check_len("solver output", w.len(), self.w_dim)?;
        Ok(w)
    }
    fn d1<'a>(&'a self, w: &[f64], lambda: &[f64]) -> Result<Box<dyn LinearMap + 'a>> {
        let p = self.point(w, lambda)?;
        self.graph.eval_flat(&p)?;
        let (n, m) = (self.w_dim, self.lambda_dim);
        let g = &self.graph;
        let p2 = p.clone();
        Ok(Box::new(FnMap {
            in_dim: n,
            out_dim: n,
            apply: move |v: &[f64]| {
                let mut d = v.to_vec();
                d.resize(n + m, 0.0);
                jvp_flat(g, &p, &d).expect("point evaluated")
            },
            adjoint: move |u: &[f64]| {
                let mut r = vjp_flat(g, &p2, u).expect("point evaluated");
                r.truncate(n);
                r
            },
        }))
    }
    fn d2<'a>(&'a self, w: &[f64], lambda: &[f64]) -> Result<Box<dyn LinearMap + 'a>> {
        let p = self.point(w, lambda)?;
        self.graph.eval_flat(&p)?;
        let (n, m) = (self.w_dim, self.lambda_dim);
        let g = &self.graph;
        let p2 = p.clone();
        Ok(Box::new(FnMap {
            in_dim: m,
            out_dim: n,
            apply: move |v: &[f64]| {
                let mut d = vec![0.0; n];
                d.extend_from_slice(v);
                jvp_flat(g, &p, &d).expect("point evaluated")
            },
            adjoint: move |u: &[f64]| vjp_flat(g, &p2, u).expect("point evaluated").split_off(n),
        }))
    }
}

/// `∂w*(λ) v`, solving `∂₁F t = -∂₂F v` at `w = w*(λ)`.
pub fn ift_jvp(problem: &dyn RootProblem, lambda: &[f64], v: &[f64], tol: f64) -> Result<Vec<f64>> {
    let w = problem.solve(lambda)?;
    ift_jvp_at(problem, &w, lambda, v, tol)
}

/// [`ift_jvp`] at a known solution `w`.
pub fn ift_jvp_at(problem: &dyn RootProblem, w: &[f64], lambda: &[f64], v: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_len("direction", v.len(), problem.lambda_dim())?;
    let d1 = problem.d1(w, lambda)?;
    let d2 = problem.d2(w, lambda)?;
    let rhs: Vec<f64> = d2.apply(v).iter().map(|x| -x).collect();
    solve_linear_general(d1.as_ref(), &rhs, tol)
}

/// `∂w*(λ)* u`: solve `∂₁F* r = -u`, return `∂₂F* r`.
pub fn ift_vjp(problem: &dyn RootProblem, lambda: &[f64], u: &[f64], tol: f64) -> Result<Vec<f64>> {
    let w = problem.solve(lambda)?;
    ift_vjp_at(problem, &w, lambda, u, tol)
}

pub fn ift_vjp_at(problem: &dyn RootProblem, w: &[f64], lambda: &[f64], u: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_len("cotangent", u.len(), problem.w_dim())?;
    let d1 = problem.d1(w, lambda)?;
    let d2 = problem.d2(w, lambda)?;
    let rhs: Vec<f64> = u.iter().map(|x| -x).collect();
    let r = solve_linear_general(&Adjoint(d1.as_ref()), &rhs, tol)?;
    Ok(d2.adjoint_apply(&r))
}

/// `c(s, w) = 0` defining a state `s*(w)`, and an objective `L(s, w)`.
pub trait AdjointStateProblem {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn solve_state(&self, w: &[f64]) -> Result<Vec<f64>>;
    fn constraint(&self, s: &[f64], w: &[f64]) -> Result<Vec<f64>>;
    fn objective(&self, s: &[f64], w: &[f64]) -> Result<f64>;
    /// `(∇₁L, ∇₂L)`
    fn objective_grads(&self, s: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
    /// `∂₁c(s, w)`
    fn d1c<'a>(&'a self, s: &[f64], w: &[f64]) -> Result<Box<dyn LinearMap + 'a>>;
    /// `∂₂c(s, w)`
    fn d2c<'a>(&'a self, s: &[f64], w: &[f64]) -> Result<Box<dyn LinearMap + 'a>>;

    /// Solve `∂₁c* r = rhs`.
    fn solve_adjoint(&self, s: &[f64], w: &[f64], rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
        let d1 = self.d1c(s, w)?;
        solve_linear_general(&Adjoint(d1.as_ref()), rhs, tol)
    }
}

/// Gradient of `w ↦ L(s*(w), w)`: `∇₂L + ∂₂c* r` with `∂₁c* r = -∇₁L`.
pub fn adjoint_state_gradient(problem: &dyn AdjointStateProblem, w: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_len("parameters", w.len(), problem.param_dim())?;
    let s = problem.solve_state(w)?;
    check_len("state", s.len(), problem.state_dim())?;
    let (g1, mut g2) = problem.objective_grads(&s, w)?;
    let rhs: Vec<f64> = g1.iter().map(|x| -x).collect();
    let r = problem.solve_adjoint(&s, w, &rhs, tol)?;
    let d2 = problem.d2c(&s, w)?;
    let back = d2.adjoint_apply(&r);
    for (a, b) in g2.iter_mut().zip(&back) {
        *a += b;
    }
    Ok(g2)
}

type Loss = Box<dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync>;

/// A feedforward network written as constraints `c_k = f_k(s_{k-1}, w_k) - s_k`,
/// `k = 1..K`, with `s_0` the fixed input, state `s = (s_1, ..., s_K)`,
/// parameters `w = (w_1, ..., w_K)` and objective `ℓ(s_K)`.
///
/// `∂₁c` is block lower bidiagonal with `-I` on the diagonal, so the adjoint
/// system is solved exactly by backsubstitution.
pub struct FeedforwardConstraints<'a> {
    layers: &'a [Box<dyn Layer>],
    input: Vec<f64>,
    loss: Loss,
}

impl<'a> FeedforwardConstraints<'a> {
    /// Layers and input from `spec`; `loss` returns `(ℓ(s_K), ∇ℓ(s_K))`.
    pub fn new(spec: &'a FeedforwardSpec, loss: impl Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'static) -> Result<Self> {
        spec.validate()?;
        Ok(FeedforwardConstraints {
            layers: &spec.layers,
            input: spec.input.clone(),
            loss: Box::new(loss),
        })
    }

    fn param_blocks<'w>(&self, w: &'w [f64]) -> Result<Vec<&'w [f64]>> {
        check_len("parameters", w.len(), self.param_dim())?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in self.layers {
            out.push(&w[at..at + l.num_params()]);
            at += l.num_params();
        }
        Ok(out)
    }

    /// `s_0, ..., s_K` from a flat state.
    fn state_blocks<'s>(&'s self, s: &'s [f64]) -> Result<Vec<&'s [f64]>> {
        check_len("state", s.len(), self.state_dim())?;
        let mut out = vec![self.input.as_slice()];
        let mut at = 0;
        for l in self.layers {
            out.push(&s[at..at + l.out_dim()]);
            at += l.out_dim();
        }
        Ok(out)
    }

    fn offsets(&self) -> Vec<usize> {
        let mut o = vec![0];
        for l in self.layers {
            o.push(o.last().unwrap() + l.out_dim());
        }
        o
    }
}

impl AdjointStateProblem for FeedforwardConstraints<'_> {
    fn state_dim(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim()).sum()
    }
    fn param_dim(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }
    fn solve_state(&self, w: &[f64]) -> Result<Vec<f64>> {
        let ws = self.param_blocks(w)?;
        let mut s = self.input.clone();
        let mut out = Vec::with_capacity(self.state_dim());
        for (l, wk) in self.layers.iter().zip(ws) {
            s = l.forward(&s, wk);
            out.extend_from_slice(&s);
        }
        Ok(out)
    }
    fn constraint(&self, s: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let ws = self.param_blocks(w)?;
        let ss = self.state_blocks(s)?;
        let mut out = Vec::with_capacity(s.len());
        for (k, l) in self.layers.iter().enumerate() {
            let f = l.forward(ss[k], ws[k]);
            out.extend(f.iter().zip(ss[k + 1]).map(|(a, b)| a - b));
        }
        Ok(out)
    }
    fn objective(&self, s: &[f64], _w: &[f64]) -> Result<f64> {
        let ss = self.state_blocks(s)?;
        Ok((self.loss)(ss[self.layers.len()]).0)
    }
    fn objective_grads(&self, s: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let ss = self.state_blocks(s)?;
        let (_, g) = (self.loss)(ss[self.layers.len()]);
        let last = ss[self.layers.len()].len();
        check_len("loss gradient", g.len(), last)?;
        let mut g1 = vec![0.0; s.len() - last];
        g1.extend_from_slice(&g);
        Ok((g1, vec![0.0; w.len()]))
    }
    fn d1c<'a>(&'a self, s: &[f64], w: &[f64]) -> Result<Box<dyn LinearMap + 'a>> {
        self.param_blocks(w)?;
        self.state_blocks(s)?;
        let (s, w) = (s.to_vec(), w.to_vec());
        let (s2, w2) = (s.clone(), w.clone());
        let n = s.len();
        Ok(Box::new(FnMap {
            in_dim: n,
            out_dim: n,
            apply: move |v: &[f64]| {
                let ws = self.param_blocks(&w).unwrap();
                let ss = self.state_blocks(&s).unwrap();
                let o = self.offsets();
                let mut out = Vec::with_capacity(n);
                for (k, l) in self.layers.iter().enumerate() {
                    let dw = vec![0.0; l.num_params()];
                    let ds = if k == 0 {
                        vec![0.0; l.in_dim()]
                    } else {
                        v[o[k - 1]..o[k]].to_vec()
                    };
                    let t = l.jvp(ss[k], ws[k], &ds, &dw);
                    out.extend(t.iter().zip(&v[o[k]..o[k + 1]]).map(|(a, b)| a - b));
                }
                out
            },
            adjoint: move |u: &[f64]| {
                let ws = self.param_blocks(&w2).unwrap();
                let ss = self.state_blocks(&s2).unwrap();
                let o = self.offsets();
                let mut out: Vec<f64> = u.iter().map(|x| -x).collect();
                for k in 1..self.layers.len() {
                    let (r, _) = self.layers[k].vjp(ss[k], ws[k], &u[o[k]..o[k + 1]]);
                    for (a, b) in out[o[k - 1]..o[k]].iter_mut().zip(&r) {
                        *a += b;
                    }
                }
                out
            },
        }))
    }
    fn d2c<'a>(&'a self, s: &[f64], w: &[f64]) -> Result<Box<dyn LinearMap + 'a>> {
        self.param_blocks(w)?;
        self.state_blocks(s)?;
        let (s, w) = (s.to_vec(), w.to_vec());
        let (s2, w2) = (s.clone(), w.clone());
        Ok(Box::new(FnMap {
            in_dim: w.len(),
            out_dim: s.len(),
            apply: move |v: &[f64]| {
                let ws = self.param_blocks(&w).unwrap();
                let vs = self.param_blocks(v).unwrap();
                let ss = self.state_blocks(&s).unwrap();
                let mut out = Vec::with_capacity(s.len());
                for (k, l) in self.layers.iter().enumerate() {
                    out.extend(l.jvp(ss[k], ws[k], &vec![0.0; l.in_dim()], vs[k]));
                }
                out
            },
            adjoint: move |u: &[f64]| {
                let ws = self.param_blocks(&w2).unwrap();
                let ss = self.state_blocks(&s2).unwrap();
                let o = self.offsets();
                let mut out = Vec::with_capacity(w2.len());
                for (k, l) in self.layers.iter().enumerate() {
                    out.extend(l.vjp(ss[k], ws[k], &u[o[k]..o[k + 1]]).1);
                }
                out
            },
        }))
    }

    /// Backsubstitution from the last block: `r_K = -rhs_K`,
    /// `r_k = (∂_s f_{k+1})* r_{k+1} - rhs_k`.
    fn solve_adjoint(&self, s: &[f64], w: &[f64], rhs: &[f64], _tol: f64) -> Result<Vec<f64>> {
        let ws = self.param_blocks(w)?;
        let ss = self.state_blocks(s)?;
        check_len("right-hand side", rhs.len(), s.len())?;
        let o = self.offsets();
        let k_last = self.layers.len();
        let mut r = vec![0.0; s.len()];
        for (ri, b) in r[o[k_last - 1]..].iter_mut().zip(&rhs[o[k_last - 1]..]) {
            *ri = -b;
        }
        for k in (1..k_last).rev() {
            let (back, _) = self.layers[k].vjp(ss[k], ws[k], &r[o[k]..o[k + 1]]);
            for ((ri, b), x) in r[o[k - 1]..o[k]].iter_mut().zip(&rhs[o[k - 1]..o[k]]).zip(back) {
                *ri = x - b;
            }
        }
        Ok(r)
    }
}

/// `∇h(λ)` for `h(λ) = max_w f(w, λ)`: `∇₂f(w*(λ), λ)` with `w*` held fixed.
/// For a minimum, pass the minimizer; the formula is the same.
pub fn danskin_gradient(
    max_oracle: impl Fn(&[f64]) -> Result<Vec<f64>>,
    grad2: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
    lambda: &[f64],
) -> Result<Vec<f64>> {
    let w = max_oracle(lambda)?;
    let g = grad2(&w, lambda)?;
    check_len("∇₂f", g.len(), lambda.len())?;
    Ok(g)
}

/// `∂f⁻¹(ω) v = (∂f(w))⁻¹ v` at `w = f⁻¹(ω)`, for a single-input graph `f`.
pub fn inverse_fn_jvp(
    f: &Graph,
    inverse: impl Fn(&[f64]) -> Result<Vec<f64>>,
    omega: &[f64],
    v: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    if f.num_inputs() != 1 {
        return Err(Error::InvalidArgument("inverse_fn_jvp needs a single-input graph".into()));
    }
    check_len("ω", omega.len(), numel(f.output_shape()))?;
    check_len("direction", v.len(), omega.len())?;
    let w = inverse(omega)?;
    let jac = GraphLinearization::new(f, &w)?;
    check_len("f⁻¹(ω)", jac.in_dim(), jac.out_dim())?;
    solve_linear_general(&jac, v, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Tensor, Unary};
    use crate::numcheck::{directional_derivative, FdScheme};
    use crate::scalar::{Dual, Scalar};
    use proptest::prelude::*;
    use rand::Rng;

    const TOL: f64 = 1e-12;

    /// `F(x, y) = x² + y² - 1`, upper branch.
    fn circle() -> GraphRootProblem {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1]);
        let y = b.input(&[1]);
        let x2 = b.square(x);
        let y2 = b.square(y);
        let s = b.add(x2, y2);
        let out = b.unary(Unary::Offset(-1.0), s);
        let g = b.finish(out).unwrap();
        GraphRootProblem::new(g, |l| Ok(vec![(1.0 - l[0] * l[0]).sqrt()])).unwrap()
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `F(w, λ) = w⁵ + w³ + w - λ`
    fn quintic() -> GraphRootProblem {
        let mut b = GraphBuilder::new();
        let w = b.input(&[1]);
        let l = b.input(&[1]);
        let w5 = b.unary(Unary::Powi(5), w);
        let w3 = b.unary(Unary::Powi(3), w);
        let a = b.add(w5, w3);
        let a = b.add(a, w);
        let nl = b.unary(Unary::Neg, l);
        let out = b.add(a, nl);
        let g = b.finish(out).unwrap();
        GraphRootProblem::new(g, |l| {
            let lam = l[0];
            Ok(vec![bisect(|w| w.powi(5) + w.powi(3) + w - lam, -10.0, 10.0)])
        })
        .unwrap()
    }

    #[test]
    fn circle_slope() {
        let p = circle();
        let t = ift_jvp(&p, &[0.6], &[1.0], TOL).unwrap();
        assert!((t[0] + 0.75).abs() < 1e-10, "{}", t[0]);
        let r = ift_vjp(&p, &[0.6], &[1.0], TOL).unwrap();
        assert!((r[0] + 0.75).abs() < 1e-10);
    }

    #[test]
    fn quintic_slope() {
        let p = quintic();
        let w = p.solve(&[3.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        let t = ift_jvp(&p, &[3.0], &[1.0], TOL).unwrap();
        assert!((t[0] - 1.0 / 9.0).abs() < 1e-10);
    }

    /// `F(w, λ) = Xᵀ(Xw - y) + λw`, the ridge stationarity condition.
    struct Ridge {
        x: Matrix,
        y: Vec<f64>,
    }

    impl Ridge {
        fn closed_form(&self, lam: f64) -> Vec<f64> {
            let xtx = self.x.transpose().matmul(&self.x);
            let mut a = xtx.clone();
            for i in 0..a.rows {
                a.set(i, i, xtx.get(i, i) + lam);
            }
            a.solve(&self.x.matvec_t(&self.y)).unwrap()
        }
    }

    impl RootProblem for Ridge {
        fn w_dim(&self) -> usize {
            self.x.cols
        }
        fn lambda_dim(&self) -> usize {
            1
        }
        fn residual(&self, w: &[f64], l: &[f64]) -> Result<Vec<f64>> {
            let r = crate::linalg::sub(&self.x.matvec(w), &self.y);
            let mut g = self.x.matvec_t(&r);
            axpy(l[0], w, &mut g);
            Ok(g)
        }
        fn solve(&self, l: &[f64]) -> Result<Vec<f64>> {
            Ok(self.closed_form(l[0]))
        }
        fn d1<'a>(&'a self, _w: &[f64], l: &[f64]) -> Result<Box<dyn LinearMap + 'a>> {
            let lam = l[0];
            let n = self.x.cols;
            let f = move |v: &[f64]| {
                let mut out = self.x.matvec_t(&self.x.matvec(v));
                axpy(lam, v, &mut out);
                out
            };
            Ok(Box::new(crate::linear_map::symmetric(n, f)))
        }
        fn d2<'a>(&'a self, w: &[f64], _l: &[f64]) -> Result<Box<dyn LinearMap + 'a>> {
            let n = w.len();
            Ok(Box::new(Matrix::new(n, 1, w.to_vec()).unwrap()))
        }
    }

    fn ridge() -> Ridge {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ridge { x, y }
    }

    #[test]
    fn ridge_matches_finite_difference_of_closed_form() {
        let p = ridge();
        let lam = 0.7;
        let t = ift_jvp(&p, &[lam], &[1.0], TOL).unwrap();
        for i in 0..3 {
            let fd = directional_derivative(|l| p.closed_form(l[0])[i], &[lam], &[1.0], &FdScheme::central(1e-5)).unwrap();
            assert!((t[i] - fd).abs() < 1e-6, "{i}: {} vs {fd}", t[i]);
        }
        let w = p.solve(&[lam]).unwrap();
        assert!(norm2(&p.residual(&w, &[lam]).unwrap()) < 1e-12);
    }

    /// `F(w, λ) = M w + 0.3 tanh(w) - B λ - c` with non-symmetric `M`.
    fn nonsymmetric() -> GraphRootProblem {
        let m = Tensor::matrix(3, 3, vec![2.0, 0.5, -0.3, -0.4, 1.5, 0.2, 0.1, -0.7, 1.8]).unwrap();
        let bm = Tensor::matrix(3, 2, vec![1.0, -0.5, 0.3, 0.8, -0.2, 0.4]).unwrap();
        let mut b = GraphBuilder::new();
        let w = b.input(&[3]);
        let l = b.input(&[2]);
        let mc = b.constant(m);
        let bc = b.constant(bm);
        let mw = b.matvec(mc, w);
        let th = b.unary(Unary::Tanh, w);
        let th = b.unary(Unary::Scale(0.3), th);
        let bl = b.matvec(bc, l);
        let nbl = b.unary(Unary::Neg, bl);
        let c = b.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let s = b.add(mw, th);
        let s = b.add(s, nbl);
        let out = b.add(s, c);
        let g = b.finish(out).unwrap();
        GraphRootProblem::newton(g, vec![0.0; 3], 1e-14, 50).unwrap()
    }

    #[test]
    fn ift_residual_within_ten_tol() {
        let tol = 1e-10;
        let lam = [0.4, -0.9];
        let v = [1.0, 0.5];
        for p in [&nonsymmetric() as &dyn RootProblem, &ridge() as &dyn RootProblem] {
            let lam = &lam[..p.lambda_dim()];
            let v = &v[..p.lambda_dim()];
            let w = p.solve(lam).unwrap();
            let t = ift_jvp(p, lam, v, tol).unwrap();
            let mut r = p.d1(&w, lam).unwrap().apply(&t);
            axpy(1.0, &p.d2(&w, lam).unwrap().apply(v), &mut r);
            assert!(norm2(&r) <= 10.0 * tol, "{}", norm2(&r));
        }
    }

    #[test]
    fn nonsymmetric_jvp_matches_finite_difference() {
        let p = nonsymmetric();
        let lam = [0.4, -0.9];
        let v = [1.0, 0.5];
        let t = ift_jvp(&p, &lam, &v, TOL).unwrap();
        for i in 0..3 {
            let fd = directional_derivative(|l| p.solve(l).unwrap()[i], &lam, &v, &FdScheme::central(1e-5)).unwrap();
            assert!((t[i] - fd).abs() < 1e-7);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn implicit_adjoint_identity(v in prop::collection::vec(-2.0f64..2.0, 2), u in prop::collection::vec(-2.0f64..2.0, 3)) {
            let p = nonsymmetric();
            let lam = [0.1, 0.2];
            let t = ift_jvp(&p, &lam, &v, TOL).unwrap();
            let r = ift_vjp(&p, &lam, &u, TOL).unwrap();
            prop_assert!((dot(&t, &u) - dot(&r, &v)).abs() < 1e-8);
        }
    }

    #[test]
    fn solve_identity_and_rotation() {
        let b = [1.0, -2.0, 3.0];
        let x = solve_linear_general(&Matrix::identity(3), &b, TOL).unwrap();
        assert_eq!(x, b.to_vec());
        let th = 0.7f64;
        let rot = Matrix::new(2, 2, vec![th.cos(), -th.sin(), th.sin(), th.cos()]).unwrap();
        assert!(!looks_symmetric(&rot));
        let b = [0.3, -1.2];
        let s = solve_linear(&rot, &b, TOL, SolveMethod::NormalEquations).unwrap();
        let expect = rot.transpose().matvec(&b);
        for i in 0..2 {
            assert!((s.solution[i] - expect[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_system_does_not_converge() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let err = solve_linear_general(&a, &[1.0, 0.0], 1e-10).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. }), "{err:?}");
    }

    /// `c(s, w) = A s - w`, `L = ½‖s‖² + ⟨d, w⟩`.
    struct LinearState {
        a: Matrix,
        d: Vec<f64>,
    }

    impl AdjointStateProblem for LinearState {
        fn state_dim(&self) -> usize {
            self.a.rows
        }
        fn param_dim(&self) -> usize {
            self.a.rows
        }
        fn solve_state(&self, w: &[f64]) -> Result<Vec<f64>> {
            self.a.solve(w)
        }
        fn constraint(&self, s: &[f64], w: &[f64]) -> Result<Vec<f64>> {
            Ok(crate::linalg::sub(&self.a.matvec(s), w))
        }
        fn objective(&self, s: &[f64], w: &[f64]) -> Result<f64> {
            Ok(0.5 * dot(s, s) + dot(&self.d, w))
        }
        fn objective_grads(&self, s: &[f64], _w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((s.to_vec(), self.d.clone()))
        }
        fn d1c<'a>(&'a self, _s: &[f64], _w: &[f64]) -> Result<Box<dyn LinearMap + 'a>> {
            Ok(Box::new(self.a.clone()))
        }
        fn d2c<'a>(&'a self, _s: &[f64], _w: &[f64]) -> Result<Box<dyn LinearMap + 'a>> {
            let n = self.a.rows;
            Ok(Box::new(Matrix::from_fn(n, n, |i, j| if i == j { -1.0 } else { 0.0 })))
        }
    }

    #[test]
    fn identity_constraint_gradient_is_w() {
        let p = LinearState {
            a: Matrix::identity(3),
            d: vec![0.0; 3],
        };
        let w = [0.5, -1.0, 2.0];
        let g = adjoint_state_gradient(&p, &w, TOL).unwrap();
        for i in 0..3 {
            assert!((g[i] - w[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_constraint_gradient_closed_form() {
        let a = Matrix::new(3, 3, vec![3.0, 1.0, 0.0, -1.0, 2.0, 0.5, 0.2, 0.0, 1.5]).unwrap();
        let p = LinearState {
            a: a.clone(),
            d: vec![0.1, 0.2, -0.3],
        };
        let w = [1.0, -0.5, 0.25];
        let g = adjoint_state_gradient(&p, &w, TOL).unwrap();
        // ∇ = A⁻ᵀ A⁻¹ w + d
        let s = a.solve(&w).unwrap();
        let expect = crate::linalg::add(&a.transpose().solve(&s).unwrap(), &p.d);
        for i in 0..3 {
            assert!((g[i] - expect[i]).abs() < 1e-9);
        }
        let c = p.constraint(&p.solve_state(&w).unwrap(), &w).unwrap();
        assert!(norm2(&c) < 1e-12);
    }

    fn three_layer_spec() -> FeedforwardSpec {
        use crate::autodiff::Dense;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layers: Vec<Box<dyn Layer>> = vec![
            Box::new(Dense::new(3, 4, Some(Unary::Tanh))),
            Box::new(Dense::new(4, 4, Some(Unary::Logistic))),
            Box::new(Dense::new(4, 2, None)),
        ];
        let params = layers
            .iter()
            .map(|l| (0..l.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        FeedforwardSpec {
            layers,
            params,
            input: vec![0.3, -0.8, 0.5],
        }
    }

    fn half_sq_loss(target: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync {
        move |s: &[f64]| {
            let d = crate::linalg::sub(s, &target);
            (0.5 * dot(&d, &d), d)
        }
    }

    #[test]
    fn feedforward_constraints_reproduce_backprop_exactly() {
        let spec = three_layer_spec();
        let target = vec![0.2, -0.1];
        let p = FeedforwardConstraints::new(&spec, half_sq_loss(target.clone())).unwrap();
        let w: Vec<f64> = spec.params.concat();
        let g = adjoint_state_gradient(&p, &w, TOL).unwrap();
        let out = spec.output().unwrap();
        let bp = crate::autodiff::backprop_feedforward(&spec, &crate::linalg::sub(&out, &target)).unwrap();
        assert_eq!(g, bp.param_grads.concat());
    }

    #[test]
    fn feedforward_generic_solve_agrees_with_backsubstitution() {
        let spec = three_layer_spec();
        let p = FeedforwardConstraints::new(&spec, half_sq_loss(vec![1.0, 1.0])).unwrap();
        let w: Vec<f64> = spec.params.concat();
        let s = p.solve_state(&w).unwrap();
        assert!(norm2(&p.constraint(&s, &w).unwrap()) == 0.0);
        let rhs: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let exact = p.solve_adjoint(&s, &w, &rhs, TOL).unwrap();
        let d1 = p.d1c(&s, &w).unwrap();
        let generic = solve_linear_general(&Adjoint(d1.as_ref()), &rhs, 1e-13).unwrap();
        for (a, b) in exact.iter().zip(&generic) {
            assert!((a - b).abs() < 1e-9);
        }
        // the maps are adjoint to each other
        let v: Vec<f64> = (0..s.len()).map(|i| (i as f64).sin()).collect();
        let u: Vec<f64> = (0..s.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        assert!((dot(&d1.apply(&v), &u) - dot(&v, &d1.adjoint_apply(&u))).abs() < 1e-12);
        let d2 = p.d2c(&s, &w).unwrap();
        let dw: Vec<f64> = (0..w.len()).map(|i| (i as f64 * 0.11).sin()).collect();
        assert!((dot(&d2.apply(&dw), &u) - dot(&dw, &d2.adjoint_apply(&u))).abs() < 1e-12);
    }

    #[test]
    fn feedforward_gradient_matches_finite_differences() {
        let spec = three_layer_spec();
        let p = FeedforwardConstraints::new(&spec, half_sq_loss(vec![0.5, 0.0])).unwrap();
        let w: Vec<f64> = spec.params.concat();
        let g = adjoint_state_gradient(&p, &w, TOL).unwrap();
        let obj = |w: &[f64]| {
            let s = p.solve_state(w).unwrap();
            p.objective(&s, w).unwrap()
        };
        let num = crate::numcheck::numerical_gradient(obj, &w).unwrap();
        for (a, b) in g.iter().zip(&num) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    // f(w, λ) = -λ/2 w² - b w + c, maximized at w* = -b/λ
    const B: f64 = 1.0;
    const C: f64 = 0.5;

    fn danskin_quadratic(lam: f64) -> f64 {
        danskin_gradient(|l| Ok(vec![-B / l[0]]), |w, _| Ok(vec![-0.5 * w[0] * w[0]]), &[lam]).unwrap()[0]
    }

    #[test]
    fn danskin_quadratic_closed_form() {
        // h(λ) = b²/(2λ) + c
        let g = danskin_quadratic(2.0);
        assert!((g + B * B / 8.0).abs() < 1e-15);
        let h = |l: &[f64]| B * B / (2.0 * l[0]) + C;
        let fd = directional_derivative(h, &[2.0], &[1.0], &FdScheme::central(1e-5)).unwrap();
        assert!((g - fd).abs() < 1e-9);
    }

    #[test]
    fn danskin_minimum_form() {
        // h(λ) = min_w λ/2 w² + b w + c, minimizer -b/λ, h'(λ) = b²/(2λ²)
        let g = danskin_gradient(|l| Ok(vec![-B / l[0]]), |w, _| Ok(vec![0.5 * w[0] * w[0]]), &[2.0]).unwrap();
        assert_eq!(g, vec![0.125]);
    }

    #[test]
    fn danskin_matches_unrolled_inner_solver() {
        let lam = 2.0;
        let l = Dual::new(lam, 1.0);
        let f = |w: &Dual<f64>, l: &Dual<f64>| {
            -(l.clone() * w.clone() * w.clone()).scale(0.5) - w.scale(B) + Dual::constant(C)
        };
        let mut w = Dual::constant(0.0);
        for _ in 0..200 {
            let grad = -(l.clone() * w.clone()) - Dual::constant(B);
            w = w + grad.scale(0.25);
        }
        let unrolled = f(&w, &l).d;
        assert!((unrolled - danskin_quadratic(lam)).abs() < 1e-6);
    }

    #[test]
    fn danskin_conjugate_gradient_is_argmax() {
        // Ω = ½‖·‖², w*(λ) = λ, ∇₂f = w
        let lam = [0.3, -1.2, 2.0];
        let g = danskin_gradient(|l| Ok(l.to_vec()), |w, _| Ok(w.to_vec()), &lam).unwrap();
        assert_eq!(g, lam.to_vec());
    }

    fn elementwise(u: Unary, n: usize) -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[n]);
        let y = b.unary(u, x);
        b.finish(y).unwrap()
    }

    #[test]
    fn inverse_function_examples() {
        let d = inverse_fn_jvp(&elementwise(Unary::Scale(2.0), 1), |o| Ok(vec![o[0] / 2.0]), &[3.0], &[1.0], TOL).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-14);
        let d = inverse_fn_jvp(&elementwise(Unary::Powi(3), 1), |o| Ok(vec![o[0].cbrt()]), &[8.0], &[1.0], TOL).unwrap();
        assert!((d[0] - 1.0 / 12.0).abs() < 1e-12);
        let omega = [0.5, 2.0, 7.0];
        let v = [1.0, -1.0, 3.0];
        let d = inverse_fn_jvp(&elementwise(Unary::Exp, 3), |o| Ok(o.iter().map(|x| x.ln()).collect()), &omega, &v, TOL).unwrap();
        for i in 0..3 {
            assert!((d[i] - v[i] / omega[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_with_singular_jacobian_fails() {
        let err = inverse_fn_jvp(&elementwise(Unary::Powi(3), 1), |_| Ok(vec![0.0]), &[0.0], &[1.0], TOL).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. }));
    }
}
