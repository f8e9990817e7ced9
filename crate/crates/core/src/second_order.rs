//! Hessian-vector products, Gauss-Newton and Fisher products, conjugate
//! gradient, and a one-pass Hessian-diagonal approximation.

use std::sync::Arc;

use crate::autodiff::{jacobian_reverse, jvp, jvp_flat, value_and_gradient_flat, vjp, vjp_flat};
use crate::error::{check_len, Error, Result};
use crate::estimators::{monte_carlo, sample_categorical, EstimatorReport, Rng};
use crate::graph::{numel, Graph, GraphBuilder, Primitive, Tensor, Unary};
use crate::linalg::{axpy, dot, norm2, Matrix};
use crate::linear_map::LinearMap;
use crate::scalar::Dual;
use crate::smooth::softargmax;
use crate::tape::{self, Var};

/// Largest input dimension accepted by [`HvpMethod::FwdOnFwd`].
pub const FWD_ON_FWD_MAX_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HvpMethod {
    /// Reverse pass recorded on a tape, then reversed again on `⟨∇L, v⟩`.
    RevOnRev,
    /// Reverse pass over dual numbers.
    FwdOnRev,
    /// Forward pass recorded on a tape, then reversed.
    RevOnFwd,
    /// One second-order forward pass per coordinate.
    FwdOnFwd,
}

impl HvpMethod {
    pub const ALL: [HvpMethod; 4] = [
        HvpMethod::RevOnRev,
        HvpMethod::FwdOnRev,
        HvpMethod::RevOnFwd,
        HvpMethod::FwdOnFwd,
    ];
}

fn build_inputs<T: Clone>(graph: &Graph, mut f: impl FnMut(usize) -> T) -> Result<Vec<Tensor<T>>> {
    let mut k = 0;
    graph
        .input_shapes()
        .into_iter()
        .map(|s| {
            let data = (0..numel(&s)).map(|_| {
                k += 1;
                f(k - 1)
            });
            Tensor::new(s, data.collect())
        })
        .collect()
}

fn check_scalar(graph: &Graph) -> Result<()> {
    if numel(graph.output_shape()) != 1 {
        return Err(Error::NotScalar(graph.output_shape().to_vec()));
    }
    Ok(())
}

/// `∇²L(w)[v]` for a scalar-output graph with flattened inputs.
pub fn hvp(graph: &Graph, w: &[f64], v: &[f64], method: HvpMethod) -> Result<Vec<f64>> {
    check_scalar(graph)?;
    let p = graph.input_dim();
    check_len("point", w.len(), p)?;
    check_len("direction", v.len(), p)?;
    let out_shape = graph.output_shape().to_vec();
    match method {
        HvpMethod::FwdOnRev => {
            let x = build_inputs(graph, |i| Dual::new(w[i], v[i]))?;
            let seed = Tensor::new(out_shape, vec![Dual::constant(1.0)])?;
            let g = vjp(graph, &x, &seed)?;
            Ok(g.iter().flat_map(|t| t.data().iter().map(|d| d.d)).collect())
        }
        HvpMethod::RevOnFwd => {
            let leaves: Vec<Var> = w.iter().map(|&x| Var::new(x)).collect();
            let x = build_inputs(graph, |i| leaves[i].clone())?;
            let dirs = build_inputs(graph, |i| Var::new(v[i]))?;
            let t = jvp(graph, &x, &dirs)?;
            Ok(tape::grad(&t.data()[0], &leaves))
        }
        HvpMethod::RevOnRev => {
            let leaves: Vec<Var> = w.iter().map(|&x| Var::new(x)).collect();
            let x = build_inputs(graph, |i| leaves[i].clone())?;
            let seed = Tensor::new(out_shape, vec![Var::new(1.0)])?;
            let g = vjp(graph, &x, &seed)?;
            let mut gv = Var::new(0.0);
            for (gi, vi) in g.iter().flat_map(|t| t.data().iter()).zip(v) {
                gv = gv + gi.clone() * Var::new(*vi);
            }
            Ok(tape::grad(&gv, &leaves))
        }
        HvpMethod::FwdOnFwd => {
            if p > FWD_ON_FWD_MAX_DIM {
                return Err(Error::InvalidArgument(format!(
                    "forward-on-forward HVP is limited to dimension {FWD_ON_FWD_MAX_DIM}, got {p}"
                )));
            }
            (0..p)
                .map(|i| {
                    let x = build_inputs(graph, |j| {
                        Dual::new(
                            Dual::new(w[j], v[j]),
                            Dual::constant(if i == j { 1.0 } else { 0.0 }),
                        )
                    })?;
                    Ok(graph.eval_generic(&x)?.data()[0].d.d)
                })
                .collect()
        }
    }
}

/// The Hessian of a scalar graph at a point, as a symmetric linear map.
pub struct HessianMap<'a> {
    graph: &'a Graph,
    point: Vec<f64>,
    pub method: HvpMethod,
}

impl<'a> HessianMap<'a> {
    pub fn new(graph: &'a Graph, point: &[f64], method: HvpMethod) -> Result<Self> {
        check_scalar(graph)?;
        check_len("point", point.len(), graph.input_dim())?;
        graph.eval_flat(point)?;
        Ok(HessianMap {
            graph,
            point: point.to_vec(),
            method,
        })
    }
}

impl LinearMap for HessianMap<'_> {
    fn in_dim(&self) -> usize {
        self.point.len()
    }
    fn out_dim(&self) -> usize {
        self.point.len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        hvp(self.graph, &self.point, v, self.method).expect("point was evaluated at construction")
    }
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64> {
        self.apply(u)
    }
}

/// `∂f(w)* ∇²ℓ(f(w)) ∂f(w)` for an inner graph `f` and a scalar outer graph `ℓ`.
pub struct GaussNewtonOracle<'a> {
    pub inner: &'a Graph,
    pub outer: &'a Graph,
    point: Vec<f64>,
    inner_value: Vec<f64>,
}

impl<'a> GaussNewtonOracle<'a> {
    pub fn new(inner: &'a Graph, outer: &'a Graph, point: &[f64]) -> Result<Self> {
        check_scalar(outer)?;
        check_len("point", point.len(), inner.input_dim())?;
        let z = inner.eval_flat(point)?.into_data();
        if outer.input_dim() != z.len() {
            return Err(Error::Dimension(format!(
                "inner output has {} entries, outer loss takes {}",
                z.len(),
                outer.input_dim()
            )));
        }
        outer.eval_flat(&z)?;
        Ok(GaussNewtonOracle {
            inner,
            outer,
            point: point.to_vec(),
            inner_value: z,
        })
    }

    pub fn gnvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("direction", v.len(), self.point.len())?;
        let jv = jvp_flat(self.inner, &self.point, v)?;
        let hjv = hvp(self.outer, &self.inner_value, &jv, HvpMethod::FwdOnRev)?;
        vjp_flat(self.inner, &self.point, &hjv)
    }
}

impl LinearMap for GaussNewtonOracle<'_> {
    fn in_dim(&self) -> usize {
        self.point.len()
    }
    fn out_dim(&self) -> usize {
        self.point.len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.gnvp(v).expect("direction length")
    }
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64> {
        self.apply(u)
    }
}

/// Conjugate-gradient iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct CgState {
    pub v: Vec<f64>,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub iteration: usize,
}

impl CgState {
    /// Start from `v = 0`.
    pub fn new(b: &[f64]) -> Self {
        CgState {
            v: vec![0.0; b.len()],
            r: b.to_vec(),
            p: b.to_vec(),
            alpha: 0.0,
            beta: 0.0,
            iteration: 0,
        }
    }

    pub fn residual_norm(&self) -> f64 {
        norm2(&self.r)
    }

    pub fn step(&mut self, h: &dyn LinearMap) -> Result<()> {
        let hp = h.apply(&self.p);
        let curvature = dot(&self.p, &hp);
        if !(curvature > 0.0) {
            return Err(Error::Indefinite {
                iteration: self.iteration,
                curvature,
                advice: "the operator must be symmetric positive definite".into(),
            });
        }
        let rr = dot(&self.r, &self.r);
        self.alpha = rr / curvature;
        axpy(self.alpha, &self.p, &mut self.v);
        axpy(-self.alpha, &hp, &mut self.r);
        self.beta = dot(&self.r, &self.r) / rr;
        for (pi, ri) in self.p.iter_mut().zip(&self.r) {
            *pi = ri + self.beta * *pi;
        }
        self.iteration += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `‖r‖ / ‖b‖` from the residual recurrence.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Solve `H v = b` for symmetric positive definite `H`, stopping once
/// `‖r‖ ≤ tol ‖b‖`. Hitting `max_iter` returns the last iterate unconverged.
pub fn cg_solve(h: &dyn LinearMap, b: &[f64], tol: f64, max_iter: usize) -> Result<CgOutcome> {
    check_len("right-hand side", b.len(), h.in_dim())?;
    check_len("operator output", h.out_dim(), h.in_dim())?;
    let bn = norm2(b);
    if bn == 0.0 {
        return Ok(CgOutcome {
            solution: vec![0.0; b.len()],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut st = CgState::new(b);
    while st.residual_norm() > tol * bn && st.iteration < max_iter {
        st.step(h)?;
    }
    let relative_residual = st.residual_norm() / bn;
    Ok(CgOutcome {
        converged: relative_residual <= tol,
        iterations: st.iteration,
        relative_residual,
        solution: st.v,
    })
}

/// `(∇²L(w) + ηI)⁻¹ u` by conjugate gradient on Hessian-vector products.
pub fn ihvp(graph: &Graph, w: &[f64], u: &[f64], shift: f64, tol: f64) -> Result<CgOutcome> {
    if !(shift >= 0.0) {
        return Err(Error::InvalidArgument(format!("shift must be non-negative, got {shift}")));
    }
    let hess = HessianMap::new(graph, w, HvpMethod::FwdOnRev)?;
    let op = crate::linear_map::Shifted { inner: &hess, shift };
    cg_solve(&op, u, tol, 10 * w.len().max(1)).map_err(|e| match e {
        Error::Indefinite {
            iteration,
            curvature,
            ..
        } => Error::Indefinite {
            iteration,
            curvature,
            advice: format!("increase the shift η above {shift}"),
        },
        e => e,
    })
}

/// Layer of a chain admitted by [`hessian_diag_chain`].
#[derive(Clone, Debug, PartialEq)]
pub enum DiagLayer {
    /// `t = W s` with `W` fixed at its current value; its entries are the parameters.
    Linear(Matrix),
    Elementwise(Unary),
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DiagChain {
    pub layers: Vec<DiagLayer>,
}

/// Approximate Hessian diagonals from one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianDiag {
    /// With respect to the chain input.
    pub input: Vec<f64>,
    /// With respect to each layer's weights, row-major; empty for elementwise layers.
    pub params: Vec<Vec<f64>>,
}

impl DiagChain {
    /// Read a chain of `matvec(constant, ·)` and elementwise nodes ending at the output.
    pub fn from_graph(graph: &Graph) -> Result<Self> {
        if graph.num_inputs() != 1 || graph.input_shapes()[0].len() != 1 {
            return Err(Error::Unsupported("a chain needs exactly one vector input".into()));
        }
        let nodes = graph.nodes();
        let mut layers = Vec::new();
        let mut k = graph.output();
        loop {
            let node = &nodes[k];
            match &node.primitive {
                Primitive::Input { .. } => break,
                Primitive::Elementwise(u) => {
                    layers.push(DiagLayer::Elementwise(*u));
                    k = node.parents[0];
                }
                Primitive::Matvec => match &nodes[node.parents[0]].primitive {
                    Primitive::Constant(t) if t.rank() == 2 => {
                        layers.push(DiagLayer::Linear(Matrix::new(
                            t.shape()[0],
                            t.shape()[1],
                            t.data().to_vec(),
                        )?));
                        k = node.parents[1];
                    }
                    _ => {
                        return Err(Error::Unsupported(format!(
                            "node {k}: matvec weights must be a constant matrix"
                        )))
                    }
                },
                other => {
                    return Err(Error::Unsupported(format!(
                        "node {k}: `{}` has no diagonal backpropagation rule",
                        other.kind()
                    )))
                }
            }
        }
        layers.reverse();
        Ok(DiagChain { layers })
    }

    pub fn to_graph(&self, in_dim: usize) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let x = b.input(&[in_dim]);
        let out = self.emit(&mut b, x);
        b.finish(out)
    }

    /// The chain followed by a scalar loss.
    pub fn compose_with_loss(&self, in_dim: usize, loss: &Graph) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let x = b.input(&[in_dim]);
        let z = self.emit(&mut b, x);
        let l = b.composite(Arc::new(loss.clone()), &[z]);
        b.finish(l)
    }

    fn emit(&self, b: &mut GraphBuilder, mut s: usize) -> usize {
        for layer in &self.layers {
            s = match layer {
                DiagLayer::Linear(w) => {
                    let c = b.constant(
                        Tensor::matrix(w.rows, w.cols, w.data.clone()).expect("matrix data"),
                    );
                    b.matvec(c, s)
                }
                DiagLayer::Elementwise(u) => b.unary(*u, s),
            };
        }
        s
    }

    /// Input of every layer, then the output.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut states = vec![x.to_vec()];
        for layer in &self.layers {
            let s = states.last().unwrap();
            let next = match layer {
                DiagLayer::Linear(w) => {
                    check_len("linear layer input", s.len(), w.cols)?;
                    w.matvec(s)
                }
                DiagLayer::Elementwise(u) => s.iter().map(|t| u.value(t)).collect(),
            };
            states.push(next);
        }
        Ok(states)
    }
}

/// Backpropagate the gradient `r` and a diagonal curvature estimate `d`:
/// elementwise `a`: `d ← r ⊙ a″(t) + d ⊙ a′(t)²`, `r ← r ⊙ a′(t)`;
/// linear `W`: weights get `d_i s_j²`, then `d ← (W⊙W)ᵀ d`, `r ← Wᵀ r`.
/// Cross terms are dropped, so the result is exact only when every Jacobian is diagonal.
pub fn hessian_diag_chain(chain: &DiagChain, x: &[f64], loss: &Graph) -> Result<HessianDiag> {
    let states = chain.forward(x)?;
    let z = states.last().unwrap();
    check_scalar(loss)?;
    check_len("loss input", loss.input_dim(), z.len())?;
    let (_, mut r) = value_and_gradient_flat(loss, z)?;
    let mut d: Vec<f64> = (0..z.len())
        .map(|i| {
            let mut e = vec![0.0; z.len()];
            e[i] = 1.0;
            hvp(loss, z, &e, HvpMethod::FwdOnRev).map(|h| h[i])
        })
        .collect::<Result<_>>()?;
    let mut params = vec![Vec::new(); chain.layers.len()];
    for (k, layer) in chain.layers.iter().enumerate().rev() {
        let s = &states[k];
        match layer {
            DiagLayer::Elementwise(u) => {
                for i in 0..s.len() {
                    let a1 = u.derivative(&s[i]);
                    let a2 = u.derivative(&Dual::new(s[i], 1.0)).d;
                    d[i] = r[i] * a2 + d[i] * a1 * a1;
                    r[i] *= a1;
                }
            }
            DiagLayer::Linear(w) => {
                let mut pd = Vec::with_capacity(w.rows * w.cols);
                for i in 0..w.rows {
                    pd.extend(s.iter().map(|sj| d[i] * sj * sj));
                }
                params[k] = pd;
                let w2 = Matrix::new(w.rows, w.cols, w.data.iter().map(|x| x * x).collect())?;
                d = w2.matvec_t(&d);
                r = w.matvec_t(&r);
            }
        }
    }
    Ok(HessianDiag { input: d, params })
}

/// Categorical likelihood `p(y | w) = softargmax(f(w))_y` with logits from a graph.
pub struct CategoricalModel<'a> {
    pub logits: &'a Graph,
    w: Vec<f64>,
    probs: Vec<f64>,
    /// `∇_w log p(y | w)` for every class `y`.
    scores: Vec<Vec<f64>>,
}

impl<'a> CategoricalModel<'a> {
    pub fn new(logits: &'a Graph, w: &[f64]) -> Result<Self> {
        if logits.output_shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "logits must be a vector, found shape {:?}",
                logits.output_shape()
            )));
        }
        check_len("parameters", w.len(), logits.input_dim())?;
        let theta = logits.eval_flat(w)?.into_data();
        let probs = softargmax(&theta, 1.0);
        let scores = (0..theta.len())
            .map(|y| {
                let mut u: Vec<f64> = probs.iter().map(|p| -p).collect();
                u[y] += 1.0;
                vjp_flat(logits, w, &u)
            })
            .collect::<Result<_>>()?;
        Ok(CategoricalModel {
            logits,
            w: w.to_vec(),
            probs,
            scores,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn score(&self, y: usize) -> &[f64] {
        &self.scores[y]
    }

    /// Exact `∂f* (diag(π) − ππᵀ) ∂f v`, the Gauss-Newton product of the negative log-likelihood.
    pub fn gnvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("direction", v.len(), self.w.len())?;
        let jv = jvp_flat(self.logits, &self.w, v)?;
        let pj = dot(&self.probs, &jv);
        let h: Vec<f64> = self.probs.iter().zip(&jv).map(|(p, x)| p * (x - pj)).collect();
        vjp_flat(self.logits, &self.w, &h)
    }

    /// Exact Gauss-Newton diagonal.
    pub fn gn_diag_exact(&self) -> Result<Vec<f64>> {
        let j = jacobian_reverse(self.logits, &self.w)?;
        let m = self.num_classes();
        Ok((0..self.w.len())
            .map(|i| {
                let col: Vec<f64> = (0..m).map(|a| j.get(a, i)).collect();
                let pc = dot(&self.probs, &col);
                (0..m).map(|a| self.probs[a] * col[a] * (col[a] - pc)).sum()
            })
            .collect())
    }

    fn draw(
        &self,
        sampler: &dyn Fn(&[f64], &mut Rng) -> usize,
        rng: &mut Rng,
    ) -> Result<usize> {
        let y = sampler(&self.probs, rng);
        if y >= self.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "sampler returned class {y}, model has {}",
                self.num_classes()
            )));
        }
        Ok(y)
    }

    /// Monte-Carlo `E[∇log p ⟨∇log p, v⟩]` with labels drawn by `sampler`.
    pub fn fisher_vp_sampled(
        &self,
        v: &[f64],
        sampler: &dyn Fn(&[f64], &mut Rng) -> usize,
        num_samples: usize,
        seed: u64,
    ) -> Result<EstimatorReport> {
        check_len("direction", v.len(), self.w.len())?;
        monte_carlo(seed, num_samples, |rng| {
            let s = self.score(self.draw(sampler, rng)?);
            let c = dot(s, v);
            Ok(s.iter().map(|x| x * c).collect())
        })
    }

    /// Monte-Carlo mean score, which is zero in expectation.
    pub fn mean_score(&self, num_samples: usize, seed: u64) -> Result<EstimatorReport> {
        monte_carlo(seed, num_samples, |rng| {
            Ok(self.score(sample_categorical(&self.probs, rng)).to_vec())
        })
    }

    /// Monte-Carlo `E[∇log p ⊙ ∇log p]` over labels drawn from the model.
    pub fn gn_diag_bartlett(&self, num_samples: usize, seed: u64) -> Result<EstimatorReport> {
        monte_carlo(seed, num_samples, |rng| {
            let s = self.score(sample_categorical(&self.probs, rng));
            Ok(s.iter().map(|x| x * x).collect())
        })
    }

    /// The same expectation summed over every label.
    pub fn gn_diag_exhaustive(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.w.len()];
        for (p, s) in self.probs.iter().zip(&self.scores) {
            for (o, x) in out.iter_mut().zip(s) {
                *o += p * x * x;
            }
        }
        out
    }
}

/// Logits `W x` with parameters `W` (`classes × x.len()`, row-major) and fixed features `x`.
pub fn linear_softmax_logits(x: &[f64], classes: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let w = b.input(&[classes, x.len()]);
    let c = b.constant(Tensor::vector(x.to_vec()));
    let z = b.matvec(w, c);
    b.finish(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::categorical_sampler;
    use crate::graph::fixtures::{exp_sqrt_graph, half_sq_norm_graph};
    use crate::graph::Reduction;
    use crate::linear_map::symmetric;
    use rand::{Rng as _, SeedableRng};

    fn quartic() -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let q = b.unary(Unary::Powi(4), x);
        let s = b.sum(q);
        let out = b.unary(Unary::Scale(0.25), s);
        b.finish(out).unwrap()
    }

    fn mlp_loss() -> Graph {
        let mut b = GraphBuilder::new();
        let w1 = b.input(&[3, 2]);
        let w2 = b.input(&[2, 3]);
        let x = b.constant(Tensor::vector(vec![0.5, -1.0]));
        let h = b.matvec(w1, x);
        let h = b.unary(Unary::Tanh, h);
        let z = b.matvec(w2, h);
        let l = b.reduce(Reduction::LogSumExp, z);
        b.finish(l).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_and_quartic_examples() {
        let g = half_sq_norm_graph(3);
        let q = quartic();
        for m in HvpMethod::ALL {
            assert!(close(&hvp(&g, &[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0], m).unwrap(), &[0.5, -1.0, 2.0], 1e-14));
            assert!(close(&hvp(&q, &[1.0, 2.0], &[1.0, 1.0], m).unwrap(), &[3.0, 12.0], 1e-12));
        }
    }

    #[test]
    fn methods_agree_on_mlp() {
        let g = mlp_loss();
        let mut rng = Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = hvp(&g, &w, &v, HvpMethod::FwdOnRev).unwrap();
        for m in HvpMethod::ALL {
            assert!(close(&hvp(&g, &w, &v, m).unwrap(), &base, 1e-10), "{m:?}");
        }
    }

    #[test]
    fn second_difference_agrees() {
        let g = exp_sqrt_graph();
        let w = [0.3, 0.8];
        let v = [0.6, -0.4];
        let hv = hvp(&g, &w, &v, HvpMethod::RevOnRev).unwrap();
        let scheme = crate::numcheck::FdScheme::new(crate::numcheck::FdKind::Central, 1e-4, 1, 2).unwrap();
        let fd = crate::numcheck::directional_derivative(|x| g.eval_flat(x).unwrap().item(), &w, &v, &scheme).unwrap();
        assert!((dot(&v, &hv) - fd).abs() < 1e-4);
    }

    #[test]
    fn fwd_on_fwd_dimension_cap() {
        let g = half_sq_norm_graph(65);
        let w = vec![0.0; 65];
        assert!(hvp(&g, &w, &w, HvpMethod::FwdOnFwd).is_err());
        assert!(hvp(&g, &w, &w, HvpMethod::FwdOnRev).is_ok());
    }

    #[test]
    fn cg_examples() {
        let id = Matrix::identity(3);
        let out = cg_solve(&id, &[1.0, 2.0, 3.0], 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(close(&out.solution, &[1.0, 2.0, 3.0], 1e-15));
        let d = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 10.0]).unwrap();
        let out = cg_solve(&d, &[1.0, 10.0], 1e-12, 10).unwrap();
        assert!(out.iterations <= 2 && out.converged);
        assert!(close(&out.solution, &[1.0, 1.0], 1e-12));
    }

    #[test]
    fn cg_residuals_are_orthogonal() {
        let a = Matrix::from_fn(5, 5, |i, j| if i == j { 4.0 } else { 1.0 / (1.0 + (i + j) as f64) });
        let b = [1.0, -1.0, 2.0, 0.5, 3.0];
        let mut st = CgState::new(&b);
        for _ in 0..4 {
            let prev = st.clone();
            st.step(&a).unwrap();
            let hp = a.matvec(&prev.p);
            let mut expect = prev.r.clone();
            axpy(-st.alpha, &hp, &mut expect);
            assert!(close(&st.r, &expect, 1e-14));
            assert!(dot(&st.r, &prev.r).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_rejects_indefinite() {
        let a = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(cg_solve(&a, &[0.0, 1.0], 1e-10, 5), Err(Error::Indefinite { .. })));
    }

    #[test]
    fn ihvp_examples() {
        let q = quartic();
        let out = ihvp(&q, &[1.0, 2.0], &[3.0, 12.0], 0.0, 1e-12).unwrap();
        assert!(close(&out.solution, &[1.0, 1.0], 1e-10));
        let g = half_sq_norm_graph(2);
        let out = ihvp(&g, &[1.0, 1.0], &[2.0, -4.0], 0.0, 1e-12).unwrap();
        assert!(close(&out.solution, &[2.0, -4.0], 1e-12));
        let out = ihvp(&q, &[1.0, 2.0], &[3.0, 12.0], 1e6, 1e-12).unwrap();
        assert!((out.solution[0] / 3e-6 - 1.0).abs() < 0.01);
        assert!((out.solution[1] / 12e-6 - 1.0).abs() < 0.01);
    }

    #[test]
    fn ihvp_indefinite_advice() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[1]);
        let s = b.unary(Unary::Sin, x);
        let out = b.sum(s);
        let g = b.finish(out).unwrap();
        match ihvp(&g, &[1.0], &[1.0], 0.0, 1e-10) {
            Err(Error::Indefinite { advice, .. }) => assert!(advice.contains("shift")),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn sq_loss(target: &[f64]) -> Graph {
        let mut b = GraphBuilder::new();
        let z = b.input(&[target.len()]);
        let y = b.constant(Tensor::vector(target.iter().map(|t| -t).collect()));
        let d = b.add(z, y);
        let s = b.square(d);
        let s = b.sum(s);
        let h = b.unary(Unary::Scale(0.5), s);
        b.finish(h).unwrap()
    }

    #[test]
    fn gnvp_identity_and_linear() {
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let id = b.finish(x).unwrap();
        let loss = sq_loss(&[1.0, 0.0, -1.0]);
        let gn = GaussNewtonOracle::new(&id, &loss, &[0.1, 0.2, 0.3]).unwrap();
        assert!(close(&gn.gnvp(&[1.0, -2.0, 0.5]).unwrap(), &[1.0, -2.0, 0.5], 1e-15));

        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let a = b.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap());
        let z = b.matvec(a, x);
        let lin = b.finish(z).unwrap();
        let mut b = GraphBuilder::new();
        let z = b.input(&[3]);
        let l = b.reduce(Reduction::LogSumExp, z);
        let lse = b.finish(l).unwrap();
        let w = [0.4, -0.3];
        let gn = GaussNewtonOracle::new(&lin, &lse, &w).unwrap();
        let mut b = GraphBuilder::new();
        let x = b.input(&[2]);
        let c = b.composite(Arc::new(lin.clone()), &[x]);
        let l = b.composite(Arc::new(lse.clone()), &[c]);
        let full = b.finish(l).unwrap();
        let v = [1.0, 2.0];
        assert!(close(&gn.gnvp(&v).unwrap(), &hvp(&full, &w, &v, HvpMethod::RevOnRev).unwrap(), 1e-10));
    }

    #[test]
    fn gnvp_shape_mismatch() {
        let loss = sq_loss(&[1.0, 2.0]);
        let g = half_sq_norm_graph(3);
        let mut b = GraphBuilder::new();
        let x = b.input(&[3]);
        let id = b.finish(x).unwrap();
        assert!(GaussNewtonOracle::new(&id, &loss, &[0.0; 3]).is_err());
        assert!(GaussNewtonOracle::new(&id, &g, &[0.0; 3]).is_ok());
    }

    #[test]
    fn gnvp_is_psd_on_mlp() {
        let mut b = GraphBuilder::new();
        let w1 = b.input(&[3, 2]);
        let w2 = b.input(&[2, 3]);
        let x = b.constant(Tensor::vector(vec![0.5, -1.0]));
        let h = b.matvec(w1, x);
        let h = b.unary(Unary::Tanh, h);
        let z = b.matvec(w2, h);
        let net = b.finish(z).unwrap();
        let mut b = GraphBuilder::new();
        let z = b.input(&[2]);
        let l = b.reduce(Reduction::LogSumExp, z);
        let lse = b.finish(l).unwrap();
        let mut rng = Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gn = GaussNewtonOracle::new(&net, &lse, &w).unwrap();
        for _ in 0..100 {
            let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(dot(&v, &gn.gnvp(&v).unwrap()) >= -1e-12);
        }
        assert!(crate::linear_map::adjoint_mismatch(&gn, 5, 2) < 1e-12);
    }

    #[test]
    fn fisher_matches_gn_and_one_hot_is_zero() {
        let x = [0.5, -1.0, 2.0];
        let logits = linear_softmax_logits(&x, 3).unwrap();
        let w: Vec<f64> = (0..9).map(|i| 0.1 * i as f64 - 0.4).collect();
        let model = CategoricalModel::new(&logits, &w).unwrap();
        let v: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let exact = model.gnvp(&v).unwrap();
        let est = model.fisher_vp_sampled(&v, &categorical_sampler_probs, 10_000, 5).unwrap();
        for ((e, m), se) in exact.iter().zip(&est.estimate).zip(est.std_error()) {
            assert!((e - m).abs() <= 5.0 * se + 1e-12);
        }
        let bart = model.mean_score(10_000, 6).unwrap();
        for (m, se) in bart.estimate.iter().zip(bart.std_error()) {
            assert!(m.abs() <= 5.0 * se + 1e-12);
        }

        let hot = [1000.0, 0.0, 0.0];
        let mut b = GraphBuilder::new();
        let t = b.input(&[3]);
        let id = b.finish(t).unwrap();
        let m = CategoricalModel::new(&id, &hot).unwrap();
        let r = m.fisher_vp_sampled(&[1.0, 1.0, 1.0], &categorical_sampler_probs, 100, 1).unwrap();
        assert!(r.estimate.iter().all(|x| *x == 0.0));
        assert!(r.variance.iter().all(|x| *x == 0.0));
    }

    fn categorical_sampler_probs(p: &[f64], rng: &mut Rng) -> usize {
        sample_categorical(p, rng)
    }

    #[test]
    fn sampler_out_of_support() {
        let logits = linear_softmax_logits(&[1.0], 2).unwrap();
        let model = CategoricalModel::new(&logits, &[0.0, 0.0]).unwrap();
        assert!(model.fisher_vp_sampled(&[1.0, 0.0], &|_, _| 7, 10, 0).is_err());
        // logits-based sampler on probabilities is still in range
        assert!(model.fisher_vp_sampled(&[1.0, 0.0], &|p, r| categorical_sampler(p, r), 10, 0).is_ok());
    }

    #[test]
    fn gn_diagonal_estimates() {
        let x = [0.3, 1.2];
        let logits = linear_softmax_logits(&x, 3).unwrap();
        let w = [0.2, -0.1, 0.4, 0.3, -0.5, 0.1];
        let model = CategoricalModel::new(&logits, &w).unwrap();
        let exact = model.gn_diag_exact().unwrap();
        assert!(close(&model.gn_diag_exhaustive(), &exact, 1e-10));
        let est = model.gn_diag_bartlett(10_000, 9).unwrap();
        for ((e, m), se) in exact.iter().zip(&est.estimate).zip(est.std_error()) {
            assert!((e - m).abs() <= 5.0 * se);
        }
        let sym = CategoricalModel::new(&logits, &[0.0; 6]).unwrap();
        let d = sym.gn_diag_exhaustive();
        for j in 0..2 {
            assert!((d[j] - d[2 + j]).abs() < 1e-15 && (d[j] - d[4 + j]).abs() < 1e-15);
        }
    }

    #[test]
    fn diag_exact_for_elementwise_chain() {
        let chain = DiagChain {
            layers: vec![
                DiagLayer::Elementwise(Unary::Tanh),
                DiagLayer::Elementwise(Unary::Sin),
                DiagLayer::Elementwise(Unary::Softplus),
            ],
        };
        let mut b = GraphBuilder::new();
        let z = b.input(&[4]);
        let l = b.reduce(Reduction::LogSumExp, z);
        let loss = b.finish(l).unwrap();
        let full = chain.compose_with_loss(4, &loss).unwrap();
        let x = [0.3, -1.1, 0.7, 2.0];
        let est = hessian_diag_chain(&chain, &x, &loss).unwrap();
        for i in 0..4 {
            let mut e = [0.0; 4];
            e[i] = 1.0;
            let h = hvp(&full, &x, &e, HvpMethod::FwdOnRev).unwrap();
            assert!((est.input[i] - h[i]).abs() < 1e-10);
        }
        assert_eq!(DiagChain::from_graph(&chain.to_graph(4).unwrap()).unwrap(), chain);
    }

    #[test]
    fn diag_linear_quadratic() {
        let w = Matrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64 * 0.1);
        let chain = DiagChain {
            layers: vec![DiagLayer::Linear(w)],
        };
        let x = [1.0, -2.0, 0.5];
        let est = hessian_diag_chain(&chain, &x, &sq_loss(&[0.3, 0.1])).unwrap();
        let expect: Vec<f64> = (0..2).flat_map(|_| x.iter().map(|v| v * v)).collect();
        assert!(close(&est.params[0], &expect, 1e-14));
    }

    #[test]
    fn diag_zero_loss_curvature() {
        let chain = DiagChain {
            layers: vec![DiagLayer::Elementwise(Unary::Tanh), DiagLayer::Linear(Matrix::identity(2))],
        };
        let mut b = GraphBuilder::new();
        let z = b.input(&[2]);
        let c = b.constant(Tensor::scalar(0.0));
        let m = b.mul(z, c);
        let s = b.sum(m);
        let loss = b.finish(s).unwrap();
        let est = hessian_diag_chain(&chain, &[0.4, -0.2], &loss).unwrap();
        assert!(est.input.iter().chain(&est.params[1]).all(|x| *x == 0.0));
    }

    #[test]
    fn from_graph_rejects_unsupported() {
        let g = half_sq_norm_graph(2);
        assert!(matches!(DiagChain::from_graph(&g), Err(Error::Unsupported(_))));
    }

    #[test]
    fn hutchinson_oracle_matches_diagonal() {
        let g = mlp_loss();
        let w: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.2 - 0.4).collect();
        let h = HessianMap::new(&g, &w, HvpMethod::FwdOnRev).unwrap();
        let diag: Vec<f64> = (0..12)
            .map(|i| {
                let mut e = vec![0.0; 12];
                e[i] = 1.0;
                h.apply(&e)[i]
            })
            .collect();
        let est = monte_carlo(4, 4000, |rng| {
            let om: Vec<f64> = (0..12).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let hw = h.apply(&om);
            Ok(om.iter().zip(&hw).map(|(a, b)| a * b).collect())
        })
        .unwrap();
        for ((d, m), se) in diag.iter().zip(&est.estimate).zip(est.std_error()) {
            assert!((d - m).abs() <= 5.0 * se + 1e-12);
        }
        let sym = symmetric(2, |v: &[f64]| vec![2.0 * v[0], 3.0 * v[1]]);
        assert_eq!(cg_solve(&sym, &[2.0, 3.0], 1e-12, 5).unwrap().solution, vec![1.0, 1.0]);
    }
}
