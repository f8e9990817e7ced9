//! Fixed-step ODE integration `s′(t) = h(t, s, w)` and its gradients.
//!
//! Two routes to the gradient of `L(s(T))`: the continuous adjoint,
//! integrated backward with Euler while re-integrating the state backward,
//! and reverse mode through the unrolled Euler chain. They agree only as
//! `K → ∞`.

use std::io::Write;

use crate::autodiff::vjp_flat;
use crate::checkpoint::{vjp_full_cache, ChainProgram};
use crate::error::{check_len, Error, Result};
use crate::graph::{numel, Graph, GraphBuilder, Unary};

/// Right-hand side `h(t, s, w)` with its vector-Jacobian products.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn eval(&self, t: f64, s: &[f64], w: &[f64]) -> Result<Vec<f64>>;
    /// `(∂_s h* r, ∂_w h* r)`
    fn vjp(&self, t: f64, s: &[f64], w: &[f64], r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Dynamics given by a graph with inputs `t: [1]`, `s`, `w`.
#[derive(Clone, Debug)]
pub struct GraphDynamics {
    graph: Graph,
    state_dim: usize,
    param_dim: usize,
}

impl GraphDynamics {
    pub fn new(graph: Graph) -> Result<Self> {
        let shapes = graph.input_shapes();
        if shapes.len() != 3 || numel(&shapes[0]) != 1 {
            return Err(Error::InvalidArgument(
                "dynamics graph needs inputs (t: [1], s, w)".into(),
            ));
        }
        let state_dim = numel(&shapes[1]);
        check_len("dynamics output", numel(graph.output_shape()), state_dim)?;
        Ok(GraphDynamics {
            param_dim: numel(&shapes[2]),
            state_dim,
            graph,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn point(&self, t: f64, s: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_len("state", s.len(), self.state_dim)?;
        check_len("parameters", w.len(), self.param_dim)?;
        let mut p = Vec::with_capacity(1 + s.len() + w.len());
        p.push(t);
        p.extend_from_slice(s);
        p.extend_from_slice(w);
        Ok(p)
    }
}

impl Dynamics for GraphDynamics {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn param_dim(&self) -> usize {
        self.param_dim
    }
    fn eval(&self, t: f64, s: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.graph.eval_flat(&self.point(t, s, w)?)?.into_data())
    }
    fn vjp(&self, t: f64, s: &[f64], w: &[f64], r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = vjp_flat(&self.graph, &self.point(t, s, w)?, r)?;
        let gw = g.split_off(1 + self.state_dim);
        Ok((g.split_off(1), gw))
    }
}

/// `h(t, s, w) = w ⊙ s` on a state of dimension `n`.
pub fn linear_dynamics(n: usize) -> GraphDynamics {
    let mut b = GraphBuilder::new();
    b.input(&[1]);
    let s = b.input(&[n]);
    let w = b.input(&[n]);
    let out = b.mul(w, s);
    GraphDynamics::new(b.finish(out).expect("valid graph")).expect("valid dynamics")
}

/// `s = (q, p)`, `h = (p, -w² q)`.
pub fn harmonic_oscillator() -> GraphDynamics {
    let mut b = GraphBuilder::new();
    b.input(&[1]);
    let s = b.input(&[2]);
    let w = b.input(&[1]);
    let q = b.slice(s, 0, 1);
    let p = b.slice(s, 1, 1);
    let w2 = b.square(w);
    let a = b.mul(w2, q);
    let a = b.unary(Unary::Neg, a);
    let out = b.concat(&[p, a]);
    GraphDynamics::new(b.finish(out).expect("valid graph")).expect("valid dynamics")
}

/// Initial value problem on `[0, T]`.
pub struct OdeProblem<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub horizon: f64,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

impl OdeProblem<'_> {
    fn check(&self, steps: usize) -> Result<f64> {
        if steps == 0 {
            return Err(Error::InvalidArgument("need at least one step".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {}", self.horizon)));
        }
        check_len("initial state", self.x.len(), self.dynamics.state_dim())?;
        check_len("parameters", self.w.len(), self.dynamics.param_dim())?;
        Ok(self.horizon / steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeGradient {
    pub grad_x: Vec<f64>,
    pub grad_w: Vec<f64>,
}

fn blow_up(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::BlowUp { step },
        e => e,
    }
}

fn euler_step(h: &dyn Dynamics, t: f64, s: &[f64], w: &[f64], delta: f64, k: usize) -> Result<Vec<f64>> {
    let d = h.eval(t, s, w).map_err(blow_up(k))?;
    let next: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + delta * b).collect();
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::BlowUp { step: k });
    }
    Ok(next)
}

/// `s_k = s_{k-1} + δ h((k-1)δ, s_{k-1}, w)`; returns `s_0, ..., s_K`.
pub fn euler_integrate(problem: &OdeProblem, steps: usize) -> Result<Vec<Vec<f64>>> {
    let delta = problem.check(steps)?;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(problem.x.clone());
    for k in 1..=steps {
        let t = (k - 1) as f64 * delta;
        let next = euler_step(problem.dynamics, t, &traj[k - 1], &problem.w, delta, k)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Continuous adjoint with Euler discretization. The state is re-integrated
/// backward as `ŝ_{k-1} = ŝ_k - δ h_k(ŝ_k)` rather than read from the
/// forward pass, so the result differs from the exact discrete gradient by
/// the truncation error of that backward pass.
pub fn adjoint_gradient(
    problem: &OdeProblem,
    loss_grad: impl Fn(&[f64]) -> Vec<f64>,
    steps: usize,
) -> Result<OdeGradient> {
    let delta = problem.check(steps)?;
    let traj = euler_integrate(problem, steps)?;
    let h = problem.dynamics;
    let w = &problem.w;
    let mut s_hat = traj[steps].clone();
    let mut r = loss_grad(&s_hat);
    check_len("loss gradient", r.len(), s_hat.len())?;
    let mut g = vec![0.0; w.len()];
    for k in (1..=steps).rev() {
        let t = k as f64 * delta;
        let d = h.eval(t, &s_hat, w).map_err(blow_up(k))?;
        let (rs, rw) = h.vjp(t, &s_hat, w, &r).map_err(blow_up(k))?;
        for (si, di) in s_hat.iter_mut().zip(&d) {
            *si -= delta * di;
        }
        for (ri, x) in r.iter_mut().zip(&rs) {
            *ri += delta * x;
        }
        for (gi, x) in g.iter_mut().zip(&rw) {
            *gi += delta * x;
        }
        if s_hat.iter().chain(&r).any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { step: k });
        }
    }
    Ok(OdeGradient { grad_x: r, grad_w: g })
}

/// The Euler scheme as a chain on the augmented state `(s, w)`, with `w`
/// carried through unchanged.
pub struct EulerChain<'a> {
    dynamics: &'a dyn Dynamics,
    delta: f64,
    steps: usize,
}

impl<'a> EulerChain<'a> {
    pub fn new(dynamics: &'a dyn Dynamics, horizon: f64, steps: usize) -> Self {
        EulerChain {
            dynamics,
            delta: horizon / steps as f64,
            steps,
        }
    }

    /// `(x, w)` concatenated.
    pub fn initial_state(x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut s = x.to_vec();
        s.extend_from_slice(w);
        s
    }
}

impl ChainProgram for EulerChain<'_> {
    fn len(&self) -> usize {
        self.steps
    }
    fn step(&self, k: usize, sw: &[f64]) -> Vec<f64> {
        let n = self.dynamics.state_dim();
        let (s, w) = sw.split_at(n);
        let d = self
            .dynamics
            .eval(k as f64 * self.delta, s, w)
            .expect("trajectory was checked by a forward pass");
        let mut out: Vec<f64> = s.iter().zip(&d).map(|(a, b)| a + self.delta * b).collect();
        out.extend_from_slice(w);
        out
    }
    fn step_vjp(&self, k: usize, sw: &[f64], r: &[f64]) -> Vec<f64> {
        let n = self.dynamics.state_dim();
        let (s, w) = sw.split_at(n);
        let (rs, rw) = r.split_at(n);
        let (gs, gw) = self
            .dynamics
            .vjp(k as f64 * self.delta, s, w, rs)
            .expect("trajectory was checked by a forward pass");
        let mut out: Vec<f64> = rs.iter().zip(&gs).map(|(a, b)| a + self.delta * b).collect();
        out.extend(rw.iter().zip(&gw).map(|(a, b)| a + self.delta * b));
        out
    }
}

/// Exact gradient of the discretized objective `L(s_K)`, by reverse mode
/// through the stored Euler trajectory.
pub fn unrolled_gradient(
    problem: &OdeProblem,
    loss_grad: impl Fn(&[f64]) -> Vec<f64>,
    steps: usize,
) -> Result<OdeGradient> {
    let traj = euler_integrate(problem, steps)?;
    let u = loss_grad(&traj[steps]);
    check_len("loss gradient", u.len(), problem.x.len())?;
    let chain = EulerChain::new(problem.dynamics, problem.horizon, steps);
    let mut u_aug = u;
    u_aug.resize(problem.x.len() + problem.w.len(), 0.0);
    let out = vjp_full_cache(&chain, &EulerChain::initial_state(&problem.x, &problem.w), &u_aug)?;
    let mut grad_x = out.adjoint;
    let grad_w = grad_x.split_off(problem.x.len());
    Ok(OdeGradient { grad_x, grad_w })
}

/// Time, state and velocity of the leapfrog scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct LeapfrogState {
    pub t: f64,
    pub s: Vec<f64>,
    pub c: Vec<f64>,
}

/// One asynchronous leapfrog step:
/// `s̄ = s + δ/2 c`, `c̄ = h(t + δ/2, s̄)`, `c′ = 2c̄ - c`, `s′ = s̄ + δ/2 c′`.
///
/// The position update uses the new velocity, which makes the step with
/// `-δ` its exact inverse.
pub fn leapfrog_step(
    state: &LeapfrogState,
    h: impl Fn(f64, &[f64]) -> Result<Vec<f64>>,
    delta: f64,
) -> Result<LeapfrogState> {
    if delta == 0.0 || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be finite and non-zero, got {delta}")));
    }
    check_len("velocity", state.c.len(), state.s.len())?;
    let half = 0.5 * delta;
    let t_bar = state.t + half;
    let s_bar: Vec<f64> = state.s.iter().zip(&state.c).map(|(s, c)| s + half * c).collect();
    let c_bar = h(t_bar, &s_bar)?;
    check_len("dynamics output", c_bar.len(), s_bar.len())?;
    let c: Vec<f64> = c_bar.iter().zip(&state.c).map(|(cb, c)| 2.0 * cb - c).collect();
    let s: Vec<f64> = s_bar.iter().zip(&c).map(|(sb, c)| sb + half * c).collect();
    Ok(LeapfrogState { t: t_bar + half, s, c })
}

pub fn leapfrog_inverse(
    state: &LeapfrogState,
    h: impl Fn(f64, &[f64]) -> Result<Vec<f64>>,
    delta: f64,
) -> Result<LeapfrogState> {
    leapfrog_step(state, h, -delta)
}

/// `K` leapfrog steps from `(0, x, h(0, x))`; returns all `K + 1` states.
pub fn leapfrog_integrate(problem: &OdeProblem, steps: usize) -> Result<Vec<LeapfrogState>> {
    let delta = problem.check(steps)?;
    let h = |t: f64, s: &[f64]| problem.dynamics.eval(t, s, &problem.w);
    let c0 = h(0.0, &problem.x).map_err(blow_up(0))?;
    let mut out = vec![LeapfrogState {
        t: 0.0,
        s: problem.x.clone(),
        c: c0,
    }];
    for k in 1..=steps {
        let next = leapfrog_step(&out[k - 1], h, delta).map_err(blow_up(k))?;
        if next.s.iter().chain(&next.c).any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { step: k });
        }
        out.push(next);
    }
    Ok(out)
}

/// CSV `t,s0,s1,...`, one row per state.
pub fn write_trajectory_csv<W: Write>(out: W, delta: f64, traj: &[Vec<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let n = traj.first().map_or(0, |s| s.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("s{i}")));
    wtr.write_record(&header)?;
    for (k, s) in traj.iter().enumerate() {
        let mut row = vec![(k as f64 * delta).to_string()];
        row.extend(s.iter().map(|x| x.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{treeverse_plan, vjp_recursive_halving, vjp_with_schedule};
    use crate::numcheck::numerical_gradient;

    fn linear(w: f64, x: f64) -> (GraphDynamics, Vec<f64>, Vec<f64>) {
        (linear_dynamics(1), vec![x], vec![w])
    }

    fn problem<'a>(h: &'a dyn Dynamics, x: &[f64], w: &[f64], horizon: f64) -> OdeProblem<'a> {
        OdeProblem {
            dynamics: h,
            horizon,
            x: x.to_vec(),
            w: w.to_vec(),
        }
    }

    fn identity_loss(s: &[f64]) -> Vec<f64> {
        vec![1.0; s.len()]
    }

    fn zero_dynamics() -> GraphDynamics {
        let mut b = GraphBuilder::new();
        b.input(&[1]);
        let s = b.input(&[1]);
        b.input(&[1]);
        let out = b.unary(Unary::Scale(0.0), s);
        GraphDynamics::new(b.finish(out).unwrap()).unwrap()
    }

    #[test]
    fn zero_dynamics_is_constant() {
        let h = zero_dynamics();
        let p = problem(&h, &[1.3], &[0.4], 2.0);
        let traj = euler_integrate(&p, 10).unwrap();
        assert!(traj.iter().all(|s| s == &vec![1.3]));
        for g in [
            adjoint_gradient(&p, |s| vec![2.0 * s[0]], 10).unwrap(),
            unrolled_gradient(&p, |s| vec![2.0 * s[0]], 10).unwrap(),
        ] {
            assert_eq!(g.grad_x, vec![2.6]);
            assert_eq!(g.grad_w, vec![0.0]);
        }
    }

    #[test]
    fn euler_linear_growth() {
        let (h, x, w) = linear(1.0, 1.0);
        let p = problem(&h, &x, &w, 1.0);
        let s = euler_integrate(&p, 100).unwrap()[100][0];
        assert!((s - std::f64::consts::E).abs() / std::f64::consts::E < 0.02);
    }

    #[test]
    fn euler_first_order_slope() {
        let (h, x, w) = linear(1.0, 1.0);
        let p = problem(&h, &x, &w, 1.0);
        let ks = [50usize, 100, 200, 400, 800];
        let pts: Vec<(f64, f64)> = ks
            .iter()
            .map(|&k| {
                let s = euler_integrate(&p, k).unwrap()[k][0];
                ((k as f64).ln(), (s - std::f64::consts::E).abs().ln())
            })
            .collect();
        let slope = -fit_slope(&pts);
        assert!((slope - 1.0).abs() < 0.15, "{slope}");
    }

    fn fit_slope(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn blow_up_reports_step() {
        let (h, _, _) = linear(0.0, 1.0);
        let p = problem(&h, &[1.0], &[1e300], 1.0);
        let err = euler_integrate(&p, 4).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err:?}");
    }

    #[test]
    fn adjoint_linear_sensitivity() {
        let (h, x, w) = linear(0.5, 1.0);
        let p = problem(&h, &x, &w, 1.0);
        let g = adjoint_gradient(&p, identity_loss, 1000).unwrap();
        let e = 0.5f64.exp();
        assert!((g.grad_w[0] - e).abs() / e < 0.01);
        assert!((g.grad_x[0] - e).abs() / e < 0.01);
    }

    #[test]
    fn unrolled_linear_sensitivity_and_closed_form() {
        let (h, x, w) = linear(0.5, 1.0);
        let p = problem(&h, &x, &w, 1.0);
        let g = unrolled_gradient(&p, identity_loss, 1000).unwrap();
        let e = 0.5f64.exp();
        assert!((g.grad_w[0] - e).abs() / e < 0.01);
        // s_K = x (1 + wδ)^K exactly, so d/dw = Kδ x (1 + wδ)^(K-1)
        let k = 10;
        let g = unrolled_gradient(&p, identity_loss, k).unwrap();
        let d = 0.1;
        assert!((g.grad_w[0] - k as f64 * d * (1.0 + 0.5 * d).powi(k as i32 - 1)).abs() < 1e-12);
        assert!((g.grad_x[0] - (1.0 + 0.5 * d).powi(k as i32)).abs() < 1e-12);
    }

    #[test]
    fn adjoint_and_unrolled_converge_together() {
        let (h, x, w) = linear(0.5, 1.0);
        let p = problem(&h, &x, &w, 1.0);
        let gap = |k| {
            let a = adjoint_gradient(&p, identity_loss, k).unwrap();
            let u = unrolled_gradient(&p, identity_loss, k).unwrap();
            (a.grad_w[0] - u.grad_w[0]).abs().max((a.grad_x[0] - u.grad_x[0]).abs())
        };
        assert!(gap(10_000) < 1e-3);
        assert!(gap(10) > 1e-2);
    }

    #[test]
    fn unrolled_matches_checkpointed_reverse_mode() {
        let h = harmonic_oscillator();
        let p = problem(&h, &[1.0, 0.2], &[1.3], 2.0);
        let k = 37;
        let loss = |s: &[f64]| vec![s[0], 2.0 * s[1]];
        let g = unrolled_gradient(&p, loss, k).unwrap();
        let traj = euler_integrate(&p, k).unwrap();
        let mut u = loss(&traj[k]);
        u.push(0.0);
        let chain = EulerChain::new(&h, 2.0, k);
        let s0 = EulerChain::initial_state(&p.x, &p.w);
        let (_, plan) = treeverse_plan(k, 4).unwrap();
        for other in [
            vjp_with_schedule(&chain, &s0, &u, &plan).unwrap().adjoint,
            vjp_recursive_halving(&chain, &s0, &u).unwrap().adjoint,
        ] {
            assert!((other[0] - g.grad_x[0]).abs() < 1e-12);
            assert!((other[1] - g.grad_x[1]).abs() < 1e-12);
            assert!((other[2] - g.grad_w[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn unrolled_matches_finite_differences() {
        let h = harmonic_oscillator();
        let k = 20;
        let obj = |z: &[f64]| {
            let p = problem(&h, &z[..2], &z[2..], 1.5);
            let s = euler_integrate(&p, k).unwrap();
            0.5 * (s[k][0] * s[k][0] + s[k][1] * s[k][1])
        };
        let z = [0.7, -0.4, 0.9];
        let num = numerical_gradient(obj, &z).unwrap();
        let p = problem(&h, &z[..2], &z[2..], 1.5);
        let g = unrolled_gradient(&p, |s| s.to_vec(), k).unwrap();
        let ana = [g.grad_x[0], g.grad_x[1], g.grad_w[0]];
        for i in 0..3 {
            assert!((ana[i] - num[i]).abs() < 1e-8, "{i}");
        }
    }

    fn oscillator_h(h: &GraphDynamics) -> impl Fn(f64, &[f64]) -> Result<Vec<f64>> + '_ {
        move |t, s| h.eval(t, s, &[1.0])
    }

    #[test]
    fn leapfrog_zero_dynamics() {
        let zero = |_: f64, s: &[f64]| Ok(vec![0.0; s.len()]);
        let st = LeapfrogState {
            t: 0.5,
            s: vec![1.0, -2.0],
            c: vec![0.0, 0.0],
        };
        let next = leapfrog_step(&st, zero, 0.1).unwrap();
        assert_eq!(next.s, st.s);
        assert_eq!(next.c, st.c);
        assert!((next.t - 0.6).abs() < 1e-15);
    }

    #[test]
    fn leapfrog_round_trip() {
        let h = harmonic_oscillator();
        let f = oscillator_h(&h);
        let mut st = LeapfrogState {
            t: 0.0,
            s: vec![1.0, 0.0],
            c: vec![0.0, -1.0],
        };
        let start = st.clone();
        for _ in 0..100 {
            st = leapfrog_step(&st, &f, 0.05).unwrap();
        }
        for _ in 0..100 {
            st = leapfrog_inverse(&st, &f, 0.05).unwrap();
        }
        let err = st
            .s
            .iter()
            .zip(&start.s)
            .chain(st.c.iter().zip(&start.c))
            .map(|(a, b)| (a - b).abs())
            .fold(st.t.abs(), f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn euler_reversal_drifts_but_leapfrog_does_not() {
        let (h, _, _) = linear(0.0, 1.0);
        let w = [0.8];
        let d = 0.1;
        let s0 = [1.0];
        let fwd = euler_step(&h, 0.0, &s0, &w, d, 1).unwrap();
        let back = euler_step(&h, d, &fwd, &w, -d, 1).unwrap();
        let euler_drift = (back[0] - s0[0]).abs();
        let f = |t: f64, s: &[f64]| h.eval(t, s, &w);
        let st = LeapfrogState {
            t: 0.0,
            s: s0.to_vec(),
            c: f(0.0, &s0).unwrap(),
        };
        let rt = leapfrog_inverse(&leapfrog_step(&st, f, d).unwrap(), f, d).unwrap();
        assert!(euler_drift > 1e-3);
        assert!((rt.s[0] - s0[0]).abs() < 1e-14);
    }

    #[test]
    fn leapfrog_consistency() {
        let (h, x, w) = linear(1.0, 1.0);
        let p = problem(&h, &x, &w, 1.0);
        let pts: Vec<(f64, f64)> = [20usize, 40, 80, 160]
            .iter()
            .map(|&k| {
                let s = leapfrog_integrate(&p, k).unwrap()[k].s[0];
                ((k as f64).ln(), (s - std::f64::consts::E).abs().ln())
            })
            .collect();
        assert!(-fit_slope(&pts) >= 1.0);
    }

    #[test]
    fn trajectory_csv() {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, 0.5, &[vec![1.0, 2.0], vec![1.5, 2.5]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,s0,s1\n0,1,2\n0.5,1.5,2.5\n");
    }
}
