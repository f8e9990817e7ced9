//! Matrix-free linear operators on flat vectors.
//!
//! Implementations panic when handed a vector of the wrong length; callers
//! are expected to check dimensions once up front.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{jvp_flat, primitive_jvp, primitive_vjp, vjp_flat};
use crate::error::{Error, Result};
use crate::graph::{flatten, numel, unflatten, Graph, NodeId, Primitive, Tensor};
use crate::linalg::{dot, Matrix};

pub trait LinearMap {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64>;
}

impl LinearMap for Matrix {
    fn in_dim(&self) -> usize {
        self.cols
    }
    fn out_dim(&self) -> usize {
        self.rows
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v)
    }
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64> {
        self.matvec_t(u)
    }
}

/// A linear map from a pair of closures.
pub struct FnMap<F, G> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub apply: F,
    pub adjoint: G,
}

impl<F, G> LinearMap for FnMap<F, G>
where
    F: Fn(&[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self.apply)(v)
    }
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64> {
        (self.adjoint)(u)
    }
}

/// A self-adjoint map given by one closure.
pub fn symmetric<F: Fn(&[f64]) -> Vec<f64> + Clone>(dim: usize, f: F) -> FnMap<F, F> {
    FnMap {
        in_dim: dim,
        out_dim: dim,
        apply: f.clone(),
        adjoint: f,
    }
}

/// `A + ηI`
pub struct Shifted<'a> {
    pub inner: &'a dyn LinearMap,
    pub shift: f64,
}

impl LinearMap for Shifted<'_> {
    fn in_dim(&self) -> usize {
        self.inner.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.inner.out_dim()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut y = self.inner.apply(v);
        crate::linalg::axpy(self.shift, v, &mut y);
        y
    }
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64> {
        let mut y = self.inner.adjoint_apply(u);
        crate::linalg::axpy(self.shift, u, &mut y);
        y
    }
}

/// Jacobian of a whole graph at a point, as a linear map on flattened inputs.
pub struct GraphLinearization<'a> {
    graph: &'a Graph,
    point: Vec<f64>,
}

impl<'a> GraphLinearization<'a> {
    pub fn new(graph: &'a Graph, point: &[f64]) -> Result<Self> {
        graph.eval_flat(point)?;
        Ok(GraphLinearization {
            graph,
            point: point.to_vec(),
        })
    }
}

impl LinearMap for GraphLinearization<'_> {
    fn in_dim(&self) -> usize {
        self.point.len()
    }
    fn out_dim(&self) -> usize {
        numel(self.graph.output_shape())
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        jvp_flat(self.graph, &self.point, v).expect("point was evaluated at construction")
    }
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64> {
        vjp_flat(self.graph, &self.point, u).expect("point was evaluated at construction")
    }
}

/// Local Jacobian of one node with respect to all of its parents, concatenated.
pub struct NodeLinearization {
    primitive: Primitive,
    args: Vec<Tensor>,
    out: Tensor,
}

impl NodeLinearization {
    /// Linearize node `k` of `graph` at the values produced by `inputs`.
    pub fn new(graph: &Graph, inputs: &[Tensor], k: NodeId) -> Result<Self> {
        let values = graph.eval_trace(inputs)?;
        let node = graph
            .nodes()
            .get(k)
            .filter(|_| k < values.len())
            .ok_or_else(|| Error::InvalidArgument(format!("node {k} is not evaluated")))?;
        Ok(NodeLinearization {
            primitive: node.primitive.clone(),
            args: node.parents.iter().map(|&p| values[p].clone()).collect(),
            out: values[k].clone(),
        })
    }

    fn arg_shapes(&self) -> Vec<Vec<usize>> {
        self.args.iter().map(|a| a.shape().to_vec()).collect()
    }
}

impl LinearMap for NodeLinearization {
    fn in_dim(&self) -> usize {
        self.args.iter().map(|a| a.numel()).sum()
    }
    fn out_dim(&self) -> usize {
        self.out.numel()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let tans = unflatten(v, &self.arg_shapes()).expect("direction length");
        let refs: Vec<&Tensor> = self.args.iter().collect();
        let opt: Vec<Option<&Tensor>> = tans.iter().map(Some).collect();
        match primitive_jvp(&self.primitive, &refs, &self.out, &opt).expect("jvp rule") {
            Some(t) => t.into_data(),
            None => vec![0.0; self.out.numel()],
        }
    }
    fn adjoint_apply(&self, u: &[f64]) -> Vec<f64> {
        let r = Tensor::new(self.out.shape().to_vec(), u.to_vec()).expect("cotangent length");
        let refs: Vec<&Tensor> = self.args.iter().collect();
        flatten(&primitive_vjp(&self.primitive, &refs, &self.out, &r).expect("vjp rule"))
    }
}

/// Largest relative violation of `⟨A v, u⟩ = ⟨v, A* u⟩` over random Gaussian probes.
pub fn adjoint_mismatch(map: &dyn LinearMap, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let v: Vec<f64> = (0..map.in_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let u: Vec<f64> = (0..map.out_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let av = map.apply(&v);
        let atu = map.adjoint_apply(&u);
        let lhs = dot(&av, &u);
        let rhs = dot(&v, &atu);
        let scale = crate::linalg::norm2(&av) * crate::linalg::norm2(&u)
            + crate::linalg::norm2(&v) * crate::linalg::norm2(&atu);
        worst = worst.max((lhs - rhs).abs() / scale.max(1e-300));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matrix_is_adjoint_consistent() {
        let a = Matrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        assert!(adjoint_mismatch(&a, 10, 1) < 1e-14);
    }

    #[test]
    fn shifted_adds_identity() {
        let a = Matrix::identity(2);
        let s = Shifted { inner: &a, shift: 2.0 };
        assert_eq!(s.apply(&[1.0, -1.0]), vec![3.0, -3.0]);
    }
}
