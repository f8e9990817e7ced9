//! Workloads shared by the benches.

use std::sync::Arc;

use diffprog::chain::ChainPotentials;
use diffprog::checkpoint::TanhChain;
use diffprog::graph::Unary;
use diffprog::{Graph, GraphBuilder};

/// `½‖s_K‖²` after `depth` tanh layers of width `dim`, as a graph of `s_0`.
pub fn tanh_mlp_loss(depth: usize, dim: usize) -> Graph {
    let chain = TanhChain::random(depth, dim, 17).to_graph().expect("chain graph");
    let mut b = GraphBuilder::new();
    let x = b.input(&[dim]);
    let s = b.composite(Arc::new(chain), &[x]);
    let sq = b.square(s);
    let t = b.sum(sq);
    let h = b.unary(Unary::Scale(0.5), t);
    b.finish(h).expect("loss graph")
}

/// Deterministic point of length `n` in (-1, 1).
pub fn point(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.7548776662).fract() * 2.0 - 1.0).collect()
}

/// Chain potentials with `k` steps and `m` states, filled from a fixed pattern.
pub fn chain_potentials(k: usize, m: usize) -> ChainPotentials {
    ChainPotentials::from_fn(k, m, |step, i, j| ((step * 31 + i * 7 + j * 13) % 17) as f64 / 17.0 - 0.5).expect("shape")
}
