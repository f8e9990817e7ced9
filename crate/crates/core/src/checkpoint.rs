//! Reverse mode over chains `s_{k+1} = f_k(s_k)`, `k = 0..K`, with different
//! memory/recomputation trade-offs and exact cost accounting.
//!
//! Costs count calls to `step`; memory counts stored states.

use std::cell::Cell;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::graph::{Graph, GraphBuilder, Tensor, Unary};

pub trait ChainProgram {
    /// Number of steps `K`.
    fn len(&self) -> usize;
    /// `s_{k+1} = f_k(s_k)`
    fn step(&self, k: usize, s: &[f64]) -> Vec<f64>;
    /// `∂f_k(s_k)*[r]`
    fn step_vjp(&self, k: usize, s: &[f64], r: &[f64]) -> Vec<f64>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Calls to `step`.
    pub calls: usize,
    /// Largest number of states held at once.
    pub peak_slots: usize,
    pub stores: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainVjp {
    /// `∂f(s_0)*[u]`
    pub adjoint: Vec<f64>,
    pub counters: Counters,
}

fn check_chain(chain: &dyn ChainProgram) -> Result<()> {
    if chain.is_empty() {
        return Err(Error::InvalidArgument("chain has no steps".into()));
    }
    Ok(())
}

/// Store every state on the way forward.
pub fn vjp_full_cache(chain: &dyn ChainProgram, s0: &[f64], u: &[f64]) -> Result<ChainVjp> {
    check_chain(chain)?;
    let k = chain.len();
    let mut states = Vec::with_capacity(k);
    states.push(s0.to_vec());
    let mut c = Counters {
        calls: 0,
        peak_slots: 1,
        stores: 1,
    };
    for i in 0..k - 1 {
        let next = chain.step(i, &states[i]);
        c.calls += 1;
        states.push(next);
        c.stores += 1;
        c.peak_slots = c.peak_slots.max(states.len());
    }
    let mut r = u.to_vec();
    for i in (0..k).rev() {
        r = chain.step_vjp(i, &states[i], &r);
    }
    Ok(ChainVjp { adjoint: r, counters: c })
}

/// Keep only `s_0`; recompute each state from it.
pub fn vjp_full_recompute(chain: &dyn ChainProgram, s0: &[f64], u: &[f64]) -> Result<ChainVjp> {
    check_chain(chain)?;
    let mut c = Counters {
        calls: 0,
        peak_slots: 1,
        stores: 1,
    };
    let mut r = u.to_vec();
    for i in (0..chain.len()).rev() {
        let mut s = s0.to_vec();
        for j in 0..i {
            s = chain.step(j, &s);
            c.calls += 1;
        }
        r = chain.step_vjp(i, &s, &r);
    }
    Ok(ChainVjp { adjoint: r, counters: c })
}

struct Halving<'a> {
    chain: &'a dyn ChainProgram,
    counters: Counters,
    live: usize,
}

impl Halving<'_> {
    /// Adjoint of `s_start` given that of `s_{start+len}`. `stored` tells
    /// whether the caller already holds `s_start` in a slot.
    fn run(&mut self, start: usize, len: usize, s: &[f64], r: Vec<f64>, stored: bool) -> Vec<f64> {
        if len == 1 {
            return self.chain.step_vjp(start, s, &r);
        }
        if !stored {
            self.live += 1;
            self.counters.stores += 1;
            self.counters.peak_slots = self.counters.peak_slots.max(self.live);
        }
        let l = len.div_ceil(2);
        let mut mid = s.to_vec();
        for j in start..start + l {
            mid = self.chain.step(j, &mid);
            self.counters.calls += 1;
        }
        let r = self.run(start + l, len - l, &mid, r, false);
        drop(mid);
        let r = self.run(start, l, s, r, true);
        if !stored {
            self.live -= 1;
        }
        r
    }
}

/// Split the chain at `⌈K/2⌉` recursively.
pub fn vjp_recursive_halving(chain: &dyn ChainProgram, s0: &[f64], u: &[f64]) -> Result<ChainVjp> {
    check_chain(chain)?;
    let mut h = Halving {
        chain,
        counters: Counters::default(),
        live: 0,
    };
    let adjoint = h.run(0, chain.len(), s0, u.to_vec(), false);
    let mut counters = h.counters;
    counters.peak_slots = counters.peak_slots.max(1);
    Ok(ChainVjp { adjoint, counters })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    /// Apply step `k` to the working state `s_k`.
    Forward(usize),
    /// Copy the working state `s_k` into a slot.
    Store { slot: usize, k: usize },
    /// Load a slot into the working state.
    Restore(usize),
    /// Pull the adjoint from `s_{k+1}` back to `s_k` using the working state `s_k`.
    Backprop(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps: usize,
    pub slots: usize,
    pub actions: Vec<Action>,
}

/// Optimal recomputation counts `C*(k, s)` and their splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostTable {
    pub max_k: usize,
    pub max_s: usize,
    cost: Vec<usize>,
    split: Vec<usize>,
}

impl CostTable {
    fn idx(&self, k: usize, s: usize) -> usize {
        assert!((1..=self.max_k).contains(&k) && (1..=self.max_s).contains(&s));
        (k - 1) * self.max_s + (s - 1)
    }

    pub fn cost(&self, k: usize, s: usize) -> usize {
        self.cost[self.idx(k, s)]
    }

    /// Optimal first segment length, `0` where no split applies.
    pub fn split(&self, k: usize, s: usize) -> usize {
        self.split[self.idx(k, s)]
    }

    /// `k,s,cost,split` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,s,cost,split\n");
        for k in 1..=self.max_k {
            for s in 1..=self.max_s {
                writeln!(out, "{k},{s},{},{}", self.cost(k, s), self.split(k, s)).unwrap();
            }
        }
        out
    }
}

/// Dynamic program `C*(k, s) = min_l C*(k-l, s-1) + C*(l, s) + l`.
pub fn treeverse_table(max_k: usize, max_s: usize) -> Result<CostTable> {
    if max_k == 0 || max_s == 0 {
        return Err(Error::InvalidArgument("K and S must be at least 1".into()));
    }
    let mut t = CostTable {
        max_k,
        max_s,
        cost: vec![0; max_k * max_s],
        split: vec![0; max_k * max_s],
    };
    for k in 1..=max_k {
        for s in 1..=max_s {
            let i = t.idx(k, s);
            if k == 1 {
                t.cost[i] = 0;
            } else if s == 1 {
                t.cost[i] = k * (k - 1) / 2;
            } else {
                let mut best = usize::MAX;
                let mut arg = 0;
                for l in 1..k {
                    let c = t.cost(k - l, s - 1) + t.cost(l, s) + l;
                    if c < best {
                        best = c;
                        arg = l;
                    }
                }
                t.cost[i] = best;
                t.split[i] = arg;
            }
        }
    }
    Ok(t)
}

fn emit(table: &CostTable, start: usize, k: usize, s: usize, slot: usize, out: &mut Vec<Action>) {
    if k == 1 {
        out.push(Action::Restore(slot));
        out.push(Action::Backprop(start));
    } else if s == 1 {
        for j in (0..k).rev() {
            out.push(Action::Restore(slot));
            out.extend((start..start + j).map(Action::Forward));
            out.push(Action::Backprop(start + j));
        }
    } else {
        let l = table.split(k, s);
        out.push(Action::Restore(slot));
        out.extend((start..start + l).map(Action::Forward));
        out.push(Action::Store {
            slot: slot + 1,
            k: start + l,
        });
        emit(table, start + l, k - l, s - 1, slot + 1, out);
        emit(table, start, l, s, slot, out);
    }
}

/// Cost table up to `(K, S)` and the optimal schedule for `(K, S)`.
pub fn treeverse_plan(steps: usize, slots: usize) -> Result<(CostTable, Schedule)> {
    let table = treeverse_table(steps, slots)?;
    let mut actions = vec![Action::Store { slot: 0, k: 0 }];
    emit(&table, 0, steps, slots, 0, &mut actions);
    Ok((
        table,
        Schedule {
            steps,
            slots,
            actions,
        },
    ))
}

impl Schedule {
    /// Check the schedule and count its costs without running anything.
    pub fn simulate(&self) -> Result<Counters> {
        self.run(None).map(|(_, c)| c)
    }

    fn run(&self, exec: Option<(&dyn ChainProgram, &[f64], &[f64])>) -> Result<(Vec<f64>, Counters)> {
        let bad = |i: usize, msg: String| Error::Schedule(format!("action {i}: {msg}"));
        let mut counters = Counters::default();
        let mut slots: Vec<Option<(usize, Vec<f64>)>> = vec![None; self.slots];
        let (mut cur_k, mut cur) = (0usize, exec.map(|e| e.1.to_vec()).unwrap_or_default());
        let (mut adj_k, mut adj) = (self.steps, exec.map(|e| e.2.to_vec()).unwrap_or_default());
        for (i, a) in self.actions.iter().enumerate() {
            match *a {
                Action::Store { slot, k } => {
                    if slot >= self.slots {
                        return Err(bad(i, format!("slot {slot} exceeds the {} available", self.slots)));
                    }
                    if k != cur_k {
                        return Err(bad(i, format!("storing s_{k} but working state is s_{cur_k}")));
                    }
                    slots[slot] = Some((k, cur.clone()));
                    counters.stores += 1;
                    let live = slots.iter().filter(|s| s.is_some()).count();
                    counters.peak_slots = counters.peak_slots.max(live);
                }
                Action::Restore(slot) => match slots.get(slot).and_then(|s| s.as_ref()) {
                    Some((k, s)) => {
                        cur_k = *k;
                        cur = s.clone();
                    }
                    None => return Err(bad(i, format!("slot {slot} is empty"))),
                },
                Action::Forward(k) => {
                    if k != cur_k || k >= self.steps {
                        return Err(bad(i, format!("forward {k} from working state s_{cur_k}")));
                    }
                    if let Some((chain, _, _)) = exec {
                        cur = chain.step(k, &cur);
                    }
                    cur_k += 1;
                    counters.calls += 1;
                }
                Action::Backprop(k) => {
                    if k != cur_k || k + 1 != adj_k {
                        return Err(bad(
                            i,
                            format!("backprop {k} with working state s_{cur_k} and adjoint of s_{adj_k}"),
                        ));
                    }
                    if let Some((chain, _, _)) = exec {
                        adj = chain.step_vjp(k, &cur, &adj);
                    }
                    adj_k = k;
                }
            }
        }
        if adj_k != 0 {
            return Err(Error::Schedule(format!("schedule stops at the adjoint of s_{adj_k}")));
        }
        Ok((adj, counters))
    }
}

/// Run a schedule on a chain.
pub fn vjp_with_schedule(
    chain: &dyn ChainProgram,
    s0: &[f64],
    u: &[f64],
    schedule: &Schedule,
) -> Result<ChainVjp> {
    if schedule.steps != chain.len() {
        return Err(Error::Schedule(format!(
            "schedule is for K = {}, chain has K = {}",
            schedule.steps,
            chain.len()
        )));
    }
    let (adjoint, counters) = schedule.run(Some((chain, s0, u)))?;
    Ok(ChainVjp { adjoint, counters })
}

/// Wraps a chain and counts calls to `step`.
pub struct CountingChain<'a> {
    pub inner: &'a dyn ChainProgram,
    calls: Cell<usize>,
}

impl<'a> CountingChain<'a> {
    pub fn new(inner: &'a dyn ChainProgram) -> Self {
        CountingChain {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl ChainProgram for CountingChain<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn step(&self, k: usize, s: &[f64]) -> Vec<f64> {
        self.calls.set(self.calls.get() + 1);
        self.inner.step(k, s)
    }
    fn step_vjp(&self, k: usize, s: &[f64], r: &[f64]) -> Vec<f64> {
        self.inner.step_vjp(k, s, r)
    }
}

/// `s_{k+1} = tanh(A_k s_k + b_k)` with seeded random weights.
#[derive(Clone, Debug)]
pub struct TanhChain {
    pub dim: usize,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl TanhChain {
    pub fn random(steps: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.5 / (dim as f64).sqrt();
        let weights = (0..steps)
            .map(|_| (0..dim * dim).map(|_| rng.random_range(-scale..scale)).collect())
            .collect();
        let biases = (0..steps)
            .map(|_| (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        TanhChain {
            dim,
            weights,
            biases,
        }
    }

    fn pre(&self, k: usize, s: &[f64]) -> Vec<f64> {
        let a = &self.weights[k];
        (0..self.dim)
            .map(|i| self.biases[k][i] + (0..self.dim).map(|j| a[i * self.dim + j] * s[j]).sum::<f64>())
            .collect()
    }

    /// The same chain as a graph with input `s_0`.
    pub fn to_graph(&self) -> Result<Graph> {
        let mut b = GraphBuilder::new();
        let mut s = b.input(&[self.dim]);
        for k in 0..self.weights.len() {
            let a = b.constant(Tensor::matrix(self.dim, self.dim, self.weights[k].clone())?);
            let c = b.constant(Tensor::vector(self.biases[k].clone()));
            let z = b.matvec(a, s);
            let z = b.add(z, c);
            s = b.unary(Unary::Tanh, z);
        }
        b.finish(s)
    }
}

impl ChainProgram for TanhChain {
    fn len(&self) -> usize {
        self.weights.len()
    }

    fn step(&self, k: usize, s: &[f64]) -> Vec<f64> {
        self.pre(k, s).iter().map(|z| z.tanh()).collect()
    }

    fn step_vjp(&self, k: usize, s: &[f64], r: &[f64]) -> Vec<f64> {
        let delta: Vec<f64> = self
            .pre(k, s)
            .iter()
            .zip(r)
            .map(|(z, ri)| (1.0 - z.tanh().powi(2)) * ri)
            .collect();
        let a = &self.weights[k];
        (0..self.dim)
            .map(|j| (0..self.dim).map(|i| a[i * self.dim + j] * delta[i]).sum())
            .collect()
    }
}

/// Validate that `s0` and `u` have the chain's state dimension.
pub fn check_dims(dim: usize, s0: &[f64], u: &[f64]) -> Result<()> {
    check_len("initial state", s0.len(), dim)?;
    check_len("output adjoint", u.len(), dim)
}
