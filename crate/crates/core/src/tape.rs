//! Scalar reverse-mode tape.
//!
//! Every `Var` remembers its parents and the local partial derivative with
//! respect to each. Ids increase monotonically, so sorting by id gives a
//! topological order for the backward sweep.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node {
    id: u64,
    value: f64,
    parents: Vec<(Var, f64)>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.0.value)
    }
}

impl Var {
    /// A fresh leaf.
    pub fn new(value: f64) -> Self {
        Self::with_parents(value, Vec::new())
    }

    fn with_parents(value: f64, parents: Vec<(Var, f64)>) -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        Var(Rc::new(Node { id, value, parents }))
    }

    pub fn value(&self) -> f64 {
        self.0.value
    }

    fn unary(&self, value: f64, partial: f64) -> Self {
        Self::with_parents(value, vec![(self.clone(), partial)])
    }
}

/// Gradient of `output` with respect to each of `wrt`.
pub fn grad(output: &Var, wrt: &[Var]) -> Vec<f64> {
    // collect reachable nodes
    let mut seen: HashMap<u64, Var> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if seen.contains_key(&v.0.id) {
            continue;
        }
        for (p, _) in &v.0.parents {
            if !seen.contains_key(&p.0.id) {
                stack.push(p.clone());
            }
        }
        seen.insert(v.0.id, v);
    }
    let mut order: Vec<Var> = seen.into_values().collect();
    order.sort_by_key(|e| std::cmp::Reverse(e.0.id));

    let mut adj: HashMap<u64, f64> = HashMap::new();
    adj.insert(output.0.id, 1.0);
    for v in &order {
        let a = match adj.get(&v.0.id) {
            Some(&a) => a,
            None => continue,
        };
        for (p, partial) in &v.0.parents {
            *adj.entry(p.0.id).or_insert(0.0) += a * partial;
        }
    }
    wrt.iter()
        .map(|w| adj.get(&w.0.id).copied().unwrap_or(0.0))
        .collect()
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        let v = self.value() + o.value();
        Var::with_parents(v, vec![(self, 1.0), (o, 1.0)])
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        let v = self.value() - o.value();
        Var::with_parents(v, vec![(self, 1.0), (o, -1.0)])
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        let (a, b) = (self.value(), o.value());
        Var::with_parents(a * b, vec![(self, b), (o, a)])
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        let (a, b) = (self.value(), o.value());
        Var::with_parents(a / b, vec![(self, 1.0 / b), (o, -a / (b * b))])
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        let v = -self.value();
        self.unary(v, -1.0)
    }
}

impl Scalar for Var {
    fn from_f64(x: f64) -> Self {
        Var::new(x)
    }
    fn re(&self) -> f64 {
        self.value()
    }
    fn exp(&self) -> Self {
        let e = self.value().exp();
        self.unary(e, e)
    }
    fn ln(&self) -> Self {
        let x = self.value();
        self.unary(x.ln(), 1.0 / x)
    }
    fn sqrt(&self) -> Self {
        let r = self.value().sqrt();
        self.unary(r, 0.5 / r)
    }
    fn sin(&self) -> Self {
        let x = self.value();
        self.unary(x.sin(), x.cos())
    }
    fn cos(&self) -> Self {
        let x = self.value();
        self.unary(x.cos(), -x.sin())
    }
    fn tanh(&self) -> Self {
        let t = self.value().tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn scale(&self, c: f64) -> Self {
        self.unary(self.value() * c, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Var::new(2.0);
        let y = x.clone() * x.clone() + x.sin();
        let g = grad(&y, &[x]);
        assert!((g[0] - (4.0 + 2.0f64.cos())).abs() < 1e-15);
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let x = Var::new(1.0);
        let z = Var::new(3.0);
        let y = x.exp();
        assert_eq!(grad(&y, &[z]), vec![0.0]);
    }
}
