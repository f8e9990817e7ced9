use std::fmt;
use std::sync::Arc;

use super::tensor::{numel, Tensor};
use super::Graph;
use crate::error::Result;
use crate::scalar::{logistic, softplus, Scalar};

/// Elementwise functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Square,
    /// Derivative at 0 is taken as 1.
    Relu,
    Logistic,
    Softplus,
    Recip,
    Scale(f64),
    Offset(f64),
    Powi(i32),
}

impl Unary {
    pub fn value<T: Scalar>(&self, x: &T) -> T {
        match *self {
            Unary::Neg => -x.clone(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Tanh => x.tanh(),
            Unary::Square => x.clone() * x.clone(),
            Unary::Relu => {
                if x.re() > 0.0 {
                    x.clone()
                } else {
                    T::zero()
                }
            }
            Unary::Logistic => logistic(x),
            Unary::Softplus => softplus(x),
            Unary::Recip => T::one() / x.clone(),
            Unary::Scale(c) => x.scale(c),
            Unary::Offset(c) => x.clone() + T::from_f64(c),
            Unary::Powi(n) => powi(x, n),
        }
    }

    /// First derivative, in the same scalar type so it can itself be differentiated.
    pub fn derivative<T: Scalar>(&self, x: &T) -> T {
        match *self {
            Unary::Neg => T::from_f64(-1.0),
            Unary::Exp => x.exp(),
            Unary::Log => T::one() / x.clone(),
            Unary::Sqrt => T::one() / x.sqrt().scale(2.0),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Tanh => {
                let t = x.tanh();
                T::one() - t.clone() * t
            }
            Unary::Square => x.scale(2.0),
            Unary::Relu => {
                if x.re() >= 0.0 {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Logistic => {
                let s = logistic(x);
                s.clone() * (T::one() - s)
            }
            Unary::Softplus => logistic(x),
            Unary::Recip => -(T::one() / (x.clone() * x.clone())),
            Unary::Scale(c) => T::from_f64(c),
            Unary::Offset(_) => T::one(),
            Unary::Powi(n) => {
                if n == 0 {
                    T::zero()
                } else {
                    powi(x, n - 1).scale(n as f64)
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Tanh => "tanh",
            Unary::Square => "square",
            Unary::Relu => "relu",
            Unary::Logistic => "logistic",
            Unary::Softplus => "softplus",
            Unary::Recip => "recip",
            Unary::Scale(_) => "scale",
            Unary::Offset(_) => "offset",
            Unary::Powi(_) => "powi",
        }
    }
}

fn powi<T: Scalar>(x: &T, n: i32) -> T {
    let mut acc = T::one();
    for _ in 0..n.unsigned_abs() {
        acc = acc * x.clone();
    }
    if n < 0 {
        T::one() / acc
    } else {
        acc
    }
}

/// Reductions to a rank-0 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    LogSumExp,
    /// Ties go to the lowest index.
    Max,
}

impl Reduction {
    pub fn name(&self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
            Reduction::LogSumExp => "logsumexp",
            Reduction::Max => "max",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Primitive {
    Input { shape: Vec<usize> },
    Constant(Tensor<f64>),
    Add,
    Mul,
    /// `[m,n] x [n] -> [m]`
    Matvec,
    /// `[m,k] x [k,n] -> [m,n]`
    Matmul,
    Elementwise(Unary),
    Reduce(Reduction),
    /// Flattens and concatenates its parents into a vector.
    Concat,
    /// `len` consecutive entries of the flattened parent.
    Slice { start: usize, len: usize },
    /// Identity; makes fan-out explicit.
    Dup,
    /// A nested graph applied to the parents as its inputs.
    Composite(Arc<Graph>),
}

impl Primitive {
    /// Number of parents, `None` for variadic.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Input { .. } | Primitive::Constant(_) => Some(0),
            Primitive::Add | Primitive::Mul | Primitive::Matvec | Primitive::Matmul => Some(2),
            Primitive::Elementwise(_)
            | Primitive::Reduce(_)
            | Primitive::Slice { .. }
            | Primitive::Dup => Some(1),
            Primitive::Concat => None,
            Primitive::Composite(g) => Some(g.num_inputs()),
        }
    }

    pub fn kind(&self) -> String {
        match self {
            Primitive::Input { .. } => "input".into(),
            Primitive::Constant(_) => "constant".into(),
            Primitive::Add => "add".into(),
            Primitive::Mul => "mul".into(),
            Primitive::Matvec => "matvec".into(),
            Primitive::Matmul => "matmul".into(),
            Primitive::Elementwise(u) => format!("elementwise:{}", u.name()),
            Primitive::Reduce(r) => format!("reduce:{}", r.name()),
            Primitive::Concat => "concat".into(),
            Primitive::Slice { .. } => "slice".into(),
            Primitive::Dup => "dup".into(),
            Primitive::Composite(_) => "composite".into(),
        }
    }

    /// Output shape as a function of parent shapes.
    pub fn output_shape(&self, parents: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
        if let Some(a) = self.arity() {
            if parents.len() != a {
                return Err(format!("{} expects {a} parents, got {}", self.kind(), parents.len()));
            }
        } else if parents.is_empty() {
            return Err("concat needs at least one parent".into());
        }
        match self {
            Primitive::Input { shape } => Ok(shape.clone()),
            Primitive::Constant(t) => Ok(t.shape().to_vec()),
            Primitive::Add | Primitive::Mul => {
                let (a, b) = (parents[0], parents[1]);
                if a == b || b.is_empty() {
                    Ok(a.to_vec())
                } else if a.is_empty() {
                    Ok(b.to_vec())
                } else {
                    Err(format!("cannot combine shapes {a:?} and {b:?}"))
                }
            }
            Primitive::Matvec => match (parents[0], parents[1]) {
                ([m, n], [n2]) if n == n2 => Ok(vec![*m]),
                (a, b) => Err(format!("matvec of {a:?} and {b:?}")),
            },
            Primitive::Matmul => match (parents[0], parents[1]) {
                ([m, k], [k2, n]) if k == k2 => Ok(vec![*m, *n]),
                (a, b) => Err(format!("matmul of {a:?} and {b:?}")),
            },
            Primitive::Elementwise(_) | Primitive::Dup => Ok(parents[0].to_vec()),
            Primitive::Reduce(_) => {
                if numel(parents[0]) == 0 {
                    Err("reduction over an empty tensor".into())
                } else {
                    Ok(vec![])
                }
            }
            Primitive::Concat => Ok(vec![parents.iter().map(|s| numel(s)).sum()]),
            Primitive::Slice { start, len } => {
                if start + len > numel(parents[0]) {
                    Err(format!(
                        "slice {start}..{} out of range for {} entries",
                        start + len,
                        numel(parents[0])
                    ))
                } else {
                    Ok(vec![*len])
                }
            }
            Primitive::Composite(g) => {
                for (i, (want, got)) in g.input_shapes().iter().zip(parents).enumerate() {
                    if want.as_slice() != *got {
                        return Err(format!("composite input {i}: expected {want:?}, got {got:?}"));
                    }
                }
                Ok(g.output_shape().to_vec())
            }
        }
    }

    /// Evaluate on parent values. Shapes are assumed already checked.
    pub fn apply<T: Scalar>(&self, args: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(match self {
            Primitive::Input { .. } => unreachable!("inputs are not applied"),
            Primitive::Constant(t) => Tensor::lift(t),
            Primitive::Add => broadcast(args[0], args[1], |a, b| a.clone() + b.clone()),
            Primitive::Mul => broadcast(args[0], args[1], |a, b| a.clone() * b.clone()),
            Primitive::Matvec => matvec(args[0], args[1]),
            Primitive::Matmul => matmul(args[0], args[1]),
            Primitive::Elementwise(u) => args[0].map(|x| u.value(x)),
            Primitive::Reduce(r) => Tensor::scalar(reduce(*r, args[0].data())),
            Primitive::Concat => Tensor::vector(
                args.iter()
                    .flat_map(|t| t.data().iter().cloned())
                    .collect(),
            ),
            Primitive::Slice { start, len } => {
                Tensor::vector(args[0].data()[*start..start + len].to_vec())
            }
            Primitive::Dup => args[0].clone(),
            Primitive::Composite(g) => {
                let inputs: Vec<Tensor<T>> = args.iter().map(|t| (*t).clone()).collect();
                g.eval_generic(&inputs)?
            }
        })
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind())
    }
}

/// Elementwise binary op with rank-0 broadcasting on either side.
pub(crate) fn broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(&T, &T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.rank() == 0 {
        let s = &b.data()[0];
        a.map(|x| f(x, s))
    } else {
        let s = &a.data()[0];
        b.map(|x| f(s, x))
    }
}

pub(crate) fn matvec<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let (wd, xd) = (w.data(), x.data());
    Tensor::vector(
        (0..m)
            .map(|i| {
                (0..n).fold(T::zero(), |acc, j| acc + wd[i * n + j].clone() * xd[j].clone())
            })
            .collect(),
    )
}

/// `W^T y`
pub(crate) fn matvec_t<T: Scalar>(w: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let (wd, yd) = (w.data(), y.data());
    Tensor::vector(
        (0..n)
            .map(|j| {
                (0..m).fold(T::zero(), |acc, i| acc + wd[i * n + j].clone() * yd[i].clone())
            })
            .collect(),
    )
}

/// `y x^T`
pub(crate) fn outer<T: Scalar>(y: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut data = Vec::with_capacity(y.numel() * x.numel());
    for a in y.data() {
        for b in x.data() {
            data.push(a.clone() * b.clone());
        }
    }
    Tensor::new(vec![y.numel(), x.numel()], data).expect("outer shape")
}

pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            data.push((0..k).fold(T::zero(), |acc, l| {
                acc + ad[i * k + l].clone() * bd[l * n + j].clone()
            }));
        }
    }
    Tensor::new(vec![m, n], data).expect("matmul shape")
}

pub(crate) fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut data = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            data.push(d[i * n + j].clone());
        }
    }
    Tensor::new(vec![n, m], data).expect("transpose shape")
}

pub(crate) fn argmax_re<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if x.re() > xs[best].re() {
            best = i;
        }
    }
    best
}

/// Softmax weights of `xs`, shifted by the (constant) maximum.
pub(crate) fn softmax_weights<T: Scalar>(xs: &[T]) -> Vec<T> {
    let m = T::from_f64(xs[argmax_re(xs)].re());
    let e: Vec<T> = xs.iter().map(|x| (x.clone() - m.clone()).exp()).collect();
    let z = e.iter().cloned().fold(T::zero(), |a, b| a + b);
    e.into_iter().map(|x| x / z.clone()).collect()
}

pub(crate) fn reduce<T: Scalar>(r: Reduction, xs: &[T]) -> T {
    match r {
        Reduction::Sum => xs.iter().cloned().fold(T::zero(), |a, b| a + b),
        Reduction::Mean => {
            let s = xs.iter().cloned().fold(T::zero(), |a, b| a + b);
            s.scale(1.0 / xs.len() as f64)
        }
        Reduction::LogSumExp => {
            let m = T::from_f64(xs[argmax_re(xs)].re());
            let s = xs
                .iter()
                .map(|x| (x.clone() - m.clone()).exp())
                .fold(T::zero(), |a, b| a + b);
            m + s.ln()
        }
        Reduction::Max => xs[argmax_re(xs)].clone(),
    }
}
