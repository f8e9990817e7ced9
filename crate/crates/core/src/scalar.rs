//! Number types the graph evaluator is generic over.
//!
//! `f64` is the plain case. [`Dual`] carries one tangent and nests, so
//! `Dual<Dual<f64>>` gives second directional derivatives. [`crate::tape::Var`]
//! records a reverse-mode tape. `Complex64` is used by the complex-step check.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;

pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    /// Real primal part, used for branching and finiteness checks.
    fn re(&self) -> f64;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tanh(&self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn scale(&self, c: f64) -> Self {
        self.clone() * Self::from_f64(c)
    }
    fn is_finite(&self) -> bool {
        self.re().is_finite()
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn re(&self) -> f64 {
        *self
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
}

impl Scalar for Complex64 {
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn re(&self) -> f64 {
        self.re
    }
    fn exp(&self) -> Self {
        Complex64::exp(*self)
    }
    fn ln(&self) -> Self {
        Complex64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        Complex64::sqrt(*self)
    }
    fn sin(&self) -> Self {
        Complex64::sin(*self)
    }
    fn cos(&self) -> Self {
        Complex64::cos(*self)
    }
    fn tanh(&self) -> Self {
        Complex64::tanh(*self)
    }
    fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Forward-mode dual number `v + d·ε` with `ε² = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual<T> {
    pub v: T,
    pub d: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(v: T, d: T) -> Self {
        Dual { v, d }
    }
    pub fn constant(v: T) -> Self {
        Dual { v, d: T::zero() }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let d = self.d * o.v.clone() + self.v.clone() * o.d;
        Dual::new(self.v * o.v, d)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let v = self.v / o.v.clone();
        let d = (self.d - v.clone() * o.d) / o.v;
        Dual::new(v, d)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.v, -self.d)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn from_f64(x: f64) -> Self {
        Dual::constant(T::from_f64(x))
    }
    fn re(&self) -> f64 {
        self.v.re()
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        Dual::new(e.clone(), e * self.d.clone())
    }
    fn ln(&self) -> Self {
        Dual::new(self.v.ln(), self.d.clone() / self.v.clone())
    }
    fn sqrt(&self) -> Self {
        let r = self.v.sqrt();
        let d = self.d.clone() / (r.clone() * T::from_f64(2.0));
        Dual::new(r, d)
    }
    fn sin(&self) -> Self {
        Dual::new(self.v.sin(), self.v.cos() * self.d.clone())
    }
    fn cos(&self) -> Self {
        Dual::new(self.v.cos(), -(self.v.sin() * self.d.clone()))
    }
    fn tanh(&self) -> Self {
        let t = self.v.tanh();
        let d = (T::one() - t.clone() * t.clone()) * self.d.clone();
        Dual::new(t, d)
    }
    fn scale(&self, c: f64) -> Self {
        Dual::new(self.v.scale(c), self.d.scale(c))
    }
}

/// Logistic function `1 / (1 + e^{-x})`, branch chosen for stability.
pub fn logistic<T: Scalar>(x: &T) -> T {
    if x.re() >= 0.0 {
        T::one() / (T::one() + (-x.clone()).exp())
    } else {
        let e = x.exp();
        e.clone() / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: &T) -> T {
    if x.re() >= 0.0 {
        x.clone() + (T::one() + (-x.clone()).exp()).ln()
    } else {
        (T::one() + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_product_rule() {
        let x = Dual::new(3.0, 1.0);
        let y = x.clone() * x.sin();
        assert!((y.d - (3.0f64.sin() + 3.0 * 3.0f64.cos())).abs() < 1e-15);
    }

    #[test]
    fn nested_dual_second_derivative() {
        // f(x) = exp(2x), f'' = 4 exp(2x)
        let x = Dual::new(Dual::new(0.5, 1.0), Dual::new(1.0, 0.0));
        let y = (x.clone() + x).exp();
        assert!((y.d.d - 4.0 * 1.0f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn logistic_and_softplus_are_stable() {
        assert_eq!(logistic(&-800.0f64), 0.0);
        assert_eq!(logistic(&800.0f64), 1.0);
        assert!((softplus(&800.0f64) - 800.0).abs() < 1e-12);
        assert!(softplus(&-800.0f64) >= 0.0);
    }
}
