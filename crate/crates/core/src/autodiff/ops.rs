//! Elementwise operations.

use std::rc::Rc;

use super::Var;
use crate::tensor::{broadcast_binary, sum_to_shape, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn binary(self, kind: BinaryKind, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let out = match kind {
            BinaryKind::Add => broadcast_binary("add", &a, &b, |x, y| x + y)?,
            BinaryKind::Sub => broadcast_binary("sub", &a, &b, |x, y| x - y)?,
            BinaryKind::Mul => broadcast_binary("mul", &a, &b, |x, y| x * y)?,
            BinaryKind::Div => broadcast_binary("div", &a, &b, |x, y| x / y)?,
        };
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(self.graph.record(out, &[self, other], move |g| {
            let ga = need_a.then(|| {
                let full = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.clone(),
                    BinaryKind::Mul => broadcast_binary("mul", g, &b, |x, y| x * y).unwrap(),
                    BinaryKind::Div => broadcast_binary("div", g, &b, |x, y| x / y).unwrap(),
                };
                sum_to_shape(&full, a.shape())
            });
            let gb = need_b.then(|| {
                let full = match kind {
                    BinaryKind::Add => g.clone(),
                    BinaryKind::Sub => g.map(|x| -x),
                    BinaryKind::Mul => broadcast_binary("mul", g, &a, |x, y| x * y).unwrap(),
                    BinaryKind::Div => {
                        let q = broadcast_binary("div", &a, &b, |x, y| x / y).unwrap();
                        let t = broadcast_binary("mul", g, &q, |x, y| x * y).unwrap();
                        broadcast_binary("div", &t, &b, |x, y| -x / y).unwrap()
                    }
                };
                sum_to_shape(&full, b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Div, other)
    }

    /// Unary map `f` with derivative `df(x, y)` in terms of input and output.
    pub fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let out = (*y).clone();
        self.graph.record(out, &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(
            |x| x.sqrt(),
            |_, y| {
                if y > T::zero() {
                    T::c(0.5) / y
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, T> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn sin(self) -> Var<'g, T> {
        self.unary(|x| x.sin(), |x, _| x.cos())
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| T::c(2.0) * x)
    }

    pub fn powf(self, p: f64) -> Var<'g, T> {
        let p = T::c(p);
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::c(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn shift(self, s: f64) -> Var<'g, T> {
        let s = T::c(s);
        self.unary(move |x| x + s, |_, _| T::one())
    }

    /// Clamp to `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::c(lo), T::c(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}
