//! RGB ↔ HVI conversion.
//!
//! HVI keeps the HSV value as luminance `I = max(R, G, B)` and places the
//! chroma on a disk whose radius `C_k(I) = (sin(πI/2) + ε)^(1/k)` shrinks
//! towards black, so dark colours collapse onto the origin instead of
//! spreading over a degenerate black plane:
//!
//! ```text
//! H = C_k(I) · S · cos θ      V = C_k(I) · S · sin θ
//! ```
//!
//! with `S` the HSV saturation and `θ` the HSV hue angle. Both directions are
//! available as plain functions on tensors and as differentiable graph ops.
//! Per-pixel Jacobians come from forward-mode dual numbers so the value and
//! derivative code paths are the same expressions.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Var;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HviError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expected a B×3×H×W tensor, got {0:?}")]
    Shape(Vec<usize>),
    #[error("input contains NaN")]
    NaN,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = HviError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HviConfig {
    pub density_k: f64,
    pub epsilon: f64,
}

impl Default for HviConfig {
    fn default() -> Self {
        Self {
            density_k: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl HviConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.density_k > 0.0 && self.density_k.is_finite()) {
            return Err(HviError::Config(format!("density_k must be > 0, got {}", self.density_k)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(HviError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Decoupled image: chroma planes `h`, `v` and luminance `i`, each B×1×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct HviImage<T: Scalar = f32> {
    pub h: Tensor<T>,
    pub v: Tensor<T>,
    pub i: Tensor<T>,
}

impl<T: Scalar> HviImage<T> {
    /// Split a B×3×H×W tensor with channels (h, v, i).
    pub fn from_stacked(t: &Tensor<T>) -> Result<Self> {
        let s = check_planes(t)?;
        let (b, hw) = (s[0], s[2] * s[3]);
        let plane = |c: usize| {
            let mut d = Vec::with_capacity(b * hw);
            for n in 0..b {
                d.extend_from_slice(&t.data()[(n * 3 + c) * hw..(n * 3 + c + 1) * hw]);
            }
            Tensor::from_parts(vec![b, 1, s[2], s[3]], d)
        };
        Ok(Self {
            h: plane(0),
            v: plane(1),
            i: plane(2),
        })
    }

    /// Stack back into B×3×H×W with channels (h, v, i).
    pub fn stacked(&self) -> Tensor<T> {
        let s = self.i.shape();
        let (b, hw) = (s[0], s[2] * s[3]);
        let mut d = Vec::with_capacity(3 * b * hw);
        for n in 0..b {
            for p in [&self.h, &self.v, &self.i] {
                d.extend_from_slice(&p.data()[n * hw..(n + 1) * hw]);
            }
        }
        Tensor::from_parts(vec![b, 3, s[2], s[3]], d)
    }

    pub fn shape(&self) -> &[usize] {
        self.i.shape()
    }
}

/// Graph-side counterpart of [`HviImage`].
#[derive(Clone, Copy, Debug)]
pub struct HviVars<'g, T: Scalar = f32> {
    pub h: Var<'g, T>,
    pub v: Var<'g, T>,
    pub i: Var<'g, T>,
}

impl<'g, T: Scalar> HviVars<'g, T> {
    pub fn from_stacked(t: Var<'g, T>) -> Result<Self> {
        Ok(Self {
            h: t.narrow(1, 0, 1)?,
            v: t.narrow(1, 1, 1)?,
            i: t.narrow(1, 2, 1)?,
        })
    }

    pub fn stacked(&self) -> Result<Var<'g, T>> {
        Ok(self.i.graph().concat(&[self.h, self.v, self.i], 1)?)
    }

    pub fn constant(graph: &'g crate::autodiff::Graph<T>, img: &HviImage<T>) -> Self {
        Self {
            h: graph.constant(img.h.clone()),
            v: graph.constant(img.v.clone()),
            i: graph.constant(img.i.clone()),
        }
    }

    pub fn value(&self) -> HviImage<T> {
        HviImage {
            h: (*self.h.value()).clone(),
            v: (*self.v.value()).clone(),
            i: (*self.i.value()).clone(),
        }
    }
}

fn check_planes<T: Scalar>(t: &Tensor<T>) -> Result<Vec<usize>> {
    let s = t.shape().to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(HviError::Shape(s));
    }
    Ok(s)
}

/// Value with its gradient with respect to three seed variables.
#[derive(Clone, Copy, Debug)]
struct Dual<T> {
    v: T,
    d: [T; 3],
}

impl<T: Scalar> Dual<T> {
    fn constant(v: T) -> Self {
        Self { v, d: [T::zero(); 3] }
    }

    fn seed(v: T, k: usize) -> Self {
        let mut d = [T::zero(); 3];
        d[k] = T::one();
        Self { v, d }
    }

    fn chain(self, v: T, dv: T) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }

    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        let dr = if r > T::zero() { T::c(0.5) / r } else { T::zero() };
        self.chain(r, dr)
    }

    fn powf(self, p: T) -> Self {
        self.chain(self.v.powf(p), p * self.v.powf(p - T::one()))
    }

    fn atan2(y: Self, x: Self) -> Self {
        let r2 = x.v * x.v + y.v * y.v;
        let mut d = [T::zero(); 3];
        if r2 > T::zero() {
            for k in 0..3 {
                d[k] = (x.v * y.d[k] - y.v * x.d[k]) / r2;
            }
        }
        Self { v: y.v.atan2(x.v), d }
    }

    /// Clamp with zero derivative outside the interval.
    fn clamp(self, lo: T, hi: T) -> Self {
        if self.v < lo {
            Self::constant(lo)
        } else if self.v > hi {
            Self::constant(hi)
        } else {
            self
        }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [T::zero(); 3];
        for k in 0..3 {
            d[k] = self.d[k] * o.v + self.v * o.d[k];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        let mut d = [T::zero(); 3];
        for k in 0..3 {
            d[k] = (self.d[k] - q * o.d[k]) / o.v;
        }
        Self { v: q, d }
    }
}

fn density<T: Scalar>(i: Dual<T>, cfg: &HviConfig) -> Dual<T> {
    let half_pi = Dual::constant(T::c(PI / 2.0));
    ((half_pi * i).sin() + Dual::constant(T::c(cfg.epsilon))).powf(T::c(1.0 / cfg.density_k))
}

fn pixel_rgb_to_hvi<T: Scalar>(rgb: [Dual<T>; 3], cfg: &HviConfig) -> [Dual<T>; 3] {
    let [r, g, b] = rgb;
    // ties resolve to the earliest channel
    let mut arg = 0;
    for k in 1..3 {
        if rgb[k].v > rgb[arg].v {
            arg = k;
        }
    }
    let mut argmin = 0;
    for k in 1..3 {
        if rgb[k].v < rgb[argmin].v {
            argmin = k;
        }
    }
    let i = rgb[arg];
    let zero = Dual::constant(T::zero());
    let delta = i - rgb[argmin];
    if i.v <= T::zero() || delta.v <= T::zero() {
        return [zero, zero, i];
    }
    let s = delta / i;
    let two = Dual::constant(T::c(2.0));
    let four = Dual::constant(T::c(4.0));
    let sector = match arg {
        0 => (g - b) / delta,
        1 => (b - r) / delta + two,
        _ => (r - g) / delta + four,
    };
    let theta = sector * Dual::constant(T::c(PI / 3.0));
    let radius = density(i, cfg) * s;
    [radius * theta.cos(), radius * theta.sin(), i]
}

fn pixel_hvi_to_rgb<T: Scalar>(hvi: [Dual<T>; 3], cfg: &HviConfig) -> [Dual<T>; 3] {
    let [h, v, i] = hvi;
    let value = i.clamp(T::zero(), T::one());
    let ck = density(value, cfg);
    let eps = T::c(cfg.epsilon);
    let ck = if ck.v < eps { Dual::constant(eps) } else { ck };
    let s = ((h * h + v * v).sqrt() / ck).clamp(T::zero(), T::one());
    let mut theta = Dual::atan2(v, h);
    if theta.v < T::zero() {
        theta.v = theta.v + T::c(2.0 * PI);
    }
    let hp = theta * Dual::constant(T::c(3.0 / PI));
    let sector = hp.v.floor().min(T::c(5.0)).max(T::zero());
    let f = hp - Dual::constant(sector);
    let one = Dual::constant(T::one());
    let p = value * (one - s);
    let q = value * (one - s * f);
    let t = value * (one - s * (one - f));
    let out = match sector.to_usize().unwrap_or(0) {
        0 => [value, t, p],
        1 => [q, value, p],
        2 => [p, value, t],
        3 => [p, q, value],
        4 => [t, p, value],
        _ => [value, p, q],
    };
    out.map(|c| c.clamp(T::zero(), T::one()))
}

/// Apply a per-pixel 3→3 map over channel planes, returning the output and,
/// when asked, the row-major 3×3 Jacobian for every pixel.
fn map_pixels<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn([Dual<T>; 3]) -> [Dual<T>; 3],
    with_jacobian: bool,
) -> (Tensor<T>, Vec<[T; 9]>) {
    let s = x.shape();
    let (b, hw) = (s[0], s[2] * s[3]);
    let mut out = vec![T::zero(); x.numel()];
    let mut jac = Vec::with_capacity(if with_jacobian { b * hw } else { 0 });
    for n in 0..b {
        let base = n * 3 * hw;
        for p in 0..hw {
            let input = [0, 1, 2].map(|c| {
                let v = x.data()[base + c * hw + p];
                if with_jacobian {
                    Dual::seed(v, c)
                } else {
                    Dual::constant(v)
                }
            });
            let y = f(input);
            for c in 0..3 {
                out[base + c * hw + p] = y[c].v;
            }
            if with_jacobian {
                let mut j = [T::zero(); 9];
                for (r, yr) in y.iter().enumerate() {
                    j[r * 3..r * 3 + 3].copy_from_slice(&yr.d);
                }
                jac.push(j);
            }
        }
    }
    (Tensor::from_parts(s.to_vec(), out), jac)
}

fn record_pixel_map<'g, T: Scalar>(
    x: Var<'g, T>,
    f: impl Fn([Dual<T>; 3]) -> [Dual<T>; 3],
) -> Var<'g, T> {
    let xv = x.value();
    let need = x.requires_grad();
    let (out, jac) = map_pixels(&xv, f, need);
    let shape = xv.shape().to_vec();
    x.graph().record(out, &[x], move |g| {
        let (b, hw) = (shape[0], shape[2] * shape[3]);
        let mut dx = vec![T::zero(); g.numel()];
        for n in 0..b {
            let base = n * 3 * hw;
            for p in 0..hw {
                let j = &jac[n * hw + p];
                for c in 0..3 {
                    let mut acc = T::zero();
                    for r in 0..3 {
                        acc += j[r * 3 + c] * g.data()[base + r * hw + p];
                    }
                    dx[base + c * hw + p] = acc;
                }
            }
        }
        vec![Some(Tensor::from_parts(shape.clone(), dx))]
    })
}

fn check_unit_range<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    for &x in t.data() {
        if x.is_nan() {
            return Err(HviError::NaN);
        }
        if x < T::zero() || x > T::one() {
            return Err(HviError::OutOfRange(x.as_f64()));
        }
    }
    Ok(())
}

/// Luminance-dependent chroma radius `(sin(πI/2) + ε)^(1/k)`.
pub fn c_k<T: Scalar>(i: &Tensor<T>, cfg: &HviConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_unit_range(i)?;
    Ok(i.map(|x| density(Dual::constant(x), cfg).v))
}

pub fn rgb_to_hvi<T: Scalar>(rgb: &Tensor<T>, cfg: &HviConfig) -> Result<HviImage<T>> {
    cfg.validate()?;
    check_planes(rgb)?;
    check_unit_range(rgb)?;
    let (out, _) = map_pixels(rgb, |p| pixel_rgb_to_hvi(p, cfg), false);
    HviImage::from_stacked(&out)
}

/// Inverse transform. Out-of-gamut input (chroma beyond the disk, luminance
/// outside [0, 1]) is clamped rather than rejected.
pub fn hvi_to_rgb<T: Scalar>(hvi: &HviImage<T>, cfg: &HviConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let stacked = hvi.stacked();
    if stacked.data().iter().any(|x| x.is_nan()) {
        return Err(HviError::NaN);
    }
    Ok(map_pixels(&stacked, |p| pixel_hvi_to_rgb(p, cfg), false).0)
}

/// Differentiable RGB → HVI on a B×3×H×W variable; output channels (h, v, i).
pub fn rgb_to_hvi_var<'g, T: Scalar>(rgb: Var<'g, T>, cfg: &HviConfig) -> Result<HviVars<'g, T>> {
    cfg.validate()?;
    check_planes(&rgb.value())?;
    check_unit_range(&rgb.value())?;
    let cfg = *cfg;
    HviVars::from_stacked(record_pixel_map(rgb, move |p| pixel_rgb_to_hvi(p, &cfg)))
}

/// Differentiable HVI → RGB; returns B×3×H×W in [0, 1].
pub fn hvi_to_rgb_var<'g, T: Scalar>(hvi: &HviVars<'g, T>, cfg: &HviConfig) -> Result<Var<'g, T>> {
    cfg.validate()?;
    let stacked = hvi.stacked()?;
    let cfg = *cfg;
    Ok(record_pixel_map(stacked, move |p| pixel_hvi_to_rgb(p, &cfg)))
}
