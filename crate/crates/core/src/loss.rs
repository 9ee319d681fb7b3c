//! Covariance correction loss and the alternative pixel objectives used for
//! ablations.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::hvi::HviVars;
use crate::nn::{ModelError, Result};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Every term of one loss evaluation, in double precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_i: f64,
    pub l_h: f64,
    pub l_v: f64,
    pub w_h: f64,
    pub w_v: f64,
    pub l_ihv: f64,
    pub l_hv: f64,
    /// Optional RGB reconstruction term; zero unless enabled.
    pub l_rgb: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Registered objective name: `ccl`, `l1` or `l2`.
    pub objective: String,
    pub weight_i: f64,
    pub weight_ihv: f64,
    pub weight_hv: f64,
    /// Weight of an extra RGB-domain MSE; 0 disables it.
    pub rgb_mse: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: "ccl".into(),
            weight_i: 1.0,
            weight_ihv: 1.0,
            weight_hv: 1.0,
            rgb_mse: 0.0,
        }
    }
}

fn check_same<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        }
        .into());
    }
    Ok(())
}

fn check_pair<T: Scalar>(pred: &HviVars<'_, T>, gt: &HviVars<'_, T>) -> Result<()> {
    check_same("loss", &pred.h, &gt.h)?;
    check_same("loss", &pred.v, &gt.v)?;
    check_same("loss", &pred.i, &gt.i)
}

/// Mean squared error over every element.
pub fn channel_mse<'g, T: Scalar>(pred: Var<'g, T>, gt: Var<'g, T>) -> Result<Var<'g, T>> {
    check_same("channel_mse", &pred, &gt)?;
    Ok(pred.sub(gt)?.square().mean_all())
}

/// Mean absolute error over every element.
pub fn channel_mae<'g, T: Scalar>(pred: Var<'g, T>, gt: Var<'g, T>) -> Result<Var<'g, T>> {
    check_same("channel_mae", &pred, &gt)?;
    Ok(pred.sub(gt)?.abs().mean_all())
}

/// `(1 + mean|Δ|, 1 + std|Δ|)` of the luminance error, as plain numbers
/// (no gradient flows through them).
pub fn luminance_weights<T: Scalar>(pred_i: &Tensor<T>, gt_i: &Tensor<T>) -> Result<(f64, f64)> {
    if pred_i.shape() != gt_i.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "luminance_weights",
            lhs: pred_i.shape().to_vec(),
            rhs: gt_i.shape().to_vec(),
        }
        .into());
    }
    let abs: Vec<f64> = pred_i
        .data()
        .iter()
        .zip(gt_i.data())
        .map(|(p, g)| (p.as_f64() - g.as_f64()).abs())
        .collect();
    let n = abs.len() as f64;
    let m = abs.iter().sum::<f64>() / n;
    let var = abs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / n;
    Ok((1.0 + m, 1.0 + var.sqrt()))
}

/// Luminance-weighted chroma loss. Returns `(loss, l_h, l_v, w_h, w_v)`.
pub fn l_ihv<'g, T: Scalar>(
    pred: &HviVars<'g, T>,
    gt: &HviVars<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>, f64, f64)> {
    check_pair(pred, gt)?;
    let w = luminance_weights(&pred.i.value(), &gt.i.value())?;
    l_ihv_weighted(pred, gt, w)
}

/// [`l_ihv`] with externally supplied `(w_h, w_v)`.
pub fn l_ihv_weighted<'g, T: Scalar>(
    pred: &HviVars<'g, T>,
    gt: &HviVars<'g, T>,
    (w_h, w_v): (f64, f64),
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>, f64, f64)> {
    check_pair(pred, gt)?;
    let l_h = channel_mse(pred.h, gt.h)?;
    let l_v = channel_mse(pred.v, gt.v)?;
    let loss = l_h.scale(w_h).add(l_v.scale(w_v))?;
    Ok((loss, l_h, l_v, w_h, w_v))
}

/// `E(hv) − E(h)E(v)` over all elements, accumulated left to right in f64.
pub fn covariance<T: Scalar>(h: &Tensor<T>, v: &Tensor<T>) -> Result<f64> {
    if h.shape() != v.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "covariance",
            lhs: h.shape().to_vec(),
            rhs: v.shape().to_vec(),
        }
        .into());
    }
    let n = h.numel() as f64;
    let (mut sh, mut sv, mut shv) = (0.0, 0.0, 0.0);
    for (a, b) in h.data().iter().zip(v.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        sh += a;
        sv += b;
        shv += a * b;
    }
    Ok(shv / n - (sh / n) * (sv / n))
}

/// Squared difference of the per-image means of `h⊙v`, averaged over the batch.
pub fn joint_mean_loss<'g, T: Scalar>(pred: &HviVars<'g, T>, gt: &HviVars<'g, T>) -> Result<Var<'g, T>> {
    check_pair(pred, gt)?;
    let m_hat = pred.h.mul(pred.v)?.mean(&[1, 2, 3], false)?;
    let m = gt.h.mul(gt.v)?.mean(&[1, 2, 3], false)?;
    Ok(m_hat.sub(m)?.square().mean_all())
}

/// Full covariance correction loss with its breakdown.
pub fn ccl_total<'g, T: Scalar>(
    pred: &HviVars<'g, T>,
    gt: &HviVars<'g, T>,
    cfg: &LossConfig,
) -> Result<(Var<'g, T>, LossBreakdown)> {
    check_pair(pred, gt)?;
    let w = luminance_weights(&pred.i.value(), &gt.i.value())?;
    ccl_total_weighted(pred, gt, cfg, w)
}

/// [`ccl_total`] with the luminance weights held at the given values. With
/// the weights fixed the loss is exactly the function whose gradient
/// training applies, which is what finite differences should be compared to.
pub fn ccl_total_weighted<'g, T: Scalar>(
    pred: &HviVars<'g, T>,
    gt: &HviVars<'g, T>,
    cfg: &LossConfig,
    weights: (f64, f64),
) -> Result<(Var<'g, T>, LossBreakdown)> {
    check_pair(pred, gt)?;
    let l_i = channel_mse(pred.i, gt.i)?;
    let (l_ihv, l_h, l_v, w_h, w_v) = l_ihv_weighted(pred, gt, weights)?;
    let l_hv = joint_mean_loss(pred, gt)?;
    let total = l_i
        .scale(cfg.weight_i)
        .add(l_ihv.scale(cfg.weight_ihv))?
        .add(l_hv.scale(cfg.weight_hv))?;
    let b = LossBreakdown {
        l_i: l_i.item().as_f64(),
        l_h: l_h.item().as_f64(),
        l_v: l_v.item().as_f64(),
        w_h,
        w_v,
        l_ihv: l_ihv.item().as_f64(),
        l_hv: l_hv.item().as_f64(),
        l_rgb: 0.0,
        total: total.item().as_f64(),
    };
    Ok((total, b))
}

/// Everything an objective may look at for one batch.
pub struct LossInputs<'a, 'g, T: Scalar> {
    pub pred: &'a HviVars<'g, T>,
    pub gt: &'a HviVars<'g, T>,
    pub pred_rgb: Var<'g, T>,
    pub gt_rgb: Var<'g, T>,
}

/// Training objective. Implementations are registered by name in
/// [`ObjectiveRegistry`].
pub trait Objective<T: Scalar> {
    fn name(&self) -> &'static str;

    fn evaluate<'g>(&self, x: &LossInputs<'_, 'g, T>) -> Result<(Var<'g, T>, LossBreakdown)>;
}

fn with_rgb<'g, T: Scalar>(
    cfg: &LossConfig,
    x: &LossInputs<'_, 'g, T>,
    (total, mut b): (Var<'g, T>, LossBreakdown),
) -> Result<(Var<'g, T>, LossBreakdown)> {
    if cfg.rgb_mse == 0.0 {
        return Ok((total, b));
    }
    let l = channel_mse(x.pred_rgb, x.gt_rgb)?;
    let total = total.add(l.scale(cfg.rgb_mse))?;
    b.l_rgb = l.item().as_f64();
    b.total = total.item().as_f64();
    Ok((total, b))
}

pub struct Ccl(pub LossConfig);

impl<T: Scalar> Objective<T> for Ccl {
    fn name(&self) -> &'static str {
        "ccl"
    }

    fn evaluate<'g>(&self, x: &LossInputs<'_, 'g, T>) -> Result<(Var<'g, T>, LossBreakdown)> {
        let r = ccl_total(x.pred, x.gt, &self.0)?;
        with_rgb(&self.0, x, r)
    }
}

/// Unweighted per-plane pixel loss over h, v and i (absolute or squared error).
pub struct PixelLoss {
    pub cfg: LossConfig,
    pub squared: bool,
}

impl<T: Scalar> Objective<T> for PixelLoss {
    fn name(&self) -> &'static str {
        if self.squared {
            "l2"
        } else {
            "l1"
        }
    }

    fn evaluate<'g>(&self, x: &LossInputs<'_, 'g, T>) -> Result<(Var<'g, T>, LossBreakdown)> {
        check_pair(x.pred, x.gt)?;
        let term = |p, g| {
            if self.squared {
                channel_mse(p, g)
            } else {
                channel_mae(p, g)
            }
        };
        let l_i = term(x.pred.i, x.gt.i)?;
        let l_h = term(x.pred.h, x.gt.h)?;
        let l_v = term(x.pred.v, x.gt.v)?;
        let total = l_i.add(l_h)?.add(l_v)?;
        let b = LossBreakdown {
            l_i: l_i.item().as_f64(),
            l_h: l_h.item().as_f64(),
            l_v: l_v.item().as_f64(),
            w_h: 1.0,
            w_v: 1.0,
            l_ihv: l_h.item().as_f64() + l_v.item().as_f64(),
            l_hv: 0.0,
            l_rgb: 0.0,
            total: total.item().as_f64(),
        };
        with_rgb(&self.cfg, x, (total, b))
    }
}

pub type ObjectiveFactory<T> = fn(&LossConfig) -> Box<dyn Objective<T>>;

/// Name → constructor table for training objectives.
pub struct ObjectiveRegistry<T: Scalar> {
    entries: IndexMap<&'static str, ObjectiveFactory<T>>,
}

impl<T: Scalar> Default for ObjectiveRegistry<T> {
    fn default() -> Self {
        let mut r = Self {
            entries: IndexMap::new(),
        };
        r.register("ccl", |c| Box::new(Ccl(c.clone())));
        r.register("l1", |c| {
            Box::new(PixelLoss {
                cfg: c.clone(),
                squared: false,
            })
        });
        r.register("l2", |c| {
            Box::new(PixelLoss {
                cfg: c.clone(),
                squared: true,
            })
        });
        r
    }
}

impl<T: Scalar> ObjectiveRegistry<T> {
    pub fn register(&mut self, name: &'static str, factory: ObjectiveFactory<T>) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn create(&self, cfg: &LossConfig) -> Result<Box<dyn Objective<T>>> {
        let factory = self.entries.get(cfg.objective.as_str()).ok_or_else(|| ModelError::UnknownStrategy {
            kind: "objective",
            name: cfg.objective.clone(),
            available: self.names().join(", "),
        })?;
        Ok(factory(cfg))
    }
}
