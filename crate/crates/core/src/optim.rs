//! Adam, cosine learning-rate annealing, and the training loop.

use std::io::Write;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::data::{sample_batch, ImagePair};
use crate::hvi::{rgb_to_hvi, HviVars};
use crate::loss::{LossBreakdown, LossConfig, LossInputs, ObjectiveRegistry};
use crate::metrics::psnr;
use crate::network::{Network, MIN_SIZE};
use crate::nn::ModelError;
use crate::params::ParamRegistry;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite loss at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training log: {0}")]
    Log(#[from] csv::Error),
    #[error("training log: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for OptimError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

type Result<T, E = OptimError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: IndexMap<String, Tensor<f32>>,
    v: IndexMap<String, Tensor<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// One bias-corrected Adam update. Gradients are left in place.
pub fn adam_step(params: &mut ParamRegistry<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(OptimError::MissingGrad(name.to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
        let values = p.value.data_mut();
        for k in 0..values.len() {
            let gk = g.data()[k] as f64;
            let mk = b1 * m.data()[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v.data()[k] as f64 + (1.0 - b2) * gk * gk;
            m.data_mut()[k] = mk as f32;
            v.data_mut()[k] = vk as f32;
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + state.eps);
            values[k] = (values[k] as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Held-out PSNR is measured every this many steps (and at the last step).
    pub eval_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 1e-7,
            total_steps: 1000,
            batch_size: 8,
            patch_size: 256,
            seed: 0,
            eval_every: 50,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min ({}) <= lr_max ({})", self.lr_min, self.lr_max));
        }
        if self.patch_size % 4 != 0 || self.patch_size < MIN_SIZE {
            return bad(format!("patch_size {} must be a multiple of 4 and at least {MIN_SIZE}", self.patch_size));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("total_steps, batch_size and eval_every must be positive".into());
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(OptimError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step == 0 {
        return Ok(cfg.lr_max);
    }
    if step == cfg.total_steps {
        return Ok(cfg.lr_min);
    }
    let frac = step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub psnr_holdout: Option<f64>,
}

/// Enhance a batch without recording gradients.
pub fn enhance(net: &Network<f32>, params: &ParamRegistry<f32>, rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    let g = Graph::new();
    let (y, _) = net.forward(&params.bind_frozen(&g), g.constant(rgb.clone()))?;
    let out = (*y.value()).clone();
    Ok(out)
}

pub fn holdout_psnr(net: &Network<f32>, params: &ParamRegistry<f32>, pair: &ImagePair) -> Result<f64> {
    let y = enhance(net, params, &pair.low)?;
    Ok(psnr(&y, &pair.gt).map_err(|e| OptimError::Data(e.to_string()))?[0])
}

/// One forward/backward pass on a batch; gradients land in `params`.
pub fn loss_and_grad(
    net: &Network<f32>,
    params: &mut ParamRegistry<f32>,
    low: &Tensor<f32>,
    gt: &Tensor<f32>,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let objective = ObjectiveRegistry::<f32>::default().create(loss)?;
    let g = Graph::new();
    let bound = params.bind(&g);
    let (pred_rgb, pred) = net.forward(&bound, g.constant(low.clone()))?;
    let gt_hvi = rgb_to_hvi(gt, &net.config().hvi).map_err(ModelError::from)?;
    let gt_vars = HviVars::constant(&g, &gt_hvi);
    let (total, breakdown) = objective.evaluate(&LossInputs {
        pred: &pred,
        gt: &gt_vars,
        pred_rgb,
        gt_rgb: g.constant(gt.clone()),
    })?;
    let grads = g.backward(total)?;
    params.accumulate(&bound, &grads);
    // parameters that do not reach the loss still need a (zero) gradient
    for (_, p) in params.iter_mut() {
        if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }
    Ok(breakdown)
}

/// Train in place. `on_step` sees every log entry as it is produced.
pub fn train(
    net: &Network<f32>,
    params: &mut ParamRegistry<f32>,
    data: &[ImagePair],
    holdout: Option<&ImagePair>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(OptimError::Data("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut logs = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let lr = cosine_lr(step, cfg)?;
        let (low, gt) = sample_batch(data, cfg.batch_size, cfg.patch_size, &mut rng).map_err(OptimError::Data)?;
        params.zero_grad();
        let loss = loss_and_grad(net, params, &low, &gt, &cfg.loss)?;
        if !loss.total.is_finite() {
            return Err(OptimError::NonFinite(step + 1));
        }
        adam_step(params, &mut state, lr)?;
        let last = step + 1 == cfg.total_steps;
        let psnr_holdout = match holdout {
            Some(p) if last || (step + 1) % cfg.eval_every == 0 => Some(holdout_psnr(net, params, p)?),
            _ => None,
        };
        let entry = StepLog {
            step: step + 1,
            lr,
            loss,
            psnr_holdout,
        };
        on_step(&entry);
        logs.push(entry);
    }
    params.zero_grad();
    Ok(logs)
}

pub const LOG_HEADER: [&str; 11] = [
    "step", "lr", "l_i", "l_h", "l_v", "w_h", "w_v", "l_ihv", "l_hv", "total", "psnr_holdout",
];

pub fn write_log_csv(logs: &[StepLog], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_HEADER)?;
    for e in logs {
        let b = &e.loss;
        let mut rec: Vec<String> = vec![e.step.to_string(), e.lr.to_string()];
        rec.extend([b.l_i, b.l_h, b.l_v, b.w_h, b.w_v, b.l_ihv, b.l_hv, b.total].map(|x| x.to_string()));
        rec.push(e.psnr_holdout.map(|p| p.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
