//! Channel, spatial and pixel attention gates, channel-token cross-attention
//! and the pointwise feed-forward block.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::nn::{Conv, ModelError, Module, Result};
use crate::params::{Bound, Initializer};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_expand: f64,
    pub reduction: usize,
}

impl AttentionConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            heads: 4,
            ffn_expand: 2.0,
            reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.reduction == 0 || self.channels / self.reduction < 1 {
            return Err(ModelError::Config(format!(
                "reduction {} leaves no bottleneck channels for {}",
                self.reduction, self.channels
            )));
        }
        if !(self.ffn_expand > 0.0) {
            return Err(ModelError::Config("ffn_expand must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_expand * self.channels as f64).ceil() as usize
    }
}

fn check_channels<T: Scalar>(x: &Var<'_, T>, channels: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(ModelError::Config(format!(
            "expected B×{channels}×H×W input, got {s:?}"
        )));
    }
    Ok(())
}

/// Global average pool, bottleneck MLP, sigmoid: one gate per channel.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    channels: usize,
    pub squeeze: Conv,
    pub excite: Conv,
}

impl ChannelAttention {
    pub fn new(prefix: &str, cfg: &AttentionConfig) -> Self {
        let mid = cfg.channels / cfg.reduction;
        Self {
            channels: cfg.channels,
            squeeze: Conv::pointwise(format!("{prefix}.fc1"), cfg.channels, mid),
            excite: Conv::pointwise(format!("{prefix}.fc2"), mid, cfg.channels),
        }
    }

    /// B×C×H×W → B×C×1×1 gates in (0, 1).
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        check_channels(&x, self.channels)?;
        let pooled = x.mean(&[2, 3], true)?;
        let hidden = self.squeeze.forward(p, pooled)?.relu();
        Ok(self.excite.forward(p, hidden)?.sigmoid())
    }
}

impl Module for ChannelAttention {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        self.squeeze.declare(init)?;
        self.excite.declare(init)
    }

    fn macs(&self, _h: usize, _w: usize) -> u64 {
        self.squeeze.macs(1, 1) + self.excite.macs(1, 1)
    }
}

/// Channel mean and max, 7×7 conv, sigmoid: one gate per pixel.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub const KERNEL: usize = 7;

    pub fn new(prefix: &str) -> Self {
        Self {
            conv: Conv::new(format!("{prefix}.conv"), 2, 1, (Self::KERNEL, Self::KERNEL)),
        }
    }

    /// B×C×H×W → B×1×H×W gates in (0, 1).
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mean = x.mean(&[1], true)?;
        let max = x.max_over(&[1], true)?;
        let both = x.graph().concat(&[mean, max], 1)?;
        Ok(self.conv.forward(p, both)?.sigmoid())
    }
}

impl Module for SpatialAttention {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        self.conv.declare(init)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}

/// Two-input pointwise attention returning pre-sigmoid logits.
#[derive(Clone, Debug)]
pub struct PixelAttention {
    channels: usize,
    pub mix: Conv,
    pub out: Conv,
}

impl PixelAttention {
    pub fn new(prefix: &str, cfg: &AttentionConfig) -> Self {
        let c = cfg.channels;
        Self {
            channels: c,
            mix: Conv::pointwise(format!("{prefix}.mix"), 2 * c, c),
            out: Conv::pointwise(format!("{prefix}.out"), c, c),
        }
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        a: Var<'g, T>,
        b: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        check_channels(&a, self.channels)?;
        if a.shape() != b.shape() {
            return Err(ModelError::Config(format!(
                "pixel attention inputs differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let both = a.graph().concat(&[a, b], 1)?;
        let hidden = self.mix.forward(p, both)?.relu();
        self.out.forward(p, hidden)
    }
}

impl Module for PixelAttention {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        self.mix.declare(init)?;
        self.out.declare(init)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.mix.macs(h, w) + self.out.macs(h, w)
    }
}

/// Multi-head cross-attention whose tokens are channels: each head attends
/// over `C/heads` channel rows of length `H·W`, so cost is linear in pixels.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    cfg: AttentionConfig,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub project: Conv,
}

impl CrossAttention {
    const NORM_EPS: f64 = 1e-12;

    pub fn new(prefix: &str, cfg: &AttentionConfig) -> Self {
        let c = cfg.channels;
        Self {
            cfg: *cfg,
            query: Conv::pointwise(format!("{prefix}.q"), c, c).no_bias(),
            key: Conv::pointwise(format!("{prefix}.k"), c, c).no_bias(),
            value: Conv::pointwise(format!("{prefix}.v"), c, c).no_bias(),
            project: Conv::pointwise(format!("{prefix}.proj"), c, c).zero_init(),
        }
    }

    /// Row-wise L2 normalization along the last axis.
    fn l2_rows<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
        let last = x.shape().len() - 1;
        let norm = x.square().sum(&[last], true)?.shift(Self::NORM_EPS).sqrt();
        Ok(x.div(norm)?)
    }

    /// Attention weights, B×heads×d×d; exposed for inspection and tests.
    pub fn attention_map<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        q_feat: Var<'g, T>,
        kv_feat: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let (q, k, _) = self.tokens(p, q_feat, kv_feat)?;
        self.weights(q, k)
    }

    fn tokens<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        q_feat: Var<'g, T>,
        kv_feat: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
        check_channels(&q_feat, self.cfg.channels)?;
        if q_feat.shape() != kv_feat.shape() {
            return Err(ModelError::Config(format!(
                "cross-attention inputs differ: {:?} vs {:?}",
                q_feat.shape(),
                kv_feat.shape()
            )));
        }
        let s = q_feat.shape();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let heads = self.cfg.heads;
        let split = |x: Var<'g, T>| x.reshape(&[b, heads, c / heads, hw]);
        let q = split(self.query.forward(p, q_feat)?)?;
        let k = split(self.key.forward(p, kv_feat)?)?;
        let v = split(self.value.forward(p, kv_feat)?)?;
        Ok((q, k, v))
    }

    fn weights<'g, T: Scalar>(&self, q: Var<'g, T>, k: Var<'g, T>) -> Result<Var<'g, T>> {
        let d = self.cfg.channels / self.cfg.heads;
        let q = Self::l2_rows(q)?;
        let k = Self::l2_rows(k)?;
        let scores = q.matmul(k.permute(&[0, 1, 3, 2])?)?.scale(1.0 / (d as f64).sqrt());
        Ok(scores.softmax(3)?)
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        q_feat: Var<'g, T>,
        kv_feat: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let shape = q_feat.shape();
        let (q, k, v) = self.tokens(p, q_feat, kv_feat)?;
        let attn = self.weights(q, k)?;
        let mixed = attn.matmul(v)?.reshape(&shape)?;
        self.project.forward(p, mixed)
    }
}

impl Module for CrossAttention {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        self.cfg.validate()?;
        self.query.declare(init)?;
        self.key.declare(init)?;
        self.value.declare(init)?;
        self.project.declare(init)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        let d = (self.cfg.channels / self.cfg.heads) as u64;
        // scores (d×HW·HW×d) and mixing (d×d·d×HW) per head
        let attn = 2 * self.cfg.channels as u64 * d * (h * w) as u64;
        self.query.macs(h, w) + self.key.macs(h, w) + self.value.macs(h, w) + self.project.macs(h, w) + attn
    }
}

/// Pointwise expand, GELU, project back.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Conv,
    pub contract: Conv,
}

impl FeedForward {
    pub fn new(prefix: &str, cfg: &AttentionConfig) -> Self {
        let hidden = cfg.ffn_hidden();
        Self {
            expand: Conv::pointwise(format!("{prefix}.fc1"), cfg.channels, hidden),
            contract: Conv::pointwise(format!("{prefix}.fc2"), hidden, cfg.channels).zero_init(),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.expand.forward(p, x)?.gelu();
        self.contract.forward(p, h)
    }
}

impl Module for FeedForward {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        self.expand.declare(init)?;
        self.contract.declare(init)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.expand.macs(h, w) + self.contract.macs(h, w)
    }
}
