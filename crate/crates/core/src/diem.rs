//! Attention-guided fusion (MAFM), cross dynamic enhancement (CDEM) with its
//! multi-branch convolution block (MFEM), and the dual-stream module that
//! wraps an enhancer between two fusions for each branch.

use indexmap::IndexMap;

use crate::attention::{AttentionConfig, ChannelAttention, CrossAttention, FeedForward, PixelAttention, SpatialAttention};
use crate::autodiff::Var;
use crate::nn::{ChannelNorm, Conv, ModelError, Module, Result};
use crate::params::{Bound, Initializer};
use crate::tensor::Scalar;

fn same_shape<T: Scalar>(op: &str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ModelError::Config(format!(
            "{op}: input shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `F_init + W·f_other + (1−W)·f_primary`.
pub fn mafm_combine<'g, T: Scalar>(
    f_primary: Var<'g, T>,
    f_other: Var<'g, T>,
    w: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let init = f_primary.add(f_other)?;
    let keep = w.neg().shift(1.0);
    Ok(init.add(w.mul(f_other)?)?.add(keep.mul(f_primary)?)?)
}

#[derive(Clone, Debug)]
pub struct Mafm {
    prefix: String,
    pub ca: ChannelAttention,
    pub sa: SpatialAttention,
    pub pa_channel: PixelAttention,
    pub pa_spatial: PixelAttention,
}

impl Mafm {
    pub fn new(prefix: &str, cfg: &AttentionConfig) -> Self {
        Self {
            prefix: prefix.to_string(),
            ca: ChannelAttention::new(&format!("{prefix}.ca"), cfg),
            sa: SpatialAttention::new(&format!("{prefix}.sa")),
            pa_channel: PixelAttention::new(&format!("{prefix}.pa_c"), cfg),
            pa_spatial: PixelAttention::new(&format!("{prefix}.pa_s"), cfg),
        }
    }

    pub fn phi_name(&self) -> String {
        format!("{}.phi", self.prefix)
    }

    pub fn omega_name(&self) -> String {
        format!("{}.omega", self.prefix)
    }

    /// Refined gate `W = φ·W_c + ω·W_s` computed from `F_init`.
    pub fn gate<'g, T: Scalar>(&self, p: &Bound<'g, T>, init: Var<'g, T>) -> Result<Var<'g, T>> {
        let ca = self.ca.forward(p, init)?;
        let wc = self.pa_channel.forward(p, ca.mul(init)?.add(init)?, init)?.sigmoid();
        let sa = self.sa.forward(p, init)?;
        let ws = self.pa_spatial.forward(p, sa.mul(init)?.add(init)?, init)?.sigmoid();
        let phi = p.get(&self.phi_name())?;
        let omega = p.get(&self.omega_name())?;
        Ok(wc.mul(phi)?.add(ws.mul(omega)?)?)
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        f_primary: Var<'g, T>,
        f_other: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        same_shape("mafm", &f_primary, &f_other)?;
        let w = self.gate(p, f_primary.add(f_other)?)?;
        mafm_combine(f_primary, f_other, w)
    }
}

impl Module for Mafm {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        self.ca.declare(init)?;
        self.sa.declare(init)?;
        self.pa_channel.declare(init)?;
        self.pa_spatial.declare(init)?;
        init.constant(&self.phi_name(), &[1], 0.5)?;
        init.constant(&self.omega_name(), &[1], 0.5)?;
        Ok(())
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.ca.macs(h, w) + self.sa.macs(h, w) + self.pa_channel.macs(h, w) + self.pa_spatial.macs(h, w)
    }
}

/// Four parallel convolutions (pointwise, 3×3, dilated 3×3, 1×3 then 3×1)
/// concatenated and fused back to `C` channels.
#[derive(Clone, Debug)]
pub struct Mfem {
    pub point: Conv,
    pub square: Conv,
    pub dilated: Conv,
    pub row: Conv,
    pub col: Conv,
    pub fuse: Conv,
}

impl Mfem {
    pub fn new(prefix: &str, channels: usize) -> Result<Self> {
        if channels < 4 {
            return Err(ModelError::Config(format!("mfem needs at least 4 channels, got {channels}")));
        }
        let b = channels / 4;
        Ok(Self {
            point: Conv::pointwise(format!("{prefix}.b1"), channels, b),
            square: Conv::new(format!("{prefix}.b3"), channels, b, (3, 3)),
            dilated: Conv::new(format!("{prefix}.b3d2"), channels, b, (3, 3)).dilated(2),
            row: Conv::new(format!("{prefix}.b13"), channels, b, (1, 3)),
            col: Conv::new(format!("{prefix}.b31"), b, b, (3, 1)),
            fuse: Conv::pointwise(format!("{prefix}.fuse"), 4 * b, channels).zero_init(),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let branches = [
            self.point.forward(p, x)?,
            self.square.forward(p, x)?,
            self.dilated.forward(p, x)?,
            self.col.forward(p, self.row.forward(p, x)?)?,
        ];
        let cat = x.graph().concat(&branches, 1)?;
        self.fuse.forward(p, cat)
    }
}

impl Module for Mfem {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        for c in [&self.point, &self.square, &self.dilated, &self.row, &self.col, &self.fuse] {
            c.declare(init)?;
        }
        Ok(())
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        [&self.point, &self.square, &self.dilated, &self.row, &self.col, &self.fuse]
            .iter()
            .map(|c| c.macs(h, w))
            .sum()
    }
}

/// The enhancement core placed between the two fusions of a dual-stream
/// module. Implementations are registered by name in [`EnhancerRegistry`].
pub trait Enhancer<T: Scalar>: Module {
    fn name(&self) -> &'static str;

    fn forward<'g>(&self, p: &Bound<'g, T>, f_self: Var<'g, T>, f_fused: Var<'g, T>) -> Result<Var<'g, T>>;
}

#[derive(Clone, Debug)]
pub struct Cdem {
    prefix: String,
    pub attn: CrossAttention,
    pub ffn: FeedForward,
    pub mfem: Mfem,
}

impl Cdem {
    pub const SCALARS: [(&'static str, f32); 4] = [("alpha", 1.0), ("beta", 0.0), ("lambda", 1.0), ("mu", 1.0)];

    pub fn new(prefix: &str, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self {
            prefix: prefix.to_string(),
            attn: CrossAttention::new(&format!("{prefix}.attn"), cfg),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), cfg),
            mfem: Mfem::new(&format!("{prefix}.mfem"), cfg.channels)?,
        })
    }

    pub fn scalar_name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn cdem_forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        f_self: Var<'g, T>,
        f_fused: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        same_shape("cdem", &f_self, &f_fused)?;
        let s = |n: &str| p.get(&self.scalar_name(n));
        let z = self.attn.forward(p, f_self, f_fused)?;
        let ffn_in = z.mul(s("alpha")?)?.add(f_fused.mul(s("beta")?)?)?;
        let z_hat = self.ffn.forward(p, ffn_in)?.mul(s("lambda")?)?.add(z.mul(s("mu")?)?)?;
        let base = f_self.add(z_hat)?;
        Ok(self.mfem.forward(p, base)?.add(base)?)
    }
}

impl Module for Cdem {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        self.attn.declare(init)?;
        self.ffn.declare(init)?;
        self.mfem.declare(init)?;
        for (n, v) in Self::SCALARS {
            init.constant(&self.scalar_name(n), &[1], v)?;
        }
        Ok(())
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.attn.macs(h, w) + self.ffn.macs(h, w) + self.mfem.macs(h, w)
    }
}

impl<T: Scalar> Enhancer<T> for Cdem {
    fn name(&self) -> &'static str {
        "cdem"
    }

    fn forward<'g>(&self, p: &Bound<'g, T>, f_self: Var<'g, T>, f_fused: Var<'g, T>) -> Result<Var<'g, T>> {
        self.cdem_forward(p, f_self, f_fused)
    }
}

/// Plain cross-attention with a residual: `f_self + CrossAttention(f_self, f_fused)`.
#[derive(Clone, Debug)]
pub struct PlainCrossAttention {
    pub attn: CrossAttention,
}

impl PlainCrossAttention {
    pub fn new(prefix: &str, cfg: &AttentionConfig) -> Self {
        Self {
            attn: CrossAttention::new(&format!("{prefix}.attn"), cfg),
        }
    }
}

impl Module for PlainCrossAttention {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        self.attn.declare(init)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.attn.macs(h, w)
    }
}

impl<T: Scalar> Enhancer<T> for PlainCrossAttention {
    fn name(&self) -> &'static str {
        "tca"
    }

    fn forward<'g>(&self, p: &Bound<'g, T>, f_self: Var<'g, T>, f_fused: Var<'g, T>) -> Result<Var<'g, T>> {
        same_shape("tca", &f_self, &f_fused)?;
        Ok(f_self.add(self.attn.forward(p, f_self, f_fused)?)?)
    }
}

pub type EnhancerFactory<T> = fn(&str, &AttentionConfig) -> Result<Box<dyn Enhancer<T>>>;

/// Name → constructor table for enhancement cores.
pub struct EnhancerRegistry<T: Scalar> {
    entries: IndexMap<&'static str, EnhancerFactory<T>>,
}

impl<T: Scalar> Default for EnhancerRegistry<T> {
    fn default() -> Self {
        let mut r = Self {
            entries: IndexMap::new(),
        };
        r.register("cdem", |prefix, cfg| Ok(Box::new(Cdem::new(prefix, cfg)?)));
        r.register("tca", |prefix, cfg| Ok(Box::new(PlainCrossAttention::new(prefix, cfg))));
        r
    }
}

impl<T: Scalar> EnhancerRegistry<T> {
    pub fn register(&mut self, name: &'static str, factory: EnhancerFactory<T>) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn create(&self, name: &str, prefix: &str, cfg: &AttentionConfig) -> Result<Box<dyn Enhancer<T>>> {
        let factory = self.entries.get(name).ok_or_else(|| ModelError::UnknownStrategy {
            kind: "enhancer",
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        factory(prefix, cfg)
    }
}

/// Which fusions a dual-stream module applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionToggles {
    pub before: bool,
    pub after: bool,
}

impl Default for FusionToggles {
    fn default() -> Self {
        Self {
            before: true,
            after: true,
        }
    }
}

/// Dual-stream interaction module. Each stream is channel-normalized, fused
/// with the other stream, enhanced, then fused again with the other stream's
/// enhanced features. The two streams own independent parameters.
pub struct Diem<T: Scalar> {
    pub norm_i: ChannelNorm,
    pub norm_hv: ChannelNorm,
    pub before_i: Mafm,
    pub before_hv: Mafm,
    pub core_i: Box<dyn Enhancer<T>>,
    pub core_hv: Box<dyn Enhancer<T>>,
    pub after_i: Mafm,
    pub after_hv: Mafm,
    pub toggles: FusionToggles,
}

impl<T: Scalar> Diem<T> {
    pub fn new(
        prefix: &str,
        cfg: &AttentionConfig,
        enhancer: &str,
        toggles: FusionToggles,
        registry: &EnhancerRegistry<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            norm_i: ChannelNorm::new(format!("{prefix}.norm_i"), cfg.channels),
            norm_hv: ChannelNorm::new(format!("{prefix}.norm_hv"), cfg.channels),
            before_i: Mafm::new(&format!("{prefix}.mafm1_i"), cfg),
            before_hv: Mafm::new(&format!("{prefix}.mafm1_hv"), cfg),
            core_i: registry.create(enhancer, &format!("{prefix}.core_i"), cfg)?,
            core_hv: registry.create(enhancer, &format!("{prefix}.core_hv"), cfg)?,
            after_i: Mafm::new(&format!("{prefix}.mafm2_i"), cfg),
            after_hv: Mafm::new(&format!("{prefix}.mafm2_hv"), cfg),
            toggles,
        })
    }

    /// Returns `(out_i, out_hv)`.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g, T>,
        f_i: Var<'g, T>,
        f_hv: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        same_shape("diem", &f_i, &f_hv)?;
        let f_i = self.norm_i.forward(p, f_i)?;
        let f_hv = self.norm_hv.forward(p, f_hv)?;
        let (fused_i, fused_hv) = if self.toggles.before {
            (
                self.before_i.forward(p, f_hv, f_i)?,
                self.before_hv.forward(p, f_i, f_hv)?,
            )
        } else {
            (f_hv, f_i)
        };
        let z_i = self.core_i.forward(p, f_i, fused_i)?;
        let z_hv = self.core_hv.forward(p, f_hv, fused_hv)?;
        if !self.toggles.after {
            return Ok((z_i, z_hv));
        }
        Ok((
            self.after_i.forward(p, z_i, z_hv)?,
            self.after_hv.forward(p, z_hv, z_i)?,
        ))
    }

    fn parts(&self) -> Vec<&dyn Module> {
        let mut v: Vec<&dyn Module> = vec![&self.norm_i, &self.norm_hv];
        if self.toggles.before {
            v.extend([&self.before_i as &dyn Module, &self.before_hv]);
        }
        v.extend([self.core_i.as_ref() as &dyn Module, self.core_hv.as_ref()]);
        if self.toggles.after {
            v.extend([&self.after_i as &dyn Module, &self.after_hv]);
        }
        v
    }
}

impl<T: Scalar> Module for Diem<T> {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        for m in self.parts() {
            m.declare(init)?;
        }
        Ok(())
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.parts().iter().map(|m| m.macs(h, w)).sum()
    }
}
