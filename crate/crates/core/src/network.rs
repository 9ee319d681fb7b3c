//! Three-level dual-branch U-Net over HVI planes.
//!
//! The chroma pair (h, v) and the luminance plane i are embedded separately,
//! pass through a mirrored encoder/decoder with one group of dual-stream
//! modules per level on each side, and two zero-initialized heads predict
//! residuals that are added back to the input planes.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autodiff::Var;
use crate::diem::{Diem, EnhancerRegistry, FusionToggles};
use crate::hvi::{hvi_to_rgb_var, rgb_to_hvi_var, HviConfig, HviVars};
use crate::nn::{Conv, ModelError, Module, Result};
use crate::params::{Bound, Initializer, ParamRegistry};
use crate::tensor::Scalar;

pub const LEVELS: usize = 3;
pub const MIN_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub diem_per_level: usize,
    pub heads: usize,
    pub ffn_expand: f64,
    pub reduction: usize,
    pub hvi: HviConfig,
    /// Registered enhancer name: `cdem` or `tca`.
    pub enhancer: String,
    /// Fusion before the enhancer.
    pub mafm1: bool,
    /// Fusion after the enhancer.
    pub mafm2: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            diem_per_level: 1,
            heads: 4,
            ffn_expand: 2.0,
            reduction: 4,
            hvi: HviConfig::default(),
            enhancer: "cdem".into(),
            mafm1: true,
            mafm2: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || c % 4 != 0 || c % self.heads.max(1) != 0 {
            return Err(ModelError::Config(format!(
                "base_channels {c} must be a positive multiple of 4 and of heads {}",
                self.heads
            )));
        }
        if self.diem_per_level == 0 {
            return Err(ModelError::Config("diem_per_level must be positive".into()));
        }
        self.hvi.validate()?;
        for level in 0..LEVELS {
            self.attention(level).validate()?;
        }
        Ok(())
    }

    pub fn attention(&self, level: usize) -> AttentionConfig {
        AttentionConfig {
            channels: self.base_channels << level,
            heads: self.heads,
            ffn_expand: self.ffn_expand,
            reduction: self.reduction,
        }
    }

    pub fn toggles(&self) -> FusionToggles {
        FusionToggles {
            before: self.mafm1,
            after: self.mafm2,
        }
    }
}

/// Per-branch pair of layers.
#[derive(Clone, Debug)]
struct Pair {
    i: Conv,
    hv: Conv,
}

pub struct Network<T: Scalar = f32> {
    cfg: NetworkConfig,
    embed: Pair,
    encoder: [Vec<Diem<T>>; LEVELS],
    down: [Pair; LEVELS - 1],
    up: [Pair; LEVELS - 1],
    decoder: [Vec<Diem<T>>; LEVELS - 1],
    head: Pair,
}

impl<T: Scalar> Network<T> {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let registry = EnhancerRegistry::<T>::default();
        let group = |name: &str, level: usize| -> Result<Vec<Diem<T>>> {
            (0..cfg.diem_per_level)
                .map(|k| {
                    Diem::new(
                        &format!("{name}.{k}"),
                        &cfg.attention(level),
                        &cfg.enhancer,
                        cfg.toggles(),
                        &registry,
                    )
                })
                .collect()
        };
        let pair = |name: &str, cin_i: usize, cin_hv: usize, cout_i: usize, cout_hv: usize| Pair {
            i: Conv::new(format!("{name}_i"), cin_i, cout_i, (3, 3)),
            hv: Conv::new(format!("{name}_hv"), cin_hv, cout_hv, (3, 3)),
        };
        let down = |l: usize| {
            let p = pair(&format!("down{l}"), c << l, c << l, c << (l + 1), c << (l + 1));
            Pair {
                i: p.i.stride(2),
                hv: p.hv.stride(2),
            }
        };
        let up = |l: usize| pair(&format!("up{l}"), c << (l + 1), c << (l + 1), c << l, c << l);
        let head = pair("head", c, c, 1, 2);
        Ok(Self {
            cfg: cfg.clone(),
            embed: pair("embed", 1, 2, c, c),
            encoder: [group("enc0", 0)?, group("enc1", 1)?, group("mid", 2)?],
            down: [down(0), down(1)],
            up: [up(0), up(1)],
            decoder: [group("dec0", 0)?, group("dec1", 1)?],
            head: Pair {
                i: head.i.zero_init(),
                hv: head.hv.zero_init(),
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Fresh parameters; identical seeds give bit-identical registries.
    pub fn build(&self, seed: u64) -> Result<ParamRegistry<f32>> {
        let mut init = Initializer::new(seed);
        self.declare(&mut init)?;
        Ok(init.finish())
    }

    fn run_group<'g>(
        group: &[Diem<T>],
        p: &Bound<'g, T>,
        mut i: Var<'g, T>,
        mut hv: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        for d in group {
            (i, hv) = d.forward(p, i, hv)?;
        }
        Ok((i, hv))
    }

    /// Enhanced HVI planes for a B×3×H×W RGB batch.
    pub fn forward_hvi<'g>(&self, p: &Bound<'g, T>, rgb: Var<'g, T>) -> Result<HviVars<'g, T>> {
        let s = rgb.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(ModelError::Config(format!("expected B×3×H×W input, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if h < MIN_SIZE || w < MIN_SIZE {
            return Err(ModelError::TooSmall { h, w });
        }
        let hvi = rgb_to_hvi_var(rgb, &self.cfg.hvi)?;
        let g = rgb.graph();
        let (ph, pw) = (h.next_multiple_of(4) - h, w.next_multiple_of(4) - w);
        let chroma = g.concat(&[hvi.h, hvi.v], 1)?.pad2d(0, ph, 0, pw)?;
        let luma = hvi.i.pad2d(0, ph, 0, pw)?;

        let mut fi = self.embed.i.forward(p, luma)?;
        let mut fhv = self.embed.hv.forward(p, chroma)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for level in 0..LEVELS {
            (fi, fhv) = Self::run_group(&self.encoder[level], p, fi, fhv)?;
            if level + 1 < LEVELS {
                skips.push((fi, fhv));
                fi = self.down[level].i.forward(p, fi)?;
                fhv = self.down[level].hv.forward(p, fhv)?;
            }
        }
        for level in (0..LEVELS - 1).rev() {
            let (si, shv) = skips[level];
            fi = self.up[level].i.forward(p, fi.upsample2x()?)?.add(si)?;
            fhv = self.up[level].hv.forward(p, fhv.upsample2x()?)?.add(shv)?;
            (fi, fhv) = Self::run_group(&self.decoder[level], p, fi, fhv)?;
        }

        let di = self.head.i.forward(p, fi)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
        let dhv = self.head.hv.forward(p, fhv)?.narrow(2, 0, h)?.narrow(3, 0, w)?;
        Ok(HviVars {
            h: hvi.h.add(dhv.narrow(1, 0, 1)?)?,
            v: hvi.v.add(dhv.narrow(1, 1, 1)?)?,
            i: hvi.i.add(di)?.clamp(0.0, 1.0),
        })
    }

    /// Returns `(rgb_out, hvi_out)`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, rgb: Var<'g, T>) -> Result<(Var<'g, T>, HviVars<'g, T>)> {
        let hvi = self.forward_hvi(p, rgb)?;
        Ok((hvi_to_rgb_var(&hvi, &self.cfg.hvi)?, hvi))
    }

    fn modules(&self) -> Vec<(&dyn Module, usize)> {
        let mut v: Vec<(&dyn Module, usize)> = vec![(&self.embed.i, 0), (&self.embed.hv, 0)];
        for level in 0..LEVELS {
            v.extend(self.encoder[level].iter().map(|d| (d as &dyn Module, level)));
            if level + 1 < LEVELS {
                v.push((&self.down[level].i, level));
                v.push((&self.down[level].hv, level));
            }
        }
        for level in (0..LEVELS - 1).rev() {
            v.push((&self.up[level].i, level));
            v.push((&self.up[level].hv, level));
            v.extend(self.decoder[level].iter().map(|d| (d as &dyn Module, level)));
        }
        v.push((&self.head.i, 0));
        v.push((&self.head.hv, 0));
        v
    }
}

impl<T: Scalar> Module for Network<T> {
    fn declare(&self, init: &mut Initializer) -> Result<()> {
        for (m, _) in self.modules() {
            m.declare(init)?;
        }
        Ok(())
    }

    /// Sum of every convolution and attention product at the padded input
    /// size. Downsampling convs are charged at their input resolution (the
    /// conv itself accounts for the stride); upsampling convs run at the
    /// finer level.
    fn macs(&self, h: usize, w: usize) -> u64 {
        let (h, w) = (h.next_multiple_of(4), w.next_multiple_of(4));
        self.modules()
            .into_iter()
            .map(|(m, level)| m.macs(h >> level, w >> level))
            .sum()
    }
}

/// Analytic multiply-accumulate count of a full forward pass at `h×w`.
pub fn count_flops(cfg: &NetworkConfig, h: usize, w: usize) -> Result<u64> {
    Ok(Network::<f32>::new(cfg)?.macs(h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rgb(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn config_invariants() {
        assert!(NetworkConfig::default().validate().is_ok());
        let bad = NetworkConfig {
            base_channels: 6,
            ..NetworkConfig::default()
        };
        assert!(matches!(Network::<f32>::new(&bad), Err(ModelError::Config(_))));
        let unknown = NetworkConfig {
            enhancer: "mamba".into(),
            ..NetworkConfig::default()
        };
        assert!(matches!(Network::<f32>::new(&unknown), Err(ModelError::UnknownStrategy { .. })));
    }

    #[test]
    fn build_is_deterministic_and_count_pinned() {
        let net = Network::<f32>::new(&NetworkConfig::default()).unwrap();
        let a = net.build(7).unwrap();
        let b = net.build(7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, net.build(8).unwrap());
        assert_eq!(a.num_scalars(), PINNED_PARAMS);
    }

    const PINNED_PARAMS: usize = 469_983;
    const PINNED_MACS_256: u64 = 6_193_722_368;

    #[test]
    fn flops_scale_with_pixels() {
        let cfg = NetworkConfig::default();
        let small = count_flops(&cfg, 64, 64).unwrap();
        let big = count_flops(&cfg, 128, 128).unwrap();
        // channel attention runs on pooled features, so scaling is close to but not exactly 4
        assert!((big as f64 / small as f64 - 4.0).abs() < 1e-3);
        assert_eq!(count_flops(&cfg, 256, 256).unwrap(), PINNED_MACS_256);
    }

    #[test]
    fn identity_at_init_and_shapes() {
        let net = Network::<f32>::new(&NetworkConfig::default()).unwrap();
        let params = net.build(0).unwrap();
        for (h, w) in [(8, 8), (33, 12), (9, 17)] {
            let x = rgb(&[2, 3, h, w], (h * w) as u64);
            let g = Graph::new();
            let (y, hvi) = net.forward(&params.bind_frozen(&g), g.constant(x.clone())).unwrap();
            assert_eq!(y.shape(), vec![2, 3, h, w]);
            assert_eq!(hvi.i.shape(), vec![2, 1, h, w]);
            assert!(y.value().max_abs_diff(&x) <= 1e-5);
        }
        let g = Graph::new();
        let err = net.forward(&params.bind_frozen(&g), g.constant(rgb(&[1, 3, 7, 16], 0)));
        assert!(matches!(err, Err(ModelError::TooSmall { h: 7, w: 16 })));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::<f32>::new(&NetworkConfig::default()).unwrap();
        let mut params = net.build(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, p) in params.iter_mut() {
            p.value = Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-0.1..0.1));
        }
        let x = rgb(&[1, 3, 12, 12], 5);
        let run = || {
            let g = Graph::new();
            let (y, _) = net.forward(&params.bind_frozen(&g), g.constant(x.clone())).unwrap();
            (*y.value()).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
