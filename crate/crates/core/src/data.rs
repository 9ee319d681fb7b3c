//! Paired low-light/ground-truth images: loading, synthetic generation and
//! aligned random crops.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{load_image, IoError, Manifest};
use crate::tensor::Tensor;

/// Gamma applied to ground truth to synthesize the degraded input.
pub const SYNTHETIC_GAMMA: f32 = 2.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// 1×3×H×W in `[0, 1]`.
    pub low: Tensor<f32>,
    pub gt: Tensor<f32>,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, low: Tensor<f32>, gt: Tensor<f32>) -> Result<Self, String> {
        let id = id.into();
        if low.shape() != gt.shape() {
            return Err(format!("pair `{id}`: low {:?} and gt {:?} differ", low.shape(), gt.shape()));
        }
        Ok(Self { id, low, gt })
    }

    pub fn height(&self) -> usize {
        self.gt.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.gt.shape()[3]
    }
}

pub fn load_pairs(manifest: &Manifest) -> Result<Vec<ImagePair>, IoError> {
    manifest
        .rows
        .iter()
        .map(|row| {
            let low = load_image(&row.low_path)?;
            let gt = load_image(&row.gt_path)?;
            let id = row
                .gt_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            ImagePair::new(id, low, gt).map_err(|detail| IoError::Manifest {
                path: row.low_path.clone(),
                detail,
            })
        })
        .collect()
}

pub fn load_manifest_pairs(path: &Path) -> Result<Vec<ImagePair>, IoError> {
    load_pairs(&Manifest::load(path)?)
}

/// Smooth colorful scene: a blend of a few colored blobs over a tinted
/// gradient with mild texture, kept inside `[0.03, 0.97]`.
pub fn synthetic_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let blobs: Vec<([f32; 3], f32, f32, f32)> = (0..rng.gen_range(2..5))
        .map(|_| {
            let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            (color, rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.15..0.5))
        })
        .collect();
    let base = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let tilt = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let freq = rng.gen_range(4.0..12.0f32);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let hw = h * w;
    Tensor::from_fn(&[1, 3, h, w], |k| {
        let (c, p) = (k / hw, k % hw);
        let y = (p / w) as f32 / h as f32;
        let x = (p % w) as f32 / w as f32;
        let mut acc = base[c] + tilt[c] * (x - y);
        let mut weight = 1.0;
        for (color, cx, cy, r) in &blobs {
            let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (r * r);
            let g = (-d2).exp() * 2.0;
            acc += g * color[c];
            weight += g;
        }
        let texture = 0.04 * (freq * (x + 0.5 * y) + phase).sin();
        (acc / weight + texture).clamp(0.03, 0.97)
    })
}

/// `n` ground-truth scenes paired with gamma-darkened copies.
pub fn synthetic_pairs(n: usize, h: usize, w: usize, seed: u64) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let gt = synthetic_scene(h, w, &mut rng);
            let low = gt.map(|v| v.powf(SYNTHETIC_GAMMA));
            ImagePair::new(format!("synthetic_{k:03}"), low, gt).expect("same shape by construction")
        })
        .collect()
}

/// Copy the `ph×pw` window at `(top, left)` out of a 1×3×H×W tensor.
pub fn crop(t: &Tensor<f32>, top: usize, left: usize, ph: usize, pw: usize) -> Tensor<f32> {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    debug_assert!(top + ph <= h && left + pw <= w);
    let mut out = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in top..top + ph {
            let row = c * h * w + y * w + left;
            out.extend_from_slice(&t.data()[row..row + pw]);
        }
    }
    Tensor::new(vec![1, 3, ph, pw], out).expect("crop shape")
}

/// Stack 1×3×H×W tensors into a B×3×H×W batch.
pub fn stack(items: &[Tensor<f32>]) -> Tensor<f32> {
    let s = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        debug_assert_eq!(t.shape(), s);
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![items.len(), 3, s[2], s[3]], data).expect("stack shape")
}

/// Sample a batch of aligned `patch×patch` crops. Pair choice and crop
/// corners are drawn from `rng` in a fixed order.
pub fn sample_batch(
    pairs: &[ImagePair],
    batch: usize,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>), String> {
    if pairs.is_empty() {
        return Err("empty dataset".into());
    }
    let mut lows = Vec::with_capacity(batch);
    let mut gts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let p = &pairs[rng.gen_range(0..pairs.len())];
        let (h, w) = (p.height(), p.width());
        if h < patch || w < patch {
            return Err(format!("pair `{}` is {h}x{w}, smaller than patch {patch}", p.id));
        }
        let top = rng.gen_range(0..=h - patch);
        let left = rng.gen_range(0..=w - patch);
        lows.push(crop(&p.low, top, left, patch, patch));
        gts.push(crop(&p.gt, top, left, patch, patch));
    }
    Ok((stack(&lows), stack(&gts)))
}
