//! PSNR, SSIM and the chroma-covariance corpus analysis.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::hvi::{rgb_to_hvi, HviConfig, HviError};
use crate::loss::covariance;
use crate::nn::ModelError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("expected a B×3×H×W image, got {0:?}")]
    NotImage(Vec<usize>),
    #[error("image {h}x{w} is smaller than the {window}x{window} window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("thresholds must be positive and strictly increasing: {0:?}")]
    Thresholds(Vec<f64>),
    #[error(transparent)]
    Hvi(#[from] HviError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report output: {0}")]
    Io(#[from] std::io::Error),
    #[error("report output: {0}")]
    Csv(#[from] csv::Error),
    #[error("report output: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Headline covariance split used for the low/high correlation groups.
pub const COV_SPLIT: f64 = 0.01;
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.002, 0.004, 0.006, 0.008, 0.01];

fn image_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    let s = a.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(MetricsError::NotImage(s.to_vec()));
    }
    Ok((s[0], s[2], s[3]))
}

/// Per-image PSNR in dB for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, h, w) = image_dims(a, b)?;
    let len = 3 * h * w;
    Ok((0..n)
        .map(|k| {
            let r = k * len..(k + 1) * len;
            let mse = a.data()[r.clone()]
                .iter()
                .zip(&b.data()[r])
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>()
                / len as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .collect())
}

/// ITU-R BT.601 luma of image `k`, row-major H×W.
pub fn luma<T: Scalar>(t: &Tensor<T>, k: usize) -> Vec<f64> {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let hw = h * w;
    let base = k * 3 * hw;
    let d = t.data();
    (0..hw)
        .map(|p| {
            0.299 * d[base + p].as_f64() + 0.587 * d[base + hw + p].as_f64() + 0.114 * d[base + 2 * hw + p].as_f64()
        })
        .collect()
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Valid-mode separable Gaussian filter of an H×W plane.
fn filter(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|t| taps[t] * x[y * w + xo + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|t| taps[t] * rows[(yo + t) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel H×W planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { h, w, window: SSIM_WINDOW });
    }
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter(a, h, w, &taps);
    let mu_b = filter(b, h, w, &taps);
    let aa = filter(&prod(a, a), h, w, &taps);
    let bb = filter(&prod(b, b), h, w, &taps);
    let ab = filter(&prod(a, b), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|p| {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let va = aa[p] - ma * ma;
            let vb = bb[p] - mb * mb;
            let cov = ab[p] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-image SSIM on BT.601 luma.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, h, w) = image_dims(a, b)?;
    (0..n).map(|k| ssim_plane(&luma(a, k), &luma(b, k), h, w)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovRecord {
    pub id: String,
    /// Signed covariance of the chroma planes.
    pub cov: f64,
    pub bucket: usize,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bucket {
    pub bucket_lo: f64,
    /// `None` for the open-ended last bucket.
    pub bucket_hi: Option<f64>,
    pub count: usize,
    pub fraction: f64,
    pub mean_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovReport {
    pub records: Vec<CovRecord>,
    pub buckets: Vec<Bucket>,
    pub split: f64,
    pub at_most_split: usize,
    pub above_split: usize,
    pub mean_psnr_at_most_split: Option<f64>,
    pub mean_psnr_above_split: Option<f64>,
}

fn check_thresholds(t: &[f64]) -> Result<()> {
    if t.is_empty() || t[0] <= 0.0 || t.windows(2).any(|w| w[1] <= w[0]) || t.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::Thresholds(t.to_vec()));
    }
    Ok(())
}

/// Index of the first bucket whose upper bound is at least `abs_cov`.
pub fn bucket_of(abs_cov: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().position(|&t| abs_cov <= t).unwrap_or(thresholds.len())
}

pub fn bucket_label(k: usize, thresholds: &[f64]) -> String {
    match k {
        0 => format!("<={}", thresholds[0]),
        k if k == thresholds.len() => format!(">{}", thresholds[k - 1]),
        k => format!("({},{}]", thresholds[k - 1], thresholds[k]),
    }
}

/// Signed chroma covariance of one 1×3×H×W RGB image.
pub fn chroma_covariance<T: Scalar>(rgb: &Tensor<T>, cfg: &HviConfig) -> Result<f64> {
    let hvi = rgb_to_hvi(rgb, cfg)?;
    Ok(covariance(&hvi.h, &hvi.v)?)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Bucket every `(id, |cov| source, optional psnr)` entry by `|cov|`.
pub fn covariance_report(
    entries: Vec<(String, f64, Option<f64>)>,
    thresholds: &[f64],
) -> Result<CovReport> {
    check_thresholds(thresholds)?;
    let records: Vec<CovRecord> = entries
        .into_iter()
        .map(|(id, cov, psnr)| {
            let bucket = bucket_of(cov.abs(), thresholds);
            CovRecord {
                id,
                cov,
                bucket,
                label: bucket_label(bucket, thresholds),
                psnr,
            }
        })
        .collect();
    let total = records.len();
    let buckets = (0..=thresholds.len())
        .map(|k| {
            let members: Vec<&CovRecord> = records.iter().filter(|r| r.bucket == k).collect();
            Bucket {
                bucket_lo: if k == 0 { 0.0 } else { thresholds[k - 1] },
                bucket_hi: thresholds.get(k).copied(),
                count: members.len(),
                fraction: if total == 0 { 0.0 } else { members.len() as f64 / total as f64 },
                mean_psnr: mean(members.iter().filter_map(|r| r.psnr)),
            }
        })
        .collect();
    let low = |r: &&CovRecord| r.cov.abs() <= COV_SPLIT;
    Ok(CovReport {
        at_most_split: records.iter().filter(low).count(),
        above_split: records.iter().filter(|r| !low(r)).count(),
        mean_psnr_at_most_split: mean(records.iter().filter(low).filter_map(|r| r.psnr)),
        mean_psnr_above_split: mean(records.iter().filter(|r| !low(r)).filter_map(|r| r.psnr)),
        split: COV_SPLIT,
        records,
        buckets,
    })
}

/// Per-image records as CSV.
pub fn write_records_csv(report: &CovReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "cov", "abs_cov", "bucket", "psnr"])?;
    for r in &report.records {
        w.write_record([
            r.id.clone(),
            r.cov.to_string(),
            r.cov.abs().to_string(),
            r.label.clone(),
            r.psnr.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Bucket histogram as CSV: `bucket_lo,bucket_hi,count,fraction,mean_psnr`.
pub fn write_histogram_csv(report: &CovReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bucket_lo", "bucket_hi", "count", "fraction", "mean_psnr"])?;
    for b in &report.buckets {
        w.write_record([
            b.bucket_lo.to_string(),
            b.bucket_hi.map(|x| x.to_string()).unwrap_or_else(|| "inf".into()),
            b.count.to_string(),
            b.fraction.to_string(),
            b.mean_psnr.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(report: &CovReport, out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(out, report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert_eq!(psnr(&a, &a).unwrap(), vec![99.0]);
        let b = Tensor::full(&[1, 3, 4, 4], 0.1);
        assert!((psnr(&a, &b).unwrap()[0] - 20.0).abs() < 1e-9);
        let c = Tensor::full(&[1, 3, 4, 4], 0.5);
        assert!((psnr(&a, &c).unwrap()[0] - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let a = random(&[1, 3, 8, 8], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let signs: Vec<f64> = (0..a.numel()).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let b = Tensor::from_fn(a.shape(), |i| a.data()[i] + amp * signs[i]);
            let p = psnr(&a, &b).unwrap()[0];
            assert_eq!(p, psnr(&b, &a).unwrap()[0]);
            assert!(p < last);
            last = p;
        }
    }

    /// Direct 11×11 window sums, no separability.
    fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let taps = gaussian_taps();
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut n = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = taps[dy] * taps[dx];
                        let (p, q) = (a[(y + dy) * w + x + dx], b[(y + dy) * w + x + dx]);
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let (va, vb, cv) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_naive_window() {
        let a = random(&[1, 3, 17, 14], 3);
        let b = random(&[1, 3, 17, 14], 4);
        let fast = ssim(&a, &b).unwrap()[0];
        let slow = naive_ssim(&luma(&a, 0), &luma(&b, 0), 17, 14);
        assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
        assert!((fast - ssim(&b, &a).unwrap()[0]).abs() < 1e-9);
        assert!((ssim(&a, &a).unwrap()[0] - 1.0).abs() < 1e-9);
        assert!(matches!(
            ssim(&random(&[1, 3, 10, 12], 1), &random(&[1, 3, 10, 12], 2)),
            Err(MetricsError::TooSmall { .. })
        ));
    }

    #[test]
    fn buckets_and_split() {
        let entries = vec![
            ("flat".to_string(), 0.0, Some(30.0)),
            ("mid".to_string(), -0.005, Some(25.0)),
            ("edge".to_string(), 0.01, None),
            ("hot".to_string(), 0.02, Some(20.0)),
        ];
        let r = covariance_report(entries, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.records.iter().map(|x| x.bucket).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
        assert_eq!(r.buckets.len(), 6);
        assert_eq!(r.buckets.iter().map(|b| b.fraction).sum::<f64>(), 1.0);
        assert_eq!((r.at_most_split, r.above_split), (3, 1));
        assert_eq!(r.mean_psnr_at_most_split, Some(27.5));
        assert_eq!(r.mean_psnr_above_split, Some(20.0));
        assert_eq!(r.records[3].label, ">0.01");
        assert!(covariance_report(vec![], &[0.01, 0.005]).is_err());
    }

    #[test]
    fn report_writers() {
        let r = covariance_report(vec![("a".into(), 0.001, None)], &DEFAULT_THRESHOLDS).unwrap();
        let mut csv_out = Vec::new();
        write_histogram_csv(&r, &mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.starts_with("bucket_lo,bucket_hi,count,fraction,mean_psnr\n0,0.002,1,1,\n"));
        let mut json = Vec::new();
        write_json(&r, &mut json).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(v["at_most_split"], 1);
    }

    proptest! {
        #[test]
        fn ssim_at_most_one(seed in 0u64..500) {
            let a = random(&[1, 3, 12, 12], seed);
            let b = random(&[1, 3, 12, 12], seed + 1000);
            let s = ssim(&a, &b).unwrap()[0];
            prop_assert!(s <= 1.0 && s >= -1.0);
        }
    }
}
