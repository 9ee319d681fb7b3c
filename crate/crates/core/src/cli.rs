//! Command-line surface: `convert`, `stats`, `train`, `enhance` and `eval`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_pairs, ImagePair};
use crate::hvi::{hvi_to_rgb, rgb_to_hvi, HviConfig, HviError, HviImage};
use crate::io::{
    checkpoint_load_matching, checkpoint_save, load_image, read_json, save_image, sidecar_path, write_json, IoError,
    Manifest,
};
use crate::loss::LossConfig;
use crate::metrics::{self, chroma_covariance, covariance_report, psnr, ssim, CovReport, MetricsError};
use crate::network::{Network, NetworkConfig};
use crate::nn::ModelError;
use crate::optim::{self, train, write_log_csv, OptimError, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("hvi: {0}")]
    Hvi(#[from] HviError),
    #[error("io: {0}")]
    Io(#[from] IoError),
    #[error("network: {0}")]
    Model(#[from] ModelError),
    #[error("optim: {0}")]
    Optim(#[from] OptimError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("cli: {0}")]
    Usage(String),
    #[error("cli: cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "hvi-enhance", version, about = "Low-light enhancement in the HVI color space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an RGB image to stored HVI planes or back.
    ///
    /// HVI planes are written as a 3-channel image with channels (H, V, I).
    /// The signed chroma planes are remapped from [-1, 1] to [0, 1] for
    /// storage as (x + 1) / 2; `hvi2rgb` undoes that mapping.
    Convert(ConvertArgs),
    /// Chroma covariance of every ground-truth image in a manifest, bucketed.
    Stats(StatsArgs),
    /// Train a network on a manifest and write a checkpoint plus JSON sidecar.
    Train(TrainArgs),
    /// Enhance one image with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Per-pair PSNR/SSIM of a checkpoint on a manifest, with covariance-bucket means.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    Rgb2hvi,
    Hvi2rgb,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long = "in", value_name = "IMAGE")]
    pub input: PathBuf,
    #[arg(long, value_name = "IMAGE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Direction::Rgb2hvi)]
    pub direction: Direction,
    /// Density exponent k of C_k.
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "CSV")]
    pub manifest: PathBuf,
    /// Per-image records (id, cov, abs_cov, bucket, psnr).
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Upper bounds of the |cov| buckets, increasing.
    #[arg(long, value_delimiter = ',', default_values_t = metrics::DEFAULT_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    /// Bucket histogram CSV.
    #[arg(long, value_name = "CSV")]
    pub histogram: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long, value_name = "JSON")]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    Ccl,
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Enhancer {
    /// Cross-attention, dynamic feed-forward and multi-branch enhancement.
    Cdem,
    /// Residual cross-attention only.
    Tca,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Rows with split `train` or no split are trained on; the first other row is the holdout.
    #[arg(long, value_name = "CSV")]
    pub manifest: PathBuf,
    /// Checkpoint path; the configuration goes to `<out>.json`.
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 256)]
    pub patch: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-step loss terms as CSV.
    #[arg(long, value_name = "CSV")]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_max: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 50)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub diem_per_level: usize,
    #[arg(long, value_enum, default_value_t = Enhancer::Cdem)]
    pub enhancer: Enhancer,
    /// Disable the fusion before the enhancer.
    #[arg(long)]
    pub no_mafm1: bool,
    /// Disable the fusion after the enhancer.
    #[arg(long)]
    pub no_mafm2: bool,
    /// Disable both fusions.
    #[arg(long)]
    pub no_mafm: bool,
    #[arg(long, value_enum, default_value_t = Objective::Ccl)]
    pub objective: Objective,
    /// Weight of an extra RGB-domain MSE term.
    #[arg(long, default_value_t = 0.0)]
    pub rgb_mse: f64,
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long = "in", value_name = "IMAGE")]
    pub input: PathBuf,
    #[arg(long, value_name = "IMAGE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "CSV")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Per-pair metrics followed by a `mean` row.
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
    /// Per-covariance-bucket mean PSNR table.
    #[arg(long, value_name = "CSV")]
    pub buckets: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = metrics::DEFAULT_THRESHOLDS)]
    pub thresholds: Vec<f64>,
}

/// Everything needed to rebuild the network a checkpoint belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "error: cli: {}", first.trim_start_matches("error: ").trim());
            return 2;
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn execute(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Convert(a) => convert(a),
        Command::Stats(a) => stats(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Enhance(a) => enhance_cmd(a),
        Command::Eval(a) => eval(a, out),
    }
}

fn hvi_config(k: f64) -> Result<HviConfig> {
    let cfg = HviConfig {
        density_k: k,
        ..HviConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn report_line(out: &mut dyn Write, line: std::fmt::Arguments) {
    let _ = writeln!(out, "{line}");
}

fn convert(a: &ConvertArgs) -> Result<()> {
    let cfg = hvi_config(a.k)?;
    let img = load_image(&a.input)?;
    let result = match a.direction {
        Direction::Rgb2hvi => {
            let hvi = rgb_to_hvi(&img, &cfg)?;
            let stored = HviImage {
                h: hvi.h.map(|x| (x + 1.0) / 2.0),
                v: hvi.v.map(|x| (x + 1.0) / 2.0),
                i: hvi.i,
            };
            stored.stacked()
        }
        Direction::Hvi2rgb => {
            let mut hvi = HviImage::from_stacked(&img)?;
            hvi.h = hvi.h.map(|x| 2.0 * x - 1.0);
            hvi.v = hvi.v.map(|x| 2.0 * x - 1.0);
            hvi_to_rgb(&hvi, &cfg)?.map(|x| x.clamp(0.0, 1.0))
        }
    };
    save_image(&result, &a.out)?;
    Ok(())
}

fn write_report(report: &CovReport, records: &Path, histogram: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let flush = |path: &Path, w: &mut BufWriter<File>| {
        w.flush().map_err(|source| CliError::Output {
            path: path.to_path_buf(),
            source,
        })
    };
    let mut w = create(records)?;
    metrics::write_records_csv(report, &mut w)?;
    flush(records, &mut w)?;
    if let Some(p) = histogram {
        let mut w = create(p)?;
        metrics::write_histogram_csv(report, &mut w)?;
        flush(p, &mut w)?;
    }
    if let Some(p) = json {
        let mut w = create(p)?;
        metrics::write_json(report, &mut w)?;
        flush(p, &mut w)?;
    }
    Ok(())
}

fn print_buckets(report: &CovReport, out: &mut dyn Write) {
    report_line(out, format_args!("bucket,count,fraction,mean_psnr"));
    for (k, b) in report.buckets.iter().enumerate() {
        let label = report
            .records
            .iter()
            .find(|r| r.bucket == k)
            .map(|r| r.label.clone())
            .unwrap_or_else(|| match b.bucket_hi {
                Some(hi) if k == 0 => format!("<={hi}"),
                Some(hi) => format!("({},{hi}]", b.bucket_lo),
                None => format!(">{}", b.bucket_lo),
            });
        let mp = b.mean_psnr.map(|p| format!("{p:.4}")).unwrap_or_default();
        report_line(out, format_args!("{label},{},{:.4},{mp}", b.count, b.fraction));
    }
    report_line(
        out,
        format_args!(
            "|cov| <= {}: {} images, > {}: {} images",
            report.split, report.at_most_split, report.split, report.above_split
        ),
    );
}

fn stats(a: &StatsArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = hvi_config(a.k)?;
    let manifest = Manifest::load(&a.manifest)?;
    let mut entries = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let gt = load_image(&row.gt_path)?;
        entries.push((pair_id(&row.gt_path), chroma_covariance(&gt, &cfg)?, None));
    }
    let report = covariance_report(entries, &a.thresholds)?;
    write_report(&report, &a.out, a.histogram.as_deref(), a.json.as_deref())?;
    print_buckets(&report, out);
    Ok(())
}

fn pair_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl TrainArgs {
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            base_channels: self.base_channels,
            diem_per_level: self.diem_per_level,
            heads: self.heads,
            hvi: HviConfig {
                density_k: self.k,
                ..HviConfig::default()
            },
            enhancer: match self.enhancer {
                Enhancer::Cdem => "cdem",
                Enhancer::Tca => "tca",
            }
            .into(),
            mafm1: !(self.no_mafm || self.no_mafm1),
            mafm2: !(self.no_mafm || self.no_mafm2),
            ..NetworkConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_steps: self.steps,
            batch_size: self.batch,
            patch_size: self.patch,
            seed: self.seed,
            eval_every: self.eval_every,
            loss: LossConfig {
                objective: match self.objective {
                    Objective::Ccl => "ccl",
                    Objective::L1 => "l1",
                    Objective::L2 => "l2",
                }
                .into(),
                rgb_mse: self.rgb_mse,
                ..LossConfig::default()
            },
        }
    }
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let net_cfg = a.network_config();
    let train_cfg = a.train_config();
    let net = Network::<f32>::new(&net_cfg)?;
    let manifest = Manifest::load(&a.manifest)?;
    let is_train = |s: &Option<String>| s.as_deref().map_or(true, |s| s == "train");
    let pairs = load_pairs(&manifest)?;
    let (mut data, mut holdout): (Vec<ImagePair>, Option<ImagePair>) = (Vec::new(), None);
    for (row, pair) in manifest.rows.iter().zip(pairs) {
        if is_train(&row.split) {
            data.push(pair);
        } else if holdout.is_none() {
            holdout = Some(pair);
        }
    }
    if data.is_empty() {
        return Err(CliError::Usage(format!(
            "manifest {} has no training rows",
            a.manifest.display()
        )));
    }
    let mut params = net.build(train_cfg.seed)?;
    let every = train_cfg.eval_every;
    let logs = train(&net, &mut params, &data, holdout.as_ref(), &train_cfg, |l| {
        if l.step % every == 0 || l.step == train_cfg.total_steps {
            let p = l.psnr_holdout.map(|p| format!(" holdout_psnr={p:.3}")).unwrap_or_default();
            eprintln!("step {} lr={:.3e} loss={:.6}{p}", l.step, l.lr, l.loss.total);
        }
    })?;
    checkpoint_save(&params, &a.out)?;
    write_json(
        &Sidecar {
            network: net_cfg,
            train: train_cfg,
        },
        &sidecar_path(&a.out),
    )?;
    if let Some(log) = &a.log {
        let mut w = create(log)?;
        write_log_csv(&logs, &mut w)?;
        w.flush().map_err(|source| CliError::Output {
            path: log.clone(),
            source,
        })?;
    }
    let last = logs.last().map(|l| l.loss.total).unwrap_or(f64::NAN);
    report_line(out, format_args!("trained {} steps, final loss {last:.6}", logs.len()));
    Ok(())
}

/// Rebuild the network described by a checkpoint's sidecar and load its weights.
pub fn load_model(ckpt: &Path) -> Result<(Network<f32>, crate::params::ParamRegistry<f32>)> {
    let side: Sidecar = read_json(&sidecar_path(ckpt))?;
    let net = Network::<f32>::new(&side.network)?;
    let expected = net.build(0)?;
    let params = checkpoint_load_matching(ckpt, &expected)?;
    Ok((net, params))
}

fn enhance_cmd(a: &EnhanceArgs) -> Result<()> {
    let (net, params) = load_model(&a.ckpt)?;
    let img = load_image(&a.input)?;
    let y = optim::enhance(&net, &params, &img)?;
    save_image(&y, &a.out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub input_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub cov: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (net, params) = load_model(&a.ckpt)?;
    let pairs = load_pairs(&Manifest::load(&a.manifest)?)?;
    let cfg = net.config().hvi;
    let mut rows = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let y = optim::enhance(&net, &params, &p.low)?;
        rows.push(EvalRow {
            id: p.id.clone(),
            input_psnr: psnr(&p.low, &p.gt)?[0],
            psnr: psnr(&y, &p.gt)?[0],
            ssim: ssim(&y, &p.gt)?[0],
            cov: chroma_covariance(&p.gt, &cfg)?,
        });
    }
    let csv_err = |e: csv::Error| CliError::Output {
        path: a.out.clone(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    w.write_record(["id", "input_psnr", "psnr", "ssim", "cov"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.id.clone(),
            r.input_psnr.to_string(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            r.cov.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let (mi, mp, ms) = (
        mean(rows.iter().map(|r| r.input_psnr)),
        mean(rows.iter().map(|r| r.psnr)),
        mean(rows.iter().map(|r| r.ssim)),
    );
    w.write_record(["mean".into(), mi.to_string(), mp.to_string(), ms.to_string(), String::new()])
        .map_err(csv_err)?;
    w.flush().map_err(|source| CliError::Output {
        path: a.out.clone(),
        source,
    })?;
    let report = covariance_report(
        rows.iter().map(|r| (r.id.clone(), r.cov, Some(r.psnr))).collect(),
        &a.thresholds,
    )?;
    if let Some(p) = &a.buckets {
        let mut w = create(p)?;
        metrics::write_histogram_csv(&report, &mut w)?;
        w.flush().map_err(|source| CliError::Output {
            path: p.clone(),
            source,
        })?;
    }
    report_line(
        out,
        format_args!("pairs={} input_psnr={mi:.4} psnr={mp:.4} ssim={ms:.4}", rows.len()),
    );
    print_buckets(&report, out);
    Ok(())
}
