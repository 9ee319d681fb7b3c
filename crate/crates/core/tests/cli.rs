use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hvi_enhance::cli;
use hvi_enhance::data::synthetic_pairs;
use hvi_enhance::io::{load_image, save_image, Manifest, ManifestRow};
use hvi_enhance::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("hvi-enhance").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the synthetic suite as PPM pairs plus a manifest and returns the manifest path.
fn synthetic_suite(dir: &Path, n: usize, size: usize) -> PathBuf {
    let mut rows = Vec::new();
    for pair in synthetic_pairs(n, size, size, 0) {
        let low = dir.join(format!("{}_low.ppm", pair.id));
        let gt = dir.join(format!("{}_gt.ppm", pair.id));
        save_image(&pair.low, &low).unwrap();
        save_image(&pair.gt, &gt).unwrap();
        rows.push(ManifestRow { low_path: low, gt_path: gt, split: None });
    }
    let path = dir.join("manifest.csv");
    Manifest { rows }.save(&path).unwrap();
    path
}

fn solid(h: usize, w: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Tensor<f32> {
    Tensor::from_fn(&[1, 3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        f(p / w, p % w)[c]
    })
}

#[test]
fn convert_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let src = Tensor::from_fn(&[1, 3, 12, 10], |_| rng.gen_range(0u8..=255) as f32 / 255.0);
    let (a, b, c) = (dir.path().join("a.png"), dir.path().join("b.png"), dir.path().join("c.png"));
    save_image(&src, &a).unwrap();
    assert_eq!(run(&["convert", "--in", s(&a), "--out", s(&b)]).0, 0);
    assert_eq!(run(&["convert", "--in", s(&b), "--out", s(&c), "--direction", "hvi2rgb"]).0, 0);
    let back = load_image(&c).unwrap();
    let worst = src.data().iter().zip(back.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1.0 / 255.0 + 1e-5, "{worst}");
}

#[test]
fn stats_on_flat_and_correlated_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let flat = solid(16, 16, |_, _| [0.6, 0.3, 0.2]);
    let checker = solid(16, 16, |y, x| if (x + y) % 2 == 0 { [1.0, 0.75, 0.0] } else { [0.0, 0.25, 1.0] });
    let mut rows = Vec::new();
    for (name, img) in [("flat", &flat), ("checker", &checker)] {
        let p = dir.path().join(format!("{name}.ppm"));
        save_image(img, &p).unwrap();
        rows.push(ManifestRow { low_path: p.clone(), gt_path: p, split: None });
    }
    let manifest = dir.path().join("m.csv");
    Manifest { rows }.save(&manifest).unwrap();
    let report = dir.path().join("report.csv");
    let (code, out, err) = run(&["stats", "--manifest", s(&manifest), "--out", s(&report)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("|cov| <= 0.01: 1 images, > 0.01: 1 images"), "{out}");
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn train_is_bit_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic_suite(dir.path(), 4, 24);
    let ckpt = |k: usize| dir.path().join(format!("run{k}.ckpt"));
    for k in 0..2 {
        let out = ckpt(k);
        let args = [
            "train", "--manifest", s(&manifest), "--out", s(&out), "--steps", "4", "--patch", "16", "--batch", "2",
            "--seed", "5", "--base-channels", "8", "--eval-every", "4",
        ];
        let (code, _, err) = run(&args);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(fs::read(ckpt(0)).unwrap(), fs::read(ckpt(1)).unwrap());
}

#[test]
fn train_enhance_eval_pipeline_gains_three_db() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthetic_suite(dir.path(), 16, 64);
    let ckpt = dir.path().join("net.ckpt");
    let args = [
        "train", "--manifest", s(&manifest), "--out", s(&ckpt), "--steps", "300", "--patch", "32", "--batch", "4",
        "--base-channels", "8", "--lr-max", "1e-3", "--eval-every", "300",
    ];
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");

    let enhanced = dir.path().join("out.png");
    let low = dir.path().join("synthetic_000_low.ppm");
    assert_eq!(run(&["enhance", "--ckpt", s(&ckpt), "--in", s(&low), "--out", s(&enhanced)]).0, 0);
    assert_eq!(load_image(&enhanced).unwrap().shape(), &[1, 3, 64, 64]);

    let eval = dir.path().join("eval.csv");
    let (code, _, err) = run(&["eval", "--manifest", s(&manifest), "--ckpt", s(&ckpt), "--out", s(&eval)]);
    assert_eq!(code, 0, "{err}");
    let csv = fs::read_to_string(&eval).unwrap();
    let mean: Vec<f64> = csv
        .lines()
        .find(|l| l.starts_with("mean,"))
        .unwrap()
        .split(',')
        .skip(1)
        .take(2)
        .map(|v| v.parse().unwrap())
        .collect();
    let (input_psnr, psnr) = (mean[0], mean[1]);
    assert!(psnr >= input_psnr + 3.0, "{input_psnr} -> {psnr}");
}

#[test]
fn errors_are_single_line_with_module_prefix() {
    let (code, _, err) = run(&["enhance", "--ckpt", "/nonexistent.ckpt", "--in", "x.png", "--out", "y.png"]);
    assert_eq!(code, 1);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: io:"), "{err}");

    let (code, _, err) = run(&["train", "--no-such-flag"]);
    assert_eq!(code, 2);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hvi-enhance");
    assert!(Command::new(bin).arg("--help").status().unwrap().success());
    let out = Command::new(bin).args(["convert", "--in", "/missing.png", "--out", "/tmp/x.png"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: io:"));
}

/// `--help` text for every subcommand against tests/snapshots. Set
/// `UPDATE_SNAPSHOTS=1` to rewrite them.
#[test]
fn help_snapshots() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    for sub in ["", "convert", "stats", "train", "enhance", "eval"] {
        let args: Vec<&str> = if sub.is_empty() { vec!["--help"] } else { vec![sub, "--help"] };
        let (code, out, _) = run(&args);
        assert_eq!(code, 0);
        let file = dir.join(format!("help_{}.txt", if sub.is_empty() { "main" } else { sub }));
        if update {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&file, &out).unwrap();
        } else {
            let want = fs::read_to_string(&file).unwrap_or_else(|_| panic!("missing snapshot {}", file.display()));
            assert_eq!(out, want, "help for `{sub}` changed");
        }
    }
}

#[test]
fn train_help_lists_defaults() {
    let (_, out, _) = run(&["train", "--help"]);
    let valued_without_default = ["--manifest", "--out", "--log"];
    for block in out.split("\n\n").filter(|b| b.trim_start().starts_with("--")) {
        let flag = block.split_whitespace().next().unwrap();
        let takes_value = block.lines().next().unwrap().contains('<');
        if takes_value && !valued_without_default.contains(&flag) {
            assert!(block.contains("[default:"), "{flag} has no default:\n{block}");
        }
    }
    let (_, out, _) = run(&["convert", "--help"]);
    assert!(out.contains("(x + 1) / 2"), "{out}");
}
