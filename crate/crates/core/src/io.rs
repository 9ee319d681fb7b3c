//! Image codecs (8-bit PNG, binary PPM), paired-data manifests, the flat
//! checkpoint container and JSON sidecars. Every file write goes to a
//! temporary sibling first and is renamed into place.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::{ColorType, ImageReader, RgbImage};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamRegistry;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ICLR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported image format ({detail})")]
    Unsupported { path: PathBuf, detail: String },
    #[error("{path}: truncated or malformed file ({detail})")]
    Malformed { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("checkpoint has bad magic {found:?}, expected \"ICLR\"")]
    BadMagic { found: [u8; 4] },
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint parameter `{name}` is missing")]
    MissingParam { name: String },
    #[error("checkpoint parameter `{name}` is not part of the model")]
    UnexpectedParam { name: String },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid image tensor shape {0:?}, expected 1×3×H×W")]
    Shape(Vec<usize>),
}

type Result<T, E = IoError> = std::result::Result<T, E>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        file_err(path)(e)
    })
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("ppm"))
        .unwrap_or(false)
}

fn from_bytes(w: usize, h: usize, bytes: &[u8]) -> Tensor<f32> {
    let hw = w * h;
    Tensor::from_fn(&[1, 3, h, w], |k| {
        let (c, p) = (k / hw, k % hw);
        bytes[p * 3 + c] as f32 / 255.0
    })
}

/// Round half away from zero after clamping to `[0, 1]`.
pub fn quantize(x: f32) -> u8 {
    let v = (x.clamp(0.0, 1.0) as f64) * 255.0;
    v.round() as u8
}

fn to_bytes(t: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(IoError::Shape(s.to_vec()));
    }
    let (h, w) = (s[2], s[3]);
    let hw = h * w;
    let mut out = vec![0u8; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            out[p * 3 + c] = quantize(t.data()[c * hw + p]);
        }
    }
    Ok((w, h, out))
}

fn ppm_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b).map_err(file_err(path))? == 0 {
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip).map_err(file_err(path))?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c),
        }
    }
    if tok.is_empty() {
        return Err(IoError::Malformed {
            path: path.to_path_buf(),
            detail: "missing PPM header field".into(),
        });
    }
    Ok(String::from_utf8_lossy(&tok).into_owned())
}

fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    let f = fs::File::open(path).map_err(file_err(path))?;
    let mut r = BufReader::new(f);
    let magic = ppm_token(&mut r, path)?;
    if magic != "P6" {
        return Err(IoError::Unsupported {
            path: path.to_path_buf(),
            detail: format!("PPM variant {magic}, only binary P6 is read"),
        });
    }
    let mut field = |what: &str| -> Result<usize> {
        let t = ppm_token(&mut r, path)?;
        t.parse().map_err(|_| IoError::Malformed {
            path: path.to_path_buf(),
            detail: format!("bad {what} `{t}`"),
        })
    };
    let (w, h, max) = (field("width")?, field("height")?, field("maxval")?);
    if max != 255 {
        return Err(IoError::Unsupported {
            path: path.to_path_buf(),
            detail: format!("maxval {max}, only 8-bit (255) is read"),
        });
    }
    if w == 0 || h == 0 {
        return Err(IoError::Malformed {
            path: path.to_path_buf(),
            detail: "zero image dimension".into(),
        });
    }
    let mut bytes = vec![0u8; w * h * 3];
    r.read_exact(&mut bytes).map_err(|_| IoError::Malformed {
        path: path.to_path_buf(),
        detail: format!("expected {} pixel bytes", w * h * 3),
    })?;
    Ok(from_bytes(w, h, &bytes))
}

/// Load an 8-bit RGB PNG or binary PPM as a 1×3×H×W tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if is_ppm(path) {
        return load_ppm(path);
    }
    let img_err = |source| IoError::Image {
        path: path.to_path_buf(),
        source,
    };
    let reader = ImageReader::open(path).map_err(file_err(path))?.with_guessed_format().map_err(file_err(path))?;
    if reader.format() != Some(image::ImageFormat::Png) {
        return Err(IoError::Unsupported {
            path: path.to_path_buf(),
            detail: "expected PNG or PPM".into(),
        });
    }
    let img = reader.decode().map_err(img_err)?;
    match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::L8 | ColorType::La8 => {}
        other => {
            return Err(IoError::Unsupported {
                path: path.to_path_buf(),
                detail: format!("{other:?}; only 8-bit channels are read"),
            })
        }
    }
    let rgb = img.to_rgb8();
    Ok(from_bytes(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()))
}

/// Save a 1×3×H×W tensor as 8-bit PNG (or PPM for a `.ppm` path).
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (w, h, bytes) = to_bytes(t)?;
    let encoded = if is_ppm(path) {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&bytes);
        out
    } else {
        let img = RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| IoError::Shape(t.shape().to_vec()))?;
        let mut out = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|source| IoError::Image {
                path: path.to_path_buf(),
                source,
            })?;
        out
    };
    write_atomic(path, &encoded)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub low_path: PathBuf,
    pub gt_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// Ordered paired-image list. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bad = |detail: String| IoError::Manifest {
            path: path.to_path_buf(),
            detail,
        };
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.get(0) != Some("low_path") || headers.get(1) != Some("gt_path") {
            return Err(bad("header must start with `low_path,gt_path`".into()));
        }
        let mut rows = Vec::new();
        for (k, rec) in reader.deserialize::<ManifestRow>().enumerate() {
            let mut row = rec.map_err(|e| bad(format!("row {}: {e}", k + 1)))?;
            for p in [&mut row.low_path, &mut row.gt_path] {
                if p.as_os_str().is_empty() {
                    return Err(bad(format!("row {}: empty path", k + 1)));
                }
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.exists() {
                    return Err(bad(format!("row {}: {} does not exist", k + 1, p.display())));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(bad("no rows".into()));
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let with_split = self.rows.iter().any(|r| r.split.is_some());
        let fail = |e: csv::Error| IoError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        if with_split {
            w.write_record(["low_path", "gt_path", "split"]).map_err(fail)?;
        } else {
            w.write_record(["low_path", "gt_path"]).map_err(fail)?;
        }
        for r in &self.rows {
            let mut rec = vec![r.low_path.display().to_string(), r.gt_path.display().to_string()];
            if with_split {
                rec.push(r.split.clone().unwrap_or_default());
            }
            w.write_record(&rec).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| IoError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        write_atomic(path, &bytes)
    }
}

/// Serialize a registry in the flat checkpoint layout.
pub fn encode_checkpoint(params: &ParamRegistry<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Malformed {
                path: self.path.to_path_buf(),
                detail: format!("unexpected end of checkpoint at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse the flat checkpoint layout.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamRegistry<f32>> {
    let mut c = Cursor { bytes, pos: 0, path };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic { found: magic });
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = c.u32()?;
    let mut reg = ParamRegistry::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| IoError::Malformed {
                path: path.to_path_buf(),
                detail: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let data = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| IoError::Malformed {
            path: path.to_path_buf(),
            detail: format!("`{name}`: {e}"),
        })?;
        reg.insert(name.clone(), value).map_err(|e| IoError::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    }
    if c.pos != bytes.len() {
        return Err(IoError::Malformed {
            path: path.to_path_buf(),
            detail: "trailing bytes after last entry".into(),
        });
    }
    Ok(reg)
}

pub fn checkpoint_save(params: &ParamRegistry<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn checkpoint_load(path: &Path) -> Result<ParamRegistry<f32>> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    decode_checkpoint(&bytes, path)
}

/// Load and check names and shapes against `expected`, returning the
/// loaded values in `expected`'s order.
pub fn checkpoint_load_matching(path: &Path, expected: &ParamRegistry<f32>) -> Result<ParamRegistry<f32>> {
    let loaded = checkpoint_load(path)?;
    for name in loaded.names() {
        if expected.get(name).is_none() {
            return Err(IoError::UnexpectedParam { name: name.to_string() });
        }
    }
    let mut out = ParamRegistry::new();
    for (name, p) in expected.iter() {
        let got = loaded.get(name).ok_or_else(|| IoError::MissingParam { name: name.to_string() })?;
        if got.value.shape() != p.value.shape() {
            return Err(IoError::ShapeMismatch {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: got.value.shape().to_vec(),
            });
        }
        out.insert(name, got.value.clone()).expect("names unique in expected registry");
    }
    Ok(out)
}

/// Sidecar path holding the configuration of a checkpoint.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}
