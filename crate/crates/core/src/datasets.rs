//! Dataset generation, ingestion, and splitting.
//!
//! Synthetic manifolds (S-curve, Swiss roll, sphere with a polar cap removed)
//! and labeled Gaussian blobs are generated from a 64-bit seed; the same seed
//! reproduces the same bytes. Real data arrives either as IDX image/label
//! pairs (the MNIST container format) or as the plain-text CSV flavor written
//! by [`save_csv`], whose first line declares name, column count, and whether
//! a label and a plot color trail each row.

use crate::linalg::DataMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Points with `z` above this value are excluded from [`gen_sphere`] output,
/// opening a hole at the north pole. The threshold is recorded in the
/// generated dataset's name.
pub const SPHERE_CAP_Z: f64 = 0.95;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    IoError(#[from] std::io::Error),
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("image count {images} does not match label count {labels}")]
    LengthMismatch { images: usize, labels: usize },
    #[error("IDX file truncated: needed {needed} more bytes")]
    TruncatedFile { needed: usize },
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("split needs {requested} rows but the dataset has {available}")]
    CountsExceedRows { requested: usize, available: usize },
    #[error("colors length {got} does not match row count {rows}")]
    ColorMismatch { rows: usize, got: usize },
    #[error(transparent)]
    Matrix(#[from] crate::linalg::Error),
}

/// A named point cloud with optional labels (stored on the matrix) and an
/// optional per-row scalar used to color plots.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: DataMatrix,
    pub colors: Option<Vec<f64>>,
    pub name: String,
}

impl Dataset {
    pub fn new(data: DataMatrix, colors: Option<Vec<f64>>, name: impl Into<String>) -> Result<Self> {
        if let Some(ref c) = colors {
            if c.len() != data.rows() {
                return Err(Error::ColorMismatch {
                    rows: data.rows(),
                    got: c.len(),
                });
            }
        }
        Ok(Self {
            data,
            colors,
            name: name.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn cols(&self) -> usize {
        self.data.cols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.data.labels()
    }

    /// Number of classes implied by the labels (max label + 1).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }
}

/// How [`split_subsample`] carves a dataset into train and test parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

fn format_noise(noise: f64) -> String {
    format!("{noise}")
}

/// Sample the classic S-shaped 2-manifold in 3-D. Coordinates land in
/// `[-1, 1] x [0, 2] x [-2, 2]` before noise; the color channel carries the
/// arc parameter `t` in `[-3π/2, 3π/2]`.
pub fn gen_s_curve(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * 3);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let t = 3.0 * std::f64::consts::PI * (rng.random_range(0.0..1.0) - 0.5);
        let y = 2.0 * rng.random_range(0.0..1.0);
        let mut p = [t.sin(), y, t.signum() * (t.cos() - 1.0)];
        if noise > 0.0 {
            for c in &mut p {
                let g: f64 = rng.sample(StandardNormal);
                *c += noise * g;
            }
        }
        values.extend_from_slice(&p);
        colors.push(t);
    }
    let data = DataMatrix::new(n, 3, values).expect("generated values are finite");
    Dataset {
        data,
        colors: Some(colors),
        name: format!("s-curve_n{n}_noise{}_seed{seed}", format_noise(noise)),
    }
}

/// Sample the Swiss roll: `(t·cos t, h, t·sin t)` with the angle parameter
/// `t` in `[1.5π, 4.5π]` and height `h` in `[0, 21]`. The color channel
/// carries `t`, which before noise equals each point's radius in the roll
/// plane.
pub fn gen_swiss_roll(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * 3);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * rng.random_range(0.0..1.0));
        let h = 21.0 * rng.random_range(0.0..1.0);
        let mut p = [t * t.cos(), h, t * t.sin()];
        if noise > 0.0 {
            for c in &mut p {
                let g: f64 = rng.sample(StandardNormal);
                *c += noise * g;
            }
        }
        values.extend_from_slice(&p);
        colors.push(t);
    }
    let data = DataMatrix::new(n, 3, values).expect("generated values are finite");
    Dataset {
        data,
        colors: Some(colors),
        name: format!("swiss-roll_n{n}_noise{}_seed{seed}", format_noise(noise)),
    }
}

/// Sample near-uniformly from the unit sphere with the polar cap
/// `z > `[`SPHERE_CAP_Z`] removed (uniform height and longitude give uniform
/// area). The color channel carries the polar angle `acos(z)`.
pub fn gen_sphere(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * 3);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let z = rng.random_range(-1.0..SPHERE_CAP_Z);
        let lon = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).max(0.0).sqrt();
        values.extend_from_slice(&[r * lon.cos(), r * lon.sin(), z]);
        colors.push(z.acos());
    }
    let data = DataMatrix::new(n, 3, values).expect("generated values are finite");
    Dataset {
        data,
        colors: Some(colors),
        name: format!("sphere_n{n}_cap{SPHERE_CAP_Z}_seed{seed}"),
    }
}

/// Labeled isotropic Gaussian clusters with class-balanced assignment
/// (counts differ by at most one). Cluster centers are standard-normal draws
/// in `dim` dimensions; each point is its center plus `spread`-scaled
/// Gaussian noise.
pub fn gen_blobs(n: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Dataset {
    assert!(classes >= 2, "gen_blobs needs at least 2 classes");
    assert!(dim >= 2, "gen_blobs needs at least 2 dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![0.0f64; classes * dim];
    for c in &mut centers {
        *c = rng.sample(StandardNormal);
    }
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        for d in 0..dim {
            let g: f64 = rng.sample(StandardNormal);
            values.push(centers[label * dim + d] + spread * g);
        }
        labels.push(label);
    }
    let data = DataMatrix::new(n, dim, values)
        .expect("generated values are finite")
        .with_labels(labels)
        .expect("one label per row");
    Dataset {
        data,
        colors: None,
        name: format!("blobs_n{n}_c{classes}_d{dim}_s{spread}_seed{seed}"),
    }
}

fn read_u32_be(bytes: &[u8], offset: &mut usize) -> Result<u32> {
    if bytes.len() < *offset + 4 {
        return Err(Error::TruncatedFile {
            needed: *offset + 4 - bytes.len(),
        });
    }
    let v = u32::from_be_bytes([
        bytes[*offset],
        bytes[*offset + 1],
        bytes[*offset + 2],
        bytes[*offset + 3],
    ]);
    *offset += 4;
    Ok(v)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label pair (the MNIST container format). Pixels are
/// scaled from `0..=255` into `[0, 1]`; one matrix row per image.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut images)?;
    let mut labels_raw = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut labels_raw)?;

    let mut off = 0;
    let magic = read_u32_be(&images, &mut off)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(&images, &mut off)? as usize;
    let px_rows = read_u32_be(&images, &mut off)? as usize;
    let px_cols = read_u32_be(&images, &mut off)? as usize;
    let body = count * px_rows * px_cols;
    if images.len() < off + body {
        return Err(Error::TruncatedFile {
            needed: off + body - images.len(),
        });
    }

    let mut loff = 0;
    let lmagic = read_u32_be(&labels_raw, &mut loff)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
        });
    }
    let lcount = read_u32_be(&labels_raw, &mut loff)? as usize;
    if lcount != count {
        return Err(Error::LengthMismatch {
            images: count,
            labels: lcount,
        });
    }
    if labels_raw.len() < loff + lcount {
        return Err(Error::TruncatedFile {
            needed: loff + lcount - labels_raw.len(),
        });
    }

    let values: Vec<f64> = images[off..off + body]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = labels_raw[loff..loff + lcount]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let data = DataMatrix::new(count, px_rows * px_cols, values)?.with_labels(labels)?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_owned());
    Ok(Dataset {
        data,
        colors: None,
        name,
    })
}

/// Write a dataset as CSV with the metadata header
/// `# name=<id> cols=<d> labeled=<0|1> colored=<0|1>`. Floats are printed in
/// shortest round-trip form, so [`load_csv`] reproduces them exactly.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let labeled = dataset.labels().is_some();
    let colored = dataset.colors.is_some();
    writeln!(
        out,
        "# name={} cols={} labeled={} colored={}",
        dataset.name,
        dataset.cols(),
        u8::from(labeled),
        u8::from(colored),
    )
    .expect("writing to a String cannot fail");
    for i in 0..dataset.rows() {
        let mut first = true;
        for v in dataset.data.row(i) {
            if !first {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String cannot fail");
            first = false;
        }
        if let Some(labels) = dataset.labels() {
            if !first {
                out.push(',');
            }
            write!(out, "{}", labels[i]).expect("writing to a String cannot fail");
            first = false;
        }
        if let Some(ref colors) = dataset.colors {
            if !first {
                out.push(',');
            }
            write!(out, "{}", colors[i]).expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(String, usize, bool, bool)> {
    let err = |msg: &str| Error::ParseError {
        line: 1,
        msg: msg.to_owned(),
    };
    let rest = line
        .strip_prefix('#')
        .ok_or_else(|| err("missing '#' metadata header"))?
        .trim();
    let mut name = None;
    let mut cols = None;
    let mut labeled = None;
    let mut colored = None;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(&format!("malformed header field '{field}'")))?;
        match key {
            "name" => name = Some(value.to_owned()),
            "cols" => {
                cols = Some(value.parse::<usize>().map_err(|_| {
                    err(&format!("cols must be a non-negative integer, got '{value}'"))
                })?)
            }
            "labeled" => match value {
                "0" => labeled = Some(false),
                "1" => labeled = Some(true),
                _ => return Err(err(&format!("labeled must be 0 or 1, got '{value}'"))),
            },
            "colored" => match value {
                "0" => colored = Some(false),
                "1" => colored = Some(true),
                _ => return Err(err(&format!("colored must be 0 or 1, got '{value}'"))),
            },
            other => return Err(err(&format!("unknown header field '{other}'"))),
        }
    }
    match (name, cols, labeled, colored) {
        (Some(n), Some(c), Some(l), Some(r)) => Ok((n, c, l, r)),
        _ => Err(err("header must declare name, cols, labeled, colored")),
    }
}

/// Read a dataset written by [`save_csv`]. Errors carry 1-based line numbers.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::ParseError {
        line: 1,
        msg: "empty file".to_owned(),
    })?;
    let (name, cols, labeled, colored) = parse_header(header)?;
    let expected = cols + usize::from(labeled) + usize::from(colored);

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut colors = Vec::new();
    let mut rows = 0usize;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != expected {
            return Err(Error::ParseError {
                line: line_no,
                msg: format!("expected {expected} fields, got {}", fields.len()),
            });
        }
        for f in &fields[..cols] {
            let v: f64 = f.trim().parse().map_err(|_| Error::ParseError {
                line: line_no,
                msg: format!("bad float '{f}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::ParseError {
                    line: line_no,
                    msg: format!("non-finite value '{f}'"),
                });
            }
            values.push(v);
        }
        let mut next = cols;
        if labeled {
            let f = fields[next];
            labels.push(f.trim().parse::<usize>().map_err(|_| Error::ParseError {
                line: line_no,
                msg: format!("bad label '{f}'"),
            })?);
            next += 1;
        }
        if colored {
            let f = fields[next];
            let v: f64 = f.trim().parse().map_err(|_| Error::ParseError {
                line: line_no,
                msg: format!("bad color '{f}'"),
            })?;
            colors.push(v);
        }
        rows += 1;
    }
    let mut data = DataMatrix::new(rows, cols, values)?;
    if labeled {
        data = data.with_labels(labels)?;
    }
    Dataset::new(data, if colored { Some(colors) } else { None }, name)
}

/// Shuffle row indices with a seeded stream and carve off disjoint train and
/// test subsets of the requested sizes.
pub fn split_subsample(dataset: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let n = dataset.rows();
    let requested = spec.train_count + spec.test_count;
    if requested > n {
        return Err(Error::CountsExceedRows {
            requested,
            available: n,
        });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Fisher-Yates, spelled out so the permutation is pinned to this code
    // rather than to a library's shuffle implementation.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let take = |range: std::ops::Range<usize>, suffix: &str| {
        let idx = &indices[range];
        let data = dataset.data.select_rows(idx);
        let colors = dataset
            .colors
            .as_ref()
            .map(|c| idx.iter().map(|&i| c[i]).collect());
        Dataset {
            data,
            colors,
            name: format!("{}/{suffix}", dataset.name),
        }
    };
    let train = take(0..spec.train_count, "train");
    let test = take(spec.train_count..requested, "test");
    Ok((train, test))
}
