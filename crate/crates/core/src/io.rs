//! MNIST IDX parsing, checkpoints, metric CSV logging and PGM heatmaps.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::error::{QuineError, Result};
use crate::metrics::MetricsRecord;
use crate::net::{Encoding, NetworkSpec, ParamVector, Variant};
use crate::numeric::DenseMatrix;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images scaled to `[0, 1]`, stored row-major (`len x pixels`).
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSet {
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| QuineError::io(path, e))
}

fn truncated(path: &Path, what: &str) -> QuineError {
    QuineError::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")))
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let found = be_u32(bytes, 0).ok_or_else(|| truncated(path, "header"))?;
    if found != magic {
        return Err(QuineError::Format {
            path: path.into(),
            reason: format!("magic {found}, expected {magic}"),
        });
    }
    (0..dims)
        .map(|d| {
            be_u32(bytes, 4 + 4 * d)
                .map(|v| v as usize)
                .ok_or_else(|| truncated(path, "header"))
        })
        .collect()
}

/// Parses a pair of IDX files. The split is inferred from the image file name
/// (`t10k*` is the test split).
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<MnistSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let idims = idx_header(ip, &ib, IDX_IMAGE_MAGIC, 3)?;
    let ldims = idx_header(lp, &lb, IDX_LABEL_MAGIC, 1)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(QuineError::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            ip.display(),
            lp.display(),
            ldims[0]
        )));
    }
    let pixels = &ib[16..];
    let labels = &lb[8..];
    if pixels.len() < n * rows * cols {
        return Err(truncated(ip, "pixel data"));
    }
    if labels.len() < n {
        return Err(truncated(lp, "label data"));
    }
    let labels = labels[..n].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(QuineError::Format {
            path: lp.into(),
            reason: format!("label {bad} outside 0..=9"),
        });
    }
    let images = pixels[..n * rows * cols].iter().map(|&b| b as f64 / 255.0).collect();
    let test = ip
        .file_name()
        .and_then(|f| f.to_str())
        .is_some_and(|f| f.starts_with("t10k"));
    Ok(MnistSet {
        split: if test { Split::Test } else { Split::Train },
        rows,
        cols,
        images,
        labels,
    })
}

/// Loads one split from a directory holding the four official files.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<MnistSet> {
    let dir = dir.as_ref();
    let (i, l) = match split {
        Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
        Split::Test => (TEST_IMAGES, TEST_LABELS),
    };
    let mut set = load_mnist(dir.join(i), dir.join(l))?;
    set.split = split;
    Ok(set)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NNQ1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    /// Projection seed.
    pub seed: u64,
    pub epoch: u64,
    pub params: ParamVector,
}

impl Checkpoint {
    /// Errors unless the stored spec equals `spec`.
    pub fn expect_spec(&self, spec: &NetworkSpec) -> Result<()> {
        if &self.spec == spec {
            Ok(())
        } else {
            Err(QuineError::SpecMismatch(format!(
                "checkpoint holds a {:?} quine with {} parameters, run expects {:?} with {}",
                self.spec.variant,
                self.spec.n_params(),
                spec.variant,
                spec.n_params()
            )))
        }
    }
}

/// Serialized checkpoint: magic, version, eight `u32` spec fields, the
/// coordinate projection std (`f64`), seed and epoch (`u64`), then the
/// parameters. Everything little-endian.
pub fn checkpoint_bytes(spec: &NetworkSpec, seed: u64, epoch: u64, params: &ParamVector) -> Result<Vec<u8>> {
    if params.len() != spec.n_params() {
        return Err(QuineError::InvalidArgument(format!(
            "{} parameters for a spec of {}",
            params.len(),
            spec.n_params()
        )));
    }
    let mut out = Vec::with_capacity(60 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let fields = [
        match spec.variant {
            Variant::Vanilla => 0,
            Variant::Auxiliary => 1,
        },
        spec.embed_dim,
        spec.hidden_dim,
        spec.coord_embed_dim,
        spec.image_embed_dim,
        spec.image_dim,
        spec.n_classes,
        match spec.encoding {
            Encoding::OneHot => 0,
            Encoding::Scalar => 1,
        },
    ];
    for f in fields {
        let v = u32::try_from(f).map_err(|_| QuineError::InvalidArgument(format!("dimension {f} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&spec.coord_proj_std.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    spec: &NetworkSpec,
    seed: u64,
    epoch: u64,
    params: &ParamVector,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(spec, seed, epoch, params)?;
    fs::write(path, bytes).map_err(|e| QuineError::io(path, e))
}

pub fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |reason: String| QuineError::Format {
        path: path.into(),
        reason,
    };
    let header = 4 + 4 + 8 * 4 + 8 + 8 + 8;
    if bytes.len() < header {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let f: Vec<usize> = (0..8).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let variant = match f[0] {
        0 => Variant::Vanilla,
        1 => Variant::Auxiliary,
        v => return Err(bad(format!("unknown variant {v}"))),
    };
    let encoding = match f[7] {
        0 => Encoding::OneHot,
        1 => Encoding::Scalar,
        v => return Err(bad(format!("unknown encoding {v}"))),
    };
    let spec = NetworkSpec {
        variant,
        embed_dim: f[1],
        hidden_dim: f[2],
        coord_embed_dim: f[3],
        image_embed_dim: f[4],
        image_dim: f[5],
        n_classes: f[6],
        encoding,
        coord_proj_std: f64::from_bits(u64_at(40)),
    };
    spec.validate().map_err(|e| bad(e.to_string()))?;
    let seed = u64_at(48);
    let epoch = u64_at(56);
    let body = &bytes[header..];
    let n = spec.n_params();
    if body.len() != 8 * n {
        return Err(bad(format!("{} parameter bytes, expected {}", body.len(), 8 * n)));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::from_vec(&spec, values)?;
    Ok(Checkpoint {
        spec,
        seed,
        epoch,
        params,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    parse_checkpoint(path, &read(path)?)
}

const LOG_OFFSET: f64 = 1e-12;

/// Binary PGM of `log10(|v| + 1e-12)`, min-max normalized to `0..=255`.
pub fn heatmap_bytes(values: &DenseMatrix) -> Result<Vec<u8>> {
    if values.data().iter().any(|v| !v.is_finite()) {
        return Err(QuineError::InvalidArgument("heatmap values must be finite".into()));
    }
    let g: Vec<f64> = values.data().iter().map(|v| (v.abs() + LOG_OFFSET).log10()).collect();
    let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", values.cols(), values.rows()).into_bytes();
    out.extend(g.iter().map(|&x| {
        if hi > lo {
            (255.0 * (x - lo) / (hi - lo)).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn export_heatmap(values: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = heatmap_bytes(values)?;
    fs::write(path, bytes).map_err(|e| QuineError::io(path, e))
}

pub const CSV_HEADER: &str = "epoch,l_sr,margin,srq,l_task,accuracy,seconds";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV line (no newline). Records carrying an accepted-step count get an
/// extra `accepted` column.
pub fn csv_row(r: &MetricsRecord) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{}",
        r.epoch,
        r.l_sr,
        r.margin,
        r.srq,
        opt(r.l_task),
        opt(r.accuracy),
        opt(r.seconds)
    );
    if let Some(a) = r.accepted {
        row.push_str(&format!(",{a}"));
    }
    row
}

pub fn csv_header(r: &MetricsRecord) -> String {
    if r.accepted.is_some() {
        format!("{CSV_HEADER},accepted")
    } else {
        CSV_HEADER.to_string()
    }
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_metrics_csv(path: impl AsRef<Path>, record: &MetricsRecord) -> Result<()> {
    let path: PathBuf = path.as_ref().into();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| QuineError::io(&path, e))?;
    let empty = file.metadata().map_err(|e| QuineError::io(&path, e))?.len() == 0;
    let mut text = String::new();
    if empty {
        text.push_str(&csv_header(record));
        text.push('\n');
    }
    text.push_str(&csv_row(record));
    text.push('\n');
    file.write_all(text.as_bytes()).map_err(|e| QuineError::io(&path, e))
}
