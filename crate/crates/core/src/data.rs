//! Datasets: IDX image/label files and small synthetic two-class tasks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with integer labels. May be empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature values for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature".into()));
        }
        Ok(Split {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features `[rows, dim]` and labels `[rows]` for the given row indices.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Tensor) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            x.extend_from_slice(self.row(r));
        }
        let y = rows.iter().map(|&r| self.labels[r] as f64).collect();
        (
            Tensor::from_parts(vec![rows.len(), self.dim], x),
            Tensor::from_parts(vec![rows.len()], y),
        )
    }

    pub fn subset(&self, rows: &[usize]) -> Split {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Split {
            dim: self.dim,
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// Train, validation and test splits of one classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub num_classes: usize,
}

impl DatasetSplit {
    pub fn input_dim(&self) -> usize {
        self.train.dim
    }

    /// Held-out split used for reported accuracies: test when present,
    /// otherwise validation.
    pub fn eval_split(&self) -> &Split {
        if self.test.is_empty() {
            &self.val
        } else {
            &self.test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Blobs,
    TwoMoons,
}

/// Reproducible balanced two-class dataset in two dimensions, split 70/15/15.
///
/// Blobs are isotropic Gaussians centred at `±(1, 1)` with standard deviation
/// `noise`; two-moons are the usual interleaved half circles, centred on the
/// origin, with Gaussian jitter of standard deviation `noise`.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("need n >= 10, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise must be >= 0, got {noise}"
        )));
    }
    let mut rng = stream(seed, Stream::Data);
    let jitter = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (x, y) = match kind {
            SyntheticKind::Blobs => {
                let c = if label == 0 { 1.0 } else { -1.0 };
                (c, c)
            }
            SyntheticKind::TwoMoons => {
                let t = rng.random_range(0.0..std::f64::consts::PI);
                if label == 0 {
                    (t.cos() - 0.5, t.sin() - 0.25)
                } else {
                    (1.0 - t.cos() - 0.5, 1.0 - t.sin() - 0.5 - 0.25)
                }
            }
        };
        let (dx, dy) = if noise > 0.0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        features.push(x + dx);
        features.push(y + dy);
        labels.push(label);
    }
    let all = Split::new(2, features, labels)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Split));
    let n_train = n * 70 / 100;
    let n_val = (n - n_train) / 2;
    Ok(DatasetSplit {
        train: all.subset(&order[..n_train]),
        val: all.subset(&order[n_train..n_train + n_val]),
        test: all.subset(&order[n_train + n_val..]),
        num_classes: 2,
    })
}

/// Images from an IDX3 file, pixels as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (16 + body.len()) as u64,
            message: format!(
                "truncated: header declares {need} pixel bytes, found {}",
                body.len()
            ),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (8 + body.len()) as u64,
            message: format!(
                "truncated: header declares {count} labels, found {}",
                body.len()
            ),
        });
    }
    Ok(body[..count].to_vec())
}

/// Options for [`load_idx`].
#[derive(Debug, Clone, PartialEq)]
pub struct IdxOptions {
    /// Keep at most this many training rows.
    pub train_limit: Option<usize>,
    /// Fraction of the training file held out for validation.
    pub val_fraction: f64,
    /// Number of classes; labels must lie in `0..num_classes`.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for IdxOptions {
    fn default() -> Self {
        IdxOptions {
            train_limit: None,
            val_fraction: 0.1,
            num_classes: 10,
            seed: 0,
        }
    }
}

fn idx_pair(dir: &Path, prefix: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

fn load_idx_split(images: &Path, labels: &Path, num_classes: usize) -> Result<Split> {
    let img = parse_idx_images(&read_file(images)?, images)?;
    let lab = parse_idx_labels(&read_file(labels)?, labels)?;
    if img.count != lab.len() {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {} images", lab.len(), img.count),
        });
    }
    if let Some((i, &l)) = lab
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= num_classes)
    {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 8 + i as u64,
            message: format!("label {l} outside 0..{num_classes}"),
        });
    }
    let dim = img.rows * img.cols;
    let features = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Split::new(dim, features, lab.into_iter().map(usize::from).collect())
}

/// Loads `train-{images-idx3,labels-idx1}-ubyte` from `dir`, holds out a
/// seeded validation fraction, and loads the `t10k-*` pair as the test split
/// when present. Pixels are scaled to `[0, 1]`.
pub fn load_idx(dir: &Path, opts: &IdxOptions) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must be in [0, 1), got {}",
            opts.val_fraction
        )));
    }
    let (ti, tl) = idx_pair(dir, "train");
    let all = load_idx_split(&ti, &tl, opts.num_classes)?;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut stream(opts.seed, Stream::Split));
    let n_val = (opts.val_fraction * all.len() as f64).round() as usize;
    let rest = &order[n_val..];
    let n_train = opts
        .train_limit
        .map_or(rest.len(), |lim| lim.min(rest.len()));
    if n_train == 0 {
        return Err(Error::InvalidArgument("no training rows left".into()));
    }
    let (xi, xl) = idx_pair(dir, "t10k");
    let test = if xi.exists() && xl.exists() {
        load_idx_split(&xi, &xl, opts.num_classes)?
    } else {
        Split {
            dim: all.dim,
            ..Split::default()
        }
    };
    if test.dim != all.dim && !test.is_empty() {
        return Err(Error::Format {
            path: xi,
            offset: 8,
            message: format!("test images have {} pixels, train {}", test.dim, all.dim),
        });
    }
    Ok(DatasetSplit {
        train: all.subset(&rest[..n_train]),
        val: all.subset(&order[..n_val]),
        test,
        num_classes: opts.num_classes,
    })
}

/// Serializes images in IDX3 layout.
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

/// Serializes labels in IDX1 layout.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
