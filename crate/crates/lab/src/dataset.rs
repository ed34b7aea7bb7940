//! Synthetic blob datasets and the IDX image/label file format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sharpness_core::models::InputShape;
use sharpness_core::{Dataset64, Tensor64};

use crate::config::DatasetSpec;
use crate::error::{LabError, Result};

// ---------------------------------------------------------------------------
// Gaussian blobs
// ---------------------------------------------------------------------------

fn blob_points(
    classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class centers: random directions scaled to the requested separation.
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in c.iter_mut() {
            *x *= separation / norm;
        }
        centers.push(c);
    }
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        for d in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(centers[y][d] + noise);
        }
        labels.push(y);
    }
    // Per-dimension min-max normalization into [0, 1].
    for d in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            lo = lo.min(features[i * dim + d]);
            hi = hi.max(features[i * dim + d]);
        }
        let range = hi - lo;
        for i in 0..n {
            let v = &mut features[i * dim + d];
            *v = if range > 1e-12 { (*v - lo) / range } else { 0.5 };
        }
    }
    (features, labels)
}

/// Round-robin-labeled Gaussian blobs with features normalized to [0, 1].
/// Deterministic given the seed.
pub fn make_blobs(classes: usize, dim: usize, n: usize, separation: f64, seed: u64) -> Result<Dataset64> {
    if classes < 2 || dim == 0 || n == 0 {
        return Err(LabError::invalid("blobs need classes >= 2, dim >= 1, n >= 1"));
    }
    let (features, labels) = blob_points(classes, dim, n, separation, seed);
    let tensor = Tensor64::new(vec![n, dim], features)?;
    Ok(Dataset64::new(tensor, labels, classes)?)
}

/// Train/test splits drawn from one stream so both share centers and the
/// normalization.
pub fn make_blobs_split(
    classes: usize,
    dim: usize,
    n_train: usize,
    n_test: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset64, Dataset64)> {
    if classes < 2 || dim == 0 || n_train == 0 || n_test == 0 {
        return Err(LabError::invalid("blob split needs classes >= 2, dim >= 1 and nonzero counts"));
    }
    let n = n_train + n_test;
    let (features, labels) = blob_points(classes, dim, n, separation, seed);
    let train = Dataset64::new(
        Tensor64::new(vec![n_train, dim], features[..n_train * dim].to_vec())?,
        labels[..n_train].to_vec(),
        classes,
    )?;
    let test = Dataset64::new(
        Tensor64::new(vec![n_test, dim], features[n_train * dim..].to_vec())?,
        labels[n_train..].to_vec(),
        classes,
    )?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(LabError::Format {
                path: self.path.to_path_buf(),
                offset: self.offset as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Raw IDX image stack scaled into [0, 1].
#[derive(Debug)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    let mut r = ByteReader { path, bytes: &bytes, offset: 0 };
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let data = r.take(count * rows * cols, "pixels")?;
    if r.offset != bytes.len() {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            offset: r.offset as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    let pixels = data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    let mut r = ByteReader { path, bytes: &bytes, offset: 0 };
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = r.u32_be("label count")? as usize;
    let data = r.take(count, "labels")?;
    if r.offset != bytes.len() {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            offset: r.offset as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }
    Ok(data.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label pair into a dataset shaped for the model input.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    subset: Option<usize>,
    input: &InputShape,
) -> Result<Dataset64> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(LabError::invalid(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let n = subset.map_or(images.count, |s| s.min(images.count));
    if n == 0 {
        return Err(LabError::invalid("idx subset leaves no samples"));
    }
    let per = images.rows * images.cols;
    let pixels = images.pixels[..n * per].to_vec();
    let labels = labels[..n].to_vec();
    let shape = match *input {
        InputShape::Dim(d) => {
            if d != per {
                return Err(LabError::invalid(format!(
                    "model wants {d} inputs but images are {}x{}",
                    images.rows, images.cols
                )));
            }
            vec![n, per]
        }
        InputShape::Image { c, h, w } => {
            if c != 1 || h != images.rows || w != images.cols {
                return Err(LabError::invalid(format!(
                    "model wants {c}x{h}x{w} images but file holds 1x{}x{}",
                    images.rows, images.cols
                )));
            }
            vec![n, 1, h, w]
        }
    };
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let tensor = Tensor64::new(shape, pixels)?;
    Ok(Dataset64::new(tensor, labels, n_classes.max(2))?)
}

/// Builds the train/test pair a run configuration asks for.
pub fn load_datasets(spec: &DatasetSpec, input: &InputShape, seed: u64) -> Result<(Dataset64, Dataset64)> {
    match spec {
        DatasetSpec::Blobs { classes, dim, train_count, test_count, separation } => {
            if let InputShape::Dim(d) = input {
                if d != dim {
                    return Err(LabError::invalid(format!(
                        "model input width {d} does not match dataset.dim {dim}"
                    )));
                }
            } else {
                return Err(LabError::invalid("blob datasets need a flat model input"));
            }
            make_blobs_split(*classes, *dim, *train_count, *test_count, *separation, seed)
        }
        DatasetSpec::Idx { images, labels, test_images, test_labels, subset } => {
            let train = load_idx(images, labels, *subset, input)?;
            let test = load_idx(test_images, test_labels, *subset, input)?;
            Ok((train, test))
        }
    }
}

/// Least-squares one-vs-rest linear probe; returns its training accuracy.
/// Test oracle for blob separability, independent of the network stack.
pub fn linear_probe_accuracy(data: &Dataset64) -> f64 {
    let n = data.len();
    let dim = data.features().len() / n;
    let classes = data.n_classes();
    let x = data.features().data();
    // Normal equations on the bias-augmented features, solved by
    // Gauss-Jordan with partial pivoting.
    let d1 = dim + 1;
    let mut xtx = vec![0.0f64; d1 * d1];
    let mut xty = vec![0.0f64; d1 * classes];
    for i in 0..n {
        let mut row = x[i * dim..(i + 1) * dim].to_vec();
        row.push(1.0);
        for a in 0..d1 {
            for b in 0..d1 {
                xtx[a * d1 + b] += row[a] * row[b];
            }
            for c in 0..classes {
                let t = if data.labels()[i] == c { 1.0 } else { 0.0 };
                xty[a * classes + c] += row[a] * t;
            }
        }
    }
    for i in 0..d1 {
        xtx[i * d1 + i] += 1e-9; // ridge term keeps the solve well-posed
    }
    let mut aug = vec![0.0f64; d1 * (d1 + classes)];
    let w = d1 + classes;
    for r in 0..d1 {
        for c in 0..d1 {
            aug[r * w + c] = xtx[r * d1 + c];
        }
        for c in 0..classes {
            aug[r * w + d1 + c] = xty[r * classes + c];
        }
    }
    for col in 0..d1 {
        let pivot = (col..d1)
            .max_by(|&a, &b| aug[a * w + col].abs().partial_cmp(&aug[b * w + col].abs()).unwrap())
            .unwrap();
        if aug[pivot * w + col].abs() < 1e-12 {
            continue;
        }
        for c in 0..w {
            aug.swap(col * w + c, pivot * w + c);
        }
        let p = aug[col * w + col];
        for c in 0..w {
            aug[col * w + c] /= p;
        }
        for r in 0..d1 {
            if r != col {
                let f = aug[r * w + col];
                for c in 0..w {
                    aug[r * w + c] -= f * aug[col * w + c];
                }
            }
        }
    }
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for c in 0..classes {
            let mut score = aug[dim * w + d1 + c]; // bias row
            for d in 0..dim {
                score += x[i * dim + d] * aug[d * w + d1 + c];
            }
            if score > best.0 {
                best = (score, c);
            }
        }
        if best.1 == data.labels()[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}
