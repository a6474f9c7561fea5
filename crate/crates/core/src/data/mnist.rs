//! MNIST digits from IDX files, with one class undersampled in training.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GroupedDataset, Split};
use crate::error::{Error, Result};

const LABEL_MAGIC: u32 = 2049;
const IMAGE_MAGIC: u32 = 2051;

#[derive(Debug, Clone, PartialEq)]
pub struct MnistOptions {
    /// Probability of keeping each training image of `target_class`.
    pub keep_prob: f64,
    pub target_class: u32,
    pub seed: u64,
}

impl Default for MnistOptions {
    fn default() -> Self {
        MnistOptions {
            keep_prob: 0.09,
            target_class: 8,
            seed: 0,
        }
    }
}

/// File contents, transparently gunzipped when the gzip magic is present.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Labels from an IDX1 file.
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic}, expected {LABEL_MAGIC}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "{}: header announces {n} labels, file holds {}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Images from an IDX3 file as `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic}, expected {IMAGE_MAGIC}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            n * rows * cols,
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// First existing file among the usual spellings of an IDX file name.
fn locate(dir: &Path, stem: &str, kind: &str) -> Result<PathBuf> {
    let candidates = [
        format!("{stem}-{kind}-ubyte"),
        format!("{stem}-{kind}-ubyte.gz"),
        format!(
            "{stem}-{}.{}-ubyte",
            kind.split('-').next().unwrap_or(kind),
            kind.split('-').nth(1).unwrap_or("")
        ),
    ];
    candidates
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::io(
                dir.join(&candidates[0]),
                std::io::ErrorKind::NotFound.into(),
            )
        })
}

fn to_dataset(images: &Path, labels: &Path, split: Split) -> Result<GroupedDataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if lab.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: lab.len(),
        });
    }
    let features: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<u32> = lab.iter().map(|&l| l as u32).collect();
    Ok(GroupedDataset::new(
        "mnist",
        split,
        rows * cols,
        features,
        labels.clone(),
        labels,
        10,
    )?
    .with_group_names((0..10).map(|d| d.to_string()).collect()))
}

/// Train and test sets with the training images of `target_class` kept
/// independently with probability `keep_prob`. Groups are the digit classes.
pub fn load_mnist_unbalanced(
    dir: impl AsRef<Path>,
    opts: &MnistOptions,
) -> Result<(GroupedDataset, GroupedDataset)> {
    if !(opts.keep_prob > 0.0 && opts.keep_prob <= 1.0) {
        return Err(Error::config("keep_prob must lie in (0, 1]"));
    }
    let dir = dir.as_ref();
    let train = to_dataset(
        &locate(dir, "train", "images-idx3")?,
        &locate(dir, "train", "labels-idx1")?,
        Split::Train,
    )?;
    let test = to_dataset(
        &locate(dir, "t10k", "images-idx3")?,
        &locate(dir, "t10k", "labels-idx1")?,
        Split::Test,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let keep: Vec<usize> = (0..train.len())
        .filter(|&i| train.label(i) != opts.target_class || rng.random::<f64>() < opts.keep_prob)
        .collect();
    Ok((train.select(&keep, Split::Train), test))
}
