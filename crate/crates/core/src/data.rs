//! MNIST IDX ingestion, splits, seeded batching and a synthetic cluster
//! generator.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::numcore::{sigmoid, splitmix64, Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_TRAIN: usize = 55_000;
pub const MNIST_VAL: usize = 5_000;
pub const MNIST_TEST: usize = 10_000;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Decoded IDX container: dimension sizes and the raw unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::IdxTruncated {
            offset,
            expected: 4,
            found: bytes.len().saturating_sub(offset),
        })
}

/// Parses an IDX buffer, gunzipping first if it starts with `1f 8b`.
pub fn parse_idx_bytes(raw: &[u8]) -> Result<IdxTensor> {
    let inflated;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw).read_to_end(&mut out)?;
        inflated = out;
        &inflated[..]
    } else {
        raw
    };
    let magic = read_u32_be(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        found => return Err(Error::IdxBadMagic { found, offset: 0 }),
    };
    let mut dims = Vec::with_capacity(ndims);
    let mut total: usize = 1;
    for k in 0..ndims {
        let offset = 4 + 4 * k;
        let d = read_u32_be(bytes, offset)? as usize;
        total = total.checked_mul(d).ok_or(Error::IdxOverflow { offset })?;
        dims.push(d);
    }
    let header = 4 + 4 * ndims;
    let found = bytes.len() - header;
    if found < total {
        return Err(Error::IdxTruncated {
            offset: header,
            expected: total,
            found,
        });
    }
    Ok(IdxTensor {
        magic,
        dims,
        data: bytes[header..header + total].to_vec(),
    })
}

pub fn parse_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    parse_idx_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Observations in `[0, 1]` (one row each) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub y: Matrix,
    pub labels: Vec<u32>,
    pub name: SplitName,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.rows() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.y.cols()
    }

    /// Rows `start..end` as a new split with the same name.
    pub fn slice(&self, start: usize, end: usize) -> Result<DataSplit> {
        Ok(DataSplit {
            y: self.y.slice_rows(start, end)?,
            labels: self.labels[start..end].to_vec(),
            name: self.name,
        })
    }

    /// The first `n` rows (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> DataSplit {
        self.slice(0, n.min(self.len())).expect("in-bounds slice")
    }

    pub fn select(&self, indices: &[usize]) -> Result<(Matrix, Vec<u32>)> {
        let y = self.y.select_rows(indices)?;
        Ok((y, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Thresholds pixels at 0.5.
    pub fn binarized(&self) -> DataSplit {
        DataSplit {
            y: self.y.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
            labels: self.labels.clone(),
            name: self.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mnist {
    pub train: DataSplit,
    pub val: DataSplit,
    pub test: DataSplit,
}

impl Mnist {
    pub fn split(&self, name: SplitName) -> &DataSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

fn find_file(dir: &Path, name: &str) -> Result<PathBuf> {
    [name.to_string(), format!("{name}.gz")]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingFile(dir.join(name)))
}

/// Images `start..end` of an image tensor scaled to `[0, 1]`, with labels.
fn split_rows(img: &IdxTensor, lab: &IdxTensor, start: usize, end: usize, name: SplitName) -> Result<DataSplit> {
    let d = img.dims[1] * img.dims[2];
    let y = Matrix::from_vec(
        end - start,
        d,
        img.data[start * d..end * d].iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    Ok(DataSplit {
        y,
        labels: lab.data[start..end].iter().map(|&l| l as u32).collect(),
        name,
    })
}

fn load_pair(dir: &Path, images: &str, labels: &str, expected: usize) -> Result<(IdxTensor, IdxTensor)> {
    let img = parse_idx(find_file(dir, images)?)?;
    let lab = parse_idx(find_file(dir, labels)?)?;
    if img.magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic { found: img.magic, offset: 0 });
    }
    if lab.magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic { found: lab.magic, offset: 0 });
    }
    for (what, found) in [(images, img.dims[0]), (labels, lab.dims[0])] {
        if found != expected {
            return Err(Error::CountMismatch {
                what: what.to_string(),
                expected,
                found,
            });
        }
    }
    if img.dims.len() != 3 {
        return Err(Error::Invalid(format!("{images} has rank {}, expected 3", img.dims.len())));
    }
    Ok((img, lab))
}

/// Loads the four canonical MNIST files (plain or gzipped) from `dir`.
/// The 60000-image training file is split in file order: the first 55000
/// rows train, the last 5000 validate.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Mnist> {
    let dir = dir.as_ref();
    let (img, lab) = load_pair(dir, TRAIN_IMAGES, TRAIN_LABELS, MNIST_TRAIN + MNIST_VAL)?;
    let train = split_rows(&img, &lab, 0, MNIST_TRAIN, SplitName::Train)?;
    let val = split_rows(&img, &lab, MNIST_TRAIN, MNIST_TRAIN + MNIST_VAL, SplitName::Val)?;
    drop((img, lab));
    let (img, lab) = load_pair(dir, TEST_IMAGES, TEST_LABELS, MNIST_TEST)?;
    let test = split_rows(&img, &lab, 0, MNIST_TEST, SplitName::Test)?;
    Ok(Mnist { train, val, test })
}

/// `k` unit-variance Gaussian clusters in a 2-D latent plane, centers on a
/// circle with adjacent centers `separation` apart, pushed through a fixed
/// random linear map to `obs_dim` and a sigmoid. Point `i` belongs to
/// cluster `i % k`.
pub fn synthetic_clusters(
    rng: &mut Rng,
    n: usize,
    obs_dim: usize,
    k: usize,
    separation: f64,
) -> Result<DataSplit> {
    if k < 2 {
        return Err(Error::Invalid(format!("need at least 2 clusters, got {k}")));
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
    let centers: Vec<[f64; 2]> = (0..k)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / k as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect();
    let map = rng.standard_normal(2, obs_dim).scale(0.5);
    let mut latent = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        labels.push(c as u32);
        latent[(i, 0)] = centers[c][0] + rng.normal();
        latent[(i, 1)] = centers[c][1] + rng.normal();
    }
    let y = latent.matmul(&map)?.map(sigmoid);
    Ok(DataSplit {
        y,
        labels,
        name: SplitName::Train,
    })
}

/// Seeded minibatch order. Each epoch is a fresh permutation derived from
/// `(seed, epoch)`; a partial trailing batch of a single row is skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchIter {
    seed: u64,
    n: usize,
    batch_size: usize,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
}

impl BatchIter {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Result<Self> {
        Self::resume(seed, n, batch_size, 0, 0)
    }

    /// Rebuilds the iterator at a saved position.
    pub fn resume(seed: u64, n: usize, batch_size: usize, epoch: u64, cursor: usize) -> Result<Self> {
        if batch_size == 0 || n < 2 {
            return Err(Error::Invalid(format!(
                "cannot batch {n} rows with batch size {batch_size}"
            )));
        }
        if cursor > n {
            return Err(Error::Invalid(format!("cursor {cursor} beyond {n} rows")));
        }
        Ok(BatchIter {
            seed,
            n,
            batch_size,
            epoch,
            cursor,
            perm: epoch_permutation(seed, epoch, n),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size + usize::from(self.n % self.batch_size >= 2)
    }

    /// True when the rest of the current epoch would only form a partial
    /// batch of a single row, which is skipped.
    pub fn epoch_exhausted(&self) -> bool {
        let left = self.n - self.cursor;
        left == 0 || (left < 2 && left < self.batch_size)
    }

    /// Indices of the next batch, rolling into the next epoch when the
    /// current one is exhausted.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.epoch_exhausted() {
            self.epoch += 1;
            self.cursor = 0;
            self.perm = epoch_permutation(self.seed, self.epoch, self.n);
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let batch = self.perm[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    pub fn next_batch(&mut self, split: &DataSplit) -> Result<(Matrix, Vec<u32>)> {
        let idx = self.next_indices();
        split.select(&idx)
    }
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut s = epoch;
    Rng::new(seed ^ splitmix64(&mut s)).permutation(n)
}
