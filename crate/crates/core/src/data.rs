//! IDX ingestion, datasets, deterministic batching and a synthetic fixture.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VacError};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Mnist,
    Fmnist,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Mnist => "mnist",
            Source::Fmnist => "fmnist",
            Source::Synthetic => "synthetic",
        })
    }
}

/// Raw image payload of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| VacError::Truncated(format!("IDX header field `{what}`")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expected {
        return Err(VacError::Format(format!(
            "bad IDX magic {magic:#010x} (expected {expected:#010x})"
        )));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    let have = bytes.len().saturating_sub(offset);
    match have.cmp(&len) {
        std::cmp::Ordering::Less => Err(VacError::Truncated(format!(
            "IDX payload has {have} bytes, header declares {len}"
        ))),
        std::cmp::Ordering::Greater => Err(VacError::Format(format!(
            "IDX payload has {} unexpected trailing bytes",
            have - len
        ))),
        std::cmp::Ordering::Equal => Ok(&bytes[offset..]),
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| VacError::Format("IDX dimensions overflow".into()))?;
    let pixels = payload(bytes, 16, len)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "count")? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

pub fn write_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads a file, inflating it first if it starts with the gzip magic.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| VacError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Labeled images in `[0, 1]`, shaped `[n, 1, rows, cols]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub source: Source,
    pub num_classes: usize,
}

/// A minibatch gathered from a [`Dataset`].
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, source: Source, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(VacError::Data(format!("images must be rank 4, got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(VacError::Data(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(VacError::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VacError::Data("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            split,
            source,
            num_classes,
        })
    }

    /// Normalizes raw IDX contents (`u8 / 255`), keeping the first `limit`.
    pub fn from_idx(images: &IdxImages, labels: &[u8], split: Split, source: Source, limit: Option<usize>) -> Result<Self> {
        if images.count != labels.len() {
            return Err(VacError::Data(format!(
                "image file holds {} images but label file holds {} labels",
                images.count,
                labels.len()
            )));
        }
        let n = limit.map_or(images.count, |l| l.min(images.count));
        let per = images.rows * images.cols;
        let data = images.pixels[..n * per].iter().map(|&p| f64::from(p) / 255.0).collect();
        let tensor = Tensor::new(vec![n, 1, images.rows, images.cols], data)?;
        let labels = labels[..n].iter().map(|&l| usize::from(l)).collect();
        Self::new(tensor, labels, split, source, 10)
    }

    /// Loads `train-*` or `t10k-*` IDX files (optionally `.gz`) from `dir`.
    pub fn load_dir(dir: &Path, split: Split, source: Source, limit: Option<usize>) -> Result<Self> {
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        let images = parse_idx_images(&read_maybe_gzip(&find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
        let labels = parse_idx_labels(&read_maybe_gzip(&find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
        Self::from_idx(&images, &labels, split, source, limit)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, rows, cols]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let b = self.batch(indices);
        Self {
            images: b.images,
            labels: b.labels,
            split: self.split,
            source: self.source,
            num_classes: self.num_classes,
        }
    }

    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Consecutive index ranges of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| (s..(s + size).min(self.len())).collect())
    }
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(VacError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no {stem}[.gz] in {}", dir.display()),
    )))
}

/// Writes a dataset's images and labels as uncompressed IDX files.
pub fn save_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [_, rows, cols] = dataset.image_shape();
    let images = IdxImages {
        count: dataset.len(),
        rows,
        cols,
        pixels: dataset.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect(),
    };
    fs::File::create(images_path)?.write_all(&write_idx_images(&images))?;
    let labels: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    fs::File::create(labels_path)?.write_all(&write_idx_labels(&labels))?;
    Ok(())
}

/// Seeded epoch-wise shuffling.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn permutation(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(self.seed, &[rng::TAG_SHUFFLE, epoch as u64]));
        idx
    }

    pub fn num_batches(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }
}

/// Index lists for one epoch; the final short batch is kept.
pub fn batches(n: usize, plan: &BatchPlan, epoch: usize) -> Vec<Vec<usize>> {
    plan.permutation(n, epoch)
        .chunks(plan.batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Two-class `side×side` images: class 0 has a bright top half, class 1 a
/// bright bottom half, plus clamped Gaussian pixel noise. Samples alternate
/// class.
pub fn synthetic_blobs(n: usize, side: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 || side < 2 {
        return Err(VacError::Config(format!(
            "synthetic_blobs needs an even n > 0 and side ≥ 2 (got n={n}, side={side})"
        )));
    }
    let normal = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| VacError::Config(format!("noise sigma: {e}")))?;
    let mut r = rng::stream(seed, &[rng::TAG_SYNTH]);
    let per = side * side;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        for row in 0..side {
            let top = row < side / 2;
            let base = if top == (class == 0) { 1.0 } else { 0.0 };
            for _ in 0..side {
                let noise = if noise_sigma > 0.0 { normal.sample(&mut r) } else { 0.0 };
                data.push((base + noise).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, 1, side, side], data)?,
        labels,
        Split::Train,
        Source::Synthetic,
        2,
    )
}
