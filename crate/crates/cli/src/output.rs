//! File outputs: CSV tables, PGM images and adversarial shards.

use std::fs;
use std::path::{Path, PathBuf};

use vac_core::nn::{read_tensors, TensorStreamWriter};
use vac_core::{Dataset, Split, Tensor};

use crate::error::{CliError, CliResult};

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

/// Writes `rows` under `header` as CSV.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path.display(), e))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|s| s.as_ref()))?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path.display(), e))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Binary greyscale image (`P5`, maxval 255) from values in `[0, 1]`.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm payload");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> CliResult<()> {
    fs::write(path, pgm_bytes(width, height, pixels)).map_err(|e| CliError::io(path.display(), e))
}

/// Parses a `P5` image back into `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> CliResult<(usize, usize, Vec<u8>)> {
    let bad = || CliError::Io("malformed PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Relative location of the shard for `(split, ε)` inside the run directory.
pub fn shard_path(split: Split, eps: f64) -> PathBuf {
    PathBuf::from("adv").join(format!("{}_eps{eps}.vacb", split_name(split)))
}

/// Streams one adversarial set: images, then labels and predictions.
pub struct ShardWriter {
    inner: TensorStreamWriter,
    labels: Vec<f64>,
    predictions: Vec<f64>,
}

impl ShardWriter {
    pub fn create(path: &Path, count: usize, image_shape: [usize; 3]) -> CliResult<Self> {
        let [c, h, w] = image_shape;
        Ok(Self {
            inner: TensorStreamWriter::create(path, "images", &[count, c, h, w], 2)?,
            labels: Vec::with_capacity(count),
            predictions: Vec::with_capacity(count),
        })
    }

    pub fn append(&mut self, images: &Tensor, labels: &[usize], predictions: &[usize]) -> CliResult<()> {
        self.inner.append(images.data())?;
        self.labels.extend(labels.iter().map(|&l| l as f64));
        self.predictions.extend(predictions.iter().map(|&p| p as f64));
        Ok(())
    }

    pub fn finish(self) -> CliResult<()> {
        let labels = Tensor::from_vec(self.labels);
        let predictions = Tensor::from_vec(self.predictions);
        self.inner.finish(&[("labels", &labels), ("predictions", &predictions)])?;
        Ok(())
    }
}

/// A loaded adversarial shard.
pub struct Shard {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
}

pub fn read_shard(path: &Path) -> CliResult<Shard> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading shard {}", path.display()), e))?;
    let mut tensors = read_tensors(&bytes)?;
    let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    if names != ["images", "labels", "predictions"] {
        return Err(CliError::Io(format!("{}: unexpected shard layout {names:?}", path.display())));
    }
    let to_idx = |t: Tensor| t.data().iter().map(|&v| v as usize).collect::<Vec<_>>();
    let predictions = to_idx(tensors.pop().unwrap().1);
    let labels = to_idx(tensors.pop().unwrap().1);
    let images = tensors.pop().unwrap().1;
    if images.batch() != labels.len() || labels.len() != predictions.len() {
        return Err(CliError::Io(format!("{}: inconsistent shard counts", path.display())));
    }
    Ok(Shard {
        images,
        labels,
        predictions,
    })
}

/// Checks that a shard was computed from `clean` (same labels, same count).
pub fn check_shard_matches(shard: &Shard, clean: &Dataset, path: &Path) -> CliResult<()> {
    if shard.labels != clean.labels {
        return Err(CliError::Validation(format!(
            "{} does not match the configured {} samples",
            path.display(),
            split_name(clean.split)
        )));
    }
    Ok(())
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let px = [0.0, 0.5, 1.0, 0.25, 0.75, 1.0];
        let bytes = pgm_bytes(3, 2, &px);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (w, h, data) = read_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(data, vec![0, 128, 255, 64, 191, 255]);
    }
}
