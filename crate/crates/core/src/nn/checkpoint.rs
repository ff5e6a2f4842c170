//! Binary tensor container used for checkpoints and adversarial shards.
//!
//! Layout (integers little-endian, no padding):
//!
//! ```text
//! "VACB" | version: u32 | tensor count: u32 |
//!   per tensor: name length: u16 | UTF-8 name | rank: u8 |
//!               extents: u64 × rank | payload: f64 × Π extents
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamSet;
use crate::error::{Result, VacError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VACB";
pub const FORMAT_VERSION: u32 = 1;

fn write_tensor_header(w: &mut impl Write, name: &str, shape: &[usize]) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| VacError::Format(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(shape.len())
        .map_err(|_| VacError::Format(format!("tensor `{name}` rank too large")))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[rank])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn write_preamble(w: &mut impl Write, count: usize) -> Result<()> {
    let count =
        u32::try_from(count).map_err(|_| VacError::Format("too many tensors".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    Ok(())
}

/// Serializes named tensors.
pub fn write_tensors<'a>(
    w: &mut impl Write,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    write_preamble(w, tensors.len())?;
    let mut buf = Vec::new();
    for (name, t) in tensors {
        write_tensor_header(w, name, t.shape())?;
        buf.clear();
        buf.reserve(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                VacError::Truncated(format!("{what} at byte {} needs {n} bytes", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a container produced by [`write_tensors`].
pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(VacError::Format(format!("bad magic bytes {magic:02x?}")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(VacError::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = cur.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| VacError::Format(format!("tensor {idx} name is not UTF-8")))?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| VacError::Format(format!("tensor `{name}` extents overflow")))?;
        let payload = cur.take(n, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(VacError::Format(format!(
            "{} trailing bytes after {count} declared tensors",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

pub fn checkpoint_save(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, params.iter().map(|p| (p.name.as_str(), &p.value)).collect::<Vec<_>>().into_iter())?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint as a fresh parameter set (groups recovered from the
/// name prefixes; gradient and momentum buffers zeroed).
pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut ps = ParamSet::new();
    for (name, t) in read_tensors(&bytes)? {
        ps.add(&name, t).map_err(|e| VacError::Format(e.to_string()))?;
    }
    Ok(ps)
}

/// Streams a single large tensor to disk without holding it in memory,
/// followed by small trailing tensors supplied at [`finish`](Self::finish).
pub struct TensorStreamWriter {
    out: BufWriter<File>,
    remaining: usize,
    trailing: usize,
}

impl TensorStreamWriter {
    /// `trailing` is the number of tensors that will be passed to `finish`.
    pub fn create(
        path: impl AsRef<Path>,
        name: &str,
        shape: &[usize],
        trailing: usize,
    ) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        write_preamble(&mut out, 1 + trailing)?;
        write_tensor_header(&mut out, name, shape)?;
        Ok(Self {
            out,
            remaining: shape.iter().product(),
            trailing,
        })
    }

    pub fn append(&mut self, values: &[f64]) -> Result<()> {
        if values.len() > self.remaining {
            return Err(VacError::Format("stream overflows declared extents".into()));
        }
        for v in values {
            self.out.write_all(&v.to_le_bytes())?;
        }
        self.remaining -= values.len();
        Ok(())
    }

    pub fn finish(mut self, trailing: &[(&str, &Tensor)]) -> Result<()> {
        if self.remaining != 0 {
            return Err(VacError::Truncated(format!(
                "stream closed with {} values missing",
                self.remaining
            )));
        }
        if trailing.len() != self.trailing {
            return Err(VacError::Format("trailing tensor count mismatch".into()));
        }
        for (name, t) in trailing {
            write_tensor_header(&mut self.out, name, t.shape())?;
            for v in t.data() {
                self.out.write_all(&v.to_le_bytes())?;
            }
        }
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("encoder.a.weight", Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, 1e300, -7.25]).unwrap())
            .unwrap();
        ps.add("decoder.b.bias", Tensor::from_vec(vec![0.1, 0.2])).unwrap();
        ps
    }

    fn encode(ps: &ParamSet) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, ps.iter().map(|p| (p.name.as_str(), &p.value)).collect::<Vec<_>>().into_iter()).unwrap();
        buf
    }

    #[test]
    fn layout_is_exact() {
        let mut ps = ParamSet::new();
        ps.add("encoder.x", Tensor::from_vec(vec![1.0])).unwrap();
        let bytes = encode(&ps);
        let mut expected = Vec::new();
        expected.extend_from_slice(b"VACB");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&9u16.to_le_bytes());
        expected.extend_from_slice(b"encoder.x");
        expected.push(1);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(read_tensors(&bytes), Err(VacError::Format(_))));
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        assert!(matches!(read_tensors(&bytes), Err(VacError::Format(_))));
    }

    #[test]
    fn overstated_count_is_truncation() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(read_tensors(&bytes), Err(VacError::Truncated(_))));
    }

    #[test]
    fn understated_count_leaves_trailing_bytes() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(read_tensors(&bytes), Err(VacError::Format(_))));
    }

    #[test]
    fn cut_payload_is_truncation() {
        let bytes = encode(&sample());
        assert!(matches!(
            read_tensors(&bytes[..bytes.len() - 3]),
            Err(VacError::Truncated(_))
        ));
    }

    #[test]
    fn stream_writer_matches_batch_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let images = Tensor::new(vec![2, 2], vec![0.25, 0.5, 0.75, 1.0]).unwrap();
        let labels = Tensor::from_vec(vec![3.0, 7.0]);
        let mut w = TensorStreamWriter::create(&path, "images", &[2, 2], 1).unwrap();
        w.append(&images.data()[..2]).unwrap();
        w.append(&images.data()[2..]).unwrap();
        w.finish(&[("labels", &labels)]).unwrap();

        let mut expected = Vec::new();
        write_tensors(&mut expected, [("images", &images), ("labels", &labels)].into_iter()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), expected);
    }
}
