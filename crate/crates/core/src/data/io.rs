//! `ABEDS1` dataset files: magic, little-endian u32 `N C H W`, `N*C*H*W`
//! little-endian f32 pixels, then `N` little-endian u32 labels.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 7] = b"ABEDS1\n";

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let [n, c, h, w] = ds.shape();
    let mut out = Vec::with_capacity(7 + 16 + 4 * ds.images().len() + 4 * n);
    out.extend_from_slice(DATASET_MAGIC);
    for d in [n, c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in ds.images() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in ds.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(DATASET_MAGIC.len(), "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic; not an ABEDS1 dataset"));
    }
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["N", "C", "H", "W"]) {
        let at = r.pos;
        *d = r.u32(name)? as usize;
        if *d == 0 {
            return Err(Error::format(at as u64, format!("{name} must be positive")));
        }
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(7, "header dimensions overflow"))?;
    let pixel_bytes = r.take(count * 4, "pixel data")?;
    let images = pixel_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let label_bytes = r.take(dims[0] * 4, "labels")?;
    let labels = label_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Dataset::new(dims, images, labels).map_err(|e| Error::format(7, e.to_string()))
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
