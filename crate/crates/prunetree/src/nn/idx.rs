//! IDX image/label file ingestion (the MNIST container format).
//!
//! All integers are big-endian. Image files carry magic `0x00000803` and
//! dimensions `[count, height, width]`; label files carry `0x00000801` and
//! `[count]`. Pixels are unsigned bytes, scaled here to `[0, 1]` floats.
//! Every error names the offending file.

use std::path::Path;

use crate::nn::dataset::{Batch, Dataset};
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.bytes.len() {
            return Err(Error::ingest(self.path, "truncated header"));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

/// Loads an IDX image file as a single-channel batch.
pub fn load_idx_images(path: &Path) -> Result<Batch> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = r.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::ingest(
            path,
            format!("bad image magic {:#010x}, expected {:#010x}", magic, IMAGE_MAGIC),
        ));
    }
    let n = r.u32_be()? as usize;
    let h = r.u32_be()? as usize;
    let w = r.u32_be()? as usize;
    let pixels = r.rest();
    if pixels.len() != n * h * w {
        return Err(Error::ingest(
            path,
            format!(
                "payload is {} bytes, header promises {} ({}x{}x{})",
                pixels.len(),
                n * h * w,
                n,
                h,
                w
            ),
        ));
    }
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Batch::new(data, n, 1, h, w)
}

/// Loads an IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = r.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(Error::ingest(
            path,
            format!("bad label magic {:#010x}, expected {:#010x}", magic, LABEL_MAGIC),
        ));
    }
    let n = r.u32_be()? as usize;
    let payload = r.rest();
    if payload.len() != n {
        return Err(Error::ingest(
            path,
            format!("payload is {} bytes, header promises {}", payload.len(), n),
        ));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads a matching image/label pair into a dataset.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let batch = load_idx_images(images)?;
    let lab = load_idx_labels(labels)?;
    if batch.len() != lab.len() {
        return Err(Error::ingest(
            labels,
            format!("{} labels for {} images in {}", lab.len(), batch.len(), images.display()),
        ));
    }
    Dataset::new(batch, lab)
}
