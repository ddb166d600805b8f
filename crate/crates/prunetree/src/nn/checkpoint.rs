//! Single-file model checkpoints.
//!
//! Layout: the magic bytes `PRNET1\0`, a little-endian u32 length of the
//! canonical topology text, that text, every parameter as a little-endian
//! f32 in declaration order, and finally the first 8 bytes of the SHA-256
//! digest of everything before it. Saving the same model twice produces
//! byte-identical files.
//!
//! Training bookkeeping (seed, epoch counter) is not part of the file; a
//! loaded model starts both at zero and callers that resume training assign
//! a seed first.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::model::{ModelState, Params};
use crate::nn::spec::NetworkSpec;
use crate::{Error, Result};

const MAGIC: &[u8; 7] = b"PRNET1\0";
const CHECKSUM_LEN: usize = 8;

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    model.params.validate_against(&model.spec)?;
    let text = model.spec.canonical_text();
    let mut buf = Vec::with_capacity(MAGIC.len() + 4 + text.len() + model.params.count() * 4 + CHECKSUM_LEN);
    buf.extend_from_slice(MAGIC);
    let text_len = u32::try_from(text.len())
        .map_err(|_| Error::validation("topology text too large for checkpoint".to_string()))?;
    buf.extend_from_slice(&text_len.to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    for t in model.params.tensors() {
        for &v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest[..CHECKSUM_LEN]);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let buf = std::fs::read(path)?;
    let fail = |reason: &str| Error::ingest(path, reason);

    if buf.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(fail("file too short to be a checkpoint"));
    }
    if &buf[..MAGIC.len()] != MAGIC {
        return Err(fail("bad magic bytes, not a checkpoint file"));
    }
    let body_end = buf.len() - CHECKSUM_LEN;
    let digest = Sha256::digest(&buf[..body_end]);
    if digest[..CHECKSUM_LEN] != buf[body_end..] {
        return Err(fail("checksum mismatch, file is corrupt"));
    }

    let mut pos = MAGIC.len();
    let text_len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    if pos + text_len > body_end {
        return Err(fail("declared topology length exceeds file size"));
    }
    let text = std::str::from_utf8(&buf[pos..pos + text_len])
        .map_err(|_| fail("topology text is not valid UTF-8"))?;
    let spec = NetworkSpec::from_canonical_text(text)
        .map_err(|e| fail(&format!("invalid topology: {}", e)))?;
    pos += text_len;

    let payload = &buf[pos..body_end];
    if payload.len() % 4 != 0 {
        return Err(fail("parameter payload is not a whole number of f32 values"));
    }
    let mut flat = Vec::with_capacity(payload.len() / 4);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail("non-finite parameter value"));
        }
        flat.push(v);
    }
    let params = Params::from_flat(&spec, &flat)
        .map_err(|e| fail(&format!("parameter count mismatch: {}", e)))?;

    Ok(ModelState {
        spec,
        params,
        rng_seed: 0,
        epoch_counter: 0,
    })
}
