//! Binary checkpoint files.
//!
//! Base model layout (all integers u32 LE, all floats f64 LE):
//!
//! ```text
//! "COPE1" | b'M' | vocab sha256 (32) | vocab_size window embed_dim hidden_dim
//!        | embedding | w_hidden | b_hidden | w_out | b_out
//! ```
//!
//! Adapter layout:
//!
//! ```text
//! "COPE1" | b'A' | vocab sha256 (32) | base checkpoint sha256 (32)
//!        | vocab_size window embed_dim hidden_dim rank | scale
//!        | hidden.A | hidden.B | out.A | out.B
//! ```
//!
//! Matrices are row-major. The content hash of a checkpoint is the SHA-256
//! of its bytes, hex encoded.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::lmcore::Vocabulary;

use super::params::{AdapterDelta, Dims, LowRank, ModelParams};

pub const MAGIC: &[u8; 5] = b"COPE1";
const KIND_MODEL: u8 = b'M';
const KIND_ADAPTER: u8 = b'A';

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(params: &ModelParams, vocab: &Vocabulary) -> Vec<u8> {
    let d = params.dims;
    let mut out = Vec::with_capacity(64 + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.push(KIND_MODEL);
    out.extend_from_slice(&vocab.content_hash());
    for v in [d.vocab_size, d.window, d.embed_dim, d.hidden_dim] {
        put_u32(&mut out, v);
    }
    for t in params.tensors() {
        put_f64s(&mut out, t);
    }
    out
}

pub fn encode_adapter(adapter: &AdapterDelta, dims: Dims, vocab: &Vocabulary, base_hash: &str) -> Result<Vec<u8>> {
    let base = decode_hash(base_hash)?;
    let mut out = Vec::with_capacity(128 + 8 * adapter.num_params());
    out.extend_from_slice(MAGIC);
    out.push(KIND_ADAPTER);
    out.extend_from_slice(&vocab.content_hash());
    out.extend_from_slice(&base);
    for v in [dims.vocab_size, dims.window, dims.embed_dim, dims.hidden_dim, adapter.rank] {
        put_u32(&mut out, v);
    }
    put_f64s(&mut out, &[adapter.scale]);
    put_f64s(&mut out, &adapter.flat());
    Ok(out)
}

fn decode_hash(hex_hash: &str) -> Result<[u8; 32]> {
    let bytes = hex::decode(hex_hash)
        .map_err(|_| Error::InvalidArgument(format!("not a hex hash: {hex_hash:?}")))?;
    bytes
        .try_into()
        .map_err(|_| Error::InvalidArgument(format!("hash must be 32 bytes: {hex_hash:?}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::CorruptHeader(format!(
                "truncated at byte {} (need {n} more, file has {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, CheckpointError> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| {
            CheckpointError::CorruptHeader("tensor size overflow".into())
        })?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, kind: u8, vocab: &Vocabulary) -> std::result::Result<(), CheckpointError> {
        let magic = self.take(5)?;
        if magic != MAGIC {
            return Err(CheckpointError::CorruptHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let k = self.take(1)?[0];
        if k != kind {
            return Err(CheckpointError::CorruptHeader(format!(
                "expected kind {:?}, found {:?}",
                kind as char, k as char
            )));
        }
        let vh = self.take(32)?;
        let want = vocab.content_hash();
        if vh != want {
            return Err(CheckpointError::HashMismatch {
                expected: hex::encode(want),
                found: hex::encode(vh),
            });
        }
        Ok(())
    }

    fn finish(&self) -> std::result::Result<(), CheckpointError> {
        if self.pos != self.bytes.len() {
            return Err(CheckpointError::CorruptHeader(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_model(bytes: &[u8], vocab: &Vocabulary) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(KIND_MODEL, vocab)?;
    let dims = Dims::new(r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if dims.vocab_size != vocab.len() {
        return Err(CheckpointError::DimensionMismatch(format!(
            "checkpoint vocabulary {} vs {}",
            dims.vocab_size,
            vocab.len()
        ))
        .into());
    }
    let mut p = ModelParams::zeros(dims);
    for t in p.tensors_mut() {
        let n = t.len();
        *t = r.f64s(n)?;
    }
    r.finish()?;
    Ok(p)
}

/// Decodes an adapter and checks it was trained on top of `base`.
pub fn decode_adapter(bytes: &[u8], vocab: &Vocabulary, base_dims: Dims, base_hash: &str) -> Result<AdapterDelta> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(KIND_ADAPTER, vocab)?;
    let recorded = hex::encode(r.take(32)?);
    if recorded != base_hash {
        return Err(CheckpointError::HashMismatch {
            expected: base_hash.to_string(),
            found: recorded,
        }
        .into());
    }
    let dims = Dims::new(r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let rank = r.u32()?;
    if dims != base_dims {
        return Err(CheckpointError::DimensionMismatch(format!(
            "adapter built for {dims:?}, base is {base_dims:?}"
        ))
        .into());
    }
    let scale = r.f64s(1)?[0];
    let hidden = LowRank {
        rows: dims.hidden_dim,
        cols: dims.input_dim(),
        rank,
        a: r.f64s(dims.hidden_dim * rank)?,
        b: r.f64s(rank * dims.input_dim())?,
    };
    let out = LowRank {
        rows: dims.vocab_size,
        cols: dims.hidden_dim,
        rank,
        a: r.f64s(dims.vocab_size * rank)?,
        b: r.f64s(rank * dims.hidden_dim)?,
    };
    r.finish()?;
    Ok(AdapterDelta {
        rank,
        scale,
        hidden,
        out,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes the model and returns its content hash.
pub fn save_model(path: &Path, params: &ModelParams, vocab: &Vocabulary) -> Result<String> {
    write(path, &encode_model(params, vocab))
}

pub fn load_model(path: &Path, vocab: &Vocabulary) -> Result<(ModelParams, String)> {
    let bytes = read(path)?;
    Ok((decode_model(&bytes, vocab)?, content_hash(&bytes)))
}

pub fn save_adapter(
    path: &Path,
    adapter: &AdapterDelta,
    dims: Dims,
    vocab: &Vocabulary,
    base_hash: &str,
) -> Result<String> {
    write(path, &encode_adapter(adapter, dims, vocab, base_hash)?)
}

pub fn load_adapter(
    path: &Path,
    vocab: &Vocabulary,
    base_dims: Dims,
    base_hash: &str,
) -> Result<(AdapterDelta, String)> {
    let bytes = read(path)?;
    Ok((
        decode_adapter(&bytes, vocab, base_dims, base_hash)?,
        content_hash(&bytes),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmcore::LanguageModel;
    use crate::tinylm::TinyLm;
    use std::sync::Arc;

    fn setup() -> (Vocabulary, ModelParams, AdapterDelta) {
        let v = Vocabulary::char_default();
        let dims = Dims::new(v.len(), 3, 4, 5);
        let p = ModelParams::init(dims, 9);
        let mut ad = AdapterDelta::init(dims, 2, 0.5, 1).unwrap();
        ad.out.a[3] = 0.25;
        (v, p, ad)
    }

    #[test]
    fn round_trip_bit_identical() {
        let (v, p, ad) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.ckpt");
        let h = save_model(&mp, &p, &v).unwrap();
        let (q, h2) = load_model(&mp, &v).unwrap();
        assert_eq!(h, h2);
        assert_eq!(p, q);
        let ap = dir.path().join("a.adapter");
        let ah = save_adapter(&ap, &ad, p.dims, &v, &h).unwrap();
        let (bd, ah2) = load_adapter(&ap, &v, p.dims, &h).unwrap();
        assert_eq!(ah, ah2);
        assert_eq!(ad, bd);
        let va = Arc::new(v);
        let m1 = TinyLm::new(va.clone(), &p, Some(&ad)).unwrap();
        let m2 = TinyLm::new(va, &q, Some(&bd)).unwrap();
        let ctx = [0, 40, 41, 42];
        assert_eq!(m1.next_log_probs(&ctx), m2.next_log_probs(&ctx));
    }

    #[test]
    fn truncated_is_corrupt_header() {
        let (v, p, _) = setup();
        let bytes = encode_model(&p, &v);
        for cut in [0, 3, 20, bytes.len() - 1] {
            let err = decode_model(&bytes[..cut], &v).unwrap_err();
            assert!(
                matches!(err, Error::Checkpoint(CheckpointError::CorruptHeader(_))),
                "{cut}: {err:?}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_model(&bad, &v),
            Err(Error::Checkpoint(CheckpointError::CorruptHeader(_)))
        ));
    }

    #[test]
    fn adapter_against_wrong_base_is_hash_mismatch() {
        let (v, p, ad) = setup();
        let h = content_hash(&encode_model(&p, &v));
        let bytes = encode_adapter(&ad, p.dims, &v, &h).unwrap();
        let other = content_hash(b"some other base");
        assert!(matches!(
            decode_adapter(&bytes, &v, p.dims, &other),
            Err(Error::Checkpoint(CheckpointError::HashMismatch { .. }))
        ));
        let wrong_dims = Dims::new(v.len(), 3, 4, 6);
        assert!(matches!(
            decode_adapter(&bytes, &v, wrong_dims, &h),
            Err(Error::Checkpoint(CheckpointError::DimensionMismatch(_)))
        ));
    }

    #[test]
    fn vocabulary_mismatch() {
        let (v, p, _) = setup();
        let bytes = encode_model(&p, &v);
        let mut syms: Vec<String> = (0..v.len()).map(|i| format!("t{i}")).collect();
        syms[0] = "x".into();
        let other = Vocabulary::new(syms, 0, 1, 2, 3).unwrap();
        assert!(matches!(
            decode_model(&bytes, &other),
            Err(Error::Checkpoint(CheckpointError::HashMismatch { .. }))
        ));
    }
}
