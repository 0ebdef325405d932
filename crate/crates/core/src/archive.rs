//! Self-describing binary container for a [`WeightSet`].
//!
//! Layout: the 8-byte magic `KVLABARC`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the tensor blob. Tensors are row-major
//! little-endian floats at the offsets the header lists, and the header
//! carries the SHA-256 of the blob.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::linalg::{Dtype, Matrix, Scalar};
use crate::weights::WeightSet;

pub const MAGIC: &[u8; 8] = b"KVLABARC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    /// `[rows, cols]`
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob.
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    pub config: AttentionConfig,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

/// Weights of either element type, as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyWeights {
    F32(WeightSet<f32>),
    F64(WeightSet<f64>),
}

impl AnyWeights {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyWeights::F32(_) => Dtype::F32,
            AnyWeights::F64(_) => Dtype::F64,
        }
    }

    pub fn config(&self) -> &AttentionConfig {
        match self {
            AnyWeights::F32(w) => w.config(),
            AnyWeights::F64(w) => w.config(),
        }
    }

    /// Widened copy; exact for both element types.
    pub fn to_f64(&self) -> WeightSet<f64> {
        match self {
            AnyWeights::F32(w) => w.cast(),
            AnyWeights::F64(w) => w.clone(),
        }
    }
}

pub fn encode_archive<T: Scalar>(w: &WeightSet<T>) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, m) in w.named_tensors() {
        let offset = blob.len() as u64;
        for &x in m.as_slice() {
            x.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name,
            dtype: T::DTYPE,
            shape: vec![m.rows(), m.cols()],
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let header = ArchiveHeader {
        format_version: FORMAT_VERSION,
        config: w.config().clone(),
        tensors,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::archive("header", e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn write_archive<T: Scalar>(w: &WeightSet<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_archive(w)?)?;
    Ok(())
}

/// Parses and validates the header, returning it with the blob.
pub fn decode_header(bytes: &[u8]) -> Result<(ArchiveHeader, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::archive("magic", "file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::archive("magic", "not a kvlab archive"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::archive("header_length", format!("{len} bytes declared, file is truncated")))?;
    let header: ArchiveHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::archive("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::archive(
            "format_version",
            format!("found {}, this reader supports {FORMAT_VERSION}", header.format_version),
        ));
    }
    let blob = &bytes[end..];
    let mut names = BTreeSet::new();
    let mut cursor = 0u64;
    for t in &header.tensors {
        let field = format!("tensors.{}", t.name);
        if !names.insert(t.name.as_str()) {
            return Err(Error::archive(field, "duplicate tensor name"));
        }
        if t.shape.len() != 2 {
            return Err(Error::archive(field, format!("expected a 2-d shape, got {:?}", t.shape)));
        }
        let expected = (t.shape[0] as u64)
            .checked_mul(t.shape[1] as u64)
            .and_then(|n| n.checked_mul(t.dtype.size() as u64));
        if expected != Some(t.length) {
            return Err(Error::archive(field, format!("length {} does not match shape {:?}", t.length, t.shape)));
        }
        if t.offset < cursor {
            return Err(Error::archive(field, "offsets overlap or are not ascending"));
        }
        cursor = t.offset.checked_add(t.length).ok_or_else(|| Error::archive(field.clone(), "offset overflow"))?;
        if cursor > blob.len() as u64 {
            return Err(Error::archive(field, "blob is truncated"));
        }
    }
    if hex::encode(Sha256::digest(blob)) != header.blob_sha256 {
        return Err(Error::archive("blob_sha256", "checksum mismatch"));
    }
    Ok((header, blob))
}

fn collect<T: Scalar>(header: &ArchiveHeader, blob: &[u8]) -> Result<WeightSet<T>> {
    let mut map = BTreeMap::new();
    for t in &header.tensors {
        if t.dtype != T::DTYPE {
            return Err(Error::archive(
                format!("tensors.{}", t.name),
                format!("dtype {} differs from {}", t.dtype, T::DTYPE),
            ));
        }
        let bytes = &blob[t.offset as usize..(t.offset + t.length) as usize];
        let data = bytes.chunks_exact(t.dtype.size()).map(T::read_le).collect();
        map.insert(t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data));
    }
    WeightSet::from_named(header.config.clone(), map)
}

pub fn decode_archive(bytes: &[u8]) -> Result<AnyWeights> {
    let (header, blob) = decode_header(bytes)?;
    let dtype = header.tensors.first().map_or(Dtype::F64, |t| t.dtype);
    match dtype {
        Dtype::F32 => collect(&header, blob).map(AnyWeights::F32),
        Dtype::F64 => collect(&header, blob).map(AnyWeights::F64),
    }
}

/// Reads an archive of any element type.
pub fn read_archive_any(path: impl AsRef<Path>) -> Result<AnyWeights> {
    decode_archive(&std::fs::read(path)?)
}

/// Reads an archive whose tensors must be of element type `T`.
pub fn read_archive<T: Scalar>(path: impl AsRef<Path>) -> Result<WeightSet<T>> {
    let bytes = std::fs::read(path)?;
    let (header, blob) = decode_header(&bytes)?;
    collect(&header, blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mechanism;
    use crate::rng::RngSpec;
    use crate::weights::init_weights;

    fn lrkv() -> WeightSet<f64> {
        let c = AttentionConfig::new(Mechanism::Lrkv, 3, 4).with_rank(2);
        init_weights(&c, RngSpec::new(4)).unwrap()
    }

    #[test]
    fn round_trip_every_mechanism() {
        for mech in Mechanism::ALL {
            let c = AttentionConfig::new(mech, 4, 3).with_rank(2).with_groups(2).with_latent(5);
            let w = init_weights::<f32>(&c, RngSpec::new(1)).unwrap();
            let AnyWeights::F32(back) = decode_archive(&encode_archive(&w).unwrap()).unwrap() else {
                panic!("dtype changed")
            };
            assert_eq!(back, w);
        }
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_archive(&lrkv()).unwrap();
        for cut in [4, 12, 40, bytes.len() - 1] {
            let err = decode_archive(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Archive { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_bit_fails_checksum() {
        let mut bytes = encode_archive(&lrkv()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        match decode_archive(&bytes).unwrap_err() {
            Error::Archive { field, .. } => assert_eq!(field, "blob_sha256"),
            e => panic!("{e}"),
        }
    }

    fn rewrite(bytes: &[u8], edit: impl FnOnce(&mut ArchiveHeader)) -> Vec<u8> {
        let (mut header, blob) = decode_header(bytes).unwrap();
        edit(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(blob);
        out
    }

    fn field_of(bytes: &[u8]) -> String {
        match decode_archive(bytes).unwrap_err() {
            Error::Archive { field, .. } => field,
            e => panic!("{e}"),
        }
    }

    #[test]
    fn header_violations_name_the_field() {
        let bytes = encode_archive(&lrkv()).unwrap();
        assert_eq!(field_of(&rewrite(&bytes, |h| h.format_version = 2)), "format_version");
        let dup = rewrite(&bytes, |h| {
            let first = h.tensors[0].clone();
            h.tensors[1].name = first.name;
        });
        assert_eq!(field_of(&dup), "tensors.wq.0");
        let shape = rewrite(&bytes, |h| h.tensors[0].shape = vec![1, 1]);
        assert_eq!(field_of(&shape), "tensors.wq.0");
        let missing = rewrite(&bytes, |h| {
            h.tensors.pop();
        });
        assert!(field_of(&missing).starts_with("bv"));
        assert_eq!(field_of(b"NOTANARCHIVE0000"), "magic");
    }

    #[test]
    fn typed_read_checks_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.kvl");
        write_archive(&lrkv(), &path).unwrap();
        assert_eq!(read_archive::<f64>(&path).unwrap(), lrkv());
        assert!(matches!(read_archive::<f32>(&path), Err(Error::Archive { .. })));
    }
}
