//! Checkpoint container: a magic tag, a format version, the configuration
//! digest, then a sequence of length-prefixed named blobs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TDRM" | version: u32 | config digest: 32 bytes
//! repeated: name_len: u32 | name (UTF-8) | payload_len: u64 | payload
//! ```
//!
//! Tensor payloads are `rank: u32 | dims: u32 each | data: f32 each`.
//! Readers reject wrong magic, unknown versions, duplicate names and short
//! files (reporting the byte offset where the data ran out); the caller
//! compares the embedded digest against its own configuration.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::num::Real;

pub const MAGIC: [u8; 4] = *b"TDRM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic (expected \"TDRM\")")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads {VERSION})")]
    BadVersion(u32),
    #[error("truncated checkpoint: {what} missing at byte {offset}")]
    Truncated { offset: u64, what: String },
    #[error("duplicate checkpoint blob `{0}`")]
    DuplicateBlob(String),
    #[error("checkpoint blob `{0}` missing")]
    MissingBlob(String),
    #[error("malformed checkpoint blob `{what}`: {detail}")]
    Malformed { what: String, detail: String },
    #[error(
        "checkpoint belongs to a different configuration: its digest is {found}, this run's is {expected}"
    )]
    HashMismatch { found: String, expected: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_owned(), source }
}

/// Streams one checkpoint to disk in a fixed blob order.
pub struct CheckpointWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl CheckpointWriter {
    pub fn create(path: impl Into<PathBuf>, config_hash: &[u8; 32]) -> Result<Self, CheckpointError> {
        let path = path.into();
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        (|| {
            out.write_all(&MAGIC)?;
            out.write_all(&VERSION.to_le_bytes())?;
            out.write_all(config_hash)
        })()
        .map_err(io_err(&path))?;
        Ok(Self { out, path })
    }

    pub fn blob(&mut self, name: &str, payload: &[u8]) -> Result<(), CheckpointError> {
        (|| {
            self.out.write_all(&(name.len() as u32).to_le_bytes())?;
            self.out.write_all(name.as_bytes())?;
            self.out.write_all(&(payload.len() as u64).to_le_bytes())?;
            self.out.write_all(payload)
        })()
        .map_err(io_err(&self.path))
    }

    pub fn tensor<F: Real>(&mut self, name: &str, t: &Tensor<F>) -> Result<(), CheckpointError> {
        self.blob(name, &encode_tensor(t))
    }

    pub fn finish(mut self) -> Result<(), CheckpointError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn encode_tensor<F: Real>(t: &Tensor<F>) -> Vec<u8> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + 4 * t.data().len());
    out.extend((dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend((d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend((v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor<F: Real>(name: &str, bytes: &[u8]) -> Result<Tensor<F>, CheckpointError> {
    let bad = |detail: String| CheckpointError::Malformed { what: name.to_owned(), detail };
    let take = |at: usize, n: usize| {
        bytes
            .get(at..at + n)
            .ok_or_else(|| bad(format!("ends early at byte {at}")))
    };
    let rank = u32::from_le_bytes(take(0, 4)?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(bad(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(u32::from_le_bytes(take(4 + 4 * i, 4)?.try_into().unwrap()) as usize);
    }
    let numel: usize = dims.iter().product();
    let start = 4 + 4 * rank;
    let expect = start + 4 * numel;
    if bytes.len() != expect {
        return Err(bad(format!("payload is {} bytes, shape needs {expect}", bytes.len())));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok(Tensor::new(dims, data))
}

/// A fully parsed checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub blobs: BTreeMap<String, Vec<u8>>,
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let short = |offset: usize, what: &str| CheckpointError::Truncated {
            offset: offset as u64,
            what: what.to_owned(),
        };
        let take = |at: usize, n: usize, what: &str| {
            bytes.get(at..at + n).ok_or_else(|| short(bytes.len(), what))
        };

        if take(0, 4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let config_hash: [u8; 32] = take(8, 32, "config digest")?.try_into().unwrap();

        let mut blobs = BTreeMap::new();
        let mut at = 40;
        while at < bytes.len() {
            let name_len =
                u32::from_le_bytes(take(at, 4, "blob name length")?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(at + 4, name_len, "blob name")?.to_vec()).map_err(
                |_| CheckpointError::Malformed {
                    what: format!("blob name at byte {at}"),
                    detail: "not UTF-8".to_owned(),
                },
            )?;
            let body_at = at + 4 + name_len;
            let payload_len = u64::from_le_bytes(
                take(body_at, 8, &format!("length of blob `{name}`"))?.try_into().unwrap(),
            ) as usize;
            let payload =
                take(body_at + 8, payload_len, &format!("payload of blob `{name}`"))?.to_vec();
            if blobs.insert(name.clone(), payload).is_some() {
                return Err(CheckpointError::DuplicateBlob(name));
            }
            at = body_at + 8 + payload_len;
        }
        Ok(Self { version, config_hash, blobs })
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        self.blobs
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| CheckpointError::MissingBlob(name.to_owned()))
    }

    pub fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>, CheckpointError> {
        decode_tensor(name, self.bytes(name)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.tdrm");
        (dir, path)
    }

    #[test]
    fn blobs_and_tensors_round_trip() {
        let (_dir, path) = tmp();
        let hash = [7u8; 32];
        let t = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 0.5, 4.0, -0.25, 9.0]);
        let mut w = CheckpointWriter::create(&path, &hash).unwrap();
        w.blob("meta", br#"{"env_steps": 42}"#).unwrap();
        w.tensor("wm/enc.fc.w", &t).unwrap();
        w.finish().unwrap();

        let ck = Checkpoint::read(&path).unwrap();
        assert_eq!(ck.version, VERSION);
        assert_eq!(ck.config_hash, hash);
        assert_eq!(ck.bytes("meta").unwrap(), br#"{"env_steps": 42}"#);
        let back: Tensor<f32> = ck.tensor("wm/enc.fc.w").unwrap();
        assert_eq!(back.dims(), t.dims());
        assert_eq!(back.data(), t.data());
        assert!(matches!(
            ck.bytes("absent"),
            Err(CheckpointError::MissingBlob(ref n)) if n == "absent"
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        assert!(matches!(Checkpoint::parse(b"NOPE"), Err(CheckpointError::BadMagic)));
        let mut bytes = Vec::new();
        bytes.extend(MAGIC);
        bytes.extend(9u32.to_le_bytes());
        bytes.extend([0u8; 32]);
        assert!(matches!(Checkpoint::parse(&bytes), Err(CheckpointError::BadVersion(9))));
    }

    #[test]
    fn truncation_reports_the_offset() {
        let (_dir, path) = tmp();
        let mut w = CheckpointWriter::create(&path, &[0u8; 32]).unwrap();
        w.blob("meta", &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        w.finish().unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::parse(cut) {
            Err(CheckpointError::Truncated { offset, what }) => {
                assert_eq!(offset, cut.len() as u64);
                assert!(what.contains("meta"), "{what}");
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        // Cutting inside the fixed header is reported too.
        assert!(matches!(
            Checkpoint::parse(&bytes[..20]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn duplicate_blob_names_are_rejected() {
        let (_dir, path) = tmp();
        let mut w = CheckpointWriter::create(&path, &[0u8; 32]).unwrap();
        w.blob("a", &[1]).unwrap();
        w.blob("a", &[2]).unwrap();
        w.finish().unwrap();
        assert!(matches!(
            Checkpoint::read(&path),
            Err(CheckpointError::DuplicateBlob(ref n)) if n == "a"
        ));
    }

    #[test]
    fn tensor_payloads_must_match_their_shape() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32; 4]);
        let mut bytes = encode_tensor(&t);
        bytes.pop();
        assert!(matches!(
            decode_tensor::<f32>("bad", &bytes),
            Err(CheckpointError::Malformed { .. })
        ));
    }
}
