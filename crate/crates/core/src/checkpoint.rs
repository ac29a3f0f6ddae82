//! Versioned binary checkpoints of a [`RunState`].
//!
//! Layout: magic, format version (u32 LE), schema hash (32 bytes), payload
//! length (u64 LE), CBOR payload, SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::controller::RunState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MFLOCKPT";
pub const VERSION: u32 = 1;

/// Identifies the payload layout; bump together with [`VERSION`].
const SCHEMA: &str = "run-state/v1:config,stage,level,step,since_retrain,rng,data,ledger,model,records,escalations,diagnostics";

fn schema_hash() -> [u8; 32] {
    Sha256::digest(SCHEMA.as_bytes()).into()
}

pub fn to_bytes(state: &RunState) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    ciborium::into_writer(state, &mut payload).map_err(|e| Error::Checkpoint(format!("encode: {e}")))?;
    let mut out = Vec::with_capacity(payload.len() + 84);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&schema_hash());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<RunState> {
    let header = MAGIC.len() + 4 + 32 + 8;
    if bytes.len() < header + 32 {
        return Err(Error::Checkpoint(format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    if bytes[12..44] != schema_hash() {
        return Err(Error::Checkpoint("schema hash mismatch".into()));
    }
    let len = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes"));
    let end = usize::try_from(len).ok().and_then(|l| header.checked_add(l));
    if end.and_then(|e| e.checked_add(32)) != Some(bytes.len()) {
        return Err(Error::Checkpoint(format!("length field {len} disagrees with file size {}", bytes.len())));
    }
    let end = end.expect("checked above");
    let sum: [u8; 32] = Sha256::digest(&bytes[..end]).into();
    if bytes[end..] != sum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    ciborium::from_reader(&bytes[header..end]).map_err(|e| Error::Checkpoint(format!("decode: {e}")))
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save(state: &RunState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<RunState> {
    from_bytes(&fs::read(path)?)
}
