//! Versioned binary checkpoint for parameter vectors.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `UAVQNET\0` |
//! | 4     | format version (`u32`, currently 1) |
//! | 32    | SHA-256 topology fingerprint of the [`MlpSpec`] |
//! | 4     | provenance length `n` (`u32`) |
//! | n     | provenance, UTF-8 (free-form, usually the resolved run config) |
//! | 8     | value count (`u64`) |
//! | 8·count | values as `f64` |

use std::path::Path;

use super::{MlpSpec, ParamVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::write_atomic;

pub const MAGIC: &[u8; 8] = b"UAVQNET\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_params<F: Scalar>(params: &ParamVector<F>, spec: &MlpSpec, provenance: &str) -> Result<Vec<u8>> {
    params.check_spec(spec)?;
    let mut out = Vec::with_capacity(64 + provenance.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec.fingerprint());
    out.extend_from_slice(&(provenance.len() as u32).to_le_bytes());
    out.extend_from_slice(provenance.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.real().to_le_bytes());
    }
    Ok(out)
}

/// Decode a checkpoint, rejecting it unless it was written for `spec`.
pub fn decode_params(bytes: &[u8], spec: &MlpSpec, path: &Path) -> Result<(ParamVector<f64>, String)> {
    let fail = |m: &str| Error::format(path, m);
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(fail("truncated checkpoint"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(fail("not a parameter checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported checkpoint version {version}")));
    }
    if take(32)? != spec.fingerprint() {
        return Err(fail(&format!("checkpoint was written for a different network than {:?}", spec.dims())));
    }
    let plen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let provenance = String::from_utf8(take(plen)?.to_vec()).map_err(|_| fail("provenance is not UTF-8"))?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count != spec.num_params() {
        return Err(fail(&format!("expected {} values, header says {count}", spec.num_params())));
    }
    let raw = take(8 * count)?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if !cur.is_empty() {
        return Err(fail("trailing bytes after values"));
    }
    Ok((ParamVector::from_values(spec.layout(), values)?, provenance))
}

pub fn save_params<F: Scalar>(path: &Path, params: &ParamVector<F>, spec: &MlpSpec, provenance: &str) -> Result<()> {
    write_atomic(path, &encode_params(params, spec, provenance)?)
}

pub fn load_params(path: &Path, spec: &MlpSpec) -> Result<(ParamVector<f64>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, spec, path)
}
