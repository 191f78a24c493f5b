//! Checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DVLFCKPT" | u32 format version | u64 manifest length | manifest (JSON)
//!   | payload: f64 values of every manifest entry, in manifest order
//! ```
//!
//! The power-normaliser statistics travel as the two entries `norm.mean` and
//! `norm.var`, each of shape `1 x t_max`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CodecConfig, CodecParams, PowerNormalizer};
use crate::tensor::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DVLFCKPT";
pub const FORMAT_VERSION: u32 = 1;
const NORM_MEAN: &str = "norm.mean";
const NORM_VAR: &str = "norm.var";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_digest: String,
    pub config: CodecConfig,
    pub params_digest: String,
    pub arrays: Vec<ManifestEntry>,
}

fn entry(name: &str, rows: usize, cols: usize) -> ManifestEntry {
    ManifestEntry {
        name: name.to_string(),
        shape: [rows, cols],
        dtype: "f64".into(),
    }
}

pub fn save_checkpoint(params: &CodecParams, path: impl AsRef<Path>) -> Result<()> {
    let t_max = params.config.t_max;
    let mut arrays: Vec<ManifestEntry> = params
        .iter()
        .map(|(name, m)| entry(name, m.rows(), m.cols()))
        .collect();
    arrays.push(entry(NORM_MEAN, 1, t_max));
    arrays.push(entry(NORM_VAR, 1, t_max));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_digest: params.config.digest(),
        config: params.config.clone(),
        params_digest: params.digest(),
        arrays,
    };
    let header = serde_json::to_vec(&manifest)?;

    let mut buf = Vec::with_capacity(header.len() + 8 * (params.num_scalars() + 2 * t_max) + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    let values = params
        .iter()
        .flat_map(|(_, m)| m.as_slice().iter())
        .chain(&params.normalizer.mean)
        .chain(&params.normalizer.var);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..end])?;
    Ok((manifest, end))
}

/// Reads only the manifest of an archive.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let bytes = fs::read(path)?;
    Ok(read_header(&bytes)?.0)
}

/// Loads an archive and checks it against the runtime codec config.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: &CodecConfig) -> Result<CodecParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (manifest, mut offset) = read_header(&bytes)?;
    if manifest.config_digest != expected.digest() || &manifest.config != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written for config {} but runtime config is {}",
            manifest.config_digest,
            expected.digest()
        )));
    }
    let mut arrays = BTreeMap::new();
    let mut norm_mean = None;
    let mut norm_var = None;
    for e in &manifest.arrays {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let count = e.shape[0] * e.shape[1];
        let end = offset + 8 * count;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("payload of {} truncated", e.name)));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        match e.name.as_str() {
            NORM_MEAN => norm_mean = Some(data),
            NORM_VAR => norm_var = Some(data),
            _ => {
                arrays.insert(e.name.clone(), Matrix::from_vec(e.shape[0], e.shape[1], data));
            }
        }
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    let (Some(mean), Some(var)) = (norm_mean, norm_var) else {
        return Err(Error::Checkpoint("normalizer statistics missing".into()));
    };
    let normalizer = PowerNormalizer {
        mean,
        var,
        eps: expected.norm_eps,
        momentum: expected.norm_momentum,
    };
    let params = CodecParams::from_parts(expected.clone(), arrays, normalizer)?;
    if params.digest() != manifest.params_digest {
        return Err(Error::Checkpoint("payload digest mismatch".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::init_params;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = CodecConfig::new(6, 3, 2, 10);
        let mut p = init_params(&cfg, 3).unwrap();
        p.normalizer.set(2, 0.25, 1.5);
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(back, p);
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.format_version, FORMAT_VERSION);
        assert!(m.arrays.iter().any(|e| e.name == "norm.var" && e.shape == [1, 10]));
    }

    #[test]
    fn config_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = CodecConfig::new(6, 3, 2, 10);
        save_checkpoint(&init_params(&cfg, 3).unwrap(), &path).unwrap();
        let mut other = cfg.clone();
        other.d_latent = 16;
        assert!(matches!(load_checkpoint(&path, &other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupted_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = CodecConfig::new(6, 3, 2, 10);
        save_checkpoint(&init_params(&cfg, 3).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 0x55;
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, &cfg).is_err());
        fs::write(&path, &bytes[..n - 8]).unwrap();
        assert!(load_checkpoint(&path, &cfg).is_err());
    }
}
