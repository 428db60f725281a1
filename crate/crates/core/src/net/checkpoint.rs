//! EDP1 parameter checkpoints.
//!
//! ```text
//! b"EDP1"
//! u32 len, JSON header (UTF-8)
//! u32 tensor count
//! per tensor: u32 len, name, u32 rank, rank x u32 dims, f32 values
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`;
//! the JSON header carries the network configuration and training metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::EdmConfig;
use crate::edf::{put_str, Reader};
use crate::error::{Error, Result};

use super::config::NetConfig;
use super::train::Objective;
use super::unet::UNet;

pub const MAGIC: &[u8; 4] = b"EDP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub objective: Objective,
    pub edm: EdmConfig,
    pub seed: u64,
    pub steps: usize,
    /// Hash of the run configuration that produced the weights.
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub fn encode(net: &UNet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_string(&Header {
        net: net.config().clone(),
        meta: meta.clone(),
    })?;
    let params = net.params();
    let mut out = Vec::with_capacity(64 + header.len() + params.len() * 4);
    out.extend_from_slice(MAGIC);
    put_str(&mut out, &header);
    out.extend_from_slice(&(params.specs().len() as u32).to_le_bytes());
    for spec in params.specs() {
        put_str(&mut out, &spec.name);
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for d in &spec.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in spec.slot.of(params.values()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<(UNet, CheckpointMeta)> {
    let mut r = Reader::new(buf);
    r.expect_magic(MAGIC)?;
    let at = r.offset();
    let text = r.string("header")?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::format(at, format!("bad checkpoint header: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("tensor dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(r.offset(), "tensor size overflows"))?;
        let raw = r.take(n.saturating_mul(4), "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((name, shape, data));
    }
    r.finish()?;
    let end = r.offset();
    let net = UNet::from_parameters(header.net, &tensors).map_err(|e| Error::format(end, e.to_string()))?;
    Ok((net, header.meta))
}

pub fn write(path: &Path, net: &UNet, meta: &CheckpointMeta) -> Result<String> {
    let bytes = encode(net, meta)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Load a checkpoint and return it with the SHA-256 of the file.
pub fn read(path: &Path) -> Result<(UNet, CheckpointMeta, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (net, meta) = decode(&bytes)?;
    Ok((net, meta, sha256_hex(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNet {
        let cfg = NetConfig {
            in_channels: 3,
            out_channels: 1,
            base_channels: 4,
            multipliers: vec![1],
            n_res: 1,
            emb_dim: 4,
            ..NetConfig::default()
        };
        UNet::new_unzeroed(cfg, 4).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            objective: Objective::Diffusion,
            edm: EdmConfig::default(),
            seed: 7,
            steps: 3,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn roundtrip_rounds_to_f32() {
        let net = tiny();
        let bytes = encode(&net, &meta()).unwrap();
        let (back, m) = decode(&bytes).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back.config(), net.config());
        for (a, b) in net.params().values().iter().zip(back.params().values()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert_eq!(encode(&back, &m).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode(&tiny(), &meta()).unwrap();
        for cut in [2, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn header_starts_with_magic_and_json() {
        let bytes = encode(&tiny(), &meta()).unwrap();
        assert_eq!(&bytes[..4], b"EDP1");
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(header["net"]["base_channels"], 4);
        assert_eq!(header["objective"], "diffusion");
    }
}
