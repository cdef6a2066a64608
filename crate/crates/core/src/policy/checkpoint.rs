//! Binary policy checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u32` header length, a JSON header with the policy type tag and config,
//! then the flat parameter vector as little-endian `f64`. Parameters
//! round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnyPolicy, Policy, PolicyConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASFTCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    policy: PolicyConfig,
    num_params: usize,
}

pub fn encode_checkpoint(policy: &AnyPolicy) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        policy: policy.config(),
        num_params: policy.params().len(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * policy.params().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in policy.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AnyPolicy> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a policy checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let data = &bytes[16 + hlen..];
    if data.len() != header.num_params * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.num_params * 8,
            data.len()
        )));
    }
    let params = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    AnyPolicy::from_params(&header.policy, params)
}

pub fn save_checkpoint(policy: &AnyPolicy, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(policy)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyPolicy> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{
        NeuralConfig, TabularConfig, TabularPolicy, TinyAutoregressor, TrainablePolicy,
    };

    #[test]
    fn round_trip_is_bit_exact() {
        let mut tab =
            AnyPolicy::Tabular(TabularPolicy::random(TabularConfig::new(4, 2, 9), 5).unwrap());
        // awkward values: subnormal, negative zero, large magnitudes
        tab.params_mut()[0] = f64::MIN_POSITIVE / 3.0;
        tab.params_mut()[1] = -0.0;
        tab.params_mut()[2] = 1e300;
        let neural = AnyPolicy::Neural(
            TinyAutoregressor::new(
                NeuralConfig {
                    dim: 4,
                    ..NeuralConfig::new(3)
                },
                1,
            )
            .unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        for (i, pol) in [tab, neural].into_iter().enumerate() {
            let path = dir.path().join(format!("p{i}.ckpt"));
            save_checkpoint(&pol, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.config(), pol.config());
            let a: Vec<u64> = pol.params().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = back.params().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint(b"nope").is_err());
        let pol = AnyPolicy::Tabular(TabularPolicy::uniform(TabularConfig::new(2, 1, 3)).unwrap());
        let mut bytes = encode_checkpoint(&pol).unwrap();
        bytes.pop();
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
