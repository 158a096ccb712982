//! Binary model file.
//!
//! ```text
//! "SAEM" | version u16 | layer count u8
//! per layer:
//!   feature_maps u16 | lambda f64
//!   auto-encoder arrays (declared order, f64 each)
//!   entropy-model arrays (declared order, f64 each)
//!   has_table u8, then per channel: symbol_min i32 | buckets u32 | counts u16[buckets]
//! CRC-32 of everything above, u32
//! ```
//!
//! All integers and floats are little-endian. The model identifier is the
//! first 8 bytes of the SHA-256 of the file without its CRC.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bytes::{put_f64s, Reader};
use crate::entropy_model::{CdfTable, ChannelCdf};
use crate::error::{Error, Result};
use crate::network::{LayerModel, ScalableModel, MODEL_VERSION};

const MAGIC: &[u8; 4] = b"SAEM";

fn body(model: &ScalableModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&model.version.to_le_bytes());
    out.push(model.layers.len() as u8);
    for layer in &model.layers {
        out.extend_from_slice(&(layer.feature_maps as u16).to_le_bytes());
        out.extend_from_slice(&layer.lambda_rate.to_le_bytes());
        let mut ae = layer.ae.clone();
        for p in ae.params_mut() {
            put_f64s(&mut out, p.values);
        }
        for (_, values) in layer.entropy.tensors() {
            put_f64s(&mut out, values);
        }
        match &layer.cdf {
            None => out.push(0),
            Some(table) => {
                out.push(1);
                for ch in &table.channels {
                    let counts = ch.counts();
                    out.extend_from_slice(&ch.symbol_min.to_le_bytes());
                    out.extend_from_slice(&(counts.len() as u32).to_le_bytes());
                    for c in counts {
                        // Every bucket is at least 1 and the total is 2^16,
                        // so no single bucket reaches 2^16.
                        out.extend_from_slice(&(c as u16).to_le_bytes());
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Serializes a model, checksum included.
pub fn model_to_bytes(model: &ScalableModel) -> Result<Vec<u8>> {
    let mut out = body(model)?;
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Identifier binding a bitstream to the exact model that produced it.
pub fn model_hash(model: &ScalableModel) -> Result<u64> {
    Ok(hash_body(&body(model)?))
}

fn hash_body(body: &[u8]) -> u64 {
    let digest = Sha256::digest(body);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Model(format!("corrupt model file: {}", reason.into()))
}

/// Parses a model, verifying magic, version and checksum.
pub fn model_from_bytes(bytes: &[u8]) -> Result<ScalableModel> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing SAEM magic"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    parse_body(body).map_err(|e| match e {
        Error::Decode { reason, .. } => corrupt(reason),
        other => other,
    })
}

fn parse_body(body: &[u8]) -> Result<ScalableModel> {
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Model(format!(
            "model format version {version} is not supported (expected {MODEL_VERSION})"
        )));
    }
    let count = r.u8()? as usize;
    let mut layers = Vec::with_capacity(count);
    for index in 0..count {
        let feature_maps = r.u16()? as usize;
        let lambda = r.f64()?;
        let mut layer = LayerModel::new(index, feature_maps, lambda, 0)
            .map_err(|e| corrupt(format!("layer {index}: {e}")))?;
        for p in layer.ae.params_mut() {
            r.f64_into(p.values)?;
        }
        for (_, values) in layer.entropy.tensors_mut() {
            r.f64_into(values)?;
        }
        layer.cdf = match r.u8()? {
            0 => None,
            1 => {
                let mut channels = Vec::with_capacity(feature_maps);
                for _ in 0..feature_maps {
                    let symbol_min = r.i32()?;
                    let buckets = r.u32()? as usize;
                    if buckets > r.remaining() / 2 {
                        return Err(corrupt(format!("layer {index}: bucket count {buckets}")));
                    }
                    let counts = (0..buckets)
                        .map(|_| r.u16().map(u32::from))
                        .collect::<Result<Vec<_>>>()?;
                    channels.push(ChannelCdf::from_counts(symbol_min, &counts)?);
                }
                Some(CdfTable { channels })
            }
            flag => return Err(corrupt(format!("layer {index}: table flag {flag}"))),
        };
        layers.push(layer);
    }
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes", r.remaining())));
    }
    ScalableModel::new(layers)
}

pub fn save_model(model: &ScalableModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ScalableModel> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Model(format!("cannot read model {}: {e}", path.display())))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_default_model, Objective};

    fn tiny() -> ScalableModel {
        let mut a = LayerModel::new(0, 3, 500.0, 1).unwrap();
        a.freeze().unwrap();
        let b = LayerModel::new(1, 2, 50.0, 2).unwrap();
        ScalableModel::new(vec![a, b]).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = tiny();
        let bytes = model_to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"SAEM");
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_hash(&back).unwrap(), model_hash(&m).unwrap());
    }

    #[test]
    fn hash_changes_with_any_parameter() {
        let m = tiny();
        let mut n = m.clone();
        n.layers[1].ae.decoder[2].conv.bias[0] += 1e-12;
        assert_ne!(model_hash(&m).unwrap(), model_hash(&n).unwrap());
    }

    #[test]
    fn bit_flip_is_detected() {
        let mut bytes = model_to_bytes(&tiny()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Model(_))));
        assert!(matches!(model_from_bytes(b"nope"), Err(Error::Model(_))));
    }

    #[test]
    fn default_model_size_is_stable() {
        let m = build_default_model(1, Objective::Mse, 3).unwrap();
        let bytes = model_to_bytes(&m).unwrap();
        let ae: usize = m.layers[0].ae.clone().params_mut().iter().map(|p| p.values.len()).sum();
        let ent: usize = m.layers[0].entropy.tensors().iter().map(|(_, v)| v.len()).sum();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 2 + 8 + 8 * (ae + ent) + 1 + 4);
    }
}
