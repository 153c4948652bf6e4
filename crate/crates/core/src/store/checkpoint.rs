//! Policy checkpoints (`HVCK`): a JSON head plus raw parameter blocks.

use serde::{Deserialize, Serialize};

use super::container::{self, Reader, Writer};
use super::FormatError;
use crate::dataset::Standardizer;
use crate::params::{BlockSpec, Params};
use crate::policy::{FlowPolicy, PolicyDims};

pub const MAGIC: &[u8; 4] = b"HVCK";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 0;

/// Everything needed to run a policy besides its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub label: String,
    pub step: u64,
    pub dims: PolicyDims,
    pub scaler: Standardizer,
    /// Tactile normalization of the calibration the policy was trained under.
    pub norm_scale: f64,
    pub dataset_hash: String,
    /// Set on students: the teacher they were distilled from.
    pub teacher_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub policy: FlowPolicy,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, FormatError> {
    if ck.meta.dims != *ck.policy.dims() {
        return Err(FormatError::Text("checkpoint head disagrees with policy dims".into()));
    }
    let head = serde_json::to_vec(&ck.meta).map_err(|e| FormatError::Text(e.to_string()))?;
    let mut w = Writer::default();
    let params = ck.policy.params();
    w.u32(params.specs().len() as u32);
    for (spec, values) in params.blocks() {
        w.string(&spec.name);
        w.u32(spec.rows as u32);
        w.u32(spec.cols as u32);
        w.f64s(values);
    }
    Ok(container::encode(
        MAGIC,
        MAJOR,
        MINOR,
        &[(b"HEAD", head), (b"PRMS", w.buf)],
    ))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let c = container::decode(bytes, MAGIC, MAJOR)?;
    let head = c.require(b"HEAD")?;
    let meta: CheckpointMeta = serde_json::from_slice(&head.payload).map_err(|e| FormatError::Malformed {
        section: "HEAD".into(),
        offset: head.offset + e.column().saturating_sub(1) as u64,
        detail: e.to_string(),
    })?;
    let prms = c.require(b"PRMS")?;
    let mut r = Reader::new(&prms.payload, "PRMS", prms.offset);
    let layout = meta.dims.layout();
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(r.malformed(format!("{count} blocks, dims imply {}", layout.len())));
    }
    let mut data = Vec::with_capacity(layout.iter().map(BlockSpec::len).sum());
    for spec in &layout {
        let at = r.offset();
        let name = r.string()?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if name != spec.name || rows != spec.rows || cols != spec.cols {
            return Err(FormatError::Malformed {
                section: "PRMS".into(),
                offset: at,
                detail: format!(
                    "block `{name}` {rows}x{cols}, expected `{}` {}x{}",
                    spec.name, spec.rows, spec.cols
                ),
            });
        }
        data.extend(r.f64s(rows * cols)?);
    }
    r.finish()?;
    let params = Params::from_data(layout, data).map_err(|e| FormatError::Text(e.to_string()))?;
    let policy = FlowPolicy::from_params(meta.dims, params).map_err(|e| FormatError::Text(e.to_string()))?;
    Ok(Checkpoint { meta, policy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TactileDims;

    fn small() -> Checkpoint {
        let dims = PolicyDims {
            horizon: 3,
            action_dim: 2,
            cond_dim: 2,
            proprio_dim: 2,
            latent_dim: 3,
            hidden: 5,
            tactile: Some(TactileDims {
                input: 4,
                hidden: 3,
                embed: 2,
            }),
        };
        Checkpoint {
            meta: CheckpointMeta {
                label: "t".into(),
                step: 12,
                dims,
                scaler: Standardizer::identity(2, 2, 2),
                norm_scale: 0.1 + 0.2,
                dataset_hash: "d".into(),
                teacher_hash: None,
            },
            policy: FlowPolicy::new(dims, 5),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = small();
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.meta.norm_scale.to_bits(), ck.meta.norm_scale.to_bits());
        assert_eq!(back.policy.content_hash(), ck.policy.content_hash());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_located() {
        let bytes = encode_checkpoint(&small()).unwrap();
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x40;
        assert!(matches!(
            decode_checkpoint(&bad).unwrap_err(),
            FormatError::Checksum { ref section, .. } if section == "PRMS"
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..40]).unwrap_err(),
            FormatError::Truncated { .. }
        ));
        assert!(matches!(
            decode_checkpoint(&crate::store::targets::MAGIC.repeat(8)).unwrap_err(),
            FormatError::BadMagic { .. }
        ));
    }
}
