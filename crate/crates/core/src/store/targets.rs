//! Precomputed teacher target sets (`HVTG`).

use serde::{Deserialize, Serialize};

use super::container::{self, Reader, Writer};
use super::FormatError;
use crate::distill::TeacherTargetSet;
use crate::policy::ActionChunk;

pub const MAGIC: &[u8; 4] = b"HVTG";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 0;

#[derive(Serialize, Deserialize)]
struct Head {
    teacher_hash: String,
    dataset_hash: String,
    n_steps: usize,
    root_seed: u64,
    horizon: usize,
    action_dim: usize,
    count: usize,
}

pub fn encode_targets(set: &TeacherTargetSet) -> Result<Vec<u8>, FormatError> {
    if set.keys.len() != set.targets.len() {
        return Err(FormatError::Text("target set keys and chunks differ in length".into()));
    }
    let head = Head {
        teacher_hash: set.teacher_hash.clone(),
        dataset_hash: set.dataset_hash.clone(),
        n_steps: set.n_steps,
        root_seed: set.root_seed,
        horizon: set.horizon,
        action_dim: set.action_dim,
        count: set.targets.len(),
    };
    let head = serde_json::to_vec(&head).map_err(|e| FormatError::Text(e.to_string()))?;
    let mut keys = Writer::default();
    let mut data = Writer::default();
    for (k, t) in set.keys.iter().zip(&set.targets) {
        if t.horizon != set.horizon || t.action_dim != set.action_dim {
            return Err(FormatError::Text(format!("target `{k}` has the wrong shape")));
        }
        keys.string(k);
        data.f64s(&t.data);
    }
    Ok(container::encode(
        MAGIC,
        MAJOR,
        MINOR,
        &[(b"HEAD", head), (b"KEYS", keys.buf), (b"DATA", data.buf)],
    ))
}

pub fn decode_targets(bytes: &[u8]) -> Result<TeacherTargetSet, FormatError> {
    let c = container::decode(bytes, MAGIC, MAJOR)?;
    let hs = c.require(b"HEAD")?;
    let head: Head = serde_json::from_slice(&hs.payload).map_err(|e| FormatError::Malformed {
        section: "HEAD".into(),
        offset: hs.offset + e.column().saturating_sub(1) as u64,
        detail: e.to_string(),
    })?;
    let ks = c.require(b"KEYS")?;
    let mut rk = Reader::new(&ks.payload, "KEYS", ks.offset);
    let keys = (0..head.count).map(|_| rk.string()).collect::<Result<Vec<_>, _>>()?;
    rk.finish()?;
    let ds = c.require(b"DATA")?;
    let stride = head.horizon * head.action_dim;
    if ds.payload.len() != head.count * stride * 8 {
        return Err(FormatError::Malformed {
            section: "DATA".into(),
            offset: ds.offset,
            detail: format!("{} bytes for {} chunks of {stride}", ds.payload.len(), head.count),
        });
    }
    let mut rd = Reader::new(&ds.payload, "DATA", ds.offset);
    let mut targets = Vec::with_capacity(head.count);
    for _ in 0..head.count {
        targets.push(ActionChunk {
            horizon: head.horizon,
            action_dim: head.action_dim,
            data: rd.f64s(stride)?,
        });
    }
    Ok(TeacherTargetSet {
        teacher_hash: head.teacher_hash,
        dataset_hash: head.dataset_hash,
        n_steps: head.n_steps,
        root_seed: head.root_seed,
        horizon: head.horizon,
        action_dim: head.action_dim,
        keys,
        targets,
    })
}

/// Decodes and checks the set was built for `dataset_hash`.
pub fn decode_targets_for(bytes: &[u8], dataset_hash: &str) -> Result<TeacherTargetSet, FormatError> {
    let set = decode_targets(bytes)?;
    if set.dataset_hash != dataset_hash {
        return Err(FormatError::DatasetMismatch {
            expected: set.dataset_hash,
            found: dataset_hash.into(),
        });
    }
    Ok(set)
}
