//! Binary episode files (`HVEP`).
//!
//! Version 1.1 added the `PROV` section; 1.0 files read with unknown
//! provenance.

use super::container::{self, Reader, Writer};
use super::FormatError;
use crate::episode::{DemoKind, EpisodeRecord, Generator, Outcome, Provenance, StepRecord, TaskKind};
use crate::tactile::RawTactileFrame;

pub const MAGIC: &[u8; 4] = b"HVEP";
pub const MAJOR: u16 = 1;
pub const MINOR: u16 = 1;

struct Meta {
    id: String,
    task: TaskKind,
    group: String,
    rows: usize,
    cols: usize,
    steps: usize,
    proprio_dim: usize,
    action_dim: usize,
    cond: Vec<f64>,
    outcome: Outcome,
}

fn check_shape(ep: &EpisodeRecord) -> Result<(), FormatError> {
    let taxels = ep.grid_rows * ep.grid_cols;
    let (pd, ad) = (ep.proprio_dim(), ep.action_dim());
    for (t, s) in ep.steps.iter().enumerate() {
        if s.proprio.len() != pd
            || s.action.len() != ad
            || s.tactile.left.len() != taxels
            || s.tactile.right.len() != taxels
        {
            return Err(FormatError::Text(format!("episode `{}` is ragged at step {t}", ep.id)));
        }
    }
    Ok(())
}

fn encode_sections(ep: &EpisodeRecord) -> Result<Vec<(&'static [u8; 4], Vec<u8>)>, FormatError> {
    check_shape(ep)?;
    let mut meta = Writer::default();
    meta.string(&ep.id);
    meta.u8(ep.task.index() as u8);
    meta.string(&ep.group);
    meta.u16(ep.grid_rows as u16);
    meta.u16(ep.grid_cols as u16);
    meta.u32(ep.steps.len() as u32);
    meta.u16(ep.proprio_dim() as u16);
    meta.u16(ep.action_dim() as u16);
    meta.u16(ep.cond.len() as u16);
    meta.f64s(&ep.cond);
    meta.u8(ep.outcome.success as u8 | (ep.outcome.drop as u8) << 1 | (ep.outcome.damage as u8) << 2);

    let mut obs = Writer::default();
    let mut tact = Writer::default();
    let mut act = Writer::default();
    for s in &ep.steps {
        obs.f64s(&s.proprio);
        obs.f64s(&s.object_pos);
        obs.bool(s.attached);
        tact.bool(s.tactile.gripper_closed);
        tact.f32s(&s.tactile.left);
        tact.f32s(&s.tactile.right);
        act.f64s(&s.action);
    }
    Ok(vec![
        (b"META", meta.buf),
        (b"OBSV", obs.buf),
        (b"TACT", tact.buf),
        (b"ACTN", act.buf),
    ])
}

fn encode_provenance(p: &Provenance) -> Vec<u8> {
    let mut w = Writer::default();
    match &p.generator {
        Generator::Unknown => w.u8(0),
        Generator::Scripted(k) => {
            w.u8(1);
            w.u8(k.code());
        }
        Generator::Policy(label) => {
            w.u8(2);
            w.string(label);
        }
    }
    w.u64(p.seed);
    w.buf
}

pub fn encode_episode(ep: &EpisodeRecord) -> Result<Vec<u8>, FormatError> {
    let mut sections = encode_sections(ep)?;
    sections.push((b"PROV", encode_provenance(&ep.provenance)));
    Ok(container::encode(MAGIC, MAJOR, MINOR, &sections))
}

/// Version 1.0 layout (no provenance); kept for compatibility fixtures.
pub fn encode_episode_v1_0(ep: &EpisodeRecord) -> Result<Vec<u8>, FormatError> {
    Ok(container::encode(MAGIC, MAJOR, 0, &encode_sections(ep)?))
}

fn decode_meta(sec: &container::Section) -> Result<Meta, FormatError> {
    let mut r = Reader::new(&sec.payload, "META", sec.offset);
    let id = r.string()?;
    let task_at = r.offset();
    let task = TaskKind::from_index(r.u8()? as usize).ok_or_else(|| FormatError::Malformed {
        section: "META".into(),
        offset: task_at,
        detail: "unknown task code".into(),
    })?;
    let group = r.string()?;
    let rows = r.u16()? as usize;
    let cols = r.u16()? as usize;
    let steps = r.u32()? as usize;
    let proprio_dim = r.u16()? as usize;
    let action_dim = r.u16()? as usize;
    let cond_len = r.u16()? as usize;
    let cond = r.f64s(cond_len)?;
    let flags = r.u8()?;
    if flags > 7 {
        return Err(r.malformed(format!("invalid outcome bits {flags:#x}")));
    }
    r.finish()?;
    Ok(Meta {
        id,
        task,
        group,
        rows,
        cols,
        steps,
        proprio_dim,
        action_dim,
        cond,
        outcome: Outcome {
            success: flags & 1 != 0,
            drop: flags & 2 != 0,
            damage: flags & 4 != 0,
        },
    })
}

fn expect_len(sec: &container::Section, name: &'static str, want: usize) -> Result<(), FormatError> {
    if sec.payload.len() != want {
        return Err(FormatError::Malformed {
            section: name.into(),
            offset: sec.offset,
            detail: format!("payload of {} bytes, header implies {want}", sec.payload.len()),
        });
    }
    Ok(())
}

fn decode_provenance(sec: &container::Section) -> Result<Provenance, FormatError> {
    let mut r = Reader::new(&sec.payload, "PROV", sec.offset);
    let generator = match r.u8()? {
        0 => Generator::Unknown,
        1 => {
            let c = r.u8()?;
            Generator::Scripted(DemoKind::from_code(c).ok_or_else(|| r.malformed(format!("unknown demo kind {c}")))?)
        }
        2 => Generator::Policy(r.string()?),
        g => return Err(r.malformed(format!("unknown generator tag {g}"))),
    };
    let seed = r.u64()?;
    r.finish()?;
    Ok(Provenance { generator, seed })
}

pub fn decode_episode(bytes: &[u8]) -> Result<EpisodeRecord, FormatError> {
    let c = container::decode(bytes, MAGIC, MAJOR)?;
    let m = decode_meta(c.require(b"META")?)?;
    let taxels = m.rows * m.cols;
    let obs = c.require(b"OBSV")?;
    let tact = c.require(b"TACT")?;
    let act = c.require(b"ACTN")?;
    expect_len(obs, "OBSV", m.steps * (8 * m.proprio_dim + 8 * 3 + 1))?;
    expect_len(tact, "TACT", m.steps * (1 + 8 * taxels))?;
    expect_len(act, "ACTN", m.steps * 8 * m.action_dim)?;

    let mut ro = Reader::new(&obs.payload, "OBSV", obs.offset);
    let mut rt = Reader::new(&tact.payload, "TACT", tact.offset);
    let mut ra = Reader::new(&act.payload, "ACTN", act.offset);
    let mut steps = Vec::with_capacity(m.steps);
    for _ in 0..m.steps {
        let proprio = ro.f64s(m.proprio_dim)?;
        let pos = ro.f64s(3)?;
        let attached = ro.bool()?;
        let gripper_closed = rt.bool()?;
        let left = rt.f32s(taxels)?;
        let right = rt.f32s(taxels)?;
        steps.push(StepRecord {
            proprio,
            tactile: RawTactileFrame {
                left,
                right,
                gripper_closed,
            },
            action: ra.f64s(m.action_dim)?,
            object_pos: [pos[0], pos[1], pos[2]],
            attached,
        });
    }
    let provenance = match c.section(b"PROV") {
        Some(sec) => decode_provenance(sec)?,
        None if c.minor == 0 => Provenance::unknown(),
        None => {
            return Err(FormatError::Malformed {
                section: "PROV".into(),
                offset: 0,
                detail: format!("required since 1.1, file is 1.{}", c.minor),
            })
        }
    };
    Ok(EpisodeRecord {
        id: m.id,
        task: m.task,
        group: m.group,
        cond: m.cond,
        grid_rows: m.rows,
        grid_cols: m.cols,
        steps,
        outcome: m.outcome,
        provenance,
    })
}
