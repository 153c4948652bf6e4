//! Training samples cut from annotated episodes.

use serde::{Deserialize, Serialize};

use crate::episode::EpisodeRecord;
use crate::error::{Error, Result};
use crate::policy::{ActionChunk, Observation};
use crate::reward::{self, RewardAnnotation, SafetyCalibration};
use crate::store::FormatError;
use crate::trainer::TrainSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Spacing between chunk start times.
    pub stride: usize,
    pub horizon: usize,
    /// Per-DoF mask; empty means all DoFs.
    pub dof_mask: Vec<bool>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            stride: 5,
            horizon: 50,
            dof_mask: Vec::new(),
        }
    }
}

/// Per-DoF affine standardization of actions, proprio and scene condition.
///
/// Policies are trained and sampled in standardized units; controllers map
/// chunks back to raw commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub proprio_mean: Vec<f64>,
    pub proprio_std: Vec<f64>,
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
}

/// Below this spread a DoF is treated as constant and only centred.
const MIN_STD: f64 = 1e-6;

fn column_stats(rows: impl Iterator<Item = impl AsRef<[f64]>>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for r in rows {
        for (k, &v) in r.as_ref().iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let s = (q / n - m * m).max(0.0).sqrt();
            if s < MIN_STD {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

fn affine(raw: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    raw.iter()
        .zip(mean.iter().zip(std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect()
}

impl Standardizer {
    pub fn identity(action_dim: usize, proprio_dim: usize, cond_dim: usize) -> Self {
        Standardizer {
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            proprio_mean: vec![0.0; proprio_dim],
            proprio_std: vec![1.0; proprio_dim],
            cond_mean: vec![0.0; cond_dim],
            cond_std: vec![1.0; cond_dim],
        }
    }

    pub fn fit(episodes: &[EpisodeRecord]) -> Result<Self> {
        let first = episodes
            .iter()
            .find(|e| !e.is_empty())
            .ok_or_else(|| Error::InvalidArgument("no steps to standardize".into()))?;
        let steps = || episodes.iter().flat_map(|e| e.steps.iter());
        let (action_mean, action_std) = column_stats(steps().map(|s| &s.action), first.action_dim());
        let (proprio_mean, proprio_std) = column_stats(steps().map(|s| &s.proprio), first.proprio_dim());
        let (cond_mean, cond_std) = column_stats(episodes.iter().map(|e| &e.cond), first.cond.len());
        Ok(Standardizer {
            action_mean,
            action_std,
            proprio_mean,
            proprio_std,
            cond_mean,
            cond_std,
        })
    }

    pub fn proprio(&self, raw: &[f64]) -> Vec<f64> {
        affine(raw, &self.proprio_mean, &self.proprio_std)
    }

    pub fn cond(&self, raw: &[f64]) -> Vec<f64> {
        affine(raw, &self.cond_mean, &self.cond_std)
    }

    pub fn chunk_to_model(&self, raw: &ActionChunk) -> ActionChunk {
        let d = self.action_mean.len();
        let data = raw
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.action_mean[i % d]) / self.action_std[i % d])
            .collect();
        ActionChunk { data, ..raw.clone() }
    }

    pub fn chunk_to_raw(&self, model: &ActionChunk) -> ActionChunk {
        let d = self.action_mean.len();
        let data = model
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.action_std[i % d] + self.action_mean[i % d])
            .collect();
        ActionChunk { data, ..model.clone() }
    }
}

/// Actions `t .. t + horizon`, padded by repeating the final action.
pub fn action_chunk(ep: &EpisodeRecord, t: usize, horizon: usize) -> Result<ActionChunk> {
    let d = ep.action_dim();
    let last = ep
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidArgument("empty episode".into()))?;
    let mut data = Vec::with_capacity(horizon * d);
    for k in 0..horizon {
        data.extend_from_slice(&ep.steps[(t + k).min(last)].action);
    }
    ActionChunk::new(horizon, d, data)
}

/// Step rewards `t .. t + horizon`, zero past the episode end.
pub fn reward_window(rewards: &[f64], t: usize, horizon: usize) -> Vec<f64> {
    (t..t + horizon)
        .map(|k| rewards.get(k).copied().unwrap_or(0.0))
        .collect()
}

/// One sample every `stride` steps of every episode, in episode order.
///
/// `annotations[i]` must belong to `episodes[i]` and to `calib`.
pub fn build_samples(
    episodes: &[EpisodeRecord],
    annotations: &[RewardAnnotation],
    calib: &SafetyCalibration,
    scaler: &Standardizer,
    cfg: &SampleConfig,
) -> Result<Vec<TrainSample>> {
    if episodes.len() != annotations.len() {
        return Err(Error::Dimension(format!(
            "{} episodes but {} annotations",
            episodes.len(),
            annotations.len()
        )));
    }
    if cfg.stride == 0 || cfg.horizon == 0 {
        return Err(Error::InvalidArgument("stride and horizon must be positive".into()));
    }
    let hash = calib.content_hash();
    let mut out = Vec::new();
    for (idx, (ep, ann)) in episodes.iter().zip(annotations).enumerate() {
        if ann.episode_id != ep.id {
            return Err(Error::InvalidArgument(format!(
                "annotation for `{}` paired with episode `{}`",
                ann.episode_id, ep.id
            )));
        }
        if ann.calibration_hash != hash {
            return Err(FormatError::CalibrationMismatch {
                expected: hash,
                found: ann.calibration_hash.clone(),
            }
            .into());
        }
        if ann.len() != ep.len() {
            return Err(Error::Dimension(format!(
                "annotation of `{}` has the wrong length",
                ep.id
            )));
        }
        let mask = if cfg.dof_mask.is_empty() {
            vec![true; ep.action_dim()]
        } else if cfg.dof_mask.len() == ep.action_dim() {
            cfg.dof_mask.clone()
        } else {
            return Err(Error::Dimension("DoF mask length differs from action dim".into()));
        };
        let frames = reward::normalized_frames(ep, calib)?;
        for t in (0..ep.len()).step_by(cfg.stride) {
            out.push(TrainSample {
                obs: Observation::new(
                    scaler.cond(&ep.cond),
                    scaler.proprio(&ep.steps[t].proprio),
                    Some(frames[t].flattened()),
                ),
                chunk: scaler.chunk_to_model(&action_chunk(ep, t, cfg.horizon)?),
                dof_mask: mask.clone(),
                step_rewards: reward_window(&ann.rewards, t, cfg.horizon),
                episode_reward: ann.r_episode,
                group: ep.group.clone(),
                timestep: t,
                episode: idx,
            });
        }
    }
    Ok(out)
}
