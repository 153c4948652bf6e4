//! Offline transfer of a tactile-conditioned teacher into a proprio-only student.
//!
//! 1. [`generate_teacher_targets`] samples one teacher chunk per training
//!    sample, once.
//! 2. [`init_student_from_teacher`] copies the teacher minus its tactile
//!    encoder and keeps the proprio columns of the state projection.
//! 3. [`distill_train`] runs flow matching toward a blend of demonstration
//!    and teacher chunks. It sees only the stored targets, never the teacher.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::policy::{ActionChunk, FlowPolicy, ObsBatch};
use crate::seed;
use crate::store::FormatError;
use crate::trainer::{
    self, draw_flow_noise, masked_sample_loss, stack_chunks, LoopConfig, OptimConfig, TrainMode, TrainSample, Trainer,
    WeightingConfig,
};

/// Rows per batched teacher integration.
const TARGET_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha_blend: f64,
    pub validation_alpha: f64,
    /// Euler steps when decoding teacher targets.
    pub n_steps: usize,
    pub root_seed: u64,
    /// Reward-weight the distillation loss (off by default).
    pub weighted: bool,
    pub weighting: WeightingConfig,
    pub optim: OptimConfig,
    pub train: LoopConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha_blend: 0.5,
            validation_alpha: 0.0,
            n_steps: 10,
            root_seed: 0,
            weighted: false,
            weighting: WeightingConfig::default(),
            optim: OptimConfig::default(),
            train: LoopConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_blend) || !(0.0..=1.0).contains(&self.validation_alpha) {
            return Err(Error::InvalidArgument(format!(
                "blend coefficients must lie in [0, 1], got {} / {}",
                self.alpha_blend, self.validation_alpha
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Precomputed teacher chunks, one per training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargetSet {
    pub teacher_hash: String,
    pub dataset_hash: String,
    pub n_steps: usize,
    pub root_seed: u64,
    pub horizon: usize,
    pub action_dim: usize,
    /// `<episode index>@<timestep>` per sample.
    pub keys: Vec<String>,
    pub targets: Vec<ActionChunk>,
}

impl TeacherTargetSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub fn sample_key(s: &TrainSample) -> String {
    format!("{}@{}", s.episode, s.timestep)
}

/// Content hash of a sample list (observations, chunks, keys).
pub fn sample_set_hash(samples: &[TrainSample]) -> String {
    let mut h = Sha256::new();
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        h.update(sample_key(s).as_bytes());
        h.update(s.group.as_bytes());
        for v in s.obs.cond.iter().chain(&s.obs.proprio).chain(&s.chunk.data) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Per-sample target seed: independent of generation order.
pub fn target_seed(root: u64, index: usize) -> u64 {
    seed::derive(root, "teacher-target", index as u64)
}

/// Stage 1: decode one teacher chunk per sample with seeded noise.
pub fn generate_teacher_targets(
    teacher: &FlowPolicy,
    samples: &[TrainSample],
    n_steps: usize,
    root_seed: u64,
) -> Result<TeacherTargetSet> {
    if !teacher.uses_tactile() {
        return Err(Error::InvalidArgument("teacher must be tactile-conditioned".into()));
    }
    let dims = *teacher.dims();
    let idx: Vec<usize> = (0..samples.len()).collect();
    let chunks: Vec<Vec<ActionChunk>> = idx
        .par_chunks(TARGET_BATCH)
        .map(|block| -> Result<Vec<ActionChunk>> {
            let obs = ObsBatch::from_observations(block.iter().map(|&i| &samples[i].obs), true)?;
            let mut x0 = Array2::zeros((block.len(), dims.chunk_len()));
            for (r, &i) in block.iter().enumerate() {
                x0.row_mut(r).assign(&teacher.noise(target_seed(root_seed, i)));
            }
            let x = teacher.integrate(&obs, x0, n_steps)?;
            x.rows()
                .into_iter()
                .map(|row| ActionChunk::new(dims.horizon, dims.action_dim, row.to_vec()))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(TeacherTargetSet {
        teacher_hash: teacher.content_hash(),
        dataset_hash: sample_set_hash(samples),
        n_steps,
        root_seed,
        horizon: dims.horizon,
        action_dim: dims.action_dim,
        keys: samples.iter().map(sample_key).collect(),
        targets: chunks.into_iter().flatten().collect(),
    })
}

/// Stage 2: drop the tactile encoder and keep the first `d_a` projection columns.
pub fn init_student_from_teacher(teacher: &FlowPolicy) -> Result<FlowPolicy> {
    if !teacher.uses_tactile() {
        return Err(Error::InvalidArgument("teacher is already proprio-only".into()));
    }
    let dims = teacher.dims().proprio_only();
    let tp = teacher.params();
    let mut sp = Params::zeros(dims.layout());
    let names: Vec<String> = sp.specs().iter().map(|s| s.name.clone()).collect();
    for name in names {
        if name == "state_proj.w" {
            let w = tp.block("state_proj.w");
            let cols = dims.proprio_dim;
            sp.block_mut(&name).assign(&w.slice(ndarray::s![.., ..cols]));
        } else {
            sp.block_slice_mut(&name).copy_from_slice(tp.block_slice(&name));
        }
    }
    FlowPolicy::from_params(dims, sp)
}

/// `(1 - alpha) * gt + alpha * teacher`, elementwise.
pub fn blend_targets(gt: &ActionChunk, teacher: &ActionChunk, alpha: f64) -> Result<ActionChunk> {
    if gt.horizon != teacher.horizon || gt.action_dim != teacher.action_dim {
        return Err(Error::Dimension(format!(
            "blending {}x{} with {}x{}",
            gt.horizon, gt.action_dim, teacher.horizon, teacher.action_dim
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "blend coefficient {alpha} outside [0, 1]"
        )));
    }
    let data = gt
        .data
        .iter()
        .zip(&teacher.data)
        .map(|(&g, &t)| match alpha {
            0.0 => g,
            1.0 => t,
            _ => g + alpha * (t - g),
        })
        .collect();
    ActionChunk::new(gt.horizon, gt.action_dim, data)
}

/// Samples with blended chunks and tactile stripped.
pub fn blended_samples(targets: &TeacherTargetSet, samples: &[TrainSample], alpha: f64) -> Result<Vec<TrainSample>> {
    check_targets(targets, samples)?;
    samples
        .iter()
        .zip(&targets.targets)
        .map(|(s, t)| {
            Ok(TrainSample {
                obs: s.obs.without_tactile(),
                chunk: blend_targets(&s.chunk, t, alpha)?,
                ..s.clone()
            })
        })
        .collect()
}

fn check_targets(targets: &TeacherTargetSet, samples: &[TrainSample]) -> Result<()> {
    let found = sample_set_hash(samples);
    if targets.dataset_hash != found || targets.len() != samples.len() {
        return Err(FormatError::DatasetMismatch {
            expected: targets.dataset_hash.clone(),
            found,
        }
        .into());
    }
    Ok(())
}

/// Stage 3: flow matching of the student toward blended targets.
pub fn distill_train(
    student: &mut FlowPolicy,
    targets: &TeacherTargetSet,
    samples: &[TrainSample],
    cfg: &DistillConfig,
    on_step: impl FnMut(&trainer::BatchDiagnostics),
) -> Result<()> {
    cfg.validate()?;
    if student.uses_tactile() {
        return Err(Error::TactileLeak);
    }
    let blended = blended_samples(targets, samples, cfg.alpha_blend)?;
    let mut tr = if cfg.weighted {
        Trainer::new(
            TrainMode::SaRwfm,
            cfg.weighting,
            cfg.optim,
            Some(student.params().clone()),
        )?
    } else {
        let w = WeightingConfig {
            lambda_anchor: 0.0,
            ..cfg.weighting
        };
        Trainer::new(TrainMode::PlainFm, w, cfg.optim, None)?
    };
    trainer::fit(student, &mut tr, &blended, &cfg.train, on_step)
}

/// Mean masked flow-matching loss over `samples` with seeded flow times and
/// noise (one draw sequence per `seed`, independent of the policy).
pub fn validation_loss(policy: &FlowPolicy, samples: &[TrainSample], seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let dims = *policy.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for block in samples.chunks(TARGET_BATCH) {
        let (t, x0) = draw_flow_noise(&mut rng, block.len(), dims.chunk_len());
        let obs = ObsBatch::from_observations(block.iter().map(|s| &s.obs), policy.uses_tactile())?;
        let targets = stack_chunks(block.iter().map(|s| &s.chunk));
        let (loss, _) = policy.fm_loss_elements(&obs, &targets, &t, &x0)?;
        for (row, s) in loss.rows().into_iter().zip(block) {
            total += masked_sample_loss(&row.to_vec(), &s.dof_mask, dims.horizon, 1e-8)?;
        }
    }
    Ok(total / samples.len() as f64)
}
