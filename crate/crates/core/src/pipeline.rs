//! The toy experiment end to end: scripted data, calibration, annotation,
//! imitation pretraining, reward-weighted fine-tuning, distillation and
//! closed-loop evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{build_samples, SampleConfig, Standardizer};
use crate::distill::{self, DistillConfig, TeacherTargetSet};
use crate::episode::{EpisodeRecord, TaskKind};
use crate::error::Result;
use crate::policy::{FlowPolicy, PolicyDims, TactileDims};
use crate::reward::{self, CalibrationConfig, RewardAnnotation, RewardWeights, SafetyCalibration};
use crate::seed;
use crate::sim::{self, EvalReport, FlowController, SimConfig, COND_DIM};
use crate::store;
use crate::store::checkpoint::{Checkpoint, CheckpointMeta};
use crate::store::dataset_dir::sha256_hex;
use crate::trainer::{
    fit, BatchDiagnostics, LoopConfig, OptimConfig, Optimizer, TrainMode, TrainSample, Trainer, WeightingConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub tactile_hidden: usize,
    pub tactile_embed: usize,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latent_dim: 32,
            hidden: 256,
            tactile_hidden: 128,
            tactile_embed: 128,
            init_seed: 1,
        }
    }
}

impl NetworkConfig {
    pub fn teacher_dims(&self, horizon: usize) -> PolicyDims {
        PolicyDims {
            horizon,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            tactile: Some(TactileDims {
                input: 2 * crate::tactile::GRID_ROWS * crate::tactile::GRID_COLS,
                hidden: self.tactile_hidden,
                embed: self.tactile_embed,
            }),
            ..PolicyDims::teacher(COND_DIM)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub optim: OptimConfig,
    pub train: LoopConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub n_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            seed: 2024,
            n_steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub episodes_per_task: usize,
    /// Clean : over-force : weak-grip.
    pub ratio: [usize; 3],
    pub validation_per_task: usize,
    pub calibration: CalibrationConfig,
    pub rewards: RewardWeights,
    pub samples: SampleConfig,
    pub network: NetworkConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub weighting: WeightingConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    /// Settings of the bundled toy experiment (Adam rather than plain
    /// gradient descent, so that it converges in minutes on a CPU).
    fn default() -> Self {
        let adam = |steps| OptimConfig {
            optimizer: Optimizer::adam(),
            learning_rate: 3e-3,
            decay_steps: steps,
            final_fraction: 0.0,
        };
        PipelineConfig {
            seed: 7,
            sim: SimConfig::default(),
            episodes_per_task: 300,
            ratio: [7, 2, 1],
            validation_per_task: 20,
            calibration: CalibrationConfig::default(),
            rewards: RewardWeights::default(),
            // The last two action DoFs are inert in the simulator.
            samples: SampleConfig {
                dof_mask: vec![true, true, true, true, false, false],
                ..SampleConfig::default()
            },
            network: NetworkConfig::default(),
            pretrain: StageConfig {
                optim: adam(16000),
                train: LoopConfig {
                    steps: 16000,
                    batch_size: 64,
                    seed: 11,
                },
            },
            finetune: StageConfig {
                optim: adam(4000),
                train: LoopConfig {
                    steps: 4000,
                    batch_size: 64,
                    seed: 12,
                },
            },
            weighting: WeightingConfig::default(),
            distill: DistillConfig {
                optim: adam(4000),
                train: LoopConfig {
                    steps: 4000,
                    batch_size: 64,
                    seed: 13,
                },
                root_seed: 14,
                ..DistillConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Scripted demonstrations for every task, tasks in canonical order.
pub fn generate_dataset(cfg: &SimConfig, per_task: usize, ratio: [usize; 3], seed: u64) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::with_capacity(per_task * TaskKind::ALL.len());
    for task in TaskKind::ALL {
        out.extend(sim::generate_task_demos(task, per_task, ratio, cfg, seed)?);
    }
    Ok(out)
}

pub fn annotate_all(
    episodes: &[EpisodeRecord],
    calib: &SafetyCalibration,
    w: &RewardWeights,
) -> Result<Vec<RewardAnnotation>> {
    episodes.iter().map(|e| reward::annotate_episode(e, calib, w)).collect()
}

/// Imitation pretraining from random initialization.
pub fn train_plain(
    dims: PolicyDims,
    init_seed: u64,
    samples: &[TrainSample],
    stage: &StageConfig,
    on_step: impl FnMut(&BatchDiagnostics),
) -> Result<FlowPolicy> {
    let mut policy = FlowPolicy::new(dims, init_seed);
    let w = WeightingConfig {
        lambda_anchor: 0.0,
        ..WeightingConfig::default()
    };
    let mut tr = Trainer::new(TrainMode::PlainFm, w, stage.optim, None)?;
    fit(&mut policy, &mut tr, samples, &stage.train, on_step)?;
    Ok(policy)
}

/// Reward-weighted fine-tuning anchored at `init`.
pub fn train_teacher(
    init: &FlowPolicy,
    samples: &[TrainSample],
    stage: &StageConfig,
    weighting: &WeightingConfig,
    on_step: impl FnMut(&BatchDiagnostics),
) -> Result<FlowPolicy> {
    let mut policy = init.clone();
    let mut tr = Trainer::new(TrainMode::SaRwfm, *weighting, stage.optim, Some(init.params().clone()))?;
    fit(&mut policy, &mut tr, samples, &stage.train, on_step)?;
    Ok(policy)
}

pub fn evaluate(
    policy: &FlowPolicy,
    scaler: &Standardizer,
    label: &str,
    calib: &SafetyCalibration,
    cfg: &PipelineConfig,
) -> Result<(EvalReport, Vec<EpisodeRecord>)> {
    let ctl = FlowController::new(policy, scaler, calib.norm_scale, cfg.eval.n_steps, label);
    let (mut report, eps) = sim::evaluate_policy(
        &ctl,
        &TaskKind::ALL,
        &cfg.sim,
        cfg.eval.episodes,
        cfg.eval.seed,
        Some((calib, &cfg.rewards)),
    )?;
    report.overall.tactile_reads = ctl.tactile_reads();
    Ok((report, eps))
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub episodes: Vec<EpisodeRecord>,
    pub calibration: SafetyCalibration,
    pub scaler: Standardizer,
    pub annotations: Vec<RewardAnnotation>,
    pub samples: Vec<TrainSample>,
    pub validation: Vec<TrainSample>,
    pub plain: FlowPolicy,
    pub teacher: FlowPolicy,
    pub targets: TeacherTargetSet,
    pub student: FlowPolicy,
    pub plain_eval: EvalReport,
    pub teacher_eval: EvalReport,
    pub student_eval: EvalReport,
    pub plain_val_loss: f64,
    pub student_val_loss: f64,
    pub plain_losses: Vec<f64>,
    pub teacher_losses: Vec<f64>,
    pub timings: Vec<(String, f64)>,
}

pub fn run(cfg: &PipelineConfig) -> Result<PipelineRun> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        log::info!("{name}: {:.1}s", clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    cfg.sim.validate()?;
    let episodes = generate_dataset(&cfg.sim, cfg.episodes_per_task, cfg.ratio, cfg.seed)?;
    let held_out = generate_dataset(
        &cfg.sim,
        cfg.validation_per_task,
        cfg.ratio,
        seed::derive(cfg.seed, "validation", 0),
    )?;
    let calibration = reward::calibrate(&episodes, &cfg.calibration)?;
    let annotations = annotate_all(&episodes, &calibration, &cfg.rewards)?;
    let scaler = Standardizer::fit(&episodes)?;
    let samples = build_samples(&episodes, &annotations, &calibration, &scaler, &cfg.samples)?;
    let val_ann = annotate_all(&held_out, &calibration, &cfg.rewards)?;
    let validation = build_samples(&held_out, &val_ann, &calibration, &scaler, &cfg.samples)?;
    lap("data", &mut timings);

    let dims = cfg.network.teacher_dims(cfg.samples.horizon);
    let mut plain_losses = Vec::new();
    let plain = train_plain(dims, cfg.network.init_seed, &samples, &cfg.pretrain, |d| {
        plain_losses.push(d.l_total)
    })?;
    lap("pretrain", &mut timings);

    let mut teacher_losses = Vec::new();
    let teacher = train_teacher(&plain, &samples, &cfg.finetune, &cfg.weighting, |d| {
        teacher_losses.push(d.l_total)
    })?;
    lap("finetune", &mut timings);

    let targets = distill::generate_teacher_targets(&teacher, &samples, cfg.distill.n_steps, cfg.distill.root_seed)?;
    let mut student = distill::init_student_from_teacher(&teacher)?;
    distill::distill_train(&mut student, &targets, &samples, &cfg.distill, |_| {})?;
    lap("distill", &mut timings);

    let val_seed = seed::derive(cfg.seed, "validation-noise", 0);
    let plain_val_loss = distill::validation_loss(&plain, &validation, val_seed)?;
    let student_val_loss = distill::validation_loss(&student, &validation, val_seed)?;

    let (plain_eval, _) = evaluate(&plain, &scaler, "plain-fm", &calibration, cfg)?;
    let (teacher_eval, _) = evaluate(&teacher, &scaler, "sa-rwfm", &calibration, cfg)?;
    let (student_eval, _) = evaluate(&student, &scaler, "td-student", &calibration, cfg)?;
    lap("eval", &mut timings);

    Ok(PipelineRun {
        episodes,
        calibration,
        scaler,
        annotations,
        samples,
        validation,
        plain,
        teacher,
        targets,
        student,
        plain_eval,
        teacher_eval,
        student_eval,
        plain_val_loss,
        student_val_loss,
        plain_losses,
        teacher_losses,
        timings,
    })
}

impl PipelineRun {
    /// Identity of the training samples, shared by checkpoints and targets.
    pub fn dataset_hash(&self) -> &str {
        &self.targets.dataset_hash
    }

    pub fn checkpoint(&self, which: &str, cfg: &PipelineConfig) -> Result<Checkpoint> {
        let (policy, step, teacher_hash) = match which {
            "plain-fm" => (&self.plain, cfg.pretrain.train.steps, None),
            "sa-rwfm" => (&self.teacher, cfg.finetune.train.steps, None),
            "td-student" => (
                &self.student,
                cfg.distill.train.steps,
                Some(self.teacher.content_hash()),
            ),
            other => return Err(crate::Error::InvalidArgument(format!("unknown policy `{other}`"))),
        };
        Ok(Checkpoint {
            meta: CheckpointMeta {
                label: which.to_string(),
                step,
                dims: *policy.dims(),
                scaler: self.scaler.clone(),
                norm_scale: self.calibration.norm_scale,
                dataset_hash: self.dataset_hash().to_string(),
                teacher_hash,
            },
            policy: policy.clone(),
        })
    }

    /// SHA-256 of every artifact in its on-disk encoding.
    pub fn artifact_hashes(&self, cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut eps = Sha256::new();
        for e in &self.episodes {
            eps.update(store::episode::encode_episode(e)?);
        }
        out.insert("episodes".into(), hex::encode(eps.finalize()));
        let mut anns = Sha256::new();
        for a in &self.annotations {
            anns.update(store::text::encode(store::text::ANNOTATION, 1, 0, a)?);
        }
        out.insert("annotations".into(), hex::encode(anns.finalize()));
        let cal = store::text::encode(store::text::CALIBRATION, 1, 0, &self.calibration)?;
        out.insert("calibration".into(), sha256_hex(cal.as_bytes()));
        out.insert(
            "targets".into(),
            sha256_hex(&store::targets::encode_targets(&self.targets)?),
        );
        for which in ["plain-fm", "sa-rwfm", "td-student"] {
            let bytes = store::checkpoint::encode_checkpoint(&self.checkpoint(which, cfg)?)?;
            out.insert(format!("checkpoint/{which}"), sha256_hex(&bytes));
        }
        let metrics =
            serde_json::to_vec(&[&self.plain_eval, &self.teacher_eval, &self.student_eval]).expect("reports serialize");
        out.insert("metrics".into(), sha256_hex(&metrics));
        Ok(out)
    }
}
