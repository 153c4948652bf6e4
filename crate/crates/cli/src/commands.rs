use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rwfm_core::dataset::{build_samples, Standardizer};
use rwfm_core::distill::{self, sample_set_hash};
use rwfm_core::episode::{DemoKind, Generator, TaskKind};
use rwfm_core::pipeline::{self, PipelineConfig};
use rwfm_core::reward::{self, SafetyCalibration};
use rwfm_core::sim::{self, EvalMetrics, EvalReport, FlowController};
use rwfm_core::store::checkpoint::{Checkpoint, CheckpointMeta};
use rwfm_core::store::dataset_dir::{
    read_checkpoint_file, read_file, sha256_hex, write_atomic, write_checkpoint_file, DatasetDir,
};
use rwfm_core::trainer::{BatchDiagnostics, TrainSample};
use sha2::{Digest, Sha256};

use crate::manifest::Recorder;
use crate::{CliError, Mode};

const SMOOTHING_WINDOW: usize = 100;

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<String, CliError> {
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn gen_data(mut cfg: PipelineConfig, out: &Path, count: Option<usize>, seed: Option<u64>) -> Result<(), CliError> {
    if let Some(n) = count {
        cfg.episodes_per_task = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.episodes_per_task == 0 {
        return Err(CliError::config("--count must be at least 1"));
    }
    if out.read_dir().is_ok_and(|mut d| d.next().is_some()) {
        return Err(CliError::data(format!(
            "{} already exists and is not empty",
            out.display()
        )));
    }
    cfg.sim.validate()?;
    let mut rec = Recorder::start("gen-data", &cfg);
    rec.seed("dataset", cfg.seed);
    let episodes = pipeline::generate_dataset(&cfg.sim, cfg.episodes_per_task, cfg.ratio, cfg.seed)?;
    let dir = DatasetDir::create(out)?;
    dir.write_episodes(&episodes)?;
    let m = dir.manifest()?;
    rec.output("episodes", m.episodes_hash());
    log::info!("wrote {} episodes to {}", m.count, out.display());
    println!(
        "{} episodes ({} per task) in {}",
        m.count,
        cfg.episodes_per_task,
        out.display()
    );
    rec.finish(out)?;
    Ok(())
}

pub fn calibrate(cfg: PipelineConfig, data: &Path) -> Result<(), CliError> {
    let dir = DatasetDir::open(data)?;
    let mut rec = Recorder::start("calibrate", &cfg);
    let episodes = dir.read_episodes()?;
    rec.input("episodes", dir.manifest()?.episodes_hash());
    let calib = reward::calibrate(&episodes, &cfg.calibration)?;
    let hash = dir.write_calibration(&calib)?;
    rec.output("calibration", hash.clone());
    println!(
        "f_min {:.4}  f_max {:.4}  p_max {:.4}  norm_scale {:.4}  ({hash})",
        calib.f_min, calib.f_max, calib.p_max, calib.norm_scale
    );
    rec.finish(data)?;
    Ok(())
}

fn demo_kind(g: &Generator) -> Option<DemoKind> {
    match g {
        Generator::Scripted(k) => Some(*k),
        _ => None,
    }
}

fn require_calibration(dir: &DatasetDir) -> Result<SafetyCalibration, CliError> {
    if dir.manifest()?.calibration_hash.is_none() {
        return Err(CliError::data(format!(
            "{} has no calibration; run `rwfm calibrate` first",
            dir.root().display()
        )));
    }
    Ok(dir.read_calibration()?)
}

pub fn annotate(cfg: PipelineConfig, data: &Path) -> Result<(), CliError> {
    let dir = DatasetDir::open(data)?;
    let calib = require_calibration(&dir)?;
    let mut rec = Recorder::start("annotate", &cfg);
    let m = dir.manifest()?;
    rec.input("episodes", m.episodes_hash());
    rec.input("calibration", calib.content_hash());
    let mut by_kind: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for entry in &m.episodes {
        let ep = dir.read_episode(&entry.id)?;
        let ann = reward::annotate_episode(&ep, &calib, &cfg.rewards)?;
        dir.attach_annotation(&entry.id, &ann)?;
        let kind = demo_kind(&entry.provenance.generator)
            .and_then(|k| serde_json::to_value(k).ok())
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| "other".into());
        let slot = by_kind.entry(kind).or_default();
        slot.0 += ann.r_episode;
        slot.1 += 1;
    }
    let m = dir.manifest()?;
    let mut h = Sha256::new();
    for (id, hash) in &m.annotations {
        h.update(id.as_bytes());
        h.update([0]);
        h.update(hash.as_bytes());
    }
    rec.output("annotations", hex::encode(h.finalize()));
    println!("{:<10} {:>6} {:>12}", "demo", "count", "mean reward");
    for (kind, (sum, n)) in &by_kind {
        println!("{kind:<10} {n:>6} {:>12.4}", sum / *n as f64);
    }
    rec.finish(data)?;
    Ok(())
}

/// Everything training needs from an annotated dataset.
struct Prepared {
    calib: SafetyCalibration,
    scaler: Standardizer,
    samples: Vec<TrainSample>,
    episodes_hash: String,
}

fn prepare(dir: &DatasetDir, cfg: &PipelineConfig) -> Result<Prepared, CliError> {
    let calib = require_calibration(dir)?;
    let m = dir.manifest()?;
    if let Some(e) = m.episodes.iter().find(|e| !m.annotations.contains_key(&e.id)) {
        return Err(CliError::data(format!(
            "episode {} has no annotation under the current calibration; run `rwfm annotate` first",
            e.id
        )));
    }
    let episodes = dir.read_episodes()?;
    let annotations = dir.read_annotations()?;
    let scaler = Standardizer::fit(&episodes)?;
    let samples = build_samples(&episodes, &annotations, &calib, &scaler, &cfg.samples)?;
    Ok(Prepared {
        calib,
        scaler,
        samples,
        episodes_hash: m.episodes_hash(),
    })
}

fn loss_table(losses: &[(u64, f64)]) -> String {
    let mut out = String::from("step\tloss\tsmoothed\n");
    let mut window_sum = 0.0;
    for (i, (step, l)) in losses.iter().enumerate() {
        window_sum += l;
        if i >= SMOOTHING_WINDOW {
            window_sum -= losses[i - SMOOTHING_WINDOW].1;
        }
        let n = (i + 1).min(SMOOTHING_WINDOW);
        let _ = writeln!(out, "{step}\t{l:.6e}\t{:.6e}", window_sum / n as f64);
    }
    out
}

pub fn train_teacher(
    mut cfg: PipelineConfig,
    data: &Path,
    mode: Mode,
    init: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let init = match (mode, init) {
        (Mode::SaRwfm, None) => return Err(CliError::config("--mode sa-rwfm needs --init <checkpoint>")),
        (Mode::PlainFm, Some(_)) => return Err(CliError::config("--init only applies to --mode sa-rwfm")),
        (_, i) => i.map(read_checkpoint_file).transpose()?,
    };
    if let Some(s) = seed {
        match mode {
            Mode::PlainFm => cfg.pretrain.train.seed = s,
            Mode::SaRwfm => cfg.finetune.train.seed = s,
        }
    }
    let dir = DatasetDir::open(data)?;
    let prep = prepare(&dir, &cfg)?;
    let dataset_hash = sample_set_hash(&prep.samples);
    let label = match mode {
        Mode::PlainFm => "plain-fm",
        Mode::SaRwfm => "sa-rwfm",
    };
    let mut rec = Recorder::start(&format!("train-teacher-{label}"), &cfg);
    rec.input("episodes", prep.episodes_hash.clone());
    rec.input("calibration", prep.calib.content_hash());
    rec.input("samples", dataset_hash.clone());
    create_dir(&out.join("checkpoints"))?;

    let mut losses = Vec::new();
    let on_step = |d: &BatchDiagnostics| {
        if d.step.is_multiple_of(500) {
            log::info!("step {} loss {:.5}", d.step, d.l_total);
        }
        losses.push((d.step, d.l_total));
    };
    let (policy, step) = match &init {
        None => {
            rec.seed("init", cfg.network.init_seed);
            rec.seed("train", cfg.pretrain.train.seed);
            let dims = cfg.network.teacher_dims(cfg.samples.horizon);
            let p = pipeline::train_plain(dims, cfg.network.init_seed, &prep.samples, &cfg.pretrain, on_step)?;
            (p, cfg.pretrain.train.steps)
        }
        Some(ck) => {
            if ck.meta.dataset_hash != dataset_hash || ck.meta.scaler != prep.scaler {
                return Err(CliError::data(format!(
                    "initial checkpoint was trained on samples {}, this dataset yields {dataset_hash}",
                    ck.meta.dataset_hash
                )));
            }
            rec.input("init", ck.policy.content_hash());
            rec.seed("train", cfg.finetune.train.seed);
            let p = pipeline::train_teacher(&ck.policy, &prep.samples, &cfg.finetune, &cfg.weighting, on_step)?;
            (p, cfg.finetune.train.steps)
        }
    };
    let ck = Checkpoint {
        meta: CheckpointMeta {
            label: label.to_string(),
            step,
            dims: *policy.dims(),
            scaler: prep.scaler,
            norm_scale: prep.calib.norm_scale,
            dataset_hash,
            teacher_hash: None,
        },
        policy,
    };
    let path = out.join("checkpoints").join(format!("{step}.ckpt"));
    write_checkpoint_file(&path, &ck)?;
    rec.output("checkpoint", sha256_hex(&read_file(&path)?));
    rec.output("loss.tsv", write_text(&out.join("loss.tsv"), &loss_table(&losses))?);
    let tail = losses.iter().rev().take(SMOOTHING_WINDOW).map(|l| l.1).sum::<f64>()
        / losses.len().clamp(1, SMOOTHING_WINDOW) as f64;
    println!(
        "{label}: {step} steps, final smoothed loss {tail:.5}, checkpoint {}",
        path.display()
    );
    rec.finish(out)?;
    Ok(())
}

pub fn distill(
    mut cfg: PipelineConfig,
    data: &Path,
    teacher: &Path,
    alpha: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    if let Some(a) = alpha {
        cfg.distill.alpha_blend = a;
    }
    if let Some(s) = seed {
        cfg.distill.train.seed = s;
    }
    cfg.distill.validate()?;
    let teacher = read_checkpoint_file(teacher)?;
    if !teacher.policy.uses_tactile() {
        return Err(CliError::config("--teacher must be a tactile-conditioned checkpoint"));
    }
    let dir = DatasetDir::open(data)?;
    let prep = prepare(&dir, &cfg)?;
    let dataset_hash = sample_set_hash(&prep.samples);
    let teacher_hash = teacher.policy.content_hash();
    let mut rec = Recorder::start("distill", &cfg);
    rec.input("teacher", teacher_hash.clone());
    rec.input("samples", dataset_hash.clone());
    rec.seed("targets", cfg.distill.root_seed);
    rec.seed("train", cfg.distill.train.seed);

    let targets = if dir.targets_path(&teacher_hash).exists() {
        let t = dir.read_targets(&teacher_hash, &dataset_hash)?;
        if t.n_steps != cfg.distill.n_steps || t.root_seed != cfg.distill.root_seed {
            return Err(CliError::data(format!(
                "cached targets used {} steps and seed {}, configuration asks for {} and {}",
                t.n_steps, t.root_seed, cfg.distill.n_steps, cfg.distill.root_seed
            )));
        }
        log::info!("reusing cached teacher targets");
        t
    } else {
        if teacher.meta.dataset_hash != dataset_hash {
            return Err(CliError::data(format!(
                "teacher was trained on samples {}, this dataset yields {dataset_hash}",
                teacher.meta.dataset_hash
            )));
        }
        let t = distill::generate_teacher_targets(
            &teacher.policy,
            &prep.samples,
            cfg.distill.n_steps,
            cfg.distill.root_seed,
        )?;
        dir.write_targets(&t)?;
        t
    };
    rec.input("targets", sha256_hex(&read_file(&dir.targets_path(&teacher_hash))?));

    let mut student = distill::init_student_from_teacher(&teacher.policy)?;
    let mut losses = Vec::new();
    distill::distill_train(&mut student, &targets, &prep.samples, &cfg.distill, |d| {
        losses.push((d.step, d.l_total))
    })?;
    let step = cfg.distill.train.steps;
    let ck = Checkpoint {
        meta: CheckpointMeta {
            label: "td-student".into(),
            step,
            dims: *student.dims(),
            scaler: prep.scaler,
            norm_scale: prep.calib.norm_scale,
            dataset_hash,
            teacher_hash: Some(teacher_hash),
        },
        policy: student,
    };
    create_dir(&out.join("checkpoints"))?;
    let path = out.join("checkpoints").join(format!("{step}.ckpt"));
    write_checkpoint_file(&path, &ck)?;
    rec.output("checkpoint", sha256_hex(&read_file(&path)?));
    rec.output("loss.tsv", write_text(&out.join("loss.tsv"), &loss_table(&losses))?);
    println!(
        "td-student: {step} steps at alpha {}, checkpoint {}",
        cfg.distill.alpha_blend,
        path.display()
    );
    rec.finish(out)?;
    Ok(())
}

const METRIC_HEADER: &str = "policy\tepisodes\tsuccess\tdamage\tdrop\tpeak_force\tmean_reward\ttactile_reads";

fn metric_row(label: &str, m: &EvalMetrics) -> String {
    let reward = m.mean_episode_reward.map_or("-".to_string(), |r| format!("{r:.4}"));
    format!(
        "{label}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{reward}\t{}",
        m.episodes, m.success_rate, m.damage_rate, m.drop_rate, m.mean_peak_force, m.tactile_reads
    )
}

pub fn eval(
    mut cfg: PipelineConfig,
    data: &Path,
    checkpoints: &[PathBuf],
    episodes: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    if let Some(n) = episodes {
        cfg.eval.episodes = n;
    }
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    if cfg.eval.episodes == 0 {
        return Err(CliError::config("--episodes must be at least 1"));
    }
    let dir = DatasetDir::open(data)?;
    let calib = require_calibration(&dir)?;
    let mut rec = Recorder::start("eval", &cfg);
    rec.seed("eval", cfg.eval.seed);
    rec.input("calibration", calib.content_hash());
    create_dir(out)?;

    let mut reports = Vec::new();
    let mut rollouts = String::from("policy\tepisode\ttask\tsuccess\tdamage\tdrop\n");
    for path in checkpoints {
        let ck = read_checkpoint_file(path)?;
        rec.input(&format!("checkpoint/{}", ck.meta.label), sha256_hex(&read_file(path)?));
        let ctl = FlowController::new(
            &ck.policy,
            &ck.meta.scaler,
            ck.meta.norm_scale,
            cfg.eval.n_steps,
            ck.meta.label.clone(),
        );
        let (mut report, eps) = sim::evaluate_policy(
            &ctl,
            &TaskKind::ALL,
            &cfg.sim,
            cfg.eval.episodes,
            cfg.eval.seed,
            Some((&calib, &cfg.rewards)),
        )?;
        report.overall.tactile_reads = ctl.tactile_reads();
        for e in &eps {
            let o = e.outcome;
            let _ = writeln!(
                rollouts,
                "{}\t{}\t{}\t{}\t{}\t{}",
                ck.meta.label, e.id, e.task, o.success as u8, o.damage as u8, o.drop as u8
            );
        }
        log::info!(
            "{}: success {:.3} damage {:.3}",
            report.label,
            report.overall.success_rate,
            report.overall.damage_rate
        );
        reports.push(report);
    }

    let metrics = serde_json::to_string_pretty(&reports).expect("reports serialize");
    rec.output("metrics.json", write_text(&out.join("metrics.json"), &metrics)?);
    let mut overall = format!("{METRIC_HEADER}\n");
    for r in &reports {
        let _ = writeln!(overall, "{}", metric_row(&r.label, &r.overall));
    }
    rec.output("overall.tsv", write_text(&out.join("overall.tsv"), &overall)?);
    for task in TaskKind::ALL {
        let mut t = format!("{METRIC_HEADER}\n");
        for r in &reports {
            if let Some((_, m)) = r.per_task.iter().find(|(k, _)| *k == task) {
                let _ = writeln!(t, "{}", metric_row(&r.label, m));
            }
        }
        let name = format!("task-{task}.tsv");
        rec.output(&name, write_text(&out.join(&name), &t)?);
    }
    rec.output("episodes.tsv", write_text(&out.join("episodes.tsv"), &rollouts)?);
    print!("{overall}");
    rec.finish(out)?;
    Ok(())
}

fn render_report(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let row = |s: &mut String, label: &str, m: &EvalMetrics| {
        let _ = writeln!(
            s,
            "| {label} | {} | {:.3} | {:.3} | {:.3} | {:.3} |",
            m.episodes, m.success_rate, m.damage_rate, m.drop_rate, m.mean_peak_force
        );
    };
    let header = "| policy | episodes | success | damage | drop | peak force |\n|---|---|---|---|---|---|\n";
    s.push_str("## Overall\n\n");
    s.push_str(header);
    for r in reports {
        row(&mut s, &r.label, &r.overall);
    }
    for task in TaskKind::ALL {
        let _ = write!(s, "\n## {task}\n\n{header}");
        for r in reports {
            if let Some((_, m)) = r.per_task.iter().find(|(k, _)| *k == task) {
                row(&mut s, &r.label, m);
            }
        }
    }
    if let Some(base) = reports.first() {
        let b = &base.overall;
        let _ = write!(
            s,
            "\n## Against {}\n\n| policy | damage reduction | success change | tactile at inference |\n|---|---|---|---|\n",
            base.label
        );
        for r in &reports[1..] {
            let m = &r.overall;
            let reduction = if b.damage_rate > 0.0 {
                format!("{:.1}%", 100.0 * (b.damage_rate - m.damage_rate) / b.damage_rate)
            } else {
                "-".into()
            };
            let _ = writeln!(
                s,
                "| {} | {reduction} | {:+.1} pts | {} |",
                r.label,
                100.0 * (m.success_rate - b.success_rate),
                if m.tactile_reads > 0 { "yes" } else { "no" }
            );
        }
    }
    s
}

pub fn report(run: &Path) -> Result<(), CliError> {
    let path = run.join("metrics.json");
    let raw = read_file(&path)?;
    let reports: Vec<EvalReport> =
        serde_json::from_slice(&raw).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if reports.is_empty() {
        return Err(CliError::data(format!("{} holds no evaluations", path.display())));
    }
    let text = render_report(&reports);
    write_atomic(&run.join("report.md"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
