//! Deterministic single-arm grasp environment.
//!
//! The arm is a point hand with a parallel gripper. Actions have the layout
//! `[aperture, x, y, z, 0, 0]`: a gripper opening and an absolute hand
//! target, padded with two inert DoFs. A low-level controller tracks the
//! commands through a first-order filter and moves the hand toward the
//! tracked target under a speed limit. Proprio is `[aperture, x, y, z,
//! clock, 0]`. Squeezing an object of width `w` to aperture `a` produces a
//! pad force `k * max(0, w - a)`, rendered on each pad as a Gaussian blob
//! whose peak equals the force.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Standardizer;
use crate::episode::{DemoKind, EpisodeRecord, Generator, Outcome, Provenance, StepRecord, TaskKind};
use crate::error::{Error, Result};
use crate::policy::{ActionChunk, FlowPolicy, Observation};
use crate::reward::{self, RewardWeights, SafetyCalibration};
use crate::seed;
use crate::tactile::{self, RawTactileFrame, GRID_COLS, GRID_ROWS};

pub const ACTION_DIM: usize = 6;
pub const COND_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    /// Grip force needed to lift without dropping (N).
    pub f_hold: f64,
    /// Per-taxel reading above which the object is damaged (N).
    pub f_damage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub jar: TaskProfile,
    pub waffles: TaskProfile,
    pub egg: TaskProfile,
    pub episode_len: usize,
    /// Policy chunk length and re-planning period.
    pub chunk_len: usize,
    pub stiffness: f64,
    /// Lowest commandable aperture; below zero the fingers press into the object.
    pub aperture_min: f64,
    pub width_range: [f64; 2],
    pub object_x: [f64; 2],
    pub object_y: [f64; 2],
    pub goal_x: [f64; 2],
    pub goal_y: [f64; 2],
    pub home: [f64; 3],
    pub max_speed: f64,
    pub grasp_xy_tol: f64,
    pub grasp_z_tol: f64,
    pub goal_tol: f64,
    pub lift_height: f64,
    pub blob_sigma: f64,
    /// Relative std of multiplicative taxel noise.
    pub noise: f64,
    /// Readings below this are reported as zero (N).
    pub taxel_floor: f64,
    pub taxel_max: f64,
    /// Lifted grip demand grows as `f_hold * (1 + accel_gain * |accel|)`.
    pub accel_gain: f64,
    /// First-order tracking gain of the low-level controller: each step the
    /// tracked command moves this fraction of the way to the new command.
    pub command_gain: f64,
    pub slip_force_factor: f64,
    pub slip_cop_rows: f64,
    /// Fraction of a demonstration kind's force band that target forces are
    /// drawn from, centred in the band.
    pub force_spread: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            jar: TaskProfile {
                f_hold: 2.0,
                f_damage: 8.0,
            },
            waffles: TaskProfile {
                f_hold: 1.5,
                f_damage: 6.5,
            },
            egg: TaskProfile {
                f_hold: 1.5,
                f_damage: 5.5,
            },
            episode_len: 100,
            chunk_len: 50,
            stiffness: 6.0,
            aperture_min: -1.0,
            width_range: [0.5, 0.9],
            object_x: [-0.6, -0.2],
            object_y: [-0.4, 0.4],
            goal_x: [0.2, 0.6],
            goal_y: [-0.4, 0.4],
            home: [0.0, 0.0, 0.5],
            max_speed: 0.15,
            grasp_xy_tol: 0.08,
            grasp_z_tol: 0.05,
            goal_tol: 0.1,
            lift_height: 0.1,
            blob_sigma: 1.7,
            noise: 0.03,
            taxel_floor: 1.0,
            taxel_max: 9.0,
            accel_gain: 4.0,
            command_gain: 0.4,
            slip_force_factor: 0.85,
            slip_cop_rows: 1.5,
            force_spread: 0.2,
        }
    }
}

impl SimConfig {
    pub fn profile(&self, task: TaskKind) -> TaskProfile {
        match task {
            TaskKind::Jar => self.jar,
            TaskKind::Waffles => self.waffles,
            TaskKind::Egg => self.egg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for task in TaskKind::ALL {
            let p = self.profile(task);
            if !(p.f_hold >= self.taxel_floor && p.f_hold < p.f_damage && p.f_damage <= self.taxel_max) {
                return Err(Error::InvalidArgument(format!(
                    "{task}: need {} <= f_hold < f_damage <= {}",
                    self.taxel_floor, self.taxel_max
                )));
            }
        }
        if self.episode_len < 3 || self.chunk_len == 0 || self.stiffness <= 0.0 || self.max_speed <= 0.0 {
            return Err(Error::InvalidArgument(
                "degenerate simulator timing or stiffness".into(),
            ));
        }
        if self.width_range[0] <= 0.0 || self.width_range[1] > 1.0 || self.width_range[0] > self.width_range[1] {
            return Err(Error::InvalidArgument("object widths must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Static layout of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task: TaskKind,
    pub width: f64,
    pub object: [f64; 2],
    pub goal: [f64; 2],
}

impl Scene {
    pub fn sample(task: TaskKind, cfg: &SimConfig, rng: &mut impl Rng) -> Scene {
        let mut u = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        Scene {
            task,
            width: u(cfg.width_range),
            object: [u(cfg.object_x), u(cfg.object_y)],
            goal: [u(cfg.goal_x), u(cfg.goal_y)],
        }
    }

    pub fn cond(&self) -> Vec<f64> {
        let mut c = vec![0.0; COND_DIM];
        c[self.task.index()] = 1.0;
        c[3] = self.width;
        c[4] = self.object[0];
        c[5] = self.object[1];
        c[6] = self.goal[0];
        c[7] = self.goal[1];
        c
    }

    pub fn from_cond(cond: &[f64]) -> Result<Scene> {
        if cond.len() != COND_DIM {
            return Err(Error::Dimension(format!(
                "cond has {} entries, expected {COND_DIM}",
                cond.len()
            )));
        }
        let task = (0..3)
            .max_by(|&a, &b| cond[a].total_cmp(&cond[b]))
            .and_then(TaskKind::from_index)
            .expect("three task slots");
        Ok(Scene {
            task,
            width: cond[3],
            object: [cond[4], cond[5]],
            goal: [cond[6], cond[7]],
        })
    }
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub t: usize,
    pub hand: [f64; 3],
    pub velocity: [f64; 3],
    pub aperture: f64,
    /// Tracked `[aperture, x, y, z]` command.
    pub command: [f64; 4],
    pub object: [f64; 3],
    pub attached: bool,
    /// Hand minus object position at the moment of grasp.
    pub grasp_offset: [f64; 3],
    /// Cleared by a drop until the gripper opens again.
    pub can_grasp: bool,
    pub force_factor: f64,
    pub cop_drift: f64,
    rng: ChaCha8Rng,
}

impl SimState {
    pub fn new(scene: &Scene, cfg: &SimConfig, noise_seed: u64) -> Self {
        SimState {
            t: 0,
            hand: cfg.home,
            velocity: [0.0; 3],
            aperture: 1.0,
            command: [1.0, cfg.home[0], cfg.home[1], cfg.home[2]],
            object: [scene.object[0], scene.object[1], 0.0],
            attached: false,
            grasp_offset: [0.0; 3],
            can_grasp: true,
            force_factor: 1.0,
            cop_drift: 0.0,
            rng: ChaCha8Rng::seed_from_u64(noise_seed),
        }
    }

    /// `[aperture, x, y, z, clock, 0]` with `clock = t / episode_len`.
    pub fn proprio(&self, cfg: &SimConfig) -> Vec<f64> {
        let clock = self.t as f64 / cfg.episode_len as f64;
        vec![self.aperture, self.hand[0], self.hand[1], self.hand[2], clock, 0.0]
    }

    pub fn gripper_closed(&self, scene: &Scene) -> bool {
        self.aperture < scene.width
    }

    /// Noise-free pad force (N).
    pub fn grip_force(&self, scene: &Scene, cfg: &SimConfig) -> f64 {
        if !self.attached {
            return 0.0;
        }
        cfg.stiffness * (scene.width - self.aperture).max(0.0) * self.force_factor
    }

    fn near_object(&self, cfg: &SimConfig) -> bool {
        let dx = self.hand[0] - self.object[0];
        let dy = self.hand[1] - self.object[1];
        (dx * dx + dy * dy).sqrt() < cfg.grasp_xy_tol && (self.hand[2] - self.object[2]).abs() < cfg.grasp_z_tol
    }

    /// Pad readings for the current state.
    pub fn render(&mut self, scene: &Scene, cfg: &SimConfig) -> RawTactileFrame {
        let n = GRID_ROWS * GRID_COLS;
        let closed = self.gripper_closed(scene);
        let force = self.grip_force(scene, cfg);
        if force <= 0.0 {
            return RawTactileFrame::zeros(n, closed);
        }
        let scale = 0.5 * (GRID_ROWS.min(GRID_COLS) as f64 - 1.0) / cfg.grasp_xy_tol;
        let mid_r = (GRID_ROWS as f64 - 1.0) / 2.0;
        let mid_c = (GRID_COLS as f64 - 1.0) / 2.0;
        let row = mid_r + scale * self.grasp_offset[1] + self.cop_drift;
        let col = mid_c + scale * self.grasp_offset[0];
        let left = self.blob(row, col, force, cfg);
        let right = self.blob(row, GRID_COLS as f64 - 1.0 - col, force, cfg);
        RawTactileFrame {
            left,
            right,
            gripper_closed: closed,
        }
    }

    fn blob(&mut self, row: f64, col: f64, force: f64, cfg: &SimConfig) -> Vec<f32> {
        let s2 = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
        let mut g = Vec::with_capacity(GRID_ROWS * GRID_COLS);
        for i in 0..GRID_ROWS {
            for j in 0..GRID_COLS {
                let d = (i as f64 - row).powi(2) + (j as f64 - col).powi(2);
                g.push((-d / s2).exp());
            }
        }
        let peak = g.iter().copied().fold(0.0, f64::max);
        g.into_iter()
            .map(|v| {
                let eta: f64 = self.rng.sample(StandardNormal);
                let x = force * v / peak * (1.0 + cfg.noise * eta);
                if x < cfg.taxel_floor {
                    0.0
                } else {
                    x.min(cfg.taxel_max) as f32
                }
            })
            .collect()
    }

    /// Apply one action. Non-finite actions are rejected.
    pub fn step(&mut self, action: &[f64], scene: &Scene, cfg: &SimConfig) -> Result<()> {
        if action.len() != ACTION_DIM || !action.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bad action at t = {}: {action:?}",
                self.t
            )));
        }
        let profile = cfg.profile(scene.task);
        let raw = [
            action[0].clamp(cfg.aperture_min, 1.0),
            action[1],
            action[2],
            action[3].max(0.0),
        ];
        for (c, r) in self.command.iter_mut().zip(raw) {
            *c += cfg.command_gain * (r - *c);
        }
        self.aperture = self.command[0];
        let target = [self.command[1], self.command[2], self.command[3]];
        let mut delta = [0.0; 3];
        for k in 0..3 {
            delta[k] = target[k] - self.hand[k];
        }
        let norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm > cfg.max_speed {
            for d in &mut delta {
                *d *= cfg.max_speed / norm;
            }
        }
        let mut accel = 0.0;
        for k in 0..3 {
            self.hand[k] += delta[k];
            accel += (delta[k] - self.velocity[k]).powi(2);
        }
        let accel = accel.sqrt();
        self.velocity = delta;

        let squeeze = (scene.width - self.aperture).max(0.0);
        if self.attached {
            if squeeze == 0.0 {
                self.release();
            } else {
                for k in 0..3 {
                    self.object[k] = self.hand[k] - self.grasp_offset[k];
                }
                self.object[2] = self.object[2].max(0.0);
                if self.object[2] > cfg.lift_height {
                    let demand = profile.f_hold * (1.0 + cfg.accel_gain * accel);
                    if self.grip_force(scene, cfg) < demand {
                        self.force_factor *= cfg.slip_force_factor;
                        self.cop_drift += cfg.slip_cop_rows;
                    }
                    if self.grip_force(scene, cfg) < profile.f_hold {
                        self.release();
                        self.can_grasp = false;
                    }
                }
            }
        } else {
            if squeeze == 0.0 {
                self.can_grasp = true;
            } else if self.can_grasp && self.near_object(cfg) {
                self.attached = true;
                for k in 0..3 {
                    self.grasp_offset[k] = self.hand[k] - self.object[k];
                }
                self.force_factor = 1.0;
                self.cop_drift = 0.0;
            }
        }
        self.t += 1;
        Ok(())
    }

    fn release(&mut self) {
        self.attached = false;
        self.object[2] = 0.0;
        self.force_factor = 1.0;
        self.cop_drift = 0.0;
    }
}

/// Outcome flags recomputed from a stored trajectory.
pub fn outcome_from_trajectory(ep: &EpisodeRecord, cfg: &SimConfig) -> Outcome {
    let profile = cfg.profile(ep.task);
    let damage = ep.steps.iter().any(|s| s.tactile.max_taxel() as f64 > profile.f_damage);
    let drop = ep
        .steps
        .windows(2)
        .any(|w| w[0].attached && !w[1].attached && w[1].tactile.gripper_closed);
    let success = match (ep.steps.last(), Scene::from_cond(&ep.cond)) {
        (Some(last), Ok(scene)) => {
            let dx = last.object_pos[0] - scene.goal[0];
            let dy = last.object_pos[1] - scene.goal[1];
            !drop && !damage && !last.attached && last.object_pos[2] == 0.0 && (dx * dx + dy * dy).sqrt() < cfg.goal_tol
        }
        _ => false,
    };
    Outcome { success, drop, damage }
}

/// What a controller sees at a re-planning point.
#[derive(Clone, Copy, Debug)]
pub struct PlanInput<'a> {
    pub t: usize,
    pub cond: &'a [f64],
    pub proprio: &'a [f64],
    pub tactile: &'a RawTactileFrame,
}

/// A controller that emits a chunk of future actions on demand.
pub trait ChunkPolicy {
    fn plan(&self, input: &PlanInput<'_>, seed: u64) -> Result<ActionChunk>;

    fn label(&self) -> String;
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn lerp3(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    let s = smoothstep(s);
    [
        a[0] + (b[0] - a[0]) * s,
        a[1] + (b[1] - a[1]) * s,
        a[2] + (b[2] - a[2]) * s,
    ]
}

/// Waypoint demonstrator that squeezes to a fixed target force.
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedController {
    pub kind: DemoKind,
    pub cfg: SimConfig,
    /// Target pad force; `None` draws one per episode from the kind's band.
    pub target_force: Option<f64>,
}

impl ScriptedController {
    pub fn new(kind: DemoKind, cfg: &SimConfig) -> Self {
        ScriptedController {
            kind,
            cfg: cfg.clone(),
            target_force: None,
        }
    }

    /// Force band of a demonstration kind for a task profile.
    pub fn force_band(kind: DemoKind, p: TaskProfile, taxel_max: f64) -> [f64; 2] {
        match kind {
            DemoKind::Clean => [p.f_hold + 0.8, p.f_damage - 0.8],
            DemoKind::OverForce => [p.f_damage + 0.5, (p.f_damage + 2.0).min(taxel_max)],
            DemoKind::WeakGrip => [0.5 * p.f_hold, 0.85 * p.f_hold],
        }
    }

    fn force_for(&self, scene: &Scene, seed: u64) -> f64 {
        self.target_force.unwrap_or_else(|| {
            let band = Self::force_band(self.kind, self.cfg.profile(scene.task), self.cfg.taxel_max);
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "demo-force", 0));
            let mid = 0.5 * (band[0] + band[1]);
            mid + self.cfg.force_spread * (band[1] - band[0]) * (rng.random::<f64>() - 0.5)
        })
    }

    /// The action commanded at time `t` of the script.
    pub fn action(&self, t: usize, scene: &Scene, force: f64) -> Vec<f64> {
        let home = self.cfg.home;
        let above_obj = [scene.object[0], scene.object[1], home[2]];
        let at_obj = [scene.object[0], scene.object[1], 0.0];
        let lifted = [scene.object[0], scene.object[1], 0.4];
        let carried = [scene.goal[0], scene.goal[1], 0.4];
        let at_goal = [scene.goal[0], scene.goal[1], 0.0];
        let above_goal = [scene.goal[0], scene.goal[1], home[2]];
        let closed = (scene.width - force / self.cfg.stiffness).max(self.cfg.aperture_min);
        let tf = t as f64;
        let seg = |a: usize, b: usize| (tf - a as f64 + 1.0) / (b - a) as f64;
        let (aperture, pos) = match t {
            0..10 => (1.0, lerp3(home, above_obj, seg(0, 10))),
            10..15 => (1.0, lerp3(above_obj, at_obj, seg(10, 15))),
            15..25 => (1.0 + (closed - 1.0) * seg(15, 25), at_obj),
            25..35 => (closed, lerp3(at_obj, lifted, seg(25, 35))),
            35..65 => (closed, lerp3(lifted, carried, seg(35, 65))),
            65..75 => (closed, lerp3(carried, at_goal, seg(65, 75))),
            75..80 => (closed + (1.0 - closed) * seg(75, 80), at_goal),
            80..90 => (1.0, lerp3(at_goal, above_goal, seg(80, 90))),
            _ => (1.0, above_goal),
        };
        vec![aperture, pos[0], pos[1], pos[2], 0.0, 0.0]
    }
}

impl ChunkPolicy for ScriptedController {
    fn plan(&self, input: &PlanInput<'_>, seed: u64) -> Result<ActionChunk> {
        let scene = Scene::from_cond(input.cond)?;
        // The target force is an episode property, not a per-chunk draw.
        let force = self.force_for(&scene, seed);
        let h = self.cfg.chunk_len;
        let mut data = Vec::with_capacity(h * ACTION_DIM);
        for k in 0..h {
            data.extend(self.action(input.t + k, &scene, force));
        }
        ActionChunk::new(h, ACTION_DIM, data)
    }

    fn label(&self) -> String {
        format!("scripted:{}", self.kind.name())
    }
}

/// Wraps a flow policy for closed-loop control.
///
/// Every plan hands the policy an observation carrying the normalized pad
/// readings; the tactile reads it actually performs are tallied.
pub struct FlowController<'a> {
    pub policy: &'a FlowPolicy,
    pub scaler: &'a Standardizer,
    pub norm_scale: f64,
    pub n_steps: usize,
    pub label: String,
    reads: AtomicUsize,
}

impl<'a> FlowController<'a> {
    pub fn new(
        policy: &'a FlowPolicy,
        scaler: &'a Standardizer,
        norm_scale: f64,
        n_steps: usize,
        label: impl Into<String>,
    ) -> Self {
        FlowController {
            policy,
            scaler,
            norm_scale,
            n_steps,
            label: label.into(),
            reads: AtomicUsize::new(0),
        }
    }

    pub fn tactile_reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

/// Flattened normalized `[left; right]` pad pair.
pub fn tactile_features(frame: &RawTactileFrame, norm_scale: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(frame.left.len() * 2);
    for side in tactile::Side::BOTH {
        let g = tactile::normalize_grid(frame.side(side), GRID_ROWS, GRID_COLS, norm_scale)
            .ok_or_else(|| Error::Dimension("pad reading is not a finite 10x10 grid".into()))?;
        out.extend_from_slice(g.values());
    }
    Ok(out)
}

impl ChunkPolicy for FlowController<'_> {
    fn plan(&self, input: &PlanInput<'_>, seed: u64) -> Result<ActionChunk> {
        let obs = Observation::new(
            self.scaler.cond(input.cond),
            self.scaler.proprio(input.proprio),
            Some(tactile_features(input.tactile, self.norm_scale)?),
        );
        let chunk = self.policy.sample_chunk(&obs, self.n_steps, seed);
        self.reads.fetch_add(obs.tactile_reads(), Ordering::Relaxed);
        Ok(self.scaler.chunk_to_raw(&chunk?))
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

/// Run one closed-loop episode, re-planning every `chunk_len` steps.
pub fn rollout(
    scene: &Scene,
    controller: &dyn ChunkPolicy,
    cfg: &SimConfig,
    seed: u64,
    id: impl Into<String>,
    generator: Generator,
) -> Result<EpisodeRecord> {
    let mut state = SimState::new(scene, cfg, seed::derive(seed, "sensor", 0));
    let cond = scene.cond();
    let mut steps = Vec::with_capacity(cfg.episode_len);
    let mut chunk: Option<ActionChunk> = None;
    let mut chunk_start = 0;
    for t in 0..cfg.episode_len {
        let proprio = state.proprio(cfg);
        let tactile = state.render(scene, cfg);
        let offset = t - chunk_start;
        if chunk
            .as_ref()
            .is_none_or(|c| offset >= c.horizon || t % cfg.chunk_len == 0)
        {
            let input = PlanInput {
                t,
                cond: &cond,
                proprio: &proprio,
                tactile: &tactile,
            };
            let c = controller.plan(&input, seed::derive(seed, "plan", t as u64))?;
            if c.action_dim != ACTION_DIM {
                return Err(Error::Dimension(format!(
                    "{} emitted {}-DoF actions, simulator expects {ACTION_DIM}",
                    controller.label(),
                    c.action_dim
                )));
            }
            chunk = Some(c);
            chunk_start = t;
        }
        let action = chunk.as_ref().unwrap().row(t - chunk_start).to_vec();
        let record = StepRecord {
            proprio,
            tactile,
            action: action.clone(),
            object_pos: state.object,
            attached: state.attached,
        };
        state.step(&action, scene, cfg)?;
        steps.push(record);
    }
    let mut ep = EpisodeRecord {
        id: id.into(),
        task: scene.task,
        group: scene.task.name().to_string(),
        cond,
        grid_rows: GRID_ROWS,
        grid_cols: GRID_COLS,
        steps,
        outcome: Outcome::default(),
        provenance: Provenance { generator, seed },
    };
    ep.outcome = outcome_from_trajectory(&ep, cfg);
    Ok(ep)
}

pub fn scene_for(task: TaskKind, cfg: &SimConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "scene", 0));
    Scene::sample(task, cfg, &mut rng)
}

pub fn scripted_demo(kind: DemoKind, task: TaskKind, cfg: &SimConfig, seed: u64) -> Result<EpisodeRecord> {
    let scene = scene_for(task, cfg, seed);
    let ctl = ScriptedController::new(kind, cfg);
    let id = format!("{}-{}-{seed:016x}", task.name(), kind.name());
    rollout(&scene, &ctl, cfg, seed, id, Generator::Scripted(kind))
}

/// Demo kinds for `n` episodes at the given integer ratio, in a seeded order.
pub fn quota_kinds(n: usize, ratio: [usize; 3], seed: u64) -> Vec<DemoKind> {
    let total: usize = ratio.iter().sum();
    let mut counts = [0usize; 3];
    if total > 0 {
        for (c, r) in counts.iter_mut().zip(ratio) {
            *c = n * r / total;
        }
        let mut k = 0;
        while counts.iter().sum::<usize>() < n {
            if ratio[k % 3] > 0 {
                counts[k % 3] += 1;
            }
            k += 1;
        }
    }
    let mut kinds: Vec<DemoKind> = DemoKind::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&kind, c)| std::iter::repeat_n(kind, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "quota", 0));
    for i in (1..kinds.len()).rev() {
        kinds.swap(i, rng.random_range(0..=i));
    }
    kinds
}

/// Scripted dataset for one task with a clean/over-force/weak-grip ratio.
pub fn generate_task_demos(
    task: TaskKind,
    n: usize,
    ratio: [usize; 3],
    cfg: &SimConfig,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    let task_seed = seed::derive(seed, task.name(), 0);
    quota_kinds(n, ratio, task_seed)
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut ep = scripted_demo(kind, task, cfg, seed::derive(task_seed, "episode", i as u64))?;
            ep.id = format!("{}-{i:05}", task.name());
            Ok(ep)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub damage_rate: f64,
    pub drop_rate: f64,
    pub mean_peak_force: f64,
    /// Present when a calibration was supplied.
    pub mean_episode_reward: Option<f64>,
    pub tactile_reads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub overall: EvalMetrics,
    pub per_task: Vec<(TaskKind, EvalMetrics)>,
}

fn summarize(eps: &[&EpisodeRecord], rewards: Option<&[f64]>) -> EvalMetrics {
    let n = eps.len();
    let frac = |f: &dyn Fn(&Outcome) -> bool| {
        if n == 0 {
            0.0
        } else {
            eps.iter().filter(|e| f(&e.outcome)).count() as f64 / n as f64
        }
    };
    EvalMetrics {
        episodes: n,
        success_rate: frac(&|o| o.success),
        damage_rate: frac(&|o| o.damage),
        drop_rate: frac(&|o| o.drop),
        mean_peak_force: if n == 0 {
            0.0
        } else {
            eps.iter().map(|e| e.peak_force()).sum::<f64>() / n as f64
        },
        mean_episode_reward: rewards.map(|r| {
            if r.is_empty() {
                0.0
            } else {
                r.iter().sum::<f64>() / r.len() as f64
            }
        }),
        tactile_reads: 0,
    }
}

/// Closed-loop evaluation over `n_episodes` seeded scenes, cycling through `tasks`.
pub fn evaluate_policy(
    controller: &dyn ChunkPolicy,
    tasks: &[TaskKind],
    cfg: &SimConfig,
    n_episodes: usize,
    seed: u64,
    scoring: Option<(&SafetyCalibration, &RewardWeights)>,
) -> Result<(EvalReport, Vec<EpisodeRecord>)> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no evaluation tasks".into()));
    }
    let mut eps = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let task = tasks[i % tasks.len()];
        let ep_seed = seed::derive(seed, "eval", i as u64);
        let scene = scene_for(task, cfg, ep_seed);
        let id = format!("eval-{}-{i:04}", task.name());
        eps.push(rollout(
            &scene,
            controller,
            cfg,
            ep_seed,
            id,
            Generator::Policy(controller.label()),
        )?);
    }
    let rewards = match scoring {
        Some((calib, w)) => Some(
            eps.iter()
                .map(|e| reward::annotate_episode(e, calib, w).map(|a| a.r_episode))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let all: Vec<&EpisodeRecord> = eps.iter().collect();
    let overall = summarize(&all, rewards.as_deref());
    let mut per_task = Vec::new();
    for &task in tasks {
        let idx: Vec<usize> = (0..eps.len()).filter(|&i| eps[i].task == task).collect();
        if idx.is_empty() || per_task.iter().any(|(t, _)| *t == task) {
            continue;
        }
        let sub: Vec<&EpisodeRecord> = idx.iter().map(|&i| &eps[i]).collect();
        let r: Option<Vec<f64>> = rewards.as_ref().map(|r| idx.iter().map(|&i| r[i]).collect());
        per_task.push((task, summarize(&sub, r.as_deref())));
    }
    Ok((
        EvalReport {
            label: controller.label(),
            overall,
            per_task,
        },
        eps,
    ))
}


#[cfg(test)]
mod reward_sign_tests {
    use super::*;
    use crate::reward::{annotate_episode, calibrate, CalibrationConfig, RewardWeights};

    #[test]
    fn demo_rewards_have_expected_sign() {
        let c = SimConfig::default();
        let mut eps = Vec::new();
        for task in TaskKind::ALL {
            eps.extend(generate_task_demos(task, 30, [7, 2, 1], &c, 17).unwrap());
        }
        let calib = calibrate(&eps, &CalibrationConfig::default()).unwrap();
        let w = RewardWeights::default();
        for ep in &eps {
            let a = annotate_episode(ep, &calib, &w).unwrap();
            let kind = ep.provenance.demo_kind().unwrap();
            eprintln!(
                "{} {:?} r_step {:.3} risk {:.3} R {:.3}",
                ep.id, kind, a.r_step, a.risk, a.r_episode
            );
            match kind {
                DemoKind::Clean => assert!(a.r_episode > 0.0, "{}: {}", ep.id, a.r_episode),
                _ => assert!(a.r_episode < 0.0, "{}: {}", ep.id, a.r_episode),
            }
        }
        eprintln!("{calib:?}");
    }
}
