//! Dataset calibration of safety thresholds and per-episode reward annotation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::{EpisodeRecord, Outcome};
use crate::error::{Error, Result};
use crate::stats;
use crate::tactile::{
    contact_stats, frame_stats, holding_state, normalize_frames, ContactStats, HoldingSlipState, Side, SlipParams,
    TactileFrame, DEFAULT_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantileLevels {
    pub norm_scale: f64,
    pub activity: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub p_max: f64,
    pub c_max: f64,
    pub delta: f64,
}

impl Default for QuantileLevels {
    fn default() -> Self {
        QuantileLevels {
            norm_scale: 0.99,
            activity: 0.99,
            f_min: 0.10,
            f_max: 0.90,
            p_max: 0.95,
            c_max: 0.95,
            delta: 0.90,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub levels: QuantileLevels,
    /// A pad is active when its activity quantile (normalized) exceeds this.
    pub activity_threshold: f64,
    pub slip: SlipParams,
    pub eps: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            levels: QuantileLevels::default(),
            activity_threshold: 0.05,
            slip: SlipParams::default(),
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyCalibration {
    pub f_min: f64,
    pub f_max: f64,
    pub p_max: f64,
    pub c_max: f64,
    /// Inter-pad asymmetry tolerance; zero when fewer than two pads are active.
    pub delta: f64,
    pub active_sides: Vec<Side>,
    pub norm_scale: f64,
    pub slip: SlipParams,
    pub eps: f64,
    pub levels: QuantileLevels,
    pub activity_threshold: f64,
    pub quantile_method: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl SafetyCalibration {
    pub fn is_bilateral(&self) -> bool {
        self.active_sides.contains(&Side::Left) && self.active_sides.contains(&Side::Right)
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("calibration serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = [
            ("f_max", self.f_max),
            ("p_max", self.p_max),
            ("c_max", self.c_max),
            ("norm_scale", self.norm_scale),
        ];
        for (name, v) in finite_pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Calibration(format!("{name} = {v} is not positive")));
            }
        }
        if !(self.f_min.is_finite() && self.f_min >= 0.0 && self.f_min < self.f_max) {
            return Err(Error::Calibration(format!(
                "degenerate force band: f_min = {} must be below f_max = {}",
                self.f_min, self.f_max
            )));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::Calibration(format!("delta = {} invalid", self.delta)));
        }
        if self.active_sides.is_empty() {
            return Err(Error::Calibration("no active tactile side".into()));
        }
        Ok(())
    }
}

/// Penalty coefficients of the per-step reward and the episode reward constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub lambda_high: f64,
    pub lambda_low: f64,
    pub lambda_peak: f64,
    pub lambda_conc: f64,
    pub lambda_asym: f64,
    pub lambda_slip: f64,
    pub r_step_scale: f64,
    pub r_succ: f64,
    pub r_drop: f64,
    pub r_damage: f64,
    pub r_risk: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            lambda_high: 1.0,
            lambda_low: 0.5,
            lambda_peak: 1.0,
            lambda_conc: 0.5,
            lambda_asym: 0.5,
            lambda_slip: 1.0,
            r_step_scale: 1.0,
            r_succ: 1.0,
            r_drop: 1.0,
            r_damage: 2.0,
            r_risk: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_high,
            self.lambda_low,
            self.lambda_peak,
            self.lambda_conc,
            self.lambda_asym,
            self.lambda_slip,
            self.r_step_scale,
            self.r_succ,
            self.r_drop,
            self.r_damage,
            self.r_risk,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "reward weights must be finite and nonnegative".into(),
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardAnnotation {
    pub episode_id: String,
    pub calibration_hash: String,
    pub rewards: Vec<f64>,
    pub holding: Vec<bool>,
    pub slips: Vec<bool>,
    pub exceedance: Vec<f64>,
    pub risk: f64,
    pub r_step: f64,
    pub r_episode: f64,
}

impl RewardAnnotation {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Per-step safety reward: a pure penalty, so always `<= 0`.
///
/// `stats` holds one entry per active pad.
pub fn step_reward(stats: &[ContactStats], hs: &HoldingSlipState, calib: &SafetyCalibration, w: &RewardWeights) -> f64 {
    let mut penalty = 0.0;
    for s in stats {
        let over = relu(s.mean_force - calib.f_max);
        penalty += w.lambda_high * over * over;
        if hs.holding {
            let under = relu(calib.f_min - s.mean_force);
            penalty += w.lambda_low * under * under;
        }
        let peak = relu(s.peak - calib.p_max);
        penalty += w.lambda_peak * peak * peak;
        let conc = relu(s.concentration - calib.c_max);
        penalty += w.lambda_conc * conc * conc;
    }
    let left = stats.iter().find(|s| s.side == Side::Left);
    let right = stats.iter().find(|s| s.side == Side::Right);
    if let (Some(l), Some(r)) = (left, right) {
        let asym = relu((l.mean_force - r.mean_force).abs() - calib.delta);
        penalty += w.lambda_asym * asym * asym;
    }
    if hs.slip {
        penalty += w.lambda_slip;
    }
    -penalty
}

/// Largest relative threshold exceedance over force, peak and concentration,
/// floored at zero.
pub fn exceedance(stats: &[ContactStats], calib: &SafetyCalibration) -> f64 {
    stats
        .iter()
        .flat_map(|s| {
            [
                (s.mean_force - calib.f_max) / calib.f_max,
                (s.peak - calib.p_max) / calib.p_max,
                (s.concentration - calib.c_max) / calib.c_max,
            ]
        })
        .fold(0.0, f64::max)
}

/// Episode risk: 95th percentile of holding-phase exceedance plus half the
/// slip rate, clipped to `[0, 1]`.
pub fn episode_risk(exceedance: &[f64], holding: &[bool], slips: &[bool]) -> Result<f64> {
    let t = exceedance.len();
    if t == 0 {
        return Err(Error::InvalidArgument("episode risk of an empty episode".into()));
    }
    if holding.len() != t || slips.len() != t {
        return Err(Error::Dimension(format!(
            "risk inputs of lengths {t}, {}, {}",
            holding.len(),
            slips.len()
        )));
    }
    let held: Vec<f64> = exceedance
        .iter()
        .zip(holding)
        .filter(|(_, &h)| h)
        .map(|(&e, _)| e)
        .collect();
    let p95 = stats::quantile(&held, 0.95).unwrap_or(0.0);
    let slip_count = slips.iter().filter(|&&s| s).count() as f64;
    Ok((p95 + slip_count / (2.0 * t as f64)).clamp(0.0, 1.0))
}

/// Returns `(R_step, R_episode)`.
pub fn episode_reward(rewards: &[f64], risk: f64, outcome: Outcome, w: &RewardWeights) -> Result<(f64, f64)> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("episode reward of an empty episode".into()));
    }
    let r_step = w.r_step_scale * rewards.iter().sum::<f64>() / rewards.len() as f64;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let r_episode = r_step + w.r_succ * flag(outcome.success)
        - w.r_drop * flag(outcome.drop)
        - w.r_damage * flag(outcome.damage)
        - w.r_risk * risk;
    Ok((r_step, r_episode))
}

/// Normalized frames of an episode under a calibration.
pub fn normalized_frames(ep: &EpisodeRecord, calib: &SafetyCalibration) -> Result<Vec<TactileFrame>> {
    normalize_frames(ep.raw_frames(), ep.grid_rows, ep.grid_cols, calib.norm_scale, &ep.id)
}

pub fn annotate_episode(ep: &EpisodeRecord, calib: &SafetyCalibration, w: &RewardWeights) -> Result<RewardAnnotation> {
    let frames = normalized_frames(ep, calib)?;
    let t_len = frames.len();
    let mut rewards = Vec::with_capacity(t_len);
    let mut holding = Vec::with_capacity(t_len);
    let mut slips = Vec::with_capacity(t_len);
    let mut exceed = Vec::with_capacity(t_len);
    let mut prev: Option<HoldingSlipState> = None;
    for frame in &frames {
        let stats = frame_stats(frame, &calib.active_sides, calib.eps);
        let hs = holding_state(frame, &stats, prev.as_ref(), &calib.slip);
        rewards.push(step_reward(&stats, &hs, calib, w));
        exceed.push(exceedance(&stats, calib));
        holding.push(hs.holding);
        slips.push(hs.slip);
        prev = Some(hs);
    }
    let risk = episode_risk(&exceed, &holding, &slips)?;
    let (r_step, r_episode) = episode_reward(&rewards, risk, ep.outcome, w)?;
    Ok(RewardAnnotation {
        episode_id: ep.id.clone(),
        calibration_hash: calib.content_hash(),
        rewards,
        holding,
        slips,
        exceedance: exceed,
        risk,
        r_step,
        r_episode,
    })
}

/// Derive normalization scale, active pads and safety thresholds from the
/// contact statistics of a dataset.
pub fn calibrate(episodes: &[EpisodeRecord], cfg: &CalibrationConfig) -> Result<SafetyCalibration> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Calibration("empty dataset".into()))?;
    let (rows, cols) = (first.grid_rows, first.grid_cols);
    if episodes.iter().any(|e| e.grid_rows != rows || e.grid_cols != cols) {
        return Err(Error::Calibration("episodes disagree on tactile grid size".into()));
    }

    // Raw taxel distribution per side, zeros counted rather than stored.
    let mut zeros = [0usize; 2];
    let mut positive: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for ep in episodes {
        for (t, f) in ep.raw_frames().enumerate() {
            for (k, side) in Side::BOTH.into_iter().enumerate() {
                for &v in f.side(side) {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteTactile {
                            episode: ep.id.clone(),
                            timestep: t,
                        });
                    }
                    if v > 0.0 {
                        positive[k].push(v as f64);
                    } else {
                        zeros[k] += 1;
                    }
                }
            }
        }
    }
    for p in positive.iter_mut() {
        p.sort_by(f64::total_cmp);
    }
    let mut all: Vec<f64> = positive[0].iter().chain(positive[1].iter()).copied().collect();
    all.sort_by(f64::total_cmp);
    let norm_scale = stats::quantile_with_zeros(zeros[0] + zeros[1], &all, cfg.levels.norm_scale).unwrap_or(0.0);
    if norm_scale <= 0.0 {
        return Err(Error::Calibration(format!(
            "no contact in dataset: the {} quantile of raw taxels is zero",
            cfg.levels.norm_scale
        )));
    }

    let active_sides: Vec<Side> = Side::BOTH
        .into_iter()
        .enumerate()
        .filter(|&(k, _)| {
            let q = stats::quantile_with_zeros(zeros[k], &positive[k], cfg.levels.activity).unwrap_or(0.0);
            (q / norm_scale).min(1.0) > cfg.activity_threshold
        })
        .map(|(_, s)| s)
        .collect();
    if active_sides.is_empty() {
        return Err(Error::Calibration(format!(
            "no active side: no pad exceeds {} normalized at the {} quantile",
            cfg.activity_threshold, cfg.levels.activity
        )));
    }
    drop(positive);
    drop(all);

    let mut forces = Vec::new();
    let mut peaks = Vec::new();
    let mut concs = Vec::new();
    let mut asym = Vec::new();
    let bilateral = active_sides.len() == 2;
    for ep in episodes {
        let frames = normalize_frames(ep.raw_frames(), rows, cols, norm_scale, &ep.id)?;
        let mut prev: Option<HoldingSlipState> = None;
        for frame in &frames {
            let st: Vec<ContactStats> = active_sides
                .iter()
                .map(|&s| contact_stats(frame.side(s), s, cfg.eps))
                .collect();
            let hs = holding_state(frame, &st, prev.as_ref(), &cfg.slip);
            if hs.holding {
                for s in &st {
                    forces.push(s.mean_force);
                    peaks.push(s.peak);
                    concs.push(s.concentration);
                }
                if bilateral {
                    asym.push((st[0].mean_force - st[1].mean_force).abs());
                }
            }
            prev = Some(hs);
        }
    }
    if forces.is_empty() {
        return Err(Error::Calibration(
            "no holding frames: contact never persisted with the gripper closed".into(),
        ));
    }
    let lv = &cfg.levels;
    let q = |v: &[f64], l: f64| stats::quantile(v, l).unwrap_or(0.0);
    let calib = SafetyCalibration {
        f_min: q(&forces, lv.f_min),
        f_max: q(&forces, lv.f_max),
        p_max: q(&peaks, lv.p_max),
        c_max: q(&concs, lv.c_max),
        delta: if bilateral { q(&asym, lv.delta) } else { 0.0 },
        active_sides,
        norm_scale,
        slip: cfg.slip,
        eps: cfg.eps,
        levels: cfg.levels,
        activity_threshold: cfg.activity_threshold,
        quantile_method: "linear-interpolation-type7".into(),
        grid_rows: rows,
        grid_cols: cols,
    };
    calib.validate()?;
    Ok(calib)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib() -> SafetyCalibration {
        SafetyCalibration {
            f_min: 0.1,
            f_max: 0.4,
            p_max: 0.8,
            c_max: 0.2,
            delta: 0.05,
            active_sides: vec![Side::Left, Side::Right],
            norm_scale: 5.0,
            slip: SlipParams::default(),
            eps: DEFAULT_EPS,
            levels: QuantileLevels::default(),
            activity_threshold: 0.05,
            quantile_method: "linear-interpolation-type7".into(),
            grid_rows: 10,
            grid_cols: 10,
        }
    }

    fn stat(side: Side, f: f64) -> ContactStats {
        ContactStats {
            side,
            mean_force: f,
            peak: 0.5,
            concentration: 0.1,
            cop: (0.5, 0.5),
        }
    }

    fn holding() -> HoldingSlipState {
        HoldingSlipState {
            holding: true,
            streak: 4,
            ..Default::default()
        }
    }

    #[test]
    fn in_band_step_is_zero() {
        let r = step_reward(
            &[stat(Side::Left, 0.2), stat(Side::Right, 0.22)],
            &holding(),
            &calib(),
            &RewardWeights::default(),
        );
        assert_eq!(r, 0.0);
    }

    #[test]
    fn over_force_squares_the_excess() {
        let c = calib();
        let r = step_reward(
            &[stat(Side::Left, c.f_max + 0.1)],
            &holding(),
            &SafetyCalibration {
                active_sides: vec![Side::Left],
                ..c.clone()
            },
            &RewardWeights::default(),
        );
        assert!((r + 0.01).abs() < 1e-12, "{r}");
    }

    #[test]
    fn asymmetry_term_only_when_bilateral() {
        let w = RewardWeights {
            lambda_asym: 0.5,
            ..Default::default()
        };
        let c = calib();
        // |0.1 - 0.35| = 0.25 = delta + 0.2; both inside the force band.
        let stats = [stat(Side::Left, 0.1), stat(Side::Right, 0.35)];
        let r = step_reward(&stats, &holding(), &c, &w);
        assert!((r + 0.02).abs() < 1e-12, "{r}");
        let r1 = step_reward(&stats[..1], &holding(), &c, &w);
        assert_eq!(r1, 0.0);
    }

    #[test]
    fn under_force_gated_by_holding() {
        let c = calib();
        let stats = [stat(Side::Left, 0.0), stat(Side::Right, 0.0)];
        let w = RewardWeights::default();
        assert_eq!(step_reward(&stats, &HoldingSlipState::default(), &c, &w), 0.0);
        let r = step_reward(&stats, &holding(), &c, &w);
        assert!((r + 2.0 * 0.5 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn slip_costs_lambda_slip() {
        let hs = HoldingSlipState {
            slip: true,
            ..holding()
        };
        let r = step_reward(
            &[stat(Side::Left, 0.2), stat(Side::Right, 0.2)],
            &hs,
            &calib(),
            &RewardWeights::default(),
        );
        assert_eq!(r, -1.0);
    }

    #[test]
    fn risk_cases() {
        assert_eq!(episode_risk(&[0.0; 5], &[false; 5], &[false; 5]).unwrap(), 0.0);
        assert_eq!(episode_risk(&[5.0; 4], &[true; 4], &[false; 4]).unwrap(), 1.0);
        let mut slips = [false; 10];
        slips[..4].fill(true);
        let r = episode_risk(&[0.0; 10], &[true; 10], &slips).unwrap();
        assert!((r - 0.2).abs() < 1e-15);
        assert!(episode_risk(&[], &[], &[]).is_err());
    }

    #[test]
    fn episode_reward_sums() {
        let w = RewardWeights::default();
        let ok = Outcome {
            success: true,
            ..Default::default()
        };
        assert_eq!(episode_reward(&[0.0; 3], 0.0, ok, &w).unwrap(), (0.0, 1.0));
        assert_eq!(
            episode_reward(&[0.0; 3], 0.0, Outcome::default(), &w).unwrap(),
            (0.0, 0.0)
        );
        let bad = Outcome {
            damage: true,
            ..Default::default()
        };
        let (rs, re) = episode_reward(&[-0.5, -0.5], 1.0, bad, &w).unwrap();
        assert_eq!(rs, -0.5);
        assert!((re + 3.0).abs() < 1e-15);
        let both = Outcome {
            success: true,
            damage: true,
            drop: false,
        };
        assert!(episode_reward(&[0.0], 0.0, both, &w).is_ok());
    }

    #[test]
    fn hash_changes_with_thresholds() {
        let a = calib();
        let b = SafetyCalibration {
            f_max: 0.41,
            ..a.clone()
        };
        assert_eq!(a.content_hash(), calib().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
