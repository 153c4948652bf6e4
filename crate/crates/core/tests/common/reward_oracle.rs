//! Straight-line per-taxel reimplementation of the tactile reward, written
//! against the definitions rather than the library's helpers.

use rwfm_core::episode::EpisodeRecord;
use rwfm_core::reward::{RewardWeights, SafetyCalibration};
use rwfm_core::tactile::Side;

pub struct OracleAnnotation {
    pub rewards: Vec<f64>,
    pub holding: Vec<bool>,
    pub slips: Vec<bool>,
    pub exceedance: Vec<f64>,
    pub risk: f64,
    pub r_step: f64,
    pub r_episode: f64,
}

struct SideStats {
    f: f64,
    p: f64,
    c: f64,
    cx: f64,
    cy: f64,
}

fn side_stats(raw: &[f32], rows: usize, cols: usize, scale: f64, eps: f64) -> SideStats {
    let mut sum = 0.0;
    let mut peak = 0.0f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let mut m = raw[i * cols + j] as f64 / scale;
            if m > 1.0 {
                m = 1.0;
            }
            if m < 0.0 {
                m = 0.0;
            }
            let x = if cols > 1 { j as f64 / (cols - 1) as f64 } else { 0.0 };
            let y = if rows > 1 { i as f64 / (rows - 1) as f64 } else { 0.0 };
            sum += m;
            if m > peak {
                peak = m;
            }
            sx += m * x;
            sy += m * y;
        }
    }
    let hw = (rows * cols) as f64;
    let f = sum / hw;
    SideStats {
        f,
        p: peak,
        c: peak / (hw * f + eps),
        cx: sx / (sum + eps),
        cy: sy / (sum + eps),
    }
}

fn relu_sq(x: f64) -> f64 {
    if x > 0.0 {
        x * x
    } else {
        0.0
    }
}

/// Type-7 percentile by sorting.
fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let k = pos.floor() as usize;
    if k + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[k] + (pos - k as f64) * (v[k + 1] - v[k])
}

pub fn annotate(ep: &EpisodeRecord, cal: &SafetyCalibration, w: &RewardWeights) -> OracleAnnotation {
    let (rows, cols) = (ep.grid_rows, ep.grid_cols);
    let has_l = cal.active_sides.contains(&Side::Left);
    let has_r = cal.active_sides.contains(&Side::Right);
    let t_len = ep.steps.len();

    let mut rewards = vec![0.0; t_len];
    let mut holding = vec![false; t_len];
    let mut slips = vec![false; t_len];
    let mut exceedance = vec![0.0; t_len];
    let mut run = 0usize;
    let mut prev: Vec<SideStats> = Vec::new();

    for t in 0..t_len {
        let fr = &ep.steps[t].tactile;
        let mut cur = Vec::new();
        if has_l {
            cur.push(side_stats(&fr.left, rows, cols, cal.norm_scale, cal.eps));
        }
        if has_r {
            cur.push(side_stats(&fr.right, rows, cols, cal.norm_scale, cal.eps));
        }

        let mut contact = fr.gripper_closed;
        for s in &cur {
            if s.f < cal.slip.f_contact {
                contact = false;
            }
        }
        run = if contact { run + 1 } else { 0 };
        let h = contact && run >= cal.slip.n_hold;

        let mut slip = false;
        if h && t > 0 {
            let mut max_dcop = 0.0f64;
            let mut min_df = f64::INFINITY;
            for (a, b) in cur.iter().zip(&prev) {
                let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                max_dcop = max_dcop.max(d);
                min_df = min_df.min(a.f - b.f);
            }
            slip = max_dcop > cal.slip.c_op || min_df < -cal.slip.d_f;
        }

        let mut pen = 0.0;
        let mut e = 0.0f64;
        for s in &cur {
            pen += w.lambda_high * relu_sq(s.f - cal.f_max);
            if h {
                pen += w.lambda_low * relu_sq(cal.f_min - s.f);
            }
            pen += w.lambda_peak * relu_sq(s.p - cal.p_max);
            pen += w.lambda_conc * relu_sq(s.c - cal.c_max);
            e = e
                .max((s.f - cal.f_max) / cal.f_max)
                .max((s.p - cal.p_max) / cal.p_max)
                .max((s.c - cal.c_max) / cal.c_max);
        }
        if has_l && has_r {
            pen += w.lambda_asym * relu_sq((cur[0].f - cur[1].f).abs() - cal.delta);
        }
        if slip {
            pen += w.lambda_slip;
        }

        rewards[t] = -pen;
        holding[t] = h;
        slips[t] = slip;
        exceedance[t] = e;
        prev = cur;
    }

    let held: Vec<f64> = (0..t_len).filter(|&t| holding[t]).map(|t| exceedance[t]).collect();
    let n_slip = slips.iter().filter(|s| **s).count() as f64;
    let risk = (percentile(held, 0.95) + n_slip / (2.0 * t_len as f64)).clamp(0.0, 1.0);
    let r_step = w.r_step_scale * rewards.iter().sum::<f64>() / t_len as f64;
    let o = ep.outcome;
    let r_episode = r_step + if o.success { w.r_succ } else { 0.0 }
        - if o.drop { w.r_drop } else { 0.0 }
        - if o.damage { w.r_damage } else { 0.0 }
        - w.r_risk * risk;
    OracleAnnotation {
        rewards,
        holding,
        slips,
        exceedance,
        risk,
        r_step,
        r_episode,
    }
}

pub struct OracleReport {
    pub episodes: usize,
    pub max_error: f64,
    pub flags_agree: bool,
    pub holding_steps: usize,
    pub slip_steps: usize,
    pub penalized_steps: usize,
}

/// Compares the library annotation with the oracle on `n` simulator
/// episodes, under the dataset calibration and under randomly tightened
/// variants of it so that every penalty branch fires.
pub fn compare_on_simulator_episodes(n: usize, seed: u64) -> OracleReport {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rwfm_core::episode::{DemoKind, TaskKind};
    use rwfm_core::reward::{annotate_episode, calibrate, CalibrationConfig};
    use rwfm_core::sim::{scripted_demo, SimConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SimConfig::default();
    let kinds = [DemoKind::Clean, DemoKind::OverForce, DemoKind::WeakGrip];
    let eps: Vec<EpisodeRecord> = (0..n)
        .map(|_| {
            let kind = kinds[rng.random_range(0..3)];
            let task = TaskKind::ALL[rng.random_range(0..TaskKind::ALL.len())];
            scripted_demo(kind, task, &cfg, rng.random()).unwrap()
        })
        .collect();
    let base = calibrate(&eps, &CalibrationConfig::default()).unwrap();

    let mut report = OracleReport {
        episodes: n,
        max_error: 0.0,
        flags_agree: true,
        holding_steps: 0,
        slip_steps: 0,
        penalized_steps: 0,
    };
    for (i, ep) in eps.iter().enumerate() {
        let mut cal = base.clone();
        if i % 2 == 1 {
            let k = rng.random_range(0.3..0.9);
            cal.f_min *= rng.random_range(1.0..3.0);
            cal.f_max *= k;
            cal.f_max = cal.f_max.max(cal.f_min * 1.01);
            cal.p_max *= k;
            cal.c_max *= k;
            cal.delta *= k;
            cal.slip.c_op = rng.random_range(0.001..0.05);
            cal.slip.d_f = rng.random_range(0.0005..0.01);
            cal.slip.n_hold = rng.random_range(1..5);
        }
        let w = RewardWeights {
            lambda_high: rng.random_range(0.0..2.0),
            lambda_low: rng.random_range(0.0..2.0),
            lambda_peak: rng.random_range(0.0..2.0),
            lambda_conc: rng.random_range(0.0..2.0),
            lambda_asym: rng.random_range(0.0..2.0),
            lambda_slip: rng.random_range(0.0..2.0),
            r_step_scale: rng.random_range(0.5..2.0),
            r_succ: rng.random_range(0.0..2.0),
            r_drop: rng.random_range(0.0..2.0),
            r_damage: rng.random_range(0.0..3.0),
            r_risk: rng.random_range(0.0..1.0),
        };
        let lib = annotate_episode(ep, &cal, &w).unwrap();
        let orc = annotate(ep, &cal, &w);
        let mut err = 0.0f64;
        for (a, b) in lib.rewards.iter().zip(&orc.rewards) {
            err = err.max((a - b).abs());
        }
        for (a, b) in lib.exceedance.iter().zip(&orc.exceedance) {
            err = err.max((a - b).abs());
        }
        err = err
            .max((lib.risk - orc.risk).abs())
            .max((lib.r_step - orc.r_step).abs())
            .max((lib.r_episode - orc.r_episode).abs());
        report.max_error = report.max_error.max(err);
        report.flags_agree &=
            lib.rewards.len() == orc.rewards.len() && lib.holding == orc.holding && lib.slips == orc.slips;
        report.holding_steps += orc.holding.iter().filter(|h| **h).count();
        report.slip_steps += orc.slips.iter().filter(|s| **s).count();
        report.penalized_steps += orc.rewards.iter().filter(|r| **r < 0.0).count();
    }
    report
}
