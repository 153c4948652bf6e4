//! Tactile pressure maps: normalization, per-pad contact statistics and the
//! holding/slip detector that gates the grasp-phase penalties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_ROWS: usize = 10;
pub const GRID_COLS: usize = 10;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];
}

/// Row-major pressure grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 || cols < 2 || data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "grid {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, k: f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }
}

/// One timestep of raw pad readings in newtons per taxel, as recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTactileFrame {
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub gripper_closed: bool,
}

impl RawTactileFrame {
    pub fn zeros(taxels: usize, gripper_closed: bool) -> Self {
        RawTactileFrame {
            left: vec![0.0; taxels],
            right: vec![0.0; taxels],
            gripper_closed,
        }
    }

    pub fn side(&self, side: Side) -> &[f32] {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn max_taxel(&self) -> f32 {
        self.left.iter().chain(self.right.iter()).fold(0.0f32, |m, &v| m.max(v))
    }
}

/// Normalized pair of pressure maps with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TactileFrame {
    pub left: Grid,
    pub right: Grid,
    pub gripper_closed: bool,
    pub timestep: usize,
}

impl TactileFrame {
    pub fn side(&self, side: Side) -> &Grid {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    /// Flattened `[left; right]`, the tactile encoder's input layout.
    pub fn flattened(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.left.values().len() * 2);
        v.extend_from_slice(self.left.values());
        v.extend_from_slice(self.right.values());
        v
    }
}

/// Divide by the dataset scale and clip to `[0, 1]`.
pub fn normalize_grid(raw: &[f32], rows: usize, cols: usize, scale: f64) -> Option<Grid> {
    let mut data = Vec::with_capacity(raw.len());
    for &v in raw {
        if !v.is_finite() {
            return None;
        }
        data.push((v as f64 / scale).clamp(0.0, 1.0));
    }
    Grid::new(rows, cols, data).ok()
}

pub fn normalize_frames<'a>(
    raw: impl IntoIterator<Item = &'a RawTactileFrame>,
    rows: usize,
    cols: usize,
    scale: f64,
    episode: &str,
) -> Result<Vec<TactileFrame>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "normalization scale must be positive, got {scale}"
        )));
    }
    raw.into_iter()
        .enumerate()
        .map(|(t, f)| {
            let bad = || Error::NonFiniteTactile {
                episode: episode.to_string(),
                timestep: t,
            };
            if f.left.len() != rows * cols || f.right.len() != rows * cols {
                return Err(Error::Dimension(format!(
                    "episode {episode} timestep {t}: expected {rows}x{cols} pads"
                )));
            }
            Ok(TactileFrame {
                left: normalize_grid(&f.left, rows, cols, scale).ok_or_else(bad)?,
                right: normalize_grid(&f.right, rows, cols, scale).ok_or_else(bad)?,
                gripper_closed: f.gripper_closed,
                timestep: t,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactStats {
    pub side: Side,
    pub mean_force: f64,
    pub peak: f64,
    pub concentration: f64,
    pub cop: (f64, f64),
}

/// Mean force, peak, concentration and center of pressure of one pad.
///
/// Grid coordinates are corner anchored: column `j` sits at `x = j / (W - 1)`
/// and row `i` at `y = i / (H - 1)`.
pub fn contact_stats(grid: &Grid, side: Side, eps: f64) -> ContactStats {
    let (h, w) = (grid.rows(), grid.cols());
    let n = (h * w) as f64;
    let mut sum = 0.0;
    let mut peak = 0.0f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 0..h {
        let y = i as f64 / (h - 1) as f64;
        for j in 0..w {
            let m = grid.get(i, j);
            sum += m;
            peak = peak.max(m);
            sx += m * (j as f64 / (w - 1) as f64);
            sy += m * y;
        }
    }
    let mean_force = sum / n;
    ContactStats {
        side,
        mean_force,
        peak,
        concentration: peak / (n * mean_force + eps),
        cop: (sx / (sum + eps), sy / (sum + eps)),
    }
}

/// Stats for each side in `sides`, in the given order.
pub fn frame_stats(frame: &TactileFrame, sides: &[Side], eps: f64) -> Vec<ContactStats> {
    sides.iter().map(|&s| contact_stats(frame.side(s), s, eps)).collect()
}

/// Holding and slip thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlipParams {
    /// Minimum mean force on every active pad for a frame to count as contact.
    pub f_contact: f64,
    /// Consecutive qualifying frames before holding starts.
    pub n_hold: usize,
    /// CoP jump threshold in normalized grid units.
    pub c_op: f64,
    /// Absolute drop in normalized mean force.
    pub d_f: f64,
}

impl Default for SlipParams {
    fn default() -> Self {
        SlipParams {
            f_contact: 0.02,
            n_hold: 3,
            c_op: 0.15,
            d_f: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HoldingSlipState {
    pub holding: bool,
    pub slip: bool,
    /// Largest CoP displacement over active sides since the previous frame.
    pub delta_cop: f64,
    /// Smallest (most negative) change of mean force over active sides.
    pub delta_force: f64,
    /// Consecutive qualifying contact frames up to and including this one.
    pub streak: usize,
    /// Stats this state was computed from, for the next frame's deltas.
    pub stats: Vec<ContactStats>,
}

pub fn holding_state(
    frame: &TactileFrame,
    stats: &[ContactStats],
    prev: Option<&HoldingSlipState>,
    params: &SlipParams,
) -> HoldingSlipState {
    let qualifies = frame.gripper_closed && !stats.is_empty() && stats.iter().all(|s| s.mean_force >= params.f_contact);
    let streak = if qualifies { prev.map_or(0, |p| p.streak) + 1 } else { 0 };
    let holding = qualifies && streak >= params.n_hold;

    let mut delta_cop = 0.0f64;
    let mut delta_force: Option<f64> = None;
    if let Some(p) = prev {
        for s in stats {
            if let Some(q) = p.stats.iter().find(|q| q.side == s.side) {
                let dx = s.cop.0 - q.cop.0;
                let dy = s.cop.1 - q.cop.1;
                delta_cop = delta_cop.max((dx * dx + dy * dy).sqrt());
                let df = s.mean_force - q.mean_force;
                delta_force = Some(delta_force.map_or(df, |m| m.min(df)));
            }
        }
    }
    let delta_force = delta_force.unwrap_or(0.0);
    let slip = holding && (delta_cop > params.c_op || delta_force < -params.d_f);

    HoldingSlipState {
        holding,
        slip,
        delta_cop,
        delta_force,
        streak,
        stats: stats.to_vec(),
    }
}
