//! The recorded episode: unit of storage, annotation and training data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tactile::RawTactileFrame;

/// Object profile; the three differ only in fragility and required hold force.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Jar,
    Waffles,
    Egg,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Jar, TaskKind::Waffles, TaskKind::Egg];

    pub fn index(self) -> usize {
        match self {
            TaskKind::Jar => 0,
            TaskKind::Waffles => 1,
            TaskKind::Egg => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Jar => "jar",
            TaskKind::Waffles => "waffles",
            TaskKind::Egg => "egg",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected jar, waffles or egg)"))
    }
}

/// Scripted demonstrator style.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    Clean,
    OverForce,
    WeakGrip,
}

impl DemoKind {
    pub const ALL: [DemoKind; 3] = [DemoKind::Clean, DemoKind::OverForce, DemoKind::WeakGrip];

    pub fn code(self) -> u8 {
        match self {
            DemoKind::Clean => 0,
            DemoKind::OverForce => 1,
            DemoKind::WeakGrip => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DemoKind::Clean => "clean",
            DemoKind::OverForce => "over_force",
            DemoKind::WeakGrip => "weak_grip",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub drop: bool,
    pub damage: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    Unknown,
    Scripted(DemoKind),
    Policy(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: Generator,
    pub seed: u64,
}

impl Provenance {
    pub fn unknown() -> Self {
        Provenance {
            generator: Generator::Unknown,
            seed: 0,
        }
    }

    pub fn demo_kind(&self) -> Option<DemoKind> {
        match self.generator {
            Generator::Scripted(k) => Some(k),
            _ => None,
        }
    }
}

/// Everything observed and commanded at one timestep.
///
/// `tactile` is the reading available when `action` was chosen.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub proprio: Vec<f64>,
    pub tactile: RawTactileFrame,
    pub action: Vec<f64>,
    pub object_pos: [f64; 3],
    pub attached: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub id: String,
    pub task: TaskKind,
    pub group: String,
    /// Static scene condition (task one-hot, object width, object and goal positions).
    pub cond: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub provenance: Provenance,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.action.len())
    }

    pub fn proprio_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.proprio.len())
    }

    pub fn raw_frames(&self) -> impl Iterator<Item = &RawTactileFrame> {
        self.steps.iter().map(|s| &s.tactile)
    }

    /// Largest raw taxel reading over the whole episode, in newtons.
    pub fn peak_force(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.tactile.max_taxel() as f64)
            .fold(0.0, f64::max)
    }
}
