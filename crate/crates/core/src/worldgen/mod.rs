//! Synthetic pick-and-place world.
//!
//! A scene is a background feature plus a handful of objects and receptacles
//! on a square workspace. Scenes are rendered to discrete "vision" tokens,
//! tasks are templated "move <OBJ> to <REC>" instructions, and a scripted
//! expert supplies planar velocity trajectories.

mod dataset;
mod env;
mod scene;

pub use dataset::{Dataset, DatasetSpec, Episode, Split, TaskRule, DATASET_FORMAT_VERSION};
pub use env::{expert_policy, rollout, RolloutOutcome};
pub use scene::{render_vision, Entity, Instruction, Scene};

use serde::{Deserialize, Serialize};

pub const OBJECT_NAMES: [&str; 6] = ["bowl", "cube", "ball", "cup", "plate", "can"];
pub const RECEPTACLE_NAMES: [&str; 4] = ["drawer", "stove", "basket", "shelf"];
pub const NUM_BACKGROUNDS: usize = 4;

/// Geometry and dynamics shared by generation, rendering and rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Side length of the square workspace `[0, extent]²`.
    pub extent: f64,
    /// Cells per axis used when rendering positions.
    pub bins: usize,
    pub success_radius: f64,
    pub v_max: f64,
    pub horizon: usize,
    /// Steps the expert spends reaching the object, then carrying it; the
    /// rest of the horizon is zero padding.
    pub approach_steps: usize,
    pub carry_steps: usize,
    pub action_dim: usize,
    pub min_separation: f64,
    pub objects_per_scene: usize,
    pub receptacles_per_scene: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            extent: 8.0,
            bins: 16,
            success_radius: 0.25,
            v_max: 1.0,
            horizon: 16,
            approach_steps: 6,
            carry_steps: 8,
            action_dim: 2,
            min_separation: 1.0,
            objects_per_scene: 2,
            receptacles_per_scene: 2,
        }
    }
}

impl WorldConfig {
    pub fn cell(&self) -> f64 {
        self.extent / self.bins as f64
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.cell()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        ((x / self.cell()).floor().max(0.0) as usize).min(self.bins - 1)
    }

    /// Gripper start, the workspace centre.
    pub fn start(&self) -> [f64; 2] {
        [self.extent / 2.0, self.extent / 2.0]
    }

    pub fn vocab(&self) -> Vocab {
        Vocab { bins: self.bins }
    }
}

/// Token id layout of the base vocabulary (vision and language share it).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    bins: usize,
}

impl Vocab {
    pub const PAD: usize = 0;
    const BG: usize = 1;
    const OBJ: usize = Self::BG + NUM_BACKGROUNDS;
    const REC: usize = Self::OBJ + OBJECT_NAMES.len();
    const XBIN: usize = Self::REC + RECEPTACLE_NAMES.len();

    pub fn pad(&self) -> usize {
        Self::PAD
    }

    pub fn background(&self, b: usize) -> usize {
        Self::BG + b
    }

    pub fn object_type(&self, k: usize) -> usize {
        Self::OBJ + k
    }

    pub fn receptacle_type(&self, k: usize) -> usize {
        Self::REC + k
    }

    pub fn xbin(&self, i: usize) -> usize {
        Self::XBIN + i
    }

    pub fn ybin(&self, i: usize) -> usize {
        Self::XBIN + self.bins + i
    }

    fn words(&self) -> usize {
        Self::XBIN + 2 * self.bins
    }

    pub fn word_move(&self) -> usize {
        self.words()
    }

    pub fn word_to(&self) -> usize {
        self.words() + 1
    }

    pub fn object_word(&self, k: usize) -> usize {
        self.words() + 2 + k
    }

    pub fn receptacle_word(&self, k: usize) -> usize {
        self.words() + 2 + OBJECT_NAMES.len() + k
    }

    /// Base vocabulary size V.
    pub fn size(&self) -> usize {
        self.words() + 2 + OBJECT_NAMES.len() + RECEPTACLE_NAMES.len()
    }

    pub fn is_background(&self, t: usize) -> bool {
        (Self::BG..Self::OBJ).contains(&t)
    }

    /// Human-readable token, for debugging and reports.
    pub fn describe(&self, t: usize) -> String {
        let w = self.words();
        match t {
            Self::PAD => "<pad>".into(),
            t if t < Self::OBJ => format!("<bg{}>", t - Self::BG),
            t if t < Self::REC => format!("<obj:{}>", OBJECT_NAMES[t - Self::OBJ]),
            t if t < Self::XBIN => format!("<rec:{}>", RECEPTACLE_NAMES[t - Self::REC]),
            t if t < Self::XBIN + self.bins => format!("<x{}>", t - Self::XBIN),
            t if t < w => format!("<y{}>", t - Self::XBIN - self.bins),
            t if t == w => "move".into(),
            t if t == w + 1 => "to".into(),
            t if t < w + 2 + OBJECT_NAMES.len() => OBJECT_NAMES[t - w - 2].into(),
            t if t < self.size() => RECEPTACLE_NAMES[t - w - 2 - OBJECT_NAMES.len()].into(),
            t => format!("<query{}>", t - self.size()),
        }
    }
}
