use serde::{Deserialize, Serialize};

use super::{Vocab, WorldConfig, NUM_BACKGROUNDS, OBJECT_NAMES, RECEPTACLE_NAMES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: usize,
    pub pos: [f64; 2],
}

/// Objects and receptacles are each kept sorted by kind, which is the
/// canonical order used for rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: usize,
    pub objects: Vec<Entity>,
    pub receptacles: Vec<Entity>,
    pub start: [f64; 2],
}

impl Scene {
    pub fn new(
        world: &WorldConfig,
        background: usize,
        mut objects: Vec<Entity>,
        mut receptacles: Vec<Entity>,
    ) -> Result<Self> {
        if background >= NUM_BACKGROUNDS {
            return Err(Error::contract(format!("background {background} not in catalog")));
        }
        objects.sort_by_key(|e| e.kind);
        receptacles.sort_by_key(|e| e.kind);
        for (list, catalog, what) in [
            (&objects, OBJECT_NAMES.len(), "object"),
            (&receptacles, RECEPTACLE_NAMES.len(), "receptacle"),
        ] {
            if list.iter().any(|e| e.kind >= catalog) {
                return Err(Error::contract(format!("{what} kind outside catalog")));
            }
            if list.windows(2).any(|w| w[0].kind == w[1].kind) {
                return Err(Error::contract(format!("duplicate {what} kind in scene")));
            }
        }
        let all: Vec<[f64; 2]> = objects.iter().chain(&receptacles).map(|e| e.pos).collect();
        for p in &all {
            if !(0.0..=world.extent).contains(&p[0]) || !(0.0..=world.extent).contains(&p[1]) {
                return Err(Error::contract(format!("position {p:?} outside workspace")));
            }
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if dist(all[i], all[j]) < world.min_separation {
                    return Err(Error::contract(format!(
                        "entities {i} and {j} closer than {}",
                        world.min_separation
                    )));
                }
            }
        }
        Ok(Self {
            background,
            objects,
            receptacles,
            start: world.start(),
        })
    }

    /// Scene with no entities.
    pub fn empty(world: &WorldConfig, background: usize) -> Result<Self> {
        Self::new(world, background, Vec::new(), Vec::new())
    }

    pub fn object(&self, kind: usize) -> Option<&Entity> {
        self.objects.iter().find(|e| e.kind == kind)
    }

    pub fn receptacle(&self, kind: usize) -> Option<&Entity> {
        self.receptacles.iter().find(|e| e.kind == kind)
    }

    /// Every (object kind, receptacle kind) pair the scene supports.
    pub fn tasks(&self) -> Vec<Instruction> {
        self.objects
            .iter()
            .flat_map(|o| {
                self.receptacles.iter().map(move |r| Instruction {
                    object: o.kind,
                    receptacle: r.kind,
                })
            })
            .collect()
    }
}

/// "move <OBJ> to <REC>".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instruction {
    pub object: usize,
    pub receptacle: usize,
}

impl Instruction {
    pub fn tokens(&self, vocab: &Vocab) -> Vec<usize> {
        vec![
            vocab.word_move(),
            vocab.object_word(self.object),
            vocab.word_to(),
            vocab.receptacle_word(self.receptacle),
        ]
    }

    pub fn validate(&self, scene: &Scene) -> Result<()> {
        if scene.object(self.object).is_none() || scene.receptacle(self.receptacle).is_none() {
            return Err(Error::contract(format!(
                "instruction `{}` references entities absent from the scene",
                self.text()
            )));
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        format!(
            "move {} to {}",
            OBJECT_NAMES.get(self.object).unwrap_or(&"?"),
            RECEPTACLE_NAMES.get(self.receptacle).unwrap_or(&"?")
        )
    }
}

/// Background token, then `(type, x-bin, y-bin)` per entity: objects first,
/// then receptacles, each in kind order.
pub fn render_vision(scene: &Scene, world: &WorldConfig) -> Vec<usize> {
    let vocab = world.vocab();
    let mut out = Vec::with_capacity(1 + 3 * (scene.objects.len() + scene.receptacles.len()));
    out.push(vocab.background(scene.background));
    for e in &scene.objects {
        out.extend([
            vocab.object_type(e.kind),
            vocab.xbin(world.bin_of(e.pos[0])),
            vocab.ybin(world.bin_of(e.pos[1])),
        ]);
    }
    for e in &scene.receptacles {
        out.extend([
            vocab.receptacle_type(e.kind),
            vocab.xbin(world.bin_of(e.pos[0])),
            vocab.ybin(world.bin_of(e.pos[1])),
        ]);
    }
    out
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
