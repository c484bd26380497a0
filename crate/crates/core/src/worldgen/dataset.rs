use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{expert_policy, render_vision, rollout, Entity, Instruction, Scene, WorldConfig, NUM_BACKGROUNDS};
use super::{OBJECT_NAMES, RECEPTACLE_NAMES};
use crate::error::{Error, Result};
use crate::trajectory::ActionTrajectory;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "dualvla-dataset";
const MAX_ATTEMPTS: u64 = 200;

/// How a family's first task is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRule {
    /// Background feature selects the (object slot, receptacle slot) pair, so
    /// the rendered scene fully determines the task.
    Cue,
    /// Uniformly random pair per family.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub world: WorldConfig,
    /// Training episodes.
    pub n_episodes: usize,
    /// Distinct tasks per training scene family; 1 means the scene determines the instruction.
    pub alpha: usize,
    /// Tasks per family in the ambiguous evaluation split.
    pub eval_alpha: usize,
    pub episodes_per_family: usize,
    pub rule: TaskRule,
    /// Hold one background out of training and use it, with position jitter, for the OOD split.
    pub ood_shift: bool,
    pub ood_jitter: f64,
    /// Size of each evaluation split relative to `n_episodes`.
    pub eval_ratio: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            n_episodes: 500,
            alpha: 1,
            eval_alpha: 2,
            episodes_per_family: 1,
            rule: TaskRule::Cue,
            ood_shift: true,
            ood_jitter: 0.1,
            eval_ratio: 0.2,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, reason: &str| Error::Config {
            key: key.into(),
            reason: reason.into(),
        };
        let w = &self.world;
        if self.alpha == 0 {
            return Err(cfg("alpha", "must be at least 1"));
        }
        if self.eval_alpha == 0 {
            return Err(cfg("eval_alpha", "must be at least 1"));
        }
        let tasks = w.objects_per_scene * w.receptacles_per_scene;
        if self.alpha.max(self.eval_alpha) > tasks {
            return Err(cfg("alpha", "exceeds the number of (object, receptacle) pairs per scene"));
        }
        if w.objects_per_scene == 0 || w.objects_per_scene > OBJECT_NAMES.len() {
            return Err(cfg("world.objects_per_scene", "must be within the object catalog"));
        }
        if w.receptacles_per_scene == 0 || w.receptacles_per_scene > RECEPTACLE_NAMES.len() {
            return Err(cfg("world.receptacles_per_scene", "must be within the receptacle catalog"));
        }
        if w.approach_steps == 0 || w.carry_steps == 0 || w.approach_steps + w.carry_steps > w.horizon {
            return Err(cfg("world.approach_steps", "phases must be positive and fit in the horizon"));
        }
        if self.n_episodes == 0 {
            return Err(cfg("n_episodes", "must be positive"));
        }
        if self.episodes_per_family == 0 {
            return Err(cfg("episodes_per_family", "must be positive"));
        }
        if !(self.eval_ratio > 0.0 && self.eval_ratio.is_finite()) {
            return Err(cfg("eval_ratio", "must be positive"));
        }
        if !(0.0..w.cell() / 2.0).contains(&self.ood_jitter) {
            return Err(cfg("ood_jitter", "must be in [0, cell/2)"));
        }
        if w.bins == 0 || w.extent <= 0.0 || w.action_dim != 2 {
            return Err(cfg("world", "needs positive extent and bins and 2-D actions"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn n_eval(&self) -> usize {
        ((self.n_episodes as f64 * self.eval_ratio).ceil() as usize).max(1)
    }

    pub fn train_backgrounds(&self) -> Vec<usize> {
        let n = if self.ood_shift { NUM_BACKGROUNDS - 1 } else { NUM_BACKGROUNDS };
        (0..n).collect()
    }

    pub fn ood_background(&self) -> Option<usize> {
        self.ood_shift.then_some(NUM_BACKGROUNDS - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Id,
    Ambiguous,
    Ood,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Id, Split::Ambiguous, Split::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Id => "id",
            Split::Ambiguous => "ambiguous",
            Split::Ood => "ood",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x11,
            Split::Id => 0x22,
            Split::Ambiguous => 0x33,
            Split::Ood => 0x44,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub split: Split,
    pub family: usize,
    pub scene: Scene,
    pub vision: Vec<usize>,
    pub instruction: Instruction,
    pub language: Vec<usize>,
    pub expert: ActionTrajectory,
    /// Number of tasks the episode's scene family carries.
    pub ambiguity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub episodes: Vec<Episode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    spec_hash: String,
    spec: DatasetSpec,
}

struct Family {
    scene: Scene,
    vision: Vec<usize>,
    tasks: Vec<(Instruction, ActionTrajectory)>,
}

impl Dataset {
    /// Generates every split from `spec`. Identical specs give identical datasets.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut episodes = Vec::new();
        let n_eval = spec.n_eval();

        // Training split; an α=1 corpus must map each rendering to one instruction.
        let mut seen: HashMap<Vec<usize>, Instruction> = HashMap::new();
        let mut family = 0;
        let mut train = Vec::new();
        while train.len() < spec.n_episodes {
            let fam = make_family(spec, Split::Train, family, spec.alpha, &mut |f: &Family| {
                spec.alpha > 1 || seen.get(&f.vision).is_none_or(|i| *i == f.tasks[0].0)
            })?;
            if spec.alpha == 1 {
                seen.insert(fam.vision.clone(), fam.tasks[0].0);
            }
            let mut rng = family_rng(spec.seed, Split::Train, family, u64::MAX);
            for _ in 0..spec.episodes_per_family {
                if train.len() == spec.n_episodes {
                    break;
                }
                let k = rng.random_range(0..fam.tasks.len());
                train.push(episode(&spec.world, Split::Train, family, &fam, k, spec.alpha));
            }
            family += 1;
        }
        episodes.extend(train);

        let mut id = Vec::new();
        let mut f = 0;
        while id.len() < n_eval {
            let fam = make_family(spec, Split::Id, f, spec.alpha, &mut |_| true)?;
            let k = family_rng(spec.seed, Split::Id, f, u64::MAX).random_range(0..fam.tasks.len());
            id.push(episode(&spec.world, Split::Id, f, &fam, k, spec.alpha));
            f += 1;
        }
        episodes.extend(id);

        let mut amb = Vec::new();
        let mut f = 0;
        while amb.len() < n_eval {
            let fam = make_family(spec, Split::Ambiguous, f, spec.eval_alpha, &mut |_| true)?;
            for k in 0..fam.tasks.len() {
                amb.push(episode(&spec.world, Split::Ambiguous, f, &fam, k, spec.eval_alpha));
            }
            f += 1;
        }
        episodes.extend(amb);

        if spec.ood_shift {
            for f in 0..n_eval {
                let fam = make_family(spec, Split::Ood, f, spec.alpha, &mut |_| true)?;
                let k = family_rng(spec.seed, Split::Ood, f, u64::MAX).random_range(0..fam.tasks.len());
                episodes.push(episode(&spec.world, Split::Ood, f, &fam, k, spec.alpha));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            episodes,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn split_vec(&self, split: Split) -> Vec<Episode> {
        self.split(split).cloned().collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Header line plus one JSON record per episode, newline terminated.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = Header {
            format: FORMAT_TAG.into(),
            version: DATASET_FORMAT_VERSION,
            spec_hash: self.spec.hash(),
            spec: self.spec.clone(),
        };
        writeln!(out, "{}", to_json(&header)?)?;
        for e in &self.episodes {
            writeln!(out, "{}", to_json(e)?)?;
        }
        Ok(())
    }

    pub fn read_from(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format != FORMAT_TAG || header.version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        if header.spec.hash() != header.spec_hash {
            return Err(Error::Format("spec hash does not match header spec".into()));
        }
        let mut episodes = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let e: Episode =
                serde_json::from_str(&line).map_err(|err| Error::Format(format!("record {}: {err}", n + 1)))?;
            episodes.push(e);
        }
        Ok(Self {
            spec: header.spec,
            episodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn episode(w: &WorldConfig, split: Split, family: usize, fam: &Family, k: usize, ambiguity: usize) -> Episode {
    let (instruction, expert) = fam.tasks[k].clone();
    Episode {
        split,
        family,
        scene: fam.scene.clone(),
        vision: fam.vision.clone(),
        instruction,
        language: instruction.tokens(&w.vocab()),
        expert,
        ambiguity,
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn family_rng(seed: u64, split: Split, family: usize, attempt: u64) -> ChaCha8Rng {
    let s = mix(mix(mix(seed) ^ split.salt()) ^ family as u64) ^ mix(attempt);
    ChaCha8Rng::seed_from_u64(s)
}

fn make_family(
    spec: &DatasetSpec,
    split: Split,
    family: usize,
    alpha: usize,
    accept: &mut dyn FnMut(&Family) -> bool,
) -> Result<Family> {
    let w = &spec.world;
    let backgrounds = match (split, spec.ood_background()) {
        (Split::Ood, Some(b)) => vec![b],
        _ => spec.train_backgrounds(),
    };
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = family_rng(spec.seed, split, family, attempt);
        let Some(scene) = sample_scene(w, &backgrounds, split == Split::Ood, spec.ood_jitter, &mut rng) else {
            continue;
        };
        let all = scene.tasks();
        let primary = match spec.rule {
            TaskRule::Cue => scene.background % all.len(),
            TaskRule::Uniform => rng.random_range(0..all.len()),
        };
        let mut order: Vec<usize> = (0..all.len()).filter(|&i| i != primary).collect();
        order.shuffle(&mut rng);
        let chosen: Vec<Instruction> = std::iter::once(primary)
            .chain(order)
            .take(alpha)
            .map(|i| all[i])
            .collect();
        let mut tasks = Vec::with_capacity(alpha);
        for instr in chosen {
            match expert_policy(&scene, &instr, w) {
                Ok(traj) if rollout(&scene, &instr, &traj, w)?.success => tasks.push((instr, traj)),
                Ok(_) | Err(Error::Horizon { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        if tasks.len() < alpha {
            continue;
        }
        let fam = Family {
            vision: render_vision(&scene, w),
            scene,
            tasks,
        };
        if accept(&fam) {
            return Ok(fam);
        }
    }
    Err(Error::Generation(format!(
        "{} family {family}: no valid scene after {MAX_ATTEMPTS} attempts \
         (separation {} with {} objects and {} receptacles in a {}×{} workspace)",
        split.name(),
        w.min_separation,
        w.objects_per_scene,
        w.receptacles_per_scene,
        w.extent,
        w.extent
    )))
}

fn sample_scene(
    w: &WorldConfig,
    backgrounds: &[usize],
    jitter: bool,
    amount: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Scene> {
    let background = backgrounds[rng.random_range(0..backgrounds.len())];
    let mut obj_kinds: Vec<usize> = (0..OBJECT_NAMES.len()).collect();
    obj_kinds.shuffle(rng);
    let mut rec_kinds: Vec<usize> = (0..RECEPTACLE_NAMES.len()).collect();
    rec_kinds.shuffle(rng);
    let n = w.objects_per_scene + w.receptacles_per_scene;
    let mut cells: Vec<[f64; 2]> = Vec::with_capacity(n);
    let start = w.start();
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..50 {
            let p = [
                w.cell_center(rng.random_range(0..w.bins)),
                w.cell_center(rng.random_range(0..w.bins)),
            ];
            let clear = cells
                .iter()
                .chain(std::iter::once(&start))
                .all(|q| super::scene::dist(p, *q) >= w.min_separation);
            if clear {
                cells.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    if jitter {
        for p in cells.iter_mut() {
            p[0] += rng.random_range(-amount..=amount);
            p[1] += rng.random_range(-amount..=amount);
        }
    }
    let objects = (0..w.objects_per_scene)
        .map(|i| Entity {
            kind: obj_kinds[i],
            pos: cells[i],
        })
        .collect();
    let receptacles = (0..w.receptacles_per_scene)
        .map(|i| Entity {
            kind: rec_kinds[i],
            pos: cells[w.objects_per_scene + i],
        })
        .collect();
    Scene::new(w, background, objects, receptacles).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    fn small(alpha: usize) -> DatasetSpec {
        DatasetSpec {
            n_episodes: 60,
            alpha,
            episodes_per_family: 2,
            ..DatasetSpec::default()
        }
    }

    fn bytes(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = small(2);
        assert_eq!(bytes(&Dataset::generate(&spec).unwrap()), bytes(&Dataset::generate(&spec).unwrap()));
        let other = DatasetSpec { seed: 8, ..spec };
        assert_ne!(bytes(&Dataset::generate(&other).unwrap()), bytes(&Dataset::generate(&small(2)).unwrap()));
    }

    #[test]
    fn alpha_one_train_split_is_a_function_of_vision() {
        let d = Dataset::generate(&small(1)).unwrap();
        let mut map: HashMap<&[usize], BTreeSet<&[usize]>> = HashMap::new();
        for e in d.split(Split::Train) {
            map.entry(&e.vision).or_default().insert(&e.language);
        }
        assert!(map.values().all(|s| s.len() == 1));
        assert_eq!(d.count(Split::Train), 60);
    }

    #[test]
    fn alpha_two_scenes_carry_two_instructions() {
        let d = Dataset::generate(&small(2)).unwrap();
        let mut map: HashMap<&[usize], BTreeSet<&[usize]>> = HashMap::new();
        for e in d.split(Split::Ambiguous) {
            map.entry(&e.vision).or_default().insert(&e.language);
        }
        assert!(map.values().all(|s| s.len() == 2));
        let mut train: HashMap<&[usize], BTreeSet<&[usize]>> = HashMap::new();
        for e in d.split(Split::Train) {
            train.entry(&e.vision).or_default().insert(&e.language);
        }
        assert!(train.values().any(|s| s.len() >= 2));
    }

    #[test]
    fn every_expert_trajectory_succeeds() {
        let spec = small(2);
        let d = Dataset::generate(&spec).unwrap();
        for e in &d.episodes {
            assert!(rollout(&e.scene, &e.instruction, &e.expert, &spec.world).unwrap().success);
            assert_eq!(e.vision, render_vision(&e.scene, &spec.world));
            assert_eq!(e.language, e.instruction.tokens(&spec.world.vocab()));
        }
    }

    #[test]
    fn ood_background_is_held_out_of_training() {
        let spec = small(1);
        let d = Dataset::generate(&spec).unwrap();
        let held = spec.ood_background().unwrap();
        for split in [Split::Train, Split::Id, Split::Ambiguous] {
            assert!(d.split(split).all(|e| e.scene.background != held));
        }
        assert!(d.count(Split::Ood) > 0);
        assert!(d.split(Split::Ood).all(|e| e.scene.background == held));
    }

    #[test]
    fn cue_rule_ties_the_primary_task_to_the_background() {
        let d = Dataset::generate(&small(1)).unwrap();
        for e in d.split(Split::Train) {
            assert_eq!(e.scene.tasks()[e.scene.background % 4], e.instruction);
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let d = Dataset::generate(&small(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        d.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(bytes(&back), bytes(&d));
        assert!(d
            .episodes
            .iter()
            .zip(&back.episodes)
            .all(|(a, b)| a.expert.bit_eq(&b.expert)));
    }

    #[test]
    fn tampered_header_is_rejected() {
        let d = Dataset::generate(&small(1)).unwrap();
        let text = String::from_utf8(bytes(&d)).unwrap().replacen("\"seed\":7", "\"seed\":9", 1);
        assert!(matches!(Dataset::read_from(text.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        for spec in [
            DatasetSpec { alpha: 0, ..DatasetSpec::default() },
            DatasetSpec { alpha: 5, ..DatasetSpec::default() },
            DatasetSpec { n_episodes: 0, ..DatasetSpec::default() },
            DatasetSpec { ood_jitter: 1.0, ..DatasetSpec::default() },
        ] {
            assert!(matches!(Dataset::generate(&spec), Err(Error::Config { .. })));
        }
    }
}
