use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dualbranch::{DetachPolicy, Mode, Objective, TrainConfig};
use crate::error::{Error, Result};
use crate::flowhead::FlowConfig;
use crate::gradcore::{AdamWConfig, Schedule};
use crate::seqmodel::ModelConfig;
use crate::worldgen::{DatasetSpec, TaskRule};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
const HEADER: &str = "# dualvla run config v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    pub mode: Mode,
    pub lambda: f64,
    pub beta: f64,
    pub detach_hq_prior_for_fm: bool,
    pub sg_posterior_baseline: bool,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Wall-clock seconds in metrics records. Off by default so that two runs
    /// of one config produce byte-identical streams.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// Episodes taken from the front of each evaluation split; 0 means all.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub euler_steps: usize,
}

/// Flow-head knobs; the remaining `FlowConfig` fields follow from the data and model.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub time_features: usize,
}

/// Everything a run depends on. Serialized as flat `section.key = value`
/// lines; the config hash is the SHA-256 of that canonical text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Master seed for weights, batches and flow noise. The dataset has its own.
    pub seed: u64,
    pub model: ModelConfig,
    pub head: HeadSettings,
    pub data: DatasetSpec,
    /// Load this dataset file instead of generating from `data`.
    pub data_path: Option<PathBuf>,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        Self {
            seed: 0,
            model: ModelConfig::default(),
            head: HeadSettings {
                d_model: flow.d_model,
                n_heads: flow.n_heads,
                n_blocks: flow.n_blocks,
                time_features: flow.time_features,
            },
            data: DatasetSpec::default(),
            data_path: None,
            train: TrainSettings {
                steps: 3000,
                batch_size: 16,
                lr: AdamWConfig::default().lr,
                schedule: ScheduleKind::Cosine,
                clip_norm: Some(1.0),
                weight_decay: 0.0,
                mode: Mode::Dual,
                lambda: 0.3,
                beta: 0.1,
                detach_hq_prior_for_fm: true,
                sg_posterior_baseline: true,
                checkpoint_every: 1000,
                log_every: 10,
                wall_clock: false,
            },
            eval: EvalSettings {
                episodes: 0,
                seeds: vec![0, 1, 2],
                euler_steps: flow.sample_steps,
            },
            out_dir: PathBuf::from("run"),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

struct Field {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str, &str) -> Result<()>,
}

macro_rules! plain {
    ($key:literal, $($path:ident).+) => {
        Field {
            key: $key,
            get: |c| c.$($path).+.to_string(),
            set: |c, k, v| {
                c.$($path).+ = parse(k, v)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        plain!("seed", seed),
        Field {
            key: "out_dir",
            get: |c| c.out_dir.display().to_string(),
            set: |c, _, v| {
                c.out_dir = PathBuf::from(v);
                Ok(())
            },
        },
        plain!("model.d_model", model.d_model),
        plain!("model.n_layers", model.n_layers),
        plain!("model.n_heads", model.n_heads),
        plain!("model.num_queries", model.num_queries),
        plain!("model.max_seq_len", model.max_seq_len),
        plain!("head.d_model", head.d_model),
        plain!("head.n_heads", head.n_heads),
        plain!("head.n_blocks", head.n_blocks),
        plain!("head.time_features", head.time_features),
        Field {
            key: "data.path",
            get: |c| c.data_path.as_ref().map_or(String::new(), |p| p.display().to_string()),
            set: |c, _, v| {
                c.data_path = (!v.is_empty()).then(|| PathBuf::from(v));
                Ok(())
            },
        },
        plain!("data.n_episodes", data.n_episodes),
        plain!("data.alpha", data.alpha),
        plain!("data.eval_alpha", data.eval_alpha),
        plain!("data.episodes_per_family", data.episodes_per_family),
        Field {
            key: "data.rule",
            get: |c| match c.data.rule {
                TaskRule::Cue => "cue".into(),
                TaskRule::Uniform => "uniform".into(),
            },
            set: |c, k, v| {
                c.data.rule = match v {
                    "cue" => TaskRule::Cue,
                    "uniform" => TaskRule::Uniform,
                    _ => return Err(bad(k, "expected cue or uniform")),
                };
                Ok(())
            },
        },
        plain!("data.ood_shift", data.ood_shift),
        plain!("data.ood_jitter", data.ood_jitter),
        plain!("data.eval_ratio", data.eval_ratio),
        plain!("data.seed", data.seed),
        plain!("world.extent", data.world.extent),
        plain!("world.bins", data.world.bins),
        plain!("world.success_radius", data.world.success_radius),
        plain!("world.v_max", data.world.v_max),
        plain!("world.horizon", data.world.horizon),
        plain!("world.approach_steps", data.world.approach_steps),
        plain!("world.carry_steps", data.world.carry_steps),
        plain!("world.action_dim", data.world.action_dim),
        plain!("world.min_separation", data.world.min_separation),
        plain!("world.objects_per_scene", data.world.objects_per_scene),
        plain!("world.receptacles_per_scene", data.world.receptacles_per_scene),
        plain!("train.steps", train.steps),
        plain!("train.batch_size", train.batch_size),
        plain!("train.lr", train.lr),
        Field {
            key: "train.schedule",
            get: |c| match c.train.schedule {
                ScheduleKind::Constant => "constant".into(),
                ScheduleKind::Cosine => "cosine".into(),
            },
            set: |c, k, v| {
                c.train.schedule = match v {
                    "constant" => ScheduleKind::Constant,
                    "cosine" => ScheduleKind::Cosine,
                    _ => return Err(bad(k, "expected constant or cosine")),
                };
                Ok(())
            },
        },
        Field {
            key: "train.clip_norm",
            get: |c| show_opt(c.train.clip_norm),
            set: |c, k, v| {
                c.train.clip_norm = opt_f64(k, v)?;
                Ok(())
            },
        },
        plain!("train.weight_decay", train.weight_decay),
        Field {
            key: "train.mode",
            get: |c| c.train.mode.name().into(),
            set: |c, k, v| {
                c.train.mode = Mode::parse(v).ok_or_else(|| bad(k, "expected dual, baseline or vision_only"))?;
                Ok(())
            },
        },
        plain!("train.lambda", train.lambda),
        plain!("train.beta", train.beta),
        plain!("train.detach_hq_prior_for_fm", train.detach_hq_prior_for_fm),
        plain!("train.sg_posterior_baseline", train.sg_posterior_baseline),
        plain!("train.checkpoint_every", train.checkpoint_every),
        plain!("train.log_every", train.log_every),
        plain!("train.wall_clock", train.wall_clock),
        plain!("eval.episodes", eval.episodes),
        Field {
            key: "eval.seeds",
            get: |c| c.eval.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            set: |c, k, v| {
                c.eval.seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(k, s.trim()))
                    .collect::<Result<_>>()?;
                Ok(())
            },
        },
        plain!("eval.euler_steps", eval.euler_steps),
    ]
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        fields().iter().map(|f| f.key).collect()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let f = fields().into_iter().find(|f| f.key == key).ok_or_else(|| bad(key, "unknown key"))?;
        Ok((f.get)(self))
    }

    /// Sets one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = fields().into_iter().find(|f| f.key == key).ok_or_else(|| bad(key, "unknown key"))?;
        (f.set)(self, key, value)
    }

    /// Canonical text: header comment, then every key in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for f in fields() {
            out.push_str(&format!("{} = {}\n", f.key, (f.get)(self)));
        }
        out
    }

    /// Starts from the defaults and applies each line; keys may be omitted.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(&format!("line {}", n + 1), "expected `key = value`"))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(bad(k, "given twice"));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Hash of the canonical text without `out_dir`, so the same run
    /// written to two places carries the same identity.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out_dir "))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.objective().validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(bad("train.batch_size", "must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(bad("train.lr", "must be positive and finite"));
        }
        if t.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(bad("train.clip_norm", "must be positive or none"));
        }
        if t.log_every == 0 {
            return Err(bad("train.log_every", "must be positive"));
        }
        if self.eval.seeds.is_empty() {
            return Err(bad("eval.seeds", "needs at least one seed"));
        }
        if self.eval.euler_steps == 0 {
            return Err(bad("eval.euler_steps", "must be positive"));
        }
        if self.head.time_features == 0 || !self.head.time_features.is_multiple_of(2) {
            return Err(bad("head.time_features", "must be positive and even"));
        }
        if !self.head.d_model.is_multiple_of(self.head.n_heads.max(1)) || self.head.n_heads == 0 {
            return Err(bad("head.n_heads", "must divide head.d_model"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            base_vocab: self.data.world.vocab().size(),
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            horizon: self.data.world.horizon,
            action_dim: self.data.world.action_dim,
            d_model: self.head.d_model,
            n_heads: self.head.n_heads,
            n_blocks: self.head.n_blocks,
            cond_rows: self.model.num_queries,
            cond_dim: self.model.d_model,
            time_features: self.head.time_features,
            sample_steps: self.eval.euler_steps,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn objective(&self) -> Objective {
        let t = &self.train;
        let detach = DetachPolicy {
            detach_hq_prior_for_fm: t.detach_hq_prior_for_fm,
            sg_posterior_baseline: t.sg_posterior_baseline,
        };
        match t.mode {
            Mode::Dual => Objective {
                mode: Mode::Dual,
                lambda: t.lambda,
                beta: t.beta,
                detach,
            },
            Mode::Baseline => Objective { detach, ..Objective::baseline() },
            Mode::VisionOnly => Objective { detach, ..Objective::vision_only() },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            objective: self.objective(),
            batch_size: t.batch_size,
            optimizer: AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                clip_norm: t.clip_norm,
                schedule: match t.schedule {
                    ScheduleKind::Constant => Schedule::Constant,
                    ScheduleKind::Cosine => Schedule::Cosine { total_steps: t.steps },
                },
                ..AdamWConfig::default()
            },
            seed: self.seed,
        }
    }
}
