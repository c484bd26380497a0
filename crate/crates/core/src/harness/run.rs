use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{FileHeader, MetricsRecord, MetricsWriter};
use crate::dualbranch::{Trainer, TrainerState};
use crate::error::{Error, Result};
use crate::infodiag::{
    brute_force_cmi, empirical_joint, eval_policy, eval_success, model_nll, pmi_identity_check, Condition, InfoReport,
    ProbeResult,
};
use crate::worldgen::{Dataset, Episode, Split};

pub const CHECKPOINT_FORMAT: &str = "dualvla-checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const EVAL_FORMAT: &str = "dualvla-eval";
pub const EVAL_FORMAT_VERSION: u32 = 1;

/// File names inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:08}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.jsonl")
    }

    pub fn diagnose_csv(&self) -> PathBuf {
        self.root.join("diagnose.csv")
    }
}

/// Weights, optimizer moments and random streams, tied to one config.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub config_hash: String,
    pub state: TrainerState,
}

impl CheckpointRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(
            w,
            "{}",
            FileHeader::new(CHECKPOINT_FORMAT, CHECKPOINT_FORMAT_VERSION, &self.config_hash).line()
        )?;
        serde_json::to_writer(&mut w, &self.state).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut first = String::new();
        r.read_line(&mut first)?;
        let header = FileHeader::parse(first.trim_end(), CHECKPOINT_FORMAT, CHECKPOINT_FORMAT_VERSION)?;
        let state = serde_json::from_reader(r).map_err(|e| Error::Format(format!("checkpoint body: {e}")))?;
        Ok(Self {
            config_hash: header.config_hash,
            state,
        })
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_path {
        Some(p) => Dataset::load(p),
        None => Dataset::generate(&cfg.data),
    }
}

/// Rejects datasets whose vocabulary or action shape differs from the model's.
pub fn check_compatible(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let (a, b) = (&cfg.data.world, &data.spec.world);
    if a.vocab().size() != b.vocab().size() || a.horizon != b.horizon || a.action_dim != b.action_dim {
        return Err(Error::contract(format!(
            "dataset {} does not match the run's vocabulary or action shape",
            &data.spec.hash()[..12]
        )));
    }
    Ok(())
}

pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer<f64>> {
    Trainer::new(cfg.model_config(), cfg.flow_config(), cfg.train_config())
}

/// Restores the trainer saved in `ckpt`, which must carry `cfg`'s hash.
pub fn restore_trainer(cfg: &RunConfig, ckpt: &Path) -> Result<Trainer<f64>> {
    let rec = CheckpointRecord::load(ckpt)?;
    if rec.config_hash != cfg.hash() {
        return Err(Error::contract(format!(
            "checkpoint config hash {} differs from run config {}",
            &rec.config_hash[..12.min(rec.config_hash.len())],
            &cfg.hash()[..12]
        )));
    }
    let mut tr = new_trainer(cfg)?;
    tr.import_state(&rec.state)?;
    Ok(tr)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint of the same config.
    pub resume: Option<PathBuf>,
    /// Stop early after this many completed steps (simulates an interruption).
    pub stop_after: Option<u64>,
    /// Echo a progress line to stderr at every logged step.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<MetricsRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Trains per `cfg`, writing config, metrics and checkpoints under `cfg.out_dir`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<(Trainer<f64>, TrainSummary)> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.root)?;
    let data = load_dataset(cfg)?;
    check_compatible(cfg, &data)?;
    let train: Vec<Episode> = data.split_vec(Split::Train);
    let hash = cfg.hash();
    let (mut tr, mut metrics) = match &opts.resume {
        Some(ckpt) => {
            let tr = restore_trainer(cfg, ckpt)?;
            let m = MetricsWriter::resume(&paths.metrics(), &hash, tr.step())?;
            (tr, m)
        }
        None => {
            cfg.save(&paths.config())?;
            (new_trainer(cfg)?, MetricsWriter::create(&paths.metrics(), &hash)?)
        }
    };
    let t0 = Instant::now();
    let end = opts.stop_after.map_or(cfg.train.steps, |s| s.min(cfg.train.steps));
    let mut last = None;
    while tr.step() < end {
        let lr = tr.opt.current_lr();
        let l = tr.train_on(&train)?;
        let step = tr.step();
        if step % cfg.train.log_every == 0 || step == cfg.train.steps {
            let rec = MetricsRecord {
                step,
                fm_post: l.fm_post,
                fm_prior: l.fm_prior,
                llr: l.llr,
                total: l.total,
                lp_prior: l.lp_prior,
                lp_post: l.lp_post,
                lr,
                wall_clock: cfg.train.wall_clock.then(|| t0.elapsed().as_secs_f64()),
                payload: None,
            };
            if opts.verbose {
                eprintln!(
                    "step {step:>6}  total {:.5}  fm_post {:.5}  fm_prior {:.5}  llr {:.5}",
                    l.total, l.fm_post, l.fm_prior, l.llr
                );
            }
            metrics.push(&rec)?;
            last = Some(rec);
        }
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            checkpoint(&tr, &hash).save(&paths.checkpoint(step))?;
        }
    }
    let final_checkpoint = if tr.step() == cfg.train.steps {
        let p = paths.final_checkpoint();
        checkpoint(&tr, &hash).save(&p)?;
        Some(p)
    } else {
        None
    };
    let steps = tr.step();
    Ok((
        tr,
        TrainSummary {
            steps,
            last,
            final_checkpoint,
        },
    ))
}

fn checkpoint(tr: &Trainer<f64>, hash: &str) -> CheckpointRecord {
    CheckpointRecord {
        config_hash: hash.into(),
        state: tr.export_state(),
    }
}

fn eval_episodes<'a>(cfg: &RunConfig, data: &'a Dataset, split: Split) -> Vec<&'a Episode> {
    let n = if cfg.eval.episodes == 0 { usize::MAX } else { cfg.eval.episodes };
    data.split(split).take(n).collect()
}

pub const EVAL_SPLITS: [Split; 3] = [Split::Id, Split::Ambiguous, Split::Ood];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Expert trajectories replayed on the ID split; 1.0 by construction.
    pub expert: ProbeResult,
    /// One row per (split, condition) with a non-empty split.
    pub rows: Vec<ProbeResult>,
}

impl EvalReport {
    pub fn get(&self, split: Split, condition: Condition) -> Option<&ProbeResult> {
        self.rows
            .iter()
            .find(|r| r.split == split.name() && r.condition == condition)
    }
}

/// Full-condition and vision-only success on every evaluation split.
pub fn evaluate(cfg: &RunConfig, tr: &Trainer<f64>, data: &Dataset) -> Result<EvalReport> {
    check_compatible(cfg, data)?;
    let w = &data.spec.world;
    let id = eval_episodes(cfg, data, Split::Id);
    let expert = eval_policy(&id, w, &cfg.eval.seeds, "id", Condition::Full, |ep, _| Ok(ep.expert.clone()))?;
    let mut rows = Vec::new();
    for split in EVAL_SPLITS {
        let eps = eval_episodes(cfg, data, split);
        if eps.is_empty() {
            continue;
        }
        for condition in [Condition::Full, Condition::VisionOnly] {
            rows.push(eval_success(
                &tr.model,
                &tr.store,
                &eps,
                w,
                &cfg.eval.seeds,
                cfg.eval.euler_steps,
                split.name(),
                condition,
            )?);
        }
    }
    Ok(EvalReport { expert, rows })
}

pub fn save_eval(path: &Path, config_hash: &str, report: &EvalReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", FileHeader::new(EVAL_FORMAT, EVAL_FORMAT_VERSION, config_hash).line())?;
    for r in std::iter::once(&report.expert).chain(&report.rows) {
        writeln!(w, "{}", serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDiagnosis {
    pub split: String,
    /// Corpus measures plus the model's instruction NLL given vision.
    pub info: InfoReport,
    /// Largest chain-rule PMI disagreement on the empirical joint.
    pub pmi_discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub splits: Vec<SplitDiagnosis>,
    pub eval: EvalReport,
}

pub fn diagnose(cfg: &RunConfig, tr: &Trainer<f64>, data: &Dataset) -> Result<Diagnosis> {
    let mut splits = Vec::new();
    for split in Split::ALL {
        let eps = if split == Split::Train {
            data.split(split).collect()
        } else {
            eval_episodes(cfg, data, split)
        };
        if eps.is_empty() {
            continue;
        }
        let joint = empirical_joint(eps.iter().copied())?;
        let mut info = brute_force_cmi(&joint);
        let nll = model_nll(&tr.model, &tr.store, &eps)?;
        info.nll_per_token = Some(nll.nll_per_token);
        info.ppl = Some(nll.ppl);
        info.nll_std = Some(nll.std);
        info.samples = eps.len();
        splits.push(SplitDiagnosis {
            split: split.name().into(),
            pmi_discrepancy: pmi_identity_check(&joint).0,
            info,
        });
    }
    Ok(Diagnosis {
        splits,
        eval: evaluate(cfg, tr, data)?,
    })
}

/// Table-style CSV: one row per split.
pub fn diagnosis_csv(d: &Diagnosis) -> String {
    let mut s = String::from("split,nll,ppl,std,h_l_given_v,cmi,pmi_discrepancy,success_full,success_vision_only\n");
    for sd in &d.splits {
        let rate = |c| {
            d.eval
                .rows
                .iter()
                .find(|r| r.split == sd.split && r.condition == c)
                .map_or(String::new(), |r| r.success_rate.to_string())
        };
        let i = &sd.info;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            sd.split,
            i.nll_per_token.unwrap_or(f64::NAN),
            i.ppl.unwrap_or(f64::NAN),
            i.nll_std.unwrap_or(f64::NAN),
            i.h_l_given_v,
            i.cmi,
            sd.pmi_discrepancy,
            rate(Condition::Full),
            rate(Condition::VisionOnly)
        ));
    }
    s
}
