use std::path::{Path, PathBuf};

use serde_json::json;

use dualvla::dualbranch::Trainer;
use dualvla::harness::{
    self, check_compatible, diagnosis_csv, load_dataset, metrics_csv, read_metrics, restore_trainer, save_eval,
    sweep_csv, EvalReport, FileHeader, RunConfig, RunPaths, SweepAxis, TrainOptions, OUTPUT_ROOT_ENV,
};
use dualvla::infodiag::{brute_force_cmi, empirical_joint, model_nll, Condition};
use dualvla::worldgen::{Dataset, Split};

use crate::{svg, ConfigArgs, Failure, RunArgs};

type Outcome = Result<(), Failure>;

pub const MANIFEST_FORMAT: &str = "dualvla-manifest";
pub const DIAGNOSE_FORMAT: &str = "dualvla-diagnose";
pub const SWEEP_FORMAT: &str = "dualvla-sweep";
pub const PLOT_FORMAT: &str = "dualvla-plot";

/// Relative output locations resolve against `$DUALVLA_OUT` when it is set.
fn resolve(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() && p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.out_dir = resolve(&cfg.out_dir);
    cfg.validate()?;
    Ok(cfg)
}

/// CSV with a leading comment line carrying format, version and config hash.
fn versioned_csv(format: &str, hash: &str, body: &str) -> String {
    format!("# {}\n{body}", FileHeader::new(format, 1, hash).line())
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn gen_data(
    args: &ConfigArgs,
    out: &Path,
    alpha: Option<usize>,
    eval_alpha: Option<usize>,
    n: Option<usize>,
    seed: Option<u64>,
    rule: Option<String>,
    ood: Option<bool>,
) -> Outcome {
    let mut cfg = load_config(args)?;
    let overrides = [
        ("data.alpha", alpha.map(|v| v.to_string())),
        ("data.eval_alpha", eval_alpha.map(|v| v.to_string())),
        ("data.n_episodes", n.map(|v| v.to_string())),
        ("data.seed", seed.map(|v| v.to_string())),
        ("data.rule", rule),
        ("data.ood_shift", ood.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.data.validate()?;
    let data = Dataset::generate(&cfg.data)?;
    let out = resolve(out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data.save(&out)?;

    let hash = data.spec.hash();
    let mut splits = serde_json::Map::new();
    println!("dataset {} ({})", out.display(), &hash[..12]);
    println!("{:<10} {:>8} {:>10} {:>10}", "split", "episodes", "H(l|v)", "I(l;a|v)");
    for split in Split::ALL {
        let eps: Vec<_> = data.split(split).collect();
        if eps.is_empty() {
            continue;
        }
        let info = brute_force_cmi(&empirical_joint(eps.iter().copied())?);
        println!(
            "{:<10} {:>8} {:>10.6} {:>10.6}",
            split.name(),
            eps.len(),
            info.h_l_given_v,
            info.cmi
        );
        splits.insert(
            split.name().into(),
            json!({ "episodes": eps.len(), "h_l_given_v": info.h_l_given_v, "cmi": info.cmi }),
        );
    }
    let manifest = json!({
        "dataset": out.file_name().map(|f| f.to_string_lossy().into_owned()),
        "spec_hash": hash,
        "alpha": data.spec.alpha,
        "eval_alpha": data.spec.eval_alpha,
        "ood_shift": data.spec.ood_shift,
        "ood_background": data.spec.ood_background(),
        "splits": splits,
    });
    let mut path = out.into_os_string();
    path.push(".manifest");
    write(
        Path::new(&path),
        &format!("{}\n{}\n", FileHeader::new(MANIFEST_FORMAT, 1, &hash).line(), manifest),
    )
}

pub fn train(args: &ConfigArgs, resume: Option<PathBuf>, quiet: bool) -> Outcome {
    let cfg = load_config(args)?;
    let opts = TrainOptions {
        resume: resume.as_deref().map(resolve),
        stop_after: None,
        verbose: !quiet,
    };
    let (_, summary) = harness::train(&cfg, &opts)?;
    println!("run {} ({})", cfg.out_dir.display(), &cfg.hash()[..12]);
    println!("steps {}", summary.steps);
    if let Some(r) = &summary.last {
        println!(
            "last total {:.6}  fm_post {:.6}  fm_prior {:.6}  llr {:.6}",
            r.total, r.fm_post, r.fm_prior, r.llr
        );
    }
    if let Some(p) = &summary.final_checkpoint {
        println!("final checkpoint {}", p.display());
    }
    Ok(())
}

struct OpenRun {
    cfg: RunConfig,
    paths: RunPaths,
    /// Hash of the stored config, before any evaluation overrides.
    hash: String,
    trainer: Trainer<f64>,
    data: Dataset,
}

fn open_run(args: &RunArgs) -> Result<OpenRun, Failure> {
    let paths = RunPaths::new(resolve(&args.run));
    if !paths.config().is_file() {
        return Err(Failure {
            code: "E_IO",
            message: format!("{} is not a run directory (no config.txt)", paths.root.display()),
        });
    }
    let mut cfg = RunConfig::load(&paths.config())?;
    let ckpt = args.checkpoint.as_deref().map_or(paths.final_checkpoint(), resolve);
    let trainer = restore_trainer(&cfg, &ckpt)?;
    let data = match &args.data {
        Some(p) => Dataset::load(p)?,
        None => load_dataset(&cfg)?,
    };
    check_compatible(&cfg, &data)?;
    let hash = cfg.hash();
    // Evaluation knobs only; the checkpoint was already matched against the stored config.
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(s) = &args.seeds {
        cfg.set("eval.seeds", s)?;
    }
    Ok(OpenRun {
        cfg,
        paths,
        hash,
        trainer,
        data,
    })
}

fn print_eval(r: &EvalReport) {
    println!("{:<10} {:>12} {:>8} {:>8}  per-seed", "split", "condition", "success", "trials");
    for row in std::iter::once(&r.expert).chain(&r.rows) {
        let label = if std::ptr::eq(row, &r.expert) { "expert" } else { row.condition.name() };
        let per: Vec<String> = row.per_seed.iter().map(|x| format!("{x:.3}")).collect();
        println!(
            "{:<10} {:>12} {:>8.3} {:>8}  {}",
            row.split,
            label,
            row.success_rate,
            row.trials,
            per.join(" ")
        );
    }
}

pub fn eval(args: &RunArgs) -> Outcome {
    let run = open_run(args)?;
    let report = harness::evaluate(&run.cfg, &run.trainer, &run.data)?;
    save_eval(&run.paths.eval(), &run.hash, &report)?;
    print_eval(&report);
    Ok(())
}

fn split_nll(cfg: &RunConfig, tr: &Trainer<f64>, data: &Dataset, split: Split) -> Result<Option<f64>, Failure> {
    let n = if cfg.eval.episodes == 0 || split == Split::Train {
        usize::MAX
    } else {
        cfg.eval.episodes
    };
    let eps: Vec<_> = data.split(split).take(n).collect();
    if eps.is_empty() {
        return Ok(None);
    }
    Ok(Some(model_nll(&tr.model, &tr.store, &eps)?.nll_per_token))
}

pub fn diagnose(args: &RunArgs, baseline: Option<&Path>) -> Outcome {
    let run = open_run(args)?;
    let d = harness::diagnose(&run.cfg, &run.trainer, &run.data)?;
    write(
        &run.paths.diagnose_csv(),
        &versioned_csv(DIAGNOSE_FORMAT, &run.hash, &diagnosis_csv(&d)),
    )?;
    println!(
        "{:<10} {:>10} {:>10} {:>8} {:>9} {:>9} {:>9} {:>6} {:>6}",
        "split", "NLL", "PPL", "StdDev", "H(l|v)", "I(l;a|v)", "PMI-diff", "full", "vision"
    );
    for sd in &d.splits {
        let rate = |c| {
            d.eval
                .rows
                .iter()
                .find(|r| r.split == sd.split && r.condition == c)
                .map_or("-".to_string(), |r| format!("{:.3}", r.success_rate))
        };
        let i = &sd.info;
        println!(
            "{:<10} {:>10.4} {:>10.3} {:>8.4} {:>9.5} {:>9.5} {:>9.2e} {:>6} {:>6}",
            sd.split,
            i.nll_per_token.unwrap_or(f64::NAN),
            i.ppl.unwrap_or(f64::NAN),
            i.nll_std.unwrap_or(f64::NAN),
            i.h_l_given_v,
            i.cmi,
            sd.pmi_discrepancy,
            rate(Condition::Full),
            rate(Condition::VisionOnly)
        );
    }
    if let Some(base_dir) = baseline {
        let base = open_run(&RunArgs {
            run: base_dir.to_path_buf(),
            checkpoint: None,
            data: args.data.clone(),
            episodes: args.episodes,
            seeds: None,
        })?;
        check_compatible(&base.cfg, &run.data)?;
        println!();
        println!("{:<10} {:>10} {:>10} {:>10}  direction", "split", "baseline", "this", "delta");
        for split in Split::ALL {
            let (Some(b), Some(t)) = (
                split_nll(&run.cfg, &base.trainer, &run.data, split)?,
                split_nll(&run.cfg, &run.trainer, &run.data, split)?,
            ) else {
                continue;
            };
            let dir = if t >= b { "this >= baseline" } else { "this < baseline" };
            println!("{:<10} {:>10.4} {:>10.4} {:>+10.4}  {dir}", split.name(), b, t, t - b);
        }
    }
    Ok(())
}

pub fn sweep(args: &ConfigArgs, axis: &str, values: &str) -> Outcome {
    let cfg = load_config(args)?;
    let axis = SweepAxis::parse(axis).ok_or_else(|| Failure::usage(format!("unknown sweep axis `{axis}`")))?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let rows = harness::sweep(&cfg, axis, &values)?;
    let csv = sweep_csv(axis, &rows);
    let path = cfg.out_dir.join(format!("sweep-{}.csv", axis.name()));
    write(&path, &versioned_csv(SWEEP_FORMAT, &cfg.hash(), &csv))?;
    print!("{csv}");
    println!("summary {}", path.display());
    Ok(())
}

pub fn plot(run: Option<&Path>, metrics: Option<&Path>, out: Option<&Path>) -> Outcome {
    let metrics = match (metrics, run) {
        (Some(m), _) => resolve(m),
        (None, Some(r)) => RunPaths::new(resolve(r)).metrics(),
        (None, None) => return Err(Failure::usage("plot needs --run or --metrics")),
    };
    let (header, records) = read_metrics(&metrics)?;
    let dir = metrics.parent().map(Path::to_path_buf).unwrap_or_default();
    let csv_path = dir.join("metrics.csv");
    write(
        &csv_path,
        &versioned_csv(PLOT_FORMAT, &header.config_hash, &metrics_csv(&records)),
    )?;
    let svg_path = out.map_or_else(|| dir.join("metrics.svg"), resolve);
    write(&svg_path, &svg::render(&records, &header.config_hash))?;
    println!("{} records", records.len());
    println!("csv {}", csv_path.display());
    println!("svg {}", svg_path.display());
    Ok(())
}
