use std::path::PathBuf;

use super::config::RunConfig;
use super::run::{evaluate, load_dataset, save_eval, train, RunPaths, TrainOptions};
use crate::error::{Error, Result};
use crate::infodiag::Condition;
use crate::worldgen::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Beta,
    NumQueries,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lambda" => Some(SweepAxis::Lambda),
            "beta" => Some(SweepAxis::Beta),
            "k" | "K" | "num_queries" => Some(SweepAxis::NumQueries),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Beta => "beta",
            SweepAxis::NumQueries => "k",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "train.lambda",
            SweepAxis::Beta => "train.beta",
            SweepAxis::NumQueries => "model.num_queries",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub out_dir: PathBuf,
    pub final_total: f64,
    /// Full-condition success per evaluation split, `None` for empty splits.
    pub id: Option<f64>,
    pub ambiguous: Option<f64>,
    pub ood: Option<f64>,
}

/// One run per value, in order, all sharing the base config's data seed.
/// Each run lands in `<out_dir>/<axis>=<value>`.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config {
            key: axis.key().into(),
            reason: "sweep needs at least one value".into(),
        });
    }
    let data = load_dataset(base)?;
    let mut rows = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        cfg.set(axis.key(), v)?;
        cfg.out_dir = base.out_dir.join(format!("{}={v}", axis.name()));
        cfg.validate()?;
        let (tr, summary) = train(&cfg, &TrainOptions::default())?;
        let report = evaluate(&cfg, &tr, &data)?;
        save_eval(&RunPaths::new(&cfg.out_dir).eval(), &cfg.hash(), &report)?;
        let rate = |s| report.get(s, Condition::Full).map(|r| r.success_rate);
        rows.push(SweepRow {
            value: v.clone(),
            out_dir: cfg.out_dir.clone(),
            final_total: summary.last.map_or(f64::NAN, |r| r.total),
            id: rate(Split::Id),
            ambiguous: rate(Split::Ambiguous),
            ood: rate(Split::Ood),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let cell = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut s = format!("{},final_total,success_id,success_ambiguous,success_ood\n", axis.name());
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            r.final_total,
            cell(r.id),
            cell(r.ambiguous),
            cell(r.ood)
        ));
    }
    s
}
