use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First line of every file the harness writes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
}

impl FileHeader {
    pub fn new(format: &str, version: u32, config_hash: &str) -> Self {
        Self {
            format: format.into(),
            version,
            config_hash: config_hash.into(),
        }
    }

    pub fn line(&self) -> String {
        serde_json::to_string(self).expect("header serializes")
    }

    /// Parses a header line and checks its format tag and version.
    pub fn parse(line: &str, format: &str, version: u32) -> Result<Self> {
        let h: Self = serde_json::from_str(line).map_err(|e| Error::Format(format!("{format} header: {e}")))?;
        if h.format != format || h.version != version {
            return Err(Error::Format(format!(
                "expected {format} v{version}, found {} v{}",
                h.format, h.version
            )));
        }
        Ok(h)
    }
}

pub const METRICS_FORMAT: &str = "dualvla-metrics";
pub const METRICS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// Completed optimizer steps.
    pub step: u64,
    pub fm_post: f64,
    pub fm_prior: f64,
    pub llr: f64,
    pub total: f64,
    pub lp_prior: f64,
    pub lp_post: f64,
    /// Learning rate used for this step.
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<f64>,
    /// Evaluation or diagnostic results attached to this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
}

/// Append-only writer; rejects records whose step goes backwards.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path, config_hash: &str) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", FileHeader::new(METRICS_FORMAT, METRICS_FORMAT_VERSION, config_hash).line())?;
        out.flush()?;
        Ok(Self { out, last_step: None })
    }

    /// Reopens a stream after a resume from `step`: records past that step,
    /// written by the interrupted run, are dropped so the stream continues as
    /// if it had never stopped.
    pub fn resume(path: &Path, config_hash: &str, step: u64) -> Result<Self> {
        let (header, records) = read_metrics(path)?;
        if header.config_hash != config_hash {
            return Err(Error::contract("metrics stream belongs to a different config"));
        }
        let kept: Vec<_> = records.into_iter().filter(|r| r.step <= step).collect();
        let mut w = Self::create(path, config_hash)?;
        for r in &kept {
            w.push(r)?;
        }
        Ok(w)
    }

    pub fn push(&mut self, r: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| r.step < s) {
            return Err(Error::contract(format!(
                "metrics step {} after {}",
                r.step,
                self.last_step.unwrap_or(0)
            )));
        }
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        self.last_step = Some(r.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<(FileHeader, Vec<MetricsRecord>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty metrics file".into()))??;
    let header = FileHeader::parse(&first, METRICS_FORMAT, METRICS_FORMAT_VERSION)?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if !line.is_empty() {
            records.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("metrics record: {e}")))?);
        }
    }
    Ok((header, records))
}

/// `step,fm_post,fm_prior,llr,total,lr` rows for plotting.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("step,fm_post,fm_prior,llr,total,lr\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.fm_post, r.fm_prior, r.llr, r.total, r.lr
        ));
    }
    s
}
