use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{NormReport, ParamStats, Summary};
use crate::error::{Error, Result};
use crate::training::EvalReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?} (json or csv)"))),
        }
    }
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Noised blocks joined by `;`, or `none` for the clean run.
    pub blocks_noised: String,
    pub mean_acc: f64,
    pub ci95: f64,
    pub n: usize,
    pub seed: u64,
}

impl AblationRow {
    pub fn new(blocks: &[usize], report: &EvalReport) -> Self {
        let blocks_noised = if blocks.is_empty() {
            "none".to_string()
        } else {
            blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(";")
        };
        Self {
            blocks_noised,
            mean_acc: report.mean_accuracy,
            ci95: report.ci95_halfwidth,
            n: report.episode_count,
            seed: report.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Report {
    Eval(EvalReport),
    Norms(NormReport),
    PostMultipliers(Vec<ParamStats>),
    Ablation(Vec<AblationRow>),
}

#[derive(Serialize, Deserialize)]
struct StatsRow {
    block: usize,
    param: String,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
    mean: f64,
}

#[derive(Serialize)]
struct EvalRow {
    mean: f64,
    ci95: f64,
    n: usize,
    seed: u64,
}

fn to_csv<S: Serialize>(rows: impl IntoIterator<Item = S>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn from_csv<D: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<D>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// CSV schema: `blocks_noised,mean_acc,ci95,n,seed`.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    to_csv(rows)
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    from_csv(text)
}

/// CSV schema: `block,self_norm_mean,cross_norm_mean`.
pub fn parse_norm_csv(text: &str) -> Result<NormReport> {
    Ok(NormReport { blocks: from_csv(text)? })
}

/// CSV schema: `block,param,min,q1,median,q3,max,mean` (raw values are
/// JSON-only).
pub fn parse_stats_csv(text: &str) -> Result<Vec<(usize, String, Summary)>> {
    Ok(from_csv::<StatsRow>(text)?
        .into_iter()
        .map(|r| {
            (
                r.block,
                r.param,
                Summary {
                    min: r.min,
                    q1: r.q1,
                    median: r.median,
                    q3: r.q3,
                    max: r.max,
                    mean: r.mean,
                },
            )
        })
        .collect())
}

fn render(report: &Report, format: Format) -> Result<String> {
    Ok(match (report, format) {
        (Report::Eval(r), Format::Json) => serde_json::to_string_pretty(r)?,
        (Report::Norms(r), Format::Json) => serde_json::to_string_pretty(r)?,
        (Report::PostMultipliers(r), Format::Json) => serde_json::to_string_pretty(r)?,
        (Report::Ablation(r), Format::Json) => serde_json::to_string_pretty(r)?,
        (Report::Eval(r), Format::Csv) => to_csv([EvalRow {
            mean: r.mean_accuracy,
            ci95: r.ci95_halfwidth,
            n: r.episode_count,
            seed: r.seed,
        }])?,
        (Report::Norms(r), Format::Csv) => to_csv(r.blocks.to_vec())?,
        (Report::PostMultipliers(r), Format::Csv) => to_csv(r.iter().map(|p| StatsRow {
            block: p.block,
            param: p.param.clone(),
            min: p.summary.min,
            q1: p.summary.q1,
            median: p.summary.median,
            q3: p.summary.q3,
            max: p.summary.max,
            mean: p.summary.mean,
        }))?,
        (Report::Ablation(r), Format::Csv) => ablation_csv(r)?,
    })
}

/// Deterministic serialization of a report to `path`.
pub fn export_report(report: &Report, path: &Path, format: Format) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = render(report, format)?;
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
