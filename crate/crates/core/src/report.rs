//! Result files: score dumps, DET curves, the run document and figure tables.
//!
//! Everything here is a pure function of its inputs; no timestamps or
//! absolute paths are written, so reruns produce identical bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::ScorerState;
use crate::classifier::{PromptBank, ScoreRecord, SkippedSample};
use crate::encoder::{CONFIG_FILE, IMAGE_GRAPH_FILE, MERGES_FILE, TEXT_GRAPH_FILE, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::experiments::{experiment2, experiment3, Aggregates, Cell, ExperimentResult, ModelRow, PromptRanking};
use crate::metrics::DetPoint;

pub const SCORE_HEADER: &str = "sample_id,prompt_id,p_morph,cos_bonafide,cos_morph,predicted_text";
pub const DET_HEADER: &str = "threshold,macer,bpcer";

pub const RESULT_FILE: &str = "result.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const CELLS_FILE: &str = "cells.csv";
pub const BAR_FILE: &str = "bar_generator_medium.csv";
pub const BOX_FILE: &str = "box_medium.csv";
pub const PROMPT_FILE: &str = "prompts.csv";
pub const TABLE_FILE: &str = "table.csv";

/// Accumulates labelled byte strings into a SHA-256 run fingerprint.
#[derive(Debug, Clone, Default)]
pub struct ConfigDigest {
    hasher: Sha256,
}

impl ConfigDigest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, name: &str, bytes: &[u8]) -> Self {
        for part in [name.as_bytes(), bytes] {
            self.hasher.update((part.len() as u64).to_le_bytes());
            self.hasher.update(part);
        }
        self
    }

    pub fn file(self, name: &str, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(self.field(name, &bytes))
    }

    pub fn hex(self) -> String {
        self.hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Fingerprint of an evaluation run: file contents and settings, never paths.
pub fn run_digest(
    manifest: &Path,
    bank: &PromptBank,
    bundle_dir: &Path,
    target_macer: f64,
    seed: u64,
    baselines: &[ScorerState],
) -> Result<String> {
    let mut d = ConfigDigest::new()
        .file("manifest", manifest)?
        .field("bank", &serde_json::to_vec(bank)?)
        .field("target_macer", &target_macer.to_le_bytes())
        .field("seed", &seed.to_le_bytes());
    for name in [CONFIG_FILE, IMAGE_GRAPH_FILE, TEXT_GRAPH_FILE, VOCAB_FILE, MERGES_FILE] {
        d = d.file(name, &bundle_dir.join(name))?;
    }
    for state in baselines {
        d = d.field("baseline", &serde_json::to_vec(state)?);
    }
    Ok(d.hex())
}

/// Everything an `evaluate` run produces, in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub target_macer: f64,
    pub per_cell: Vec<Cell>,
    pub aggregates: ReportAggregates,
    pub table: Vec<ModelRow>,
    pub skipped: Vec<SkippedSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAggregates {
    #[serde(flatten)]
    pub groups: Aggregates,
    #[serde(flatten)]
    pub prompts: PromptRanking,
}

impl RunReport {
    pub fn new(config_digest: String, result: ExperimentResult, table: Vec<ModelRow>) -> RunReport {
        let aggregates = ReportAggregates {
            groups: experiment2(&result),
            prompts: experiment3(&result),
        };
        RunReport {
            config_digest,
            target_macer: result.target_macer,
            per_cell: result.per_cell,
            aggregates,
            table,
            skipped: result.skipped,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<RunReport> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn scores_csv(records: &[ScoreRecord]) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(SCORE_HEADER.split(',')).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.sample_id.clone(),
            r.prompt_id.clone(),
            r.p_morph.to_string(),
            r.cos_bonafide.to_string(),
            r.cos_morph.to_string(),
            r.predicted_text.clone(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn det_csv(curve: &[DetPoint]) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(DET_HEADER.split(',')).map_err(csv_err)?;
    for p in curve {
        w.write_record([p.threshold.to_string(), p.macer.to_string(), p.bpcer.to_string()])
            .map_err(csv_err)?;
    }
    finish(w)
}

pub fn cells_csv(cells: &[Cell]) -> Result<String> {
    let mut w = csv_writer();
    w.write_record([
        "prompt_id", "category", "generator", "medium", "n_bonafide", "n_morph", "bpcer", "achieved_macer",
        "threshold", "degenerate",
    ])
    .map_err(csv_err)?;
    for c in cells {
        let op = c.operating_point;
        w.write_record([
            c.prompt_id.clone(),
            c.category.as_str().to_string(),
            c.generator.to_string(),
            c.medium.to_string(),
            c.n_bonafide.to_string(),
            c.n_morph.to_string(),
            opt(op.map(|p| p.bpcer)),
            opt(op.map(|p| p.achieved_macer)),
            opt(op.map(|p| p.threshold)),
            c.degenerate.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Bar-chart shape: mean BPCER per generator and medium.
pub fn bar_csv(aggregates: &Aggregates) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(["generator", "medium", "n", "mean_bpcer"]).map_err(csv_err)?;
    for s in &aggregates.by_generator_medium {
        let mut parts = s.group_key.split('|').map(|p| p.split_once('=').map_or(p, |(_, v)| v));
        let g = parts.next().unwrap_or_default();
        let m = parts.next().unwrap_or_default();
        w.write_record([g, m, &s.n.to_string(), &s.mean.to_string()]).map_err(csv_err)?;
    }
    finish(w)
}

/// Box-plot shape: five-number summaries of every aggregate group.
pub fn box_csv(aggregates: &Aggregates) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(["group_key", "n", "mean", "min", "q1", "median", "q3", "max"])
        .map_err(csv_err)?;
    let groups = [
        &aggregates.by_medium,
        &aggregates.by_medium_category,
        &aggregates.by_generator,
        &aggregates.by_generator_medium,
        &aggregates.by_generator_medium_category,
    ];
    for s in groups.into_iter().flatten() {
        w.write_record([
            s.group_key.clone(),
            s.n.to_string(),
            s.mean.to_string(),
            s.min.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
            s.max.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn prompts_csv(ranking: &PromptRanking) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(["prompt_id", "n", "mean_bpcer", "best"]).map_err(csv_err)?;
    for s in &ranking.per_prompt {
        let id = s.group_key.trim_start_matches("prompt=");
        let best = ranking.best_prompt.as_deref() == Some(id);
        w.write_record([id, &s.n.to_string(), &s.mean.to_string(), if best { "1" } else { "0" }])
            .map_err(csv_err)?;
    }
    finish(w)
}

/// Comparison table with BPCER in percent, two decimals.
pub fn table_csv(rows: &[ModelRow]) -> Result<String> {
    let mut w = csv_writer();
    w.write_record(["model", "medium", "prompt_id", "bpcer_percent", "achieved_macer", "threshold"])
        .map_err(csv_err)?;
    for r in rows {
        let op = r.operating_point;
        w.write_record([
            r.model.clone(),
            r.medium.to_string(),
            r.prompt_id.clone().unwrap_or_default(),
            op.map(|p| format!("{:.2}", p.bpcer * 100.0)).unwrap_or_default(),
            opt(op.map(|p| p.achieved_macer)),
            opt(op.map(|p| p.threshold)),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes the JSON document and every CSV export into `dir`.
pub fn write_report(dir: &Path, report: &RunReport, records: Option<&[ScoreRecord]>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_file(&dir.join(RESULT_FILE), &report.to_json()?)?;
    write_csv_exports(dir, report)?;
    if let Some(records) = records {
        write_file(&dir.join(SCORES_FILE), &scores_csv(records)?)?;
    }
    Ok(())
}

pub fn write_csv_exports(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_file(&dir.join(CELLS_FILE), &cells_csv(&report.per_cell)?)?;
    write_file(&dir.join(BAR_FILE), &bar_csv(&report.aggregates.groups)?)?;
    write_file(&dir.join(BOX_FILE), &box_csv(&report.aggregates.groups)?)?;
    write_file(&dir.join(PROMPT_FILE), &prompts_csv(&report.aggregates.prompts)?)?;
    write_file(&dir.join(TABLE_FILE), &table_csv(&report.table)?)
}
