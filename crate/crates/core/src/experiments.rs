//! The three evaluation protocols and the model comparison table.
//!
//! Experiment 1 computes one operating point per `(prompt, generator, medium)`
//! cell. Experiments 2 and 3 aggregate those BPCER values; nothing is
//! recomputed from raw scores there.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineRun, PrototypeScorer};
use crate::classifier::{run_bank, thread_pool, BankRun, PromptBank, PromptCategory, ScoreRecord, SkippedSample};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::manifest::{Generator, Label, Manifest, Medium};
use crate::metrics::{bpcer_at_macer, LabeledScores, OperatingPoint};

pub const DEFAULT_TARGET_MACER: f64 = 0.10;
pub const DUAL_ENCODER_MODEL: &str = "dual-encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub prompt_id: String,
    pub category: PromptCategory,
    pub generator: Generator,
    pub medium: Medium,
    pub n_bonafide: usize,
    pub n_morph: usize,
    /// `None` for degenerate cells.
    pub operating_point: Option<OperatingPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<String>,
}

impl Cell {
    pub fn bpcer(&self) -> Option<f64> {
        self.operating_point.map(|p| p.bpcer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub target_macer: f64,
    /// Sorted by `(prompt_id, generator, medium)`.
    pub per_cell: Vec<Cell>,
    pub skipped: Vec<SkippedSample>,
}

impl ExperimentResult {
    pub fn valid_cells(&self) -> impl Iterator<Item = &Cell> {
        self.per_cell.iter().filter(|c| c.operating_point.is_some())
    }

    pub fn degenerate_cells(&self) -> impl Iterator<Item = &Cell> {
        self.per_cell.iter().filter(|c| c.operating_point.is_none())
    }
}

/// Mean and five-number summary of cell BPCERs in one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub group_key: String,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted values (numpy's default).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl AggregateStat {
    /// `None` when `values` is empty.
    pub fn from_values(group_key: impl Into<String>, values: &[f64]) -> Option<AggregateStat> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(AggregateStat {
            group_key: group_key.into(),
            n: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

struct SampleInfo {
    label: Label,
    generator: Option<Generator>,
    medium: Medium,
}

fn sample_index(manifest: &Manifest) -> HashMap<&str, SampleInfo> {
    manifest
        .samples
        .iter()
        .map(|s| {
            (
                s.id.as_str(),
                SampleInfo {
                    label: s.label,
                    generator: s.generator,
                    medium: s.medium,
                },
            )
        })
        .collect()
}

/// Generators with at least one morph and mediums with at least one sample.
fn cell_axes(manifest: &Manifest) -> (Vec<Generator>, Vec<Medium>) {
    let generators: BTreeSet<Generator> = manifest.samples.iter().filter_map(|s| s.generator).collect();
    let mediums: BTreeSet<Medium> = manifest.samples.iter().map(|s| s.medium).collect();
    (generators.into_iter().collect(), mediums.into_iter().collect())
}

/// Scores of one slice: bona fide of `medium` plus morphs of `(generator, medium)`.
/// `generator = None` pools every generator.
fn slice_scores<'a>(
    index: &HashMap<&str, SampleInfo>,
    scores: impl Iterator<Item = (&'a str, f64)>,
    generator: Option<Generator>,
    medium: Medium,
) -> (Vec<f64>, Vec<f64>) {
    let (mut bonafide, mut morph) = (Vec::new(), Vec::new());
    for (id, score) in scores {
        let Some(info) = index.get(id) else { continue };
        if info.medium != medium {
            continue;
        }
        match info.label {
            Label::BonaFide => bonafide.push(score),
            Label::Morph if generator.is_none() || info.generator == generator => morph.push(score),
            Label::Morph => {}
        }
    }
    (bonafide, morph)
}

fn operating_point(bonafide: Vec<f64>, morph: Vec<f64>, target: f64) -> Result<std::result::Result<OperatingPoint, String>> {
    let scores = LabeledScores::new(bonafide, morph)?;
    match bpcer_at_macer(&scores, target) {
        Ok(p) => Ok(Ok(p)),
        Err(Error::Degenerate(reason)) => Ok(Err(reason)),
        Err(e) => Err(e),
    }
}

fn check_target(target: f64) -> Result<()> {
    if target > 0.0 && target < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("target MACER {target} outside (0, 1)")))
    }
}

/// Cell table from already computed score records.
pub fn experiment1_from_records(
    manifest: &Manifest,
    bank: &PromptBank,
    run: &BankRun,
    target: f64,
    parallelism: usize,
) -> Result<ExperimentResult> {
    check_target(target)?;
    let index = sample_index(manifest);
    let (generators, mediums) = cell_axes(manifest);
    let mut by_prompt: HashMap<&str, Vec<&ScoreRecord>> = HashMap::new();
    for r in &run.records {
        by_prompt.entry(r.prompt_id.as_str()).or_default().push(r);
    }

    let mut keys = Vec::new();
    let mut pairs: Vec<_> = bank.pairs().iter().collect();
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in pairs {
        for &g in &generators {
            for &m in &mediums {
                keys.push((pair, g, m));
            }
        }
    }

    let pool = thread_pool(parallelism)?;
    let empty = Vec::new();
    let cells: Vec<Result<Cell>> = pool.install(|| {
        keys.par_iter()
            .map(|&(pair, generator, medium)| {
                let records = by_prompt.get(pair.id.as_str()).unwrap_or(&empty);
                let (b, m) = slice_scores(
                    &index,
                    records.iter().map(|r| (r.sample_id.as_str(), r.p_morph)),
                    Some(generator),
                    medium,
                );
                let (n_bonafide, n_morph) = (b.len(), m.len());
                let (operating_point, degenerate) = match operating_point(b, m, target)? {
                    Ok(p) => (Some(p), None),
                    Err(reason) => (None, Some(reason)),
                };
                Ok(Cell {
                    prompt_id: pair.id.clone(),
                    category: pair.category,
                    generator,
                    medium,
                    n_bonafide,
                    n_morph,
                    operating_point,
                    degenerate,
                })
            })
            .collect()
    });
    let per_cell = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        target_macer: target,
        per_cell,
        skipped: run.skipped.clone(),
    })
}

/// Scores the manifest against the bank and builds the cell table.
pub fn experiment1<E: DualEncoder + ?Sized>(
    manifest: &Manifest,
    bank: &PromptBank,
    encoder: &E,
    target: f64,
    parallelism: usize,
) -> Result<(BankRun, ExperimentResult)> {
    check_target(target)?;
    let run = run_bank(manifest, bank, encoder, parallelism)?;
    let result = experiment1_from_records(manifest, bank, &run, target, parallelism)?;
    Ok((run, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub by_generator_medium: Vec<AggregateStat>,
    pub by_generator_medium_category: Vec<AggregateStat>,
    pub by_generator: Vec<AggregateStat>,
    pub by_medium: Vec<AggregateStat>,
    pub by_medium_category: Vec<AggregateStat>,
}

fn group<K: Ord>(cells: impl Iterator<Item = (K, f64)>) -> BTreeMap<K, Vec<f64>> {
    let mut out: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for (k, v) in cells {
        out.entry(k).or_default().push(v);
    }
    out
}

fn stats<K: Ord>(groups: BTreeMap<K, Vec<f64>>, key: impl Fn(&K) -> String) -> Vec<AggregateStat> {
    groups
        .iter()
        .filter_map(|(k, v)| AggregateStat::from_values(key(k), v))
        .collect()
}

/// Group means over prompts; degenerate cells are left out.
pub fn experiment2(result: &ExperimentResult) -> Aggregates {
    let valid = || result.valid_cells().map(|c| (c, c.bpcer().expect("valid cell")));
    Aggregates {
        by_generator_medium: stats(group(valid().map(|(c, v)| ((c.generator, c.medium), v))), |(g, m)| {
            format!("generator={g}|medium={m}")
        }),
        by_generator_medium_category: stats(
            group(valid().map(|(c, v)| ((c.generator, c.medium, c.category), v))),
            |(g, m, k)| format!("generator={g}|medium={m}|category={}", k.as_str()),
        ),
        by_generator: stats(group(valid().map(|(c, v)| (c.generator, v))), |g| format!("generator={g}")),
        by_medium: stats(group(valid().map(|(c, v)| (c.medium, v))), |m| format!("medium={m}")),
        by_medium_category: stats(group(valid().map(|(c, v)| ((c.medium, c.category), v))), |(m, k)| {
            format!("medium={m}|category={}", k.as_str())
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRanking {
    pub per_prompt: Vec<AggregateStat>,
    /// Prompt with the lowest mean BPCER; the smaller id wins ties.
    pub best_prompt: Option<String>,
}

/// One mean per prompt over all of its valid cells.
pub fn experiment3(result: &ExperimentResult) -> PromptRanking {
    let groups = group(result.valid_cells().map(|c| (c.prompt_id.clone(), c.bpcer().expect("valid cell"))));
    let per_prompt = stats(groups, |p| format!("prompt={p}"));
    let best_prompt = per_prompt
        .iter()
        .min_by(|a, b| a.mean.total_cmp(&b.mean).then(a.group_key.cmp(&b.group_key)))
        .map(|s| s.group_key.trim_start_matches("prompt=").to_string());
    PromptRanking { per_prompt, best_prompt }
}

/// One row of the model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub medium: Medium,
    /// Prompt chosen for the dual encoder; `None` for baselines.
    pub prompt_id: Option<String>,
    pub n_bonafide: usize,
    pub n_morph: usize,
    pub operating_point: Option<OperatingPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<String>,
}

impl ModelRow {
    pub fn bpcer(&self) -> Option<f64> {
        self.operating_point.map(|p| p.bpcer)
    }
}

fn model_row(
    model: &str,
    medium: Medium,
    prompt_id: Option<String>,
    (b, m): (Vec<f64>, Vec<f64>),
    target: f64,
) -> Result<ModelRow> {
    let (n_bonafide, n_morph) = (b.len(), m.len());
    let (operating_point, degenerate) = match operating_point(b, m, target)? {
        Ok(p) => (Some(p), None),
        Err(reason) => (None, Some(reason)),
    };
    Ok(ModelRow {
        model: model.to_string(),
        medium,
        prompt_id,
        n_bonafide,
        n_morph,
        operating_point,
        degenerate,
    })
}

/// Comparison table from precomputed scores: one row per model and medium.
///
/// Per medium, all generators are pooled. The dual encoder is reported with
/// its best prompt for that medium (lowest BPCER, smaller id on ties).
pub fn compare_from_scores(
    manifest: &Manifest,
    run: &BankRun,
    baselines: &[(String, BaselineRun)],
    target: f64,
) -> Result<Vec<ModelRow>> {
    check_target(target)?;
    let index = sample_index(manifest);
    let mut prompts: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in &run.records {
        prompts.entry(r.prompt_id.as_str()).or_default().push(r);
    }
    let mut rows = Vec::new();
    for medium in Medium::ALL {
        let mut best: Option<ModelRow> = None;
        for (prompt, records) in &prompts {
            let slice = slice_scores(&index, records.iter().map(|r| (r.sample_id.as_str(), r.p_morph)), None, medium);
            let row = model_row(DUAL_ENCODER_MODEL, medium, Some(prompt.to_string()), slice, target)?;
            best = match (best, row.bpcer()) {
                (None, _) => Some(row),
                (Some(b), Some(v)) if b.bpcer().map_or(true, |bv| v < bv) => Some(row),
                (keep, _) => keep,
            };
        }
        rows.push(match best {
            Some(row) => row,
            None => model_row(DUAL_ENCODER_MODEL, medium, None, (Vec::new(), Vec::new()), target)?,
        });
    }
    for (name, baseline) in baselines {
        for medium in Medium::ALL {
            let slice = slice_scores(&index, baseline.scores.iter().map(|(id, s)| (id.as_str(), *s)), None, medium);
            rows.push(model_row(name, medium, None, slice, target)?);
        }
    }
    Ok(rows)
}

/// Scores everything and builds the comparison table.
pub fn compare_models<E: DualEncoder + ?Sized>(
    manifest: &Manifest,
    bank: &PromptBank,
    encoder: &E,
    baselines: &[PrototypeScorer],
    target: f64,
    parallelism: usize,
) -> Result<Vec<ModelRow>> {
    let run = run_bank(manifest, bank, encoder, parallelism)?;
    let baseline_runs = baselines
        .iter()
        .map(|s| Ok((s.name().to_string(), s.score_manifest(manifest, parallelism)?)))
        .collect::<Result<Vec<_>>>()?;
    compare_from_scores(manifest, &run, &baseline_runs, target)
}
