//! Attack and bona fide classification error rates (ISO/IEC 30107-3 style).
//!
//! A sample is called a morph when its score is `>= t`. MACER is the
//! fraction of morphs called bona fide (score `< t`), the APCER analogue for
//! morphing attacks; BPCER is the fraction of bona fide samples called
//! morphs (score `>= t`). Operating points are only ever evaluated at
//! observed scores plus one sentinel below the minimum and one above the
//! maximum, so every reported value is exactly reproducible by counting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledScores {
    bonafide: Vec<f64>,
    morph: Vec<f64>,
}

impl LabeledScores {
    pub fn new(bonafide: Vec<f64>, morph: Vec<f64>) -> Result<Self> {
        if let Some(bad) = bonafide.iter().chain(&morph).find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {bad} outside [0, 1]")));
        }
        Ok(LabeledScores { bonafide, morph })
    }

    pub fn bonafide(&self) -> &[f64] {
        &self.bonafide
    }

    pub fn morph(&self) -> &[f64] {
        &self.morph
    }

    fn require_both(&self) -> Result<()> {
        if self.morph.is_empty() {
            return Err(Error::Degenerate("no morph scores".into()));
        }
        if self.bonafide.is_empty() {
            return Err(Error::Degenerate("no bona fide scores".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub macer: f64,
    pub bpcer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_macer: f64,
    pub achieved_macer: f64,
    pub bpcer: f64,
    pub threshold: f64,
    /// False when no candidate threshold reaches the target.
    pub target_met: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub threshold: f64,
    pub macer: f64,
    pub bpcer: f64,
    pub eer: f64,
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Error rates at one threshold. An empty class contributes a rate of 0.
pub fn rates_at(scores: &LabeledScores, threshold: f64) -> DetPoint {
    let missed = scores.morph.iter().filter(|&&s| s < threshold).count();
    let false_alarms = scores.bonafide.iter().filter(|&&s| s >= threshold).count();
    DetPoint {
        threshold,
        macer: fraction(missed, scores.morph.len()),
        bpcer: fraction(false_alarms, scores.bonafide.len()),
    }
}

/// Distinct observed scores in ascending order, bracketed by one sentinel
/// below the minimum and one above the maximum.
pub fn candidate_thresholds(scores: &LabeledScores) -> Vec<f64> {
    let mut all: Vec<f64> = scores.bonafide.iter().chain(&scores.morph).copied().collect();
    if all.is_empty() {
        return Vec::new();
    }
    all.sort_by(f64::total_cmp);
    all.dedup();
    let below = all[0] - 1.0;
    let above = all[all.len() - 1] + 1.0;
    std::iter::once(below).chain(all).chain(std::iter::once(above)).collect()
}

/// DET points at every candidate threshold, ascending in threshold.
///
/// Along the output MACER is nondecreasing and BPCER nonincreasing.
pub fn det_curve(scores: &LabeledScores) -> Vec<DetPoint> {
    let thresholds = candidate_thresholds(scores);
    let mut morph = scores.morph.clone();
    let mut bonafide = scores.bonafide.clone();
    morph.sort_by(f64::total_cmp);
    bonafide.sort_by(f64::total_cmp);
    let (mut morph_below, mut bona_below) = (0, 0);
    thresholds
        .into_iter()
        .map(|t| {
            while morph_below < morph.len() && morph[morph_below] < t {
                morph_below += 1;
            }
            while bona_below < bonafide.len() && bonafide[bona_below] < t {
                bona_below += 1;
            }
            DetPoint {
                threshold: t,
                macer: fraction(morph_below, morph.len()),
                bpcer: fraction(bonafide.len() - bona_below, bonafide.len()),
            }
        })
        .collect()
}

/// Lowest BPCER among thresholds with MACER at most `target`.
///
/// Ties prefer the larger achieved MACER, then the smaller threshold. When no
/// threshold reaches the target the point with minimal MACER is returned with
/// `target_met = false`.
pub fn bpcer_at_macer(scores: &LabeledScores, target: f64) -> Result<OperatingPoint> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!("target MACER {target} outside (0, 1)")));
    }
    scores.require_both()?;
    let curve = det_curve(scores);
    let best = curve
        .iter()
        .filter(|p| p.macer <= target)
        .min_by(|a, b| {
            a.bpcer
                .total_cmp(&b.bpcer)
                .then(b.macer.total_cmp(&a.macer))
                .then(a.threshold.total_cmp(&b.threshold))
        });
    let (point, met) = match best {
        Some(p) => (p, true),
        None => (
            curve
                .iter()
                .min_by(|a, b| {
                    a.macer
                        .total_cmp(&b.macer)
                        .then(a.bpcer.total_cmp(&b.bpcer))
                        .then(a.threshold.total_cmp(&b.threshold))
                })
                .expect("nonempty curve"),
            false,
        ),
    };
    Ok(OperatingPoint {
        target_macer: target,
        achieved_macer: point.macer,
        bpcer: point.bpcer,
        threshold: point.threshold,
        target_met: met,
    })
}

/// Threshold minimizing `|MACER - BPCER|` (first such threshold on ties).
pub fn eer_point(scores: &LabeledScores) -> Result<EerPoint> {
    scores.require_both()?;
    let curve = det_curve(scores);
    let p = curve
        .iter()
        .min_by(|a, b| {
            (a.macer - a.bpcer)
                .abs()
                .total_cmp(&(b.macer - b.bpcer).abs())
                .then(a.threshold.total_cmp(&b.threshold))
        })
        .expect("nonempty curve");
    Ok(EerPoint {
        threshold: p.threshold,
        macer: p.macer,
        bpcer: p.bpcer,
        eer: (p.macer + p.bpcer) / 2.0,
    })
}

pub fn eer(scores: &LabeledScores) -> Result<f64> {
    eer_point(scores).map(|p| p.eer)
}
