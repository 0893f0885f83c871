#![allow(dead_code)]

use std::path::{Path, PathBuf};

use zsmad_core::toy;
use zsmad_core::ModelBundle;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn read_json(name: &str) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(fixture(name)).unwrap()).unwrap()
}

/// Toy bundle with the seed and width the goldens were frozen with.
pub fn toy_bundle(dir: &Path) -> ModelBundle {
    toy::make_toy_bundle(0, 16, dir).unwrap()
}

/// The formula image tensor shared with the onnxruntime oracle.
pub fn formula_pixels(n: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = 0.1 * ((n + 1) * (c + 1)) as f64 + 0.05 * y as f64 - 0.03 * x as f64;
                out.push(v.sin() as f32);
            }
        }
    }
    out
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

/// Naive reference for the error-rate functions: counts every threshold of
/// a dense sweep (observed values, midpoints between them, and sentinels).
pub mod brute {
    use zsmad_core::metrics::{DetPoint, LabeledScores};

    pub fn rates(s: &LabeledScores, t: f64) -> (f64, f64) {
        let miss = s.morph().iter().filter(|&&v| v < t).count();
        let fa = s.bonafide().iter().filter(|&&v| v >= t).count();
        let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
        (frac(miss, s.morph().len()), frac(fa, s.bonafide().len()))
    }

    pub fn observed(s: &LabeledScores) -> Vec<f64> {
        let mut all: Vec<f64> = s.bonafide().iter().chain(s.morph()).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    pub fn candidates(s: &LabeledScores) -> Vec<f64> {
        let obs = observed(s);
        let mut c = vec![obs[0] - 1.0];
        c.extend(&obs);
        c.push(obs[obs.len() - 1] + 1.0);
        c
    }

    /// Thresholds that hit every distinct operating region of the real line.
    pub fn dense(s: &LabeledScores) -> Vec<f64> {
        let obs = observed(s);
        let mut d = candidates(s);
        d.extend(obs.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        d.push(obs[0] - 1e-3);
        d.push(f64::INFINITY);
        d.push(f64::NEG_INFINITY);
        d
    }

    pub fn curve(s: &LabeledScores) -> Vec<DetPoint> {
        candidates(s)
            .into_iter()
            .map(|t| {
                let (macer, bpcer) = rates(s, t);
                DetPoint { threshold: t, macer, bpcer }
            })
            .collect()
    }

    /// `(bpcer, achieved_macer, threshold, met)` by exhaustive search.
    pub fn bpcer_at_macer(s: &LabeledScores, target: f64) -> (f64, f64, f64, bool) {
        let dense_best = dense(s)
            .into_iter()
            .map(|t| rates(s, t))
            .filter(|(m, _)| *m <= target)
            .map(|(_, b)| b)
            .fold(f64::INFINITY, f64::min);
        let mut best: Option<(f64, f64, f64)> = None;
        for t in candidates(s) {
            let (m, b) = rates(s, t);
            if m > target {
                continue;
            }
            let better = match best {
                None => true,
                Some((bb, bm, bt)) => b < bb || (b == bb && (m > bm || (m == bm && t < bt))),
            };
            if better {
                best = Some((b, m, t));
            }
        }
        match best {
            Some((b, m, t)) => {
                assert_eq!(b, dense_best, "candidate set misses the optimum");
                (b, m, t, true)
            }
            None => {
                let mut pick: Option<(f64, f64, f64)> = None;
                for t in candidates(s) {
                    let (m, b) = rates(s, t);
                    let better = match pick {
                        None => true,
                        Some((pm, pb, pt)) => m < pm || (m == pm && (b < pb || (b == pb && t < pt))),
                    };
                    if better {
                        pick = Some((m, b, t));
                    }
                }
                let (m, b, t) = pick.unwrap();
                (b, m, t, false)
            }
        }
    }

    pub fn eer(s: &LabeledScores) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for t in candidates(s) {
            let (m, b) = rates(s, t);
            let gap = (m - b).abs();
            if gap < best.0 {
                best = (gap, (m + b) / 2.0);
            }
        }
        let dense_gap = dense(s)
            .into_iter()
            .map(|t| {
                let (m, b) = rates(s, t);
                (m - b).abs()
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best.0, dense_gap, "candidate set misses the balanced point");
        best.1
    }
}

pub struct ToyRun {
    pub scores_csv: String,
    pub cells_csv: String,
    pub result_json: String,
}

/// make-toy, then score and evaluate the 12-sample synthetic manifest.
pub fn toy_pipeline(parallelism: usize) -> ToyRun {
    use zsmad_core::experiments::{compare_from_scores, experiment1_from_records};
    use zsmad_core::report::{cells_csv, run_digest, scores_csv, RunReport};
    use zsmad_core::{load_manifest, run_bank, ManifestFormat, PromptBank};

    let dir = tempfile::tempdir().unwrap();
    let bundle_dir = dir.path().join("bundle");
    let bundle = toy_bundle(&bundle_dir);
    let manifest_path = toy::write_synthetic_dataset(&dir.path().join("data")).unwrap();
    let manifest = load_manifest(&manifest_path, ManifestFormat::Csv).unwrap();
    let bank = PromptBank::default();
    let run = run_bank(&manifest, &bank, &bundle, parallelism).unwrap();
    let result = experiment1_from_records(&manifest, &bank, &run, 0.1, parallelism).unwrap();
    let table = compare_from_scores(&manifest, &run, &[], 0.1).unwrap();
    let digest = run_digest(&manifest_path, &bank, &bundle_dir, 0.1, 0, &[]).unwrap();
    let report = RunReport::new(digest, result, table);
    ToyRun {
        scores_csv: scores_csv(&run.records).unwrap(),
        cells_csv: cells_csv(&report.per_cell).unwrap(),
        result_json: report.to_json().unwrap(),
    }
}

/// Compares against a committed golden file; `ZSMAD_BLESS=1` rewrites it.
pub fn check_golden(name: &str, actual: &str) -> bool {
    let path = fixture(name);
    if std::env::var_os("ZSMAD_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return true;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    expected == actual
}
