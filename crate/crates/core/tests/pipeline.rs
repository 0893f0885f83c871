mod common;

use common::{check_golden, toy_bundle, toy_pipeline};
use zsmad_core::baselines::{fit_prototype, Backbone, PrototypeScorer};
use zsmad_core::classifier::{run_bank, PromptBank};
use zsmad_core::experiments::{compare_from_scores, compare_models, experiment1, experiment2, experiment3};
use zsmad_core::explain::{explain, segment, ExplainParams};
use zsmad_core::imaging::{preprocess, PreprocessSpec};
use zsmad_core::toy::{self, synthetic_face, synthetic_morph, TOY_IMAGE_SIZE};
use zsmad_core::{
    load_manifest, DualEncoder, Error, FaceSample, Generator, Label, Manifest, ManifestFormat, Medium,
};

#[test]
fn census_slices() {
    let mut samples = Vec::new();
    for medium in [Medium::Digital, Medium::Ps1] {
        for i in 0..1276 {
            samples.push(FaceSample {
                id: format!("bf-{medium}-{i}"),
                path: "x.png".into(),
                label: Label::BonaFide,
                generator: None,
                medium,
                subject_id: None,
            });
        }
    }
    for g in Generator::ALL {
        for i in 0..2526 {
            samples.push(FaceSample {
                id: format!("mo-{g}-{i}"),
                path: "x.png".into(),
                label: Label::Morph,
                generator: Some(g),
                medium: Medium::Digital,
                subject_id: None,
            });
        }
    }
    let m = Manifest::new(samples, "census").unwrap();
    assert_eq!((m.bonafide_count(), m.morph_count()), (2552, 12630));
    let cell = m.slice(Some(Generator::LmaI), Some(Medium::Digital));
    assert_eq!((cell.bonafide_count(), cell.morph_count()), (1276, 2526));
}

#[test]
fn toy_run_matches_golden_at_any_parallelism() {
    let first = toy_pipeline(1);
    assert!(check_golden("toy_e2e/scores.csv", &first.scores_csv), "score records drifted");
    assert!(check_golden("toy_e2e/cells.csv", &first.cells_csv), "cell table drifted");
    assert!(check_golden("toy_e2e/result.json", &first.result_json), "result document drifted");
    for degree in [2, 5, 0] {
        let other = toy_pipeline(degree);
        assert_eq!(other.scores_csv, first.scores_csv, "parallelism {degree}");
        assert_eq!(other.result_json, first.result_json, "parallelism {degree}");
    }
}

#[test]
fn embeddings_are_unit_and_batch_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = toy_bundle(dir.path());
    let spec = bundle.preprocess_spec().clone();
    let tensors: Vec<_> = (0..6).map(|i| preprocess(&synthetic_face(i, 40 + i as u32, 50), &spec)).collect();
    let batch = bundle.encode_images(&tensors).unwrap();
    for (t, b) in tensors.iter().zip(&batch) {
        let single = bundle.encode_image(t).unwrap();
        assert!((single.norm() - 1.0).abs() <= 1e-5);
        for (x, y) in single.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
    let texts = ["a photo of a real face", "", "A MORPHED face!!", "photo of a face"];
    let seqs: Vec<_> = texts.iter().map(|t| bundle.tokenize(t)).collect();
    let batch = bundle.encode_texts(&seqs).unwrap();
    for (s, b) in seqs.iter().zip(&batch) {
        let single = bundle.encode_text(s).unwrap();
        assert!((single.norm() - 1.0).abs() <= 1e-5);
        for (x, y) in single.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

fn write_png(dir: &std::path::Path, name: &str, img: &zsmad_core::RawImage) -> String {
    img.save_png(&dir.join(name)).unwrap();
    name.to_string()
}

#[test]
fn baselines_fit_score_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest_path = toy::write_synthetic_dataset(&data).unwrap();
    let manifest = load_manifest(&manifest_path, ManifestFormat::Csv).unwrap();

    let mut reference = Vec::new();
    for i in 20..26u64 {
        let name = write_png(&data, &format!("ref{i}.png"), &synthetic_face(i, 64, 64));
        reference.push(FaceSample {
            id: format!("ref{i}"),
            path: name.into(),
            label: Label::BonaFide,
            generator: None,
            medium: Medium::Digital,
            subject_id: None,
        });
    }
    let mut reference = Manifest::new(reference, "reference").unwrap();
    reference.base_dir = Some(data.clone());

    let spec = PreprocessSpec::new(TOY_IMAGE_SIZE, [0.5; 3], [0.25; 3]).unwrap();
    let mut scorers = Vec::new();
    for (k, name) in ["proto-a", "proto-b", "proto-c"].iter().enumerate() {
        let path = dir.path().join(format!("{name}.onnx"));
        toy::make_toy_backbone(100 + k as u64, 24, TOY_IMAGE_SIZE, &path).unwrap();
        let scorer = fit_prototype(name, Backbone::load(&path, spec.clone()).unwrap(), &reference).unwrap();
        assert_eq!(scorer.ref_count(), 6);
        assert!((scorer.prototype().norm() - 1.0).abs() < 1e-5);
        let state = dir.path().join(format!("{name}.json"));
        scorer.save(&state).unwrap();
        let restored = PrototypeScorer::load(&state).unwrap();
        assert_eq!(restored.state(), scorer.state());
        scorers.push(restored);
    }

    let run = scorers[0].score_manifest(&manifest, 2).unwrap();
    assert_eq!(run.scores.len(), 12);
    assert!(run.scores.iter().all(|(_, s)| (0.0..=1.0).contains(s)));
    assert_eq!(run, scorers[0].score_manifest(&manifest, 1).unwrap());

    let bundle = toy_bundle(&dir.path().join("bundle"));
    let rows = compare_models(&manifest, &PromptBank::default(), &bundle, &scorers, 0.1, 2).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows[..3].iter().all(|r| r.model == "dual-encoder" && r.prompt_id.is_some()));
    assert_eq!(rows[3].model, "proto-a");

    // the reference set must not leak into the evaluation set
    let overlap = Manifest::new(reference.samples.clone(), "overlap").unwrap();
    assert!(matches!(scorers[0].score_manifest(&overlap, 1), Err(Error::Constraint(_))));

    // morphs in the reference are rejected, empty reference too
    let bad = Manifest::new(manifest.slice(Some(Generator::LmaI), Some(Medium::Digital)).samples, "bad").unwrap();
    let bb = Backbone::load(&dir.path().join("proto-a.onnx"), spec.clone()).unwrap();
    assert!(matches!(fit_prototype("x", bb.clone(), &bad), Err(Error::Constraint(_))));
    let empty = Manifest::new(vec![], "empty").unwrap();
    assert!(matches!(fit_prototype("x", bb, &empty), Err(Error::EmptyReference)));
}

#[test]
fn separable_scores_give_zero_bpcer_rows() {
    use zsmad_core::baselines::BaselineRun;
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = toy::write_synthetic_dataset(&dir.path().join("data")).unwrap();
    let manifest = load_manifest(&manifest_path, ManifestFormat::Csv).unwrap();
    let bundle = toy_bundle(&dir.path().join("bundle"));
    let mut run = run_bank(&manifest, &PromptBank::default(), &bundle, 1).unwrap();
    // replace scores with a perfect separator for the dual encoder, a poor one for the baseline
    for r in &mut run.records {
        r.p_morph = if r.sample_id.starts_with("mo") { 0.9 } else { 0.1 };
    }
    let baseline = BaselineRun {
        scores: manifest
            .samples
            .iter()
            .map(|s| (s.id.clone(), if s.id.starts_with("bf") { 0.8 } else { 0.2 }))
            .collect(),
        skipped: vec![],
    };
    let rows = compare_from_scores(&manifest, &run, &[("weak".into(), baseline)], 0.1).unwrap();
    for r in &rows[..3] {
        assert_eq!(r.bpcer(), Some(0.0));
    }
    for r in &rows[3..] {
        assert!(r.bpcer().unwrap() > 0.0);
    }
}

#[test]
fn experiments_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = toy::write_synthetic_dataset(&dir.path().join("data")).unwrap();
    let manifest = load_manifest(&manifest_path, ManifestFormat::Csv).unwrap();
    let bundle = toy_bundle(&dir.path().join("bundle"));
    let (run, result) = experiment1(&manifest, &PromptBank::default(), &bundle, 0.1, 3).unwrap();
    assert_eq!(run.records.len(), 120);
    // 5 generators x 3 mediums x 10 prompts, several cells without morphs
    assert_eq!(result.per_cell.len(), 150);
    assert_eq!(result.valid_cells().count(), 80);
    assert_eq!(result.degenerate_cells().count(), 70);
    let agg = experiment2(&result);
    assert_eq!(agg.by_medium.len(), 3);
    assert!(experiment3(&result).best_prompt.is_some());
}

#[test]
fn unreadable_image_is_skipped_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest_path = toy::write_synthetic_dataset(&data).unwrap();
    std::fs::write(data.join("mo03.png"), b"not an image").unwrap();
    let manifest = load_manifest(&manifest_path, ManifestFormat::Csv).unwrap();
    let bundle = toy_bundle(&dir.path().join("bundle"));
    let run = run_bank(&manifest, &PromptBank::default(), &bundle, 2).unwrap();
    assert_eq!(run.records.len(), 110);
    assert_eq!(run.skipped.len(), 1);
    assert_eq!(run.skipped[0].id, "mo03");
}

#[test]
fn explain_through_the_bundle_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = toy_bundle(dir.path());
    let img = synthetic_morph(1, 2, 48, 48);
    let mask = segment(&img, 9).unwrap();
    let pair = PromptBank::default().pairs()[0].clone();
    let params = ExplainParams { n_samples: 60, seed: 5, parallelism: 3, ..Default::default() };
    let a = explain(&img, &pair, &bundle, &mask, &params).unwrap();
    let b = explain(&img, &pair, &bundle, &mask, &ExplainParams { parallelism: 1, ..params.clone() }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.weights.len(), 9);
    assert!((0.0..=1.0).contains(&a.fit_quality));
    let out = dir.path().join("explain");
    zsmad_core::explain::write_saliency(&out, &img, &mask, &a).unwrap();
    assert!(out.join("saliency.json").is_file() && out.join("overlay.png").is_file());
}

#[test]
fn report_reloads_bit_exact() {
    use zsmad_core::report::{cells_csv, RunReport};
    let run = toy_pipeline(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("result.json");
    std::fs::write(&path, &run.result_json).unwrap();
    let report = RunReport::load(&path).unwrap();
    assert_eq!(report.to_json().unwrap(), run.result_json);
    assert_eq!(cells_csv(&report.per_cell).unwrap(), run.cells_csv);
}
