mod common;

use common::brute;
use proptest::prelude::*;
use zsmad_core::baselines::prototype_distance;
use zsmad_core::classifier::{classify, softmax_pair};
use zsmad_core::experiments::{experiment2, experiment3, AggregateStat};
use zsmad_core::explain::segment;
use zsmad_core::metrics::{bpcer_at_macer, det_curve, eer, rates_at, LabeledScores};
use zsmad_core::tokenizer::{normalize, tokenize};
use zsmad_core::toy::{toy_vocabulary, toy_words};
use zsmad_core::{Embedding, FaceSample, Generator, Label, Manifest, Medium, RawImage, Vocabulary};

fn score() -> impl Strategy<Value = f64> {
    // coarse grid so ties are common
    prop_oneof![(0u32..=20).prop_map(|v| v as f64 / 20.0), 0.0f64..=1.0]
}

fn labeled() -> impl Strategy<Value = LabeledScores> {
    (prop::collection::vec(score(), 1..25), prop::collection::vec(score(), 1..25))
        .prop_map(|(b, m)| LabeledScores::new(b, m).unwrap())
}

fn vocab() -> Vocabulary {
    let words = toy_words();
    toy_vocabulary(words.iter().map(String::as_str))
}

proptest! {
    #[test]
    fn metrics_match_brute_force(s in labeled(), target in 0.01f64..0.99) {
        let curve = det_curve(&s);
        prop_assert_eq!(&curve, &brute::curve(&s));
        let op = bpcer_at_macer(&s, target).unwrap();
        let (b, m, t, met) = brute::bpcer_at_macer(&s, target);
        prop_assert_eq!((op.bpcer, op.achieved_macer, op.threshold, op.target_met), (b, m, t, met));
        prop_assert_eq!(eer(&s).unwrap(), brute::eer(&s));
    }

    #[test]
    fn curve_is_monotone(s in labeled()) {
        let curve = det_curve(&s);
        for w in curve.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[0].macer <= w[1].macer);
            prop_assert!(w[0].bpcer >= w[1].bpcer);
        }
        prop_assert_eq!((curve[0].macer, curve[0].bpcer), (0.0, 1.0));
        let last = curve.last().unwrap();
        prop_assert_eq!((last.macer, last.bpcer), (1.0, 0.0));
    }

    #[test]
    fn metrics_ignore_order(s in labeled(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = s.bonafide().to_vec();
        let mut m = s.morph().to_vec();
        b.shuffle(&mut rng);
        m.shuffle(&mut rng);
        let shuffled = LabeledScores::new(b, m).unwrap();
        prop_assert_eq!(det_curve(&s), det_curve(&shuffled));
        prop_assert_eq!(bpcer_at_macer(&s, 0.1).unwrap(), bpcer_at_macer(&shuffled, 0.1).unwrap());
    }

    #[test]
    fn rates_agree_with_classify(s in labeled(), t in 0.0f64..=1.0) {
        let p = rates_at(&s, t);
        let missed = s.morph().iter().filter(|&&v| classify(v, t) == Label::BonaFide).count();
        prop_assert_eq!(p.macer, missed as f64 / s.morph().len() as f64);
    }

    #[test]
    fn softmax_invariants(cb in -1.0f64..=1.0, cm in -1.0f64..=1.0, scale in 0.0f64..=1000.0) {
        let (pb, pm) = softmax_pair(cb, cm, scale);
        prop_assert!(pb.is_finite() && pm.is_finite());
        prop_assert!((pb + pm - 1.0).abs() <= 1e-6);
        prop_assert!((0.0..=1.0).contains(&pm));
        // swapping the texts swaps the probabilities
        let (sb, sm) = softmax_pair(cm, cb, scale);
        prop_assert!((sb - pm).abs() <= 1e-12 && (sm - pb).abs() <= 1e-12);
        // the larger cosine never gets the smaller probability
        if cm > cb { prop_assert!(pm >= pb); }
        if cb > cm { prop_assert!(pb >= pm); }
    }

    #[test]
    fn softmax_monotone_in_morph_cosine(cb in -1.0f64..=1.0, c1 in -1.0f64..=1.0, c2 in -1.0f64..=1.0, scale in 0.0f64..=1000.0) {
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        prop_assert!(softmax_pair(cb, lo, scale).1 <= softmax_pair(cb, hi, scale).1);
    }

    #[test]
    fn tokenizer_ignores_case_and_spacing(words in prop::collection::vec("[a-zA-Z]{1,8}", 0..12)) {
        let v = vocab();
        let plain = words.join(" ").to_lowercase();
        let noisy = words.iter().map(|w| w.to_uppercase()).collect::<Vec<_>>().join(" \t\n  ");
        prop_assert_eq!(tokenize(&plain, &v), tokenize(&format!("  {noisy}  "), &v));
    }

    #[test]
    fn decode_then_tokenize_is_stable(text in "[a-z ,.!'-]{0,60}") {
        let v = vocab();
        let first = tokenize(&text, &v);
        let decoded = v.decode(first.ids());
        prop_assert_eq!(decoded.replace(' ', ""), normalize(&text).replace(' ', ""));
        prop_assert_eq!(v.decode(tokenize(&decoded, &v).ids()), decoded.clone());
        prop_assert_eq!(tokenize(&decoded, &v), first);
    }

    #[test]
    fn token_layout(text in "\\PC{0,200}") {
        let v = vocab();
        let seq = tokenize(&text, &v);
        prop_assert_eq!(seq.ids().len(), 77);
        prop_assert_eq!(seq.ids()[0], v.sot_id());
        prop_assert_eq!(seq.ids()[seq.content_len() - 1], v.eot_id());
        prop_assert!(seq.content().len() <= 75);
    }

    #[test]
    fn prototype_distance_in_unit_range(a in prop::collection::vec(-5.0f32..5.0, 4), b in prop::collection::vec(-5.0f32..5.0, 4)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let (a, b) = (Embedding::normalize(&a).unwrap(), Embedding::normalize(&b).unwrap());
        let d = prototype_distance(&a, &b);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((a.norm() - 1.0).abs() <= 1e-5);
    }

    #[test]
    fn grid_segments_cover_image(w in 1u32..60, h in 1u32..60, n in 1usize..70) {
        let img = RawImage::from_fn(w, h, |_, _| [0, 0, 0]).unwrap();
        let m = segment(&img, n).unwrap();
        prop_assert_eq!(m.grid.len(), (w * h) as usize);
        let mut ids = m.grid.clone();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids, (0..m.n_segments as u32).collect::<Vec<_>>());
    }

    #[test]
    fn five_number_summary_is_ordered(v in prop::collection::vec(0.0f64..1.0, 1..30)) {
        let s = AggregateStat::from_values("g", &v).unwrap();
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        prop_assert!(s.min <= s.mean && s.mean <= s.max);
    }

    #[test]
    fn manifest_slices(rows in prop::collection::vec((any::<bool>(), 0usize..5, 0usize..3), 1..40)) {
        let samples: Vec<FaceSample> = rows
            .iter()
            .enumerate()
            .map(|(i, &(morph, g, m))| FaceSample {
                id: format!("s{i:03}"),
                path: format!("s{i}.png").into(),
                label: if morph { Label::Morph } else { Label::BonaFide },
                generator: morph.then_some(Generator::ALL[g]),
                medium: Medium::ALL[m],
                subject_id: None,
            })
            .collect();
        let manifest = Manifest::new(samples, "prop").unwrap();
        prop_assert_eq!(manifest.slice(None, None), manifest.clone());
        for medium in Medium::ALL {
            let by_medium = manifest.slice(None, Some(medium));
            prop_assert_eq!(by_medium.slice(None, Some(medium)), by_medium.clone());
            // morphs of one medium split exactly over generators
            let union: usize = Generator::ALL.iter().map(|&g| by_medium.slice(Some(g), Some(medium)).morph_count()).sum();
            prop_assert_eq!(union, by_medium.morph_count());
            for g in Generator::ALL {
                let cell = manifest.slice(Some(g), Some(medium));
                prop_assert_eq!(cell.bonafide_count(), by_medium.bonafide_count());
                prop_assert!(cell.samples.iter().all(|s| s.medium == medium));
            }
        }
    }
}

#[test]
fn aggregates_recompute_from_cells() {
    use zsmad_core::classifier::{BankRun, PromptBank, ScoreRecord};
    use zsmad_core::experiments::experiment1_from_records;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut samples = Vec::new();
    for m in Medium::ALL {
        for i in 0..4 {
            samples.push(FaceSample {
                id: format!("b-{m}-{i}"),
                path: "x.png".into(),
                label: Label::BonaFide,
                generator: None,
                medium: m,
                subject_id: None,
            });
        }
        for g in Generator::ALL {
            for i in 0..3 {
                samples.push(FaceSample {
                    id: format!("m-{g}-{m}-{i}"),
                    path: "x.png".into(),
                    label: Label::Morph,
                    generator: Some(g),
                    medium: m,
                    subject_id: None,
                });
            }
        }
    }
    let manifest = Manifest::new(samples, "grid").unwrap();
    let bank = PromptBank::default();
    let mut records = Vec::new();
    for s in &manifest.samples {
        for p in bank.pairs() {
            let p_morph: f64 = rng.gen_range(0.0..1.0);
            records.push(ScoreRecord {
                sample_id: s.id.clone(),
                prompt_id: p.id.clone(),
                p_morph,
                p_bonafide: 1.0 - p_morph,
                cos_bonafide: 0.0,
                cos_morph: 0.0,
                predicted_text: String::new(),
            });
        }
    }
    let run = BankRun { records, skipped: vec![] };
    let result = experiment1_from_records(&manifest, &bank, &run, 0.1, 2).unwrap();
    assert_eq!(result.per_cell.len(), 150);
    let agg = experiment2(&result);
    for stat in &agg.by_medium {
        let medium = stat.group_key.trim_start_matches("medium=");
        let vals: Vec<f64> = result
            .per_cell
            .iter()
            .filter(|c| c.medium.to_string() == medium)
            .map(|c| c.bpcer().unwrap())
            .collect();
        assert_eq!(stat.n, 50);
        assert_eq!(stat.mean, vals.iter().sum::<f64>() / vals.len() as f64);
    }
    // every prompt lands in exactly one category mean
    let short: usize = agg.by_medium_category.iter().filter(|s| s.group_key.ends_with("short")).map(|s| s.n).sum();
    let long: usize = agg.by_medium_category.iter().filter(|s| s.group_key.ends_with("long")).map(|s| s.n).sum();
    assert_eq!(short + long, 150);
    let ranking = experiment3(&result);
    assert_eq!(ranking.per_prompt.len(), 10);
    let best = ranking.per_prompt.iter().min_by(|a, b| a.mean.total_cmp(&b.mean)).unwrap();
    assert_eq!(ranking.best_prompt.as_deref(), Some(best.group_key.trim_start_matches("prompt=")));

    // permuting manifest rows changes no cell
    let mut reversed = manifest.samples.clone();
    reversed.reverse();
    let reversed = Manifest::new(reversed, "grid").unwrap();
    assert_eq!(experiment1_from_records(&reversed, &bank, &run, 0.1, 1).unwrap(), result);
}
