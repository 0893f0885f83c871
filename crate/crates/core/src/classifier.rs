//! Zero-shot scoring of face images against (bona fide, morph) prompt pairs.
//!
//! Both prompt texts are embedded, their cosine similarities with the image
//! embedding are scaled by the model's logit scale, and a two-way softmax
//! gives the morph probability. `p_morph` is the score used everywhere
//! downstream: higher means more attack-like.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, Embedding};
use crate::error::{Error, Result};
use crate::imaging;
use crate::manifest::{Label, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptCategory {
    Short,
    Long,
}

impl PromptCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptCategory::Short => "short",
            PromptCategory::Long => "long",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub id: String,
    pub bonafide_text: String,
    pub morph_text: String,
    pub category: PromptCategory,
}

impl PromptPair {
    pub fn new(
        id: impl Into<String>,
        bonafide_text: impl Into<String>,
        morph_text: impl Into<String>,
        category: PromptCategory,
    ) -> Result<Self> {
        let pair = PromptPair {
            id: id.into(),
            bonafide_text: bonafide_text.into(),
            morph_text: morph_text.into(),
            category,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Constraint("prompt id is empty".into()));
        }
        if self.bonafide_text.trim().is_empty() || self.morph_text.trim().is_empty() {
            return Err(Error::Constraint(format!("prompt {:?} has an empty text", self.id)));
        }
        if self.bonafide_text == self.morph_text {
            return Err(Error::Constraint(format!(
                "prompt {:?} uses the same text for both classes",
                self.id
            )));
        }
        Ok(())
    }
}

/// Placeholder prompt texts: five short, five long. Replace through a bank file.
const DEFAULT_PROMPTS: [(&str, &str, &str, PromptCategory); 10] = [
    ("p01", "a photo of a real face", "a photo of a morphed face", PromptCategory::Short),
    ("p02", "a bona fide face", "a morphed face", PromptCategory::Short),
    ("p03", "a genuine face image", "a manipulated face image", PromptCategory::Short),
    ("p04", "a real person", "a blend of two people", PromptCategory::Short),
    ("p05", "an authentic face photo", "a fake face photo", PromptCategory::Short),
    (
        "p06",
        "a passport photo of a real person with natural skin texture and consistent facial features",
        "a passport photo of a morphed face blended from two different people with unnatural skin texture",
        PromptCategory::Long,
    ),
    (
        "p07",
        "a face image captured directly from one person without any digital manipulation",
        "a face image digitally created by combining the facial features of two persons",
        PromptCategory::Long,
    ),
    (
        "p08",
        "a natural face with sharp eyes, consistent iris patterns and realistic hair",
        "a synthetic face with blurry eyes, ghosting artifacts around the iris and hair",
        PromptCategory::Long,
    ),
    (
        "p09",
        "an unaltered frontal face photograph with consistent lighting and shadows",
        "an altered frontal face photograph with inconsistent lighting, double edges and shadows",
        PromptCategory::Long,
    ),
    (
        "p10",
        "a real human face printed and scanned for an identity document",
        "a morphing attack face printed and scanned for an identity document",
        PromptCategory::Long,
    ),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptBank {
    pairs: Vec<PromptPair>,
}

impl Default for PromptBank {
    fn default() -> Self {
        PromptBank {
            pairs: DEFAULT_PROMPTS
                .iter()
                .map(|&(id, b, m, c)| PromptPair {
                    id: id.into(),
                    bonafide_text: b.into(),
                    morph_text: m.into(),
                    category: c,
                })
                .collect(),
        }
    }
}

impl PromptBank {
    pub fn new(pairs: Vec<PromptPair>) -> Result<Self> {
        let bank = PromptBank { pairs };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Constraint("prompt bank is empty".into()));
        }
        let mut seen = HashSet::new();
        for pair in &self.pairs {
            pair.validate()?;
            if !seen.insert(pair.id.as_str()) {
                return Err(Error::Constraint(format!("duplicate prompt id {:?}", pair.id)));
            }
        }
        Ok(())
    }

    pub fn pairs(&self) -> &[PromptPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PromptPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bank: PromptBank = serde_json::from_slice(&bytes)?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub prompt_id: String,
    pub p_morph: f64,
    pub p_bonafide: f64,
    pub cos_bonafide: f64,
    pub cos_morph: f64,
    pub predicted_text: String,
}

/// Two-way softmax over scaled cosines, returned as `(p_bonafide, p_morph)`.
pub fn softmax_pair(cos_bonafide: f64, cos_morph: f64, logit_scale: f64) -> (f64, f64) {
    let lb = logit_scale * cos_bonafide;
    let lm = logit_scale * cos_morph;
    let max = lb.max(lm);
    let eb = (lb - max).exp();
    let em = (lm - max).exp();
    let z = eb + em;
    (eb / z, em / z)
}

/// Text embeddings of one prompt pair, computed once and reused for every image.
#[derive(Debug, Clone)]
pub struct PairEmbeddings {
    pub pair: PromptPair,
    pub bonafide: Embedding,
    pub morph: Embedding,
}

impl PairEmbeddings {
    pub fn encode<E: DualEncoder + ?Sized>(pair: &PromptPair, encoder: &E) -> Result<Self> {
        Ok(PairEmbeddings {
            pair: pair.clone(),
            bonafide: encoder.encode_text(&encoder.tokenize(&pair.bonafide_text))?,
            morph: encoder.encode_text(&encoder.tokenize(&pair.morph_text))?,
        })
    }

    pub fn score(&self, sample_id: &str, image: &Embedding, logit_scale: f64) -> ScoreRecord {
        let cos_bonafide = image.dot(&self.bonafide);
        let cos_morph = image.dot(&self.morph);
        let (p_bonafide, p_morph) = softmax_pair(cos_bonafide, cos_morph, logit_scale);
        // ties go to the morph text, matching `classify` at p = 0.5
        let predicted_text = if cos_morph >= cos_bonafide {
            &self.pair.morph_text
        } else {
            &self.pair.bonafide_text
        };
        ScoreRecord {
            sample_id: sample_id.to_string(),
            prompt_id: self.pair.id.clone(),
            p_morph,
            p_bonafide,
            cos_bonafide,
            cos_morph,
            predicted_text: predicted_text.clone(),
        }
    }
}

/// Scores one image embedding against one prompt pair.
pub fn score<E: DualEncoder + ?Sized>(
    sample_id: &str,
    image: &Embedding,
    pair: &PromptPair,
    encoder: &E,
) -> Result<ScoreRecord> {
    Ok(PairEmbeddings::encode(pair, encoder)?.score(sample_id, image, encoder.logit_scale()))
}

/// Operating-point decision: `p_morph >= threshold` is a morph.
pub fn classify(p_morph: f64, threshold: f64) -> Label {
    if p_morph >= threshold {
        Label::Morph
    } else {
        Label::BonaFide
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankRun {
    /// Sorted by `(sample_id, prompt_id)`.
    pub records: Vec<ScoreRecord>,
    pub skipped: Vec<SkippedSample>,
}

pub(crate) fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {parallelism} workers: {e}")))
}

/// Embeds every manifest image; failures are returned per sample.
pub fn embed_manifest<E: DualEncoder + ?Sized>(
    manifest: &Manifest,
    encoder: &E,
    parallelism: usize,
) -> Result<Vec<Result<Embedding>>> {
    let spec = encoder.preprocess_spec();
    let pool = thread_pool(parallelism)?;
    Ok(pool.install(|| {
        manifest
            .samples
            .par_iter()
            .map(|sample| {
                let raw = imaging::decode(&manifest.resolve_path(sample))?;
                encoder.encode_image(&imaging::preprocess(&raw, spec))
            })
            .collect()
    }))
}

/// Scores every manifest sample against every prompt pair.
///
/// Text embeddings are computed once per pair and image embeddings once per
/// sample. Samples that fail to decode or encode are skipped and listed.
/// `parallelism == 0` uses one worker per logical core.
pub fn run_bank<E: DualEncoder + ?Sized>(
    manifest: &Manifest,
    bank: &PromptBank,
    encoder: &E,
    parallelism: usize,
) -> Result<BankRun> {
    bank.validate()?;
    let pairs = bank
        .pairs()
        .iter()
        .map(|p| PairEmbeddings::encode(p, encoder))
        .collect::<Result<Vec<_>>>()?;
    let scale = encoder.logit_scale();

    let embeddings = embed_manifest(manifest, encoder, parallelism)?;
    let mut records = Vec::with_capacity(manifest.len() * pairs.len());
    let mut skipped = Vec::new();
    for (sample, embedding) in manifest.samples.iter().zip(embeddings) {
        match embedding {
            Ok(embedding) => {
                records.extend(pairs.iter().map(|p| p.score(&sample.id, &embedding, scale)));
            }
            Err(e) => {
                log::warn!("skipping sample {}: {e}", sample.id);
                skipped.push(SkippedSample {
                    id: sample.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    records.sort_by(|a, b| (&a.sample_id, &a.prompt_id).cmp(&(&b.sample_id, &b.prompt_id)));
    skipped.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(BankRun { records, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_softmax() {
        assert_eq!(softmax_pair(0.3, 0.3, 100.0), (0.5, 0.5));
    }

    #[test]
    fn saturated_softmax_is_stable() {
        let (pb, pm) = softmax_pair(1.0, 0.0, 100.0);
        assert!(pm.is_finite() && pm > 0.0);
        // 1 / (1 + e^100)
        assert!((pm - 3.720075976020836e-44).abs() < 1e-56);
        assert_eq!(pb, 1.0);
        let (pb, pm) = softmax_pair(-1.0, 1.0, 1000.0);
        assert_eq!(pm, 1.0);
        assert_eq!(pb, 0.0);
    }

    #[test]
    fn classify_tie_rule() {
        assert_eq!(classify(0.7, 0.5), Label::Morph);
        assert_eq!(classify(0.5, 0.5), Label::Morph);
        assert_eq!(classify(0.49999, 0.5), Label::BonaFide);
    }

    #[test]
    fn default_bank_shape() {
        let bank = PromptBank::default();
        bank.validate().unwrap();
        assert_eq!(bank.len(), 10);
        let short = bank.pairs().iter().filter(|p| p.category == PromptCategory::Short).count();
        assert_eq!(short, 5);
        assert_eq!(bank.pairs()[0].category, PromptCategory::Short);
        assert_eq!(bank.pairs()[9].category, PromptCategory::Long);
    }

    #[test]
    fn bank_validation() {
        let pair = |id: &str| PromptPair {
            id: id.into(),
            bonafide_text: "real".into(),
            morph_text: "fake".into(),
            category: PromptCategory::Short,
        };
        assert!(PromptBank::new(vec![pair("a"), pair("a")]).is_err());
        assert!(PromptBank::new(vec![]).is_err());
        assert!(PromptPair::new("x", "same", "same", PromptCategory::Long).is_err());
        assert!(PromptPair::new("x", " ", "b", PromptCategory::Long).is_err());
    }

    #[test]
    fn bank_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let bank = PromptBank::default();
        bank.save(&path).unwrap();
        assert_eq!(PromptBank::load(&path).unwrap(), bank);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"bonafide_text\""));
        assert!(text.contains("\"category\": \"short\""));
    }
}
