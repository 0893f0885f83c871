//! Image-only baselines: cosine distance to a bona fide prototype.
//!
//! A pretrained feature extractor embeds a user-supplied set of bona fide
//! reference images; their normalized mean is the prototype. An image's
//! score is `(1 - cos(embedding, prototype)) / 2`, so higher means further
//! from bona fide, the same convention as `p_morph`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tract_onnx::prelude::Tensor;

use crate::classifier::{thread_pool, SkippedSample};
use crate::encoder::{Embedding, GraphSession};
use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor, PreprocessSpec};
use crate::manifest::{Label, Manifest};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Norm below which the mean of reference embeddings has no direction.
const MIN_MEAN_NORM: f64 = 1e-6;

/// Feature-extractor graph plus its input contract.
#[derive(Debug, Clone)]
pub struct Backbone {
    path: PathBuf,
    session: GraphSession,
    preprocess: PreprocessSpec,
}

impl Backbone {
    pub fn load(path: &Path, preprocess: PreprocessSpec) -> Result<Backbone> {
        preprocess.validate()?;
        Ok(Backbone {
            path: path.to_path_buf(),
            session: GraphSession::load(path)?,
            preprocess,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn preprocess_spec(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    pub fn embed(&self, tensor: &ImageTensor) -> Result<Embedding> {
        let s = tensor.size();
        let input = Tensor::from_shape(&[1, 3, s, s], tensor.data())
            .map_err(|e| Error::Inference(format!("{e:#}")))?;
        let row = self
            .session
            .run(input)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Inference("backbone returned no rows".into()))?;
        Embedding::normalize(&row).map_err(|e| Error::Inference(e.to_string()))
    }

    fn embed_file(&self, manifest: &Manifest, index: usize) -> Result<Embedding> {
        let raw = imaging::decode(&manifest.resolve_path(&manifest.samples[index]))?;
        self.embed(&imaging::preprocess(&raw, &self.preprocess))
    }
}

/// Normalized mean direction of unit embeddings.
pub fn prototype_from_embeddings(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings.first().ok_or(Error::EmptyReference)?;
    let mut sum = vec![0.0f64; first.dim()];
    for e in embeddings {
        if e.dim() != sum.len() {
            return Err(Error::InvalidArgument("reference embeddings differ in width".into()));
        }
        for (acc, &v) in sum.iter_mut().zip(e.as_slice()) {
            *acc += v as f64;
        }
    }
    let n = embeddings.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < MIN_MEAN_NORM {
        return Err(Error::Degenerate(format!(
            "reference embeddings cancel out (mean norm {norm:e})"
        )));
    }
    let unit: Vec<f32> = mean.iter().map(|v| (v / norm) as f32).collect();
    Embedding::normalize(&unit)
}

/// `(1 - cos) / 2`, clamped to `[0, 1]` against rounding.
pub fn prototype_distance(embedding: &Embedding, prototype: &Embedding) -> f64 {
    ((1.0 - embedding.dot(prototype)) / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerState {
    pub name: String,
    pub backbone_path: PathBuf,
    pub preprocess: PreprocessSpec,
    pub prototype: Embedding,
    pub ref_count: usize,
    pub reference_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PrototypeScorer {
    backbone: Backbone,
    state: ScorerState,
}

impl PrototypeScorer {
    pub fn name(&self) -> &str {
        &self.state.name
    }

    pub fn state(&self) -> &ScorerState {
        &self.state
    }

    pub fn prototype(&self) -> &Embedding {
        &self.state.prototype
    }

    pub fn ref_count(&self) -> usize {
        self.state.ref_count
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.state)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Restores a fitted scorer; relative backbone paths resolve against the state file.
    pub fn load(path: &Path) -> Result<PrototypeScorer> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let state: ScorerState = serde_json::from_slice(&bytes)?;
        if state.ref_count == 0 {
            return Err(Error::EmptyReference);
        }
        if (state.prototype.norm() - 1.0).abs() > 1e-4 {
            return Err(Error::Constraint("stored prototype is not unit norm".into()));
        }
        let backbone_path = match path.parent() {
            Some(dir) if state.backbone_path.is_relative() => dir.join(&state.backbone_path),
            _ => state.backbone_path.clone(),
        };
        let backbone = Backbone::load(&backbone_path, state.preprocess.clone())?;
        Ok(PrototypeScorer { backbone, state })
    }

    pub fn score(&self, tensor: &ImageTensor) -> Result<f64> {
        Ok(prototype_distance(&self.backbone.embed(tensor)?, &self.state.prototype))
    }

    /// Scores every sample of an evaluation manifest disjoint from the reference set.
    pub fn score_manifest(&self, manifest: &Manifest, parallelism: usize) -> Result<BaselineRun> {
        let reference: HashSet<&str> = self.state.reference_ids.iter().map(String::as_str).collect();
        if let Some(shared) = manifest.samples.iter().find(|s| reference.contains(s.id.as_str())) {
            return Err(Error::Constraint(format!(
                "sample {:?} is in both the reference and the evaluation set",
                shared.id
            )));
        }
        let pool = thread_pool(parallelism)?;
        let results: Vec<Result<f64>> = pool.install(|| {
            (0..manifest.len())
                .into_par_iter()
                .map(|i| {
                    let e = self.backbone.embed_file(manifest, i)?;
                    Ok(prototype_distance(&e, &self.state.prototype))
                })
                .collect()
        });
        let mut run = BaselineRun::default();
        for (sample, result) in manifest.samples.iter().zip(results) {
            match result {
                Ok(score) => run.scores.push((sample.id.clone(), score)),
                Err(e) => run.skipped.push(SkippedSample {
                    id: sample.id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        run.scores.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(run)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineRun {
    /// `(sample_id, score)` sorted by id.
    pub scores: Vec<(String, f64)>,
    pub skipped: Vec<SkippedSample>,
}

/// Fits the bona fide prototype from a reference manifest.
pub fn fit_prototype(name: &str, backbone: Backbone, reference: &Manifest) -> Result<PrototypeScorer> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if let Some(s) = reference.samples.iter().find(|s| s.label != Label::BonaFide) {
        return Err(Error::Constraint(format!(
            "reference sample {:?} is not bona fide",
            s.id
        )));
    }
    let embeddings = (0..reference.len())
        .map(|i| backbone.embed_file(reference, i))
        .collect::<Result<Vec<_>>>()?;
    let prototype = prototype_from_embeddings(&embeddings)?;
    let state = ScorerState {
        name: name.to_string(),
        backbone_path: backbone.path.clone(),
        preprocess: backbone.preprocess.clone(),
        prototype,
        ref_count: embeddings.len(),
        reference_ids: reference.samples.iter().map(|s| s.id.clone()).collect(),
    };
    Ok(PrototypeScorer { backbone, state })
}
