//! Image and text encoders loaded from an ONNX exchange bundle.
//!
//! Bundle layout:
//!
//! ```text
//! config.json          embed_dim, image_size, context_length, logit_scale,
//!                      channel_mean, channel_std
//! image_encoder.onnx   [N, 3, S, S] f32 -> [N, embed_dim]
//! text_encoder.onnx    [N, context_length] int -> [N, embed_dim]
//! vocab.json, merges.txt
//! ```
//!
//! Graph outputs are projected but not normalized; L2 normalization happens
//! here. The text graph is expected to select the end-token feature itself.
//! Compiled plans are immutable and `Send + Sync`, so one bundle can be shared
//! by every worker thread.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tract_onnx::prelude::*;
use tract_onnx::tract_hir::internal::DimLike;

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, Interpolation, PreprocessSpec, ResizeMode};
use crate::tokenizer::{self, TokenSequence, Vocabulary};

pub const CONFIG_FILE: &str = "config.json";
pub const IMAGE_GRAPH_FILE: &str = "image_encoder.onnx";
pub const TEXT_GRAPH_FILE: &str = "text_encoder.onnx";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";

/// Unit-normalized vector in the shared image/text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Scales `raw` to unit L2 norm. Fails on zero or non-finite input.
    pub fn normalize(raw: &[f32]) -> Result<Embedding> {
        let norm = raw.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Degenerate(format!(
                "cannot normalize vector with norm {norm}"
            )));
        }
        Ok(Embedding(raw.iter().map(|&v| (v as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Inner product; the cosine similarity for unit vectors.
    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }
}

fn default_resize_mode() -> ResizeMode {
    ResizeMode::ShorterSideThenCenterCrop
}

fn default_interpolation() -> Interpolation {
    Interpolation::Bicubic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub embed_dim: usize,
    pub image_size: u32,
    pub context_length: usize,
    pub logit_scale: f32,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
    #[serde(default = "default_resize_mode", skip_serializing_if = "is_default_resize")]
    pub resize_mode: ResizeMode,
    #[serde(default = "default_interpolation", skip_serializing_if = "is_default_interp")]
    pub interpolation: Interpolation,
    /// ONNX opset the graphs were exported with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opset: Option<i64>,
}

fn is_default_resize(m: &ResizeMode) -> bool {
    *m == default_resize_mode()
}

fn is_default_interp(i: &Interpolation) -> bool {
    *i == default_interpolation()
}

impl BundleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Bundle("embed_dim must be positive".into()));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::Bundle(format!(
                "logit_scale must be positive and finite, got {}",
                self.logit_scale
            )));
        }
        if self.context_length < 2 {
            return Err(Error::Bundle("context_length must be at least 2".into()));
        }
        self.preprocess_spec()
            .validate()
            .map_err(|e| Error::Bundle(e.to_string()))
    }

    pub fn preprocess_spec(&self) -> PreprocessSpec {
        PreprocessSpec {
            target_size: self.image_size,
            resize_mode: self.resize_mode,
            channel_mean: self.channel_mean,
            channel_std: self.channel_std,
            interpolation: self.interpolation,
        }
    }
}

/// One compiled single-input, single-output graph.
#[derive(Clone)]
pub struct GraphSession {
    plan: Arc<TypedRunnableModel>,
    input_type: DatumType,
    /// Input dimensions; `None` where symbolic.
    input_shape: Vec<Option<usize>>,
    output_width: Option<usize>,
    name: String,
}

impl std::fmt::Debug for GraphSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GraphSession")
            .field("name", &self.name)
            .field("input_type", &self.input_type)
            .field("input_shape", &self.input_shape)
            .field("output_width", &self.output_width)
            .finish()
    }
}

fn bundle_err(path: &Path) -> impl Fn(TractError) -> Error + '_ {
    move |e| Error::Bundle(format!("{}: {e:#}", path.display()))
}

impl GraphSession {
    pub fn load(path: &Path) -> Result<GraphSession> {
        if !path.is_file() {
            return Err(Error::Bundle(format!("missing graph file {}", path.display())));
        }
        let model = tract_onnx::onnx().model_for_path(path).map_err(bundle_err(path))?;
        if model.inputs.len() != 1 || model.outputs.len() != 1 {
            return Err(Error::Bundle(format!(
                "{}: expected one input and one output, found {} and {}",
                path.display(),
                model.inputs.len(),
                model.outputs.len()
            )));
        }
        let typed = model.into_optimized().map_err(bundle_err(path))?;
        let input = typed.input_fact(0).map_err(bundle_err(path))?.clone();
        let output = typed.output_fact(0).map_err(bundle_err(path))?.clone();
        let output_width = output.shape.last().and_then(|d| d.to_usize().ok());
        let plan = typed.into_runnable().map_err(bundle_err(path))?;
        Ok(GraphSession {
            plan,
            input_type: input.datum_type,
            input_shape: input.shape.iter().map(|d| d.to_usize().ok()).collect(),
            output_width,
            name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        })
    }

    pub fn input_shape(&self) -> &[Option<usize>] {
        &self.input_shape
    }

    /// Whether the leading input axis accepts more than one item.
    pub fn supports_batch(&self) -> bool {
        !matches!(self.input_shape.first(), Some(Some(1)))
    }

    /// Runs the graph and returns the output rows.
    pub fn run(&self, input: Tensor) -> Result<Vec<Vec<f32>>> {
        let outputs = self
            .plan
            .run(tvec!(input.into_tvalue()))
            .map_err(|e| Error::Inference(format!("{}: {e:#}", self.name)))?;
        let output = outputs[0]
            .cast_to::<f32>()
            .map_err(|e| Error::Inference(format!("{}: {e:#}", self.name)))?;
        let view = output
            .to_plain_array_view::<f32>()
            .map_err(|e| Error::Inference(format!("{}: {e:#}", self.name)))?;
        match view.ndim() {
            0 => Err(Error::Inference(format!("{}: scalar output", self.name))),
            1 => Ok(vec![view.iter().copied().collect()]),
            _ => {
                // [N, D, 1, 1]-style pooled outputs flatten to [N, D]
                let rows = view.shape()[0];
                let flat: Vec<f32> = view.iter().copied().collect();
                let width = flat.len() / rows.max(1);
                Ok(flat.chunks(width.max(1)).map(<[f32]>::to_vec).collect())
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = self.input_shape.len() == shape.len()
            && self
                .input_shape
                .iter()
                .zip(shape)
                .all(|(want, got)| want.map_or(true, |w| w == *got));
        if ok {
            Ok(())
        } else {
            Err(Error::Inference(format!(
                "{}: input shape {shape:?} does not fit {:?}",
                self.name, self.input_shape
            )))
        }
    }

    fn check_width(&self, embed_dim: usize, probe: impl FnOnce() -> Tensor) -> Result<()> {
        let width = match self.output_width {
            Some(w) => w,
            None => {
                let rows = self.run(probe()).map_err(|e| Error::Bundle(e.to_string()))?;
                rows.first().map_or(0, Vec::len)
            }
        };
        if width != embed_dim {
            return Err(Error::Bundle(format!(
                "{}: output width {width} differs from embed_dim {embed_dim}",
                self.name
            )));
        }
        Ok(())
    }
}

/// What the scoring pipeline needs from a dual encoder.
pub trait DualEncoder: Sync {
    fn preprocess_spec(&self) -> &PreprocessSpec;
    fn tokenize(&self, text: &str) -> TokenSequence;
    fn encode_image(&self, tensor: &ImageTensor) -> Result<Embedding>;
    fn encode_text(&self, tokens: &TokenSequence) -> Result<Embedding>;
    fn logit_scale(&self) -> f64;
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    dir: PathBuf,
    config: BundleConfig,
    preprocess: PreprocessSpec,
    image: GraphSession,
    text: GraphSession,
    vocab: Vocabulary,
}

pub fn read_config(dir: &Path) -> Result<BundleConfig> {
    let path = dir.join(CONFIG_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Bundle(format!("cannot read {}: {e}", path.display())))?;
    let config: BundleConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Bundle(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    for file in [CONFIG_FILE, IMAGE_GRAPH_FILE, TEXT_GRAPH_FILE, VOCAB_FILE, MERGES_FILE] {
        if !dir.join(file).is_file() {
            return Err(Error::Bundle(format!(
                "{} is missing {file}",
                dir.display()
            )));
        }
    }
    let config = read_config(dir)?;
    let vocab = tokenizer::load_vocab(&dir.join(VOCAB_FILE), &dir.join(MERGES_FILE))
        .and_then(|v| v.with_context_length(config.context_length))
        .map_err(|e| Error::Bundle(e.to_string()))?;

    let image = GraphSession::load(&dir.join(IMAGE_GRAPH_FILE))?;
    let size = config.image_size as usize;
    if image.input_shape.len() != 4
        || image.input_shape[1..]
            .iter()
            .zip([3, size, size])
            .any(|(d, want)| d.is_some_and(|d| d != want))
    {
        return Err(Error::Bundle(format!(
            "image graph input {:?} does not accept [N, 3, {size}, {size}]",
            image.input_shape
        )));
    }
    image.check_width(config.embed_dim, || {
        Tensor::zero::<f32>(&[1, 3, size, size]).expect("zero tensor")
    })?;

    let text = GraphSession::load(&dir.join(TEXT_GRAPH_FILE))?;
    if text.input_shape.len() != 2 || text.input_shape[1].is_some_and(|d| d != config.context_length) {
        return Err(Error::Bundle(format!(
            "text graph input {:?} does not accept [N, {}]",
            text.input_shape, config.context_length
        )));
    }
    if !matches!(text.input_type, DatumType::I64 | DatumType::I32) {
        return Err(Error::Bundle(format!(
            "text graph input must be int32 or int64, got {:?}",
            text.input_type
        )));
    }
    let probe = tokenizer::tokenize("", &vocab);
    let probe_tensor = token_tensor(text.input_type, &[&probe])?;
    text.check_width(config.embed_dim, || probe_tensor)?;

    Ok(ModelBundle {
        dir: dir.to_path_buf(),
        preprocess: config.preprocess_spec(),
        config,
        image,
        text,
        vocab,
    })
}

fn image_tensor(batch: &[&ImageTensor]) -> Result<Tensor> {
    let size = batch[0].size();
    let mut data = Vec::with_capacity(batch.len() * 3 * size * size);
    for t in batch {
        if t.size() != size {
            return Err(Error::Inference("mixed tensor sizes in one batch".into()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_shape(&[batch.len(), 3, size, size], &data)
        .map_err(|e| Error::Inference(format!("{e:#}")))
}

fn token_tensor(datum: DatumType, batch: &[&TokenSequence]) -> Result<Tensor> {
    let len = batch[0].ids().len();
    let shape = [batch.len(), len];
    let ids = batch.iter().flat_map(|t| t.ids().iter().copied());
    let tensor = match datum {
        DatumType::I32 => Tensor::from_shape(&shape, &ids.map(|i| i as i32).collect::<Vec<_>>()),
        _ => Tensor::from_shape(&shape, &ids.map(|i| i as i64).collect::<Vec<_>>()),
    };
    tensor.map_err(|e| Error::Inference(format!("{e:#}")))
}

impl ModelBundle {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &BundleConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn finish(&self, rows: Vec<Vec<f32>>, expected: usize) -> Result<Vec<Embedding>> {
        if rows.len() != expected {
            return Err(Error::Inference(format!(
                "graph returned {} rows for {expected} inputs",
                rows.len()
            )));
        }
        rows.iter()
            .map(|row| {
                if row.len() != self.config.embed_dim {
                    return Err(Error::Inference(format!(
                        "embedding width {} differs from embed_dim {}",
                        row.len(),
                        self.config.embed_dim
                    )));
                }
                Embedding::normalize(row).map_err(|e| Error::Inference(e.to_string()))
            })
            .collect()
    }

    /// Encodes several images, batched when the graph allows it.
    pub fn encode_images(&self, tensors: &[ImageTensor]) -> Result<Vec<Embedding>> {
        if tensors.is_empty() {
            return Ok(Vec::new());
        }
        let size = self.config.image_size as usize;
        if let Some(bad) = tensors.iter().find(|t| t.size() != size) {
            return Err(Error::Inference(format!(
                "tensor size {} differs from image_size {size}",
                bad.size()
            )));
        }
        if !self.image.supports_batch() {
            return tensors.iter().map(|t| self.encode_image(t)).collect();
        }
        let refs: Vec<&ImageTensor> = tensors.iter().collect();
        let input = image_tensor(&refs)?;
        self.image.check_input(input.shape())?;
        self.finish(self.image.run(input)?, tensors.len())
    }

    pub fn encode_texts(&self, sequences: &[TokenSequence]) -> Result<Vec<Embedding>> {
        if sequences.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = sequences.iter().find(|s| s.ids().len() != self.config.context_length) {
            return Err(Error::Inference(format!(
                "sequence length {} differs from context_length {}",
                bad.ids().len(),
                self.config.context_length
            )));
        }
        if !self.text.supports_batch() {
            return sequences.iter().map(|s| self.encode_text(s)).collect();
        }
        let refs: Vec<&TokenSequence> = sequences.iter().collect();
        let input = token_tensor(self.text.input_type, &refs)?;
        self.text.check_input(input.shape())?;
        self.finish(self.text.run(input)?, sequences.len())
    }
}

impl DualEncoder for ModelBundle {
    fn preprocess_spec(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    fn tokenize(&self, text: &str) -> TokenSequence {
        tokenizer::tokenize(text, &self.vocab)
    }

    fn encode_image(&self, tensor: &ImageTensor) -> Result<Embedding> {
        let size = self.config.image_size as usize;
        if tensor.size() != size {
            return Err(Error::Inference(format!(
                "tensor size {} differs from image_size {size}",
                tensor.size()
            )));
        }
        let input = image_tensor(&[tensor])?;
        self.image.check_input(input.shape())?;
        Ok(self.finish(self.image.run(input)?, 1)?.remove(0))
    }

    fn encode_text(&self, tokens: &TokenSequence) -> Result<Embedding> {
        if tokens.ids().len() != self.config.context_length {
            return Err(Error::Inference(format!(
                "sequence length {} differs from context_length {}",
                tokens.ids().len(),
                self.config.context_length
            )));
        }
        let input = token_tensor(self.text.input_type, &[tokens])?;
        self.text.check_input(input.shape())?;
        Ok(self.finish(self.text.run(input)?, 1)?.remove(0))
    }

    fn logit_scale(&self) -> f64 {
        self.config.logit_scale as f64
    }
}
