//! Zero-shot single-image morphing attack detection with dual text-image encoders.
//!
//! A face image and a pair of prompts ("real face" / "morphed face") are
//! embedded by an exported dual encoder; the softmax over scaled cosines gives
//! `p_morph`. The crate also carries the evaluation side: manifests, ISO-style
//! error rates, image-only baselines, the per-cell experiments and LIME
//! explanations.

pub mod baselines;
pub mod classifier;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod explain;
pub mod imaging;
pub mod manifest;
pub mod metrics;
pub mod report;
pub mod tokenizer;
pub mod toy;

pub use classifier::{run_bank, BankRun, PromptBank, PromptCategory, PromptPair, ScoreRecord};
pub use encoder::{load_bundle, DualEncoder, Embedding, ModelBundle};
pub use error::{Error, ErrorKind, Result};
pub use experiments::{AggregateStat, ExperimentResult, ModelRow};
pub use imaging::{ImageTensor, PreprocessSpec, RawImage};
pub use manifest::{load_manifest, FaceSample, Generator, Label, Manifest, ManifestFormat, Medium};
pub use metrics::{DetPoint, LabeledScores, OperatingPoint};
pub use tokenizer::{TokenSequence, Vocabulary};
