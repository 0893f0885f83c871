//! Tiny deterministic bundles and datasets for tests, demos and benchmarks.
//!
//! The toy image encoder is a single linear map over the flattened input
//! tensor; the toy text encoder mean-pools token plus position embeddings and
//! applies a linear projection. Both are written as ONNX graphs in the same
//! layout an exported checkpoint uses, so they run through the same runtime.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use prost::Message;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tract_onnx::pb;

use crate::classifier::PromptBank;
use crate::encoder::{self, BundleConfig, ModelBundle};
use crate::error::{Error, Result};
use crate::imaging::{Interpolation, RawImage, ResizeMode};
use crate::manifest::{write_manifest, FaceSample, Generator, Label, Manifest, ManifestFormat, Medium};
use crate::tokenizer::{self, byte_to_unicode, Vocabulary, END_OF_WORD, EOT_TOKEN, SOT_TOKEN};

pub const TOY_IMAGE_SIZE: u32 = 32;
pub const TOY_LOGIT_SCALE: f32 = 100.0;
pub const OPSET: i64 = 13;
const CHANNEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CHANNEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

pub(crate) mod onnx {
    use super::pb;
    use pb::tensor_proto::DataType;

    pub enum Dim {
        Fixed(i64),
        Param(&'static str),
    }

    pub fn tensor_f32(name: &str, dims: &[i64], data: &[f32]) -> pb::TensorProto {
        pb::TensorProto {
            name: name.into(),
            dims: dims.to_vec(),
            data_type: DataType::Float as i32,
            raw_data: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ..Default::default()
        }
    }

    pub fn value_info(name: &str, elem: DataType, dims: &[Dim]) -> pb::ValueInfoProto {
        use pb::tensor_shape_proto::{dimension::Value, Dimension};
        let dim = dims
            .iter()
            .map(|d| Dimension {
                value: Some(match d {
                    Dim::Fixed(v) => Value::DimValue(*v),
                    Dim::Param(p) => Value::DimParam((*p).into()),
                }),
                ..Default::default()
            })
            .collect();
        pb::ValueInfoProto {
            name: name.into(),
            r#type: Some(pb::TypeProto {
                value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
                    elem_type: elem as i32,
                    shape: Some(pb::TensorShapeProto { dim }),
                })),
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    pub fn attr_int(name: &str, v: i64) -> pb::AttributeProto {
        pb::AttributeProto {
            name: name.into(),
            r#type: pb::attribute_proto::AttributeType::Int as i32,
            i: v,
            ..Default::default()
        }
    }

    pub fn attr_ints(name: &str, v: &[i64]) -> pb::AttributeProto {
        pb::AttributeProto {
            name: name.into(),
            r#type: pb::attribute_proto::AttributeType::Ints as i32,
            ints: v.to_vec(),
            ..Default::default()
        }
    }

    pub fn node(op: &str, inputs: &[&str], outputs: &[&str], attribute: Vec<pb::AttributeProto>) -> pb::NodeProto {
        pb::NodeProto {
            name: format!("{}_{}", op.to_lowercase(), outputs[0]),
            op_type: op.into(),
            input: inputs.iter().map(|s| s.to_string()).collect(),
            output: outputs.iter().map(|s| s.to_string()).collect(),
            attribute,
            ..Default::default()
        }
    }

    pub fn model(graph: pb::GraphProto) -> pb::ModelProto {
        pb::ModelProto {
            ir_version: 7,
            opset_import: vec![pb::OperatorSetIdProto {
                domain: String::new(),
                version: super::OPSET,
            }],
            producer_name: "zsmad-toy".into(),
            graph: Some(graph),
            ..Default::default()
        }
    }

    /// Reads float initializers back out of a serialized model.
    #[cfg(test)]
    pub fn initializers(bytes: &[u8]) -> std::collections::HashMap<String, (Vec<i64>, Vec<f32>)> {
        use prost::Message;
        let model = pb::ModelProto::decode(bytes).expect("valid model");
        model
            .graph
            .unwrap_or_default()
            .initializer
            .into_iter()
            .map(|t| {
                let data = t
                    .raw_data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                (t.name, (t.dims, data))
            })
            .collect()
    }
}

use onnx::{attr_int, attr_ints, node, tensor_f32, value_info, Dim};
use pb::tensor_proto::DataType;

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect()
}

/// `[N, 3, S, S] -> Flatten -> MatMul(W[3SS, D])`.
pub fn linear_image_graph(rng: &mut ChaCha8Rng, image_size: u32, out_dim: usize) -> Vec<u8> {
    let fan_in = 3 * (image_size as usize).pow(2);
    let weights = uniform(rng, fan_in * out_dim, 1.0 / (fan_in as f32).sqrt());
    let s = image_size as i64;
    let graph = pb::GraphProto {
        name: "toy_image_encoder".into(),
        node: vec![
            node("Flatten", &["pixel_values"], &["flat"], vec![attr_int("axis", 1)]),
            node("MatMul", &["flat", "projection"], &["image_embeds"], vec![]),
        ],
        initializer: vec![tensor_f32("projection", &[fan_in as i64, out_dim as i64], &weights)],
        input: vec![value_info(
            "pixel_values",
            DataType::Float,
            &[Dim::Param("batch"), Dim::Fixed(3), Dim::Fixed(s), Dim::Fixed(s)],
        )],
        output: vec![value_info(
            "image_embeds",
            DataType::Float,
            &[Dim::Param("batch"), Dim::Fixed(out_dim as i64)],
        )],
        ..Default::default()
    };
    onnx::model(graph).encode_to_vec()
}

/// `ids -> Gather(table) + positions -> ReduceMean(seq) -> MatMul(P)`.
fn text_graph(rng: &mut ChaCha8Rng, vocab_size: usize, context_length: usize, dim: usize) -> Vec<u8> {
    let table = uniform(rng, vocab_size * dim, 1.0);
    let positions = uniform(rng, context_length * dim, 0.1);
    let projection = uniform(rng, dim * dim, 1.0 / (dim as f32).sqrt());
    let (v, l, d) = (vocab_size as i64, context_length as i64, dim as i64);
    let graph = pb::GraphProto {
        name: "toy_text_encoder".into(),
        node: vec![
            node("Gather", &["token_embedding", "input_ids"], &["tokens"], vec![attr_int("axis", 0)]),
            node("Add", &["tokens", "position_embedding"], &["summed"], vec![]),
            node(
                "ReduceMean",
                &["summed"],
                &["pooled"],
                vec![attr_ints("axes", &[1]), attr_int("keepdims", 0)],
            ),
            node("MatMul", &["pooled", "text_projection"], &["text_embeds"], vec![]),
        ],
        initializer: vec![
            tensor_f32("token_embedding", &[v, d], &table),
            tensor_f32("position_embedding", &[l, d], &positions),
            tensor_f32("text_projection", &[d, d], &projection),
        ],
        input: vec![value_info(
            "input_ids",
            DataType::Int64,
            &[Dim::Param("batch"), Dim::Fixed(l)],
        )],
        output: vec![value_info("text_embeds", DataType::Float, &[Dim::Param("batch"), Dim::Fixed(d)])],
        ..Default::default()
    };
    onnx::model(graph).encode_to_vec()
}

/// Byte-level vocabulary whose merges spell out each word left to right.
pub fn toy_vocabulary<'a>(words: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let table = byte_to_unicode();
    let mut tokens: Vec<String> = tokenizer::base_units().collect();
    let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    let mut merges = Vec::new();
    for word in words {
        let mut symbols: Vec<String> = word.bytes().map(|b| table[b as usize].to_string()).collect();
        if let Some(last) = symbols.last_mut() {
            last.push_str(END_OF_WORD);
        }
        let mut acc = symbols[0].clone();
        for next in &symbols[1..] {
            let merged = format!("{acc}{next}");
            if known.insert(merged.clone()) {
                merges.push((acc.clone(), next.clone()));
                tokens.push(merged.clone());
            }
            acc = merged;
        }
    }
    tokens.push(SOT_TOKEN.into());
    tokens.push(EOT_TOKEN.into());
    let map: HashMap<String, u32> = tokens.into_iter().enumerate().map(|(i, t)| (t, i as u32)).collect();
    Vocabulary::new(map, merges).expect("toy vocabulary is consistent")
}

/// Words the toy merges cover: the default prompt texts plus a few extras.
pub fn toy_words() -> Vec<String> {
    let bank = PromptBank::default();
    let mut words: Vec<String> = Vec::new();
    let texts = bank
        .pairs()
        .iter()
        .flat_map(|p| [p.bonafide_text.as_str(), p.morph_text.as_str()])
        .chain(["morphing attack detection on face images", "the of and is in"]);
    for text in texts {
        for word in tokenizer::normalize(text).split(|c: char| !c.is_alphabetic()) {
            if word.len() > 1 && !words.iter().any(|w| w == word) {
                words.push(word.to_string());
            }
        }
    }
    words
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes a deterministic toy bundle to `out_dir` and loads it.
pub fn make_toy_bundle(seed: u64, embed_dim: usize, out_dir: &Path) -> Result<ModelBundle> {
    if embed_dim < 2 {
        return Err(Error::InvalidArgument(format!("embed_dim must be at least 2, got {embed_dim}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let words = toy_words();
    let vocab = toy_vocabulary(words.iter().map(String::as_str));
    let config = BundleConfig {
        embed_dim,
        image_size: TOY_IMAGE_SIZE,
        context_length: tokenizer::DEFAULT_CONTEXT_LENGTH,
        logit_scale: TOY_LOGIT_SCALE,
        channel_mean: CHANNEL_MEAN,
        channel_std: CHANNEL_STD,
        resize_mode: ResizeMode::ShorterSideThenCenterCrop,
        interpolation: Interpolation::Bicubic,
        opset: Some(OPSET),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = linear_image_graph(&mut rng, config.image_size, embed_dim);
    let text = text_graph(&mut rng, vocab.len(), config.context_length, embed_dim);

    let mut config_json = serde_json::to_vec_pretty(&config)?;
    config_json.push(b'\n');
    write(&out_dir.join(encoder::CONFIG_FILE), &config_json)?;
    write(&out_dir.join(encoder::IMAGE_GRAPH_FILE), &image)?;
    write(&out_dir.join(encoder::TEXT_GRAPH_FILE), &text)?;
    write(&out_dir.join(encoder::VOCAB_FILE), vocab.vocab_json().as_bytes())?;
    write(&out_dir.join(encoder::MERGES_FILE), vocab.merges_txt().as_bytes())?;
    encoder::load_bundle(out_dir)
}

/// Writes a linear feature-extractor graph usable as a baseline backbone.
pub fn make_toy_backbone(seed: u64, out_dim: usize, image_size: u32, path: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    write(path, &linear_image_graph(&mut rng, image_size, out_dim))
}

/// Synthetic face-like image. Morphs blend two identities with a ghosted offset.
pub fn synthetic_face(identity: u64, width: u32, height: u32) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(identity);
    let skin = [rng.gen_range(150..230u8), rng.gen_range(100..180u8), rng.gen_range(80..150u8)];
    let background = [rng.gen_range(0..80u8), rng.gen_range(60..140u8), rng.gen_range(120..250u8)];
    let eye_y = rng.gen_range(0.35..0.45f32);
    let eye_dx = rng.gen_range(0.12..0.2f32);
    RawImage::from_fn(width, height, |x, y| {
        let u = (x as f32 + 0.5) / width as f32;
        let v = (y as f32 + 0.5) / height as f32;
        let face = ((u - 0.5) / 0.32).powi(2) + ((v - 0.5) / 0.42).powi(2) <= 1.0;
        let eye = [0.5 - eye_dx, 0.5 + eye_dx]
            .iter()
            .any(|ex| ((u - ex) / 0.06).powi(2) + ((v - eye_y) / 0.035).powi(2) <= 1.0);
        if eye {
            [30, 20, 20]
        } else if face {
            let shade = (v * 30.0) as u8;
            [skin[0].saturating_sub(shade), skin[1].saturating_sub(shade), skin[2].saturating_sub(shade)]
        } else {
            let shade = (u * 40.0) as u8;
            [background[0].saturating_add(shade), background[1], background[2]]
        }
    })
    .expect("nonempty synthetic image")
}

pub fn synthetic_morph(first: u64, second: u64, width: u32, height: u32) -> RawImage {
    let a = synthetic_face(first, width, height);
    let b = synthetic_face(second, width, height);
    RawImage::from_fn(width, height, |x, y| {
        let pa = a.pixel(x, y);
        let pb = b.pixel(x, y);
        let ghost = a.pixel((x + 1).min(width - 1), y);
        [0, 1, 2].map(|c| ((pa[c] as u32 * 2 + pb[c] as u32 * 2 + ghost[c] as u32) / 5) as u8)
    })
    .expect("nonempty synthetic image")
}

/// Twelve-sample dataset: four bona fide and eight morphs over every medium.
///
/// Writes PNGs and `manifest.csv` into `dir` and returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path) -> Result<PathBuf> {
    use Generator::*;
    use Medium::*;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let bona = [(1u64, Digital), (2, Digital), (3, Ps1), (4, Ps2)];
    let morphs = [
        (1u64, 2u64, LmaI, Digital),
        (3, 4, LmaII, Digital),
        (1, 3, Mipgan2, Digital),
        (2, 4, MorDiff, Ps1),
        (1, 4, Pipe, Ps1),
        (2, 3, LmaI, Ps2),
        (3, 1, MorDiff, Ps2),
        (4, 2, Pipe, Ps2),
    ];
    let mut samples = Vec::new();
    for (i, (identity, medium)) in bona.into_iter().enumerate() {
        let id = format!("bf{:02}", i + 1);
        let file = format!("{id}.png");
        synthetic_face(identity, 40 + 4 * i as u32, 48).save_png(&dir.join(&file))?;
        samples.push(FaceSample {
            id,
            path: file.into(),
            label: Label::BonaFide,
            generator: None,
            medium,
            subject_id: Some(format!("subject{identity}")),
        });
    }
    for (i, (a, b, generator, medium)) in morphs.into_iter().enumerate() {
        let id = format!("mo{:02}", i + 1);
        let file = format!("{id}.png");
        synthetic_morph(a, b, 40 + 2 * i as u32, 48).save_png(&dir.join(&file))?;
        samples.push(FaceSample {
            id,
            path: file.into(),
            label: Label::Morph,
            generator: Some(generator),
            medium,
            subject_id: Some(format!("subject{a}+subject{b}")),
        });
    }
    let manifest = Manifest::new(samples, "manifest.csv")?;
    let path = dir.join("manifest.csv");
    write_manifest(&manifest, &path, ManifestFormat::Csv)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::DualEncoder;
    use crate::imaging::ImageTensor;

    #[test]
    fn toy_vocab_merges_words() {
        let v = toy_vocabulary(["photo", "face"]);
        let t = tokenizer::tokenize("photo face", &v);
        assert_eq!(t.content(), &[v.id("photo</w>").unwrap(), v.id("face</w>").unwrap()]);
        assert_eq!(v.len(), 512 + 7 + 2);
    }

    #[test]
    fn linear_map_by_hand_at_dim_two() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = make_toy_bundle(3, 2, dir.path()).unwrap();
        let size = TOY_IMAGE_SIZE as usize;
        let pixels: Vec<f32> = (0..3 * size * size).map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5).collect();
        let tensor = ImageTensor::from_chw(size, pixels.clone()).unwrap();

        let bytes = std::fs::read(dir.path().join(encoder::IMAGE_GRAPH_FILE)).unwrap();
        let (dims, w) = &onnx::initializers(&bytes)["projection"];
        assert_eq!(dims, &[3 * (size as i64).pow(2), 2]);
        let raw: Vec<f64> = (0..2)
            .map(|j| pixels.iter().enumerate().map(|(i, &x)| x as f64 * w[i * 2 + j] as f64).sum())
            .collect();

        let text_bytes = std::fs::read(dir.path().join(encoder::TEXT_GRAPH_FILE)).unwrap();
        let init = onnx::initializers(&text_bytes);
        let (_, table) = &init["token_embedding"];
        let (_, pos) = &init["position_embedding"];
        let (_, proj) = &init["text_projection"];
        let tokens = bundle.tokenize("a photo of a real face");
        let mut pooled = [0.0f64; 2];
        for (p, &id) in tokens.ids().iter().enumerate() {
            for k in 0..2 {
                pooled[k] += (table[id as usize * 2 + k] + pos[p * 2 + k]) as f64;
            }
        }
        pooled.iter_mut().for_each(|v| *v /= tokens.ids().len() as f64);
        let text_raw: Vec<f64> = (0..2)
            .map(|j| (0..2).map(|k| pooled[k] * proj[k * 2 + j] as f64).sum())
            .collect();

        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected: f64 =
            raw.iter().zip(&text_raw).map(|(a, b)| a * b).sum::<f64>() / (norm(&raw) * norm(&text_raw));

        let image = bundle.encode_image(&tensor).unwrap();
        let text = bundle.encode_text(&tokens).unwrap();
        assert!((image.dot(&text) - expected).abs() < 1e-5, "{} vs {expected}", image.dot(&text));
    }

    #[test]
    fn synthetic_dataset_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_synthetic_dataset(a.path()).unwrap();
        let mb = write_synthetic_dataset(b.path()).unwrap();
        assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
        assert_eq!(
            std::fs::read(a.path().join("mo03.png")).unwrap(),
            std::fs::read(b.path().join("mo03.png")).unwrap()
        );
        let m = crate::manifest::load_manifest(&ma, ManifestFormat::Csv).unwrap();
        assert_eq!((m.bonafide_count(), m.morph_count()), (4, 8));
    }
}
