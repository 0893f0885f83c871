//! Dataset manifests: the only way samples enter the engine.
//!
//! A manifest lists face images with their ground truth, the morphing
//! generator that produced them (if any) and the capture medium. The engine
//! never walks directories; relative image paths are resolved against the
//! directory holding the manifest file.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    BonaFide,
    Morph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Generator {
    LmaI,
    LmaII,
    Mipgan2,
    MorDiff,
    Pipe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Medium {
    Digital,
    Ps1,
    Ps2,
}

impl Generator {
    pub const ALL: [Generator; 5] = [
        Generator::LmaI,
        Generator::LmaII,
        Generator::Mipgan2,
        Generator::MorDiff,
        Generator::Pipe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Generator::LmaI => "lma-i",
            Generator::LmaII => "lma-ii",
            Generator::Mipgan2 => "mipgan-2",
            Generator::MorDiff => "mordiff",
            Generator::Pipe => "pipe",
        }
    }
}

impl Medium {
    pub const ALL: [Medium; 3] = [Medium::Digital, Medium::Ps1, Medium::Ps2];

    pub fn as_str(self) -> &'static str {
        match self {
            Medium::Digital => "digital",
            Medium::Ps1 => "ps-1",
            Medium::Ps2 => "ps-2",
        }
    }
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "bonafide",
            Label::Morph => "morph",
        }
    }
}

macro_rules! string_enum {
    ($ty:ty, $what:literal, [$($alias:literal => $val:expr),+ $(,)?]) => {
        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($alias => Ok($val),)+
                    other => Err(format!("unknown {} {:?}", $what, other)),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_enum!(Label, "label", [
    "bonafide" => Label::BonaFide,
    "bona-fide" => Label::BonaFide,
    "bona_fide" => Label::BonaFide,
    "morph" => Label::Morph,
]);

string_enum!(Generator, "generator", [
    "lma-i" => Generator::LmaI,
    "lma-ii" => Generator::LmaII,
    "mipgan-2" => Generator::Mipgan2,
    "mipgan-ii" => Generator::Mipgan2,
    "mordiff" => Generator::MorDiff,
    "pipe" => Generator::Pipe,
]);

string_enum!(Medium, "medium", [
    "digital" => Medium::Digital,
    "ps-1" => Medium::Ps1,
    "ps-2" => Medium::Ps2,
]);

/// Spelling used for "no generator" in manifest files.
pub const NO_GENERATOR: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceSample {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub generator: Option<Generator>,
    pub medium: Medium,
    pub subject_id: Option<String>,
}

impl FaceSample {
    fn validate(&self) -> std::result::Result<(), String> {
        match (self.label, self.generator) {
            (Label::BonaFide, Some(g)) => Err(format!(
                "sample {:?} is bona fide but carries generator {g}",
                self.id
            )),
            (Label::Morph, None) => Err(format!("morph sample {:?} has no generator", self.id)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub samples: Vec<FaceSample>,
    pub source_tag: String,
    /// Directory relative sample paths are resolved against.
    pub base_dir: Option<PathBuf>,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples && self.source_tag == other.source_tag
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestFormat {
    Csv,
    Json,
}

impl ManifestFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(ManifestFormat::Csv),
            "json" => Some(ManifestFormat::Json),
            _ => None,
        }
    }
}

pub const CSV_HEADER: [&str; 6] = ["id", "path", "label", "generator", "medium", "subject_id"];
const REQUIRED: [&str; 5] = ["id", "path", "label", "generator", "medium"];

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    id: String,
    path: String,
    label: String,
    #[serde(default)]
    generator: Option<String>,
    medium: String,
    #[serde(default)]
    subject_id: Option<String>,
}

impl Manifest {
    pub fn new(samples: Vec<FaceSample>, source_tag: impl Into<String>) -> Result<Self> {
        let manifest = Manifest {
            samples,
            source_tag: source_tag.into(),
            base_dir: None,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn bonafide_count(&self) -> usize {
        self.samples.iter().filter(|s| s.label == Label::BonaFide).count()
    }

    pub fn morph_count(&self) -> usize {
        self.samples.iter().filter(|s| s.label == Label::Morph).count()
    }

    /// Checks every sample invariant and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for sample in &self.samples {
            sample.validate().map_err(Error::Constraint)?;
            if !seen.insert(sample.id.as_str()) {
                return Err(Error::Constraint(format!("duplicate sample id {:?}", sample.id)));
            }
        }
        Ok(())
    }

    /// Metric computation needs both classes present.
    pub fn require_both_classes(&self) -> Result<()> {
        if self.bonafide_count() == 0 || self.morph_count() == 0 {
            return Err(Error::Degenerate(format!(
                "manifest {:?} needs at least one bona fide and one morph sample ({} / {})",
                self.source_tag,
                self.bonafide_count(),
                self.morph_count()
            )));
        }
        Ok(())
    }

    pub fn resolve_path(&self, sample: &FaceSample) -> PathBuf {
        match &self.base_dir {
            Some(base) if sample.path.is_relative() => base.join(&sample.path),
            _ => sample.path.clone(),
        }
    }

    /// Sub-manifest for one generator / medium cell.
    ///
    /// Bona fide samples are kept whenever their medium matches, whatever the
    /// generator filter: every generator at a given medium is evaluated
    /// against the same bona fide pool.
    pub fn slice(&self, generator: Option<Generator>, medium: Option<Medium>) -> Manifest {
        let samples = self
            .samples
            .iter()
            .filter(|s| medium.map_or(true, |m| s.medium == m))
            .filter(|s| match (s.label, generator) {
                (Label::BonaFide, _) | (_, None) => true,
                (Label::Morph, Some(g)) => s.generator == Some(g),
            })
            .cloned()
            .collect();
        Manifest {
            samples,
            source_tag: self.source_tag.clone(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }
}

fn parse_row(row: SampleRow) -> std::result::Result<FaceSample, String> {
    if row.id.trim().is_empty() {
        return Err("empty id".into());
    }
    if row.path.trim().is_empty() {
        return Err("empty path".into());
    }
    if row.path.contains(',') {
        return Err(format!("path {:?} contains a comma", row.path));
    }
    let generator = match row.generator.as_deref().map(str::trim) {
        None | Some(NO_GENERATOR) => None,
        Some(g) => Some(g.parse::<Generator>()?),
    };
    let subject_id = row
        .subject_id
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    Ok(FaceSample {
        id: row.id.trim().to_string(),
        path: PathBuf::from(row.path.trim()),
        label: row.label.parse()?,
        generator,
        medium: row.medium.parse()?,
        subject_id,
    })
}

fn to_row(sample: &FaceSample) -> Result<SampleRow> {
    let path = sample
        .path
        .to_str()
        .ok_or_else(|| Error::Constraint(format!("path of {:?} is not UTF-8", sample.id)))?;
    if path.contains(',') {
        return Err(Error::Constraint(format!("path {path:?} contains a comma")));
    }
    Ok(SampleRow {
        id: sample.id.clone(),
        path: path.to_string(),
        label: sample.label.to_string(),
        generator: Some(sample.generator.map_or(NO_GENERATOR, Generator::as_str).to_string()),
        medium: sample.medium.to_string(),
        subject_id: sample.subject_id.clone(),
    })
}

/// Reads a manifest, validating every row.
pub fn load_manifest(path: &Path, format: ManifestFormat) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut manifest = match format {
        ManifestFormat::Csv => parse_csv(path, &bytes)?,
        ManifestFormat::Json => parse_json(path, &bytes)?,
    };
    manifest.source_tag = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    manifest.validate()?;
    Ok(manifest)
}

fn parse_csv(path: &Path, bytes: &[u8]) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    for column in REQUIRED {
        if !headers.iter().any(|h| h == column) {
            return Err(Error::Schema(format!(
                "{}: missing column {column:?}",
                path.display()
            )));
        }
    }
    let mut samples = Vec::new();
    for (index, record) in reader.deserialize::<SampleRow>().enumerate() {
        // header is line 1
        let row = index + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row,
            message: e.to_string(),
        })?;
        let sample = parse_row(record).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        })?;
        sample.validate().map_err(|m| Error::Constraint(format!("row {row}: {m}")))?;
        samples.push(sample);
    }
    Ok(Manifest {
        samples,
        ..Manifest::default()
    })
}

fn parse_json(path: &Path, bytes: &[u8]) -> Result<Manifest> {
    let values: Vec<serde_json::Value> = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row: e.line(),
        message: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(values.len());
    for (index, value) in values.into_iter().enumerate() {
        let row = index + 1;
        if let Some(obj) = value.as_object() {
            for key in REQUIRED {
                if key != "generator" && !obj.contains_key(key) {
                    return Err(Error::Schema(format!(
                        "{}: object {row} has no key {key:?}",
                        path.display()
                    )));
                }
            }
        }
        let record: SampleRow = serde_json::from_value(value).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row,
            message: e.to_string(),
        })?;
        let sample = parse_row(record).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        })?;
        sample.validate().map_err(|m| Error::Constraint(format!("object {row}: {m}")))?;
        samples.push(sample);
    }
    Ok(Manifest {
        samples,
        ..Manifest::default()
    })
}

/// Writes a manifest in canonical spelling.
pub fn write_manifest(manifest: &Manifest, path: &Path, format: ManifestFormat) -> Result<()> {
    let rows = manifest.samples.iter().map(to_row).collect::<Result<Vec<_>>>()?;
    let bytes = match format {
        ManifestFormat::Csv => {
            let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            writer
                .write_record(CSV_HEADER)
                .and_then(|_| {
                    rows.iter().try_for_each(|r| {
                        writer.write_record([
                            r.id.as_str(),
                            r.path.as_str(),
                            r.label.as_str(),
                            r.generator.as_deref().unwrap_or(NO_GENERATOR),
                            r.medium.as_str(),
                            r.subject_id.as_deref().unwrap_or(""),
                        ])
                    })
                })
                .map_err(|e| Error::Schema(e.to_string()))?;
            writer
                .into_inner()
                .map_err(|e| Error::io("flushing manifest", e.into_error()))?
        }
        ManifestFormat::Json => {
            let mut out = serde_json::to_vec_pretty(&rows)?;
            out.push(b'\n');
            out
        }
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
