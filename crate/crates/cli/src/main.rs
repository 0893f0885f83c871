use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zsmad_core::baselines::{fit_prototype, Backbone, PrototypeScorer, IMAGENET_MEAN, IMAGENET_STD};
use zsmad_core::classifier::PairEmbeddings;
use zsmad_core::encoder::DualEncoder;
use zsmad_core::experiments::{compare_from_scores, experiment1_from_records, DEFAULT_TARGET_MACER};
use zsmad_core::explain::{self, ExplainParams};
use zsmad_core::imaging::{self, PreprocessSpec};
use zsmad_core::report::{self, RunReport};
use zsmad_core::{load_bundle, load_manifest, toy, Error, ErrorKind, ManifestFormat, PromptBank, Result};

#[derive(Parser)]
#[command(name = "zsmad", version, about = "Zero-shot single-image morphing attack detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score one image against every prompt pair.
    Classify(ClassifyArgs),
    /// Run the per-cell experiments on a labelled manifest and write reports.
    Evaluate(EvaluateArgs),
    /// LIME saliency for one image and one prompt pair.
    Explain(ExplainArgs),
    /// Write a small random bundle (and optionally a synthetic dataset).
    MakeToy(MakeToyArgs),
    /// Re-emit figure tables from a stored result document.
    ExportReport(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct ModelArgs {
    /// Exchange bundle directory.
    #[arg(long, env = "ZSMAD_BUNDLE")]
    bundle: PathBuf,
    /// Prompt bank JSON; the built-in bank when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TARGET_MACER)]
    target_macer: f64,
    /// Worker threads; 0 uses every logical core.
    #[arg(long, default_value_t = 0)]
    parallelism: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fitted baseline scorer state (repeatable).
    #[arg(long = "baseline")]
    baselines: Vec<PathBuf>,
    /// Fit a baseline from NAME=BACKBONE.onnx (repeatable, needs --reference).
    #[arg(long = "fit-baseline", value_name = "NAME=PATH")]
    fit_baselines: Vec<String>,
    /// Bona fide reference manifest for --fit-baseline.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Input size of fitted backbones.
    #[arg(long, default_value_t = 224)]
    backbone_size: u32,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    image: PathBuf,
    /// Prompt pair id from the bank.
    #[arg(long)]
    pair: String,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = explain::DEFAULT_SEGMENTS)]
    segments: usize,
    #[arg(long, default_value_t = explain::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Kernel width; 0.25 * sqrt(segments) when omitted.
    #[arg(long)]
    kernel_width: Option<f64>,
    #[arg(long, default_value_t = explain::DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long, default_value_t = 0)]
    parallelism: usize,
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Also write a random backbone graph for the baselines here.
    #[arg(long)]
    backbone_out: Option<PathBuf>,
    /// Also write the 12-image synthetic dataset and its manifest here.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// result.json written by evaluate.
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Inference => 3,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Classify(a) => classify(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Explain(a) => explain_cmd(a),
        Command::MakeToy(a) => make_toy(a),
        Command::ExportReport(a) => export_report(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            format!("{}", path.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

fn load_bank(path: Option<&Path>) -> Result<PromptBank> {
    match path {
        Some(p) => PromptBank::load(p),
        None => Ok(PromptBank::default()),
    }
}

fn emit(text: &str) {
    print!("{text}");
}

fn classify(a: ClassifyArgs) -> Result<()> {
    require_file(&a.image)?;
    let bank = load_bank(a.model.bank.as_deref())?;
    let bundle = load_bundle(&a.model.bundle)?;
    let raw = imaging::decode(&a.image)?;
    let embedding = bundle.encode_image(&imaging::preprocess(&raw, bundle.preprocess_spec()))?;
    let id = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let records = bank
        .pairs()
        .iter()
        .map(|p| Ok(PairEmbeddings::encode(p, &bundle)?.score(&id, &embedding, bundle.logit_scale())))
        .collect::<Result<Vec<_>>>()?;
    match a.format {
        Format::Csv => emit(&report::scores_csv(&records)?),
        Format::Json => emit(&(serde_json::to_string_pretty(&records)? + "\n")),
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if !(a.target_macer > 0.0 && a.target_macer < 1.0) {
        return Err(Error::InvalidArgument(format!("--target-macer {} outside (0, 1)", a.target_macer)));
    }
    if !a.fit_baselines.is_empty() && a.reference.is_none() {
        return Err(Error::InvalidArgument("--fit-baseline needs --reference".into()));
    }
    require_file(&a.manifest)?;
    let format = ManifestFormat::from_path(&a.manifest)
        .ok_or_else(|| Error::InvalidArgument("manifest must end in .csv or .json".into()))?;
    let manifest = load_manifest(&a.manifest, format)?;
    if manifest.is_empty() {
        return Err(Error::Degenerate("manifest has no samples".into()));
    }
    manifest.require_both_classes()?;
    let bank = load_bank(a.model.bank.as_deref())?;
    let bundle = load_bundle(&a.model.bundle)?;

    let mut scorers = a
        .baselines
        .iter()
        .map(|p| PrototypeScorer::load(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(reference) = &a.reference {
        let reference = load_manifest(
            reference,
            ManifestFormat::from_path(reference)
                .ok_or_else(|| Error::InvalidArgument("reference must end in .csv or .json".into()))?,
        )?;
        let spec = PreprocessSpec::new(a.backbone_size, IMAGENET_MEAN, IMAGENET_STD)?;
        let dir = a.out.join("baselines");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for entry in &a.fit_baselines {
            let (name, path) = entry
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--fit-baseline {entry:?} is not NAME=PATH")))?;
            let scorer = fit_prototype(name, Backbone::load(Path::new(path), spec.clone())?, &reference)?;
            scorer.save(&dir.join(format!("{name}.json")))?;
            scorers.push(scorer);
        }
    }

    let states: Vec<_> = scorers.iter().map(|s| s.state().clone()).collect();
    let digest = report::run_digest(&a.manifest, &bank, &a.model.bundle, a.target_macer, a.seed, &states)?;
    eprintln!("config digest: {digest}");

    let run = zsmad_core::run_bank(&manifest, &bank, &bundle, a.parallelism)?;
    let result = experiment1_from_records(&manifest, &bank, &run, a.target_macer, a.parallelism)?;
    let baseline_runs = scorers
        .iter()
        .map(|s| Ok((s.name().to_string(), s.score_manifest(&manifest, a.parallelism)?)))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_from_scores(&manifest, &run, &baseline_runs, a.target_macer)?;
    let report = RunReport::new(digest, result, table);
    report::write_report(&a.out, &report, Some(&run.records))?;
    print_summary(&report, a.format)
}

fn print_summary(report: &RunReport, format: Format) -> Result<()> {
    match format {
        Format::Csv => emit(&report::table_csv(&report.table)?),
        Format::Json => {
            let summary = serde_json::json!({
                "config_digest": report.config_digest,
                "best_prompt": report.aggregates.prompts.best_prompt,
                "table": report.table,
            });
            emit(&(serde_json::to_string_pretty(&summary)? + "\n"));
        }
    }
    Ok(())
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    require_file(&a.image)?;
    let bank = load_bank(a.model.bank.as_deref())?;
    let pair = bank
        .get(&a.pair)
        .ok_or_else(|| Error::InvalidArgument(format!("no prompt pair {:?} in the bank", a.pair)))?
        .clone();
    let bundle = load_bundle(&a.model.bundle)?;
    let raw = imaging::decode(&a.image)?;
    let mask = explain::segment(&raw, a.segments)?;
    let params = ExplainParams {
        n_samples: a.samples,
        seed: a.seed,
        kernel_width: a.kernel_width,
        ridge: a.ridge,
        parallelism: a.parallelism,
    };
    let saliency = explain::explain(&raw, &pair, &bundle, &mask, &params)?;
    explain::write_saliency(&a.out, &raw, &mask, &saliency)?;
    emit(&(serde_json::to_string_pretty(&saliency)? + "\n"));
    Ok(())
}

fn make_toy(a: MakeToyArgs) -> Result<()> {
    toy::make_toy_bundle(a.seed, a.dim, &a.out)?;
    println!("bundle: {}", a.out.display());
    if let Some(path) = &a.backbone_out {
        toy::make_toy_backbone(a.seed, a.dim, toy::TOY_IMAGE_SIZE, path)?;
        println!("backbone: {}", path.display());
    }
    if let Some(dir) = &a.dataset {
        let manifest = toy::write_synthetic_dataset(dir)?;
        println!("manifest: {}", manifest.display());
    }
    Ok(())
}

fn export_report(a: ExportArgs) -> Result<()> {
    require_file(&a.result)?;
    let report = RunReport::load(&a.result)?;
    report::write_csv_exports(&a.out, &report)?;
    print_summary(&report, a.format)
}
