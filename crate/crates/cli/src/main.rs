//! `alfred`: synthesize data, train, evaluate, check gradients, run
//! ablations and export explanations.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alfred_core::ablation::run_ablation;
use alfred_core::checkpoint::{load_model, save_model};
use alfred_core::data::{generate_synthetic, Dataset, Split};
use alfred_core::gradcheck::check_model;
use alfred_core::interpret::{explain, explain_all};
use alfred_core::train::{evaluate, fit, history_jsonl};
use alfred_core::{Error, LossKind, ModelParams, Result, ScoreMode, VariantKind};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{ReportFormat, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "alfred", version, about = "Emotion-aware multimodal meme classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with planted class signal.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and history.
    Train(TrainArgs),
    /// Score a checkpoint (or a fresh initialization) on one split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
    /// Train several variants over several seeds and compare them.
    Ablate(AblateArgs),
    /// Export attention and saliency for individual samples.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    report: Option<ReportFormat>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    score_mode: Option<ScoreMode>,
    #[arg(long)]
    variant: Option<VariantKind>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for `manifest.json` and the bundle files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    signal_emotion: Option<f64>,
    #[arg(long)]
    signal_text: Option<f64>,
    #[arg(long)]
    signal_image: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    m_min: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: PathBuf,
    /// Without a checkpoint the seeded, untrained initialization is scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    variant: Option<VariantKind>,
    /// Check only this loss; both by default.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Check only this score mode; both by default.
    #[arg(long)]
    score_mode: Option<ScoreMode>,
    /// Directory for `gradcheck.json` and the effective config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Comma-separated variants; all of them by default.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<VariantKind>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Explain a single sample; otherwise every sample of `--split`.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
        Command::Explain(a) => explain_cmd(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

/// Loads `--config` and applies the shared overrides.
fn base_config(common: &Common) -> Result<(RunConfig, Value)> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let raw = match &common.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => Value::Null,
    };
    let mut cfg = cfg;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
        cfg.gradcheck.seed = seed;
    }
    if let Some(r) = common.report {
        cfg.report = r;
    }
    Ok((cfg, raw))
}

/// Applies model flags, taking `d` and the class count from the dataset
/// unless a flag or the config file sets them explicitly.
fn apply_model_flags(cfg: &mut RunConfig, raw: &Value, flags: &ModelFlags, data: Option<&Dataset>) {
    let t = &mut cfg.train;
    let set_in_file = |key: &str| raw.pointer(&format!("/train/{key}")).is_some();
    if let Some(data) = data {
        if !set_in_file("d") {
            t.d = data.d();
        }
        if !set_in_file("num_classes") {
            t.num_classes = data.num_classes();
        }
    }
    if let Some(v) = flags.dim {
        t.d = v;
    }
    if let Some(v) = flags.classes {
        t.num_classes = v;
    }
    if let Some(v) = flags.epochs {
        t.epochs = v;
    }
    if let Some(v) = flags.lr {
        t.lr = v;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.loss {
        t.loss = v;
    }
    if let Some(v) = flags.score_mode {
        t.score_mode = v;
    }
    if let Some(v) = flags.variant {
        t.variant = v;
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let (mut cfg, _) = base_config(&a.common)?;
    let s = &mut cfg.synth;
    let overrides = [
        (a.dim, &mut s.d),
        (a.classes, &mut s.num_classes),
        (a.samples_per_class, &mut s.samples_per_class),
        (a.m_min, &mut s.m_min),
        (a.m_max, &mut s.m_max),
        (a.n_min, &mut s.n_min),
        (a.n_max, &mut s.n_max),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    for (flag, field) in [
        (a.signal_emotion, &mut s.signal_emotion),
        (a.signal_text, &mut s.signal_text),
        (a.signal_image, &mut s.signal_image),
        (a.noise, &mut s.noise),
    ] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    cfg.synth.validate()?;
    let data = generate_synthetic(&cfg.synth)?;
    create_dir(&a.out)?;
    let manifest = data.write(&a.out)?;
    cfg.write_into(&a.out)?;
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let (mut cfg, raw) = base_config(&a.common)?;
    let data = Dataset::load(&a.data)?;
    apply_model_flags(&mut cfg, &raw, &a.model, Some(&data));
    cfg.train.validate()?;
    create_dir(&a.out)?;
    cfg.write_into(&a.out)?;

    let result = fit(&data, &cfg.train)?;
    save_model(&result.best, &a.out.join("model.ckpt"))?;
    save_model(&result.last, &a.out.join("last.ckpt"))?;
    write_text(&a.out.join("history.jsonl"), &history_jsonl(&result.history)?)?;
    if let Some(ols) = &result.ols {
        write_text(&a.out.join("ols.json"), &pretty(ols)?)?;
    }
    let best = result.history.get(result.best_epoch.wrapping_sub(1));
    let summary = serde_json::json!({
        "best_epoch": result.best_epoch,
        "best_val_macro_f1": best.map(|r| r.val_macro_f1),
        "best_val_accuracy": best.map(|r| r.val_accuracy),
        "epochs": result.history.len(),
    });
    write_text(&a.out.join("summary.json"), &pretty(&summary)?)?;
    match cfg.report {
        ReportFormat::Json => print!("{}", pretty(&summary)?),
        ReportFormat::Text => println!(
            "trained {} epochs; best epoch {} (val macro F1 {:.4})",
            result.history.len(),
            result.best_epoch,
            best.map_or(0.0, |r| r.val_macro_f1)
        ),
    }
    Ok(ExitCode::SUCCESS)
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>, data: &Dataset) -> Result<ModelParams> {
    let params = match checkpoint {
        Some(p) => load_model(p)?,
        None => {
            cfg.train.validate()?;
            ModelParams::init(cfg.train.model_spec(), cfg.train.seed)?
        }
    };
    let spec = params.spec();
    if spec.d != data.d() || spec.num_classes != data.num_classes() {
        return Err(Error::Config(format!(
            "model has d={} and {} classes but the dataset has d={} and {} classes",
            spec.d,
            spec.num_classes,
            data.d(),
            data.num_classes()
        )));
    }
    Ok(params)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (mut cfg, raw) = base_config(&a.common)?;
    let data = Dataset::load(&a.data)?;
    apply_model_flags(&mut cfg, &raw, &a.model, Some(&data));
    let params = model_for(&cfg, a.checkpoint.as_deref(), &data)?;
    let bundles = data.split(a.split);
    let report = evaluate(&params, &bundles)?
        .confusion
        .report(&data.manifest.class_names())?;
    let text = match cfg.report {
        ReportFormat::Json => pretty(&report)?,
        ReportFormat::Text => report.to_table(),
    };
    if let Some(out) = &a.out {
        write_text(out, &text)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            cfg.write_into(dir)?;
        }
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let (mut cfg, _) = base_config(&a.common)?;
    let g = &mut cfg.gradcheck;
    for (flag, field) in [(a.dim, &mut g.d), (a.m, &mut g.m), (a.n, &mut g.n), (a.classes, &mut g.num_classes)] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(v) = a.tol {
        g.tol = v;
    }
    if let Some(v) = a.eps {
        g.eps = v;
    }
    if let Some(v) = a.variant {
        g.variant = v;
    }
    let losses = a.loss.map_or_else(|| vec![LossKind::Ce, LossKind::Ols], |l| vec![l]);
    let modes = a
        .score_mode
        .map_or_else(|| vec![ScoreMode::Bimodal, ScoreMode::Literal], |m| vec![m]);
    let runs = check_model(&cfg.gradcheck, &losses, &modes)?;
    let worst = runs.iter().map(|r| r.report.worst()).fold(0.0, f64::max);
    let passed = runs.iter().all(|r| r.report.passed());
    let tol = cfg.gradcheck.tol;

    if let Some(out) = &a.out {
        create_dir(out)?;
        cfg.write_into(out)?;
        write_text(&out.join("gradcheck.json"), &pretty(&runs)?)?;
    }
    match cfg.report {
        ReportFormat::Json => print!(
            "{}",
            pretty(&serde_json::json!({ "passed": passed, "worst_rel_err": worst, "tol": tol, "runs": runs }))?
        ),
        ReportFormat::Text => {
            for r in &runs {
                println!(
                    "{} {}: worst rel err {:.3e} over {} tensors",
                    r.loss,
                    r.score_mode,
                    r.report.worst(),
                    r.report.entries.len()
                );
                for e in r.report.flagged() {
                    println!("  flagged {}: {:.3e} at index {}", e.name, e.max_rel_err, e.worst_index);
                }
            }
            if passed {
                println!("PASS, worst rel err {worst:.3e} < {tol:e}");
            } else {
                println!("FAIL, worst rel err {worst:.3e} >= {tol:e}");
            }
        }
    }
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error[gradcheck]: worst relative error {worst:.3e} exceeds tolerance {tol:e}");
        Ok(ExitCode::FAILURE)
    }
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let (mut cfg, raw) = base_config(&a.common)?;
    let data = Dataset::load(&a.data)?;
    apply_model_flags(&mut cfg, &raw, &a.model, Some(&data));
    cfg.train.validate()?;
    let variants = if a.variants.is_empty() {
        VariantKind::ALL.to_vec()
    } else {
        a.variants.clone()
    };
    create_dir(&a.out)?;
    cfg.write_into(&a.out)?;
    let report = run_ablation(&data, &cfg.train, &variants, &a.seeds)?;
    write_text(&a.out.join("ablation.json"), &pretty(&report.runs)?)?;
    write_text(&a.out.join("summary.json"), &pretty(&report.summary)?)?;
    let table = report.to_table();
    write_text(&a.out.join("ablation.txt"), &table)?;
    match cfg.report {
        ReportFormat::Json => print!("{}", pretty(&report)?),
        ReportFormat::Text => print!("{table}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn explain_cmd(a: ExplainArgs) -> Result<ExitCode> {
    let (mut cfg, raw) = base_config(&a.common)?;
    let data = Dataset::load(&a.data)?;
    apply_model_flags(&mut cfg, &raw, &a.model, Some(&data));
    let params = model_for(&cfg, a.checkpoint.as_deref(), &data)?;
    let text = match &a.id {
        Some(id) => {
            let bundle = data
                .find(id)
                .ok_or_else(|| Error::Config(format!("no sample with id {id:?}")))?;
            pretty(&explain(&params, bundle)?)?
        }
        None => pretty(&explain_all(&params, &data.split(a.split))?)?,
    };
    match &a.out {
        Some(out) => {
            write_text(out, &text)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                cfg.write_into(dir)?;
            }
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
