use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use bmgf::ablate::{self, Variant};
use bmgf::checkpoint::Checkpoint;
use bmgf::config::ModelConfig;
use bmgf::data::{Dataset, DiscourseInstance, LabelSchema, Split};
use bmgf::gradcheck;
use bmgf::metrics::EvalReport;
use bmgf::model::{argmax, Model};
use bmgf::tensor::OpKind;
use bmgf::train::{self, evaluate};

#[derive(Parser)]
#[command(name = "bmgf", version, about = "Sentence-pair relation classifier: train, evaluate, predict, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the train split, selecting on the validation split.
    Train(TrainArgs),
    /// Score a checkpoint on labelled data.
    Eval(EvalArgs),
    /// Predict labels and class distributions.
    Predict(PredictArgs),
    /// Finite-difference check of every module's gradients.
    Gradcheck(GradcheckArgs),
    /// Train every module on/off combination plus the siamese encoder.
    Ablate(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with ModelConfig fields; unspecified fields keep defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file, or directory of *.tsv files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    schema: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Only score this split (train, validation/dev, test, blind).
    #[arg(long)]
    split: Option<String>,
    /// Fails unless the checkpoint was trained under this schema.
    #[arg(long)]
    schema: Option<String>,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of the text one.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, requires = "arg2", conflicts_with = "data")]
    arg1: Option<String>,
    #[arg(long, requires = "arg1")]
    arg2: Option<String>,
    /// Dataset file or directory; its labels are ignored.
    #[arg(long, required_unless_present = "arg1")]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    schema: Option<String>,
    /// Write predictions.jsonl here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Switches are kept; sizes must be small.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test fixture: scale the backward rule of this primitive.
    #[arg(long, hide = true)]
    corrupt_backward: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BMGF_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(args: &TrainArgs) -> Result<ModelConfig> {
    let mut config = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(schema) = &args.schema {
        config.schema = schema.clone();
    }
    config.validate()?;
    Ok(config)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_split(name: &str) -> Result<Split> {
    Split::parse(name).with_context(|| format!("unknown split {name:?}"))
}

struct Splits {
    train: Vec<DiscourseInstance>,
    validation: Vec<DiscourseInstance>,
    test: Vec<DiscourseInstance>,
}

fn load_splits(path: &Path, schema: &LabelSchema) -> Result<Splits> {
    let ds = Dataset::load_path(path, schema)?;
    log::info!("loaded {} instances from {} ({})", ds.len(), path.display(), ds.describe_counts());
    let part = |s| ds.split(s).into_iter().cloned().collect::<Vec<_>>();
    let splits = Splits { train: part(Split::Train), validation: part(Split::Validation), test: part(Split::Test) };
    if splits.train.is_empty() {
        bail!("{} has no train instances", path.display());
    }
    Ok(splits)
}

fn cmd_train(args: &TrainArgs) -> Result<bool> {
    let config = load_config(args)?;
    let schema = config.label_schema()?;
    let data = load_splits(&args.data, &schema)?;
    ensure_dir(&args.out)?;
    write(&args.out.join("config.toml"), &config.to_toml())?;

    let model = Model::from_instances(config, schema, &data.train)?;
    log::info!("{} parameters, vocabulary {}", model.num_parameters(), model.vocab.len());
    let outcome = train::train(model, &data.train, &data.validation)?;
    outcome.best.save(&args.out.join("checkpoint.json"))?;
    outcome.last.save(&args.out.join("last.json"))?;
    write(&args.out.join("history.json"), &serde_json::to_string_pretty(&outcome.history)?)?;
    println!("best epoch {} (selection metric {:.4})", outcome.best.epoch, outcome.best.best_metric.unwrap_or(f64::NAN));
    if !data.test.is_empty() {
        let report = evaluate(&outcome.model, &data.test)?;
        write(&args.out.join("test_report.json"), &report.to_json())?;
        print!("test\n{}", report.render_text());
    }
    Ok(true)
}

/// Loads a checkpoint and checks it against an explicitly requested schema.
fn load_model(path: &Path, schema: Option<&str>) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    if let Some(name) = schema {
        let wanted = LabelSchema::parse(name)?;
        if wanted != ck.schema {
            bail!("config error: checkpoint was trained for schema {}, not {}", ck.schema.name(), wanted.name());
        }
    }
    Ok(ck.to_model()?)
}

fn select(ds: Dataset, split: Option<&str>) -> Result<Vec<DiscourseInstance>> {
    Ok(match split {
        Some(name) => {
            let s = parse_split(name)?;
            ds.instances.into_iter().filter(|i| i.split == s).collect()
        }
        None => ds.instances,
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<bool> {
    let model = load_model(&args.checkpoint, args.schema.as_deref())?;
    let ds = Dataset::load_path(&args.data, &model.schema)?;
    let instances = select(ds, args.split.as_deref())?;
    if instances.is_empty() {
        bail!("no instances to evaluate in {}", args.data.display());
    }
    let report: EvalReport = evaluate(&model, &instances)?;
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        write(&dir.join("report.json"), &report.to_json())?;
        write(&dir.join("report.txt"), &report.render_text())?;
    }
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.render_text());
    }
    Ok(true)
}

fn prediction_line(model: &Model, arg1: &str, arg2: &str, probs: &[f64]) -> String {
    json!({
        "arg1": arg1,
        "arg2": arg2,
        "label": model.schema.labels[argmax(probs)],
        "labels": model.schema.labels,
        "probabilities": probs,
    })
    .to_string()
}

fn cmd_predict(args: &PredictArgs) -> Result<bool> {
    let model = load_model(&args.checkpoint, args.schema.as_deref())?;
    let lines: Vec<String> = match (&args.arg1, &args.arg2, &args.data) {
        (Some(a1), Some(a2), _) => {
            let p = model.predict_pair(a1, a2)?;
            vec![prediction_line(&model, a1, a2, &p)]
        }
        (_, _, Some(path)) => {
            let ds = Dataset::load_path(path, &model.schema)?;
            let instances = select(ds, args.split.as_deref())?;
            let probs = model.predict_instances(&instances)?;
            instances.iter().zip(&probs).map(|(i, p)| prediction_line(&model, &i.arg1, &i.arg2, p)).collect()
        }
        _ => bail!("give either --arg1 and --arg2, or --data"),
    };
    let mut text = lines.join("\n");
    text.push('\n');
    match &args.out {
        Some(dir) => {
            ensure_dir(dir)?;
            write(&dir.join("predictions.jsonl"), &text)?;
        }
        None => print!("{text}"),
    }
    Ok(true)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let config = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => gradcheck::small_config(),
    };
    let fault = match &args.corrupt_backward {
        Some(name) => Some(OpKind::parse(name).with_context(|| format!("unknown primitive {name:?}"))?),
        None => None,
    };
    let mut reports = Vec::new();
    for seed in args.seed..args.seed + args.seeds.max(1) {
        let r = gradcheck::run(&config, seed, fault)?;
        for m in &r.modules {
            println!(
                "seed {seed:<4} {:<12} {:.3e}  {}",
                m.module,
                m.max_relative_error,
                if m.passed { "ok" } else { "FAIL" }
            );
        }
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed());
    let seconds: f64 = reports.iter().map(|r| r.seconds).sum();
    let max_error = reports.iter().map(|r| r.max_error()).fold(0.0, f64::max);
    println!(
        "{}: max relative error {max_error:.3e} (tolerance {:.0e}) in {seconds:.2}s",
        if passed { "passed" } else { "FAILED" },
        gradcheck::TOLERANCE
    );
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        write(&dir.join("gradcheck.json"), &serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(passed)
}

fn cmd_ablate(args: &TrainArgs) -> Result<bool> {
    let config = load_config(args)?;
    let schema = config.label_schema()?;
    let data = load_splits(&args.data, &schema)?;
    ensure_dir(&args.out)?;
    let table = ablate::run(&config, &schema, &Variant::ALL, &data.train, &data.validation, &data.test)?;
    write(&args.out.join("ablation.json"), &table.to_json())?;
    write(&args.out.join("ablation.txt"), &table.render_text())?;
    print!("{}", table.render_text());
    Ok(true)
}
