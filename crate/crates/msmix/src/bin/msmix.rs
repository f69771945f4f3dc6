//! Thin command-line front end; all real work lives in the library.
//!
//! Exit codes: 0 success, 1 config error, 2 run failure, 3 gradient-check
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msmix::data::{self, DataFormat};
use msmix::harness::{
    self, compare, grad_check, prepare_dataset, train_returning_params, ExperimentConfig,
    HarnessError, TrainSettings,
};
use msmix::model::save_params;
use msmix::tensor::Rng;
use msmix::{LabelMode, MixStrategy, RowScope};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUN: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "msmix",
    version,
    about = "Hidden-state swap augmentation lab: train, compare, and verify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seeded model from a config file and report test accuracy
    Train(TrainArgs),
    /// Subsample a dataset to at most N examples per class
    Fewshot(FewshotArgs),
    /// Generate a synthetic intent-classification corpus
    Synth(SynthArgs),
    /// Run the variant × dataset × seed comparison and write a report
    Compare(CompareArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct MixOverrides {
    /// Augmentation strategy: none | base | a | b | linear
    #[arg(long)]
    strategy: Option<String>,
    /// Beta-distribution shape for the mixing coefficient
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated layers eligible for mixing, e.g. 1,2,3
    #[arg(long, value_delimiter = ',')]
    layer_set: Option<Vec<usize>>,
    /// Label fusion weight rule: consistent | paper (alias: lambda)
    #[arg(long)]
    label_mode: Option<String>,
    /// Candidate-pool factor for strategy b (q = min(d, ceil(q_ratio * p)))
    #[arg(long)]
    q_ratio: Option<f64>,
    /// Selection scope for strategies a/b: per_row | shared
    #[arg(long)]
    row_scope: Option<String>,
    /// Rank the partner's dimensions by signed value (strategy b)
    #[arg(long)]
    signed_rank: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Dataset name from the config; defaults to the first entry
    #[arg(long)]
    dataset: Option<String>,
    /// Run seed; defaults to the first entry of `seeds`
    #[arg(long)]
    seed: Option<u64>,
    /// Also train on the unmixed batch next to the mixed one
    #[arg(long)]
    include_clean: Option<bool>,
    /// Write the final parameters to this checkpoint file
    #[arg(long)]
    save_params: Option<PathBuf>,
    #[command(flatten)]
    mix: MixOverrides,
}

#[derive(Args)]
struct FewshotArgs {
    /// Input dataset (jsonl or csv, inferred from the extension)
    #[arg(long)]
    input: PathBuf,
    /// Examples to keep per class
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; format inferred from the extension
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    /// Training examples per class
    #[arg(long)]
    per_class: usize,
    /// Test examples per class
    #[arg(long, default_value_t = 50)]
    per_class_test: usize,
    /// Fraction of tokens replaced by random fillers
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory receiving train/test files in both jsonl and csv
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list, e.g. --seeds 1,2,3
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Report path; .md/.markdown or .csv
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step size
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: message.into() }
    }

    fn run(message: impl Into<String>) -> Self {
        Failure { code: EXIT_RUN, message: message.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(err: HarnessError) -> Self {
        let code = match err {
            HarnessError::Config(_) | HarnessError::Data(_) => EXIT_CONFIG,
            _ => EXIT_RUN,
        };
        Failure { code, message: err.to_string() }
    }
}

fn parse_strategy(raw: &str) -> Result<MixStrategy, Failure> {
    match raw.to_ascii_lowercase().as_str() {
        "none" => Ok(MixStrategy::None),
        "base" => Ok(MixStrategy::Base),
        "a" => Ok(MixStrategy::A),
        "b" => Ok(MixStrategy::B),
        "linear" => Ok(MixStrategy::Linear),
        other => Err(Failure::config(format!(
            "unknown strategy `{other}`; expected none|base|a|b|linear"
        ))),
    }
}

fn parse_label_mode(raw: &str) -> Result<LabelMode, Failure> {
    match raw.to_ascii_lowercase().as_str() {
        "consistent" => Ok(LabelMode::Consistent),
        "paper" | "lambda" => Ok(LabelMode::Lambda),
        other => Err(Failure::config(format!(
            "unknown label mode `{other}`; expected consistent|paper"
        ))),
    }
}

fn parse_row_scope(raw: &str) -> Result<RowScope, Failure> {
    match raw.to_ascii_lowercase().as_str() {
        "per_row" | "per-row" => Ok(RowScope::PerRow),
        "shared" => Ok(RowScope::Shared),
        other => Err(Failure::config(format!(
            "unknown row scope `{other}`; expected per_row|shared"
        ))),
    }
}

fn apply_mix_overrides(cfg: &mut ExperimentConfig, args: &MixOverrides) -> Result<(), Failure> {
    if let Some(raw) = &args.strategy {
        cfg.mix.strategy = parse_strategy(raw)?;
    }
    if let Some(alpha) = args.alpha {
        cfg.mix.alpha = alpha;
    }
    if let Some(layers) = &args.layer_set {
        cfg.mix.layer_set = layers.clone();
    }
    if let Some(raw) = &args.label_mode {
        cfg.mix.label_mode = parse_label_mode(raw)?;
    }
    if let Some(q) = args.q_ratio {
        cfg.mix.q_ratio = q;
    }
    if let Some(raw) = &args.row_scope {
        cfg.mix.row_scope = parse_row_scope(raw)?;
    }
    if let Some(signed) = args.signed_rank {
        cfg.mix.signed_rank = signed;
    }
    cfg.validate()?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    apply_mix_overrides(&mut cfg, &args.mix)?;
    if let Some(include_clean) = args.include_clean {
        cfg.include_clean = include_clean;
    }
    let spec = match &args.dataset {
        Some(name) => cfg
            .datasets
            .iter()
            .find(|d| &d.display_name() == name)
            .ok_or_else(|| Failure::config(format!("no dataset named `{name}` in config")))?,
        None => &cfg.datasets[0],
    };
    let data = prepare_dataset(spec, cfg.fewshot, cfg.fewshot_seed, &cfg.model)?;
    for short in &data.short_classes {
        eprintln!(
            "warning: class `{}` has only {} examples; took them all",
            short.label, short.available
        );
    }
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let settings = TrainSettings::from_config(&cfg);
    let (result, params) = train_returning_params(&data, &settings, seed)?;
    println!(
        "dataset {} | strategy {} | seed {}",
        data.name,
        settings.mix.strategy.name(),
        seed
    );
    for (epoch, loss) in result.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  train loss {loss:.6}", epoch + 1);
    }
    println!("test accuracy: {:.2}%  ({:.2}s)", result.accuracy * 100.0, result.seconds);
    if let Some(path) = &args.save_params {
        save_params(&params, path).map_err(|e| Failure::run(e.to_string()))?;
        println!("parameters written to {}", path.display());
    }
    Ok(())
}

fn cmd_fewshot(args: FewshotArgs) -> Result<(), Failure> {
    let input_format = DataFormat::from_path(&args.input);
    let ds = data::load_dataset(&args.input, input_format).map_err(HarnessError::Data)?;
    let outcome = data::fewshot_sample(&ds, args.per_class, &mut Rng::new(args.seed));
    for short in &outcome.short_classes {
        eprintln!(
            "warning: class `{}` has only {} examples; took them all",
            short.label, short.available
        );
    }
    let output_format = DataFormat::from_path(&args.output);
    data::save_dataset(&outcome.dataset, &args.output, output_format)
        .map_err(HarnessError::Data)?;
    println!(
        "sampled {} of {} examples across {} classes -> {}",
        outcome.dataset.len(),
        ds.len(),
        ds.class_count(),
        args.output.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    let spec = data::SynthSpec {
        classes: args.classes,
        per_class_train: args.per_class,
        per_class_test: args.per_class_test,
        noise: args.noise,
    };
    let (train, test) =
        data::generate_synthetic(spec, &mut Rng::new(args.seed)).map_err(HarnessError::Data)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::run(e.to_string()))?;
    for (split, name) in [(&train, "train"), (&test, "test")] {
        for format in [DataFormat::Jsonl, DataFormat::Csv] {
            let path = args.out_dir.join(format!("{name}.{format}"));
            data::save_dataset(split, &path, format).map_err(HarnessError::Data)?;
        }
    }
    println!(
        "wrote {} train / {} test examples over {} classes to {}",
        train.len(),
        test.len(),
        args.classes,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
        cfg.validate()?;
    }
    let report = compare(&cfg)?;
    harness::write_report(&report, &args.report)?;
    print!("{}", harness::render_markdown(&report));
    println!("report written to {}", args.report.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    if !(args.eps > 0.0) {
        return Err(Failure::config(format!("--eps must be positive, got {}", args.eps)));
    }
    let report = grad_check(args.eps)?;
    for entry in &report.entries {
        println!(
            "{:<11} max relative error {:.3e}  (tolerance {:.0e}) {}",
            entry.strategy.name(),
            entry.max_relative_error,
            report.tolerance,
            if entry.max_relative_error <= report.tolerance { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        println!("gradient check passed (eps {:.0e})", report.eps);
        Ok(())
    } else {
        Err(Failure { code: EXIT_GRADCHECK, message: "gradient check failed".into() })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are successes; anything else is a usage
            // problem, i.e. a config error.
            use clap::error::ErrorKind;
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Fewshot(args) => cmd_fewshot(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
