use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mian::check::{gradcheck_synthetic, ProbeSettings};
use mian::data::{self, holdout_split, SynthConfig};
use mian::{ablation, attention, checkpoint, train, MianError, ModelConfig, Result, Variant};

/// Train and evaluate the MIAN click-through-rate model on tab-separated datasets.
#[derive(Parser)]
#[command(name = "mian", version)]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train several variants and tabulate their held-out metrics.
    Ablate(AblateArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write every attention weight of a checkpoint on a dataset.
    ExportAttention(ExportArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().n_instances)]
    n_instances: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_items)]
    items: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_categories)]
    categories: usize,
    #[arg(long, default_value_t = SynthConfig::default().seq_len)]
    seq_len: usize,
    /// Rank of the user and context cross tables.
    #[arg(long, default_value_t = SynthConfig::default().cross_rank)]
    cross_rank: usize,
    #[arg(long, default_value_t = SynthConfig::default().w_beh)]
    w_beh: f64,
    #[arg(long, default_value_t = SynthConfig::default().w_user)]
    w_user: f64,
    #[arg(long, default_value_t = SynthConfig::default().w_ctx)]
    w_ctx: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise_std)]
    noise_std: f64,
    #[arg(long, default_value_t = SynthConfig::default().inactive_fraction)]
    inactive_fraction: f64,
}

/// Model configuration: a flat key=value file plus individual overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch report (tab-separated).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Fraction of instances, taken from the end of the file, held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Zero the output layer after training, so every prediction is 0.5.
    #[arg(long)]
    zero_output: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics report; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated variant names; all variants when absent.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = ProbeSettings::default().check.step)]
    step: f64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = ProbeSettings::default().check.samples_per_tensor)]
    samples: usize,
    /// Synthetic instances in the checked batch.
    #[arg(long, default_value_t = ProbeSettings::default().instances)]
    instances: usize,
    /// Standard deviation of the parameters at the probe point.
    #[arg(long, default_value_t = ProbeSettings::default().scale)]
    scale: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn model_config(args: &ConfigArgs, seed: Option<u64>) -> Result<ModelConfig> {
    let mut cfg = match &args.config {
        Some(p) => ModelConfig::from_kv_text(&fs::read_to_string(p)?)?,
        None => ModelConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| MianError::Config(format!("override `{o}` is not key=value")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => {
            let cfg = SynthConfig {
                n_instances: a.n_instances,
                n_items: a.items,
                n_categories: a.categories,
                seq_len: a.seq_len,
                cross_rank: a.cross_rank,
                w_beh: a.w_beh,
                w_user: a.w_user,
                w_ctx: a.w_ctx,
                noise_std: a.noise_std,
                inactive_fraction: a.inactive_fraction,
                seed: seed.unwrap_or(0),
                ..SynthConfig::default()
            };
            let (schema, rows) = data::generate(&cfg)?;
            data::save_dataset(&a.out, &schema, &rows)
        }
        Command::Train(a) => {
            let cfg = model_config(&a.config, seed)?;
            let (schema, rows) = data::load(&a.data)?;
            let (tr, te) = holdout_split(&rows, a.holdout);
            let (mut model, adam, report) = train::train::<f64>(&cfg, &schema, tr, te)?;
            if a.zero_output {
                model.zero_output();
            }
            checkpoint::save(&a.out, &model, &adam)?;
            emit(a.report.as_deref(), &report.to_tsv())
        }
        Command::Eval(a) => {
            let (model, _) = checkpoint::load::<f64>(&a.checkpoint)?;
            let (schema, rows) = data::load(&a.data)?;
            checkpoint::ensure_schema(&model, &schema)?;
            let report = train::evaluate(&model, &rows)?;
            emit(a.out.as_deref(), &report.to_tsv())
        }
        Command::Ablate(a) => {
            let cfg = model_config(&a.config, seed)?;
            let (schema, rows) = data::load(&a.data)?;
            let (tr, te) = holdout_split(&rows, a.holdout);
            let variants = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants };
            let table = ablation::run_ablation(&cfg, &variants, &schema, tr, te)?;
            emit(a.out.as_deref(), &table.to_tsv())
        }
        Command::Gradcheck(a) => {
            let cfg = model_config(&a.config, seed)?;
            let mut settings = ProbeSettings {
                instances: a.instances,
                scale: a.scale,
                ..ProbeSettings::default()
            };
            settings.check.tolerance = a.tol;
            settings.check.step = a.step;
            settings.check.samples_per_tensor = a.samples;
            settings.check.seed = cfg.seed;
            let report = gradcheck_synthetic(&cfg, &settings)?;
            println!("tensor\tchecked\tskipped\tmax_rel_error");
            for t in &report.tensors {
                println!("{}\t{}\t{}\t{:e}", t.path, t.checked, t.skipped, t.max_rel_error);
            }
            println!(
                "total\t{}\t{}\t{:e}\t{}",
                report.checked(),
                report.skipped(),
                report.max_rel_error,
                if report.passed() { "pass" } else { "fail" }
            );
            if report.passed() {
                Ok(())
            } else {
                Err(MianError::Metric("gradient check exceeded tolerance"))
            }
        }
        Command::ExportAttention(a) => {
            let (model, _) = checkpoint::load::<f64>(&a.checkpoint)?;
            let (schema, rows) = data::load(&a.data)?;
            let text = attention::export_attention(&model, &schema, &rows)?;
            fs::write(&a.out, text)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error\tusage\t{}", first.replace('\t', " "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
