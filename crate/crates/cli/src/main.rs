use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sfadnet::config::{RunConfig, SyntheticConfig};
use sfadnet::data::{make_synthetic, write_series};
use sfadnet::run::{run_ablation, run_eval, run_gradcheck, run_train};
use sfadnet::train::Variant;
use sfadnet::{Error, Result};

/// Traffic forecasting with learned fused graphs and pattern decoupling.
///
/// Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
#[derive(Parser)]
#[command(name = "sfadnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic series CSV and its JSON sidecar.
    Generate(GenerateArgs),
    /// Train a model; writes checkpoint, history, report and manifest.
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation and test splits.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one ablation variant.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// use_pg, use_tg, use_sg, full, no_decouple, g2 or g3.
        #[arg(long)]
        variant: String,
    },
    /// Finite-difference gradient check of the full loss at 64-bit.
    Gradcheck(RunArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    #[arg(long, default_value_t = 14)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    coupling: f64,
    #[arg(long, default_value_t = 288)]
    steps_per_day: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    weekly_amplitude: f64,
    /// Output CSV path; the sidecar is written next to it with a .json extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to `run.out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config)?;
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.out_dir.clone())
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        nodes: args.nodes,
        days: args.days,
        steps: 0,
        steps_per_day: args.steps_per_day,
        first_step_day_of_week: 0,
        coupling: args.coupling,
        noise: args.noise,
        weekly_amplitude: args.weekly_amplitude,
        seed: args.seed,
    };
    if args.days < 2 {
        return Err(Error::config("--days: needs at least 2 days"));
    }
    let (series, params) = make_synthetic(&cfg)?;
    let meta = write_series(&series, &args.out)?;
    print_json(&json!({
        "series": args.out,
        "meta": meta,
        "steps": series.steps(),
        "nodes": series.nodes(),
        "params": params,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(args) => generate(&args)?,
        Command::Train(args) => {
            let cfg = args.load()?;
            let out = args.out_dir(&cfg);
            let report = run_train(&cfg, &args.overrides, &out)?;
            print_json(&json!({ "out_dir": out, "report": report }));
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.load()?;
            print_json(&run_eval(&cfg, &checkpoint)?);
        }
        Command::Ablate { run, variant } => {
            let cfg = run.load()?;
            let variant: Variant = variant.parse()?;
            let out = run.out_dir(&cfg).join(variant.name());
            let report = run_ablation(&cfg, variant, &run.overrides, &out)?;
            print_json(&json!({ "out_dir": out, "report": report }));
        }
        Command::Gradcheck(args) => {
            let cfg = args.load()?;
            let report = run_gradcheck(&cfg)?;
            let worst = report.worst();
            print_json(&json!({
                "passed": report.passed(),
                "max_rel_err": report.max_rel_err,
                "tol": report.tol,
                "entries_checked": report.entries_checked,
                "worst_param": worst.map(|w| w.name.clone()),
            }));
            if !report.passed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
