use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cfmimo::harness::{render_table, run_experiment, Command, Overrides};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Cell-free massive MIMO AP-UE association simulator.
#[derive(Parser)]
#[command(name = "cfmimo", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the training and test drops and cache them in the output directory.
    Generate(Common),
    /// Evaluate baseline association strategies on the cached test drops.
    Baseline(Common),
    /// Train a centralized or distributed association policy.
    Train(Common),
    /// Evaluate a trained checkpoint on the cached test drops.
    Eval(Common),
    /// Run the gradient, Monte-Carlo and shadow-correlation self-checks.
    Validate(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Sum,
    Balance,
    Min,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    #[value(name = "3x3")]
    W3,
    #[value(name = "5x5")]
    W5,
    Full,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML). Built-in defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Baseline strategy: pilot, master, top (with --m), topN or all.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    objective: Option<Objective>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "tau-p")]
    tau_p: Option<usize>,
    /// Checkpoint file, or directory of per-AP checkpoints with --distributed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long = "out-dir", default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    distributed: bool,
    #[arg(long, value_enum)]
    template: Option<TemplateArg>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            strategy: self.strategy.clone(),
            m: self.m,
            objective: self.objective.map(|o| {
                match o {
                    Objective::Sum => "sum",
                    Objective::Balance => "balance",
                    Objective::Min => "min",
                }
                .to_string()
            }),
            lambda: self.lambda,
            tau_p: self.tau_p,
            checkpoint: self.checkpoint.clone(),
            distributed: self.distributed,
            template: self.template.map(|t| {
                match t {
                    TemplateArg::W3 => "3x3",
                    TemplateArg::W5 => "5x5",
                    TemplateArg::Full => "full",
                }
                .to_string()
            }),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    let (command, common) = match &cli.command {
        Cmd::Generate(c) => (Command::Generate, c),
        Cmd::Baseline(c) => (Command::Baseline, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Validate(c) => (Command::Validate, c),
    };
    let art = run_experiment(common.config.as_deref(), command, &common.overrides(), &common.out_dir)
        .with_context(|| format!("{command:?} failed"))?;
    println!("config_hash {}", art.config_hash);
    if !art.summaries.is_empty() {
        print!("{}", render_table(&art.summaries));
    }
    for check in &art.checks {
        println!("{}", check.line());
    }
    for f in &art.files {
        println!("wrote {}", f.display());
    }
    let ok = art.checks.iter().all(|c| c.pass);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
