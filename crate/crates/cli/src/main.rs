use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use wdm_cli::commands::{self, SweepAxis};
use wdm_cli::report;
use wdm_cli::settings::{all_keys, RunConfig, SEED_ENV};
use wdm_core::corpus::LogFormat;
use wdm_core::synthetic::{planted_corpus, PlantedSpec};

#[derive(Parser)]
#[command(name = "wdm", version, about = "Wasserstein contrastive sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// `--<key> <value>` for every configuration key; flags win over the
/// config file and the seed variable.
#[derive(Debug, Default, Clone)]
struct Overrides(Vec<(String, String)>);

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = Vec::new();
        for key in all_keys() {
            if let Some(v) = m.get_one::<String>(key) {
                out.push((key.to_owned(), v.clone()));
            }
        }
        Ok(Overrides(out))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for Overrides {
    fn augment_args(mut cmd: Command) -> Command {
        for key in all_keys() {
            let mut arg = Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .help_heading("Configuration overrides");
            if key.contains('_') {
                arg = arg.alias(key.replace('_', "-"));
            }
            cmd = cmd.arg(arg);
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (`key = value` lines, optional `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of sweep points trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Filter a raw interaction log and write a corpus file.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "tsv")]
        format: String,
        #[arg(long)]
        output: PathBuf,
        /// Minimum interactions per user.
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Write a planted-pattern corpus (successor item with probability 1 - noise).
    Synthesize {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 50)]
        items: usize,
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 20)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train, keep the best validation checkpoint and evaluate it.
    Train(RunArgs),
    /// Re-evaluate the checkpoint of a finished run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per noise ratio in `noise_values`.
    SweepNoise(SweepArgs),
    /// Train once per data portion in `portion_values`.
    SweepPortion(SweepArgs),
    /// Train once per batch size in `batch_values`.
    SweepBatch(SweepArgs),
    /// Merge run directories into Markdown and CSV comparison tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(args: &RunArgs) -> wdm_core::Result<RunConfig> {
    let seed = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(args.config.as_deref(), seed.as_deref(), &args.overrides.0)
}

fn run(cmd: Cmd) -> wdm_core::Result<()> {
    match cmd {
        Cmd::Preprocess { input, format, output, k } => {
            let format: LogFormat = format.parse()?;
            let stats = commands::preprocess(&input, format, &output, k)?;
            println!("{stats}");
        }
        Cmd::Synthesize { output, items, users, length, noise, seed } => {
            let corpus = planted_corpus(&PlantedSpec { items, users, length, noise, seed })?;
            corpus.save(&output)?;
            println!("{}", corpus.stats());
        }
        Cmd::Train(args) => {
            let cfg = resolve(&args)?;
            let outcome = commands::train(&cfg, &args.out)?;
            for m in [&outcome.valid, &outcome.test] {
                println!("{}", m.summary().csv_row());
            }
        }
        Cmd::Evaluate { run, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let (valid, test) = commands::evaluate(&run, &out)?;
            for m in [&valid, &test] {
                println!("{}", m.summary().csv_row());
            }
        }
        Cmd::SweepNoise(a) => sweep(a, SweepAxis::Noise)?,
        Cmd::SweepPortion(a) => sweep(a, SweepAxis::Portion)?,
        Cmd::SweepBatch(a) => sweep(a, SweepAxis::Batch)?,
        Cmd::Report { runs, out } => {
            let report = report::collect(&runs);
            report.write(&out)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn sweep(args: SweepArgs, axis: SweepAxis) -> wdm_core::Result<()> {
    let cfg = resolve(&args.run)?;
    let result = commands::sweep(&cfg, axis, &args.run.out, args.jobs)?;
    for row in &result.rows {
        match row.mrr {
            Some(mrr) => println!("{} = {}: mrr {mrr:.4}", axis.name(), row.axis_value),
            None => println!("{} = {}: {}", axis.name(), row.axis_value, row.status),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(wdm_cli::exit_code(&e) as u8)
        }
    }
}
