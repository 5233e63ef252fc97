use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ilr_cli::config::parse_variant_list;
use ilr_cli::pipeline::with_workers;
use ilr_cli::{run_pipeline, CliResult, Context, ExperimentConfig, ModelName, Profile, Stage};

#[derive(Parser)]
#[command(
    name = "ilr",
    version,
    about = "Individual-claims reserving experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate transaction histories for every dataset.
    Simulate(Common),
    /// Split claims into train/validation/test.
    Prepare(Common),
    /// Grid-search hyperparameters on the tuning dataset.
    Tune(Common),
    /// Train each network on each evaluation dataset.
    Train(Common),
    /// Predict the valuation-date reserve on the test claims.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluate a single model, e.g. `CE-baseline`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Rebuild metrics reports and the summary from stored predictions.
    Report(Common),
    /// Run every stage.
    Run(Common),
    /// Print the effective configuration.
    Config(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated models, e.g. `FNN,FNN+,CE-baseline`.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path, self.profile)?,
            None => ExperimentConfig::profile(self.profile),
        };
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(out) = &self.out {
            c.out.clone_from(out);
        }
        if let Some(list) = &self.variants {
            c.variants = parse_variant_list(list)?;
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        c.validate()?;
        Ok(c)
    }
}

fn stage(common: &Common, stage: Stage, only: Option<ModelName>) -> CliResult<()> {
    let config = common.resolve()?;
    let models = only.map_or_else(|| config.variants.clone(), |m| vec![m]);
    with_workers(config.workers, || {
        let ctx = Context::new(&config);
        ctx.run_stage(stage, &models)?;
        print_counts(&ctx.stats.counts());
        Ok(())
    })
}

fn print_counts(c: &ilr_cli::RunCounts) {
    println!(
        "simulated {} prepared {} tuned {} trained {} evaluated {}",
        c.simulated, c.prepared, c.tuned, c.trained, c.evaluated
    );
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(c) => stage(&c, Stage::Simulate, None),
        Command::Prepare(c) => stage(&c, Stage::Prepare, None),
        Command::Tune(c) => stage(&c, Stage::Tune, None),
        Command::Train(c) => stage(&c, Stage::Train, None),
        Command::Evaluate { common, variant } => {
            let only = variant.as_deref().map(str::parse).transpose()?;
            stage(&common, Stage::Evaluate, only)
        }
        Command::Report(c) => stage(&c, Stage::Report, None),
        Command::Run(c) => {
            let config = c.resolve()?;
            let outcome = run_pipeline(&config)?;
            print_counts(&outcome.counts);
            println!(
                "summary written to {}",
                config.out.join("summary").display()
            );
            Ok(())
        }
        Command::Config(c) => {
            let config = c.resolve()?;
            println!(
                "{}",
                serde_json::to_string_pretty(&config).expect("config serialises")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
