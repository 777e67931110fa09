//! `xdiff` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xdiff_core::harness::{with_jobs, Harness};
use xdiff_core::policy::TrainRegime;
use xdiff_core::Error;

#[derive(Parser)]
#[command(name = "xdiff", version, about = "Selective human/robot co-training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for seeds, regimes and rollouts.
    #[arg(long)]
    jobs: Option<usize>,
    /// Accept inputs whose provenance does not match.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate robot and human demo datasets.
    GenData(Common),
    /// Train one embodiment classifier per seed.
    TrainClassifier(Common),
    /// Annotate human chunks with k*.
    Annotate(Common),
    /// Train policies for every configured regime, or one.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        regime: Option<String>,
    },
    /// Closed-loop evaluation of trained policies.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        regime: Option<String>,
        /// Evaluate these checkpoints instead of the trained regimes.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Overlap curves and k* summaries.
    Analyze(Common),
    /// Every stage in order.
    Pipeline(Common),
}

fn regime(name: Option<&str>) -> Result<Option<TrainRegime>, Error> {
    name.map(TrainRegime::parse).transpose()
}

fn harness(c: &Common) -> Result<Harness, Error> {
    Harness::from_path(&c.config, c.out.clone(), c.force)
}

fn run(cmd: Command) -> Result<(), Error> {
    let common = match &cmd {
        Command::GenData(c)
        | Command::TrainClassifier(c)
        | Command::Annotate(c)
        | Command::Analyze(c)
        | Command::Pipeline(c) => c,
        Command::TrainPolicy { common, .. } | Command::Eval { common, .. } => common,
    };
    let h = harness(common)?;
    with_jobs(common.jobs, || match &cmd {
        Command::GenData(_) => h.gen_data(),
        Command::TrainClassifier(_) => h.train_classifier(),
        Command::Annotate(_) => h.annotate(),
        Command::TrainPolicy { regime: r, .. } => h.train_policy(regime(r.as_deref())?),
        Command::Eval {
            regime: r,
            checkpoints,
            ..
        } => {
            let report = h.eval(regime(r.as_deref())?, checkpoints)?;
            for g in &report.regimes {
                println!(
                    "{}\tsuccess {:.3} (se {:.3})\tevents/rollout {:.2}",
                    g.regime, g.success_rate, g.success_se, g.mean_events
                );
            }
            Ok(())
        }
        Command::Analyze(_) => {
            let s = h.analyze()?;
            for a in &s.seeds {
                println!(
                    "seed {}\tkl {:.4} -> {:.4}\tcrossing {:?}\tspearman {:?}",
                    a.seed, a.kl_first, a.kl_last, a.kl_crossing, a.spearman
                );
            }
            Ok(())
        }
        Command::Pipeline(_) => {
            let report = h.pipeline()?;
            for g in &report.regimes {
                println!("{}\tsuccess {:.3}\tevents/rollout {:.2}", g.regime, g.success_rate, g.mean_events);
            }
            Ok(())
        }
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
