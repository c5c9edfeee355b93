//! `brnet` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use brnet::detector::ProposalMode;
use brnet::harness::{self, Overrides, TEST_SPLIT};
use brnet::train::{num_workers, synthesize};
use brnet::Result;

#[derive(Parser)]
#[command(name = "brnet", version, about = "Amodal instance segmentation of overlapping worms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model and scene seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    proposal_mode: Option<ProposalMode>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            proposal_mode: self.proposal_mode,
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<ProposalMode, String> {
    s.parse().map_err(|e: brnet::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test splits.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of training scenes, replacing the config value.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train and write a checkpoint plus the metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write prediction / ground-truth overlays.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn test_scenes(common: &Common, dataset: Option<&PathBuf>) -> Result<Vec<brnet::synth::AnnotatedScene>> {
    match dataset {
        Some(d) => harness::load_split(d, TEST_SPLIT),
        None => {
            let cfg = harness::load_config(common.config.as_deref(), common.overrides())?;
            Ok(synthesize(&cfg.data, num_workers())?.1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out, count } => {
            let cfg = harness::load_config(common.config.as_deref(), common.overrides())?;
            let (train, test) = harness::cli_synth(&cfg, &out, count)?;
            println!("[train]\n{train}\n[test]\n{test}");
        }
        Command::Train { common, out, dataset } => {
            let cfg = harness::load_config(common.config.as_deref(), common.overrides())?;
            let s = harness::cli_train(&cfg, dataset.as_deref(), &out)?;
            println!(
                "{} steps, total loss {:.4} -> {:.4}\ncheckpoint {}\nlog {}",
                s.steps,
                s.initial_total,
                s.final_total,
                s.checkpoint.display(),
                s.log.display()
            );
        }
        Command::Eval { common, checkpoint, dataset, out } => {
            let cfg = harness::load_config(common.config.as_deref(), Overrides::default())?;
            let scenes = test_scenes(&common, dataset.as_ref())?;
            let r = harness::cli_eval(&checkpoint, &scenes, common.proposal_mode, cfg.eval.miou_mode, out.as_deref())?;
            print!("{}", harness::report_table(&[("brnet".to_string(), &r)]));
        }
        Command::Ablate { common, out, dataset } => {
            let cfg = harness::load_config(common.config.as_deref(), common.overrides())?;
            let r = harness::cli_ablate(&cfg, dataset.as_deref(), out.as_deref())?;
            print!("{}", r.to_tsv());
        }
        Command::Render { common, checkpoint, dataset, out } => {
            let scenes = test_scenes(&common, dataset.as_ref())?;
            let paths = harness::cli_render(&checkpoint, &scenes, common.proposal_mode, &out)?;
            println!("wrote {} overlays to {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
