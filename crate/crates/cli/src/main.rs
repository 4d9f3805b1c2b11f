use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use munmt::config::ExperimentConfig;
use munmt::eval::Report;
use munmt::pipeline::{ablation_config, Round, Workspace, ARMS};
use munmt::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "munmt",
    version,
    about = "Three-stage multilingual unsupervised translation at desk scale"
)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Top-level seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-key override such as stage1.steps=5000 (repeatable).
    #[arg(long = "override", value_name = "K=V", global = true)]
    overrides: Vec<String>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage2Round {
    A,
    B,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the toy benchmark corpora and manifest.
    SynthData,
    /// Learn the subword vocabulary from the training corpora.
    TrainVocab,
    /// Stage 1: masked reconstruction plus auxiliary parallel data.
    Stage1,
    /// Offline back-translation for a synthetic-data round.
    SynthBt {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        round: u8,
    },
    /// Stage 2: retrain with synthetic data (round a, then round b).
    Stage2 {
        #[arg(long, value_enum)]
        round: Stage2Round,
    },
    /// Stage 3: back-translation and cross-translation sweeps.
    Stage3,
    /// BLEU of a checkpoint on the configured held-out directions.
    Evaluate {
        /// Checkpoint file; defaults to the latest finished stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Every step from data generation to the final report.
    Pipeline,
    /// Run an ablation arm as a full pipeline under <out>/ablate/<arm>.
    Ablate {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ARMS))]
        arm: String,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_toml("", &overrides),
    }
}

fn print_report(quiet: bool, label: &str, r: &Report) {
    if !quiet {
        println!("# {label}");
    }
    print!("{}", r.to_tsv());
}

fn latest_checkpoint(ws: &Workspace) -> Result<(PathBuf, String)> {
    for stage in ["3", "2b", "2a", "1"] {
        let p = ws.checkpoint_path(stage);
        if p.exists() {
            return Ok((p, format!("stage{stage}")));
        }
    }
    Err(Error::Data(format!("no checkpoint under {}", ws.root.display())))
}

fn stem_for(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut ws = Workspace::new(&cli.out, cfg);
    ws.quiet = cli.quiet;
    match &cli.command {
        Command::SynthData => {
            let m = ws.synth_data()?;
            if !cli.quiet {
                println!("wrote {} datasets to {}", m.datasets.len(), ws.data_dir().display());
            }
        }
        Command::TrainVocab => {
            let v = ws.train_vocab()?;
            if !cli.quiet {
                println!("vocabulary of {} pieces, digest {}", v.len(), v.digest());
            }
        }
        Command::Stage1 => {
            ws.stage1()?;
        }
        Command::SynthBt { round } => {
            ws.synth_bt(*round)?;
        }
        Command::Stage2 { round } => {
            ws.stage2(match round {
                Stage2Round::A => Round::A,
                Stage2Round::B => Round::B,
            })?;
        }
        Command::Stage3 => {
            ws.stage3()?;
        }
        Command::Evaluate { checkpoint } => {
            let (path, stem) = match checkpoint {
                Some(p) => (p.clone(), stem_for(p)),
                None => latest_checkpoint(&ws)?,
            };
            let r = ws.evaluate(&path, &stem)?;
            print_report(cli.quiet, &stem, &r);
        }
        Command::Pipeline => {
            let reports = ws.pipeline()?;
            for (stage, r) in &reports.by_stage {
                print_report(cli.quiet, &format!("stage{stage}"), r);
            }
        }
        Command::Ablate { arm } => {
            if ws.cfg.data.manifest.is_none() {
                ws.synth_data()?;
            }
            let manifest = ws.load_manifest()?;
            let arm_cfg = ablation_config(&ws.cfg, arm, &manifest)?;
            let mut arm_ws = Workspace::new(ws.root.join("ablate").join(arm), arm_cfg);
            arm_ws.quiet = cli.quiet;
            arm_ws.adopt(&ws.root)?;
            let reports = arm_ws.pipeline()?;
            print_report(cli.quiet, &format!("{arm} stage3"), &reports.by_stage["3"]);
        }
    }
    Ok(())
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Data(_) => "data",
        Error::Vocab(_) => "vocab",
        Error::Shape(_) => "shape",
        Error::Model(_) => "model",
        Error::NonFinite(_) => "non_finite",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io { .. } => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error\tcode={}\tkind={}\tmessage={msg}", e.exit_code(), kind(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
