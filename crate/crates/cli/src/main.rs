mod commands;
mod config;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pose_distill::models::Preset;
use pose_distill::Error;

use crate::config::{Ablation, Overrides};

/// Environment variable naming the directory runs are created under.
pub const RUN_ROOT_ENV: &str = "POSE_DISTILL_RUNS";

#[derive(Parser, Debug)]
#[command(name = "pose-distill", version, about = "Pose-invariant person re-identification features via pose-guided generation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (`synth`: dataset directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Small model at 64x32 (default).
    #[arg(long, global = true, conflicts_with = "full")]
    pub desk: bool,
    /// Published model size at 256x128.
    #[arg(long, global = true)]
    pub full: bool,
    /// Component-analysis preset: full, no_sp, share_e, baseline, single.
    #[arg(long, global = true)]
    pub ablation: Option<Ablation>,
}

impl Global {
    pub fn overrides(&self) -> Overrides {
        let preset = if self.full {
            Some(Preset::Full)
        } else if self.desk {
            Some(Preset::Desk)
        } else {
            None
        };
        Overrides { preset, seed: self.seed, ablation: self.ablation }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset to disk in the standard directory layout.
    Synth {
        /// Training identities.
        #[arg(long)]
        ids: Option<usize>,
        /// Images per identity.
        #[arg(long)]
        per_id: Option<usize>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage or all stages of the active preset.
    Train {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Stop each stage after this many iterations.
        #[arg(long)]
        max_iters: Option<u64>,
        /// Continue an interrupted stage from its checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Embed query and gallery images with the encoder and report mAP / CMC.
    Eval {
        /// Defaults to the latest stage checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Strip all pose landmarks before evaluating.
        #[arg(long)]
        no_landmarks: bool,
    },
    /// Generate an input person in a target pose with several noise draws.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input person image.
        #[arg(long)]
        image: PathBuf,
        /// Landmark file with the target pose.
        #[arg(long)]
        landmarks: PathBuf,
        /// Record to use from the landmark file; defaults to the first.
        #[arg(long)]
        pose_id: Option<String>,
        /// Image the landmarks were annotated on; shown as ground truth and
        /// used for the landmark frame size.
        #[arg(long)]
        target_image: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_noise: usize,
        /// Output PNG; defaults to grids/generate.png in the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingDependency(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::Synth { ids, per_id, force } => commands::synth(g, ids, per_id, force),
        Command::Train { stage, max_iters, resume } => commands::train(g, stage, max_iters, resume),
        Command::Eval { checkpoint, no_landmarks } => commands::eval(g, checkpoint, no_landmarks),
        Command::Generate { checkpoint, image, landmarks, pose_id, target_image, n_noise, output } => {
            commands::generate(g, checkpoint, &image, &landmarks, pose_id.as_deref(), target_image.as_deref(), n_noise, output)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
