use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "gesturegen", version, about = "Style-conditioned co-speech gesture generation")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pose data files.
    #[command(subcommand)]
    Data(DataCmd),
    /// Audio features.
    #[command(subcommand)]
    Audio(AudioCmd),
    /// Motion quantizer.
    #[command(subcommand)]
    Vq(VqCmd),
    /// Style codes.
    #[command(subcommand)]
    Style(StyleCmd),
    /// Model training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Generate gestures for an audio clip.
    Generate(GenerateArgs),
    /// Compute metrics over a directory of generated sequences.
    Eval(EvalArgs),
    /// Run the full pipeline.
    Run(RunArgs),
    /// Run the pipeline once per value of an ablation axis.
    Sweep(SweepArgs),
    /// Print a bundled configuration as TOML.
    Config {
        #[arg(value_enum, default_value = "desk")]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Tiny,
    Full,
}

#[derive(Subcommand)]
pub enum DataCmd {
    /// Check a pose file (or every pose file of a directory).
    Validate { path: PathBuf },
    /// Write a synthetic dataset of pose files with matching audio.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 88)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        styles: usize,
        #[arg(long, default_value_t = 2)]
        speakers: usize,
        /// Write the binary container instead of text.
        #[arg(long)]
        binary: bool,
        /// Skip the `.wav` files.
        #[arg(long)]
        no_audio: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum AudioCmd {
    /// MFCC frames as a 64-wide frame file.
    Mfcc {
        wav: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Onset times as JSON.
    Beats {
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// 256-wide speech embedding from a trained predictor's speech encoder.
    Embed {
        wav: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum VqCmd {
    /// Train the quantizer on a directory of pose files.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Experiment config; its `vq` and `vq_train` sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pose file to codebook indices (JSON).
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Codebook indices (JSON) to a pose file.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum StyleCmd {
    /// Style codes of pose clips, labelled by their style tag.
    Encode {
        /// Predictor checkpoint holding the trained style encoder.
        #[arg(long)]
        model: PathBuf,
        /// Pose files or directories.
        #[arg(long, required = true, num_args = 1..)]
        clip: Vec<PathBuf>,
        /// `.json` table, or `.csv` for plotting tools.
        #[arg(long)]
        out: PathBuf,
    },
    /// 2-D t-SNE points (JSON) and a scatter plot (SVG).
    Tsne {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 200.0)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Points file; the plot goes next to it with an `.svg` extension.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum TrainCmd {
    /// Train the predictor with its style and speech encoders.
    Predictor {
        /// Pose files with same-stem `.wav` audio.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gesture feature encoder used by FGD.
    Encoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Greedy,
    Topk,
    Temp,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub style_clip: PathBuf,
    #[arg(long)]
    pub identity: String,
    #[arg(long)]
    pub vq: PathBuf,
    #[arg(long)]
    pub predictor: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pose file whose tokens fix the first steps.
    #[arg(long)]
    pub initial_pose: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Rerun a previous run from its manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory; defaults to `$GESTUREGEN_OUT/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Recompute every stage.
    #[arg(long)]
    pub no_resume: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `layers`, `pooling`, `fusion`, or `dotted.key=v1,v2,...`.
    #[arg(long)]
    pub axis: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their sources; skip repeats.
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
