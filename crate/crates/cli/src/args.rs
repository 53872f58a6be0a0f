use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use wplda_core::experiment::ExperimentName;
use wplda_core::plda::SigmaMode;

#[derive(Debug, Parser)]
#[command(
    name = "wplda",
    version,
    about = "PLDA speaker verification trained on strong and weak labels"
)]
pub struct Cli {
    /// Random seed for data generation and random initialization
    #[arg(
        long,
        global = true,
        help_heading = "Global options",
        default_value_t = 0
    )]
    pub seed: u64,

    /// Worker threads for EM, batch scoring and experiment jobs
    #[arg(long, global = true, help_heading = "Global options", default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,

    /// Log only warnings and errors [default: off]
    #[arg(
        long,
        global = true,
        help_heading = "Global options",
        default_value_t = false
    )]
    pub quiet: bool,

    /// JSON object of option values keyed by flag name; flags given on the
    /// command line win [default: none]
    #[arg(
        long,
        global = true,
        help_heading = "Global options",
        value_name = "FILE"
    )]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, strong set, eval trials and truth model
    Synth(SynthArgs),
    /// Derive session-based speaker labels from metadata
    Weaklabel(WeaklabelArgs),
    /// Train a PLDA backend with EM
    Train(TrainArgs),
    /// Score a trial list
    Score(ScoreArgs),
    /// Compute EER and DET points from scores
    Eval(EvalArgs),
    /// Run a scripted experiment over several seeds
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub dim: usize,
    /// Speaker subspace rank of the truth model
    #[arg(long, default_value_t = 25)]
    pub rank: usize,
    /// Double-channel sessions in the weakly labelable corpus
    #[arg(long, default_value_t = 2000)]
    pub sessions: usize,
    /// Customer pool size
    #[arg(long, default_value_t = 1_000_000_000)]
    pub pool_size: u64,
    #[arg(long, default_value_t = 200)]
    pub service_pool_size: u64,
    /// Mean utterances per speaker per session (Poisson, at least 1)
    #[arg(long, default_value_t = 5.0)]
    pub utts_per_channel: f64,
    #[arg(long, default_value_t = 2.0)]
    pub speaker_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Isotropic part of the per-session offset
    #[arg(long, default_value_t = 1.0)]
    pub session_scale: f64,
    /// Rank of the channel subspace of the per-session offset
    #[arg(long, default_value_t = 10)]
    pub channel_rank: usize,
    #[arg(long, default_value_t = 1.6)]
    pub channel_scale: f64,
    /// Norm of the offset added to corpus and eval vectors but not to the
    /// strong set
    #[arg(long, default_value_t = 0.0)]
    pub condition_shift: f64,
    /// Use a random SPD residual covariance [default: off]
    #[arg(long, default_value_t = false)]
    pub random_sigma: bool,
    /// Strongly labeled speakers
    #[arg(long, default_value_t = 2000)]
    pub strong_speakers: usize,
    /// Mean utterances per strong speaker (Poisson, at least 1)
    #[arg(long, default_value_t = 3.0)]
    pub strong_utts_per_speaker: f64,
    #[arg(long, default_value_t = 200)]
    pub eval_speakers: usize,
    #[arg(long, default_value_t = 1)]
    pub enroll_per_speaker: usize,
    #[arg(long, default_value_t = 6)]
    pub test_per_speaker: usize,
}

#[derive(Debug, Args)]
pub struct WeaklabelArgs {
    /// Metadata CSV
    #[arg(long, value_name = "FILE")]
    pub metadata: PathBuf,
    /// Output labels file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Only label utterances of this local speaker id [default: all]
    #[arg(long)]
    pub channel: Option<String>,
    /// Write a label quality report; needs true speaker ids [default: none]
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// I-vectors file
    #[arg(long, value_name = "FILE")]
    pub ivectors: PathBuf,
    /// Labels file; unlabeled vectors are skipped
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    /// Weakly labeled i-vectors pooled with the main set [default: none]
    #[arg(long, value_name = "FILE", requires = "weak_labels")]
    pub weak_ivectors: Option<PathBuf>,
    /// Labels for --weak-ivectors [default: none]
    #[arg(long, value_name = "FILE", requires = "weak_ivectors")]
    pub weak_labels: Option<PathBuf>,
    /// PLDA speaker subspace rank
    #[arg(long, default_value_t = 25)]
    pub rank: usize,
    /// EM iterations
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Residual covariance: full or diagonal
    #[arg(long, default_value_t = SigmaMode::Full)]
    pub sigma: SigmaMode,
    /// Drop speakers with fewer utterances
    #[arg(long, default_value_t = 1)]
    pub min_utts: usize,
    /// Whiten after centering [default: off]
    #[arg(long, default_value_t = false)]
    pub whiten: bool,
    /// Output model file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Model file; not needed with --cosine [default: none]
    #[arg(long, value_name = "FILE", required_unless_present = "cosine")]
    pub model: Option<PathBuf>,
    /// Trials file
    #[arg(long, value_name = "FILE")]
    pub trials: PathBuf,
    /// I-vectors file
    #[arg(long, value_name = "FILE")]
    pub ivectors: PathBuf,
    /// Output scores file
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Cosine scoring on the raw vectors instead of PLDA [default: off]
    #[arg(long, default_value_t = false, conflicts_with_all = ["model", "adapt"])]
    pub cosine: bool,
    /// Refit the model's preprocessing on these unlabeled vectors before
    /// scoring [default: none]
    #[arg(long, value_name = "FILE")]
    pub adapt: Option<PathBuf>,
    /// Append the target/nontarget flag to each line [default: off]
    #[arg(long, default_value_t = false)]
    pub flags: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Scores file
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Trials file; not needed when scores carry flags [default: none]
    #[arg(long, value_name = "FILE")]
    pub trials: Option<PathBuf>,
    /// JSON report file [default: standard output]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// DET points CSV [default: none]
    #[arg(long, value_name = "FILE")]
    pub det: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// table2, fig2, fig3 or fig4
    #[arg(long)]
    pub name: ExperimentName,
    /// Comma-separated seeds; the global --seed is not used
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Output directory for CSV and manifest [default: none]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Strong speaker counts [default: per experiment]
    #[arg(long, value_delimiter = ',')]
    pub strong: Option<Vec<usize>>,
    /// Weak session counts [default: per experiment]
    #[arg(long, value_delimiter = ',')]
    pub weak: Option<Vec<usize>>,
    /// PLDA rank
    #[arg(long, default_value_t = 25)]
    pub rank: usize,
    /// EM iterations
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    /// Whiten after centering [default: off]
    #[arg(long, default_value_t = false)]
    pub whiten: bool,
    /// Vector dimension [default: 50]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Truth-model speaker rank [default: 25]
    #[arg(long)]
    pub synth_rank: Option<usize>,
    /// Condition shift norm [default: 4.5 for fig4, otherwise 0]
    #[arg(long)]
    pub condition_shift: Option<f64>,
    /// Held-out evaluation speakers
    #[arg(long, default_value_t = 200)]
    pub eval_speakers: usize,
    #[arg(long, default_value_t = 6)]
    pub test_per_speaker: usize,
}
