use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "seedformer", version, about = "Point cloud completion: train, complete, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset of partial/complete shape pairs.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Complete one partial cloud with a trained model.
    Complete(CompleteArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train a generator or attention variant with otherwise identical settings.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub train: usize,
    #[arg(long, default_value_t = 16)]
    pub test: usize,
    #[arg(long, default_value_t = 512)]
    pub gt_points: usize,
    #[arg(long, default_value_t = 512)]
    pub partial_points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Flat `key = value` settings file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding a `train` split.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path. The loss log and resolved config go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seeds both model initialization and sample order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Loss log path (default: `loss.csv` beside the checkpoint).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Resume from this checkpoint, including optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Directory for per-stage clouds, seeds and the seed provenance table.
    #[arg(long)]
    pub export_stages: Option<PathBuf>,
    #[arg(long)]
    pub export_seeds: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["ckpt", "predictions"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Score precomputed `<id>.xyz` predictions instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_delimiter = ',', default_value = "cd-l1,cd-l2,fscore")]
    pub metrics: Vec<String>,
    /// Directory of reference clouds for the minimal matching distance.
    #[arg(long)]
    pub mmd_library: Option<PathBuf>,
    /// F-Score distance; defaults to 1% of each ground truth's bbox diagonal.
    #[arg(long)]
    pub fscore_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Run only this case.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// List case names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub generator: String,
    #[arg(long, default_value = "softmax")]
    pub attention: String,
    /// Scale for `--attention scaled`.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a, None),
        Command::Complete(a) => commands::complete(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
