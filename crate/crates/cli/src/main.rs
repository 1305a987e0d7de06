mod commands;
mod config;
mod mlfb;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use mlnet::{FrontendConfig, ModelConfig, TrainConfig, Variant};

/// Frame-level voice activity detection with multi-receptive-field attention.
#[derive(Parser, Debug)]
#[command(name = "mlnet", version)]
struct Cli {
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    /// key=value file of flags for the subcommand; explicit flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Synthesize a labeled noisy corpus (or mix your own clean and noise WAVs)
    Mix(MixArgs),
    /// Dump log-mel features of a WAV file as MLFB
    Featurize(FeaturizeArgs),
    /// Train a model on the train split of a manifest
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest
    Eval(EvalArgs),
    /// Per-frame speech probabilities for one WAV file
    Predict(PredictArgs),
    /// Train and score all four model variants on the same corpus
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct FrontendArgs {
    /// Mel bands per frame
    #[arg(long, default_value_t = 40)]
    pub n_mels: usize,
    /// Pre-emphasis coefficient
    #[arg(long, default_value_t = 0.97)]
    pub preemphasis: f64,
    /// Normalize each mel band to zero mean, unit variance per recording
    #[arg(long)]
    pub normalize: bool,
}

impl FrontendArgs {
    pub fn to_config(&self) -> FrontendConfig {
        FrontendConfig {
            n_mels: self.n_mels,
            preemphasis: self.preemphasis,
            normalize: self.normalize,
            ..FrontendConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model variant
    #[arg(long, default_value = "full_attention", value_parser = parse_variant)]
    pub variant: Variant,
    /// Context half-widths r of the branches (window 2r+1 frames)
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
    pub receptive_fields: Vec<usize>,
    /// Width of each gated affine branch
    #[arg(long, default_value_t = 64)]
    pub gated_dim: usize,
    /// Hidden width of the attention network
    #[arg(long, default_value_t = 64)]
    pub attn_hidden: usize,
    /// Hidden units per LSTM direction
    #[arg(long, default_value_t = 64)]
    pub lstm_hidden: usize,
    /// Stacked bidirectional LSTM layers
    #[arg(long, default_value_t = 2)]
    pub lstm_layers: usize,
    /// Width of the fully connected layer before the output
    #[arg(long, default_value_t = 64)]
    pub fc_hidden: usize,
    /// Normalize attention scores after one sigmoid instead of two
    #[arg(long)]
    pub single_sigmoid: bool,
}

impl ModelArgs {
    pub fn to_config(&self, n_mels: usize) -> ModelConfig {
        ModelConfig {
            receptive_fields: self.receptive_fields.clone(),
            n_mels,
            gated_dim: self.gated_dim,
            attn_hidden: self.attn_hidden,
            lstm_hidden: self.lstm_hidden,
            lstm_layers: self.lstm_layers,
            fc_hidden: self.fc_hidden,
            variant: self.variant,
            double_sigmoid: !self.single_sigmoid,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    /// Adam learning rate
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Utterances per mini-batch
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Training epochs
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    /// Weight of the attention loss
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Gradients are clipped element-wise to [-clip, clip]
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Seed for initialization and batch order
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decision threshold for dev scoring
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
}

impl OptimArgs {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            clip_lo: -self.clip,
            clip_hi: self.clip,
            attention_loss_weight: self.lambda,
            seed: self.seed,
            theta: self.theta,
            ..TrainConfig::default()
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct MixArgs {
    /// Output directory for WAVs, masks and manifest.tsv
    #[arg(long, default_value = "corpus")]
    pub out: PathBuf,
    /// Number of synthetic utterances
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Corpus seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lowest mixing SNR in dB
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    pub snr_min: f64,
    /// Highest mixing SNR in dB
    #[arg(long, default_value_t = 20.0, allow_negative_numbers = true)]
    pub snr_max: f64,
    /// Seconds of silence added before and after each utterance
    #[arg(long, default_value_t = 2.0)]
    pub silence_pad: f64,
    /// Fraction of the non-eval utterances tagged train; the rest are dev
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    /// Utterances tagged eval (held out from train and dev)
    #[arg(long, default_value_t = 0)]
    pub n_eval: u64,
    /// Clean speech WAVs to mix instead of synthesizing (replaces --n)
    #[arg(long, num_args = 1.., value_name = "WAV")]
    pub clean: Vec<PathBuf>,
    /// Noise WAVs drawn at random for each clean file
    #[arg(long, num_args = 1.., value_name = "WAV", requires = "clean")]
    pub noise: Vec<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct FeaturizeArgs {
    /// Input 16-bit mono WAV
    #[arg(long)]
    pub wav: PathBuf,
    /// Output MLFB file
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub frontend: FrontendArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Corpus manifest written by `mix`
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for checkpoints, train.log and run.json
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub frontend: FrontendArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Eval,
}

impl From<SplitArg> for mlnet::corpus::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Dev => Self::Dev,
            SplitArg::Eval => Self::Eval,
        }
    }
}

/// Expected model settings; any that are given must match the checkpoint.
#[derive(Args, Debug, Clone, Default)]
pub struct ExpectArgs {
    /// Expected model variant
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Expected branch half-widths
    #[arg(long, value_delimiter = ',')]
    pub receptive_fields: Option<Vec<usize>>,
    /// Expected gated branch width
    #[arg(long)]
    pub gated_dim: Option<usize>,
    /// Expected attention hidden width
    #[arg(long)]
    pub attn_hidden: Option<usize>,
    /// Expected LSTM hidden units
    #[arg(long)]
    pub lstm_hidden: Option<usize>,
    /// Expected LSTM layers
    #[arg(long)]
    pub lstm_layers: Option<usize>,
    /// Expected fully connected width
    #[arg(long)]
    pub fc_hidden: Option<usize>,
}

impl ExpectArgs {
    /// `found` with every given field overwritten; `None` if nothing was given.
    pub fn apply(&self, found: &ModelConfig) -> Option<ModelConfig> {
        let mut cfg = found.clone();
        let mut any = false;
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                    any = true;
                }
            };
        }
        set!(variant);
        set!(receptive_fields);
        set!(gated_dim);
        set!(attn_hidden);
        set!(lstm_hidden);
        set!(lstm_layers);
        set!(fc_hidden);
        any.then_some(cfg)
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model checkpoint (.mlnt)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest split to score
    #[arg(long, value_enum, default_value = "dev")]
    pub split: SplitArg,
    /// Decision threshold on the speech probability
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    /// Score the reference labels themselves instead of model output
    #[arg(long)]
    pub oracle_labels: bool,
    /// Also report metrics on frame counts pooled over all recordings
    #[arg(long)]
    pub micro: bool,
    /// Write PREFIX.tsv and PREFIX.json
    #[arg(long, value_name = "PREFIX")]
    pub out: Option<PathBuf>,
    /// Frontend used when no run.json sits beside the checkpoint
    #[command(flatten)]
    pub frontend: FrontendArgs,
    #[command(flatten)]
    pub expect: ExpectArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct PredictArgs {
    /// Input 16-bit mono WAV
    #[arg(long)]
    pub wav: PathBuf,
    /// Model checkpoint (.mlnt)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Decision threshold on the speech probability
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    /// Append the per-branch attention weights to every line
    #[arg(long)]
    pub dump_attention: bool,
    /// Frontend used when no run.json sits beside the checkpoint
    #[command(flatten)]
    pub frontend: FrontendArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Units {
    Percent,
    Fraction,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Keep each variant's checkpoints under DIR/<variant>
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Units of the reported metrics
    #[arg(long, value_enum, default_value = "percent")]
    pub units: Units,
    #[command(flatten)]
    pub frontend: FrontendArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Usage and configuration problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub trait OrUsage<T> {
    fn or_usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrUsage<T> for Result<T, E> {
    fn or_usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn main() -> ExitCode {
    let raw: Vec<_> = std::env::args_os().collect();
    let args = match config::expand(raw, &Cli::command()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.cmd {
        Cmd::Mix(a) => commands::mix(&a),
        Cmd::Featurize(a) => commands::featurize(&a),
        Cmd::Train(a) => commands::train(&a),
        Cmd::Eval(a) => commands::eval(&a),
        Cmd::Predict(a) => commands::predict(&a),
        Cmd::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
