use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dmlm", version, about = "Discrete multimodal language model recipes")]
pub struct Cli {
    /// Worker threads for evaluation, clustering and search.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a token-space manifest (tokenspace.json).
    Manifest(ManifestArgs),
    /// Generate synthetic train/dev/test datasets (80/10/10).
    SynthData(SynthArgs),
    /// Codebook fitting, assignment and inertia.
    #[command(subcommand)]
    Codebook(CodebookCommand),
    /// Same as `codebook fit`.
    CodebookFit(CodebookFitArgs),
    /// Same as `codebook assign`.
    CodebookAssign(CodebookAssignArgs),
    /// Same as `codebook inertia`.
    CodebookInertia(CodebookInertiaArgs),
    /// Train a text-only language model from random weights.
    Pretrain(PretrainArgs),
    /// Grow a pretrained model's vocabulary to a larger token space.
    Extend(ExtendArgs),
    /// Train from a JSON training config.
    Train(TrainArgs),
    /// Random search over the speech and text loss weights.
    LambdaSearch(SearchArgs),
    /// Greedy decoding for a task.
    Generate(GenerateArgs),
    /// Decode a dataset and score it.
    Evaluate(EvaluateArgs),
    /// Tabulate search results or training logs (text and CSV).
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum CodebookCommand {
    Fit(CodebookFitArgs),
    Assign(CodebookAssignArgs),
    Inertia(CodebookInertiaArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    /// Seed for every random choice the command makes.
    #[arg(long, env = "DMLM_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct OutArg {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SpaceArgs {
    /// Text vocabulary size (characters of the alphabet).
    #[arg(long, default_value_t = 30)]
    pub text: u32,
    /// Speech vocabulary size.
    #[arg(long, default_value_t = 64)]
    pub speech: u32,
    /// Image vocabulary size.
    #[arg(long, default_value_t = 0)]
    pub image: u32,
    /// Alphabet override; defaults to lowercase letters, space, apostrophe, digits.
    #[arg(long)]
    pub alphabet: Option<String>,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[command(flatten)]
    pub space: SpaceArgs,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// asr, t2s, s2tt, i2t or lm.
    #[arg(long)]
    pub task: String,
    /// Total examples before the split.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Speech tokens per character.
    #[arg(long, default_value_t = 3)]
    pub codec_k: usize,
    /// Per-token substitution probability of the codec.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Reuse an existing codec table (its noise is replaced by --noise).
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Seed of a new codec table; defaults to --seed.
    #[arg(long)]
    pub codec_seed: Option<u64>,
    /// Letter distribution of the lexicon: a or b.
    #[arg(long, default_value = "a")]
    pub domain: String,
    #[arg(long, default_value_t = 48)]
    pub lexicon_size: usize,
    /// Seed of the lexicon; keep fixed to share words across datasets.
    #[arg(long, default_value_t = 0)]
    pub lexicon_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub min_words: usize,
    #[arg(long, default_value_t = 3)]
    pub max_words: usize,
    /// Content of lm examples: text or speech.
    #[arg(long, default_value = "text")]
    pub lm_modality: String,
    /// Existing manifest; otherwise one is built from the size flags.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub space: SpaceArgs,
    /// Emit frame features of this family (label_clustered or label_agnostic)
    /// with per-split transcripts instead of codec speech.
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub frames_per_char: usize,
    /// Seed of the per-character feature prototypes.
    #[arg(long, default_value_t = 0)]
    pub prototype_seed: u64,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct CodebookFitArgs {
    /// Feature files or directories of `.feat` files (one per utterance).
    #[arg(long, required = true, num_args = 1..)]
    pub features: Vec<PathBuf>,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub minibatch_utterances: usize,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    /// Standardize each dimension before clustering.
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value = "features")]
    pub source: String,
    #[arg(long, default_value = "train")]
    pub data_tag: String,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct CodebookAssignArgs {
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub features: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Text runs (one per feature file); writes an ASR dataset instead of token runs.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    /// Output file stem.
    #[arg(long, default_value = "assigned")]
    pub name: String,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct CodebookInertiaArgs {
    #[arg(long)]
    pub codebook: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub features: Vec<PathBuf>,
    /// Also write inertia.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 256)]
    pub max_seq_len: usize,
    /// Separate output projection instead of the tied embedding.
    #[arg(long)]
    pub untied: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Text-only manifest; otherwise built from --text with no speech or image.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub text: u32,
    /// Unsupervised text dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ExtendArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub base_manifest: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON); relative data paths resolve against its directory.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Starting checkpoint; random weights from the model flags otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Codec for scoring speech outputs.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Overrides the config seed; falls back to DMLM_SEED.
    #[arg(long, env = "DMLM_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda_speech_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_speech_max: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda_text_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_text_max: f64,
    /// Skip the fixed (1, 1) and (0, 1) comparison rows.
    #[arg(long)]
    pub no_baselines: bool,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// asr, t2s, s2tt or i2t.
    #[arg(long)]
    pub task: String,
    /// Token runs (JSONL), one prompt per line.
    #[arg(long, conflicts_with = "text")]
    pub input: Option<PathBuf>,
    /// A single text prompt.
    #[arg(long)]
    pub text: Option<String>,
    /// Codec for rendering speech outputs as text.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Allow tokens outside the target modality.
    #[arg(long)]
    pub unconstrained: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// WER, CER, BLEU4 or Loss.
    #[arg(long, default_value = "WER")]
    pub metric: String,
    #[arg(long)]
    pub codec: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Score at most this many examples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Disable add-one smoothing of BLEU.
    #[arg(long)]
    pub no_smoothing: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Search reports (.json) or training logs (.jsonl).
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}
