use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cpodrift::cpo::Ablation;
use cpodrift::drift::Divergence;
use cpodrift::world::InjectionTarget;

#[derive(Debug, Parser)]
#[command(
    name = "cpodrift",
    version,
    about = "Reasoning-drift analysis and counterfactual preference training"
)]
pub struct Cli {
    /// Output directory for artifacts and the run manifest.
    #[arg(
        long,
        global = true,
        env = "DRIFTCPO_OUT",
        default_value = "cpodrift-out"
    )]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Load a concept graph and report counts and warnings.
    GraphValidate(GraphValidateArgs),
    /// Generate a synthetic world: graph, vocabulary, gold records.
    GenWorld(GenWorldArgs),
    /// Fit a starting policy on gold traces with a graph-derived head.
    Sft(SftArgs),
    /// Synthesize graph-constrained thinking counterfactual pairs.
    SynthCf(SynthCfArgs),
    /// Mine perception hard negatives with a policy checkpoint.
    MineVisual(MineVisualArgs),
    /// Divergence series and drift events for every record.
    DriftReport(DriftReportArgs),
    /// Swap one attribute mention and compare the two cognitive streams.
    Probe(ProbeArgs),
    /// Preference training on pair files.
    Train(TrainArgs),
    /// Accuracy of checkpoints under increasing reasoning interference.
    EvalRobustness(EvalRobustnessArgs),
    /// Run the full arm comparison on one generated world.
    Study(StudyArgs),
    /// Re-run the command recorded in a manifest and compare output digests.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GraphValidate(_) => "graph-validate",
            Command::GenWorld(_) => "gen-world",
            Command::Sft(_) => "sft",
            Command::SynthCf(_) => "synth-cf",
            Command::MineVisual(_) => "mine-visual",
            Command::DriftReport(_) => "drift-report",
            Command::Probe(_) => "probe",
            Command::Train(_) => "train",
            Command::EvalRobustness(_) => "eval-robustness",
            Command::Study(_) => "study",
            Command::Replay(_) => "replay",
        }
    }
}

/// Record file plus the vocabulary that declares its markers.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RecordInput {
    /// Line-delimited trace records.
    #[arg(long)]
    pub records: PathBuf,
    /// Vocabulary file; defaults to vocab.txt beside the records.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GraphValidateArgs {
    #[arg(long)]
    pub graph: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenWorldArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub entities: usize,
    #[arg(long, default_value_t = 3)]
    pub attributes_per_entity: usize,
    #[arg(long, default_value_t = 4)]
    pub categories: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2)]
    pub drift_states: usize,
    #[arg(long, default_value_t = 0.3)]
    pub rho: f64,
    /// Training records.
    #[arg(long = "num-records", default_value_t = 200)]
    pub records: usize,
    /// Held-out records written to eval.jsonl; none when 0.
    #[arg(long, default_value_t = 0)]
    pub eval_records: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SftArgs {
    #[command(flatten)]
    pub input: RecordInput,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Head weight on each visual attribute indicator.
    #[arg(long, default_value_t = 0.1)]
    pub head_visual_weight: f64,
    /// Head weight spread over each attribute name's tokens.
    #[arg(long, default_value_t = 40.0)]
    pub head_token_weight: f64,
    /// Preceding tokens one-hot encoded in the policy features.
    #[arg(long, default_value_t = 1)]
    pub context_window: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthCfArgs {
    #[command(flatten)]
    pub input: RecordInput,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Counterfactuals requested per record.
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub max_substitutions: usize,
    /// Only substitute mentions in this category.
    #[arg(long)]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MineVisualArgs {
    #[command(flatten)]
    pub input: RecordInput,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Visual neighbours retrieved per record.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Initial traces sampled per record.
    #[arg(long, default_value_t = 6)]
    pub draws: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceArg {
    Tv,
    Kl,
}

impl From<DivergenceArg> for Divergence {
    fn from(d: DivergenceArg) -> Self {
        match d {
            DivergenceArg::Tv => Divergence::TotalVariation,
            DivergenceArg::Kl => Divergence::SymmetricKl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DriftArgs {
    #[arg(long, value_enum, default_value_t = DivergenceArg::Tv)]
    pub divergence: DivergenceArg,
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
    /// Localization window τ recorded with the report.
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    /// Leading attention entries masked before comparison. Defaults to 10
    /// for recorded attention and 0 for frames computed from a checkpoint.
    #[arg(long)]
    pub sink_mask: Option<usize>,
    #[arg(long, default_value_t = 1e-9)]
    pub smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DriftReportArgs {
    #[command(flatten)]
    pub input: RecordInput,
    /// Policy used for records without recorded states or attention.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub drift: DriftArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub input: RecordInput,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub record_id: String,
    /// Index of the mention to replace, in trace order.
    #[arg(long, default_value_t = 0)]
    pub mention: usize,
    /// Replacement attribute id; defaults to the first member of the
    /// mention's substitution set.
    #[arg(long)]
    pub replacement: Option<String>,
    #[command(flatten)]
    pub drift: DriftArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArg {
    Both,
    Thinking,
    Perception,
    None,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Both => Ablation::Both,
            AblationArg::Thinking => Ablation::ThinkingOnly,
            AblationArg::Perception => Ablation::PerceptionOnly,
            AblationArg::None => Ablation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: RecordInput,
    /// Starting policy.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frozen reference policy; defaults to the starting policy.
    #[arg(long)]
    pub ref_checkpoint: Option<PathBuf>,
    /// Pair files; repeat to combine thinking and perception pairs.
    #[arg(long, required = true)]
    pub pairs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Records per shuffling window.
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    #[arg(long, value_enum, default_value_t = AblationArg::Both)]
    pub ablation: AblationArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetArg {
    Trace,
    Prompt,
}

impl From<TargetArg> for InjectionTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Trace => InjectionTarget::Trace,
            TargetArg::Prompt => InjectionTarget::Prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalRobustnessArgs {
    #[command(flatten)]
    pub input: RecordInput,
    #[arg(long)]
    pub graph: PathBuf,
    /// `name=path` or a bare path (named by its file stem); repeatable.
    #[arg(long, required = true)]
    pub checkpoint: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8])]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = TargetArg::Trace)]
    pub target: TargetArg,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StudyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "num-records", default_value_t = 300)]
    pub records: usize,
    #[arg(long, default_value_t = 200)]
    pub eval_records: usize,
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8])]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
}
