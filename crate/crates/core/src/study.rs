//! The interference-robustness study end to end: one synthetic world, a
//! supervised starting policy, counterfactual and random-negative preference
//! pairs, and checkpoints trained from the same start.
//!
//! The building blocks are public so a command-line driver can run them one
//! stage at a time; [`run_study`] chains them in-process.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{
    mine_record, random_negative, synthesize_thinking_cf, CounterfactualError, CounterfactualSpec,
    Shortfall, VisualPool,
};
use crate::cpo::{train, Ablation, CpoError, PairKind, PreferencePair, TrainConfig};
use crate::graph::ConceptGraph;
use crate::policy::{FeatureMapConfig, PolicyError, PolicyParams, PolicySnapshot};
use crate::robustness::{eval_robustness, RobustnessError, RobustnessTable, DEFAULT_RATIOS};
use crate::seed::{derive_seed, stream};
use crate::supervised::{
    knowledge_head, train_mle, train_mle_for_steps, MleConfig, SupervisedError,
};
use crate::trace::{AttributeLexicon, Markers, TraceRecord};
use crate::world::{
    generate_records, generate_world, InjectionTarget, World, WorldConfig, WorldError,
};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("study has no {0}")]
    Empty(&'static str),
    #[error("context {0} is not among the records")]
    UnknownContext(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Supervised(#[from] SupervisedError),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Cpo(#[from] CpoError),
    #[error(transparent)]
    Robustness(#[from] RobustnessError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How the starting policy's prediction head is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    /// Weight on each visual attribute indicator.
    pub visual: f64,
    /// Weight spread over the tokens of each attribute name.
    pub token: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self {
            visual: 0.1,
            token: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairBudget {
    /// Thinking counterfactuals requested per record.
    pub counterfactuals_per_record: usize,
    pub max_substitutions: usize,
    /// Initial traces sampled per record for perception mining.
    pub mining_draws: usize,
    /// Visual neighbours retrieved per record.
    pub neighbours: usize,
    pub temperature: f64,
}

impl Default for PairBudget {
    fn default() -> Self {
        Self {
            counterfactuals_per_record: 2,
            max_substitutions: 2,
            mining_draws: 6,
            neighbours: 8,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    /// World layout; `records` is the training-set size.
    pub world: WorldConfig,
    pub eval_records: usize,
    pub sft: MleConfig,
    pub head: HeadWeights,
    pub pairs: PairBudget,
    pub train: TrainConfig,
    pub ratios: Vec<f64>,
    pub eval_seeds: Vec<u64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig {
                entities: 6,
                rho: 0.3,
                records: 300,
                ..WorldConfig::default()
            },
            eval_records: 200,
            sft: MleConfig {
                epochs: 3,
                ..MleConfig::default()
            },
            head: HeadWeights::default(),
            pairs: PairBudget::default(),
            train: TrainConfig {
                beta: 4.0,
                lr: 0.5,
                epochs: 10,
                batch_size: 16,
                window: 8,
                seed: 0,
                ablation: Ablation::Both,
            },
            ratios: DEFAULT_RATIOS.to_vec(),
            eval_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Feature map used for every policy trained on `world`: bigram context,
/// visual attribute indicators and a bias.
pub fn world_feature_map(world: &World) -> FeatureMapConfig {
    FeatureMapConfig::new(1, world.vocab.len(), world.attribute_ids(), true)
}

/// Maximum-likelihood fit of the token policy on gold traces followed by a
/// prediction head read off the concept graph.
pub fn supervised_policy(
    start: &PolicyParams,
    records: &[TraceRecord],
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
    mle: &MleConfig,
    head: HeadWeights,
) -> Result<PolicyParams, StudyError> {
    let (fitted, history) = train_mle(start, records, mle)?;
    if let Some(last) = history.last() {
        log::info!("supervised fit: final trace nll {last:.4}");
    }
    Ok(knowledge_head(
        &fitted,
        graph,
        lexicon,
        head.visual,
        head.token,
    ))
}

/// Thinking pairs with per-record bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ThinkingPairs {
    pub pairs: Vec<PreferencePair>,
    /// Records that yielded fewer counterfactuals than requested.
    pub shortfalls: Vec<(String, Shortfall)>,
    /// Records whose trace mentions no attribute.
    pub skipped: Vec<String>,
}

/// Graph-constrained thinking counterfactuals for every record, each paired
/// against the record's gold trace.
pub fn thinking_pairs(
    records: &[TraceRecord],
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
    spec: &CounterfactualSpec,
    rng: &mut impl Rng,
) -> Result<ThinkingPairs, StudyError> {
    let mut out = ThinkingPairs::default();
    for record in records {
        let synthesis = match synthesize_thinking_cf(record, graph, lexicon, spec, rng) {
            Ok(s) => s,
            Err(CounterfactualError::NoMentions(id)) => {
                out.skipped.push(id);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for candidate in synthesis.candidates {
            out.pairs
                .push(PreferencePair::thinking(record, candidate.trace)?);
        }
        if let Some(shortfall) = synthesis.shortfall {
            out.shortfalls.push((record.record_id.clone(), shortfall));
        }
    }
    Ok(out)
}

/// Perception hard negatives: for each record, `mining_draws` initial traces
/// are sampled from `policy` and matched against the record's visual
/// neighbourhood; every draw that some distractor explains better than the
/// true context becomes a pair.
pub fn perception_pairs(
    policy: &PolicyParams,
    records: &[TraceRecord],
    pool: &VisualPool,
    max_len: usize,
    budget: &PairBudget,
    rng: &mut impl Rng,
) -> Result<Vec<PreferencePair>, StudyError> {
    let mut pairs = Vec::new();
    for record in records {
        for _ in 0..budget.mining_draws {
            let Some(mined) = mine_record(
                policy,
                record,
                pool,
                budget.neighbours,
                max_len,
                budget.temperature,
                rng,
            )?
            else {
                continue;
            };
            if let Some(hard) = mined.outcome.hard_negative {
                pairs.push(PreferencePair::perception(
                    record,
                    hard.distractor,
                    mined.initial_trace,
                    Some(hard.margin),
                )?);
            }
        }
    }
    Ok(pairs)
}

/// One random-token negative per input pair, against the same chosen trace,
/// so the baseline trains on exactly as many pairs.
pub fn random_negative_pairs(
    pairs: &[PreferencePair],
    records: &[TraceRecord],
    vocab_size: usize,
    markers: Markers,
    rng: &mut impl Rng,
) -> Result<Vec<PreferencePair>, StudyError> {
    pairs
        .iter()
        .map(|p| {
            let record = records
                .iter()
                .find(|r| r.record_id == p.context)
                .ok_or_else(|| StudyError::UnknownContext(p.context.clone()))?;
            let negative = random_negative(&p.chosen, vocab_size, markers, rng)?;
            Ok(PreferencePair::thinking(record, negative)?)
        })
        .collect()
}

/// Evaluation records drawn from the world's generator on their own stream.
/// Record and visual ids carry an `eval-` prefix so they never collide with
/// training ids.
pub fn held_out_records(
    world: &World,
    count: usize,
    seed: u64,
) -> Result<Vec<TraceRecord>, StudyError> {
    let eval_world = World {
        config: WorldConfig {
            records: count,
            ..world.config.clone()
        },
        ..world.clone()
    };
    Ok(
        generate_records(&eval_world, &mut stream(seed, "eval-records"))?
            .into_iter()
            .map(|g| {
                let mut r = g.record;
                r.record_id = format!("eval-{}", r.record_id);
                r.visual.id = format!("eval-{}", r.visual.id);
                r
            })
            .collect(),
    )
}

/// Everything the training arms share.
#[derive(Debug, Clone)]
pub struct StudyData {
    pub world: World,
    pub train_records: Vec<TraceRecord>,
    pub eval_records: Vec<TraceRecord>,
    pub start: PolicyParams,
    /// Thinking pairs followed by perception pairs.
    pub pairs: Vec<PreferencePair>,
    pub random_pairs: Vec<PreferencePair>,
}

impl StudyData {
    pub fn count(&self, kind: PairKind) -> usize {
        self.pairs.iter().filter(|p| p.kind() == kind).count()
    }
}

pub fn prepare_study(config: &StudyConfig) -> Result<StudyData, StudyError> {
    let seed = config.seed;
    let world = generate_world(&config.world, &mut stream(seed, "world"))?;
    let train_records: Vec<TraceRecord> = generate_records(&world, &mut stream(seed, "records"))?
        .into_iter()
        .map(|g| g.record)
        .collect();
    if train_records.is_empty() {
        return Err(StudyError::Empty("training records"));
    }
    let eval_records = held_out_records(&world, config.eval_records, seed)?;
    let zero = PolicyParams::zeros(world_feature_map(&world), world.markers(), world.labels())?;
    let sft = MleConfig {
        seed: derive_seed(seed, "sft"),
        ..config.sft.clone()
    };
    let start = supervised_policy(
        &zero,
        &train_records,
        &world.graph,
        &world.lexicon,
        &sft,
        config.head,
    )?;
    let spec = CounterfactualSpec {
        n: config.pairs.counterfactuals_per_record,
        max_substitutions: config.pairs.max_substitutions,
        category: None,
        seed,
    };
    let mut pairs = thinking_pairs(
        &train_records,
        &world.graph,
        &world.lexicon,
        &spec,
        &mut stream(seed, "synthesis"),
    )?
    .pairs;
    let pool = VisualPool::new(train_records.iter().map(|r| r.visual.clone()).collect())?;
    pairs.extend(perception_pairs(
        &start,
        &train_records,
        &pool,
        world.config.max_len,
        &config.pairs,
        &mut stream(seed, "mining"),
    )?);
    let random_pairs = random_negative_pairs(
        &pairs,
        &train_records,
        world.vocab.len(),
        world.markers(),
        &mut stream(seed, "random-negatives"),
    )?;
    Ok(StudyData {
        world,
        train_records,
        eval_records,
        start,
        pairs,
        random_pairs,
    })
}

/// A way of continuing from the shared starting policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// More likelihood training on gold traces.
    MaxLikelihood,
    /// Preference training against random-token negatives.
    RandomNegatives,
    /// Preference training on counterfactual pairs under an ablation switch.
    Counterfactual(Ablation),
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::MaxLikelihood => "max_likelihood",
            Arm::RandomNegatives => "random_negatives",
            Arm::Counterfactual(Ablation::Both) => "cpo_both",
            Arm::Counterfactual(Ablation::ThinkingOnly) => "cpo_thinking_only",
            Arm::Counterfactual(Ablation::PerceptionOnly) => "cpo_perception_only",
            Arm::Counterfactual(Ablation::None) => "cpo_none",
        }
    }
}

/// Preference steps taken by the full counterfactual arm; the likelihood and
/// random-negative arms are held to the same count.
pub fn reference_steps(data: &StudyData, train: &TrainConfig) -> usize {
    train.epochs * data.pairs.len().div_ceil(train.batch_size.max(1))
}

pub fn train_arm(
    data: &StudyData,
    config: &StudyConfig,
    arm: Arm,
) -> Result<PolicyParams, StudyError> {
    let reference = PolicySnapshot::freeze(&data.start);
    let train_config = TrainConfig {
        seed: derive_seed(config.seed, "training"),
        ..config.train.clone()
    };
    let trained = match arm {
        Arm::MaxLikelihood => {
            let mle = MleConfig {
                lr: config.sft.lr,
                batch_size: config.train.batch_size,
                seed: derive_seed(config.seed, "likelihood-arm"),
                ..config.sft.clone()
            };
            let steps = reference_steps(data, &config.train);
            train_mle_for_steps(&data.start, &data.train_records, &mle, steps)?.0
        }
        Arm::RandomNegatives => {
            train(&data.start, &reference, &data.random_pairs, &train_config)?.0
        }
        Arm::Counterfactual(ablation) => {
            let cfg = TrainConfig {
                ablation,
                ..train_config
            };
            train(&data.start, &reference, &data.pairs, &cfg)?.0
        }
    };
    Ok(trained)
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub checkpoints: Vec<(String, PolicyParams)>,
    pub table: RobustnessTable,
    pub thinking_pairs: usize,
    pub perception_pairs: usize,
    pub steps: usize,
}

impl StudyOutcome {
    /// Mean accuracy drop of an arm from the lowest to the highest ratio.
    pub fn drop(&self, arm: Arm, from: f64, to: f64) -> Option<f64> {
        self.table.mean_drop(arm.name(), from, to)
    }

    pub fn checkpoint(&self, arm: Arm) -> Option<&PolicyParams> {
        self.checkpoints
            .iter()
            .find(|(n, _)| n == arm.name())
            .map(|(_, p)| p)
    }
}

/// Trains every arm from the shared start and sweeps interference ratios on
/// the held-out records. The starting policy is reported as `start`.
pub fn run_study(config: &StudyConfig, arms: &[Arm]) -> Result<StudyOutcome, StudyError> {
    if arms.is_empty() {
        return Err(StudyError::Empty("training arms"));
    }
    let data = prepare_study(config)?;
    let mut checkpoints = vec![("start".to_string(), data.start.clone())];
    for &arm in arms {
        log::info!("training arm {}", arm.name());
        checkpoints.push((arm.name().to_string(), train_arm(&data, config, arm)?));
    }
    let table = eval_robustness(
        &checkpoints,
        &data.eval_records,
        &data.world.graph,
        &data.world.lexicon,
        &config.ratios,
        &config.eval_seeds,
        InjectionTarget::Trace,
    )?;
    Ok(StudyOutcome {
        checkpoints,
        table,
        thinking_pairs: data.count(PairKind::ThinkingCf),
        perception_pairs: data.count(PairKind::PerceptionCf),
        steps: reference_steps(&data, &config.train),
    })
}
