//! Preference optimization against a frozen reference policy.
//!
//! For a pair with chosen trace `t⁺` and rejected side `t⁻` the reward margin
//! is `β·[(log π(t⁺) − log π_ref(t⁺)) − (log π(t⁻) − log π_ref(t⁻))]` and the
//! pair loss is `−log σ(margin)`. Perception pairs score the rejected side as
//! the policy's initial trace under a distractor visual context.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::policy::{PolicyError, PolicyParams, PolicySnapshot};
use crate::seed::stream;
use crate::trace::{Markers, ThinkingTrace, TokenId, TraceError, TraceRecord, VisualContext};

#[derive(Debug, thiserror::Error)]
pub enum CpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("no preference pairs left after the {0:?} ablation filter")]
    NoPairsAfterFilter(Ablation),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid preference pair: {0}")]
    InvalidPair(String),
    #[error("line {line}: {message}")]
    PairFile { line: usize, message: String },
    #[error("non-finite parameters after step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    ThinkingCf,
    PerceptionCf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rejected {
    /// A counterfactual trace under the original context.
    Thinking(ThinkingTrace),
    /// The policy's own initial trace under a distractor context.
    Perception {
        distractor: VisualContext,
        trace: ThinkingTrace,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    /// Record id of the context.
    pub context: String,
    pub visual: VisualContext,
    pub prompt: Vec<TokenId>,
    pub chosen: ThinkingTrace,
    pub rejected: Rejected,
    /// Mining margin for perception pairs.
    pub margin: Option<f64>,
}

impl PreferencePair {
    pub fn thinking(record: &TraceRecord, rejected: ThinkingTrace) -> Result<Self, CpoError> {
        if rejected == record.trace {
            return Err(CpoError::InvalidPair(
                "rejected trace equals the chosen trace".into(),
            ));
        }
        Ok(Self {
            context: record.record_id.clone(),
            visual: record.visual.clone(),
            prompt: record.prompt.clone(),
            chosen: record.trace.clone(),
            rejected: Rejected::Thinking(rejected),
            margin: None,
        })
    }

    pub fn perception(
        record: &TraceRecord,
        distractor: VisualContext,
        trace: ThinkingTrace,
        margin: Option<f64>,
    ) -> Result<Self, CpoError> {
        if distractor.id == record.visual.id || distractor.attributes == record.visual.attributes {
            return Err(CpoError::InvalidPair(
                "distractor must differ from the original context".into(),
            ));
        }
        Ok(Self {
            context: record.record_id.clone(),
            visual: record.visual.clone(),
            prompt: record.prompt.clone(),
            chosen: record.trace.clone(),
            rejected: Rejected::Perception { distractor, trace },
            margin,
        })
    }

    pub fn kind(&self) -> PairKind {
        match self.rejected {
            Rejected::Thinking(_) => PairKind::ThinkingCf,
            Rejected::Perception { .. } => PairKind::PerceptionCf,
        }
    }

    /// Visual context and trace scored on the rejected side.
    pub fn rejected_side(&self) -> (&VisualContext, &ThinkingTrace) {
        match &self.rejected {
            Rejected::Thinking(t) => (&self.visual, t),
            Rejected::Perception { distractor, trace } => (distractor, trace),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Both,
    #[serde(alias = "thinking")]
    ThinkingOnly,
    #[serde(alias = "perception")]
    PerceptionOnly,
    None,
}

impl Ablation {
    pub fn keeps(self, kind: PairKind) -> bool {
        match self {
            Ablation::Both => true,
            Ablation::ThinkingOnly => kind == PairKind::ThinkingCf,
            Ablation::PerceptionOnly => kind == PairKind::PerceptionCf,
            Ablation::None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Records per shuffling window.
    pub window: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 0.5,
            epochs: 10,
            batch_size: 8,
            window: 4,
            seed: 0,
            ablation: Ablation::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CpoError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CpoError::InvalidConfig("beta must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CpoError::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.window == 0 {
            return Err(CpoError::InvalidConfig(
                "batch size and window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub mean_margin: f64,
    /// Fraction of pairs with a strictly positive margin.
    pub reward_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    #[serde(flatten)]
    pub stats: LossStats,
    pub steps: usize,
}

/// `log π(t⁺) − log π_ref(t⁺)` and the same for the rejected side.
fn log_ratios(
    params: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
) -> Result<(f64, f64), CpoError> {
    let pos = params.sequence_logprob(&pair.visual, &pair.prompt, &pair.chosen)?
        - reference.sequence_logprob(&pair.visual, &pair.prompt, &pair.chosen)?;
    let (v, t) = pair.rejected_side();
    let neg = params.sequence_logprob(v, &pair.prompt, t)?
        - reference.sequence_logprob(v, &pair.prompt, t)?;
    Ok((pos, neg))
}

pub fn reward_margin(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, CpoError> {
    let (pos, neg) = log_ratios(params, reference, pair)?;
    Ok(beta * (pos - neg))
}

/// `−log σ(m)`, evaluated without overflow.
pub fn pair_loss(margin: f64) -> f64 {
    if margin >= 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean pair loss over the batch and its gradient with respect to the token
/// weights. Pairs are reduced in batch order.
pub fn cpo_loss_and_grad(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<(LossStats, Matrix), CpoError> {
    if batch.is_empty() {
        return Err(CpoError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grad = Matrix::zeros(params.token_weights.rows(), params.token_weights.cols());
    let mut loss = 0.0;
    let mut margin_sum = 0.0;
    let mut positive = 0usize;
    for pair in batch {
        let margin = reward_margin(params, reference, pair, beta)?;
        loss += pair_loss(margin);
        margin_sum += margin;
        positive += usize::from(margin > 0.0);
        // d/dθ of −log σ(m) is −σ(−m)·∂m/∂θ, ∂m/∂θ = β(∇log π(t⁺) − ∇log π(t⁻)).
        let coeff = -beta * sigmoid(-margin) / n;
        params.accumulate_grad_sequence_logprob(
            &pair.visual,
            &pair.prompt,
            &pair.chosen,
            coeff,
            &mut grad,
        )?;
        let (v, t) = pair.rejected_side();
        params.accumulate_grad_sequence_logprob(v, &pair.prompt, t, -coeff, &mut grad)?;
    }
    Ok((
        LossStats {
            loss: loss / n,
            mean_margin: margin_sum / n,
            reward_accuracy: positive as f64 / n,
        },
        grad,
    ))
}

/// Orders pairs for one epoch: grouped by context record in order of first
/// appearance, cut into windows of `window` records, shuffled within each
/// window.
fn windowed_order(
    pairs: &[&PreferencePair],
    window: usize,
    rng: &mut impl rand::Rng,
) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let g = *group_of.entry(p.context.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let mut order = Vec::with_capacity(pairs.len());
    for chunk in groups.chunks(window) {
        let mut block: Vec<usize> = chunk.iter().flatten().copied().collect();
        block.shuffle(rng);
        order.extend(block);
    }
    order
}

/// Plain gradient descent on the preference loss. `reference` is never
/// updated.
pub fn train(
    params: &PolicyParams,
    reference: &PolicySnapshot,
    pairs: &[PreferencePair],
    config: &TrainConfig,
) -> Result<(PolicyParams, Vec<EpochStats>), CpoError> {
    config.validate()?;
    let kept: Vec<&PreferencePair> = pairs
        .iter()
        .filter(|p| config.ablation.keeps(p.kind()))
        .collect();
    if kept.is_empty() {
        return Err(CpoError::NoPairsAfterFilter(config.ablation));
    }
    let mut current = params.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut rng = stream(config.seed, "training");
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = windowed_order(&kept, config.window, &mut rng);
        let mut totals = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<PreferencePair> = batch_idx.iter().map(|&i| kept[i].clone()).collect();
            let (stats, grad) = cpo_loss_and_grad(&current, reference, &batch, config.beta)?;
            let w = batch.len() as f64;
            totals.0 += stats.loss * w;
            totals.1 += stats.mean_margin * w;
            totals.2 += stats.reward_accuracy * w;
            current.token_weights.axpy(-config.lr, &grad);
            step += 1;
            steps += 1;
            if !current.token_weights.is_finite() {
                return Err(CpoError::Diverged(step));
            }
        }
        let n = kept.len() as f64;
        let stats = LossStats {
            loss: totals.0 / n,
            mean_margin: totals.1 / n,
            reward_accuracy: totals.2 / n,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} margin {:.6} accuracy {:.3}",
            stats.loss,
            stats.mean_margin,
            stats.reward_accuracy
        );
        history.push(EpochStats {
            epoch,
            stats,
            steps,
        });
    }
    Ok((current, history))
}

/// Identifier of a generator drift state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DriftState(pub usize);

/// Per-label counterfactual effect of replacing `t_prime` with `t`, holding
/// the policy, visual context and drift state fixed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualEffect {
    pub drift_state: DriftState,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

pub fn estimate_psi(
    policy: &PolicyParams,
    v: &VisualContext,
    prompt: &[TokenId],
    t: &ThinkingTrace,
    t_prime: &ThinkingTrace,
    drift_state: DriftState,
) -> Result<CounterfactualEffect, CpoError> {
    let z = policy.predict_label(v, prompt, t.tokens())?;
    let z_prime = policy.predict_label(v, prompt, t_prime.tokens())?;
    Ok(CounterfactualEffect {
        drift_state,
        labels: policy.labels.clone(),
        values: z.iter().zip(&z_prime).map(|(a, b)| a - b).collect(),
    })
}

pub const PAIR_FILE_FORMAT: &str = "cpodrift-pairs";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairHeader {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RejectedDoc {
    Tokens(Vec<TokenId>),
    Visual(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairDoc {
    context: String,
    chosen: Vec<TokenId>,
    rejected: RejectedDoc,
    kind: PairKind,
    /// Initial trace scored under the distractor; the chosen trace when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rejected_tokens: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    margin: Option<f64>,
}

/// Line-delimited pair file: a header object, then one pair per line.
/// Perception pairs name the distractor by visual id and carry the initial
/// trace in `rejected_tokens` when it differs from the chosen trace.
pub fn write_pairs<'a>(pairs: impl IntoIterator<Item = &'a PreferencePair>) -> String {
    let header = PairHeader {
        format: PAIR_FILE_FORMAT.into(),
        version: 1,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for pair in pairs {
        let (rejected, rejected_tokens) = match &pair.rejected {
            Rejected::Thinking(t) => (RejectedDoc::Tokens(t.tokens().to_vec()), None),
            Rejected::Perception { distractor, trace } => (
                RejectedDoc::Visual(distractor.id.clone()),
                (*trace != pair.chosen).then(|| trace.tokens().to_vec()),
            ),
        };
        let doc = PairDoc {
            context: pair.context.clone(),
            chosen: pair.chosen.tokens().to_vec(),
            rejected,
            kind: pair.kind(),
            rejected_tokens,
            margin: pair.margin,
        };
        out.push_str(&serde_json::to_string(&doc).expect("pair serializes"));
        out.push('\n');
    }
    out
}

/// Reads a pair file, resolving contexts and distractors against `records`
/// by record id and visual id.
pub fn parse_pairs(
    source: impl BufRead,
    records: &[TraceRecord],
    markers: Markers,
) -> Result<Vec<PreferencePair>, CpoError> {
    let by_record: HashMap<&str, &TraceRecord> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let by_visual: HashMap<&str, &VisualContext> = records
        .iter()
        .map(|r| (r.visual.id.as_str(), &r.visual))
        .collect();
    let mut pairs = Vec::new();
    let mut saw_header = false;
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let fail = |message: String| CpoError::PairFile {
            line: line_no,
            message,
        };
        let line = line.map_err(|e| fail(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let header: PairHeader =
                serde_json::from_str(&line).map_err(|e| fail(format!("bad header: {e}")))?;
            if header.format != PAIR_FILE_FORMAT || header.version != 1 {
                return Err(fail(format!(
                    "unsupported pair file {}/{}",
                    header.format, header.version
                )));
            }
            saw_header = true;
            continue;
        }
        let doc: PairDoc = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let record = by_record
            .get(doc.context.as_str())
            .ok_or_else(|| fail(format!("unknown context record {:?}", doc.context)))?;
        let chosen =
            ThinkingTrace::terminated(doc.chosen, markers).map_err(|e| fail(e.to_string()))?;
        let rejected = match (doc.kind, doc.rejected) {
            (PairKind::ThinkingCf, RejectedDoc::Tokens(tokens))
                if doc.rejected_tokens.is_none() =>
            {
                Rejected::Thinking(
                    ThinkingTrace::new(tokens, markers).map_err(|e| fail(e.to_string()))?,
                )
            }
            (PairKind::PerceptionCf, RejectedDoc::Visual(id)) => Rejected::Perception {
                distractor: by_visual
                    .get(id.as_str())
                    .map(|v| (*v).clone())
                    .ok_or_else(|| fail(format!("unknown distractor visual {id:?}")))?,
                trace: match doc.rejected_tokens {
                    Some(tokens) => {
                        ThinkingTrace::new(tokens, markers).map_err(|e| fail(e.to_string()))?
                    }
                    None => chosen.clone(),
                },
            },
            (kind, _) => return Err(fail(format!("rejected field does not match kind {kind:?}"))),
        };
        pairs.push(PreferencePair {
            context: doc.context,
            visual: record.visual.clone(),
            prompt: record.prompt.clone(),
            chosen,
            rejected,
            margin: doc.margin,
        });
    }
    if !saw_header {
        return Err(CpoError::PairFile {
            line: 0,
            message: "missing header".into(),
        });
    }
    Ok(pairs)
}
