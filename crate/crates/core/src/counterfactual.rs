//! Rejected-trajectory synthesis for both drift channels.
//!
//! Thinking counterfactuals swap attribute mentions in a trace for
//! graph-constrained substitutes. Perception hard negatives are visual
//! neighbours under which the policy finds the original trace more likely
//! than under the true image.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{ConceptGraph, GraphError, RelationKind};
use crate::policy::{PolicyError, PolicyParams};
use crate::trace::{
    extract_attribute_mentions, AttributeLexicon, Markers, Mention, ThinkingTrace, TokenId,
    TraceError, TraceRecord, VisualContext,
};

#[derive(Debug, thiserror::Error)]
pub enum CounterfactualError {
    #[error("trace of record {0:?} mentions no graph attribute")]
    NoMentions(String),
    #[error("invalid counterfactual spec: {0}")]
    InvalidSpec(String),
    #[error("visual pool is empty")]
    EmptyPool,
    #[error("duplicate visual context id {0:?}")]
    DuplicateVisual(String),
    #[error("inverse matching needs the original context among at least two candidates")]
    BadCandidates,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    /// Number of candidates requested.
    pub n: usize,
    pub max_substitutions: usize,
    /// Only mentions of attributes in this category are substituted.
    #[serde(default)]
    pub category: Option<String>,
    pub seed: u64,
}

impl CounterfactualSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            max_substitutions: 1,
            category: None,
            seed,
        }
    }

    fn validate(&self, graph: &ConceptGraph) -> Result<(), CounterfactualError> {
        if self.max_substitutions == 0 {
            return Err(CounterfactualError::InvalidSpec(
                "max_substitutions must be at least 1".into(),
            ));
        }
        if let Some(c) = &self.category {
            if !graph.categories().contains(c) {
                return Err(CounterfactualError::InvalidSpec(format!(
                    "unknown category {c:?}"
                )));
            }
        }
        Ok(())
    }
}

/// One replaced mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Substitution {
    pub original: String,
    pub replacement: String,
    /// Start of the original mention in the source trace.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub trace: ThinkingTrace,
    pub substitutions: Vec<Substitution>,
}

/// Result of a synthesis call. `shortfall` is set when fewer than the
/// requested number of valid candidates exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synthesis {
    pub candidates: Vec<Candidate>,
    pub shortfall: Option<Shortfall>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Shortfall {
    pub requested: usize,
    pub found: usize,
}

impl std::fmt::Display for Shortfall {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "only {} of {} requested counterfactuals exist",
            self.found, self.requested
        )
    }
}

/// Attribute indices mentioned in a trace.
fn mentioned_set(graph: &ConceptGraph, mentions: &[Mention]) -> BTreeSet<usize> {
    mentions
        .iter()
        .filter_map(|m| graph.attribute_index(&m.attribute))
        .collect()
}

/// True iff the mentioned attributes include one the gold entity excludes,
/// or none the gold entity is associated with.
pub fn label_flip_check(
    candidate: &ThinkingTrace,
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
    gold_entity: &str,
) -> Result<bool, CounterfactualError> {
    let e = graph
        .entity_index(gold_entity)
        .ok_or_else(|| GraphError::UnknownEntity(gold_entity.to_string()))?;
    let mentioned = mentioned_set(graph, &extract_attribute_mentions(candidate, lexicon));
    let excluded = mentioned
        .iter()
        .any(|&a| graph.relation_by_index(e, a) == RelationKind::Exclusion);
    let supported = mentioned
        .iter()
        .any(|&a| graph.relation_by_index(e, a) == RelationKind::Association);
    Ok(excluded || !supported)
}

/// Rejects traces that mention two mutually exclusive attributes.
pub fn is_plausible(
    trace: &ThinkingTrace,
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
) -> bool {
    let mentioned: Vec<usize> = mentioned_set(graph, &extract_attribute_mentions(trace, lexicon))
        .into_iter()
        .collect();
    mentioned.iter().enumerate().all(|(i, &a)| {
        mentioned[i + 1..]
            .iter()
            .all(|&b| !graph.mutually_exclusive(a, b))
    })
}

/// Splices replacements into `trace`, right to left so earlier positions stay
/// valid. `choices` pairs a mention index with a replacement attribute id.
pub fn apply_substitutions(
    trace: &ThinkingTrace,
    mentions: &[Mention],
    choices: &[(usize, &str)],
    lexicon: &AttributeLexicon,
) -> Result<Candidate, CounterfactualError> {
    let mut ordered: Vec<(usize, &str)> = choices.to_vec();
    ordered.sort_by_key(|&(i, _)| std::cmp::Reverse(mentions[i].start));
    let mut out = trace.clone();
    for &(i, replacement) in &ordered {
        let spelling = lexicon
            .spelling(replacement)
            .ok_or_else(|| GraphError::UnknownAttribute(replacement.to_string()))?;
        out = out.splice(mentions[i].start, mentions[i].len, spelling)?;
    }
    let mut substitutions: Vec<Substitution> = ordered
        .iter()
        .map(|&(i, r)| Substitution {
            original: mentions[i].attribute.clone(),
            replacement: r.to_string(),
            position: mentions[i].start,
        })
        .collect();
    substitutions.reverse();
    Ok(Candidate {
        trace: out,
        substitutions,
    })
}

/// A candidate is kept when re-scanning it finds exactly the intended
/// mentions, it passes the plausibility filter and it flips the label.
fn accept(
    candidate: &Candidate,
    mentions: &[Mention],
    choices: &[(usize, &str)],
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
    gold: &str,
) -> Result<bool, CounterfactualError> {
    let mut expected: Vec<&str> = mentions.iter().map(|m| m.attribute.as_str()).collect();
    for &(i, r) in choices {
        expected[i] = r;
    }
    let found = extract_attribute_mentions(&candidate.trace, lexicon);
    if found.len() != expected.len() || found.iter().zip(&expected).any(|(m, e)| m.attribute != *e)
    {
        return Ok(false);
    }
    Ok(is_plausible(&candidate.trace, graph, lexicon)
        && label_flip_check(&candidate.trace, graph, lexicon, gold)?)
}

/// Builds up to `spec.n` counterfactual traces for a record.
///
/// Single substitutions are enumerated first in mention order, then
/// replacement id order. When more are needed and `max_substitutions ≥ 2`,
/// multi-mention substitutions are drawn at random and deduplicated.
pub fn synthesize_thinking_cf(
    record: &TraceRecord,
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
    spec: &CounterfactualSpec,
    rng: &mut impl Rng,
) -> Result<Synthesis, CounterfactualError> {
    spec.validate(graph)?;
    let gold = record.gold_label.as_str();
    if graph.entity_index(gold).is_none() {
        return Err(GraphError::UnknownEntity(gold.to_string()).into());
    }
    let mentions = extract_attribute_mentions(&record.trace, lexicon);
    if mentions.is_empty() {
        return Err(CounterfactualError::NoMentions(record.record_id.clone()));
    }
    if spec.n == 0 {
        return Ok(Synthesis {
            candidates: Vec::new(),
            shortfall: None,
        });
    }
    let substitutes: Vec<Vec<&str>> = mentions
        .iter()
        .map(|m| {
            let in_category = spec.category.as_ref().is_none_or(|c| {
                graph
                    .attribute(&m.attribute)
                    .is_some_and(|a| &a.category == c)
            });
            if in_category {
                graph.substitution_set(&m.attribute, gold)
            } else {
                Ok(Vec::new())
            }
        })
        .collect::<Result<_, _>>()?;

    let mut candidates = Vec::new();
    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    seen.insert(record.trace.tokens().to_vec());
    'single: for (i, subs) in substitutes.iter().enumerate() {
        for &r in subs {
            let choices = [(i, r)];
            let candidate = apply_substitutions(&record.trace, &mentions, &choices, lexicon)?;
            if accept(&candidate, &mentions, &choices, graph, lexicon, gold)?
                && seen.insert(candidate.trace.tokens().to_vec())
            {
                candidates.push(candidate);
                if candidates.len() == spec.n {
                    break 'single;
                }
            }
        }
    }

    let eligible: Vec<usize> = (0..mentions.len())
        .filter(|&i| !substitutes[i].is_empty())
        .collect();
    let max_k = spec.max_substitutions.min(eligible.len());
    if candidates.len() < spec.n && max_k >= 2 {
        let attempts = 50 * spec.n;
        for _ in 0..attempts {
            let k = rng.random_range(2..=max_k);
            let mut picked: Vec<usize> = sample(rng, eligible.len(), k)
                .into_iter()
                .map(|x| eligible[x])
                .collect();
            picked.sort_unstable();
            let choices: Vec<(usize, &str)> = picked
                .iter()
                .map(|&i| (i, substitutes[i][rng.random_range(0..substitutes[i].len())]))
                .collect();
            let candidate = apply_substitutions(&record.trace, &mentions, &choices, lexicon)?;
            if accept(&candidate, &mentions, &choices, graph, lexicon, gold)?
                && seen.insert(candidate.trace.tokens().to_vec())
            {
                candidates.push(candidate);
                if candidates.len() == spec.n {
                    break;
                }
            }
        }
    }

    let shortfall = (candidates.len() < spec.n).then_some(Shortfall {
        requested: spec.n,
        found: candidates.len(),
    });
    if let Some(s) = &shortfall {
        log::warn!("record {:?}: {s}", record.record_id);
    }
    Ok(Synthesis {
        candidates,
        shortfall,
    })
}

/// A trace with the same markers and content length whose content tokens are
/// drawn uniformly from the non-marker vocabulary, redrawn until it differs
/// from `trace`.
pub fn random_negative(
    trace: &ThinkingTrace,
    vocab_size: usize,
    markers: Markers,
    rng: &mut impl Rng,
) -> Result<ThinkingTrace, CounterfactualError> {
    let content: Vec<TokenId> = (0..vocab_size as TokenId)
        .filter(|&t| t != markers.think_open && t != markers.think_close)
        .collect();
    if content.is_empty() {
        return Err(CounterfactualError::InvalidSpec(
            "vocabulary has no content tokens".into(),
        ));
    }
    if trace.content_positions().is_empty() || content.len() < 2 {
        return Err(CounterfactualError::InvalidSpec(
            "no room for a differing random trace".into(),
        ));
    }
    loop {
        let mut tokens = trace.tokens().to_vec();
        for j in trace.content_positions() {
            tokens[j] = content[rng.random_range(0..content.len())];
        }
        if tokens != trace.tokens() {
            return Ok(ThinkingTrace::new(tokens, markers)?);
        }
    }
}

/// Visual contexts indexed by unique id.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPool {
    members: Vec<VisualContext>,
}

impl VisualPool {
    pub fn new(members: Vec<VisualContext>) -> Result<Self, CounterfactualError> {
        let mut ids = HashSet::new();
        for v in &members {
            if !ids.insert(v.id.as_str()) {
                return Err(CounterfactualError::DuplicateVisual(v.id.clone()));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[VisualContext] {
        &self.members
    }

    pub fn get(&self, id: &str) -> Option<&VisualContext> {
        self.members.iter().find(|v| v.id == id)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Jaccard distance as an exact fraction `(|A △ B|, |A ∪ B|)`; two empty
/// bags are at distance 0.
fn jaccard_fraction(a: &BTreeSet<String>, b: &BTreeSet<String>) -> (usize, usize) {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        (0, 1)
    } else {
        (union - inter, union)
    }
}

pub fn jaccard_distance(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let (num, den) = jaccard_fraction(a, b);
    num as f64 / den as f64
}

/// The `k` nearest pool members to `v_init` by Jaccard distance over
/// attribute bags, ties broken by id. Members sharing `v_init`'s id or
/// attribute bag are skipped.
pub fn retrieve_visual_candidates<'p>(
    pool: &'p VisualPool,
    v_init: &VisualContext,
    k: usize,
) -> Result<Vec<&'p VisualContext>, CounterfactualError> {
    if pool.is_empty() {
        return Err(CounterfactualError::EmptyPool);
    }
    let mut ranked: Vec<(&VisualContext, (usize, usize))> = pool
        .members
        .iter()
        .filter(|v| v.id != v_init.id && v.attributes != v_init.attributes)
        .map(|v| (v, jaccard_fraction(&v.attributes, &v_init.attributes)))
        .collect();
    ranked.sort_by(|(va, (na, da)), (vb, (nb, db))| {
        (na * db).cmp(&(nb * da)).then_with(|| va.id.cmp(&vb.id))
    });
    Ok(ranked.into_iter().take(k).map(|(v, _)| v).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardNegative {
    pub distractor: VisualContext,
    pub trace: ThinkingTrace,
    /// Distractor score minus the original context's score; always positive.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchOutcome {
    /// Candidates by descending score, ties by ascending id.
    pub ranking: Vec<ScoredCandidate>,
    pub hard_negative: Option<HardNegative>,
}

fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

/// Scores every candidate context by the policy's log-likelihood of `t_init`
/// and mines a hard negative when a distractor strictly outscores `v_init`.
pub fn inverse_match(
    policy: &PolicyParams,
    t_init: &ThinkingTrace,
    prompt: &[TokenId],
    v_init: &VisualContext,
    candidates: &[VisualContext],
) -> Result<MatchOutcome, CounterfactualError> {
    VisualPool::new(candidates.to_vec())?;
    if candidates.len() < 2 || !candidates.iter().any(|c| c.id == v_init.id) {
        return Err(CounterfactualError::BadCandidates);
    }
    let mut ranking = candidates
        .iter()
        .map(|v| {
            Ok(ScoredCandidate {
                id: v.id.clone(),
                score: policy.sequence_logprob(v, prompt, t_init)?,
            })
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;
    ranking.sort_by(rank_order);
    let init_score = ranking
        .iter()
        .find(|c| c.id == v_init.id)
        .map(|c| c.score)
        .expect("v_init is a candidate");
    let top = &ranking[0];
    let hard_negative = (top.score > init_score).then(|| HardNegative {
        distractor: candidates
            .iter()
            .find(|c| c.id == top.id)
            .cloned()
            .expect("ranked id is a candidate"),
        trace: t_init.clone(),
        margin: top.score - init_score,
    });
    Ok(MatchOutcome {
        ranking,
        hard_negative,
    })
}

/// Outcome of mining one record: the sampled initial trace and its matching
/// scores over the record's visual neighbourhood.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiningResult {
    pub record_id: String,
    pub initial_trace: ThinkingTrace,
    #[serde(flatten)]
    pub outcome: MatchOutcome,
}

/// Samples the policy's initial trace for a record, retrieves the `k`
/// nearest visual neighbours and runs inverse matching over them and the
/// record's own context.
pub fn mine_record(
    policy: &PolicyParams,
    record: &TraceRecord,
    pool: &VisualPool,
    k: usize,
    max_len: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Option<MiningResult>, CounterfactualError> {
    let neighbours = retrieve_visual_candidates(pool, &record.visual, k)?;
    if neighbours.is_empty() {
        return Ok(None);
    }
    let initial_trace =
        policy.sample_trace(&record.visual, &record.prompt, max_len, temperature, rng)?;
    let mut candidates = vec![record.visual.clone()];
    candidates.extend(neighbours.into_iter().cloned());
    let outcome = inverse_match(
        policy,
        &initial_trace,
        &record.prompt,
        &record.visual,
        &candidates,
    )?;
    Ok(Some(MiningResult {
        record_id: record.record_id.clone(),
        initial_trace,
        outcome,
    }))
}
