//! Seeded synthetic worlds: a concept graph, a vocabulary, gold records
//! carrying a latent drift state, and the interference-injection protocol.
//!
//! Every entity owns one attribute in each of `attributes_per_entity`
//! categories. Within a category, entities exclude each other's attributes;
//! an entity is irrelevant to categories it owns nothing in. A gold trace is
//! `<think> a₁ … a_m </think>` over a subset of the entity's attributes. With
//! probability `ρ` the record's drift state plants a cue token whose identity
//! points at a wrong entity.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::Substitution;
use crate::graph::{
    Attribute, ConceptGraph, Entity, GraphDocument, GraphError, Relation, RelationKind,
};
use crate::trace::{
    extract_attribute_mentions, AttributeLexicon, Markers, ThinkingTrace, TokenId, TraceError,
    TraceRecord, VisualContext, Vocabulary,
};

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("infeasible world config: {0}")]
    InfeasibleConfig(String),
    #[error("record {0:?} mentions no attribute")]
    NoMentions(String),
    #[error("record {record:?}: {needed} substitutions requested but only {available} mentions have substitutes")]
    NotEnoughSubstitutes {
        record: String,
        needed: usize,
        available: usize,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const PROMPT_TOKEN: &str = "query";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub entities: usize,
    pub attributes_per_entity: usize,
    pub categories: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub drift_states: usize,
    /// Probability that a record carries a spurious cue token.
    pub rho: f64,
    pub records: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            entities: 6,
            attributes_per_entity: 3,
            categories: 4,
            vocab_size: 64,
            max_len: 12,
            drift_states: 2,
            rho: 0.3,
            records: 200,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Marker, prompt, attribute and cue tokens; fillers take the rest.
    pub fn required_vocab(&self) -> usize {
        3 + self.entities * self.attributes_per_entity + self.drift_states * self.entities
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let fail = |msg: String| Err(WorldError::InfeasibleConfig(msg));
        if self.entities < 2 {
            return fail(format!("need at least 2 entities, got {}", self.entities));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho {} outside [0, 1]", self.rho));
        }
        if self.max_len < 4 {
            return fail(format!("max trace length {} below 4", self.max_len));
        }
        if self.attributes_per_entity == 0 {
            return fail("entities need at least one attribute".into());
        }
        if self.attributes_per_entity > self.categories {
            return fail(format!(
                "{} attributes per entity cannot sit in distinct categories out of {}",
                self.attributes_per_entity, self.categories
            ));
        }
        if self.drift_states == 0 {
            return fail("need at least one drift state".into());
        }
        if self.max_len < self.attributes_per_entity + 3 {
            return fail(format!(
                "max trace length {} cannot hold markers, {} attributes and a cue",
                self.max_len, self.attributes_per_entity
            ));
        }
        if self.vocab_size < self.required_vocab() {
            return fail(format!(
                "vocabulary of {} is smaller than the {} tokens the world needs",
                self.vocab_size,
                self.required_vocab()
            ));
        }
        Ok(())
    }
}

pub fn entity_id(e: usize) -> String {
    format!("ent{e:02}")
}

pub fn attribute_id(category: usize, entity: usize) -> String {
    format!("attr_c{category}_e{entity:02}")
}

fn attribute_name(category: usize, entity: usize) -> String {
    format!("c{category}e{entity:02}")
}

fn cue_name(state: usize, entity: usize) -> String {
    format!("cue_d{state}_e{entity:02}")
}

/// A generated graph with the vocabulary that spells it.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub graph: ConceptGraph,
    pub vocab: Vocabulary,
    pub lexicon: AttributeLexicon,
    /// Categories owned by each entity, ascending.
    pub ownership: Vec<Vec<usize>>,
}

impl World {
    pub fn labels(&self) -> Vec<String> {
        (0..self.config.entities).map(entity_id).collect()
    }

    pub fn markers(&self) -> Markers {
        self.vocab.markers()
    }

    pub fn prompt(&self) -> Vec<TokenId> {
        vec![self.vocab.id(PROMPT_TOKEN).expect("prompt token")]
    }

    pub fn cue_token(&self, state: usize, entity: usize) -> TokenId {
        self.vocab.id(&cue_name(state, entity)).expect("cue token")
    }

    pub fn attribute_ids(&self) -> Vec<String> {
        self.graph
            .attributes()
            .iter()
            .map(|a| a.id.clone())
            .collect()
    }
}

pub fn generate_world(config: &WorldConfig, rng: &mut impl Rng) -> Result<World, WorldError> {
    config.validate()?;
    let (e_count, per, c_count) = (
        config.entities,
        config.attributes_per_entity,
        config.categories,
    );

    // Every category that is used must be shared by two entities so each
    // attribute has a substitute.
    let mut ownership = Vec::new();
    for attempt in 0.. {
        if attempt == 1000 {
            return Err(WorldError::InfeasibleConfig(
                "could not assign categories so that every used category is shared".into(),
            ));
        }
        ownership = (0..e_count)
            .map(|_| {
                let mut cats: Vec<usize> = sample(rng, c_count, per).into_vec();
                cats.sort_unstable();
                cats
            })
            .collect::<Vec<_>>();
        let mut owners = vec![0usize; c_count];
        for cats in &ownership {
            for &c in cats {
                owners[c] += 1;
            }
        }
        if owners.iter().all(|&n| n != 1) {
            break;
        }
    }

    let entities = (0..e_count)
        .map(|e| Entity {
            id: entity_id(e),
            name: format!("entity {e}"),
        })
        .collect();
    let mut attributes = Vec::new();
    let mut relations = Vec::new();
    for (e, cats) in ownership.iter().enumerate() {
        for &c in cats {
            attributes.push(Attribute {
                id: attribute_id(c, e),
                name: attribute_name(c, e),
                category: format!("cat{c}"),
            });
            relations.push(Relation {
                entity: entity_id(e),
                attribute: attribute_id(c, e),
                kind: RelationKind::Association,
            });
            for (other, other_cats) in ownership.iter().enumerate() {
                if other != e && other_cats.contains(&c) {
                    relations.push(Relation {
                        entity: entity_id(other),
                        attribute: attribute_id(c, e),
                        kind: RelationKind::Exclusion,
                    });
                }
            }
        }
    }
    let (graph, _) = ConceptGraph::from_document(GraphDocument {
        entities,
        attributes,
        relations,
        categories: (0..c_count).map(|c| format!("cat{c}")).collect(),
    })?;

    let mut tokens = vec![
        THINK_OPEN.to_string(),
        THINK_CLOSE.to_string(),
        PROMPT_TOKEN.to_string(),
    ];
    for attr in graph.attributes() {
        tokens.push(attr.name.clone());
    }
    for d in 0..config.drift_states {
        for e in 0..e_count {
            tokens.push(cue_name(d, e));
        }
    }
    let fillers = config.vocab_size - tokens.len();
    tokens.extend((0..fillers).map(|k| format!("w{k}")));
    let vocab = Vocabulary::new(
        tokens,
        Markers {
            think_open: 0,
            think_close: 1,
        },
    )?;
    let lexicon = AttributeLexicon::build(&graph, &vocab)?;
    Ok(World {
        config: config.clone(),
        graph,
        vocab,
        lexicon,
        ownership,
    })
}

/// A record with its generator-side ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoldRecord {
    #[serde(skip)]
    pub record: TraceRecord,
    pub record_id: String,
    pub entity: usize,
    pub drift_state: usize,
    /// Absolute positions of cue tokens in the trace.
    pub spurious_positions: Vec<usize>,
}

pub fn generate_records(world: &World, rng: &mut impl Rng) -> Result<Vec<GoldRecord>, WorldError> {
    let config = &world.config;
    let markers = world.markers();
    let per = config.attributes_per_entity;
    let min_m = per.div_ceil(2);
    let mut out = Vec::with_capacity(config.records);
    for i in 0..config.records {
        let y = rng.random_range(0..config.entities);
        let d = rng.random_range(0..config.drift_states);
        let m = rng.random_range(min_m..=per);
        let owned = &world.ownership[y];
        let mut chosen: Vec<usize> = sample(rng, owned.len(), m)
            .into_iter()
            .map(|k| owned[k])
            .collect();
        chosen.shuffle(rng);
        let mut bag: Vec<String> = chosen.iter().map(|&c| attribute_id(c, y)).collect();
        if m >= 2 && rng.random_bool(0.5) {
            let noise: Vec<(usize, usize)> = (0..config.entities)
                .filter(|&e| e != y)
                .flat_map(|e| world.ownership[e].iter().map(move |&c| (c, e)))
                .filter(|(c, _)| !owned.contains(c))
                .collect();
            if !noise.is_empty() {
                let (c, e) = noise[rng.random_range(0..noise.len())];
                bag.push(attribute_id(c, e));
            }
        }
        let mut tokens = vec![markers.think_open];
        for &c in &chosen {
            tokens.extend_from_slice(
                world
                    .lexicon
                    .spelling(&attribute_id(c, y))
                    .expect("own attribute"),
            );
        }
        let mut spurious_positions = Vec::new();
        if rng.random_bool(config.rho) {
            let at = 1 + rng.random_range(0..=tokens.len() - 1);
            let wrong = (y + 1 + d) % config.entities;
            tokens.insert(at, world.cue_token(d, wrong));
            spurious_positions.push(at);
        }
        tokens.push(markers.think_close);
        let record_id = format!("r{i:05}");
        let record = TraceRecord {
            record_id: record_id.clone(),
            visual: VisualContext::new(format!("v{i:05}"), bag),
            prompt: world.prompt(),
            trace: ThinkingTrace::terminated(tokens, markers)?,
            z: None,
            attention: None,
            gold_label: entity_id(y),
        };
        out.push(GoldRecord {
            record,
            record_id,
            entity: y,
            drift_state: d,
            spurious_positions,
        });
    }
    Ok(out)
}

/// Where interfering mentions are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionTarget {
    /// Replace mentions inside the think span.
    #[default]
    Trace,
    /// Leave the trace intact and append the interfered span content to the
    /// prompt.
    Prompt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub record: TraceRecord,
    pub substitutions: Vec<Substitution>,
}

/// Replaces `⌈ratio·M⌉` of the record's `M` attribute mentions with members
/// of their substitution sets against the gold entity. Recorded states and
/// frames are dropped from the output.
pub fn inject_interference(
    record: &TraceRecord,
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
    ratio: f64,
    target: InjectionTarget,
    rng: &mut impl Rng,
) -> Result<Injection, WorldError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(WorldError::InfeasibleConfig(format!(
            "interference ratio {ratio} outside [0, 1]"
        )));
    }
    let mentions = extract_attribute_mentions(&record.trace, lexicon);
    if mentions.is_empty() {
        return Err(WorldError::NoMentions(record.record_id.clone()));
    }
    let needed = (ratio * mentions.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut out = record.clone();
    out.z = None;
    out.attention = None;
    if needed == 0 {
        return Ok(Injection {
            record: out,
            substitutions: Vec::new(),
        });
    }
    let substitutes: Vec<Vec<&str>> = mentions
        .iter()
        .map(|m| graph.substitution_set(&m.attribute, &record.gold_label))
        .collect::<Result<_, _>>()?;
    let eligible: Vec<usize> = (0..mentions.len())
        .filter(|&i| !substitutes[i].is_empty())
        .collect();
    if eligible.len() < needed {
        return Err(WorldError::NotEnoughSubstitutes {
            record: record.record_id.clone(),
            needed,
            available: eligible.len(),
        });
    }
    let mut picked: Vec<usize> = sample(rng, eligible.len(), needed)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    picked.sort_unstable();
    let choices: Vec<(usize, &str)> = picked
        .iter()
        .map(|&i| (i, substitutes[i][rng.random_range(0..substitutes[i].len())]))
        .collect();
    let candidate =
        crate::counterfactual::apply_substitutions(&record.trace, &mentions, &choices, lexicon)
            .map_err(|e| match e {
                crate::counterfactual::CounterfactualError::Trace(t) => WorldError::Trace(t),
                crate::counterfactual::CounterfactualError::Graph(g) => WorldError::Graph(g),
                other => WorldError::InfeasibleConfig(other.to_string()),
            })?;
    match target {
        InjectionTarget::Trace => out.trace = candidate.trace,
        InjectionTarget::Prompt => {
            let content = candidate.trace.content_positions();
            out.prompt
                .extend_from_slice(&candidate.trace.tokens()[content]);
        }
    }
    Ok(Injection {
        record: out,
        substitutions: candidate.substitutions,
    })
}

/// The entity with the most associated attributes in the bag; ties go to the
/// lower entity index.
pub fn rule_label(graph: &ConceptGraph, bag: &VisualContext) -> Option<usize> {
    let attrs: Vec<usize> = bag
        .attributes
        .iter()
        .filter_map(|a| graph.attribute_index(a))
        .collect();
    (0..graph.entities().len())
        .map(|e| {
            let overlap = attrs
                .iter()
                .filter(|&&a| graph.relation_by_index(e, a) == RelationKind::Association)
                .count();
            (e, overlap)
        })
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(e, _)| e)
}
