use std::collections::HashMap;

use serde::Serialize;

use crate::graph::ConceptGraph;

use super::{ThinkingTrace, TokenId, TraceError, Vocabulary};

/// An attribute name located in a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mention {
    pub attribute: String,
    pub start: usize,
    pub len: usize,
}

/// Token spellings of every graph attribute under one vocabulary.
#[derive(Debug, Clone)]
pub struct AttributeLexicon {
    spellings: Vec<(String, Vec<TokenId>)>,
    by_first: HashMap<TokenId, Vec<usize>>,
}

impl AttributeLexicon {
    /// Tokenizes every attribute name. Names with words outside the
    /// vocabulary are rejected.
    pub fn build(graph: &ConceptGraph, vocab: &Vocabulary) -> Result<Self, TraceError> {
        let markers = vocab.markers();
        let mut spellings = Vec::with_capacity(graph.attributes().len());
        for attr in graph.attributes() {
            let tokens = vocab.tokenize(&attr.name)?;
            if tokens.is_empty() {
                return Err(TraceError::Vocabulary(format!(
                    "attribute {:?} has no tokens",
                    attr.id
                )));
            }
            if tokens.contains(&markers.think_open) || tokens.contains(&markers.think_close) {
                return Err(TraceError::Vocabulary(format!(
                    "attribute {:?} spells a think marker",
                    attr.id
                )));
            }
            spellings.push((attr.id.clone(), tokens));
        }
        let mut by_first: HashMap<TokenId, Vec<usize>> = HashMap::new();
        for (i, (_, tokens)) in spellings.iter().enumerate() {
            by_first.entry(tokens[0]).or_default().push(i);
        }
        // Longest spelling first; equal lengths keep attribute-id order.
        for entries in by_first.values_mut() {
            entries.sort_by(|&a, &b| {
                spellings[b]
                    .1
                    .len()
                    .cmp(&spellings[a].1.len())
                    .then(a.cmp(&b))
            });
        }
        Ok(Self {
            spellings,
            by_first,
        })
    }

    pub fn spelling(&self, attribute: &str) -> Option<&[TokenId]> {
        self.spellings
            .iter()
            .find(|(id, _)| id == attribute)
            .map(|(_, t)| t.as_slice())
    }

    pub fn spellings(&self) -> impl Iterator<Item = (&str, &[TokenId])> {
        self.spellings
            .iter()
            .map(|(id, t)| (id.as_str(), t.as_slice()))
    }

    fn longest_at(&self, tokens: &[TokenId], at: usize, end: usize) -> Option<usize> {
        let candidates = self.by_first.get(&tokens[at])?;
        candidates.iter().copied().find(|&i| {
            let spelling = &self.spellings[i].1;
            at + spelling.len() <= end && tokens[at..at + spelling.len()] == spelling[..]
        })
    }
}

/// Greedy longest-leftmost scan of the think span for attribute names.
pub fn extract_attribute_mentions(
    trace: &ThinkingTrace,
    lexicon: &AttributeLexicon,
) -> Vec<Mention> {
    let tokens = trace.tokens();
    let content = trace.content_positions();
    let mut mentions = Vec::new();
    let mut at = content.start;
    while at < content.end {
        match lexicon.longest_at(tokens, at, content.end) {
            Some(i) => {
                let (id, spelling) = &lexicon.spellings[i];
                mentions.push(Mention {
                    attribute: id.clone(),
                    start: at,
                    len: spelling.len(),
                });
                at += spelling.len();
            }
            None => at += 1,
        }
    }
    mentions
}
