//! Cognitive-state streams: thinking traces, visual contexts, per-step label
//! distributions and attention frames, plus their line-delimited file format.

mod attention;
mod mentions;
mod record;
mod vocab;

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use attention::{normalize_attention, AttentionFrame, DEFAULT_SINK_MASK};
pub use mentions::{extract_attribute_mentions, AttributeLexicon, Mention};
pub use record::{parse_records, write_records, CognitiveState, TraceRecord};
pub use vocab::{Markers, Vocabulary};

pub type TokenId = u32;

/// Tolerance for unit-sum checks on distributions and attention rows.
pub const UNIT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<TraceError>,
    },
    #[error("malformed record: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{what} does not sum to 1 (sum = {sum})")]
    NotNormalized { what: String, sum: f64 },
    #[error("{what} has a negative or non-finite entry")]
    InvalidEntry { what: String },
    #[error("think span is not terminated")]
    UnterminatedThinkSpan,
    #[error("trace needs exactly one think-open marker before at most one think-close marker")]
    BadThinkSpan,
    #[error("{what}: expected {expected} rows for the think span, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Vocabulary(String),
    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("attention mask {mask} leaves nothing of a frame of length {len}")]
    BadMask { mask: usize, len: usize },
    #[error("attention frame has no mass outside the masked prefix")]
    DegenerateFrame,
    #[error("duplicate record id {0:?}")]
    DuplicateRecord(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TraceError {
    fn at_line(self, line: usize) -> Self {
        TraceError::AtLine {
            line,
            source: Box::new(self),
        }
    }
}

/// Checks nonnegativity and unit sum of a probability row.
pub(crate) fn check_distribution(row: &[f64], what: impl Fn() -> String) -> Result<(), TraceError> {
    if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(TraceError::InvalidEntry { what: what() });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > UNIT_SUM_TOL {
        return Err(TraceError::NotNormalized { what: what(), sum });
    }
    Ok(())
}

/// Grounded perception evidence: an attribute bag and an optional feature
/// vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualContext {
    pub id: String,
    pub attributes: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

impl VisualContext {
    pub fn new(
        id: impl Into<String>,
        attributes: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Self {
            id: id.into(),
            attributes: attributes.into_iter().map(Into::into).collect(),
            feature: None,
        }
    }
}

/// A token sequence with exactly one think-open marker followed by at most
/// one think-close marker. A missing close marker means the trace was
/// truncated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ThinkingTrace {
    tokens: Vec<TokenId>,
    markers: Markers,
    open: usize,
    close: Option<usize>,
}

impl ThinkingTrace {
    pub fn new(tokens: Vec<TokenId>, markers: Markers) -> Result<Self, TraceError> {
        let opens: Vec<usize> = positions_of(&tokens, markers.think_open);
        let closes: Vec<usize> = positions_of(&tokens, markers.think_close);
        if opens.len() != 1 || closes.len() > 1 {
            return Err(TraceError::BadThinkSpan);
        }
        let open = opens[0];
        let close = closes.first().copied();
        if close.is_some_and(|c| c < open) {
            return Err(TraceError::BadThinkSpan);
        }
        Ok(Self {
            tokens,
            markers,
            open,
            close,
        })
    }

    /// Like [`ThinkingTrace::new`] but also requires the close marker.
    pub fn terminated(tokens: Vec<TokenId>, markers: Markers) -> Result<Self, TraceError> {
        let trace = Self::new(tokens, markers)?;
        if trace.close.is_none() {
            return Err(TraceError::UnterminatedThinkSpan);
        }
        Ok(trace)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<TokenId> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn markers(&self) -> Markers {
        self.markers
    }

    pub fn open_position(&self) -> usize {
        self.open
    }

    pub fn close_position(&self) -> Option<usize> {
        self.close
    }

    pub fn is_terminated(&self) -> bool {
        self.close.is_some()
    }

    /// Positions from the open marker through the close marker (or the end
    /// of a truncated trace). States and frames align with these.
    pub fn span_positions(&self) -> Range<usize> {
        self.open..self.close.map_or(self.tokens.len(), |c| c + 1)
    }

    /// Positions whose tokens the policy emits: everything after the open
    /// marker up to and including the close marker.
    pub fn scored_positions(&self) -> Range<usize> {
        self.open + 1..self.close.map_or(self.tokens.len(), |c| c + 1)
    }

    /// Positions strictly inside the think span.
    pub fn content_positions(&self) -> Range<usize> {
        self.open + 1..self.close.unwrap_or(self.tokens.len())
    }

    /// Replaces `len` tokens at `start` with `replacement`.
    pub fn splice(
        &self,
        start: usize,
        len: usize,
        replacement: &[TokenId],
    ) -> Result<Self, TraceError> {
        let mut tokens = Vec::with_capacity(self.tokens.len() + replacement.len());
        tokens.extend_from_slice(&self.tokens[..start]);
        tokens.extend_from_slice(replacement);
        tokens.extend_from_slice(&self.tokens[start + len..]);
        Self::new(tokens, self.markers)
    }
}

/// Serializes as the bare token-id list.
impl Serialize for ThinkingTrace {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(serializer)
    }
}

fn positions_of(tokens: &[TokenId], id: TokenId) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == id)
        .map(|(i, _)| i)
        .collect()
}
