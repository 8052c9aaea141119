use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{TokenId, TraceError};

/// Ids of the think-span delimiters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Markers {
    pub think_open: TokenId,
    pub think_close: TokenId,
}

const HEADER_TAG: &str = "#vocab v1";

/// Ordered token table; a token's id is its position.
///
/// File format: a header line `#vocab v1 think_open=<id> think_close=<id>`
/// followed by one token text per line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    markers: Markers,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, markers: Markers) -> Result<Self, TraceError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(TraceError::Vocabulary(format!(
                    "token {i} ({token:?}) is empty or contains whitespace"
                )));
            }
            if index.insert(token.clone(), i as TokenId).is_some() {
                return Err(TraceError::Vocabulary(format!(
                    "token {token:?} listed twice"
                )));
            }
        }
        let n = tokens.len() as TokenId;
        if markers.think_open >= n || markers.think_close >= n {
            return Err(TraceError::Vocabulary(
                "think marker id out of range".into(),
            ));
        }
        if markers.think_open == markers.think_close {
            return Err(TraceError::Vocabulary("think markers must differ".into()));
        }
        Ok(Self {
            tokens,
            index,
            markers,
        })
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TraceError::Vocabulary("empty vocabulary file".into()))?;
        let rest = header
            .strip_prefix(HEADER_TAG)
            .ok_or_else(|| TraceError::Vocabulary(format!("bad header {header:?}")))?;
        let mut open = None;
        let mut close = None;
        for field in rest.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| TraceError::Vocabulary(format!("bad header field {field:?}")))?;
            let value: TokenId = value
                .parse()
                .map_err(|_| TraceError::Vocabulary(format!("bad header field {field:?}")))?;
            match key {
                "think_open" => open = Some(value),
                "think_close" => close = Some(value),
                _ => {
                    return Err(TraceError::Vocabulary(format!(
                        "unknown header key {key:?}"
                    )))
                }
            }
        }
        let (Some(think_open), Some(think_close)) = (open, close) else {
            return Err(TraceError::Vocabulary(
                "header must declare think_open and think_close".into(),
            ));
        };
        let tokens = lines.map(str::to_string).collect();
        Self::new(
            tokens,
            Markers {
                think_open,
                think_close,
            },
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER_TAG} think_open={} think_close={}\n",
            self.markers.think_open, self.markers.think_close
        );
        for token in &self.tokens {
            let _ = writeln!(out, "{token}");
        }
        out
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

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn text(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization against the table; unknown words are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, TraceError> {
        text.split_whitespace()
            .map(|word| {
                self.id(word)
                    .ok_or_else(|| TraceError::OutOfVocabulary(word.to_string()))
            })
            .collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.text(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
