//! Linear-softmax autoregressive policy with a label head.
//!
//! The token policy scores the next token from a sparse feature vector
//!
//! ```text
//! φ(v, l, t_<j) = [one-hot of the last n tokens ‖ attribute indicators of v ‖ bias ‖ prompt bag?]
//! ```
//!
//! so that `π(t_j | v, l, t_<j) = softmax(W φ)[t_j]`. The label head reads the
//! think span as a bag of tokens in which every token is weighted by the
//! probability the policy itself assigns to it at that step, concatenated with
//! the visual attribute indicators and a bias:
//!
//! ```text
//! ξ(v, t) = [Σ_j π(t_j | v, l, t_<j) · onehot(t_j) ‖ attribute indicators of v ‖ bias]
//! z = softmax(H ξ)
//! ```
//!
//! Tokens the policy considers implausible for the image therefore carry
//! little weight in the prediction.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::trace::{AttentionFrame, Markers, ThinkingTrace, TokenId, VisualContext};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(TokenId),
    #[error("visual attribute {0:?} is not in the feature map")]
    UnknownAttribute(String),
    #[error("label {0:?} is not known to the prediction head")]
    UnknownLabel(String),
    #[error("invalid policy configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

/// Shape of the policy's feature map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMapConfig {
    /// Number of preceding tokens one-hot encoded.
    pub context_window: usize,
    pub vocab_size: usize,
    /// Attribute ids in indicator order (sorted).
    pub attributes: Vec<String>,
    pub bias: bool,
    /// Adds a bag-of-prompt-tokens block to the token features.
    #[serde(default)]
    pub include_prompt: bool,
}

impl FeatureMapConfig {
    pub fn new(
        context_window: usize,
        vocab_size: usize,
        mut attributes: Vec<String>,
        bias: bool,
    ) -> Self {
        attributes.sort();
        attributes.dedup();
        Self {
            context_window,
            vocab_size,
            attributes,
            bias,
            include_prompt: false,
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.context_window == 0 {
            return Err(PolicyError::InvalidConfig(
                "context window must be at least 1".into(),
            ));
        }
        if self.vocab_size < 2 {
            return Err(PolicyError::InvalidConfig(
                "vocabulary needs at least the two think markers".into(),
            ));
        }
        if self.attributes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PolicyError::InvalidConfig(
                "attribute ids must be sorted and unique".into(),
            ));
        }
        Ok(())
    }

    fn attribute_offset(&self) -> usize {
        self.context_window * self.vocab_size
    }

    fn bias_index(&self) -> usize {
        self.attribute_offset() + self.attributes.len()
    }

    fn prompt_offset(&self) -> usize {
        self.bias_index() + usize::from(self.bias)
    }

    /// `F = n·|Σ| + |𝒜| + bias (+ |Σ| with prompt bag)`.
    pub fn token_feature_len(&self) -> usize {
        self.prompt_offset()
            + if self.include_prompt {
                self.vocab_size
            } else {
                0
            }
    }

    /// `F′ = |Σ| + |𝒜| + bias`.
    pub fn head_feature_len(&self) -> usize {
        self.vocab_size + self.attributes.len() + usize::from(self.bias)
    }

    fn attribute_index(&self, id: &str) -> Option<usize> {
        self.attributes
            .binary_search_by(|a| a.as_str().cmp(id))
            .ok()
    }
}

/// Sparse feature vector: `(index, value)` pairs in a fixed order.
pub type SparseFeatures = Vec<(usize, f64)>;

/// Weights of the token policy and its label head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub feature_map: FeatureMapConfig,
    pub markers: Markers,
    /// Label ids in head-row order.
    pub labels: Vec<String>,
    /// `|Σ| × F` policy logits.
    pub token_weights: Matrix,
    /// `|labels| × F′` head logits.
    pub head_weights: Matrix,
}

/// Attribute indices of a visual context under one feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundVisual(Vec<usize>);

impl BoundVisual {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

impl PolicyParams {
    pub fn zeros(
        feature_map: FeatureMapConfig,
        markers: Markers,
        labels: Vec<String>,
    ) -> Result<Self, PolicyError> {
        feature_map.validate()?;
        if labels.is_empty() {
            return Err(PolicyError::InvalidConfig(
                "at least one label is required".into(),
            ));
        }
        let v = feature_map.vocab_size;
        if markers.think_open as usize >= v || markers.think_close as usize >= v {
            return Err(PolicyError::InvalidConfig(
                "think markers outside the vocabulary".into(),
            ));
        }
        let token_weights = Matrix::zeros(v, feature_map.token_feature_len());
        let head_weights = Matrix::zeros(labels.len(), feature_map.head_feature_len());
        Ok(Self {
            feature_map,
            markers,
            labels,
            token_weights,
            head_weights,
        })
    }

    /// Uniform random weights in `[-scale, scale]`.
    pub fn random(
        feature_map: FeatureMapConfig,
        markers: Markers,
        labels: Vec<String>,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, PolicyError> {
        let mut params = Self::zeros(feature_map, markers, labels)?;
        for w in params.token_weights.as_mut_slice() {
            *w = rng.random_range(-scale..=scale);
        }
        for w in params.head_weights.as_mut_slice() {
            *w = rng.random_range(-scale..=scale);
        }
        Ok(params)
    }

    pub fn vocab_size(&self) -> usize {
        self.feature_map.vocab_size
    }

    pub fn label_index(&self, label: &str) -> Result<usize, PolicyError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| PolicyError::UnknownLabel(label.to_string()))
    }

    pub fn bind_visual(&self, v: &VisualContext) -> Result<BoundVisual, PolicyError> {
        v.attributes
            .iter()
            .map(|id| {
                self.feature_map
                    .attribute_index(id)
                    .ok_or_else(|| PolicyError::UnknownAttribute(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(BoundVisual)
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        let v = self.vocab_size() as TokenId;
        match tokens.iter().find(|&&t| t >= v) {
            Some(&t) => Err(PolicyError::UnknownToken(t)),
            None => Ok(()),
        }
    }

    /// Token features for predicting position `j` of `tokens`.
    pub fn token_features(
        &self,
        visual: &BoundVisual,
        prompt: &[TokenId],
        tokens: &[TokenId],
        j: usize,
    ) -> SparseFeatures {
        let fm = &self.feature_map;
        let mut features = Vec::with_capacity(fm.context_window + visual.0.len() + 1);
        for slot in 0..fm.context_window.min(j) {
            let token = tokens[j - 1 - slot] as usize;
            features.push((slot * fm.vocab_size + token, 1.0));
        }
        let offset = fm.attribute_offset();
        features.extend(visual.0.iter().map(|&a| (offset + a, 1.0)));
        if fm.bias {
            features.push((fm.bias_index(), 1.0));
        }
        if fm.include_prompt {
            let mut bag: Vec<TokenId> = prompt.to_vec();
            bag.sort_unstable();
            bag.dedup();
            let offset = fm.prompt_offset();
            features.extend(bag.into_iter().map(|t| (offset + t as usize, 1.0)));
        }
        features
    }

    fn logits(&self, features: &[(usize, f64)]) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|k| self.token_weights.row_dot_sparse(k, features))
            .collect()
    }

    /// Next-token distribution at position `j`.
    pub fn step_distribution(
        &self,
        visual: &BoundVisual,
        prompt: &[TokenId],
        tokens: &[TokenId],
        j: usize,
    ) -> Vec<f64> {
        softmax(&self.logits(&self.token_features(visual, prompt, tokens, j)))
    }

    /// `Σ_j log π(t_j | v, l, t_<j)` over the scored positions of the trace.
    pub fn sequence_logprob(
        &self,
        v: &VisualContext,
        prompt: &[TokenId],
        trace: &ThinkingTrace,
    ) -> Result<f64, PolicyError> {
        let visual = self.bind_visual(v)?;
        self.check_tokens(prompt)?;
        self.check_tokens(trace.tokens())?;
        Ok(self.sequence_logprob_bound(&visual, prompt, trace))
    }

    fn sequence_logprob_bound(
        &self,
        visual: &BoundVisual,
        prompt: &[TokenId],
        trace: &ThinkingTrace,
    ) -> f64 {
        let tokens = trace.tokens();
        let mut total = 0.0;
        for j in trace.scored_positions() {
            let logits = self.logits(&self.token_features(visual, prompt, tokens, j));
            total += logits[tokens[j] as usize] - log_sum_exp(&logits);
        }
        total
    }

    /// Gradient of [`PolicyParams::sequence_logprob`] with respect to the
    /// token weights: `Σ_j (onehot(t_j) − softmax_j) ⊗ φ_j`.
    pub fn grad_sequence_logprob(
        &self,
        v: &VisualContext,
        prompt: &[TokenId],
        trace: &ThinkingTrace,
    ) -> Result<Matrix, PolicyError> {
        let mut grad = Matrix::zeros(self.token_weights.rows(), self.token_weights.cols());
        self.accumulate_grad_sequence_logprob(v, prompt, trace, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// `grad += scale · ∇ sequence_logprob`.
    pub fn accumulate_grad_sequence_logprob(
        &self,
        v: &VisualContext,
        prompt: &[TokenId],
        trace: &ThinkingTrace,
        scale: f64,
        grad: &mut Matrix,
    ) -> Result<(), PolicyError> {
        let visual = self.bind_visual(v)?;
        self.check_tokens(prompt)?;
        self.check_tokens(trace.tokens())?;
        let tokens = trace.tokens();
        for j in trace.scored_positions() {
            let features = self.token_features(&visual, prompt, tokens, j);
            let probs = softmax(&self.logits(&features));
            let target = tokens[j] as usize;
            for (k, p) in probs.iter().enumerate() {
                let coeff = scale * (f64::from(u8::from(k == target)) - p);
                let row = grad.row_mut(k);
                for &(f, x) in &features {
                    row[f] += coeff * x;
                }
            }
        }
        Ok(())
    }

    /// Policy probability of each content token of the think span found in
    /// `tokens`, keyed by position.
    fn grounding_weights(
        &self,
        visual: &BoundVisual,
        prompt: &[TokenId],
        tokens: &[TokenId],
    ) -> Vec<(usize, f64)> {
        let Some(open) = tokens.iter().position(|&t| t == self.markers.think_open) else {
            return Vec::new();
        };
        let end = tokens[open + 1..]
            .iter()
            .position(|&t| t == self.markers.think_close)
            .map_or(tokens.len(), |c| open + 1 + c);
        (open + 1..end)
            .map(|j| {
                let probs = self.step_distribution(visual, prompt, tokens, j);
                (j, probs[tokens[j] as usize])
            })
            .collect()
    }

    fn head_features(&self, visual: &BoundVisual, bag: &BTreeMap<TokenId, f64>) -> SparseFeatures {
        let fm = &self.feature_map;
        let mut features: SparseFeatures = bag.iter().map(|(&t, &w)| (t as usize, w)).collect();
        let offset = fm.vocab_size;
        features.extend(visual.0.iter().map(|&a| (offset + a, 1.0)));
        if fm.bias {
            features.push((offset + fm.attributes.len(), 1.0));
        }
        features
    }

    fn head_distribution(&self, features: &[(usize, f64)]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.labels.len())
            .map(|r| self.head_weights.row_dot_sparse(r, features))
            .collect();
        softmax(&logits)
    }

    /// Head feature vector for the think-span content found in `prefix`.
    pub fn label_features(
        &self,
        v: &VisualContext,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<SparseFeatures, PolicyError> {
        let visual = self.bind_visual(v)?;
        self.check_tokens(prompt)?;
        self.check_tokens(prefix)?;
        let mut bag = BTreeMap::new();
        for (j, w) in self.grounding_weights(&visual, prompt, prefix) {
            *bag.entry(prefix[j]).or_insert(0.0) += w;
        }
        Ok(self.head_features(&visual, &bag))
    }

    /// Label distribution `z` after reading `prefix`.
    pub fn predict_label(
        &self,
        v: &VisualContext,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<Vec<f64>, PolicyError> {
        let features = self.label_features(v, prompt, prefix)?;
        Ok(self.head_distribution(&features))
    }

    /// `z_j` for every think-span position `j`, each computed from the prefix
    /// before `j`.
    pub fn label_stream(
        &self,
        v: &VisualContext,
        prompt: &[TokenId],
        trace: &ThinkingTrace,
    ) -> Result<Vec<Vec<f64>>, PolicyError> {
        let visual = self.bind_visual(v)?;
        self.check_tokens(prompt)?;
        self.check_tokens(trace.tokens())?;
        let tokens = trace.tokens();
        let weights: BTreeMap<usize, f64> = self
            .grounding_weights(&visual, prompt, tokens)
            .into_iter()
            .collect();
        let mut bag = BTreeMap::new();
        let mut stream = Vec::new();
        for j in trace.span_positions() {
            if j > 0 {
                if let Some(&w) = weights.get(&(j - 1)) {
                    *bag.entry(tokens[j - 1]).or_insert(0.0) += w;
                }
            }
            stream.push(self.head_distribution(&self.head_features(&visual, &bag)));
        }
        Ok(stream)
    }

    /// Perception frames over the attribute slots: at each think-span position,
    /// the softmax of the emitted token's visual weights restricted to the
    /// attributes present in `v`. `None` when `v` has no attributes.
    pub fn attention_frames(
        &self,
        v: &VisualContext,
        trace: &ThinkingTrace,
    ) -> Result<Option<Vec<AttentionFrame>>, PolicyError> {
        let visual = self.bind_visual(v)?;
        self.check_tokens(trace.tokens())?;
        if visual.0.is_empty() {
            return Ok(None);
        }
        let offset = self.feature_map.attribute_offset();
        let width = self.feature_map.attributes.len();
        let tokens = trace.tokens();
        let frames = trace
            .span_positions()
            .map(|j| {
                let row = self.token_weights.row(tokens[j] as usize);
                let scores: Vec<f64> = visual.0.iter().map(|&a| row[offset + a]).collect();
                let probs = softmax(&scores);
                let mut weights = vec![0.0; width];
                for (&a, p) in visual.0.iter().zip(probs) {
                    weights[a] = p;
                }
                AttentionFrame::new(weights)
            })
            .collect();
        Ok(Some(frames))
    }

    /// Autoregressive decoding from the think-open marker.
    ///
    /// Temperature 0 is argmax decoding with ties going to the lowest token
    /// id. Generation stops after the think-close marker or at `max_len`
    /// tokens. Emitting a second think-open marker also stops generation and
    /// leaves the trace truncated, so sampled step frequencies follow the
    /// policy exactly.
    pub fn sample_trace(
        &self,
        v: &VisualContext,
        prompt: &[TokenId],
        max_len: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<ThinkingTrace, PolicyError> {
        if max_len < 2 {
            return Err(PolicyError::InvalidConfig(
                "max length must leave room for both markers".into(),
            ));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(PolicyError::InvalidConfig(
                "temperature must be a nonnegative real".into(),
            ));
        }
        let visual = self.bind_visual(v)?;
        self.check_tokens(prompt)?;
        let mut tokens = vec![self.markers.think_open];
        while tokens.len() < max_len {
            let j = tokens.len();
            let logits = self.logits(&self.token_features(&visual, prompt, &tokens, j));
            let next = if temperature == 0.0 {
                argmax(&logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                let probs = softmax(&scaled);
                WeightedIndex::new(&probs)
                    .map_err(|e| {
                        PolicyError::InvalidConfig(format!("degenerate step distribution: {e}"))
                    })?
                    .sample(rng)
            } as TokenId;
            if next == self.markers.think_open {
                break;
            }
            tokens.push(next);
            if next == self.markers.think_close {
                break;
            }
        }
        Ok(ThinkingTrace::new(tokens, self.markers)
            .expect("decoded trace keeps a single think span"))
    }

    pub fn to_checkpoint_json(&self) -> String {
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            feature_map: self.feature_map.clone(),
            markers: self.markers,
            labels: self.labels.clone(),
            token_weights: self.token_weights.clone(),
            head_weights: self.head_weights.clone(),
        };
        let mut text = serde_json::to_string(&doc).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, PolicyError> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(PolicyError::Checkpoint(format!(
                "unexpected format {:?}",
                doc.format
            )));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported version {}",
                doc.version
            )));
        }
        let mut params = Self::zeros(doc.feature_map, doc.markers, doc.labels)?;
        if !params.token_weights.same_shape(&doc.token_weights)
            || !params.head_weights.same_shape(&doc.head_weights)
        {
            return Err(PolicyError::Checkpoint(
                "weight shapes do not match the feature map".into(),
            ));
        }
        if !doc.token_weights.is_finite() || !doc.head_weights.is_finite() {
            return Err(PolicyError::Checkpoint("non-finite weight".into()));
        }
        params.token_weights = doc.token_weights;
        params.head_weights = doc.head_weights;
        Ok(params)
    }
}

const CHECKPOINT_FORMAT: &str = "cpodrift-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    feature_map: FeatureMapConfig,
    markers: Markers,
    labels: Vec<String>,
    token_weights: Matrix,
    head_weights: Matrix,
}

/// Frozen copy of a policy, used as the reference in preference training.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyParams>);

impl PolicySnapshot {
    pub fn freeze(params: &PolicyParams) -> Self {
        Self(Arc::new(params.clone()))
    }
}

impl std::ops::Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    const M: Markers = Markers {
        think_open: 0,
        think_close: 1,
    };

    fn attrs() -> Vec<String> {
        vec!["a0".into(), "a1".into(), "a2".into()]
    }

    fn params(vocab: usize, seed: u64) -> PolicyParams {
        let fm = FeatureMapConfig::new(2, vocab, attrs(), true);
        PolicyParams::random(
            fm,
            M,
            vec!["x".into(), "y".into(), "z".into()],
            0.8,
            &mut rng_from_seed(seed),
        )
        .unwrap()
    }

    fn visual() -> VisualContext {
        VisualContext::new("v", ["a0", "a2"])
    }

    fn trace(tokens: &[TokenId]) -> ThinkingTrace {
        ThinkingTrace::new(tokens.to_vec(), M).unwrap()
    }

    #[test]
    fn feature_length_formula() {
        let mut fm = FeatureMapConfig::new(3, 8, attrs(), true);
        assert_eq!(fm.token_feature_len(), 3 * 8 + 3 + 1);
        assert_eq!(fm.head_feature_len(), 8 + 3 + 1);
        fm.include_prompt = true;
        assert_eq!(fm.token_feature_len(), 3 * 8 + 3 + 1 + 8);
        fm.context_window = 0;
        assert!(PolicyParams::zeros(fm, M, vec!["x".into()]).is_err());
    }

    #[test]
    fn uniform_policy_logprob() {
        let fm = FeatureMapConfig::new(1, 8, attrs(), true);
        let p = PolicyParams::zeros(fm, M, vec!["x".into()]).unwrap();
        let lp = p
            .sequence_logprob(&visual(), &[], &trace(&[0, 2, 3, 4, 5, 1]))
            .unwrap();
        assert!((lp - 5.0 * (1.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!((lp - (-10.3972)).abs() < 1e-4);
        assert_eq!(
            p.sequence_logprob(&visual(), &[], &trace(&[0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn unknown_tokens_and_attributes() {
        let p = params(6, 1);
        assert!(matches!(
            p.sequence_logprob(&visual(), &[], &trace(&[0, 9, 1])),
            Err(PolicyError::UnknownToken(9))
        ));
        assert!(matches!(
            p.predict_label(&VisualContext::new("v", ["zz"]), &[], &[0]),
            Err(PolicyError::UnknownAttribute(_))
        ));
    }

    /// Dense recomputation of one step's softmax straight from the weights.
    fn dense_step(p: &PolicyParams, v: &VisualContext, tokens: &[TokenId], j: usize) -> Vec<f64> {
        let fm = &p.feature_map;
        let mut phi = vec![0.0; fm.token_feature_len()];
        for slot in 0..fm.context_window {
            if j > slot {
                phi[slot * fm.vocab_size + tokens[j - 1 - slot] as usize] = 1.0;
            }
        }
        for a in &v.attributes {
            let i = fm.attributes.iter().position(|x| x == a).unwrap();
            phi[fm.context_window * fm.vocab_size + i] = 1.0;
        }
        if fm.bias {
            phi[fm.context_window * fm.vocab_size + fm.attributes.len()] = 1.0;
        }
        let logits: Vec<f64> = (0..fm.vocab_size)
            .map(|k| {
                (0..phi.len())
                    .map(|f| p.token_weights.get(k, f) * phi[f])
                    .sum()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits.iter().map(|l| (l - m).exp() / z).collect()
    }

    #[test]
    fn logprob_matches_stepwise_oracle() {
        for seed in 0..20 {
            let p = params(7, seed);
            let tokens = [4, 0, 2, 5, 3, 6, 1];
            let t = trace(&tokens);
            let oracle: f64 = (2..7)
                .map(|j| dense_step(&p, &visual(), &tokens, j)[tokens[j] as usize].ln())
                .sum();
            let got = p.sequence_logprob(&visual(), &[], &t).unwrap();
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
            assert!(got <= 0.0);
        }
    }

    #[test]
    fn continuations_sum_to_one() {
        let p = params(6, 3);
        let prefix = [0, 2, 3];
        let total: f64 = (0..6)
            .map(|t| {
                let mut tokens = prefix.to_vec();
                tokens.push(t);
                // Scoring only the last position: difference of two prefixes.
                let full = p.step_distribution(&p.bind_visual(&visual()).unwrap(), &[], &tokens, 3);
                full[t as usize]
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_policy_one_step_gradient_is_closed_form() {
        let fm = FeatureMapConfig::new(1, 5, attrs(), true);
        let p = PolicyParams::zeros(fm, M, vec!["x".into()]).unwrap();
        let t = trace(&[0, 3]);
        let g = p.grad_sequence_logprob(&visual(), &[], &t).unwrap();
        let phi = p.token_features(&p.bind_visual(&visual()).unwrap(), &[], t.tokens(), 1);
        let mut expected = Matrix::zeros(5, p.feature_map.token_feature_len());
        for k in 0..5 {
            let coeff = if k == 3 { 1.0 - 0.2 } else { -0.2 };
            for &(f, x) in &phi {
                expected.set(k, f, coeff * x);
            }
        }
        assert_eq!(g, expected);
        // Rows of tokens never emitted carry only the negative softmax term.
        for k in [0usize, 1, 2, 4] {
            assert!(g.row(k).iter().all(|&x| x <= 0.0));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..100 {
            let p = params(6, 100 + seed);
            let t = trace(&[0, 2, 5, 3, 3, 4, 1]);
            let v = visual();
            let g = p.grad_sequence_logprob(&v, &[], &t).unwrap();
            let h = 1e-5;
            let mut fd = Matrix::zeros(g.rows(), g.cols());
            for i in 0..g.as_slice().len() {
                let mut plus = p.clone();
                plus.token_weights.as_mut_slice()[i] += h;
                let mut minus = p.clone();
                minus.token_weights.as_mut_slice()[i] -= h;
                let d = (plus.sequence_logprob(&v, &[], &t).unwrap()
                    - minus.sequence_logprob(&v, &[], &t).unwrap())
                    / (2.0 * h);
                fd.as_mut_slice()[i] = d;
            }
            let mut diff = g.clone();
            diff.axpy(-1.0, &fd);
            let rel = diff.frobenius_norm() / g.frobenius_norm().max(fd.frobenius_norm());
            assert!(rel <= 1e-6, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn increasing_an_active_weight_raises_its_probability() {
        let p = params(6, 9);
        let v = visual();
        let bound = p.bind_visual(&v).unwrap();
        let tokens = [0, 2, 4];
        let phi = p.token_features(&bound, &[], &tokens, 3);
        let before = p.step_distribution(&bound, &[], &tokens, 3);
        for &(f, _) in &phi {
            let mut q = p.clone();
            let w = q.token_weights.get(5, f);
            q.token_weights.set(5, f, w + 0.1);
            let after = q.step_distribution(&bound, &[], &tokens, 3);
            assert!(after[5] > before[5]);
        }
    }

    #[test]
    fn label_head_basics() {
        let fm = FeatureMapConfig::new(1, 6, attrs(), true);
        let zero = PolicyParams::zeros(
            fm.clone(),
            M,
            vec!["x".into(), "y".into(), "z".into(), "w".into()],
        )
        .unwrap();
        assert_eq!(
            zero.predict_label(&visual(), &[], &[0, 2, 3]).unwrap(),
            vec![0.25; 4]
        );

        let mut single = PolicyParams::zeros(fm, M, vec!["only".into()]).unwrap();
        single.head_weights.as_mut_slice()[0] = 3.7;
        assert_eq!(
            single.predict_label(&visual(), &[], &[0, 2, 3]).unwrap(),
            vec![1.0]
        );
    }

    /// Dense recomputation of the head distribution from raw weights.
    fn dense_label(p: &PolicyParams, v: &VisualContext, prefix: &[TokenId]) -> Vec<f64> {
        let fm = &p.feature_map;
        let mut xi = vec![0.0; fm.head_feature_len()];
        let open = prefix.iter().position(|&t| t == 0);
        if let Some(open) = open {
            for j in open + 1..prefix.len() {
                if prefix[j] == 1 {
                    break;
                }
                xi[prefix[j] as usize] += dense_step(p, v, prefix, j)[prefix[j] as usize];
            }
        }
        for a in &v.attributes {
            xi[fm.vocab_size + fm.attributes.iter().position(|x| x == a).unwrap()] = 1.0;
        }
        if fm.bias {
            xi[fm.vocab_size + fm.attributes.len()] = 1.0;
        }
        let logits: Vec<f64> = (0..p.labels.len())
            .map(|r| {
                (0..xi.len())
                    .map(|f| p.head_weights.get(r, f) * xi[f])
                    .sum()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        logits.iter().map(|l| (l - m).exp() / z).collect()
    }

    #[test]
    fn predict_label_matches_dense_oracle() {
        for seed in 0..20 {
            let p = params(7, 500 + seed);
            let prefix = [0, 3, 4, 3, 1, 5];
            let got = p.predict_label(&visual(), &[], &prefix).unwrap();
            let want = dense_label(&p, &visual(), &prefix);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_is_shift_invariant() {
        let p = params(7, 42);
        let mut shifted = p.clone();
        let shift: Vec<f64> = (0..p.head_weights.cols())
            .map(|i| 0.37 * i as f64 - 1.0)
            .collect();
        for r in 0..p.labels.len() {
            for (w, s) in shifted.head_weights.row_mut(r).iter_mut().zip(&shift) {
                *w += s;
            }
        }
        let a = p.predict_label(&visual(), &[], &[0, 3, 4, 1]).unwrap();
        let b = shifted
            .predict_label(&visual(), &[], &[0, 3, 4, 1])
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn label_stream_agrees_with_prefix_predictions() {
        let p = params(7, 11);
        let t = trace(&[0, 3, 4, 5, 1]);
        let stream = p.label_stream(&visual(), &[], &t).unwrap();
        assert_eq!(stream.len(), 5);
        for (k, j) in t.span_positions().enumerate() {
            let direct = p.predict_label(&visual(), &[], &t.tokens()[..j]).unwrap();
            for (a, b) in stream[k].iter().zip(&direct) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn greedy_decoding_is_seed_independent_and_sampling_is_seeded() {
        let p = params(7, 5);
        let a = p
            .sample_trace(&visual(), &[], 8, 0.0, &mut rng_from_seed(1))
            .unwrap();
        let b = p
            .sample_trace(&visual(), &[], 8, 0.0, &mut rng_from_seed(2))
            .unwrap();
        assert_eq!(a, b);
        let c = p
            .sample_trace(&visual(), &[], 8, 1.0, &mut rng_from_seed(3))
            .unwrap();
        let d = p
            .sample_trace(&visual(), &[], 8, 1.0, &mut rng_from_seed(3))
            .unwrap();
        assert_eq!(c, d);
        assert_eq!(c.tokens()[0], 0);
        assert!(c.len() <= 8);
        assert!(p
            .sample_trace(&visual(), &[], 1, 0.0, &mut rng_from_seed(1))
            .is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        let fm = FeatureMapConfig::new(1, 5, attrs(), true);
        let p = PolicyParams::zeros(fm, M, vec!["x".into()]).unwrap();
        // All logits tie: token 0 is the think-open marker, which ends decoding.
        let t = p
            .sample_trace(&visual(), &[], 6, 0.0, &mut rng_from_seed(0))
            .unwrap();
        assert_eq!(t.tokens(), &[0]);
        assert_eq!(argmax(&[0.5, 2.0, 2.0, 1.0]), 1);
    }

    #[test]
    fn attention_frames_are_distributions_over_bag() {
        let p = params(7, 8);
        let t = trace(&[0, 3, 4, 1]);
        let frames = p.attention_frames(&visual(), &t).unwrap().unwrap();
        assert_eq!(frames.len(), 4);
        for f in &frames {
            assert_eq!(f.len(), 3);
            assert_eq!(f.weights[1], 0.0);
            assert!((f.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(p
            .attention_frames(&VisualContext::new("e", Vec::<String>::new()), &t)
            .unwrap()
            .is_none());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = params(7, 77);
        let text = p.to_checkpoint_json();
        let q = PolicyParams::from_checkpoint_json(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_checkpoint_json(), text);
        assert!(PolicyParams::from_checkpoint_json(
            &text.replace("\"version\":1", "\"version\":9")
        )
        .is_err());
    }
}
