//! Stepwise drift measurement over cognitive-state streams.
//!
//! A stream is a sequence of distributions, either label distributions `z_j`
//! (thinking channel) or attention frames (perception channel). Consecutive
//! steps are compared with a bounded divergence; runs of steps above a
//! threshold become drift events.

use serde::{Deserialize, Serialize};

use crate::policy::{PolicyError, PolicyParams};
use crate::trace::{
    extract_attribute_mentions, normalize_attention, AttentionFrame, AttributeLexicon, Mention,
    ThinkingTrace, TokenId, TraceError, VisualContext, UNIT_SUM_TOL,
};

#[derive(Debug, thiserror::Error)]
pub enum DriftError {
    #[error("a divergence series needs at least two steps, got {0}")]
    TooShort(usize),
    #[error("step {step} is not a distribution (sum = {sum})")]
    NotNormalized { step: usize, sum: f64 },
    #[error("step {step} has width {found}, expected {expected}")]
    WidthMismatch {
        step: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid drift config: {0}")]
    InvalidConfig(String),
    #[error("mention does not match the trace: {0}")]
    SpanMismatch(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    TotalVariation,
    /// `KL(p̃‖q̃) + KL(q̃‖p̃)` on ε-smoothed, renormalized distributions.
    SymmetricKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub divergence: Divergence,
    /// Events fire strictly above this value.
    pub threshold: f64,
    /// Localization window τ: an injected change at step `j` should be
    /// reported within `[j, j + τ]`.
    pub window: usize,
    pub sink_mask: usize,
    pub smoothing: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            divergence: Divergence::TotalVariation,
            threshold: 0.1,
            window: 3,
            sink_mask: crate::trace::DEFAULT_SINK_MASK,
            smoothing: 1e-9,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<(), DriftError> {
        if self.window == 0 {
            return Err(DriftError::InvalidConfig(
                "window must be at least 1".into(),
            ));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(DriftError::InvalidConfig(
                "threshold must be nonnegative".into(),
            ));
        }
        if self.divergence == Divergence::SymmetricKl
            && (self.smoothing.is_nan() || self.smoothing <= 0.0)
        {
            return Err(DriftError::InvalidConfig(
                "symmetric KL needs positive smoothing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Thinking,
    Perception,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub position: usize,
    pub channel: Channel,
    pub magnitude: f64,
}

/// Divergence between two distributions of equal width.
pub fn divergence(p: &[f64], q: &[f64], config: &DriftConfig) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    match config.divergence {
        Divergence::TotalVariation => {
            0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
        }
        Divergence::SymmetricKl => {
            let eps = config.smoothing;
            let norm = 1.0 + eps * p.len() as f64;
            // Σ (p̃ − q̃)(ln p̃ − ln q̃) equals the sum of both KL directions and
            // is symmetric term by term.
            p.iter()
                .zip(q)
                .map(|(a, b)| {
                    let a = (a + eps) / norm;
                    let b = (b + eps) / norm;
                    (a - b) * (a.ln() - b.ln())
                })
                .sum()
        }
    }
}

fn check_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<(), DriftError> {
    let width = rows.first().map_or(0, |r| r.as_ref().len());
    for (step, row) in rows.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != width {
            return Err(DriftError::WidthMismatch {
                step,
                expected: width,
                found: row.len(),
            });
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > UNIT_SUM_TOL {
            return Err(DriftError::NotNormalized { step, sum });
        }
    }
    Ok(())
}

/// Entry `k` is the divergence between steps `k` and `k + 1`.
pub fn divergence_series<R: AsRef<[f64]>>(
    steps: &[R],
    config: &DriftConfig,
) -> Result<Vec<f64>, DriftError> {
    config.validate()?;
    if steps.len() < 2 {
        return Err(DriftError::TooShort(steps.len()));
    }
    check_rows(steps)?;
    Ok(steps
        .windows(2)
        .map(|w| divergence(w[0].as_ref(), w[1].as_ref(), config))
        .collect())
}

/// Pairwise divergence between two aligned streams, step by step.
pub fn paired_divergence<R: AsRef<[f64]>>(
    a: &[R],
    b: &[R],
    config: &DriftConfig,
) -> Result<Vec<f64>, DriftError> {
    config.validate()?;
    check_rows(a)?;
    check_rows(b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(p, q)| divergence(p.as_ref(), q.as_ref(), config))
        .collect())
}

/// One event per maximal run of entries above the threshold, placed at the
/// run's peak (earliest index on ties). Positions are series indices.
pub fn detect_events(series: &[f64], config: &DriftConfig, channel: Channel) -> Vec<DriftEvent> {
    let mut events = Vec::new();
    let mut peak: Option<(usize, f64)> = None;
    for (k, &value) in series.iter().enumerate() {
        if value > config.threshold {
            match peak {
                Some((_, best)) if value <= best => {}
                _ => peak = Some((k, value)),
            }
        } else if let Some((position, magnitude)) = peak.take() {
            events.push(DriftEvent {
                position,
                channel,
                magnitude,
            });
        }
    }
    if let Some((position, magnitude)) = peak {
        events.push(DriftEvent {
            position,
            channel,
            magnitude,
        });
    }
    events
}

/// Threshold set to twice the largest divergence seen on clean streams.
pub fn calibrate_threshold<'a>(clean_series: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    2.0 * clean_series
        .into_iter()
        .flat_map(|s| s.iter().copied())
        .fold(0.0, f64::max)
}

/// Divergence series and events for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub record_id: String,
    pub config: DriftConfig,
    /// Absolute token position of series index 0.
    pub span_start: usize,
    pub thinking: Vec<f64>,
    pub perception: Option<Vec<f64>>,
    /// Events from both channels, ordered by position (thinking first on ties).
    pub events: Vec<DriftEvent>,
}

/// Builds a report from a label stream and optional raw attention frames.
/// Frames are normalized with the configured sink mask before comparison.
pub fn drift_report(
    record_id: &str,
    span_start: usize,
    z: &[Vec<f64>],
    frames: Option<&[AttentionFrame]>,
    config: &DriftConfig,
) -> Result<DriftReport, DriftError> {
    let thinking = divergence_series(z, config)?;
    let perception = match frames {
        Some(frames) => {
            let normalized = frames
                .iter()
                .map(|f| normalize_attention(f, config.sink_mask).map(|f| f.weights))
                .collect::<Result<Vec<_>, _>>()?;
            Some(divergence_series(&normalized, config)?)
        }
        None => None,
    };
    let mut events = detect_events(&thinking, config, Channel::Thinking);
    if let Some(series) = &perception {
        events.extend(detect_events(series, config, Channel::Perception));
    }
    for e in &mut events {
        e.position += span_start;
    }
    events.sort_by_key(|e| (e.position, e.channel == Channel::Perception));
    Ok(DriftReport {
        record_id: record_id.to_string(),
        config: *config,
        span_start,
        thinking,
        perception,
        events,
    })
}

/// Original-versus-perturbed comparison produced by [`counterfactual_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mention: String,
    pub replacement: String,
    pub position: usize,
    pub original_tokens: Vec<TokenId>,
    pub perturbed_tokens: Vec<TokenId>,
    /// Final-state label distributions.
    pub original_z: Vec<f64>,
    pub perturbed_z: Vec<f64>,
    /// `perturbed_z − original_z` per label.
    pub deltas: Vec<f64>,
    /// Length of the common token prefix of the two traces.
    pub shared_prefix: usize,
    /// Divergence between the two label streams at each aligned position.
    pub thinking: Vec<f64>,
    /// Divergence between the two attention streams at each aligned position.
    pub perception: Option<Vec<f64>>,
    /// Frames left over when the two traces differ in length.
    pub unmatched_frames: usize,
}

/// Swaps one attribute mention for another attribute's spelling and compares
/// the policy's label and attention streams on both traces. Streams are
/// aligned by absolute position; trailing unmatched steps are counted, not
/// compared.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_probe(
    policy: &PolicyParams,
    v: &VisualContext,
    prompt: &[TokenId],
    trace: &ThinkingTrace,
    lexicon: &AttributeLexicon,
    mention: &Mention,
    replacement: &str,
    config: &DriftConfig,
) -> Result<ProbeReport, DriftError> {
    config.validate()?;
    let expected = lexicon.spelling(&mention.attribute).ok_or_else(|| {
        DriftError::SpanMismatch(format!("unknown attribute {:?}", mention.attribute))
    })?;
    let end = mention.start + mention.len;
    if expected.len() != mention.len
        || end > trace.len()
        || trace.tokens()[mention.start..end] != *expected
    {
        return Err(DriftError::SpanMismatch(format!(
            "{:?} is not spelled at position {}",
            mention.attribute, mention.start
        )));
    }
    if !extract_attribute_mentions(trace, lexicon).contains(mention) {
        return Err(DriftError::SpanMismatch(format!(
            "{:?} at {} is not an extracted mention",
            mention.attribute, mention.start
        )));
    }
    let spelling = lexicon
        .spelling(replacement)
        .ok_or_else(|| DriftError::SpanMismatch(format!("unknown replacement {replacement:?}")))?;
    let perturbed = trace.splice(mention.start, mention.len, spelling)?;

    let original_z = policy.predict_label(v, prompt, trace.tokens())?;
    let perturbed_z = policy.predict_label(v, prompt, perturbed.tokens())?;
    let deltas = perturbed_z
        .iter()
        .zip(&original_z)
        .map(|(p, o)| p - o)
        .collect();
    let shared_prefix = trace
        .tokens()
        .iter()
        .zip(perturbed.tokens())
        .take_while(|(a, b)| a == b)
        .count();

    let stream_a = policy.label_stream(v, prompt, trace)?;
    let stream_b = policy.label_stream(v, prompt, &perturbed)?;
    let aligned = stream_a.len().min(stream_b.len());
    let thinking = paired_divergence(&stream_a[..aligned], &stream_b[..aligned], config)?;
    let unmatched_frames = stream_a.len().abs_diff(stream_b.len());

    let perception = match (
        policy.attention_frames(v, trace)?,
        policy.attention_frames(v, &perturbed)?,
    ) {
        (Some(a), Some(b)) => {
            let n = a.len().min(b.len());
            let a: Vec<Vec<f64>> = a[..n].iter().map(|f| f.weights.clone()).collect();
            let b: Vec<Vec<f64>> = b[..n].iter().map(|f| f.weights.clone()).collect();
            Some(paired_divergence(&a, &b, config)?)
        }
        _ => None,
    };

    Ok(ProbeReport {
        mention: mention.attribute.clone(),
        replacement: replacement.to_string(),
        position: mention.start,
        original_tokens: trace.tokens().to_vec(),
        perturbed_tokens: perturbed.tokens().to_vec(),
        original_z,
        perturbed_z,
        deltas,
        shared_prefix,
        thinking,
        perception,
        unmatched_frames,
    })
}
