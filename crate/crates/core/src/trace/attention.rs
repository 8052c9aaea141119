use serde::{Deserialize, Serialize};

use super::TraceError;

/// Masked prefix length applied to attention frames before comparison; the
/// earliest visual tokens act as an attention sink.
pub const DEFAULT_SINK_MASK: usize = 10;

/// Attention weights over visual tokens for one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionFrame {
    pub weights: Vec<f64>,
}

impl AttentionFrame {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Zeroes the first `sink_mask` weights and rescales the rest to unit sum.
pub fn normalize_attention(
    frame: &AttentionFrame,
    sink_mask: usize,
) -> Result<AttentionFrame, TraceError> {
    let len = frame.len();
    if sink_mask >= len {
        return Err(TraceError::BadMask {
            mask: sink_mask,
            len,
        });
    }
    if frame.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(TraceError::InvalidEntry {
            what: "attention frame".into(),
        });
    }
    let tail: f64 = frame.weights[sink_mask..].iter().sum();
    if tail <= 0.0 {
        return Err(TraceError::DegenerateFrame);
    }
    let weights = frame
        .weights
        .iter()
        .enumerate()
        .map(|(i, &w)| if i < sink_mask { 0.0 } else { w / tail })
        .collect();
    Ok(AttentionFrame { weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masks_sink_on_256_frame() {
        let weights: Vec<f64> = (0..256).map(|i| if i < 10 { 0.05 } else { 1.0 }).collect();
        let out = normalize_attention(&AttentionFrame::new(weights), DEFAULT_SINK_MASK).unwrap();
        assert!(out.weights[..10].iter().all(|&w| w == 0.0));
        let sum: f64 = out.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!((out.weights[10] - 1.0 / 246.0).abs() < 1e-15);
    }

    #[test]
    fn zero_mask_is_identity_on_normalized_frame() {
        let frame = AttentionFrame::new(vec![0.25, 0.5, 0.125, 0.125]);
        assert_eq!(normalize_attention(&frame, 0).unwrap(), frame);
    }

    #[test]
    fn degenerate_and_bad_mask() {
        let mut weights = vec![0.0; 256];
        for w in &mut weights[..10] {
            *w = 0.1;
        }
        assert!(matches!(
            normalize_attention(&AttentionFrame::new(weights), 10),
            Err(TraceError::DegenerateFrame)
        ));
        assert!(matches!(
            normalize_attention(&AttentionFrame::new(vec![0.5, 0.5]), 2),
            Err(TraceError::BadMask { .. })
        ));
    }

    proptest! {
        #[test]
        fn output_is_unit_sum_and_order_preserving(
            weights in prop::collection::vec(0.0f64..10.0, 2..64),
            mask in 0usize..8,
        ) {
            let mask = mask.min(weights.len() - 1);
            prop_assume!(weights[mask..].iter().sum::<f64>() > 0.0);
            let out = normalize_attention(&AttentionFrame::new(weights.clone()), mask).unwrap();
            let sum: f64 = out.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for i in mask..weights.len() {
                for j in mask..weights.len() {
                    if weights[i] < weights[j] {
                        prop_assert!(out.weights[i] <= out.weights[j]);
                    }
                }
            }
        }
    }
}
