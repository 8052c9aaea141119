//! Supervised fitting: maximum likelihood on gold traces for the token
//! policy, cross-entropy on gold labels for the prediction head, and a
//! head initialized directly from concept-graph relations.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{ConceptGraph, RelationKind};
use crate::matrix::Matrix;
use crate::policy::{softmax, PolicyError, PolicyParams, SparseFeatures};
use crate::seed::stream;
use crate::trace::{AttributeLexicon, TraceRecord};

#[derive(Debug, thiserror::Error)]
pub enum SupervisedError {
    #[error("no training records")]
    NoRecords,
    #[error("invalid supervised config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            epochs: 20,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Probability of hiding the visual indicators from the head for one
    /// record in one epoch, so that it also learns to read the trace.
    pub visual_dropout: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            epochs: 200,
            l2: 1e-3,
            visual_dropout: 0.5,
            seed: 0,
        }
    }
}

fn check_rate(lr: f64) -> Result<(), SupervisedError> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(SupervisedError::InvalidConfig(
            "learning rate must be positive".into(),
        ))
    }
}

/// Mean negative log-likelihood of the records' traces and its gradient
/// with respect to the token weights.
pub fn mle_loss_and_grad(
    params: &PolicyParams,
    records: &[&TraceRecord],
) -> Result<(f64, Matrix), SupervisedError> {
    if records.is_empty() {
        return Err(SupervisedError::NoRecords);
    }
    let n = records.len() as f64;
    let mut grad = Matrix::zeros(params.token_weights.rows(), params.token_weights.cols());
    let mut loss = 0.0;
    for r in records {
        loss -= params.sequence_logprob(&r.visual, &r.prompt, &r.trace)?;
        params.accumulate_grad_sequence_logprob(
            &r.visual,
            &r.prompt,
            &r.trace,
            -1.0 / n,
            &mut grad,
        )?;
    }
    Ok((loss / n, grad))
}

/// Minibatch gradient descent on the trace likelihood. Returns the mean
/// per-epoch loss.
pub fn train_mle(
    params: &PolicyParams,
    records: &[TraceRecord],
    config: &MleConfig,
) -> Result<(PolicyParams, Vec<f64>), SupervisedError> {
    run_mle(params, records, config, mle_steps(records.len(), config))
}

/// Like [`train_mle`] but stops after exactly `steps` minibatch updates,
/// reshuffling at each epoch boundary. The last entry of the history covers
/// a partial epoch when `steps` is not a whole number of epochs.
pub fn train_mle_for_steps(
    params: &PolicyParams,
    records: &[TraceRecord],
    config: &MleConfig,
    steps: usize,
) -> Result<(PolicyParams, Vec<f64>), SupervisedError> {
    run_mle(params, records, config, steps)
}

fn run_mle(
    params: &PolicyParams,
    records: &[TraceRecord],
    config: &MleConfig,
    steps: usize,
) -> Result<(PolicyParams, Vec<f64>), SupervisedError> {
    check_rate(config.lr)?;
    if config.batch_size == 0 {
        return Err(SupervisedError::InvalidConfig(
            "batch size must be at least 1".into(),
        ));
    }
    if records.is_empty() {
        return Err(SupervisedError::NoRecords);
    }
    let mut current = params.clone();
    let mut rng = stream(config.seed, "mle");
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::new();
    let mut remaining = steps;
    while remaining > 0 {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(config.batch_size).take(remaining) {
            let batch: Vec<&TraceRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let (loss, grad) = mle_loss_and_grad(&current, &batch)?;
            total += loss * batch.len() as f64;
            seen += batch.len();
            current.token_weights.axpy(-config.lr, &grad);
            remaining -= 1;
        }
        history.push(total / seen as f64);
    }
    Ok((current, history))
}

/// Number of minibatch steps [`train_mle`] takes.
pub fn mle_steps(records: usize, config: &MleConfig) -> usize {
    config.epochs * records.div_ceil(config.batch_size.max(1))
}

/// Cross-entropy fit of the prediction head on each record's full think
/// span. Token weights are held fixed, so head features are computed once.
pub fn fit_head(
    params: &PolicyParams,
    records: &[TraceRecord],
    config: &HeadConfig,
) -> Result<(PolicyParams, Vec<f64>), SupervisedError> {
    check_rate(config.lr)?;
    if !(0.0..=1.0).contains(&config.visual_dropout) {
        return Err(SupervisedError::InvalidConfig(
            "visual dropout must lie in [0, 1]".into(),
        ));
    }
    if records.is_empty() {
        return Err(SupervisedError::NoRecords);
    }
    let vocab = params.feature_map.vocab_size;
    let visual_end = vocab + params.feature_map.attributes.len();
    let data: Vec<(SparseFeatures, usize)> = records
        .iter()
        .map(|r| {
            Ok((
                params.label_features(&r.visual, &r.prompt, r.trace.tokens())?,
                params.label_index(&r.gold_label)?,
            ))
        })
        .collect::<Result<_, PolicyError>>()?;
    let mut current = params.clone();
    let mut rng = stream(config.seed, "head");
    let n = data.len() as f64;
    let labels = current.labels.len();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut grad = current.head_weights.clone();
        grad.scale(config.l2);
        let mut loss = 0.0;
        for (features, y) in &data {
            let hide = rng.random_bool(config.visual_dropout);
            let features: SparseFeatures = features
                .iter()
                .copied()
                .filter(|&(i, _)| !(hide && (vocab..visual_end).contains(&i)))
                .collect();
            let logits: Vec<f64> = (0..labels)
                .map(|k| current.head_weights.row_dot_sparse(k, &features))
                .collect();
            let z = softmax(&logits);
            loss -= z[*y].max(f64::MIN_POSITIVE).ln();
            for (k, p) in z.iter().enumerate() {
                let coeff = (p - f64::from(u8::from(k == *y))) / n;
                let row = grad.row_mut(k);
                for &(i, x) in &features {
                    row[i] += coeff * x;
                }
            }
        }
        current.head_weights.axpy(-config.lr, &grad);
        history.push(loss / n);
    }
    Ok((current, history))
}

/// Sets the head from the graph: for label entity `e`, each attribute
/// contributes `+w` when associated with `e` and `−w` when excluded by it,
/// with `w = visual_weight` on the attribute's indicator and
/// `w = token_weight` spread over the tokens of its name. Labels that are
/// not graph entities get zero rows.
pub fn knowledge_head(
    params: &PolicyParams,
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
    visual_weight: f64,
    token_weight: f64,
) -> PolicyParams {
    let mut out = params.clone();
    out.head_weights.scale(0.0);
    let vocab = params.feature_map.vocab_size;
    for (row, label) in params.labels.iter().enumerate() {
        let Some(e) = graph.entity_index(label) else {
            continue;
        };
        for (a, attr) in graph.attributes().iter().enumerate() {
            let sign = match graph.relation_by_index(e, a) {
                RelationKind::Association => 1.0,
                RelationKind::Exclusion => -1.0,
                RelationKind::Irrelevance => continue,
            };
            if let Ok(col) = params.feature_map.attributes.binary_search(&attr.id) {
                let i = vocab + col;
                out.head_weights
                    .set(row, i, out.head_weights.get(row, i) + sign * visual_weight);
            }
            if let Some(spelling) = lexicon.spelling(&attr.id) {
                let share = token_weight / spelling.len() as f64;
                for &t in spelling {
                    let i = t as usize;
                    out.head_weights
                        .set(row, i, out.head_weights.get(row, i) + sign * share);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{argmax, FeatureMapConfig};
    use crate::seed::stream;
    use crate::world::{generate_records, generate_world, WorldConfig};

    fn setup() -> (crate::world::World, Vec<TraceRecord>, PolicyParams) {
        let config = WorldConfig {
            rho: 0.0,
            records: 120,
            ..WorldConfig::default()
        };
        let world = generate_world(&config, &mut stream(0, "world")).unwrap();
        let records: Vec<TraceRecord> = generate_records(&world, &mut stream(0, "records"))
            .unwrap()
            .into_iter()
            .map(|g| g.record)
            .collect();
        let fm = FeatureMapConfig::new(1, world.vocab.len(), world.attribute_ids(), true);
        let params = PolicyParams::zeros(fm, world.markers(), world.labels()).unwrap();
        (world, records, params)
    }

    #[test]
    fn mle_increases_likelihood() {
        let (_, records, params) = setup();
        let config = MleConfig {
            epochs: 5,
            ..MleConfig::default()
        };
        let (trained, history) = train_mle(&params, &records, &config).unwrap();
        assert!(history.last().unwrap() < &history[0]);
        let refs: Vec<&TraceRecord> = records.iter().collect();
        assert!(
            mle_loss_and_grad(&trained, &refs).unwrap().0
                < mle_loss_and_grad(&params, &refs).unwrap().0
        );
        assert_eq!(mle_steps(records.len(), &config), 5 * 8);
        let (by_steps, partial) = train_mle_for_steps(&params, &records, &config, 5 * 8).unwrap();
        assert_eq!(by_steps, trained);
        assert_eq!(partial, history);
        let (_, short) = train_mle_for_steps(&params, &records, &config, 11).unwrap();
        assert_eq!(short.len(), 2);
    }

    #[test]
    fn head_fit_reaches_training_accuracy() {
        let (_, records, params) = setup();
        let (trained, _) = train_mle(&params, &records, &MleConfig::default()).unwrap();
        let (fitted, history) = fit_head(&trained, &records, &HeadConfig::default()).unwrap();
        assert!(history.last().unwrap() < &history[0]);
        let correct = records
            .iter()
            .filter(|r| {
                let z = fitted
                    .predict_label(&r.visual, &r.prompt, r.trace.tokens())
                    .unwrap();
                fitted.labels[argmax(&z)] == r.gold_label
            })
            .count();
        assert_eq!(correct, records.len());
    }

    #[test]
    fn knowledge_head_prefers_gold() {
        let (world, records, params) = setup();
        let head = knowledge_head(&params, &world.graph, &world.lexicon, 2.0, 20.0);
        for r in &records {
            let z = head
                .predict_label(&r.visual, &r.prompt, r.trace.tokens())
                .unwrap();
            assert_eq!(head.labels[argmax(&z)], r.gold_label);
        }
        assert!(matches!(
            train_mle(&params, &[], &MleConfig::default()),
            Err(SupervisedError::NoRecords)
        ));
    }
}
