//! Accuracy under increasing reasoning interference.

use serde::{Deserialize, Serialize};

use crate::graph::ConceptGraph;
use crate::policy::{argmax, PolicyError, PolicyParams};
use crate::seed::stream;
use crate::trace::{AttributeLexicon, TraceRecord};
use crate::world::{inject_interference, InjectionTarget, WorldError};

#[derive(Debug, thiserror::Error)]
pub enum RobustnessError {
    #[error("interference ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Ratio grid of the standard sweep.
pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub checkpoint: String,
    pub ratio: f64,
    pub seed: u64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub checkpoint: String,
    pub ratio: f64,
    pub seed: u64,
    pub record_id: String,
    pub predicted: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub rows: Vec<AccuracyRow>,
    pub predictions: Vec<Prediction>,
}

impl RobustnessTable {
    pub fn accuracy(&self, checkpoint: &str, ratio: f64, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.checkpoint == checkpoint && r.ratio == ratio && r.seed == seed)
            .map(|r| r.accuracy)
    }

    /// Mean over seeds of `accuracy(from) − accuracy(to)`.
    pub fn mean_drop(&self, checkpoint: &str, from: f64, to: f64) -> Option<f64> {
        let seeds: Vec<u64> = self
            .rows
            .iter()
            .filter(|r| r.checkpoint == checkpoint && r.ratio == from)
            .map(|r| r.seed)
            .collect();
        if seeds.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &s in &seeds {
            total += self.accuracy(checkpoint, from, s)? - self.accuracy(checkpoint, to, s)?;
        }
        Some(total / seeds.len() as f64)
    }
}

fn ratio_stream_name(ratio: f64) -> String {
    format!("eval/ratio/{}", ratio.to_bits())
}

/// Evaluates every (checkpoint, ratio, seed) cell: each record's trace gets
/// interference at the ratio, and the head's argmax on the full trace is
/// compared with the gold label. Injections depend only on (seed, ratio), so
/// all checkpoints see identical inputs.
pub fn eval_robustness(
    checkpoints: &[(String, PolicyParams)],
    records: &[TraceRecord],
    graph: &ConceptGraph,
    lexicon: &AttributeLexicon,
    ratios: &[f64],
    seeds: &[u64],
    target: InjectionTarget,
) -> Result<RobustnessTable, RobustnessError> {
    if let Some(&bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(RobustnessError::BadRatio(bad));
    }
    if checkpoints.is_empty() || records.is_empty() || ratios.is_empty() || seeds.is_empty() {
        return Err(RobustnessError::Empty(
            "checkpoints, records, ratios and seeds must be nonempty",
        ));
    }
    let mut table = RobustnessTable::default();
    for &seed in seeds {
        for &ratio in ratios {
            let mut rng = stream(seed, &ratio_stream_name(ratio));
            let inputs = records
                .iter()
                .map(|r| {
                    if ratio == 0.0 {
                        Ok(r.clone())
                    } else {
                        inject_interference(r, graph, lexicon, ratio, target, &mut rng)
                            .map(|i| i.record)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            for (name, params) in checkpoints {
                let mut correct = 0;
                for r in &inputs {
                    let z = params.predict_label(&r.visual, &r.prompt, r.trace.tokens())?;
                    let predicted = params.labels[argmax(&z)].clone();
                    correct += usize::from(predicted == r.gold_label);
                    table.predictions.push(Prediction {
                        checkpoint: name.clone(),
                        ratio,
                        seed,
                        record_id: r.record_id.clone(),
                        predicted,
                        gold: r.gold_label.clone(),
                    });
                }
                table.rows.push(AccuracyRow {
                    checkpoint: name.clone(),
                    ratio,
                    seed,
                    correct,
                    total: inputs.len(),
                    accuracy: correct as f64 / inputs.len() as f64,
                });
            }
        }
    }
    table.rows.sort_by(|a, b| {
        a.checkpoint
            .cmp(&b.checkpoint)
            .then(a.ratio.total_cmp(&b.ratio))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureMapConfig;
    use crate::seed::stream;
    use crate::supervised::knowledge_head;
    use crate::world::{generate_records, generate_world, WorldConfig};

    #[test]
    fn table_matches_recount_and_ratio_zero_is_clean() {
        let config = WorldConfig {
            records: 40,
            ..WorldConfig::default()
        };
        let world = generate_world(&config, &mut stream(0, "world")).unwrap();
        let records: Vec<TraceRecord> = generate_records(&world, &mut stream(0, "records"))
            .unwrap()
            .into_iter()
            .map(|g| g.record)
            .collect();
        let fm = FeatureMapConfig::new(1, world.vocab.len(), world.attribute_ids(), true);
        let zero = PolicyParams::zeros(fm, world.markers(), world.labels()).unwrap();
        let graph_head = knowledge_head(&zero, &world.graph, &world.lexicon, 0.1, 60.0);
        let checkpoints = vec![
            ("graph".to_string(), graph_head.clone()),
            ("zero".to_string(), zero),
        ];
        let table = eval_robustness(
            &checkpoints,
            &records,
            &world.graph,
            &world.lexicon,
            &DEFAULT_RATIOS,
            &[1, 2],
            InjectionTarget::Trace,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2 * 5 * 2);
        for row in &table.rows {
            let recount = table
                .predictions
                .iter()
                .filter(|p| {
                    p.checkpoint == row.checkpoint && p.ratio == row.ratio && p.seed == row.seed
                })
                .filter(|p| p.predicted == p.gold)
                .count();
            assert_eq!(recount, row.correct);
            assert!((0.0..=1.0).contains(&row.accuracy));
        }
        let clean = records
            .iter()
            .filter(|r| {
                let z = graph_head
                    .predict_label(&r.visual, &r.prompt, r.trace.tokens())
                    .unwrap();
                graph_head.labels[argmax(&z)] == r.gold_label
            })
            .count() as f64
            / records.len() as f64;
        assert_eq!(table.accuracy("graph", 0.0, 1), Some(clean));
        assert_eq!(table.accuracy("graph", 0.0, 2), Some(clean));
        assert!(table.mean_drop("graph", 0.0, 0.8).unwrap() > 0.0);
        assert!(matches!(
            eval_robustness(
                &checkpoints,
                &records,
                &world.graph,
                &world.lexicon,
                &[1.5],
                &[1],
                InjectionTarget::Trace
            ),
            Err(RobustnessError::BadRatio(_))
        ));
    }
}
