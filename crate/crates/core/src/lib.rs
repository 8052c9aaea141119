//! Counterfactual preference optimization against endogenous reasoning drift,
//! at desk scale.
//!
//! The crate is organised around the objects a drift study touches:
//!
//! - [`graph`]: the hierarchical concept graph (entities, attributes and
//!   association / irrelevance / exclusion relations) and substitution queries.
//! - [`trace`]: vocabularies, thinking traces, trace records, attribute-mention
//!   extraction and attention-frame normalization.
//! - [`policy`]: a linear-softmax autoregressive policy with a label head,
//!   exact log-probabilities, analytic gradients and seeded sampling.
//! - [`drift`]: stepwise divergence series, drift events and the
//!   token-substitution probe.
//! - [`counterfactual`]: graph-constrained counterfactual traces and
//!   perception hard-negative mining.
//! - [`cpo`]: reward margins, the preference loss and its gradient, windowed
//!   training and the counterfactual effect estimator.
//! - [`world`]: seeded synthetic worlds and interference injection.
//! - [`robustness`]: the interference-ratio accuracy sweep.
//! - [`supervised`]: likelihood training and prediction-head construction.
//! - [`study`]: the end-to-end comparison of training arms on one world.

pub mod counterfactual;
pub mod cpo;
pub mod drift;
pub mod graph;
pub mod matrix;
pub mod policy;
pub mod robustness;
pub mod seed;
pub mod study;
pub mod supervised;
pub mod trace;
pub mod world;

pub use graph::{ConceptGraph, RelationKind};
pub use matrix::Matrix;
pub use policy::{PolicyParams, PolicySnapshot};
pub use trace::{ThinkingTrace, TokenId, TraceRecord, VisualContext, Vocabulary};
