//! Concept discovery over a verb-object grid.
//!
//! Instances of known verb-object interactions are recombined pairwise into
//! composite samples, scored by a small multi-label verb classifier, and the
//! classifier's probabilities are folded into a running-mean confidence matrix
//! over every verb-object cell. The matrix in turn provides soft targets for
//! the composites (self-training), so unknown but plausible combinations rise
//! above impossible ones.

pub mod cli;
pub mod composer;
pub mod concepts;
pub mod dataset;
pub mod error;
pub mod evaluator;
mod numeric;
pub mod scorer;
pub mod tracker;
pub mod trainer;

pub use composer::{compose, known_filter, outer_labels, CompositeBatch, KnownMask, OuterLabels};
pub use concepts::{ConceptMask, ConceptSpace, ConceptStatus, Target};
pub use dataset::{Dataset, Instance, Split, SynthConfig, SynthWorld};
pub use error::{Error, Result};
pub use scorer::{Gradients, OptimState, ScorerParams};
pub use tracker::ConfidenceTracker;
pub use trainer::{train, History, PseudoLabels, TrainConfig, TrainOutcome, Trainer};
