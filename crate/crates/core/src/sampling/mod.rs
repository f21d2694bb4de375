//! Similarity measures, matching and the two sources of training conditions.

pub mod generative;
pub mod matching;
pub mod oks;
pub mod pool;

pub use generative::{
    synthesize_errors, synthesize_errors_traced, ByValidity, ErrorDistribution, ErrorKind, KeypointTrace, MissMode,
};
pub use matching::{greedy_match, match_to_gt, priority_order, similarity_matrix, MatchMetric, MatchResult, DEFAULT_MATCH_FLOOR};
pub use oks::{oks, OksParams, ScaleSource};
pub use pool::{build_condition_pool, ConditionPool, PooledPose};
