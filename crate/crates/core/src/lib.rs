//! Plan-tree search with step-level preference learning.
//!
//! The crate builds a small self-improvement loop on synthetic multi-step
//! reasoning tasks: a featurized softmax policy proposes abstract plan steps,
//! PUCT tree search scores them, sibling values become step-level preference
//! pairs, and the policy is trained with advantage-weighted preference
//! optimization (plus DPO / step-DPO baselines) over two rounds.
//!
//! All floating-point math is generic over [`scalar::Scalar`]; the pipeline
//! and CLI instantiate `f64` via the aliases below.

pub mod env;
pub mod features;
pub mod genadapter;
pub mod mcts;
pub mod pipeline;
pub mod policy;
pub mod prefdata;
pub mod scalar;
pub mod train;
pub mod value;

pub use scalar::Scalar;

/// Scalar type used by the pipeline and CLI.
pub type DefaultScalar = f64;

/// Concrete aliases for the default scalar.
pub type PolicyParams = policy::PolicyParams<DefaultScalar>;
pub type PolicySnapshot = policy::PolicySnapshot<DefaultScalar>;
pub type ValueParams = value::ValueParams<DefaultScalar>;
pub type PlanTree = mcts::PlanTree<DefaultScalar>;
pub type SearchConfig = mcts::SearchConfig<DefaultScalar>;
pub type PreferencePair = prefdata::PreferencePair<DefaultScalar>;
pub type TrainConfig = train::TrainConfig<DefaultScalar>;
