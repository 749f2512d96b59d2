//! Segment-level context attribution for generated answers.
//!
//! Segments of a context are treated as bandit arms. Combinatorial Thompson
//! sampling spends a fixed query budget on masked contexts and scores each
//! segment by its posterior mean. KernelSHAP, LASSO-based ablation
//! regression and leave-one-out are provided as baselines, together with
//! the ablation metrics used to compare them.

pub mod bandit;
pub mod baselines;
pub mod corpus;
mod error;
pub mod eval;
pub mod io;
pub mod oracle;
pub mod reward;

pub use bandit::{AttributionResult, CtsConfig, Method};
pub use corpus::{Granularity, Instance, Segment, SubsetMask};
pub use error::{Error, Result};
pub use oracle::{LikelihoodOracle, TokenLikelihoods};
pub use reward::RewardContext;
