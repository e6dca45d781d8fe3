//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by Dec-MDP validation, oracle evaluation, and training.
///
/// Validation errors name the offending index so a bad table can be
/// located without re-running the check by hand.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {table}: expected {expected}, got {got}")]
    DimensionMismatch {
        table: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("transition row (state {state}, action {action}) sums to {sum}, expected 1")]
    RowSum {
        state: usize,
        action: usize,
        sum: f64,
    },

    #[error("negative probability {value} at (state {state}, action {action}, next {next})")]
    NegativeProbability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },

    #[error("initial distribution sums to {sum}, expected 1")]
    InitialDistSum { sum: f64 },

    #[error("initial distribution has negative mass {value} at state {state}")]
    InitialDistNegative { state: usize, value: f64 },

    #[error("discount {discount} out of range [0, 1)")]
    DiscountOutOfRange { discount: f64 },

    #[error("non-finite reward {value} in {table} at index {index}")]
    NonFiniteReward {
        table: &'static str,
        index: usize,
        value: f64,
    },

    #[error("joint state count {joint} does not match the factored product {product}")]
    JointStateCount { joint: usize, product: usize },

    #[error("joint state space of {size} states exceeds the dense-solve capacity of {limit}")]
    CapacityExceeded { size: usize, limit: usize },

    #[error("stage {stage} out of range 1..={max} for {n_agents} agents")]
    StageOutOfRange {
        stage: usize,
        max: usize,
        n_agents: usize,
    },

    #[error("agent {agent} out of range for {n_agents} agents")]
    AgentOutOfRange { agent: usize, n_agents: usize },

    #[error("policy table for agent {agent} has shape ({states}, {actions}), environment expects ({expected_states}, {expected_actions})")]
    PolicyShape {
        agent: usize,
        states: usize,
        actions: usize,
        expected_states: usize,
        expected_actions: usize,
    },

    #[error("zero probability under the old policy at agent {agent}, state {state}, action {action} with nonzero new probability: ratio undefined")]
    UndefinedRatio {
        agent: usize,
        state: usize,
        action: usize,
    },

    #[error("operation requires identical local spaces across agents ({reason})")]
    HeterogeneousAgents { reason: &'static str },

    #[error("shared parameters require identical local spaces across agents")]
    SharedParamShape,

    #[error("linear system is singular (discount {discount})")]
    SingularSystem { discount: f64 },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },

    #[error("serialization failed: {reason}")]
    Serialization { reason: String },

    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_config(reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            reason: reason.into(),
        }
    }
}
