//! Exact dynamic-programming oracles.
//!
//! Every quantity here is computed by direct linear solves and full
//! enumeration, no sampling: joint and decentralized values,
//! occupancies, staged marginal kernels, transition shifts and their
//! per-agent decomposition, decentralized surrogates, and the
//! joint-level and decentralized trust-region bounds.
//!
//! Tolerances follow two tiers: pure linear-algebra identities are
//! checked at 1e-10, bounds that subtract amplified terms at 1e-8.

mod bounds;
mod joint;
mod staged;

pub use bounds::{
    decentralized_bound_given_xi, decentralized_trust_region_bound, oracle_report,
    ratio_premise_check, stationarity_probe, AgentPremise, DecentralizedBound, OracleReport,
    RatioPremiseReport, StationarityProbe,
};
pub use joint::{
    joint_action_dist, joint_eval, joint_surrogate, joint_trust_region_bound,
    performance_difference, JointBound, JointEval,
};
pub use staged::{
    decentralized_eval, marginal_kernel, shift_decomposition, staged_advantage,
    staged_marginal_kernel, surrogate_u, transition_shift, xi_bound, Exactness, LocalEval,
    ShiftDecomposition, StagedKernel,
};

use nalgebra::{DMatrix, DVector};

use crate::decmdp::TabularDecMdp;
use crate::error::{Error, Result};
use crate::policy::JointPolicy;

/// State-to-state chain of the joint process under a policy:
/// `P[(s, s')] = sum_a pi(a|s) p(s'|s, a)`.
pub fn joint_state_chain(mdp: &TabularDecMdp, pol: &JointPolicy) -> DMatrix<f64> {
    joint::joint_chain(mdp, pol)
}

/// Solve a local Bellman system `(I - gamma * chain) v = r`.
pub fn solve_local_values(
    chain: &DMatrix<f64>,
    rewards: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    solve_values(chain, rewards, gamma)
}

/// Total variation divergence between two finite distributions:
/// the sum of `p - q` over coordinates where `p > q`. Symmetric,
/// in `[0, 1]` for distributions.
pub fn tv_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .filter(|(a, b)| a > b)
        .map(|(a, b)| a - b)
        .sum()
}

/// Solve `(I - gamma * chain) v = r` for the value vector.
pub(crate) fn solve_values(chain: &DMatrix<f64>, rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    let system = DMatrix::identity(n, n) - chain * gamma;
    let rhs = DVector::from_column_slice(rewards);
    system
        .lu()
        .solve(&rhs)
        .map(|v| v.as_slice().to_vec())
        .ok_or(Error::SingularSystem { discount: gamma })
}

/// Discounted occupancy `(1 - gamma) * d0^T (I - gamma * chain)^{-1}`,
/// solved as `(I - gamma * chain^T) d = (1 - gamma) d0`.
pub(crate) fn solve_occupancy(
    chain: &DMatrix<f64>,
    initial: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    let n = initial.len();
    let system = DMatrix::identity(n, n) - chain.transpose() * gamma;
    let rhs = DVector::from_iterator(n, initial.iter().map(|&p| (1.0 - gamma) * p));
    system
        .lu()
        .solve(&rhs)
        .map(|v| v.as_slice().to_vec())
        .ok_or(Error::SingularSystem { discount: gamma })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tv_of_identical_distributions_is_zero() {
        assert_eq!(tv_divergence(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    }

    #[test]
    fn tv_of_disjoint_distributions_is_one() {
        assert_eq!(tv_divergence(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn tv_direct_arithmetic() {
        let tv = tv_divergence(&[0.7, 0.3], &[0.5, 0.5]);
        assert!((tv - 0.2).abs() < 1e-15);
    }

    #[test]
    fn tv_is_symmetric() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        assert!((tv_divergence(&p, &q) - tv_divergence(&q, &p)).abs() < 1e-15);
    }
}
