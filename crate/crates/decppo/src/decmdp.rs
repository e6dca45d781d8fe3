//! Tabular cooperative Dec-MDPs and the deterministic generators used
//! throughout the oracles and trainers.
//!
//! A [`TabularDecMdp`] stores the joint transition tensor, the joint
//! reward table, per-agent local reward tables, the initial state
//! distribution, and the discount. Joint states and actions are flat
//! indices; [`crate::index::MixedRadix`] maps them to per-agent
//! components. With `shared_state` every agent observes the full joint
//! state, which is the regime where the per-agent marginal kernels in
//! [`crate::oracle`] are exact.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::MixedRadix;

/// Dense linear solves are quadratic in memory; reject joint state
/// spaces beyond this size with a clear error instead of thrashing.
pub const MAX_JOINT_STATES: usize = 4096;

const ROW_SUM_TOL: f64 = 1e-12;

/// Raw tables for a Dec-MDP, prior to validation.
///
/// `transition` is row-major over `(joint state, joint action, next
/// joint state)`; reward tables are flat over their state spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecMdpSpec {
    pub n_agents: usize,
    pub local_state_counts: Vec<usize>,
    pub local_action_counts: Vec<usize>,
    pub transition: Vec<f64>,
    pub joint_reward: Vec<f64>,
    pub local_rewards: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub discount: f64,
    pub shared_state: bool,
    /// Generator name and seed for reproducibility, when applicable.
    pub provenance: Option<String>,
}

/// A validated tabular Dec-MDP. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDecMdp {
    spec: DecMdpSpec,
    joint_states: usize,
    joint_actions: usize,
    state_codec: MixedRadix,
    action_codec: MixedRadix,
}

impl TabularDecMdp {
    /// Validate raw tables and build a Dec-MDP. Every type invariant is
    /// enforced here; the error names the offending index.
    pub fn new(spec: DecMdpSpec) -> Result<Self> {
        if spec.n_agents == 0 {
            return Err(Error::invalid_config("n_agents must be at least 1"));
        }
        if spec.local_state_counts.len() != spec.n_agents {
            return Err(Error::DimensionMismatch {
                table: "local_state_counts",
                expected: spec.n_agents,
                got: spec.local_state_counts.len(),
            });
        }
        if spec.local_action_counts.len() != spec.n_agents {
            return Err(Error::DimensionMismatch {
                table: "local_action_counts",
                expected: spec.n_agents,
                got: spec.local_action_counts.len(),
            });
        }
        if spec.local_state_counts.contains(&0) {
            return Err(Error::invalid_config("local state counts must be positive"));
        }
        if spec.local_action_counts.contains(&0) {
            return Err(Error::invalid_config(
                "local action counts must be positive",
            ));
        }

        let joint_states = if spec.shared_state {
            let first = spec.local_state_counts[0];
            if spec.local_state_counts.iter().any(|&c| c != first) {
                return Err(Error::HeterogeneousAgents {
                    reason: "shared_state requires one common local state count",
                });
            }
            first
        } else {
            let product = spec
                .local_state_counts
                .iter()
                .try_fold(1usize, |acc, &c| acc.checked_mul(c))
                .ok_or(Error::CapacityExceeded {
                    size: usize::MAX,
                    limit: MAX_JOINT_STATES,
                })?;
            product
        };
        if joint_states > MAX_JOINT_STATES {
            return Err(Error::CapacityExceeded {
                size: joint_states,
                limit: MAX_JOINT_STATES,
            });
        }
        let joint_actions = spec
            .local_action_counts
            .iter()
            .product::<usize>();

        let expected_transition = joint_states * joint_actions * joint_states;
        if spec.transition.len() != expected_transition {
            return Err(Error::DimensionMismatch {
                table: "transition",
                expected: expected_transition,
                got: spec.transition.len(),
            });
        }
        if spec.joint_reward.len() != joint_states {
            return Err(Error::DimensionMismatch {
                table: "joint_reward",
                expected: joint_states,
                got: spec.joint_reward.len(),
            });
        }
        if spec.local_rewards.len() != spec.n_agents {
            return Err(Error::DimensionMismatch {
                table: "local_rewards",
                expected: spec.n_agents,
                got: spec.local_rewards.len(),
            });
        }
        for (k, table) in spec.local_rewards.iter().enumerate() {
            if table.len() != spec.local_state_counts[k] {
                return Err(Error::DimensionMismatch {
                    table: "local_rewards[k]",
                    expected: spec.local_state_counts[k],
                    got: table.len(),
                });
            }
            if let Some(i) = table.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteReward {
                    table: "local_rewards",
                    index: k * table.len() + i,
                    value: table[i],
                });
            }
        }
        if let Some(i) = spec.joint_reward.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteReward {
                table: "joint_reward",
                index: i,
                value: spec.joint_reward[i],
            });
        }
        if spec.initial_dist.len() != joint_states {
            return Err(Error::DimensionMismatch {
                table: "initial_dist",
                expected: joint_states,
                got: spec.initial_dist.len(),
            });
        }

        for s in 0..joint_states {
            for a in 0..joint_actions {
                let row = &spec.transition[(s * joint_actions + a) * joint_states..]
                    [..joint_states];
                let mut sum = 0.0;
                for (next, &p) in row.iter().enumerate() {
                    if p < 0.0 || !p.is_finite() {
                        return Err(Error::NegativeProbability {
                            state: s,
                            action: a,
                            next,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::RowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
            }
        }

        let mut init_sum = 0.0;
        for (s, &p) in spec.initial_dist.iter().enumerate() {
            if p < 0.0 || !p.is_finite() {
                return Err(Error::InitialDistNegative { state: s, value: p });
            }
            init_sum += p;
        }
        if (init_sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InitialDistSum { sum: init_sum });
        }

        if !(0.0..1.0).contains(&spec.discount) {
            return Err(Error::DiscountOutOfRange {
                discount: spec.discount,
            });
        }

        let state_codec = MixedRadix::new(&spec.local_state_counts);
        let action_codec = MixedRadix::new(&spec.local_action_counts);
        Ok(TabularDecMdp {
            spec,
            joint_states,
            joint_actions,
            state_codec,
            action_codec,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.spec.n_agents
    }

    pub fn joint_states(&self) -> usize {
        self.joint_states
    }

    pub fn joint_actions(&self) -> usize {
        self.joint_actions
    }

    pub fn local_states(&self, agent: usize) -> usize {
        self.spec.local_state_counts[agent]
    }

    pub fn local_actions(&self, agent: usize) -> usize {
        self.spec.local_action_counts[agent]
    }

    pub fn discount(&self) -> f64 {
        self.spec.discount
    }

    pub fn shared_state(&self) -> bool {
        self.spec.shared_state
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.spec.initial_dist
    }

    pub fn joint_reward(&self, s: usize) -> f64 {
        self.spec.joint_reward[s]
    }

    pub fn joint_reward_table(&self) -> &[f64] {
        &self.spec.joint_reward
    }

    pub fn local_reward(&self, agent: usize, s_k: usize) -> f64 {
        self.spec.local_rewards[agent][s_k]
    }

    /// Transition distribution over next joint states for `(s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.joint_actions + a) * self.joint_states;
        &self.spec.transition[base..base + self.joint_states]
    }

    /// Agent `k`'s local projection of joint state `s`.
    pub fn local_state_of(&self, s: usize, agent: usize) -> usize {
        if self.spec.shared_state {
            s
        } else {
            self.state_codec.component(s, agent)
        }
    }

    /// Marginal initial distribution over agent `k`'s local states.
    pub fn local_initial_dist(&self, agent: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.local_states(agent)];
        for (s, &p) in self.spec.initial_dist.iter().enumerate() {
            out[self.local_state_of(s, agent)] += p;
        }
        out
    }

    /// Codec between joint states and per-agent local states. Only
    /// meaningful in the factored (`shared_state = false`) regime.
    pub fn state_codec(&self) -> &MixedRadix {
        &self.state_codec
    }

    /// Codec between joint actions and per-agent local actions.
    pub fn action_codec(&self) -> &MixedRadix {
        &self.action_codec
    }

    /// True when every agent has the same local state and action counts,
    /// which the cross-agent surrogate and trust-region operations need.
    pub fn homogeneous_agents(&self) -> bool {
        let s0 = self.spec.local_state_counts[0];
        let a0 = self.spec.local_action_counts[0];
        self.spec
            .local_state_counts
            .iter()
            .all(|&s| s == s0)
            && self.spec.local_action_counts.iter().all(|&a| a == a0)
    }

    pub fn spec(&self) -> &DecMdpSpec {
        &self.spec
    }

    /// Serialize to RON text. Floats use shortest round-trip encoding,
    /// so `from_ron_str` restores bit-identical tables.
    pub fn to_ron_string(&self) -> Result<String> {
        ron::ser::to_string_pretty(&self.spec, ron::ser::PrettyConfig::default()).map_err(|e| {
            Error::Serialization {
                reason: e.to_string(),
            }
        })
    }

    pub fn from_ron_str(text: &str) -> Result<Self> {
        let spec: DecMdpSpec = ron::from_str(text).map_err(|e| Error::Serialization {
            reason: e.to_string(),
        })?;
        TabularDecMdp::new(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_ron_string()?;
        fs::write(path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_ron_str(&text)
    }
}

/// Validate raw tables into a Dec-MDP.
pub fn new_dec_mdp(spec: DecMdpSpec) -> Result<TabularDecMdp> {
    TabularDecMdp::new(spec)
}

/// Deterministic random Dec-MDP with discount 0.9.
///
/// Transition rows are normalized positive uniform draws; rewards and
/// the initial distribution are uniform draws in `[0, 1]` (the latter
/// normalized). Identical arguments produce bit-identical tables.
pub fn random_dec_mdp(
    n_agents: usize,
    state_count: usize,
    action_count: usize,
    shared_state: bool,
    seed: u64,
) -> Result<TabularDecMdp> {
    random_dec_mdp_with_discount(n_agents, state_count, action_count, shared_state, seed, 0.9)
}

/// [`random_dec_mdp`] with an explicit discount.
pub fn random_dec_mdp_with_discount(
    n_agents: usize,
    state_count: usize,
    action_count: usize,
    shared_state: bool,
    seed: u64,
    discount: f64,
) -> Result<TabularDecMdp> {
    if n_agents == 0 || state_count == 0 || action_count == 0 {
        return Err(Error::invalid_config(
            "n_agents, state_count, and action_count must all be at least 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let joint_states = if shared_state {
        state_count
    } else {
        state_count.pow(n_agents as u32)
    };
    let joint_actions = action_count.pow(n_agents as u32);

    let mut transition = Vec::with_capacity(joint_states * joint_actions * joint_states);
    for _ in 0..joint_states * joint_actions {
        let mut row: Vec<f64> = (0..joint_states).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = row.iter().sum();
        for p in &mut row {
            *p /= sum;
        }
        transition.extend_from_slice(&row);
    }

    let state_codec = MixedRadix::new(&vec![state_count; n_agents]);
    let (joint_reward, local_rewards) = if shared_state {
        let joint: Vec<f64> = (0..joint_states).map(|_| rng.gen::<f64>()).collect();
        let locals = vec![joint.clone(); n_agents];
        (joint, locals)
    } else {
        // Factored instances carry independent per-agent reward tables;
        // the joint reward is their mean at the projected local states.
        let locals: Vec<Vec<f64>> = (0..n_agents)
            .map(|_| (0..state_count).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let joint: Vec<f64> = (0..joint_states)
            .map(|s| {
                let mean: f64 = (0..n_agents)
                    .map(|k| locals[k][state_codec.component(s, k)])
                    .sum::<f64>()
                    / n_agents as f64;
                mean
            })
            .collect();
        (joint, locals)
    };

    let mut initial_dist: Vec<f64> = (0..joint_states).map(|_| rng.gen::<f64>()).collect();
    let init_sum: f64 = initial_dist.iter().sum();
    for p in &mut initial_dist {
        *p /= init_sum;
    }

    TabularDecMdp::new(DecMdpSpec {
        n_agents,
        local_state_counts: vec![if shared_state { joint_states } else { state_count }; n_agents],
        local_action_counts: vec![action_count; n_agents],
        transition,
        joint_reward,
        local_rewards,
        initial_dist,
        discount,
        shared_state,
        provenance: Some(format!(
            "random(n_agents={n_agents},states={state_count},actions={action_count},shared={shared_state},seed={seed},discount={discount})"
        )),
    })
}

/// Cooperative chain: the team advances one cell only when every agent
/// chooses `push` (action 1); the final cell is absorbing and is the
/// only rewarded state. The optimal joint policy (all push) strictly
/// dominates uniform play. Discount is fixed at 0.9.
///
/// With `shared_state` the chain cell is the common observation. The
/// factored variant gives each agent its own copy of the cell index;
/// the copies move in lockstep from the all-zero start.
pub fn coop_chain_env(n_agents: usize, length: usize, shared_state: bool) -> Result<TabularDecMdp> {
    if n_agents == 0 {
        return Err(Error::invalid_config("n_agents must be at least 1"));
    }
    if length < 2 {
        return Err(Error::invalid_config("chain length must be at least 2"));
    }

    let local_states = length;
    let joint_states = if shared_state {
        length
    } else {
        length.pow(n_agents as u32)
    };
    let joint_actions = 2usize.pow(n_agents as u32);
    let state_codec = MixedRadix::new(&vec![local_states; n_agents]);
    let action_codec = MixedRadix::new(&vec![2usize; n_agents]);

    let mut transition = vec![0.0; joint_states * joint_actions * joint_states];
    for s in 0..joint_states {
        for a in 0..joint_actions {
            let all_push = (0..n_agents).all(|k| action_codec.component(a, k) == 1);
            let next = if shared_state {
                if all_push && s < length - 1 {
                    s + 1
                } else {
                    s
                }
            } else {
                let mut parts = state_codec.decode(s);
                if all_push {
                    for p in &mut parts {
                        if *p < length - 1 {
                            *p += 1;
                        }
                    }
                }
                state_codec.encode(&parts)
            };
            transition[(s * joint_actions + a) * joint_states + next] = 1.0;
        }
    }

    let local_reward: Vec<f64> = (0..local_states)
        .map(|p| if p == length - 1 { 1.0 } else { 0.0 })
        .collect();
    let joint_reward: Vec<f64> = if shared_state {
        local_reward.clone()
    } else {
        (0..joint_states)
            .map(|s| {
                (0..n_agents)
                    .map(|k| local_reward[state_codec.component(s, k)])
                    .sum::<f64>()
                    / n_agents as f64
            })
            .collect()
    };

    let mut initial_dist = vec![0.0; joint_states];
    initial_dist[0] = 1.0;

    TabularDecMdp::new(DecMdpSpec {
        n_agents,
        local_state_counts: vec![local_states; n_agents],
        local_action_counts: vec![2; n_agents],
        transition,
        joint_reward,
        local_rewards: vec![local_reward; n_agents],
        initial_dist,
        discount: 0.9,
        shared_state,
        provenance: Some(format!(
            "chain(n_agents={n_agents},length={length},shared={shared_state})"
        )),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_single_state_chain_is_valid() {
        let mdp = TabularDecMdp::new(DecMdpSpec {
            n_agents: 1,
            local_state_counts: vec![1],
            local_action_counts: vec![1],
            transition: vec![1.0],
            joint_reward: vec![1.0],
            local_rewards: vec![vec![1.0]],
            initial_dist: vec![1.0],
            discount: 0.9,
            shared_state: true,
            provenance: None,
        })
        .unwrap();
        assert_eq!(mdp.joint_states(), 1);
        assert_eq!(mdp.joint_actions(), 1);
    }

    #[test]
    fn bad_row_sum_names_the_row() {
        let err = TabularDecMdp::new(DecMdpSpec {
            n_agents: 1,
            local_state_counts: vec![2],
            local_action_counts: vec![1],
            transition: vec![0.5, 0.4, 0.5, 0.5],
            joint_reward: vec![0.0, 1.0],
            local_rewards: vec![vec![0.0, 1.0]],
            initial_dist: vec![1.0, 0.0],
            discount: 0.9,
            shared_state: true,
            provenance: None,
        })
        .unwrap_err();
        match err {
            Error::RowSum { state, action, sum } => {
                assert_eq!((state, action), (0, 0));
                assert!((sum - 0.9).abs() < 1e-12);
            }
            other => panic!("expected RowSum, got {other:?}"),
        }
    }

    #[test]
    fn discount_out_of_range_rejected() {
        let err = TabularDecMdp::new(DecMdpSpec {
            n_agents: 1,
            local_state_counts: vec![1],
            local_action_counts: vec![1],
            transition: vec![1.0],
            joint_reward: vec![1.0],
            local_rewards: vec![vec![1.0]],
            initial_dist: vec![1.0],
            discount: 1.0,
            shared_state: true,
            provenance: None,
        })
        .unwrap_err();
        assert!(matches!(err, Error::DiscountOutOfRange { .. }));
    }

    #[test]
    fn random_mdp_survives_revalidation() {
        let mdp = random_dec_mdp(2, 2, 2, false, 11).unwrap();
        let again = TabularDecMdp::new(mdp.spec().clone()).unwrap();
        assert_eq!(&again, &mdp);
    }

    #[test]
    fn random_mdp_is_deterministic() {
        let a = random_dec_mdp(2, 2, 2, true, 7).unwrap();
        let b = random_dec_mdp(2, 2, 2, true, 7).unwrap();
        assert_eq!(a.spec(), b.spec());
    }

    #[test]
    fn random_mdp_passes_invariants_for_three_agents() {
        let mdp = random_dec_mdp(3, 2, 2, true, 1).unwrap();
        assert_eq!(mdp.joint_states(), 2);
        assert_eq!(mdp.joint_actions(), 8);
        for s in 0..mdp.joint_states() {
            for a in 0..mdp.joint_actions() {
                let sum: f64 = mdp.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!(mdp.transition_row(s, a).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn single_agent_factored_collapses_to_plain_mdp() {
        let mdp = random_dec_mdp(1, 4, 3, false, 5).unwrap();
        assert_eq!(mdp.joint_states(), 4);
        assert_eq!(mdp.joint_actions(), 3);
        for s in 0..4 {
            assert_eq!(mdp.local_state_of(s, 0), s);
        }
        assert_eq!(mdp.local_reward(0, 2), mdp.joint_reward(2));
    }

    #[test]
    fn shared_state_projection_is_identity() {
        let mdp = random_dec_mdp(3, 2, 2, true, 9).unwrap();
        for s in 0..mdp.joint_states() {
            for k in 0..3 {
                assert_eq!(mdp.local_state_of(s, k), s);
            }
        }
    }

    #[test]
    fn chain_is_deterministic_and_reaches_terminal_under_all_push() {
        let a = coop_chain_env(3, 4, true).unwrap();
        let b = coop_chain_env(3, 4, true).unwrap();
        assert_eq!(a.spec(), b.spec());

        let mdp = coop_chain_env(2, 3, true).unwrap();
        let all_push = mdp.joint_actions() - 1;
        // state 0 -> 1 -> 2 under all-push, then absorbing
        assert_eq!(mdp.transition_row(0, all_push)[1], 1.0);
        assert_eq!(mdp.transition_row(1, all_push)[2], 1.0);
        assert_eq!(mdp.transition_row(2, all_push)[2], 1.0);
        // any defection stalls
        assert_eq!(mdp.transition_row(0, 0)[0], 1.0);
        assert_eq!(mdp.joint_reward(2), 1.0);
        assert_eq!(mdp.joint_reward(0), 0.0);
    }

    #[test]
    fn smallest_chain_is_two_states() {
        let mdp = coop_chain_env(1, 2, true).unwrap();
        assert_eq!(mdp.joint_states(), 2);
        assert_eq!(mdp.joint_actions(), 2);
        assert!(coop_chain_env(1, 1, true).is_err());
    }

    #[test]
    fn factored_chain_moves_in_lockstep() {
        let mdp = coop_chain_env(2, 3, false).unwrap();
        assert_eq!(mdp.joint_states(), 9);
        let all_push = 3;
        let codec = mdp.state_codec();
        let diag0 = codec.encode(&[0, 0]);
        let diag1 = codec.encode(&[1, 1]);
        assert_eq!(mdp.transition_row(diag0, all_push)[diag1], 1.0);
        assert_eq!(mdp.local_reward(0, 2), 1.0);
        assert_eq!(mdp.joint_reward(codec.encode(&[2, 2])), 1.0);
    }

    #[test]
    fn ron_roundtrip_is_bit_exact() {
        let mdp = random_dec_mdp(2, 3, 2, true, 42).unwrap();
        let text = mdp.to_ron_string().unwrap();
        let back = TabularDecMdp::from_ron_str(&text).unwrap();
        assert_eq!(back.spec(), mdp.spec());
        for (a, b) in back
            .spec()
            .transition
            .iter()
            .zip(mdp.spec().transition.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
