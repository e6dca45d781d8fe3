//! Per-agent marginal kernels, transition shifts, and decentralized
//! surrogate machinery.
//!
//! Stages are 1-based: at stage `j`, the first `j - 1` agents (0-based
//! agents `0 .. j-1`) act with their updated policies and the rest with
//! the old ones, so stage 1 is the all-old profile and stage `N + 1`
//! the all-new profile. All kernels condition on the viewpoint agent's
//! own action; its policy enters only through occupancy weighting in
//! the factored regime.

use nalgebra::DMatrix;

use crate::decmdp::TabularDecMdp;
use crate::error::{Error, Result};
use crate::oracle::joint::{agent_prob_tables, joint_chain};
use crate::oracle::{solve_occupancy, solve_values};
use crate::policy::JointPolicy;

/// Whether a marginal kernel is exact or an occupancy-weighted
/// approximation (the factored-state regime).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exactness {
    Exact,
    OccupancyWeighted,
}

/// Local transition model `kernel[(s_k * A_k + a_k) * S_k + s'_k]` for
/// one agent at one stage.
#[derive(Debug, Clone)]
pub struct StagedKernel {
    pub agent: usize,
    /// 1-based stage in `1..=N+1`.
    pub stage: usize,
    pub kernel: Vec<f64>,
    pub exactness: Exactness,
}

impl StagedKernel {
    pub fn row(&self, n_states: usize, s_k: usize, a_k: usize, n_actions: usize) -> &[f64] {
        let base = (s_k * n_actions + a_k) * n_states;
        &self.kernel[base..base + n_states]
    }
}

/// Policy profile with the first `n_updated` agents taken from `new`
/// and the rest from `old`, materialized as independent tables.
pub(crate) fn mixed_policy(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    n_updated: usize,
) -> JointPolicy {
    let mut tables = Vec::with_capacity(mdp.n_agents());
    let mut states = Vec::with_capacity(mdp.n_agents());
    let mut actions = Vec::with_capacity(mdp.n_agents());
    for k in 0..mdp.n_agents() {
        let src = if k < n_updated { new } else { old };
        let mut t = Vec::with_capacity(mdp.local_states(k) * mdp.local_actions(k));
        for s_k in 0..mdp.local_states(k) {
            t.extend_from_slice(src.row(k, s_k));
        }
        tables.push(t);
        states.push(mdp.local_states(k));
        actions.push(mdp.local_actions(k));
    }
    JointPolicy::from_logits(states, actions, tables).expect("mixed profile shapes match")
}

/// Marginal transition kernel for agent `k` at the given stage of the
/// (old, new) update. Conditions on agent `k`'s action; other agents'
/// actions are marginalized under the staged profile. In the factored
/// regime, other agents' local states are integrated out under the
/// conditional occupancy of the stage's mixed profile, and the result
/// is flagged [`Exactness::OccupancyWeighted`].
pub fn staged_marginal_kernel(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
    stage: usize,
) -> Result<StagedKernel> {
    old.matches(mdp)?;
    new.matches(mdp)?;
    let n_agents = mdp.n_agents();
    if k >= n_agents {
        return Err(Error::AgentOutOfRange {
            agent: k,
            n_agents,
        });
    }
    if stage == 0 || stage > n_agents + 1 {
        return Err(Error::StageOutOfRange {
            stage,
            max: n_agents + 1,
            n_agents,
        });
    }
    let n_updated = stage - 1;

    let staged_tables: Vec<Vec<f64>> = {
        let old_tables = agent_prob_tables(mdp, old);
        let new_tables = agent_prob_tables(mdp, new);
        old_tables
            .into_iter()
            .zip(new_tables)
            .enumerate()
            .map(|(i, (o, n))| if i < n_updated { n } else { o })
            .collect()
    };

    let s_count = mdp.local_states(k);
    let a_count = mdp.local_actions(k);
    let mut kernel = vec![0.0; s_count * a_count * s_count];
    let action_codec = mdp.action_codec();

    if mdp.shared_state() {
        for s in 0..mdp.joint_states() {
            for a in 0..mdp.joint_actions() {
                let a_k = action_codec.component(a, k);
                let mut w = 1.0;
                for i in 0..n_agents {
                    if i == k {
                        continue;
                    }
                    let a_i = action_codec.component(a, i);
                    w *= staged_tables[i][s * mdp.local_actions(i) + a_i];
                }
                if w == 0.0 {
                    continue;
                }
                let row = mdp.transition_row(s, a);
                let base = (s * a_count + a_k) * s_count;
                for (s2, &p) in row.iter().enumerate() {
                    kernel[base + s2] += w * p;
                }
            }
        }
        return Ok(StagedKernel {
            agent: k,
            stage,
            kernel,
            exactness: Exactness::Exact,
        });
    }

    // Factored regime: weight joint states consistent with each local
    // state by the discounted occupancy of the stage's mixed profile.
    let mixed = mixed_policy(mdp, old, new, n_updated);
    let chain = joint_chain(mdp, &mixed);
    let occupancy = solve_occupancy(&chain, mdp.initial_dist(), mdp.discount())?;

    let mut mass = vec![0.0_f64; s_count];
    let mut consistent: Vec<Vec<usize>> = vec![Vec::new(); s_count];
    for s in 0..mdp.joint_states() {
        let s_k = mdp.local_state_of(s, k);
        mass[s_k] += occupancy[s];
        consistent[s_k].push(s);
    }

    for s_k in 0..s_count {
        let states = &consistent[s_k];
        let total = mass[s_k];
        for &s in states {
            // Occupancy holes fall back to uniform weighting over the
            // consistent joint states so rows stay distributions.
            let w_state = if total > 0.0 {
                occupancy[s] / total
            } else {
                1.0 / states.len() as f64
            };
            if w_state == 0.0 {
                continue;
            }
            for a in 0..mdp.joint_actions() {
                let a_k = action_codec.component(a, k);
                let mut w = w_state;
                for i in 0..n_agents {
                    if i == k {
                        continue;
                    }
                    let s_i = mdp.local_state_of(s, i);
                    let a_i = action_codec.component(a, i);
                    w *= staged_tables[i][s_i * mdp.local_actions(i) + a_i];
                }
                if w == 0.0 {
                    continue;
                }
                let row = mdp.transition_row(s, a);
                let base = (s_k * a_count + a_k) * s_count;
                for (s2, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    kernel[base + mdp.local_state_of(s2, k)] += w * p;
                }
            }
        }
    }

    Ok(StagedKernel {
        agent: k,
        stage,
        kernel,
        exactness: Exactness::OccupancyWeighted,
    })
}

/// Marginal kernel under a single complete profile (no update staging).
pub fn marginal_kernel(
    mdp: &TabularDecMdp,
    profile: &JointPolicy,
    k: usize,
) -> Result<StagedKernel> {
    staged_marginal_kernel(mdp, profile, profile, k, 1)
}

/// Local state chain `P[s_k][s'_k]` induced by a kernel and an action
/// weighting for the viewpoint agent.
fn local_chain(
    mdp: &TabularDecMdp,
    kernel: &StagedKernel,
    own: &JointPolicy,
    k: usize,
) -> DMatrix<f64> {
    let s_count = mdp.local_states(k);
    let a_count = mdp.local_actions(k);
    let mut chain = DMatrix::zeros(s_count, s_count);
    for s_k in 0..s_count {
        let probs = own.probs(k, s_k);
        for a_k in 0..a_count {
            let w = probs[a_k];
            if w == 0.0 {
                continue;
            }
            let row = kernel.row(s_count, s_k, a_k, a_count);
            for (s2, &p) in row.iter().enumerate() {
                chain[(s_k, s2)] += w * p;
            }
        }
    }
    chain
}

/// Transition shift for agent `k`: the difference between the local
/// state chains after and before all agents update. Rows sum to zero.
pub fn transition_shift(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
) -> Result<Vec<f64>> {
    let n = mdp.n_agents();
    let before = staged_marginal_kernel(mdp, old, new, k, 1)?;
    let after = staged_marginal_kernel(mdp, old, new, k, n + 1)?;
    let chain_before = local_chain(mdp, &before, old, k);
    let chain_after = local_chain(mdp, &after, new, k);
    let s_count = mdp.local_states(k);
    let mut delta = vec![0.0; s_count * s_count];
    for s in 0..s_count {
        for s2 in 0..s_count {
            delta[s * s_count + s2] = chain_after[(s, s2)] - chain_before[(s, s2)];
        }
    }
    Ok(delta)
}

/// The transition shift split into one term per updating agent.
#[derive(Debug, Clone)]
pub struct ShiftDecomposition {
    pub agent: usize,
    /// Full shift table `[S_k x S_k]`.
    pub total: Vec<f64>,
    /// `stages[j]` is the shift contributed by advancing agent `j`
    /// alone from the stage-`j+1` mixed profile.
    pub stages: Vec<Vec<f64>>,
    /// Max-abs difference between `total` and the stage sum.
    pub residual: f64,
    /// Exactness advisory: occupancy-weighted kernels make the
    /// decomposition approximate rather than wrong, so this is a flag
    /// and not an error.
    pub exactness: Exactness,
}

/// Decompose agent `k`'s transition shift into per-agent stage terms.
/// Each term advances exactly one agent's policy from the mixed profile
/// in which all earlier agents have already advanced; the terms
/// telescope back to the total shift.
pub fn shift_decomposition(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
) -> Result<ShiftDecomposition> {
    let n = mdp.n_agents();
    let total = transition_shift(mdp, old, new, k)?;
    let s_count = mdp.local_states(k);

    // Local chains m_j under the mixed profiles with agents 0..j updated.
    let mut chains = Vec::with_capacity(n + 1);
    for n_updated in 0..=n {
        let kernel = staged_marginal_kernel(mdp, old, new, k, n_updated + 1)?;
        let own = if k < n_updated { new } else { old };
        chains.push(local_chain(mdp, &kernel, own, k));
    }

    let mut stages = Vec::with_capacity(n);
    let mut sum = vec![0.0; s_count * s_count];
    for j in 0..n {
        let mut term = vec![0.0; s_count * s_count];
        for s in 0..s_count {
            for s2 in 0..s_count {
                let d = chains[j + 1][(s, s2)] - chains[j][(s, s2)];
                term[s * s_count + s2] = d;
                sum[s * s_count + s2] += d;
            }
        }
        stages.push(term);
    }

    let residual = total
        .iter()
        .zip(&sum)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);

    Ok(ShiftDecomposition {
        agent: k,
        total,
        stages,
        residual,
        exactness: if mdp.shared_state() {
            Exactness::Exact
        } else {
            Exactness::OccupancyWeighted
        },
    })
}

/// Exact evaluation of one agent's decentralized value under a complete
/// policy profile: the local Bellman system under the profile's
/// stationary marginal kernel and the agent's local reward.
#[derive(Debug, Clone)]
pub struct LocalEval {
    pub agent: usize,
    /// `v[s_k]`
    pub values: Vec<f64>,
    /// Discounted local occupancy from the local initial distribution.
    pub occupancy: Vec<f64>,
    /// Expected return `E_{s_k ~ p0}[v(s_k)]`.
    pub ret: f64,
    pub exactness: Exactness,
}

/// Evaluate agent `k`'s decentralized value function and return under
/// the stationary kernel induced by `profile`.
pub fn decentralized_eval(
    mdp: &TabularDecMdp,
    profile: &JointPolicy,
    k: usize,
) -> Result<LocalEval> {
    let kernel = marginal_kernel(mdp, profile, k)?;
    let chain = local_chain(mdp, &kernel, profile, k);
    let rewards: Vec<f64> = (0..mdp.local_states(k))
        .map(|s_k| mdp.local_reward(k, s_k))
        .collect();
    let values = solve_values(&chain, &rewards, mdp.discount())?;
    let p0 = mdp.local_initial_dist(k);
    let occupancy = solve_occupancy(&chain, &p0, mdp.discount())?;
    let ret = p0.iter().zip(&values).map(|(&p, &v)| p * v).sum();
    Ok(LocalEval {
        agent: k,
        values,
        occupancy,
        ret,
        exactness: kernel.exactness,
    })
}

/// Staged decentralized advantage
/// `A(s_k, a_k) = r_k(s_k) + gamma * sum_{s'} K_stage(s'|s_k, a_k) v_old(s'_k) - v_old(s_k)`,
/// where `v_old` is the viewpoint agent's value under the all-old profile.
pub fn staged_advantage(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
    stage: usize,
) -> Result<Vec<f64>> {
    let base_values = decentralized_eval(mdp, old, k)?.values;
    staged_advantage_with(mdp, old, new, k, stage, &base_values)
}

pub(crate) fn staged_advantage_with(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
    stage: usize,
    old_values: &[f64],
) -> Result<Vec<f64>> {
    let kernel = staged_marginal_kernel(mdp, old, new, k, stage)?;
    let s_count = mdp.local_states(k);
    let a_count = mdp.local_actions(k);
    let gamma = mdp.discount();
    let mut adv = vec![0.0; s_count * a_count];
    for s_k in 0..s_count {
        for a_k in 0..a_count {
            let row = kernel.row(s_count, s_k, a_k, a_count);
            let next: f64 = row.iter().zip(old_values).map(|(&p, &v)| p * v).sum();
            adv[s_k * a_count + a_k] =
                mdp.local_reward(k, s_k) + gamma * next - old_values[s_k];
        }
    }
    Ok(adv)
}

/// Uniform bound on staged advantage magnitudes: the exhaustive max of
/// `|A|` over all viewpoint agents, stages `1..=N`, and local pairs.
pub fn xi_bound(mdp: &TabularDecMdp, old: &JointPolicy, new: &JointPolicy) -> Result<f64> {
    let mut xi = 0.0_f64;
    for k in 0..mdp.n_agents() {
        let base_values = decentralized_eval(mdp, old, k)?.values;
        for stage in 1..=mdp.n_agents() {
            let adv = staged_advantage_with(mdp, old, new, k, stage, &base_values)?;
            for a in adv {
                xi = xi.max(a.abs());
            }
        }
    }
    Ok(xi)
}

/// Decentralized surrogate: the occupancy-weighted expected
/// `(ratio - 1) * advantage` of agent `j`'s update, measured from agent
/// `k`'s viewpoint. `j` and `k` are 0-based agents; the advantage uses
/// the stage at which agent `j` updates.
pub fn surrogate_u(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
    j: usize,
) -> Result<f64> {
    let local = decentralized_eval(mdp, old, k)?;
    surrogate_u_with(mdp, old, new, k, j, &local.values, &local.occupancy)
}

pub(crate) fn surrogate_u_with(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
    j: usize,
    old_values: &[f64],
    occupancy: &[f64],
) -> Result<f64> {
    if j >= mdp.n_agents() {
        return Err(Error::AgentOutOfRange {
            agent: j,
            n_agents: mdp.n_agents(),
        });
    }
    if mdp.local_states(j) != mdp.local_states(k) || mdp.local_actions(j) != mdp.local_actions(k)
    {
        return Err(Error::HeterogeneousAgents {
            reason: "cross-agent surrogate evaluates agent j's policy on agent k's local space",
        });
    }
    let adv = staged_advantage_with(mdp, old, new, k, j + 1, old_values)?;
    let a_count = mdp.local_actions(k);
    let mut total = 0.0;
    for s_k in 0..mdp.local_states(k) {
        let d = occupancy[s_k];
        if d == 0.0 {
            continue;
        }
        let p_old = old.probs(j, s_k);
        let p_new = new.probs(j, s_k);
        let mut inner = 0.0;
        for a_k in 0..a_count {
            if p_old[a_k] <= 0.0 {
                if p_new[a_k] > 0.0 {
                    return Err(Error::UndefinedRatio {
                        agent: j,
                        state: s_k,
                        action: a_k,
                    });
                }
                continue;
            }
            let ratio = p_new[a_k] / p_old[a_k];
            inner += p_old[a_k] * (ratio - 1.0) * adv[s_k * a_count + a_k];
        }
        total += d * inner;
    }
    Ok(total)
}
