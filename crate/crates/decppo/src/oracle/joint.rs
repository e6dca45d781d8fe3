//! Joint-policy evaluation and the joint-level trust-region bound.

use nalgebra::DMatrix;

use crate::decmdp::TabularDecMdp;
use crate::error::Result;
use crate::oracle::{solve_occupancy, solve_values, tv_divergence};
use crate::policy::JointPolicy;

/// Exact evaluation of a joint policy: state values, action values,
/// advantages, discounted occupancy, and the expected return.
#[derive(Debug, Clone)]
pub struct JointEval {
    /// `v[s]`
    pub v: Vec<f64>,
    /// `q[s * A + a]`
    pub q: Vec<f64>,
    /// `adv[s * A + a] = q - v`
    pub adv: Vec<f64>,
    /// Discounted state occupancy, sums to 1.
    pub occupancy: Vec<f64>,
    /// Expected discounted return from the initial distribution.
    pub ret: f64,
}

/// Per-agent action probabilities materialized for every local state:
/// `out[k][s_k * A_k + a_k]`.
pub(crate) fn agent_prob_tables(mdp: &TabularDecMdp, pol: &JointPolicy) -> Vec<Vec<f64>> {
    (0..mdp.n_agents())
        .map(|k| {
            let actions = mdp.local_actions(k);
            let mut table = vec![0.0; mdp.local_states(k) * actions];
            for s_k in 0..mdp.local_states(k) {
                let probs = pol.probs(k, s_k);
                table[s_k * actions..(s_k + 1) * actions].copy_from_slice(&probs);
            }
            table
        })
        .collect()
}

/// Distribution over joint actions at joint state `s` under the product
/// policy.
pub fn joint_action_dist(mdp: &TabularDecMdp, pol: &JointPolicy, s: usize) -> Vec<f64> {
    let tables = agent_prob_tables(mdp, pol);
    joint_action_dist_from(mdp, &tables, s)
}

pub(crate) fn joint_action_dist_from(
    mdp: &TabularDecMdp,
    tables: &[Vec<f64>],
    s: usize,
) -> Vec<f64> {
    let codec = mdp.action_codec();
    (0..mdp.joint_actions())
        .map(|a| {
            let mut p = 1.0;
            for (k, table) in tables.iter().enumerate() {
                let s_k = mdp.local_state_of(s, k);
                p *= table[s_k * mdp.local_actions(k) + codec.component(a, k)];
            }
            p
        })
        .collect()
}

/// State-to-state chain `P[s][s'] = sum_a pi(a|s) p(s'|s, a)`.
pub(crate) fn joint_chain(mdp: &TabularDecMdp, pol: &JointPolicy) -> DMatrix<f64> {
    let n = mdp.joint_states();
    let tables = agent_prob_tables(mdp, pol);
    let mut chain = DMatrix::zeros(n, n);
    for s in 0..n {
        let action_dist = joint_action_dist_from(mdp, &tables, s);
        for (a, &pa) in action_dist.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let row = mdp.transition_row(s, a);
            for (s2, &p) in row.iter().enumerate() {
                chain[(s, s2)] += pa * p;
            }
        }
    }
    chain
}

/// Evaluate a joint policy exactly by direct linear solves.
pub fn joint_eval(mdp: &TabularDecMdp, pol: &JointPolicy) -> Result<JointEval> {
    pol.matches(mdp)?;
    let n = mdp.joint_states();
    let n_actions = mdp.joint_actions();
    let gamma = mdp.discount();

    let chain = joint_chain(mdp, pol);
    let v = solve_values(&chain, mdp.joint_reward_table(), gamma)?;
    let occupancy = solve_occupancy(&chain, mdp.initial_dist(), gamma)?;

    let mut q = vec![0.0; n * n_actions];
    let mut adv = vec![0.0; n * n_actions];
    for s in 0..n {
        for a in 0..n_actions {
            let row = mdp.transition_row(s, a);
            let mut next: f64 = 0.0;
            for (s2, &p) in row.iter().enumerate() {
                next += p * v[s2];
            }
            let qa = mdp.joint_reward(s) + gamma * next;
            q[s * n_actions + a] = qa;
            adv[s * n_actions + a] = qa - v[s];
        }
    }

    let ret = mdp
        .initial_dist()
        .iter()
        .zip(&v)
        .map(|(&d0, &vs)| d0 * vs)
        .sum();

    Ok(JointEval {
        v,
        q,
        adv,
        occupancy,
        ret,
    })
}

/// Both sides of the performance-difference identity:
/// `lhs = J(new) - J(old)` from two independent evaluations, and
/// `rhs = 1/(1-gamma) * E_{s ~ d_new, a ~ new}[A_old(s, a)]`.
pub fn performance_difference(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
) -> Result<(f64, f64)> {
    let old_eval = joint_eval(mdp, old)?;
    let new_eval = joint_eval(mdp, new)?;
    let lhs = new_eval.ret - old_eval.ret;

    let tables = agent_prob_tables(mdp, new);
    let n_actions = mdp.joint_actions();
    let mut acc = 0.0;
    for s in 0..mdp.joint_states() {
        let d = new_eval.occupancy[s];
        if d == 0.0 {
            continue;
        }
        let action_dist = joint_action_dist_from(mdp, &tables, s);
        let mut inner = 0.0;
        for a in 0..n_actions {
            inner += action_dist[a] * old_eval.adv[s * n_actions + a];
        }
        acc += d * inner;
    }
    let rhs = acc / (1.0 - mdp.discount());
    Ok((lhs, rhs))
}

/// Surrogate objective `L_old(new)`: the performance-difference form
/// with the new policy's occupancy replaced by the old one's.
pub fn joint_surrogate(mdp: &TabularDecMdp, old: &JointPolicy, new: &JointPolicy) -> Result<f64> {
    let old_eval = joint_eval(mdp, old)?;
    let tables = agent_prob_tables(mdp, new);
    let n_actions = mdp.joint_actions();
    let mut acc = 0.0;
    for s in 0..mdp.joint_states() {
        let d = old_eval.occupancy[s];
        if d == 0.0 {
            continue;
        }
        let action_dist = joint_action_dist_from(mdp, &tables, s);
        let mut inner = 0.0;
        for a in 0..n_actions {
            inner += action_dist[a] * old_eval.adv[s * n_actions + a];
        }
        acc += d * inner;
    }
    Ok(old_eval.ret + acc / (1.0 - mdp.discount()))
}

/// The joint-level trust-region lower bound on `J(new)`.
#[derive(Debug, Clone, Copy)]
pub struct JointBound {
    /// `J(new)`
    pub lhs: f64,
    /// `L_old(new) - 4 * xi * gamma * alpha^2 / (1-gamma)^2`
    pub rhs: f64,
    /// Max-abs advantage of the old policy.
    pub xi: f64,
    /// Worst-state TV between the joint action distributions.
    pub alpha_max: f64,
}

impl JointBound {
    pub fn slack(&self) -> f64 {
        self.lhs - self.rhs
    }
}

/// Evaluate the joint trust-region bound for an (old, new) pair.
pub fn joint_trust_region_bound(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
) -> Result<JointBound> {
    let old_eval = joint_eval(mdp, old)?;
    let new_eval = joint_eval(mdp, new)?;
    let surrogate = joint_surrogate(mdp, old, new)?;

    let xi = old_eval.adv.iter().fold(0.0_f64, |m, &a| m.max(a.abs()));

    let old_tables = agent_prob_tables(mdp, old);
    let new_tables = agent_prob_tables(mdp, new);
    let mut alpha_max = 0.0_f64;
    for s in 0..mdp.joint_states() {
        let p = joint_action_dist_from(mdp, &old_tables, s);
        let q = joint_action_dist_from(mdp, &new_tables, s);
        alpha_max = alpha_max.max(tv_divergence(&p, &q));
    }

    let gamma = mdp.discount();
    let penalty = 4.0 * xi * gamma * alpha_max * alpha_max / ((1.0 - gamma) * (1.0 - gamma));
    Ok(JointBound {
        lhs: new_eval.ret,
        rhs: surrogate - penalty,
        xi,
        alpha_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decmdp::{coop_chain_env, random_dec_mdp};

    fn uniform(mdp: &TabularDecMdp) -> JointPolicy {
        JointPolicy::uniform(mdp)
    }

    #[test]
    fn one_state_self_loop_geometric_series() {
        let mdp = crate::decmdp::new_dec_mdp(crate::decmdp::DecMdpSpec {
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
        let eval = joint_eval(&mdp, &uniform(&mdp)).unwrap();
        assert!((eval.v[0] - 10.0).abs() < 1e-10);
        assert!((eval.ret - 10.0).abs() < 1e-10);
    }

    #[test]
    fn advantages_are_centered_under_the_policy() {
        let mdp = random_dec_mdp(2, 3, 2, true, 17).unwrap();
        let pol = JointPolicy::random(&mdp, 0.8, 4);
        let eval = joint_eval(&mdp, &pol).unwrap();
        let n_actions = mdp.joint_actions();
        for s in 0..mdp.joint_states() {
            let dist = joint_action_dist(&mdp, &pol, s);
            let centered: f64 = (0..n_actions)
                .map(|a| dist[a] * eval.adv[s * n_actions + a])
                .sum();
            assert!(centered.abs() < 1e-10, "centering failed at {s}: {centered}");
        }
    }

    #[test]
    fn bellman_residual_and_occupancy_mass() {
        let mdp = random_dec_mdp(2, 2, 2, true, 23).unwrap();
        let pol = JointPolicy::random(&mdp, 0.5, 5);
        let eval = joint_eval(&mdp, &pol).unwrap();
        let chain = joint_chain(&mdp, &pol);
        for s in 0..mdp.joint_states() {
            let mut next = 0.0;
            for s2 in 0..mdp.joint_states() {
                next += chain[(s, s2)] * eval.v[s2];
            }
            let residual = eval.v[s] - (mdp.joint_reward(s) + mdp.discount() * next);
            assert!(residual.abs() < 1e-10);
        }
        let mass: f64 = eval.occupancy.iter().sum();
        assert!((mass - 1.0).abs() < 1e-10);
        assert!(eval.occupancy.iter().all(|&d| d >= -1e-14));
    }

    /// Truncated power iteration as an independent evaluation oracle.
    fn power_iteration_return(mdp: &TabularDecMdp, pol: &JointPolicy, steps: usize) -> f64 {
        let chain = joint_chain(mdp, pol);
        let n = mdp.joint_states();
        let mut dist: Vec<f64> = mdp.initial_dist().to_vec();
        let mut total = 0.0;
        let mut scale = 1.0;
        for _ in 0..steps {
            let reward: f64 = (0..n).map(|s| dist[s] * mdp.joint_reward(s)).sum();
            total += scale * reward;
            scale *= mdp.discount();
            let mut next = vec![0.0; n];
            for s in 0..n {
                if dist[s] == 0.0 {
                    continue;
                }
                for s2 in 0..n {
                    next[s2] += dist[s] * chain[(s, s2)];
                }
            }
            dist = next;
        }
        total
    }

    #[test]
    fn return_matches_power_iteration_oracle() {
        let mdp = random_dec_mdp(2, 2, 2, true, 3).unwrap();
        let pol = uniform(&mdp);
        let eval = joint_eval(&mdp, &pol).unwrap();
        let truncated = power_iteration_return(&mdp, &pol, 10_000);
        assert!(
            (eval.ret - truncated).abs() < 1e-8,
            "linear solve {} vs power iteration {}",
            eval.ret,
            truncated
        );
    }

    #[test]
    fn performance_difference_identity_is_zero_for_equal_policies() {
        let mdp = random_dec_mdp(2, 2, 2, true, 5).unwrap();
        let pol = JointPolicy::random(&mdp, 0.7, 2);
        let (lhs, rhs) = performance_difference(&mdp, &pol, &pol).unwrap();
        assert!(lhs.abs() < 1e-12);
        assert!(rhs.abs() < 1e-12);
    }

    #[test]
    fn performance_difference_identity_random_pair() {
        let mdp = random_dec_mdp(2, 3, 2, true, 29).unwrap();
        let old = JointPolicy::random(&mdp, 0.6, 8);
        let new = old.perturb(0.4, 9);
        let (lhs, rhs) = performance_difference(&mdp, &old, &new).unwrap();
        assert!((lhs - rhs).abs() < 1e-8, "identity violated: {lhs} vs {rhs}");
    }

    /// Two-state single-agent MDP solved by hand: action 0 stays, action
    /// 1 swaps states; reward is 1 only in state 1; gamma = 0.5.
    /// Old policy always stays; new policy always swaps.
    ///
    /// Hand DP: v_old(0) = 0, v_old(1) = 2. Under the swap policy the
    /// state alternates, so v_new(0) = gamma * v_new(1),
    /// v_new(1) = 1 + gamma * v_new(0), giving v_new(0) = 2/3,
    /// v_new(1) = 4/3. From d0 = (1, 0): lhs = 2/3 - 0 = 2/3.
    /// Occupancy of the swap policy from state 0 alternates:
    /// d_new = (1-g)(1, 0, 0, 1, ...) weighted = (2/3, 1/3).
    /// A_old(s, a) = r(s) + g*v_old(s') - v_old(s):
    ///   A_old(0, swap) = 0 + 0.5*2 - 0 = 1; A_old(1, swap) = 1 + 0 - 2 = -1.
    /// rhs = 1/(1-g) * [ 2/3 * 1 + 1/3 * (-1) ] = 2 * 1/3 = 2/3.
    #[test]
    fn performance_difference_identity_hand_solved() {
        let mdp = crate::decmdp::new_dec_mdp(crate::decmdp::DecMdpSpec {
            n_agents: 1,
            local_state_counts: vec![2],
            local_action_counts: vec![2],
            // rows: (s0,a0)->s0, (s0,a1)->s1, (s1,a0)->s1, (s1,a1)->s0
            transition: vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            joint_reward: vec![0.0, 1.0],
            local_rewards: vec![vec![0.0, 1.0]],
            initial_dist: vec![1.0, 0.0],
            discount: 0.5,
            shared_state: true,
            provenance: None,
        })
        .unwrap();
        // near-deterministic softmax policies: logits +/- 40 apart
        let stay = JointPolicy::from_logits(vec![2], vec![2], vec![vec![40.0, 0.0, 40.0, 0.0]])
            .unwrap();
        let swap = JointPolicy::from_logits(vec![2], vec![2], vec![vec![0.0, 40.0, 0.0, 40.0]])
            .unwrap();
        let (lhs, rhs) = performance_difference(&mdp, &stay, &swap).unwrap();
        assert!((lhs - 2.0 / 3.0).abs() < 1e-8, "lhs {lhs}");
        assert!((lhs - rhs).abs() < 1e-8);
    }

    #[test]
    fn surrogate_at_old_policy_equals_return() {
        let mdp = random_dec_mdp(3, 2, 2, true, 31).unwrap();
        let pol = JointPolicy::random(&mdp, 0.5, 3);
        let eval = joint_eval(&mdp, &pol).unwrap();
        let l = joint_surrogate(&mdp, &pol, &pol).unwrap();
        assert!((l - eval.ret).abs() < 1e-10);
    }

    /// The surrogate and the true return have matching directional
    /// derivatives at the old policy along any logit-space line.
    #[test]
    fn surrogate_gradient_matches_return_gradient() {
        let mdp = random_dec_mdp(2, 2, 2, true, 37).unwrap();
        let base = JointPolicy::random(&mdp, 0.5, 12);
        let direction = JointPolicy::uniform(&mdp).perturb(1.0, 13);

        let step = 1e-5;
        let blend = |t: f64| {
            let mut pol = base.clone();
            for k in 0..mdp.n_agents() {
                for s in 0..mdp.local_states(k) {
                    let dir = direction.row(k, s).to_vec();
                    for (z, d) in pol.row_mut(k, s).iter_mut().zip(dir) {
                        *z += t * d;
                    }
                }
            }
            pol
        };

        let j = |t: f64| joint_eval(&mdp, &blend(t)).unwrap().ret;
        let l = |t: f64| joint_surrogate(&mdp, &base, &blend(t)).unwrap();

        let dj = (j(step) - j(-step)) / (2.0 * step);
        let dl = (l(step) - l(-step)) / (2.0 * step);
        let denom = dj.abs().max(1e-12);
        assert!(
            ((dj - dl) / denom).abs() < 1e-4,
            "directional derivatives differ: dJ={dj}, dL={dl}"
        );
    }

    #[test]
    fn random_pair_surrogate_is_finite() {
        let mdp = random_dec_mdp(2, 4, 3, false, 41).unwrap();
        let old = JointPolicy::random(&mdp, 0.8, 14);
        let new = old.perturb(0.6, 15);
        let l = joint_surrogate(&mdp, &old, &new).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn joint_bound_tight_at_zero_step() {
        let mdp = random_dec_mdp(2, 2, 2, true, 43).unwrap();
        let pol = JointPolicy::random(&mdp, 0.5, 16);
        let bound = joint_trust_region_bound(&mdp, &pol, &pol).unwrap();
        assert_eq!(bound.alpha_max, 0.0);
        assert!((bound.lhs - bound.rhs).abs() < 1e-10);
    }

    #[test]
    fn joint_bound_holds_on_seeded_instances() {
        for seed in 0..100 {
            let n_agents = 1 + (seed as usize % 3);
            let mdp = random_dec_mdp(n_agents, 2, 2, true, seed).unwrap();
            let old = JointPolicy::random(&mdp, 0.8, seed * 2 + 1);
            let new = old.perturb(0.3, seed * 2 + 2);
            let bound = joint_trust_region_bound(&mdp, &old, &new).unwrap();
            assert!(
                bound.slack() >= -1e-8,
                "bound violated at seed {seed}: slack {}",
                bound.slack()
            );
        }
    }

    #[test]
    fn joint_bound_gap_positive_at_forced_half_alpha() {
        // Single-agent two-state MDP with the policy step wired so that
        // alpha = 0.5: old row (0.75, 0.25), new row (0.25, 0.75).
        let mdp = coop_chain_env(1, 2, true).unwrap();
        let z = 3.0_f64.ln();
        let old =
            JointPolicy::from_logits(vec![2], vec![2], vec![vec![z, 0.0, z, 0.0]]).unwrap();
        let new =
            JointPolicy::from_logits(vec![2], vec![2], vec![vec![0.0, z, 0.0, z]]).unwrap();
        let bound = joint_trust_region_bound(&mdp, &old, &new).unwrap();
        assert!((bound.alpha_max - 0.5).abs() < 1e-12);
        assert!(bound.slack() > 0.0);
    }
}
