//! Decentralized trust-region bound, the ratio-box premise check, and
//! the stationarity-assumption probe.

use crate::decmdp::TabularDecMdp;
use crate::error::{Error, Result};
use crate::oracle::staged::{
    decentralized_eval, shift_decomposition, staged_advantage_with, surrogate_u_with, xi_bound,
    Exactness, ShiftDecomposition,
};
use crate::oracle::{joint_trust_region_bound, tv_divergence, JointBound};
use crate::policy::JointPolicy;

/// The decentralized trust-region lower bound for one viewpoint agent:
/// `J(new_k) - J(old_k) >= (sum_j U_j - 2 N gamma xi alpha / (1-gamma)) / (1-gamma)`.
#[derive(Debug, Clone)]
pub struct DecentralizedBound {
    pub agent: usize,
    /// `J(new_k) - J(old_k)` from two independent local evaluations.
    pub lhs: f64,
    /// Surrogate sum minus the centralized trust-region penalty.
    pub rhs: f64,
    /// Occupancy-weighted TV summed over all agents' updates.
    pub alpha: f64,
    /// Uniform staged-advantage bound (shared across agents).
    pub xi: f64,
    /// `U_{old_k}(new_j)` for every updating agent `j`.
    pub per_agent_u: Vec<f64>,
    pub exactness: Exactness,
}

impl DecentralizedBound {
    pub fn slack(&self) -> f64 {
        self.lhs - self.rhs
    }
}

/// Evaluate the decentralized bound for viewpoint agent `k`. The
/// certified contract (`lhs >= rhs - 1e-8`) applies in the shared-state
/// regime where the marginal kernels are exact.
pub fn decentralized_trust_region_bound(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
) -> Result<DecentralizedBound> {
    let xi = xi_bound(mdp, old, new)?;
    decentralized_bound_with_xi(mdp, old, new, k, xi)
}

/// [`decentralized_trust_region_bound`] with a precomputed advantage
/// bound, so sweeps over viewpoint agents pay for `xi` once.
pub fn decentralized_bound_given_xi(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
    xi: f64,
) -> Result<DecentralizedBound> {
    decentralized_bound_with_xi(mdp, old, new, k, xi)
}

pub(crate) fn decentralized_bound_with_xi(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
    xi: f64,
) -> Result<DecentralizedBound> {
    if k >= mdp.n_agents() {
        return Err(Error::AgentOutOfRange {
            agent: k,
            n_agents: mdp.n_agents(),
        });
    }
    if !mdp.homogeneous_agents() {
        return Err(Error::HeterogeneousAgents {
            reason: "the decentralized bound cross-evaluates every agent's policy on agent k's local space",
        });
    }
    let n = mdp.n_agents();
    let gamma = mdp.discount();

    let le_old = decentralized_eval(mdp, old, k)?;
    let le_new = decentralized_eval(mdp, new, k)?;
    let lhs = le_new.ret - le_old.ret;

    let mut per_agent_u = Vec::with_capacity(n);
    for j in 0..n {
        per_agent_u.push(surrogate_u_with(
            mdp,
            old,
            new,
            k,
            j,
            &le_old.values,
            &le_old.occupancy,
        )?);
    }
    let surrogate_sum: f64 = per_agent_u.iter().sum();

    let mut alpha = 0.0;
    for (s_k, &d) in le_old.occupancy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for j in 0..n {
            let tv = tv_divergence(&old.probs(j, s_k), &new.probs(j, s_k));
            alpha += d * tv;
        }
    }

    let penalty = 2.0 * n as f64 * gamma * xi * alpha / (1.0 - gamma);
    let rhs = (surrogate_sum - penalty) / (1.0 - gamma);

    Ok(DecentralizedBound {
        agent: k,
        lhs,
        rhs,
        alpha,
        xi,
        per_agent_u,
        exactness: le_old.exactness,
    })
}

/// Premise and conclusion of the ratio-box TV check for one agent.
#[derive(Debug, Clone)]
pub struct AgentPremise {
    pub agent: usize,
    pub eps: f64,
    /// True when every ratio on the occupancy support lies inside
    /// `[1/(1+eps), 1+eps]`.
    pub premise_holds: bool,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// `E_{s ~ d}[TV(old_j(.|s), new_j(.|s))]`.
    pub expected_tv: f64,
    /// `expected_tv <= eps`; only asserted when the premise holds.
    pub conclusion_holds: bool,
}

#[derive(Debug, Clone)]
pub struct RatioPremiseReport {
    pub agents: Vec<AgentPremise>,
}

impl RatioPremiseReport {
    /// True when every agent with a satisfied premise also satisfies
    /// the TV conclusion.
    pub fn holds(&self) -> bool {
        self.agents
            .iter()
            .all(|a| !a.premise_holds || a.conclusion_holds)
    }
}

const PREMISE_TOL: f64 = 1e-9;

/// Check, per agent, whether ratios against `old` stay inside the
/// `[1/(1+eps_j), 1+eps_j]` box over the support of `d`, and when they
/// do, whether the expected TV is bounded by `eps_j`. A violated
/// premise is reported, not an error.
///
/// `d` is a distribution over a common local state space, so all agents
/// must share one local space shape.
pub fn ratio_premise_check(
    old: &JointPolicy,
    new: &JointPolicy,
    d: &[f64],
    eps_per_agent: &[f64],
) -> Result<RatioPremiseReport> {
    let n = old.n_agents();
    if eps_per_agent.len() != n {
        return Err(Error::DimensionMismatch {
            table: "eps_per_agent",
            expected: n,
            got: eps_per_agent.len(),
        });
    }
    for j in 0..n {
        if old.local_states(j) != d.len() {
            return Err(Error::HeterogeneousAgents {
                reason: "premise check weights every agent by one occupancy over a common local space",
            });
        }
    }

    let mut agents = Vec::with_capacity(n);
    for j in 0..n {
        let eps = eps_per_agent[j];
        let hi = 1.0 + eps;
        let lo = 1.0 / (1.0 + eps);
        let mut min_ratio = f64::INFINITY;
        let mut max_ratio = f64::NEG_INFINITY;
        let mut expected_tv = 0.0;
        for (s, &w) in d.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let p_old = old.probs(j, s);
            let p_new = new.probs(j, s);
            for a in 0..p_old.len() {
                let ratio = p_new[a] / p_old[a];
                min_ratio = min_ratio.min(ratio);
                max_ratio = max_ratio.max(ratio);
            }
            expected_tv += w * tv_divergence(&p_old, &p_new);
        }
        if !min_ratio.is_finite() {
            // empty support
            min_ratio = 1.0;
            max_ratio = 1.0;
        }
        let premise_holds = max_ratio <= hi + PREMISE_TOL && min_ratio >= lo - PREMISE_TOL;
        agents.push(AgentPremise {
            agent: j,
            eps,
            premise_holds,
            min_ratio,
            max_ratio,
            expected_tv,
            conclusion_holds: expected_tv <= eps + PREMISE_TOL,
        });
    }
    Ok(RatioPremiseReport { agents })
}

/// What happens if agent `k` pretends its environment is stationary:
/// evaluate the single-agent trust-region bound inside the frozen
/// (all-old) marginal kernel and compare it with the true decentralized
/// return once every agent actually updates.
#[derive(Debug, Clone)]
pub struct StationarityProbe {
    pub agent: usize,
    /// Return predicted inside the frozen single-agent model.
    pub frozen_return: f64,
    /// Lower bound claimed by the single-agent analysis in the frozen
    /// model: surrogate minus the quadratic TV penalty.
    pub naive_bound: f64,
    /// True decentralized return under the fully updated profile.
    pub true_return: f64,
    /// Own-policy worst-state TV (the only step the frozen analysis
    /// accounts for).
    pub own_alpha: f64,
    /// `true_return < naive_bound - 1e-8`: the frozen-model guarantee
    /// failed against reality.
    pub violated: bool,
}

/// Evaluate the stationarity probe for agent `k` on an (old, new) pair.
pub fn stationarity_probe(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    k: usize,
) -> Result<StationarityProbe> {
    let gamma = mdp.discount();
    let le_old = decentralized_eval(mdp, old, k)?;

    // Frozen model: stage-1 kernel held fixed while only agent k moves.
    let frozen_adv = staged_advantage_with(mdp, old, new, k, 1, &le_old.values)?;
    let a_count = mdp.local_actions(k);

    // Surrogate in the frozen model (old occupancy, new own policy).
    let mut gain = 0.0;
    let mut own_alpha = 0.0_f64;
    let mut xi_frozen = 0.0_f64;
    for (s_k, &d) in le_old.occupancy.iter().enumerate() {
        let p_old = old.probs(k, s_k);
        let p_new = new.probs(k, s_k);
        own_alpha = own_alpha.max(tv_divergence(&p_old, &p_new));
        for a in 0..a_count {
            xi_frozen = xi_frozen.max(frozen_adv[s_k * a_count + a].abs());
            gain += d * (p_new[a] - p_old[a]) * frozen_adv[s_k * a_count + a];
        }
    }
    let frozen_surrogate = le_old.ret + gain / (1.0 - gamma);

    // Frozen-model prediction of the updated return: re-solve the local
    // system with the new own policy against the frozen kernel.
    let frozen_kernel = crate::oracle::staged::staged_marginal_kernel(mdp, old, new, k, 1)?;
    let s_count = mdp.local_states(k);
    let mut chain = nalgebra::DMatrix::zeros(s_count, s_count);
    for s_k in 0..s_count {
        let probs = new.probs(k, s_k);
        for a_k in 0..a_count {
            let row = frozen_kernel.row(s_count, s_k, a_k, a_count);
            for (s2, &p) in row.iter().enumerate() {
                chain[(s_k, s2)] += probs[a_k] * p;
            }
        }
    }
    let rewards: Vec<f64> = (0..s_count).map(|s| mdp.local_reward(k, s)).collect();
    let frozen_values = crate::oracle::solve_values(&chain, &rewards, gamma)?;
    let p0 = mdp.local_initial_dist(k);
    let frozen_return: f64 = p0.iter().zip(&frozen_values).map(|(&p, &v)| p * v).sum();

    let penalty = 4.0 * xi_frozen * gamma * own_alpha * own_alpha / ((1.0 - gamma) * (1.0 - gamma));
    let naive_bound = frozen_surrogate - penalty;

    let true_return = decentralized_eval(mdp, new, k)?.ret;

    Ok(StationarityProbe {
        agent: k,
        frozen_return,
        naive_bound,
        true_return,
        own_alpha,
        violated: true_return < naive_bound - 1e-8,
    })
}

/// Every oracle quantity for one (old, new) pair, plus CSV export.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub joint: JointBound,
    pub decentralized: Vec<DecentralizedBound>,
    pub shifts: Vec<ShiftDecomposition>,
    /// Decentralized values under the old profile, per agent.
    pub dec_values: Vec<Vec<f64>>,
    /// `staged_adv[k][j]` over agent k's local pairs, for the stage at
    /// which agent j updates.
    pub staged_adv: Vec<Vec<Vec<f64>>>,
    pub xi: f64,
}

impl OracleReport {
    /// Worst (smallest) decentralized slack across viewpoint agents.
    pub fn worst_dec_slack(&self) -> f64 {
        self.decentralized
            .iter()
            .map(DecentralizedBound::slack)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_decomposition_residual(&self) -> f64 {
        self.shifts
            .iter()
            .map(|s| s.residual)
            .fold(0.0_f64, f64::max)
    }

    pub fn csv_header(n_agents: usize) -> String {
        let mut cols = vec![
            "thm1_lhs".to_string(),
            "thm1_rhs".to_string(),
            "thm1_alpha".to_string(),
            "lhs".to_string(),
            "rhs".to_string(),
            "alpha".to_string(),
            "xi".to_string(),
            "residual".to_string(),
        ];
        for j in 0..n_agents {
            cols.push(format!("u_{j}"));
        }
        cols.join(",")
    }

    /// Flat CSV row. Decentralized columns report the viewpoint agent
    /// with the worst slack.
    pub fn csv_row(&self) -> String {
        let worst = self
            .decentralized
            .iter()
            .min_by(|a, b| a.slack().total_cmp(&b.slack()))
            .expect("at least one agent");
        let mut cols = vec![
            self.joint.lhs.to_string(),
            self.joint.rhs.to_string(),
            self.joint.alpha_max.to_string(),
            worst.lhs.to_string(),
            worst.rhs.to_string(),
            worst.alpha.to_string(),
            self.xi.to_string(),
            self.max_decomposition_residual().to_string(),
        ];
        for u in &worst.per_agent_u {
            cols.push(u.to_string());
        }
        cols.join(",")
    }

    /// Full-table dump for debugging.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "joint: lhs={} rhs={} alpha={} xi={}\n",
            self.joint.lhs, self.joint.rhs, self.joint.alpha_max, self.joint.xi
        ));
        out.push_str(&format!("xi={}\n", self.xi));
        for b in &self.decentralized {
            out.push_str(&format!(
                "agent {}: lhs={} rhs={} alpha={} slack={} U={:?}\n",
                b.agent,
                b.lhs,
                b.rhs,
                b.alpha,
                b.slack(),
                b.per_agent_u
            ));
        }
        for (k, v) in self.dec_values.iter().enumerate() {
            out.push_str(&format!("v[{k}] = {v:?}\n"));
        }
        for s in &self.shifts {
            out.push_str(&format!(
                "shift agent {}: residual={} total={:?}\n",
                s.agent, s.residual, s.total
            ));
        }
        out
    }
}

/// Compute the full oracle report for an (old, new) pair.
pub fn oracle_report(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
) -> Result<OracleReport> {
    let joint = joint_trust_region_bound(mdp, old, new)?;
    let xi = xi_bound(mdp, old, new)?;
    let n = mdp.n_agents();

    let mut decentralized = Vec::with_capacity(n);
    let mut shifts = Vec::with_capacity(n);
    let mut dec_values = Vec::with_capacity(n);
    let mut staged_adv = Vec::with_capacity(n);
    for k in 0..n {
        decentralized.push(decentralized_bound_with_xi(mdp, old, new, k, xi)?);
        shifts.push(shift_decomposition(mdp, old, new, k)?);
        let le = decentralized_eval(mdp, old, k)?;
        let mut per_stage = Vec::with_capacity(n);
        for j in 0..n {
            per_stage.push(staged_advantage_with(mdp, old, new, k, j + 1, &le.values)?);
        }
        dec_values.push(le.values);
        staged_adv.push(per_stage);
    }

    Ok(OracleReport {
        joint,
        decentralized,
        shifts,
        dec_values,
        staged_adv,
        xi,
    })
}
