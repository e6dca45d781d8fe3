//! Tabular softmax decentralized policies.
//!
//! Each agent's policy is a logit table over (local state, local
//! action); action probabilities are the softmax of a logit row, so
//! they are strictly positive and probability ratios are always
//! defined. Policies are immutable values: updates and perturbations
//! return new policies.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decmdp::TabularDecMdp;
use crate::error::{Error, Result};

/// Parameter layout of a joint policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharing {
    /// One logit table per agent.
    Independent,
    /// A single logit table used by every agent. With `agent_slot` the
    /// table carries one row block per agent (an agent-id input), so
    /// shared parameters can still express heterogeneous behavior.
    Shared { agent_slot: bool },
}

/// A joint policy over per-agent local states and actions.
///
/// Logit storage depends on [`Sharing`]: independent mode keeps one
/// table per agent; shared mode keeps a single table that every agent
/// reads (and, during training, writes) through [`JointPolicy::row`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    n_agents: usize,
    local_states: Vec<usize>,
    local_actions: Vec<usize>,
    sharing: Sharing,
    /// Independent: `tables[k][s_k * A_k + a]`. Shared: `tables[0]`,
    /// with an extra leading agent block when `agent_slot` is on.
    tables: Vec<Vec<f64>>,
}

impl JointPolicy {
    /// Uniform policy (all logits zero) shaped for `mdp`.
    pub fn uniform(mdp: &TabularDecMdp) -> Self {
        let local_states: Vec<usize> = (0..mdp.n_agents()).map(|k| mdp.local_states(k)).collect();
        let local_actions: Vec<usize> = (0..mdp.n_agents()).map(|k| mdp.local_actions(k)).collect();
        let tables = local_states
            .iter()
            .zip(&local_actions)
            .map(|(&s, &a)| vec![0.0; s * a])
            .collect();
        JointPolicy {
            n_agents: mdp.n_agents(),
            local_states,
            local_actions,
            sharing: Sharing::Independent,
            tables,
        }
    }

    /// Deterministically seeded random logits, i.i.d. normal with the
    /// given scale.
    pub fn random(mdp: &TabularDecMdp, scale: f64, seed: u64) -> Self {
        JointPolicy::uniform(mdp).perturb(scale, seed)
    }

    /// Build from explicit per-agent logit tables.
    pub fn from_logits(
        local_states: Vec<usize>,
        local_actions: Vec<usize>,
        tables: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_agents = local_states.len();
        if local_actions.len() != n_agents || tables.len() != n_agents {
            return Err(Error::invalid_config(
                "per-agent shapes and logit tables must have equal length",
            ));
        }
        for (k, table) in tables.iter().enumerate() {
            if table.len() != local_states[k] * local_actions[k] {
                return Err(Error::PolicyShape {
                    agent: k,
                    states: table.len() / local_actions[k].max(1),
                    actions: local_actions[k],
                    expected_states: local_states[k],
                    expected_actions: local_actions[k],
                });
            }
            if table.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_config("logits must be finite"));
            }
        }
        Ok(JointPolicy {
            n_agents,
            local_states,
            local_actions,
            sharing: Sharing::Independent,
            tables,
        })
    }

    /// Convert to shared parameters. All agents must have identical
    /// local spaces. Without `agent_slot`, agent 0's table becomes the
    /// shared table; with it, each agent keeps its own block inside the
    /// single shared table.
    pub fn into_shared(self, agent_slot: bool) -> Result<Self> {
        let s0 = self.local_states[0];
        let a0 = self.local_actions[0];
        if self.local_states.iter().any(|&s| s != s0)
            || self.local_actions.iter().any(|&a| a != a0)
        {
            return Err(Error::SharedParamShape);
        }
        let table = if agent_slot {
            let mut t = Vec::with_capacity(self.n_agents * s0 * a0);
            for k in 0..self.n_agents {
                t.extend_from_slice(&self.tables[k]);
            }
            t
        } else {
            self.tables[0].clone()
        };
        Ok(JointPolicy {
            n_agents: self.n_agents,
            local_states: self.local_states,
            local_actions: self.local_actions,
            sharing: Sharing::Shared { agent_slot },
            tables: vec![table],
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn local_states(&self, agent: usize) -> usize {
        self.local_states[agent]
    }

    pub fn local_actions(&self, agent: usize) -> usize {
        self.local_actions[agent]
    }

    pub fn sharing(&self) -> Sharing {
        self.sharing
    }

    /// Check that this policy matches the environment's shape.
    pub fn matches(&self, mdp: &TabularDecMdp) -> Result<()> {
        if self.n_agents != mdp.n_agents() {
            return Err(Error::DimensionMismatch {
                table: "policy agents",
                expected: mdp.n_agents(),
                got: self.n_agents,
            });
        }
        for k in 0..self.n_agents {
            if self.local_states[k] != mdp.local_states(k)
                || self.local_actions[k] != mdp.local_actions(k)
            {
                return Err(Error::PolicyShape {
                    agent: k,
                    states: self.local_states[k],
                    actions: self.local_actions[k],
                    expected_states: mdp.local_states(k),
                    expected_actions: mdp.local_actions(k),
                });
            }
        }
        Ok(())
    }

    fn row_range(&self, agent: usize, s_k: usize) -> (usize, usize, usize) {
        let actions = self.local_actions[agent];
        match self.sharing {
            Sharing::Independent => (agent, s_k * actions, actions),
            Sharing::Shared { agent_slot: false } => (0, s_k * actions, actions),
            Sharing::Shared { agent_slot: true } => {
                let block = self.local_states[agent] * actions;
                (0, agent * block + s_k * actions, actions)
            }
        }
    }

    /// Logit row for (agent, local state).
    pub fn row(&self, agent: usize, s_k: usize) -> &[f64] {
        let (t, start, len) = self.row_range(agent, s_k);
        &self.tables[t][start..start + len]
    }

    /// Mutable logit row for (agent, local state). In shared mode
    /// without an agent slot, every agent aliases the same storage.
    pub fn row_mut(&mut self, agent: usize, s_k: usize) -> &mut [f64] {
        let (t, start, len) = self.row_range(agent, s_k);
        &mut self.tables[t][start..start + len]
    }

    /// Action distribution of agent `k` at local state `s_k`: the
    /// softmax of the logit row. Strictly positive, sums to 1 within
    /// floating-point rounding.
    pub fn probs(&self, agent: usize, s_k: usize) -> Vec<f64> {
        softmax(self.row(agent, s_k))
    }

    /// Probability of one action.
    pub fn prob(&self, agent: usize, s_k: usize, a_k: usize) -> f64 {
        self.probs(agent, s_k)[a_k]
    }

    /// Joint probability of joint action `a` at joint state `s` under
    /// the product policy, via `mdp`'s local projections.
    pub fn joint_prob(&self, mdp: &TabularDecMdp, s: usize, a: usize) -> f64 {
        let codec = mdp.action_codec();
        let mut p = 1.0;
        for k in 0..self.n_agents {
            p *= self.prob(k, mdp.local_state_of(s, k), codec.component(a, k));
        }
        p
    }

    /// Add zero-mean Gaussian noise of the given scale to every logit.
    /// Deterministic in the seed; scale 0 returns an identical policy.
    pub fn perturb(&self, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for table in &mut out.tables {
            for z in table.iter_mut() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *z += scale * noise;
            }
        }
        out
    }

    /// Perturb only the listed agents' logits (independent sharing
    /// only). Used to build pairs with large opponent updates.
    pub fn perturb_agents(&self, agents: &[usize], scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for &k in agents {
            for z in out.tables[k].iter_mut() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *z += scale * noise;
            }
        }
        out
    }

    /// Zeroed buffer shaped like the logit storage, for gradient
    /// accumulation. In shared mode the buffer has one table, so
    /// contributions from different agents sum naturally.
    pub fn zeroed_grad(&self) -> Vec<Vec<f64>> {
        self.tables.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// Add a per-action gradient row for (agent, local state) into a
    /// buffer from [`JointPolicy::zeroed_grad`].
    pub fn accumulate_grad(&self, grad: &mut [Vec<f64>], agent: usize, s_k: usize, row: &[f64]) {
        let (t, start, len) = self.row_range(agent, s_k);
        debug_assert_eq!(row.len(), len);
        for (slot, g) in grad[t][start..start + len].iter_mut().zip(row) {
            *slot += g;
        }
    }

    /// Accumulated gradient of the storage coordinate that backs
    /// (agent, local state, action).
    pub fn grad_coordinate(&self, grad: &[Vec<f64>], agent: usize, s_k: usize, a_k: usize) -> f64 {
        let (t, start, _len) = self.row_range(agent, s_k);
        grad[t][start + a_k]
    }

    /// Ascend every logit by `lr` times the accumulated gradient.
    pub fn apply_step(&mut self, grad: &[Vec<f64>], lr: f64) {
        for (table, g) in self.tables.iter_mut().zip(grad) {
            for (z, dg) in table.iter_mut().zip(g) {
                *z += lr * dg;
            }
        }
    }

    /// Serialize to RON text with shortest round-trip float encoding.
    pub fn to_ron_string(&self) -> Result<String> {
        ron::ser::to_string_pretty(self, ron::ser::PrettyConfig::default()).map_err(|e| {
            Error::Serialization {
                reason: e.to_string(),
            }
        })
    }

    pub fn from_ron_str(text: &str) -> Result<Self> {
        ron::from_str(text).map_err(|e| Error::Serialization {
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ron_string()?).map_err(|e| Error::Io {
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

/// Write a sequence of policy iterates (for example a training run's
/// checkpoints) as one RON document.
pub fn save_policies(path: &Path, policies: &[JointPolicy]) -> Result<()> {
    let text = ron::ser::to_string_pretty(policies, ron::ser::PrettyConfig::default())
        .map_err(|e| Error::Serialization {
            reason: e.to_string(),
        })?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Load a sequence of policy iterates written by [`save_policies`].
pub fn load_policies(path: &Path) -> Result<Vec<JointPolicy>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    ron::from_str(&text).map_err(|e| Error::Serialization {
        reason: e.to_string(),
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Per-agent and joint probability ratios between two policies.
#[derive(Debug, Clone)]
pub struct RatioTable {
    /// `per_agent[k][s_k * A_k + a_k]` = new/old probability ratio.
    pub per_agent: Vec<Vec<f64>>,
    /// `joint[s * A + a]` = product of the per-agent ratios at the
    /// local projections of `(s, a)`.
    pub joint: Vec<f64>,
}

/// Full ratio tables for an (old, new) policy pair on `mdp`.
///
/// Softmax rows are strictly positive, so every ratio is defined; the
/// error path exists for hand-built tables that bypass the softmax.
pub fn ratios(mdp: &TabularDecMdp, old: &JointPolicy, new: &JointPolicy) -> Result<RatioTable> {
    old.matches(mdp)?;
    new.matches(mdp)?;
    let mut per_agent = Vec::with_capacity(mdp.n_agents());
    for k in 0..mdp.n_agents() {
        let (s_count, a_count) = (mdp.local_states(k), mdp.local_actions(k));
        let mut table = vec![0.0; s_count * a_count];
        for s_k in 0..s_count {
            let p_old = old.probs(k, s_k);
            let p_new = new.probs(k, s_k);
            for a_k in 0..a_count {
                if p_old[a_k] <= 0.0 {
                    if p_new[a_k] > 0.0 {
                        return Err(Error::UndefinedRatio {
                            agent: k,
                            state: s_k,
                            action: a_k,
                        });
                    }
                    table[s_k * a_count + a_k] = 1.0;
                } else {
                    table[s_k * a_count + a_k] = p_new[a_k] / p_old[a_k];
                }
            }
        }
        per_agent.push(table);
    }

    let codec = mdp.action_codec();
    let mut joint = vec![1.0; mdp.joint_states() * mdp.joint_actions()];
    for s in 0..mdp.joint_states() {
        for a in 0..mdp.joint_actions() {
            let mut lambda = 1.0;
            for k in 0..mdp.n_agents() {
                let s_k = mdp.local_state_of(s, k);
                let a_k = codec.component(a, k);
                lambda *= per_agent[k][s_k * mdp.local_actions(k) + a_k];
            }
            joint[s * mdp.joint_actions() + a] = lambda;
        }
    }
    Ok(RatioTable { per_agent, joint })
}

/// Per-agent trust-region budget from a centralized budget: delta / N.
pub fn sharing_budget(delta: f64, n_agents: usize) -> f64 {
    delta / n_agents as f64
}

/// Project `new` so that, for every agent and local state, the
/// probability ratios against `old` lie inside `[1/(1+eps), 1+eps]`.
///
/// Each row is clamped into the box and renormalized, iterating to a
/// fixed point (at most one pass per action plus one). If rounding in
/// the renormalization leaves a residual violation, the row is blended
/// toward the old distribution just far enough to land inside the box,
/// which is always feasible because the old row itself is interior.
pub fn project_to_ratio_box(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    eps: f64,
) -> Result<JointPolicy> {
    old.matches(mdp)?;
    new.matches(mdp)?;
    if eps < 0.0 {
        return Err(Error::invalid_config("eps must be nonnegative"));
    }
    let mut out = new.clone();
    let hi_ratio = 1.0 + eps;
    let lo_ratio = 1.0 / (1.0 + eps);
    // Shrink the working box by a hair so renormalization rounding
    // cannot push a ratio back over the stated bound.
    let margin = 1.0 - 1e-12;

    for k in 0..mdp.n_agents() {
        for s_k in 0..mdp.local_states(k) {
            let p_old = old.probs(k, s_k);
            let mut q = new.probs(k, s_k);
            let n_actions = q.len();

            for _pass in 0..=n_actions {
                let mut changed = false;
                for a in 0..n_actions {
                    let lo = p_old[a] * lo_ratio;
                    let hi = p_old[a] * hi_ratio;
                    let clamped = q[a].clamp(lo, hi);
                    if clamped != q[a] {
                        q[a] = clamped;
                        changed = true;
                    }
                }
                let sum: f64 = q.iter().sum();
                if (sum - 1.0).abs() > 4.0 * f64::EPSILON {
                    for v in &mut q {
                        *v /= sum;
                    }
                    changed = true;
                }
                if !changed {
                    break;
                }
            }

            // Residual violations after the fixed-point loop are within
            // rounding of the box; a blend toward the feasible old row
            // removes them exactly.
            let mut t_needed = 0.0_f64;
            for a in 0..n_actions {
                let lambda = q[a] / p_old[a];
                if lambda > hi_ratio * margin {
                    let t = (lambda - hi_ratio * margin) / (lambda - 1.0);
                    t_needed = t_needed.max(t.clamp(0.0, 1.0));
                } else if lambda < lo_ratio / margin {
                    let t = (lo_ratio / margin - lambda) / (1.0 - lambda);
                    t_needed = t_needed.max(t.clamp(0.0, 1.0));
                }
            }
            if t_needed > 0.0 {
                for a in 0..n_actions {
                    q[a] = (1.0 - t_needed) * q[a] + t_needed * p_old[a];
                }
            }

            let row = out.row_mut(k, s_k);
            if q == p_old {
                row.copy_from_slice(old.row(k, s_k));
            } else {
                for (z, &p) in row.iter_mut().zip(q.iter()) {
                    *z = p.ln();
                }
            }
        }
    }
    Ok(out)
}
