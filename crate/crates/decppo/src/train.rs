//! Clipped-ratio policy optimizers and tabular critics.
//!
//! Three optimizers share one gradient engine over tabular softmax
//! logits: independent-ratio PPO (per-agent ratios against marginal
//! advantages), joint-ratio PPO (the product ratio against the
//! centralized advantage), and unclipped surrogate ascent. Gradients
//! are exact expectations over the behavior occupancy unless Monte
//! Carlo rollouts are requested. The clipped branch contributes zero
//! gradient (standard subgradient convention).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decmdp::TabularDecMdp;
use crate::error::{Error, Result};
use crate::oracle::{
    decentralized_eval, decentralized_trust_region_bound, joint_eval, marginal_kernel,
    tv_divergence, JointEval,
};
use crate::policy::{sharing_budget, JointPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    IrPpo,
    JrPpo,
    Surrogate,
}

/// How the clipped term is formed: `clip(ratio, 1 +/- eps)` or the
/// shifted variant `clip(ratio - 1, +/- eps)`. Both clip at the same
/// ratio values but weight the objective differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveForm {
    ClipRatio,
    ClipRatioMinusOne,
}

/// Clipping range: a fixed epsilon, a centralized budget split as
/// `delta / N`, or no clipping at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSpec {
    Eps(f64),
    DeltaOverN { delta: f64 },
    None,
}

impl ClipSpec {
    /// Resolved clipping range for an environment with `n_agents`.
    pub fn eps(&self, n_agents: usize) -> Option<f64> {
        match *self {
            ClipSpec::Eps(e) => Some(e),
            ClipSpec::DeltaOverN { delta } => Some(sharing_budget(delta, n_agents)),
            ClipSpec::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    ExactOracle,
    McRollout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    Decentralized,
    Centralized,
    None,
}

/// Rollout batch shape for Monte Carlo advantage estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub rollouts: usize,
    pub horizon: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            rollouts: 16,
            horizon: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInit {
    Uniform,
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub clip: ClipSpec,
    pub objective_form: ObjectiveForm,
    pub epochs_per_iter: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub advantage_source: AdvantageSource,
    pub critic: CriticKind,
    /// Step size of the expected TD(0) sweep; 1.0 is a full backup.
    pub critic_step: f64,
    pub batch: BatchSpec,
    /// Standardize advantages over the behavior batch before the epoch
    /// loop, as reference PPO implementations do.
    pub normalize_advantages: bool,
    /// Compute the decentralized bound slack on every realized update
    /// (homogeneous environments only).
    pub track_bound_slack: bool,
    pub init: PolicyInit,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::IrPpo,
            clip: ClipSpec::Eps(0.1),
            objective_form: ObjectiveForm::ClipRatio,
            epochs_per_iter: 10,
            iterations: 100,
            learning_rate: 0.05,
            advantage_source: AdvantageSource::ExactOracle,
            critic: CriticKind::None,
            critic_step: 1.0,
            batch: BatchSpec::default(),
            normalize_advantages: true,
            track_bound_slack: true,
            init: PolicyInit::Uniform,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.clip {
            ClipSpec::Eps(eps) => {
                if !(0.0..=1.0).contains(&eps) {
                    return Err(Error::invalid_config(format!(
                        "clip eps {eps} must lie in [0, 1]"
                    )));
                }
            }
            ClipSpec::DeltaOverN { delta } => {
                if delta <= 0.0 {
                    return Err(Error::invalid_config("clip delta must be positive"));
                }
            }
            ClipSpec::None => {}
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid_config("learning_rate must be positive"));
        }
        if !(self.critic_step > 0.0 && self.critic_step <= 1.0) {
            return Err(Error::invalid_config("critic_step must be in (0, 1]"));
        }
        if self.advantage_source == AdvantageSource::McRollout
            && (self.batch.rollouts == 0 || self.batch.horizon == 0)
        {
            return Err(Error::invalid_config(
                "mc_rollout needs a nonempty batch shape",
            ));
        }
        Ok(())
    }

    pub fn initial_policy(&self, mdp: &TabularDecMdp) -> JointPolicy {
        match self.init {
            PolicyInit::Uniform => JointPolicy::uniform(mdp),
            PolicyInit::Random { scale } => JointPolicy::random(mdp, scale, self.seed),
        }
    }
}

/// Metrics for one optimizer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Exact joint return of the updated policy.
    pub joint_return: f64,
    /// Exact decentralized returns of the updated profile, per agent.
    pub dec_returns: Vec<f64>,
    /// Global (min, max) ratio over the behavior support after each
    /// optimization epoch.
    pub ratio_extremes: Vec<(f64, f64)>,
    /// Occupancy-weighted TV between old and new policies, per agent.
    pub expected_tv: Vec<f64>,
    /// Sum of the per-agent expected TVs (the centralized trust region).
    pub tv_sum: f64,
    /// Worst decentralized-bound slack over viewpoint agents for the
    /// realized (old, new) pair; NaN when not tracked.
    pub dec_bound_slack: f64,
    /// Clipped objective value at the final policy of the iteration.
    pub objective: f64,
}

impl IterationRecord {
    pub fn csv_header(n_agents: usize, epochs: usize) -> String {
        let mut cols = vec!["iteration".to_string(), "joint_return".to_string()];
        for k in 0..n_agents {
            cols.push(format!("dec_return_{k}"));
        }
        for k in 0..n_agents {
            cols.push(format!("tv_{k}"));
        }
        cols.push("tv_sum".to_string());
        cols.push("dec_bound_slack".to_string());
        cols.push("objective".to_string());
        for e in 1..=epochs {
            cols.push(format!("ratio_min_e{e}"));
            cols.push(format!("ratio_max_e{e}"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.iteration.to_string(), self.joint_return.to_string()];
        for v in &self.dec_returns {
            cols.push(v.to_string());
        }
        for v in &self.expected_tv {
            cols.push(v.to_string());
        }
        cols.push(self.tv_sum.to_string());
        cols.push(self.dec_bound_slack.to_string());
        cols.push(self.objective.to_string());
        for (lo, hi) in &self.ratio_extremes {
            cols.push(lo.to_string());
            cols.push(hi.to_string());
        }
        cols.join(",")
    }
}

/// Tabular critic tables plus the last sweep residual.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticState {
    pub kind: CriticKind,
    /// Centralized: one table over joint states. Decentralized: one
    /// table per agent over its local states.
    pub values: Vec<Vec<f64>>,
    pub last_residual: f64,
}

impl CriticState {
    pub fn new(mdp: &TabularDecMdp, kind: CriticKind) -> Self {
        let values = match kind {
            CriticKind::Centralized => vec![vec![0.0; mdp.joint_states()]],
            CriticKind::Decentralized => (0..mdp.n_agents())
                .map(|k| vec![0.0; mdp.local_states(k)])
                .collect(),
            CriticKind::None => Vec::new(),
        };
        CriticState {
            kind,
            values,
            last_residual: f64::INFINITY,
        }
    }
}

/// One expected TD(0) sweep with the given step size, the noise-free
/// full-width backup under the policy. Returns the max-abs value change.
///
/// The decentralized sweep regresses the observed joint reward onto
/// local states: joint states consistent with a local state are
/// weighted by the policy's discounted occupancy, so its fixed point is
/// the occupancy-weighted conditional of the centralized value (and the
/// centralized value itself when the state is shared).
pub fn critic_update(
    mdp: &TabularDecMdp,
    pol: &JointPolicy,
    state: &mut CriticState,
    step: f64,
) -> Result<f64> {
    let eval = joint_eval(mdp, pol)?;
    let gamma = mdp.discount();
    let mut residual = 0.0_f64;
    match state.kind {
        CriticKind::None => {}
        CriticKind::Centralized => {
            let chain = crate::oracle::joint_state_chain(mdp, pol);
            let v = &mut state.values[0];
            let mut next = vec![0.0; v.len()];
            for s in 0..mdp.joint_states() {
                let mut exp_next = 0.0;
                for s2 in 0..mdp.joint_states() {
                    exp_next += chain[(s, s2)] * v[s2];
                }
                let target = mdp.joint_reward(s) + gamma * exp_next;
                next[s] = v[s] + step * (target - v[s]);
                residual = residual.max((next[s] - v[s]).abs());
            }
            *v = next;
        }
        CriticKind::Decentralized => {
            let chain = crate::oracle::joint_state_chain(mdp, pol);
            for k in 0..mdp.n_agents() {
                let s_count = mdp.local_states(k);
                let mut mass = vec![0.0; s_count];
                for s in 0..mdp.joint_states() {
                    mass[mdp.local_state_of(s, k)] += eval.occupancy[s];
                }
                let per_local = (mdp.joint_states() / s_count).max(1) as f64;
                let v = &mut state.values[k];
                let mut target = vec![0.0; s_count];
                for s in 0..mdp.joint_states() {
                    let s_k = mdp.local_state_of(s, k);
                    let w = if mass[s_k] > 0.0 {
                        eval.occupancy[s] / mass[s_k]
                    } else {
                        // occupancy hole: weight consistent states evenly
                        1.0 / per_local
                    };
                    if w == 0.0 {
                        continue;
                    }
                    let mut exp_next = 0.0;
                    for s2 in 0..mdp.joint_states() {
                        let p = chain[(s, s2)];
                        if p > 0.0 {
                            exp_next += p * v[mdp.local_state_of(s2, k)];
                        }
                    }
                    target[s_k] += w * (mdp.joint_reward(s) + gamma * exp_next);
                }
                for s_k in 0..s_count {
                    let updated = v[s_k] + step * (target[s_k] - v[s_k]);
                    residual = residual.max((updated - v[s_k]).abs());
                    v[s_k] = updated;
                }
            }
        }
    }
    state.last_residual = residual;
    Ok(residual)
}

/// Sweep [`critic_update`] until the residual drops below `tol`.
pub fn run_critic_to_convergence(
    mdp: &TabularDecMdp,
    pol: &JointPolicy,
    kind: CriticKind,
    step: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<(CriticState, usize)> {
    let mut state = CriticState::new(mdp, kind);
    for sweep in 1..=max_sweeps {
        let residual = critic_update(mdp, pol, &mut state, step)?;
        if residual < tol {
            return Ok((state, sweep));
        }
    }
    Ok((state, max_sweeps))
}

/// Max-abs gap between the decentralized-critic and centralized-critic
/// advantage estimators at their exact fixed points, computed by two
/// independent routes (joint q/v solve vs. local marginal-kernel
/// solve). Certified only in the shared-state regime.
pub fn advantage_equivalence_check(mdp: &TabularDecMdp, pol: &JointPolicy) -> Result<f64> {
    if !mdp.shared_state() {
        return Err(Error::HeterogeneousAgents {
            reason: "advantage equivalence is exact only with a shared state",
        });
    }
    let joint = joint_eval(mdp, pol)?;
    let n_actions = mdp.joint_actions();
    let codec = mdp.action_codec();
    let gamma = mdp.discount();
    let mut max_gap = 0.0_f64;

    for k in 0..mdp.n_agents() {
        // centralized-critic route: marginalize q over the other agents
        let a_count = mdp.local_actions(k);
        let mut centralized = vec![0.0; mdp.joint_states() * a_count];
        for s in 0..mdp.joint_states() {
            for a in 0..n_actions {
                let mut w = 1.0;
                for i in 0..mdp.n_agents() {
                    if i == k {
                        continue;
                    }
                    w *= pol.prob(i, mdp.local_state_of(s, i), codec.component(a, i));
                }
                let a_k = codec.component(a, k);
                centralized[s * a_count + a_k] += w * joint.q[s * n_actions + a];
            }
        }
        for s in 0..mdp.joint_states() {
            for a_k in 0..a_count {
                centralized[s * a_count + a_k] -= joint.v[s];
            }
        }

        // decentralized-critic route: local Bellman solve against the
        // marginal kernel, regressing the joint reward
        let kernel = marginal_kernel(mdp, pol, k)?;
        let s_count = mdp.local_states(k);
        let mut chain = nalgebra::DMatrix::zeros(s_count, s_count);
        for s_k in 0..s_count {
            let probs = pol.probs(k, s_k);
            for a_k in 0..a_count {
                let row = kernel.row(s_count, s_k, a_k, a_count);
                for (s2, &p) in row.iter().enumerate() {
                    chain[(s_k, s2)] += probs[a_k] * p;
                }
            }
        }
        let rewards: Vec<f64> = (0..s_count).map(|s| mdp.joint_reward(s)).collect();
        let local_v = crate::oracle::solve_local_values(&chain, &rewards, gamma)?;
        for s_k in 0..s_count {
            for a_k in 0..a_count {
                let row = kernel.row(s_count, s_k, a_k, a_count);
                let next: f64 = row.iter().zip(&local_v).map(|(&p, &v)| p * v).sum();
                let dec = mdp.joint_reward(s_k) + gamma * next - local_v[s_k];
                let gap = (dec - centralized[s_k * a_count + a_k]).abs();
                max_gap = max_gap.max(gap);
            }
        }
    }
    Ok(max_gap)
}

/// Weighted advantage samples shared by the objective and its gradient.
struct Batch {
    /// Behavior occupancy over joint states.
    occupancy: Vec<f64>,
    /// Marginal advantage per agent: `madv[k][s * A_k + a_k]`.
    marginal_adv: Vec<Vec<f64>>,
    /// Centralized advantage over `(s, joint a)`.
    joint_adv: Vec<f64>,
}

fn marginal_advantages(mdp: &TabularDecMdp, pol: &JointPolicy, adv: &[f64]) -> Vec<Vec<f64>> {
    let codec = mdp.action_codec();
    let n_actions = mdp.joint_actions();
    (0..mdp.n_agents())
        .map(|k| {
            let a_count = mdp.local_actions(k);
            let mut madv = vec![0.0; mdp.joint_states() * a_count];
            for s in 0..mdp.joint_states() {
                for a in 0..n_actions {
                    let mut w = 1.0;
                    for i in 0..mdp.n_agents() {
                        if i == k {
                            continue;
                        }
                        w *= pol.prob(i, mdp.local_state_of(s, i), codec.component(a, i));
                    }
                    madv[s * a_count + codec.component(a, k)] += w * adv[s * n_actions + a];
                }
            }
            madv
        })
        .collect()
}

/// Standardize a weighted advantage table in place; zero spread leaves
/// the table untouched.
fn normalize_weighted(table: &mut [f64], weights: &[f64]) {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return;
    }
    let mean: f64 = table
        .iter()
        .zip(weights)
        .map(|(&a, &w)| w * a)
        .sum::<f64>()
        / total;
    let var: f64 = table
        .iter()
        .zip(weights)
        .map(|(&a, &w)| w * (a - mean) * (a - mean))
        .sum::<f64>()
        / total;
    let std = var.sqrt();
    if std < 1e-12 {
        return;
    }
    for a in table.iter_mut() {
        *a = (*a - mean) / std;
    }
}

fn normalize_batch(mdp: &TabularDecMdp, pol: &JointPolicy, batch: &mut Batch) {
    let n_actions = mdp.joint_actions();
    let mut joint_w = vec![0.0; mdp.joint_states() * n_actions];
    for s in 0..mdp.joint_states() {
        for a in 0..n_actions {
            joint_w[s * n_actions + a] = batch.occupancy[s] * pol.joint_prob(mdp, s, a);
        }
    }
    normalize_weighted(&mut batch.joint_adv, &joint_w);
    for (k, madv) in batch.marginal_adv.iter_mut().enumerate() {
        let a_count = mdp.local_actions(k);
        let mut w = vec![0.0; mdp.joint_states() * a_count];
        for s in 0..mdp.joint_states() {
            for a_k in 0..a_count {
                w[s * a_count + a_k] =
                    batch.occupancy[s] * pol.prob(k, mdp.local_state_of(s, k), a_k);
            }
        }
        normalize_weighted(madv, &w);
    }
}

fn exact_batch(mdp: &TabularDecMdp, pol: &JointPolicy, normalize: bool) -> Result<Batch> {
    let eval: JointEval = joint_eval(mdp, pol)?;
    let marginal_adv = marginal_advantages(mdp, pol, &eval.adv);
    let mut batch = Batch {
        occupancy: eval.occupancy,
        marginal_adv,
        joint_adv: eval.adv,
    };
    if normalize {
        normalize_batch(mdp, pol, &mut batch);
    }
    Ok(batch)
}

/// Monte Carlo batch: empirical occupancy and return-minus-baseline
/// advantage estimates from seeded rollouts under the behavior policy.
fn mc_batch(
    mdp: &TabularDecMdp,
    pol: &JointPolicy,
    cfg: &TrainConfig,
    critic: &CriticState,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let n_actions = mdp.joint_actions();
    let codec = mdp.action_codec();
    let gamma = mdp.discount();

    fn draw(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        dist.len() - 1
    }

    let mut counts = vec![0.0_f64; mdp.joint_states()];
    let mut adv_sum = vec![0.0_f64; mdp.joint_states() * n_actions];
    let mut adv_count = vec![0.0_f64; mdp.joint_states() * n_actions];

    for _ in 0..cfg.batch.rollouts {
        let mut states = Vec::with_capacity(cfg.batch.horizon);
        let mut actions = Vec::with_capacity(cfg.batch.horizon);
        let mut s = draw(mdp.initial_dist(), rng);
        for _ in 0..cfg.batch.horizon {
            let mut a = 0;
            for k in 0..mdp.n_agents() {
                let a_k = draw(&pol.probs(k, mdp.local_state_of(s, k)), rng);
                a = codec.with_component(a, k, a_k);
            }
            states.push(s);
            actions.push(a);
            s = draw(mdp.transition_row(s, a), rng);
        }
        // discounted returns-to-go, truncated at the horizon
        let mut g = 0.0;
        let mut returns = vec![0.0; states.len()];
        for t in (0..states.len()).rev() {
            g = mdp.joint_reward(states[t]) + gamma * g;
            returns[t] = g;
        }
        for t in 0..states.len() {
            let (s, a) = (states[t], actions[t]);
            counts[s] += 1.0;
            let baseline = match critic.kind {
                CriticKind::Centralized => critic.values[0][s],
                CriticKind::Decentralized => {
                    let sum: f64 = (0..mdp.n_agents())
                        .map(|k| critic.values[k][mdp.local_state_of(s, k)])
                        .sum();
                    sum / mdp.n_agents() as f64
                }
                CriticKind::None => 0.0,
            };
            adv_sum[s * n_actions + a] += returns[t] - baseline;
            adv_count[s * n_actions + a] += 1.0;
        }
    }

    let total: f64 = counts.iter().sum();
    let occupancy: Vec<f64> = counts.iter().map(|&c| c / total).collect();
    let mut joint_adv = vec![0.0; mdp.joint_states() * n_actions];
    for i in 0..joint_adv.len() {
        if adv_count[i] > 0.0 {
            joint_adv[i] = adv_sum[i] / adv_count[i];
        }
    }

    let marginal_adv = marginal_advantages(mdp, pol, &joint_adv);
    let mut batch = Batch {
        occupancy,
        marginal_adv,
        joint_adv,
    };
    if cfg.normalize_advantages {
        normalize_batch(mdp, pol, &mut batch);
    }
    Ok(batch)
}

/// Gain of one term under the chosen clipped form: the advantage when
/// the unclipped branch is active, zero otherwise.
#[inline]
fn clip_gain(form: ObjectiveForm, eps: Option<f64>, lambda: f64, adv: f64) -> f64 {
    match eps {
        None => adv,
        Some(eps) => {
            let (raw, clipped) = match form {
                ObjectiveForm::ClipRatio => {
                    (lambda * adv, lambda.clamp(1.0 - eps, 1.0 + eps) * adv)
                }
                ObjectiveForm::ClipRatioMinusOne => (
                    (lambda - 1.0) * adv,
                    (lambda - 1.0).clamp(-eps, eps) * adv,
                ),
            };
            if raw <= clipped {
                adv
            } else {
                0.0
            }
        }
    }
}

/// Value of one term under the chosen clipped form.
#[inline]
fn clip_value(form: ObjectiveForm, eps: Option<f64>, lambda: f64, adv: f64) -> f64 {
    match form {
        ObjectiveForm::ClipRatio => match eps {
            None => lambda * adv,
            Some(eps) => (lambda * adv).min(lambda.clamp(1.0 - eps, 1.0 + eps) * adv),
        },
        ObjectiveForm::ClipRatioMinusOne => match eps {
            None => (lambda - 1.0) * adv,
            Some(eps) => ((lambda - 1.0) * adv).min((lambda - 1.0).clamp(-eps, eps) * adv),
        },
    }
}

/// Everything needed to evaluate the objective and its gradient at a
/// candidate policy within one iteration.
struct Engine<'a> {
    mdp: &'a TabularDecMdp,
    behavior: &'a JointPolicy,
    batch: &'a Batch,
    form: ObjectiveForm,
    eps: Option<f64>,
    joint_ratio: bool,
}

impl Engine<'_> {
    fn objective(&self, candidate: &JointPolicy) -> f64 {
        let mdp = self.mdp;
        let codec = mdp.action_codec();
        let mut total = 0.0;
        if self.joint_ratio {
            let n_actions = mdp.joint_actions();
            for s in 0..mdp.joint_states() {
                let d = self.batch.occupancy[s];
                if d == 0.0 {
                    continue;
                }
                for a in 0..n_actions {
                    let mut p_old = 1.0;
                    let mut lambda = 1.0;
                    for k in 0..mdp.n_agents() {
                        let s_k = mdp.local_state_of(s, k);
                        let a_k = codec.component(a, k);
                        let po = self.behavior.prob(k, s_k, a_k);
                        let pn = candidate.prob(k, s_k, a_k);
                        p_old *= po;
                        lambda *= pn / po;
                    }
                    total += d
                        * p_old
                        * clip_value(
                            self.form,
                            self.eps,
                            lambda,
                            self.batch.joint_adv[s * n_actions + a],
                        );
                }
            }
        } else {
            for k in 0..mdp.n_agents() {
                let a_count = mdp.local_actions(k);
                for s in 0..mdp.joint_states() {
                    let d = self.batch.occupancy[s];
                    if d == 0.0 {
                        continue;
                    }
                    let s_k = mdp.local_state_of(s, k);
                    let p_old = self.behavior.probs(k, s_k);
                    let p_new = candidate.probs(k, s_k);
                    for a in 0..a_count {
                        let lambda = p_new[a] / p_old[a];
                        total += d
                            * p_old[a]
                            * clip_value(
                                self.form,
                                self.eps,
                                lambda,
                                self.batch.marginal_adv[k][s * a_count + a],
                            );
                    }
                }
            }
        }
        total
    }

    /// Analytic gradient at `candidate`, accumulated into a buffer
    /// shaped like the policy's logit storage. Returns the (min, max)
    /// ratio over the behavior support.
    fn gradient(&self, candidate: &JointPolicy, grad: &mut [Vec<f64>]) -> (f64, f64) {
        let mdp = self.mdp;
        let codec = mdp.action_codec();
        let mut ratio_min = f64::INFINITY;
        let mut ratio_max = f64::NEG_INFINITY;

        if self.joint_ratio {
            let n_actions = mdp.joint_actions();
            let n = mdp.n_agents();
            for s in 0..mdp.joint_states() {
                let d = self.batch.occupancy[s];
                if d == 0.0 {
                    continue;
                }
                let mut tot = 0.0;
                let mut base: Vec<Vec<f64>> =
                    (0..n).map(|k| vec![0.0; mdp.local_actions(k)]).collect();
                for a in 0..n_actions {
                    let mut p_new = 1.0;
                    let mut lambda = 1.0;
                    for k in 0..n {
                        let s_k = mdp.local_state_of(s, k);
                        let a_k = codec.component(a, k);
                        let po = self.behavior.prob(k, s_k, a_k);
                        let pn = candidate.prob(k, s_k, a_k);
                        p_new *= pn;
                        lambda *= pn / po;
                    }
                    ratio_min = ratio_min.min(lambda);
                    ratio_max = ratio_max.max(lambda);
                    let w = p_new
                        * clip_gain(
                            self.form,
                            self.eps,
                            lambda,
                            self.batch.joint_adv[s * n_actions + a],
                        );
                    tot += w;
                    for k in 0..n {
                        base[k][codec.component(a, k)] += w;
                    }
                }
                for k in 0..n {
                    let s_k = mdp.local_state_of(s, k);
                    let p_new = candidate.probs(k, s_k);
                    let row: Vec<f64> = (0..mdp.local_actions(k))
                        .map(|b| d * (base[k][b] - p_new[b] * tot))
                        .collect();
                    candidate.accumulate_grad(grad, k, s_k, &row);
                }
            }
        } else {
            for k in 0..mdp.n_agents() {
                let a_count = mdp.local_actions(k);
                for s in 0..mdp.joint_states() {
                    let d = self.batch.occupancy[s];
                    if d == 0.0 {
                        continue;
                    }
                    let s_k = mdp.local_state_of(s, k);
                    let p_old = self.behavior.probs(k, s_k);
                    let p_new = candidate.probs(k, s_k);
                    let mut tot = 0.0;
                    let mut base = vec![0.0; a_count];
                    for a in 0..a_count {
                        let lambda = p_new[a] / p_old[a];
                        ratio_min = ratio_min.min(lambda);
                        ratio_max = ratio_max.max(lambda);
                        let w = p_new[a]
                            * clip_gain(
                                self.form,
                                self.eps,
                                lambda,
                                self.batch.marginal_adv[k][s * a_count + a],
                            );
                        tot += w;
                        base[a] += w;
                    }
                    let row: Vec<f64> = (0..a_count)
                        .map(|b| d * (base[b] - p_new[b] * tot))
                        .collect();
                    candidate.accumulate_grad(grad, k, s_k, &row);
                }
            }
        }
        if !ratio_min.is_finite() {
            ratio_min = 1.0;
            ratio_max = 1.0;
        }
        (ratio_min, ratio_max)
    }

    /// Current (min, max) ratio over the behavior support.
    fn ratio_extremes(&self, candidate: &JointPolicy) -> (f64, f64) {
        let mut scratch = candidate.zeroed_grad();
        self.gradient(candidate, &mut scratch)
    }
}

fn build_batch(
    mdp: &TabularDecMdp,
    pol: &JointPolicy,
    cfg: &TrainConfig,
    critic: &CriticState,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    match cfg.advantage_source {
        AdvantageSource::ExactOracle => exact_batch(mdp, pol, cfg.normalize_advantages),
        AdvantageSource::McRollout => mc_batch(mdp, pol, cfg, critic, rng),
    }
}

#[allow(clippy::too_many_arguments)]
fn one_iteration(
    mdp: &TabularDecMdp,
    pol: &JointPolicy,
    cfg: &TrainConfig,
    critic: &mut CriticState,
    rng: &mut ChaCha8Rng,
    iteration: usize,
    joint_ratio: bool,
    clip: ClipSpec,
    form: ObjectiveForm,
) -> Result<(JointPolicy, IterationRecord)> {
    cfg.validate()?;
    pol.matches(mdp)?;

    if critic.kind != CriticKind::None {
        critic_update(mdp, pol, critic, cfg.critic_step)?;
    }
    let batch = build_batch(mdp, pol, cfg, critic, rng)?;
    let eps = clip.eps(mdp.n_agents());
    let engine = Engine {
        mdp,
        behavior: pol,
        batch: &batch,
        form,
        eps,
        joint_ratio,
    };

    let mut candidate = pol.clone();
    let mut ratio_extremes = Vec::with_capacity(cfg.epochs_per_iter);
    for epoch in 0..cfg.epochs_per_iter {
        let mut grad = candidate.zeroed_grad();
        engine.gradient(&candidate, &mut grad);
        if grad
            .iter()
            .any(|table| table.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient { epoch });
        }
        candidate.apply_step(&grad, cfg.learning_rate);
        ratio_extremes.push(engine.ratio_extremes(&candidate));
    }
    let objective = engine.objective(&candidate);

    let new_eval = joint_eval(mdp, &candidate)?;
    let mut dec_returns = Vec::with_capacity(mdp.n_agents());
    for k in 0..mdp.n_agents() {
        dec_returns.push(decentralized_eval(mdp, &candidate, k)?.ret);
    }

    let mut expected_tv = vec![0.0; mdp.n_agents()];
    for s in 0..mdp.joint_states() {
        let d = batch.occupancy[s];
        if d == 0.0 {
            continue;
        }
        for (k, tv_k) in expected_tv.iter_mut().enumerate() {
            let s_k = mdp.local_state_of(s, k);
            *tv_k += d * tv_divergence(&pol.probs(k, s_k), &candidate.probs(k, s_k));
        }
    }
    let tv_sum: f64 = expected_tv.iter().sum();

    let dec_bound_slack = if cfg.track_bound_slack && mdp.homogeneous_agents() {
        let mut worst = f64::INFINITY;
        for k in 0..mdp.n_agents() {
            let b = decentralized_trust_region_bound(mdp, pol, &candidate, k)?;
            worst = worst.min(b.slack());
        }
        worst
    } else {
        f64::NAN
    };

    let record = IterationRecord {
        iteration,
        joint_return: new_eval.ret,
        dec_returns,
        ratio_extremes,
        expected_tv,
        tv_sum,
        dec_bound_slack,
        objective,
    };
    Ok((candidate, record))
}

/// One independent-ratio PPO iteration: per-agent ratios against the
/// marginal advantage, behavior policy fixed at the iteration start.
pub fn ir_ppo_step(
    mdp: &TabularDecMdp,
    pol: &JointPolicy,
    cfg: &TrainConfig,
    critic: &mut CriticState,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<(JointPolicy, IterationRecord)> {
    one_iteration(
        mdp,
        pol,
        cfg,
        critic,
        rng,
        iteration,
        false,
        cfg.clip,
        cfg.objective_form,
    )
}

/// One joint-ratio PPO iteration: the product ratio against the
/// centralized advantage.
pub fn jr_ppo_step(
    mdp: &TabularDecMdp,
    pol: &JointPolicy,
    cfg: &TrainConfig,
    critic: &mut CriticState,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<(JointPolicy, IterationRecord)> {
    one_iteration(
        mdp,
        pol,
        cfg,
        critic,
        rng,
        iteration,
        true,
        cfg.clip,
        cfg.objective_form,
    )
}

/// One unclipped surrogate-ascent iteration on
/// `sum_k E[(ratio_k - 1) * adv]`, the no-trust-region baseline.
pub fn surrogate_step(
    mdp: &TabularDecMdp,
    pol: &JointPolicy,
    cfg: &TrainConfig,
    critic: &mut CriticState,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<(JointPolicy, IterationRecord)> {
    one_iteration(
        mdp,
        pol,
        cfg,
        critic,
        rng,
        iteration,
        false,
        ClipSpec::None,
        ObjectiveForm::ClipRatioMinusOne,
    )
}

/// A completed run: per-iteration records plus every policy iterate
/// (index 0 is the initial policy), so reports can be recomputed from
/// the stream alone.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub records: Vec<IterationRecord>,
    pub policies: Vec<JointPolicy>,
}

impl TrainingRun {
    pub fn final_policy(&self) -> &JointPolicy {
        self.policies.last().expect("at least the initial policy")
    }
}

/// Run a full training loop from the configured initial policy.
pub fn run_training(mdp: &TabularDecMdp, cfg: &TrainConfig) -> Result<TrainingRun> {
    run_training_from(mdp, cfg, cfg.initial_policy(mdp))
}

/// Run a full training loop warm-started from an explicit policy, for
/// example a checkpoint written by an earlier run.
pub fn run_training_from(
    mdp: &TabularDecMdp,
    cfg: &TrainConfig,
    initial: JointPolicy,
) -> Result<TrainingRun> {
    cfg.validate()?;
    initial.matches(mdp)?;
    let mut pol = initial;
    let mut critic = CriticState::new(mdp, cfg.critic);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut policies = Vec::with_capacity(cfg.iterations + 1);
    policies.push(pol.clone());
    for iteration in 0..cfg.iterations {
        let step = match cfg.algorithm {
            Algorithm::IrPpo => ir_ppo_step(mdp, &pol, cfg, &mut critic, &mut rng, iteration)?,
            Algorithm::JrPpo => jr_ppo_step(mdp, &pol, cfg, &mut critic, &mut rng, iteration)?,
            Algorithm::Surrogate => {
                surrogate_step(mdp, &pol, cfg, &mut critic, &mut rng, iteration)?
            }
        };
        pol = step.0;
        records.push(step.1);
        policies.push(pol.clone());
    }
    Ok(TrainingRun { records, policies })
}

/// Exhaustive joint value iteration, the optimization oracle for
/// training sanity checks. Returns the optimal expected return.
pub fn optimal_joint_return(mdp: &TabularDecMdp, tol: f64, max_iters: usize) -> f64 {
    let n = mdp.joint_states();
    let gamma = mdp.discount();
    let mut v = vec![0.0; n];
    for _ in 0..max_iters {
        let mut next = vec![0.0; n];
        let mut delta = 0.0_f64;
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.joint_actions() {
                let row = mdp.transition_row(s, a);
                let exp: f64 = row.iter().zip(&v).map(|(&p, &vv)| p * vv).sum();
                best = best.max(mdp.joint_reward(s) + gamma * exp);
            }
            next[s] = best;
            delta = delta.max((next[s] - v[s]).abs());
        }
        v = next;
        if delta < tol {
            break;
        }
    }
    mdp.initial_dist()
        .iter()
        .zip(&v)
        .map(|(&d, &vv)| d * vv)
        .sum()
}

/// Outcome of a finite-difference gradient audit.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Max relative error over the tested coordinates.
    pub max_rel_error: f64,
    pub tested: usize,
    /// Coordinates excluded for sitting within 1e-3 of a clip kink.
    pub skipped: usize,
}

/// Compare the analytic gradient of the configured objective against
/// central finite differences (step 1e-5) at up to 20 random
/// coordinates, excluding rows whose ratios sit within `1e-3` of a
/// clip kink.
pub fn grad_check(mdp: &TabularDecMdp, pol: &JointPolicy, cfg: &TrainConfig) -> Result<GradCheck> {
    cfg.validate()?;
    let critic = CriticState::new(mdp, cfg.critic);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x67ad_c0de);
    let batch = build_batch(mdp, pol, cfg, &critic, &mut rng)?;
    let (joint_ratio, clip, form) = match cfg.algorithm {
        Algorithm::IrPpo => (false, cfg.clip, cfg.objective_form),
        Algorithm::JrPpo => (true, cfg.clip, cfg.objective_form),
        Algorithm::Surrogate => (false, ClipSpec::None, ObjectiveForm::ClipRatioMinusOne),
    };
    let eps = clip.eps(mdp.n_agents());
    let engine = Engine {
        mdp,
        behavior: pol,
        batch: &batch,
        form,
        eps,
        joint_ratio,
    };

    // probe away from the behavior policy so ratios differ from 1
    let candidate = pol.perturb(0.15, cfg.seed ^ 0x0fed_cafe);
    let mut analytic_grad = candidate.zeroed_grad();
    engine.gradient(&candidate, &mut analytic_grad);

    let kink_near = |k: usize, s_row: usize| -> bool {
        let Some(eps) = eps else { return false };
        let kinks = [1.0 + eps, 1.0 - eps];
        if joint_ratio {
            let codec = mdp.action_codec();
            for s in 0..mdp.joint_states() {
                if mdp.local_state_of(s, k) != s_row || batch.occupancy[s] == 0.0 {
                    continue;
                }
                for a in 0..mdp.joint_actions() {
                    let mut lambda = 1.0;
                    for i in 0..mdp.n_agents() {
                        let s_i = mdp.local_state_of(s, i);
                        let a_i = codec.component(a, i);
                        lambda *= candidate.prob(i, s_i, a_i) / pol.prob(i, s_i, a_i);
                    }
                    if kinks.iter().any(|kk| (lambda - kk).abs() <= 1e-3) {
                        return true;
                    }
                }
            }
            false
        } else {
            let p_old = pol.probs(k, s_row);
            let p_new = candidate.probs(k, s_row);
            (0..p_old.len()).any(|a| {
                let lambda = p_new[a] / p_old[a];
                kinks.iter().any(|kk| (lambda - kk).abs() <= 1e-3)
            })
        }
    };

    let step = 1e-5;
    let mut max_rel = 0.0_f64;
    let mut skipped = 0usize;
    let mut tested = 0usize;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut attempts = 0;
    while tested < 20 && attempts < 400 {
        attempts += 1;
        let k = draw_rng.gen_range(0..mdp.n_agents());
        let s_row = draw_rng.gen_range(0..mdp.local_states(k));
        let b = draw_rng.gen_range(0..mdp.local_actions(k));
        if kink_near(k, s_row) {
            skipped += 1;
            continue;
        }
        let mut plus = candidate.clone();
        plus.row_mut(k, s_row)[b] += step;
        let mut minus = candidate.clone();
        minus.row_mut(k, s_row)[b] -= step;
        let fd = (engine.objective(&plus) - engine.objective(&minus)) / (2.0 * step);
        let analytic = candidate.grad_coordinate(&analytic_grad, k, s_row, b);
        let denom = fd.abs().max(analytic.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - fd).abs() / denom);
        tested += 1;
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        tested,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decmdp::{coop_chain_env, random_dec_mdp};

    fn exact_cfg() -> TrainConfig {
        TrainConfig {
            track_bound_slack: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_reward_environment_is_a_fixed_point() {
        // every state rewards 1.0: advantages vanish, updates are no-ops
        let base = random_dec_mdp(2, 2, 2, true, 3).unwrap();
        let mut spec = base.spec().clone();
        spec.joint_reward = vec![1.0; base.joint_states()];
        spec.local_rewards = vec![vec![1.0; base.joint_states()]; 2];
        let mdp = crate::decmdp::new_dec_mdp(spec).unwrap();
        let pol = JointPolicy::random(&mdp, 0.5, 1);
        let cfg = exact_cfg();
        let mut critic = CriticState::new(&mdp, CriticKind::None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (new_pol, record) = ir_ppo_step(&mdp, &pol, &cfg, &mut critic, &mut rng, 0).unwrap();
        assert_eq!(new_pol, pol);
        assert_eq!(record.tv_sum, 0.0);
    }

    #[test]
    fn tiny_learning_rate_keeps_ratios_near_one() {
        let mdp = random_dec_mdp(2, 3, 2, true, 5).unwrap();
        let pol = JointPolicy::random(&mdp, 0.4, 2);
        let cfg = TrainConfig {
            epochs_per_iter: 1,
            learning_rate: 1e-6,
            ..exact_cfg()
        };
        let mut critic = CriticState::new(&mdp, CriticKind::None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_new, record) = ir_ppo_step(&mdp, &pol, &cfg, &mut critic, &mut rng, 0).unwrap();
        let (_, hi) = record.ratio_extremes[0];
        assert!(hi <= 1.0 + 1e-4, "ratio {hi} drifted too far");
    }

    #[test]
    fn ir_ppo_learns_the_two_agent_chain() {
        let mdp = coop_chain_env(2, 3, true).unwrap();
        let optimal = optimal_joint_return(&mdp, 1e-12, 10_000);
        // all-push reaches the terminal in two steps from the start, so
        // the optimum is gamma^2 / (1 - gamma)
        assert!((optimal - 0.81 / 0.1).abs() < 1e-9);
        let cfg = TrainConfig {
            iterations: 50,
            epochs_per_iter: 15,
            clip: ClipSpec::Eps(0.1),
            ..exact_cfg()
        };
        let run = run_training(&mdp, &cfg).unwrap();
        let last = run.records.last().unwrap();
        assert!(
            last.joint_return >= 0.99 * optimal,
            "reached {} of optimal {optimal}",
            last.joint_return
        );
        assert!(run.records[0].joint_return < last.joint_return);
    }

    #[test]
    fn jr_ppo_learns_the_three_agent_chain() {
        let mdp = coop_chain_env(3, 4, true).unwrap();
        let optimal = optimal_joint_return(&mdp, 1e-12, 10_000);
        let cfg = TrainConfig {
            algorithm: Algorithm::JrPpo,
            iterations: 200,
            clip: ClipSpec::Eps(0.1),
            ..exact_cfg()
        };
        let run = run_training(&mdp, &cfg).unwrap();
        let best = run
            .records
            .iter()
            .map(|r| r.joint_return)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= 0.95 * optimal, "reached {best} of optimal {optimal}");
    }

    #[test]
    fn jr_and_ir_are_identical_for_one_agent() {
        let mdp = random_dec_mdp(1, 3, 3, true, 7).unwrap();
        let cfg = TrainConfig {
            iterations: 12,
            epochs_per_iter: 5,
            ..exact_cfg()
        };
        let ir = run_training(
            &mdp,
            &TrainConfig {
                algorithm: Algorithm::IrPpo,
                ..cfg.clone()
            },
        )
        .unwrap();
        let jr = run_training(
            &mdp,
            &TrainConfig {
                algorithm: Algorithm::JrPpo,
                ..cfg
            },
        )
        .unwrap();
        for (a, b) in ir.policies.iter().zip(&jr.policies) {
            assert_eq!(a, b, "policy trajectories diverged");
        }
        for (a, b) in ir.records.iter().zip(&jr.records) {
            assert_eq!(a.joint_return.to_bits(), b.joint_return.to_bits());
        }
    }

    #[test]
    fn one_state_bandit_at_optimum_stays_put() {
        // single state, 2 actions, reward independent of action: the
        // advantage is identically zero at every policy
        let mdp = random_dec_mdp(1, 1, 2, true, 11).unwrap();
        let pol = JointPolicy::random(&mdp, 0.8, 3);
        let cfg = TrainConfig {
            algorithm: Algorithm::JrPpo,
            ..exact_cfg()
        };
        let mut critic = CriticState::new(&mdp, CriticKind::None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (new_pol, _) = jr_ppo_step(&mdp, &pol, &cfg, &mut critic, &mut rng, 0).unwrap();
        assert_eq!(new_pol, pol);
    }

    #[test]
    fn surrogate_moves_along_the_advantage_sign() {
        let mdp = coop_chain_env(1, 2, true).unwrap();
        let pol = JointPolicy::uniform(&mdp);
        let cfg = TrainConfig {
            normalize_advantages: false,
            ..exact_cfg()
        };
        let mut critic = CriticState::new(&mdp, CriticKind::None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (new_pol, _) = surrogate_step(&mdp, &pol, &cfg, &mut critic, &mut rng, 0).unwrap();
        // pushing (action 1) at the start state must gain probability
        assert!(new_pol.prob(0, 0, 1) > pol.prob(0, 0, 1));
    }

    #[test]
    fn surrogate_takes_larger_tv_steps_than_clipped() {
        let mdp = coop_chain_env(2, 3, true).unwrap();
        let base = TrainConfig {
            iterations: 5,
            learning_rate: 0.4,
            ..exact_cfg()
        };
        let clipped = run_training(
            &mdp,
            &TrainConfig {
                algorithm: Algorithm::IrPpo,
                clip: ClipSpec::Eps(0.1),
                ..base.clone()
            },
        )
        .unwrap();
        let unclipped = run_training(
            &mdp,
            &TrainConfig {
                algorithm: Algorithm::Surrogate,
                ..base
            },
        )
        .unwrap();
        let sum_clipped: f64 = clipped.records.iter().map(|r| r.tv_sum).sum();
        let sum_unclipped: f64 = unclipped.records.iter().map(|r| r.tv_sum).sum();
        assert!(
            sum_unclipped > sum_clipped,
            "unclipped {sum_unclipped} vs clipped {sum_clipped}"
        );
    }

    #[test]
    fn zero_epoch_iteration_changes_nothing() {
        let mdp = coop_chain_env(2, 3, true).unwrap();
        let pol = JointPolicy::uniform(&mdp);
        let cfg = TrainConfig {
            epochs_per_iter: 0,
            ..exact_cfg()
        };
        let mut critic = CriticState::new(&mdp, CriticKind::None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (new_pol, record) = ir_ppo_step(&mdp, &pol, &cfg, &mut critic, &mut rng, 0).unwrap();
        assert_eq!(new_pol, pol);
        assert!(record.ratio_extremes.is_empty());
    }

    #[test]
    fn determinism_bitwise_across_repeat_runs() {
        let mdp = coop_chain_env(2, 3, true).unwrap();
        let cfg = TrainConfig {
            iterations: 20,
            ..TrainConfig::default()
        };
        let a = run_training(&mdp, &cfg).unwrap();
        let b = run_training(&mdp, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        let rows_a: Vec<String> = a.records.iter().map(|r| r.csv_row()).collect();
        let rows_b: Vec<String> = b.records.iter().map(|r| r.csv_row()).collect();
        assert_eq!(rows_a, rows_b);
    }

    #[test]
    fn mc_mode_runs_deterministically() {
        let mdp = coop_chain_env(2, 3, true).unwrap();
        let cfg = TrainConfig {
            advantage_source: AdvantageSource::McRollout,
            critic: CriticKind::Centralized,
            iterations: 5,
            track_bound_slack: false,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = run_training(&mdp, &cfg).unwrap();
        let b = run_training(&mdp, &cfg).unwrap();
        // NaN slack fields (tracking off) make struct equality useless;
        // the CSV rows are the determinism contract
        let rows_a: Vec<String> = a.records.iter().map(|r| r.csv_row()).collect();
        let rows_b: Vec<String> = b.records.iter().map(|r| r.csv_row()).collect();
        assert_eq!(rows_a, rows_b);
    }

    #[test]
    fn centralized_critic_converges_to_oracle_values() {
        let mdp = random_dec_mdp(2, 3, 2, true, 13).unwrap();
        let pol = JointPolicy::random(&mdp, 0.6, 4);
        let (state, _sweeps) =
            run_critic_to_convergence(&mdp, &pol, CriticKind::Centralized, 1.0, 1e-10, 10_000)
                .unwrap();
        let oracle = joint_eval(&mdp, &pol).unwrap();
        for (a, b) in state.values[0].iter().zip(&oracle.v) {
            assert!((a - b).abs() < 1e-6, "critic {a} vs oracle {b}");
        }
    }

    #[test]
    fn decentralized_critic_matches_conditional_values_on_shared_state() {
        let mdp = random_dec_mdp(2, 3, 2, true, 17).unwrap();
        let pol = JointPolicy::random(&mdp, 0.7, 5);
        let (state, _sweeps) =
            run_critic_to_convergence(&mdp, &pol, CriticKind::Decentralized, 1.0, 1e-10, 10_000)
                .unwrap();
        let oracle = joint_eval(&mdp, &pol).unwrap();
        for k in 0..2 {
            for (a, b) in state.values[k].iter().zip(&oracle.v) {
                assert!((a - b).abs() < 1e-4, "agent {k}: critic {a} vs oracle {b}");
            }
        }
    }

    #[test]
    fn critics_of_zero_reward_mdp_converge_to_zero() {
        let base = random_dec_mdp(2, 2, 2, true, 19).unwrap();
        let mut spec = base.spec().clone();
        spec.joint_reward = vec![0.0; base.joint_states()];
        spec.local_rewards = vec![vec![0.0; base.joint_states()]; 2];
        let mdp = crate::decmdp::new_dec_mdp(spec).unwrap();
        let pol = JointPolicy::random(&mdp, 0.5, 6);
        for kind in [CriticKind::Centralized, CriticKind::Decentralized] {
            let (state, _) =
                run_critic_to_convergence(&mdp, &pol, kind, 1.0, 1e-12, 10_000).unwrap();
            for table in &state.values {
                assert!(table.iter().all(|v| v.abs() < 1e-10));
            }
        }
    }

    #[test]
    fn advantage_estimators_agree_at_their_fixed_points() {
        for seed in 0..10u64 {
            let mdp = random_dec_mdp(2, 3, 2, true, 100 + seed).unwrap();
            let pol = JointPolicy::random(&mdp, 0.8, seed);
            let gap = advantage_equivalence_check(&mdp, &pol).unwrap();
            assert!(gap < 1e-8, "seed {seed}: gap {gap}");
        }
    }

    #[test]
    fn advantage_equivalence_is_exact_for_single_agent() {
        let mdp = random_dec_mdp(1, 4, 2, true, 23).unwrap();
        let pol = JointPolicy::random(&mdp, 0.9, 7);
        let gap = advantage_equivalence_check(&mdp, &pol).unwrap();
        assert!(gap < 1e-12);
    }

    #[test]
    fn constant_reward_advantages_are_zero_everywhere() {
        let base = random_dec_mdp(2, 2, 2, true, 29).unwrap();
        let mut spec = base.spec().clone();
        spec.joint_reward = vec![0.5; base.joint_states()];
        spec.local_rewards = vec![vec![0.5; base.joint_states()]; 2];
        let mdp = crate::decmdp::new_dec_mdp(spec).unwrap();
        let pol = JointPolicy::random(&mdp, 0.6, 8);
        let gap = advantage_equivalence_check(&mdp, &pol).unwrap();
        assert!(gap < 1e-10);
    }

    #[test]
    fn grad_check_all_objectives() {
        for seed in 0..5u64 {
            let mdp = random_dec_mdp(2, 3, 2, true, 200 + seed).unwrap();
            let pol = JointPolicy::random(&mdp, 0.5, 10 + seed);
            for algorithm in [Algorithm::IrPpo, Algorithm::JrPpo, Algorithm::Surrogate] {
                let cfg = TrainConfig {
                    algorithm,
                    seed,
                    ..exact_cfg()
                };
                let check = grad_check(&mdp, &pol, &cfg).unwrap();
                assert!(
                    check.max_rel_error < 1e-4,
                    "seed {seed} {algorithm:?}: gradient error {}",
                    check.max_rel_error
                );
            }
        }
    }

    #[test]
    fn grad_check_smooth_objective_is_tight() {
        // no clipping: the objective is smooth and central differences
        // agree far beyond the contract
        let mdp = random_dec_mdp(2, 2, 2, true, 31).unwrap();
        let pol = JointPolicy::random(&mdp, 0.4, 9);
        let cfg = TrainConfig {
            algorithm: Algorithm::Surrogate,
            ..exact_cfg()
        };
        let check = grad_check(&mdp, &pol, &cfg).unwrap();
        assert_eq!(check.skipped, 0, "smooth objective has no kinks to skip");
        assert!(check.max_rel_error < 1e-6, "error {}", check.max_rel_error);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_eps = TrainConfig {
            clip: ClipSpec::Eps(1.5),
            ..TrainConfig::default()
        };
        assert!(bad_eps.validate().is_err());
        let bad_lr = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad_lr.validate().is_err());
    }

    #[test]
    fn single_epoch_tiny_step_matches_unclipped_direction() {
        // at ratios near 1 the clip is inactive, so the IR_PPO update
        // direction equals the unclipped surrogate gradient direction
        let mdp = random_dec_mdp(2, 3, 2, true, 37).unwrap();
        let pol = JointPolicy::random(&mdp, 0.5, 11);
        let cfg = TrainConfig {
            epochs_per_iter: 1,
            learning_rate: 1e-7,
            normalize_advantages: false,
            ..exact_cfg()
        };
        let mut critic = CriticState::new(&mdp, CriticKind::None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clipped, _) = ir_ppo_step(&mdp, &pol, &cfg, &mut critic, &mut rng, 0).unwrap();
        let (free, _) = surrogate_step(&mdp, &pol, &cfg, &mut critic, &mut rng, 0).unwrap();
        for k in 0..2 {
            for s in 0..3 {
                let a = clipped.row(k, s);
                let b = free.row(k, s);
                let base = pol.row(k, s);
                for i in 0..2 {
                    let da = a[i] - base[i];
                    let db = b[i] - base[i];
                    assert!(
                        (da - db).abs() <= 1e-6 * da.abs().max(db.abs()).max(1e-12),
                        "directions differ: {da} vs {db}"
                    );
                }
            }
        }
    }
}
