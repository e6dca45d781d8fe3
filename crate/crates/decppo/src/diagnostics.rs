//! Trust-region measurement suite: ratio drift across optimization
//! epochs, TV-divergence distributions under different clip values,
//! centralized-TV scaling with the number of agents, and per-update
//! bound-slack series.
//!
//! Every report is a pure function of a recorded run (its policy
//! iterates) plus the environment, so it can be recomputed and checked
//! after the fact. Expected TVs are enumerated exactly over the
//! behavior occupancy rather than sampled.

use crate::decmdp::{coop_chain_env, TabularDecMdp};
use crate::error::{Error, Result};
use crate::oracle::{decentralized_trust_region_bound, joint_eval, tv_divergence};
use crate::policy::JointPolicy;
use crate::train::{run_training, ClipSpec, IterationRecord, TrainConfig, TrainingRun};

/// One ratio-drift series: global ratio extremes after each epoch of
/// the first actor update, with the pre-update point `(1, 1)` at
/// index 0.
#[derive(Debug, Clone)]
pub struct RatioDriftSeries {
    pub eps: Option<f64>,
    pub epochs: usize,
    pub series: Vec<(f64, f64)>,
}

impl RatioDriftSeries {
    pub fn max_series(&self) -> Vec<f64> {
        self.series.iter().map(|&(_, hi)| hi).collect()
    }
}

/// Run the first actor update of independent-ratio PPO for every
/// `(eps, epochs)` grid cell and record the per-epoch ratio extremes.
pub fn ratio_drift_experiment(
    mdp: &TabularDecMdp,
    base: &TrainConfig,
    eps_grid: &[Option<f64>],
    epoch_grid: &[usize],
) -> Result<Vec<RatioDriftSeries>> {
    let mut out = Vec::with_capacity(eps_grid.len() * epoch_grid.len());
    for &eps in eps_grid {
        for &epochs in epoch_grid {
            let cfg = TrainConfig {
                clip: eps.map_or(ClipSpec::None, ClipSpec::Eps),
                epochs_per_iter: epochs,
                iterations: 1,
                track_bound_slack: false,
                ..base.clone()
            };
            let run = run_training(mdp, &cfg)?;
            let mut series = vec![(1.0, 1.0)];
            if let Some(record) = run.records.first() {
                series.extend(record.ratio_extremes.iter().copied());
            }
            out.push(RatioDriftSeries { eps, epochs, series });
        }
    }
    Ok(out)
}

/// Histogram of per-(agent, state) expected TV divergences over the
/// behavior occupancy, with equal-width bins on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TvHistogram {
    pub eps: Option<f64>,
    /// `bins + 1` edges from 0 to 1.
    pub edges: Vec<f64>,
    /// Probability mass per bin; sums to 1.
    pub mass: Vec<f64>,
    /// Cumulative mass, ending at 1.
    pub cumulative: Vec<f64>,
}

impl TvHistogram {
    /// True when this histogram has at least as much cumulative mass at
    /// every bin as `other` (more mass at small TV).
    pub fn dominates_toward_small(&self, other: &TvHistogram) -> bool {
        self.cumulative
            .iter()
            .zip(&other.cumulative)
            .all(|(a, b)| *a >= *b - 1e-12)
    }
}

fn build_histogram(samples: &[(f64, f64)], bins: usize, eps: Option<f64>) -> TvHistogram {
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut mass = vec![0.0; bins];
    let total: f64 = samples.iter().map(|&(w, _)| w).sum();
    for &(w, tv) in samples {
        let bin = ((tv * bins as f64) as usize).min(bins - 1);
        mass[bin] += w / total;
    }
    let mut cumulative = Vec::with_capacity(bins);
    let mut acc = 0.0;
    for &m in &mass {
        acc += m;
        cumulative.push(acc);
    }
    TvHistogram {
        eps,
        edges,
        mass,
        cumulative,
    }
}

/// Weighted per-(agent, state) TV samples between two policies over a
/// behavior occupancy.
fn tv_samples(
    mdp: &TabularDecMdp,
    occupancy: &[f64],
    old: &JointPolicy,
    new: &JointPolicy,
) -> Vec<(f64, f64)> {
    let n = mdp.n_agents();
    let mut samples = Vec::new();
    for s in 0..mdp.joint_states() {
        let d = occupancy[s];
        if d == 0.0 {
            continue;
        }
        for k in 0..n {
            let s_k = mdp.local_state_of(s, k);
            let tv = tv_divergence(&old.probs(k, s_k), &new.probs(k, s_k));
            samples.push((d / n as f64, tv));
        }
    }
    samples
}

/// For each clip value (including none), run the first multi-epoch
/// actor update and histogram the expected TV of the realized update
/// over the behavior occupancy.
pub fn tv_distribution_experiment(
    mdp: &TabularDecMdp,
    base: &TrainConfig,
    eps_grid: &[Option<f64>],
    bins: usize,
) -> Result<Vec<TvHistogram>> {
    if bins == 0 {
        return Err(Error::invalid_config("histogram needs at least one bin"));
    }
    let occupancy = joint_eval(mdp, &base.initial_policy(mdp))?.occupancy;
    let mut out = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let cfg = TrainConfig {
            clip: eps.map_or(ClipSpec::None, ClipSpec::Eps),
            iterations: 1,
            track_bound_slack: false,
            ..base.clone()
        };
        let run = run_training(mdp, &cfg)?;
        let samples = tv_samples(mdp, &occupancy, &run.policies[0], &run.policies[1]);
        out.push(build_histogram(&samples, bins, eps));
    }
    Ok(out)
}

/// Centralized TV statistics for one team size.
#[derive(Debug, Clone, Copy)]
pub struct CentralizedTvPoint {
    pub n_agents: usize,
    /// Occupancy-weighted median of the per-state TV sum over agents.
    pub median_tv_sum: f64,
}

fn weighted_median(samples: &mut [(f64, f64)]) -> f64 {
    samples.sort_by(|a, b| a.1.total_cmp(&b.1));
    let total: f64 = samples.iter().map(|&(w, _)| w).sum();
    let mut acc = 0.0;
    for &(w, v) in samples.iter() {
        acc += w;
        if acc >= total / 2.0 {
            return v;
        }
    }
    samples.last().map_or(0.0, |&(_, v)| v)
}

/// Histogram of one realized update's per-(agent, state) expected TV,
/// weighted by the occupancy of `old`.
pub fn update_tv_histogram(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
    bins: usize,
    eps: Option<f64>,
) -> Result<TvHistogram> {
    if bins == 0 {
        return Err(Error::invalid_config("histogram needs at least one bin"));
    }
    let occupancy = joint_eval(mdp, old)?.occupancy;
    Ok(build_histogram(
        &tv_samples(mdp, &occupancy, old, new),
        bins,
        eps,
    ))
}

/// Occupancy-weighted median (under `old`) of the per-state TV sum
/// over all agents between two policies.
pub fn median_tv_sum(
    mdp: &TabularDecMdp,
    old: &JointPolicy,
    new: &JointPolicy,
) -> Result<f64> {
    let occupancy = joint_eval(mdp, old)?.occupancy;
    let mut samples = Vec::new();
    for s in 0..mdp.joint_states() {
        let d = occupancy[s];
        if d == 0.0 {
            continue;
        }
        let sum: f64 = (0..mdp.n_agents())
            .map(|k| {
                let s_k = mdp.local_state_of(s, k);
                tv_divergence(&old.probs(k, s_k), &new.probs(k, s_k))
            })
            .sum();
        samples.push((d, sum));
    }
    Ok(weighted_median(&mut samples))
}

/// Run the first actor update on the cooperative chain for each team
/// size and report the occupancy-weighted median of the per-state
/// centralized TV sum.
pub fn centralized_tv_vs_n(
    n_list: &[usize],
    chain_length: usize,
    base: &TrainConfig,
    eps: f64,
) -> Result<Vec<CentralizedTvPoint>> {
    let mut out = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mdp = coop_chain_env(n, chain_length, true)?;
        let cfg = TrainConfig {
            clip: ClipSpec::Eps(eps),
            iterations: 1,
            track_bound_slack: false,
            ..base.clone()
        };
        let run = run_training(&mdp, &cfg)?;
        out.push(CentralizedTvPoint {
            n_agents: n,
            median_tv_sum: median_tv_sum(&mdp, &run.policies[0], &run.policies[1])?,
        });
    }
    Ok(out)
}

/// Decentralized-bound audit of one realized update.
#[derive(Debug, Clone, Copy)]
pub struct SlackPoint {
    pub iteration: usize,
    /// Worst viewpoint agent's bound sides.
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub alpha: f64,
}

/// Recompute the decentralized bound for every consecutive policy pair
/// of a run. In the exact (shared-state) regime each slack must be
/// nonnegative up to 1e-8.
pub fn bound_slack_report(mdp: &TabularDecMdp, policies: &[JointPolicy]) -> Result<Vec<SlackPoint>> {
    let mut out = Vec::new();
    for (i, pair) in policies.windows(2).enumerate() {
        let (old, new) = (&pair[0], &pair[1]);
        let mut worst: Option<SlackPoint> = None;
        for k in 0..mdp.n_agents() {
            let b = decentralized_trust_region_bound(mdp, old, new, k)?;
            let point = SlackPoint {
                iteration: i,
                lhs: b.lhs,
                rhs: b.rhs,
                slack: b.slack(),
                alpha: b.alpha,
            };
            if worst.is_none_or(|w| point.slack < w.slack) {
                worst = Some(point);
            }
        }
        out.push(worst.expect("at least one agent"));
    }
    Ok(out)
}

/// Aggregate trust-region report for one training run: the Fig-2-style
/// first-update ratio series, per-iteration TV traces, the TV
/// histogram of the first update, and the bound-slack series.
#[derive(Debug, Clone)]
pub struct TrustRegionReport {
    pub env: String,
    pub n_agents: usize,
    pub eps: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub first_update_ratio_series: Vec<(f64, f64)>,
    pub expected_tv: Vec<Vec<f64>>,
    pub tv_sum: Vec<f64>,
    pub histogram: TvHistogram,
    pub slack: Vec<SlackPoint>,
}

impl TrustRegionReport {
    /// Build the report from a recorded run. `recompute_slack` audits
    /// every consecutive pair with the oracle; turn it off for factored
    /// environments where the bound is advisory.
    pub fn from_run(
        mdp: &TabularDecMdp,
        cfg: &TrainConfig,
        run: &TrainingRun,
        bins: usize,
        recompute_slack: bool,
    ) -> Result<Self> {
        let occupancy = joint_eval(mdp, &run.policies[0])?.occupancy;
        let mut first_series = vec![(1.0, 1.0)];
        if let Some(record) = run.records.first() {
            first_series.extend(record.ratio_extremes.iter().copied());
        }
        let histogram = if run.policies.len() >= 2 {
            build_histogram(
                &tv_samples(mdp, &occupancy, &run.policies[0], &run.policies[1]),
                bins,
                cfg.clip.eps(mdp.n_agents()),
            )
        } else {
            build_histogram(&[(1.0, 0.0)], bins, cfg.clip.eps(mdp.n_agents()))
        };
        let slack = if recompute_slack {
            bound_slack_report(mdp, &run.policies)?
        } else {
            Vec::new()
        };
        Ok(TrustRegionReport {
            env: mdp
                .spec()
                .provenance
                .clone()
                .unwrap_or_else(|| "unknown".to_string()),
            n_agents: mdp.n_agents(),
            eps: cfg.clip.eps(mdp.n_agents()),
            epochs: cfg.epochs_per_iter,
            seed: cfg.seed,
            first_update_ratio_series: first_series,
            expected_tv: run.records.iter().map(|r| r.expected_tv.clone()).collect(),
            tv_sum: run.records.iter().map(|r| r.tv_sum).collect(),
            histogram,
            slack,
        })
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "env={} agents={} eps={:?} epochs={} seed={}\n",
            self.env, self.n_agents, self.eps, self.epochs, self.seed
        ));
        let final_ratio = self.first_update_ratio_series.last().unwrap_or(&(1.0, 1.0));
        out.push_str(&format!(
            "first-update ratio range: [{}, {}]\n",
            final_ratio.0, final_ratio.1
        ));
        if let Some(last) = self.tv_sum.last() {
            out.push_str(&format!("final centralized TV sum: {last}\n"));
        }
        if !self.slack.is_empty() {
            let worst = self
                .slack
                .iter()
                .map(|p| p.slack)
                .fold(f64::INFINITY, f64::min);
            out.push_str(&format!("worst bound slack: {worst}\n"));
        }
        out
    }
}

/// CSV rows for iteration records, prefixed by a metadata comment line.
pub fn records_to_csv(
    records: &[IterationRecord],
    n_agents: usize,
    epochs: usize,
    meta: &str,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("# {meta}\n"));
    out.push_str(&IterationRecord::csv_header(n_agents, epochs));
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
