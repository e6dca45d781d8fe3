//! Seeded verification sweeps over random Dec-MDP instances.
//!
//! Each suite draws deterministic instances from a master seed,
//! evaluates one oracle contract per trial, and reports the worst
//! residual or slack. Trials are independent, so they run on the
//! thread pool when the `parallel` feature is on; results are folded
//! in trial order either way, keeping output byte-stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decmdp::{random_dec_mdp_with_discount, TabularDecMdp};
use crate::error::{Error, Result};
use crate::oracle::{
    decentralized_trust_region_bound, joint_trust_region_bound, performance_difference,
    ratio_premise_check, shift_decomposition, stationarity_probe, xi_bound,
};
use crate::par::map_indexed;
use crate::policy::{project_to_ratio_box, JointPolicy};
use crate::train::{advantage_equivalence_check, run_critic_to_convergence, CriticKind};

/// The verifiable contracts, one sweep each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Performance-difference identity.
    Eq1,
    /// Joint-level trust-region lower bound.
    Thm1,
    /// Transition-shift decomposition telescopes exactly.
    Prop1,
    /// Decentralized trust-region lower bound.
    Thm2,
    /// Ratio box implies the expected-TV bound.
    Prop4,
    /// Critic fixed points and advantage equivalence.
    Prop5,
    /// Frozen-kernel reasoning fails: a witness exists.
    Counterexample,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Eq1,
        Suite::Thm1,
        Suite::Prop1,
        Suite::Thm2,
        Suite::Prop4,
        Suite::Prop5,
        Suite::Counterexample,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Eq1 => "eq1",
            Suite::Thm1 => "thm1",
            Suite::Prop1 => "prop1",
            Suite::Thm2 => "thm2",
            Suite::Prop4 => "prop4",
            Suite::Prop5 => "prop5",
            Suite::Counterexample => "counterexample",
        }
    }

    pub fn from_name(name: &str) -> Option<Suite> {
        Suite::ALL.iter().copied().find(|s| s.name() == name)
    }

    /// Trial counts used by the acceptance gate.
    pub fn default_trials(&self) -> usize {
        match self {
            Suite::Eq1 | Suite::Thm1 | Suite::Prop1 => 100,
            Suite::Thm2 => 200,
            Suite::Prop4 => 1000,
            Suite::Prop5 => 50,
            Suite::Counterexample => 500,
        }
    }
}

/// Result of one verification sweep.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub trials: usize,
    pub passed: bool,
    /// Extremal statistic over all trials: max residual for identity
    /// suites, min slack for bound suites, max TV excess for the ratio
    /// box, most negative violation gap for the counterexample search.
    pub worst: f64,
    pub detail: String,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const SCALES: [f64; 3] = [0.01, 0.1, 0.5];

fn trial_rng(master: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master ^ (trial as u64).wrapping_mul(GOLDEN))
}

/// Desk-scale random instance: N in 1..=3, local states in 2..=4,
/// local actions in 2..=3, discount in {0.9, 0.99}.
fn random_instance(
    rng: &mut ChaCha8Rng,
    shared_only: bool,
) -> Result<(TabularDecMdp, JointPolicy)> {
    let n_agents = rng.gen_range(1..=3);
    let states = rng.gen_range(2..=4);
    let actions = rng.gen_range(2..=3);
    let shared = shared_only || rng.gen_bool(0.5);
    let gamma = if rng.gen_bool(0.5) { 0.9 } else { 0.99 };
    let mdp = random_dec_mdp_with_discount(n_agents, states, actions, shared, rng.gen(), gamma)?;
    let pol = JointPolicy::random(&mdp, 0.8, rng.gen());
    Ok((mdp, pol))
}

fn fold_results<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Worst `|lhs - rhs|` of the performance-difference identity over
/// seeded instances. Contract: below 1e-8.
pub fn sweep_eq1(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let results = fold_results(map_indexed(trials, |t| {
        let mut rng = trial_rng(seed, t);
        let (mdp, old) = random_instance(&mut rng, false)?;
        let scale = SCALES[t % SCALES.len()];
        let new = old.perturb(scale, rng.gen());
        let (lhs, rhs) = performance_difference(&mdp, &old, &new)?;
        Ok((lhs - rhs).abs())
    }))?;
    let worst = results.into_iter().fold(0.0_f64, f64::max);
    Ok(SuiteOutcome {
        suite: Suite::Eq1,
        trials,
        passed: worst < 1e-8,
        worst,
        detail: format!("max |lhs - rhs| = {worst:e}"),
    })
}

/// Worst slack of the joint trust-region bound over seeded instances
/// and all three perturbation scales. Contract: at least -1e-8.
pub fn sweep_thm1(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let results = fold_results(map_indexed(trials, |t| {
        let mut rng = trial_rng(seed, t);
        let (mdp, old) = random_instance(&mut rng, false)?;
        let mut worst = f64::INFINITY;
        for scale in SCALES {
            let new = old.perturb(scale, rng.gen());
            let bound = joint_trust_region_bound(&mdp, &old, &new)?;
            worst = worst.min(bound.slack());
        }
        Ok(worst)
    }))?;
    let worst = results.into_iter().fold(f64::INFINITY, f64::min);
    Ok(SuiteOutcome {
        suite: Suite::Thm1,
        trials,
        passed: worst >= -1e-8,
        worst,
        detail: format!("min slack = {worst:e}"),
    })
}

/// Worst telescoping residual of the shift decomposition over seeded
/// shared-state instances, all agents. Contract: below 1e-10.
pub fn sweep_prop1(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let results = fold_results(map_indexed(trials, |t| {
        let mut rng = trial_rng(seed, t);
        let (mdp, old) = random_instance(&mut rng, true)?;
        let scale = SCALES[t % SCALES.len()];
        let new = old.perturb(scale, rng.gen());
        let mut worst = 0.0_f64;
        for k in 0..mdp.n_agents() {
            let dec = shift_decomposition(&mdp, &old, &new, k)?;
            worst = worst.max(dec.residual);
        }
        Ok(worst)
    }))?;
    let worst = results.into_iter().fold(0.0_f64, f64::max);
    Ok(SuiteOutcome {
        suite: Suite::Prop1,
        trials,
        passed: worst < 1e-10,
        worst,
        detail: format!("max residual = {worst:e}"),
    })
}

/// Worst slack of the decentralized bound over seeded shared-state
/// instances, all viewpoint agents, plus tightness at a zero step.
/// Contract: slack at least -1e-8 and |lhs|, |rhs| below 1e-10 at the
/// unmoved pair.
pub fn sweep_thm2(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let results = fold_results(map_indexed(trials, |t| {
        let mut rng = trial_rng(seed, t);
        let (mdp, old) = random_instance(&mut rng, true)?;
        let scale = SCALES[t % SCALES.len()];
        let new = old.perturb(scale, rng.gen());
        let xi = xi_bound(&mdp, &old, &new)?;
        let mut worst = f64::INFINITY;
        let mut tight = 0.0_f64;
        for k in 0..mdp.n_agents() {
            let b = crate::oracle::decentralized_bound_given_xi(&mdp, &old, &new, k, xi)?;
            worst = worst.min(b.slack());
            let zero = decentralized_trust_region_bound(&mdp, &old, &old, k)?;
            tight = tight.max(zero.lhs.abs().max(zero.rhs.abs()));
        }
        Ok((worst, tight))
    }))?;
    let mut worst = f64::INFINITY;
    let mut tight = 0.0_f64;
    for (w, t) in results {
        worst = worst.min(w);
        tight = tight.max(t);
    }
    Ok(SuiteOutcome {
        suite: Suite::Thm2,
        trials,
        passed: worst >= -1e-8 && tight < 1e-10,
        worst,
        detail: format!("min slack = {worst:e}, max zero-step residual = {tight:e}"),
    })
}

/// Project wild pairs into the ratio box and confirm the expected-TV
/// bound per agent under every viewpoint occupancy. Contract: premise
/// satisfied and TV at most eps, exactly.
pub fn sweep_prop4(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    const EPS: [f64; 3] = [0.05, 0.1, 0.3];
    let results = fold_results(map_indexed(trials, |t| {
        let mut rng = trial_rng(seed, t);
        let (mdp, old) = random_instance(&mut rng, true)?;
        let wild = old.perturb(2.0, rng.gen());
        let eps = EPS[t % EPS.len()];
        let projected = project_to_ratio_box(&mdp, &old, &wild, eps)?;
        let eps_vec = vec![eps; mdp.n_agents()];
        let mut premise_ok = true;
        let mut excess = f64::NEG_INFINITY;
        for k in 0..mdp.n_agents() {
            let occupancy = crate::oracle::decentralized_eval(&mdp, &old, k)?.occupancy;
            let report = ratio_premise_check(&old, &projected, &occupancy, &eps_vec)?;
            for agent in &report.agents {
                premise_ok &= agent.premise_holds;
                excess = excess.max(agent.expected_tv - agent.eps);
            }
        }
        Ok((premise_ok, excess))
    }))?;
    let mut premise_ok = true;
    let mut excess = f64::NEG_INFINITY;
    for (p, e) in results {
        premise_ok &= p;
        excess = excess.max(e);
    }
    Ok(SuiteOutcome {
        suite: Suite::Prop4,
        trials,
        passed: premise_ok && excess <= 0.0,
        worst: excess,
        detail: format!("premises held = {premise_ok}, max TV excess over eps = {excess:e}"),
    })
}

/// Advantage-estimator equivalence at the critic fixed points, plus
/// centralized-critic convergence to the oracle values. Contracts:
/// gap below 1e-8 and critic error below 1e-6 after residual-based
/// stopping.
pub fn sweep_prop5(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let results = fold_results(map_indexed(trials, |t| {
        let mut rng = trial_rng(seed, t);
        let (mdp, pol) = random_instance(&mut rng, true)?;
        let gap = advantage_equivalence_check(&mdp, &pol)?;
        let (critic, _sweeps) =
            run_critic_to_convergence(&mdp, &pol, CriticKind::Centralized, 1.0, 1e-10, 100_000)?;
        if critic.last_residual >= 1e-10 {
            return Err(Error::invalid_config(format!(
                "critic failed to converge on trial {t}"
            )));
        }
        let oracle = crate::oracle::joint_eval(&mdp, &pol)?;
        let critic_err = critic.values[0]
            .iter()
            .zip(&oracle.v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        Ok((gap, critic_err))
    }))?;
    let mut gap_max = 0.0_f64;
    let mut err_max = 0.0_f64;
    for (gap, err) in results {
        gap_max = gap_max.max(gap);
        err_max = err_max.max(err);
    }
    Ok(SuiteOutcome {
        suite: Suite::Prop5,
        trials,
        passed: gap_max < 1e-8 && err_max < 1e-6,
        worst: gap_max.max(err_max),
        detail: format!("max advantage gap = {gap_max:e}, max critic error = {err_max:e}"),
    })
}

/// Search seeded two-agent instances for a witness where the
/// frozen-kernel single-agent bound overshoots the true decentralized
/// return. Passes when at least one witness is found.
pub fn sweep_counterexample(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let results = fold_results(map_indexed(trials, |t| {
        let mut rng = trial_rng(seed, t);
        let gamma = if rng.gen_bool(0.5) { 0.9 } else { 0.99 };
        let mdp = random_dec_mdp_with_discount(
            2,
            rng.gen_range(2..=4),
            rng.gen_range(2..=3),
            true,
            rng.gen(),
            gamma,
        )?;
        let old = JointPolicy::random(&mdp, 0.8, rng.gen());
        // large opponent update, small own update: the frozen analysis
        // only accounts for the small step
        let opponent_moved = old.perturb_agents(&[1], 2.5, rng.gen());
        let new = opponent_moved.perturb_agents(&[0], 0.05, rng.gen());
        let probe = stationarity_probe(&mdp, &old, &new, 0)?;
        Ok((probe.violated, probe.true_return - probe.naive_bound))
    }))?;
    let mut witnesses = 0usize;
    let mut first_witness = None;
    let mut worst_gap = f64::INFINITY;
    for (t, (violated, gap)) in results.into_iter().enumerate() {
        if violated {
            witnesses += 1;
            if first_witness.is_none() {
                first_witness = Some(t);
            }
        }
        worst_gap = worst_gap.min(gap);
    }
    let detail = match first_witness {
        Some(t) => format!(
            "{witnesses} witnesses in {trials} trials; first at trial {t}; worst violation gap = {worst_gap:e}"
        ),
        None => format!("no witness found in {trials} trials; min gap = {worst_gap:e}"),
    };
    Ok(SuiteOutcome {
        suite: Suite::Counterexample,
        trials,
        passed: witnesses > 0,
        worst: worst_gap,
        detail,
    })
}

/// [`sweep_counterexample`] over an explicit inclusive seed range:
/// each seed in the range drives one instance directly.
pub fn sweep_counterexample_over_seeds(first: u64, last: u64) -> Result<SuiteOutcome> {
    if last < first {
        return Err(Error::invalid_config("seed range must be ascending"));
    }
    let count = (last - first + 1) as usize;
    let results = fold_results(map_indexed(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(first + i as u64);
        let gamma = if rng.gen_bool(0.5) { 0.9 } else { 0.99 };
        let mdp = random_dec_mdp_with_discount(
            2,
            rng.gen_range(2..=4),
            rng.gen_range(2..=3),
            true,
            rng.gen(),
            gamma,
        )?;
        let old = JointPolicy::random(&mdp, 0.8, rng.gen());
        let opponent_moved = old.perturb_agents(&[1], 2.5, rng.gen());
        let new = opponent_moved.perturb_agents(&[0], 0.05, rng.gen());
        let probe = stationarity_probe(&mdp, &old, &new, 0)?;
        Ok((probe.violated, probe.true_return - probe.naive_bound))
    }))?;
    let mut witnesses = 0usize;
    let mut first_witness = None;
    let mut worst_gap = f64::INFINITY;
    for (i, (violated, gap)) in results.into_iter().enumerate() {
        if violated {
            witnesses += 1;
            if first_witness.is_none() {
                first_witness = Some(first + i as u64);
            }
        }
        worst_gap = worst_gap.min(gap);
    }
    let detail = match first_witness {
        Some(s) => format!(
            "{witnesses} witnesses over seeds {first}..{last}; first at seed {s}; worst violation gap = {worst_gap:e}"
        ),
        None => format!("no witness over seeds {first}..{last}; min gap = {worst_gap:e}"),
    };
    Ok(SuiteOutcome {
        suite: Suite::Counterexample,
        trials: count,
        passed: witnesses > 0,
        worst: worst_gap,
        detail,
    })
}

/// Run one suite with its trial count and master seed.
pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<SuiteOutcome> {
    match suite {
        Suite::Eq1 => sweep_eq1(trials, seed),
        Suite::Thm1 => sweep_thm1(trials, seed),
        Suite::Prop1 => sweep_prop1(trials, seed),
        Suite::Thm2 => sweep_thm2(trials, seed),
        Suite::Prop4 => sweep_prop4(trials, seed),
        Suite::Prop5 => sweep_prop5(trials, seed),
        Suite::Counterexample => sweep_counterexample(trials, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for suite in Suite::ALL {
            assert_eq!(Suite::from_name(suite.name()), Some(suite));
        }
        assert_eq!(Suite::from_name("bogus"), None);
    }

    #[test]
    fn small_sweeps_pass() {
        assert!(sweep_eq1(10, 1).unwrap().passed);
        assert!(sweep_thm1(10, 1).unwrap().passed);
        assert!(sweep_prop1(10, 1).unwrap().passed);
        assert!(sweep_thm2(10, 1).unwrap().passed);
        assert!(sweep_prop4(20, 1).unwrap().passed);
        assert!(sweep_prop5(5, 1).unwrap().passed);
    }

    #[test]
    fn counterexample_search_finds_a_witness() {
        let outcome = sweep_counterexample(100, 1).unwrap();
        assert!(outcome.passed, "{}", outcome.detail);
    }

    #[test]
    fn sweeps_are_deterministic() {
        let a = sweep_thm2(15, 7).unwrap();
        let b = sweep_thm2(15, 7).unwrap();
        assert_eq!(a.worst.to_bits(), b.worst.to_bits());
        assert_eq!(a.detail, b.detail);
    }
}
