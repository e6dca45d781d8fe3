//! Acceptance gate: every release-blocking contract, one test per
//! criterion, with tolerances pinned in code. Run with
//! `cargo test -p decppo --test acceptance` (add `-- --nocapture` for
//! the per-criterion statistics).

use std::sync::OnceLock;
use std::time::Instant;

use decppo::decmdp::coop_chain_env;
use decppo::diagnostics::{
    bound_slack_report, centralized_tv_vs_n, ratio_drift_experiment, records_to_csv,
    tv_distribution_experiment,
};
use decppo::policy::JointPolicy;
use decppo::train::{
    grad_check, optimal_joint_return, run_training, Algorithm, ClipSpec, TrainConfig, TrainingRun,
};
use decppo::verify::{run_suite, Suite};

/// Master seed for every sweep and seeded run in this gate.
const ACCEPTANCE_SEED: u64 = 7;

fn chain_cfg(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        clip: ClipSpec::Eps(0.1),
        iterations: 200,
        track_bound_slack: false,
        seed: ACCEPTANCE_SEED,
        ..TrainConfig::default()
    }
}

struct ChainRuns {
    ir_2x3: TrainingRun,
    jr_2x3: TrainingRun,
    ir_3x4: TrainingRun,
    jr_3x4: TrainingRun,
    run_seconds: [f64; 4],
}

fn chain_runs() -> &'static ChainRuns {
    static RUNS: OnceLock<ChainRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let chain_2x3 = coop_chain_env(2, 3, true).unwrap();
        let chain_3x4 = coop_chain_env(3, 4, true).unwrap();
        let mut run_seconds = [0.0; 4];
        let mut timed = |i: usize, mdp, alg| {
            let start = Instant::now();
            let run = run_training(mdp, &chain_cfg(alg)).unwrap();
            run_seconds[i] = start.elapsed().as_secs_f64();
            run
        };
        let ir_2x3 = timed(0, &chain_2x3, Algorithm::IrPpo);
        let jr_2x3 = timed(1, &chain_2x3, Algorithm::JrPpo);
        let ir_3x4 = timed(2, &chain_3x4, Algorithm::IrPpo);
        let jr_3x4 = timed(3, &chain_3x4, Algorithm::JrPpo);
        ChainRuns {
            ir_2x3,
            jr_2x3,
            ir_3x4,
            jr_3x4,
            run_seconds,
        }
    })
}

#[test]
fn criterion_01_performance_difference_identity() {
    let start = Instant::now();
    let outcome = run_suite(Suite::Eq1, 100, ACCEPTANCE_SEED).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    println!("criterion 01: {} ({elapsed:.2}s)", outcome.detail);
    assert!(outcome.passed, "identity failed: {}", outcome.detail);
    assert!(outcome.worst < 1e-8);
    assert!(elapsed < 10.0, "sweep took {elapsed:.2}s, cap is 10s");
}

#[test]
fn criterion_02_joint_trust_region_bound() {
    let outcome = run_suite(Suite::Thm1, 100, ACCEPTANCE_SEED).unwrap();
    println!("criterion 02: {}", outcome.detail);
    assert!(outcome.passed, "bound failed: {}", outcome.detail);
    assert!(outcome.worst >= -1e-8);
}

#[test]
fn criterion_03_shift_decomposition_residual() {
    let outcome = run_suite(Suite::Prop1, 100, ACCEPTANCE_SEED).unwrap();
    println!("criterion 03: {}", outcome.detail);
    assert!(outcome.passed, "decomposition failed: {}", outcome.detail);
    assert!(outcome.worst < 1e-10);
}

#[test]
fn criterion_04_decentralized_trust_region_bound() {
    let outcome = run_suite(Suite::Thm2, 200, ACCEPTANCE_SEED).unwrap();
    println!("criterion 04: {}", outcome.detail);
    assert!(outcome.passed, "bound failed: {}", outcome.detail);
    assert!(outcome.worst >= -1e-8);
}

#[test]
fn criterion_05_ratio_box_implies_tv_bound() {
    let outcome = run_suite(Suite::Prop4, 1000, ACCEPTANCE_SEED).unwrap();
    println!("criterion 05: {}", outcome.detail);
    assert!(outcome.passed, "ratio box failed: {}", outcome.detail);
    assert!(outcome.worst <= 0.0, "expected TV exceeded eps");
}

#[test]
fn criterion_06_critic_fixed_points_and_advantage_equivalence() {
    let outcome = run_suite(Suite::Prop5, 50, ACCEPTANCE_SEED).unwrap();
    println!("criterion 06: {}", outcome.detail);
    assert!(outcome.passed, "critic contract failed: {}", outcome.detail);
}

#[test]
fn criterion_07_gradient_correctness() {
    let mut worst = 0.0_f64;
    for seed in 0..20u64 {
        let mdp = decppo::decmdp::random_dec_mdp(
            1 + (seed as usize % 3),
            3,
            2,
            true,
            ACCEPTANCE_SEED ^ (seed << 8),
        )
        .unwrap();
        let pol = JointPolicy::random(&mdp, 0.6, seed);
        for (algorithm, form) in [
            (Algorithm::IrPpo, decppo::train::ObjectiveForm::ClipRatio),
            (
                Algorithm::IrPpo,
                decppo::train::ObjectiveForm::ClipRatioMinusOne,
            ),
            (Algorithm::JrPpo, decppo::train::ObjectiveForm::ClipRatio),
        ] {
            let cfg = TrainConfig {
                algorithm,
                objective_form: form,
                seed,
                track_bound_slack: false,
                ..TrainConfig::default()
            };
            let check = grad_check(&mdp, &pol, &cfg).unwrap();
            worst = worst.max(check.max_rel_error);
            assert!(
                check.max_rel_error < 1e-4,
                "seed {seed} {algorithm:?} {form:?}: error {}",
                check.max_rel_error
            );
        }
    }
    println!("criterion 07: max relative gradient error = {worst:e}");
}

#[test]
fn criterion_08_optimizers_reach_near_optimal_returns() {
    let chain_2x3 = coop_chain_env(2, 3, true).unwrap();
    let chain_3x4 = coop_chain_env(3, 4, true).unwrap();
    let opt_2x3 = optimal_joint_return(&chain_2x3, 1e-12, 100_000);
    let opt_3x4 = optimal_joint_return(&chain_3x4, 1e-12, 100_000);
    let runs = chain_runs();
    let cases = [
        ("IR 2x3", &runs.ir_2x3, opt_2x3),
        ("JR 2x3", &runs.jr_2x3, opt_2x3),
        ("IR 3x4", &runs.ir_3x4, opt_3x4),
        ("JR 3x4", &runs.jr_3x4, opt_3x4),
    ];
    for (i, (name, run, optimal)) in cases.iter().enumerate() {
        let best = run
            .records
            .iter()
            .map(|r| r.joint_return)
            .fold(f64::NEG_INFINITY, f64::max);
        println!(
            "criterion 08 [{name}]: best J = {best:.6} of optimal {optimal:.6} in {:.2}s",
            runs.run_seconds[i]
        );
        assert!(
            best >= 0.95 * optimal,
            "{name}: reached {best} of optimal {optimal}"
        );
        assert!(
            runs.run_seconds[i] < 60.0,
            "{name}: run took {:.2}s, cap is 60s",
            runs.run_seconds[i]
        );
    }
}

#[test]
fn criterion_09_ratio_drift_under_clipping() {
    let mdp = coop_chain_env(2, 3, true).unwrap();
    let base = TrainConfig {
        learning_rate: 0.1,
        track_bound_slack: false,
        seed: ACCEPTANCE_SEED,
        ..TrainConfig::default()
    };
    let series = ratio_drift_experiment(&mdp, &base, &[Some(0.1), Some(0.3)], &[20]).unwrap();
    let tight = series[0].max_series();
    let loose = series[1].max_series();
    for (e, (a, b)) in tight.iter().zip(&loose).enumerate() {
        assert!(
            a <= b,
            "epoch {e}: max ratio under eps 0.1 ({a}) above eps 0.3 ({b})"
        );
    }
    // clipping does not strictly bound the ratios: both series escape
    // their own box within 20 epochs
    let peak_tight = tight.iter().cloned().fold(0.0_f64, f64::max);
    let peak_loose = loose.iter().cloned().fold(0.0_f64, f64::max);
    println!("criterion 09: peak ratio eps=0.1: {peak_tight:.4}; eps=0.3: {peak_loose:.4}");
    assert!(peak_tight > 1.1, "eps=0.1 ratios never escaped: {peak_tight}");
    assert!(peak_loose > 1.3, "eps=0.3 ratios never escaped: {peak_loose}");
}

#[test]
fn criterion_10_tv_histogram_dominance() {
    let mdp = coop_chain_env(2, 3, true).unwrap();
    let base = TrainConfig {
        learning_rate: 0.3,
        epochs_per_iter: 20,
        track_bound_slack: false,
        seed: ACCEPTANCE_SEED,
        ..TrainConfig::default()
    };
    let hists = tv_distribution_experiment(&mdp, &base, &[Some(0.1), None], 20).unwrap();
    println!(
        "criterion 10: cumulative@bin0 clip={:.4} none={:.4}",
        hists[0].cumulative[0], hists[1].cumulative[0]
    );
    assert!(
        hists[0].dominates_toward_small(&hists[1]),
        "clipped histogram does not dominate toward small TV"
    );
    // strict somewhere, not just equal
    let strictly: f64 = hists[0]
        .cumulative
        .iter()
        .zip(&hists[1].cumulative)
        .map(|(a, b)| a - b)
        .fold(0.0_f64, f64::max);
    assert!(strictly > 1e-6, "histograms are identical");
}

#[test]
fn criterion_11_centralized_tv_scales_with_team_size() {
    let base = TrainConfig {
        learning_rate: 0.1,
        epochs_per_iter: 20,
        track_bound_slack: false,
        seed: ACCEPTANCE_SEED,
        ..TrainConfig::default()
    };
    let points = centralized_tv_vs_n(&[1, 2, 3, 5], 5, &base, 0.1).unwrap();
    let medians: Vec<f64> = points.iter().map(|p| p.median_tv_sum).collect();
    println!("criterion 11: medians by team size = {medians:?}");
    assert!(medians[0] > 0.0, "single-agent baseline median is zero");
    for w in medians.windows(2) {
        assert!(w[1] >= w[0] - 1e-12, "median decreased: {w:?}");
    }
    let per_agent: Vec<f64> = points
        .iter()
        .map(|p| p.median_tv_sum / p.n_agents as f64)
        .collect();
    let lo = per_agent.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = per_agent.iter().cloned().fold(0.0_f64, f64::max);
    println!("criterion 11: per-agent medians = {per_agent:?}, band = {:.3}", hi / lo);
    assert!(
        hi <= 2.0 * lo,
        "per-agent medians span more than a factor of 2: {per_agent:?}"
    );
}

#[test]
fn criterion_12_bound_slack_over_realized_updates() {
    let chain_2x3 = coop_chain_env(2, 3, true).unwrap();
    let chain_3x4 = coop_chain_env(3, 4, true).unwrap();
    let runs = chain_runs();
    let cases = [
        ("IR 2x3", &chain_2x3, &runs.ir_2x3),
        ("JR 2x3", &chain_2x3, &runs.jr_2x3),
        ("IR 3x4", &chain_3x4, &runs.ir_3x4),
        ("JR 3x4", &chain_3x4, &runs.jr_3x4),
    ];
    for (name, mdp, run) in cases {
        let points = bound_slack_report(mdp, &run.policies).unwrap();
        let worst = points
            .iter()
            .map(|p| p.slack)
            .fold(f64::INFINITY, f64::min);
        println!("criterion 12 [{name}]: worst slack = {worst:e} over {} updates", points.len());
        assert!(worst >= -1e-8, "{name}: slack violated at {worst}");
    }
}

#[test]
fn criterion_13_stationarity_counterexample_exists() {
    let outcome = run_suite(Suite::Counterexample, 500, ACCEPTANCE_SEED).unwrap();
    println!("criterion 13: {}", outcome.detail);
    assert!(
        outcome.passed,
        "no witness found; search log: {}",
        outcome.detail
    );
}

#[test]
fn criterion_14_repeat_runs_are_byte_identical() {
    let mdp = coop_chain_env(2, 3, true).unwrap();
    let cfg = chain_cfg(Algorithm::IrPpo);
    let a = run_training(&mdp, &cfg).unwrap();
    let b = run_training(&mdp, &cfg).unwrap();
    let csv_a = records_to_csv(&a.records, 2, cfg.epochs_per_iter, "meta seed=7");
    let csv_b = records_to_csv(&b.records, 2, cfg.epochs_per_iter, "meta seed=7");
    assert_eq!(csv_a.as_bytes(), csv_b.as_bytes(), "CSV bytes differ");
    println!("criterion 14: {} identical CSV bytes", csv_a.len());
}
