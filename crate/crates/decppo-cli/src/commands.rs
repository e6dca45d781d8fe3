//! Subcommand implementations.

use std::fs;
use std::path::Path;

use decppo::decmdp::{coop_chain_env, random_dec_mdp_with_discount, TabularDecMdp};
use decppo::diagnostics::{
    bound_slack_report, median_tv_sum, records_to_csv, update_tv_histogram, TvHistogram,
};
use decppo::oracle::{joint_eval, tv_divergence};
use decppo::par::map_indexed;
use decppo::policy::{load_policies, save_policies};
use decppo::train::{run_training, run_training_from, ClipSpec, TrainingRun};
use decppo::verify::{run_suite, sweep_counterexample_over_seeds, Suite, SuiteOutcome};

use crate::config::{resolve_out_dir, ExperimentConfig};
use crate::{CliError, Generator, ReportArgs, SweepArgs, TrainArgs, VerifyArgs};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn env_summary(mdp: &TabularDecMdp) -> String {
    format!(
        "agents={} local_states={:?} local_actions={:?} joint_states={} joint_actions={} gamma={} shared={}",
        mdp.n_agents(),
        (0..mdp.n_agents()).map(|k| mdp.local_states(k)).collect::<Vec<_>>(),
        (0..mdp.n_agents()).map(|k| mdp.local_actions(k)).collect::<Vec<_>>(),
        mdp.joint_states(),
        mdp.joint_actions(),
        mdp.discount(),
        mdp.shared_state(),
    )
}

pub(crate) fn gen_env(generator: Generator) -> Result<(), CliError> {
    let (mdp, out) = match generator {
        Generator::Random {
            agents,
            states,
            actions,
            seed,
            gamma,
            factored,
            out,
        } => (
            random_dec_mdp_with_discount(agents, states, actions, !factored, seed, gamma)?,
            out,
        ),
        Generator::Chain {
            agents,
            length,
            factored,
            out,
        } => (coop_chain_env(agents, length, !factored)?, out),
    };
    mdp.save(&out)?;
    println!("{}", env_summary(&mdp));
    println!("written to {}", out.display());
    Ok(())
}

fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    mdp: &TabularDecMdp,
    run: &TrainingRun,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash()?;
    let meta = format!(
        "config_hash={hash} seed={} env={}",
        cfg.train.seed,
        mdp.spec().provenance.as_deref().unwrap_or("file")
    );
    let csv = records_to_csv(
        &run.records,
        mdp.n_agents(),
        cfg.train.epochs_per_iter,
        &meta,
    );
    fs::write(dir.join("records.csv"), csv)?;
    run.final_policy().save(&dir.join("policy_final.txt"))?;
    if cfg.output.keep_policies {
        save_policies(&dir.join("policies.ron"), &run.policies)?;
    }
    let config_text = cfg.to_toml()?;
    fs::write(dir.join("config.toml"), &config_text)?;
    fs::write(dir.join("meta.txt"), format!("# {meta}\n{config_text}"))?;
    Ok(())
}

pub(crate) fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        cfg.train.iterations = iterations;
    }
    let out_dir = resolve_out_dir(args.out_dir, &cfg, &args.config);
    let mdp = cfg.env.resolve()?;
    let run = match &cfg.initial_policy {
        Some(path) => {
            let checkpoint = decppo::policy::JointPolicy::load(path)?;
            run_training_from(&mdp, &cfg.train, checkpoint)?
        }
        None => run_training(&mdp, &cfg.train)?,
    };
    write_run(&out_dir, &cfg, &mdp, &run)?;
    if let Some(last) = run.records.last() {
        println!(
            "{} iterations, final J = {}",
            run.records.len(),
            last.joint_return
        );
    }
    println!("run written to {}", out_dir.display());
    Ok(())
}

fn print_outcome(outcome: &SuiteOutcome) {
    println!(
        "{}: {} (trials={}) — {}",
        outcome.suite.name(),
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.trials,
        outcome.detail
    );
}

pub(crate) fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let outcomes: Vec<SuiteOutcome> = if args.suite == "all" {
        if args.seeds.is_some() {
            return Err(CliError::usage("--seeds applies to the counterexample suite only"));
        }
        let mut all = Vec::new();
        for suite in Suite::ALL {
            let trials = args.trials.unwrap_or_else(|| suite.default_trials());
            all.push(run_suite(suite, trials, args.seed)?);
        }
        all
    } else {
        let suite = Suite::from_name(&args.suite).ok_or_else(|| {
            CliError::usage(format!(
                "unknown suite '{}'; expected one of eq1, thm1, prop1, thm2, prop4, prop5, counterexample, all",
                args.suite
            ))
        })?;
        let outcome = match &args.seeds {
            Some(range) => {
                if suite != Suite::Counterexample {
                    return Err(CliError::usage(
                        "--seeds applies to the counterexample suite only",
                    ));
                }
                let (first, last) = parse_seed_range(range)?;
                sweep_counterexample_over_seeds(first, last)?
            }
            None => {
                let trials = args.trials.unwrap_or_else(|| suite.default_trials());
                run_suite(suite, trials, args.seed)?
            }
        };
        vec![outcome]
    };

    let mut failed = Vec::new();
    for outcome in &outcomes {
        print_outcome(outcome);
        if !outcome.passed {
            failed.push(outcome.suite.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::contract(format!(
            "failing suites: {}",
            failed.join(", ")
        )))
    }
}

fn parse_seed_range(text: &str) -> Result<(u64, u64), CliError> {
    let (a, b) = text
        .split_once("..")
        .ok_or_else(|| CliError::usage("seed range must look like 1..500"))?;
    let first: u64 = a
        .trim()
        .parse()
        .map_err(|_| CliError::usage("seed range must look like 1..500"))?;
    let last: u64 = b
        .trim()
        .parse()
        .map_err(|_| CliError::usage("seed range must look like 1..500"))?;
    if last < first {
        return Err(CliError::usage("seed range must be ascending"));
    }
    Ok((first, last))
}

struct Cell {
    idx: usize,
    clip: ClipSpec,
    epochs: usize,
    agents: Option<usize>,
}

struct CellOutcome {
    idx: usize,
    eps_label: String,
    epochs: usize,
    n_agents: usize,
    iterations: usize,
    final_return: f64,
    best_return: f64,
    median_tv: f64,
    worst_slack: f64,
    histogram: TvHistogram,
}

pub(crate) fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let grid = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::usage("config has no [sweep] section"))?;
    let out_dir = resolve_out_dir(args.out_dir, &cfg, &args.config);
    fs::create_dir_all(&out_dir)?;

    let mut clip_axis: Vec<ClipSpec> = grid.eps.iter().map(|&e| ClipSpec::Eps(e)).collect();
    if grid.include_no_clip {
        clip_axis.push(ClipSpec::None);
    }
    if clip_axis.is_empty() {
        clip_axis.push(cfg.train.clip);
    }
    let epochs_axis = if grid.epochs.is_empty() {
        vec![cfg.train.epochs_per_iter]
    } else {
        grid.epochs.clone()
    };
    let agents_axis: Vec<Option<usize>> = if grid.agents.is_empty() {
        vec![None]
    } else {
        grid.agents.iter().map(|&n| Some(n)).collect()
    };

    let mut cells = Vec::new();
    for &clip in &clip_axis {
        for &epochs in &epochs_axis {
            for &agents in &agents_axis {
                cells.push(Cell {
                    idx: cells.len(),
                    clip,
                    epochs,
                    agents,
                });
            }
        }
    }

    let outcomes: Vec<Result<CellOutcome, CliError>> = map_indexed(cells.len(), |i| {
        run_cell(&cfg, &cells[i], &out_dir)
    });
    let mut rows = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        rows.push(outcome?);
    }

    let hash = cfg.hash()?;
    let meta = format!("config_hash={hash} seed={}", cfg.train.seed);
    let mut cells_csv = format!(
        "# {meta}\ncell,eps,epochs,agents,iterations,final_return,best_return,first_update_median_tv,worst_slack\n"
    );
    for row in &rows {
        cells_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.idx,
            row.eps_label,
            row.epochs,
            row.n_agents,
            row.iterations,
            row.final_return,
            row.best_return,
            row.median_tv,
            row.worst_slack
        ));
    }
    fs::write(out_dir.join("cells.csv"), cells_csv)?;

    let mut hist_csv = format!("# {meta}\ncell,eps,agents,bin_lo,bin_hi,mass,cumulative\n");
    for row in &rows {
        let h = &row.histogram;
        for b in 0..h.mass.len() {
            hist_csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.idx,
                row.eps_label,
                row.n_agents,
                h.edges[b],
                h.edges[b + 1],
                h.mass[b],
                h.cumulative[b]
            ));
        }
    }
    fs::write(out_dir.join("histograms.csv"), hist_csv)?;

    println!("{} cells written to {}", rows.len(), out_dir.display());
    Ok(())
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, out_dir: &Path) -> Result<CellOutcome, CliError> {
    let mdp = cfg.env.resolve_with_agents(cell.agents)?;
    let mut cell_cfg = cfg.clone();
    cell_cfg.train.clip = cell.clip;
    cell_cfg.train.epochs_per_iter = cell.epochs;
    // masked to 63 bits so the derived seed survives TOML's i64 integers
    cell_cfg.train.seed =
        (cfg.train.seed ^ (cell.idx as u64).wrapping_mul(GOLDEN)) & (i64::MAX as u64);
    let eps_label = match cell.clip.eps(mdp.n_agents()) {
        Some(e) => e.to_string(),
        None => "none".to_string(),
    };
    let cell_dir = out_dir.join(format!(
        "cell_{:03}_eps{}_ep{}_n{}",
        cell.idx,
        eps_label,
        cell.epochs,
        mdp.n_agents()
    ));

    let run = run_training(&mdp, &cell_cfg.train)?;
    write_run(&cell_dir, &cell_cfg, &mdp, &run)?;

    let (final_return, best_return) = {
        let last = run.records.last().map_or(f64::NAN, |r| r.joint_return);
        let best = run
            .records
            .iter()
            .map(|r| r.joint_return)
            .fold(f64::NEG_INFINITY, f64::max);
        (last, best)
    };
    let median_tv = if run.policies.len() >= 2 {
        median_tv_sum(&mdp, &run.policies[0], &run.policies[1])?
    } else {
        0.0
    };
    let worst_slack = if cfg.diagnostics.recompute_slack
        && mdp.shared_state()
        && mdp.homogeneous_agents()
        && run.policies.len() >= 2
    {
        bound_slack_report(&mdp, &run.policies)?
            .iter()
            .map(|p| p.slack)
            .fold(f64::INFINITY, f64::min)
    } else {
        f64::NAN
    };
    let histogram = if run.policies.len() >= 2 {
        update_tv_histogram(
            &mdp,
            &run.policies[0],
            &run.policies[1],
            cfg.diagnostics.bins,
            cell.clip.eps(mdp.n_agents()),
        )?
    } else {
        update_tv_histogram(
            &mdp,
            &run.policies[0],
            &run.policies[0],
            cfg.diagnostics.bins,
            cell.clip.eps(mdp.n_agents()),
        )?
    };

    Ok(CellOutcome {
        idx: cell.idx,
        eps_label,
        epochs: cell.epochs,
        n_agents: mdp.n_agents(),
        iterations: run.records.len(),
        final_return,
        best_return,
        median_tv,
        worst_slack,
        histogram,
    })
}

pub(crate) fn report(args: ReportArgs) -> Result<(), CliError> {
    let run_dir = &args.run;
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let mdp = match &args.env {
        Some(path) => TabularDecMdp::load(path)?,
        None => cfg.env.resolve()?,
    };
    let policies = load_policies(&run_dir.join("policies.ron"))?;
    if policies.is_empty() {
        return Err(CliError::usage("run has no recorded policies"));
    }
    let bins = args.bins.unwrap_or(cfg.diagnostics.bins);
    let exact = mdp.shared_state() && mdp.homogeneous_agents();

    // per-update expected TV traces
    let mut tv_csv = String::from("iteration");
    for k in 0..mdp.n_agents() {
        tv_csv.push_str(&format!(",tv_{k}"));
    }
    tv_csv.push_str(",tv_sum\n");
    for (i, pair) in policies.windows(2).enumerate() {
        let occupancy = joint_eval(&mdp, &pair[0])?.occupancy;
        let mut per_agent = vec![0.0; mdp.n_agents()];
        for (s, &d) in occupancy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (k, tv_k) in per_agent.iter_mut().enumerate() {
                let s_k = mdp.local_state_of(s, k);
                *tv_k += d * tv_divergence(&pair[0].probs(k, s_k), &pair[1].probs(k, s_k));
            }
        }
        let sum: f64 = per_agent.iter().sum();
        tv_csv.push_str(&i.to_string());
        for v in &per_agent {
            tv_csv.push_str(&format!(",{v}"));
        }
        tv_csv.push_str(&format!(",{sum}\n"));
    }
    fs::write(run_dir.join("tv.csv"), tv_csv)?;

    // first-update TV histogram
    if policies.len() >= 2 {
        let hist = update_tv_histogram(
            &mdp,
            &policies[0],
            &policies[1],
            bins,
            cfg.train.clip.eps(mdp.n_agents()),
        )?;
        let mut hist_csv = String::from("bin_lo,bin_hi,mass,cumulative\n");
        for b in 0..hist.mass.len() {
            hist_csv.push_str(&format!(
                "{},{},{},{}\n",
                hist.edges[b],
                hist.edges[b + 1],
                hist.mass[b],
                hist.cumulative[b]
            ));
        }
        fs::write(run_dir.join("histogram.csv"), hist_csv)?;
    }

    // decentralized-bound audit of every realized update
    let mut worst_slack = f64::INFINITY;
    if exact {
        let points = bound_slack_report(&mdp, &policies)?;
        let mut slack_csv = String::from("iteration,lhs,rhs,slack,alpha\n");
        for p in &points {
            slack_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                p.iteration, p.lhs, p.rhs, p.slack, p.alpha
            ));
            worst_slack = worst_slack.min(p.slack);
        }
        fs::write(run_dir.join("slack.csv"), slack_csv)?;
    }

    let mut summary = String::new();
    summary.push_str(&format!("env: {}\n", env_summary(&mdp)));
    summary.push_str(&format!("updates: {}\n", policies.len().saturating_sub(1)));
    if exact {
        summary.push_str(&format!("worst bound slack: {worst_slack}\n"));
    } else {
        summary.push_str("bound audit skipped: occupancy-weighted (approximate) regime\n");
    }
    fs::write(run_dir.join("summary.txt"), &summary)?;
    print!("{summary}");

    if exact && worst_slack < -1e-8 {
        return Err(CliError::contract(format!(
            "bound slack {worst_slack} below -1e-8"
        )));
    }
    Ok(())
}
