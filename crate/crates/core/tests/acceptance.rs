//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails when `ACCEPTANCE_STRICT` is set.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use core_periphery::analysis::{
    brute_force_oracle, check_center_monotone, check_core_influence, check_derivatives,
    check_participation_monotone, check_potential_exactness, check_threshold_following,
    check_welfare_optimal, find_budget_thresholds, sweep_core_budget,
};
use core_periphery::cli::load_config;
use core_periphery::model::{Community, CommunityConfig};
use core_periphery::solver::{
    best_response_core, best_response_periphery, initial_allocation, run_dynamics, solve_community,
    solve_equilibrium, EquilibriumResult, InitMode, SolverOptions,
};

const IDENTITY_TOL: f64 = 1e-9;
const DEVIATIONS: usize = 2000;
const CONVERGENCE_TOL: f64 = 1e-8;
const MAX_ITERATIONS: usize = 10_000;
const POTENTIAL_DROP_TOL: f64 = 1e-12;
const SOLVE_TIME_LIMIT: Duration = Duration::from_secs(10);
const UNIQUENESS_TOL: f64 = 1e-6;
const ORACLE_GRID_STEPS: usize = 200;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(300);
const STRICT_GAP: f64 = 1e-9;
const MONOTONE_TOL: f64 = 1e-8;
const DERIVATIVE_SAMPLES: usize = 200;
const DERIVATIVE_REL_TOL: f64 = 1e-5;
const EIGENVALUE_CEILING: f64 = -1e-12;
const WELFARE_TRIALS: usize = 500;
const WELFARE_TOL: f64 = 1e-8;
const CORE_BUDGET_FACTORS: [f64; 4] = [1.0, 1.25, 1.5, 2.0];
const SEED: u64 = 20_241;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn default_config() -> CommunityConfig {
    let file = load_config(&repo_path("configs/default.toml")).expect("shipped default config loads");
    assert_eq!(file.community, CommunityConfig::desk_default());
    file.community
}

fn options() -> SolverOptions {
    SolverOptions::default()
}

fn exact_potential(com: &Community, eq: &EquilibriumResult) -> Outcome {
    let rep = check_potential_exactness(com, &eq.allocation, DEVIATIONS, SEED).unwrap();
    let worst = rep.metric.unwrap();
    Outcome {
        id: 1,
        name: "exact potential identity",
        passed: rep.passed && worst <= IDENTITY_TOL,
        detail: format!("max |dG - dU| = {worst:.3e} over {DEVIATIONS} unilateral deviations (tol {IDENTITY_TOL:e})"),
    }
}

fn monotone_convergence(cfg: &CommunityConfig) -> (Outcome, EquilibriumResult) {
    let t = Instant::now();
    let eq = solve_equilibrium(cfg, &options()).unwrap();
    let elapsed = t.elapsed();
    let drop = eq.largest_potential_drop();
    let passed = eq.converged
        && eq.final_step < CONVERGENCE_TOL
        && eq.iterations <= MAX_ITERATIONS
        && drop <= POTENTIAL_DROP_TOL
        && elapsed < SOLVE_TIME_LIMIT;
    let outcome = Outcome {
        id: 2,
        name: "monotone potential and convergence",
        passed,
        detail: format!(
            "converged={} in {} iterations, last step {:.2e}, largest drop {:.2e}, G = {:.9}, {:.2?} for {} starts",
            eq.converged,
            eq.iterations,
            eq.final_step,
            drop,
            eq.potential(),
            elapsed,
            eq.starts.len()
        ),
    };
    (outcome, eq)
}

/// Largest gain any single agent can get by best-responding.
fn deviation_gain(com: &Community, eq: &EquilibriumResult) -> f64 {
    let opts = options();
    let base = &eq.allocation;
    let mut alloc = base.clone();
    alloc.core_rates = best_response_core(com, base, &opts).unwrap();
    let mut gain = com.core_utility(&alloc) - com.core_utility(base);
    for y in 0..com.num_agents() {
        let mut alloc = base.clone();
        let v = best_response_periphery(com, y, &base.core_rates, &opts).unwrap();
        alloc.set_periphery_vector(y, &v);
        gain = gain.max(com.periphery_utility(y, &alloc).total - com.periphery_utility(y, base).total);
    }
    gain
}

fn uniqueness() -> Outcome {
    let mut passed = true;
    let mut lines = Vec::new();
    for k in [5usize, 11, 20] {
        let cfg = CommunityConfig {
            num_periphery: k,
            ..CommunityConfig::desk_default()
        };
        let com = Community::new(cfg).unwrap();
        let mut inits = vec![
            SolverOptions { init_mode: InitMode::UniformFloor, ..options() },
            SolverOptions { init_mode: InitMode::UniformBudget, ..options() },
        ];
        inits.extend((1..=5).map(|seed| SolverOptions { init_mode: InitMode::Random, seed, ..options() }));
        let runs: Vec<EquilibriumResult> = inits
            .iter()
            .map(|o| run_dynamics(&com, initial_allocation(&com, o).unwrap(), o).unwrap())
            .collect();
        let spread = runs
            .iter()
            .map(|r| r.allocation.sup_distance(&runs[0].allocation))
            .fold(0.0, f64::max);
        let all_converged = runs.iter().all(|r| r.converged);
        let worst_gain = runs.iter().map(|r| deviation_gain(&com, r)).fold(f64::NEG_INFINITY, f64::max);
        let mut potentials: Vec<f64> = runs.iter().map(|r| r.potential()).collect();
        potentials.sort_by(f64::total_cmp);
        potentials.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

        let selected: Vec<EquilibriumResult> = inits.iter().map(|o| solve_community(&com, o).unwrap()).collect();
        let selected_spread = selected
            .iter()
            .map(|r| r.allocation.sup_distance(&selected[0].allocation))
            .fold(0.0, f64::max);

        passed &= all_converged && spread <= UNIQUENESS_TOL;
        lines.push(format!(
            "K={k}: dynamics spread {spread:.3e}, fixed points with G in {potentials:.6?}, largest unilateral gain {worst_gain:.1e}; potential-maximizing selection spread {selected_spread:.1e}"
        ));
    }
    Outcome {
        id: 3,
        name: "uniqueness across 7 initializations",
        passed,
        detail: format!("(tol {UNIQUENESS_TOL:e} sup-norm)\n      {}", lines.join("\n      ")),
    }
}

fn oracle_equivalence() -> Outcome {
    let file = load_config(&repo_path("configs/tiny.toml")).expect("shipped tiny config loads");
    let cfg = file.community;
    let t = Instant::now();
    let oracle = brute_force_oracle(&cfg, ORACLE_GRID_STEPS).unwrap();
    let elapsed = t.elapsed();
    let eq = solve_equilibrium(&cfg, &file.solver).unwrap();
    let gap = eq.potential() - oracle.potential;
    Outcome {
        id: 4,
        name: "brute-force oracle agreement (K=3)",
        passed: eq.converged && gap.abs() <= oracle.lipschitz_bound && elapsed < ORACLE_TIME_LIMIT,
        detail: format!(
            "G_solver = {:.9}, G_oracle = {:.9}, gap {gap:.3e}, Lipschitz bound {:.4e} (steps {}, h_c {:.4}, h_p {:.4}), {} core tuples in {elapsed:.2?}",
            eq.potential(),
            oracle.potential,
            oracle.lipschitz_bound,
            ORACLE_GRID_STEPS,
            oracle.core_spacing,
            oracle.periphery_spacing,
            oracle.evaluated_core_tuples
        ),
    }
}

fn connectivity_frontier(cfg: &CommunityConfig, eq: &EquilibriumResult) -> (Outcome, Option<f64>) {
    let mc_grid = [0.5, 2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0];
    let mp_grid = [0.5, 2.0, 5.0, 10.0, 15.0, 20.0];
    let search = find_budget_thresholds(cfg, &mc_grid, &mp_grid, &options()).unwrap();
    let positive = eq
        .allocation
        .core_rates
        .iter()
        .chain(&eq.allocation.periphery_to_core)
        .filter(|&&r| r > 0.0)
        .count();
    let k = cfg.num_periphery;
    let corner = search.grid.last().unwrap();
    let passed = search.frontier_monotone && corner.fully_connected && positive == 2 * k;
    let outcome = Outcome {
        id: 5,
        name: "full-connectivity frontier",
        passed,
        detail: format!(
            "frontier monotone={}, m_c_hat={:?}, m_p_hat={:?}, {positive}/{} core links positive at (50, 20)",
            search.frontier_monotone,
            search.m_c_hat,
            search.m_p_hat,
            2 * k
        ),
    };
    (outcome, search.m_c_hat)
}

fn level_set_following(com: &Community, eq: &EquilibriumResult) -> Outcome {
    let rep = check_threshold_following(eq, com).unwrap();
    let shown: Vec<String> = rep
        .witnesses
        .iter()
        .take(3)
        .map(|w| format!("agent {} skips {} (p={}) but follows {} (p={})", w.agents[0], w.agents[1], w.values[0], w.agents[2], w.values[1]))
        .collect();
    Outcome {
        id: 6,
        name: "followed peers form a strict upper level set",
        passed: rep.passed,
        detail: format!("{} violating agent(s) (gap must exceed 0); {}", rep.witnesses.len(), shown.join("; ")),
    }
}

fn center_ordering(com: &Community, eq: &EquilibriumResult) -> Outcome {
    let rates = check_center_monotone(eq, com).unwrap();
    let part = check_participation_monotone(eq, com).unwrap();
    Outcome {
        id: 7,
        name: "center-distance ordering of rates and participation",
        passed: rates.passed && part.passed,
        detail: format!(
            "rates: {} witnesses, min strict gap {:.3e}; participation: {} witnesses, min strict gap {:.3e} (strict > {STRICT_GAP:e}, equal within {MONOTONE_TOL:e})",
            rates.witnesses.len(),
            rates.metric.unwrap(),
            part.witnesses.len(),
            part.metric.unwrap()
        ),
    }
}

fn core_influence(cfg: &CommunityConfig, m_c_hat: Option<f64>) -> Outcome {
    let Some(base) = m_c_hat else {
        return Outcome {
            id: 8,
            name: "core budget raises participation",
            passed: false,
            detail: "no core-budget threshold found on the grid".into(),
        };
    };
    let values: Vec<f64> = CORE_BUDGET_FACTORS.iter().map(|f| f * base).collect();
    let sweep = sweep_core_budget(cfg, &values, &options()).unwrap();
    let rep = check_core_influence(&sweep, cfg.spacing()).unwrap();
    Outcome {
        id: 8,
        name: "core budget raises participation",
        passed: rep.passed && values.len() >= 4,
        detail: format!(
            "M_c in {values:?}: {} witnesses, smallest step change {:.3e} (tol {MONOTONE_TOL:e})",
            rep.witnesses.len(),
            rep.metric.unwrap()
        ),
    }
}

fn derivatives(cfg: &CommunityConfig) -> Outcome {
    let rep = check_derivatives(cfg, DERIVATIVE_SAMPLES, SEED).unwrap();
    Outcome {
        id: 9,
        name: "analytic derivatives and negative-definite Hessians",
        passed: rep.passed
            && rep.samples >= DERIVATIVE_SAMPLES
            && rep.max_gradient_rel_error <= DERIVATIVE_REL_TOL
            && rep.max_hessian_rel_error <= DERIVATIVE_REL_TOL
            && rep.max_second_derivative_rel_error <= DERIVATIVE_REL_TOL
            && rep.max_eigenvalue <= EIGENVALUE_CEILING,
        detail: format!(
            "{} points: gradient rel err {:.2e}, Hessian rel err {:.2e}, 1-D second derivative rel err {:.2e} (tol {DERIVATIVE_REL_TOL:e}); max eigenvalue {:.3e} (ceiling {EIGENVALUE_CEILING:e})",
            rep.samples,
            rep.max_gradient_rel_error,
            rep.max_hessian_rel_error,
            rep.max_second_derivative_rel_error,
            rep.max_eigenvalue
        ),
    }
}

fn welfare(com: &Community, eq: &EquilibriumResult) -> Outcome {
    let rep = check_welfare_optimal(eq, com, WELFARE_TRIALS, SEED).unwrap();
    Outcome {
        id: 10,
        name: "equilibrium maximizes the potential",
        passed: rep.passed && rep.metric.unwrap() >= -WELFARE_TOL,
        detail: format!(
            "{} random + {} perturbed candidates, smallest margin {:.3e} (tol {WELFARE_TOL:e})",
            WELFARE_TRIALS,
            WELFARE_TRIALS,
            rep.metric.unwrap()
        ),
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_path("configs/default.toml");
    let cfg = cfg.to_str().unwrap();
    let runs: [(&str, Vec<&str>); 4] = [
        ("solve.json", vec!["solve", "--config", cfg, "--init", "random", "--seed", "7"]),
        ("sweep.csv", vec!["sweep", "--config", cfg, "--param", "Mc", "--from", "50", "--to", "100", "--steps", "2"]),
        ("thresholds.csv", vec!["thresholds", "--config", cfg, "--mc-grid", "20,50", "--mp-grid", "10,20"]),
        ("derivatives.json", vec!["derivatives", "--config", cfg, "--samples", "50", "--seed", "3"]),
    ];
    let mut mismatched = Vec::new();
    for (name, args) in runs {
        let out = dir.path().join(name);
        let mut outputs = Vec::new();
        for _ in 0..2 {
            let status = Command::new(env!("CARGO_BIN_EXE_cpgame"))
                .args(&args)
                .arg("--out")
                .arg(&out)
                .status()
                .unwrap();
            assert!(status.success(), "{name} exited with {status}");
            let mut bytes = std::fs::read(&out).unwrap();
            if let Ok(meta) = std::fs::read(format!("{}.meta.json", out.display())) {
                bytes.extend(meta);
            }
            outputs.push(bytes);
        }
        if outputs[0] != outputs[1] {
            mismatched.push(name);
        }
    }
    Outcome {
        id: 11,
        name: "byte-identical reruns",
        passed: mismatched.is_empty(),
        detail: format!("solve, sweep, thresholds, derivatives rerun twice; mismatches: {mismatched:?}"),
    }
}

fn main() {
    // `cargo test -- --list` and filters should not trigger the full run.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let cfg = default_config();
    let com = Community::new(cfg.clone()).unwrap();

    let mut outcomes = Vec::new();
    let (convergence, eq) = monotone_convergence(&cfg);
    outcomes.push(exact_potential(&com, &eq));
    outcomes.push(convergence);
    outcomes.push(uniqueness());
    outcomes.push(oracle_equivalence());
    let (frontier, m_c_hat) = connectivity_frontier(&cfg, &eq);
    outcomes.push(frontier);
    outcomes.push(level_set_following(&com, &eq));
    outcomes.push(center_ordering(&com, &eq));
    outcomes.push(core_influence(&cfg, m_c_hat));
    outcomes.push(derivatives(&cfg));
    outcomes.push(welfare(&com, &eq));
    outcomes.push(determinism());

    println!();
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:>2} {}: {}", o.id, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("\nacceptance: {} passed, {failed} failed", outcomes.len() - failed);
    // Red criteria are reported, not fatal, unless strict mode is requested.
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
