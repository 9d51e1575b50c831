//! Structural checks on computed equilibria, brute-force oracles, derivative
//! checks and parameter sweeps.

mod derivatives;
mod oracle;
mod sweep;

pub use derivatives::{check_derivatives, DerivativeReport, DerivativeSample};
pub use oracle::{brute_force_oracle, OracleResult, ORACLE_MAX_AGENTS, ORACLE_MAX_STEPS};
pub use sweep::{
    check_core_influence, check_participation_sufficiency, find_budget_thresholds, sweep,
    sweep_core_budget, ParticipationCell, ParticipationReport, SweepParam, SweepRecord,
    SweepResult, ThresholdCell, ThresholdSearchResult,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Allocation, Community, CommunityConfig, ModelError};
use crate::solver::{random_allocation, random_rates, EquilibriumResult, SolverError, SolverOptions};

/// A strict inequality must hold by more than this margin.
pub const STRICT_TOL: f64 = 1e-9;
/// Quantities that symmetry forces equal must agree within this.
pub const EQUAL_TOL: f64 = 1e-8;
/// Largest tolerated gap in the exact-potential identity.
pub const POTENTIAL_IDENTITY_TOL: f64 = 1e-9;
/// Slack allowed when a candidate's potential is compared with the equilibrium's.
pub const WELFARE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("equilibrium did not converge; refusing to check structure")]
    Unconverged,
    #[error("brute-force oracle supports at most {max} agents, got {got}")]
    OracleTooLarge { got: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyId {
    FullConnectivity,
    ThresholdFollowing,
    CenterMonotoneRates,
    ParticipationMonotone,
    WelfareOptimal,
    PotentialExactness,
    CoreInfluence,
}

/// A counterexample: the agents involved and the values that broke the property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub agents: Vec<usize>,
    pub values: Vec<f64>,
    pub detail: String,
}

impl Witness {
    fn new(agents: Vec<usize>, values: Vec<f64>, detail: impl Into<String>) -> Self {
        Self {
            agents,
            values,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: PropertyId,
    pub passed: bool,
    pub witnesses: Vec<Witness>,
    /// Inferred per-agent follow threshold (threshold following only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<Option<f64>>,
    /// Worst observed margin or error, when the check has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<f64>,
    /// Grid spacing of the community the check ran on.
    pub spacing: f64,
}

impl PropertyReport {
    fn new(property: PropertyId, witnesses: Vec<Witness>, spacing: f64) -> Self {
        Self {
            property,
            passed: witnesses.is_empty(),
            witnesses,
            thresholds: Vec::new(),
            metric: None,
            spacing,
        }
    }

    fn with_metric(mut self, metric: f64) -> Self {
        self.metric = Some(metric);
        self
    }
}

fn require_converged(result: &EquilibriumResult) -> Result<()> {
    if result.converged {
        Ok(())
    } else {
        Err(AnalysisError::Unconverged)
    }
}

fn spacing(community: &Community) -> f64 {
    community.config().spacing()
}

/// Every agent is followed by the core and follows the core.
pub fn check_full_connectivity(result: &EquilibriumResult, community: &Community) -> Result<PropertyReport> {
    require_converged(result)?;
    let a = &result.allocation;
    let witnesses = (0..community.num_agents())
        .filter(|&y| !(a.core_rates[y] > 0.0 && a.periphery_to_core[y] > 0.0))
        .map(|y| {
            Witness::new(
                vec![y],
                vec![a.core_rates[y], a.periphery_to_core[y]],
                "core rate / link rate not both positive",
            )
        })
        .collect();
    Ok(PropertyReport::new(PropertyId::FullConnectivity, witnesses, spacing(community)))
}

/// Each agent's directly followed peers form a strict upper level set of its
/// interest `p(.|y)`.
pub fn check_threshold_following(result: &EquilibriumResult, community: &Community) -> Result<PropertyReport> {
    require_converged(result)?;
    let k = community.num_agents();
    let a = &result.allocation;
    let mut witnesses = Vec::new();
    let mut thresholds = Vec::with_capacity(k);
    for y in 0..k {
        let peers = (0..k).filter(|&z| z != y);
        let (followed, unfollowed): (Vec<usize>, Vec<usize>) =
            peers.partition(|&z| a.periphery_to_periphery[y][z] > 0.0);
        let min_in = followed
            .iter()
            .map(|&z| (z, community.p(z, y)))
            .min_by(|l, r| l.1.total_cmp(&r.1));
        let max_out = unfollowed
            .iter()
            .map(|&z| (z, community.p(z, y)))
            .max_by(|l, r| l.1.total_cmp(&r.1));
        match (min_in, max_out) {
            (Some((zi, pi)), Some((zo, po))) => {
                if pi - po > STRICT_TOL {
                    thresholds.push(Some(0.5 * (pi + po)));
                } else {
                    thresholds.push(None);
                    witnesses.push(Witness::new(
                        vec![y, zo, zi],
                        vec![po, pi],
                        "unfollowed peer is at least as interesting as a followed one",
                    ));
                }
            }
            (Some((_, pi)), None) => thresholds.push(Some(0.5 * pi)),
            (None, _) => thresholds.push(None),
        }
    }
    let mut report = PropertyReport::new(PropertyId::ThresholdFollowing, witnesses, spacing(community));
    report.thresholds = thresholds;
    Ok(report)
}

/// Compares `value(y)` over all agent pairs ordered by distance from the
/// center: strictly larger for the closer agent, equal for equidistant pairs.
fn center_ordering<F: Fn(usize) -> f64>(
    community: &Community,
    name: &str,
    value: F,
    witnesses: &mut Vec<Witness>,
) -> f64 {
    let k = community.num_agents();
    let scale = community.config().half_width.max(1.0);
    let mut worst = f64::INFINITY;
    for y in 0..k {
        for w in (y + 1)..k {
            let (dy, dw) = (community.center_distance(y), community.center_distance(w));
            let (vy, vw) = (value(y), value(w));
            if (dy - dw).abs() <= 1e-12 * scale {
                if (vy - vw).abs() > EQUAL_TOL {
                    witnesses.push(Witness::new(
                        vec![y, w],
                        vec![vy, vw],
                        format!("{name} differs between equidistant agents"),
                    ));
                }
                continue;
            }
            let (inner, outer, vi, vo) = if dy < dw { (y, w, vy, vw) } else { (w, y, vw, vy) };
            worst = worst.min(vi - vo);
            if !(vi - vo > STRICT_TOL) {
                witnesses.push(Witness::new(
                    vec![inner, outer],
                    vec![vi, vo],
                    format!("{name} not strictly larger for the agent closer to the center"),
                ));
            }
        }
    }
    worst
}

/// Agents closer to the center follow the core faster and are followed by
/// the core faster.
pub fn check_center_monotone(result: &EquilibriumResult, community: &Community) -> Result<PropertyReport> {
    require_converged(result)?;
    let a = &result.allocation;
    let mut witnesses = Vec::new();
    let m1 = center_ordering(community, "link rate to core", |y| a.periphery_to_core[y], &mut witnesses);
    let m2 = center_ordering(community, "core rate", |y| a.core_rates[y], &mut witnesses);
    Ok(PropertyReport::new(PropertyId::CenterMonotoneRates, witnesses, spacing(community)).with_metric(m1.min(m2)))
}

/// Agents closer to the center spend more of their budget inside the
/// community and draw more utility from it.
pub fn check_participation_monotone(result: &EquilibriumResult, community: &Community) -> Result<PropertyReport> {
    require_converged(result)?;
    let a = &result.allocation;
    let mp = community.config().budget_periphery;
    let mut witnesses = Vec::new();
    let m1 = center_ordering(community, "participation", |y| mp - a.outside[y], &mut witnesses);
    let m2 = center_ordering(
        community,
        "community utility",
        |y| result.per_agent_utilities[y].community(),
        &mut witnesses,
    );
    Ok(PropertyReport::new(PropertyId::ParticipationMonotone, witnesses, spacing(community)).with_metric(m1.min(m2)))
}

/// Moves a random amount of rate within one agent's vector, keeping it in the
/// restricted strategy space. Returns `false` if no feasible move was found.
fn perturb_vector<R: Rng>(rng: &mut R, v: &mut [f64], budget: f64, floor: f64) -> bool {
    let active: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    let idle: Vec<usize> = (0..v.len()).filter(|&i| v[i] <= 0.0).collect();
    let eps = budget * 10f64.powf(rng.random_range(-4.0..-1.0));
    for _ in 0..20 {
        match rng.random_range(0..4) {
            // Shift mass between two active sources.
            0 if active.len() >= 2 => {
                let i = active[rng.random_range(0..active.len())];
                let j = active[rng.random_range(0..active.len())];
                if i != j && v[i] - eps >= floor {
                    v[i] -= eps;
                    v[j] += eps;
                    return true;
                }
            }
            // Drop a source and hand its rate to another.
            1 if active.len() >= 2 => {
                let i = active[rng.random_range(0..active.len())];
                let j = active[rng.random_range(0..active.len())];
                if i != j {
                    v[j] += v[i];
                    v[i] = 0.0;
                    return true;
                }
            }
            // Open a new source at the floor, funded by the largest one.
            2 if !idle.is_empty() && !active.is_empty() => {
                let i = *active.iter().max_by(|&&l, &&r| v[l].total_cmp(&v[r])).unwrap();
                let j = idle[rng.random_range(0..idle.len())];
                if v[i] - floor >= floor {
                    v[i] -= floor;
                    v[j] = floor;
                    return true;
                }
            }
            // Leave part of the budget unspent.
            3 if !active.is_empty() => {
                let i = active[rng.random_range(0..active.len())];
                if v[i] - eps >= floor {
                    v[i] -= eps;
                    return true;
                }
            }
            _ => {}
        }
    }
    false
}

/// Perturbs the equilibrium in one randomly chosen agent's rates.
fn perturb_allocation<R: Rng>(rng: &mut R, community: &Community, base: &Allocation) -> Option<Allocation> {
    let k = community.num_agents();
    let cfg = community.config();
    let floor = community.mu_floor();
    let mut alloc = base.clone();
    let agent = rng.random_range(0..=k);
    let moved = if agent == k {
        perturb_vector(rng, &mut alloc.core_rates, cfg.budget_core, floor)
    } else {
        let mut v = alloc.periphery_vector(agent);
        let ok = perturb_vector(rng, &mut v, cfg.budget_periphery, floor);
        alloc.set_periphery_vector(agent, &v);
        ok
    };
    moved.then_some(alloc)
}

/// The equilibrium's potential dominates `trials` random feasible allocations
/// and `trials` local perturbations of itself.
pub fn check_welfare_optimal(
    result: &EquilibriumResult,
    community: &Community,
    trials: usize,
    seed: u64,
) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = community.potential(&result.allocation);
    let mut witnesses = Vec::new();
    let mut worst_margin = f64::INFINITY;
    let mut judge = |cand: &Allocation, kind: &str, witnesses: &mut Vec<Witness>| {
        let g = community.potential(cand);
        worst_margin = worst_margin.min(base - g);
        if g > base + WELFARE_TOL {
            witnesses.push(Witness::new(vec![], vec![base, g], format!("{kind} candidate beats the equilibrium")));
        }
    };
    for _ in 0..trials {
        let cand = random_allocation(community, &mut rng);
        judge(&cand, "random", &mut witnesses);
    }
    let mut done = 0;
    let mut attempts = 0;
    while done < trials && attempts < 100 * trials.max(1) {
        attempts += 1;
        if let Some(cand) = perturb_allocation(&mut rng, community, &result.allocation) {
            debug_assert!(community.validate_allocation(&cand).is_ok());
            judge(&cand, "perturbed", &mut witnesses);
            done += 1;
        }
    }
    if done < trials {
        witnesses.push(Witness::new(
            vec![],
            vec![done as f64],
            "could not generate enough feasible perturbations",
        ));
    }
    Ok(PropertyReport::new(PropertyId::WelfareOptimal, witnesses, spacing(community)).with_metric(worst_margin))
}

/// Utility of the deviating agent: the core objective (`agent == K`) or a
/// periphery agent's total.
fn agent_utility(community: &Community, alloc: &Allocation, agent: usize) -> f64 {
    if agent == community.num_agents() {
        community.core_utility(alloc)
    } else {
        community.periphery_utility(agent, alloc).total
    }
}

/// Random unilateral deviations from `base` (and from fresh random
/// allocations) change the potential by exactly the deviator's utility change.
pub fn check_potential_exactness(
    community: &Community,
    base: &Allocation,
    trials: usize,
    seed: u64,
) -> Result<PropertyReport> {
    community.validate_allocation(base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = community.num_agents();
    let cfg = community.config();
    let floor = community.mu_floor();
    let mut witnesses = Vec::new();
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let before = if t % 2 == 0 {
            base.clone()
        } else {
            random_allocation(community, &mut rng)
        };
        let agent = rng.random_range(0..=k);
        let mut after = before.clone();
        if agent == k {
            after.core_rates = random_rates(&mut rng, k, cfg.budget_core, floor);
        } else {
            let v = random_rates(&mut rng, k + 1, cfg.budget_periphery, floor);
            after.set_periphery_vector(agent, &v);
        }
        let d_potential = community.potential(&after) - community.potential(&before);
        let d_utility = agent_utility(community, &after, agent) - agent_utility(community, &before, agent);
        let err = (d_potential - d_utility).abs();
        worst = worst.max(err);
        if err > POTENTIAL_IDENTITY_TOL {
            witnesses.push(Witness::new(vec![agent], vec![d_potential, d_utility], "potential change differs from utility change"));
        }
    }
    Ok(PropertyReport::new(PropertyId::PotentialExactness, witnesses, spacing(community)).with_metric(worst))
}

/// Knobs of [`verify_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub welfare_trials: usize,
    pub deviations: usize,
    /// Multiples of the configured core budget swept for core influence.
    pub core_budget_factors: Vec<f64>,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            welfare_trials: 500,
            deviations: 1000,
            core_budget_factors: vec![1.0, 1.25, 1.5, 2.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySuite {
    pub passed: bool,
    pub potential: f64,
    pub spacing: f64,
    pub reports: Vec<PropertyReport>,
}

/// Runs every structural check on a solved equilibrium of `config`. Core
/// influence is judged on a fresh core-budget sweep.
pub fn verify_suite(
    config: &CommunityConfig,
    result: &EquilibriumResult,
    options: &SolverOptions,
    verify: &VerifyOptions,
) -> Result<VerifySuite> {
    require_converged(result)?;
    let community = Community::new(config.clone())?;
    let values: Vec<f64> = verify.core_budget_factors.iter().map(|f| f * config.budget_core).collect();
    let influence = sweep_core_budget(config, &values, options)?;
    let reports = vec![
        check_full_connectivity(result, &community)?,
        check_threshold_following(result, &community)?,
        check_center_monotone(result, &community)?,
        check_participation_monotone(result, &community)?,
        check_welfare_optimal(result, &community, verify.welfare_trials, verify.seed)?,
        check_potential_exactness(&community, &result.allocation, verify.deviations, verify.seed)?,
        check_core_influence(&influence, community.config().spacing())?,
    ];
    Ok(VerifySuite {
        passed: reports.iter().all(|r| r.passed),
        potential: result.potential(),
        spacing: community.config().spacing(),
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_equilibrium;

    fn default_solution() -> (Community, EquilibriumResult) {
        let cfg = CommunityConfig::desk_default();
        let r = solve_equilibrium(&cfg, &SolverOptions::default()).unwrap();
        (Community::new(cfg).unwrap(), r)
    }

    fn wrap(community: &Community, alloc: Allocation) -> EquilibriumResult {
        EquilibriumResult::assemble(community, alloc, vec![], 1, true, 0.0)
    }

    #[test]
    fn unconverged_results_are_refused() {
        let (com, mut r) = default_solution();
        r.converged = false;
        assert!(matches!(check_full_connectivity(&r, &com), Err(AnalysisError::Unconverged)));
        assert!(matches!(check_threshold_following(&r, &com), Err(AnalysisError::Unconverged)));
        assert!(matches!(check_center_monotone(&r, &com), Err(AnalysisError::Unconverged)));
        assert!(matches!(check_participation_monotone(&r, &com), Err(AnalysisError::Unconverged)));
    }

    #[test]
    fn connectivity_fails_when_core_cannot_afford_anyone() {
        let mut cfg = CommunityConfig::desk_default();
        cfg.budget_core = 1.0; // below the floor
        let com = Community::new(cfg.clone()).unwrap();
        let r = solve_equilibrium(&cfg, &SolverOptions::default()).unwrap();
        let rep = check_full_connectivity(&r, &com).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.witnesses.len(), 11);
    }

    #[test]
    fn connectivity_fails_when_periphery_cannot_afford_anyone() {
        let mut cfg = CommunityConfig::desk_default();
        cfg.budget_periphery = 1.0;
        let com = Community::new(cfg.clone()).unwrap();
        let r = solve_equilibrium(&cfg, &SolverOptions::default()).unwrap();
        assert!(r.allocation.periphery_to_core.iter().all(|&x| x == 0.0));
        let rep = check_full_connectivity(&r, &com).unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn threshold_following_detects_skipped_neighbor() {
        let com = Community::new(CommunityConfig::desk_default()).unwrap();
        let mut a = Allocation::zeros(11);
        // Agent 5 follows its nearest (4) and a third-nearest (7), skipping 6 and 3.
        a.periphery_to_periphery[5][4] = 3.0;
        a.periphery_to_periphery[5][7] = 3.0;
        let rep = check_threshold_following(&wrap(&com, a), &com).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.witnesses.len(), 1);
        assert_eq!(rep.witnesses[0].agents[0], 5);
    }

    #[test]
    fn threshold_following_vacuous_without_follows() {
        let com = Community::new(CommunityConfig::desk_default()).unwrap();
        let rep = check_threshold_following(&wrap(&com, Allocation::zeros(11)), &com).unwrap();
        assert!(rep.passed);
        assert!(rep.thresholds.iter().all(Option::is_none));
    }

    #[test]
    fn threshold_midpoint_reported() {
        let com = Community::new(CommunityConfig::desk_default()).unwrap();
        let mut a = Allocation::zeros(11);
        a.periphery_to_periphery[0][1] = 3.0;
        a.periphery_to_periphery[0][2] = 3.0;
        let rep = check_threshold_following(&wrap(&com, a), &com).unwrap();
        assert!(rep.passed);
        // Followed down to p = 0.9; the best unfollowed has p = 0.85.
        let t = rep.thresholds[0].unwrap();
        assert!((t - 0.875).abs() < 1e-12);
    }

    #[test]
    fn center_monotone_detects_swapped_rates() {
        let (com, r) = default_solution();
        let mut a = r.allocation.clone();
        a.core_rates.swap(5, 0);
        let rep = check_center_monotone(&wrap(&com, a), &com).unwrap();
        assert!(!rep.passed);
        assert!(rep.witnesses.iter().any(|w| w.agents.contains(&5) && w.agents.contains(&0)));
    }

    #[test]
    fn center_monotone_two_agents_equality_binds() {
        let cfg = CommunityConfig {
            num_periphery: 2,
            ..CommunityConfig::desk_default()
        };
        let com = Community::new(cfg).unwrap();
        let mut a = Allocation::zeros(2);
        a.core_rates = vec![5.0, 5.0];
        a.periphery_to_core = vec![4.0, 4.0];
        assert!(check_center_monotone(&wrap(&com, a.clone()), &com).unwrap().passed);
        a.core_rates = vec![5.0, 6.0];
        assert!(!check_center_monotone(&wrap(&com, a), &com).unwrap().passed);
    }

    #[test]
    fn participation_detects_smaller_outer_outside_rate() {
        let (com, r) = default_solution();
        let mut a = r.allocation.clone();
        // Outer agent 0 now spends less outside than the center agent.
        a.outside[0] = 1.2;
        a.outside[5] = 3.0;
        let rep = check_participation_monotone(&wrap(&com, a), &com).unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn welfare_candidate_equal_to_equilibrium() {
        let (com, r) = default_solution();
        assert_eq!(com.potential(&r.allocation), r.potential());
        let rep = check_welfare_optimal(&r, &com, 50, 3).unwrap();
        assert!(rep.passed, "{:?}", rep.witnesses);
        assert!(rep.metric.unwrap() >= -WELFARE_TOL);
    }

    #[test]
    fn potential_exactness_on_default() {
        let (com, r) = default_solution();
        let rep = check_potential_exactness(&com, &r.allocation, 200, 11).unwrap();
        assert!(rep.passed);
        assert!(rep.metric.unwrap() <= POTENTIAL_IDENTITY_TOL);
    }

    #[test]
    fn checks_are_pure() {
        let (com, r) = default_solution();
        assert_eq!(check_threshold_following(&r, &com).unwrap(), check_threshold_following(&r, &com).unwrap());
        assert_eq!(check_welfare_optimal(&r, &com, 20, 1).unwrap(), check_welfare_optimal(&r, &com, 20, 1).unwrap());
    }
}
