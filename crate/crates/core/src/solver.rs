//! Best responses and best-response dynamics.
//!
//! Every agent faces the same kind of problem: a set of sources, each worth
//! `gain * exp(-alpha/rate) - fixed_cost` when followed at a positive rate,
//! and a budget to split over them with every active rate in
//! `[mu_floor, budget]`. For a fixed support the problem is concave and is
//! solved by water-filling on the shared KKT multiplier. The fixed costs make
//! support selection combinatorial; sources with the same fixed cost are
//! interchangeable up to their gain, so only gain-ordered prefixes of each
//! cost class need to be tried.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_assumptions, Allocation, AssumptionReport, Community, CommunityConfig, ModelError,
    UtilityBreakdown,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("configuration violates the standing assumptions: {}", .0.notes.join("; "))]
    Assumptions(Box<AssumptionReport>),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("support of {size} sources needs {needed} but the budget is {budget}")]
    InfeasibleSupport { size: usize, needed: f64, budget: f64 },
    #[error("invalid solver options: {0}")]
    Options(String),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Core follows every agent at the rate floor; periphery best-responds.
    #[default]
    UniformFloor,
    /// Core and periphery spread their budgets evenly over all sources.
    UniformBudget,
    /// Random feasible allocation drawn from `seed`.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Relative bracket width at which the water-fill multiplier search stops.
    pub multiplier_tol: f64,
    /// Tolerance for per-rate marginal inversion and budget residuals.
    pub rate_tol: f64,
    /// Sup-norm allocation change below which a sweep counts as converged.
    pub convergence_tol: f64,
    /// Largest tolerated decrease of the potential along the dynamics.
    pub potential_tol: f64,
    pub max_iterations: usize,
    pub init_mode: InitMode,
    /// Seed for [`InitMode::Random`].
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            multiplier_tol: 1e-10,
            rate_tol: 1e-10,
            convergence_tol: 1e-8,
            potential_tol: 1e-12,
            max_iterations: 10_000,
            init_mode: InitMode::UniformFloor,
            seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let tols = [
            ("multiplier_tol", self.multiplier_tol),
            ("rate_tol", self.rate_tol),
            ("convergence_tol", self.convergence_tol),
            ("potential_tol", self.potential_tol),
        ];
        for (name, v) in tols {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolverError::Options(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(SolverError::Options("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// A strictly decreasing marginal-value function on the active rate range.
pub trait Marginal {
    fn at(&self, rate: f64) -> f64;

    /// Rate in `[lo, hi]` where the marginal equals `level`. Callers guarantee
    /// `at(hi) < level < at(lo)`.
    fn inverse(&self, level: f64, lo: f64, hi: f64, tol: f64) -> f64 {
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= tol * hi.max(1.0) || mid <= lo || mid >= hi {
                break;
            }
            if self.at(mid) > level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Derivative of the marginal with respect to the rate, when known in
    /// closed form. Lets [`water_fill`] take Newton steps on the multiplier.
    fn slope(&self, _rate: f64) -> Option<f64> {
        None
    }
}

impl<F: Fn(f64) -> f64> Marginal for F {
    fn at(&self, rate: f64) -> f64 {
        self(rate)
    }
}

/// Marginal of `gain * exp(-alpha/rate)`: `gain * alpha / rate^2 * exp(-alpha/rate)`.
///
/// Decreasing for `rate > alpha/2`, which covers every rate at or above the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayMarginal {
    pub gain: f64,
    pub alpha: f64,
}

impl Marginal for DelayMarginal {
    fn at(&self, rate: f64) -> f64 {
        let u = self.alpha / rate;
        self.gain * u * u * (-u).exp() / self.alpha
    }

    fn inverse(&self, level: f64, lo: f64, hi: f64, _tol: f64) -> f64 {
        // With u = alpha/rate the condition reads u^2 e^{-u} = k, i.e.
        // 2 ln u - u = ln k on (0, 2). That map is increasing and concave, and
        // sqrt(k) lies left of the root, so Newton climbs monotonically.
        let k = level * self.alpha / self.gain;
        let target = k.ln();
        let mut u = k.sqrt();
        for _ in 0..100 {
            let g = 2.0 * u.ln() - u - target;
            let step = g / (2.0 / u - 1.0);
            let next = u - step;
            if !(next > 0.0) {
                break;
            }
            let done = (next - u).abs() <= 4.0 * f64::EPSILON * next;
            u = next;
            if done {
                break;
            }
        }
        (self.alpha / u).clamp(lo, hi)
    }

    fn slope(&self, rate: f64) -> Option<f64> {
        Some(self.at(rate) * (self.alpha / rate - 2.0) / rate)
    }
}

/// Splits `budget` over sources by equalizing marginals.
///
/// Each source receives the rate where its marginal equals a common
/// multiplier, clamped to `[floor, cap]`. The multiplier is bracketed by
/// `[0, max marginal at floor]` and located by Newton steps safeguarded by
/// bisection; the remaining budget residual
/// is then spread over unclamped sources so the rates sum to
/// `min(budget, n * cap)`.
pub fn water_fill<M: Marginal>(
    marginals: &[M],
    budget: f64,
    floor: f64,
    cap: f64,
    options: &SolverOptions,
) -> Result<Vec<f64>> {
    let n = marginals.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if !(budget.is_finite() && floor.is_finite() && cap.is_finite()) || floor <= 0.0 || cap < floor {
        return Err(SolverError::InvalidInput(format!(
            "water_fill bounds: budget {budget}, floor {floor}, cap {cap}"
        )));
    }
    let needed = n as f64 * floor;
    if needed > budget * (1.0 + 1e-12) {
        return Err(SolverError::InfeasibleSupport {
            size: n,
            needed,
            budget,
        });
    }
    if n as f64 * cap <= budget {
        return Ok(vec![cap; n]);
    }
    if n == 1 {
        return Ok(vec![budget.clamp(floor, cap)]);
    }
    let top: Vec<f64> = marginals.iter().map(|m| m.at(floor)).collect();
    let bottom: Vec<f64> = marginals.iter().map(|m| m.at(cap)).collect();
    let rates_at = |nu: f64| -> Vec<f64> {
        marginals
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if nu >= top[i] {
                    floor
                } else if nu <= bottom[i] {
                    cap
                } else {
                    m.inverse(nu, floor, cap, options.rate_tol)
                }
            })
            .collect()
    };
    let target = budget;
    let mut lo = 0.0;
    let mut hi = top.iter().cloned().fold(0.0, f64::max);
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..400 {
        if hi - lo <= options.multiplier_tol * hi {
            break;
        }
        let rates = rates_at(nu);
        let total: f64 = rates.iter().sum();
        if total > target {
            lo = nu;
        } else {
            hi = nu;
        }
        if (total - target).abs() <= options.rate_tol * target {
            break;
        }
        // Newton on the multiplier through the unclamped sources, falling
        // back to bisection when the step leaves the bracket.
        let mut d_total = 0.0;
        let mut smooth = true;
        for (i, m) in marginals.iter().enumerate() {
            if nu < top[i] && nu > bottom[i] {
                match m.slope(rates[i]) {
                    Some(d) if d < 0.0 => d_total += 1.0 / d,
                    _ => smooth = false,
                }
            }
        }
        let newton = nu - (total - target) / d_total;
        nu = if smooth && d_total < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if nu <= lo || nu >= hi {
            break;
        }
    }
    let mut rates = rates_at(nu);
    for _ in 0..4 {
        let residual = target - rates.iter().sum::<f64>();
        if residual.abs() <= f64::EPSILON * target {
            break;
        }
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                if residual > 0.0 {
                    rates[i] < cap
                } else {
                    rates[i] > floor
                }
            })
            .collect();
        if free.is_empty() {
            break;
        }
        let share = residual / free.len() as f64;
        for i in free {
            rates[i] = (rates[i] + share).clamp(floor, cap);
        }
    }
    Ok(rates)
}

/// One followable source of a best-response problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub gain: f64,
    pub fixed_cost: f64,
}

impl Source {
    pub fn value(&self, rate: f64, alpha: f64) -> f64 {
        if rate > 0.0 {
            self.gain * (-alpha / rate).exp() - self.fixed_cost
        } else {
            0.0
        }
    }

    pub fn marginal(&self, rate: f64, alpha: f64) -> f64 {
        DelayMarginal {
            gain: self.gain,
            alpha,
        }
        .at(rate)
    }
}

/// Total value of `rates` over `sources`.
pub fn objective(sources: &[Source], rates: &[f64], alpha: f64) -> f64 {
    sources.iter().zip(rates).map(|(s, &r)| s.value(r, alpha)).sum()
}

/// Optimal rates for the given support, or `None` if it cannot be afforded.
fn fill_support(
    sources: &[Source],
    support: &[usize],
    budget: f64,
    alpha: f64,
    floor: f64,
    options: &SolverOptions,
) -> Result<Option<Vec<f64>>> {
    let mut rates = vec![0.0; sources.len()];
    if support.is_empty() {
        return Ok(Some(rates));
    }
    if support.len() as f64 * floor > budget * (1.0 + 1e-12) {
        return Ok(None);
    }
    let marginals: Vec<DelayMarginal> = support
        .iter()
        .map(|&i| DelayMarginal {
            gain: sources[i].gain,
            alpha,
        })
        .collect();
    let filled = water_fill(&marginals, budget, floor, budget, options)?;
    for (&i, r) in support.iter().zip(filled) {
        rates[i] = r;
    }
    Ok(Some(rates))
}

/// Maximizes `Σ value_i(rate_i)` subject to `Σ rate_i <= budget` and each rate
/// in `{0} ∪ [floor, budget]`.
///
/// Sources are grouped by fixed cost. Within a group, a higher-gain source
/// dominates a lower-gain one at any rate, so an optimal support takes a
/// gain-ordered prefix of every group. All prefix combinations that fit the
/// budget are water-filled and the best is kept; ties go to the combination
/// enumerated first, which favors smaller supports.
pub fn best_response(
    sources: &[Source],
    budget: f64,
    alpha: f64,
    floor: f64,
    options: &SolverOptions,
) -> Result<Vec<f64>> {
    let finite = sources.iter().all(|s| s.gain.is_finite() && s.fixed_cost.is_finite());
    if !finite || !budget.is_finite() || !alpha.is_finite() || !floor.is_finite() {
        return Err(SolverError::InvalidInput("non-finite best-response input".into()));
    }
    let n = sources.len();
    if budget < floor || n == 0 {
        return Ok(vec![0.0; n]);
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, s) in sources.iter().enumerate() {
        groups.entry(s.fixed_cost.to_bits()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups
        .into_values()
        .map(|mut g| {
            g.sort_by(|&a, &b| sources[b].gain.total_cmp(&sources[a].gain).then(a.cmp(&b)));
            g
        })
        .collect();
    let max_active = ((budget / floor) * (1.0 + 1e-12)).floor() as usize;

    let mut best_rates = vec![0.0; n];
    let mut best_value = 0.0;
    let mut counts = vec![0usize; groups.len()];
    loop {
        // Advance the odometer; the all-zero start is the empty support.
        let mut g = 0;
        loop {
            if g == groups.len() {
                return Ok(best_rates);
            }
            counts[g] += 1;
            if counts[g] <= groups[g].len() && counts.iter().sum::<usize>() <= max_active {
                break;
            }
            counts[g] = 0;
            g += 1;
        }
        let support: Vec<usize> = groups
            .iter()
            .zip(&counts)
            .flat_map(|(grp, &c)| grp[..c].iter().copied())
            .collect();
        if let Some(rates) = fill_support(sources, &support, budget, alpha, floor, options)? {
            let value = objective(sources, &rates, alpha);
            if value > best_value {
                best_value = value;
                best_rates = rates;
            }
        }
    }
}

/// Largest objective improvement available by adding, dropping or swapping a
/// single source of `rates`' support and re-water-filling. Non-positive (up
/// to rounding) at a best response.
pub fn support_swap_gain(
    sources: &[Source],
    rates: &[f64],
    budget: f64,
    alpha: f64,
    floor: f64,
    options: &SolverOptions,
) -> Result<f64> {
    let current = objective(sources, rates, alpha);
    let support: Vec<usize> = (0..sources.len()).filter(|&i| rates[i] > 0.0).collect();
    let outside: Vec<usize> = (0..sources.len()).filter(|&i| rates[i] <= 0.0).collect();
    let mut candidates: Vec<Vec<usize>> = vec![support.clone()];
    for &j in &outside {
        let mut s = support.clone();
        s.push(j);
        candidates.push(s);
    }
    for (pos, _) in support.iter().enumerate() {
        let mut dropped = support.clone();
        dropped.remove(pos);
        for &j in &outside {
            let mut s = dropped.clone();
            s.push(j);
            candidates.push(s);
        }
        candidates.push(dropped);
    }
    let mut best = f64::NEG_INFINITY;
    for s in candidates {
        if let Some(r) = fill_support(sources, &s, budget, alpha, floor, options)? {
            best = best.max(objective(sources, &r, alpha) - current);
        }
    }
    Ok(best)
}

/// Sources of the core's problem: one per periphery agent `z`, valued by
/// every agent that follows the core.
pub fn core_sources(community: &Community, alloc: &Allocation) -> Vec<Source> {
    let cfg = community.config();
    let k = community.num_agents();
    let links: Vec<f64> = alloc
        .periphery_to_core
        .iter()
        .map(|&r| community.delay(r))
        .collect();
    (0..k)
        .map(|z| {
            let mut reach = 0.0;
            let mut followers = 0usize;
            for y in (0..k).filter(|&y| y != z) {
                reach += community.p(z, y) * links[y];
                if alloc.periphery_to_core[y] > 0.0 {
                    followers += 1;
                }
            }
            Source {
                gain: cfg.rate_produce * reach,
                fixed_cost: cfg.rate_produce * cfg.cost * followers as f64,
            }
        })
        .collect()
}

/// Sources of periphery agent `y`, ordered as in [`Allocation::periphery_vector`]:
/// the core, every other agent, then outside platforms.
pub fn periphery_sources(community: &Community, y: usize, core_rates: &[f64]) -> Vec<Source> {
    let cfg = community.config();
    let k = community.num_agents();
    let followed = (0..k).filter(|&z| z != y && core_rates[z] > 0.0).count();
    let mut out = Vec::with_capacity(k + 1);
    out.push(Source {
        gain: cfg.rate_produce * community.core_reach(y, core_rates),
        fixed_cost: cfg.rate_produce * cfg.cost * followed as f64,
    });
    for z in (0..k).filter(|&z| z != y) {
        out.push(Source {
            gain: cfg.rate_produce * community.p(z, y),
            fixed_cost: cfg.rate_produce * cfg.cost,
        });
    }
    out.push(Source {
        gain: cfg.rate_outside * cfg.interest_outside,
        fixed_cost: 0.0,
    });
    out
}

fn check_finite(alloc: &Allocation) -> Result<()> {
    if alloc.is_finite() {
        Ok(())
    } else {
        Err(SolverError::InvalidInput("allocation contains non-finite rates".into()))
    }
}

/// Core rate vector maximizing the core objective against fixed periphery rates.
pub fn best_response_core(
    community: &Community,
    alloc: &Allocation,
    options: &SolverOptions,
) -> Result<Vec<f64>> {
    check_finite(alloc)?;
    let cfg = community.config();
    best_response(
        &core_sources(community, alloc),
        cfg.budget_core,
        cfg.alpha,
        community.mu_floor(),
        options,
    )
}

/// Periphery agent `y`'s best rate vector `(to_core, peers..., outside)`
/// against fixed core rates.
pub fn best_response_periphery(
    community: &Community,
    y: usize,
    core_rates: &[f64],
    options: &SolverOptions,
) -> Result<Vec<f64>> {
    if !core_rates.iter().all(|r| r.is_finite()) {
        return Err(SolverError::InvalidInput("core rates contain non-finite values".into()));
    }
    if y >= community.num_agents() || core_rates.len() != community.num_agents() {
        return Err(SolverError::InvalidInput(format!("agent {y} / core rate shape mismatch")));
    }
    let cfg = community.config();
    best_response(
        &periphery_sources(community, y, core_rates),
        cfg.budget_periphery,
        cfg.alpha,
        community.mu_floor(),
        options,
    )
}

/// Draws rates for `n` sources: a uniformly random support that fits the
/// budget, a uniform total spend, and symmetric Dirichlet shares of the spend
/// above the floor. Returns zeros if no nonempty support was drawn within
/// 100 attempts.
pub fn random_rates<R: Rng>(rng: &mut R, n: usize, budget: f64, floor: f64) -> Vec<f64> {
    let mut rates = vec![0.0; n];
    if budget < floor || n == 0 {
        return rates;
    }
    for _ in 0..100 {
        let support: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        let m = support.len();
        if m == 0 || m as f64 * floor > budget {
            continue;
        }
        let base = m as f64 * floor;
        let spend = base + rng.random::<f64>() * (budget - base);
        let weights: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = weights.iter().sum();
        for (&i, w) in support.iter().zip(&weights) {
            rates[i] = floor + (spend - base) * w / total;
        }
        return rates;
    }
    rates
}

/// A random allocation inside the restricted strategy space.
pub fn random_allocation<R: Rng>(community: &Community, rng: &mut R) -> Allocation {
    let k = community.num_agents();
    let cfg = community.config();
    let floor = community.mu_floor();
    let mut alloc = Allocation::zeros(k);
    alloc.core_rates = random_rates(rng, k, cfg.budget_core, floor);
    for y in 0..k {
        let v = random_rates(rng, k + 1, cfg.budget_periphery, floor);
        alloc.set_periphery_vector(y, &v);
    }
    alloc
}

/// Evenly spread `budget` over up to `n` sources, nearest-first in `order`,
/// using as many sources as `rate` (at least the floor) allows.
fn spread(order: &[usize], n: usize, budget: f64, rate: f64, floor: f64) -> Vec<f64> {
    let mut rates = vec![0.0; n];
    if budget < floor {
        return rates;
    }
    let rate = rate.max(floor);
    let count = ((budget / rate).floor() as usize).min(order.len()).max(1);
    let each = if count == order.len() { budget / count as f64 } else { rate };
    for &i in &order[..count] {
        rates[i] = each.min(budget);
    }
    rates
}

fn center_order(community: &Community) -> Vec<usize> {
    let mut order: Vec<usize> = (0..community.num_agents()).collect();
    order.sort_by(|&a, &b| {
        community
            .center_distance(a)
            .total_cmp(&community.center_distance(b))
            .then(a.cmp(&b))
    });
    order
}

/// Starting allocation for the dynamics.
pub fn initial_allocation(community: &Community, options: &SolverOptions) -> Result<Allocation> {
    let k = community.num_agents();
    let cfg = community.config();
    let floor = community.mu_floor();
    match options.init_mode {
        InitMode::UniformFloor => {
            let mut alloc = Allocation::zeros(k);
            let order = center_order(community);
            let mut rates = vec![0.0; k];
            let affordable = ((cfg.budget_core / floor) * (1.0 + 1e-12)).floor() as usize;
            for &y in order.iter().take(affordable.min(k)) {
                rates[y] = floor;
            }
            alloc.core_rates = rates;
            respond_periphery(community, &mut alloc, options)?;
            Ok(alloc)
        }
        InitMode::UniformBudget => {
            let mut alloc = Allocation::zeros(k);
            let order = center_order(community);
            alloc.core_rates =
                spread(&order, k, cfg.budget_core, cfg.budget_core / k as f64, floor);
            let p_order: Vec<usize> = (0..=k).collect();
            for y in 0..k {
                let v = spread(
                    &p_order,
                    k + 1,
                    cfg.budget_periphery,
                    cfg.budget_periphery / (k + 1) as f64,
                    floor,
                );
                alloc.set_periphery_vector(y, &v);
            }
            Ok(alloc)
        }
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            Ok(random_allocation(community, &mut rng))
        }
    }
}

/// Replaces every periphery agent's rates by its best response to the
/// current core rates. Responses are independent given the core rates.
fn respond_periphery(
    community: &Community,
    alloc: &mut Allocation,
    options: &SolverOptions,
) -> Result<()> {
    let core = alloc.core_rates.clone();
    let responses: Vec<Vec<f64>> = (0..community.num_agents())
        .into_par_iter()
        .map(|y| best_response_periphery(community, y, &core, options))
        .collect::<Result<_>>()?;
    for (y, v) in responses.iter().enumerate() {
        alloc.set_periphery_vector(y, v);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub allocation: Allocation,
    /// Potential of the starting allocation followed by its value after every
    /// half-step (core update, then periphery update).
    pub potential_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Sup-norm change over the last sweep.
    pub final_step: f64,
    pub per_agent_utilities: Vec<UtilityBreakdown>,
    pub core_objective: f64,
    pub mu_floor: f64,
    /// Start the reported run began from.
    pub start: Start,
    /// Every run attempted, in order.
    pub starts: Vec<StartRecord>,
}

impl EquilibriumResult {
    /// Packages an allocation with its utilities. Used by the dynamics and to
    /// wrap hand-built allocations for the structural checks.
    pub fn assemble(
        community: &Community,
        allocation: Allocation,
        potential_trace: Vec<f64>,
        iterations: usize,
        converged: bool,
        final_step: f64,
    ) -> Self {
        let per_agent_utilities = (0..community.num_agents())
            .map(|y| community.periphery_utility(y, &allocation))
            .collect();
        let core_objective = community.core_utility(&allocation);
        Self {
            allocation,
            potential_trace,
            iterations,
            converged,
            final_step,
            per_agent_utilities,
            core_objective,
            mu_floor: community.mu_floor(),
            start: Start::Configured,
            starts: Vec::new(),
        }
    }

    pub fn potential(&self) -> f64 {
        self.per_agent_utilities.iter().map(|u| u.total).sum()
    }

    /// Largest single decrease along the potential trace (0 if monotone).
    pub fn largest_potential_drop(&self) -> f64 {
        self.potential_trace
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(0.0, f64::max)
    }
}

/// Validates the assumptions and computes the potential-maximizing equilibrium.
pub fn solve_equilibrium(config: &CommunityConfig, options: &SolverOptions) -> Result<EquilibriumResult> {
    let report = validate_assumptions(config);
    if !report.passed {
        return Err(SolverError::Assumptions(Box::new(report)));
    }
    let community = Community::new(config.clone())?;
    solve_community(&community, options)
}

/// Which starting allocation a run of the dynamics began from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Start {
    /// The initialization selected by [`SolverOptions::init_mode`].
    Configured,
    /// Core spreads its budget evenly over every agent; periphery best-responds.
    Spread,
    /// Core best-responds to the `width` agents nearest the center following
    /// it at `link_fraction` of the periphery budget; periphery best-responds.
    Linked { link_fraction: f64, width: usize },
}

/// Link fractions tried by [`Start::Linked`].
pub const LINK_FRACTIONS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub start: Start,
    pub potential: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Runs the dynamics from the configured initialization and from a set of
/// activated starts, and keeps the converged equilibrium with the largest
/// potential (the configured run wins ties).
///
/// Equilibria in which the core follows nobody and nobody follows the core are
/// stable under unilateral deviation: a core without followers is indifferent
/// over its rates, and following a core that follows nobody is worthless. The
/// activated starts put the core to work before the periphery responds, which
/// leaves that basin.
pub fn solve_community(community: &Community, options: &SolverOptions) -> Result<EquilibriumResult> {
    options.validate()?;
    let starts = start_list(community);
    let runs: Vec<EquilibriumResult> = starts
        .par_iter()
        .map(|&start| {
            let init = start_allocation(community, start, options)?;
            let mut r = run_dynamics(community, init, options)?;
            r.start = start;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let records: Vec<StartRecord> = runs
        .iter()
        .map(|r| StartRecord {
            start: r.start,
            potential: r.potential(),
            converged: r.converged,
            iterations: r.iterations,
        })
        .collect();
    let mut best = 0;
    for (i, r) in runs.iter().enumerate().skip(1) {
        let b = &runs[best];
        let wins = match (r.converged, b.converged) {
            (true, false) => true,
            (false, true) => false,
            _ => r.potential() > b.potential() + options.potential_tol * (1.0 + b.potential().abs()),
        };
        if wins {
            best = i;
        }
    }
    let mut chosen = runs.into_iter().nth(best).expect("at least one start");
    chosen.starts = records;
    Ok(chosen)
}

/// Every start tried by [`solve_community`], in tie-breaking order. Linked
/// windows grow one center-distance level at a time so symmetric pairs enter
/// together.
pub fn start_list(community: &Community) -> Vec<Start> {
    let order = center_order(community);
    let mut widths = Vec::new();
    for w in 1..=order.len() {
        let closes_level = w == order.len()
            || community.center_distance(order[w]) > community.center_distance(order[w - 1]) + 1e-12;
        if closes_level {
            widths.push(w);
        }
    }
    let mut starts = vec![Start::Configured, Start::Spread];
    for &width in widths.iter().rev() {
        starts.extend(LINK_FRACTIONS.iter().map(|&link_fraction| Start::Linked { link_fraction, width }));
    }
    starts
}

/// Starting allocation for one run of the dynamics.
pub fn start_allocation(community: &Community, start: Start, options: &SolverOptions) -> Result<Allocation> {
    let k = community.num_agents();
    let cfg = community.config();
    let mut alloc = Allocation::zeros(k);
    match start {
        Start::Configured => return initial_allocation(community, options),
        Start::Spread => {
            alloc.core_rates = spread(
                &center_order(community),
                k,
                cfg.budget_core,
                cfg.budget_core / k as f64,
                community.mu_floor(),
            );
        }
        Start::Linked { link_fraction, width } => {
            let link = (link_fraction * cfg.budget_periphery).max(community.mu_floor());
            let mut hypothetical = Allocation::zeros(k);
            for &y in center_order(community).iter().take(width) {
                hypothetical.periphery_to_core[y] = link;
            }
            alloc.core_rates = best_response_core(community, &hypothetical, options)?;
        }
    }
    respond_periphery(community, &mut alloc, options)?;
    Ok(alloc)
}

/// Sequential best-response dynamics: the core updates, then every periphery
/// agent, until a sweep moves no rate by more than `convergence_tol`.
pub fn run_dynamics(
    community: &Community,
    init: Allocation,
    options: &SolverOptions,
) -> Result<EquilibriumResult> {
    options.validate()?;
    community.validate_allocation(&init)?;
    let mut alloc = init;
    let mut trace = vec![community.potential(&alloc)];
    let mut converged = false;
    let mut iterations = 0;
    let mut step = f64::INFINITY;
    while iterations < options.max_iterations {
        iterations += 1;
        let prev = alloc.clone();
        alloc.core_rates = best_response_core(community, &alloc, options)?;
        trace.push(community.potential(&alloc));
        respond_periphery(community, &mut alloc, options)?;
        trace.push(community.potential(&alloc));
        step = alloc.sup_distance(&prev);
        if step < options.convergence_tol {
            converged = true;
            break;
        }
    }
    Ok(EquilibriumResult::assemble(
        community, alloc, trace, iterations, converged, step,
    ))
}
