//! Community model: agent grid, interest kernel, utility rates and the exact potential.
//!
//! Periphery agents sit on a uniform grid over the topic interval
//! `[center - half_width, center + half_width]`. Every agent (the core and each
//! periphery agent) splits a rate budget over the sources it follows. A source
//! followed at rate `mu` is received with delay `1/mu`, which discounts its
//! value by `exp(-alpha/mu)`.
//!
//! All rates live in the restricted set `{0} ∪ [mu_floor, budget]`, where the
//! floor solves `exp(-alpha/mu_floor) = cost`. Below the floor a followed
//! source can never pay for its processing cost.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack used when testing membership of the restricted strategy set.
pub const STRATEGY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("rate {rate} outside strategy set {{0}} ∪ [{floor}, {budget}]")]
    StrategySpace { rate: f64, floor: f64, budget: f64 },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Linear interest kernel `f(d) = intercept - slope * d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterestKernel {
    pub intercept: f64,
    pub slope: f64,
}

impl InterestKernel {
    /// Kernel value at topic distance `distance` (no support check).
    pub fn at(&self, distance: f64) -> f64 {
        self.intercept - self.slope * distance
    }

    /// Checks `0 < f(diameter)` and `f(0) <= 1`.
    pub fn validate(&self, diameter: f64) -> Result<()> {
        if !(self.intercept > 0.0 && self.intercept <= 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "kernel intercept {} must lie in (0, 1]",
                self.intercept
            )));
        }
        if !(self.slope >= 0.0) || !self.slope.is_finite() {
            return Err(ModelError::InvalidConfig(format!(
                "kernel slope {} must be a nonnegative finite number",
                self.slope
            )));
        }
        let far = self.at(diameter);
        if !(far > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "kernel is not positive over the community diameter: f({diameter}) = {far}"
            )));
        }
        Ok(())
    }
}

/// Full parameterization of one community.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommunityConfig {
    pub num_periphery: usize,
    pub center: f64,
    pub half_width: f64,
    pub alpha: f64,
    pub cost: f64,
    pub rate_produce: f64,
    pub rate_outside: f64,
    pub interest_outside: f64,
    pub budget_core: f64,
    pub budget_periphery: f64,
    pub kernel: InterestKernel,
}

impl CommunityConfig {
    /// The reference configuration used throughout the tests and the shipped
    /// `configs/default.toml`: eleven agents on `[-1, 1]`.
    pub fn desk_default() -> Self {
        Self {
            num_periphery: 11,
            center: 0.0,
            half_width: 1.0,
            alpha: 1.0,
            cost: 0.4,
            rate_produce: 1.0,
            rate_outside: 1.0,
            interest_outside: 0.5,
            budget_core: 50.0,
            budget_periphery: 20.0,
            kernel: InterestKernel {
                intercept: 1.0,
                slope: 0.25,
            },
        }
    }

    /// Grid spacing `2 L / (K - 1)`; zero when fewer than two agents.
    pub fn spacing(&self) -> f64 {
        if self.num_periphery < 2 {
            0.0
        } else {
            2.0 * self.half_width / (self.num_periphery - 1) as f64
        }
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.half_width
    }

    /// Interest probability `p(x|y) = f(|x - y|)`, restricted to the kernel
    /// support `[0, 2 L]`.
    pub fn interest(&self, x: f64, y: f64) -> Result<f64> {
        let d = (x - y).abs();
        if !d.is_finite() {
            return Err(ModelError::InvalidInput(format!(
                "non-finite positions {x}, {y}"
            )));
        }
        // Positions are generated by accumulation; allow rounding at the edge.
        if d > self.diameter() * (1.0 + 1e-12) {
            return Err(ModelError::InvalidInput(format!(
                "distance {d} exceeds kernel support {}",
                self.diameter()
            )));
        }
        Ok(self.kernel.at(d))
    }

    /// Structural checks independent of the standing assumptions.
    pub fn validate(&self) -> Result<()> {
        if self.num_periphery < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "num_periphery must be at least 2, got {}",
                self.num_periphery
            )));
        }
        let positive = [
            ("half_width", self.half_width),
            ("alpha", self.alpha),
            ("rate_produce", self.rate_produce),
            ("rate_outside", self.rate_outside),
            ("budget_core", self.budget_core),
            ("budget_periphery", self.budget_periphery),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !self.center.is_finite() {
            return Err(ModelError::InvalidConfig("center must be finite".into()));
        }
        if !(self.cost > 0.0 && self.cost < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "cost must lie in (0, 1), got {}",
                self.cost
            )));
        }
        if !(0.0..=1.0).contains(&self.interest_outside) {
            return Err(ModelError::InvalidConfig(format!(
                "interest_outside must lie in [0, 1], got {}",
                self.interest_outside
            )));
        }
        self.kernel.validate(self.diameter())
    }
}

/// Positions `y_k = center - half_width + (k - 1) * spacing` for `k = 1..=K`.
pub fn build_community(config: &CommunityConfig) -> Result<Vec<f64>> {
    config.validate()?;
    Ok(grid_positions(config))
}

fn grid_positions(config: &CommunityConfig) -> Vec<f64> {
    let k = config.num_periphery;
    let lo = config.center - config.half_width;
    let delta = config.spacing();
    (0..k)
        .map(|i| {
            // Pin the last point to the interval edge instead of accumulating.
            if i + 1 == k {
                config.center + config.half_width
            } else {
                lo + i as f64 * delta
            }
        })
        .collect()
}

/// `exp(-alpha / rate)`, with the continuous limit 0 at `rate == 0`.
pub fn delay_factor(rate: f64, alpha: f64) -> f64 {
    if rate <= 0.0 {
        0.0
    } else {
        (-alpha / rate).exp()
    }
}

/// Rate floor `mu0 = alpha / ln(1/cost)`, i.e. `exp(-alpha/mu0) = cost`.
pub fn mu_floor(config: &CommunityConfig) -> Result<f64> {
    let bound = (-1.0f64).exp();
    if !(config.cost > bound) {
        return Err(ModelError::AssumptionViolation(format!(
            "cost {} must exceed e^-1 ≈ {bound:.6}",
            config.cost
        )));
    }
    if !(config.cost < 1.0) {
        return Err(ModelError::InvalidConfig(format!(
            "cost must be below 1, got {}",
            config.cost
        )));
    }
    Ok(config.alpha / (1.0 / config.cost).ln())
}

/// Joint strategy profile of the core and all periphery agents.
///
/// `periphery_to_periphery[y][z]` is the rate at which `y` follows `z`; the
/// diagonal is always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub core_rates: Vec<f64>,
    pub periphery_to_core: Vec<f64>,
    pub periphery_to_periphery: Vec<Vec<f64>>,
    pub outside: Vec<f64>,
}

impl Allocation {
    pub fn zeros(k: usize) -> Self {
        Self {
            core_rates: vec![0.0; k],
            periphery_to_core: vec![0.0; k],
            periphery_to_periphery: vec![vec![0.0; k]; k],
            outside: vec![0.0; k],
        }
    }

    pub fn num_agents(&self) -> usize {
        self.core_rates.len()
    }

    /// Total rate spent by periphery agent `y`.
    pub fn periphery_spend(&self, y: usize) -> f64 {
        self.periphery_to_core[y]
            + self.outside[y]
            + self.periphery_to_periphery[y].iter().sum::<f64>()
    }

    pub fn core_spend(&self) -> f64 {
        self.core_rates.iter().sum()
    }

    /// Periphery agent `y`'s rate vector as `(to_core, peers..., outside)`.
    pub fn periphery_vector(&self, y: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_agents() + 1);
        v.push(self.periphery_to_core[y]);
        v.extend(
            self.periphery_to_periphery[y]
                .iter()
                .enumerate()
                .filter(|&(z, _)| z != y)
                .map(|(_, &r)| r),
        );
        v.push(self.outside[y]);
        v
    }

    /// Inverse of [`Allocation::periphery_vector`].
    pub fn set_periphery_vector(&mut self, y: usize, v: &[f64]) {
        let k = self.num_agents();
        debug_assert_eq!(v.len(), k + 1);
        self.periphery_to_core[y] = v[0];
        let mut it = v[1..k].iter();
        for z in 0..k {
            self.periphery_to_periphery[y][z] = if z == y { 0.0 } else { *it.next().unwrap() };
        }
        self.outside[y] = v[k];
    }

    /// Largest absolute difference between any two corresponding rates.
    pub fn sup_distance(&self, other: &Allocation) -> f64 {
        let pairs = self
            .core_rates
            .iter()
            .zip(&other.core_rates)
            .chain(self.periphery_to_core.iter().zip(&other.periphery_to_core))
            .chain(self.outside.iter().zip(&other.outside))
            .chain(
                self.periphery_to_periphery
                    .iter()
                    .zip(&other.periphery_to_periphery)
                    .flat_map(|(a, b)| a.iter().zip(b)),
            );
        pairs.fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn all_rates(&self) -> impl Iterator<Item = f64> + '_ {
        self.core_rates
            .iter()
            .chain(&self.periphery_to_core)
            .chain(&self.outside)
            .chain(self.periphery_to_periphery.iter().flatten())
            .copied()
    }

    pub fn is_finite(&self) -> bool {
        self.all_rates().all(f64::is_finite)
    }
}

/// Per-source decomposition of one periphery agent's utility rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityBreakdown {
    pub via_core: f64,
    pub direct: f64,
    pub outside: f64,
    pub total: f64,
}

impl UtilityBreakdown {
    fn new(via_core: f64, direct: f64, outside: f64) -> Self {
        Self {
            via_core,
            direct,
            outside,
            total: via_core + direct + outside,
        }
    }

    /// Utility obtained from inside the community.
    pub fn community(&self) -> f64 {
        self.via_core + self.direct
    }
}

/// A validated configuration together with its agent grid, interest matrix
/// and rate floor.
#[derive(Debug, Clone)]
pub struct Community {
    config: CommunityConfig,
    positions: Vec<f64>,
    // interest[y][z] = p(z|y)
    interest: Vec<Vec<f64>>,
    mu_floor: f64,
}

impl Community {
    pub fn new(config: CommunityConfig) -> Result<Self> {
        config.validate()?;
        let mu_floor = mu_floor(&config)?;
        let positions = grid_positions(&config);
        let interest = positions
            .iter()
            .map(|&y| {
                positions
                    .iter()
                    .map(|&z| config.interest(z, y))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            positions,
            interest,
            mu_floor,
        })
    }

    pub fn config(&self) -> &CommunityConfig {
        &self.config
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn num_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn mu_floor(&self) -> f64 {
        self.mu_floor
    }

    /// `p(z|y)`: interest of agent `y` in content produced by agent `z`.
    pub fn p(&self, z: usize, y: usize) -> f64 {
        self.interest[y][z]
    }

    /// Distance of agent `y` from the community center.
    pub fn center_distance(&self, y: usize) -> f64 {
        (self.positions[y] - self.config.center).abs()
    }

    pub fn delay(&self, rate: f64) -> f64 {
        delay_factor(rate, self.config.alpha)
    }

    /// Checks `rate ∈ {0} ∪ [mu_floor, budget]` up to [`STRATEGY_TOL`].
    pub fn check_rate(&self, rate: f64, budget: f64) -> Result<()> {
        let slack = STRATEGY_TOL * budget.max(1.0);
        let ok = rate == 0.0 || (rate >= self.mu_floor - slack && rate <= budget + slack);
        if ok && rate.is_finite() {
            Ok(())
        } else {
            Err(ModelError::StrategySpace {
                rate,
                floor: self.mu_floor,
                budget,
            })
        }
    }

    /// `U_{C,p}(z|y)`: utility rate of `y` following `z` directly at `rate`.
    pub fn utility_direct(&self, y: usize, z: usize, rate: f64) -> Result<f64> {
        self.check_rate(rate, self.config.budget_periphery)?;
        Ok(self.direct_term(y, z, rate))
    }

    /// `U_{C,c}(z|y)`: utility rate of `y` receiving `z`'s content through the core.
    pub fn utility_via_core(&self, y: usize, z: usize, core_rate: f64, link_rate: f64) -> Result<f64> {
        self.check_rate(core_rate, self.config.budget_core)?;
        self.check_rate(link_rate, self.config.budget_periphery)?;
        Ok(self.via_core_term(y, z, core_rate, link_rate))
    }

    /// `U_0(y)`: utility rate from platforms outside the community.
    pub fn utility_outside(&self, rate: f64) -> Result<f64> {
        self.check_rate(rate, self.config.budget_periphery)?;
        Ok(self.outside_term(rate))
    }

    fn direct_term(&self, y: usize, z: usize, rate: f64) -> f64 {
        if rate > 0.0 {
            self.config.rate_produce * (self.p(z, y) * self.delay(rate) - self.config.cost)
        } else {
            0.0
        }
    }

    fn via_core_term(&self, y: usize, z: usize, core_rate: f64, link_rate: f64) -> f64 {
        if core_rate > 0.0 && link_rate > 0.0 {
            let a = self.config.alpha;
            let d = (-a / core_rate - a / link_rate).exp();
            self.config.rate_produce * (self.p(z, y) * d - self.config.cost)
        } else {
            0.0
        }
    }

    fn outside_term(&self, rate: f64) -> f64 {
        self.config.rate_outside * self.config.interest_outside * self.delay(rate)
    }

    /// `S(y|mu_c) = Σ_{z≠y} p(z|y) exp(-alpha/mu_c(z)) - c`.
    pub fn core_content_value(&self, y: usize, core_rates: &[f64]) -> f64 {
        self.core_reach(y, core_rates) - self.config.cost
    }

    /// `Σ_{z≠y} p(z|y) exp(-alpha/mu_c(z))`.
    pub(crate) fn core_reach(&self, y: usize, core_rates: &[f64]) -> f64 {
        core_rates
            .iter()
            .enumerate()
            .filter(|&(z, _)| z != y)
            .map(|(z, &r)| self.p(z, y) * self.delay(r))
            .sum()
    }

    /// Utility breakdown of periphery agent `y` under `alloc`.
    pub fn periphery_utility(&self, y: usize, alloc: &Allocation) -> UtilityBreakdown {
        let k = self.num_agents();
        let link = alloc.periphery_to_core[y];
        let mut via_core = 0.0;
        let mut direct = 0.0;
        for z in (0..k).filter(|&z| z != y) {
            via_core += self.via_core_term(y, z, alloc.core_rates[z], link);
            direct += self.direct_term(y, z, alloc.periphery_to_periphery[y][z]);
        }
        UtilityBreakdown::new(via_core, direct, self.outside_term(alloc.outside[y]))
    }

    /// Core objective: total utility periphery agents draw through the core.
    pub fn core_utility(&self, alloc: &Allocation) -> f64 {
        let k = self.num_agents();
        (0..k)
            .map(|y| {
                (0..k)
                    .filter(|&z| z != y)
                    .map(|z| self.via_core_term(y, z, alloc.core_rates[z], alloc.periphery_to_core[y]))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Exact potential `G`: the summed periphery utility.
    pub fn potential(&self, alloc: &Allocation) -> f64 {
        (0..self.num_agents())
            .map(|y| self.periphery_utility(y, alloc).total)
            .sum()
    }

    /// Checks every rate against the restricted strategy sets and budgets.
    pub fn validate_allocation(&self, alloc: &Allocation) -> Result<()> {
        let k = self.num_agents();
        let shape_ok = alloc.core_rates.len() == k
            && alloc.periphery_to_core.len() == k
            && alloc.outside.len() == k
            && alloc.periphery_to_periphery.len() == k
            && alloc.periphery_to_periphery.iter().all(|row| row.len() == k);
        if !shape_ok {
            return Err(ModelError::InvalidInput(format!(
                "allocation shape does not match {k} agents"
            )));
        }
        let mc = self.config.budget_core;
        let mp = self.config.budget_periphery;
        for &r in &alloc.core_rates {
            self.check_rate(r, mc)?;
        }
        if alloc.core_spend() > mc * (1.0 + STRATEGY_TOL) {
            return Err(ModelError::InvalidInput(format!(
                "core spends {} over budget {mc}",
                alloc.core_spend()
            )));
        }
        for y in 0..k {
            if alloc.periphery_to_periphery[y][y] != 0.0 {
                return Err(ModelError::InvalidInput(format!(
                    "agent {y} follows itself"
                )));
            }
            for r in alloc.periphery_vector(y) {
                self.check_rate(r, mp)?;
            }
            if alloc.periphery_spend(y) > mp * (1.0 + STRATEGY_TOL) {
                return Err(ModelError::InvalidInput(format!(
                    "agent {y} spends {} over budget {mp}",
                    alloc.periphery_spend(y)
                )));
            }
        }
        Ok(())
    }

    /// `Σ_{z≠y} p(y|z)`: how interesting `y`'s production is to the community.
    pub fn production_interest(&self, y: usize) -> f64 {
        (0..self.num_agents())
            .filter(|&z| z != y)
            .map(|z| self.p(y, z))
            .sum()
    }

    /// `Σ_{z≠y} p(z|y)`: how interested `y` is in the community's production.
    pub fn consumption_interest(&self, y: usize) -> f64 {
        (0..self.num_agents())
            .filter(|&z| z != y)
            .map(|z| self.p(z, y))
            .sum()
    }
}

/// Per-agent sums entering the positive-utility assumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSums {
    pub agent: usize,
    pub position: f64,
    /// `Σ_{z≠y} [p(z|y) - c]`
    pub consumption: f64,
    /// `Σ_{z≠y} [p(y|z) - c]`
    pub production: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub passed: bool,
    pub cost: f64,
    /// `e^-1`; the cost must exceed it.
    pub cost_bound: f64,
    pub cost_ok: bool,
    pub per_agent: Vec<AgentSums>,
    pub failing_agents: Vec<usize>,
    pub notes: Vec<String>,
}

/// Evaluates the standing assumptions: positive aggregate interest for every
/// agent in both directions, and `cost > e^-1`.
pub fn validate_assumptions(config: &CommunityConfig) -> AssumptionReport {
    let cost_bound = (-1.0f64).exp();
    let cost_ok = config.cost > cost_bound;
    let mut notes = Vec::new();
    if !cost_ok {
        notes.push(format!(
            "cost {} does not exceed e^-1 ≈ {cost_bound:.6}",
            config.cost
        ));
    }
    if let Err(e) = config.validate() {
        notes.push(e.to_string());
        return AssumptionReport {
            passed: false,
            cost: config.cost,
            cost_bound,
            cost_ok,
            per_agent: Vec::new(),
            failing_agents: Vec::new(),
            notes,
        };
    }
    let positions = grid_positions(config);
    let c = config.cost;
    let per_agent: Vec<AgentSums> = positions
        .iter()
        .enumerate()
        .map(|(y, &py)| {
            let others = positions.iter().enumerate().filter(|&(z, _)| z != y);
            // The kernel is symmetric, so both directions read the same distances;
            // they are still summed separately to mirror the two conditions.
            let consumption = others
                .clone()
                .map(|(_, &pz)| config.kernel.at((pz - py).abs()) - c)
                .sum();
            let production = others
                .map(|(_, &pz)| config.kernel.at((py - pz).abs()) - c)
                .sum();
            AgentSums {
                agent: y,
                position: py,
                consumption,
                production,
            }
        })
        .collect();
    let failing_agents: Vec<usize> = per_agent
        .iter()
        .filter(|s| !(s.consumption > 0.0 && s.production > 0.0))
        .map(|s| s.agent)
        .collect();
    if !failing_agents.is_empty() {
        notes.push(format!(
            "aggregate interest not positive for agents {failing_agents:?}"
        ));
    }
    AssumptionReport {
        passed: cost_ok && failing_agents.is_empty(),
        cost: c,
        cost_bound,
        cost_ok,
        per_agent,
        failing_agents,
        notes,
    }
}
