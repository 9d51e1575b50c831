//! Parameter sweeps, budget-threshold grids and participation searches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnalysisError, PropertyId, PropertyReport, Result, Witness, EQUAL_TOL};
use crate::model::{Allocation, Community, CommunityConfig};
use crate::solver::{solve_equilibrium, EquilibriumResult, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Core budget.
    Mc,
    /// Periphery budget.
    Mp,
    /// Number of periphery agents.
    K,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Mc => "Mc",
            SweepParam::Mp => "Mp",
            SweepParam::K => "K",
        }
    }

    fn apply(self, template: &CommunityConfig, value: f64) -> Result<CommunityConfig> {
        let mut cfg = template.clone();
        match self {
            SweepParam::Mc => cfg.budget_core = value,
            SweepParam::Mp => cfg.budget_periphery = value,
            SweepParam::K => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(AnalysisError::InvalidInput(format!("K must be a positive integer, got {value}")));
                }
                cfg.num_periphery = value as usize;
            }
        }
        Ok(cfg)
    }
}

/// Equilibrium summary at one sweep value. Vectors are indexed by agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub potential: f64,
    pub fully_connected: bool,
    pub core_content_value: Vec<f64>,
    pub outside: Vec<f64>,
    pub participation: Vec<f64>,
    pub core_utility: Vec<f64>,
    pub core_rates: Vec<f64>,
    pub links_to_core: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub swept_parameter: SweepParam,
    pub values: Vec<f64>,
    pub records: Vec<SweepRecord>,
}

fn fully_connected(a: &Allocation) -> bool {
    a.core_rates.iter().zip(&a.periphery_to_core).all(|(&c, &l)| c > 0.0 && l > 0.0)
}

fn participates(a: &Allocation, y: usize) -> bool {
    a.periphery_to_core[y] > 0.0 || a.periphery_to_periphery[y].iter().any(|&r| r > 0.0)
}

fn summarize(value: f64, com: &Community, r: &EquilibriumResult) -> SweepRecord {
    let a = &r.allocation;
    let k = com.num_agents();
    let mp = com.config().budget_periphery;
    SweepRecord {
        value,
        converged: r.converged,
        iterations: r.iterations,
        potential: r.potential(),
        fully_connected: r.converged && fully_connected(a),
        core_content_value: (0..k).map(|y| com.core_content_value(y, &a.core_rates)).collect(),
        outside: a.outside.clone(),
        participation: a.outside.iter().map(|l| mp - l).collect(),
        core_utility: r.per_agent_utilities.iter().map(|u| u.via_core).collect(),
        core_rates: a.core_rates.clone(),
        links_to_core: a.periphery_to_core.clone(),
    }
}

fn solve_at(cfg: &CommunityConfig, options: &SolverOptions) -> Result<(Community, EquilibriumResult)> {
    let r = solve_equilibrium(cfg, options)?;
    Ok((Community::new(cfg.clone())?, r))
}

fn require_ascending(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!("{name} must be a nonempty list of finite values")));
    }
    if values.windows(2).any(|w| w[1] < w[0]) {
        return Err(AnalysisError::InvalidInput(format!("{name} must be ascending")));
    }
    Ok(())
}

/// Solves the equilibrium at every value of one parameter. Values are solved
/// concurrently; records keep the order of `values`.
pub fn sweep(template: &CommunityConfig, param: SweepParam, values: &[f64], options: &SolverOptions) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(AnalysisError::InvalidInput("sweep needs at least one value".into()));
    }
    let records = values
        .par_iter()
        .map(|&v| {
            let cfg = param.apply(template, v)?;
            let (com, r) = solve_at(&cfg, options)?;
            Ok(summarize(v, &com, &r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        swept_parameter: param,
        values: values.to_vec(),
        records,
    })
}

pub fn sweep_core_budget(template: &CommunityConfig, values: &[f64], options: &SolverOptions) -> Result<SweepResult> {
    require_ascending("core budget values", values)?;
    sweep(template, SweepParam::Mc, values, options)
}

/// Along an ascending core-budget sweep, the core content value of every
/// agent never falls and its outside rate never rises.
pub fn check_core_influence(sweep: &SweepResult, spacing: f64) -> Result<PropertyReport> {
    if sweep.swept_parameter != SweepParam::Mc {
        return Err(AnalysisError::InvalidInput("core influence needs a core budget sweep".into()));
    }
    require_ascending("core budget values", &sweep.values)?;
    let mut witnesses = Vec::new();
    if let Some(r) = sweep.records.iter().find(|r| !r.converged) {
        return Err(AnalysisError::InvalidInput(format!("sweep value {} did not converge", r.value)));
    }
    let mut worst = f64::INFINITY;
    for pair in sweep.records.windows(2) {
        let (lo, hi) = (&pair[0], &pair[1]);
        for y in 0..lo.outside.len() {
            let ds = hi.core_content_value[y] - lo.core_content_value[y];
            let dl = lo.outside[y] - hi.outside[y];
            worst = worst.min(ds).min(dl);
            if ds < -EQUAL_TOL {
                witnesses.push(Witness::new(
                    vec![y],
                    vec![lo.value, hi.value, lo.core_content_value[y], hi.core_content_value[y]],
                    "core content value fell as the core budget grew",
                ));
            }
            if dl < -EQUAL_TOL {
                witnesses.push(Witness::new(
                    vec![y],
                    vec![lo.value, hi.value, lo.outside[y], hi.outside[y]],
                    "outside rate rose as the core budget grew",
                ));
            }
        }
    }
    let mut report = PropertyReport::new(PropertyId::CoreInfluence, witnesses, spacing);
    report.metric = Some(worst);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCell {
    pub budget_core: f64,
    pub budget_periphery: f64,
    pub converged: bool,
    pub fully_connected: bool,
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearchResult {
    /// Smallest core budget with full connectivity at the largest periphery budget.
    pub m_c_hat: Option<f64>,
    /// Smallest periphery budget with full connectivity at the largest core budget.
    pub m_p_hat: Option<f64>,
    /// Row-major over the core grid, then the periphery grid.
    pub grid: Vec<ThresholdCell>,
    pub frontier_monotone: bool,
    /// Adjacent cells where connectivity is lost as a budget grows.
    pub frontier_violations: Vec<(usize, usize)>,
}

pub fn find_budget_thresholds(
    template: &CommunityConfig,
    mc_grid: &[f64],
    mp_grid: &[f64],
    options: &SolverOptions,
) -> Result<ThresholdSearchResult> {
    require_ascending("core budget grid", mc_grid)?;
    require_ascending("periphery budget grid", mp_grid)?;
    let (nc, np) = (mc_grid.len(), mp_grid.len());
    let grid = (0..nc * np)
        .into_par_iter()
        .map(|idx| {
            let mut cfg = template.clone();
            cfg.budget_core = mc_grid[idx / np];
            cfg.budget_periphery = mp_grid[idx % np];
            let r = solve_equilibrium(&cfg, options)?;
            Ok(ThresholdCell {
                budget_core: cfg.budget_core,
                budget_periphery: cfg.budget_periphery,
                converged: r.converged,
                fully_connected: r.converged && fully_connected(&r.allocation),
                potential: r.potential(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let at = |i: usize, j: usize| grid[i * np + j].fully_connected;
    let m_c_hat = (0..nc).find(|&i| at(i, np - 1)).map(|i| mc_grid[i]);
    let m_p_hat = (0..np).find(|&j| at(nc - 1, j)).map(|j| mp_grid[j]);
    let mut frontier_violations = Vec::new();
    for i in 0..nc {
        for j in 0..np {
            let lost_along_core = i + 1 < nc && at(i, j) && !at(i + 1, j);
            let lost_along_periphery = j + 1 < np && at(i, j) && !at(i, j + 1);
            if lost_along_core || lost_along_periphery {
                frontier_violations.push((i, j));
            }
        }
    }
    Ok(ThresholdSearchResult {
        m_c_hat,
        m_p_hat,
        frontier_monotone: frontier_violations.is_empty(),
        grid,
        frontier_violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationCell {
    pub budget_periphery: f64,
    pub converged: bool,
    pub participating: Vec<bool>,
    pub all_participate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationReport {
    /// Smallest grid budget at which every agent spends something inside the community.
    pub m_p_hat: Option<f64>,
    pub monotone: bool,
    pub cells: Vec<ParticipationCell>,
}

pub fn check_participation_sufficiency(
    template: &CommunityConfig,
    mp_grid: &[f64],
    options: &SolverOptions,
) -> Result<ParticipationReport> {
    require_ascending("periphery budget grid", mp_grid)?;
    let cells = mp_grid
        .par_iter()
        .map(|&mp| {
            let mut cfg = template.clone();
            cfg.budget_periphery = mp;
            let r = solve_equilibrium(&cfg, options)?;
            let participating: Vec<bool> = (0..cfg.num_periphery).map(|y| participates(&r.allocation, y)).collect();
            Ok(ParticipationCell {
                budget_periphery: mp,
                converged: r.converged,
                all_participate: r.converged && participating.iter().all(|&b| b),
                participating,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m_p_hat = cells.iter().find(|c| c.all_participate).map(|c| c.budget_periphery);
    let monotone = cells.windows(2).all(|w| !w[0].all_participate || w[1].all_participate);
    Ok(ParticipationReport { m_p_hat, monotone, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn repeated_core_budget_gives_identical_records() {
        let cfg = CommunityConfig::desk_default();
        let s = sweep_core_budget(&cfg, &[30.0, 30.0], &opts()).unwrap();
        assert_eq!(s.records[0], s.records[1]);
        assert_eq!(s.records.len(), s.values.len());
    }

    #[test]
    fn core_content_value_rises_with_core_budget() {
        let cfg = CommunityConfig::desk_default();
        let s = sweep_core_budget(&cfg, &[20.0, 50.0], &opts()).unwrap();
        for y in 0..11 {
            assert!(s.records[1].core_content_value[y] > s.records[0].core_content_value[y], "agent {y}");
        }
    }

    #[test]
    fn descending_values_rejected() {
        let cfg = CommunityConfig::desk_default();
        assert!(sweep_core_budget(&cfg, &[50.0, 20.0], &opts()).is_err());
        assert!(find_budget_thresholds(&cfg, &[2.0, 1.0], &[20.0], &opts()).is_err());
    }

    #[test]
    fn core_budget_below_floor_is_never_connected() {
        let cfg = CommunityConfig::desk_default();
        let r = find_budget_thresholds(&cfg, &[0.5, 50.0], &[20.0], &opts()).unwrap();
        assert!(!r.grid[0].fully_connected);
        assert!(r.grid[1].fully_connected);
        assert_eq!(r.m_c_hat, Some(50.0));
        assert_eq!(r.m_p_hat, Some(20.0));
    }

    #[test]
    fn participation_needs_the_floor() {
        let cfg = CommunityConfig::desk_default();
        let r = check_participation_sufficiency(&cfg, &[0.5, 20.0], &opts()).unwrap();
        assert!(r.cells[0].participating.iter().all(|&b| !b));
        assert!(r.cells[1].all_participate);
        assert_eq!(r.m_p_hat, Some(20.0));
        assert!(r.monotone);
    }

    #[test]
    fn k_sweep_rejects_fractions() {
        let cfg = CommunityConfig::desk_default();
        assert!(sweep(&cfg, SweepParam::K, &[2.5], &opts()).is_err());
        let s = sweep(&cfg, SweepParam::K, &[3.0, 5.0], &opts()).unwrap();
        assert_eq!(s.records[1].outside.len(), 5);
    }
}
