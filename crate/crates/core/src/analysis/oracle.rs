//! Exhaustive grid search for the potential maximizer on tiny communities.
//!
//! Rates live on `{0} ∪ {mu0 + j h}`. The potential splits into one term per
//! periphery agent, and given the core rates each agent's term depends only
//! on its own vector, so the search enumerates core tuples and solves every
//! agent's part from precomputed tables. Rounding every active rate of the
//! true maximizer down to the grid keeps it feasible and costs at most
//! `sum_i L_i h_i`, where `L_i` bounds the partial derivative on `[mu0, inf)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};
use crate::model::{Allocation, Community, CommunityConfig};

pub const ORACLE_MAX_AGENTS: usize = 3;
pub const ORACLE_MAX_STEPS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub allocation: Allocation,
    pub potential: f64,
    pub grid_steps: usize,
    pub core_spacing: f64,
    pub periphery_spacing: f64,
    /// Upper bound on how far the grid maximum can sit below the true maximum.
    pub lipschitz_bound: f64,
    pub evaluated_core_tuples: usize,
}

/// Rates on the grid: index 0 is zero, index `i >= 1` is `mu0 + (i-1) h`.
struct Grid {
    floor: f64,
    spacing: f64,
    steps: usize,
}

impl Grid {
    fn new(floor: f64, budget: f64, steps: usize) -> Self {
        let spacing = if budget >= floor { (budget - floor) / steps as f64 } else { 0.0 };
        Self { floor, spacing, steps }
    }

    /// Number of nonzero grid rates.
    fn len(&self, budget: f64) -> usize {
        if budget >= self.floor {
            self.steps + 1
        } else {
            0
        }
    }

    fn rate(&self, idx: usize) -> f64 {
        if idx == 0 {
            0.0
        } else {
            self.floor + (idx - 1) as f64 * self.spacing
        }
    }
}

/// Best value of one periphery agent's peer and outside sources for every
/// amount left after the core link, indexed like the link grid.
fn residual_table(com: &Community, y: usize, grid: &Grid, budget: f64) -> (Vec<f64>, Vec<(Vec<usize>, f64)>) {
    let cfg = com.config();
    let k = com.num_agents();
    let peers: Vec<usize> = (0..k).filter(|&z| z != y).collect();
    let n_rates = grid.len(budget);
    // state[n][s] = (best value, chosen peer indices) with n active peers and index sum s.
    let slots = grid.steps + 1;
    type Cell = Option<(f64, Vec<usize>)>;
    let mut dp: Vec<Vec<Cell>> = vec![vec![None; slots * peers.len() + 1]; peers.len() + 1];
    dp[0][0] = Some((0.0, Vec::new()));
    for (pi, &z) in peers.iter().enumerate() {
        let p = com.p(z, y);
        let mut next: Vec<Vec<Cell>> = dp.iter().map(|row| row.iter().map(|c| c.as_ref().map(|(v, ch)| {
            let mut ch = ch.clone();
            ch.push(0);
            (*v, ch)
        })).collect()).collect();
        for n in 0..=pi {
            for s in 0..dp[n].len() {
                let Some((v, ch)) = &dp[n][s] else { continue };
                for j in 0..n_rates {
                    let rate = grid.floor + j as f64 * grid.spacing;
                    if (n + 1) as f64 * grid.floor + (s + j) as f64 * grid.spacing > budget + 1e-12 {
                        break;
                    }
                    let val = v + cfg.rate_produce * (p * com.delay(rate) - cfg.cost);
                    let cell = &mut next[n + 1][s + j];
                    if cell.as_ref().is_none_or(|(best, _)| val > *best) {
                        let mut ch = ch.clone();
                        ch.push(j + 1);
                        *cell = Some((val, ch));
                    }
                }
            }
        }
        dp = next;
    }

    let outside_gain = cfg.rate_outside * cfg.interest_outside;
    let mut table = Vec::with_capacity(n_rates + 1);
    let mut choice = Vec::with_capacity(n_rates + 1);
    for t in 0..=n_rates {
        let left = budget - grid.rate(t);
        let mut best = (f64::NEG_INFINITY, Vec::new(), 0.0);
        for (n, row) in dp.iter().enumerate() {
            for (s, cell) in row.iter().enumerate() {
                let Some((v, ch)) = cell else { continue };
                let spent = n as f64 * grid.floor + s as f64 * grid.spacing;
                if spent > left + 1e-12 {
                    continue;
                }
                let rest = (left - spent).max(0.0);
                let lambda = if rest >= grid.floor { rest } else { 0.0 };
                let val = v + outside_gain * com.delay(lambda);
                if val > best.0 {
                    best = (val, ch.clone(), lambda);
                }
            }
        }
        table.push(best.0);
        choice.push((best.1, best.2));
    }
    (table, choice)
}

/// Enumerates core index tuples with total spend within budget.
fn core_tuples(grid: &Grid, k: usize, budget: f64) -> Vec<Vec<usize>> {
    fn rec(grid: &Grid, k: usize, budget: f64, spent: f64, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..=grid.len(budget) {
            let r = grid.rate(i);
            if spent + r > budget + 1e-12 {
                break;
            }
            cur.push(i);
            rec(grid, k, budget, spent + r, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(grid, k, budget, 0.0, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Grid-exhaustive potential maximizer for communities of at most three agents.
pub fn brute_force_oracle(config: &CommunityConfig, grid_steps: usize) -> Result<OracleResult> {
    let k = config.num_periphery;
    if k > ORACLE_MAX_AGENTS {
        return Err(AnalysisError::OracleTooLarge { got: k, max: ORACLE_MAX_AGENTS });
    }
    if grid_steps == 0 || grid_steps > ORACLE_MAX_STEPS {
        return Err(AnalysisError::InvalidInput(format!(
            "grid_steps must lie in 1..={ORACLE_MAX_STEPS}, got {grid_steps}"
        )));
    }
    let com = Community::new(config.clone())?;
    let cfg = com.config();
    let floor = com.mu_floor();
    let (mc, mp) = (cfg.budget_core, cfg.budget_periphery);
    let core_grid = Grid::new(floor, mc, grid_steps);
    let link_grid = Grid::new(floor, mp, grid_steps);

    let residuals: Vec<_> = (0..k).map(|y| residual_table(&com, y, &link_grid, mp)).collect();
    let link_delay: Vec<f64> = (0..=link_grid.len(mp)).map(|t| com.delay(link_grid.rate(t))).collect();
    let core_delay: Vec<f64> = (0..=core_grid.len(mc)).map(|i| com.delay(core_grid.rate(i))).collect();

    // Best link index and value for agent y given the core tuple.
    let agent_best = |y: usize, tuple: &[usize]| -> (f64, usize) {
        let mut gain = 0.0;
        let mut active = 0usize;
        for z in (0..k).filter(|&z| z != y) {
            if tuple[z] > 0 {
                gain += cfg.rate_produce * com.p(z, y) * core_delay[tuple[z]];
                active += 1;
            }
        }
        let fixed = cfg.rate_produce * cfg.cost * active as f64;
        let table = &residuals[y].0;
        let mut best = (table[0], 0);
        for t in 1..table.len() {
            let v = gain * link_delay[t] - fixed + table[t];
            if v > best.0 {
                best = (v, t);
            }
        }
        best
    };

    let tuples = core_tuples(&core_grid, k, mc);
    let (best_value, best_idx) = tuples
        .par_iter()
        .enumerate()
        .map(|(i, tuple)| ((0..k).map(|y| agent_best(y, tuple).0).sum::<f64>(), i))
        .reduce(
            || (f64::NEG_INFINITY, usize::MAX),
            |a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        );
    let tuple = &tuples[best_idx];

    let mut alloc = Allocation::zeros(k);
    alloc.core_rates = tuple.iter().map(|&i| core_grid.rate(i)).collect();
    for (y, (_, choices)) in residuals.iter().enumerate() {
        let (_, t) = agent_best(y, tuple);
        alloc.periphery_to_core[y] = link_grid.rate(t);
        let (peer_idx, lambda) = &choices[t];
        for (z, &j) in (0..k).filter(|&z| z != y).zip(peer_idx) {
            alloc.periphery_to_periphery[y][z] = link_grid.rate(j);
        }
        alloc.outside[y] = *lambda;
    }
    com.validate_allocation(&alloc)?;
    let potential = com.potential(&alloc);
    debug_assert!((potential - best_value).abs() <= 1e-9 * best_value.abs().max(1.0));

    Ok(OracleResult {
        allocation: alloc,
        potential,
        grid_steps,
        core_spacing: core_grid.spacing,
        periphery_spacing: link_grid.spacing,
        lipschitz_bound: lipschitz_bound(&com, core_grid.spacing, link_grid.spacing),
        evaluated_core_tuples: tuples.len(),
    })
}

/// `sum_i L_i h_i` over every grid coordinate. On `[mu0, inf)` the slope of
/// `e^{-a/x}` is at most `a c / mu0^2`, attained at the floor.
fn lipschitz_bound(com: &Community, core_spacing: f64, periphery_spacing: f64) -> f64 {
    let cfg = com.config();
    let k = com.num_agents();
    let floor = com.mu_floor();
    let slope = cfg.alpha * cfg.cost / (floor * floor);
    let mut bound = 0.0;
    for z in 0..k {
        // Core rate toward z feeds every other agent's core-mediated term.
        let fan_out: f64 = (0..k).filter(|&y| y != z).map(|y| cfg.rate_produce * com.p(z, y)).sum();
        bound += slope * fan_out * core_spacing;
    }
    for y in 0..k {
        let fan_in: f64 = (0..k).filter(|&z| z != y).map(|z| cfg.rate_produce * com.p(z, y)).sum();
        // Link to the core plus one direct term per peer.
        bound += 2.0 * slope * fan_in * periphery_spacing;
    }
    bound
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize) -> CommunityConfig {
        CommunityConfig {
            num_periphery: k,
            budget_core: 13.5,
            budget_periphery: 6.5,
            ..CommunityConfig::desk_default()
        }
    }

    #[test]
    fn refuses_large_communities() {
        let err = brute_force_oracle(&CommunityConfig::desk_default(), 10).unwrap_err();
        assert!(matches!(err, AnalysisError::OracleTooLarge { got: 11, max: 3 }));
        assert!(brute_force_oracle(&tiny(3), 501).is_err());
    }

    #[test]
    fn two_agent_optimum_is_symmetric() {
        let r = brute_force_oracle(&tiny(2), 120).unwrap();
        let a = &r.allocation;
        assert_eq!(a.core_rates[0], a.core_rates[1]);
        assert_eq!(a.periphery_to_core[0], a.periphery_to_core[1]);
        assert_eq!(a.periphery_to_periphery[0][1], a.periphery_to_periphery[1][0]);
        assert_eq!(a.outside[0], a.outside[1]);
    }

    #[test]
    fn oracle_beats_hand_built_allocations() {
        let cfg = tiny(3);
        let com = Community::new(cfg.clone()).unwrap();
        let r = brute_force_oracle(&cfg, 60).unwrap();
        let mut a = Allocation::zeros(3);
        a.core_rates = vec![4.5, 4.5, 4.5];
        for y in 0..3 {
            a.periphery_to_core[y] = 3.0;
            a.outside[y] = 3.5;
        }
        assert!(r.potential >= com.potential(&a));
        a.outside = vec![1.2; 3];
        a.periphery_to_periphery[0][1] = 2.3;
        a.periphery_to_periphery[1][0] = 2.3;
        a.periphery_to_periphery[2][1] = 2.3;
        assert!(r.potential >= com.potential(&a));
    }

    #[test]
    fn finer_grid_never_loses_much() {
        let cfg = tiny(3);
        let coarse = brute_force_oracle(&cfg, 40).unwrap();
        let fine = brute_force_oracle(&cfg, 80).unwrap();
        assert!(fine.potential >= coarse.potential - fine.lipschitz_bound - coarse.lipschitz_bound);
        assert!(fine.lipschitz_bound < coarse.lipschitz_bound);
    }

    #[test]
    fn deterministic() {
        let cfg = tiny(3);
        assert_eq!(brute_force_oracle(&cfg, 30).unwrap(), brute_force_oracle(&cfg, 30).unwrap());
    }

    #[test]
    fn budgets_below_floor_give_empty_allocation() {
        let cfg = CommunityConfig {
            budget_core: 0.5,
            budget_periphery: 0.5,
            ..tiny(2)
        };
        let r = brute_force_oracle(&cfg, 10).unwrap();
        assert_eq!(r.allocation, Allocation::zeros(2));
        assert_eq!(r.potential, 0.0);
    }
}
