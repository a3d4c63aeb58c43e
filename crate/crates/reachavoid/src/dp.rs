//! Value-iteration engines over the cell abstraction.
//!
//! Three recursions share the materialized transition rows:
//!
//! * plain: each transition lands on its own cell's value;
//! * robust: each transition is charged the worst value within the
//!   neighborhood of its landing cell, which turns the stage-0 value into a
//!   certified lower bound on the reach-avoid probability of every state in
//!   the initial cell;
//! * Lagrangian: maximizes expected running reward plus `kappa` times the
//!   reach indicator, for constrained-control trade-offs.
//!
//! The neighborhood minimum is precomputed once per stage as an eroded
//! value field over the lattice, so each backup is a plain expectation.
//! Target cells carry value 1 implicitly, unsafe cells and everything
//! beyond the grid carry 0.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{CellClass, GridAbstraction, NeighborhoodIndex};
use crate::kernel::ProbRow;

/// Deterministic argmax tie-break: the lowest action index wins.
pub const TIE_BREAK: &str = "lowest-action-index";

/// Per-stage values over safe-cell ordinals; `stages[k][ordinal]`,
/// `k = 0..=N`. Target cells are implicitly 1, unsafe implicitly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub stages: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn stage(&self, k: usize) -> &[f64] {
        &self.stages[k]
    }

    /// Value at stage 0 for the cell containing the initial state.
    pub fn initial_value(&self, grid: &GridAbstraction) -> f64 {
        match grid.class(grid.initial_cell()) {
            CellClass::Target => 1.0,
            CellClass::Unsafe => 0.0,
            CellClass::Safe => {
                let ord = grid
                    .safe_ordinal(grid.initial_cell())
                    .expect("safe cell has ordinal");
                self.stages[0][ord]
            }
        }
    }
}

/// Stage-indexed action choice per safe cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub stages: Vec<Vec<u32>>,
    pub tie_break: &'static str,
}

impl Policy {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }
}

/// Materialized transition rows `[safe ordinal][action]`.
#[derive(Debug, Clone)]
pub struct DpModel {
    pub rows: Vec<Vec<ProbRow>>,
    pub num_actions: usize,
}

impl DpModel {
    pub fn new(rows: Vec<Vec<ProbRow>>) -> Result<Self> {
        let num_actions = rows.first().map_or(0, |r| r.len());
        if num_actions == 0 {
            return Err(Error::invalid("transition model has no actions"));
        }
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::invalid("ragged transition rows"));
        }
        Ok(Self { rows, num_actions })
    }
}

/// Extended value of a lattice location under the implicit boundary
/// conventions.
#[inline]
fn extended_value(grid: &GridAbstraction, values: &[f64], flat: Option<usize>) -> f64 {
    match flat {
        None => 0.0,
        Some(f) => match grid.class(f) {
            CellClass::Target => 1.0,
            CellClass::Unsafe => 0.0,
            CellClass::Safe => values[grid.safe_ordinal(f).expect("safe ordinal")],
        },
    }
}

/// Worst-case value field: `W[j] = min over the neighborhood of cell j` of
/// the extended stage values.
fn eroded_field(grid: &GridAbstraction, nb: &NeighborhoodIndex, values: &[f64]) -> Vec<f64> {
    grid.safe_cells()
        .par_iter()
        .map(|&flat| {
            nb.neighbors(grid, flat)
                .map(|f| extended_value(grid, values, f))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn backup_row(row: &ProbRow, field: &[f64]) -> f64 {
    let mut v = row.p_target;
    for &(ord, p) in &row.cells {
        v += p * field[ord as usize];
    }
    v
}

fn backward_pass(
    model: &DpModel,
    grid: &GridAbstraction,
    nb: Option<&NeighborhoodIndex>,
    n_stages: usize,
) -> (ValueTable, Policy) {
    let n_safe = grid.num_safe();
    debug_assert_eq!(model.rows.len(), n_safe);
    let mut stages = vec![vec![0.0; n_safe]; n_stages + 1];
    let mut policy = vec![vec![0u32; n_safe]; n_stages];
    for k in (0..n_stages).rev() {
        let next = &stages[k + 1];
        let field: Vec<f64> = match nb {
            Some(nb) => eroded_field(grid, nb, next),
            None => next.clone(),
        };
        let results: Vec<(f64, u32)> = (0..n_safe)
            .into_par_iter()
            .map(|i| {
                let mut best_val = f64::NEG_INFINITY;
                let mut best_action = 0u32;
                for (a, row) in model.rows[i].iter().enumerate() {
                    let v = backup_row(row, &field);
                    if v > best_val {
                        best_val = v;
                        best_action = a as u32;
                    }
                }
                debug_assert!(best_val <= 1.0 + 1e-9);
                (best_val.clamp(0.0, 1.0), best_action)
            })
            .collect();
        for (i, (v, a)) in results.into_iter().enumerate() {
            stages[k][i] = v;
            policy[k][i] = a;
        }
    }
    (
        ValueTable { stages },
        Policy {
            stages: policy,
            tie_break: TIE_BREAK,
        },
    )
}

/// Backward recursion with the worst-neighbor robustification; the stage-0
/// value lower-bounds the reach-avoid probability from anywhere in the
/// initial cell.
pub fn robust_value_iteration(
    model: &DpModel,
    grid: &GridAbstraction,
    nb: &NeighborhoodIndex,
    n_stages: usize,
) -> (ValueTable, Policy) {
    backward_pass(model, grid, Some(nb), n_stages)
}

/// Backward recursion evaluating each landing cell at its own value.
pub fn plain_value_iteration(
    model: &DpModel,
    grid: &GridAbstraction,
    n_stages: usize,
) -> (ValueTable, Policy) {
    backward_pass(model, grid, None, n_stages)
}

/// Objective weights for the constrained problem's Lagrangian.
#[derive(Debug, Clone)]
pub struct LagrangianObjective {
    pub kappa: f64,
    pub alpha: f64,
    /// Terminal reward per safe ordinal (zero in the shipped scenarios:
    /// running cost only).
    pub terminal: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LagrangianOutcome {
    pub returns: ValueTable,
    pub policy: Policy,
    /// Unweighted expected running-plus-terminal reward of the policy.
    pub expected_cost: f64,
    /// Reach probability of the policy in the abstraction (plain forward
    /// pass, no robustification).
    pub reach_prob: f64,
    /// `expected_cost + kappa (reach_prob - alpha)`: the dual objective
    /// including the constant `-kappa alpha` shift.
    pub objective: f64,
}

/// Maximizes `E[g_N + kappa l_N + sum g_k]` by backward recursion, then
/// evaluates the resulting policy's expected cost and reach probability by
/// a forward pass from the initial cell.
///
/// The `-kappa alpha` constant shifts reported objectives but never the
/// argmax.
pub fn lagrangian_value_iteration(
    model: &DpModel,
    grid: &GridAbstraction,
    obj: &LagrangianObjective,
    n_stages: usize,
) -> Result<LagrangianOutcome> {
    if obj.kappa < 0.0 {
        return Err(Error::invalid("kappa must be >= 0"));
    }
    let n_safe = grid.num_safe();
    if obj.terminal.len() != n_safe {
        return Err(Error::dim(n_safe, obj.terminal.len(), "terminal rewards"));
    }
    let mut stages = vec![vec![0.0; n_safe]; n_stages + 1];
    stages[n_stages].copy_from_slice(&obj.terminal);
    let mut policy = vec![vec![0u32; n_safe]; n_stages];
    // Absorbing values: reaching the target banks kappa (terminal indicator
    // 1, no further rewards); leaving the safe set banks 0.
    let target_value = obj.kappa;
    for k in (0..n_stages).rev() {
        let next = stages[k + 1].clone();
        for i in 0..n_safe {
            let mut best_val = f64::NEG_INFINITY;
            let mut best_action = 0u32;
            for (a, row) in model.rows[i].iter().enumerate() {
                let mut v = row.stage_cost + row.p_target * target_value;
                for &(ord, p) in &row.cells {
                    v += p * next[ord as usize];
                }
                if v > best_val {
                    best_val = v;
                    best_action = a as u32;
                }
            }
            stages[k][i] = best_val;
            policy[k][i] = best_action;
        }
    }
    let policy = Policy {
        stages: policy,
        tie_break: TIE_BREAK,
    };
    let (expected_cost, reach_prob) = forward_pass(model, grid, &policy, &obj.terminal)?;
    Ok(LagrangianOutcome {
        returns: ValueTable { stages },
        objective: expected_cost + obj.kappa * (reach_prob - obj.alpha),
        policy,
        expected_cost,
        reach_prob,
    })
}

/// Propagates the cell distribution under a fixed policy; returns the
/// expected accumulated reward and the final target-absorption mass.
pub fn forward_pass(
    model: &DpModel,
    grid: &GridAbstraction,
    policy: &Policy,
    terminal: &[f64],
) -> Result<(f64, f64)> {
    let n_safe = grid.num_safe();
    let start = grid.initial_cell();
    let mut mu = vec![0.0; n_safe];
    let mut mass_target = 0.0;
    match grid.class(start) {
        CellClass::Target => mass_target = 1.0,
        CellClass::Unsafe => {}
        CellClass::Safe => {
            mu[grid.safe_ordinal(start).expect("safe ordinal")] = 1.0;
        }
    }
    let mut cost = 0.0;
    for k in 0..policy.horizon() {
        let mut nxt = vec![0.0; n_safe];
        for i in 0..n_safe {
            let w = mu[i];
            if w == 0.0 {
                continue;
            }
            let row = &model.rows[i][policy.stages[k][i] as usize];
            cost += w * row.stage_cost;
            mass_target += w * row.p_target;
            for &(ord, p) in &row.cells {
                nxt[ord as usize] += w * p;
            }
        }
        mu = nxt;
    }
    for (i, w) in mu.iter().enumerate() {
        cost += w * terminal[i];
    }
    Ok((cost, mass_target))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ParetoPoint {
    pub kappa: f64,
    pub expected_cost: f64,
    pub reach_prob: f64,
    pub objective: f64,
}

/// One Lagrangian solve per multiplier.
///
/// Monotonicity of the reach probability in `kappa` is an empirical
/// tendency of the sampled models, not a theorem; callers may diagnose it
/// but nothing here asserts it.
pub fn pareto_sweep(
    model: &DpModel,
    grid: &GridAbstraction,
    alpha: f64,
    terminal: &[f64],
    kappas: &[f64],
    n_stages: usize,
) -> Result<Vec<ParetoPoint>> {
    let mut out = Vec::with_capacity(kappas.len());
    for &kappa in kappas {
        let obj = LagrangianObjective {
            kappa,
            alpha,
            terminal: terminal.to_vec(),
        };
        let res = lagrangian_value_iteration(model, grid, &obj, n_stages)?;
        out.push(ParetoPoint {
            kappa,
            expected_cost: res.expected_cost,
            reach_prob: res.reach_prob,
            objective: res.objective,
        });
    }
    Ok(out)
}

/// Action lookup when the physical state enters a cell at stage `k`.
///
/// Absorbed situations (target or unsafe cells, or a state beyond the
/// grid) return `None`: the MDP is frozen there and the physical layer
/// keeps its last command.
pub fn execute_policy(
    policy: &Policy,
    grid: &GridAbstraction,
    x_s: &DVector<f64>,
    k: usize,
) -> Option<usize> {
    if k >= policy.horizon() {
        return None;
    }
    let flat = grid.locate(x_s.as_slice())?;
    match grid.class(flat) {
        CellClass::Safe => {
            let ord = grid.safe_ordinal(flat).expect("safe ordinal");
            Some(policy.stages[k][ord] as usize)
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{HyperRect, RegionSet};
    use crate::oracles::{random_world, to_oracle_model};
    use crate::rng::stream;
    use nalgebra::dvector;

    fn single_cell_world() -> (GridAbstraction, NeighborhoodIndex) {
        let bounds = HyperRect::new(dvector![0.5, 0.5], dvector![0.5, 0.5]).unwrap();
        let safe = RegionSet::Rect(bounds.clone());
        let g = GridAbstraction::build(
            &bounds,
            &safe,
            &RegionSet::Union(vec![]),
            1.0,
            0.0,
            &dvector![0.5, 0.5],
        )
        .unwrap();
        let nb = NeighborhoodIndex::build(&g, 0.0).unwrap();
        (g, nb)
    }

    fn row(p_target: f64, p_unsafe: f64, cells: Vec<(u32, f64)>, cost: f64) -> ProbRow {
        ProbRow {
            p_target,
            p_unsafe,
            cells,
            stage_cost: cost,
        }
    }

    #[test]
    fn certain_transition_to_target() {
        let (g, nb) = single_cell_world();
        let model = DpModel::new(vec![vec![row(1.0, 0.0, vec![], 0.0)]]).unwrap();
        let (v, _) = robust_value_iteration(&model, &g, &nb, 5);
        for k in 0..5 {
            assert_eq!(v.stages[k][0], 1.0, "stage {k}");
        }
        assert_eq!(v.stages[5][0], 0.0);
    }

    #[test]
    fn hand_computed_two_stage_value() {
        let (g, nb) = single_cell_world();
        let model = DpModel::new(vec![vec![row(0.8, 0.2, vec![], 0.0)]]).unwrap();
        let (v, _) = robust_value_iteration(&model, &g, &nb, 2);
        assert!((v.stages[1][0] - 0.8).abs() < 1e-15);
        assert!((v.stages[0][0] - 0.8).abs() < 1e-15);
    }

    fn chain_world() -> (GridAbstraction, DpModel) {
        // Four cells on a line; the last one is the target.
        let bounds = HyperRect::new(dvector![2.0], dvector![2.0]).unwrap();
        let safe = RegionSet::Rect(bounds.clone());
        let target = RegionSet::Rect(HyperRect::new(dvector![3.5], dvector![0.5]).unwrap());
        let g =
            GridAbstraction::build(&bounds, &safe, &target, 1.0, 0.0, &dvector![0.5]).unwrap();
        assert_eq!(g.num_safe(), 3);
        // Deterministic shift right; the last safe cell feeds the target.
        let rows = vec![
            vec![row(0.0, 0.0, vec![(1, 1.0)], 0.0)],
            vec![row(0.0, 0.0, vec![(2, 1.0)], 0.0)],
            vec![row(1.0, 0.0, vec![], 0.0)],
        ];
        (g, DpModel::new(rows).unwrap())
    }

    #[test]
    fn chain_horizon_semantics() {
        let (g, model) = chain_world();
        let (v3, _) = plain_value_iteration(&model, &g, 3);
        assert_eq!(v3.stages[0][0], 1.0);
        // Two stages are not enough to traverse the chain.
        let (v2, _) = plain_value_iteration(&model, &g, 2);
        assert_eq!(v2.stages[0][0], 0.0);
        assert_eq!(v2.initial_value(&g), 0.0);
    }

    #[test]
    fn robust_never_exceeds_plain() {
        let mut rng = stream(17, "test-dp-robust", &[]);
        for trial in 0..30 {
            let (g, rows, r) = random_world(&mut rng, 6, 3, 16);
            let model = DpModel::new(rows).unwrap();
            let nb = NeighborhoodIndex::build(&g, r).unwrap();
            let n = 4;
            let (vr, _) = robust_value_iteration(&model, &g, &nb, n);
            let (vp, _) = plain_value_iteration(&model, &g, n);
            for k in 0..=n {
                for i in 0..g.num_safe() {
                    assert!(
                        vr.stages[k][i] <= vp.stages[k][i] + 1e-12,
                        "trial {trial}, stage {k}, cell {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn values_monotone_in_remaining_horizon() {
        let mut rng = stream(18, "test-dp-horizon", &[]);
        for _ in 0..20 {
            let (g, rows, r) = random_world(&mut rng, 5, 2, 8);
            let model = DpModel::new(rows).unwrap();
            let nb = NeighborhoodIndex::build(&g, r).unwrap();
            let (v, _) = robust_value_iteration(&model, &g, &nb, 5);
            for k in 0..5 {
                for i in 0..g.num_safe() {
                    assert!(v.stages[k][i] + 1e-12 >= v.stages[k + 1][i]);
                }
            }
        }
    }

    #[test]
    fn larger_neighborhood_never_helps() {
        let mut rng = stream(19, "test-dp-shrink", &[]);
        for _ in 0..20 {
            let (g, rows, _) = random_world(&mut rng, 5, 2, 8);
            let model = DpModel::new(rows).unwrap();
            let nb_small = NeighborhoodIndex::build(&g, 0.0).unwrap();
            let nb_large = NeighborhoodIndex::build(&g, g.zeta()).unwrap();
            let (vs, _) = robust_value_iteration(&model, &g, &nb_small, 4);
            let (vl, _) = robust_value_iteration(&model, &g, &nb_large, 4);
            for k in 0..4 {
                for i in 0..g.num_safe() {
                    assert!(vl.stages[k][i] <= vs.stages[k][i] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_bruteforce_recursions() {
        let mut rng = stream(20, "test-dp-oracle", &[]);
        for trial in 0..40 {
            let (g, rows, r) = random_world(&mut rng, 6, 3, 16);
            let model = DpModel::new(rows.clone()).unwrap();
            let nb = NeighborhoodIndex::build(&g, r).unwrap();
            let n = 4;
            let oracle = to_oracle_model(&g, &rows, r);
            let (vr, _) = robust_value_iteration(&model, &g, &nb, n);
            let (vp, _) = plain_value_iteration(&model, &g, n);
            let or = oracle.value_iteration(n, true);
            let op = oracle.value_iteration(n, false);
            for k in 0..=n {
                for (ord, &flat) in g.safe_cells().iter().enumerate() {
                    assert!(
                        (vr.stages[k][ord] - or[k][flat]).abs() <= 1e-12,
                        "robust trial {trial} stage {k} cell {flat}: {} vs {}",
                        vr.stages[k][ord],
                        or[k][flat]
                    );
                    assert!(
                        (vp.stages[k][ord] - op[k][flat]).abs() <= 1e-12,
                        "plain trial {trial} stage {k} cell {flat}"
                    );
                }
            }
        }
    }

    #[test]
    fn matches_exhaustive_policy_enumeration_tiny() {
        let mut rng = stream(23, "test-dp-enum", &[]);
        let mut done = 0;
        while done < 5 {
            let (g, rows, r) = random_world(&mut rng, 2, 2, 8);
            // Keep the enumeration within |A|^(cells * stages) ~ 4096.
            if g.num_safe() > 4 {
                continue;
            }
            done += 1;
            let n = 3;
            let model = DpModel::new(rows.clone()).unwrap();
            let nb = NeighborhoodIndex::build(&g, r).unwrap();
            let oracle = to_oracle_model(&g, &rows, r);
            for robust in [false, true] {
                let best = oracle.enumerate_policies(n, robust);
                let (v, _) = if robust {
                    robust_value_iteration(&model, &g, &nb, n)
                } else {
                    plain_value_iteration(&model, &g, n)
                };
                for (ord, &flat) in g.safe_cells().iter().enumerate() {
                    assert!(
                        (v.stages[0][ord] - best[flat]).abs() <= 1e-12,
                        "enumeration mismatch (robust = {robust})"
                    );
                }
            }
        }
    }

    #[test]
    fn lagrangian_limits() {
        let (g, _) = single_cell_world();
        // Two actions: "safe but costly" reaches nothing; "risky" reaches
        // the target half the time and pays less.
        let rows = vec![vec![
            row(0.0, 0.0, vec![(0, 1.0)], 0.0),
            row(0.5, 0.5, vec![], -1.0),
        ]];
        let model = DpModel::new(rows).unwrap();
        // kappa = 0: pure reward maximization picks the free action.
        let res0 = lagrangian_value_iteration(
            &model,
            &g,
            &LagrangianObjective {
                kappa: 0.0,
                alpha: 0.5,
                terminal: vec![0.0],
            },
            3,
        )
        .unwrap();
        assert!(res0.policy.stages.iter().all(|s| s[0] == 0));
        assert_eq!(res0.reach_prob, 0.0);
        // Large kappa with no reward contrast: argmax must coincide with
        // the plain reach-avoid recursion.
        let res_big = lagrangian_value_iteration(
            &model,
            &g,
            &LagrangianObjective {
                kappa: 1e6,
                alpha: 0.5,
                terminal: vec![0.0],
            },
            3,
        )
        .unwrap();
        let (_, reach_policy) = plain_value_iteration(&model, &g, 3);
        assert_eq!(res_big.policy.stages, reach_policy.stages);
        assert!(res_big.reach_prob > 0.4);
        // Objective reporting includes the -kappa alpha shift.
        assert!(
            (res_big.objective - (res_big.expected_cost + 1e6 * (res_big.reach_prob - 0.5)))
                .abs()
                < 1e-9
        );
    }

    #[test]
    fn pareto_sweep_trades_cost_for_reach() {
        let (g, _) = single_cell_world();
        let rows = vec![vec![
            row(0.0, 0.0, vec![(0, 1.0)], 0.0),
            row(0.6, 0.4, vec![], -1.0),
        ]];
        let model = DpModel::new(rows).unwrap();
        let pts = pareto_sweep(&model, &g, 0.5, &[0.0], &[0.0, 10.0], 3).unwrap();
        assert_eq!(pts.len(), 2);
        // Degenerate single-kappa sweep is a single point.
        let single = pareto_sweep(&model, &g, 0.5, &[0.0], &[0.0], 3).unwrap();
        assert_eq!(single.len(), 1);
        // The conflict is real: higher kappa buys reach probability with
        // lower expected reward.
        assert!(pts[1].reach_prob > pts[0].reach_prob);
        assert!(pts[1].expected_cost < pts[0].expected_cost);
    }

    #[test]
    fn execute_policy_lookup_and_absorption() {
        let (g, model) = chain_world();
        let (_, policy) = plain_value_iteration(&model, &g, 3);
        // Interior of the first cell.
        assert_eq!(execute_policy(&policy, &g, &dvector![0.5], 0), Some(0));
        // Exactly at a shared face: the lower cell's action applies.
        let at_face = execute_policy(&policy, &g, &dvector![1.0], 0);
        assert_eq!(at_face, Some(policy.stages[0][0] as usize));
        // Target cell and out-of-grid states are absorbed.
        assert_eq!(execute_policy(&policy, &g, &dvector![3.5], 0), None);
        assert_eq!(execute_policy(&policy, &g, &dvector![9.0], 0), None);
        // Stage beyond the horizon.
        assert_eq!(execute_policy(&policy, &g, &dvector![0.5], 3), None);
    }
}
