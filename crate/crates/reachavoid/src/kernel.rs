//! Monte-Carlo estimation of the closed-loop transition kernel.
//!
//! One outer block of the MPC-controlled system is simulated `K` times per
//! command. In translation-invariant mode (valid when no stochastic state
//! feeds back into the dynamics, which the system constructor detects) the
//! trajectories are recorded once from the origin anchor and reused for
//! every cell by shifting; absorption against the tightened safe/target
//! cells is decided along the shifted fine-resolution path at row
//! materialization time.
//!
//! Per-state mode estimates a row per cell. For systems with the inert
//! stochastic columns it runs in the anchor-relative frame (mathematically
//! identical to the absolute frame, and bit-identical to the reused
//! trajectories under matched streams); otherwise it simulates from each
//! cell center in absolute coordinates. Either way the derived noise
//! streams are keyed by (action, sample) only, mirroring the reuse of one
//! sample set across cells.
//!
//! Controller infeasibility during sampling is conservative failure mass:
//! the sample counts as unsafe absorption unless the truncated path already
//! reached the target.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellClass, GridAbstraction};
use crate::lti::{DiscreteLti, NoiseModel, TimeGrid};
use crate::mpc::{
    reference_from_command, run_block, BlockContext, CommandPlan, MpcConfig, MpcController,
    RmpcAnchor,
};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelMode {
    TranslationInvariant,
    PerState,
}

/// One recorded block trajectory: stochastic positions at every substep,
/// relative to the sampling anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub pts: Vec<f64>,
    pub infeasible: bool,
}

/// Sparse probability row over {target-absorb, unsafe-absorb, safe cells}.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow {
    pub p_target: f64,
    pub p_unsafe: f64,
    /// Safe-cell masses keyed by ordinal, ascending.
    pub cells: Vec<(u32, f64)>,
    /// Mean integrated stage cost along the sampled paths (0 without a
    /// cost field).
    pub stage_cost: f64,
}

impl ProbRow {
    pub fn total_mass(&self) -> f64 {
        self.p_target + self.p_unsafe + self.cells.iter().map(|(_, p)| p).sum::<f64>()
    }
}

/// Position-dependent running cost, integrated along fine paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CostField {
    /// `-|p - center| / scale`: rewards staying near `center`.
    Radial { center: Vec<f64>, scale: f64 },
}

impl CostField {
    pub fn rate(&self, p: &[f64]) -> f64 {
        match self {
            CostField::Radial { center, scale } => {
                let mut d2 = 0.0;
                for (x, c) in p.iter().zip(center) {
                    d2 += (x - c) * (x - c);
                }
                -d2.sqrt() / scale
            }
        }
    }
}

/// The estimated kernel.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    pub mode: KernelMode,
    pub n_s: usize,
    pub samples_per_action: usize,
    pub num_actions: usize,
    pub seed: u64,
    pub sim_step: f64,
    /// Samples counted as unsafe because the controller failed.
    pub infeasible_samples: u64,
    /// Translation-invariant storage: `[action][sample]`.
    ti_samples: Vec<Vec<SamplePath>>,
    /// Per-state storage: `[safe ordinal][action]`.
    rows: Option<Vec<Vec<ProbRow>>>,
}

/// Everything the sampler needs besides the grid.
pub struct KernelInputs<'a> {
    pub cfg: &'a Arc<MpcConfig>,
    /// Inner-step discretization used for anchors and plans.
    pub disc: &'a DiscreteLti,
    /// Substep discretization driving the fine simulation.
    pub disc_sub: &'a DiscreteLti,
    pub time: &'a TimeGrid,
    pub noise: &'a NoiseModel,
    pub plans: &'a [Arc<CommandPlan>],
    pub velocity_state_indices: &'a [usize],
    pub samples_per_action: usize,
    pub seed: u64,
    /// Run the per-state sampler in the anchor-relative frame (valid and
    /// exact when the stochastic columns are inert).
    pub relative_frame: bool,
}

/// Simulates one block from `anchor_full` under command `params`, recording
/// the stochastic positions relative to the anchor.
fn sample_block(
    inputs: &KernelInputs,
    action: usize,
    anchor_full: &DVector<f64>,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<SamplePath> {
    let cfg = inputs.cfg;
    let n_s = cfg.n_s;
    let plan = &inputs.plans[action];
    let cmd = reference_from_command(
        &plan.params,
        anchor_full,
        n_s,
        inputs.velocity_state_indices,
        inputs.time.dt_inner(),
        cfg.horizon,
    )?;
    let anchor = RmpcAnchor::new(
        anchor_full.clone(),
        anchor_full.clone(),
        &inputs.disc.a,
        cfg.horizon,
        n_s,
        cfg.family.params.zeta,
    )?;
    let mut ctrl = MpcController::new(cfg.clone(), plan.clone(), cmd.clone())?;
    ctrl.begin_block(plan.clone(), cmd, Some(anchor))?;
    let ctx = BlockContext {
        disc_sub: inputs.disc_sub,
        substeps_per_inner: inputs.time.substeps_per_inner,
        horizon: cfg.horizon,
        noise: Some(inputs.noise),
    };
    let mut pts =
        Vec::with_capacity(cfg.horizon * inputs.time.substeps_per_inner * n_s);
    let outcome = run_block(&mut ctrl, &ctx, 0, anchor_full, rng, |x| {
        for d in 0..n_s {
            pts.push(x[d] - anchor_full[d]);
        }
    });
    match outcome {
        Ok(_) => Ok(SamplePath {
            pts,
            infeasible: false,
        }),
        Err(Error::MpcInfeasible {
            k,
            j,
            state,
            primal_residual,
            dual_residual,
        }) => {
            if std::env::var("RA_DEBUG_INFEAS").is_ok() {
                eprintln!(
                    "infeasible at k={k} j={j} state={state:?} pr={primal_residual:.3e} dr={dual_residual:.3e}"
                );
            }
            Ok(SamplePath {
                pts,
                infeasible: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Estimates the kernel by Monte-Carlo simulation.
pub fn estimate_kernel(
    inputs: &KernelInputs,
    grid: &GridAbstraction,
    mode: KernelMode,
    cost: Option<&CostField>,
) -> Result<TransitionModel> {
    let n_s = inputs.cfg.n_s;
    let k = inputs.samples_per_action;
    let num_actions = inputs.plans.len();
    if k == 0 || num_actions == 0 {
        return Err(Error::invalid("kernel needs at least one sample and action"));
    }
    match mode {
        KernelMode::TranslationInvariant => {
            let origin = DVector::zeros(inputs.disc.dim());
            let flat: Vec<Result<SamplePath>> = (0..num_actions * k)
                .into_par_iter()
                .map(|idx| {
                    let a = idx / k;
                    let s = idx % k;
                    let mut rng = stream(inputs.seed, "kernel", &[a as u64, s as u64]);
                    sample_block(inputs, a, &origin, &mut rng)
                })
                .collect();
            let mut ti_samples: Vec<Vec<SamplePath>> = Vec::with_capacity(num_actions);
            let mut infeasible = 0u64;
            let mut iter = flat.into_iter();
            for _ in 0..num_actions {
                let mut per_action = Vec::with_capacity(k);
                for _ in 0..k {
                    let path = iter.next().expect("length invariant")?;
                    if path.infeasible {
                        infeasible += 1;
                    }
                    per_action.push(path);
                }
                ti_samples.push(per_action);
            }
            Ok(TransitionModel {
                mode,
                n_s,
                samples_per_action: k,
                num_actions,
                seed: inputs.seed,
                sim_step: inputs.time.sim_step(),
                infeasible_samples: infeasible,
                ti_samples,
                rows: None,
            })
        }
        KernelMode::PerState => {
            let n = inputs.disc.dim();
            let per_cell: Vec<Result<(Vec<ProbRow>, u64)>> = grid
                .safe_cells()
                .par_iter()
                .map(|&flat| {
                    let center_s = grid.center(flat);
                    let mut anchor_full = DVector::zeros(n);
                    // Relative frame: simulate around the origin and shift
                    // only for classification. Absolute frame: simulate
                    // from the actual center (positions feed the dynamics).
                    let mut shift = vec![0.0; n_s];
                    if inputs.relative_frame {
                        for d in 0..n_s {
                            shift[d] = center_s[d];
                        }
                    } else {
                        for d in 0..n_s {
                            anchor_full[d] = center_s[d];
                        }
                    }
                    let mut rows = Vec::with_capacity(inputs.plans.len());
                    let mut infeasible = 0u64;
                    for a in 0..inputs.plans.len() {
                        let mut paths = Vec::with_capacity(k);
                        for s in 0..k {
                            let mut rng =
                                stream(inputs.seed, "kernel", &[a as u64, s as u64]);
                            let path = sample_block(inputs, a, &anchor_full, &mut rng)?;
                            if path.infeasible {
                                infeasible += 1;
                            }
                            paths.push(path);
                        }
                        rows.push(bin_paths(
                            grid,
                            &paths,
                            &shift,
                            cost,
                            inputs.time.sim_step(),
                            n_s,
                        ));
                    }
                    Ok((rows, infeasible))
                })
                .collect();
            let mut rows = Vec::with_capacity(per_cell.len());
            let mut infeasible = 0u64;
            for item in per_cell {
                let (r, inf) = item?;
                infeasible += inf;
                rows.push(r);
            }
            Ok(TransitionModel {
                mode,
                n_s,
                samples_per_action: k,
                num_actions,
                seed: inputs.seed,
                sim_step: inputs.time.sim_step(),
                infeasible_samples: infeasible,
                ti_samples: Vec::new(),
                rows: Some(rows),
            })
        }
    }
}

enum Outcome {
    Target,
    Unsafe,
    Cell(usize),
}

/// Walks one shifted path with first-hit semantics; returns the outcome and
/// the integrated stage cost up to absorption.
fn walk_shifted(
    grid: &GridAbstraction,
    path: &SamplePath,
    shift: &[f64],
    cost: Option<&CostField>,
    sim_step: f64,
    n_s: usize,
    scratch: &mut Vec<f64>,
) -> (Outcome, f64) {
    let steps = path.pts.len() / n_s;
    let mut integral = 0.0;
    let mut last_flat = None;
    let two_d = n_s == 2;
    for s in 0..steps {
        scratch.clear();
        for d in 0..n_s {
            scratch.push(path.pts[s * n_s + d] + shift[d]);
        }
        let flat = if two_d {
            grid.locate2(scratch[0], scratch[1])
        } else {
            grid.locate(scratch)
        };
        match flat {
            None => return (Outcome::Unsafe, integral),
            Some(flat) => match grid.class(flat) {
                CellClass::Target => return (Outcome::Target, integral),
                CellClass::Unsafe => return (Outcome::Unsafe, integral),
                CellClass::Safe => {
                    if let Some(c) = cost {
                        integral += c.rate(scratch) * sim_step;
                    }
                    last_flat = Some(flat);
                }
            },
        }
    }
    match last_flat {
        // A truncated (infeasible) sample that never absorbed is failure.
        Some(flat) if !path.infeasible => (Outcome::Cell(flat), integral),
        _ => (Outcome::Unsafe, integral),
    }
}

fn bin_paths(
    grid: &GridAbstraction,
    paths: &[SamplePath],
    shift: &[f64],
    cost: Option<&CostField>,
    sim_step: f64,
    n_s: usize,
) -> ProbRow {
    let k = paths.len() as f64;
    let mut n_target = 0usize;
    let mut n_unsafe = 0usize;
    let mut cell_counts: std::collections::BTreeMap<u32, usize> = Default::default();
    let mut cost_sum = 0.0;
    let mut scratch = Vec::with_capacity(n_s);
    for path in paths {
        let (outcome, integral) =
            walk_shifted(grid, path, shift, cost, sim_step, n_s, &mut scratch);
        cost_sum += integral;
        match outcome {
            Outcome::Target => n_target += 1,
            Outcome::Unsafe => n_unsafe += 1,
            Outcome::Cell(flat) => {
                let ord = grid
                    .safe_ordinal(flat)
                    .expect("walk only ends in safe cells") as u32;
                *cell_counts.entry(ord).or_insert(0) += 1;
            }
        }
    }
    ProbRow {
        p_target: n_target as f64 / k,
        p_unsafe: n_unsafe as f64 / k,
        cells: cell_counts
            .into_iter()
            .map(|(ord, c)| (ord, c as f64 / k))
            .collect(),
        stage_cost: cost_sum / k,
    }
}

impl TransitionModel {
    /// Row for one safe cell and action.
    ///
    /// Translation-invariant mode shifts the stored paths to the cell
    /// center and re-evaluates absorption along the shifted fine path;
    /// per-state mode returns the stored row.
    pub fn row_for(
        &self,
        grid: &GridAbstraction,
        flat_cell: usize,
        action: usize,
        cost: Option<&CostField>,
    ) -> Result<ProbRow> {
        let ord = grid
            .safe_ordinal(flat_cell)
            .ok_or_else(|| Error::invalid("row_for requires a safe cell"))?;
        match self.mode {
            KernelMode::PerState => Ok(self.rows.as_ref().expect("per-state rows")[ord]
                [action]
                .clone()),
            KernelMode::TranslationInvariant => {
                let center = grid.center(flat_cell);
                let shift: Vec<f64> = center.iter().copied().collect();
                Ok(bin_paths(
                    grid,
                    &self.ti_samples[action],
                    &shift,
                    cost,
                    self.sim_step,
                    self.n_s,
                ))
            }
        }
    }

    /// Materializes all rows `[safe ordinal][action]`, in parallel.
    pub fn materialize_rows(
        &self,
        grid: &GridAbstraction,
        cost: Option<&CostField>,
    ) -> Result<Vec<Vec<ProbRow>>> {
        match self.mode {
            KernelMode::PerState => Ok(self.rows.clone().expect("per-state rows")),
            KernelMode::TranslationInvariant => {
                let out: Vec<Vec<ProbRow>> = grid
                    .safe_cells()
                    .par_iter()
                    .map(|&flat| {
                        let center = grid.center(flat);
                        let shift: Vec<f64> = center.iter().copied().collect();
                        (0..self.num_actions)
                            .map(|a| {
                                bin_paths(
                                    grid,
                                    &self.ti_samples[a],
                                    &shift,
                                    cost,
                                    self.sim_step,
                                    self.n_s,
                                )
                            })
                            .collect()
                    })
                    .collect();
                Ok(out)
            }
        }
    }

    /// Direct access for persistence.
    pub fn ti_samples(&self) -> &[Vec<SamplePath>] {
        &self.ti_samples
    }

    pub fn per_state_rows(&self) -> Option<&Vec<Vec<ProbRow>>> {
        self.rows.as_ref()
    }

    /// Rebuilds a translation-invariant model from stored parts.
    pub fn from_ti_parts(
        n_s: usize,
        samples_per_action: usize,
        seed: u64,
        sim_step: f64,
        ti_samples: Vec<Vec<SamplePath>>,
    ) -> Self {
        let num_actions = ti_samples.len();
        let infeasible_samples = ti_samples
            .iter()
            .flatten()
            .filter(|p| p.infeasible)
            .count() as u64;
        Self {
            mode: KernelMode::TranslationInvariant,
            n_s,
            samples_per_action,
            num_actions,
            seed,
            sim_step,
            infeasible_samples,
            ti_samples,
            rows: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{HalfspacePolytope, HyperRect, RegionSet};
    use crate::lti::{discretize, StructuredLti};
    use crate::mpc::{CommandParams, MpcMode};
    use crate::tightening::{
        build_constraint_family, compute_eta, tube_radius, TerminalMode, TighteningParams,
    };
    use nalgebra::{dmatrix, dvector, DMatrix};

    fn box_polytope(half: f64, dim: usize) -> HalfspacePolytope {
        HalfspacePolytope::axis_box(&DVector::zeros(dim), &DVector::from_element(dim, half))
            .unwrap()
    }

    struct Setup {
        sys: StructuredLti,
        time: TimeGrid,
        cfg: Arc<MpcConfig>,
        disc: DiscreteLti,
        disc_sub: DiscreteLti,
        noise: NoiseModel,
    }

    fn setup(noise_var: f64) -> Setup {
        let a_c = dmatrix![
            0.0, 0.0, 1.0, 0.0;
            0.0, 0.0, 0.0, 1.0;
            0.0, 0.0, 0.0, 0.0;
            0.0, 0.0, 0.0, 0.0
        ];
        let b_c = dmatrix![0.0, 0.0; 0.0, 0.0; 1.0, 0.0; 0.0, 1.0];
        let e_c = dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0; 0.0, 0.0];
        let sys = StructuredLti::new(a_c, b_c, e_c, 2, box_polytope(2.0, 2)).unwrap();
        let time = TimeGrid::new(2.0, 4, 10, 0.005).unwrap();
        let disc = discretize(&sys, time.dt_inner()).unwrap();
        let disc_sub = discretize(&sys, time.sim_step()).unwrap();
        let g_d = box_polytope(1.0, 2);
        let (eta, kappa_x, kappa_u) = compute_eta(&sys, &g_d, time.dt_inner(), None).unwrap();
        let zeta = 0.2;
        let r = tube_radius(&sys, time.dt_outer(), zeta);
        let params = TighteningParams {
            eta,
            kappa_x,
            kappa_u,
            r,
            zeta,
        };
        let family = build_constraint_family(&g_d, &params, &TerminalMode::ZeroSet).unwrap();
        let mut q = DMatrix::zeros(4, 4);
        q[(0, 0)] = 200.0;
        q[(1, 1)] = 200.0;
        q[(2, 2)] = 20.0;
        q[(3, 3)] = 20.0;
        let cfg = Arc::new(
            MpcConfig::new(
                q,
                DMatrix::identity(2, 2) * 0.1,
                10,
                family,
                sys.input_set().clone(),
                MpcMode::Robust,
                2,
            )
            .unwrap(),
        );
        let noise = NoiseModel::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2) * noise_var,
            time.sim_step(),
        )
        .unwrap();
        Setup {
            sys,
            time,
            cfg,
            disc,
            disc_sub,
            noise,
        }
    }

    fn world(zeta: f64, r: f64) -> GridAbstraction {
        let bounds = HyperRect::new(dvector![0.0, 0.0], dvector![1.0, 1.0]).unwrap();
        let safe = RegionSet::Rect(bounds.clone());
        let target = RegionSet::Union(vec![]);
        GridAbstraction::build(&bounds, &safe, &target, zeta, r, &dvector![0.0, 0.0]).unwrap()
    }

    fn plans(s: &Setup, actions: &[CommandParams]) -> Vec<Arc<CommandPlan>> {
        actions
            .iter()
            .map(|p| Arc::new(CommandPlan::build(&s.cfg, &s.disc, p).unwrap()))
            .collect()
    }

    #[test]
    fn quiet_command_stays_in_cell() {
        let s = setup(1e-12);
        assert!(s.sys.all_stochastic_columns_inert());
        let grid = world(0.2, 0.0);
        let actions = vec![CommandParams {
            velocities: vec![0.0, 0.0],
            weights: vec![200.0, 200.0],
        }];
        let plans = plans(&s, &actions);
        let inputs = KernelInputs {
            cfg: &s.cfg,
            disc: &s.disc,
            disc_sub: &s.disc_sub,
            time: &s.time,
            noise: &s.noise,
            plans: &plans,
            velocity_state_indices: &[2, 3],
            samples_per_action: 10,
            seed: 5,
            relative_frame: true,
        };
        let model =
            estimate_kernel(&inputs, &grid, KernelMode::TranslationInvariant, None).unwrap();
        assert_eq!(model.infeasible_samples, 0);
        // Pick an interior cell; nearly-zero noise keeps every sample in it.
        let flat = grid.locate(&[0.1, 0.1]).unwrap();
        let row = model.row_for(&grid, flat, 0, None).unwrap();
        assert_eq!(row.cells.len(), 1);
        let ord = grid.safe_ordinal(flat).unwrap() as u32;
        assert_eq!(row.cells[0].0, ord);
        assert!((row.cells[0].1 - 1.0).abs() < 1e-15);
        assert!((row.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one() {
        let s = setup(2.0);
        let grid = world(0.2, 0.0);
        let actions = vec![
            CommandParams {
                velocities: vec![0.3, 0.0],
                weights: vec![500.0, 500.0],
            },
            CommandParams {
                velocities: vec![-0.2, 0.25],
                weights: vec![100.0, 900.0],
            },
        ];
        let plans = plans(&s, &actions);
        let inputs = KernelInputs {
            cfg: &s.cfg,
            disc: &s.disc,
            disc_sub: &s.disc_sub,
            time: &s.time,
            noise: &s.noise,
            plans: &plans,
            velocity_state_indices: &[2, 3],
            samples_per_action: 25,
            seed: 77,
            relative_frame: true,
        };
        let model =
            estimate_kernel(&inputs, &grid, KernelMode::TranslationInvariant, None).unwrap();
        let rows = model.materialize_rows(&grid, None).unwrap();
        for per_cell in &rows {
            for row in per_cell {
                assert!((row.total_mass() - 1.0).abs() < 1e-12);
                assert!(row.p_target >= 0.0 && row.p_unsafe >= 0.0);
            }
        }
    }

    #[test]
    fn translation_invariant_rows_match_per_state_exactly() {
        let s = setup(2.0);
        // 5x5 grid, 2 actions, matched streams.
        let grid = world(0.4, 0.0);
        assert_eq!(grid.dims(), &[5, 5]);
        let actions = vec![
            CommandParams {
                velocities: vec![0.3, -0.1],
                weights: vec![400.0, 600.0],
            },
            CommandParams {
                velocities: vec![0.0, 0.2],
                weights: vec![50.0, 1000.0],
            },
        ];
        let plans = plans(&s, &actions);
        let mk_inputs = || KernelInputs {
            cfg: &s.cfg,
            disc: &s.disc,
            disc_sub: &s.disc_sub,
            time: &s.time,
            noise: &s.noise,
            plans: &plans,
            velocity_state_indices: &[2, 3],
            samples_per_action: 15,
            seed: 99,
            relative_frame: true,
        };
        let ti = estimate_kernel(&mk_inputs(), &grid, KernelMode::TranslationInvariant, None)
            .unwrap();
        let ps = estimate_kernel(&mk_inputs(), &grid, KernelMode::PerState, None).unwrap();
        let cost = CostField::Radial {
            center: vec![0.0, 0.0],
            scale: 1.0,
        };
        let ti_rows = ti.materialize_rows(&grid, Some(&cost)).unwrap();
        let ps_inputs = mk_inputs();
        let ps_cost =
            estimate_kernel(&ps_inputs, &grid, KernelMode::PerState, Some(&cost)).unwrap();
        let ps_rows = ps_cost.materialize_rows(&grid, Some(&cost)).unwrap();
        let _ = ps;
        assert_eq!(ti_rows.len(), ps_rows.len());
        for (a_rows, b_rows) in ti_rows.iter().zip(&ps_rows) {
            for (ra, rb) in a_rows.iter().zip(b_rows) {
                assert_eq!(ra.p_target, rb.p_target);
                assert_eq!(ra.p_unsafe, rb.p_unsafe);
                assert_eq!(ra.cells, rb.cells);
                assert_eq!(ra.stage_cost, rb.stage_cost);
            }
        }
    }

    #[test]
    fn absolute_frame_agrees_with_relative_to_tolerance() {
        // The relative frame is exact for inert-position systems; the
        // absolute frame must agree up to floating-point noise.
        let s = setup(2.0);
        let grid = world(0.4, 0.0);
        let actions = vec![CommandParams {
            velocities: vec![0.25, 0.1],
            weights: vec![300.0, 300.0],
        }];
        let plans = plans(&s, &actions);
        let center_cell = grid.locate(&[0.2, 0.2]).unwrap();
        let center = grid.center(center_cell);
        let anchor_rel = DVector::zeros(4);
        let mut anchor_abs = DVector::zeros(4);
        anchor_abs[0] = center[0];
        anchor_abs[1] = center[1];
        let mk = |anchor: &DVector<f64>| {
            let inputs = KernelInputs {
                cfg: &s.cfg,
                disc: &s.disc,
                disc_sub: &s.disc_sub,
                time: &s.time,
                noise: &s.noise,
                plans: &plans,
                velocity_state_indices: &[2, 3],
                samples_per_action: 1,
                seed: 123,
                relative_frame: true,
            };
            let mut rng = stream(inputs.seed, "kernel", &[0, 0]);
            sample_block(&inputs, 0, anchor, &mut rng).unwrap()
        };
        let rel = mk(&anchor_rel);
        let abs = mk(&anchor_abs);
        assert_eq!(rel.pts.len(), abs.pts.len());
        let mut worst = 0.0f64;
        for (i, (pr, pa)) in rel.pts.iter().zip(&abs.pts).enumerate() {
            // Relative path + center vs absolute path - center.
            let shifted = pr + center[i % 2];
            let absolute = pa + center[i % 2];
            worst = worst.max((shifted - absolute).abs());
        }
        assert!(worst <= 1e-9, "frame mismatch {worst}");
    }

    #[test]
    fn crafted_path_absorption_precedence() {
        // Grid: left cell safe, middle target, right unsafe obstacle.
        let bounds = HyperRect::new(dvector![0.0, 0.0], dvector![1.5, 0.5]).unwrap();
        let target = RegionSet::Rect(HyperRect::new(dvector![0.0, 0.0], dvector![0.5, 0.5]).unwrap());
        let obstacle =
            RegionSet::Rect(HyperRect::new(dvector![1.0, 0.0], dvector![0.5, 0.5]).unwrap());
        let safe = RegionSet::box_minus_obstacles(bounds.clone(), vec![obstacle]);
        let grid =
            GridAbstraction::build(&bounds, &safe, &target, 1.0, 0.0, &dvector![-1.0, 0.0])
                .unwrap();
        assert_eq!(grid.num_cells(), 3);
        assert_eq!(grid.class(0), CellClass::Safe);
        assert_eq!(grid.class(1), CellClass::Target);
        assert_eq!(grid.class(2), CellClass::Unsafe);

        // Path crossing target then the obstacle: first hit wins.
        let through_both = SamplePath {
            pts: vec![-0.5, 0.0, 0.2, 0.0, 1.2, 0.0],
            infeasible: false,
        };
        let model = TransitionModel::from_ti_parts(2, 1, 0, 0.01, vec![vec![through_both]]);
        let row = model.row_for(&grid, 0, 0, None).unwrap();
        assert_eq!(row.p_target, 1.0);
        assert_eq!(row.p_unsafe, 0.0);

        // Path leaving the safe region before touching the target.
        let through_unsafe = SamplePath {
            pts: vec![-0.5, 0.6, -0.5, 0.0, 0.2, 0.0],
            infeasible: false,
        };
        let model2 = TransitionModel::from_ti_parts(2, 1, 0, 0.01, vec![vec![through_unsafe]]);
        let row2 = model2.row_for(&grid, 0, 0, None).unwrap();
        assert_eq!(row2.p_unsafe, 1.0);

        // Infeasible sample that never absorbed counts as unsafe.
        let stalled = SamplePath {
            pts: vec![-0.4, 0.0, -0.45, 0.0],
            infeasible: true,
        };
        let model3 = TransitionModel::from_ti_parts(2, 1, 0, 0.01, vec![vec![stalled]]);
        let row3 = model3.row_for(&grid, 0, 0, None).unwrap();
        assert_eq!(row3.p_unsafe, 1.0);

        // But an infeasible sample that reached the target first is target.
        let reached = SamplePath {
            pts: vec![-0.5, 0.0, 1.3, 0.0],
            infeasible: true,
        };
        let model4 = TransitionModel::from_ti_parts(2, 1, 0, 0.01, vec![vec![reached]]);
        let row4 = model4.row_for(&grid, 0, 0, None).unwrap();
        assert_eq!(row4.p_target, 1.0);
    }

    #[test]
    fn stage_cost_integrates_until_absorption() {
        let bounds = HyperRect::new(dvector![0.0, 0.0], dvector![1.5, 0.5]).unwrap();
        let target =
            RegionSet::Rect(HyperRect::new(dvector![1.0, 0.0], dvector![0.5, 0.5]).unwrap());
        let safe = RegionSet::Rect(bounds.clone());
        let grid =
            GridAbstraction::build(&bounds, &safe, &target, 1.0, 0.0, &dvector![-1.0, 0.0])
                .unwrap();
        // Two substeps inside safe cells, then target absorption. The
        // anchor cell center is (-1, 0), so the absolute points are
        // (-1.5, 0), (-0.8, 0), then (1.2, 0) inside the target.
        let path = SamplePath {
            pts: vec![-0.5, 0.0, 0.2, 0.0, 2.2, 0.0],
            infeasible: false,
        };
        let model = TransitionModel::from_ti_parts(2, 1, 0, 0.5, vec![vec![path]]);
        let cost = CostField::Radial {
            center: vec![0.0, 0.0],
            scale: 1.0,
        };
        let row = model.row_for(&grid, 0, 0, Some(&cost)).unwrap();
        // Integral over the two safe points: (-1.5 - 0.8) * 0.5.
        assert!((row.stage_cost - (-1.15)).abs() < 1e-12);
        assert_eq!(row.p_target, 1.0);
    }
}
