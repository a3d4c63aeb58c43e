//! Reference-tracking MPC in nominal and robust flavors.
//!
//! The robust variant anchors its predictions at the center of the grid
//! cell containing the block-initial state: the initial-state constraint is
//! `z_j = x_{k,j} - A^j (x_{k,0} - c_i)`, which makes the produced input
//! sequence a function of the cell, the command, and the noise realization
//! only, never of where inside the cell the block started. That invariance
//! is what lets the outer layer treat the closed loop as a finite MDP over
//! cells.
//!
//! Problems are condensed to the input sequence (states eliminated through
//! the dynamics) and solved via [`PreparedQp`], whose factorizations depend
//! only on the command weights and the stage index, so a whole run reuses
//! one plan per command.

#![allow(clippy::too_many_arguments)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::HalfspacePolytope;
use crate::lti::{DiscreteLti, NoiseModel};
use crate::qp::{AdmmSettings, PreparedQp, QpStatus, QuadraticProgram};
use crate::tightening::{ConstraintFamily, TerminalSet};

/// Residual level under which a max-iter solve still counts as usable.
/// Exact-arithmetic feasibility is a theory property; simulation has to
/// define a numerical policy, and this is it.
const USABLE_RESIDUAL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcMode {
    Nominal,
    Robust,
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub horizon: usize,
    pub family: ConstraintFamily,
    pub input_set: HalfspacePolytope,
    pub mode: MpcMode,
    pub n_s: usize,
    /// Solver tolerance for the per-step QPs.
    pub qp_tol: f64,
    /// Axis intervals of the input set when it is a box, for exact
    /// feasibility clamping of applied inputs.
    input_intervals: Option<Vec<(f64, f64)>>,
}

impl MpcConfig {
    pub fn new(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        horizon: usize,
        family: ConstraintFamily,
        input_set: HalfspacePolytope,
        mode: MpcMode,
        n_s: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("MPC horizon must be >= 1"));
        }
        let n = q.nrows();
        if q.ncols() != n {
            return Err(Error::dim(n, q.ncols(), "Q matrix"));
        }
        if r.nrows() != r.ncols() {
            return Err(Error::dim(r.nrows(), r.ncols(), "R matrix"));
        }
        check_psd(&q, "Q")?;
        let r_min = ((&r + r.transpose()) * 0.5)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, b| a.min(*b));
        if r_min <= 1e-10 {
            return Err(Error::invalid(format!(
                "R must be positive definite (min eigenvalue {r_min:.3e})"
            )));
        }
        if family.g.dim() != n - n_s {
            return Err(Error::dim(n - n_s, family.g.dim(), "family vs state split"));
        }
        let input_intervals = input_set.as_axis_intervals();
        Ok(Self {
            q,
            r,
            horizon,
            family,
            input_set,
            mode,
            n_s,
            qp_tol: crate::qp::DEFAULT_TOL,
            input_intervals,
        })
    }

    fn n_d(&self) -> usize {
        self.family.g.dim()
    }
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let sym = (m + m.transpose()) * 0.5;
    let min = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, b| a.min(*b));
    if min < -1e-10 {
        return Err(Error::invalid(format!(
            "{name} is not PSD (min eigenvalue {min:.3e})"
        )));
    }
    Ok(())
}

/// Replaces diagonal entries of Q and re-checks positive semidefiniteness.
pub fn apply_q_override(q: &DMatrix<f64>, overrides: &[(usize, f64)]) -> Result<DMatrix<f64>> {
    let mut out = q.clone();
    for &(i, v) in overrides {
        if i >= q.nrows() {
            return Err(Error::invalid(format!("Q override index {i} out of range")));
        }
        if v < 0.0 {
            return Err(Error::invalid(format!("Q override value {v} < 0")));
        }
        out[(i, i)] = v;
    }
    check_psd(&out, "Q after command override")?;
    Ok(out)
}

/// The sampled command bundle: constant velocity references for the
/// stochastic coordinates plus cost-weight overrides for them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CommandParams {
    pub velocities: Vec<f64>,
    pub weights: Vec<f64>,
}

/// A fully instantiated reference bundle handed to the controller for one
/// outer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    /// `horizon + 1` state references.
    pub reference: Vec<DVector<f64>>,
    /// Diagonal entries of Q replaced per command.
    pub q_override: Vec<(usize, f64)>,
}

/// Builds the reference trajectory for a command anchored at a state.
///
/// Positions (the first `n_s` coordinates) integrate the constant velocity
/// from the anchor; the designated velocity states carry the commanded
/// velocity; every other reference coordinate is zero. In robust mode the
/// anchor must be the cell center, not the measured state, or the
/// cell-invariance of the input sequence breaks.
pub fn reference_from_command(
    params: &CommandParams,
    anchor_state: &DVector<f64>,
    n_s: usize,
    velocity_state_indices: &[usize],
    dt_inner: f64,
    horizon: usize,
) -> Result<Command> {
    let n = anchor_state.len();
    if params.velocities.len() != n_s || params.weights.len() != n_s {
        return Err(Error::dim(n_s, params.velocities.len(), "command params"));
    }
    if velocity_state_indices.len() != n_s {
        return Err(Error::dim(
            n_s,
            velocity_state_indices.len(),
            "velocity state indices",
        ));
    }
    if velocity_state_indices.iter().any(|&i| i >= n) {
        return Err(Error::invalid("velocity state index out of range"));
    }
    if params.weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid("command weight overrides must be >= 0"));
    }
    let mut reference = Vec::with_capacity(horizon + 1);
    for l in 0..=horizon {
        let mut r = DVector::zeros(n);
        for p in 0..n_s {
            r[p] = anchor_state[p] + params.velocities[p] * (l as f64) * dt_inner;
        }
        for (vi, &si) in velocity_state_indices.iter().enumerate() {
            r[si] = params.velocities[vi];
        }
        reference.push(r);
    }
    let q_override = (0..n_s).map(|p| (p, params.weights[p])).collect();
    Ok(Command {
        reference,
        q_override,
    })
}

/// Cell anchor for the robust initialization constraint, carrying the
/// precomputed offsets `A^j (x_{k,0} - c_i)` for the whole block.
#[derive(Debug, Clone)]
pub struct RmpcAnchor {
    pub cell_center: DVector<f64>,
    pub initial_state: DVector<f64>,
    offsets: Vec<DVector<f64>>,
}

impl RmpcAnchor {
    pub fn new(
        cell_center: DVector<f64>,
        initial_state: DVector<f64>,
        a: &DMatrix<f64>,
        horizon: usize,
        n_s: usize,
        zeta: f64,
    ) -> Result<Self> {
        if cell_center.len() != initial_state.len() {
            return Err(Error::dim(
                cell_center.len(),
                initial_state.len(),
                "anchor states",
            ));
        }
        let diff = &initial_state - &cell_center;
        let inf = (0..n_s).fold(0.0f64, |acc, i| acc.max(diff[i].abs()));
        if inf > 0.5 * zeta + 1e-9 {
            return Err(Error::invalid(format!(
                "block-initial state is not inside its anchor cell (inf distance {inf:.3e} \
                 vs half edge {:.3e})",
                0.5 * zeta
            )));
        }
        let mut offsets = Vec::with_capacity(horizon + 1);
        offsets.push(diff.clone());
        for j in 1..=horizon {
            let next = a * &offsets[j - 1];
            offsets.push(next);
        }
        Ok(Self {
            cell_center,
            initial_state,
            offsets,
        })
    }

    pub fn offset(&self, j: usize) -> &DVector<f64> {
        &self.offsets[j]
    }
}

/// Condensed transcription of one stage: decision variables are the
/// remaining inputs `v_j..v_{J-1}`.
pub struct PlanStage {
    prepared: PreparedQp,
    /// `q = m_q (phi_stack z_j - ref_stack)`.
    m_q: DMatrix<f64>,
    /// Stacked `A^1..A^h`.
    phi_stack: DMatrix<f64>,
    /// `b_in = b_in_const - rhs_mat z_j` (zero rows for input constraints).
    rhs_mat: DMatrix<f64>,
    b_in_const: DVector<f64>,
    /// `b_eq = -eq_rhs_mat z_j` under the zero terminal set.
    eq_rhs_mat: Option<DMatrix<f64>>,
    h: usize,
    n: usize,
    m: usize,
}

impl PlanStage {
    pub fn assemble(
        cfg: &MpcConfig,
        sys: &DiscreteLti,
        q_cmd: &DMatrix<f64>,
        j: usize,
    ) -> Result<Self> {
        let n = sys.dim();
        let m = sys.b.ncols();
        let n_s = cfg.n_s;
        let n_d = cfg.n_d();
        if j >= cfg.horizon {
            return Err(Error::invalid(format!(
                "stage index {j} outside horizon {}",
                cfg.horizon
            )));
        }
        let h = cfg.horizon - j;

        let mut apow: Vec<DMatrix<f64>> = Vec::with_capacity(h + 1);
        apow.push(DMatrix::identity(n, n));
        for t in 1..=h {
            let next = &apow[t - 1] * &sys.a;
            apow.push(next);
        }

        // Prediction matrix: z_{j+t} = A^t z_j + sum_i A^{t-1-i} B v_i.
        let mut s = DMatrix::zeros(h * n, h * m);
        for t in 1..=h {
            for i in 0..t {
                let block = &apow[t - 1 - i] * &sys.b;
                s.view_mut(((t - 1) * n, i * m), (n, m)).copy_from(&block);
            }
        }
        let mut phi_stack = DMatrix::zeros(h * n, n);
        for t in 1..=h {
            phi_stack
                .view_mut(((t - 1) * n, 0), (n, n))
                .copy_from(&apow[t]);
        }

        // Cost over t = 1..h (the z_j term is constant).
        let mut q_bar = DMatrix::zeros(h * n, h * n);
        for t in 0..h {
            q_bar.view_mut((t * n, t * n), (n, n)).copy_from(q_cmd);
        }
        let mut r_bar = DMatrix::zeros(h * m, h * m);
        for t in 0..h {
            r_bar.view_mut((t * m, t * m), (m, m)).copy_from(&cfg.r);
        }
        let qs = &q_bar * &s;
        let p = (s.transpose() * &qs + &r_bar) * 2.0;
        let m_q = (s.transpose() * &q_bar) * 2.0;

        let state_set = match cfg.mode {
            MpcMode::Robust => &cfg.family.g_tilde,
            MpcMode::Nominal => &cfg.family.g_hat,
        };
        let m_h = state_set.num_halfspaces();
        let u_set = &cfg.input_set;
        let m_u = u_set.num_halfspaces();

        let terminal_poly: Option<&HalfspacePolytope> = match (&cfg.family.terminal, cfg.mode) {
            (TerminalSet::Zero, _) => None,
            (TerminalSet::Polytope { robust, .. }, MpcMode::Robust) => Some(robust),
            (TerminalSet::Polytope { nominal, .. }, MpcMode::Nominal) => Some(nominal),
        };
        let term_rows = terminal_poly.map_or(0, |t| t.num_halfspaces());
        let state_rows = m_h * (h - 1);
        let n_in = state_rows + h * m_u + term_rows;

        let mut a_in = DMatrix::zeros(n_in, h * m);
        let mut rhs_mat = DMatrix::zeros(n_in, n);
        let mut b_in_const = DVector::zeros(n_in);
        let mut row = 0;

        // State constraints on z_{j+t}, t = 1..h-1 (deterministic block).
        for t in 1..h {
            let s_det = s.view(((t - 1) * n + n_s, 0), (n_d, h * m)).into_owned();
            let block = state_set.normals() * &s_det;
            a_in.view_mut((row, 0), (m_h, h * m)).copy_from(&block);
            let phi_det = apow[t].view((n_s, 0), (n_d, n)).into_owned();
            let rhs_block = state_set.normals() * &phi_det;
            rhs_mat.view_mut((row, 0), (m_h, n)).copy_from(&rhs_block);
            for i in 0..m_h {
                b_in_const[row + i] = state_set.offsets()[i];
            }
            row += m_h;
        }
        // Input constraints on every v_t.
        for t in 0..h {
            a_in.view_mut((row, t * m), (m_u, m))
                .copy_from(u_set.normals());
            for i in 0..m_u {
                b_in_const[row + i] = u_set.offsets()[i];
            }
            row += m_u;
        }
        // Terminal constraint at t = h.
        let s_term = s.view(((h - 1) * n + n_s, 0), (n_d, h * m)).into_owned();
        let phi_term = apow[h].view((n_s, 0), (n_d, n)).into_owned();
        let (a_eq, eq_rhs_mat) = match terminal_poly {
            None => {
                // Zero terminal set: equality on the deterministic block;
                // the stochastic components stay unconstrained.
                (s_term, Some(phi_term))
            }
            Some(tp) => {
                let block = tp.normals() * &s_term;
                a_in.view_mut((row, 0), (term_rows, h * m)).copy_from(&block);
                let rhs_block = tp.normals() * &phi_term;
                rhs_mat
                    .view_mut((row, 0), (term_rows, n))
                    .copy_from(&rhs_block);
                for i in 0..term_rows {
                    b_in_const[row + i] = tp.offsets()[i];
                }
                (DMatrix::zeros(0, h * m), None)
            }
        };

        let settings = AdmmSettings {
            tol: cfg.qp_tol,
            ..AdmmSettings::default()
        };
        let prepared = PreparedQp::new(p, a_eq, a_in, settings)?;
        Ok(Self {
            prepared,
            m_q,
            phi_stack,
            rhs_mat,
            b_in_const,
            eq_rhs_mat,
            h,
            n,
            m,
        })
    }

    fn q_vec(&self, z_j: &DVector<f64>, reference: &[DVector<f64>], j: usize) -> DVector<f64> {
        let mut stacked = &self.phi_stack * z_j;
        for t in 1..=self.h {
            let r = &reference[j + t];
            for i in 0..self.n {
                stacked[(t - 1) * self.n + i] -= r[i];
            }
        }
        &self.m_q * stacked
    }

    fn rhs(&self, z_j: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let b_in = &self.b_in_const - &self.rhs_mat * z_j;
        let b_eq = match &self.eq_rhs_mat {
            Some(mat) => -(mat * z_j),
            None => DVector::zeros(0),
        };
        (b_eq, b_in)
    }

    /// Objective value of a candidate input sequence (for event logs).
    pub fn objective(&self, q: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.prepared.objective_value(q, v)
    }
}

/// All prepared stages for one command's weights.
pub struct CommandPlan {
    pub params: CommandParams,
    stages: Vec<PlanStage>,
    pub horizon: usize,
}

impl CommandPlan {
    pub fn build(cfg: &MpcConfig, sys: &DiscreteLti, params: &CommandParams) -> Result<Self> {
        if params.weights.len() != cfg.n_s || params.velocities.len() != cfg.n_s {
            return Err(Error::dim(cfg.n_s, params.weights.len(), "command params"));
        }
        let overrides: Vec<(usize, f64)> =
            (0..cfg.n_s).map(|p| (p, params.weights[p])).collect();
        let q_cmd = apply_q_override(&cfg.q, &overrides)?;
        let stages = (0..cfg.horizon)
            .map(|j| PlanStage::assemble(cfg, sys, &q_cmd, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: params.clone(),
            stages,
            horizon: cfg.horizon,
        })
    }

    pub fn stage(&self, j: usize) -> &PlanStage {
        &self.stages[j]
    }
}

/// Transcribes one MPC stage as an explicit quadratic program.
///
/// Reference path for inspection and tests; the controller's hot loop uses
/// the cached [`CommandPlan`] built from the same assembly code.
pub fn build_mpc_qp(
    cfg: &MpcConfig,
    sys: &DiscreteLti,
    j: usize,
    x: &DVector<f64>,
    cmd: &Command,
    anchor: Option<&RmpcAnchor>,
) -> Result<QuadraticProgram> {
    if cmd.reference.len() != cfg.horizon + 1 {
        return Err(Error::dim(
            cfg.horizon + 1,
            cmd.reference.len(),
            "command reference length",
        ));
    }
    let q_cmd = apply_q_override(&cfg.q, &cmd.q_override)?;
    let stage = PlanStage::assemble(cfg, sys, &q_cmd, j)?;
    let z_j = initial_prediction_state(cfg.mode, j, x, anchor)?;
    let q = stage.q_vec(&z_j, &cmd.reference, j);
    let (b_eq, b_in) = stage.rhs(&z_j);
    let (p, a_eq, a_in) = stage.prepared.problem_matrices();
    Ok(QuadraticProgram::new_unchecked(p, q, a_eq, b_eq, a_in, b_in))
}

fn initial_prediction_state(
    mode: MpcMode,
    j: usize,
    x: &DVector<f64>,
    anchor: Option<&RmpcAnchor>,
) -> Result<DVector<f64>> {
    match mode {
        MpcMode::Nominal => Ok(x.clone()),
        MpcMode::Robust => {
            let anchor =
                anchor.ok_or_else(|| Error::invalid("robust mode requires a cell anchor"))?;
            if j == 0 {
                // x_{k,0} - (x_{k,0} - c_i) is exactly the center.
                Ok(anchor.cell_center.clone())
            } else {
                Ok(x - anchor.offset(j))
            }
        }
    }
}

/// Aggregate solver statistics for a run.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct MpcStats {
    pub solves: u64,
    /// Solves that needed the ADMM fallback (an inequality was active).
    pub admm_solves: u64,
    pub admm_iterations: u64,
    pub usable_max_iter: u64,
    pub clamped_inputs: u64,
    pub max_primal_residual: f64,
    pub max_dual_residual: f64,
}

impl MpcStats {
    pub fn absorb(&mut self, other: &MpcStats) {
        self.solves += other.solves;
        self.admm_solves += other.admm_solves;
        self.admm_iterations += other.admm_iterations;
        self.usable_max_iter += other.usable_max_iter;
        self.clamped_inputs += other.clamped_inputs;
        self.max_primal_residual = self.max_primal_residual.max(other.max_primal_residual);
        self.max_dual_residual = self.max_dual_residual.max(other.max_dual_residual);
    }
}

/// One controller event, streamable as JSON lines.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MpcEvent {
    pub k: usize,
    pub j: usize,
    pub status: &'static str,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub cost: f64,
}

/// Receding-horizon executor for one trajectory.
///
/// One instance per simulated trajectory; instances share immutable plans.
pub struct MpcController {
    pub cfg: Arc<MpcConfig>,
    plan: Arc<CommandPlan>,
    reference: Vec<DVector<f64>>,
    anchor: Option<RmpcAnchor>,
    warm: Option<DVector<f64>>,
    pub stats: MpcStats,
    pub record_events: bool,
    pub events: Vec<MpcEvent>,
}

impl MpcController {
    pub fn new(cfg: Arc<MpcConfig>, plan: Arc<CommandPlan>, command: Command) -> Result<Self> {
        if command.reference.len() != cfg.horizon + 1 {
            return Err(Error::dim(
                cfg.horizon + 1,
                command.reference.len(),
                "command reference length",
            ));
        }
        Ok(Self {
            cfg,
            plan,
            reference: command.reference,
            anchor: None,
            warm: None,
            stats: MpcStats::default(),
            record_events: false,
            events: Vec::new(),
        })
    }

    /// Installs the command plan, reference, and anchor for a new block.
    pub fn begin_block(
        &mut self,
        plan: Arc<CommandPlan>,
        command: Command,
        anchor: Option<RmpcAnchor>,
    ) -> Result<()> {
        if command.reference.len() != self.cfg.horizon + 1 {
            return Err(Error::dim(
                self.cfg.horizon + 1,
                command.reference.len(),
                "command reference length",
            ));
        }
        if self.cfg.mode == MpcMode::Robust && anchor.is_none() {
            return Err(Error::invalid("robust mode requires a cell anchor"));
        }
        self.plan = plan;
        self.reference = command.reference;
        self.anchor = anchor;
        self.warm = None;
        Ok(())
    }

    /// Solves the stage-`j` problem and returns the input to hold over the
    /// next inner interval.
    pub fn step(&mut self, k: usize, j: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        if j >= self.cfg.horizon {
            return Err(Error::invalid(format!(
                "inner step {j} outside horizon {}",
                self.cfg.horizon
            )));
        }
        let z_j = initial_prediction_state(self.cfg.mode, j, x, self.anchor.as_ref())?;

        // The fixed initial prediction state must itself satisfy the stage
        // constraint set; recursive feasibility guarantees it, so a
        // violation is a theory-violation event.
        let state_set = match self.cfg.mode {
            MpcMode::Robust => &self.cfg.family.g_tilde,
            MpcMode::Nominal => &self.cfg.family.g_hat,
        };
        let z_det = z_j.rows(self.cfg.n_s, self.cfg.n_d()).into_owned();
        let margin = state_set.margin(&z_det);
        if margin < -1e-6 {
            return Err(Error::MpcInfeasible {
                k,
                j,
                state: x.iter().copied().collect(),
                primal_residual: -margin,
                dual_residual: 0.0,
            });
        }

        let stage = self.plan.stage(j);
        let q = stage.q_vec(&z_j, &self.reference, j);
        let (b_eq, b_in) = stage.rhs(&z_j);
        let warm = match &self.warm {
            Some(w) if w.len() == stage.h * stage.m => Some(w),
            _ => None,
        };
        let sol = stage.prepared.solve(&q, &b_eq, &b_in, warm);

        self.stats.solves += 1;
        if sol.iterations > 0 {
            self.stats.admm_solves += 1;
            self.stats.admm_iterations += sol.iterations as u64;
        }
        self.stats.max_primal_residual = self.stats.max_primal_residual.max(sol.primal_residual);
        self.stats.max_dual_residual = self.stats.max_dual_residual.max(sol.dual_residual);

        let usable = match sol.status {
            QpStatus::Optimal => true,
            QpStatus::MaxIter
                if sol.primal_residual <= USABLE_RESIDUAL
                    && sol.dual_residual <= USABLE_RESIDUAL =>
            {
                self.stats.usable_max_iter += 1;
                true
            }
            _ => false,
        };
        if self.record_events {
            self.events.push(MpcEvent {
                k,
                j,
                status: match sol.status {
                    QpStatus::Optimal => "optimal",
                    QpStatus::Infeasible => "infeasible",
                    QpStatus::MaxIter => "max-iter",
                },
                iterations: sol.iterations,
                primal_residual: sol.primal_residual,
                dual_residual: sol.dual_residual,
                cost: stage.objective(&q, &sol.z),
            });
        }
        if !usable {
            return Err(Error::MpcInfeasible {
                k,
                j,
                state: x.iter().copied().collect(),
                primal_residual: sol.primal_residual,
                dual_residual: sol.dual_residual,
            });
        }

        let mut u = sol.z.rows(0, stage.m).into_owned();
        // Applied inputs are exactly feasible for box input sets.
        if let Some(intervals) = &self.cfg.input_intervals {
            let mut clamped = false;
            for (i, &(lo, hi)) in intervals.iter().enumerate() {
                let c = u[i].clamp(lo, hi);
                if c != u[i] {
                    clamped = true;
                    u[i] = c;
                }
            }
            if clamped {
                self.stats.clamped_inputs += 1;
            }
        }
        // Shift the remaining solution as the next stage's warm start.
        let v = sol.z;
        self.warm = if v.len() > stage.m {
            Some(v.rows(stage.m, v.len() - stage.m).into_owned())
        } else {
            None
        };
        Ok(u)
    }
}

/// Result of running one outer block.
pub struct BlockRun {
    pub end_state: DVector<f64>,
    pub inputs: Vec<DVector<f64>>,
}

/// Fine-step context shared by every block simulation in a run.
pub struct BlockContext<'a> {
    /// Substep discretization (step = sim_step).
    pub disc_sub: &'a DiscreteLti,
    pub substeps_per_inner: usize,
    pub horizon: usize,
    pub noise: Option<&'a NoiseModel>,
}

/// Simulates one outer block under the controller, invoking `on_substep`
/// after every substep (the block-initial state is not reported).
pub fn run_block<R: Rng>(
    ctrl: &mut MpcController,
    ctx: &BlockContext,
    k: usize,
    x0: &DVector<f64>,
    rng: &mut R,
    mut on_substep: impl FnMut(&DVector<f64>),
) -> Result<BlockRun> {
    let mut x = x0.clone();
    let mut next = x.clone();
    let mut inputs = Vec::with_capacity(ctx.horizon);
    for j in 0..ctx.horizon {
        let u = ctrl.step(k, j, &x)?;
        for _ in 0..ctx.substeps_per_inner {
            let w = ctx.noise.map(|nm| nm.sample(rng));
            ctx.disc_sub.step_into(&x, &u, w.as_ref(), &mut next);
            std::mem::swap(&mut x, &mut next);
            on_substep(&x);
        }
        inputs.push(u);
    }
    Ok(BlockRun {
        end_state: x,
        inputs,
    })
}
