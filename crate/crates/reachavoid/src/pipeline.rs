//! End-to-end orchestration: discretize, tighten, grid, sample commands,
//! estimate the kernel, run the robust recursion, evaluate the policy in
//! closed loop, and write reports.
//!
//! Every stochastic stage draws from streams derived from the manifest
//! seed, so a manifest fully determines the run: re-running with the same
//! scenario and seed reproduces every number bit for bit (wall times
//! aside).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{
    execute_policy, pareto_sweep, robust_value_iteration, DpModel, ParetoPoint, Policy,
    ValueTable,
};
use crate::error::{Error, Result};
use crate::grid::{GridAbstraction, NeighborhoodIndex};
use crate::kernel::{estimate_kernel, KernelInputs, KernelMode, TransitionModel};
use crate::lti::{discretize, DiscreteLti};
use crate::mpc::{
    reference_from_command, run_block, BlockContext, CommandParams, CommandPlan, MpcConfig,
    MpcController, MpcMode, RmpcAnchor,
};
use crate::persist;
use crate::rng::stream;
use crate::scenario::{sample_commands, scenario_hash, Scenario, TerminalSpec};
use crate::stats::{clopper_pearson_interval, clopper_pearson_upper};
use crate::tightening::{
    build_constraint_family, compute_eta, tube_radius, validate_terminal_invariance,
    TerminalMode, TighteningParams,
};

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub certificate_mode: bool,
    pub seed_override: Option<u64>,
    /// How many evaluation trajectories to keep (decimated to the inner
    /// step) for the report files.
    pub store_trajectories: usize,
}

/// Everything derived deterministically from the scenario before any
/// sampling happens.
pub struct Prepared {
    pub scenario_hash: String,
    pub seed: u64,
    pub disc: DiscreteLti,
    pub disc_sub: DiscreteLti,
    pub params: TighteningParams,
    pub cfg: Arc<MpcConfig>,
    pub grid: GridAbstraction,
    pub nb: NeighborhoodIndex,
    pub actions: Vec<CommandParams>,
    pub plans: Vec<Arc<CommandPlan>>,
    pub kernel_mode: KernelMode,
    pub wall_times: BTreeMap<String, f64>,
}

fn timeit<T>(times: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> T) -> T {
    let t0 = Instant::now();
    let out = f();
    times.insert(stage.to_string(), t0.elapsed().as_secs_f64());
    out
}

pub fn prepare(sc: &Scenario, opts: &PipelineOptions) -> Result<Prepared> {
    let mut wall_times = BTreeMap::new();
    if opts.certificate_mode && !sc.warnings.is_empty() {
        return Err(Error::CertificateViolation(sc.warnings.join("; ")));
    }
    let seed = opts.seed_override.unwrap_or(sc.file.seed);

    let (disc, disc_sub) = timeit(&mut wall_times, "discretize", || {
        let a = discretize(&sc.sys, sc.time.dt_inner());
        let b = discretize(&sc.sys, sc.time.sim_step());
        a.and_then(|a| b.map(|b| (a, b)))
    })
    .map_err(|e| e.in_stage("discretize"))?;

    let zeta = sc.file.grid.cell_edge;
    let (params, family) = timeit(&mut wall_times, "tighten", || {
        let (eta, kappa_x, kappa_u) =
            compute_eta(&sc.sys, &sc.g_d, sc.time.dt_inner(), sc.file.system.kappa_x)?;
        let r = tube_radius(&sc.sys, sc.time.dt_outer(), zeta);
        let params = TighteningParams {
            eta,
            kappa_x,
            kappa_u,
            r,
            zeta,
        };
        let mode = match &sc.file.mpc.terminal {
            TerminalSpec::ZeroSet => TerminalMode::ZeroSet,
            TerminalSpec::Polytope(p) => TerminalMode::ValidatedPolytope(p.build()?),
        };
        let family = build_constraint_family(&sc.g_d, &params, &mode)?;
        if let TerminalMode::ValidatedPolytope(term) = &mode {
            let ok = validate_terminal_invariance(
                term,
                &disc.a4(),
                &disc.b2(),
                &family.g_tilde,
                sc.sys.input_set(),
                params.r + 0.5 * zeta,
            )?;
            if !ok {
                return Err(Error::CertificateViolation(
                    "terminal polytope is not robust control invariant".into(),
                ));
            }
        }
        Ok::<_, Error>((params, family))
    })
    .map_err(|e| e.in_stage("tighten"))?;

    let q = DMatrix::from_diagonal(&DVector::from_vec(sc.file.mpc.q_diag.clone()));
    let r_w = DMatrix::from_diagonal(&DVector::from_vec(sc.file.mpc.r_diag.clone()));
    let mode = match sc.file.mpc.mode {
        crate::scenario::ModeSpec::Robust => MpcMode::Robust,
        crate::scenario::ModeSpec::Nominal => MpcMode::Nominal,
    };
    let cfg = Arc::new(
        MpcConfig::new(
            q,
            r_w,
            sc.time.inner_steps,
            family,
            sc.sys.input_set().clone(),
            mode,
            sc.sys.n_s(),
        )
        .map_err(|e| e.in_stage("tighten"))?,
    );

    let grid = timeit(&mut wall_times, "grid", || {
        let x0_s = DVector::from_iterator(
            sc.sys.n_s(),
            sc.x0.iter().take(sc.sys.n_s()).copied(),
        );
        GridAbstraction::build(
            &sc.bounds,
            &sc.safe_set,
            &sc.target_set,
            zeta,
            params.r,
            &x0_s,
        )
    })
    .map_err(|e| e.in_stage("grid"))?;
    let nb =
        NeighborhoodIndex::build(&grid, params.r).map_err(|e| e.in_stage("grid"))?;

    let (actions, plans) = timeit(&mut wall_times, "commands", || {
        let actions = sample_commands(&sc.file.commands, sc.sys.n_s(), seed)?;
        let plans: Vec<Result<Arc<CommandPlan>>> = actions
            .par_iter()
            .map(|p| CommandPlan::build(&cfg, &disc, p).map(Arc::new))
            .collect();
        let plans = plans.into_iter().collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>((actions, plans))
    })
    .map_err(|e| e.in_stage("commands"))?;

    let inert = sc.sys.all_stochastic_columns_inert();
    let kernel_mode = if inert && mode == MpcMode::Robust {
        KernelMode::TranslationInvariant
    } else {
        KernelMode::PerState
    };

    Ok(Prepared {
        scenario_hash: scenario_hash(&sc.file),
        seed,
        disc,
        disc_sub,
        params,
        cfg,
        grid,
        nb,
        actions,
        plans,
        kernel_mode,
        wall_times,
    })
}

/// Content identity of the kernel estimation inputs; the estimation is
/// deterministic given these, so they identify the model.
pub fn model_hash(prep: &Prepared, samples_per_action: usize) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(prep.grid.content_hash().as_bytes());
    h.update(prep.scenario_hash.as_bytes());
    h.update(prep.seed.to_le_bytes());
    h.update((samples_per_action as u64).to_le_bytes());
    h.update((prep.actions.len() as u64).to_le_bytes());
    h.update(match prep.kernel_mode {
        KernelMode::TranslationInvariant => [1u8],
        KernelMode::PerState => [2u8],
    });
    crate::grid::hex_string(&h.finalize())
}

/// Loads the kernel from cache when the header matches, else estimates it
/// (and stores it when a cache directory is configured).
pub fn estimate_or_load_kernel(
    sc: &Scenario,
    prep: &Prepared,
    opts: &PipelineOptions,
) -> Result<(TransitionModel, bool)> {
    let k = sc.file.kernel.samples_per_action;
    let cache_path = opts.cache_dir.as_ref().map(|dir| {
        dir.join(format!(
            "{}-kernel-{}.bin",
            sc.file.name,
            &model_hash(prep, k)[..16]
        ))
    });
    if let Some(path) = &cache_path {
        if path.exists() {
            match persist::load_kernel(path) {
                Ok((header, model)) => {
                    if header.grid_hash == prep.grid.content_hash()
                        && header.scenario_hash == prep.scenario_hash
                        && header.seed == prep.seed
                        && header.samples_per_action == k
                        && header.num_actions == prep.actions.len()
                        && header.tightening == prep.params
                    {
                        return Ok((model, true));
                    }
                }
                Err(_) => {
                    // Stale or corrupt cache entry: fall through and rebuild.
                }
            }
        }
    }
    let inputs = KernelInputs {
        cfg: &prep.cfg,
        disc: &prep.disc,
        disc_sub: &prep.disc_sub,
        time: &sc.time,
        noise: &sc.noise,
        plans: &prep.plans,
        velocity_state_indices: &sc.velocity_state_indices,
        samples_per_action: k,
        seed: prep.seed,
        relative_frame: sc.sys.all_stochastic_columns_inert(),
    };
    let cost = sc.file.constrained.as_ref().map(|c| c.cost.build());
    let model = estimate_kernel(&inputs, &prep.grid, prep.kernel_mode, cost.as_ref())?;
    if opts.certificate_mode && model.infeasible_samples > 0 {
        return Err(Error::CertificateViolation(format!(
            "{} kernel samples hit controller infeasibility",
            model.infeasible_samples
        )));
    }
    if let Some(path) = &cache_path {
        if model.mode == KernelMode::TranslationInvariant {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let header = persist::KernelHeader {
                grid_hash: prep.grid.content_hash(),
                scenario_hash: prep.scenario_hash.clone(),
                seed: prep.seed,
                samples_per_action: k,
                num_actions: prep.actions.len(),
                n_s: sc.sys.n_s(),
                sim_step: sc.time.sim_step(),
                tightening: prep.params,
                software_version: crate::VERSION.into(),
            };
            persist::save_kernel(path, &header, &model)?;
        }
    }
    Ok((model, false))
}

/// Per-row sampling-uncertainty summary (target-mass Clopper-Pearson
/// intervals). Informational only: the certified bound makes no claim
/// about the statistical estimation error.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RowCiSummary {
    pub confidence: f64,
    pub rows: usize,
    pub mean_halfwidth: f64,
    pub max_halfwidth: f64,
}

pub fn row_ci_summary(rows: &[Vec<crate::kernel::ProbRow>], k: usize) -> RowCiSummary {
    let confidence = 0.95;
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for per_cell in rows {
        for row in per_cell {
            let successes = (row.p_target * k as f64).round() as u64;
            let (lo, hi) = clopper_pearson_interval(successes, k as u64, confidence);
            let half = 0.5 * (hi - lo);
            sum += half;
            max = max.max(half);
            n += 1;
        }
    }
    RowCiSummary {
        confidence,
        rows: n,
        mean_halfwidth: if n > 0 { sum / n as f64 } else { 0.0 },
        max_halfwidth: max,
    }
}

/// One evaluation trajectory kept for the reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trial: usize,
    pub success: bool,
    /// States at the inner-step marks, starting with t = 0.
    pub states: Vec<Vec<f64>>,
    /// Applied input per inner step.
    pub inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: u64,
    pub successes: u64,
    pub v_hat: f64,
    pub ci95: (f64, f64),
    /// One-sided 99% upper confidence bound on the true reach-avoid
    /// probability.
    pub upper99: f64,
    pub g_violations: u64,
    pub infeasibility_events: u64,
    pub max_terminal_det_norm: f64,
    pub trial_success: Vec<bool>,
    /// First-hit time of the decided outcome, when decided.
    pub outcome_times: Vec<Option<f64>>,
    /// Command index taken per block (-1 once the abstraction absorbed).
    pub commands_taken: Vec<Vec<i64>>,
    pub trajectories: Vec<TrajectoryRecord>,
}

struct TrialOutput {
    success: bool,
    outcome_time: Option<f64>,
    g_violations: u64,
    infeasible: bool,
    max_terminal_det_norm: f64,
    commands: Vec<i64>,
    record: Option<TrajectoryRecord>,
}

/// First-hit reach-avoid judgement: entering the target wins even if the
/// same trajectory later leaves the safe set; leaving the safe set first
/// loses even if the target comes later.
fn update_outcome(
    outcome: &mut Option<(bool, f64)>,
    target: &crate::geometry::RegionSet,
    safe: &crate::geometry::RegionSet,
    x_s: &DVector<f64>,
    t: f64,
) {
    if outcome.is_some() {
        return;
    }
    if target.contains_slice(x_s) {
        *outcome = Some((true, t));
    } else if !safe.contains_slice(x_s) {
        *outcome = Some((false, t));
    }
}

impl crate::geometry::RegionSet {
    fn contains_slice(&self, x: &DVector<f64>) -> bool {
        self.contains(x).unwrap_or(false)
    }
}

fn run_trial(
    sc: &Scenario,
    prep: &Prepared,
    policy: &Policy,
    trial: usize,
    seed: u64,
    keep_trajectory: bool,
) -> Result<TrialOutput> {
    let n_s = sc.sys.n_s();
    let n = sc.sys.dim();
    let big_n = sc.time.outer_steps;
    let big_j = sc.time.inner_steps;
    let substeps = sc.time.substeps_per_inner;
    let mut rng = stream(seed, "eval", &[trial as u64]);

    let mut x = sc.x0.clone();
    let mut x_s = DVector::from_iterator(n_s, x.iter().take(n_s).copied());
    let mut outcome: Option<(bool, f64)> = None;
    update_outcome(&mut outcome, &sc.target_set, &sc.safe_set, &x_s, 0.0);

    let mut g_violations = 0u64;
    let mut max_term = 0.0f64;
    let mut commands = Vec::with_capacity(big_n);
    let mut mdp_absorbed = false;
    let mut current_action = 0usize;
    let mut states_dec: Vec<Vec<f64>> = Vec::new();
    let mut inputs_rec: Vec<Vec<f64>> = Vec::new();
    if keep_trajectory {
        states_dec.push(x.iter().copied().collect());
    }
    let mut ctrl: Option<MpcController> = None;
    let mut infeasible = false;

    'blocks: for k in 0..big_n {
        for d in 0..n_s {
            x_s[d] = x[d];
        }
        if !mdp_absorbed {
            match execute_policy(policy, &prep.grid, &x_s, k) {
                Some(a) => current_action = a,
                None => mdp_absorbed = true,
            }
        }
        // Anchor at the cell center when the state is on the grid; an
        // absorbed or off-grid state anchors at itself (outcome already
        // decided, the controller just keeps flying).
        let anchor_center = match prep.grid.locate(x_s.as_slice()) {
            Some(flat) => {
                let c = prep.grid.center(flat);
                let mut full = DVector::zeros(n);
                for d in 0..n_s {
                    full[d] = c[d];
                }
                full
            }
            None => x.clone(),
        };
        let plan = prep.plans[current_action].clone();
        let cmd_anchor = match prep.cfg.mode {
            MpcMode::Robust => &anchor_center,
            MpcMode::Nominal => &x,
        };
        let cmd = reference_from_command(
            &plan.params,
            cmd_anchor,
            n_s,
            &sc.velocity_state_indices,
            sc.time.dt_inner(),
            big_j,
        )?;
        let anchor = match prep.cfg.mode {
            MpcMode::Robust => Some(RmpcAnchor::new(
                anchor_center.clone(),
                x.clone(),
                &prep.disc.a,
                big_j,
                n_s,
                prep.params.zeta,
            )?),
            MpcMode::Nominal => None,
        };
        let c = match &mut ctrl {
            Some(c) => {
                c.begin_block(plan, cmd, anchor)?;
                c
            }
            None => {
                let mut fresh = MpcController::new(prep.cfg.clone(), plan.clone(), cmd.clone())?;
                fresh.begin_block(plan, cmd, anchor)?;
                ctrl.insert(fresh)
            }
        };
        commands.push(if mdp_absorbed { -1 } else { current_action as i64 });

        let ctx = BlockContext {
            disc_sub: &prep.disc_sub,
            substeps_per_inner: substeps,
            horizon: big_j,
            noise: Some(&sc.noise),
        };
        let mut substep = 0usize;
        let n_d = n - n_s;
        let result = run_block(c, &ctx, k, &x, &mut rng, |xs| {
            substep += 1;
            let t = sc.time.time_at(k, 0, substep);
            let pos = DVector::from_iterator(n_s, xs.iter().take(n_s).copied());
            update_outcome(&mut outcome, &sc.target_set, &sc.safe_set, &pos, t);
            // Hard constraint monitoring on the deterministic block.
            let xd = xs.rows(n_s, n_d);
            let mut worst = f64::INFINITY;
            for i in 0..sc.g_d.num_halfspaces() {
                let slack =
                    sc.g_d.offsets()[i] - sc.g_d.normals().row(i).transpose().dot(&xd);
                worst = worst.min(slack);
            }
            if worst < 0.0 {
                g_violations += 1;
            }
            if keep_trajectory && substep % substeps == 0 {
                states_dec.push(xs.iter().copied().collect());
            }
        });
        match result {
            Ok(run) => {
                x = run.end_state;
                if keep_trajectory {
                    for u in &run.inputs {
                        inputs_rec.push(u.iter().copied().collect());
                    }
                }
            }
            Err(Error::MpcInfeasible { k: ik, j: ij, .. }) => {
                infeasible = true;
                let t = sc.time.time_at(ik, ij, 0);
                if outcome.is_none() {
                    outcome = Some((false, t));
                }
                break 'blocks;
            }
            Err(e) => return Err(e),
        }
        let term_norm = (n_s..n).fold(0.0f64, |m, i| m.max(x[i].abs()));
        max_term = max_term.max(term_norm);
    }

    let success = outcome.map(|(s, _)| s).unwrap_or(false);
    Ok(TrialOutput {
        success,
        outcome_time: outcome.map(|(_, t)| t),
        g_violations,
        infeasible,
        max_terminal_det_norm: max_term,
        commands,
        record: if keep_trajectory {
            Some(TrajectoryRecord {
                trial,
                success,
                states: states_dec,
                inputs: inputs_rec,
            })
        } else {
            None
        },
    })
}

/// Closed-loop Monte-Carlo evaluation of a policy.
pub fn evaluate_policy(
    sc: &Scenario,
    prep: &Prepared,
    policy: &Policy,
    trials: usize,
    seed: u64,
    opts: &PipelineOptions,
) -> Result<EvalReport> {
    if policy.horizon() != sc.time.outer_steps {
        return Err(Error::invalid(format!(
            "policy horizon {} vs scenario outer steps {}",
            policy.horizon(),
            sc.time.outer_steps
        )));
    }
    let keep = opts.store_trajectories;
    let results: Vec<Result<TrialOutput>> = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(sc, prep, policy, t, seed, t < keep))
        .collect();
    let mut successes = 0u64;
    let mut g_violations = 0u64;
    let mut infeasibility_events = 0u64;
    let mut max_term = 0.0f64;
    let mut trial_success = Vec::with_capacity(trials);
    let mut outcome_times = Vec::with_capacity(trials);
    let mut commands_taken = Vec::with_capacity(trials);
    let mut trajectories = Vec::new();
    for r in results {
        let out = r?;
        if out.success {
            successes += 1;
        }
        if out.infeasible {
            infeasibility_events += 1;
        }
        g_violations += out.g_violations;
        max_term = max_term.max(out.max_terminal_det_norm);
        trial_success.push(out.success);
        outcome_times.push(out.outcome_time);
        commands_taken.push(out.commands);
        if let Some(rec) = out.record {
            trajectories.push(rec);
        }
    }
    if opts.certificate_mode && infeasibility_events > 0 {
        return Err(Error::CertificateViolation(format!(
            "{infeasibility_events} evaluation trials hit controller infeasibility"
        )));
    }
    let (v_hat, ci95, upper99) = if trials > 0 {
        (
            successes as f64 / trials as f64,
            clopper_pearson_interval(successes, trials as u64, 0.95),
            clopper_pearson_upper(successes, trials as u64, 0.99),
        )
    } else {
        (0.0, (0.0, 1.0), 1.0)
    };
    Ok(EvalReport {
        trials: trials as u64,
        successes,
        v_hat,
        ci95,
        upper99,
        g_violations,
        infeasibility_events,
        max_terminal_det_norm: max_term,
        trial_success,
        outcome_times,
        commands_taken,
        trajectories,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_name: String,
    pub scenario_hash: String,
    pub grid_hash: String,
    pub model_hash: String,
    pub software_version: String,
    pub seed: u64,
    pub certificate_mode: bool,
    pub samples_per_action: usize,
    pub num_actions: usize,
    pub cell_edge: f64,
    pub kernel_mode: String,
    pub kernel_cache_hit: bool,
    pub tightening: TighteningParams,
    pub grid_dims: Vec<usize>,
    pub num_cells: usize,
    pub num_safe: usize,
    pub num_target: usize,
    pub v_tilde_0: f64,
    pub v_hat_0: f64,
    pub eval_trials: u64,
    pub eval_successes: u64,
    pub ci95: (f64, f64),
    pub upper99: f64,
    /// Whether the certified bound sits below the one-sided 99% upper
    /// confidence bound of the empirical estimate.
    pub bound_holds_at_99: bool,
    pub kernel_infeasible_samples: u64,
    pub eval_infeasibility_events: u64,
    pub eval_g_violations: u64,
    pub max_terminal_det_norm: f64,
    pub row_ci: RowCiSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pareto: Option<Vec<ParetoPoint>>,
    /// Stage wall-clock seconds; excluded from determinism comparisons.
    pub wall_times: BTreeMap<String, f64>,
}

pub struct PipelineOutput {
    pub manifest: RunManifest,
    pub grid_hash: String,
    pub value: ValueTable,
    pub policy: Policy,
    pub eval: EvalReport,
    pub pareto: Option<Vec<ParetoPoint>>,
}

/// The full pipeline. Writes artifacts and reports into `opts.out_dir`
/// when set.
pub fn run_pipeline(sc: &Scenario, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let mut prep = prepare(sc, opts)?;
    let mut wall_times = std::mem::take(&mut prep.wall_times);

    let (model, cache_hit) = timeit(&mut wall_times, "kernel", || {
        estimate_or_load_kernel(sc, &prep, opts)
    })
    .map_err(|e| e.in_stage("kernel"))?;

    let cost = sc.file.constrained.as_ref().map(|c| c.cost.build());
    let (rows, value, policy) = timeit(&mut wall_times, "solve", || {
        let rows = model.materialize_rows(&prep.grid, cost.as_ref())?;
        let dp_model = DpModel::new(rows.clone())?;
        let (value, policy) =
            robust_value_iteration(&dp_model, &prep.grid, &prep.nb, sc.time.outer_steps);
        Ok::<_, Error>((rows, value, policy))
    })
    .map_err(|e| e.in_stage("solve"))?;
    let v_tilde_0 = value.initial_value(&prep.grid);

    let eval = timeit(&mut wall_times, "eval", || {
        evaluate_policy(sc, &prep, &policy, sc.file.eval.trials, prep.seed, opts)
    })
    .map_err(|e| e.in_stage("eval"))?;

    let pareto = timeit(&mut wall_times, "constrained", || {
        match &sc.file.constrained {
            None => Ok::<_, Error>(None),
            Some(cspec) => {
                let dp_model = DpModel::new(rows.clone())?;
                let terminal = vec![0.0; prep.grid.num_safe()];
                let pts = pareto_sweep(
                    &dp_model,
                    &prep.grid,
                    cspec.alpha,
                    &terminal,
                    &cspec.kappas,
                    sc.time.outer_steps,
                )?;
                Ok(Some(pts))
            }
        }
    })
    .map_err(|e| e.in_stage("constrained"))?;

    let mhash = model_hash(&prep, sc.file.kernel.samples_per_action);
    let manifest = RunManifest {
        scenario_name: sc.file.name.clone(),
        scenario_hash: prep.scenario_hash.clone(),
        grid_hash: prep.grid.content_hash(),
        model_hash: mhash.clone(),
        software_version: crate::VERSION.into(),
        seed: prep.seed,
        certificate_mode: opts.certificate_mode,
        samples_per_action: sc.file.kernel.samples_per_action,
        num_actions: prep.actions.len(),
        cell_edge: sc.file.grid.cell_edge,
        kernel_mode: match prep.kernel_mode {
            KernelMode::TranslationInvariant => "translation-invariant".into(),
            KernelMode::PerState => "per-state".into(),
        },
        kernel_cache_hit: cache_hit,
        tightening: prep.params,
        grid_dims: prep.grid.dims().to_vec(),
        num_cells: prep.grid.num_cells(),
        num_safe: prep.grid.num_safe(),
        num_target: prep.grid.num_target(),
        v_tilde_0,
        v_hat_0: eval.v_hat,
        eval_trials: eval.trials,
        eval_successes: eval.successes,
        ci95: eval.ci95,
        upper99: eval.upper99,
        bound_holds_at_99: v_tilde_0 <= eval.upper99 + 1e-12,
        kernel_infeasible_samples: model.infeasible_samples,
        eval_infeasibility_events: eval.infeasibility_events,
        eval_g_violations: eval.g_violations,
        max_terminal_det_norm: eval.max_terminal_det_norm,
        row_ci: row_ci_summary(&rows, sc.file.kernel.samples_per_action),
        pareto: pareto.clone(),
        wall_times,
    };

    if let Some(out_dir) = &opts.out_dir {
        emit_reports(out_dir, sc, &prep, &manifest, &value, &policy, &eval, &pareto)?;
    }

    Ok(PipelineOutput {
        manifest,
        grid_hash: prep.grid.content_hash(),
        value,
        policy,
        eval,
        pareto,
    })
}

/// Writes the manifest, artifacts and every plot-ready CSV.
#[allow(clippy::too_many_arguments)]
pub fn emit_reports(
    out_dir: &Path,
    sc: &Scenario,
    prep: &Prepared,
    manifest: &RunManifest,
    value: &ValueTable,
    policy: &Policy,
    eval: &EvalReport,
    pareto: &Option<Vec<ParetoPoint>>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;

    // Results table, one row per evaluated scenario run.
    let mut table = String::from("scenario,v_tilde_0,v_hat_0,ci_lo,ci_hi,successes,trials\n");
    if eval.trials > 0 {
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            manifest.scenario_name,
            manifest.v_tilde_0,
            eval.v_hat,
            eval.ci95.0,
            eval.ci95.1,
            eval.successes,
            eval.trials
        ));
    }
    std::fs::write(out_dir.join("table.csv"), table)?;

    // Stage-0 value field over safe cell centers.
    let mut field = String::new();
    for d in 0..prep.grid.ndim() {
        field.push_str(&format!("c{d},"));
    }
    field.push_str("value\n");
    for (ord, &flat) in prep.grid.safe_cells().iter().enumerate() {
        let c = prep.grid.center(flat);
        for v in c.iter() {
            field.push_str(&format!("{v},"));
        }
        field.push_str(&format!("{}\n", value.stages[0][ord]));
    }
    std::fs::write(out_dir.join("value_field.csv"), field)?;

    // Pareto sweep.
    let mut pcsv = String::from("kappa,expected_cost,reach_prob,objective\n");
    if let Some(points) = pareto {
        for p in points {
            pcsv.push_str(&format!(
                "{},{},{},{}\n",
                p.kappa, p.expected_cost, p.reach_prob, p.objective
            ));
        }
    }
    std::fs::write(out_dir.join("pareto.csv"), pcsv)?;

    // Geometry outline for plot overlays.
    std::fs::write(
        out_dir.join("geometry.json"),
        serde_json::to_string_pretty(&sc.file.geometry)?,
    )?;

    // Evaluation summary without the bulky trajectories.
    #[derive(Serialize)]
    struct EvalSummary<'a> {
        trials: u64,
        successes: u64,
        v_hat: f64,
        ci95: (f64, f64),
        upper99: f64,
        g_violations: u64,
        infeasibility_events: u64,
        max_terminal_det_norm: f64,
        trial_success: &'a [bool],
        outcome_times: &'a [Option<f64>],
        commands_taken: &'a [Vec<i64>],
    }
    std::fs::write(
        out_dir.join("eval.json"),
        serde_json::to_string_pretty(&EvalSummary {
            trials: eval.trials,
            successes: eval.successes,
            v_hat: eval.v_hat,
            ci95: eval.ci95,
            upper99: eval.upper99,
            g_violations: eval.g_violations,
            infeasibility_events: eval.infeasibility_events,
            max_terminal_det_norm: eval.max_terminal_det_norm,
            trial_success: &eval.trial_success,
            outcome_times: &eval.outcome_times,
            commands_taken: &eval.commands_taken,
        })?,
    )?;

    // Decimated per-trial trajectories.
    let traj_dir = out_dir.join("trajectories");
    std::fs::create_dir_all(&traj_dir)?;
    for rec in &eval.trajectories {
        let mut csv = String::from("t");
        let n = sc.sys.dim();
        let m = sc.sys.input_dim();
        for i in 0..n {
            csv.push_str(&format!(",x{i}"));
        }
        for i in 0..m {
            csv.push_str(&format!(",u{i}"));
        }
        csv.push('\n');
        for (row, state) in rec.states.iter().enumerate() {
            let t = sc.time.dt_inner() * row as f64;
            csv.push_str(&format!("{t}"));
            for v in state {
                csv.push_str(&format!(",{v}"));
            }
            // Input applied over the interval that starts here.
            if row < rec.inputs.len() {
                for v in &rec.inputs[row] {
                    csv.push_str(&format!(",{v}"));
                }
            } else {
                for _ in 0..m {
                    csv.push(',');
                }
            }
            csv.push('\n');
        }
        std::fs::write(
            traj_dir.join(format!("trial_{:04}.csv", rec.trial)),
            csv,
        )?;
    }

    // Value table and policy artifact.
    let header = persist::ValueHeader {
        grid_hash: manifest.grid_hash.clone(),
        model_hash: manifest.model_hash.clone(),
        n_stages: value.horizon(),
        num_safe: prep.grid.num_safe(),
        kappa: None,
        software_version: crate::VERSION.into(),
    };
    persist::save_value_policy(&out_dir.join("value_policy.bin"), &header, value, policy)?;
    Ok(())
}

/// Maps an error to the process exit code contract.
pub fn exit_code_for(err: &Error) -> i32 {
    fn base(err: &Error) -> i32 {
        match err {
            Error::Scenario(_) | Error::InvalidArgument(_) | Error::DimMismatch { .. } => 2,
            Error::MpcInfeasible { .. } | Error::CertificateViolation(_) => 3,
            Error::Io(_) | Error::Serde(_) => 4,
            Error::Stage { source, .. } => base(source),
            _ => 2,
        }
    }
    base(err)
}
