//! Command-line front end for the reach-avoid pipeline.
//!
//! Exit codes: 0 success, 2 scenario error, 3 controller infeasibility or
//! certificate violation, 4 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reachavoid::dp::DpModel;
use reachavoid::error::Error;
use reachavoid::pipeline::{
    self, estimate_or_load_kernel, evaluate_policy, model_hash, prepare, row_ci_summary,
    PipelineOptions,
};
use reachavoid::scenario::{load_scenario, Scenario};
use reachavoid::{dp, persist};

#[derive(Parser)]
#[command(
    name = "reachavoid",
    about = "Certified reach-avoid control: robust MPC + grid-abstracted dynamic programming",
    version
)]
struct Cli {
    /// Scenario JSON file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed override (defaults to the scenario's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Kernel cache directory.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Enforce every theory precondition as a hard error.
    #[arg(long = "certificate-mode", global = true)]
    certificate_mode: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the zero-order-hold discretizations.
    Discretize,
    /// Compute the tightening quantities and the constraint family.
    Tighten,
    /// Build and classify the cell grid.
    Grid,
    /// Estimate (or load) the transition kernel.
    Kernel,
    /// Run the robust value iteration and store the value/policy artifact.
    Solve,
    /// Closed-loop Monte-Carlo evaluation of the stored policy.
    Eval,
    /// Lagrangian sweep for the constrained problem.
    Pareto,
    /// Full pipeline: discretize through reports.
    Run,
    /// Regenerate report files from stored artifacts.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(cause) = src {
                eprintln!("  caused by: {cause}");
                src = cause.source();
            }
            ExitCode::from(pipeline::exit_code_for(&e) as u8)
        }
    }
}

fn scenario_of(cli: &Cli) -> Result<Scenario, Error> {
    let path = cli
        .scenario
        .as_ref()
        .ok_or_else(|| Error::Scenario("--scenario <file> is required".into()))?;
    load_scenario(path)
}

fn options_of(cli: &Cli) -> PipelineOptions {
    PipelineOptions {
        out_dir: cli.out.clone(),
        cache_dir: cli.cache.clone(),
        certificate_mode: cli.certificate_mode,
        seed_override: cli.seed,
        store_trajectories: 25,
    }
}

fn write_or_print(cli: &Cli, name: &str, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(name), text)?;
            println!("wrote {}", dir.join(name).display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn matrix_json(m: &nalgebra_rows::Rows) -> serde_json::Value {
    serde_json::json!(m.0)
}

mod nalgebra_rows {
    /// Row-major nested array view of a dynamic matrix.
    pub struct Rows(pub Vec<Vec<f64>>);

    impl Rows {
        pub fn of(m: &nalgebra::DMatrix<f64>) -> Self {
            Rows(
                (0..m.nrows())
                    .map(|i| m.row(i).iter().copied().collect())
                    .collect(),
            )
        }
    }
}
use nalgebra_rows::Rows;

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let opts = options_of(cli);
    match cli.command {
        Cmd::Discretize => {
            let sc = scenario_of(cli)?;
            let inner = reachavoid::lti::discretize(&sc.sys, sc.time.dt_inner())?;
            let sub = reachavoid::lti::discretize(&sc.sys, sc.time.sim_step())?;
            write_or_print(
                cli,
                "discrete.json",
                &serde_json::json!({
                    "inner_step": inner.step,
                    "a": matrix_json(&Rows::of(&inner.a)),
                    "b": matrix_json(&Rows::of(&inner.b)),
                    "e": matrix_json(&Rows::of(&inner.e)),
                    "sim_step": sub.step,
                    "a_sim": matrix_json(&Rows::of(&sub.a)),
                    "b_sim": matrix_json(&Rows::of(&sub.b)),
                    "e_sim": matrix_json(&Rows::of(&sub.e)),
                }),
            )
        }
        Cmd::Tighten => {
            let sc = scenario_of(cli)?;
            let prep = prepare(&sc, &opts)?;
            write_or_print(
                cli,
                "tighten.json",
                &serde_json::json!({
                    "tightening": prep.params,
                    "g_offsets": sc.g_d.offsets().iter().copied().collect::<Vec<_>>(),
                    "g_hat_offsets": prep.cfg.family.g_hat.offsets().iter().copied().collect::<Vec<_>>(),
                    "g_tilde_offsets": prep.cfg.family.g_tilde.offsets().iter().copied().collect::<Vec<_>>(),
                }),
            )
        }
        Cmd::Grid => {
            let sc = scenario_of(cli)?;
            let prep = prepare(&sc, &opts)?;
            write_or_print(
                cli,
                "grid.json",
                &serde_json::json!({
                    "dims": prep.grid.dims(),
                    "cells": prep.grid.num_cells(),
                    "safe": prep.grid.num_safe(),
                    "target": prep.grid.num_target(),
                    "initial_cell": prep.grid.initial_cell(),
                    "hash": prep.grid.content_hash(),
                    "neighborhood_offsets": prep.nb.offsets().len(),
                }),
            )
        }
        Cmd::Kernel => {
            let sc = scenario_of(cli)?;
            let prep = prepare(&sc, &opts)?;
            let (model, cache_hit) = estimate_or_load_kernel(&sc, &prep, &opts)?;
            let cost = sc.file.constrained.as_ref().map(|c| c.cost.build());
            let rows = model.materialize_rows(&prep.grid, cost.as_ref())?;
            write_or_print(
                cli,
                "kernel.json",
                &serde_json::json!({
                    "model_hash": model_hash(&prep, sc.file.kernel.samples_per_action),
                    "cache_hit": cache_hit,
                    "samples_per_action": model.samples_per_action,
                    "actions": model.num_actions,
                    "infeasible_samples": model.infeasible_samples,
                    "row_ci": row_ci_summary(&rows, sc.file.kernel.samples_per_action),
                }),
            )
        }
        Cmd::Solve => {
            let sc = scenario_of(cli)?;
            let prep = prepare(&sc, &opts)?;
            let (model, _) = estimate_or_load_kernel(&sc, &prep, &opts)?;
            let cost = sc.file.constrained.as_ref().map(|c| c.cost.build());
            let rows = model.materialize_rows(&prep.grid, cost.as_ref())?;
            let dp_model = DpModel::new(rows)?;
            let (value, policy) = dp::robust_value_iteration(
                &dp_model,
                &prep.grid,
                &prep.nb,
                sc.time.outer_steps,
            );
            let v0 = value.initial_value(&prep.grid);
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                let header = persist::ValueHeader {
                    grid_hash: prep.grid.content_hash(),
                    model_hash: model_hash(&prep, sc.file.kernel.samples_per_action),
                    n_stages: value.horizon(),
                    num_safe: prep.grid.num_safe(),
                    kappa: None,
                    software_version: reachavoid::VERSION.into(),
                };
                persist::save_value_policy(
                    &dir.join("value_policy.bin"),
                    &header,
                    &value,
                    &policy,
                )?;
            }
            write_or_print(cli, "solve.json", &serde_json::json!({ "v_tilde_0": v0 }))
        }
        Cmd::Eval => {
            let sc = scenario_of(cli)?;
            let prep = prepare(&sc, &opts)?;
            let dir = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::Scenario("eval requires --out with a stored policy".into()))?;
            let artifact = dir.join("value_policy.bin");
            let (header, value, policy) = persist::load_value_policy(&artifact)?;
            if header.grid_hash != prep.grid.content_hash() {
                return Err(Error::CacheMismatch(
                    "stored policy was computed on a different grid".into(),
                ));
            }
            let report =
                evaluate_policy(&sc, &prep, &policy, sc.file.eval.trials, prep.seed, &opts)?;
            let v0 = value.initial_value(&prep.grid);
            println!(
                "v_tilde_0 = {v0:.6}, v_hat = {:.4} ({}/{} trials), 95% CI [{:.4}, {:.4}]",
                report.v_hat, report.successes, report.trials, report.ci95.0, report.ci95.1
            );
            write_or_print(
                cli,
                "eval.json",
                &serde_json::to_value(&report).map_err(Error::from)?,
            )
        }
        Cmd::Pareto => {
            let sc = scenario_of(cli)?;
            let cspec = sc.file.constrained.clone().ok_or_else(|| {
                Error::Scenario("scenario has no `constrained` section".into())
            })?;
            let prep = prepare(&sc, &opts)?;
            let (model, _) = estimate_or_load_kernel(&sc, &prep, &opts)?;
            let cost = cspec.cost.build();
            let rows = model.materialize_rows(&prep.grid, Some(&cost))?;
            let dp_model = DpModel::new(rows)?;
            let terminal = vec![0.0; prep.grid.num_safe()];
            let points = dp::pareto_sweep(
                &dp_model,
                &prep.grid,
                cspec.alpha,
                &terminal,
                &cspec.kappas,
                sc.time.outer_steps,
            )?;
            let mut csv = String::from("kappa,expected_cost,reach_prob,objective\n");
            for p in &points {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    p.kappa, p.expected_cost, p.reach_prob, p.objective
                ));
            }
            match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("pareto.csv"), csv)?;
                    println!("wrote {}", dir.join("pareto.csv").display());
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Run => {
            let sc = scenario_of(cli)?;
            let out = pipeline::run_pipeline(&sc, &opts)?;
            println!(
                "{}: v_tilde_0 = {:.6}, v_hat = {:.4} ({}/{}), bound holds at 99%: {}",
                out.manifest.scenario_name,
                out.manifest.v_tilde_0,
                out.manifest.v_hat_0,
                out.manifest.eval_successes,
                out.manifest.eval_trials,
                out.manifest.bound_holds_at_99
            );
            if cli.out.is_none() {
                println!("{}", serde_json::to_string_pretty(&out.manifest)?);
            }
            Ok(())
        }
        Cmd::Report => {
            let dir = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::Scenario("report requires --out".into()))?;
            let sc = scenario_of(cli)?;
            let manifest: pipeline::RunManifest =
                serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
            let (_, value, _) = persist::load_value_policy(&dir.join("value_policy.bin"))?;
            let prep = prepare(&sc, &opts)?;
            if manifest.grid_hash != prep.grid.content_hash() {
                return Err(Error::CacheMismatch(
                    "manifest grid hash does not match the scenario".into(),
                ));
            }
            // Rebuild the plot-ready CSVs from stored results.
            let mut table =
                String::from("scenario,v_tilde_0,v_hat_0,ci_lo,ci_hi,successes,trials\n");
            if manifest.eval_trials > 0 {
                table.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    manifest.scenario_name,
                    manifest.v_tilde_0,
                    manifest.v_hat_0,
                    manifest.ci95.0,
                    manifest.ci95.1,
                    manifest.eval_successes,
                    manifest.eval_trials
                ));
            }
            std::fs::write(dir.join("table.csv"), table)?;
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
            std::fs::write(dir.join("value_field.csv"), field)?;
            let mut pcsv = String::from("kappa,expected_cost,reach_prob,objective\n");
            if let Some(points) = &manifest.pareto {
                for p in points {
                    pcsv.push_str(&format!(
                        "{},{},{},{}\n",
                        p.kappa, p.expected_cost, p.reach_prob, p.objective
                    ));
                }
            }
            std::fs::write(dir.join("pareto.csv"), pcsv)?;
            std::fs::write(
                dir.join("geometry.json"),
                serde_json::to_string_pretty(&sc.file.geometry)?,
            )?;
            println!("regenerated reports in {}", dir.display());
            Ok(())
        }
    }
}
