//! Scenario files: the single JSON document describing a full experiment.
//!
//! Units are seconds and meters; matrices are row-major nested arrays.
//! Distributions are tagged objects, e.g. `{"normal": {"mean": 0.0,
//! "std": 0.3}}` or `{"uniform": {"lo": 0.0, "hi": 1000.0}}`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{HalfspacePolytope, HyperRect, RegionSet};
use crate::kernel::CostField;
use crate::lti::{NoiseModel, StructuredLti, TimeGrid};
use crate::mpc::CommandParams;
use crate::rng::stream;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub system: SystemSpec,
    pub time: TimeSpec,
    pub noise: NoiseSpec,
    pub geometry: GeometrySpec,
    pub initial_state: Vec<f64>,
    pub grid: GridSpec,
    pub commands: CommandSpec,
    pub kernel: KernelSpec,
    pub mpc: MpcSpec,
    pub eval: EvalSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constrained: Option<ConstrainedSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemSpec {
    pub n_s: usize,
    pub n_d: usize,
    pub a_c: Vec<Vec<f64>>,
    pub b_c: Vec<Vec<f64>>,
    pub e_c: Vec<Vec<f64>>,
    pub input_polytope: PolytopeSpec,
    /// Halfspaces over the deterministic block only.
    pub g_halfspaces: PolytopeSpec,
    /// Explicit norm bound over the deterministic constraint set, required
    /// when its dimension exceeds the vertex-enumeration cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_x: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolytopeSpec {
    pub normals: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl PolytopeSpec {
    pub fn build(&self) -> Result<HalfspacePolytope> {
        let rows = self.normals.len();
        let cols = self.normals.first().map_or(0, |r| r.len());
        if self.normals.iter().any(|r| r.len() != cols) {
            return Err(Error::Scenario("ragged polytope normals".into()));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for (i, r) in self.normals.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        HalfspacePolytope::new(m, DVector::from_vec(self.offsets.clone()))
    }

    pub fn from_polytope(p: &HalfspacePolytope) -> Self {
        Self {
            normals: (0..p.num_halfspaces())
                .map(|i| p.normals().row(i).iter().copied().collect())
                .collect(),
            offsets: p.offsets().iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimeSpec {
    pub horizon: f64,
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub sim_step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSpec {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RectSpec {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
}

impl RectSpec {
    pub fn build(&self) -> Result<HyperRect> {
        HyperRect::new(
            DVector::from_vec(self.center.clone()),
            DVector::from_vec(self.half_widths.clone()),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum RegionSpec {
    Rect(RectSpec),
    Ball { center: Vec<f64>, radius: f64 },
    Polytope(PolytopeSpec),
    Union(Vec<RegionSpec>),
    Complement(Box<RegionSpec>),
}

impl RegionSpec {
    pub fn build(&self) -> Result<RegionSet> {
        Ok(match self {
            RegionSpec::Rect(r) => RegionSet::Rect(r.build()?),
            RegionSpec::Ball { center, radius } => {
                if !(*radius >= 0.0) {
                    return Err(Error::Scenario("ball radius must be >= 0".into()));
                }
                RegionSet::Ball {
                    center: DVector::from_vec(center.clone()),
                    radius: *radius,
                }
            }
            RegionSpec::Polytope(p) => RegionSet::Polytope(p.build()?),
            RegionSpec::Union(members) => RegionSet::Union(
                members.iter().map(|m| m.build()).collect::<Result<_>>()?,
            ),
            RegionSpec::Complement(inner) => RegionSet::Complement(Box::new(inner.build()?)),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeometrySpec {
    /// Bounding box of the safe workspace (stochastic coordinates).
    pub bounds: RectSpec,
    #[serde(default)]
    pub obstacles: Vec<RegionSpec>,
    pub targets: Vec<RegionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub cell_edge: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DistSpec {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl DistSpec {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            DistSpec::Normal { mean, std } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                mean + std * z
            }
            DistSpec::Uniform { lo, hi } => rng.random_range(*lo..*hi),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CommandSpec {
    pub count: usize,
    pub velocity: DistSpec,
    pub weight: DistSpec,
    /// Global state indices that receive the commanded velocities;
    /// defaults to the first `n_s` deterministic coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_state_indices: Option<Vec<usize>>,
    /// Explicit command list overriding the sampler.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<Vec<CommandParams>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelSpec {
    pub samples_per_action: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum TerminalSpec {
    ZeroSet,
    Polytope(PolytopeSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    Robust,
    Nominal,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MpcSpec {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub terminal: TerminalSpec,
    pub mode: ModeSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSpec {
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum CostSpec {
    Radial { center: Vec<f64>, scale: f64 },
}

impl CostSpec {
    pub fn build(&self) -> CostField {
        match self {
            CostSpec::Radial { center, scale } => CostField::Radial {
                center: center.clone(),
                scale: *scale,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConstrainedSpec {
    pub alpha: f64,
    pub kappas: Vec<f64>,
    pub cost: CostSpec,
}

/// A loaded, validated scenario with constructed objects.
pub struct Scenario {
    pub file: ScenarioFile,
    pub sys: StructuredLti,
    pub time: TimeGrid,
    pub noise: NoiseModel,
    pub bounds: HyperRect,
    pub safe_set: RegionSet,
    pub target_set: RegionSet,
    pub g_d: HalfspacePolytope,
    pub x0: DVector<f64>,
    pub velocity_state_indices: Vec<usize>,
    /// Soft findings; certificate mode escalates them to errors.
    pub warnings: Vec<String>,
}

fn matrix_from(rows: &[Vec<f64>], context: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Scenario(format!("ragged matrix in {context}")));
    }
    let mut m = DMatrix::zeros(r, c);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile =
        serde_json::from_str(text).map_err(|e| Error::Scenario(format!("parse: {e}")))?;
    build_scenario(file)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

pub fn build_scenario(file: ScenarioFile) -> Result<Scenario> {
    if file.schema_version != 1 {
        return Err(Error::Scenario(format!(
            "unsupported schema version {}",
            file.schema_version
        )));
    }
    let a_c = matrix_from(&file.system.a_c, "A_c")?;
    let b_c = matrix_from(&file.system.b_c, "B_c")?;
    let e_c = matrix_from(&file.system.e_c, "E_c")?;
    let input_set = file.system.input_polytope.build()?;
    let sys = StructuredLti::new(a_c, b_c, e_c, file.system.n_s, input_set)?;
    if sys.n_d() != file.system.n_d {
        return Err(Error::Scenario(format!(
            "n_d {} inconsistent with matrices ({} states, n_s {})",
            file.system.n_d,
            sys.dim(),
            sys.n_s()
        )));
    }
    let g_d = file.system.g_halfspaces.build()?;
    if g_d.dim() != sys.n_d() {
        return Err(Error::Scenario("g_halfspaces must act on x^d".into()));
    }
    let time = TimeGrid::new(
        file.time.horizon,
        file.time.outer_steps,
        file.time.inner_steps,
        file.time.sim_step,
    )?;
    let covariance = matrix_from(&file.noise.covariance, "noise covariance")?;
    let noise = NoiseModel::new(
        DVector::from_vec(file.noise.mean.clone()),
        covariance,
        time.sim_step(),
    )?;
    if noise.dim() != sys.noise_dim() {
        return Err(Error::Scenario("noise dimension vs E_c".into()));
    }
    let bounds = file.geometry.bounds.build()?;
    if bounds.dim() != sys.n_s() {
        return Err(Error::Scenario(
            "geometry bounds must live in the stochastic subspace".into(),
        ));
    }
    let obstacles = file
        .geometry
        .obstacles
        .iter()
        .map(|o| o.build())
        .collect::<Result<Vec<_>>>()?;
    let safe_set = RegionSet::box_minus_obstacles(bounds.clone(), obstacles);
    let target_set = RegionSet::Union(
        file.geometry
            .targets
            .iter()
            .map(|t| t.build())
            .collect::<Result<_>>()?,
    );
    if file.initial_state.len() != sys.dim() {
        return Err(Error::Scenario(format!(
            "initial state has {} entries, system has {} states",
            file.initial_state.len(),
            sys.dim()
        )));
    }
    let x0 = DVector::from_vec(file.initial_state.clone());
    if !(file.grid.cell_edge > 0.0) {
        return Err(Error::Scenario("cell_edge must be positive".into()));
    }
    if file.mpc.q_diag.len() != sys.dim() || file.mpc.r_diag.len() != sys.input_dim() {
        return Err(Error::Scenario("q_diag/r_diag dimensions".into()));
    }
    let velocity_state_indices = match &file.commands.velocity_state_indices {
        Some(v) => {
            if v.len() != sys.n_s() {
                return Err(Error::Scenario(
                    "velocity_state_indices must have n_s entries".into(),
                ));
            }
            v.clone()
        }
        None => (sys.n_s()..2 * sys.n_s()).collect(),
    };
    if velocity_state_indices.iter().any(|&i| i >= sys.dim()) {
        return Err(Error::Scenario("velocity state index out of range".into()));
    }

    let mut warnings = Vec::new();
    let x0_s = DVector::from_iterator(sys.n_s(), x0.iter().take(sys.n_s()).copied());
    if !safe_set.contains(&x0_s)? {
        warnings.push("initial position lies outside the safe set".into());
    }
    match &file.mpc.terminal {
        TerminalSpec::ZeroSet => {
            let det_inf = (sys.n_s()..sys.dim()).fold(0.0f64, |m, i| m.max(x0[i].abs()));
            if det_inf > 1e-9 {
                warnings.push(format!(
                    "initial deterministic state must sit in the terminal set \
                     (|x0^d|_inf = {det_inf:.3e})"
                ));
            }
        }
        TerminalSpec::Polytope(p) => {
            let term = p.build()?;
            let x0_d = DVector::from_iterator(sys.n_d(), x0.iter().skip(sys.n_s()).copied());
            if !term.contains(&x0_d)? {
                warnings.push("initial deterministic state outside the terminal set".into());
            }
        }
    }
    if let Some(c) = &file.constrained {
        if !(0.0..=1.0).contains(&c.alpha) {
            return Err(Error::Scenario("alpha must be in [0, 1]".into()));
        }
        if c.kappas.iter().any(|k| *k < 0.0) {
            return Err(Error::Scenario("kappas must be >= 0".into()));
        }
    }
    Ok(Scenario {
        file,
        sys,
        time,
        noise,
        bounds,
        safe_set,
        target_set,
        g_d,
        x0,
        velocity_state_indices,
        warnings,
    })
}

/// Canonical content hash of the scenario (re-serialized, so formatting
/// and key order in the source file do not matter).
pub fn scenario_hash(file: &ScenarioFile) -> String {
    use sha2::{Digest, Sha256};
    let canon = serde_json::to_vec(file).expect("scenario serializes");
    let mut h = Sha256::new();
    h.update(&canon);
    crate::grid::hex_string(&h.finalize())
}

/// Draws the command set once from the declared distributions (explicit
/// lists pass through unchanged) and freezes it.
pub fn sample_commands(spec: &CommandSpec, n_s: usize, seed: u64) -> Result<Vec<CommandParams>> {
    if let Some(explicit) = &spec.explicit {
        if explicit.is_empty() {
            return Err(Error::Scenario("explicit command list is empty".into()));
        }
        for c in explicit {
            if c.velocities.len() != n_s || c.weights.len() != n_s {
                return Err(Error::Scenario("explicit command dimensions".into()));
            }
        }
        return Ok(explicit.clone());
    }
    if spec.count == 0 {
        return Err(Error::Scenario("command count must be positive".into()));
    }
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = stream(seed, "commands", &[i as u64]);
        let velocities = (0..n_s).map(|_| spec.velocity.sample(&mut rng)).collect();
        let weights = (0..n_s)
            .map(|_| spec.weight.sample(&mut rng).max(0.0))
            .collect();
        out.push(CommandParams {
            velocities,
            weights,
        });
    }
    Ok(out)
}
