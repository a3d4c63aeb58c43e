//! Constraint-tightening quantities.
//!
//! Two tightenings keep the discretized controller sound against the
//! continuous-time constraints and against grid quantization:
//!
//! * `eta` bounds how far the deterministic state can move within one inner
//!   step under any admissible input, so satisfying the eroded set at the
//!   sampling instants implies satisfaction in between.
//! * `r` bounds the tube around a trajectory restarted from a cell center
//!   instead of the true state, so constraints met with slack `r` by the
//!   center trajectory are met by the true one.
//!
//! The norm on the deterministic drift block is the spectral norm: the
//! growth-bound argument only needs submultiplicativity with the Euclidean
//! vector norm, and the spectral norm is the tightest such choice.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{HalfspacePolytope, HyperRect};
use crate::lti::{norm2, StructuredLti};
use crate::qp::{solve_qp, QpStatus, QuadraticProgram};

/// Below this drift norm the growth bound switches to its linear branch.
const NEAR_ZERO_DRIFT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TighteningParams {
    pub eta: f64,
    pub kappa_x: f64,
    pub kappa_u: f64,
    pub r: f64,
    pub zeta: f64,
}

/// Growth of `dz = A z + d` over `[0, dt]`:
/// `(e^{|A| dt} - 1) |z0| + (e^{|A| dt} - 1)/|A| |d|`, with the `dt |d|`
/// limit at vanishing drift norm.
pub fn growth_bound_psi(norm_a: f64, dt: f64, norm_z0: f64, norm_d: f64) -> Result<f64> {
    for (name, v) in [
        ("norm_a", norm_a),
        ("dt", dt),
        ("norm_z0", norm_z0),
        ("norm_d", norm_d),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("growth bound argument {name} = {v}")));
        }
    }
    if norm_a <= NEAR_ZERO_DRIFT {
        return Ok(dt * norm_d);
    }
    // exp_m1 keeps the small-drift regime cancellation-free.
    let em1 = (norm_a * dt).exp_m1();
    Ok(em1 * norm_z0 + em1 / norm_a * norm_d)
}

/// Inner-step tightening `eta` together with the extremal norms it is built
/// from: `kappa_x` over the deterministic constraint set, `kappa_u` over the
/// input set mapped through the deterministic input block.
///
/// `kappa_x` is found at a vertex of `g_d`; above dimension 8 vertex
/// enumeration is refused and the caller must pass `kappa_x_override`
/// (coupled constraint sets only; axis-aligned boxes always take the corner
/// fast path).
pub fn compute_eta(
    sys: &StructuredLti,
    g_d: &HalfspacePolytope,
    dt_inner: f64,
    kappa_x_override: Option<f64>,
) -> Result<(f64, f64, f64)> {
    if g_d.dim() != sys.n_d() {
        return Err(Error::dim(sys.n_d(), g_d.dim(), "deterministic constraint set"));
    }
    if !(dt_inner > 0.0) {
        return Err(Error::invalid("dt_inner must be positive"));
    }
    let kappa_x = match kappa_x_override {
        Some(k) if k >= 0.0 => k,
        Some(k) => return Err(Error::invalid(format!("kappa_x override {k} < 0"))),
        None => g_d.max_norm().map_err(|e| match e {
            Error::UnboundedConstraintSet(_) => Error::UnboundedConstraintSet(
                "the deterministic constraint set must be bounded; supply an explicit \
                 norm bound (kappa_x) otherwise"
                    .into(),
            ),
            other => other,
        })?,
    };
    let b2 = sys.b2_c();
    let mut kappa_u = 0.0f64;
    for v in sys.input_set().vertices()? {
        kappa_u = kappa_u.max((&b2 * v).norm());
    }
    let norm_a4 = norm2(&sys.a4_c());
    let eta = growth_bound_psi(norm_a4, dt_inner, kappa_x, kappa_u)?;
    Ok((eta, kappa_x, kappa_u))
}

/// Tube radius from the homogeneous error dynamics over one outer step:
/// `r = e^{|A_c| Dt} max_{x in H} |x|` with `H` the cube of edge `zeta` in
/// `dim_h` dimensions.
pub fn tube_radius_lemma3(a_c: &DMatrix<f64>, dt_outer: f64, zeta: f64, dim_h: usize) -> f64 {
    assert!(dt_outer >= 0.0 && zeta > 0.0);
    let corner = 0.5 * zeta * (dim_h as f64).sqrt();
    (norm2(a_c) * dt_outer).exp() * corner
}

/// Tube radius for the system at hand.
///
/// When no stochastic state feeds back into the dynamics the error tube
/// never grows and the radius is just the cell corner distance; otherwise
/// the exponential envelope applies.
pub fn tube_radius(sys: &StructuredLti, dt_outer: f64, zeta: f64) -> f64 {
    let corner = 0.5 * zeta * (sys.n_s() as f64).sqrt();
    if sys.all_stochastic_columns_inert() {
        corner
    } else {
        (norm2(sys.a_c()) * dt_outer).exp() * corner
    }
}

/// Terminal-set choice for the deterministic subsystem.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalMode {
    /// Force the deterministic state to zero at every outer boundary. This
    /// is what collapses the planning space to the stochastic coordinates.
    ZeroSet,
    /// A user-supplied control-invariant polytope, to be validated with
    /// [`validate_terminal_invariance`].
    ValidatedPolytope(HalfspacePolytope),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSet {
    Zero,
    Polytope {
        nominal: HalfspacePolytope,
        /// Eroded by `B_r` for the robust controller's terminal constraint.
        robust: HalfspacePolytope,
    },
}

/// The nested family `g_tilde ⊆ g_hat ⊆ g` over the deterministic state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintFamily {
    pub g: HalfspacePolytope,
    pub g_hat: HalfspacePolytope,
    pub g_tilde: HalfspacePolytope,
    pub terminal: TerminalSet,
    pub params: TighteningParams,
}

/// Builds the tightened family.
///
/// Under the zero terminal set the anchor offset never perturbs the
/// deterministic coordinates, so the robust controller needs no extra
/// `r`-tightening there and `g_tilde = g_hat`. With a general validated
/// terminal polytope, `g_tilde` erodes by `eta + r`.
pub fn build_constraint_family(
    g: &HalfspacePolytope,
    params: &TighteningParams,
    mode: &TerminalMode,
) -> Result<ConstraintFamily> {
    let g_hat = g.erode_ball(params.eta)?;
    let g_tilde = match mode {
        TerminalMode::ZeroSet => g_hat.clone(),
        TerminalMode::ValidatedPolytope(_) => g.erode_ball(params.eta + params.r)?,
    };
    check_nonempty(&g_tilde, g)?;
    let terminal = match mode {
        TerminalMode::ZeroSet => {
            // The terminal state 0 must itself satisfy the tightened set.
            let zero = DVector::zeros(g.dim());
            if !g_tilde.contains(&zero)? {
                let (idx, offset) = most_violated(&g_tilde, &zero);
                return Err(Error::OverTightened { index: idx, offset });
            }
            TerminalSet::Zero
        }
        TerminalMode::ValidatedPolytope(term) => {
            if term.dim() != g.dim() {
                return Err(Error::dim(g.dim(), term.dim(), "terminal polytope"));
            }
            let robust = term.erode_ball(params.r)?;
            check_nonempty(&robust, term)?;
            TerminalSet::Polytope {
                nominal: term.clone(),
                robust,
            }
        }
    };
    Ok(ConstraintFamily {
        g: g.clone(),
        g_hat,
        g_tilde,
        terminal,
        params: *params,
    })
}

/// Emptiness check after tightening, reporting the most pinching row.
fn check_nonempty(tightened: &HalfspacePolytope, original: &HalfspacePolytope) -> Result<()> {
    let verts = tightened.vertices()?;
    if !verts.is_empty() {
        return Ok(());
    }
    // Probe at the centroid of the original set's vertices.
    let origin_verts = original.vertices()?;
    let probe = if origin_verts.is_empty() {
        DVector::zeros(original.dim())
    } else {
        let mut c = DVector::zeros(original.dim());
        for v in &origin_verts {
            c += v;
        }
        c / origin_verts.len() as f64
    };
    let (idx, offset) = most_violated(tightened, &probe);
    Err(Error::OverTightened { index: idx, offset })
}

fn most_violated(p: &HalfspacePolytope, x: &DVector<f64>) -> (usize, f64) {
    let mut worst = (0usize, f64::INFINITY);
    let mut worst_slack = f64::INFINITY;
    for i in 0..p.num_halfspaces() {
        let slack = p.offsets()[i] - p.normals().row(i).transpose().dot(x);
        if slack < worst_slack {
            worst_slack = slack;
            worst = (i, p.offsets()[i]);
        }
    }
    worst
}

/// Checks robust control invariance of a candidate terminal polytope for
/// the discrete deterministic subsystem
/// `x' = A4 x + B2 u + d`, `|d|_inf <= disturbance_bound`.
///
/// For every vertex `v` of the candidate: `v` must satisfy `g_tilde_d`, and
/// some admissible input must steer `A4 v + B2 u` into the candidate eroded
/// by the disturbance box (the input is chosen before the disturbance, so
/// the erosion is what makes the check sound). Convexity extends the vertex
/// results to the whole set.
pub fn validate_terminal_invariance(
    term: &HalfspacePolytope,
    a4: &DMatrix<f64>,
    b2: &DMatrix<f64>,
    g_tilde_d: &HalfspacePolytope,
    u_set: &HalfspacePolytope,
    disturbance_bound: f64,
) -> Result<bool> {
    if !(disturbance_bound >= 0.0) {
        return Err(Error::invalid("disturbance bound must be >= 0"));
    }
    let n_d = term.dim();
    let m = u_set.dim();
    if a4.nrows() != n_d || a4.ncols() != n_d || b2.nrows() != n_d || b2.ncols() != m {
        return Err(Error::dim(n_d, a4.nrows(), "terminal invariance blocks"));
    }
    let dist_box = HyperRect::new(
        DVector::zeros(n_d),
        DVector::from_element(n_d, disturbance_bound),
    )?;
    let shrunk = term.erode_rect(&dist_box)?;
    if shrunk.vertices()?.is_empty() {
        // The disturbance alone can push any point out of the candidate.
        return Ok(false);
    }
    let vertices = term.vertices()?;
    if vertices.is_empty() {
        return Err(Error::invalid("terminal candidate is empty"));
    }
    for (vi, v) in vertices.iter().enumerate() {
        if !g_tilde_d.contains(v)? {
            return Ok(false);
        }
        // Feasibility LP (regularized): find u in U with
        // H_t (A4 v + B2 u) <= b_t - support(dist box).
        let drift = a4 * v;
        let rows = shrunk.num_halfspaces() + u_set.num_halfspaces();
        let mut a_in = DMatrix::zeros(rows, m);
        let mut b_in = DVector::zeros(rows);
        let ht_b2 = shrunk.normals() * b2;
        for i in 0..shrunk.num_halfspaces() {
            a_in.row_mut(i).copy_from(&ht_b2.row(i));
            b_in[i] = shrunk.offsets()[i] - shrunk.normals().row(i).transpose().dot(&drift);
        }
        for i in 0..u_set.num_halfspaces() {
            a_in.row_mut(shrunk.num_halfspaces() + i)
                .copy_from(&u_set.normals().row(i));
            b_in[shrunk.num_halfspaces() + i] = u_set.offsets()[i];
        }
        let qp = QuadraticProgram::new_unchecked(
            DMatrix::identity(m, m),
            DVector::zeros(m),
            DMatrix::zeros(0, m),
            DVector::zeros(0),
            a_in,
            b_in,
        );
        let sol = solve_qp(&qp, 1e-9, 20_000);
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => return Ok(false),
            QpStatus::MaxIter => {
                return Err(Error::TerminalValidation {
                    vertex: vi,
                    reason: format!(
                        "feasibility solve stalled (primal {:.2e}, dual {:.2e})",
                        sol.primal_residual, sol.dual_residual
                    ),
                })
            }
        }
    }
    Ok(true)
}
