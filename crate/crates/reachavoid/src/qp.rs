//! Dense convex quadratic programming by operator splitting.
//!
//! Problems are posed as
//!
//! ```text
//! min  1/2 z' P z + q' z
//! s.t. A_eq z = b_eq,   A_in z <= b_in
//! ```
//!
//! and solved with over-relaxed ADMM on the stacked constraint
//! `l <= [A_eq; A_in] z <= u`, after Ruiz equilibration of `(P, A)` so that
//! badly scaled tracking costs converge with a fixed penalty. Equality rows
//! carry a stiffer penalty. The iteration schedule is fixed and free of
//! wall-clock or randomized inputs, so identical problems yield
//! bit-identical solutions.
//!
//! [`PreparedQp`] caches the factorizations for a fixed `(P, A)` pair so
//! receding-horizon loops only pay for vector updates; its equality-only
//! fast path solves the KKT system directly through a null-space
//! decomposition and falls back to ADMM only when an inequality activates.
//!
//! Unbounded problems (only possible here when `P` vanishes along a feasible
//! ray; embedded tracking costs always have `R` positive definite) terminate
//! as `MaxIter` rather than a dedicated status.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Default absolute tolerance on primal and dual residuals.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QuadraticProgram {
    /// Validates dimensions, symmetrizes `P`, and checks positive
    /// semidefiniteness (smallest eigenvalue >= -1e-10).
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self> {
        let n = q.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::dim(n, p.nrows(), "QP cost matrix"));
        }
        if a_eq.nrows() != b_eq.len() || (a_eq.nrows() > 0 && a_eq.ncols() != n) {
            return Err(Error::dim(n, a_eq.ncols(), "QP equality block"));
        }
        if a_in.nrows() != b_in.len() || (a_in.nrows() > 0 && a_in.ncols() != n) {
            return Err(Error::dim(n, a_in.ncols(), "QP inequality block"));
        }
        let p = (&p + p.transpose()) * 0.5;
        let min_eig = p
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, b| a.min(*b));
        if min_eig < -1e-10 {
            return Err(Error::invalid(format!(
                "QP cost matrix is not PSD (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(Self {
            p,
            q,
            a_eq,
            b_eq,
            a_in,
            b_in,
        })
    }

    /// Trusted constructor for internally-assembled PSD costs.
    pub(crate) fn new_unchecked(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Self {
        Self {
            p: (&p + p.transpose()) * 0.5,
            q,
            a_eq,
            b_eq,
            a_in,
            b_in,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub status: QpStatus,
    /// Worst constraint violation `max(A z - proj(A z))` in the inf norm.
    pub primal_residual: f64,
    /// Stationarity residual `||P z + q + A' y||_inf`.
    pub dual_residual: f64,
    pub iterations: usize,
    /// Stacked multipliers: equality rows first, then inequality rows.
    pub multipliers: DVector<f64>,
}

impl QpSolution {
    pub fn eq_multipliers(&self, n_eq: usize) -> DVector<f64> {
        DVector::from_iterator(n_eq, self.multipliers.iter().take(n_eq).copied())
    }

    pub fn ineq_multipliers(&self, n_eq: usize) -> DVector<f64> {
        DVector::from_iterator(
            self.multipliers.len() - n_eq,
            self.multipliers.iter().skip(n_eq).copied(),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdmmSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Over-relaxation in (1, 2).
    pub alpha: f64,
    pub sigma: f64,
    pub rho: f64,
    /// Equality rows use `rho * eq_rho_scale`.
    pub eq_rho_scale: f64,
    /// Residuals and certificates are evaluated every this many iterations.
    pub check_interval: usize,
    pub infeas_tol: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            alpha: 1.6,
            sigma: 1e-6,
            rho: 0.1,
            eq_rho_scale: 1e3,
            check_interval: 25,
            infeas_tol: 1e-7,
        }
    }
}

/// Solves a QP with default settings at the given tolerances.
pub fn solve_qp(qp: &QuadraticProgram, tol: f64, max_iter: usize) -> QpSolution {
    let settings = AdmmSettings {
        tol,
        max_iter,
        ..AdmmSettings::default()
    };
    let prepared = PreparedQp::new(qp.p.clone(), qp.a_eq.clone(), qp.a_in.clone(), settings)
        .expect("PSD cost was validated at construction");
    prepared.solve(&qp.q, &qp.b_eq, &qp.b_in, None)
}

/// Ruiz equilibration of the KKT structure `[[P, A'], [A, 0]]`.
///
/// Returns column scalings `dx` (variables), row scalings `dy`
/// (constraints), and a cost normalization `c`, such that the scaled
/// problem `(c dx P dx, dy A dx)` has rows and columns of comparable
/// magnitude.
fn ruiz_equilibrate(p: &DMatrix<f64>, a: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, f64) {
    let n = p.nrows();
    let m = a.nrows();
    let mut dx = DVector::from_element(n, 1.0);
    let mut dy = DVector::from_element(m, 1.0);
    for _ in 0..10 {
        for j in 0..n {
            let mut norm = 0.0f64;
            for i in 0..n {
                norm = norm.max((p[(i, j)] * dx[i] * dx[j]).abs());
            }
            for r in 0..m {
                norm = norm.max((a[(r, j)] * dy[r] * dx[j]).abs());
            }
            if norm > 1e-12 {
                dx[j] /= norm.sqrt();
            }
        }
        for r in 0..m {
            let mut norm = 0.0f64;
            for j in 0..n {
                norm = norm.max((a[(r, j)] * dy[r] * dx[j]).abs());
            }
            if norm > 1e-12 {
                dy[r] /= norm.sqrt();
            }
        }
    }
    // Normalize the scaled cost magnitude.
    let mut mean_col = 0.0;
    for j in 0..n {
        let mut norm = 0.0f64;
        for i in 0..n {
            norm = norm.max((p[(i, j)] * dx[i] * dx[j]).abs());
        }
        mean_col += norm;
    }
    mean_col /= n.max(1) as f64;
    let c = if mean_col > 1e-12 { 1.0 / mean_col } else { 1.0 };
    (dx, dy, c)
}

/// Scaled ADMM working set shared by every solve against one `(P, A)`.
struct AdmmTemplate {
    /// Scaled cost and stacked constraints.
    p_s: DMatrix<f64>,
    a_s: DMatrix<f64>,
    a_s_t: DMatrix<f64>,
    /// Unscaled stacked constraints for residual checks.
    a: DMatrix<f64>,
    a_t: DMatrix<f64>,
    rho_v: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
    dx: DVector<f64>,
    dy: DVector<f64>,
    cost_scale: f64,
    n_eq: usize,
}

/// A QP with fixed `(P, A_eq, A_in)` and per-solve `(q, b_eq, b_in)`.
///
/// Caches the null-space KKT factorization for the equality-only fast path
/// and the equilibrated ADMM factorization for the constrained fallback.
pub struct PreparedQp {
    p: DMatrix<f64>,
    a_eq: DMatrix<f64>,
    a_in: DMatrix<f64>,
    settings: AdmmSettings,
    // Thin SVD of A_eq for particular solutions and multipliers.
    svd_u: DMatrix<f64>,
    svd_vt: DMatrix<f64>,
    sigma_inv: DVector<f64>,
    null_basis: DMatrix<f64>,
    reduced_chol: Option<Cholesky<f64, Dyn>>,
    admm: AdmmTemplate,
}

impl PreparedQp {
    pub fn new(
        p: DMatrix<f64>,
        a_eq: DMatrix<f64>,
        a_in: DMatrix<f64>,
        settings: AdmmSettings,
    ) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(Error::dim(n, p.ncols(), "prepared QP cost"));
        }
        let p = (&p + p.transpose()) * 0.5;
        let n_eq = a_eq.nrows();
        let n_in = a_in.nrows();

        // Null-space machinery for the equality fast path. The thin SVD
        // serves the pseudo-inverse; the null space comes from the
        // eigenvectors of A_eq' A_eq at (numerically) zero eigenvalues.
        let (svd_u, svd_vt, sigma_inv, null_basis) = if n_eq > 0 {
            let svd = a_eq.clone().svd(true, true);
            let u = svd.u.as_ref().expect("svd with u").clone();
            let vt = svd.v_t.as_ref().expect("svd with vt").clone();
            let smax = svd.singular_values.iter().fold(0.0f64, |a, b| a.max(*b));
            let tol = smax * 1e-12 * (n.max(n_eq) as f64);
            let rank = svd
                .singular_values
                .iter()
                .filter(|s| **s > tol.max(1e-300))
                .count();
            let sigma_inv = DVector::from_fn(svd.singular_values.len(), |i, _| {
                if i < rank && svd.singular_values[i] > tol.max(1e-300) {
                    1.0 / svd.singular_values[i]
                } else {
                    0.0
                }
            });
            let null_dim = n - rank;
            let mut z = DMatrix::zeros(n, null_dim);
            if null_dim > 0 {
                let gram = a_eq.transpose() * &a_eq;
                let eig = gram.symmetric_eigen();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&i, &j| {
                    eig.eigenvalues[i]
                        .partial_cmp(&eig.eigenvalues[j])
                        .expect("finite eigenvalues")
                });
                for (jz, &col) in order.iter().take(null_dim).enumerate() {
                    for i in 0..n {
                        z[(i, jz)] = eig.eigenvectors[(i, col)];
                    }
                }
            }
            (u, vt, sigma_inv, z)
        } else {
            (
                DMatrix::zeros(0, 0),
                DMatrix::zeros(0, 0),
                DVector::zeros(0),
                DMatrix::identity(n, n),
            )
        };

        let reduced_chol = if null_basis.ncols() > 0 {
            let mut reduced = null_basis.transpose() * &p * &null_basis;
            for i in 0..reduced.nrows() {
                reduced[(i, i)] += 1e-12;
            }
            Some(
                reduced
                    .cholesky()
                    .ok_or_else(|| Error::invalid("reduced cost is not positive definite"))?,
            )
        } else {
            None
        };

        // Equilibrated ADMM template over the stacked constraints.
        let rows = n_eq + n_in;
        let mut a = DMatrix::zeros(rows, n);
        if n_eq > 0 {
            a.view_mut((0, 0), (n_eq, n)).copy_from(&a_eq);
        }
        if n_in > 0 {
            a.view_mut((n_eq, 0), (n_in, n)).copy_from(&a_in);
        }
        let (dx, dy, cost_scale) = ruiz_equilibrate(&p, &a);
        let mut p_s = p.clone();
        for i in 0..n {
            for j in 0..n {
                p_s[(i, j)] *= cost_scale * dx[i] * dx[j];
            }
        }
        let mut a_s = a.clone();
        for r in 0..rows {
            for j in 0..n {
                a_s[(r, j)] *= dy[r] * dx[j];
            }
        }
        let rho_v = DVector::from_fn(rows, |i, _| {
            if i < n_eq {
                settings.rho * settings.eq_rho_scale
            } else {
                settings.rho
            }
        });
        let mut kkt = p_s.clone();
        for i in 0..n {
            kkt[(i, i)] += settings.sigma;
        }
        let mut weighted = a_s.clone();
        for r in 0..rows {
            for j in 0..n {
                weighted[(r, j)] *= rho_v[r];
            }
        }
        kkt += a_s.transpose() * weighted;
        let factor = kkt
            .cholesky()
            .ok_or_else(|| Error::invalid("ADMM KKT matrix is not positive definite"))?;

        Ok(Self {
            p,
            a_eq,
            a_in,
            settings,
            svd_u,
            svd_vt,
            sigma_inv,
            null_basis,
            reduced_chol,
            admm: AdmmTemplate {
                a_s_t: a_s.transpose(),
                a_t: a.transpose(),
                p_s,
                a_s,
                a,
                rho_v,
                factor,
                dx,
                dy,
                cost_scale,
                n_eq,
            },
        })
    }

    pub fn num_vars(&self) -> usize {
        self.p.nrows()
    }

    /// Copies of the fixed problem matrices `(P, A_eq, A_in)`.
    pub fn problem_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.p.clone(), self.a_eq.clone(), self.a_in.clone())
    }

    /// Objective `1/2 z' P z + q' z` for a candidate point.
    pub fn objective_value(&self, q: &DVector<f64>, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + q.dot(z)
    }

    /// Minimizes for the given linear term and right-hand sides.
    ///
    /// Tries the equality-only KKT solve first; when an inequality is
    /// active, falls back to warm-started equilibrated ADMM.
    pub fn solve(
        &self,
        q: &DVector<f64>,
        b_eq: &DVector<f64>,
        b_in: &DVector<f64>,
        warm: Option<&DVector<f64>>,
    ) -> QpSolution {
        if let Some(sol) = self.try_equality_path(q, b_eq, b_in) {
            return sol;
        }
        if let Some(sol) = self.try_active_set(q, b_eq, b_in, warm) {
            return sol;
        }
        let s = self.settings;
        let t = &self.admm;
        let n = self.num_vars();
        let rows = t.a.nrows();
        let n_eq = t.n_eq;

        // Unscaled bounds, then their scaled images.
        let mut lower = DVector::from_element(rows, f64::NEG_INFINITY);
        let mut upper = DVector::zeros(rows);
        for i in 0..n_eq {
            lower[i] = b_eq[i];
            upper[i] = b_eq[i];
        }
        for i in 0..rows - n_eq {
            upper[n_eq + i] = b_in[i];
        }
        let mut lower_s = lower.clone();
        let mut upper_s = upper.clone();
        for r in 0..rows {
            if lower_s[r].is_finite() {
                lower_s[r] *= t.dy[r];
            }
            upper_s[r] *= t.dy[r];
        }
        // Scaled linear term.
        let mut q_s = q.clone();
        for j in 0..n {
            q_s[j] *= t.cost_scale * t.dx[j];
        }

        // Scaled iterates (x_s = dx^-1 x).
        let mut x_s = match warm {
            Some(w) => DVector::from_fn(n, |j, _| w[j] / t.dx[j]),
            None => DVector::zeros(n),
        };
        let mut y_s = DVector::zeros(rows);
        let mut z_s = project(&(&t.a_s * &x_s), &lower_s, &upper_s);

        let unscale_x = |x_s: &DVector<f64>| DVector::from_fn(n, |j, _| x_s[j] * t.dx[j]);
        let unscale_y =
            |y_s: &DVector<f64>| DVector::from_fn(rows, |r, _| y_s[r] * t.dy[r] / t.cost_scale);

        let mut best = QpSolution {
            z: unscale_x(&x_s),
            status: QpStatus::MaxIter,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            iterations: 0,
            multipliers: unscale_y(&y_s),
        };
        let mut prev_y = unscale_y(&y_s);
        // Preallocated iteration buffers; the loop itself is allocation-free.
        let mut tmp = DVector::zeros(rows);
        let mut rhs = DVector::zeros(n);
        let mut x_tilde = DVector::zeros(n);
        let mut z_tilde = DVector::zeros(rows);
        let mut iter = 0;
        while iter < s.max_iter {
            iter += 1;
            for r in 0..rows {
                tmp[r] = t.rho_v[r] * z_s[r] - y_s[r];
            }
            rhs.copy_from(&q_s);
            rhs *= -1.0;
            rhs.axpy(s.sigma, &x_s, 1.0);
            rhs.gemv(1.0, &t.a_s_t, &tmp, 1.0);
            x_tilde.copy_from(&rhs);
            t.factor.solve_mut(&mut x_tilde);
            z_tilde.gemv(1.0, &t.a_s, &x_tilde, 0.0);
            for j in 0..n {
                x_s[j] = s.alpha * x_tilde[j] + (1.0 - s.alpha) * x_s[j];
            }
            for r in 0..rows {
                let relaxed = s.alpha * z_tilde[r] + (1.0 - s.alpha) * z_s[r];
                let z_new = (relaxed + y_s[r] / t.rho_v[r]).clamp(lower_s[r], upper_s[r]);
                y_s[r] += t.rho_v[r] * (relaxed - z_new);
                z_s[r] = z_new;
            }

            if iter % s.check_interval == 0 || iter == s.max_iter {
                let x = unscale_x(&x_s);
                let y = unscale_y(&y_s);
                let ax = &t.a * &x;
                let r_prim = violation(&ax, &lower, &upper);
                let r_dual = stationarity_cached(&self.p, q, &t.a_t, &x, &y);
                if r_prim + r_dual < best.primal_residual + best.dual_residual {
                    best.z = x.clone();
                    best.multipliers = y.clone();
                    best.primal_residual = r_prim;
                    best.dual_residual = r_dual;
                    best.iterations = iter;
                }
                if r_prim <= s.tol && r_dual <= s.tol {
                    return QpSolution {
                        z: x,
                        status: QpStatus::Optimal,
                        primal_residual: r_prim,
                        dual_residual: r_dual,
                        iterations: iter,
                        multipliers: y,
                    };
                }
                // Certificates only make sense for meaningfully infeasible
                // iterates; marginally feasible problems (active-set
                // boundaries with empty interior) otherwise trigger them
                // spuriously.
                let delta_y = &y - &prev_y;
                if r_prim > 1e-5
                    && infeasibility_certificate(&t.a_t, &lower, &upper, &delta_y, s.infeas_tol)
                {
                    return QpSolution {
                        z: x,
                        status: QpStatus::Infeasible,
                        primal_residual: r_prim,
                        dual_residual: r_dual,
                        iterations: iter,
                        multipliers: y,
                    };
                }
                prev_y = y;
            }
        }
        best
    }

    fn try_equality_path(
        &self,
        q: &DVector<f64>,
        b_eq: &DVector<f64>,
        b_in: &DVector<f64>,
    ) -> Option<QpSolution> {
        let n = self.num_vars();
        let n_eq = self.a_eq.nrows();
        let tol = self.settings.tol;
        let v = if n_eq == 0 {
            let chol = self.reduced_chol.as_ref()?;
            chol.solve(&(-q))
        } else {
            // Particular solution through the pseudo-inverse.
            let ut_b = self.svd_u.transpose() * b_eq;
            let mut scaled = ut_b.clone();
            for i in 0..scaled.len() {
                scaled[i] *= self.sigma_inv[i];
            }
            let v_p = self.svd_vt.transpose() * scaled;
            // Consistency of the equality system.
            let res = &self.a_eq * &v_p - b_eq;
            if inf_norm(&res) > 1e-8 * (1.0 + inf_norm(b_eq)) {
                return Some(QpSolution {
                    z: v_p,
                    status: QpStatus::Infeasible,
                    primal_residual: inf_norm(&res),
                    dual_residual: f64::INFINITY,
                    iterations: 0,
                    multipliers: DVector::zeros(n_eq + self.a_in.nrows()),
                });
            }
            if self.null_basis.ncols() == 0 {
                v_p
            } else {
                let chol = self.reduced_chol.as_ref()?;
                let rhs = -self.null_basis.transpose() * (q + &self.p * &v_p);
                let yv = chol.solve(&rhs);
                v_p + &self.null_basis * yv
            }
        };
        // All inequalities must hold within tolerance for the fast path to
        // be the true optimum (their multipliers are zero).
        let slack_ok = if self.a_in.nrows() == 0 {
            true
        } else {
            let av = &self.a_in * &v;
            (0..av.len()).all(|i| av[i] <= b_in[i] + tol)
        };
        if !slack_ok {
            return None;
        }
        // Equality multipliers from least squares: A_eq' nu = -(P v + q).
        let grad = &self.p * &v + q;
        let mut multipliers = DVector::zeros(n_eq + self.a_in.nrows());
        let dual_residual = if n_eq > 0 {
            let rhs = -&grad;
            // nu = U Sigma^-1 V' rhs  (pseudo-inverse of A_eq').
            let mut vt_rhs = DVector::zeros(self.svd_vt.nrows());
            for i in 0..self.svd_vt.nrows() {
                let mut acc = 0.0;
                for jx in 0..n {
                    acc += self.svd_vt[(i, jx)] * rhs[jx];
                }
                vt_rhs[i] = acc * self.sigma_inv[i];
            }
            let nu = &self.svd_u * vt_rhs;
            for i in 0..n_eq {
                multipliers[i] = nu[i];
            }
            inf_norm(&(grad + self.a_eq.transpose() * nu))
        } else {
            inf_norm(&grad)
        };
        let scale = 1.0 + inf_norm(q);
        if dual_residual > (tol * scale).max(1e-9) {
            // Should not happen for consistent systems; let ADMM polish.
            return None;
        }
        Some(QpSolution {
            z: v,
            status: QpStatus::Optimal,
            primal_residual: 0.0,
            dual_residual,
            iterations: 0,
            multipliers,
        })
    }

    /// Primal-dual active-set refinement: pin a working set of inequality
    /// rows at their bounds, solve the resulting KKT system directly, and
    /// exchange rows until primal feasibility and dual signs hold. Bails
    /// out to ADMM on singular systems or slow convergence; any returned
    /// solution has passed the full KKT residual check, so this path never
    /// trades accuracy for speed.
    fn try_active_set(
        &self,
        q: &DVector<f64>,
        b_eq: &DVector<f64>,
        b_in: &DVector<f64>,
        warm: Option<&DVector<f64>>,
    ) -> Option<QpSolution> {
        let n = self.num_vars();
        let n_eq = self.a_eq.nrows();
        let n_in = self.a_in.nrows();
        if n_in == 0 {
            return None;
        }
        let tol = self.settings.tol;
        let mut active: Vec<usize> = match warm {
            Some(w) if w.len() == n => {
                let aw = &self.a_in * w;
                (0..n_in).filter(|&i| aw[i] >= b_in[i] - 1e-9).collect()
            }
            _ => Vec::new(),
        };
        // Working-set cap keeps the KKT system nonsingular-sized.
        if active.len() + n_eq > n {
            active.truncate(n.saturating_sub(n_eq));
        }
        for _pass in 0..16 {
            let ra = active.len();
            let rows = n_eq + ra;
            let dim = n + rows;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&self.p);
            for r in 0..n_eq {
                for c in 0..n {
                    kkt[(n + r, c)] = self.a_eq[(r, c)];
                    kkt[(c, n + r)] = self.a_eq[(r, c)];
                }
            }
            for (k, &row) in active.iter().enumerate() {
                for c in 0..n {
                    kkt[(n + n_eq + k, c)] = self.a_in[(row, c)];
                    kkt[(c, n + n_eq + k)] = self.a_in[(row, c)];
                }
            }
            let mut rhs = DVector::zeros(dim);
            for i in 0..n {
                rhs[i] = -q[i];
            }
            for r in 0..n_eq {
                rhs[n + r] = b_eq[r];
            }
            for (k, &row) in active.iter().enumerate() {
                rhs[n + n_eq + k] = b_in[row];
            }
            let lu = kkt.clone().full_piv_lu();
            let sol = lu.solve(&rhs)?;
            // Singular or inconsistent systems show up as large residuals.
            let res = &kkt * &sol - &rhs;
            let scale = 1.0 + inf_norm(&rhs);
            if inf_norm(&res) > 1e-9 * scale || sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let v = DVector::from_iterator(n, sol.iter().take(n).copied());
            let lambda: Vec<f64> = sol.iter().skip(n + n_eq).copied().collect();

            // Exchange: drop rows with negative multipliers, add violated
            // rows; done when neither exists.
            let mut worst_drop: Option<(usize, f64)> = None;
            for (k, &l) in lambda.iter().enumerate() {
                if l < -tol.max(1e-10) && worst_drop.map_or(true, |(_, w)| l < w) {
                    worst_drop = Some((k, l));
                }
            }
            let av = &self.a_in * &v;
            let mut worst_add: Option<(usize, f64)> = None;
            for i in 0..n_in {
                if active.contains(&i) {
                    continue;
                }
                let viol = av[i] - b_in[i];
                if viol > tol && worst_add.map_or(true, |(_, w)| viol > w) {
                    worst_add = Some((i, viol));
                }
            }
            match (worst_drop, worst_add) {
                (None, None) => {
                    // Full KKT verification on the original data.
                    let mut multipliers = DVector::zeros(n_eq + n_in);
                    for r in 0..n_eq {
                        multipliers[r] = sol[n + r];
                    }
                    for (k, &row) in active.iter().enumerate() {
                        multipliers[n_eq + row] = lambda[k].max(0.0);
                    }
                    let mut grad = &self.p * &v + q;
                    if n_eq > 0 {
                        grad += self.a_eq.transpose() * multipliers.rows(0, n_eq).into_owned();
                    }
                    grad += self.a_in.transpose()
                        * multipliers.rows(n_eq, n_in).into_owned();
                    let r_dual = inf_norm(&grad);
                    let mut r_prim = 0.0f64;
                    if n_eq > 0 {
                        let re = &self.a_eq * &v - b_eq;
                        r_prim = r_prim.max(inf_norm(&re));
                    }
                    for i in 0..n_in {
                        r_prim = r_prim.max(av[i] - b_in[i]);
                    }
                    let q_scale = 1.0 + inf_norm(q);
                    if r_prim <= tol && r_dual <= (tol * q_scale).max(1e-9) {
                        return Some(QpSolution {
                            z: v,
                            status: QpStatus::Optimal,
                            primal_residual: r_prim.max(0.0),
                            dual_residual: r_dual,
                            iterations: 0,
                            multipliers,
                        });
                    }
                    return None;
                }
                (Some((k, _)), _) => {
                    active.remove(k);
                }
                (None, Some((i, _))) => {
                    if active.len() + n_eq >= n {
                        // No room without risking a singular system.
                        return None;
                    }
                    active.push(i);
                    active.sort_unstable();
                }
            }
        }
        None
    }
}

/// Farkas-style certificate of primal infeasibility from a dual increment.
///
/// The increment is normalized before testing so a vanishing `dy` near
/// convergence can never masquerade as a certificate.
fn infeasibility_certificate(
    a_t: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    dy: &DVector<f64>,
    infeas_tol: f64,
) -> bool {
    let dy_norm = inf_norm(dy);
    if dy_norm <= 1e-12 {
        return false;
    }
    let a_scale = a_t.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let at_dy = a_t * dy;
    if inf_norm(&at_dy) > infeas_tol * dy_norm * a_scale {
        return false;
    }
    let mut support = 0.0;
    for r in 0..dy.len() {
        let v = dy[r] / dy_norm;
        if v > 0.0 {
            if !upper[r].is_finite() {
                return false;
            }
            support += upper[r] * v;
        } else if v < 0.0 {
            if !lower[r].is_finite() {
                return false;
            }
            support += lower[r] * v;
        }
    }
    support < -infeas_tol
}

fn project(v: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(lower[i], upper[i]))
}

fn violation(ax: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..ax.len() {
        worst = worst.max(ax[i] - upper[i]).max(lower[i] - ax[i]);
    }
    worst.max(0.0)
}

fn stationarity_cached(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a_t: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> f64 {
    let mut grad = p * x + q;
    grad.gemv(1.0, a_t, y, 1.0);
    inf_norm(&grad)
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn empty_eq(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn equality_pin_scalar() {
        // min 1/2 z^2 s.t. z = 1
        let qp = QuadraticProgram::new(
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![1.0],
            dvector![1.0],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve_qp(&qp, 1e-9, 10_000);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn active_inequality_scalar() {
        // min 1/2 (z-2)^2 s.t. z <= 1  ->  z = 1.
        let (a_eq, b_eq) = empty_eq(1);
        let qp = QuadraticProgram::new(
            dmatrix![1.0],
            dvector![-2.0],
            a_eq,
            b_eq,
            dmatrix![1.0],
            dvector![1.0],
        )
        .unwrap();
        let sol = solve_qp(&qp, 1e-9, 20_000);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-7, "{}", sol.z[0]);
        // KKT by hand: the active multiplier is 1.
        assert!((sol.multipliers[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_box_detected() {
        // z <= -1 and -z <= -1 (z >= 1) cannot both hold.
        let (a_eq, b_eq) = empty_eq(1);
        let qp = QuadraticProgram::new(
            dmatrix![1.0],
            dvector![0.0],
            a_eq,
            b_eq,
            dmatrix![1.0; -1.0],
            dvector![-1.0, -1.0],
        )
        .unwrap();
        let sol = solve_qp(&qp, 1e-9, 20_000);
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn non_psd_rejected() {
        let r = QuadraticProgram::new(
            dmatrix![-1.0],
            dvector![0.0],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn determinism_bitwise() {
        let (a_eq, b_eq) = empty_eq(2);
        let qp = QuadraticProgram::new(
            dmatrix![2.0, 0.3; 0.3, 1.5],
            dvector![-1.0, 2.0],
            a_eq,
            b_eq,
            dmatrix![1.0, 1.0; -1.0, 0.4],
            dvector![0.5, 0.7],
        )
        .unwrap();
        let s1 = solve_qp(&qp, 1e-9, 20_000);
        let s2 = solve_qp(&qp, 1e-9, 20_000);
        assert_eq!(s1.z, s2.z);
        assert_eq!(s1.iterations, s2.iterations);
    }

    #[test]
    fn cost_scaling_leaves_argmin() {
        let (a_eq, b_eq) = empty_eq(2);
        let base_p = dmatrix![2.0, 0.1; 0.1, 3.0];
        let base_q = dvector![-1.0, -2.0];
        let a_in = dmatrix![1.0, 0.0; 0.0, 1.0];
        let b_in = dvector![0.4, 0.9];
        let qp1 = QuadraticProgram::new(
            base_p.clone(),
            base_q.clone(),
            a_eq.clone(),
            b_eq.clone(),
            a_in.clone(),
            b_in.clone(),
        )
        .unwrap();
        let qp2 =
            QuadraticProgram::new(base_p * 37.0, base_q * 37.0, a_eq, b_eq, a_in, b_in).unwrap();
        let s1 = solve_qp(&qp1, 1e-9, 40_000);
        let s2 = solve_qp(&qp2, 1e-9, 40_000);
        assert_eq!(s1.status, QpStatus::Optimal);
        assert_eq!(s2.status, QpStatus::Optimal);
        assert!((s1.z - s2.z).norm() < 1e-6);
    }

    #[test]
    fn badly_scaled_tracking_cost_converges() {
        // Condition spread like a tracking problem: weights 1e3 vs 1e-1.
        let p = dmatrix![
            2000.0, 0.0, 0.0;
            0.0, 0.2, 0.0;
            0.0, 0.0, 700.0
        ];
        let q = dvector![-2000.0, 1.0, -70.0];
        let (a_eq, b_eq) = empty_eq(3);
        let a_in = dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 1.0];
        let b_in = dvector![0.5, 10.0, 0.05];
        let qp = QuadraticProgram::new(p, q, a_eq, b_eq, a_in, b_in).unwrap();
        let sol = solve_qp(&qp, 1e-8, 5_000);
        assert_eq!(sol.status, QpStatus::Optimal, "iters {}", sol.iterations);
        assert!((sol.z[0] - 0.5).abs() < 1e-7);
        assert!((sol.z[2] - 0.05).abs() < 1e-7);
        assert!(sol.iterations < 2_000, "took {} iterations", sol.iterations);
    }

    #[test]
    fn prepared_fast_path_matches_admm() {
        // Equality-constrained problem whose inequalities are inactive.
        let p = dmatrix![2.0, 0.0, 0.0; 0.0, 2.0, 0.0; 0.0, 0.0, 2.0];
        let a_eq = dmatrix![1.0, 1.0, 1.0];
        let a_in = dmatrix![1.0, 0.0, 0.0];
        let prepared =
            PreparedQp::new(p.clone(), a_eq.clone(), a_in.clone(), AdmmSettings::default())
                .unwrap();
        let q = dvector![0.0, -1.0, 0.0];
        let b_eq = dvector![1.0];
        let b_in = dvector![10.0];
        let sol = prepared.solve(&q, &b_eq, &b_in, None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_eq!(sol.iterations, 0, "fast path expected");
        let qp = QuadraticProgram::new(p, q, a_eq, b_eq, a_in, b_in).unwrap();
        let reference = solve_qp(&qp, 1e-10, 40_000);
        assert!((sol.z - reference.z).norm() < 1e-6);
    }

    #[test]
    fn prepared_rank_deficient_equalities() {
        // Duplicate equality rows: consistent but rank deficient.
        let p = DMatrix::identity(2, 2);
        let a_eq = dmatrix![1.0, 0.0; 1.0, 0.0];
        let prepared =
            PreparedQp::new(p, a_eq, DMatrix::zeros(0, 2), AdmmSettings::default()).unwrap();
        let sol = prepared.solve(&dvector![0.0, 0.0], &dvector![0.7, 0.7], &dvector![], None);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z[0] - 0.7).abs() < 1e-9);
        assert!(sol.z[1].abs() < 1e-9);
        // Inconsistent right-hand side is reported infeasible.
        let bad = prepared.solve(&dvector![0.0, 0.0], &dvector![0.7, 0.8], &dvector![], None);
        assert_eq!(bad.status, QpStatus::Infeasible);
    }

    #[test]
    fn prepared_inequality_fallback() {
        // min ||z - (2,2)||^2 with z <= (1,1): both constraints active.
        let p = DMatrix::identity(2, 2) * 2.0;
        let a_in = DMatrix::identity(2, 2);
        let prepared = PreparedQp::new(
            p,
            DMatrix::zeros(0, 2),
            a_in,
            AdmmSettings {
                tol: 1e-9,
                ..AdmmSettings::default()
            },
        )
        .unwrap();
        let sol = prepared.solve(
            &dvector![-4.0, -4.0],
            &DVector::zeros(0),
            &dvector![1.0, 1.0],
            None,
        );
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.z - dvector![1.0, 1.0]).norm() < 1e-7);
        // KKT at the corner: gradient 2(z - 2) balanced by lambda = 2.
        assert!((sol.multipliers[0] - 2.0).abs() < 1e-6);
        assert!((sol.multipliers[1] - 2.0).abs() < 1e-6);
    }
}
