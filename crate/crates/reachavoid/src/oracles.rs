//! Independent reference implementations used by the verification suites.
//!
//! Nothing in the control stack calls into this module; it exists so the
//! test suites can cross-check production code against structurally
//! different algorithms (an interior-point QP solver, brute-force dynamic
//! programming, dense neighborhood scans).

use nalgebra::{DMatrix, DVector};

/// Primal-dual interior-point solve of
/// `min 1/2 x' P x + q' x  s.t.  A x <= b` with strictly convex `P`.
///
/// Plain path-following with a fixed centering parameter; returns `None`
/// when the iteration fails to reach the requested tolerance.
pub fn ipm_qp(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Option<DVector<f64>> {
    let n = q.len();
    let m = b.len();
    if m == 0 {
        return p.clone().cholesky().map(|c| c.solve(&(-q)));
    }
    let mut x = DVector::zeros(n);
    let mut s = DVector::from_fn(m, |i, _| (b[i] - 0.0).max(1.0));
    let mut lam = DVector::from_element(m, 1.0);
    for _ in 0..max_iter {
        let r_d = p * &x + q + a.transpose() * &lam;
        let r_p = a * &x + &s - b;
        let mu = s.dot(&lam) / m as f64;
        if r_d.amax() < tol && r_p.amax() < tol && mu < tol {
            return Some(x);
        }
        let sigma = 0.1;
        // Condensed normal equations: (P + A' D A) dx = -r_d - A'(D r_p - rc/s)
        // with D = diag(lam/s), rc = S lam - sigma mu 1.
        let mut m_mat = p.clone();
        let mut rhs = -&r_d;
        let mut scaled_a = a.clone();
        for i in 0..m {
            let d = lam[i] / s[i];
            for jx in 0..n {
                scaled_a[(i, jx)] *= d;
            }
        }
        m_mat += a.transpose() * &scaled_a;
        let rc = DVector::from_fn(m, |i, _| s[i] * lam[i] - sigma * mu);
        let mut corr = DVector::zeros(m);
        for i in 0..m {
            corr[i] = (lam[i] / s[i]) * r_p[i] - rc[i] / s[i];
        }
        rhs -= a.transpose() * corr;
        let dx = m_mat.cholesky()?.solve(&rhs);
        let a_dx = a * &dx;
        let mut dlam = DVector::zeros(m);
        let mut ds = DVector::zeros(m);
        for i in 0..m {
            dlam[i] = (lam[i] / s[i]) * (r_p[i] + a_dx[i]) - rc[i] / s[i];
            ds[i] = -(rc[i] + s[i] * dlam[i]) / lam[i];
        }
        // Fraction-to-boundary step.
        let mut alpha = 1.0f64;
        for i in 0..m {
            if ds[i] < 0.0 {
                alpha = alpha.min(-0.99 * s[i] / ds[i]);
            }
            if dlam[i] < 0.0 {
                alpha = alpha.min(-0.99 * lam[i] / dlam[i]);
            }
        }
        x += &dx * alpha;
        s += &ds * alpha;
        lam += &dlam * alpha;
    }
    None
}

/// Cell classification on a brute-force lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Safe,
    Target,
    Unsafe,
}

/// Raw lattice description consumed by the oracle recursions.
///
/// Cells live on an integer lattice with edge `zeta`; `kind[i]` classifies
/// each cell. Anything outside the lattice counts as unsafe.
#[derive(Debug, Clone)]
pub struct OracleGrid {
    pub dims: Vec<usize>,
    pub zeta: f64,
    pub kind: Vec<CellKind>,
}

impl OracleGrid {
    pub fn num_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn unflatten(&self, mut idx: usize) -> Vec<i64> {
        let mut coords = vec![0i64; self.dims.len()];
        for d in (0..self.dims.len()).rev() {
            coords[d] = (idx % self.dims[d]) as i64;
            idx /= self.dims[d];
        }
        coords
    }

    pub fn flatten(&self, coords: &[i64]) -> Option<usize> {
        let mut idx = 0usize;
        for (d, &c) in coords.iter().enumerate() {
            if c < 0 || c as usize >= self.dims[d] {
                return None;
            }
            idx = idx * self.dims[d] + c as usize;
        }
        Some(idx)
    }

    /// Dense scan: all lattice cells whose center lies within Euclidean
    /// slack `r` of the box of edge `2 zeta` centered on `cell` (the
    /// Minkowski sum of two cells and the radius-`r` ball). Includes
    /// out-of-lattice neighbors as `None`.
    pub fn neighborhood_scan(&self, cell: usize, r: f64) -> Vec<Option<usize>> {
        let coords = self.unflatten(cell);
        let reach = ((self.zeta + r) / self.zeta).ceil() as i64 + 1;
        let mut out = Vec::new();
        let ndim = self.dims.len();
        let mut offset = vec![-reach; ndim];
        loop {
            // Distance from offset center to the inflated box of half-width zeta.
            let mut dist2 = 0.0;
            for d in 0..ndim {
                let gap = ((offset[d] as f64 * self.zeta).abs() - self.zeta).max(0.0);
                dist2 += gap * gap;
            }
            if dist2.sqrt() <= r {
                let coords2: Vec<i64> =
                    coords.iter().zip(&offset).map(|(c, o)| c + o).collect();
                out.push(self.flatten(&coords2));
            }
            // Advance the odometer.
            let mut d = ndim;
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                offset[d] += 1;
                if offset[d] <= reach {
                    break;
                }
                offset[d] = -reach;
            }
        }
    }
}

/// Transition rows for the oracle: `(p_target, p_unsafe, [(cell, p)])`.
pub type OracleRow = (f64, f64, Vec<(usize, f64)>);

#[derive(Debug, Clone)]
pub struct OracleModel {
    pub grid: OracleGrid,
    /// `rows[cell][action]`, defined for safe cells only (others absorb).
    pub rows: Vec<Vec<OracleRow>>,
    pub n_actions: usize,
    /// Robustification radius used for the neighborhood minimum.
    pub r: f64,
}

impl OracleModel {
    fn extended_value(&self, values: &[f64], cell: Option<usize>) -> f64 {
        match cell {
            None => 0.0,
            Some(i) => match self.grid.kind[i] {
                CellKind::Target => 1.0,
                CellKind::Unsafe => 0.0,
                CellKind::Safe => values[i],
            },
        }
    }

    fn worst_neighbor(&self, values: &[f64], cell: usize) -> f64 {
        self.grid
            .neighborhood_scan(cell, self.r)
            .into_iter()
            .map(|c| self.extended_value(values, c))
            .fold(f64::INFINITY, f64::min)
    }

    /// One backward step for a fixed action, optionally with the
    /// worst-neighbor robustification.
    fn backup(&self, values: &[f64], cell: usize, action: usize, robust: bool) -> f64 {
        let (p_t, _p_u, ref cells) = self.rows[cell][action];
        let mut v = p_t;
        for &(j, p) in cells {
            debug_assert_eq!(self.grid.kind[j], CellKind::Safe);
            let vj = if robust {
                self.worst_neighbor(values, j)
            } else {
                values[j]
            };
            v += p * vj;
        }
        v
    }

    /// Brute-force value iteration over all (stage, cell, action), written
    /// as plain nested loops with dense neighborhood scans.
    pub fn value_iteration(&self, stages: usize, robust: bool) -> Vec<Vec<f64>> {
        let n = self.grid.num_cells();
        let mut per_stage = vec![vec![0.0; n]; stages + 1];
        for k in (0..stages).rev() {
            let next = per_stage[k + 1].clone();
            for cell in 0..n {
                if self.grid.kind[cell] != CellKind::Safe {
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                for a in 0..self.n_actions {
                    best = best.max(self.backup(&next, cell, a, robust));
                }
                per_stage[k][cell] = best;
            }
        }
        per_stage
    }

    /// Value of a fixed Markov policy (`policy[k][cell]`), computed by the
    /// same per-policy recursion used in the maximization.
    pub fn policy_value(&self, policy: &[Vec<usize>], robust: bool) -> Vec<f64> {
        let n = self.grid.num_cells();
        let stages = policy.len();
        let mut values = vec![0.0; n];
        for k in (0..stages).rev() {
            let next = values.clone();
            let mut cur = vec![0.0; n];
            for cell in 0..n {
                if self.grid.kind[cell] != CellKind::Safe {
                    continue;
                }
                cur[cell] = self.backup(&next, cell, policy[k][cell], robust);
            }
            values = cur;
        }
        values
    }

    /// Exhaustive enumeration of deterministic Markov policies; returns the
    /// best value per safe cell at stage 0. Exponential; viable only for
    /// tiny instances.
    pub fn enumerate_policies(&self, stages: usize, robust: bool) -> Vec<f64> {
        let n = self.grid.num_cells();
        let safe: Vec<usize> = (0..n)
            .filter(|&i| self.grid.kind[i] == CellKind::Safe)
            .collect();
        let slots = safe.len() * stages;
        let total = (self.n_actions as u64).pow(slots as u32);
        let mut best = vec![0.0f64; n];
        for code in 0..total {
            let mut c = code;
            let mut policy = vec![vec![0usize; n]; stages];
            for k in 0..stages {
                for &cell in &safe {
                    policy[k][cell] = (c % self.n_actions as u64) as usize;
                    c /= self.n_actions as u64;
                }
            }
            let v = self.policy_value(&policy, robust);
            for &cell in &safe {
                best[cell] = best[cell].max(v[cell]);
            }
        }
        best
    }
}

/// Random cell-aligned reach-avoid world plus synthetic transition rows.
///
/// Classification happens with zero margin so the intended cell classes
/// hold exactly; the returned radius is for the value-iteration
/// neighborhoods only. Rows are integer-count distributions over
/// {target, unsafe, a few safe cells}, so they sum to one up to a final
/// floating division.
pub fn random_world(
    rng: &mut impl rand::Rng,
    max_dim: usize,
    n_actions: usize,
    k_counts: usize,
) -> (
    crate::grid::GridAbstraction,
    Vec<Vec<crate::kernel::ProbRow>>,
    f64,
) {
    use crate::geometry::{HyperRect, RegionSet};
    use nalgebra::DVector;

    let zeta = 0.1;
    loop {
        let w = rng.random_range(2..=max_dim);
        let h = rng.random_range(2..=max_dim);
        let bounds = HyperRect::new(
            DVector::from_vec(vec![w as f64 * zeta / 2.0, h as f64 * zeta / 2.0]),
            DVector::from_vec(vec![w as f64 * zeta / 2.0, h as f64 * zeta / 2.0]),
        )
        .expect("valid bounds");
        let cell_rect = |cx: usize, cy: usize| {
            HyperRect::new(
                DVector::from_vec(vec![
                    (cx as f64 + 0.5) * zeta,
                    (cy as f64 + 0.5) * zeta,
                ]),
                DVector::from_vec(vec![zeta / 2.0, zeta / 2.0]),
            )
            .expect("valid cell rect")
        };
        let target_cell = (rng.random_range(0..w), rng.random_range(0..h));
        let target = RegionSet::Rect(cell_rect(target_cell.0, target_cell.1));
        let mut obstacles = Vec::new();
        for _ in 0..rng.random_range(0..3usize) {
            let c = (rng.random_range(0..w), rng.random_range(0..h));
            if c != target_cell {
                obstacles.push(RegionSet::Rect(cell_rect(c.0, c.1)));
            }
        }
        let safe = RegionSet::box_minus_obstacles(bounds.clone(), obstacles);
        let x0 = DVector::from_vec(vec![zeta / 2.0, zeta / 2.0]);
        let grid = match crate::grid::GridAbstraction::build(&bounds, &safe, &target, zeta, 0.0, &x0)
        {
            Ok(g) => g,
            Err(_) => continue,
        };
        if grid.num_safe() == 0 {
            continue;
        }
        let n_safe = grid.num_safe();
        let mut rows = Vec::with_capacity(n_safe);
        for _ in 0..n_safe {
            let mut per_action = Vec::with_capacity(n_actions);
            for _ in 0..n_actions {
                // Support: up to three safe cells.
                let support: Vec<u32> = (0..3)
                    .map(|_| rng.random_range(0..n_safe) as u32)
                    .collect();
                let mut n_target = 0usize;
                let mut n_unsafe = 0usize;
                let mut counts = std::collections::BTreeMap::<u32, usize>::new();
                for _ in 0..k_counts {
                    let toss: f64 = rng.random();
                    if toss < 0.15 {
                        n_target += 1;
                    } else if toss < 0.3 {
                        n_unsafe += 1;
                    } else {
                        let pick = support[rng.random_range(0..support.len())];
                        *counts.entry(pick).or_insert(0) += 1;
                    }
                }
                per_action.push(crate::kernel::ProbRow {
                    p_target: n_target as f64 / k_counts as f64,
                    p_unsafe: n_unsafe as f64 / k_counts as f64,
                    cells: counts
                        .into_iter()
                        .map(|(o, c)| (o, c as f64 / k_counts as f64))
                        .collect(),
                    stage_cost: -rng.random_range(0.0..2.0),
                });
            }
            rows.push(per_action);
        }
        let r = [0.0, zeta / 2.0, zeta][rng.random_range(0..3usize)];
        return (grid, rows, r);
    }
}

/// Mechanical conversion of an abstraction grid plus ordinal-indexed rows
/// into the flat-indexed oracle model.
pub fn to_oracle_model(
    grid: &crate::grid::GridAbstraction,
    rows: &[Vec<crate::kernel::ProbRow>],
    r: f64,
) -> OracleModel {
    use crate::grid::CellClass;
    let kind: Vec<CellKind> = (0..grid.num_cells())
        .map(|flat| match grid.class(flat) {
            CellClass::Safe => CellKind::Safe,
            CellClass::Target => CellKind::Target,
            CellClass::Unsafe => CellKind::Unsafe,
        })
        .collect();
    let n_actions = rows.first().map_or(0, |r| r.len());
    let mut flat_rows = vec![Vec::new(); grid.num_cells()];
    for (ord, per_action) in rows.iter().enumerate() {
        let flat = grid.safe_cells()[ord];
        flat_rows[flat] = per_action
            .iter()
            .map(|row| {
                let cells: Vec<(usize, f64)> = row
                    .cells
                    .iter()
                    .map(|&(o, p)| (grid.safe_cells()[o as usize], p))
                    .collect();
                (row.p_target, row.p_unsafe, cells)
            })
            .collect();
    }
    // Absorbing cells never back up, but keep the shape rectangular.
    for (flat, fr) in flat_rows.iter_mut().enumerate() {
        if fr.is_empty() {
            *fr = vec![(0.0, 1.0, Vec::new()); n_actions];
        }
        let _ = flat;
    }
    OracleModel {
        grid: OracleGrid {
            dims: grid.dims().to_vec(),
            zeta: grid.zeta(),
            kind,
        },
        rows: flat_rows,
        n_actions,
        r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn ipm_solves_box_constrained() {
        // min (x-2)^2 + (y-2)^2, x <= 1, y <= 0.5
        let p = DMatrix::identity(2, 2) * 2.0;
        let q = dvector![-4.0, -4.0];
        let a = dmatrix![1.0, 0.0; 0.0, 1.0];
        let b = dvector![1.0, 0.5];
        let x = ipm_qp(&p, &q, &a, &b, 1e-10, 100).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-8);
        assert!((x[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn oracle_grid_roundtrip() {
        let g = OracleGrid {
            dims: vec![3, 4],
            zeta: 0.1,
            kind: vec![CellKind::Safe; 12],
        };
        for i in 0..12 {
            assert_eq!(g.flatten(&g.unflatten(i)), Some(i));
        }
        assert_eq!(g.flatten(&[3, 0]), None);
    }

    #[test]
    fn moore_neighborhood_at_zero_radius() {
        let g = OracleGrid {
            dims: vec![5, 5],
            zeta: 0.1,
            kind: vec![CellKind::Safe; 25],
        };
        let center = g.flatten(&[2, 2]).unwrap();
        let nb = g.neighborhood_scan(center, 0.0);
        assert_eq!(nb.len(), 9);
    }
}
