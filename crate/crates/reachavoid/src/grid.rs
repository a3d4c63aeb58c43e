//! Hypercube grid over the stochastic subspace.
//!
//! Cells tile the bounding box of the safe region with edge `zeta`. Each
//! cell is classified once, conservatively, against the tightened sets:
//! target cells lie entirely inside the target eroded by `B_r`, safe cells
//! entirely inside the safe set eroded by `B_r`. Everything else (including
//! all space beyond the bounding box) counts as unsafe, which is the
//! direction that keeps the certified bound valid.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{HyperRect, RegionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellClass {
    Safe,
    Target,
    Unsafe,
}

#[derive(Debug, Clone)]
pub struct GridAbstraction {
    zeta: f64,
    lo: Vec<f64>,
    dims: Vec<usize>,
    class: Vec<CellClass>,
    /// Flat index of every safe cell, ascending (the ordinal order).
    safe_cells: Vec<usize>,
    /// Flat index -> ordinal + 1 (0 when not safe).
    ordinal_lookup: Vec<u32>,
    initial_cell: usize,
}

impl GridAbstraction {
    /// Builds and classifies the lattice.
    ///
    /// `x0_s` is the stochastic part of the initial state; its cell becomes
    /// the designated initial cell and must lie inside the bounding box.
    pub fn build(
        bounds: &HyperRect,
        safe_set: &RegionSet,
        target_set: &RegionSet,
        zeta: f64,
        r: f64,
        x0_s: &DVector<f64>,
    ) -> Result<Self> {
        if !(zeta > 0.0) {
            return Err(Error::invalid("cell edge must be positive"));
        }
        if !(r >= 0.0) {
            return Err(Error::invalid("tube radius must be >= 0"));
        }
        let ndim = bounds.dim();
        for (name, d) in [("safe set", safe_set.dim()), ("target set", target_set.dim())] {
            if d != 0 && d != ndim {
                return Err(Error::dim(ndim, d, format!("grid {name} dimension")));
            }
        }
        if x0_s.len() != ndim {
            return Err(Error::dim(ndim, x0_s.len(), "grid initial state dimension"));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut lo = Vec::with_capacity(ndim);
        for d in 0..ndim {
            let width = 2.0 * bounds.half_widths()[d];
            let cells = (width / zeta - 1e-9).ceil().max(1.0) as usize;
            dims.push(cells);
            lo.push(bounds.center()[d] - bounds.half_widths()[d]);
        }
        let total: usize = dims.iter().product();
        if total == 0 {
            return Err(Error::invalid("empty grid"));
        }
        let half = DVector::from_element(ndim, 0.5 * zeta);
        let mut class = Vec::with_capacity(total);
        let mut safe_cells = Vec::new();
        let mut ordinal_lookup = vec![0u32; total];
        for flat in 0..total {
            let center = center_of(&lo, &dims, zeta, flat);
            let cell = HyperRect::new(center, half.clone())?;
            let c = if target_set.fully_inside(&cell, r)? {
                CellClass::Target
            } else if safe_set.fully_inside(&cell, r)? {
                CellClass::Safe
            } else {
                CellClass::Unsafe
            };
            if c == CellClass::Safe {
                ordinal_lookup[flat] = safe_cells.len() as u32 + 1;
                safe_cells.push(flat);
            }
            class.push(c);
        }
        let grid = Self {
            zeta,
            lo,
            dims,
            class,
            safe_cells,
            ordinal_lookup,
            initial_cell: 0,
        };
        let initial_cell = grid
            .locate(x0_s.as_slice())
            .ok_or_else(|| Error::invalid("initial state lies outside the grid bounding box"))?;
        Ok(Self {
            initial_cell,
            ..grid
        })
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_cells(&self) -> usize {
        self.class.len()
    }

    pub fn num_safe(&self) -> usize {
        self.safe_cells.len()
    }

    pub fn num_target(&self) -> usize {
        self.class.iter().filter(|c| **c == CellClass::Target).count()
    }

    pub fn initial_cell(&self) -> usize {
        self.initial_cell
    }

    pub fn class(&self, flat: usize) -> CellClass {
        self.class[flat]
    }

    /// Ordinal among safe cells, if the cell is safe.
    pub fn safe_ordinal(&self, flat: usize) -> Option<usize> {
        match self.ordinal_lookup[flat] {
            0 => None,
            v => Some(v as usize - 1),
        }
    }

    pub fn safe_cells(&self) -> &[usize] {
        &self.safe_cells
    }

    pub fn coords_of(&self, mut flat: usize) -> Vec<i64> {
        let mut coords = vec![0i64; self.dims.len()];
        for d in (0..self.dims.len()).rev() {
            coords[d] = (flat % self.dims[d]) as i64;
            flat /= self.dims[d];
        }
        coords
    }

    pub fn flat_of(&self, coords: &[i64]) -> Option<usize> {
        let mut flat = 0usize;
        for (d, &c) in coords.iter().enumerate() {
            if c < 0 || c as usize >= self.dims[d] {
                return None;
            }
            flat = flat * self.dims[d] + c as usize;
        }
        Some(flat)
    }

    pub fn center(&self, flat: usize) -> DVector<f64> {
        center_of(&self.lo, &self.dims, self.zeta, flat)
    }

    /// Two-dimensional fast path of [`Self::locate`], for hot loops.
    #[inline]
    pub fn locate2(&self, x0: f64, x1: f64) -> Option<usize> {
        debug_assert_eq!(self.dims.len(), 2);
        let t0 = (x0 - self.lo[0]) / self.zeta;
        let t1 = (x1 - self.lo[1]) / self.zeta;
        if t0 < 0.0 || t1 < 0.0 {
            return None;
        }
        let f0 = t0.floor();
        let f1 = t1.floor();
        let mut i0 = f0 as usize;
        let mut i1 = f1 as usize;
        if t0 == f0 && i0 > 0 {
            i0 -= 1;
        }
        if t1 == f1 && i1 > 0 {
            i1 -= 1;
        }
        if i0 >= self.dims[0] || i1 >= self.dims[1] {
            return None;
        }
        Some(i0 * self.dims[1] + i1)
    }

    /// Cell containing a point; points on a shared face belong to the
    /// lower-index cell.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        debug_assert_eq!(x.len(), self.dims.len());
        let mut coords = vec![0i64; self.dims.len()];
        for d in 0..self.dims.len() {
            let t = (x[d] - self.lo[d]) / self.zeta;
            if t < 0.0 {
                return None;
            }
            let mut idx = t.floor() as i64;
            if t == t.floor() && idx > 0 {
                idx -= 1;
            }
            if idx as usize >= self.dims[d] {
                return None;
            }
            coords[d] = idx;
        }
        self.flat_of(&coords)
    }

    /// Stable content hash for artifact caching.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.zeta.to_le_bytes());
        for v in &self.lo {
            h.update(v.to_le_bytes());
        }
        for d in &self.dims {
            h.update((*d as u64).to_le_bytes());
        }
        for c in &self.class {
            h.update([match c {
                CellClass::Safe => 0u8,
                CellClass::Target => 1,
                CellClass::Unsafe => 2,
            }]);
        }
        h.update((self.initial_cell as u64).to_le_bytes());
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn center_of(lo: &[f64], dims: &[usize], zeta: f64, mut flat: usize) -> DVector<f64> {
    let ndim = dims.len();
    let mut coords = vec![0usize; ndim];
    for d in (0..ndim).rev() {
        coords[d] = flat % dims[d];
        flat /= dims[d];
    }
    DVector::from_fn(ndim, |d, _| lo[d] + (coords[d] as f64 + 0.5) * zeta)
}

/// Lattice offsets forming the worst-case neighborhood: all centers within
/// the Minkowski sum of two cells and the ball `B_r`. Shared by every cell
/// (lattice translation symmetry); out-of-grid members are resolved per
/// cell at query time.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    offsets: Vec<Vec<i64>>,
    pub r: f64,
}

impl NeighborhoodIndex {
    pub fn build(grid: &GridAbstraction, r: f64) -> Result<Self> {
        if !(r >= 0.0) {
            return Err(Error::invalid("neighborhood radius must be >= 0"));
        }
        let ndim = grid.ndim();
        let zeta = grid.zeta();
        let reach = ((zeta + r) / zeta).ceil() as i64;
        let mut offsets = Vec::new();
        let mut offset = vec![-reach; ndim];
        loop {
            // Distance from the offset center to the box of half-width zeta
            // (one cell inflated by one cell), exact per coordinate.
            let mut dist2 = 0.0;
            for d in 0..ndim {
                let gap = ((offset[d] as f64 * zeta).abs() - zeta).max(0.0);
                dist2 += gap * gap;
            }
            if dist2.sqrt() <= r {
                offsets.push(offset.clone());
            }
            let mut d = ndim;
            loop {
                if d == 0 {
                    debug_assert!(offsets.iter().any(|o| o.iter().all(|v| *v == 0)));
                    return Ok(Self { offsets, r });
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

    pub fn offsets(&self) -> &[Vec<i64>] {
        &self.offsets
    }

    /// Neighbors of a cell as flat indices; `None` entries lie beyond the
    /// grid and carry the unsafe value.
    pub fn neighbors<'a>(
        &'a self,
        grid: &'a GridAbstraction,
        flat: usize,
    ) -> impl Iterator<Item = Option<usize>> + 'a {
        let coords = grid.coords_of(flat);
        self.offsets.iter().map(move |off| {
            let shifted: Vec<i64> = coords.iter().zip(off).map(|(c, o)| c + o).collect();
            grid.flat_of(&shifted)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn square_world(
        target: Option<RegionSet>,
        obstacles: Vec<RegionSet>,
    ) -> (HyperRect, RegionSet, RegionSet) {
        let bounds = HyperRect::new(dvector![0.5, 0.5], dvector![0.5, 0.5]).unwrap();
        let safe = RegionSet::box_minus_obstacles(bounds.clone(), obstacles);
        let target = target.unwrap_or(RegionSet::Union(vec![]));
        (bounds, safe, target)
    }

    #[test]
    fn four_cells_all_safe() {
        let (bounds, safe, target) = square_world(None, vec![]);
        let g =
            GridAbstraction::build(&bounds, &safe, &target, 0.5, 0.0, &dvector![0.25, 0.25])
                .unwrap();
        assert_eq!(g.num_cells(), 4);
        assert_eq!(g.num_safe(), 4);
        assert_eq!(g.num_target(), 0);
        assert_eq!(g.initial_cell(), 0);
    }

    #[test]
    fn obstacle_straddling_cell_is_unsafe() {
        let obstacle = RegionSet::Ball {
            center: dvector![0.5, 0.5],
            radius: 0.2,
        };
        let (bounds, safe, target) = square_world(None, vec![obstacle]);
        let g = GridAbstraction::build(&bounds, &safe, &target, 0.25, 0.0, &dvector![0.1, 0.1])
            .unwrap();
        for coords in [[1, 1], [1, 2], [2, 1], [2, 2]] {
            let flat = g.flat_of(&coords).unwrap();
            assert_eq!(g.class(flat), CellClass::Unsafe);
        }
        assert_eq!(g.class(g.flat_of(&[0, 0]).unwrap()), CellClass::Safe);
    }

    #[test]
    fn margin_turns_boundary_cells_unsafe() {
        let (bounds, safe, target) = square_world(None, vec![]);
        let g = GridAbstraction::build(&bounds, &safe, &target, 0.25, 0.05, &dvector![0.5, 0.5])
            .unwrap();
        // Edge cells cannot keep the 0.05 margin inside the box.
        assert_eq!(g.class(g.flat_of(&[0, 0]).unwrap()), CellClass::Unsafe);
        assert_eq!(g.class(g.flat_of(&[1, 1]).unwrap()), CellClass::Safe);
    }

    #[test]
    fn target_cells_classified_first() {
        let target = RegionSet::Rect(
            HyperRect::new(dvector![0.875, 0.875], dvector![0.125, 0.125]).unwrap(),
        );
        let (bounds, safe, _) = square_world(None, vec![]);
        let g = GridAbstraction::build(&bounds, &safe, &target, 0.25, 0.0, &dvector![0.1, 0.1])
            .unwrap();
        assert_eq!(g.class(g.flat_of(&[3, 3]).unwrap()), CellClass::Target);
        assert_eq!(g.num_target(), 1);
        assert_eq!(g.num_safe(), 15);
    }

    #[test]
    fn locate_tie_break_prefers_lower_cell() {
        let (bounds, safe, target) = square_world(None, vec![]);
        let g = GridAbstraction::build(&bounds, &safe, &target, 0.25, 0.0, &dvector![0.1, 0.1])
            .unwrap();
        assert_eq!(g.locate(&[0.3, 0.3]), g.flat_of(&[1, 1]));
        // Point exactly on the face between cells 0 and 1 (x = 0.25).
        assert_eq!(g.locate(&[0.25, 0.1]), g.flat_of(&[0, 0]));
        // Lower boundary of the box belongs to cell 0.
        assert_eq!(g.locate(&[0.0, 0.0]), g.flat_of(&[0, 0]));
        // Upper boundary belongs to the last cell.
        assert_eq!(g.locate(&[1.0, 1.0]), g.flat_of(&[3, 3]));
        assert_eq!(g.locate(&[1.01, 0.5]), None);
    }

    #[test]
    fn locate2_matches_generic_locate() {
        let (bounds, safe, target) = square_world(None, vec![]);
        let g = GridAbstraction::build(&bounds, &safe, &target, 0.13, 0.0, &dvector![0.5, 0.5])
            .unwrap();
        let mut t = -0.3f64;
        while t < 1.4 {
            let mut u = -0.3f64;
            while u < 1.4 {
                assert_eq!(g.locate(&[t, u]), g.locate2(t, u), "({t}, {u})");
                u += 0.0317;
            }
            // Exact boundary values too.
            assert_eq!(g.locate(&[t, 0.26]), g.locate2(t, 0.26));
            t += 0.0293;
        }
    }

    #[test]
    fn initial_state_outside_box_rejected() {
        let (bounds, safe, target) = square_world(None, vec![]);
        let err = GridAbstraction::build(&bounds, &safe, &target, 0.25, 0.0, &dvector![2.0, 0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn moore_neighborhood_at_zero_radius() {
        let (bounds, safe, target) = square_world(None, vec![]);
        let g = GridAbstraction::build(&bounds, &safe, &target, 0.2, 0.0, &dvector![0.5, 0.5])
            .unwrap();
        let nb = NeighborhoodIndex::build(&g, 0.0).unwrap();
        assert_eq!(nb.offsets().len(), 9);
        // Clipped at the corner: only 4 in-grid members.
        let corner = g.flat_of(&[0, 0]).unwrap();
        let present = nb.neighbors(&g, corner).flatten().count();
        assert_eq!(present, 4);
        let mid = g.flat_of(&[2, 2]).unwrap();
        assert_eq!(nb.neighbors(&g, mid).flatten().count(), 9);
    }

    #[test]
    fn neighborhood_grows_one_ring_at_r_equals_zeta() {
        let (bounds, safe, target) = square_world(None, vec![]);
        let g = GridAbstraction::build(&bounds, &safe, &target, 0.1, 0.0, &dvector![0.5, 0.5])
            .unwrap();
        let nb = NeighborhoodIndex::build(&g, 0.1).unwrap();
        // 5x5 block minus the four far corners (distance zeta*sqrt(2) > r).
        assert_eq!(nb.offsets().len(), 21);
    }

    #[test]
    fn neighborhood_matches_bruteforce_scan() {
        use crate::oracles::{CellKind, OracleGrid};
        let (bounds, safe, target) = square_world(None, vec![]);
        let g = GridAbstraction::build(&bounds, &safe, &target, 0.1, 0.0, &dvector![0.5, 0.5])
            .unwrap();
        let oracle_grid = OracleGrid {
            dims: g.dims().to_vec(),
            zeta: g.zeta(),
            kind: vec![CellKind::Safe; g.num_cells()],
        };
        for &r in &[0.0, 0.05, 0.1, 0.17, 0.23] {
            let nb = NeighborhoodIndex::build(&g, r).unwrap();
            for flat in [0, 17, 55, 99] {
                let mut got: Vec<Option<usize>> = nb.neighbors(&g, flat).collect();
                let mut want = oracle_grid.neighborhood_scan(flat, r);
                got.sort();
                want.sort();
                assert_eq!(got, want, "r = {r}, cell {flat}");
            }
        }
    }

    #[test]
    fn single_cell_grid() {
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
        assert_eq!(g.num_cells(), 1);
        let nb = NeighborhoodIndex::build(&g, 0.0).unwrap();
        let members: Vec<_> = nb.neighbors(&g, 0).flatten().collect();
        assert_eq!(members, vec![0]);
    }

    #[test]
    fn ordinals_are_dense_and_sorted() {
        let obstacle =
            RegionSet::Rect(HyperRect::new(dvector![0.5, 0.5], dvector![0.2, 0.2]).unwrap());
        let (bounds, safe, target) = square_world(None, vec![obstacle]);
        let g =
            GridAbstraction::build(&bounds, &safe, &target, 0.125, 0.0, &dvector![0.05, 0.05])
                .unwrap();
        let mut prev = None;
        for (ord, &flat) in g.safe_cells().iter().enumerate() {
            assert_eq!(g.safe_ordinal(flat), Some(ord));
            if let Some(p) = prev {
                assert!(flat > p);
            }
            prev = Some(flat);
        }
    }
}
