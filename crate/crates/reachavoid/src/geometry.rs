//! Polyhedral and norm-ball set algebra.
//!
//! Everything here is exact arithmetic on support functions: erosions of
//! halfspace polytopes by Euclidean balls and axis-aligned boxes, membership
//! tests, and conservative cell-containment checks used to build the
//! tightened safe and target sets. Closed-set semantics throughout: boundary
//! points are members, complements are strict.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Feasibility slack for vertex enumeration, relative to row scale.
const VERTEX_FEAS_TOL: f64 = 1e-9;

/// Intersection of halfspaces `h_i . x <= b_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfspacePolytope {
    /// One row per halfspace.
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl HalfspacePolytope {
    /// Builds a polytope from a row matrix of normals and matching offsets.
    ///
    /// Rejects zero or non-finite normal rows.
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(Error::dim(
                normals.nrows(),
                offsets.len(),
                "polytope normals vs offsets",
            ));
        }
        for i in 0..normals.nrows() {
            let row = normals.row(i);
            if row.iter().any(|v| !v.is_finite()) || offsets[i].is_nan() {
                return Err(Error::invalid(format!("non-finite halfspace row {i}")));
            }
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::invalid(format!("zero normal in halfspace row {i}")));
            }
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box `|x_d - center_d| <= half_widths_d` as 2n halfspaces.
    pub fn axis_box(center: &DVector<f64>, half_widths: &DVector<f64>) -> Result<Self> {
        let d = center.len();
        if half_widths.len() != d {
            return Err(Error::dim(d, half_widths.len(), "axis_box"));
        }
        let mut normals = DMatrix::zeros(2 * d, d);
        let mut offsets = DVector::zeros(2 * d);
        for i in 0..d {
            normals[(2 * i, i)] = 1.0;
            offsets[2 * i] = center[i] + half_widths[i];
            normals[(2 * i + 1, i)] = -1.0;
            offsets[2 * i + 1] = -center[i] + half_widths[i];
        }
        Self::new(normals, offsets)
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_halfspaces(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::dim(self.dim(), x.len(), "polytope contains"));
        }
        Ok(self.margin(x) >= 0.0)
    }

    /// Smallest slack `b_i - h_i . x` over all rows; nonnegative inside.
    pub fn margin(&self, x: &DVector<f64>) -> f64 {
        let mut worst = f64::INFINITY;
        for i in 0..self.num_halfspaces() {
            let s = self.offsets[i] - self.normals.row(i).transpose().dot(x);
            worst = worst.min(s);
        }
        worst
    }

    /// Pontryagin difference with the Euclidean ball of radius `r`.
    ///
    /// Support-function identity: each offset shrinks by `||h_i|| r`.
    pub fn erode_ball(&self, r: f64) -> Result<Self> {
        if !(r >= 0.0) {
            return Err(Error::invalid(format!("erosion radius {r} must be >= 0")));
        }
        let mut offsets = self.offsets.clone();
        for i in 0..self.num_halfspaces() {
            offsets[i] -= self.normals.row(i).norm() * r;
        }
        Ok(Self {
            normals: self.normals.clone(),
            offsets,
        })
    }

    /// Pontryagin difference with an origin-centered box.
    ///
    /// Each offset shrinks by the box support `sum_d |h_{i,d}| w_d`.
    pub fn erode_rect(&self, rect: &HyperRect) -> Result<Self> {
        if rect.dim() != self.dim() {
            return Err(Error::dim(self.dim(), rect.dim(), "erode_rect"));
        }
        if rect.center().iter().any(|c| *c != 0.0) {
            return Err(Error::invalid("erode_rect requires an origin-centered box"));
        }
        let mut offsets = self.offsets.clone();
        for i in 0..self.num_halfspaces() {
            let mut support = 0.0;
            for d in 0..self.dim() {
                support += self.normals[(i, d)].abs() * rect.half_widths()[d];
            }
            offsets[i] -= support;
        }
        Ok(Self {
            normals: self.normals.clone(),
            offsets,
        })
    }

    /// Per-dimension interval bounds when every row constrains a single
    /// coordinate. Returns `None` when some row couples coordinates.
    pub fn as_axis_intervals(&self) -> Option<Vec<(f64, f64)>> {
        let d = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; d];
        let mut hi = vec![f64::INFINITY; d];
        for i in 0..self.num_halfspaces() {
            let row = self.normals.row(i);
            let mut nz = None;
            for (j, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    if nz.is_some() {
                        return None;
                    }
                    nz = Some((j, *v));
                }
            }
            let (j, c) = nz.expect("zero rows rejected at construction");
            let bound = self.offsets[i] / c;
            if c > 0.0 {
                hi[j] = hi[j].min(bound);
            } else {
                lo[j] = lo[j].max(bound);
            }
        }
        Some(lo.into_iter().zip(hi).collect())
    }

    /// Enumerates the vertices of the polytope.
    ///
    /// Axis-aligned boxes take the corner fast path; general polytopes solve
    /// every `dim`-subset of active rows, which is exact but only viable for
    /// small dimensions (callers cap at dim 8).
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        let d = self.dim();
        if let Some(intervals) = self.as_axis_intervals() {
            if intervals
                .iter()
                .any(|(lo, hi)| !lo.is_finite() || !hi.is_finite())
            {
                return Err(Error::UnboundedConstraintSet(
                    "axis-interval polytope misses a bound".into(),
                ));
            }
            if intervals.iter().any(|(lo, hi)| lo > hi) {
                return Ok(Vec::new());
            }
            let mut out = Vec::with_capacity(1 << d);
            for mask in 0..(1usize << d) {
                let mut v = DVector::zeros(d);
                for j in 0..d {
                    let (lo, hi) = intervals[j];
                    v[j] = if mask & (1 << j) != 0 { hi } else { lo };
                }
                out.push(v);
            }
            dedup_points(&mut out);
            return Ok(out);
        }
        if d > 8 {
            return Err(Error::invalid(
                "vertex enumeration capped at dimension 8; supply bounds explicitly",
            ));
        }
        let mut out = Vec::new();
        let m = self.num_halfspaces();
        if m < d {
            return Err(Error::UnboundedConstraintSet(format!(
                "{m} halfspaces cannot bound dimension {d}"
            )));
        }
        let mut combo = (0..d).collect::<Vec<_>>();
        loop {
            if let Some(v) = self.solve_active(&combo) {
                if self.feasible_with_tol(&v) {
                    out.push(v);
                }
            }
            if !next_combination(&mut combo, m) {
                break;
            }
        }
        dedup_points(&mut out);
        Ok(out)
    }

    fn solve_active(&self, rows: &[usize]) -> Option<DVector<f64>> {
        let d = self.dim();
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        for (k, &i) in rows.iter().enumerate() {
            a.row_mut(k).copy_from(&self.normals.row(i));
            b[k] = self.offsets[i];
        }
        let lu = a.full_piv_lu();
        lu.solve(&b).filter(|v| v.iter().all(|x| x.is_finite()))
    }

    fn feasible_with_tol(&self, x: &DVector<f64>) -> bool {
        for i in 0..self.num_halfspaces() {
            let h = self.normals.row(i);
            let scale = 1.0 + self.offsets[i].abs() + h.norm() * x.norm();
            if h.transpose().dot(x) > self.offsets[i] + VERTEX_FEAS_TOL * scale {
                return false;
            }
        }
        true
    }

    /// True when the recession cone `{d | H d <= 0}` is trivial.
    pub fn is_bounded(&self) -> Result<bool> {
        if let Some(intervals) = self.as_axis_intervals() {
            return Ok(intervals
                .iter()
                .all(|(lo, hi)| lo.is_finite() && hi.is_finite()));
        }
        // Vertices of {Hd <= 0, |d|_inf <= 1}: the cone is trivial iff every
        // vertex of the capped cone is the origin.
        let d = self.dim();
        let mut normals = DMatrix::zeros(self.num_halfspaces() + 2 * d, d);
        let mut offsets = DVector::zeros(self.num_halfspaces() + 2 * d);
        normals
            .view_mut((0, 0), (self.num_halfspaces(), d))
            .copy_from(&self.normals);
        for j in 0..d {
            normals[(self.num_halfspaces() + 2 * j, j)] = 1.0;
            offsets[self.num_halfspaces() + 2 * j] = 1.0;
            normals[(self.num_halfspaces() + 2 * j + 1, j)] = -1.0;
            offsets[self.num_halfspaces() + 2 * j + 1] = 1.0;
        }
        let capped = Self::new(normals, offsets)?;
        let verts = capped.vertices()?;
        Ok(verts.iter().all(|v| v.norm() <= 1e-7))
    }

    /// Maximum Euclidean norm over the polytope, attained at a vertex.
    pub fn max_norm(&self) -> Result<f64> {
        let verts = self.vertices()?;
        if verts.is_empty() {
            return Err(Error::invalid("empty polytope has no norm maximum"));
        }
        if !self.is_bounded()? {
            return Err(Error::UnboundedConstraintSet(
                "norm maximization over an unbounded polytope".into(),
            ));
        }
        Ok(verts.iter().map(|v| v.norm()).fold(0.0, f64::max))
    }
}

fn next_combination(combo: &mut [usize], m: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] != i + m - k {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn dedup_points(points: &mut Vec<DVector<f64>>) {
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(points.len());
    for p in points.drain(..) {
        let dup = kept
            .iter()
            .any(|q| (&p - q).norm() <= 1e-9 * (1.0 + p.norm()));
        if !dup {
            kept.push(p);
        }
    }
    *points = kept;
}

/// Origin-centered Euclidean ball `||x|| <= radius` of a given dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball {
    pub radius: f64,
    pub dim: usize,
}

impl Ball {
    pub fn new(radius: f64, dim: usize) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::invalid(format!("ball radius {radius} must be >= 0")));
        }
        Ok(Self { radius, dim })
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.norm() <= self.radius
    }
}

/// Axis-aligned box given by center and nonnegative half-widths.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperRect {
    center: DVector<f64>,
    half_widths: DVector<f64>,
}

impl HyperRect {
    pub fn new(center: DVector<f64>, half_widths: DVector<f64>) -> Result<Self> {
        if center.len() != half_widths.len() {
            return Err(Error::dim(center.len(), half_widths.len(), "hyperrect"));
        }
        if half_widths.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("hyperrect half-widths must be >= 0"));
        }
        Ok(Self {
            center,
            half_widths,
        })
    }

    /// Cube `||x||_inf <= edge/2` at the origin.
    pub fn origin_cube(edge: f64, dim: usize) -> Result<Self> {
        Self::new(
            DVector::zeros(dim),
            DVector::from_element(dim, 0.5 * edge),
        )
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn half_widths(&self) -> &DVector<f64> {
        &self.half_widths
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (0..self.dim()).all(|d| (x[d] - self.center[d]).abs() <= self.half_widths[d])
    }

    /// Largest Euclidean norm over the box (farthest corner from the origin).
    pub fn max_norm(&self) -> f64 {
        let mut s = 0.0;
        for d in 0..self.dim() {
            let far = self.center[d].abs() + self.half_widths[d];
            s += far * far;
        }
        s.sqrt()
    }

    /// Euclidean distance from the box to a point (0 when inside).
    pub fn distance_to_point(&self, x: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for d in 0..self.dim() {
            let gap = ((x[d] - self.center[d]).abs() - self.half_widths[d]).max(0.0);
            s += gap * gap;
        }
        s.sqrt()
    }
}

/// Tagged union of the geometric primitives used for safe and target sets.
///
/// Unions and complements compose; membership is exact for every primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionSet {
    Polytope(HalfspacePolytope),
    Ball { center: DVector<f64>, radius: f64 },
    Rect(HyperRect),
    Union(Vec<RegionSet>),
    Complement(Box<RegionSet>),
}

impl RegionSet {
    /// Ambient dimension; 0 means dimension-agnostic (an empty union, or
    /// its complement, is a valid set in any dimension).
    pub fn dim(&self) -> usize {
        match self {
            RegionSet::Polytope(p) => p.dim(),
            RegionSet::Ball { center, .. } => center.len(),
            RegionSet::Rect(r) => r.dim(),
            RegionSet::Union(members) => {
                members.iter().map(|m| m.dim()).find(|d| *d != 0).unwrap_or(0)
            }
            RegionSet::Complement(inner) => inner.dim(),
        }
    }

    /// Bounding box minus a list of obstacles, as a region expression.
    ///
    /// De Morgan form so that containment recursion reduces the whole set to
    /// per-primitive checks: `bounds \ O = !( !bounds  U  O_1 U ... U O_k )`.
    pub fn box_minus_obstacles(bounds: HyperRect, obstacles: Vec<RegionSet>) -> RegionSet {
        let mut members = Vec::with_capacity(obstacles.len() + 1);
        members.push(RegionSet::Complement(Box::new(RegionSet::Rect(bounds))));
        members.extend(obstacles);
        RegionSet::Complement(Box::new(RegionSet::Union(members)))
    }

    /// Exact membership. Primitives are closed; complements are strict.
    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        if self.dim() != 0 && x.len() != self.dim() {
            return Err(Error::dim(self.dim(), x.len(), "region contains"));
        }
        Ok(self.contains_unchecked(x))
    }

    fn contains_unchecked(&self, x: &DVector<f64>) -> bool {
        match self {
            RegionSet::Polytope(p) => p.margin(x) >= 0.0,
            RegionSet::Ball { center, radius } => (x - center).norm() <= *radius,
            RegionSet::Rect(r) => r.contains(x),
            RegionSet::Union(members) => members.iter().any(|m| m.contains_unchecked(x)),
            RegionSet::Complement(inner) => !inner.contains_unchecked(x),
        }
    }

    /// True when every point of `cell` lies in `self` eroded by the
    /// Euclidean ball of radius `margin`.
    ///
    /// Exact for primitives via support functions. For unions the check is
    /// member-wise (sufficient and sound for the lower-bound direction).
    /// Complements reduce to exact rounded-box disjointness for ball and
    /// rect obstacles; polytope obstacles are exact in 2D via vertex
    /// enumeration and facet-separating (conservative) above 2D.
    pub fn fully_inside(&self, cell: &HyperRect, margin: f64) -> Result<bool> {
        if self.dim() != 0 && cell.dim() != self.dim() {
            return Err(Error::dim(self.dim(), cell.dim(), "fully_inside"));
        }
        if !(margin >= 0.0) {
            return Err(Error::invalid("fully_inside margin must be >= 0"));
        }
        Ok(self.fully_inside_unchecked(cell, margin))
    }

    fn fully_inside_unchecked(&self, cell: &HyperRect, margin: f64) -> bool {
        match self {
            RegionSet::Polytope(p) => {
                for i in 0..p.num_halfspaces() {
                    let h = p.normals().row(i);
                    let mut lhs = h.transpose().dot(cell.center());
                    for d in 0..p.dim() {
                        lhs += h[d].abs() * cell.half_widths()[d];
                    }
                    if lhs + h.norm() * margin > p.offsets()[i] {
                        return false;
                    }
                }
                true
            }
            RegionSet::Ball { center, radius } => {
                let mut s = 0.0;
                for d in 0..center.len() {
                    let far = (cell.center()[d] - center[d]).abs() + cell.half_widths()[d];
                    s += far * far;
                }
                s.sqrt() + margin <= *radius
            }
            RegionSet::Rect(r) => (0..r.dim()).all(|d| {
                (cell.center()[d] - r.center()[d]).abs() + cell.half_widths()[d] + margin
                    <= r.half_widths()[d]
            }),
            RegionSet::Union(members) => members
                .iter()
                .any(|m| m.fully_inside_unchecked(cell, margin)),
            RegionSet::Complement(inner) => inner.fully_outside_unchecked(cell, margin),
        }
    }

    /// True when `cell` inflated by `B_margin` is disjoint from `self`.
    fn fully_outside_unchecked(&self, cell: &HyperRect, margin: f64) -> bool {
        match self {
            RegionSet::Ball { center, radius } => {
                cell.distance_to_point(center) > radius + margin
            }
            RegionSet::Rect(r) => {
                let mut s = 0.0;
                for d in 0..r.dim() {
                    let gap = ((cell.center()[d] - r.center()[d]).abs()
                        - cell.half_widths()[d]
                        - r.half_widths()[d])
                        .max(0.0);
                    s += gap * gap;
                }
                s.sqrt() > margin
            }
            RegionSet::Polytope(p) => polytope_box_disjoint(p, cell, margin),
            RegionSet::Union(members) => members
                .iter()
                .all(|m| m.fully_outside_unchecked(cell, margin)),
            RegionSet::Complement(inner) => inner.fully_inside_unchecked(cell, margin),
        }
    }
}

/// Disjointness of a polytope and a box inflated by `B_margin`.
///
/// 2D: exact via polygon vertices (SAT intersection test, then closest
/// feature distance). Higher dimensions: a facet of the polytope must
/// separate, which never reports a false disjointness.
fn polytope_box_disjoint(p: &HalfspacePolytope, cell: &HyperRect, margin: f64) -> bool {
    // Facet separation: some halfspace of p excludes the inflated box.
    let facet_separates = (0..p.num_halfspaces()).any(|i| {
        let h = p.normals().row(i);
        let mut min_over_cell = h.transpose().dot(cell.center());
        for d in 0..p.dim() {
            min_over_cell -= h[d].abs() * cell.half_widths()[d];
        }
        min_over_cell - h.norm() * margin > p.offsets()[i]
    });
    if facet_separates {
        return true;
    }
    if p.dim() != 2 {
        return false;
    }
    let Ok(mut verts) = p.vertices() else {
        return false;
    };
    if verts.is_empty() {
        // Empty obstacle: trivially disjoint.
        return true;
    }
    sort_ccw(&mut verts);
    dist_box_polygon_2d(cell, &verts) > margin
}

fn sort_ccw(verts: &mut [DVector<f64>]) {
    let n = verts.len() as f64;
    let cx = verts.iter().map(|v| v[0]).sum::<f64>() / n;
    let cy = verts.iter().map(|v| v[1]).sum::<f64>() / n;
    verts.sort_by(|a, b| {
        let aa = (a[1] - cy).atan2(a[0] - cx);
        let ab = (b[1] - cy).atan2(b[0] - cx);
        aa.partial_cmp(&ab).expect("finite angles")
    });
}

/// Exact distance between an axis-aligned box and a convex polygon (0 when
/// they intersect). Closest features of disjoint convex polygons are always
/// a vertex and an edge, so scanning those pairs is exhaustive.
fn dist_box_polygon_2d(cell: &HyperRect, poly: &[DVector<f64>]) -> f64 {
    if poly.len() == 1 {
        return cell.distance_to_point(&poly[0]);
    }
    if polygons_intersect_2d(cell, poly) {
        return 0.0;
    }
    let (bx, by) = (cell.center()[0], cell.center()[1]);
    let (wx, wy) = (cell.half_widths()[0], cell.half_widths()[1]);
    let corners = [
        [bx - wx, by - wy],
        [bx + wx, by - wy],
        [bx + wx, by + wy],
        [bx - wx, by + wy],
    ];
    let mut best = f64::INFINITY;
    for k in 0..poly.len() {
        let a = [poly[k][0], poly[k][1]];
        let b = {
            let q = &poly[(k + 1) % poly.len()];
            [q[0], q[1]]
        };
        // Polygon vertices vs box.
        best = best.min(cell.distance_to_point(&poly[k]));
        if poly.len() >= 2 {
            // Box corners vs polygon edges.
            for c in &corners {
                best = best.min(point_segment_distance(*c, a, b));
            }
            // Polygon vertices vs box edges.
            for e in 0..4 {
                let p0 = corners[e];
                let p1 = corners[(e + 1) % 4];
                best = best.min(point_segment_distance(a, p0, p1));
            }
        }
    }
    best
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let dx = p[0] - (a[0] + t * ab[0]);
    let dy = p[1] - (a[1] + t * ab[1]);
    (dx * dx + dy * dy).sqrt()
}

/// Separating-axis intersection test: box axes plus polygon edge normals.
fn polygons_intersect_2d(cell: &HyperRect, poly: &[DVector<f64>]) -> bool {
    let mut axes: Vec<[f64; 2]> = vec![[1.0, 0.0], [0.0, 1.0]];
    for k in 0..poly.len() {
        let a = &poly[k];
        let b = &poly[(k + 1) % poly.len()];
        let edge = [b[0] - a[0], b[1] - a[1]];
        let n = [-edge[1], edge[0]];
        if n[0] != 0.0 || n[1] != 0.0 {
            axes.push(n);
        }
    }
    for axis in axes {
        let cell_mid = cell.center()[0] * axis[0] + cell.center()[1] * axis[1];
        let cell_ext =
            cell.half_widths()[0] * axis[0].abs() + cell.half_widths()[1] * axis[1].abs();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in poly {
            let s = v[0] * axis[0] + v[1] * axis[1];
            lo = lo.min(s);
            hi = hi.max(s);
        }
        if cell_mid + cell_ext < lo || cell_mid - cell_ext > hi {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn halfline(h: Vec<f64>, b: f64) -> HalfspacePolytope {
        let d = h.len();
        HalfspacePolytope::new(DMatrix::from_row_slice(1, d, &h), dvector![b]).unwrap()
    }

    #[test]
    fn erode_ball_zero_is_identity() {
        let p = halfline(vec![1.0], 1.0);
        let e = p.erode_ball(0.0).unwrap();
        assert_eq!(e.offsets()[0], 1.0);
    }

    #[test]
    fn erode_ball_unit_normal() {
        let p = halfline(vec![1.0], 1.0);
        let e = p.erode_ball(0.5).unwrap();
        assert_eq!(e.offsets()[0], 0.5);
    }

    #[test]
    fn erode_ball_scales_with_normal_norm() {
        let p = halfline(vec![1.0, 1.0], 2f64.sqrt());
        let e = p.erode_ball(1.0).unwrap();
        assert!((e.offsets()[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn erode_ball_rejects_negative_radius() {
        let p = halfline(vec![1.0], 1.0);
        assert!(p.erode_ball(-0.1).is_err());
    }

    #[test]
    fn erode_rect_support_function() {
        let p = halfline(vec![1.0], 1.0);
        let box1 = HyperRect::origin_cube(0.05, 1).unwrap();
        let e = p.erode_rect(&box1).unwrap();
        assert!((e.offsets()[0] - 0.975).abs() < 1e-15);

        let p2 = halfline(vec![1.0, 1.0], 2.0);
        let box2 = HyperRect::new(dvector![0.0, 0.0], dvector![1.0, 1.0]).unwrap();
        let e2 = p2.erode_rect(&box2).unwrap();
        assert!((e2.offsets()[0] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn erode_rect_zero_box_is_identity() {
        let p = halfline(vec![0.3, -2.0], 1.7);
        let z = HyperRect::origin_cube(0.0, 2).unwrap();
        let e = p.erode_rect(&z).unwrap();
        assert_eq!(e.offsets()[0], 1.7);
    }

    #[test]
    fn erode_rect_rejects_off_center_box() {
        let p = halfline(vec![1.0], 1.0);
        let off = HyperRect::new(dvector![0.5], dvector![0.1]).unwrap();
        assert!(p.erode_rect(&off).is_err());
    }

    #[test]
    fn zero_normal_rejected() {
        let r = HalfspacePolytope::new(dmatrix![1.0, 0.0; 0.0, 0.0], dvector![1.0, 1.0]);
        assert!(r.is_err());
    }

    #[test]
    fn region_membership_closed_sets() {
        let ball = RegionSet::Ball {
            center: dvector![0.0, 0.0],
            radius: 1.0,
        };
        assert!(ball.contains(&dvector![0.0, 0.0]).unwrap());
        assert!(ball.contains(&dvector![1.0, 0.0]).unwrap());
        let comp = RegionSet::Complement(Box::new(ball));
        assert!(!comp.contains(&dvector![0.0, 0.0]).unwrap());
        assert!(!comp.contains(&dvector![1.0, 0.0]).unwrap());
        assert!(comp.contains(&dvector![1.0 + 1e-12, 0.0]).unwrap());
    }

    #[test]
    fn region_membership_dim_mismatch() {
        let ball = RegionSet::Ball {
            center: dvector![0.0, 0.0],
            radius: 1.0,
        };
        assert!(ball.contains(&dvector![0.0]).is_err());
    }

    #[test]
    fn cell_inside_big_box() {
        let s = RegionSet::Rect(HyperRect::new(dvector![0.0, 0.0], dvector![5.0, 5.0]).unwrap());
        let cell = HyperRect::new(dvector![0.05, 0.05], dvector![0.05, 0.05]).unwrap();
        assert!(s.fully_inside(&cell, 0.05).unwrap());
    }

    #[test]
    fn cell_touching_boundary_margin_semantics() {
        let s = RegionSet::Rect(HyperRect::new(dvector![0.0, 0.0], dvector![1.0, 1.0]).unwrap());
        // Cell exactly flush with the boundary of s.
        let cell = HyperRect::new(dvector![0.9, 0.0], dvector![0.1, 0.1]).unwrap();
        assert!(s.fully_inside(&cell, 0.0).unwrap());
        assert!(!s.fully_inside(&cell, 1e-9).unwrap());
    }

    #[test]
    fn cell_overlapping_ball_obstacle() {
        let obstacle = RegionSet::Ball {
            center: dvector![0.45, 0.45],
            radius: 0.2,
        };
        let safe = RegionSet::Complement(Box::new(obstacle));
        let cell = HyperRect::new(dvector![0.45, 0.45], dvector![0.05, 0.05]).unwrap();
        assert!(!safe.fully_inside(&cell, 0.0).unwrap());
        let far_cell = HyperRect::new(dvector![1.0, 1.0], dvector![0.05, 0.05]).unwrap();
        assert!(safe.fully_inside(&far_cell, 0.0).unwrap());
    }

    #[test]
    fn box_minus_obstacles_composition() {
        let bounds = HyperRect::new(dvector![0.5, 0.5], dvector![0.5, 0.5]).unwrap();
        let obstacle = RegionSet::Ball {
            center: dvector![0.45, 0.45],
            radius: 0.2,
        };
        let s = RegionSet::box_minus_obstacles(bounds, vec![obstacle]);
        assert!(s.contains(&dvector![0.1, 0.9]).unwrap());
        assert!(!s.contains(&dvector![0.45, 0.45]).unwrap());
        assert!(!s.contains(&dvector![1.5, 0.5]).unwrap());

        let cell = HyperRect::new(dvector![0.075, 0.925], dvector![0.025, 0.025]).unwrap();
        assert!(s.fully_inside(&cell, 0.04).unwrap());
        // Same cell with a margin large enough to poke out of bounds.
        assert!(!s.fully_inside(&cell, 0.06).unwrap());
    }

    #[test]
    fn polytope_obstacle_2d_exact_distance() {
        // Triangle obstacle with vertices (0,0), (1,0), (0,1).
        let tri = HalfspacePolytope::new(
            dmatrix![-1.0, 0.0; 0.0, -1.0; 1.0, 1.0],
            dvector![0.0, 0.0, 1.0],
        )
        .unwrap();
        let safe = RegionSet::Complement(Box::new(RegionSet::Polytope(tri)));
        // Cell near the hypotenuse, outside the triangle. Distance from the
        // cell corner (0.6, 0.6) to the line x+y=1 is 0.2/sqrt(2) ~ 0.1414.
        let cell = HyperRect::new(dvector![0.7, 0.7], dvector![0.1, 0.1]).unwrap();
        assert!(safe.fully_inside(&cell, 0.14).unwrap());
        assert!(!safe.fully_inside(&cell, 0.145).unwrap());
        // Overlapping cell is rejected.
        let inside = HyperRect::new(dvector![0.2, 0.2], dvector![0.1, 0.1]).unwrap();
        assert!(!safe.fully_inside(&inside, 0.0).unwrap());
    }

    #[test]
    fn axis_box_vertices_and_norms() {
        let b =
            HalfspacePolytope::axis_box(&dvector![0.0, 0.0], &dvector![1.0, 1.0]).unwrap();
        let verts = b.vertices().unwrap();
        assert_eq!(verts.len(), 4);
        assert!((b.max_norm().unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(b.is_bounded().unwrap());
    }

    #[test]
    fn general_polytope_vertices() {
        // Triangle x >= 0, y >= 0, x + y <= 2.
        let p = HalfspacePolytope::new(
            dmatrix![-1.0, 0.0; 0.0, -1.0; 1.0, 1.0],
            dvector![0.0, 0.0, 2.0],
        )
        .unwrap();
        let verts = p.vertices().unwrap();
        assert_eq!(verts.len(), 3);
        assert!((p.max_norm().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unbounded_polytope_detected() {
        let p = halfline(vec![1.0, 0.0], 1.0);
        assert!(!p.is_bounded().unwrap());
        let h = HalfspacePolytope::new(
            dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0],
            dvector![1.0, 1.0, 1.0],
        )
        .unwrap();
        assert!(!h.is_bounded().unwrap());
    }
}
