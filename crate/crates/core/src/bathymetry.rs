//! Continuous piecewise-bilinear bottom topography over a quadtree grid.
//!
//! Corner values are sampled from the topography function, except at hanging
//! vertices (midpoints of split faces), which take the mean of the host
//! edge's endpoints so the interpolant stays continuous across refinement
//! jumps. Face-segment midpoint values are the mean of the segment's two
//! endpoints, and each cell-center value is the average of its four face
//! values (a split face contributing the mean of its two segments). That
//! choice makes the cell average of depth an exact convex combination of the
//! face-point depths, which is what the positivity and steady-state
//! arguments of the scheme rely on.

use rustc_hash::FxHashMap;

use crate::error::{Result, SolverError};
use crate::grid::{Axis, Cell, QuadtreeGrid, SegSide, Side};

/// Bottom elevations stored at the grid's quadrature points.
#[derive(Clone, Debug)]
pub struct BathymetryField {
    /// Per leaf: corner values in (SW, SE, NW, NE) order.
    corners: Vec<[f64; 4]>,
    /// Per leaf: the face-consistent center value.
    centers: Vec<f64>,
    /// Per face segment (parallel to `grid.segments()`): midpoint value.
    segment_mid: Vec<f64>,
}

/// Integer vertex coordinates on the finest grid; exact keys make shared
/// vertices bit-identical by construction.
type VKey = (u64, u64);

fn leaf_corner_keys(cell: &Cell, max_level: u8) -> [VKey; 4] {
    let s = max_level - cell.id.level;
    let ax = (cell.id.i as u64) << s;
    let ay = (cell.id.j as u64) << s;
    let sp = 1u64 << s;
    [(ax, ay), (ax + sp, ay), (ax, ay + sp), (ax + sp, ay + sp)]
}

/// Endpoint keys of a face segment, taken from the finer adjacent leaf
/// (whose full face the segment spans).
fn segment_endpoint_keys(grid: &QuadtreeGrid, seg_idx: usize) -> (VKey, VKey) {
    let seg = &grid.segments().expect("regularized")[seg_idx];
    let pick = |side: SegSide| side.leaf().map(|k| &grid.leaves()[k]);
    let (minus, plus) = (pick(seg.minus), pick(seg.plus));
    let (leaf, leaf_is_minus) = match (minus, plus) {
        (Some(a), Some(b)) => {
            if b.id.level > a.id.level {
                (b, false)
            } else {
                (a, true)
            }
        }
        (Some(a), None) => (a, true),
        (None, Some(b)) => (b, false),
        (None, None) => unreachable!("segment with no adjacent leaf"),
    };
    let m = grid.max_level();
    let s = m - leaf.id.level;
    let ax = (leaf.id.i as u64) << s;
    let ay = (leaf.id.j as u64) << s;
    let sp = 1u64 << s;
    match seg.axis {
        Axis::X => {
            let fx = if leaf_is_minus { ax + sp } else { ax };
            ((fx, ay), (fx, ay + sp))
        }
        Axis::Y => {
            let fy = if leaf_is_minus { ay + sp } else { ay };
            ((ax, fy), (ax + sp, fy))
        }
    }
}

impl BathymetryField {
    /// Sample `b` over the grid and assemble the single-valued point values.
    pub fn build(grid: &QuadtreeGrid, b: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let segs = grid.segments()?;
        let m = grid.max_level();
        let d = grid.domain();
        let (bdx, bdy) = grid.base_cell_size();
        let fdx = bdx / (1u64 << (m - 1)) as f64;
        let fdy = bdy / (1u64 << (m - 1)) as f64;

        // Hanging vertices: midpoints of split faces, valued as the mean of
        // the host face's endpoints. On a regularized grid the endpoints
        // themselves are never hanging.
        let mut hanging: FxHashMap<VKey, (VKey, VKey)> = FxHashMap::default();
        for (k, cell) in grid.leaves().iter().enumerate() {
            for side in Side::ALL {
                let on_side: Vec<u32> = grid
                    .cell_segments(k)
                    .iter()
                    .filter(|r| {
                        let seg = &segs[r.seg as usize];
                        match side {
                            Side::West => seg.axis == Axis::X && r.outward < 0,
                            Side::East => seg.axis == Axis::X && r.outward > 0,
                            Side::South => seg.axis == Axis::Y && r.outward < 0,
                            Side::North => seg.axis == Axis::Y && r.outward > 0,
                        }
                    })
                    .map(|r| r.seg)
                    .collect();
                if on_side.len() != 2 {
                    continue;
                }
                let [sw, se, nw, ne] = leaf_corner_keys(cell, m);
                let (p1, p2) = match side {
                    Side::West => (sw, nw),
                    Side::East => (se, ne),
                    Side::South => (sw, se),
                    Side::North => (nw, ne),
                };
                let mid = ((p1.0 + p2.0) / 2, (p1.1 + p2.1) / 2);
                hanging.insert(mid, (p1, p2));
            }
        }

        let mut values: FxHashMap<VKey, f64> = FxHashMap::default();
        let sample = |key: VKey| -> Result<f64> {
            let x = d.x0 + key.0 as f64 * fdx;
            let y = d.y0 + key.1 as f64 * fdy;
            let v = b(x, y);
            if !v.is_finite() {
                return Err(SolverError::NonFiniteBathymetry { x, y });
            }
            Ok(v)
        };
        for cell in grid.leaves() {
            for key in leaf_corner_keys(cell, m) {
                if !hanging.contains_key(&key) && !values.contains_key(&key) {
                    values.insert(key, sample(key)?);
                }
            }
        }
        for (&mid, &(p1, p2)) in &hanging {
            debug_assert!(!hanging.contains_key(&p1) && !hanging.contains_key(&p2));
            let v1 = values[&p1];
            let v2 = values[&p2];
            values.insert(mid, 0.5 * (v1 + v2));
        }

        let segment_mid: Vec<f64> = (0..segs.len())
            .map(|si| {
                let (a, b) = segment_endpoint_keys(grid, si);
                0.5 * (values[&a] + values[&b])
            })
            .collect();

        let mut corners = Vec::with_capacity(grid.leaf_count());
        let mut centers = Vec::with_capacity(grid.leaf_count());
        for (k, cell) in grid.leaves().iter().enumerate() {
            let keys = leaf_corner_keys(cell, m);
            corners.push([values[&keys[0]], values[&keys[1]], values[&keys[2]], values[&keys[3]]]);

            let mut face_sum = 0.0;
            for side in Side::ALL {
                let mut acc = 0.0;
                let mut n = 0usize;
                for r in grid.cell_segments(k) {
                    let seg = &segs[r.seg as usize];
                    let on_side = match side {
                        Side::West => seg.axis == Axis::X && r.outward < 0,
                        Side::East => seg.axis == Axis::X && r.outward > 0,
                        Side::South => seg.axis == Axis::Y && r.outward < 0,
                        Side::North => seg.axis == Axis::Y && r.outward > 0,
                    };
                    if on_side {
                        acc += segment_mid[r.seg as usize];
                        n += 1;
                    }
                }
                debug_assert!(n == 1 || n == 2);
                face_sum += acc / n as f64;
            }
            centers.push(0.25 * face_sum);
        }

        Ok(BathymetryField { corners, centers, segment_mid })
    }

    /// Corner values of a leaf in (SW, SE, NW, NE) order.
    pub fn corners(&self, leaf: usize) -> [f64; 4] {
        self.corners[leaf]
    }

    /// Face-consistent center value of a leaf.
    pub fn center(&self, leaf: usize) -> f64 {
        self.centers[leaf]
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Midpoint value of a face segment.
    pub fn at_segment(&self, seg_idx: usize) -> f64 {
        self.segment_mid[seg_idx]
    }

    pub fn segment_values(&self) -> &[f64] {
        &self.segment_mid
    }

    /// Bilinear blend of the leaf's corner values at an interior point.
    pub fn eval_bilinear(&self, grid: &QuadtreeGrid, leaf: usize, x: f64, y: f64) -> Result<f64> {
        let cell = &grid.leaves()[leaf];
        let (dx, dy) = cell.size;
        let u = (x - (cell.center.0 - 0.5 * dx)) / dx;
        let v = (y - (cell.center.1 - 0.5 * dy)) / dy;
        let tol = 1e-12;
        if !(-tol..=1.0 + tol).contains(&u) || !(-tol..=1.0 + tol).contains(&v) {
            return Err(SolverError::InvalidInput(format!(
                "point ({x}, {y}) lies outside cell {:?}",
                cell.id
            )));
        }
        let [sw, se, nw, ne] = self.corners[leaf];
        Ok((1.0 - u) * (1.0 - v) * sw + u * (1.0 - v) * se + (1.0 - u) * v * nw + u * v * ne)
    }
}
