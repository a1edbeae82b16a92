//! Piecewise-linear reconstruction of (w, hu, hv, rho) with the minmod
//! limiter, the positivity correction of the free surface, and recovery of
//! velocities and density from nearly dry cells.
//!
//! Slopes take one candidate difference per neighboring leaf on each side,
//! divided by the center-to-center distance; on conforming grids this is the
//! usual two-candidate minmod, and at refinement jumps a split side simply
//! contributes two candidates. Two-sided point values are each cell's own
//! linear reconstruction evaluated at the face-segment midpoints.

use crate::bathymetry::BathymetryField;
use crate::boundary::{self, BoundarySpec};
use crate::grid::{Axis, QuadtreeGrid, SegSide};
use crate::state::{Conserved, FaceState, Primitive};

/// Minmod limiter: the smallest candidate if all are positive, the largest
/// if all are negative, zero on mixed signs.
pub fn minmod(zs: &[f64]) -> f64 {
    assert!(!zs.is_empty(), "minmod needs at least one candidate");
    if zs.iter().all(|&z| z > 0.0) {
        zs.iter().copied().fold(f64::INFINITY, f64::min)
    } else if zs.iter().all(|&z| z < 0.0) {
        zs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        0.0
    }
}

/// Recover `q/h` with a regularized division that stays finite and vanishes
/// as the depth goes to zero. For `h^4 >= eps` this is the plain quotient;
/// below that it blends to `sqrt(2) h q / sqrt(h^4 + eps)`.
pub fn desingularize(h: f64, q: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    let h4 = (h * h) * (h * h);
    if h4 >= eps {
        q / h
    } else {
        std::f64::consts::SQRT_2 * h * q / (h4 + eps).sqrt()
    }
}

/// Regularization scale for the current grid: `max(min dx, min dy)^4`
/// evaluated per axis.
pub fn desingularization_eps(grid: &QuadtreeGrid) -> f64 {
    let (dx, dy) = grid.min_cell_size();
    dx.powi(4).max(dy.powi(4))
}

/// Per-leaf cell averages of the reconstructed set. The density is recovered
/// from (w, h*rho) with the regularized division; depth is floored at zero
/// (the time integrator has already validated it against real negativity).
pub fn primitive_averages(
    grid: &QuadtreeGrid,
    bath: &BathymetryField,
    fields: &[Conserved],
    eps: f64,
) -> Vec<Primitive> {
    grid.leaves()
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let f = &fields[k];
            let h = (f.w - bath.center(k)).max(0.0);
            let rho = desingularize(h, f.hrho, eps).max(0.0);
            Primitive::new(f.w, f.hu, f.hv, rho)
        })
        .collect()
}

/// Minmod slopes of (w, hu, hv, rho) per leaf, plus slopes of h*rho used by
/// the conservative projection during regridding.
#[derive(Clone, Debug)]
pub struct SlopeField {
    pub x: Vec<Primitive>,
    pub y: Vec<Primitive>,
    pub hrho_x: Vec<f64>,
    pub hrho_y: Vec<f64>,
}

/// Candidate one-sided differences for the five reconstructed scalars.
struct Candidates {
    vals: [[f64; 4]; 5],
    n: usize,
}

impl Candidates {
    fn new() -> Self {
        Candidates { vals: [[0.0; 4]; 5], n: 0 }
    }

    fn push(&mut self, p: Primitive, hrho: f64) {
        let k = self.n;
        debug_assert!(k < 4);
        self.vals[0][k] = p.w;
        self.vals[1][k] = p.hu;
        self.vals[2][k] = p.hv;
        self.vals[3][k] = p.rho;
        self.vals[4][k] = hrho;
        self.n += 1;
    }

    fn limited(&self) -> (Primitive, f64) {
        let m = |row: &[f64; 4]| minmod(&row[..self.n]);
        (
            Primitive::new(
                m(&self.vals[0]),
                m(&self.vals[1]),
                m(&self.vals[2]),
                m(&self.vals[3]),
            ),
            m(&self.vals[4]),
        )
    }
}

pub fn compute_slopes(
    grid: &QuadtreeGrid,
    bath: &BathymetryField,
    prims: &[Primitive],
    hrho: &[f64],
    bcs: &BoundarySpec,
) -> SlopeField {
    let segs = grid.segments().expect("regularized grid");
    let n = grid.leaf_count();
    let mut field = SlopeField {
        x: vec![Primitive::ZERO; n],
        y: vec![Primitive::ZERO; n],
        hrho_x: vec![0.0; n],
        hrho_y: vec![0.0; n],
    };

    for (k, cell) in grid.leaves().iter().enumerate() {
        let (cx, cy) = cell.center;
        let (dx, dy) = cell.size;
        let own = prims[k];
        let own_hrho = hrho[k];
        let mut cx_cands = Candidates::new();
        let mut cy_cands = Candidates::new();

        for r in grid.cell_segments(k) {
            let seg = &segs[r.seg as usize];
            let other = if r.outward > 0 { seg.plus } else { seg.minus };
            match other {
                SegSide::Leaf(nk) => {
                    let nk = nk as usize;
                    let nc = grid.leaves()[nk].center;
                    match seg.axis {
                        Axis::X => {
                            let d = nc.0 - cx;
                            cx_cands.push((1.0 / d) * (prims[nk] - own), (hrho[nk] - own_hrho) / d);
                        }
                        Axis::Y => {
                            let d = nc.1 - cy;
                            cy_cands.push((1.0 / d) * (prims[nk] - own), (hrho[nk] - own_hrho) / d);
                        }
                    }
                }
                SegSide::Exterior(e) => {
                    let bc = bcs.resolve(e, seg.midpoint);
                    let (gp, ghrho) =
                        boundary::ghost_average(bc, seg.axis, own, own_hrho, bath.center(k));
                    match seg.axis {
                        Axis::X => {
                            let d = f64::from(r.outward) * dx;
                            cx_cands.push((1.0 / d) * (gp - own), (ghrho - own_hrho) / d);
                        }
                        Axis::Y => {
                            let d = f64::from(r.outward) * dy;
                            cy_cands.push((1.0 / d) * (gp - own), (ghrho - own_hrho) / d);
                        }
                    }
                }
            }
        }

        let (px, hx) = cx_cands.limited();
        let (py, hy) = cy_cands.limited();
        field.x[k] = px;
        field.y[k] = py;
        field.hrho_x[k] = hx;
        field.hrho_y[k] = hy;
    }

    field
}

/// Clamp one cell's free-surface slopes toward zero until the reconstructed
/// surface stays at or above the bottom at every face point `(dx, dy, b)`.
/// Returns the scale factor and whether the constraints were infeasible even
/// with flat reconstruction (surface average below some face bottom value).
pub fn clamp_w_slope(
    wbar: f64,
    wx: f64,
    wy: f64,
    face_points: &[(f64, f64, f64)],
) -> (f64, bool) {
    let mut theta: f64 = 1.0;
    let mut infeasible = false;
    for &(dx, dy, b) in face_points {
        let r = dx * wx + dy * wy;
        if wbar + r >= b {
            continue;
        }
        let margin = wbar - b;
        if margin < 0.0 {
            infeasible = true;
            theta = 0.0;
            break;
        }
        // Here r < -margin <= 0, so the ratio is in [0, 1).
        theta = theta.min(margin / -r);
    }
    (theta, infeasible)
}

/// Apply the positivity correction to the `w` slopes of every leaf. Returns
/// the number of cells whose constraints were infeasible (those fall back to
/// flat reconstruction; the face states floor the remaining deficit).
pub fn correct_w_slopes(
    grid: &QuadtreeGrid,
    bath: &BathymetryField,
    prims: &[Primitive],
    slopes: &mut SlopeField,
) -> u32 {
    let segs = grid.segments().expect("regularized grid");
    let mut infeasible_cells = 0;
    let mut pts: Vec<(f64, f64, f64)> = Vec::with_capacity(8);
    for (k, cell) in grid.leaves().iter().enumerate() {
        let (wx, wy) = (slopes.x[k].w, slopes.y[k].w);
        if wx == 0.0 && wy == 0.0 {
            continue;
        }
        pts.clear();
        for r in grid.cell_segments(k) {
            let seg = &segs[r.seg as usize];
            pts.push((
                seg.midpoint.0 - cell.center.0,
                seg.midpoint.1 - cell.center.1,
                bath.at_segment(r.seg as usize),
            ));
        }
        let (theta, infeasible) = clamp_w_slope(prims[k].w, wx, wy, &pts);
        if infeasible {
            infeasible_cells += 1;
        }
        if theta < 1.0 {
            slopes.x[k].w = theta * wx;
            slopes.y[k].w = theta * wy;
        }
    }
    infeasible_cells
}

/// Two-sided point states for every face segment plus reconstruction
/// diagnostics (pre-clamp minima of the face depth and density).
pub struct FaceStates {
    /// Indexed like `grid.segments()`: `[minus-side, plus-side]` states.
    pub states: Vec<[FaceState; 2]>,
    pub min_h: f64,
    pub min_rho: f64,
}

/// Evaluate a cell's linear reconstruction at an offset from its center and
/// complete it into a face point state.
fn face_state_at(
    prim: Primitive,
    sx: Primitive,
    sy: Primitive,
    dx: f64,
    dy: f64,
    b: f64,
    eps: f64,
    min_h: &mut f64,
    min_rho: &mut f64,
) -> FaceState {
    let mut w = prim.w + dx * sx.w + dy * sy.w;
    let hu_raw = prim.hu + dx * sx.hu + dy * sy.hu;
    let hv_raw = prim.hv + dx * sx.hv + dy * sy.hv;
    let rho_raw = prim.rho + dx * sx.rho + dy * sy.rho;

    let mut h = w - b;
    *min_h = min_h.min(h);
    *min_rho = min_rho.min(rho_raw);
    if h < 0.0 {
        // Rounding guard: the slope correction keeps h nonnegative up to
        // last-ulp effects (or fell back to flat reconstruction).
        h = 0.0;
        w = b;
    }
    let rho = rho_raw.max(0.0);
    let u = desingularize(h, hu_raw, eps);
    let v = desingularize(h, hv_raw, eps);
    FaceState { w, hu: h * u, hv: h * v, hrho: h * rho, h, u, v, rho }
}

pub fn reconstruct_face_states(
    grid: &QuadtreeGrid,
    bath: &BathymetryField,
    prims: &[Primitive],
    slopes: &SlopeField,
    bcs: &BoundarySpec,
    eps: f64,
) -> FaceStates {
    let segs = grid.segments().expect("regularized grid");
    let mut states = vec![[FaceState::default(); 2]; segs.len()];
    let mut min_h = f64::INFINITY;
    let mut min_rho = f64::INFINITY;

    for (si, seg) in segs.iter().enumerate() {
        let b = bath.at_segment(si);
        let eval = |k: usize, min_h: &mut f64, min_rho: &mut f64| {
            let cell = &grid.leaves()[k];
            face_state_at(
                prims[k],
                slopes.x[k],
                slopes.y[k],
                seg.midpoint.0 - cell.center.0,
                seg.midpoint.1 - cell.center.1,
                b,
                eps,
                min_h,
                min_rho,
            )
        };
        let pair = match (seg.minus, seg.plus) {
            (SegSide::Leaf(a), SegSide::Leaf(bk)) => {
                [eval(a as usize, &mut min_h, &mut min_rho), eval(bk as usize, &mut min_h, &mut min_rho)]
            }
            (SegSide::Leaf(a), SegSide::Exterior(e)) => {
                let interior = eval(a as usize, &mut min_h, &mut min_rho);
                let bc = bcs.resolve(e, seg.midpoint);
                [interior, boundary::ghost_face(bc, seg.axis, &interior, b)]
            }
            (SegSide::Exterior(e), SegSide::Leaf(bk)) => {
                let interior = eval(bk as usize, &mut min_h, &mut min_rho);
                let bc = bcs.resolve(e, seg.midpoint);
                [boundary::ghost_face(bc, seg.axis, &interior, b), interior]
            }
            (SegSide::Exterior(_), SegSide::Exterior(_)) => {
                unreachable!("segment with no adjacent leaf")
            }
        };
        states[si] = pair;
    }

    FaceStates { states, min_h, min_rho }
}
