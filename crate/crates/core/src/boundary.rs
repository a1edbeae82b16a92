//! Boundary conditions via mirror-level ghost cells.
//!
//! Every boundary face gets a ghost cell of the interior leaf's size,
//! reflected across the face, so slope stencils are always complete. Face
//! segments on the boundary get an exterior point state derived from the
//! interior one. Masked-out interior regions always behave as solid walls.

use crate::grid::{Axis, Exterior, Side};
use crate::state::{FaceState, PrimState, Primitive};

/// Boundary treatment for one side of the domain.
#[derive(Clone, Copy, Debug)]
pub enum BcKind {
    /// Mirror the interior state and negate the normal discharge.
    Wall,
    /// Copy the interior state (zero-order extrapolation outflow).
    ZeroOrder,
    /// Prescribed exterior state.
    Dirichlet(PrimState),
    /// Prescribed state on part of the side (by along-side coordinate),
    /// solid wall elsewhere.
    Inflow { state: PrimState, span: (f64, f64) },
}

/// Boundary treatment per domain side.
#[derive(Clone, Copy, Debug)]
pub struct BoundarySpec {
    pub west: BcKind,
    pub east: BcKind,
    pub south: BcKind,
    pub north: BcKind,
}

impl BoundarySpec {
    pub fn all_walls() -> Self {
        BoundarySpec { west: BcKind::Wall, east: BcKind::Wall, south: BcKind::Wall, north: BcKind::Wall }
    }

    fn side(&self, s: Side) -> BcKind {
        match s {
            Side::West => self.west,
            Side::East => self.east,
            Side::South => self.south,
            Side::North => self.north,
        }
    }

    /// Resolve the effective condition for a boundary face whose midpoint is
    /// `mid`. Inflow spans compare the along-side coordinate; holes are walls.
    pub fn resolve(&self, exterior: Exterior, mid: (f64, f64)) -> ResolvedBc {
        let side = match exterior {
            Exterior::Hole => return ResolvedBc::Wall,
            Exterior::Domain(s) => s,
        };
        match self.side(side) {
            BcKind::Wall => ResolvedBc::Wall,
            BcKind::ZeroOrder => ResolvedBc::ZeroOrder,
            BcKind::Dirichlet(s) => ResolvedBc::Dirichlet(s),
            BcKind::Inflow { state, span } => {
                let along = match side {
                    Side::West | Side::East => mid.1,
                    Side::South | Side::North => mid.0,
                };
                if along >= span.0 && along <= span.1 {
                    ResolvedBc::Dirichlet(state)
                } else {
                    ResolvedBc::Wall
                }
            }
        }
    }
}

/// Effective condition at one particular boundary face.
#[derive(Clone, Copy, Debug)]
pub enum ResolvedBc {
    Wall,
    ZeroOrder,
    Dirichlet(PrimState),
}

/// Ghost-cell averages used by the slope stencil: the reconstructed set
/// (w, hu, hv, rho) plus the depth-weighted density.
pub fn ghost_average(
    bc: ResolvedBc,
    axis: Axis,
    interior: Primitive,
    interior_hrho: f64,
    b_center: f64,
) -> (Primitive, f64) {
    match bc {
        ResolvedBc::Wall => {
            let g = match axis {
                Axis::X => Primitive::new(interior.w, -interior.hu, interior.hv, interior.rho),
                Axis::Y => Primitive::new(interior.w, interior.hu, -interior.hv, interior.rho),
            };
            (g, interior_hrho)
        }
        ResolvedBc::ZeroOrder => (interior, interior_hrho),
        ResolvedBc::Dirichlet(d) => {
            // The ghost cell inherits the mirrored bottom elevation.
            let h = (d.w - b_center).max(0.0);
            (Primitive::new(d.w, h * d.u, h * d.v, d.rho), h * d.rho)
        }
    }
}

/// Exterior point state at a boundary face segment.
pub fn ghost_face(bc: ResolvedBc, axis: Axis, interior: &FaceState, b_seg: f64) -> FaceState {
    match bc {
        ResolvedBc::Wall => match axis {
            Axis::X => FaceState { u: -interior.u, hu: -interior.hu, ..*interior },
            Axis::Y => FaceState { v: -interior.v, hv: -interior.hv, ..*interior },
        },
        ResolvedBc::ZeroOrder => *interior,
        ResolvedBc::Dirichlet(d) => {
            let mut h = d.w - b_seg;
            let mut w = d.w;
            if h < 0.0 {
                h = 0.0;
                w = b_seg;
            }
            let rho = d.rho.max(0.0);
            FaceState { w, hu: h * d.u, hv: h * d.v, hrho: h * rho, h, u: d.u, v: d.v, rho }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wall_mirrors_and_negates_normal_discharge() {
        let interior = Primitive::new(1.0, 0.5, 0.0, 997.0);
        let (g, hrho) = ghost_average(ResolvedBc::Wall, Axis::X, interior, 997.0, 0.0);
        assert_eq!(g, Primitive::new(1.0, -0.5, 0.0, 997.0));
        assert_eq!(hrho, 997.0);
        let (g, _) = ghost_average(ResolvedBc::Wall, Axis::Y, interior, 997.0, 0.0);
        assert_eq!(g, Primitive::new(1.0, 0.5, -0.0, 997.0));
    }

    #[test]
    fn still_water_wall_face_has_zero_normal_flow() {
        let f = FaceState { w: 1.0, hu: 0.0, hv: 0.0, hrho: 997.0, h: 1.0, u: 0.0, v: 0.0, rho: 997.0 };
        let g = ghost_face(ResolvedBc::Wall, Axis::X, &f, 0.0);
        assert_eq!(g.hu, -0.0);
        assert_eq!(g.w, 1.0);
        assert_eq!(g.rho, 997.0);
    }

    #[test]
    fn inflow_span_resolution() {
        let inflow = PrimState::new(1.0, 2.0, 0.0, 1007.0);
        let spec = BoundarySpec {
            west: BcKind::Inflow { state: inflow, span: (0.4, 0.6) },
            east: BcKind::ZeroOrder,
            south: BcKind::Wall,
            north: BcKind::Wall,
        };
        match spec.resolve(Exterior::Domain(Side::West), (0.0, 0.5)) {
            ResolvedBc::Dirichlet(d) => {
                assert_eq!(d.u, 2.0);
                assert_eq!(d.rho, 1007.0);
                assert_eq!(d.w, 1.0);
            }
            other => panic!("expected inflow state, got {other:?}"),
        }
        assert!(matches!(spec.resolve(Exterior::Domain(Side::West), (0.0, 0.8)), ResolvedBc::Wall));
        assert!(matches!(spec.resolve(Exterior::Hole, (0.0, 0.5)), ResolvedBc::Wall));
    }

    #[test]
    fn dirichlet_face_state_products_are_consistent() {
        let d = PrimState::new(1.0, 2.0, 0.0, 1007.0);
        let f = FaceState::default();
        let g = ghost_face(ResolvedBc::Dirichlet(d), Axis::X, &f, 0.25);
        assert_eq!(g.h, 0.75);
        assert_eq!(g.hu, 1.5);
        assert_eq!(g.hrho, 0.75 * 1007.0);
    }
}
