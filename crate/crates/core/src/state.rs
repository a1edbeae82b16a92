//! Field vectors evolved and reconstructed by the scheme.
//!
//! The conserved set is (w, hu, hv, h*rho): free surface, unit discharges
//! and depth-weighted density. Reconstruction works on (w, hu, hv, rho)
//! instead, which is what makes a well-balanced limiter possible.

use std::ops::{Add, Mul, Sub};

/// Cell average of the conserved quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Conserved {
    /// Free-surface elevation w = B + h.
    pub w: f64,
    /// Unit discharge in x.
    pub hu: f64,
    /// Unit discharge in y.
    pub hv: f64,
    /// Depth-weighted density h*rho.
    pub hrho: f64,
}

impl Conserved {
    pub const ZERO: Conserved = Conserved { w: 0.0, hu: 0.0, hv: 0.0, hrho: 0.0 };

    pub fn new(w: f64, hu: f64, hv: f64, hrho: f64) -> Self {
        Conserved { w, hu, hv, hrho }
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.hu.is_finite() && self.hv.is_finite() && self.hrho.is_finite()
    }

    /// Largest absolute component, used for error scales in tests and checks.
    pub fn norm_inf(&self) -> f64 {
        self.w.abs().max(self.hu.abs()).max(self.hv.abs()).max(self.hrho.abs())
    }
}

impl Add for Conserved {
    type Output = Conserved;
    fn add(self, r: Conserved) -> Conserved {
        Conserved::new(self.w + r.w, self.hu + r.hu, self.hv + r.hv, self.hrho + r.hrho)
    }
}

impl Sub for Conserved {
    type Output = Conserved;
    fn sub(self, r: Conserved) -> Conserved {
        Conserved::new(self.w - r.w, self.hu - r.hu, self.hv - r.hv, self.hrho - r.hrho)
    }
}

impl Mul<Conserved> for f64 {
    type Output = Conserved;
    fn mul(self, r: Conserved) -> Conserved {
        Conserved::new(self * r.w, self * r.hu, self * r.hv, self * r.hrho)
    }
}

/// Cell average of the reconstructed set (w, hu, hv, rho).
///
/// rho is recovered from the conserved pair (w, h*rho) with the
/// desingularized division, so it stays finite and nonnegative in
/// nearly dry cells.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Primitive {
    pub w: f64,
    pub hu: f64,
    pub hv: f64,
    pub rho: f64,
}

impl Primitive {
    pub const ZERO: Primitive = Primitive { w: 0.0, hu: 0.0, hv: 0.0, rho: 0.0 };

    pub fn new(w: f64, hu: f64, hv: f64, rho: f64) -> Self {
        Primitive { w, hu, hv, rho }
    }
}

impl Add for Primitive {
    type Output = Primitive;
    fn add(self, r: Primitive) -> Primitive {
        Primitive::new(self.w + r.w, self.hu + r.hu, self.hv + r.hv, self.rho + r.rho)
    }
}

impl Sub for Primitive {
    type Output = Primitive;
    fn sub(self, r: Primitive) -> Primitive {
        Primitive::new(self.w - r.w, self.hu - r.hu, self.hv - r.hv, self.rho - r.rho)
    }
}

impl Mul<Primitive> for f64 {
    type Output = Primitive;
    fn mul(self, r: Primitive) -> Primitive {
        Primitive::new(self * r.w, self * r.hu, self * r.hv, self * r.rho)
    }
}

/// One-sided point state at a face-segment midpoint.
///
/// Holds both the reconstructed conservative values entering the numerical
/// flux and the desingularized velocities used to evaluate physical fluxes
/// without dividing by a possibly tiny depth. Invariants: `h >= 0`,
/// `rho >= 0`, `hu == h * u`, `hv == h * v`, `hrho == h * rho`.
#[derive(Clone, Copy, Debug, Default)]
pub struct FaceState {
    pub w: f64,
    pub hu: f64,
    pub hv: f64,
    pub hrho: f64,
    pub h: f64,
    pub u: f64,
    pub v: f64,
    pub rho: f64,
}

/// Pointwise primitive state (w, u, v, rho); used for initial and boundary data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrimState {
    pub w: f64,
    pub u: f64,
    pub v: f64,
    pub rho: f64,
}

impl PrimState {
    pub fn new(w: f64, u: f64, v: f64, rho: f64) -> Self {
        PrimState { w, u, v, rho }
    }

    /// Still water column of surface `w` and density `rho`.
    pub fn still(w: f64, rho: f64) -> Self {
        PrimState { w, u: 0.0, v: 0.0, rho }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conserved_arithmetic() {
        let a = Conserved::new(1.0, 2.0, 3.0, 4.0);
        let b = Conserved::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(a + b, Conserved::new(1.5, 2.5, 3.5, 4.5));
        assert_eq!(a - b, Conserved::new(0.5, 1.5, 2.5, 3.5));
        assert_eq!(2.0 * b, Conserved::new(1.0, 1.0, 1.0, 1.0));
        assert_eq!(a.norm_inf(), 4.0);
    }
}
