//! Exact quaternion arithmetic in 64-bit floating point.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{QuanError, Result};

/// Tolerance on `‖q‖ − 1` for arguments that must be unit quaternions.
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Tolerance on the real part of arguments that must be pure quaternions.
pub const PURE_TOLERANCE: f64 = 1e-9;

/// A quaternion `r + i·𝐢 + j·𝐣 + k·𝐤`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quaternion {
    pub r: f64,
    pub i: f64,
    pub j: f64,
    pub k: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    pub const I: Quaternion = Quaternion::new(0.0, 1.0, 0.0, 0.0);
    pub const J: Quaternion = Quaternion::new(0.0, 0.0, 1.0, 0.0);
    pub const K: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 1.0);

    pub const fn new(r: f64, i: f64, j: f64, k: f64) -> Self {
        Quaternion { r, i, j, k }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.r, self.i, self.j, self.k]
    }

    /// Hamilton product `self ⊗ rhs`.
    #[inline]
    pub fn hamilton(self, q: Quaternion) -> Quaternion {
        let p = self;
        Quaternion {
            r: p.r * q.r - p.i * q.i - p.j * q.j - p.k * q.k,
            i: p.r * q.i + p.i * q.r + p.j * q.k - p.k * q.j,
            j: p.r * q.j - p.i * q.k + p.j * q.r + p.k * q.i,
            k: p.r * q.k + p.i * q.j - p.j * q.i + p.k * q.r,
        }
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(self.r, -self.i, -self.j, -self.k)
    }

    pub fn dot(self, q: Quaternion) -> f64 {
        self.r * q.r + self.i * q.i + self.j * q.j + self.k * q.k
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Quaternion {
        Quaternion::new(self.r * s, self.i * s, self.j * s, self.k * s)
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn is_pure(self) -> bool {
        self.r.abs() <= PURE_TOLERANCE
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    /// Returns `self / ‖self‖`, or a domain error for the zero quaternion.
    pub fn normalized(self) -> Result<Quaternion> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(QuanError::Domain(format!(
                "cannot normalize quaternion of norm {n}"
            )));
        }
        Ok(self.scale(1.0 / n))
    }

    /// Unit quaternion for a rotation by `theta` radians about the z axis.
    pub fn from_planar_angle(theta: f64) -> Quaternion {
        let h = 0.5 * theta;
        Quaternion::new(h.cos(), 0.0, 0.0, h.sin())
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, rhs: Quaternion) -> Quaternion {
        self.hamilton(rhs)
    }
}

impl Add for Quaternion {
    type Output = Quaternion;

    fn add(self, q: Quaternion) -> Quaternion {
        Quaternion::new(self.r + q.r, self.i + q.i, self.j + q.j, self.k + q.k)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;

    fn sub(self, q: Quaternion) -> Quaternion {
        Quaternion::new(self.r - q.r, self.i - q.i, self.j - q.j, self.k - q.k)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

pub fn hamilton_product(p: Quaternion, q: Quaternion) -> Quaternion {
    p.hamilton(q)
}

pub fn conjugate(q: Quaternion) -> Quaternion {
    q.conjugate()
}

pub fn quat_norm(q: Quaternion) -> f64 {
    q.norm()
}

fn require_unit(q: Quaternion, what: &str) -> Result<()> {
    if !q.is_finite() || !q.is_unit() {
        return Err(QuanError::Domain(format!(
            "{what} must be a unit quaternion, got norm {}",
            q.norm()
        )));
    }
    Ok(())
}

/// Rotation angle between two unit quaternions, `2·acos(|⟨p, q⟩|)`, in `[0, π]`.
///
/// `q` and `-q` describe the same rotation, so the result is sign invariant.
pub fn geodesic_angle(p: Quaternion, q: Quaternion) -> Result<f64> {
    require_unit(p, "p")?;
    require_unit(q, "q")?;
    Ok(2.0 * p.dot(q).abs().clamp(-1.0, 1.0).acos())
}

/// Rotates the pure quaternion `v` by the unit quaternion `q`: `q ⊗ v ⊗ q*`.
pub fn sandwich_rotate(q: Quaternion, v: Quaternion) -> Result<Quaternion> {
    require_unit(q, "rotor")?;
    if !v.is_pure() {
        return Err(QuanError::Domain(format!(
            "rotated value must be pure, real part is {}",
            v.r
        )));
    }
    let mut out = q.hamilton(v).hamilton(q.conjugate());
    // The real part is zero analytically.
    out.r = 0.0;
    Ok(out)
}
