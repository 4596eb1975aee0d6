//! SO(3) parameterizations, the reference-plane similarity transform and
//! plane geometry helpers.
//!
//! Every conversion is written once over [`Scalar`] so the same code runs on
//! plain `f64` (the public API below) and on [`Dual`] numbers when the
//! network differentiates its pose heads.
//!
//! Conventions:
//! - Euler angles are applied as `Rz(rz) · Ry(ry) · Rx(rx)`.
//! - Axis-angle is a rotation vector, angle = norm.
//! - A raw 9-vector is read row-major as a 3x3 matrix and projected onto
//!   SO(3) by Gram–Schmidt on its first two columns.
//! - Plane reference points are center, bottom-right and bottom-left of the
//!   sampling grid: `(0,0,0)`, `(h,-h,0)`, `(-h,-h,0)` for half-extent `h`.

mod scalar;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use scalar::{Dual, Scalar};

/// Half-extent of the square sampling grid, in voxels.
pub const GRID_HALF_EXTENT: f64 = 80.0;

pub type Vec3 = [f64; 3];
pub type Mat3<S = f64> = [[S; 3]; 3];

const QUAT_EPS: f64 = 1e-12;
const GS_EPS: f64 = 1e-9;
const COLLINEAR_EPS: f64 = 1e-6;
/// Below this angle the Rodrigues coefficients use their Taylor series.
const SMALL_ANGLE_SQ: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix {
    pub m: Mat3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub r: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RotationParam {
    Quaternion(Quaternion),
    AxisAngle(AxisAngle),
    Euler(EulerAngles),
    Matrix { raw: [f64; 9] },
}

/// Three labeled reference points of a plane, in volume-centered voxel
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanePose {
    pub c: Vec3,
    pub br: Vec3,
    pub bl: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTransform {
    pub rotation: RotationParam,
    pub t: Vec3,
    pub s: f64,
}

impl RotationMatrix {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.m, v)
    }

    pub fn mul(&self, other: &RotationMatrix) -> RotationMatrix {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        RotationMatrix { m }
    }

    pub fn transpose(&self) -> RotationMatrix {
        let mut m = self.m;
        for (i, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = self.m[j][i];
            }
        }
        RotationMatrix { m }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest deviation of `MᵀM` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mtm = self.transpose().mul(self);
        let mut worst = 0.0f64;
        for (i, row) in mtm.m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    pub fn frobenius_distance(&self, other: &RotationMatrix) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = self.m[i][j] - other.m[i][j];
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// Row-major flattening.
    pub fn to_raw9(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = self.m[i][j];
            }
        }
        out
    }
}

impl Quaternion {
    pub fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit norm with `w >= 0`.
    pub fn canonical(&self) -> Result<Quaternion> {
        let n = self.norm();
        if !n.is_finite() || n <= QUAT_EPS {
            return Err(Error::InvalidInput(format!(
                "quaternion norm {n} is not usable"
            )));
        }
        let sign = if self.w < 0.0 { -1.0 } else { 1.0 };
        let k = sign / n;
        Ok(Quaternion {
            w: self.w * k,
            x: self.x * k,
            y: self.y * k,
            z: self.z * k,
        })
    }
}

impl RotationParam {
    pub fn identity() -> Self {
        RotationParam::Euler(EulerAngles {
            rx: 0.0,
            ry: 0.0,
            rz: 0.0,
        })
    }

    pub fn to_matrix(&self) -> Result<RotationMatrix> {
        match self {
            RotationParam::Quaternion(q) => quat_to_matrix(*q),
            RotationParam::AxisAngle(a) => axisangle_to_matrix(*a),
            RotationParam::Euler(e) => euler_to_matrix(*e),
            RotationParam::Matrix { raw } => orthonormalize(raw),
        }
    }
}

impl PlanePose {
    /// Reference points of the untransformed grid with half-extent `h`.
    pub fn canonical_with(h: f64) -> Self {
        Self {
            c: [0.0, 0.0, 0.0],
            br: [h, -h, 0.0],
            bl: [-h, -h, 0.0],
        }
    }

    pub fn canonical() -> Self {
        Self::canonical_with(GRID_HALF_EXTENT)
    }

    pub fn points(&self) -> [Vec3; 3] {
        [self.c, self.br, self.bl]
    }

    /// Coordinates in `c, br, bl` order.
    pub fn to_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for (k, p) in self.points().iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(p);
        }
        out
    }

    pub fn from_array(a: &[f64; 9]) -> Self {
        Self {
            c: [a[0], a[1], a[2]],
            br: [a[3], a[4], a[5]],
            bl: [a[6], a[7], a[8]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Norm of `(br - c) × (bl - c)`.
    pub fn collinearity(&self) -> f64 {
        norm(cross(sub(self.br, self.c), sub(self.bl, self.c)))
    }

    /// In-plane frame `(origin, ex, ey)` such that the grid point `(u, v)`
    /// of half-extent `h` lands at `origin + u·ex + v·ey`.
    pub fn frame(&self, h: f64) -> (Vec3, Vec3, Vec3) {
        let mut ex = [0.0; 3];
        let mut ey = [0.0; 3];
        for i in 0..3 {
            ex[i] = (self.br[i] - self.bl[i]) / (2.0 * h);
            ey[i] = (self.c[i] - 0.5 * (self.br[i] + self.bl[i])) / h;
        }
        (self.c, ex, ey)
    }
}

impl SimTransform {
    pub fn identity() -> Self {
        Self {
            rotation: RotationParam::identity(),
            t: [0.0; 3],
            s: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidInput(format!("scale {} must be > 0", self.s)));
        }
        if self.t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(())
    }

    /// Maps a point: `p ↦ s·R·p + t`.
    pub fn map_point(&self, rot: &RotationMatrix, p: Vec3) -> Vec3 {
        let r = rot.apply(p);
        [
            self.s * r[0] + self.t[0],
            self.s * r[1] + self.t[1],
            self.s * r[2] + self.t[2],
        ]
    }
}

pub fn quat_to_matrix(q: Quaternion) -> Result<RotationMatrix> {
    quat_to_mat([q.w, q.x, q.y, q.z])
        .map(|m| RotationMatrix { m })
        .ok_or_else(|| Error::InvalidInput(format!("quaternion {q:?} has zero norm")))
}

pub fn axisangle_to_matrix(a: AxisAngle) -> Result<RotationMatrix> {
    if a.r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite rotation vector {:?}",
            a.r
        )));
    }
    Ok(RotationMatrix {
        m: axis_angle_to_mat(a.r),
    })
}

pub fn euler_to_matrix(e: EulerAngles) -> Result<RotationMatrix> {
    if ![e.rx, e.ry, e.rz].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite euler angles {e:?}"
        )));
    }
    Ok(RotationMatrix {
        m: euler_to_mat([e.rx, e.ry, e.rz]),
    })
}

/// Projects a row-major 3x3 matrix onto SO(3) via Gram–Schmidt on columns
/// one and two; column three is their cross product.
pub fn orthonormalize(raw9: &[f64; 9]) -> Result<RotationMatrix> {
    if raw9.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix entries".into()));
    }
    gram_schmidt(raw9)
        .map(|m| RotationMatrix { m })
        .ok_or_else(|| Error::Singular("first two columns are degenerate".into()))
}

pub fn apply_transform(x: &SimTransform, canonical: &PlanePose) -> Result<PlanePose> {
    x.validate()?;
    let rot = x.rotation.to_matrix()?;
    Ok(PlanePose {
        c: x.map_point(&rot, canonical.c),
        br: x.map_point(&rot, canonical.br),
        bl: x.map_point(&rot, canonical.bl),
    })
}

/// Unit normal `normalize((br - c) × (bl - c))`.
pub fn plane_normal(p: &PlanePose) -> Result<Vec3> {
    let n = cross(sub(p.br, p.c), sub(p.bl, p.c));
    let len = norm(n);
    if !(len > COLLINEAR_EPS) {
        return Err(Error::DegeneratePlane(format!(
            "reference points are collinear (|cross| = {len:e})"
        )));
    }
    Ok([n[0] / len, n[1] / len, n[2] / len])
}

// ---------------------------------------------------------------------------
// Generic kernels
// ---------------------------------------------------------------------------

/// Returns `None` when the quaternion norm is below `1e-12`.
pub fn quat_to_mat<S: Scalar>(q: [S; 4]) -> Option<Mat3<S>> {
    let n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
    if !(n2.re() > QUAT_EPS * QUAT_EPS) || !n2.re().is_finite() {
        return None;
    }
    let inv = S::one() / n2.sqrt();
    let (w, x, y, z) = (q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv);
    let one = S::one();
    let two = S::cst(2.0);
    Some([
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ])
}

/// Rodrigues' formula `I + a·K + b·K²` with `a = sinθ/θ`, `b = (1-cosθ)/θ²`.
pub fn axis_angle_to_mat<S: Scalar>(r: [S; 3]) -> Mat3<S> {
    let theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let (a, b) = if theta2.re() < SMALL_ANGLE_SQ {
        let t4 = theta2 * theta2;
        (
            S::one() - theta2 / S::cst(6.0) + t4 / S::cst(120.0),
            S::cst(0.5) - theta2 / S::cst(24.0) + t4 / S::cst(720.0),
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (S::one() - theta.cos()) / theta2)
    };
    let z = S::zero();
    let k = [[z, -r[2], r[1]], [r[2], z, -r[0]], [-r[1], r[0], z]];
    let mut out = [[z; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut k2 = z;
            for m in 0..3 {
                k2 = k2 + k[i][m] * k[m][j];
            }
            let id = if i == j { S::one() } else { z };
            out[i][j] = id + a * k[i][j] + b * k2;
        }
    }
    out
}

/// `Rz(e[2]) · Ry(e[1]) · Rx(e[0])`.
pub fn euler_to_mat<S: Scalar>(e: [S; 3]) -> Mat3<S> {
    let (sx, cx) = (e[0].sin(), e[0].cos());
    let (sy, cy) = (e[1].sin(), e[1].cos());
    let (sz, cz) = (e[2].sin(), e[2].cos());
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Returns `None` when either leading column is degenerate.
pub fn gram_schmidt<S: Scalar>(raw: &[S; 9]) -> Option<Mat3<S>> {
    let a = [raw[0], raw[3], raw[6]];
    let b = [raw[1], raw[4], raw[7]];
    let na = dot_g(a, a).sqrt();
    let nb = dot_g(b, b).sqrt();
    if !(na.re() > GS_EPS) || !(nb.re() > GS_EPS) {
        return None;
    }
    let e1 = a.map(|v| v / na);
    let proj = dot_g(e1, b);
    let b_perp = [
        b[0] - proj * e1[0],
        b[1] - proj * e1[1],
        b[2] - proj * e1[2],
    ];
    let np = dot_g(b_perp, b_perp).sqrt();
    if !(np.re() > GS_EPS * nb.re()) {
        return None;
    }
    let e2 = b_perp.map(|v| v / np);
    let e3 = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    Some([
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ])
}

/// Applies `s·R·p + t` to each of the three canonical points.
pub fn transform_points<S: Scalar>(
    rot: &Mat3<S>,
    s: S,
    t: [S; 3],
    canonical: &[Vec3; 3],
) -> [S; 9] {
    let mut out = [S::zero(); 9];
    for (k, p) in canonical.iter().enumerate() {
        for i in 0..3 {
            let mut acc = S::zero();
            for j in 0..3 {
                acc = acc + rot[i][j] * S::cst(p[j]);
            }
            out[3 * k + i] = s * acc + t[i];
        }
    }
    out
}

fn dot_g<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

    use super::*;

    fn close(a: &RotationMatrix, b: &RotationMatrix, tol: f64) -> bool {
        a.frobenius_distance(b) < tol
    }

    fn diag(a: f64, b: f64, c: f64) -> RotationMatrix {
        RotationMatrix {
            m: [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]],
        }
    }

    /// Rotates `v` by `angle` about the z axis component by component.
    fn rotate_about_z(v: Vec3, angle: f64) -> Vec3 {
        [
            v[0] * angle.cos() - v[1] * angle.sin(),
            v[0] * angle.sin() + v[1] * angle.cos(),
            v[2],
        ]
    }

    #[test]
    fn quaternion_examples() {
        let id = quat_to_matrix(Quaternion::identity()).unwrap();
        assert_eq!(id, RotationMatrix::identity());

        let q = Quaternion {
            w: 0.0,
            x: 0.0,
            y: 0.0,
            z: 1.0,
        };
        assert_eq!(quat_to_matrix(q).unwrap(), diag(-1.0, -1.0, 1.0));

        let q = Quaternion {
            w: FRAC_1_SQRT_2,
            x: 0.0,
            y: 0.0,
            z: FRAC_1_SQRT_2,
        };
        let m = quat_to_matrix(q).unwrap();
        for e in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let got = m.apply(e);
            let want = rotate_about_z(e, FRAC_PI_2);
            for i in 0..3 {
                assert!((got[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quaternion_sign_does_not_matter() {
        let q = Quaternion {
            w: 0.3,
            x: -0.2,
            y: 0.9,
            z: 0.1,
        };
        let neg = Quaternion {
            w: -q.w,
            x: -q.x,
            y: -q.y,
            z: -q.z,
        };
        assert_eq!(quat_to_matrix(q).unwrap(), quat_to_matrix(neg).unwrap());
        let c = neg.canonical().unwrap();
        assert!(c.w >= 0.0);
        assert!((c.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        let q = Quaternion {
            w: 0.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        };
        assert!(matches!(quat_to_matrix(q), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn axis_angle_examples() {
        let id = axisangle_to_matrix(AxisAngle { r: [0.0; 3] }).unwrap();
        assert_eq!(id, RotationMatrix::identity());
        let half = axisangle_to_matrix(AxisAngle { r: [0.0, 0.0, PI] }).unwrap();
        assert!(close(&half, &diag(-1.0, -1.0, 1.0), 1e-12));
        assert!(axisangle_to_matrix(AxisAngle {
            r: [f64::NAN, 0.0, 0.0]
        })
        .is_err());
    }

    #[test]
    fn axis_angle_is_continuous_through_the_taylor_switch() {
        let below = (SMALL_ANGLE_SQ.sqrt()) * 0.999;
        let above = (SMALL_ANGLE_SQ.sqrt()) * 1.001;
        let a = axisangle_to_matrix(AxisAngle {
            r: [below, 0.0, 0.0],
        })
        .unwrap();
        let b = axisangle_to_matrix(AxisAngle {
            r: [above, 0.0, 0.0],
        })
        .unwrap();
        assert!(a.frobenius_distance(&b) < 1e-6);
        assert!(a.orthonormality_error() < 1e-15);
    }

    #[test]
    fn euler_examples() {
        let id = euler_to_matrix(EulerAngles {
            rx: 0.0,
            ry: 0.0,
            rz: 0.0,
        })
        .unwrap();
        assert_eq!(id, RotationMatrix::identity());

        let m = euler_to_matrix(EulerAngles {
            rx: 0.0,
            ry: 0.0,
            rz: FRAC_PI_2,
        })
        .unwrap();
        let v = m.apply([1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
        assert!(euler_to_matrix(EulerAngles {
            rx: f64::INFINITY,
            ry: 0.0,
            rz: 0.0
        })
        .is_err());
    }

    #[test]
    fn euler_matches_single_axis_products() {
        let (rx, ry, rz) = (0.4, -1.1, 2.3);
        let mx = RotationMatrix {
            m: [
                [1.0, 0.0, 0.0],
                [0.0, rx.cos(), -rx.sin()],
                [0.0, rx.sin(), rx.cos()],
            ],
        };
        let my = RotationMatrix {
            m: [
                [ry.cos(), 0.0, ry.sin()],
                [0.0, 1.0, 0.0],
                [-ry.sin(), 0.0, ry.cos()],
            ],
        };
        let mz = RotationMatrix {
            m: [
                [rz.cos(), -rz.sin(), 0.0],
                [rz.sin(), rz.cos(), 0.0],
                [0.0, 0.0, 1.0],
            ],
        };
        let want = mz.mul(&my).mul(&mx);
        let got = euler_to_matrix(EulerAngles { rx, ry, rz }).unwrap();
        assert!(close(&got, &want, 1e-14));
    }

    #[test]
    fn orthonormalize_examples() {
        let id = RotationMatrix::identity().to_raw9();
        assert_eq!(orthonormalize(&id).unwrap(), RotationMatrix::identity());

        let mut scaled = id;
        scaled[1] *= 3.0;
        scaled[4] *= 3.0;
        scaled[7] *= 3.0;
        assert_eq!(orthonormalize(&scaled).unwrap(), RotationMatrix::identity());
    }

    #[test]
    fn orthonormalize_rejects_degenerate_columns() {
        let zero_first = [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(
            orthonormalize(&zero_first),
            Err(Error::Singular(_))
        ));
        let parallel = [1.0, 2.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(orthonormalize(&parallel), Err(Error::Singular(_))));
    }

    #[test]
    fn orthonormalize_is_idempotent() {
        let raw = [0.9, -0.3, 0.2, 0.1, 1.2, -0.4, 0.3, 0.5, 0.8];
        let once = orthonormalize(&raw).unwrap();
        let twice = orthonormalize(&once.to_raw9()).unwrap();
        assert!(close(&once, &twice, 1e-14));
        assert!((once.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn apply_transform_examples() {
        let canon = PlanePose::canonical();
        let same = apply_transform(&SimTransform::identity(), &canon).unwrap();
        assert_eq!(same, canon);

        let doubled = apply_transform(
            &SimTransform {
                s: 2.0,
                ..SimTransform::identity()
            },
            &canon,
        )
        .unwrap();
        assert_eq!(doubled.br, [160.0, -160.0, 0.0]);
        assert_eq!(doubled.bl, [-160.0, -160.0, 0.0]);

        let x = SimTransform {
            rotation: RotationParam::Euler(EulerAngles {
                rx: 0.0,
                ry: 0.0,
                rz: FRAC_PI_2,
            }),
            t: [1.0, 2.0, 3.0],
            s: 1.0,
        };
        let got = apply_transform(&x, &canon).unwrap();
        // (x, y) -> (-y, x) then translate.
        let want = [[1.0, 2.0, 3.0], [81.0, 82.0, 3.0], [81.0, -78.0, 3.0]];
        for (g, w) in got.points().iter().zip(want) {
            for i in 0..3 {
                assert!((g[i] - w[i]).abs() < 1e-12, "{g:?} vs {w:?}");
            }
        }
    }

    #[test]
    fn invalid_scale_is_rejected() {
        let x = SimTransform {
            s: 0.0,
            ..SimTransform::identity()
        };
        assert!(apply_transform(&x, &PlanePose::canonical()).is_err());
    }

    #[test]
    fn plane_normal_examples() {
        let canon = PlanePose::canonical();
        assert_eq!(plane_normal(&canon).unwrap(), [0.0, 0.0, -1.0]);

        let rot = RotationParam::AxisAngle(AxisAngle {
            r: [FRAC_PI_2, 0.0, 0.0],
        });
        let x = SimTransform {
            rotation: rot,
            ..SimTransform::identity()
        };
        let rotated = apply_transform(&x, &canon).unwrap();
        let n = plane_normal(&rotated).unwrap();
        let want = rot.to_matrix().unwrap().apply([0.0, 0.0, -1.0]);
        for i in 0..3 {
            assert!((n[i] - want[i]).abs() < 1e-12);
        }

        let scaled = apply_transform(&SimTransform { s: 3.5, ..x }, &canon).unwrap();
        let ns = plane_normal(&scaled).unwrap();
        for i in 0..3 {
            assert!((ns[i] - n[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_plane_is_degenerate() {
        let p = PlanePose {
            c: [0.0; 3],
            br: [1.0, 1.0, 1.0],
            bl: [2.0, 2.0, 2.0],
        };
        assert!(matches!(plane_normal(&p), Err(Error::DegeneratePlane(_))));
    }

    #[test]
    fn frame_reproduces_reference_points() {
        let x = SimTransform {
            rotation: RotationParam::Euler(EulerAngles {
                rx: 0.2,
                ry: -0.1,
                rz: 0.7,
            }),
            t: [3.0, -4.0, 10.0],
            s: 1.3,
        };
        let pose = apply_transform(&x, &PlanePose::canonical()).unwrap();
        let (o, ex, ey) = pose.frame(GRID_HALF_EXTENT);
        let h = GRID_HALF_EXTENT;
        for i in 0..3 {
            assert!((o[i] + h * ex[i] - h * ey[i] - pose.br[i]).abs() < 1e-9);
            assert!((o[i] - h * ex[i] - h * ey[i] - pose.bl[i]).abs() < 1e-9);
        }
    }
}
