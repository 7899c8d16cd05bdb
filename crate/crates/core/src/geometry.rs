//! Exact two-view geometry shared by the regressor, the classical baseline,
//! and the metrics: pinhole projection, intrinsic calibration, essential
//! matrix algebra, and SO(3) utilities.
//!
//! Conventions. A [`Pose`] `(R, t)` maps points from the camera-1 frame into
//! the camera-2 frame, `X2 = R X1 + t`; the world frame is identified with
//! camera 1, so a scene point projects as `q1 ~ K1 X1` and `q2 ~ K2 (R X1 + t)`.
//! With `E = [t]x R`, exact calibrated correspondences satisfy
//! `(K2^-1 q2)^T E (K1^-1 q1) = 0`, which is the bilinear form
//! [`epipolar_residual`] evaluates. Angles are radians internally and degrees
//! at reporting boundaries.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("translation norm below 1e-12; essential matrix undefined")]
    ZeroTranslation,
    #[error("translation norm below 1e-12; direction undefined")]
    DegenerateTranslation,
    #[error("degenerate 6d rotation input: {0}")]
    DegenerateSixD(&'static str),
    #[error("{count} points behind camera (first indices {first:?})")]
    BehindCamera { count: usize, first: Vec<usize> },
    #[error("matrix is not a rotation: {0}")]
    NotARotation(&'static str),
}

/// Pinhole intrinsics `K = [[fx,0,cx],[0,fy,cy],[0,0,1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        CameraIntrinsics { fx, fy, cx, cy }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Calibrate one pixel: first two components of `K^-1 (u, v, 1)`.
    #[inline]
    pub fn calibrate_point(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.cx) / self.fx, (p[1] - self.cy) / self.fy]
    }

    /// Inverse of [`Self::calibrate_point`].
    #[inline]
    pub fn uncalibrate_point(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.fx + self.cx, p[1] * self.fy + self.cy]
    }
}

/// Rigid transform: rotation in SO(3) plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    /// Validates the rotation invariants (`R^T R = I`, `det R = 1`, both
    /// within 1e-9).
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho > 1e-9 {
            return Err(GeometryError::NotARotation("R^T R differs from I"));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation("det(R) differs from 1"));
        }
        Ok(Pose { r, t })
    }

    pub fn identity() -> Self {
        Pose {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Apply to a point: `R x + t`.
    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// Rotation angle away from the identity, in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        rotation_angle_error(&self.r, &Matrix3::identity())
    }
}

/// Essential matrix; scale-ambiguous, rank 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

/// A set of 3D points in meters with optional per-point identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Point3Set {
    pub points: Vec<Vector3<f64>>,
    pub ids: Option<Vec<u64>>,
}

impl Point3Set {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Point3Set { points, ids: None }
    }

    pub fn with_ids(points: Vec<Vector3<f64>>, ids: Vec<u64>) -> Self {
        assert_eq!(points.len(), ids.len());
        Point3Set {
            points,
            ids: Some(ids),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Cross-product matrix: `skew(t) v = t x v`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `E = [t]x R`. Undefined at zero translation.
pub fn essential_from_pose(pose: &Pose) -> Result<EssentialMatrix, GeometryError> {
    if pose.t.norm() < 1e-12 {
        return Err(GeometryError::ZeroTranslation);
    }
    Ok(EssentialMatrix(skew(&pose.t) * pose.r))
}

/// Epipolar constraint value for a pixel correspondence `(q1, q2)`:
/// `(K2^-1 q2)^T E (K1^-1 q1)`, zero for exact correspondences under the
/// true pose. Points are lifted to `(u, v, 1)` before calibration.
pub fn epipolar_residual(
    e: &EssentialMatrix,
    q1: [f64; 2],
    q2: [f64; 2],
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
) -> f64 {
    let c1 = k1.calibrate_point(q1);
    let c2 = k2.calibrate_point(q2);
    let x1 = Vector3::new(c1[0], c1[1], 1.0);
    let x2 = Vector3::new(c2[0], c2[1], 1.0);
    (x2.transpose() * e.0 * x1)[(0, 0)]
}

/// Calibrate pixel coordinates: `(u, v) -> ((u-cx)/fx, (v-cy)/fy)`.
pub fn calibrate(pk: &[[f64; 2]], k: &CameraIntrinsics) -> Vec<[f64; 2]> {
    pk.iter().map(|&p| k.calibrate_point(p)).collect()
}

/// Inverse of [`calibrate`].
pub fn uncalibrate(pc: &[[f64; 2]], k: &CameraIntrinsics) -> Vec<[f64; 2]> {
    pc.iter().map(|&p| k.uncalibrate_point(p)).collect()
}

/// Geodesic angle between two rotations, in degrees:
/// `arccos((trace(R^T Rgt) - 1) / 2)` with the argument clamped to [-1, 1].
///
/// Cosines within a few ulps of 1 are snapped to angle 0: the trace of
/// `R^T R` lands just below 3 in floating point, and `acos` would turn that
/// rounding noise into a spurious ~1e-6 degree error at `R = Rgt`.
pub fn rotation_angle_error(r: &Matrix3<f64>, rgt: &Matrix3<f64>) -> f64 {
    let c = (((r.transpose() * rgt).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    if c >= 1.0 - 1e-15 {
        return 0.0;
    }
    c.acos().to_degrees()
}

/// Angle between translation directions, in degrees; scale-invariant.
///
/// As in [`rotation_angle_error`], cosines within a few ulps of 1 snap to
/// angle 0 so that identical directions measure exactly zero.
pub fn translation_angle_error(
    t: &Vector3<f64>,
    tgt: &Vector3<f64>,
) -> Result<f64, GeometryError> {
    let (n1, n2) = (t.norm(), tgt.norm());
    if n1 < 1e-12 || n2 < 1e-12 {
        return Err(GeometryError::DegenerateTranslation);
    }
    let c = (t.dot(tgt) / (n1 * n2)).clamp(-1.0, 1.0);
    if c >= 1.0 - 1e-15 {
        return Ok(0.0);
    }
    Ok(c.acos().to_degrees())
}

/// Partial Gram-Schmidt: maps a 6-vector (two stacked 3-vectors) to the
/// rotation with columns `b1 = normalize(a)`, `b2 = normalize(b - (b1.b) b1)`,
/// `b3 = b1 x b2`. Continuous over SO(3).
pub fn gram_schmidt_6d(r: &[f64; 6]) -> Result<Matrix3<f64>, GeometryError> {
    let a = Vector3::new(r[0], r[1], r[2]);
    let b = Vector3::new(r[3], r[4], r[5]);
    let na = a.norm();
    if na < 1e-12 {
        return Err(GeometryError::DegenerateSixD("first 3-vector near zero"));
    }
    let b1 = a / na;
    let resid = b - b1 * b1.dot(&b);
    let nr = resid.norm();
    if nr < 1e-12 {
        return Err(GeometryError::DegenerateSixD(
            "second 3-vector parallel to first",
        ));
    }
    let b2 = resid / nr;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Inverse encoding used by the idempotence property: the first two columns
/// flattened into a 6-vector.
pub fn rotation_to_6d(r: &Matrix3<f64>) -> [f64; 6] {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

/// Project 3D points through a pose and intrinsics; all points must end up
/// at positive depth.
pub fn project(
    points: &Point3Set,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vec<[f64; 2]>, GeometryError> {
    let mut behind = Vec::new();
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.points.iter().enumerate() {
        let x = pose.transform(p);
        if x.z < 1e-12 {
            behind.push(i);
            continue;
        }
        out.push([
            k.fx * (x.x / x.z) + k.cx,
            k.fy * (x.y / x.z) + k.cy,
        ]);
    }
    if !behind.is_empty() {
        let count = behind.len();
        behind.truncate(8);
        return Err(GeometryError::BehindCamera {
            count,
            first: behind,
        });
    }
    Ok(out)
}

/// Rotation about a (not necessarily unit) axis by `angle` radians
/// (Rodrigues).
pub fn rotation_about_axis(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    assert!(n > 1e-15, "axis must be nonzero");
    let u = axis / n;
    let k = skew(&u);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

/// Haar-ish random rotation via a normalized random quaternion.
pub fn random_rotation(rng: &mut crate::rng::Rng) -> Matrix3<f64> {
    loop {
        let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            continue;
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        return Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
    }
}
