//! Rigid transforms, the pinhole camera model, and the pose file format
//! shared by every other module.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({u:.3}, {v:.3}) outside image {width}x{height}")]
    PixelOutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("rotation matrix is not orthonormal (residual {0:.3e})")]
    InvalidRotation(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("malformed pose file line {line}: {reason}")]
    MalformedPoseLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// World-from-X rigid body transform: `p_out = R * p_in + t`.
///
/// Rotations are stored as matrices and re-orthonormalized on construction
/// when the input drifts more than 1e-7 from SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHONORMALITY_DRIFT: f64 = 1e-7;

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let drift = orthonormality_residual(&rotation);
        let rotation = if drift > ORTHONORMALITY_DRIFT {
            project_to_so3(&rotation)
        } else {
            rotation
        };
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = UnitQuaternion::from_scaled_axis(axis.normalize() * angle).to_rotation_matrix();
        Self::new(rotation.into_inner(), translation)
    }

    /// Builds from `(tx, ty, tz, qx, qy, qz, qw)`; the quaternion is normalized.
    pub fn from_quaternion(t: Vector3<f64>, qx: f64, qy: f64, qz: f64, qw: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
        Self::new(q.to_rotation_matrix().into_inner(), t)
    }

    /// `(tx, ty, tz, qx, qy, qz, qw)` for serialization.
    pub fn to_quaternion(&self) -> (Vector3<f64>, f64, f64, f64, f64) {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        let v = q.as_vector();
        (self.translation, v[0], v[1], v[2], v[3])
    }

    /// Composition: the result maps points as `self` after `other`
    /// (`compose(a, b) * p == a * (b * p)`).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_points(&self, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        pts.iter().map(|p| self.transform_point(p)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }

    /// Max residual of RᵀR−I and |det−1|; 0 for a perfect rotation.
    pub fn rotation_residual(&self) -> f64 {
        orthonormality_residual(&self.rotation)
    }
}

fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let gram_res = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    gram_res.max((r.determinant() - 1.0).abs())
}

fn project_to_so3(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let det = (u * vt).determinant();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * vt
}

/// Pinhole camera. Convention: +z optical axis, +x right, +y down, and
/// depth means ray length (Euclidean distance from the camera center),
/// not the z coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!("fx={fx}, fy={fy}")));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    #[inline]
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// Unit ray direction through continuous pixel coordinates, camera frame.
    #[inline]
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    /// Camera-frame point at the given ray length through (u, v).
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !self.in_bounds(u, v) {
            return Err(GeometryError::PixelOutOfBounds { u, v, width: self.width, height: self.height });
        }
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(self.ray_direction(u, v) * depth)
    }

    /// Projects a camera-frame point; `None` when at or behind the camera plane.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        const MIN_Z: f64 = 1e-9;
        if p.z < MIN_Z {
            return None;
        }
        let inv_z = 1.0 / p.z;
        Some((self.fx * p.x * inv_z + self.cx, self.fy * p.y * inv_z + self.cy))
    }

    /// Intrinsics for the same lens at a new image size: fx, cx scale by
    /// `new_w/width` and fy, cy by `new_h/height`.
    pub fn rescale(&self, new_w: usize, new_h: usize) -> PinholeCamera {
        let sx = new_w as f64 / self.width as f64;
        let sy = new_h as f64 / self.height as f64;
        PinholeCamera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width: new_w,
            height: new_h,
        }
    }

    /// Center of the integer pixel (u, v) in continuous coordinates.
    #[inline]
    pub fn pixel_center(u: usize, v: usize) -> (f64, f64) {
        (u as f64 + 0.5, v as f64 + 0.5)
    }
}

/// One pose-file record: world-from-camera pose tagged with its frame id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord {
    pub frame_id: u64,
    pub pose: RigidTransform,
}

/// Writes `frame_id tx ty tz qx qy qz qw` lines (meters, unit quaternion).
pub fn write_pose_file(path: &Path, records: &[PoseRecord]) -> Result<(), GeometryError> {
    let mut out = String::new();
    for r in records {
        let (t, qx, qy, qz, qw) = r.pose.to_quaternion();
        writeln!(
            out,
            "{} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            r.frame_id, t.x, t.y, t.z, qx, qy, qz, qw
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pose_file(path: &Path) -> Result<Vec<PoseRecord>, GeometryError> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(GeometryError::MalformedPoseLine {
                line: idx + 1,
                reason: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let frame_id: u64 = fields[0].parse().map_err(|e| GeometryError::MalformedPoseLine {
            line: idx + 1,
            reason: format!("frame id: {e}"),
        })?;
        let mut vals = [0.0f64; 7];
        for (i, f) in fields[1..].iter().enumerate() {
            vals[i] = f.parse().map_err(|e| GeometryError::MalformedPoseLine {
                line: idx + 1,
                reason: format!("field {}: {e}", i + 1),
            })?;
        }
        let pose = RigidTransform::from_quaternion(
            Vector3::new(vals[0], vals[1], vals[2]),
            vals[3],
            vals[4],
            vals[5],
            vals[6],
        );
        records.push(PoseRecord { frame_id, pose });
    }
    Ok(records)
}

/// World-from-camera pose at `position` looking at `target`, with the image
/// up direction chosen against world `up` (+y points away from `up`).
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> RigidTransform {
    let forward = (target - position).normalize();
    let up = if forward.dot(&up.normalize()).abs() > 0.999 {
        // Degenerate: looking along up; pick any transverse axis.
        let alt = if forward.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        alt
    } else {
        up
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right).normalize();
    let rotation = Matrix3::from_columns(&[right, down, forward]);
    RigidTransform::new(rotation, position)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rot_z(angle: f64) -> RigidTransform {
        RigidTransform::from_axis_angle(Vector3::z(), angle, Vector3::zeros())
    }

    #[test]
    fn compose_identity_is_noop() {
        let t = RigidTransform::from_axis_angle(
            Vector3::new(1.0, 2.0, -0.5),
            0.7,
            Vector3::new(0.1, -0.2, 0.3),
        );
        let c = RigidTransform::identity().compose(&t);
        assert_abs_diff_eq!(c.rotation, t.rotation, epsilon = 1e-12);
        assert_abs_diff_eq!(c.translation, t.translation, epsilon = 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = RigidTransform::from_axis_angle(
            Vector3::new(-0.3, 1.0, 0.8),
            1.9,
            Vector3::new(4.0, -1.0, 2.5),
        );
        let c = t.compose(&t.invert());
        assert_abs_diff_eq!(c.rotation, Matrix3::identity(), epsilon = 1e-9);
        assert_abs_diff_eq!(c.translation, Vector3::zeros(), epsilon = 1e-9);
    }

    #[test]
    fn compose_two_quarter_turns() {
        // By hand: Rz(90°)² = Rz(180°) = diag(-1, -1, 1).
        let quarter = rot_z(std::f64::consts::FRAC_PI_2);
        let half = quarter.compose(&quarter);
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(half.rotation, expected, epsilon = 1e-12);
    }

    #[test]
    fn transform_points_cases() {
        let id = RigidTransform::identity();
        let p = vec![Vector3::new(1.0, 2.0, 3.0)];
        assert_eq!(id.transform_points(&p), p);

        let lift = RigidTransform::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(
            lift.transform_points(&[Vector3::zeros()]),
            vec![Vector3::new(0.0, 0.0, 1.0)]
        );

        let q = rot_z(std::f64::consts::FRAC_PI_2);
        let rotated = q.transform_points(&[Vector3::new(1.0, 0.0, 0.0)]);
        assert_abs_diff_eq!(rotated[0], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_principal_ray() {
        let cam = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let p = cam.backproject(320.0, 240.0, 2.0).unwrap();
        assert_abs_diff_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_unit_focal_diagonal() {
        // Direction (1,0,1)/√2 scaled to length √2 gives (1,0,1).
        let cam = PinholeCamera { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 4, height: 4 };
        let p = cam.backproject(1.0, 0.0, std::f64::consts::SQRT_2).unwrap();
        assert_abs_diff_eq!(p, Vector3::new(1.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_rejects_out_of_bounds() {
        let cam = PinholeCamera::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        assert!(matches!(
            cam.backproject(640.0, 100.0, 1.0),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
        assert!(matches!(
            cam.backproject(-0.1, 100.0, 1.0),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
    }

    #[test]
    fn rescale_matches_sensor_downscale() {
        let cam = PinholeCamera::new(1380.0, 1380.0, 800.0, 600.0, 1600, 1200).unwrap();
        let small = cam.rescale(512, 384);
        assert_abs_diff_eq!(small.fx, 1380.0 * 512.0 / 1600.0, epsilon = 1e-12);
        assert_abs_diff_eq!(small.fy, 1380.0 * 384.0 / 1200.0, epsilon = 1e-12);
        assert_abs_diff_eq!(small.cx, 800.0 * 0.32, epsilon = 1e-12);
        assert_eq!((small.width, small.height), (512, 384));

        let same = cam.rescale(1600, 1200);
        assert_eq!(same, cam);

        let back = small.rescale(1600, 1200);
        assert_abs_diff_eq!(back.fx, cam.fx, epsilon = 1e-9);
        assert_abs_diff_eq!(back.cy, cam.cy, epsilon = 1e-9);
    }

    #[test]
    fn pose_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let records: Vec<PoseRecord> = (0..5)
            .map(|i| PoseRecord {
                frame_id: i,
                pose: RigidTransform::from_axis_angle(
                    Vector3::new(0.2, 1.0, i as f64 * 0.1 + 0.1),
                    0.3 * i as f64,
                    Vector3::new(i as f64, -0.5, 0.25),
                ),
            })
            .collect();
        write_pose_file(&path, &records).unwrap();
        let parsed = read_pose_file(&path).unwrap();
        assert_eq!(parsed.len(), records.len());
        for (a, b) in parsed.iter().zip(&records) {
            assert_eq!(a.frame_id, b.frame_id);
            assert_abs_diff_eq!(a.pose.rotation, b.pose.rotation, epsilon = 1e-7);
            assert_abs_diff_eq!(a.pose.translation, b.pose.translation, epsilon = 1e-8);
        }
    }

    #[test]
    fn look_at_points_forward() {
        let pose = look_at(Vector3::new(1.0, 1.0, 1.0), Vector3::zeros(), Vector3::z());
        let fwd = pose.rotation.column(2);
        assert_abs_diff_eq!(
            Vector3::from(fwd),
            (-Vector3::new(1.0, 1.0, 1.0)).normalize(),
            epsilon = 1e-12
        );
        assert!(pose.rotation_residual() < 1e-12);
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(
            u in 0.0f64..640.0,
            v in 0.0f64..480.0,
            d in 0.01f64..50.0,
        ) {
            let cam = PinholeCamera::new(523.0, 517.0, 321.5, 243.5, 640, 480).unwrap();
            let p = cam.backproject(u, v, d).unwrap();
            prop_assert!((p.norm() - d).abs() < 1e-9 * d.max(1.0));
            let (pu, pv) = cam.project(&p).unwrap();
            prop_assert!((pu - u).abs() < 1e-6, "u {} vs {}", pu, u);
            prop_assert!((pv - v).abs() < 1e-6, "v {} vs {}", pv, v);
        }

        #[test]
        fn transforms_preserve_pairwise_distance(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            angle in -3.0f64..3.0,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            px in -4.0f64..4.0, py in -4.0f64..4.0, pz in -4.0f64..4.0,
            qx in -4.0f64..4.0, qy in -4.0f64..4.0, qz in -4.0f64..4.0,
        ) {
            prop_assume!(Vector3::new(ax, ay, az).norm() > 1e-3);
            let t = RigidTransform::from_axis_angle(
                Vector3::new(ax, ay, az), angle, Vector3::new(tx, ty, tz));
            let p = Vector3::new(px, py, pz);
            let q = Vector3::new(qx, qy, qz);
            let d0 = (p - q).norm();
            let d1 = (t.transform_point(&p) - t.transform_point(&q)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9 * d0.max(1.0));
        }

        #[test]
        fn rescale_preserves_ray_directions(
            u in 0usize..640, v in 0usize..480,
        ) {
            let cam = PinholeCamera::new(523.0, 517.0, 320.0, 240.0, 640, 480).unwrap();
            let small = cam.rescale(160, 120);
            let (ub, vb) = PinholeCamera::pixel_center(u, v);
            // The same physical pixel center maps proportionally.
            let d0 = cam.ray_direction(ub, vb);
            let d1 = small.ray_direction(ub * 0.25, vb * 0.25);
            prop_assert!((d0 - d1).norm() < 1e-12);
        }
    }
}
