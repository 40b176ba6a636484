//! Rigid-body algebra, pinhole projection and training-time augmentation.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Points at or closer than this depth (meters) do not project.
pub const DEPTH_EPS: f64 = 1e-6;

const ROTATION_TOL: f64 = 1e-9;

/// Rotation plus translation mapping LiDAR-frame points into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidPose {
            rotation,
            translation,
        }
    }

    /// Row-major rotation followed by the translation.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)];
            }
            out[9 + r] = self.translation[r];
        }
        out
    }

    pub fn from_array(v: &[f64; 12]) -> Self {
        RigidPose {
            rotation: Matrix3::from_row_slice(&v[..9]),
            translation: Vector3::new(v[9], v[10], v[11]),
        }
    }

    /// `a ∘ b`: apply `b`, then `self`.
    pub fn compose(&self, b: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.rotation, ROTATION_TOL) && self.translation.iter().all(|v| v.is_finite())
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ortho < tol && (r.determinant() - 1.0).abs() < tol
}

/// Closest rotation in Frobenius norm (SVD projection onto SO(3)).
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// Angle of the rotation `r` in radians, in [0, π].
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // atan2 form stays accurate near 0 and π, where acos of the trace does not.
    let s = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

pub fn rotation_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Matrix3<f64>> {
    if (axis.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "rotation axis must be unit length, |axis| = {}",
            axis.norm()
        )));
    }
    let k = axis.cross_matrix();
    let (s, c) = angle.sin_cos();
    Ok(Matrix3::identity() + k * s + k * k * (1.0 - c))
}

pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    rotation_from_axis_angle(&Vector3::z(), angle).expect("z is a unit axis")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Parameter(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::Parameter(format!(
                "image grid must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pixel coordinates of a camera-frame point, `None` at or behind the
    /// depth threshold.
    pub fn project_camera(&self, q: &Vector3<f64>) -> Option<[f64; 2]> {
        if q.z <= DEPTH_EPS {
            return None;
        }
        Some([
            self.fx * q.x / q.z + self.cx,
            self.fy * q.y / q.z + self.cy,
        ])
    }

    pub fn unproject(&self, uv: [f64; 2], depth: f64) -> Vector3<f64> {
        Vector3::new(
            (uv[0] - self.cx) / self.fx * depth,
            (uv[1] - self.cy) / self.fy * depth,
            depth,
        )
    }

    pub fn in_grid(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[0] < self.width as f64 && uv[1] >= 0.0 && uv[1] < self.height as f64
    }
}

/// Result of projecting a point set: pixel coordinates (NaN where invalid),
/// camera-frame depth and the depth validity mask.
#[derive(Clone, Debug)]
pub struct Projection {
    pub coords: Matrix,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Projection {
    pub fn coord(&self, i: usize) -> [f64; 2] {
        [self.coords.get(i, 0), self.coords.get(i, 1)]
    }
}

pub fn point(points: &Matrix, i: usize) -> Vector3<f64> {
    let r = points.row(i);
    Vector3::new(r[0], r[1], r[2])
}

pub fn points_from_vectors(pts: &[Vector3<f64>]) -> Matrix {
    let data = pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Matrix::from_vec(pts.len(), 3, data).expect("3 values per point")
}

pub fn project(points: &Matrix, pose: &RigidPose, k: &CameraIntrinsics) -> Projection {
    let n = points.rows();
    let mut coords = Matrix::filled(n, 2, f64::NAN);
    let mut depth = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for i in 0..n {
        let q = pose.transform(&point(points, i));
        depth.push(q.z);
        match k.project_camera(&q) {
            Some(uv) => {
                coords.set(i, 0, uv[0]);
                coords.set(i, 1, uv[1]);
                valid.push(true);
            }
            None => valid.push(false),
        }
    }
    Projection {
        coords,
        depth,
        valid,
    }
}

pub fn transform_points(points: &Matrix, pose: &RigidPose) -> Matrix {
    let pts: Vec<Vector3<f64>> = (0..points.rows())
        .map(|i| pose.transform(&point(points, i)))
        .collect();
    points_from_vectors(&pts)
}

/// Random rigid perturbation applied to the point cloud during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }
}

/// Rotation about z by an angle drawn from `[-rot_range, rot_range]` and an
/// x-y translation drawn per axis from `[-trans_range, trans_range]`.
pub fn sample_augmentation<R: Rng + ?Sized>(
    rng: &mut R,
    rot_range: f64,
    trans_range: f64,
) -> Result<Augmentation> {
    if !(rot_range >= 0.0 && trans_range >= 0.0) {
        return Err(Error::Parameter(format!(
            "augmentation ranges must be non-negative, got {rot_range} rad and {trans_range} m"
        )));
    }
    let mut uniform = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let angle = uniform(rot_range);
    let tx = uniform(trans_range);
    let ty = uniform(trans_range);
    Ok(Augmentation {
        rotation: rotation_z(angle),
        translation: Vector3::new(tx, ty, 0.0),
    })
}

/// `p' = R_r (p + t_r)`.
pub fn apply_augmentation(points: &Matrix, aug: &Augmentation) -> Matrix {
    let pts: Vec<Vector3<f64>> = (0..points.rows())
        .map(|i| aug.rotation * (point(points, i) + aug.translation))
        .collect();
    points_from_vectors(&pts)
}

/// Ground-truth pose for augmented points: `t = t_raw - R_raw t_r`,
/// `R = R_raw R_r⁻¹`.
pub fn recompute_gt_pose(raw: &RigidPose, aug: &Augmentation) -> RigidPose {
    RigidPose {
        rotation: raw.rotation * aug.rotation.transpose(),
        translation: raw.translation - raw.rotation * aug.translation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidPose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(-PI..PI);
        RigidPose::new(
            rotation_from_axis_angle(&axis, angle).unwrap(),
            Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ),
        )
    }

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn axis_angle_examples() {
        let r = rotation_from_axis_angle(&Vector3::z(), 0.0).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r = rotation_from_axis_angle(&Vector3::z(), PI / 2.0).unwrap();
        let p = r * Vector3::x();
        assert!((p - Vector3::y()).amax() < 1e-15);
        assert!(matches!(
            rotation_from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.3),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            assert!((p.rotation * p.rotation.transpose() - Matrix3::identity()).amax() < 1e-12);
            assert!(p.is_valid());
        }
    }

    #[test]
    fn compose_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            assert_eq!(RigidPose::identity().compose(&a), a);
            let id = a.compose(&a.inverse());
            assert!((id.rotation - Matrix3::identity()).amax() < 1e-10);
            assert!(id.translation.amax() < 1e-10);
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!((l.rotation - r.rotation).amax() < 1e-10);
            assert!((l.translation - r.translation).amax() < 1e-10);
        }
    }

    #[test]
    fn projection_examples() {
        let pts = Matrix::from_rows(&[[0.0, 0.0, 5.0], [1.0, 0.0, 5.0], [0.0, 0.0, -5.0]]);
        let proj = project(&pts, &RigidPose::identity(), &k100());
        assert_eq!(proj.coord(0), [50.0, 50.0]);
        assert_eq!(proj.depth[0], 5.0);
        assert_eq!(proj.coord(1), [70.0, 50.0]);
        assert_eq!(proj.valid, vec![true, true, false]);
        assert!(proj.coords.get(2, 0).is_nan());
    }

    #[test]
    fn unproject_then_project_round_trips() {
        let k = CameraIntrinsics::new(120.0, 95.0, 31.5, 22.0, 64, 48).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let uv = [rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0)];
            let d = rng.gen_range(0.5..50.0);
            let back = k.project_camera(&k.unproject(uv, d)).unwrap();
            assert!((back[0] - uv[0]).abs() < 1e-9 && (back[1] - uv[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_is_equivariant_under_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = k100();
        for _ in 0..100 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let pts = Matrix::from_rows(&[[
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ]]);
            let direct = project(&pts, &a.compose(&b), &k);
            let staged = project(&transform_points(&pts, &b), &a, &k);
            if direct.valid[0] && staged.valid[0] && direct.depth[0] > 0.1 {
                let (p, q) = (direct.coord(0), staged.coord(0));
                assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn augmentation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aug = sample_augmentation(&mut rng, 0.0, 0.0).unwrap();
        assert_eq!(aug, Augmentation::identity());
        let pts = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        assert_eq!(apply_augmentation(&pts, &aug), pts);

        let shift = Augmentation {
            rotation: Matrix3::identity(),
            translation: Vector3::new(0.5, -1.0, 0.0),
        };
        assert_eq!(
            apply_augmentation(&pts, &shift),
            Matrix::from_rows(&[[1.5, 1.0, 3.0]])
        );
        assert!(sample_augmentation(&mut rng, -1.0, 0.0).is_err());
    }

    #[test]
    fn augmentation_angles_stay_in_range_and_center_on_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let aug = sample_augmentation(&mut rng, PI, 15.0).unwrap();
            let angle = aug.rotation[(1, 0)].atan2(aug.rotation[(0, 0)]);
            assert!((-PI..=PI).contains(&angle));
            assert!(aug.translation.x.abs() <= 15.0 && aug.translation.y.abs() <= 15.0);
            assert_eq!(aug.translation.z, 0.0);
            sum += angle;
        }
        // σ of U[-π, π] is π/√3; the sample mean has σ/√n.
        let sigma_mean = PI / 3f64.sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64).abs() < 3.0 * sigma_mean);
    }

    #[test]
    fn gt_recomputation_trivial_cases() {
        let raw = RigidPose::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0));
        let aug = Augmentation {
            rotation: Matrix3::identity(),
            translation: Vector3::new(0.5, 0.5, 0.0),
        };
        let gt = recompute_gt_pose(&raw, &aug);
        assert_eq!(gt.rotation, Matrix3::identity());
        assert_eq!(gt.translation, Vector3::new(0.5, 1.5, 3.0));
        assert_eq!(recompute_gt_pose(&raw, &Augmentation::identity()), raw);
    }

    #[test]
    fn so3_projection_recovers_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let r = random_pose(&mut rng).rotation;
            let noisy = r + Matrix3::from_fn(|_, _| rng.gen_range(-1e-3..1e-3));
            let p = project_to_so3(&noisy);
            assert!(is_rotation(&p, 1e-12));
            assert!((p - r).amax() < 1e-2);
            assert!((rotation_angle(&(r.transpose() * r))).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn augmentation_consistency(
            seed in 0u64..u64::MAX,
            px in -20.0f64..20.0, py in -20.0f64..20.0, pz in -20.0f64..20.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = random_pose(&mut rng);
            let aug = sample_augmentation(&mut rng, PI, 15.0).unwrap();
            let pts = Matrix::from_rows(&[[px, py, pz]]);
            let k = k100();
            let before = project(&pts, &raw, &k);
            let after = project(&apply_augmentation(&pts, &aug), &recompute_gt_pose(&raw, &aug), &k);
            if before.valid[0] && before.depth[0] > 1e-3 {
                prop_assert!(after.valid[0]);
                let (a, b) = (before.coord(0), after.coord(0));
                prop_assert!((a[0] - b[0]).abs() < 1e-9 * (1.0 + a[0].abs()));
                prop_assert!((a[1] - b[1]).abs() < 1e-9 * (1.0 + a[1].abs()));
            }
        }
    }
}
