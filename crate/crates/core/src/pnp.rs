//! Differentiable pose estimation from 3D–2D correspondences.
//!
//! [`epnp_init`] gives a closed-form starting pose from plain values. The
//! unrolled Gauss-Newton refinement then runs on the tape, so gradients reach
//! the 2D targets through every step's linear solve and update.

use nalgebra::{DMatrix, Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};

use crate::autodiff::{Matrix, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{point, project_to_so3, CameraIntrinsics, RigidPose, DEPTH_EPS};

pub const MIN_CORRESPONDENCES: usize = 6;
pub const GN_DAMPING: f64 = 1e-6;
pub const DEFAULT_GN_ITERS: usize = 5;

/// Smallest accepted ratio between the shortest and longest principal axis
/// of the point set.
const MIN_SPREAD_RATIO: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    /// RMS reprojection error in pixels.
    pub residual: f64,
    pub iterations: usize,
}

/// Tape handles of a refined pose: 3×3 rotation and 3×1 translation.
#[derive(Clone, Copy, Debug)]
pub struct PoseTensors {
    pub rotation: Tensor,
    pub translation: Tensor,
}

fn check_problem(points: &Matrix, targets: (usize, usize)) -> Result<()> {
    if points.cols() != 3 || targets.1 != 2 || points.rows() != targets.0 {
        return Err(Error::Dimension(format!(
            "PnP needs N×3 points and N×2 targets, got {:?} and {:?}",
            points.shape(),
            targets
        )));
    }
    if points.rows() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences {
            required: MIN_CORRESPONDENCES,
            actual: points.rows(),
        });
    }
    Ok(())
}

/// Control points and barycentric coordinates of EPnP.
struct ControlFrame {
    controls: [Vector3<f64>; 4],
    alphas: Vec<Vector4<f64>>,
}

fn control_frame(points: &Matrix) -> Result<ControlFrame> {
    let n = points.rows();
    let pts: Vec<Vector3<f64>> = (0..n).map(|i| point(points, i)).collect();
    let c0 = pts.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - c0;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !(min / max).sqrt().gt(&MIN_SPREAD_RATIO) {
        return Err(Error::Conditioning(format!(
            "point spread too flat for EPnP (principal variances {min:.3e} / {max:.3e})"
        )));
    }
    let mut controls = [c0; 4];
    for k in 0..3 {
        let axis = eig.eigenvectors.column(k).into_owned();
        controls[k + 1] = c0 + axis * eig.eigenvalues[k].sqrt();
    }
    let mut c = Matrix4::zeros();
    for (j, cj) in controls.iter().enumerate() {
        c.fixed_view_mut::<3, 1>(0, j).copy_from(cj);
        c[(3, j)] = 1.0;
    }
    let lu = c.lu();
    let alphas = pts
        .iter()
        .map(|p| {
            lu.solve(&Vector4::new(p.x, p.y, p.z, 1.0))
                .ok_or_else(|| Error::Conditioning("control points are singular".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ControlFrame { controls, alphas })
}

/// Closed-form EPnP pose (single-β case), re-orthonormalized.
pub fn epnp_init(points: &Matrix, targets: &Matrix, k: &CameraIntrinsics) -> Result<RigidPose> {
    check_problem(points, targets.shape())?;
    let n = points.rows();
    let frame = control_frame(points)?;

    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for i in 0..n {
        let x = (targets.get(i, 0) - k.cx) / k.fx;
        let y = (targets.get(i, 1) - k.cy) / k.fy;
        for j in 0..4 {
            let a = frame.alphas[i][j];
            m[(2 * i, 3 * j)] = a;
            m[(2 * i, 3 * j + 2)] = -a * x;
            m[(2 * i + 1, 3 * j + 1)] = a;
            m[(2 * i + 1, 3 * j + 2)] = -a * y;
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let kmin = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(kmin);
    let vc: Vec<Vector3<f64>> = (0..4)
        .map(|j| Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]))
        .collect();

    let (mut num, mut den) = (0.0, 0.0);
    for a in 0..4 {
        for b in a + 1..4 {
            let dw = (frame.controls[a] - frame.controls[b]).norm();
            let dc = (vc[a] - vc[b]).norm();
            num += dw * dc;
            den += dc * dc;
        }
    }
    if !(den > 0.0) {
        return Err(Error::Conditioning("null-space vector collapses control points".into()));
    }
    let mut beta = num / den;
    let camera = |beta: f64| -> Vec<Vector3<f64>> {
        frame
            .alphas
            .iter()
            .map(|al| (0..4).map(|j| vc[j] * (al[j] * beta)).sum())
            .collect()
    };
    let mut cam = camera(beta);
    let mut depths: Vec<f64> = cam.iter().map(|p| p.z).collect();
    depths.sort_by(f64::total_cmp);
    if depths[n / 2] < 0.0 {
        beta = -beta;
        cam = camera(beta);
    }
    let world: Vec<Vector3<f64>> = (0..n).map(|i| point(points, i)).collect();
    absolute_orientation(&world, &cam)
}

/// Rigid transform minimizing `Σ‖R a_i + t − b_i‖²` (no scale).
pub fn absolute_orientation(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<RigidPose> {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (q - cb) * (p - ca).transpose();
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::Solver("non-finite cross-covariance".into()));
    }
    let r = project_to_so3(&h);
    Ok(RigidPose::new(r, cb - r * ca))
}

/// Projects `points` through the pose tensors. Returns (N×1 u, N×1 v,
/// camera-frame N×3 values).
fn project_on_tape(
    tape: &mut Tape,
    pts: Tensor,
    pose: PoseTensors,
    k: &CameraIntrinsics,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let rt = tape.transpose(pose.rotation);
    let rotated = tape.matmul(pts, rt)?;
    let tt = tape.transpose(pose.translation);
    let tt = tape.repeat_rows(tt, pts.rows())?;
    let q = tape.add(rotated, tt)?;
    let z = tape.slice_cols(q, 2, 3)?;
    if let Some(i) = tape.value(z).data().iter().position(|&d| !(d > DEPTH_EPS)) {
        return Err(Error::Solver(format!("point {i} left the camera's front half-space")));
    }
    let xq = tape.slice_cols(q, 0, 1)?;
    let yq = tape.slice_cols(q, 1, 2)?;
    let x = tape.div(xq, z)?;
    let y = tape.div(yq, z)?;
    let u = tape.scale(x, k.fx);
    let u = tape.offset(u, k.cx);
    let v = tape.scale(y, k.fy);
    let v = tape.offset(v, k.cy);
    Ok((u, v, x, y, z))
}

fn residual_rms(tape: &Tape, ru: Tensor, rv: Tensor) -> f64 {
    let ss: f64 = tape
        .value(ru)
        .data()
        .iter()
        .chain(tape.value(rv).data())
        .map(|r| r * r)
        .sum();
    (ss / ru.len() as f64).sqrt()
}

/// Reprojection residuals `π(R p + t) − target` split into u and v columns.
fn residuals(
    tape: &mut Tape,
    pts: Tensor,
    targets: Tensor,
    pose: PoseTensors,
    k: &CameraIntrinsics,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let (u, v, x, y, z) = project_on_tape(tape, pts, pose, k)?;
    let tu = tape.slice_cols(targets, 0, 1)?;
    let tv = tape.slice_cols(targets, 1, 2)?;
    let ru = tape.sub(u, tu)?;
    let rv = tape.sub(v, tv)?;
    Ok((ru, rv, x, y, z))
}

/// One damped Gauss-Newton step with a left-composed SE(3) update.
fn gn_step(
    tape: &mut Tape,
    pts: Tensor,
    targets: Tensor,
    pose: PoseTensors,
    k: &CameraIntrinsics,
    sqrt_w: Option<Tensor>,
) -> Result<PoseTensors> {
    let n = pts.rows();
    let (mut ru, mut rv, x, y, z) = residuals(tape, pts, targets, pose, k)?;
    let xy = tape.mul(x, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let inv_z = {
        let one = tape.constant(Matrix::filled(n, 1, 1.0));
        tape.div(one, z)?
    };
    let x_over_z = tape.mul(x, inv_z)?;
    let y_over_z = tape.mul(y, inv_z)?;
    let zero = tape.constant(Matrix::zeros(n, 1));

    let neg_xy = tape.neg(xy);
    let one_xx = tape.offset(xx, 1.0);
    let neg_y = tape.neg(y);
    let neg_xz = tape.neg(x_over_z);
    let mut ju = tape.concat_cols(&[neg_xy, one_xx, neg_y, inv_z, zero, neg_xz])?;
    ju = tape.scale(ju, k.fx);

    let neg_one_yy = {
        let t = tape.offset(yy, 1.0);
        tape.neg(t)
    };
    let neg_yz = tape.neg(y_over_z);
    let mut jv = tape.concat_cols(&[neg_one_yy, xy, x, zero, inv_z, neg_yz])?;
    jv = tape.scale(jv, k.fy);

    if let Some(w) = sqrt_w {
        let w6 = tape.repeat_cols(w, 6)?;
        ju = tape.mul(ju, w6)?;
        jv = tape.mul(jv, w6)?;
        ru = tape.mul(ru, w)?;
        rv = tape.mul(rv, w)?;
    }

    let j = tape.concat_rows(&[ju, jv])?;
    let r = tape.concat_rows(&[ru, rv])?;
    let jt = tape.transpose(j);
    let jtj = tape.matmul(jt, j)?;
    let damp = tape.constant(Matrix::identity(6).scale(GN_DAMPING));
    let a = tape.add(jtj, damp)?;
    let g = tape.matmul(jt, r)?;
    let step = tape.solve(a, g)?;
    let delta = tape.neg(step);

    let dw = tape.slice_rows(delta, 0, 3)?;
    let dt = tape.slice_rows(delta, 3, 6)?;
    let e = tape.so3_exp(dw)?;
    let rotation = tape.matmul(e, pose.rotation)?;
    let et = tape.matmul(e, pose.translation)?;
    let translation = tape.add(et, dt)?;
    if !tape.value(rotation).is_finite() || !tape.value(translation).is_finite() {
        return Err(Error::Solver("Gauss-Newton update is not finite".into()));
    }
    Ok(PoseTensors {
        rotation,
        translation,
    })
}

fn pose_from_tensors(tape: &Tape, p: PoseTensors) -> RigidPose {
    let r = tape.value(p.rotation).data();
    let t = tape.value(p.translation).data();
    let r = Matrix3::from_row_slice(r);
    RigidPose::new(project_to_so3(&r), Vector3::new(t[0], t[1], t[2]))
}

/// Options of the refinement stage.
#[derive(Clone, Copy, Debug)]
pub struct RefineOptions {
    pub iters: usize,
    /// Optional N×1 per-correspondence weights (e.g. overlap scores).
    pub weights: Option<Tensor>,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            iters: DEFAULT_GN_ITERS,
            weights: None,
        }
    }
}

/// Runs `opts.iters` unrolled Gauss-Newton steps from `init` on the tape.
pub fn gauss_newton_refine(
    tape: &mut Tape,
    points: &Matrix,
    targets: Tensor,
    k: &CameraIntrinsics,
    init: &RigidPose,
    opts: RefineOptions,
) -> Result<(PoseTensors, PoseEstimate)> {
    check_problem(points, targets.shape())?;
    if opts.iters == 0 {
        return Err(Error::Parameter("Gauss-Newton needs at least one iteration".into()));
    }
    let sqrt_w = match opts.weights {
        Some(w) => {
            if w.shape() != (points.rows(), 1) {
                return Err(Error::Dimension("PnP weights must be N×1".into()));
            }
            Some(tape.sqrt(w)?)
        }
        None => None,
    };
    let pts = tape.constant(points.clone());
    let a = init.to_array();
    let mut pose = PoseTensors {
        rotation: tape.constant(Matrix::from_vec(3, 3, a[..9].to_vec())?),
        translation: tape.constant(Matrix::from_vec(3, 1, a[9..].to_vec())?),
    };
    for _ in 0..opts.iters {
        pose = gn_step(tape, pts, targets, pose, k, sqrt_w)?;
    }
    let (ru, rv, _, _, _) = residuals(tape, pts, targets, pose, k)?;
    let estimate = PoseEstimate {
        pose: pose_from_tensors(tape, pose),
        residual: residual_rms(tape, ru, rv),
        iterations: opts.iters,
    };
    Ok((pose, estimate))
}

/// EPnP on the detached target values, then unrolled refinement.
pub fn solve_pose(
    tape: &mut Tape,
    points: &Matrix,
    targets: Tensor,
    k: &CameraIntrinsics,
    opts: RefineOptions,
) -> Result<(PoseTensors, PoseEstimate)> {
    let init = epnp_init(points, tape.value(targets), k)?;
    gauss_newton_refine(tape, points, targets, k, &init, opts)
}

/// [`solve_pose`] on plain values.
pub fn solve_pose_values(
    points: &Matrix,
    targets: &Matrix,
    k: &CameraIntrinsics,
    iters: usize,
) -> Result<PoseEstimate> {
    let mut tape = Tape::new();
    let t = tape.constant(targets.clone());
    let opts = RefineOptions {
        iters,
        weights: None,
    };
    Ok(solve_pose(&mut tape, points, t, k, opts)?.1)
}

/// `huber(R_gtᵀ R̂ − I) + huber(t_gt − t̂)`.
pub fn pose_loss(tape: &mut Tape, est: PoseTensors, gt: &RigidPose, delta: f64) -> Result<Tensor> {
    let a = gt.to_array();
    let rgt_t = tape.constant(Matrix::from_vec(3, 3, a[..9].to_vec())?.transpose());
    let eye = tape.constant(Matrix::identity(3));
    let rel = tape.matmul(rgt_t, est.rotation)?;
    let rd = tape.sub(rel, eye)?;
    let lr = tape.huber(rd, delta)?;
    let tgt = tape.constant(Matrix::from_vec(3, 1, a[9..].to_vec())?);
    let td = tape.sub(tgt, est.translation)?;
    let lt = tape.huber(td, delta)?;
    tape.add(lr, lt)
}
