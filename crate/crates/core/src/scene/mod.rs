//! Synthetic LiDAR/camera scenes with exact overlap and correspondence labels.
//!
//! A scene is generated in the camera frame (so the in-frustum fraction is
//! controlled exactly) and then moved into the LiDAR frame through the inverse
//! of a random raw extrinsic pose. All labels are recomputed from the LiDAR
//! frame by projection, never copied from the construction step.

mod format;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::geometry::{self, CameraIntrinsics, RigidPose};
use crate::error::{Error, Result};

pub use format::{
    decode_scene, encode_scene, load_dataset, read_manifest, read_scene, scene_file_name, write_dataset, write_scene,
    DatasetManifest, ManifestEntry, SCENE_FORMAT_VERSION, SCENE_MAGIC,
};

/// Minimum number of overlapping points a generated scene must contain.
pub const MIN_OVERLAP_POINTS: usize = 6;

const MAX_RETRIES: usize = 100;

/// Chebyshev radius (pixels) used for pixel-level overlap labels.
pub const PIXEL_OVERLAP_RADIUS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_points: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Focal length in feature-grid pixels (fx = fy).
    pub focal: f64,
    /// Maximum rotation angle (radians) of the raw extrinsic pose.
    pub pose_rot_spread: f64,
    /// Per-axis translation bound (meters) of the raw extrinsic pose.
    pub pose_trans_spread: f64,
    /// Band for the fraction of points constructed inside the frustum.
    pub in_frustum_min: f64,
    pub in_frustum_max: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub n_planes: usize,
    /// Share of in-frustum points placed on planar patches; the rest is box noise.
    pub plane_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_points: 256,
            grid_height: 16,
            grid_width: 16,
            focal: 16.0,
            pose_rot_spread: 0.05,
            pose_trans_spread: 0.1,
            in_frustum_min: 0.6,
            in_frustum_max: 0.9,
            depth_min: 3.0,
            depth_max: 10.0,
            n_planes: 3,
            plane_fraction: 0.7,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.grid_width as f64 - 1.0) / 2.0,
            (self.grid_height as f64 - 1.0) / 2.0,
            self.grid_width,
            self.grid_height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 8 {
            return Err(Error::Parameter(format!(
                "scenes need at least 8 points, got {}",
                self.n_points
            )));
        }
        if self.grid_height < 4 || self.grid_width < 4 {
            return Err(Error::Parameter(format!(
                "feature grid must be at least 4x4, got {}x{}",
                self.grid_height, self.grid_width
            )));
        }
        let band_ok = 0.0 <= self.in_frustum_min
            && self.in_frustum_min <= self.in_frustum_max
            && self.in_frustum_max <= 1.0;
        if !band_ok {
            return Err(Error::Parameter(format!(
                "in-frustum band [{}, {}] is not inside [0, 1]",
                self.in_frustum_min, self.in_frustum_max
            )));
        }
        if !(self.depth_min > geometry::DEPTH_EPS && self.depth_min < self.depth_max) {
            return Err(Error::Parameter(format!(
                "depth range [{}, {}] is invalid",
                self.depth_min, self.depth_max
            )));
        }
        if !(self.pose_rot_spread >= 0.0 && self.pose_trans_spread >= 0.0) {
            return Err(Error::Parameter("pose spreads must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.plane_fraction) {
            return Err(Error::Parameter("plane_fraction must lie in [0, 1]".into()));
        }
        self.intrinsics().map(|_| ())
    }
}

/// One synthetic (point cloud, image grid, intrinsics, raw pose) tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// N×3, meters, LiDAR frame.
    pub points: Matrix,
    /// Intrinsics at feature-grid resolution; `width`/`height` are W' and H'.
    pub intrinsics: CameraIntrinsics,
    pub raw_pose: RigidPose,
    pub point_overlap: Vec<bool>,
    /// Row-major over the H'×W' grid.
    pub pixel_overlap: Vec<bool>,
    /// N×2 projections under `raw_pose`; NaN for non-overlapping points.
    pub gt_projection: Matrix,
}

impl SceneSample {
    /// Builds a sample and computes every label by projection.
    pub fn from_points(points: Matrix, intrinsics: CameraIntrinsics, raw_pose: RigidPose) -> Self {
        let proj = geometry::project(&points, &raw_pose, &intrinsics);
        let n = points.rows();
        let mut point_overlap = vec![false; n];
        let mut gt_projection = Matrix::filled(n, 2, f64::NAN);
        for i in 0..n {
            let uv = proj.coord(i);
            if proj.valid[i] && intrinsics.in_grid(uv) {
                point_overlap[i] = true;
                gt_projection.set(i, 0, uv[0]);
                gt_projection.set(i, 1, uv[1]);
            }
        }
        let mut sample = SceneSample {
            points,
            intrinsics,
            raw_pose,
            point_overlap,
            pixel_overlap: Vec::new(),
            gt_projection,
        };
        sample.pixel_overlap = label_pixel_overlap(&sample);
        sample
    }

    pub fn num_points(&self) -> usize {
        self.points.rows()
    }

    pub fn grid_height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn grid_width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn num_pixels(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    pub fn pixel_center(&self, j: usize) -> [f64; 2] {
        pixel_center(j, self.grid_width())
    }

    /// (H'·W')×2 matrix of pixel centers in row-major pixel order.
    pub fn pixel_centers(&self) -> Matrix {
        pixel_centers(self.grid_height(), self.grid_width())
    }

    pub fn gt_coord(&self, i: usize) -> [f64; 2] {
        [self.gt_projection.get(i, 0), self.gt_projection.get(i, 1)]
    }

    pub fn overlapping_points(&self) -> Vec<usize> {
        indices(&self.point_overlap)
    }

    pub fn overlapping_pixels(&self) -> Vec<usize> {
        indices(&self.pixel_overlap)
    }

    /// Per-pixel appearance stand-in: camera depth of the nearest overlapping
    /// projection within the pixel-overlap radius, 0 where there is none.
    pub fn pixel_texture(&self) -> Vec<f64> {
        let proj = geometry::project(&self.points, &self.raw_pose, &self.intrinsics);
        let w = self.grid_width();
        let mut best = vec![(f64::INFINITY, 0.0); self.num_pixels()];
        for i in self.overlapping_points() {
            let uv = self.gt_coord(i);
            for j in pixels_near(uv, self.grid_height(), w) {
                let c = pixel_center(j, w);
                let d2 = (c[0] - uv[0]).powi(2) + (c[1] - uv[1]).powi(2);
                if d2 < best[j].0 {
                    best[j] = (d2, proj.depth[i]);
                }
            }
        }
        best.into_iter().map(|(_, d)| d).collect()
    }
}

pub fn pixel_center(j: usize, width: usize) -> [f64; 2] {
    [(j % width) as f64, (j / width) as f64]
}

pub fn pixel_centers(height: usize, width: usize) -> Matrix {
    let data = (0..height * width)
        .flat_map(|j| pixel_center(j, width))
        .collect();
    Matrix::from_vec(height * width, 2, data).expect("two coordinates per pixel")
}

fn indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Pixels whose center lies within the Chebyshev overlap radius of `uv`.
fn pixels_near(uv: [f64; 2], height: usize, width: usize) -> impl Iterator<Item = usize> {
    let r = PIXEL_OVERLAP_RADIUS;
    let span = |x: f64, n: usize| {
        let lo = (x - r).ceil().max(0.0) as usize;
        let hi = (x + r).floor().min(n as f64 - 1.0);
        if hi < 0.0 {
            (1, 0)
        } else {
            (lo, hi as usize)
        }
    };
    let (u0, u1) = span(uv[0], width);
    let (v0, v1) = span(uv[1], height);
    (v0..=v1)
        .filter(move |_| u0 <= u1)
        .flat_map(move |v| (u0..=u1).map(move |u| v * width + u))
}

/// A pixel is overlapping iff some overlapping point's ground-truth projection
/// lies within Chebyshev distance 1 px of its center.
pub fn label_pixel_overlap(sample: &SceneSample) -> Vec<bool> {
    let (h, w) = (sample.grid_height(), sample.grid_width());
    let mut labels = vec![false; h * w];
    for i in sample.overlapping_points() {
        for j in pixels_near(sample.gt_coord(i), h, w) {
            labels[j] = true;
        }
    }
    labels
}

/// Positive and negative pixels of one overlapping point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointPairs {
    pub point: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Contrastive pairs for every overlapping point of a scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSet {
    pub anchors: Vec<PointPairs>,
    /// Overlapping points with no pixel inside the positive margin.
    pub without_positives: usize,
    /// Overlapping points with no pixel beyond the negative margin.
    pub without_negatives: usize,
}

impl PairSet {
    /// Anchors that can contribute a contrastive term.
    pub fn usable(&self) -> impl Iterator<Item = &PointPairs> {
        self.anchors
            .iter()
            .filter(|a| !a.positives.is_empty() && !a.negatives.is_empty())
    }

    /// Pixel-anchored view of the same pairs: for every pixel that is a
    /// positive of some point, the points it is positive/negative for.
    pub fn by_pixel(&self, num_pixels: usize) -> Vec<PointPairs> {
        let mut pos = vec![Vec::new(); num_pixels];
        let mut neg = vec![Vec::new(); num_pixels];
        for a in &self.anchors {
            for &j in &a.positives {
                pos[j].push(a.point);
            }
            for &j in &a.negatives {
                neg[j].push(a.point);
            }
        }
        pos.into_iter()
            .zip(neg)
            .enumerate()
            .filter(|(_, (p, _))| !p.is_empty())
            .map(|(j, (positives, negatives))| PointPairs {
                point: j,
                positives,
                negatives,
            })
            .collect()
    }
}

/// Splits pixels around each overlapping point's projection into positives
/// (distance < `r_p`) and negatives (distance > `r_n`).
pub fn build_pairs(sample: &SceneSample, r_p: f64, r_n: f64) -> Result<PairSet> {
    if !(0.0 < r_p && r_p < r_n) {
        return Err(Error::Parameter(format!(
            "pair margins need 0 < r_p < r_n, got r_p={r_p} r_n={r_n}"
        )));
    }
    let w = sample.grid_width();
    let mut set = PairSet {
        anchors: Vec::new(),
        without_positives: 0,
        without_negatives: 0,
    };
    for i in sample.overlapping_points() {
        let uv = sample.gt_coord(i);
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for j in 0..sample.num_pixels() {
            let c = pixel_center(j, w);
            let d = ((c[0] - uv[0]).powi(2) + (c[1] - uv[1]).powi(2)).sqrt();
            if d < r_p {
                positives.push(j);
            } else if d > r_n {
                negatives.push(j);
            }
        }
        set.without_positives += positives.is_empty() as usize;
        set.without_negatives += negatives.is_empty() as usize;
        set.anchors.push(PointPairs {
            point: i,
            positives,
            negatives,
        });
    }
    Ok(set)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn sample_raw_pose<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> RigidPose {
    let axis = random_unit(rng);
    let angle = if cfg.pose_rot_spread > 0.0 {
        rng.gen_range(0.0..=cfg.pose_rot_spread)
    } else {
        0.0
    };
    let rotation =
        geometry::rotation_from_axis_angle(&axis, angle).unwrap_or_else(|_| Matrix3::identity());
    let t = cfg.pose_trans_spread;
    let mut c = || if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 };
    RigidPose::new(rotation, Vector3::new(c(), c(), c()))
}

struct Plane {
    point: Vector3<f64>,
    normal: Vector3<f64>,
}

// Keeps constructed in-frustum points clear of the grid border.
const EDGE_MARGIN: f64 = 0.05;

fn sample_pixel_inside<R: Rng + ?Sized>(rng: &mut R, k: &CameraIntrinsics) -> [f64; 2] {
    [
        rng.gen_range(EDGE_MARGIN..k.width as f64 - EDGE_MARGIN),
        rng.gen_range(EDGE_MARGIN..k.height as f64 - EDGE_MARGIN),
    ]
}

fn sample_pixel_outside<R: Rng + ?Sized>(rng: &mut R, k: &CameraIntrinsics) -> [f64; 2] {
    let (w, h) = (k.width as f64, k.height as f64);
    fn side<R: Rng + ?Sized>(rng: &mut R, n: f64) -> f64 {
        if rng.gen_bool(0.5) {
            rng.gen_range(-0.6 * n..-EDGE_MARGIN)
        } else {
            rng.gen_range(n + EDGE_MARGIN..1.6 * n)
        }
    }
    if rng.gen_bool(0.5) {
        let u = side(rng, w);
        [u, rng.gen_range(-0.5 * h..1.5 * h)]
    } else {
        let v = side(rng, h);
        [rng.gen_range(-0.5 * w..1.5 * w), v]
    }
}

fn camera_frame_points<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SceneConfig,
    k: &CameraIntrinsics,
    n_in: usize,
) -> Vec<Vector3<f64>> {
    let planes: Vec<Plane> = (0..cfg.n_planes)
        .map(|_| {
            let uv = sample_pixel_inside(rng, k);
            let depth = rng.gen_range(cfg.depth_min..cfg.depth_max);
            let point = k.unproject(uv, depth);
            let tilt = random_unit(rng) * 0.5;
            let normal = (-point.normalize() + tilt).normalize();
            Plane { point, normal }
        })
        .collect();

    let mut out = Vec::with_capacity(cfg.n_points);
    for _ in 0..n_in {
        let uv = sample_pixel_inside(rng, k);
        let ray = k.unproject(uv, 1.0);
        let mut depth = None;
        if !planes.is_empty() && rng.gen_bool(cfg.plane_fraction) {
            let plane = &planes[rng.gen_range(0..planes.len())];
            let denom = plane.normal.dot(&ray);
            if denom.abs() > 1e-6 {
                let d = plane.normal.dot(&plane.point) / denom;
                if (cfg.depth_min..=cfg.depth_max).contains(&d) {
                    depth = Some(d);
                }
            }
        }
        let d = depth.unwrap_or_else(|| rng.gen_range(cfg.depth_min..cfg.depth_max));
        out.push(ray * d);
    }
    for _ in n_in..cfg.n_points {
        if rng.gen_bool(0.2) {
            // Behind the camera.
            let uv = sample_pixel_inside(rng, k);
            let d = rng.gen_range(cfg.depth_min..cfg.depth_max);
            let q = k.unproject(uv, d);
            out.push(Vector3::new(q.x, q.y, -q.z));
        } else {
            let uv = sample_pixel_outside(rng, k);
            let d = rng.gen_range(cfg.depth_min..cfg.depth_max);
            out.push(k.unproject(uv, d));
        }
    }
    out
}

/// Generates one labelled scene.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    for _ in 0..MAX_RETRIES {
        let raw_pose = sample_raw_pose(rng, cfg);
        let frac = if cfg.in_frustum_max > cfg.in_frustum_min {
            rng.gen_range(cfg.in_frustum_min..=cfg.in_frustum_max)
        } else {
            cfg.in_frustum_min
        };
        let n_in = ((frac * cfg.n_points as f64).round() as usize).min(cfg.n_points);
        let mut cam = camera_frame_points(rng, cfg, &k, n_in);
        cam.shuffle(rng);
        let to_lidar = raw_pose.inverse();
        let lidar: Vec<Vector3<f64>> = cam.iter().map(|q| to_lidar.transform(q)).collect();
        let sample = SceneSample::from_points(geometry::points_from_vectors(&lidar), k, raw_pose);
        if sample.overlapping_points().len() >= MIN_OVERLAP_POINTS {
            return Ok(sample);
        }
    }
    Err(Error::Generation(format!(
        "fewer than {MIN_OVERLAP_POINTS} in-frustum points after {MAX_RETRIES} retries"
    )))
}

/// `count` scenes, scene `i` drawn from stream `i` of a generator seeded
/// with `seed`, so the result does not depend on thread count.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<SceneSample>> {
    use rand::SeedableRng;
    use rayon::prelude::*;
    if count == 0 {
        return Err(Error::Parameter("dataset count must be positive".into()));
    }
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(&mut rng, cfg).map_err(|e| e.in_scene(i))
        })
        .collect()
}
