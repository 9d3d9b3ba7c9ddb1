//! Camera model, rigid transforms, ground plane and pixel-mask warping.
//!
//! Camera frames are right-handed with x to the right, y up and z along the
//! optical axis. Pixel `(row, col)` has its center at image coordinates
//! `(u, v) = (col, row)`, so `u = cx + fx * x / z` and `v = cy - fy * y / z`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rle::RleMask;

pub type Vec3 = Vector3<f64>;

/// Points closer than this to the image plane are not projected.
const MIN_PROJECT_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Image coordinates `(u, v)` of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > MIN_PROJECT_DEPTH)
            .then(|| (self.cx + self.fx * p.x / p.z, self.cy - self.fy * p.y / p.z))
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) * depth / self.fx,
            -(v - self.cy) * depth / self.fy,
            depth,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if orth > 1e-6 || (det - 1.0).abs() > 1e-6 || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal (error {orth:e}, det {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_row_major(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Self> {
        Self::new(
            Matrix3::from_row_slice(rotation),
            Vec3::from_column_slice(translation),
        )
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about the vertical (y) axis.
    pub fn yaw(angle: f64, translation: Vec3) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            translation,
        }
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Plane `{x : n·x + d = 0}` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub normal: Vec3,
    pub offset: f64,
}

impl GroundPlane {
    /// Normalizes and orients the plane so the origin (the camera center in
    /// its own frame) has non-negative signed distance.
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let norm = normal.norm();
        if !(norm > 1e-12) || !norm.is_finite() || !offset.is_finite() {
            return Err(Error::NoPlane(format!("degenerate plane normal {normal:?}")));
        }
        let (mut n, mut d) = (normal / norm, offset / norm);
        if d < 0.0 {
            n = -n;
            d = -d;
        }
        Ok(Self {
            normal: n,
            offset: d,
        })
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    /// Re-expresses the plane after mapping points through `t`. Orientation
    /// is preserved, so signed distances are unchanged.
    pub fn transformed(&self, t: &RigidTransform) -> GroundPlane {
        let normal = t.rotation * self.normal;
        GroundPlane {
            normal,
            offset: self.offset - normal.dot(&t.translation),
        }
    }
}

pub fn project_to_ground(p: &Vec3, plane: &GroundPlane) -> Vec3 {
    p - plane.signed_distance(p) * plane.normal
}

/// RANSAC plane fit over sampled point triples, refit by least squares on the
/// inliers of the best sample.
pub fn fit_ground_plane(
    points: &[Vec3],
    iterations: usize,
    inlier_threshold: f64,
    seed: u64,
) -> Result<GroundPlane> {
    if points.len() < 3 {
        return Err(Error::NoPlane(format!("need at least 3 points, got {}", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, GroundPlane)> = None;
    for _ in 0..iterations.max(1) {
        let i = rng.random_range(0..points.len());
        let j = rng.random_range(0..points.len());
        let k = rng.random_range(0..points.len());
        if i == j || j == k || i == k {
            continue;
        }
        let n = (points[j] - points[i]).cross(&(points[k] - points[i]));
        if n.norm() < 1e-9 {
            continue;
        }
        let Ok(plane) = GroundPlane::new(n, -n.dot(&points[i])) else {
            continue;
        };
        let inliers = points
            .iter()
            .filter(|p| plane.signed_distance(p).abs() < inlier_threshold)
            .count();
        if best.as_ref().is_none_or(|(b, _)| inliers > *b) {
            best = Some((inliers, plane));
        }
    }
    let Some((_, sample_plane)) = best else {
        return Err(Error::NoPlane("all RANSAC samples were degenerate".into()));
    };
    let inliers: Vec<&Vec3> = points
        .iter()
        .filter(|p| sample_plane.signed_distance(p).abs() < inlier_threshold)
        .collect();
    if inliers.len() < 3 {
        return Ok(sample_plane);
    }
    let centroid = inliers.iter().fold(Vec3::zeros(), |acc, p| acc + *p) / inliers.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &inliers {
        let d = *p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let min_idx = eig.eigenvalues.imin();
    let mut normal: Vec3 = eig.eigenvectors.column(min_idx).into_owned();
    if normal.dot(&sample_plane.normal) < 0.0 {
        normal = -normal;
    }
    GroundPlane::new(normal, -normal.dot(&centroid))
}

/// Per-pixel metric depth. Non-finite or non-positive values are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: u32,
    width: u32,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: u32, width: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != height as usize * width as usize {
            return Err(Error::InvalidInput(format!(
                "depth map has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: u32, col: u32) -> Option<f64> {
        let z = self.data[row as usize * self.width as usize + col as usize];
        (z.is_finite() && z > 0.0).then_some(z as f64)
    }

    fn check_mask(&self, mask: &RleMask) -> Result<()> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::DimensionMismatch {
                left_h: mask.height(),
                left_w: mask.width(),
                right_h: self.height,
                right_w: self.width,
            });
        }
        Ok(())
    }

    /// Camera-frame points for every valid pixel, visiting every `stride`-th
    /// row and column.
    pub fn point_cloud(&self, intr: &CameraIntrinsics, stride: u32) -> Vec<Vec3> {
        let stride = stride.max(1);
        let mut out = Vec::new();
        for r in (0..self.height).step_by(stride as usize) {
            for c in (0..self.width).step_by(stride as usize) {
                if let Some(z) = self.get(r, c) {
                    out.push(intr.unproject(c as f64, r as f64, z));
                }
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (height, width, payload) = read_binary_header(path, &bytes, "DEPTH")?;
        let n = height as usize * width as usize;
        if payload.len() != n * 4 {
            return Err(Error::parse(path, 1, format!("expected {} payload bytes", n * 4)));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(height, width, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = format!("DEPTH {} {}\n", self.height, self.width).into_bytes();
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_bytes(path, &buf)
    }
}

/// Per-pixel planar world-frame motion `(dx, dz)` in meters per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: u32,
    width: u32,
    data: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(height: u32, width: u32, data: Vec<[f32; 2]>) -> Result<Self> {
        if data.len() != height as usize * width as usize {
            return Err(Error::InvalidInput(format!(
                "flow field has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, row: u32, col: u32) -> Option<[f64; 2]> {
        let [x, z] = self.data[row as usize * self.width as usize + col as usize];
        (x.is_finite() && z.is_finite()).then_some([x as f64, z as f64])
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (height, width, payload) = read_binary_header(path, &bytes, "FLOW")?;
        let n = height as usize * width as usize;
        if payload.len() != n * 8 {
            return Err(Error::parse(path, 1, format!("expected {} payload bytes", n * 8)));
        }
        let data = payload
            .chunks_exact(8)
            .map(|b| {
                [
                    f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                    f32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                ]
            })
            .collect();
        Self::new(height, width, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = format!("FLOW {} {}\n", self.height, self.width).into_bytes();
        for [x, z] in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
            buf.extend_from_slice(&z.to_le_bytes());
        }
        write_bytes(path, &buf)
    }
}

fn read_binary_header<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(u32, u32, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, 1, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::parse(path, 1, e))?;
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::parse(path, 1, format!("expected '{magic} <h> <w>' header")));
    }
    let mut dim = || -> Result<u32> {
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, 1, "bad dimensions in header"))
    };
    let (h, w) = (dim()?, dim()?);
    Ok((h, w, &bytes[nl + 1..]))
}

fn write_bytes(path: &Path, buf: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf).map_err(|e| Error::io(path, e))
}

/// Lifts every mask pixel with valid depth to a camera-frame point.
pub fn lift_mask(mask: &RleMask, depth: &DepthMap, intr: &CameraIntrinsics) -> Result<Vec<Vec3>> {
    depth.check_mask(mask)?;
    Ok(mask
        .pixels()
        .filter_map(|(r, c)| depth.get(r, c).map(|z| intr.unproject(c as f64, r as f64, z)))
        .collect())
}

/// Result of warping a mask through 3D.
#[derive(Debug, Clone)]
pub struct WarpedMask {
    pub mask: RleMask,
    /// Mask pixels that had valid depth and were lifted.
    pub lifted: usize,
}

/// Lifts `mask` with `depth`, maps the points through `transform`, and
/// splats each onto its nearest pixel. Points behind the camera or outside
/// the image are dropped; no hole filling is done.
pub fn warp_mask(
    mask: &RleMask,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    transform: &RigidTransform,
) -> Result<WarpedMask> {
    depth.check_mask(mask)?;
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let mut lifted = 0usize;
    let mut indices: Vec<usize> = Vec::with_capacity(mask.area() as usize);
    for (r, c) in mask.pixels() {
        let Some(z) = depth.get(r, c) else { continue };
        lifted += 1;
        let p = transform.apply(&intr.unproject(c as f64, r as f64, z));
        let Some((u, v)) = intr.project(&p) else { continue };
        let (col, row) = (u.round(), v.round());
        if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
            continue;
        }
        indices.push(row as usize * w as usize + col as usize);
    }
    indices.sort_unstable();
    indices.dedup();
    Ok(WarpedMask {
        mask: RleMask::from_sorted_indices(h as u32, w as u32, indices),
        lifted,
    })
}

/// Transform applied to mask points for one frame of prediction: the planar
/// velocity translation (vertical component zero) followed by ego-motion.
pub fn prediction_transform(t_ego: &RigidTransform, velocity: [f64; 2]) -> RigidTransform {
    t_ego.compose(&RigidTransform::from_translation(Vec3::new(
        velocity[0],
        0.0,
        velocity[1],
    )))
}

/// Predicts where `m_star` appears one frame later. `velocity` is the planar
/// `(vx, vz)` displacement per frame expressed in the axes of the camera frame
/// in which `m_star` was observed.
pub fn predict_mask(
    m_star: &RleMask,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    t_ego: &RigidTransform,
    velocity: [f64; 2],
) -> Result<RleMask> {
    Ok(warp_mask(m_star, depth, intr, &prediction_transform(t_ego, velocity))?.mask)
}
