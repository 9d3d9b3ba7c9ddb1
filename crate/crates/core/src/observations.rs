//! Per-frame preprocessing of region proposals into tracker observations.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{
    lift_mask, CameraIntrinsics, DepthMap, FlowField, GroundPlane, RigidTransform, Vec3,
};
use crate::rle::RleMask;

/// A raw region proposal as read from a frame file.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub mask: RleMask,
    pub score: f64,
    /// Precomputed world-frame position; bypasses depth lifting when set.
    pub pos: Option<Vec3>,
    pub vel: Option<[f64; 2]>,
    pub class_scores: BTreeMap<String, f64>,
}

impl Proposal {
    pub fn new(mask: RleMask, score: f64) -> Self {
        Self {
            mask,
            score,
            pos: None,
            vel: None,
            class_scores: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Observation {
    /// World-frame median position.
    pub pos: Vec3,
    /// World-frame planar velocity `(dx, dz)` per frame.
    pub vel: [f64; 2],
    pub mask: RleMask,
    pub score: f64,
    pub class_scores: BTreeMap<String, f64>,
    /// Index of the source proposal in the frame file.
    pub source: usize,
}

impl Observation {
    /// Highest-scoring class label, ties resolved by label order.
    pub fn best_class(&self) -> Option<(&str, f64)> {
        self.class_scores
            .iter()
            .fold(None, |best: Option<(&str, f64)>, (k, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((k.as_str(), v)),
            })
    }
}

/// Everything known about one frame besides its proposals.
#[derive(Debug, Clone)]
pub struct FrameContext {
    pub frame: u32,
    /// Maps camera frame t-1 coordinates to camera frame t.
    pub ego: RigidTransform,
    /// Maps camera frame t coordinates to the world (camera frame 0).
    pub world_from_camera: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub image_size: (u32, u32),
    /// Ground plane in camera-frame coordinates.
    pub ground: Option<GroundPlane>,
    pub depth: Option<Arc<DepthMap>>,
    pub flow: Option<Arc<FlowField>>,
}

impl FrameContext {
    pub fn camera_from_world(&self) -> RigidTransform {
        self.world_from_camera.inverse()
    }

    pub fn world_ground(&self) -> Option<GroundPlane> {
        self.ground.map(|g| g.transformed(&self.world_from_camera))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationParams {
    pub nms_iou: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub max_observations: usize,
    pub min_depth_pixels: usize,
}

impl Default for ObservationParams {
    fn default() -> Self {
        Self {
            nms_iou: 0.7,
            min_height: 0.2,
            max_height: 3.0,
            max_observations: 100,
            min_depth_pixels: 10,
        }
    }
}

impl ObservationParams {
    pub fn validate(&self) -> crate::error::Result<()> {
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidInput(format!("NMS IoU {} outside [0,1]", self.nms_iou)));
        }
        if !(self.min_height <= self.max_height) {
            return Err(Error::InvalidInput("height band is empty".into()));
        }
        if self.max_observations == 0 {
            return Err(Error::InvalidInput("max_observations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    EmptyMask,
    InvalidScore { score: f64 },
    SizeMismatch,
    Suppressed,
    NoDepth,
    InsufficientDepth { valid: usize },
    HeightOutOfBand { height: f64 },
    Truncated,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::EmptyMask => write!(f, "empty mask"),
            Rejection::InvalidScore { score } => write!(f, "score {score} outside [0,1]"),
            Rejection::SizeMismatch => write!(f, "mask size differs from image size"),
            Rejection::Suppressed => write!(f, "suppressed by NMS"),
            Rejection::NoDepth => write!(f, "no depth and no precomputed position"),
            Rejection::InsufficientDepth { valid } => write!(f, "only {valid} pixels with depth"),
            Rejection::HeightOutOfBand { height } => write!(f, "height {height:.3} m out of band"),
            Rejection::Truncated => write!(f, "beyond the per-frame cap"),
        }
    }
}

/// Greedy mask NMS. Returns the indices of the survivors in descending score
/// order; ties keep input order. A candidate is suppressed when its IoU with
/// an already kept mask exceeds `iou_threshold`.
pub fn nms_proposals(items: &[(RleMask, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1).then(a.cmp(&b)));
    let boxes: Vec<_> = items.iter().map(|(m, _)| m.bbox()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let suppressed = kept.iter().any(|&k| {
            let overlaps = matches!((&boxes[k], &boxes[idx]), (Some(a), Some(b)) if a.intersects(b));
            overlaps && items[k].0.iou(&items[idx].0).unwrap_or(0.0) > iou_threshold
        });
        if !suppressed {
            kept.push(idx);
        }
    }
    kept
}

/// Median of a non-empty slice; the mean of the two middle values for even
/// lengths. Reorders the slice.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median 3D position (world frame) and planar velocity of a mask.
pub fn extract_pos_vel(
    mask: &RleMask,
    ctx: &FrameContext,
    min_depth_pixels: usize,
) -> Result<(Vec3, [f64; 2]), Rejection> {
    let depth = ctx.depth.as_ref().ok_or(Rejection::NoDepth)?;
    let points = lift_mask(mask, depth, &ctx.intrinsics).map_err(|_| Rejection::SizeMismatch)?;
    if points.len() < min_depth_pixels.max(1) {
        return Err(Rejection::InsufficientDepth {
            valid: points.len(),
        });
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    let mut zs: Vec<f64> = points.iter().map(|p| p.z).collect();
    let cam = Vec3::new(median(&mut xs), median(&mut ys), median(&mut zs));
    let pos = ctx.world_from_camera.apply(&cam);

    let mut vel = [0.0, 0.0];
    if let Some(flow) = ctx.flow.as_ref().filter(|f| f.height() == mask.height() && f.width() == mask.width()) {
        let (mut dx, mut dz): (Vec<f64>, Vec<f64>) =
            mask.pixels().filter_map(|(r, c)| flow.get(r, c)).map(|[a, b]| (a, b)).unzip();
        if !dx.is_empty() {
            vel = [median(&mut dx), median(&mut dz)];
        }
    }
    Ok((pos, vel))
}

/// Keeps observations whose height above the ground lies in
/// `[min_height, max_height]`. Returns the kept observations and the
/// rejected ones with their heights; with no ground plane nothing is
/// filtered and the flag is false.
pub fn geometric_filter(
    observations: Vec<Observation>,
    ctx: &FrameContext,
    min_height: f64,
    max_height: f64,
) -> (Vec<Observation>, Vec<(Observation, f64)>, bool) {
    let Some(plane) = ctx.world_ground() else {
        return (observations, Vec::new(), false);
    };
    let mut kept = Vec::with_capacity(observations.len());
    let mut dropped = Vec::new();
    for obs in observations {
        let height = plane.signed_distance(&obs.pos);
        if (min_height..=max_height).contains(&height) {
            kept.push(obs);
        } else {
            dropped.push((obs, height));
        }
    }
    (kept, dropped, true)
}

#[derive(Debug, Clone, Default)]
pub struct FrameObservations {
    pub observations: Vec<Observation>,
    /// Proposal index and reason for every proposal that did not survive.
    pub rejections: Vec<(usize, Rejection)>,
    /// False when no ground plane was available and the height filter was skipped.
    pub height_filter_applied: bool,
}

/// NMS, then position/velocity (precomputed or lifted from depth), then the
/// height band, then truncation to the top `max_observations` by score.
pub fn build_observation_set(
    proposals: &[Proposal],
    ctx: &FrameContext,
    params: &ObservationParams,
) -> FrameObservations {
    let mut rejections = Vec::new();
    let (h, w) = ctx.image_size;
    let mut valid = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        if p.mask.height() != h || p.mask.width() != w {
            rejections.push((i, Rejection::SizeMismatch));
        } else if p.mask.is_empty() {
            rejections.push((i, Rejection::EmptyMask));
        } else if !(0.0..=1.0).contains(&p.score) {
            rejections.push((i, Rejection::InvalidScore { score: p.score }));
        } else {
            valid.push(i);
        }
    }

    let items: Vec<(RleMask, f64)> = valid
        .iter()
        .map(|&i| (proposals[i].mask.clone(), proposals[i].score))
        .collect();
    let survivors = nms_proposals(&items, params.nms_iou);
    let mut survived = vec![false; valid.len()];
    for &s in &survivors {
        survived[s] = true;
    }
    for (k, &i) in valid.iter().enumerate() {
        if !survived[k] {
            rejections.push((i, Rejection::Suppressed));
        }
    }

    let mut located = Vec::with_capacity(survivors.len());
    for s in survivors {
        let i = valid[s];
        let p = &proposals[i];
        let located_pos = match p.pos {
            Some(pos) => Ok((pos, p.vel.unwrap_or([0.0, 0.0]))),
            None => extract_pos_vel(&p.mask, ctx, params.min_depth_pixels),
        };
        match located_pos {
            Ok((pos, vel)) => located.push(Observation {
                pos,
                vel,
                mask: p.mask.clone(),
                score: p.score,
                class_scores: p.class_scores.clone(),
                source: i,
            }),
            Err(r) => rejections.push((i, r)),
        }
    }

    let (mut observations, dropped, applied) =
        geometric_filter(located, ctx, params.min_height, params.max_height);
    for (obs, height) in dropped {
        rejections.push((obs.source, Rejection::HeightOutOfBand { height }));
    }
    if observations.len() > params.max_observations {
        for obs in observations.drain(params.max_observations..) {
            rejections.push((obs.source, Rejection::Truncated));
        }
    }
    rejections.sort_by_key(|(i, _)| *i);
    FrameObservations {
        observations,
        rejections,
        height_filter_applied: applied,
    }
}
