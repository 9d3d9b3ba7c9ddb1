//! Mask propagation between frames and per-hypothesis data association.

use crate::bbox::BBox;
use crate::geometry::{warp_mask, RigidTransform, Vec3};
use crate::observations::Observation;
use crate::rle::RleMask;

use super::kalman::KalmanState;
use super::{FrameData, TrackerParams};

/// Propagates a mask observed in `from` into the camera frame of `to`.
/// `transform` maps `from` camera coordinates (including object motion) into
/// `to` camera coordinates. When fewer than `min_depth_fraction` of the mask
/// pixels have depth, the mask is shifted in 2D by the projected motion of
/// `anchor` (a `from`-camera point) instead.
pub(crate) fn propagate_mask(
    mask: &RleMask,
    from: &FrameData,
    transform: &RigidTransform,
    anchor: &Vec3,
    min_depth_fraction: f64,
) -> RleMask {
    let intr = &from.ctx.intrinsics;
    if let Some(depth) = &from.ctx.depth {
        if let Ok(warped) = warp_mask(mask, depth, intr, transform) {
            let area = mask.area().max(1) as f64;
            if warped.lifted as f64 / area >= min_depth_fraction {
                return warped.mask;
            }
        }
    }
    let moved = transform.apply(anchor);
    match (intr.project(anchor), intr.project(&moved)) {
        (Some((u0, v0)), Some((u1, v1))) => {
            mask.translate((u1 - u0).round() as i64, (v1 - v0).round() as i64)
        }
        _ => RleMask::empty(mask.height(), mask.width()),
    }
}

/// Planar world velocity expressed in the axes of a camera frame, with the
/// vertical component dropped.
pub(crate) fn planar_velocity_in_camera(camera_from_world: &RigidTransform, vel: [f64; 2]) -> [f64; 2] {
    let v = camera_from_world.apply_vector(&Vec3::new(vel[0], 0.0, vel[1]));
    [v.x, v.z]
}

/// Predicted state and mask of a hypothesis for the frame `to`, given its
/// posterior state and last mask at frame `from`.
pub(crate) fn forward_prediction(
    posterior: &KalmanState,
    last_mask: &RleMask,
    from: &FrameData,
    to: &FrameData,
    params: &TrackerParams,
) -> (KalmanState, RleMask) {
    let prior = posterior.predict(params.process_noise);
    let cam_from_world = from.ctx.camera_from_world();
    let v = planar_velocity_in_camera(&cam_from_world, posterior.velocity());
    let transform = crate::geometry::prediction_transform(&to.ctx.ego, v);
    let anchor = cam_from_world.apply(&posterior.position());
    let mask = propagate_mask(last_mask, from, &transform, &anchor, params.min_depth_fraction);
    (prior, mask)
}

/// Motion term: Gaussian density of the measurement under the predicted
/// position and innovation covariance, divided by the density at the mean.
pub fn motion_likelihood(prior: &KalmanState, z: &Vec3, obs_noise: f64) -> f64 {
    let s = prior.innovation_cov(obs_noise);
    let Some(chol) = s.cholesky() else {
        return 0.0;
    };
    let e = z - prior.position();
    let d2 = e.dot(&chol.solve(&e));
    (-0.5 * d2).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationCandidate {
    pub index: usize,
    pub score: f64,
    pub iou: f64,
}

/// Picks the observation maximizing `iou(predicted mask, obs mask) * motion
/// term`. Ties go to the higher IoU, then the lower index. Returns `None`
/// when the best score is below the gate.
pub fn associate(
    prior: &KalmanState,
    predicted_mask: &RleMask,
    frame: &FrameData,
    params: &TrackerParams,
) -> Option<AssociationCandidate> {
    let pred_box: Option<BBox> = predicted_mask.bbox();
    let pred_box = pred_box?;
    let mut best: Option<AssociationCandidate> = None;
    for (index, obs) in frame.observations.iter().enumerate() {
        if !frame.boxes[index].intersects(&pred_box) {
            continue;
        }
        let motion = motion_likelihood(prior, &frame.measurements[index], params.obs_noise);
        if motion < params.association_gate || motion == 0.0 {
            // IoU ≤ 1, so the product cannot reach the gate.
            continue;
        }
        let iou = predicted_mask.iou(&obs.mask).unwrap_or(0.0);
        let score = iou * motion;
        let better = match best {
            None => true,
            Some(b) => score > b.score || (score == b.score && iou > b.iou),
        };
        if better {
            best = Some(AssociationCandidate { index, score, iou });
        }
    }
    best.filter(|b| b.score >= params.association_gate && b.score > 0.0)
}

pub(crate) fn observation_frame(
    obs: &Observation,
    index: usize,
    frame: u32,
    similarity: f64,
    state: &KalmanState,
    bbox: BBox,
) -> super::TrackFrame {
    super::TrackFrame {
        frame,
        mask: obs.mask.clone(),
        bbox: Some(bbox),
        observation: Some(index),
        score: obs.score,
        similarity,
        class: obs.best_class().map(|(l, s)| (l.to_string(), s)),
        pos: state.position(),
        vel: state.velocity(),
    }
}
