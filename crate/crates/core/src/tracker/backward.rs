//! Hypothesis initialization by association backwards in time.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

use super::association::{
    associate, forward_prediction, observation_frame, planar_velocity_in_camera, propagate_mask,
};
use super::hypothesis::Hypothesis;
use super::kalman::KalmanState;
use super::{FrameData, TrackerParams};

/// Starts a hypothesis from observation `obs_index` of the last frame in
/// `history` (oldest first). The observation is chained backwards through
/// earlier frames with the same predict/associate steps run in reverse,
/// stopping at the first miss; the chain is then replayed forward through
/// the filter, so the result matches what forward tracking from the oldest
/// chained observation would have produced.
pub fn init_backward(
    obs_index: usize,
    history: &[Arc<FrameData>],
    params: &TrackerParams,
    id: u64,
) -> Result<Hypothesis> {
    let current_idx = history
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Invariant("backward init without a current frame".into()))?;
    let current = &history[current_idx];
    let obs = &current.observations[obs_index];

    // Backward pass. The state carries reversed velocity.
    let mut chain = vec![(current_idx, obs_index)];
    let mut state = KalmanState::new(
        current.measurements[obs_index],
        obs.vel,
        params.init_pos_var,
        params.init_vel_var,
    )
    .reversed();
    let mut mask = obs.mask.clone();
    let steps = (params.backward_window as usize).min(current_idx);
    for k in (current_idx - steps..current_idx).rev() {
        let (from, to) = (&history[k + 1], &history[k]);
        let forward_vel = {
            let [vx, vz] = state.velocity();
            [-vx, -vz]
        };
        let v = planar_velocity_in_camera(&to.ctx.camera_from_world(), forward_vel);
        let transform = RigidTransform::from_translation(crate::geometry::Vec3::new(-v[0], 0.0, -v[1]))
            .compose(&from.ctx.ego.inverse());
        let anchor = from.ctx.camera_from_world().apply(&state.position());
        let prior = state.predict(params.process_noise);
        let predicted = propagate_mask(&mask, from, &transform, &anchor, params.min_depth_fraction);
        let Some(hit) = associate(&prior, &predicted, to, params) else {
            break;
        };
        let Ok(next) = prior.correct(&to.measurements[hit.index], params.obs_noise) else {
            break;
        };
        state = next;
        mask = to.observations[hit.index].mask.clone();
        chain.push((k, hit.index));
    }
    chain.reverse();

    // Forward replay from the oldest chained observation.
    let (k0, j0) = chain[0];
    let first = &history[k0];
    let mut state = KalmanState::new(
        first.measurements[j0],
        first.observations[j0].vel,
        params.init_pos_var,
        params.init_vel_var,
    );
    let mut frames = vec![observation_frame(
        &first.observations[j0],
        j0,
        first.ctx.frame,
        0.0,
        &state,
        first.boxes[j0],
    )];
    for w in chain.windows(2) {
        let ((kp, _), (k, j)) = (w[0], w[1]);
        let (from, to) = (&history[kp], &history[k]);
        let last_mask = &frames[frames.len() - 1].mask;
        let (prior, predicted) = forward_prediction(&state, last_mask, from, to, params);
        let similarity = predicted.iou(&to.observations[j].mask).unwrap_or(0.0);
        state = prior.correct(&to.measurements[j], params.obs_noise)?;
        frames.push(observation_frame(
            &to.observations[j],
            j,
            to.ctx.frame,
            similarity,
            &state,
            to.boxes[j],
        ));
    }

    Ok(Hypothesis {
        id,
        created: current.ctx.frame,
        frames,
        state,
        misses: 0,
    })
}
