//! Overcomplete hypothesis tracking.
//!
//! Every frame each live hypothesis is predicted (Kalman state and a mask
//! warped through 3D), associated greedily with its best observation and
//! corrected, or carried on its predicted mask. A new hypothesis is then
//! started from every observation by backward initialization, and
//! hypotheses old enough to have diverged are deduplicated by NMS.
//! Observations may support several hypotheses; exclusivity is left to
//! inference.

mod association;
mod backward;
mod hypothesis;
pub mod kalman;
mod nms;

use std::collections::VecDeque;
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::geometry::{GroundPlane, Vec3};
use crate::inference::{self, InferenceParams};
use crate::observations::{FrameContext, Observation};

pub use association::{associate, motion_likelihood, AssociationCandidate};
pub use backward::init_backward;
pub use hypothesis::{Extent, Hypothesis, TrackFrame};
pub use kalman::{kalman_correct, kalman_predict, measurement, KalmanState};
pub use nms::{hypothesis_nms, similarity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    /// Hypotheses become eligible for NMS once older than this many frames.
    pub nms_window: u32,
    pub nms_similarity: f64,
    pub association_gate: f64,
    pub max_misses: u32,
    pub init_pos_var: f64,
    pub init_vel_var: f64,
    pub process_noise: f64,
    pub obs_noise: f64,
    pub backward_window: u32,
    /// Below this fraction of mask pixels with depth, masks are shifted in 2D.
    pub min_depth_fraction: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            nms_window: 10,
            nms_similarity: 0.5,
            association_gate: 0.05,
            max_misses: 6,
            init_pos_var: 0.5,
            init_vel_var: 1.0,
            process_noise: 0.05,
            obs_noise: 0.1,
            backward_window: 5,
            min_depth_fraction: 0.2,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.nms_window < 1
            || !unit(self.nms_similarity)
            || !unit(self.association_gate)
            || !unit(self.min_depth_fraction)
            || !(self.init_pos_var > 0.0 && self.init_vel_var > 0.0)
            || !(self.process_noise >= 0.0 && self.obs_noise > 0.0)
        {
            return Err(Error::InvalidInput(format!("invalid tracker parameters {self:?}")));
        }
        Ok(())
    }
}

/// A frame's observations with the per-observation values every hypothesis needs.
#[derive(Debug)]
pub struct FrameData {
    pub ctx: FrameContext,
    pub observations: Vec<Observation>,
    /// Ground-anchored measurement per observation.
    pub measurements: Vec<Vec3>,
    pub boxes: Vec<BBox>,
    pub world_ground: Option<GroundPlane>,
}

impl FrameData {
    pub fn new(ctx: FrameContext, observations: Vec<Observation>) -> Self {
        let world_ground = ctx.world_ground();
        let measurements = observations
            .iter()
            .map(|o| measurement(&o.pos, world_ground.as_ref()))
            .collect();
        let boxes = observations
            .iter()
            .map(|o| o.mask.bbox().unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0)))
            .collect();
        Self {
            ctx,
            observations,
            measurements,
            boxes,
            world_ground,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub frame: u32,
    pub associated: usize,
    pub carried: usize,
    pub terminated: usize,
    /// Hypotheses dropped because their filter broke an invariant.
    pub aborted: usize,
    pub created: usize,
    pub pruned: usize,
    pub live: usize,
}

pub struct Tracker {
    params: TrackerParams,
    ranking: InferenceParams,
    hypotheses: Vec<Hypothesis>,
    history: VecDeque<Arc<FrameData>>,
    next_id: u64,
}

impl Tracker {
    /// `ranking` supplies the unary weights used to order hypotheses for
    /// NMS; its semantic weight is ignored.
    pub fn new(params: TrackerParams, ranking: InferenceParams) -> Self {
        Self {
            params,
            ranking: InferenceParams {
                w_sem: 0.0,
                ..ranking
            },
            hypotheses: Vec::new(),
            history: VecDeque::new(),
            next_id: 0,
        }
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn current_frame(&self) -> Option<&Arc<FrameData>> {
        self.history.back()
    }

    /// Unary strength (negated unary without the semantic term) used for NMS ordering.
    pub fn strength(&self, h: &Hypothesis, t: u32) -> f64 {
        -inference::unary(h, t, &self.ranking)
    }

    pub fn step(&mut self, frame: Arc<FrameData>) -> Result<StepReport> {
        let t = frame.ctx.frame;
        if let Some(prev) = self.history.back() {
            if t != prev.ctx.frame + 1 {
                return Err(Error::InvalidInput(format!(
                    "frame {t} does not follow frame {}",
                    prev.ctx.frame
                )));
            }
        }
        let mut report = StepReport {
            frame: t,
            ..Default::default()
        };

        if let Some(prev) = self.history.back().cloned() {
            let params = self.params;
            let outcomes: Vec<_> = self
                .hypotheses
                .par_iter()
                .map(|h| {
                    let (prior, mask) =
                        association::forward_prediction(&h.state, &h.last().mask, &prev, &frame, &params);
                    let hit = associate(&prior, &mask, &frame, &params);
                    (prior, mask, hit)
                })
                .collect();
            let old = std::mem::take(&mut self.hypotheses);
            for (mut h, (prior, mask, hit)) in old.into_iter().zip(outcomes) {
                match hit {
                    Some(hit) => match prior.correct(&frame.measurements[hit.index], params.obs_noise) {
                        Ok(state) => {
                            h.frames.push(association::observation_frame(
                                &frame.observations[hit.index],
                                hit.index,
                                t,
                                hit.iou,
                                &state,
                                frame.boxes[hit.index],
                            ));
                            h.state = state;
                            h.misses = 0;
                            report.associated += 1;
                        }
                        Err(e) => {
                            warn!("hypothesis {} aborted at frame {t}: {e}", h.id);
                            report.aborted += 1;
                            continue;
                        }
                    },
                    None => {
                        h.misses += 1;
                        if mask.is_empty() || h.misses > params.max_misses {
                            report.terminated += 1;
                            continue;
                        }
                        h.frames.push(TrackFrame {
                            frame: t,
                            bbox: mask.bbox(),
                            mask,
                            observation: None,
                            score: 0.0,
                            similarity: 0.0,
                            class: None,
                            pos: prior.position(),
                            vel: prior.velocity(),
                        });
                        h.state = prior;
                        report.carried += 1;
                    }
                }
                self.hypotheses.push(h);
            }
        }

        self.history.push_back(frame.clone());
        while self.history.len() > self.params.backward_window as usize + 1 {
            self.history.pop_front();
        }

        let history: Vec<Arc<FrameData>> = self.history.iter().cloned().collect();
        let base_id = self.next_id;
        let params = self.params;
        let created: Vec<Result<Hypothesis>> = (0..frame.observations.len())
            .into_par_iter()
            .map(|i| init_backward(i, &history, &params, base_id + i as u64))
            .collect();
        self.next_id += frame.observations.len() as u64;
        for h in created {
            match h {
                Ok(h) => {
                    self.hypotheses.push(h);
                    report.created += 1;
                }
                Err(e) => {
                    warn!("backward initialization aborted at frame {t}: {e}");
                    report.aborted += 1;
                }
            }
        }

        let hyps = std::mem::take(&mut self.hypotheses);
        let (hyps, pruned) = hypothesis_nms(
            hyps,
            t,
            self.params.nms_window,
            self.params.nms_similarity,
            |h| self.strength(h, t),
        );
        self.hypotheses = hyps;
        report.pruned = pruned.len();
        report.live = self.hypotheses.len();
        Ok(report)
    }
}
