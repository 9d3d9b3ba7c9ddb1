//! Sequence runner: preprocessing, the sequential tracker loop, per-frame
//! selection and the emitted records.
//!
//! Frames are preprocessed in parallel batches (loading, ground fallback,
//! observation sets); the tracker and the selection then run strictly in frame
//! order, so the output does not depend on the worker count.

pub mod format;
pub mod render;
pub mod tune;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluation::{CoverageFrame, CoverageHypothesis, COVERAGE_WINDOW};
use crate::geometry::{fit_ground_plane, GroundPlane};
use crate::inference::{self, InferenceParams, Solver};
use crate::observations::{build_observation_set, ObservationParams};
use crate::tracker::{FrameData, StepReport, Tracker, TrackerParams};

pub use format::{FrameInput, FrameSource, SequenceDir, SyntheticSource, TrackRecord};

/// Ground-plane fallback: RANSAC over the depth cloud, subsampled by this stride.
pub const GROUND_STRIDE: u32 = 4;
const GROUND_ITERATIONS: usize = 200;
const GROUND_INLIER: f64 = 0.05;
/// A fitted plane is accepted only when its normal is this close to the camera's up axis.
const GROUND_MIN_UP: f64 = 0.8;

/// All tunable parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Params {
    pub observation: ObservationParams,
    pub tracker: TrackerParams,
    pub inference: InferenceParams,
}

impl Params {
    pub fn validate(&self) -> Result<()> {
        self.observation.validate()?;
        self.tracker.validate()?;
        self.inference.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Params = format::read_json(path)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_json(path, self)
    }

    /// Reads a numeric parameter by dotted name, e.g. `tracker.max_misses`.
    pub fn get(&self, name: &str) -> Result<f64> {
        let v = serde_json::to_value(self).expect("params serialize");
        lookup(&v, name)?
            .as_f64()
            .ok_or_else(|| Error::InvalidInput(format!("parameter '{name}' is not numeric")))
    }

    /// Sets a numeric parameter by dotted name. Integer fields take the
    /// rounded value.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let mut v = serde_json::to_value(&*self).expect("params serialize");
        let slot = lookup_mut(&mut v, name)?;
        *slot = if slot.is_u64() || slot.is_i64() {
            if value < 0.0 {
                return Err(Error::InvalidInput(format!("parameter '{name}' cannot be negative")));
            }
            Value::from(value.round() as u64)
        } else if slot.is_f64() {
            Value::from(value)
        } else {
            return Err(Error::InvalidInput(format!("parameter '{name}' is not numeric")));
        };
        *self = serde_json::from_value(v).map_err(|e| Error::InvalidInput(format!("parameter '{name}': {e}")))?;
        Ok(())
    }
}

fn lookup<'a>(v: &'a Value, name: &str) -> Result<&'a Value> {
    name.split('.')
        .try_fold(v, |v, key| v.get(key))
        .ok_or_else(|| Error::InvalidInput(format!("unknown parameter '{name}'")))
}

fn lookup_mut<'a>(v: &'a mut Value, name: &str) -> Result<&'a mut Value> {
    let mut cur = v;
    for key in name.split('.') {
        cur = cur
            .get_mut(key)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter '{name}'")))?;
    }
    if cur.is_object() {
        return Err(Error::InvalidInput(format!("'{name}' is a group, not a parameter")));
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Preprocessing threads; 0 uses the global pool.
    pub workers: usize,
    /// Frames preprocessed ahead of the tracker.
    pub batch: usize,
    /// Hypotheses kept per coverage snapshot; 0 disables snapshots.
    pub coverage_k: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 0,
            batch: 16,
            coverage_k: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundStatus {
    Given,
    Fitted,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionRecord {
    pub proposal: usize,
    pub reason: String,
}

/// Per-frame bookkeeping written to the diagnostics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameDiagnostics {
    pub frame: u32,
    pub proposals: usize,
    pub observations: usize,
    pub ground: GroundStatus,
    pub height_filter_applied: bool,
    pub rejections: Vec<RejectionRecord>,
    pub step: StepReport,
    pub hypotheses: usize,
    pub candidates: usize,
    pub solver: Solver,
    pub energy: f64,
    /// One character per live hypothesis in ascending id order; '1' = selected.
    pub selection: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub tracks: Vec<TrackRecord>,
    pub diagnostics: Vec<FrameDiagnostics>,
    pub coverage: Vec<CoverageFrame>,
    pub peak_hypotheses: usize,
}

impl RunOutput {
    pub fn write_tracks(&self, path: &Path) -> Result<()> {
        format::write_jsonl(path, &self.tracks)
    }

    pub fn write_diagnostics(&self, path: &Path) -> Result<()> {
        format::write_jsonl(path, &self.diagnostics)
    }

    pub fn eval_tracks(&self) -> Vec<crate::evaluation::EvalTrack> {
        self.tracks.iter().map(TrackRecord::to_eval).collect()
    }
}

struct Prepared {
    data: FrameData,
    proposals: usize,
    ground: GroundStatus,
    height_filter_applied: bool,
    rejections: Vec<RejectionRecord>,
}

fn fallback_ground(input: &FrameInput) -> Option<GroundPlane> {
    let depth = input.ctx.depth.as_ref()?;
    let cloud = depth.point_cloud(&input.ctx.intrinsics, GROUND_STRIDE);
    let plane = fit_ground_plane(&cloud, GROUND_ITERATIONS, GROUND_INLIER, input.ctx.frame as u64).ok()?;
    if plane.normal.y.abs() < GROUND_MIN_UP {
        return None;
    }
    if plane.normal.y < 0.0 {
        GroundPlane::new(-plane.normal, -plane.offset).ok()
    } else {
        Some(plane)
    }
}

fn prepare(source: &dyn FrameSource, t: u32, params: &ObservationParams) -> Result<Prepared> {
    let mut input = source.load(t)?;
    let ground = if input.ctx.ground.is_some() {
        GroundStatus::Given
    } else if let Some(g) = fallback_ground(&input) {
        input.ctx.ground = Some(g);
        GroundStatus::Fitted
    } else {
        GroundStatus::Missing
    };
    let set = build_observation_set(&input.proposals, &input.ctx, params);
    let rejections = set
        .rejections
        .iter()
        .map(|(i, r)| RejectionRecord {
            proposal: *i,
            reason: r.to_string(),
        })
        .collect();
    Ok(Prepared {
        proposals: input.proposals.len(),
        data: FrameData::new(input.ctx, set.observations),
        ground,
        height_filter_applied: set.height_filter_applied,
        rejections,
    })
}

/// Tracks one sequence end to end.
pub fn run_sequence(source: &dyn FrameSource, params: &Params, options: &RunOptions) -> Result<RunOutput> {
    params.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidInput("sequence has no frames".into()));
    }
    let pool = if options.workers > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(options.workers)
                .build()
                .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    match &pool {
        Some(pool) => pool.install(|| run_inner(source, params, options)),
        None => run_inner(source, params, options),
    }
}

fn run_inner(source: &dyn FrameSource, params: &Params, options: &RunOptions) -> Result<RunOutput> {
    let n = source.len();
    let batch = options.batch.max(1) as u32;
    let mut tracker = Tracker::new(params.tracker, params.inference);
    let mut out = RunOutput::default();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let prepared: Vec<Result<Prepared>> = (start..end)
            .into_par_iter()
            .map(|t| prepare(source, t, &params.observation))
            .collect();
        for p in prepared {
            let p = p?;
            step_frame(&mut tracker, p, params, options, &mut out)?;
        }
        start = end;
    }
    info!(
        "tracked {n} frames: {} track rows, peak {} hypotheses",
        out.tracks.len(),
        out.peak_hypotheses
    );
    Ok(out)
}

fn step_frame(
    tracker: &mut Tracker,
    p: Prepared,
    params: &Params,
    options: &RunOptions,
    out: &mut RunOutput,
) -> Result<()> {
    let t = p.data.ctx.frame;
    let camera_from_world = p.data.ctx.camera_from_world();
    let observations = p.data.observations.len();
    let step = tracker.step(Arc::new(p.data))?;
    let hyps = tracker.hypotheses();
    out.peak_hypotheses = out.peak_hypotheses.max(hyps.len());

    let selection = inference::select(hyps, t, &params.inference);
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by_key(|&i| hyps[i].id);
    for &i in &order {
        if !selection.selected[i] {
            continue;
        }
        let h = &hyps[i];
        let f = h.last();
        if f.frame != t {
            return Err(Error::Invariant(format!("hypothesis {} does not reach frame {t}", h.id)));
        }
        let Some(bbox) = f.bbox else {
            return Err(Error::Invariant(format!("selected hypothesis {} has an empty mask", h.id)));
        };
        let cam = camera_from_world.apply(&f.pos);
        out.tracks.push(TrackRecord {
            frame: t,
            id: h.id,
            bbox,
            mask: f.mask.clone(),
            pos: f.pos.into(),
            vel: f.vel,
            cam_pos: cam.into(),
            label: inference::track_label(h, t, &params.inference),
            predicted: f.is_predicted(),
            unary: selection.unaries[i],
        });
    }
    debug!(
        "frame {t}: {observations} observations, {} hypotheses, {} selected",
        hyps.len(),
        selection.selected.iter().filter(|&&b| b).count()
    );

    if options.coverage_k > 0 {
        let window_start = t.saturating_sub(COVERAGE_WINDOW - 1);
        let hypotheses = hyps
            .iter()
            .map(|h| CoverageHypothesis {
                strength: tracker.strength(h, t),
                boxes: h
                    .frames
                    .iter()
                    .filter(|f| f.frame >= window_start)
                    .filter_map(|f| f.bbox.map(|b| (f.frame, b)))
                    .collect::<BTreeMap<_, _>>(),
            })
            .collect();
        out.coverage.push(CoverageFrame { frame: t, hypotheses }.top_k(options.coverage_k));
    }

    out.diagnostics.push(FrameDiagnostics {
        frame: t,
        proposals: p.proposals,
        observations,
        ground: p.ground,
        height_filter_applied: p.height_filter_applied,
        rejections: p.rejections,
        step,
        hypotheses: hyps.len(),
        candidates: selection.candidates.len(),
        solver: selection.solver,
        energy: selection.energy,
        selection: order
            .iter()
            .map(|&i| if selection.selected[i] { '1' } else { '0' })
            .collect(),
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{clear_mot, EvalConfig};
    use crate::synthetic::{catalog, Scenario};

    fn source(name: &str, frames: u32) -> SyntheticSource {
        let mut spec = catalog(name).unwrap();
        spec.frames = frames;
        SyntheticSource::new(Scenario::new(spec).unwrap())
    }

    #[test]
    fn params_get_and_set_by_name() {
        let mut p = Params::default();
        p.set("tracker.max_misses", 3.6).unwrap();
        assert_eq!(p.tracker.max_misses, 4);
        p.set("inference.lambda", 2.5).unwrap();
        assert_eq!(p.get("inference.lambda").unwrap(), 2.5);
        assert!(p.set("tracker.nope", 1.0).is_err());
        assert!(p.set("tracker", 1.0).is_err());
        assert!(p.set("tracker.max_misses", -1.0).is_err());
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = Params::default();
        p.set("observation.max_observations", 50.0).unwrap();
        p.save(&path).unwrap();
        assert_eq!(Params::load(&path).unwrap(), p);
    }

    #[test]
    fn single_static_gives_one_clean_track() {
        let src = source("single-static", 60);
        let out = run_sequence(&src, &Params::default(), &RunOptions::default()).unwrap();
        let gt = src.ground_truth().unwrap().unwrap();
        let report = clear_mot(&out.eval_tracks(), &gt, &EvalConfig::default()).unwrap();
        assert_eq!(report.overall.counts.idsw, 0);
        let mut per_id: BTreeMap<u64, usize> = BTreeMap::new();
        for r in &out.tracks {
            *per_id.entry(r.id).or_default() += 1;
        }
        let best = per_id.values().max().copied().unwrap_or(0);
        assert!(best as f64 >= 0.95 * 60.0, "longest track covers {best} of 60 frames: {per_id:?}");
    }

    #[test]
    fn tuned_params_report_a_single_track() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../params/tuned.json");
        let params = Params::load(&path).unwrap();
        let src = source("single-static", 60);
        let out = run_sequence(&src, &params, &RunOptions::default()).unwrap();
        let ids: std::collections::BTreeSet<u64> = out.tracks.iter().map(|r| r.id).collect();
        assert_eq!(ids.len(), 1);
        assert!(out.tracks.len() as f64 >= 0.95 * 60.0);
    }

    #[test]
    fn emitted_rows_were_selected() {
        let src = source("two-crossing", 25);
        let out = run_sequence(&src, &Params::default(), &RunOptions::default()).unwrap();
        let mut rows = out.tracks.iter().peekable();
        for d in &out.diagnostics {
            let mut n = 0;
            while rows.peek().is_some_and(|r| r.frame == d.frame) {
                rows.next();
                n += 1;
            }
            assert_eq!(n, d.selection.chars().filter(|&c| c == '1').count(), "frame {}", d.frame);
            assert_eq!(d.selection.len(), d.hypotheses);
        }
        assert!(rows.next().is_none());
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let src = source("two-crossing", 20);
        let p = Params::default();
        let a = run_sequence(&src, &p, &RunOptions { workers: 1, batch: 3, coverage_k: 5 }).unwrap();
        let b = run_sequence(&src, &p, &RunOptions { workers: 4, batch: 16, coverage_k: 5 }).unwrap();
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.diagnostics, b.diagnostics);
        assert_eq!(a.coverage, b.coverage);
    }

    #[test]
    fn ground_is_fitted_from_depth_when_absent() {
        let mut spec = catalog("single-static").unwrap();
        spec.frames = 2;
        spec.outputs.ground = false;
        let src = SyntheticSource::new(Scenario::new(spec).unwrap());
        let input = src.load(0).unwrap();
        assert!(input.ctx.ground.is_none());
        let g = fallback_ground(&input).unwrap();
        assert!((g.normal.y - 1.0).abs() < 1e-3, "{g:?}");
        assert!((g.offset - 1.6).abs() < 1e-2, "{g:?}");
        let out = run_sequence(&src, &Params::default(), &RunOptions::default()).unwrap();
        assert!(out.diagnostics.iter().all(|d| d.ground == GroundStatus::Fitted));
    }

    #[test]
    fn coverage_snapshots_respect_k_and_window() {
        let src = source("two-crossing", 15);
        let out = run_sequence(&src, &Params::default(), &RunOptions { coverage_k: 3, ..Default::default() }).unwrap();
        assert_eq!(out.coverage.len(), 15);
        for f in &out.coverage {
            assert!(f.hypotheses.len() <= 3);
            for h in &f.hypotheses {
                assert!(h.boxes.keys().all(|&k| k <= f.frame && k + COVERAGE_WINDOW > f.frame));
            }
        }
    }
}
