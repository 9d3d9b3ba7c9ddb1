//! Two-stage hyperparameter search.
//!
//! Stage 1 scores the hypothesis generator by the temporal-coverage objective
//! over the strongest hypotheses of each frame. Stage 2 scores the whole
//! tracker by MOTA: the unweighted sum of per-category MOTA when categories
//! are configured, otherwise overall MOTA. Counts are pooled over sequences
//! before the ratio is taken.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{self, FrameSource, SequenceDir, SyntheticSource};
use super::{run_sequence, Params, RunOptions};
use crate::error::{Error, Result};
use crate::evaluation::{clear_mot, coverage_objective, Counts, EvalConfig, GtBox, MotMetrics};
use crate::synthetic::{catalog, Scenario, ScenarioSpec};

/// A point in parameter space: dotted parameter name to value.
pub type Point = BTreeMap<String, f64>;

/// Search contract: the harness asks for a point, evaluates it and reports
/// back. `None` marks a failed trial.
pub trait SearchStrategy {
    fn propose(&mut self) -> Point;
    fn observe(&mut self, point: &Point, objective: Option<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    /// Sample integers in `[min, max]`.
    #[serde(default)]
    pub integer: bool,
    /// Sample uniformly in log space; requires `min > 0`.
    #[serde(default)]
    pub log: bool,
}

impl Range {
    fn validate(&self, name: &str) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidInput(format!("range for '{name}': {why}")));
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return bad("min must not exceed max");
        }
        if self.log && self.min <= 0.0 {
            return bad("log ranges need a positive minimum");
        }
        if self.integer && self.min.ceil() > self.max.floor() {
            return bad("contains no integer");
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.integer {
            return rng.random_range(self.min.ceil() as i64..=self.max.floor() as i64) as f64;
        }
        let u: f64 = rng.random();
        if self.log {
            (self.min.ln() + u * (self.max.ln() - self.min.ln())).exp()
        } else {
            self.min + u * (self.max - self.min)
        }
    }
}

/// Independent uniform draws; ignores feedback.
pub struct RandomSearch {
    ranges: BTreeMap<String, Range>,
    rng: ChaCha8Rng,
}

impl RandomSearch {
    pub fn new(ranges: BTreeMap<String, Range>, seed: u64) -> Self {
        Self {
            ranges,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl SearchStrategy for RandomSearch {
    fn propose(&mut self) -> Point {
        self.ranges
            .iter()
            .map(|(k, r)| (k.clone(), r.sample(&mut self.rng)))
            .collect()
    }

    fn observe(&mut self, _point: &Point, _objective: Option<f64>) {}
}

/// One training sequence: a catalog scenario, a scenario file or a sequence
/// directory. `seed` and `frames` override scenario values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceRef {
    pub catalog: Option<String>,
    pub scenario: Option<PathBuf>,
    pub dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub frames: Option<u32>,
}

impl SequenceRef {
    pub fn catalog(name: &str, seed: u64) -> Self {
        Self {
            catalog: Some(name.to_string()),
            seed: Some(seed),
            ..Default::default()
        }
    }

    /// Opens the sequence; relative paths resolve against `base`.
    pub fn open(&self, base: &Path) -> Result<Box<dyn FrameSource + Send>> {
        let spec = match (&self.catalog, &self.scenario, &self.dir) {
            (Some(name), None, None) => {
                catalog(name).ok_or_else(|| Error::InvalidInput(format!("unknown scenario '{name}'")))?
            }
            (None, Some(path), None) => format::read_json::<ScenarioSpec>(&base.join(path))?,
            (None, None, Some(dir)) => {
                if self.seed.is_some() || self.frames.is_some() {
                    return Err(Error::InvalidInput("seed/frames overrides apply only to scenarios".into()));
                }
                return Ok(Box::new(SequenceDir::open(&base.join(dir))?));
            }
            _ => {
                return Err(Error::InvalidInput(
                    "a sequence needs exactly one of catalog, scenario or dir".into(),
                ))
            }
        };
        Ok(Box::new(SyntheticSource::new(Scenario::new(self.apply(spec))?)))
    }

    fn apply(&self, mut spec: ScenarioSpec) -> ScenarioSpec {
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(frames) = self.frames {
            spec.frames = frames;
        }
        spec
    }
}

fn default_coverage_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSpec {
    /// 1 = coverage objective, 2 = MOTA.
    pub stage: u8,
    pub ranges: BTreeMap<String, Range>,
    pub trials: usize,
    pub seed: u64,
    pub sequences: Vec<SequenceRef>,
    /// Parameters not being searched; defaults when absent.
    #[serde(default)]
    pub base: Option<PathBuf>,
    /// Hypotheses per frame eligible for the coverage objective.
    #[serde(default = "default_coverage_k")]
    pub coverage_k: usize,
    /// IoU threshold, categories and coverage decay.
    #[serde(default)]
    pub eval: EvalConfig,
}

impl TuneSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::InvalidInput(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.ranges.is_empty() {
            return Err(Error::InvalidInput("no parameter ranges".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidInput("trials must be at least 1".into()));
        }
        if self.sequences.is_empty() {
            return Err(Error::InvalidInput("no sequences".into()));
        }
        if self.coverage_k == 0 {
            return Err(Error::InvalidInput("coverage_k must be positive".into()));
        }
        let probe = Params::default();
        for (name, range) in &self.ranges {
            range.validate(name)?;
            probe.get(name)?;
        }
        self.eval.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: TuneSpec = format::read_json(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Sequences with their ground truth, loaded once per tuning run.
pub struct TrainingSet {
    sequences: Vec<(Box<dyn FrameSource + Send>, Vec<GtBox>)>,
}

impl TrainingSet {
    pub fn open(refs: &[SequenceRef], base: &Path) -> Result<Self> {
        let mut sequences = Vec::with_capacity(refs.len());
        for r in refs {
            let source = r.open(base)?;
            let gt = source
                .ground_truth()?
                .ok_or_else(|| Error::InvalidInput(format!("sequence {r:?} has no ground truth")))?;
            sequences.push((source, gt));
        }
        Ok(Self { sequences })
    }
}

/// Scores one parameter set on the training set.
pub fn objective(stage: u8, params: &Params, set: &TrainingSet, coverage_k: usize, eval: &EvalConfig) -> Result<f64> {
    let options = RunOptions {
        coverage_k: if stage == 1 { coverage_k } else { 0 },
        ..Default::default()
    };
    let per_sequence: Vec<Result<SequenceScore>> = set
        .sequences
        .par_iter()
        .map(|(source, gt)| {
            let out = run_sequence(source.as_ref(), params, &options)?;
            Ok(match stage {
                1 => SequenceScore::Coverage(coverage_objective(&out.coverage, gt, coverage_k, eval.lambda)),
                _ => {
                    let report = clear_mot(&out.eval_tracks(), gt, eval)?;
                    let cats = eval.categories.iter().flatten().map(|c| {
                        (c.clone(), report.categories.get(c).map(|m| m.counts).unwrap_or_default())
                    });
                    SequenceScore::Mot(report.overall.counts, cats.collect())
                }
            })
        })
        .collect();

    let mut coverage = Vec::new();
    let mut overall = Counts::default();
    let mut categories: BTreeMap<String, Counts> = BTreeMap::new();
    for s in per_sequence {
        match s? {
            SequenceScore::Coverage(c) => coverage.push(c),
            SequenceScore::Mot(o, cats) => {
                overall.add(&o);
                for (name, c) in cats {
                    categories.entry(name).or_default().add(&c);
                }
            }
        }
    }
    if stage == 1 {
        return Ok(coverage.iter().sum::<f64>() / coverage.len() as f64);
    }
    let mota = |c: Counts| {
        MotMetrics::from(c)
            .mota
            .ok_or_else(|| Error::InvalidInput("MOTA undefined: no ground-truth boxes".into()))
    };
    match &eval.categories {
        Some(cats) if !cats.is_empty() => cats.iter().map(|c| mota(categories[c])).sum(),
        _ => mota(overall),
    }
}

enum SequenceScore {
    Coverage(f64),
    Mot(Counts, Vec<(String, Counts)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub values: Point,
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best: Params,
    pub best_trial: usize,
    pub best_objective: f64,
    pub trials: Vec<TrialRecord>,
}

/// Runs `spec.trials` trials proposed by `strategy`; ties keep the earlier trial.
pub fn tune(
    spec: &TuneSpec,
    base: &Params,
    set: &TrainingSet,
    strategy: &mut dyn SearchStrategy,
) -> Result<TuneResult> {
    spec.validate()?;
    let mut trials = Vec::with_capacity(spec.trials);
    let mut best: Option<(usize, f64, Params)> = None;
    for trial in 0..spec.trials {
        let values = strategy.propose();
        let mut params = base.clone();
        let scored = values
            .iter()
            .try_for_each(|(k, &v)| params.set(k, v))
            .and_then(|_| objective(spec.stage, &params, set, spec.coverage_k, &spec.eval));
        let (objective, error) = match scored {
            Ok(v) => (Some(v), None),
            Err(e) => {
                warn!("trial {trial} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        strategy.observe(&values, objective);
        if let Some(v) = objective {
            info!("trial {trial}: objective {v:.6}");
            if best.as_ref().is_none_or(|(_, b, _)| v > *b) {
                best = Some((trial, v, params));
            }
        }
        trials.push(TrialRecord {
            trial,
            values,
            objective,
            error,
        });
    }
    let (best_trial, best_objective, best) =
        best.ok_or_else(|| Error::InvalidInput("no trial produced a valid objective".into()))?;
    Ok(TuneResult {
        best,
        best_trial,
        best_objective,
        trials,
    })
}

/// Loads the spec, runs the random search and writes `out` (best parameters)
/// plus `out` with extension `trials.jsonl` (the trial log).
pub fn tune_from_file(spec_path: &Path, out: &Path) -> Result<TuneResult> {
    let spec = TuneSpec::load(spec_path)?;
    let base_dir = spec_path.parent().unwrap_or(Path::new("."));
    let base = match &spec.base {
        Some(p) => Params::load(&base_dir.join(p))?,
        None => Params::default(),
    };
    let set = TrainingSet::open(&spec.sequences, base_dir)?;
    let mut search = RandomSearch::new(spec.ranges.clone(), spec.seed);
    let result = tune(&spec, &base, &set, &mut search)?;
    result.best.save(out)?;
    format::write_jsonl(&trial_log_path(out), &result.trials)?;
    Ok(result)
}

pub fn trial_log_path(out: &Path) -> PathBuf {
    out.with_extension("trials.jsonl")
}
