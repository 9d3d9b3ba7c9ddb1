//! CLEAR MOT metrics and the temporal-coverage objective.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// One ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub frame: u32,
    pub id: u64,
    #[serde(default)]
    pub label: Option<String>,
    pub bbox: BBox,
    /// Camera-frame position, used for distance binning.
    #[serde(default)]
    pub pos: Option<[f64; 3]>,
}

impl GtBox {
    pub fn distance(&self) -> Option<f64> {
        self.pos.map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
    }
}

/// One reported track box.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrack {
    pub frame: u32,
    pub id: u64,
    pub bbox: BBox,
    pub label: Option<String>,
    /// Distance from the camera, used to bin false positives.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Strictly increasing edges; a final open bin covers everything beyond the last edge.
    pub distance_bins: Vec<f64>,
    pub categories: Option<Vec<String>>,
    pub lambda: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            distance_bins: vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0],
            categories: None,
            lambda: 4.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidInput(format!("IoU threshold {} outside (0,1]", self.iou_threshold)));
        }
        if self.distance_bins.is_empty() || self.distance_bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("distance bin edges must be non-empty and strictly increasing".into()));
        }
        if self.lambda <= 0.0 {
            return Err(Error::InvalidInput("lambda must be positive".into()));
        }
        Ok(())
    }

    fn bin_of(&self, d: Option<f64>) -> Option<usize> {
        let d = d?;
        let edges = &self.distance_bins;
        if d < edges[0] {
            return None;
        }
        Some(edges.iter().rposition(|&e| d >= e).unwrap_or(0))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gt: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub idsw: u64,
}

impl Counts {
    pub fn add(&mut self, o: &Counts) {
        self.gt += o.gt;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.idsw += o.idsw;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotMetrics {
    #[serde(flatten)]
    pub counts: Counts,
    /// `None` when there is no ground truth.
    pub mota: Option<f64>,
    pub moda: Option<f64>,
    pub recall: Option<f64>,
    /// 1 when nothing was reported.
    pub precision: f64,
}

impl From<Counts> for MotMetrics {
    fn from(c: Counts) -> Self {
        let gt = c.gt as f64;
        let ratio = |errors: u64| (c.gt > 0).then(|| 1.0 - errors as f64 / gt);
        let reported = c.tp + c.fp;
        Self {
            counts: c,
            mota: ratio(c.fp + c.fn_ + c.idsw),
            moda: ratio(c.fp + c.fn_),
            recall: (c.gt > 0).then(|| c.tp as f64 / gt),
            precision: if reported == 0 {
                1.0
            } else {
                c.tp as f64 / reported as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub min: f64,
    /// `None` for the open last bin.
    pub max: Option<f64>,
    pub metrics: MotMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    pub overall: MotMetrics,
    pub bins: Vec<BinReport>,
    /// Events that could not be binned for lack of a distance.
    pub unbinned: MotMetrics,
    pub categories: BTreeMap<String, MotMetrics>,
}

impl MotReport {
    pub fn table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>6} {:>6} {:>6} {:>5} {:>8} {:>8} {:>8} {:>9}",
            "subset", "GT", "TP", "FP", "FN", "IDSW", "MOTA", "MODA", "recall", "precision"
        );
        let mut row = |name: &str, m: &MotMetrics| {
            let c = &m.counts;
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>6} {:>6} {:>6} {:>5} {:>8} {:>8} {:>8} {:>9.4}",
                name,
                c.gt,
                c.tp,
                c.fp,
                c.fn_,
                c.idsw,
                fmt_opt(m.mota),
                fmt_opt(m.moda),
                fmt_opt(m.recall),
                m.precision
            );
        };
        row("all", &self.overall);
        for b in &self.bins {
            let name = match b.max {
                Some(max) => format!("{}-{} m", b.min, max),
                None => format!(">={} m", b.min),
            };
            row(&name, &b.metrics);
        }
        for (c, m) in &self.categories {
            row(c, m);
        }
        s
    }

    pub fn bins_csv(&self) -> String {
        let mut s = String::from("min,max,gt,tp,fp,fn,idsw,mota,moda,recall,precision\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for b in &self.bins {
            let (m, c) = (&b.metrics, &b.metrics.counts);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                b.min,
                opt(b.max),
                c.gt,
                c.tp,
                c.fp,
                c.fn_,
                c.idsw,
                opt(m.mota),
                opt(m.moda),
                opt(m.recall),
                m.precision
            );
        }
        s
    }
}

fn check_unique<'a>(what: &str, keys: impl Iterator<Item = (u32, u64)> + 'a) -> Result<()> {
    let mut seen = BTreeSet::new();
    for k in keys {
        if !seen.insert(k) {
            return Err(Error::InvalidInput(format!("duplicate {what} entry for id {} at frame {}", k.1, k.0)));
        }
    }
    Ok(())
}

/// Per-bin tallies; index `bins.len()` collects unbinned events.
fn clear_mot_counts(tracks: &[&EvalTrack], gt: &[&GtBox], config: &EvalConfig) -> Vec<Counts> {
    let nbins = config.distance_bins.len();
    let mut counts = vec![Counts::default(); nbins + 1];
    let slot = |d: Option<f64>| config.bin_of(d).unwrap_or(nbins);

    let mut gt_by_frame: BTreeMap<u32, Vec<&GtBox>> = BTreeMap::new();
    for g in gt {
        gt_by_frame.entry(g.frame).or_default().push(g);
    }
    let mut tr_by_frame: BTreeMap<u32, Vec<&EvalTrack>> = BTreeMap::new();
    for t in tracks {
        tr_by_frame.entry(t.frame).or_default().push(t);
    }
    let frames: BTreeSet<u32> = gt_by_frame.keys().chain(tr_by_frame.keys()).copied().collect();

    // Correspondences of the previous frame, and the last track ever matched per GT id.
    let mut previous: HashMap<u64, u64> = HashMap::new();
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    let (no_gt, no_tr) = (Vec::new(), Vec::new());
    for t in frames {
        let gs = gt_by_frame.get(&t).unwrap_or(&no_gt);
        let ts = tr_by_frame.get(&t).unwrap_or(&no_tr);
        let mut gt_taken = vec![false; gs.len()];
        let mut tr_taken = vec![false; ts.len()];
        let mut matches: Vec<(usize, usize)> = Vec::new();
        let iou = |gi: usize, ti: usize| gs[gi].bbox.iou(&ts[ti].bbox);

        for (gi, g) in gs.iter().enumerate() {
            if let Some(&tid) = previous.get(&g.id) {
                if let Some(ti) = ts.iter().position(|tr| tr.id == tid) {
                    if !tr_taken[ti] && iou(gi, ti) >= config.iou_threshold {
                        gt_taken[gi] = true;
                        tr_taken[ti] = true;
                        matches.push((gi, ti));
                    }
                }
            }
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for gi in (0..gs.len()).filter(|&g| !gt_taken[g]) {
            for ti in (0..ts.len()).filter(|&t| !tr_taken[t]) {
                let v = iou(gi, ti);
                if v >= config.iou_threshold {
                    pairs.push((v, gi, ti));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, gi, ti) in pairs {
            if !gt_taken[gi] && !tr_taken[ti] {
                gt_taken[gi] = true;
                tr_taken[ti] = true;
                matches.push((gi, ti));
            }
        }

        previous.clear();
        for &(gi, ti) in &matches {
            let (g, tr) = (gs[gi], ts[ti]);
            let c = &mut counts[slot(g.distance())];
            c.tp += 1;
            if last_match.get(&g.id).is_some_and(|&prev| prev != tr.id) {
                c.idsw += 1;
            }
            last_match.insert(g.id, tr.id);
            previous.insert(g.id, tr.id);
        }
        for (gi, g) in gs.iter().enumerate() {
            let c = &mut counts[slot(g.distance())];
            c.gt += 1;
            if !gt_taken[gi] {
                c.fn_ += 1;
            }
        }
        for (ti, tr) in ts.iter().enumerate() {
            if !tr_taken[ti] {
                counts[slot(tr.distance)].fp += 1;
            }
        }
    }
    counts
}

/// CLEAR MOT evaluation: greedy IoU matching per frame that first keeps
/// the previous frame's correspondences. An identity switch is counted when
/// a ground-truth object is matched to a different track than the last one
/// it was matched to.
pub fn clear_mot(tracks: &[EvalTrack], gt: &[GtBox], config: &EvalConfig) -> Result<MotReport> {
    config.validate()?;
    check_unique("track", tracks.iter().map(|t| (t.frame, t.id)))?;
    check_unique("ground-truth", gt.iter().map(|g| (g.frame, g.id)))?;
    let all_t: Vec<&EvalTrack> = tracks.iter().collect();
    let all_g: Vec<&GtBox> = gt.iter().collect();
    let per_bin = clear_mot_counts(&all_t, &all_g, config);
    let mut total = Counts::default();
    for c in &per_bin {
        total.add(c);
    }
    let nbins = config.distance_bins.len();
    let bins = (0..nbins)
        .map(|i| BinReport {
            min: config.distance_bins[i],
            max: config.distance_bins.get(i + 1).copied(),
            metrics: per_bin[i].into(),
        })
        .collect();
    let mut categories = BTreeMap::new();
    for cat in config.categories.iter().flatten() {
        let ts: Vec<&EvalTrack> = tracks.iter().filter(|t| t.label.as_deref() == Some(cat)).collect();
        let gs: Vec<&GtBox> = gt.iter().filter(|g| g.label.as_deref() == Some(cat)).collect();
        let mut c = Counts::default();
        for b in clear_mot_counts(&ts, &gs, config) {
            c.add(&b);
        }
        categories.insert(cat.clone(), c.into());
    }
    Ok(MotReport {
        overall: total.into(),
        bins,
        unbinned: per_bin[nbins].into(),
        categories,
    })
}

/// Frames in the temporal-coverage window, ending at `t`.
pub const COVERAGE_WINDOW: u32 = 6;

/// Best decay-weighted box overlap of any hypothesis with a ground-truth
/// track over the window ending at `t`.
pub fn temporal_coverage(
    hypotheses: &[&BTreeMap<u32, BBox>],
    gt_track: &BTreeMap<u32, BBox>,
    t: u32,
    lambda: f64,
) -> f64 {
    let start = t.saturating_sub(COVERAGE_WINDOW - 1);
    hypotheses
        .iter()
        .map(|h| {
            (start..=t)
                .map(|tau| match (h.get(&tau), gt_track.get(&tau)) {
                    (Some(a), Some(b)) => ((tau as f64 - t as f64) / lambda).exp() * a.iou(b),
                    _ => 0.0,
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// A hypothesis as seen by the coverage objective at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageHypothesis {
    pub strength: f64,
    pub boxes: BTreeMap<u32, BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageFrame {
    pub frame: u32,
    pub hypotheses: Vec<CoverageHypothesis>,
}

impl CoverageFrame {
    /// Keeps the `k` strongest hypotheses, ties to input order.
    pub fn top_k(mut self, k: usize) -> Self {
        let mut order: Vec<usize> = (0..self.hypotheses.len()).collect();
        order.sort_by(|&a, &b| self.hypotheses[b].strength.total_cmp(&self.hypotheses[a].strength).then(a.cmp(&b)));
        order.truncate(k);
        let mut hs: Vec<Option<CoverageHypothesis>> = self.hypotheses.drain(..).map(Some).collect();
        self.hypotheses = order.into_iter().map(|i| hs[i].take().expect("unique index")).collect();
        self
    }
}

/// Mean temporal coverage over all (ground-truth object, frame) pairs,
/// with only the `k` strongest hypotheses of each frame eligible.
pub fn coverage_objective(frames: &[CoverageFrame], gt: &[GtBox], k: usize, lambda: f64) -> f64 {
    let mut tracks: BTreeMap<u64, BTreeMap<u32, BBox>> = BTreeMap::new();
    for g in gt {
        tracks.entry(g.id).or_default().insert(g.frame, g.bbox);
    }
    let by_frame: HashMap<u32, &CoverageFrame> = frames.iter().map(|f| (f.frame, f)).collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for track in tracks.values() {
        for &t in track.keys() {
            n += 1;
            let Some(f) = by_frame.get(&t) else { continue };
            let mut order: Vec<&CoverageHypothesis> = f.hypotheses.iter().collect();
            order.sort_by(|a, b| b.strength.total_cmp(&a.strength));
            let eligible: Vec<&BTreeMap<u32, BBox>> = order.iter().take(k).map(|h| &h.boxes).collect();
            sum += temporal_coverage(&eligible, track, t, lambda);
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
