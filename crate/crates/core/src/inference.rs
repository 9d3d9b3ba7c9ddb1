//! Per-frame MAP selection of hypotheses.
//!
//! The energy of a selection `b` is
//! `E(b) = Σ b_i ϑ_i + Σ_{i<j} b_i b_j ψ_ij`, where the unary `ϑ` rewards
//! confident, well-predicted hypotheses and the pairwise `ψ` penalizes
//! physical overlap. Only hypotheses with `ϑ < 0` can appear in a minimizer
//! (removing one never raises the energy, since `ψ ≥ 0`), so both solvers
//! run on that reduced candidate set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracker::Hypothesis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceParams {
    /// Temporal decay in frames.
    pub lambda: f64,
    pub w_min: f64,
    pub w_sim: f64,
    pub w_seg: f64,
    pub w_sem: f64,
    pub c_min: f64,
    pub exhaustive_limit: usize,
    pub branch_width: usize,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            lambda: 4.0,
            w_min: 1.0,
            w_sim: 1.0,
            w_seg: 0.5,
            w_sem: 1.0,
            c_min: 0.5,
            exhaustive_limit: 20,
            branch_width: 8,
        }
    }
}

impl InferenceParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && [self.w_min, self.w_sim, self.w_seg, self.w_sem]
                .iter()
                .all(|w| *w >= 0.0)
            && (0.0..=1.0).contains(&self.c_min)
            && self.branch_width >= 1
            && self.exhaustive_limit <= 30;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid inference parameters {self:?}")))
        }
    }
}

fn decay(t: u32, t_e: u32, lambda: f64) -> f64 {
    (-(t.abs_diff(t_e) as f64) / lambda).exp()
}

/// Truncated classifier score.
pub fn semantic_term(score: Option<f64>, c_min: f64) -> f64 {
    match score {
        Some(c) if c > c_min => c,
        _ => 0.0,
    }
}

/// Unary potential at `t_e`, summed over the hypothesis frames up to `t_e`.
pub fn unary(h: &Hypothesis, t_e: u32, p: &InferenceParams) -> f64 {
    let mut support = 0.0;
    for f in h.frames.iter().take_while(|f| f.frame <= t_e) {
        let sem = semantic_term(f.class.as_ref().map(|c| c.1), p.c_min);
        support +=
            decay(f.frame, t_e, p.lambda) * (p.w_sim * f.similarity + p.w_seg * f.score + p.w_sem * sem);
    }
    p.w_min - support
}

/// Overlap penalty at `t_e`, summed over the common frames up to `t_e`.
pub fn pairwise(a: &Hypothesis, b: &Hypothesis, t_e: u32, p: &InferenceParams) -> f64 {
    let mut sum = 0.0;
    for (fa, fb) in a.common_frames(b) {
        if fa.frame > t_e {
            break;
        }
        let overlapping = match (&fa.bbox, &fb.bbox) {
            (Some(x), Some(y)) => x.intersects(y),
            _ => false,
        };
        if overlapping {
            sum += decay(fa.frame, t_e, p.lambda) * fa.mask.min_overlap(&fb.mask).unwrap_or(0.0);
        }
    }
    sum
}

/// Track label: the class with the largest decay-weighted sum of truncated
/// per-frame scores.
pub fn track_label(h: &Hypothesis, t_e: u32, p: &InferenceParams) -> Option<String> {
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for f in h.frames.iter().take_while(|f| f.frame <= t_e) {
        if let Some((label, score)) = &f.class {
            let s = semantic_term(Some(*score), p.c_min);
            if s > 0.0 {
                *sums.entry(label.as_str()).or_default() += decay(f.frame, t_e, p.lambda) * s;
            }
        }
    }
    sums.into_iter()
        .fold(None, |best: Option<(&str, f64)>, (k, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
        .map(|(k, _)| k.to_string())
}

/// Quadratic binary energy with a dense symmetric interaction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProblem {
    unary: Vec<f64>,
    pairwise: Vec<f64>,
}

impl EnergyProblem {
    /// `pairwise` is row-major `m x m`; only entries `i != j` are read and
    /// the matrix must be symmetric.
    pub fn new(unary: Vec<f64>, pairwise: Vec<f64>) -> Result<Self> {
        let m = unary.len();
        if pairwise.len() != m * m {
            return Err(Error::InvalidInput(format!(
                "pairwise table has {} entries, expected {}",
                pairwise.len(),
                m * m
            )));
        }
        for i in 0..m {
            for j in 0..i {
                if pairwise[i * m + j] != pairwise[j * m + i] {
                    return Err(Error::InvalidInput(format!("pairwise table asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { unary, pairwise })
    }

    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    pub fn unary(&self, i: usize) -> f64 {
        self.unary[i]
    }

    pub fn pairwise(&self, i: usize, j: usize) -> f64 {
        self.pairwise[i * self.len() + j]
    }

    /// Energy of `b` recomputed from scratch; pairs counted once.
    pub fn energy(&self, b: &[bool]) -> f64 {
        let m = self.len();
        assert_eq!(b.len(), m, "selection length");
        let mut e = 0.0;
        for i in (0..m).filter(|&i| b[i]) {
            e += self.unary[i];
            for j in (i + 1..m).filter(|&j| b[j]) {
                e += self.pairwise[i * m + j];
            }
        }
        e
    }

    fn row(&self, i: usize) -> &[f64] {
        let m = self.len();
        &self.pairwise[i * m..(i + 1) * m]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Exhaustive,
    MultiBranch,
}

/// Binary indicator per hypothesis.
pub type SelectionVector = Vec<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub selection: SelectionVector,
    pub energy: f64,
}

fn energy_tol(e: f64) -> f64 {
    1e-12 * e.abs().max(1.0)
}

/// True when `(e, n, b)` ranks strictly before `(best_e, best_n, best_b)`:
/// lower energy, then fewer selected, then lexicographically smaller.
fn ranks_before(e: f64, n: usize, b: &[bool], best_e: f64, best_n: usize, best_b: &[bool]) -> bool {
    let tol = energy_tol(e.min(best_e));
    if e < best_e - tol {
        return true;
    }
    if e > best_e + tol {
        return false;
    }
    n < best_n || (n == best_n && b < best_b)
}

/// Exact minimizer over all `2^M` assignments.
pub fn solve_exhaustive(problem: &EnergyProblem, limit: usize) -> Result<Solution> {
    let m = problem.len();
    if m > limit {
        return Err(Error::InvalidInput(format!(
            "{m} hypotheses exceed the exhaustive limit {limit}"
        )));
    }
    struct Search<'a> {
        problem: &'a EnergyProblem,
        current: Vec<bool>,
        best: Vec<bool>,
        best_e: f64,
        best_n: usize,
    }
    impl Search<'_> {
        // `delta[j]` is the energy change of adding j given the current
        // prefix; each depth owns its copy so no error accumulates.
        fn visit(&mut self, depth: usize, energy: f64, count: usize, delta: &[f64]) {
            let m = self.problem.len();
            if depth == m {
                if ranks_before(energy, count, &self.current, self.best_e, self.best_n, &self.best) {
                    self.best.copy_from_slice(&self.current);
                    self.best_e = energy;
                    self.best_n = count;
                }
                return;
            }
            self.visit(depth + 1, energy, count, delta);
            let row = self.problem.row(depth);
            let next: Vec<f64> = delta.iter().zip(row).map(|(d, r)| d + r).collect();
            self.current[depth] = true;
            self.visit(depth + 1, energy + delta[depth], count + 1, &next);
            self.current[depth] = false;
        }
    }
    let mut search = Search {
        problem,
        current: vec![false; m],
        best: vec![false; m],
        best_e: 0.0,
        best_n: 0,
    };
    let delta = problem.unary.clone();
    search.visit(0, 0.0, 0, &delta);
    let energy = problem.energy(&search.best);
    Ok(Solution {
        selection: search.best,
        energy,
    })
}

#[derive(Clone)]
struct Branch {
    selected: Vec<bool>,
    count: usize,
    energy: f64,
    delta: Vec<f64>,
}

fn beam_search(problem: &EnergyProblem, width: usize) -> Solution {
    let m = problem.len();
    let root = Branch {
        selected: vec![false; m],
        count: 0,
        energy: 0.0,
        delta: problem.unary.clone(),
    };
    let mut best = root.clone();
    let mut beam = vec![root];
    while !beam.is_empty() {
        // (energy, branch, added)
        let mut ext: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, br) in beam.iter().enumerate() {
            for j in (0..m).filter(|&j| !br.selected[j] && br.delta[j] < 0.0) {
                ext.push((br.energy + br.delta[j], bi, j));
            }
        }
        ext.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next: Vec<Branch> = Vec::with_capacity(width);
        for (energy, bi, j) in ext {
            if next.len() == width {
                break;
            }
            let parent = &beam[bi];
            let mut selected = parent.selected.clone();
            selected[j] = true;
            if next.iter().any(|b| b.selected == selected) {
                continue;
            }
            let row = problem.row(j);
            let delta = parent.delta.iter().zip(row).map(|(d, r)| d + r).collect();
            next.push(Branch {
                selected,
                count: parent.count + 1,
                energy,
                delta,
            });
        }
        for br in &next {
            if ranks_before(br.energy, br.count, &br.selected, best.energy, best.count, &best.selected) {
                best = br.clone();
            }
        }
        beam = next;
    }
    let energy = problem.energy(&best.selected);
    Solution {
        selection: best.selected,
        energy,
    }
}

/// Beam search over improving insertions. The result is never worse than
/// plain greedy insertion (`width = 1`).
pub fn solve_multibranch(problem: &EnergyProblem, width: usize) -> Solution {
    let beam = beam_search(problem, width.max(1));
    if width <= 1 {
        return beam;
    }
    let greedy = beam_search(problem, 1);
    let n = |s: &Solution| s.selection.iter().filter(|&&b| b).count();
    if ranks_before(greedy.energy, n(&greedy), &greedy.selection, beam.energy, n(&beam), &beam.selection) {
        greedy
    } else {
        beam
    }
}

/// Dispatches on problem size.
pub fn solve(problem: &EnergyProblem, p: &InferenceParams) -> (Solution, Solver) {
    if problem.len() <= p.exhaustive_limit {
        let s = solve_exhaustive(problem, p.exhaustive_limit).expect("size checked");
        (s, Solver::Exhaustive)
    } else {
        (solve_multibranch(problem, p.branch_width), Solver::MultiBranch)
    }
}

/// Selection over a hypothesis set at frame `t_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Indicator per input hypothesis.
    pub selected: SelectionVector,
    pub unaries: Vec<f64>,
    /// Input indices of the hypotheses that entered the energy problem.
    pub candidates: Vec<usize>,
    pub energy: f64,
    pub solver: Solver,
}

/// Builds the energy problem over the hypotheses with negative unary.
/// Candidates are ordered newest first, so lexicographic tie-breaks favour
/// older hypotheses.
pub fn build_problem(
    hypotheses: &[Hypothesis],
    t_e: u32,
    p: &InferenceParams,
) -> (Vec<f64>, Vec<usize>, EnergyProblem) {
    let unaries: Vec<f64> = hypotheses.par_iter().map(|h| unary(h, t_e, p)).collect();
    let mut candidates: Vec<usize> = (0..hypotheses.len()).filter(|&i| unaries[i] < 0.0).collect();
    candidates.sort_by(|&a, &b| hypotheses[b].id.cmp(&hypotheses[a].id));
    let m = candidates.len();
    let extents: Vec<_> = candidates.iter().map(|&i| hypotheses[i].extent(t_e)).collect();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (i + 1..m)
                .map(|j| match (&extents[i], &extents[j]) {
                    (Some(a), Some(b)) if a.meets(b) => {
                        pairwise(&hypotheses[candidates[i]], &hypotheses[candidates[j]], t_e, p)
                    }
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    let mut table = vec![0.0; m * m];
    for (i, row) in rows.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let j = i + 1 + k;
            table[i * m + j] = v;
            table[j * m + i] = v;
        }
    }
    let problem = EnergyProblem {
        unary: candidates.iter().map(|&i| unaries[i]).collect(),
        pairwise: table,
    };
    (unaries, candidates, problem)
}

pub fn select(hypotheses: &[Hypothesis], t_e: u32, p: &InferenceParams) -> Selection {
    let (unaries, candidates, problem) = build_problem(hypotheses, t_e, p);
    let (solution, solver) = solve(&problem, p);
    let mut selected = vec![false; hypotheses.len()];
    for (k, &i) in candidates.iter().enumerate() {
        selected[i] = solution.selection[k];
    }
    Selection {
        selected,
        unaries,
        candidates,
        energy: solution.energy,
        solver,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::rle::RleMask;
    use crate::tracker::{KalmanState, TrackFrame};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(r0: u32, c0: u32, h: u32, w: u32) -> RleMask {
        let mut dense = vec![false; 20 * 20];
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                dense[(r * 20 + c) as usize] = true;
            }
        }
        RleMask::encode(20, 20, &dense).unwrap()
    }

    fn frame(t: u32, mask: RleMask, sim: f64, score: f64, class: Option<(&str, f64)>) -> TrackFrame {
        TrackFrame {
            frame: t,
            bbox: mask.bbox(),
            mask,
            observation: Some(0),
            score,
            similarity: sim,
            class: class.map(|(l, s)| (l.to_string(), s)),
            pos: Vec3::zeros(),
            vel: [0.0, 0.0],
        }
    }

    fn hyp(id: u64, frames: Vec<TrackFrame>) -> Hypothesis {
        Hypothesis {
            id,
            created: frames.last().unwrap().frame,
            frames,
            state: KalmanState::new(Vec3::zeros(), [0.0, 0.0], 1.0, 1.0),
            misses: 0,
        }
    }

    fn zero_weights() -> InferenceParams {
        InferenceParams {
            w_min: 0.0,
            w_sim: 0.0,
            w_seg: 0.0,
            w_sem: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn unary_degenerate_weights() {
        let p = InferenceParams { w_min: 0.7, ..zero_weights() };
        let h = hyp(0, vec![frame(3, rect(0, 0, 2, 2), 1.0, 1.0, Some(("car", 0.9)))]);
        assert_eq!(unary(&h, 3, &p), 0.7);
    }

    #[test]
    fn unary_single_frame() {
        let p = InferenceParams { w_sim: 1.0, w_seg: 1.0, ..zero_weights() };
        let h = hyp(0, vec![frame(5, rect(0, 0, 2, 2), 1.0, 1.0, None)]);
        assert_eq!(unary(&h, 5, &p), -2.0);
    }

    #[test]
    fn unary_decay_sum() {
        let p = InferenceParams { lambda: 2.0, w_sim: 1.0, ..zero_weights() };
        let frames = (0..3).map(|t| frame(t, rect(0, 0, 2, 2), 1.0, 1.0, None)).collect();
        let h = hyp(0, frames);
        let want = -(1.0 + (-0.5f64).exp() + (-1.0f64).exp());
        assert!((unary(&h, 2, &p) - want).abs() < 1e-12);
    }

    #[test]
    fn unary_ignores_frames_after_t_e_and_predicted_frames() {
        let p = InferenceParams { lambda: 1.0, w_sim: 1.0, w_seg: 1.0, ..zero_weights() };
        let mut predicted = frame(1, rect(0, 0, 2, 2), 0.0, 0.0, None);
        predicted.observation = None;
        let h = hyp(
            0,
            vec![
                frame(0, rect(0, 0, 2, 2), 0.5, 0.5, None),
                predicted,
                frame(2, rect(0, 0, 2, 2), 1.0, 1.0, None),
            ],
        );
        let want = -(-1.0f64).exp();
        assert!((unary(&h, 1, &p) - want).abs() < 1e-12);
    }

    #[test]
    fn semantic_truncation() {
        assert_eq!(semantic_term(Some(0.9), 0.5), 0.9);
        assert_eq!(semantic_term(Some(0.3), 0.5), 0.0);
        assert_eq!(semantic_term(Some(0.5), 0.5), 0.0);
        assert_eq!(semantic_term(None, 0.5), 0.0);
    }

    #[test]
    fn semantic_weight_is_monotone() {
        let h = hyp(0, vec![frame(0, rect(0, 0, 2, 2), 0.3, 0.4, Some(("ped", 0.8)))]);
        let mut prev = f64::INFINITY;
        for w in [0.0, 0.5, 1.0, 2.0] {
            let u = unary(&h, 0, &InferenceParams { w_sem: w, ..Default::default() });
            assert!(u < prev);
            prev = u;
        }
    }

    #[test]
    fn pairwise_examples() {
        let p = InferenceParams::default();
        let a = hyp(0, vec![frame(0, rect(0, 0, 3, 3), 1.0, 1.0, None)]);
        let b = hyp(1, vec![frame(0, rect(10, 10, 3, 3), 1.0, 1.0, None)]);
        assert_eq!(pairwise(&a, &b, 0, &p), 0.0);
        let small = hyp(2, vec![frame(0, rect(1, 1, 1, 1), 1.0, 1.0, None)]);
        assert_eq!(pairwise(&a, &small, 0, &p), 1.0);
        assert_eq!(pairwise(&small, &a, 0, &p), 1.0);
        let later = hyp(3, vec![frame(4, rect(0, 0, 3, 3), 1.0, 1.0, None)]);
        assert_eq!(pairwise(&a, &later, 4, &p), 0.0);
    }

    fn random_hypothesis(rng: &mut ChaCha8Rng, id: u64) -> Hypothesis {
        let start = rng.random_range(0..5);
        let len = rng.random_range(1..6);
        let frames = (start..start + len)
            .map(|t| {
                let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
                let m = rect(rng.random_range(0..20 - h), rng.random_range(0..20 - w), h, w);
                frame(t, m, rng.random(), rng.random(), None)
            })
            .collect();
        hyp(id, frames)
    }

    #[test]
    fn pairwise_matches_dense_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = InferenceParams { lambda: 3.0, ..Default::default() };
        for _ in 0..300 {
            let a = random_hypothesis(&mut rng, 0);
            let b = random_hypothesis(&mut rng, 1);
            let t_e = 10;
            let mut want = 0.0;
            for fa in &a.frames {
                for fb in b.frames.iter().filter(|fb| fb.frame == fa.frame) {
                    let (da, db) = (fa.mask.decode(), fb.mask.decode());
                    let inter = da.iter().zip(&db).filter(|(x, y)| **x && **y).count() as f64;
                    let na = da.iter().filter(|x| **x).count() as f64;
                    let nb = db.iter().filter(|x| **x).count() as f64;
                    want += (-((t_e - fa.frame) as f64) / 3.0).exp() * inter / na.min(nb);
                }
            }
            let got = pairwise(&a, &b, t_e, &p);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            assert_eq!(got, pairwise(&b, &a, t_e, &p));
        }
    }

    #[test]
    fn track_label_weighted_majority() {
        let p = InferenceParams { lambda: 1.0, ..Default::default() };
        let m = rect(0, 0, 2, 2);
        let h = hyp(
            0,
            vec![
                frame(0, m.clone(), 1.0, 1.0, Some(("car", 0.9))),
                frame(1, m.clone(), 1.0, 1.0, Some(("car", 0.9))),
                frame(2, m.clone(), 1.0, 1.0, Some(("ped", 0.8))),
                frame(3, m.clone(), 1.0, 1.0, Some(("ped", 0.4))),
            ],
        );
        assert_eq!(track_label(&h, 3, &p).as_deref(), Some("ped"));
        let none = hyp(1, vec![frame(0, m, 1.0, 1.0, Some(("car", 0.2)))]);
        assert_eq!(track_label(&none, 0, &p), None);
    }

    fn problem(unary: Vec<f64>, pairs: &[(usize, usize, f64)]) -> EnergyProblem {
        let m = unary.len();
        let mut t = vec![0.0; m * m];
        for &(i, j, v) in pairs {
            t[i * m + j] = v;
            t[j * m + i] = v;
        }
        EnergyProblem::new(unary, t).unwrap()
    }

    #[test]
    fn exhaustive_single() {
        let s = solve_exhaustive(&problem(vec![-0.1], &[]), 20).unwrap();
        assert_eq!(s.selection, vec![true]);
        let s = solve_exhaustive(&problem(vec![0.1], &[]), 20).unwrap();
        assert_eq!(s.selection, vec![false]);
        let s = solve_exhaustive(&problem(vec![0.0], &[]), 20).unwrap();
        assert_eq!(s.selection, vec![false]);
    }

    #[test]
    fn exhaustive_tie_prefers_lexicographically_smallest() {
        let s = solve_exhaustive(&problem(vec![-1.0, -1.0], &[(0, 1, 3.0)]), 20).unwrap();
        assert_eq!(s.selection, vec![false, true]);
        assert_eq!(s.energy, -1.0);
    }

    #[test]
    fn exhaustive_refuses_over_limit() {
        assert!(solve_exhaustive(&problem(vec![-1.0; 4], &[]), 3).is_err());
    }

    #[test]
    fn exhaustive_tie_prefers_fewer() {
        // {0} and {1, 2} both reach -2.
        let p = problem(vec![-2.0, -1.0, -1.0], &[(0, 1, 5.0), (0, 2, 5.0)]);
        let s = solve_exhaustive(&p, 20).unwrap();
        assert_eq!(s.selection, vec![true, false, false]);
    }

    fn random_problem(rng: &mut ChaCha8Rng, m: usize) -> EnergyProblem {
        let unary = (0..m).map(|_| rng.random_range(-2.0..0.5)).collect();
        let mut pairs = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                if rng.random_bool(0.4) {
                    pairs.push((i, j, rng.random_range(0.0..3.0)));
                }
            }
        }
        problem(unary, &pairs)
    }

    fn brute_force(p: &EnergyProblem) -> f64 {
        let m = p.len();
        (0u32..1 << m)
            .map(|mask| p.energy(&(0..m).map(|i| mask >> i & 1 == 1).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn exhaustive_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = rng.random_range(0..10);
            let p = random_problem(&mut rng, m);
            let s = solve_exhaustive(&p, 20).unwrap();
            assert!((s.energy - brute_force(&p)).abs() < 1e-9);
            assert!((s.energy - p.energy(&s.selection)).abs() < 1e-9);
        }
    }

    #[test]
    fn multibranch_against_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let mut optimal = 0;
        for _ in 0..500 {
            let m = rng.random_range(1..=12);
            let p = random_problem(&mut rng, m);
            let best = brute_force(&p);
            let mb = solve_multibranch(&p, 8);
            let greedy = solve_multibranch(&p, 1);
            assert!(mb.energy <= greedy.energy + 1e-12);
            assert!((mb.energy - p.energy(&mb.selection)).abs() < 1e-9);
            if (mb.energy - best).abs() < 1e-9 {
                optimal += 1;
            }
        }
        assert!(optimal >= 450, "optimal on {optimal}/500");
    }

    #[test]
    fn multibranch_trivial_cases() {
        let s = solve_multibranch(&problem(vec![], &[]), 8);
        assert!(s.selection.is_empty());
        let s = solve_multibranch(&problem(vec![0.5, 1.0, 0.0], &[]), 8);
        assert_eq!(s.selection, vec![false; 3]);
    }

    #[test]
    fn solver_dispatch_boundary() {
        let p = InferenceParams { exhaustive_limit: 5, ..Default::default() };
        let (_, s) = solve(&problem(vec![-1.0; 5], &[]), &p);
        assert_eq!(s, Solver::Exhaustive);
        let (_, s) = solve(&problem(vec![-1.0; 6], &[]), &p);
        assert_eq!(s, Solver::MultiBranch);
        let (sol, s) = solve(&problem(vec![], &[]), &p);
        assert_eq!(s, Solver::Exhaustive);
        assert!(sol.selection.is_empty());
    }

    #[test]
    fn select_prefers_older_duplicate() {
        let p = InferenceParams { w_seg: 0.0, ..Default::default() };
        let m = rect(2, 2, 4, 4);
        let frames: Vec<_> = (0..3).map(|t| frame(t, m.clone(), 1.0, 1.0, None)).collect();
        let hs = vec![hyp(7, frames.clone()), hyp(3, frames)];
        let s = select(&hs, 2, &p);
        assert_eq!(s.selected, vec![false, true]);
        assert_eq!(s.candidates, vec![0, 1]);
    }

    #[test]
    fn energy_scaling_preserves_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let m = rng.random_range(1..9);
            let p = random_problem(&mut rng, m);
            let scaled = EnergyProblem::new(
                p.unary.iter().map(|u| u * 2.5).collect(),
                p.pairwise.iter().map(|u| u * 2.5).collect(),
            )
            .unwrap();
            let a = solve_exhaustive(&p, 20).unwrap();
            let b = solve_exhaustive(&scaled, 20).unwrap();
            assert!((scaled.energy(&a.selection) - b.energy).abs() < 1e-9);
        }
    }
}
