use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use camot::evaluation::{clear_mot, temporal_coverage, Counts, EvalConfig, EvalTrack, GtBox};
use camot::geometry::{RigidTransform, Vec3};
use camot::inference::{solve_exhaustive, solve_multibranch, EnergyProblem};
use camot::observations::{build_observation_set, ObservationParams};
use camot::synthetic::{catalog, ObjectSpec, Scenario};
use camot::tracker::{similarity, FrameData, Tracker, TrackerParams};
use camot::{BBox, RleMask};

fn dense_mask(max_side: u32) -> impl Strategy<Value = (u32, u32, Vec<bool>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        (Just(h), Just(w), prop::collection::vec(any::<bool>(), (h * w) as usize))
    })
}

fn mask_pair(max_side: u32) -> impl Strategy<Value = (RleMask, Vec<bool>, RleMask, Vec<bool>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        let n = (h * w) as usize;
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)).prop_map(
            move |(a, b)| {
                (RleMask::encode(h, w, &a).unwrap(), a, RleMask::encode(h, w, &b).unwrap(), b)
            },
        )
    })
}

proptest! {
    #[test]
    fn rle_round_trip((h, w, dense) in dense_mask(24)) {
        let m = RleMask::encode(h, w, &dense).unwrap();
        prop_assert_eq!(m.decode(), dense.clone());
        prop_assert_eq!(RleMask::from_counts(h, w, m.counts()).unwrap(), m);
    }

    #[test]
    fn rle_matches_dense_oracle((a, da, b, db) in mask_pair(24)) {
        let count = |d: &[bool]| d.iter().filter(|&&x| x).count() as u64;
        let inter: Vec<bool> = da.iter().zip(&db).map(|(x, y)| *x && *y).collect();
        let union: Vec<bool> = da.iter().zip(&db).map(|(x, y)| *x || *y).collect();
        let (i, u) = (count(&inter), count(&union));
        prop_assert_eq!(a.area(), count(&da));
        prop_assert_eq!(a.intersection_area(&b).unwrap(), i);
        prop_assert_eq!(a.intersection(&b).unwrap().decode(), inter);
        prop_assert_eq!(a.union(&b).unwrap().decode(), union);
        let iou = if u == 0 { 0.0 } else { i as f64 / u as f64 };
        prop_assert_eq!(a.iou(&b).unwrap(), iou);
    }

    #[test]
    fn iou_bounds_and_symmetry((a, _, b, _) in mask_pair(24)) {
        let ab = a.iou(&b).unwrap();
        prop_assert_eq!(ab, b.iou(&a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(a.intersection_area(&b).unwrap() <= a.area().min(b.area()));
        prop_assert!(a.min_overlap(&b).unwrap() >= ab);
        if !a.is_empty() {
            prop_assert_eq!(a.iou(&a).unwrap(), 1.0);
        }
    }

    #[test]
    fn rigid_transforms_compose(
        angles in prop::array::uniform3(-3.0f64..3.0),
        t in prop::array::uniform3(prop::array::uniform3(-10.0f64..10.0)),
        p in prop::array::uniform3(-20.0f64..20.0),
    ) {
        let x: Vec<RigidTransform> = (0..3)
            .map(|i| RigidTransform::yaw(angles[i], Vec3::new(t[i][0], t[i][1], t[i][2])))
            .collect();
        let p = Vec3::new(p[0], p[1], p[2]);
        let left = x[0].compose(&x[1]).compose(&x[2]).apply(&p);
        let right = x[0].compose(&x[1].compose(&x[2])).apply(&p);
        prop_assert!((left - right).norm() < 1e-9);
        prop_assert!((x[0].compose(&x[0].inverse()).apply(&p) - p).norm() < 1e-9);
    }
}

fn problem(m: usize) -> impl Strategy<Value = EnergyProblem> {
    (
        prop::collection::vec(-2.0f64..1.0, m),
        prop::collection::vec(0.0f64..3.0, m * (m.saturating_sub(1)) / 2),
    )
        .prop_map(move |(unary, upper)| {
            let mut table = vec![0.0; m * m];
            let mut k = 0;
            for i in 0..m {
                for j in i + 1..m {
                    table[i * m + j] = upper[k];
                    table[j * m + i] = upper[k];
                    k += 1;
                }
            }
            EnergyProblem::new(unary, table).unwrap()
        })
}

proptest! {
    #[test]
    fn solver_energy_recomputes(p in (0usize..=10).prop_flat_map(problem)) {
        let exact = solve_exhaustive(&p, 20).unwrap();
        let beam = solve_multibranch(&p, 8);
        prop_assert!((exact.energy - p.energy(&exact.selection)).abs() < 1e-9);
        prop_assert!((beam.energy - p.energy(&beam.selection)).abs() < 1e-9);
        prop_assert!(exact.energy <= beam.energy + 1e-9);
        prop_assert!(exact.energy <= 0.0);
    }

    #[test]
    fn scaling_keeps_exhaustive_optimum(p in (1usize..=8).prop_flat_map(problem), scale in 0.1f64..10.0) {
        let m = p.len();
        let unary: Vec<f64> = (0..m).map(|i| p.unary(i) * scale).collect();
        let table: Vec<f64> = (0..m * m).map(|k| if k / m == k % m { 0.0 } else { p.pairwise(k / m, k % m) * scale }).collect();
        let scaled = EnergyProblem::new(unary, table).unwrap();
        let a = solve_exhaustive(&p, 20).unwrap();
        let b = solve_exhaustive(&scaled, 20).unwrap();
        // Tie-breaks may differ; the energy of either optimum must be optimal for both.
        prop_assert!((scaled.energy(&a.selection) - b.energy).abs() <= 1e-9 * scale.max(1.0));
        prop_assert!((p.energy(&b.selection) - a.energy).abs() <= 1e-9);
    }

    #[test]
    fn lone_hypothesis_selected_iff_negative(u in -2.0f64..2.0) {
        let p = EnergyProblem::new(vec![u], vec![0.0]).unwrap();
        prop_assert_eq!(solve_exhaustive(&p, 20).unwrap().selection[0], u < 0.0);
    }
}

fn eval_case() -> impl Strategy<Value = (Vec<EvalTrack>, Vec<GtBox>)> {
    let gt = prop::collection::vec((0u32..6, 0u64..4, 0u32..8, 1.0f64..60.0), 0..24);
    let tracks = prop::collection::vec((0u32..6, 0u64..5, 0u32..8), 0..24);
    (gt, tracks).prop_map(|(gt, tracks)| {
        let bx = |slot: u32| BBox::new(slot as f64 * 12.0, 0.0, 10.0, 10.0);
        let mut seen = std::collections::BTreeSet::new();
        let gt: Vec<GtBox> = gt
            .into_iter()
            .filter(|&(f, id, _, _)| seen.insert((f, id)))
            .map(|(frame, id, slot, d)| GtBox {
                frame,
                id,
                label: None,
                bbox: bx(slot),
                pos: Some([0.0, 0.0, d]),
            })
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        let tracks: Vec<EvalTrack> = tracks
            .into_iter()
            .filter(|&(f, id, _)| seen.insert((f, id)))
            .map(|(frame, id, slot)| EvalTrack {
                frame,
                id,
                bbox: bx(slot),
                label: None,
                distance: Some(15.0),
            })
            .collect();
        (tracks, gt)
    })
}

proptest! {
    #[test]
    fn mota_bounded_by_moda((tracks, gt) in eval_case()) {
        let r = clear_mot(&tracks, &gt, &EvalConfig::default()).unwrap();
        if let (Some(mota), Some(moda)) = (r.overall.mota, r.overall.moda) {
            prop_assert!(mota <= moda && moda <= 1.0);
        }
        let c = r.overall.counts;
        prop_assert_eq!(c.tp + c.fn_, c.gt);
        prop_assert_eq!(c.tp + c.fp, tracks.len() as u64);
    }

    #[test]
    fn bins_sum_to_overall((tracks, gt) in eval_case()) {
        let r = clear_mot(&tracks, &gt, &EvalConfig::default()).unwrap();
        let mut sum = Counts::default();
        for b in &r.bins {
            sum.add(&b.metrics.counts);
        }
        sum.add(&r.unbinned.counts);
        prop_assert_eq!(sum, r.overall.counts);
    }

    #[test]
    fn relabeling_keeps_detection_counts((tracks, gt) in eval_case(), offset in 100u64..1000) {
        let a = clear_mot(&tracks, &gt, &EvalConfig::default()).unwrap().overall.counts;
        let relabeled: Vec<EvalTrack> = tracks.iter().cloned().map(|mut t| { t.id = offset - t.id; t }).collect();
        let b = clear_mot(&relabeled, &gt, &EvalConfig::default()).unwrap().overall.counts;
        prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
    }

    #[test]
    fn coverage_monotone_in_overlap(shifts in prop::collection::vec(0.0f64..10.0, 6), which in 0usize..6, better in 0.0f64..1.0, lambda in 0.5f64..8.0) {
        let gt: BTreeMap<u32, BBox> = (0..6).map(|t| (t, BBox::new(0.0, 0.0, 10.0, 10.0))).collect();
        let hyp: BTreeMap<u32, BBox> = (0..6).map(|t| (t, BBox::new(shifts[t as usize], 0.0, 10.0, 10.0))).collect();
        let mut improved = hyp.clone();
        improved.insert(which as u32, BBox::new(shifts[which] * better, 0.0, 10.0, 10.0));
        let before = temporal_coverage(&[&hyp], &gt, 5, lambda);
        let after = temporal_coverage(&[&improved], &gt, 5, lambda);
        prop_assert!(after >= before - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Random scenes: every hypothesis stays contiguous with a PSD covariance,
    /// observation sets respect the cap and score order, and no two
    /// NMS-eligible hypotheses remain similar.
    #[test]
    fn tracker_fuzz(
        seed in any::<u64>(),
        objects in prop::collection::vec((-6.0f64..6.0, 8.0f64..30.0, -0.1f64..0.1, -0.1f64..0.1, any::<bool>()), 1..4),
        clutter in 0u32..10,
        over_seg in 0.0f64..0.4,
        dropout in 0.0f64..0.3,
    ) {
        let mut spec = catalog("two-crossing").unwrap();
        spec.seed = seed;
        spec.frames = 24;
        spec.corruption.clutter = clutter;
        spec.corruption.over_segmentation = over_seg;
        spec.corruption.dropout = dropout;
        spec.objects = objects
            .into_iter()
            .map(|(x, z, vx, vz, car)| ObjectSpec {
                label: if car { "car" } else { "pedestrian" }.into(),
                size: if car { [1.8, 1.5] } else { [0.6, 1.8] },
                start: [x, z],
                velocity: [vx, vz],
                hidden: Vec::new(),
            })
            .collect();
        let scenario = Scenario::new(spec).unwrap();
        let obs_params = ObservationParams { max_observations: 12, ..Default::default() };
        let params = TrackerParams::default();
        let mut tracker = Tracker::new(params, Default::default());
        for t in 0..scenario.len() {
            let f = scenario.frame(t).unwrap();
            let set = build_observation_set(&f.proposals, &f.ctx, &obs_params);
            prop_assert!(set.observations.len() <= 12);
            prop_assert!(set.observations.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert!(set.observations.iter().all(|o| !o.mask.is_empty()));
            tracker.step(Arc::new(FrameData::new(f.ctx, set.observations))).unwrap();
            let hyps = tracker.hypotheses();
            for h in hyps {
                prop_assert!(h.is_contiguous());
                prop_assert!(h.state.is_psd());
                prop_assert_eq!(h.last().frame, t);
            }
            let eligible: Vec<_> = hyps
                .iter()
                .filter(|h| (h.created as i64) < t as i64 - params.nms_window as i64)
                .collect();
            for (i, a) in eligible.iter().enumerate() {
                for b in &eligible[i + 1..] {
                    prop_assert!(similarity(a, b) <= params.nms_similarity);
                }
            }
        }
    }
}
