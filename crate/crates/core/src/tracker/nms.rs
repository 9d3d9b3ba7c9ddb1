use super::hypothesis::Hypothesis;

/// Mean mask IoU over the frames two hypotheses share; 0 with no common frames.
pub fn similarity(a: &Hypothesis, b: &Hypothesis) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fb) in a.common_frames(b) {
        n += 1;
        let overlapping = match (&fa.bbox, &fb.bbox) {
            (Some(x), Some(y)) => x.intersects(y),
            _ => false,
        };
        if overlapping {
            sum += fa.mask.iou(&fb.mask).unwrap_or(0.0);
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Greedy suppression among hypotheses created before `t - window`, visited
/// in descending `strength` (ties to the lower id). Younger hypotheses are
/// neither pruned nor used to prune. Returns the survivors in their input
/// order and the ids of the pruned ones.
pub fn hypothesis_nms(
    hypotheses: Vec<Hypothesis>,
    t: u32,
    window: u32,
    threshold: f64,
    strength: impl Fn(&Hypothesis) -> f64,
) -> (Vec<Hypothesis>, Vec<u64>) {
    let eligible: Vec<usize> = hypotheses
        .iter()
        .enumerate()
        .filter(|(_, h)| (h.created as i64) < t as i64 - window as i64)
        .map(|(i, _)| i)
        .collect();
    let strengths: Vec<f64> = eligible.iter().map(|&i| strength(&hypotheses[i])).collect();
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.sort_by(|&a, &b| {
        strengths[b]
            .total_cmp(&strengths[a])
            .then(hypotheses[eligible[a]].id.cmp(&hypotheses[eligible[b]].id))
    });

    // Pairs whose extents do not meet have similarity 0.
    let extents: Vec<_> = hypotheses.iter().map(|h| h.extent(t)).collect();
    let similar = |k: usize, i: usize| match (&extents[k], &extents[i]) {
        (Some(a), Some(b)) if a.meets(b) => similarity(&hypotheses[k], &hypotheses[i]) > threshold,
        _ => 0.0 > threshold,
    };

    let mut pruned_mask = vec![false; hypotheses.len()];
    let mut kept: Vec<usize> = Vec::new();
    for o in order {
        let idx = eligible[o];
        if kept.iter().any(|&k| similar(k, idx)) {
            pruned_mask[idx] = true;
        } else {
            kept.push(idx);
        }
    }

    let mut pruned = Vec::new();
    let survivors = hypotheses
        .into_iter()
        .zip(pruned_mask)
        .filter_map(|(h, p)| {
            if p {
                pruned.push(h.id);
                None
            } else {
                Some(h)
            }
        })
        .collect();
    (survivors, pruned)
}
