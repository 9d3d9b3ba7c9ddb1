//! Seeded benchmark: 50 random-search trials over the inference weights
//! against the default parameters on short clutter-storm sequences.
//! Minutes per run on one core, so opt-in:
//! `cargo test --release -p camot --test tune_benchmark -- --ignored --nocapture`.

use std::collections::BTreeMap;
use std::path::Path;

use camot::evaluation::EvalConfig;
use camot::pipeline::tune::{objective, tune, RandomSearch, Range, SequenceRef, TrainingSet, TuneSpec};
use camot::pipeline::Params;

const RUNS: u64 = 5;
const FRAMES: u32 = 20;

fn ranges() -> BTreeMap<String, Range> {
    let r = |min, max, log| Range {
        min,
        max,
        integer: false,
        log,
    };
    [
        ("inference.w_min", r(0.2, 3.0, true)),
        ("inference.w_sim", r(0.05, 2.0, true)),
        ("inference.w_seg", r(0.02, 1.0, true)),
        ("inference.w_sem", r(0.0, 1.0, false)),
        ("inference.lambda", r(2.0, 30.0, true)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[test]
#[ignore]
fn fifty_trials_beat_defaults_on_clutter_storm() {
    let mut wins = 0;
    for run in 0..RUNS {
        let mut sequence = SequenceRef::catalog("clutter-storm", 200 + run);
        sequence.frames = Some(FRAMES);
        let spec = TuneSpec {
            stage: 2,
            ranges: ranges(),
            trials: 50,
            seed: run,
            sequences: vec![sequence],
            base: None,
            coverage_k: 10,
            eval: EvalConfig::default(),
        };
        let set = TrainingSet::open(&spec.sequences, Path::new(".")).unwrap();
        let defaults = Params::default();
        let baseline = objective(2, &defaults, &set, spec.coverage_k, &spec.eval).unwrap();
        let mut search = RandomSearch::new(spec.ranges.clone(), spec.seed);
        let result = tune(&spec, &defaults, &set, &mut search).unwrap();
        let won = result.best_objective > baseline;
        println!(
            "run {run}: default MOTA {baseline:.4}, best of 50 {:.4} (trial {}) {}",
            result.best_objective,
            result.best_trial,
            if won { "beats defaults" } else { "does not beat defaults" }
        );
        wins += u64::from(won);
    }
    println!("{wins} of {RUNS} runs beat the defaults");
    assert!(wins * 10 >= RUNS * 8);
}
