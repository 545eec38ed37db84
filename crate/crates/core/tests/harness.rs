use std::collections::BTreeMap;

use replayq::harness::{
    benchmark, generate_synthetic, grid_search, rows_to_csv, run_continual, select_on_synthetic, ReplayPlan,
    SyntheticConfig, SyntheticDataset, DEFAULT_BUDGET_K,
};
use replayq::selector::{QualityCandidateSet, DEFAULT_QUALITIES};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Nearest-class-mean accuracy after each phase when every seen class is
/// trained on all of its original samples at once.
fn joint_accuracies(ds: &SyntheticDataset) -> Vec<f64> {
    let mut out = Vec::new();
    for phase in 0..ds.config.phases {
        let seen: Vec<&String> = (0..=phase).flat_map(|p| ds.phase_classes(p)).collect();
        let means: BTreeMap<&str, Vec<f64>> = seen
            .iter()
            .map(|c| {
                let ids = ds.class_ids(c);
                let mut m = vec![0.0; ds.config.dim];
                for id in &ids {
                    for (a, v) in m.iter_mut().zip(ds.original.column_of(id).unwrap()) {
                        *a += *v as f64;
                    }
                }
                m.iter_mut().for_each(|a| *a /= ids.len() as f64);
                (c.as_str(), m)
            })
            .collect();
        let (mut correct, mut total) = (0, 0);
        for ((_, x), label) in ds.test.columns().zip(&ds.test_labels) {
            if !means.contains_key(label.as_str()) {
                continue;
            }
            total += 1;
            let best = means
                .iter()
                .map(|(c, m)| (m.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>(), *c))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)))
                .unwrap()
                .1;
            if best == label {
                correct += 1;
            }
        }
        out.push(correct as f64 / total as f64);
    }
    out
}

#[test]
fn full_replay_matches_joint_training() {
    for seed in [1, 9] {
        let ds = generate_synthetic(&SyntheticConfig::with_seed(seed));
        let run = run_continual(&ds, ReplayPlan::Full, DEFAULT_BUDGET_K).unwrap();
        let joint = joint_accuracies(&ds);
        for (a, b) in run.metrics.per_phase_accuracy.iter().zip(&joint) {
            assert!((a - b).abs() <= 1e-9, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn single_phase_aic_is_its_accuracy() {
    let ds = generate_synthetic(&SyntheticConfig {
        phases: 1,
        ..SyntheticConfig::with_seed(2)
    });
    let run = run_continual(&ds, ReplayPlan::NoReplay, DEFAULT_BUDGET_K).unwrap();
    assert_eq!(run.metrics.per_phase_accuracy.len(), 1);
    assert_eq!(run.metrics.aic, run.metrics.per_phase_accuracy[0]);
    assert_eq!(run.metrics.averaged_forgetting, 0.0);
}

#[test]
fn replay_never_hurts() {
    for seed in SEEDS {
        let ds = generate_synthetic(&SyntheticConfig::with_seed(seed));
        let without = run_continual(&ds, ReplayPlan::NoReplay, DEFAULT_BUDGET_K)
            .unwrap()
            .metrics
            .aic;
        for q in DEFAULT_QUALITIES {
            let with = run_continual(&ds, ReplayPlan::Quality(q), DEFAULT_BUDGET_K)
                .unwrap()
                .metrics
                .aic;
            assert!(with >= without, "seed {seed} q={q}: {with} < {without}");
        }
    }
}

#[test]
fn forgetting_is_never_positive() {
    let ds = generate_synthetic(&SyntheticConfig::with_seed(4));
    for plan in [ReplayPlan::NoReplay, ReplayPlan::Quality(50), ReplayPlan::Full] {
        let m = run_continual(&ds, plan, DEFAULT_BUDGET_K).unwrap().metrics;
        assert!(m.averaged_forgetting <= 0.0);
        assert!((0.0..=1.0).contains(&m.aic));
    }
}

#[test]
fn lossless_compression_favours_the_lowest_quality() {
    // 100 training samples per class, so every drop in quality buys more exemplars.
    for seed in SEEDS {
        let ds = generate_synthetic(&SyntheticConfig {
            noise_scale: 0.0,
            samples_per_class: 125,
            phases: 3,
            ..SyntheticConfig::with_seed(seed)
        });
        let grid = grid_search(&ds, &DEFAULT_QUALITIES, DEFAULT_BUDGET_K).unwrap();
        let n: Vec<f64> = grid.rows.iter().map(|r| r.n_per_class).collect();
        assert!(n.windows(2).all(|w| w[0] > w[1]), "{n:?}");
        assert_eq!(grid.best_q, 10, "seed {seed}: {:?}", grid.rows);
    }
}

#[test]
fn extreme_noise_favours_the_highest_quality() {
    for seed in SEEDS {
        let ds = generate_synthetic(&SyntheticConfig {
            noise_scale: 1000.0,
            ..SyntheticConfig::with_seed(seed)
        });
        let grid = grid_search(&ds, &DEFAULT_QUALITIES, DEFAULT_BUDGET_K).unwrap();
        assert_eq!(grid.best_q, 90, "seed {seed}: {:?}", grid.rows);
    }
}

#[test]
fn default_grid_optimum_is_interior() {
    let interior = SEEDS
        .iter()
        .filter(|&&seed| {
            let ds = generate_synthetic(&SyntheticConfig::with_seed(seed));
            let best = grid_search(&ds, &DEFAULT_QUALITIES, DEFAULT_BUDGET_K).unwrap().best_q;
            best != 10 && best != 90
        })
        .count();
    assert!(interior >= 4, "interior optimum on {interior}/5 seeds");
}

#[test]
fn volume_ratio_falls_towards_one_as_quality_rises() {
    let ds = generate_synthetic(&SyntheticConfig::with_seed(7));
    let run = select_on_synthetic(&ds, &QualityCandidateSet::default(), DEFAULT_BUDGET_K).unwrap();
    let dev: Vec<f64> = run.decision.rows.iter().map(|r| (r.ratio - 1.0).abs()).collect();
    assert!(dev[0] > dev[1] && dev[1] > dev[2], "{dev:?}");
    assert_eq!(run.decision.chosen_quality, 50);
    assert!(!run.decision.fallback_used);
}

#[test]
fn benchmark_is_deterministic() {
    let ds = generate_synthetic(&SyntheticConfig::with_seed(5));
    let config = QualityCandidateSet::default();
    let a = benchmark(&ds, &config, DEFAULT_BUDGET_K).unwrap();
    let b = benchmark(
        &generate_synthetic(&SyntheticConfig::with_seed(5)),
        &config,
        DEFAULT_BUDGET_K,
    )
    .unwrap();
    assert_eq!(a, b);
    let csv = rows_to_csv(&a.rows);
    assert_eq!(csv.lines().count(), 1 + DEFAULT_QUALITIES.len());
    assert!(csv.starts_with("quality,n_per_class,ratio,aic,forgetting\n"));
}
