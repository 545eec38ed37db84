//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed.
//!
//! ```text
//! cargo test -p replayq-core --test acceptance
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use replayq::buffer::{build_buffer, load_buffer, shrink_buffer, MANIFEST_FILE};
use replayq::compression::{linear_size, pack_for_quality, BudgetScope, StorageBudget, SyntheticBackend};
use replayq::features::{DatasetManifest, FeatureMatrix, PhaseDescriptor, SampleRecord};
use replayq::harness::{
    generate_synthetic, grid_search, run_continual, select_on_synthetic, ReplayPlan, SyntheticConfig, DEFAULT_BUDGET_K,
};
use replayq::pipeline::{synthetic_payload, write_synthetic_fixture, RunConfig, Workspace};
use replayq::selection::ClassRanking;
use replayq::selector::QualityCandidateSet;
use replayq::volume::{log_volume, normalize_columns};
use replayq::{to_json_bytes, write_atomic};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Determinant by cofactor expansion along the first row.
fn cofactor_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    match n {
        0 => 1.0,
        1 => a[0][0],
        _ => (0..n)
            .map(|j| {
                let minor: Vec<Vec<f64>> = a[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|&(k, _)| k != j)
                            .map(|(_, &v)| v)
                            .collect()
                    })
                    .collect();
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * a[0][j] * cofactor_det(&minor)
            })
            .sum(),
    }
}

fn determinant_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(n..=8);
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let m = FeatureMatrix::from_columns(d, cols.iter().enumerate().map(|(i, c)| (format!("s{i}"), c.clone())))
            .map_err(|e| e.to_string())?;
        // Normalization happens on the f32-stored columns; the oracle uses the same ones.
        let unit = normalize_columns(&m).map_err(|e| e.to_string())?;
        let gram: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| unit.column(i).iter().zip(unit.column(j)).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        let expected = cofactor_det(&gram);
        let lv = log_volume(&unit).map_err(|e| format!("case {case}: {e}"))?;
        check(lv.jitter == 0.0, || format!("case {case}: needed jitter {}", lv.jitter))?;
        let got = (2.0 * lv.value).exp();
        let rel = (got - expected).abs() / expected.abs();
        worst = worst.max(rel);
        check(rel <= 1e-8, || {
            format!("case {case} (n={n}, d={d}): {got} vs {expected}, rel {rel:e}")
        })?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "200 matrices, worst relative error {worst:.1e}, {:.2?}",
        start.elapsed()
    ))
}

fn identity_endpoint() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // 100 training samples per class, so no candidate packs the whole class
    // and the packed quantity strictly decreases in q.
    let cfg = SyntheticConfig {
        phases: 2,
        classes_per_phase: 3,
        samples_per_class: 125,
        ..SyntheticConfig::with_seed(3)
    };
    let ds = generate_synthetic(&cfg);
    let candidates = QualityCandidateSet::default();
    let path = write_synthetic_fixture(&ds, dir.path(), &candidates, DEFAULT_BUDGET_K).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut run = RunConfig::load(&path).map_err(|e| e.to_string())?;
    run.backend = "identity".into();
    let ws = Workspace::load(&run).map_err(|e| e.to_string())?;
    let report = ws
        .select(&ws.rankings().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for phase in &report.phases {
        for r in &phase.reports {
            check((r.ratio - 1.0).abs() <= 1e-12, || {
                format!("phase {} q={}: R = {}", phase.phase, r.quality, r.ratio)
            })?;
        }
    }
    for row in &report.decision.rows {
        check((row.ratio - 1.0).abs() <= 1e-12, || {
            format!("averaged q={}: R = {}", row.quality, row.ratio)
        })?;
    }
    let n: Vec<usize> = report.decision.rows.iter().map(|r| r.n_q_mb).collect();
    check(n.windows(2).all(|w| w[0] > w[1]), || {
        format!("packed quantities not strictly decreasing: {n:?}")
    })?;
    let min_q = candidates.candidates[0];
    check(report.decision.chosen_quality == min_q, || {
        format!("chose {} instead of {min_q}", report.decision.chosen_quality)
    })?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("all R = 1, selected q = {min_q}, {elapsed:.2?}"))
}

fn packing_maximality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = rng.random_range(0..=12);
        let sizes: Vec<u64> = (0..n).map(|_| rng.random_range(1..=50)).collect();
        let budget = rng.random_range(0..=300u64);
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let got = pack_for_quality(&ids, 50, budget, |id| sizes[id[1..].parse::<usize>().unwrap()]);
        // Brute force: the longest prefix whose sizes sum within the budget.
        let expected = (0..=n)
            .filter(|&k| sizes[..k].iter().sum::<u64>() <= budget)
            .max()
            .unwrap();
        check(got.n_q_mb == expected, || {
            format!(
                "case {case}: sizes {sizes:?} budget {budget}: packed {}, maximal prefix {expected}",
                got.n_q_mb
            )
        })?;
        check(got.selected_ids == ids[..expected], || {
            format!("case {case}: selected ids differ")
        })?;

        let originals: Vec<u64> = (0..n).map(|_| rng.random_range(100..=2000)).collect();
        let budget = rng.random_range(0..=5000u64);
        let mut prev = usize::MAX;
        for q in 1..=100u8 {
            let p = pack_for_quality(&ids, q, budget, |id| {
                linear_size(originals[id[1..].parse::<usize>().unwrap()], q)
            });
            check(p.n_q_mb <= prev, || {
                format!("case {case}: n rose to {} at q={q}", p.n_q_mb)
            })?;
            prev = p.n_q_mb;
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 instances, {:.2?}", start.elapsed()))
}

fn jpeg_quantity_anchor() -> Outcome {
    let start = Instant::now();
    let run = RunConfig::load(&fixtures().join("jpeg_corpus/config.json")).map_err(|e| e.to_string())?;
    check(run.backend == "jpeg" && run.budget_k == 20, || {
        "fixture config changed".into()
    })?;
    let ws = Workspace::load(&run).map_err(|e| e.to_string())?;
    check(ws.manifest.samples.len() == 100, || {
        format!("{} images", ws.manifest.samples.len())
    })?;
    let curves = ws
        .packing_curves(&ws.rankings().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    check(curves.len() == 1, || format!("{} scope keys", curves.len()))?;
    let results = &curves[0].results;
    let qs: Vec<u8> = results.iter().map(|p| p.quality).collect();
    check(qs == [10, 25, 50, 75, 90], || format!("qualities {qs:?}"))?;
    let n: Vec<usize> = results.iter().map(|p| p.n_q_mb).collect();
    check(n.windows(2).all(|w| w[0] > w[1]), || {
        format!("n_q not strictly decreasing: {n:?}")
    })?;
    let rate = |i: usize| results[i].compression_rate.ok_or("no reference count");
    let ratio = rate(0)? / rate(4)?;
    check(ratio > 3.0, || format!("r_10 / r_90 = {ratio:.3}"))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "n_q = {n:?}, r_10 / r_90 = {ratio:.2}, {:.2?}",
        start.elapsed()
    ))
}

fn adjacent(q: &[u8], a: u8, b: u8) -> bool {
    let ia = q.iter().position(|&x| x == a).unwrap() as i64;
    let ib = q.iter().position(|&x| x == b).unwrap() as i64;
    (ia - ib).abs() <= 1
}

fn selector_vs_grid() -> Outcome {
    let candidates = QualityCandidateSet::default();
    let mut select_time = Duration::ZERO;
    let mut grid_time = Duration::ZERO;
    let mut agree = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let ds = generate_synthetic(&SyntheticConfig::with_seed(seed));
        let t = Instant::now();
        let selected = select_on_synthetic(&ds, &candidates, DEFAULT_BUDGET_K)
            .map_err(|e| e.to_string())?
            .decision
            .chosen_quality;
        select_time += t.elapsed();
        let t = Instant::now();
        let best = grid_search(&ds, &candidates.candidates, DEFAULT_BUDGET_K)
            .map_err(|e| e.to_string())?
            .best_q;
        grid_time += t.elapsed();
        if adjacent(&candidates.candidates, selected, best) {
            agree += 1;
        }
        pairs.push(format!("{selected}/{best}"));
    }
    check(agree >= 4, || {
        format!("agreement on {agree}/5 seeds (selected/grid: {})", pairs.join(" "))
    })?;
    within(grid_time, Duration::from_secs(120))?;
    within(select_time, Duration::from_secs(10))?;
    Ok(format!(
        "{agree}/5 seeds within one candidate (selected/grid: {}), selector {select_time:.2?}, grid {grid_time:.2?}",
        pairs.join(" ")
    ))
}

fn replay_benefit() -> Outcome {
    let start = Instant::now();
    let candidates = QualityCandidateSet::default();
    let mut gains = Vec::new();
    for seed in SEEDS {
        let ds = generate_synthetic(&SyntheticConfig::with_seed(seed));
        let q = select_on_synthetic(&ds, &candidates, DEFAULT_BUDGET_K)
            .map_err(|e| e.to_string())?
            .decision
            .chosen_quality;
        let with = run_continual(&ds, ReplayPlan::Quality(q), DEFAULT_BUDGET_K).map_err(|e| e.to_string())?;
        let without = run_continual(&ds, ReplayPlan::NoReplay, DEFAULT_BUDGET_K).map_err(|e| e.to_string())?;
        let gain = with.metrics.aic - without.metrics.aic;
        check(gain >= 0.02, || {
            format!(
                "seed {seed}: aic {:.4} with replay, {:.4} without",
                with.metrics.aic, without.metrics.aic
            )
        })?;
        gains.push(format!("{gain:.3}"));
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("aic gains [{}], {:.2?}", gains.join(", "), start.elapsed()))
}

/// Two classes of 100 samples with 1000-byte payloads.
fn uniform_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ClassRanking>), String> {
    let mut samples = Vec::new();
    let mut rankings = Vec::new();
    for class in ["a", "b"] {
        let ids: Vec<String> = (0..100).map(|i| format!("{class}{i:03}")).collect();
        for id in &ids {
            let rel = PathBuf::from(format!("payloads/{id}.bin"));
            write_atomic(&dir.join(&rel), &synthetic_payload(id)).map_err(|e| e.to_string())?;
            samples.push(SampleRecord {
                id: id.clone(),
                class_label: class.into(),
                phase_index: 0,
                payload_path: rel,
                original_byte_size: 1000,
            });
        }
        rankings.push(ClassRanking {
            class_label: class.into(),
            distances: vec![0.0; ids.len()],
            ranked_ids: ids,
        });
    }
    let manifest = DatasetManifest {
        phases: vec![PhaseDescriptor {
            index: 0,
            classes: vec!["a".into(), "b".into()],
        }],
        samples,
        base_dir: dir.to_path_buf(),
    };
    manifest.validate().map_err(|e| e.to_string())?;
    Ok((manifest, rankings))
}

fn shrink_arithmetic() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (manifest, rankings) = uniform_dataset(dir.path())?;
    let budget = StorageBudget::resolve(&manifest, 85, BudgetScope::PerClass);
    let out = dir.path().join("buffer");
    let start = Instant::now();
    build_buffer(100, &manifest, &rankings, &SyntheticBackend, &budget, &out).map_err(|e| e.to_string())?;
    let set = load_buffer(&out.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let counts = set.manifest.count_per_class();
    check(counts.values().all(|&n| n == 85), || format!("built {counts:?}"))?;
    let (shrunk, summary) = shrink_buffer(&set.manifest, 40);
    shrunk.validate().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let pct = summary.stored_fraction * 100.0;
    check((pct - 47.06).abs() <= 0.01, || format!("stored {pct:.4}%"))?;
    check(shrunk.count_per_class().values().all(|&n| n == 40), || {
        "not 40 per class".into()
    })?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("85 -> 40 per class stores {pct:.2}%, {elapsed:.2?}"))
}

/// Generates, selects and builds the buffer under `dir`; returns the report
/// and manifest bytes.
fn full_run(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let ds = generate_synthetic(&SyntheticConfig::with_seed(11));
    let path = write_synthetic_fixture(&ds, dir, &QualityCandidateSet::default(), DEFAULT_BUDGET_K)
        .map_err(|e| e.to_string())?;
    let run = RunConfig::load(&path).map_err(|e| e.to_string())?;
    let ws = Workspace::load(&run).map_err(|e| e.to_string())?;
    let rankings = ws.rankings().map_err(|e| e.to_string())?;
    let report = ws.select(&rankings).map_err(|e| e.to_string())?;
    let out = run.out.join("buffer");
    ws.build_buffer(&rankings, report.decision.chosen_quality, &out)
        .map_err(|e| e.to_string())?;
    let manifest = std::fs::read(out.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    Ok((to_json_bytes(&report), manifest))
}

fn reproducibility() -> Outcome {
    let start = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (report_a, manifest_a) = full_run(a.path())?;
    let (report_b, manifest_b) = full_run(b.path())?;
    check(report_a == report_b, || "selection reports differ".into())?;
    check(manifest_a == manifest_b, || "buffer manifests differ".into())?;
    for name in [
        "manifest.json",
        "features/original.fmx",
        "features/q050.fmx",
        "config.json",
    ] {
        let x = std::fs::read(a.path().join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| e.to_string())?;
        check(x == y, || format!("{name} differs"))?;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "reports ({} bytes) and manifests ({} bytes) identical, {:.2?}",
        report_a.len(),
        manifest_a.len(),
        start.elapsed()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("determinant oracle", determinant_oracle),
        ("identity-compression endpoint", identity_endpoint),
        ("packing maximality and monotonicity", packing_maximality),
        ("JPEG quantity anchor", jpeg_quantity_anchor),
        ("selector vs grid search", selector_vs_grid),
        ("replay benefit", replay_benefit),
        ("shrink arithmetic", shrink_arithmetic),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
