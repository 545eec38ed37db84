//! `replayq`: rank exemplars, pack budgets, measure volume ratios, select a
//! compression quality, build and shrink replay buffers, and run the
//! synthetic benchmark.
//!
//! Machine-readable answers go to stdout; diagnostics go to stderr.
//! Exit codes: 0 success, 1 invalid input, 2 I/O failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use replayq::buffer::{
    load_buffer, rebalance_equal, remove_dropped_blobs, shrink_buffer, write_manifest, MANIFEST_FILE,
};
use replayq::compression::BudgetScope;
use replayq::harness::{
    benchmark, generate_synthetic, rows_to_csv, run_continual, select_on_synthetic, BenchmarkRow, ReplayPlan,
    SyntheticConfig, DEFAULT_BUDGET_K,
};
use replayq::pipeline::{write_synthetic_fixture, FeaturePaths, RunConfig, Workspace};
use replayq::selector::{QualityCandidateSet, DEFAULT_EPSILON, DEFAULT_QUALITIES};
use replayq::{to_json_bytes, write_atomic};
use serde::Serialize;

#[derive(Debug)]
enum CliError {
    Validation(String),
    Io(String),
}

impl From<replayq::Error> for CliError {
    fn from(e: replayq::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                replayq::Error::from(e).into()
            }
        }
    )*};
}
from_core!(
    replayq::features::FeatureIoError,
    replayq::buffer::BufferError,
    replayq::harness::HarnessError,
    replayq::selector::SelectorError
);

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "replayq",
    version,
    about = "Compressed replay buffers with volume-ratio quality selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Class,
    Phase,
}

impl From<ScopeArg> for BudgetScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Class => BudgetScope::PerClass,
            ScopeArg::Phase => BudgetScope::PerPhase,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Jpeg,
    Synthetic,
    Identity,
}

impl BackendArg {
    fn name(self) -> &'static str {
        match self {
            BackendArg::Jpeg => "jpeg",
            BackendArg::Synthetic => "synthetic",
            BackendArg::Identity => "identity",
        }
    }
}

/// Flags shared by the file-backed subcommands. Flags override the config file.
#[derive(Args, Clone)]
#[command(allow_negative_numbers = true)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated candidate qualities, e.g. 10,25,50,75,90
    #[arg(long, value_delimiter = ',')]
    qualities: Option<Vec<u8>>,
    /// Budget in equivalent original samples per scope key
    #[arg(long)]
    budget_k: Option<u64>,
    #[arg(long, value_enum)]
    budget_scope: Option<ScopeArg>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Dataset manifest JSON
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Original (uncompressed) feature file
    #[arg(long)]
    features: Option<PathBuf>,
    /// Compressed feature file for one quality, as Q=PATH (repeatable)
    #[arg(long = "quality-features", value_parser = parse_quality_path)]
    quality_features: Vec<(u8, PathBuf)>,
}

fn parse_quality_path(s: &str) -> Result<(u8, PathBuf), String> {
    let (q, p) = s.split_once('=').ok_or("expected Q=PATH")?;
    let q = q.parse::<u8>().map_err(|e| e.to_string())?;
    Ok((q, PathBuf::from(p)))
}

impl Common {
    fn run_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig {
                manifest: PathBuf::new(),
                features: FeaturePaths {
                    original: PathBuf::new(),
                    qualities: Default::default(),
                },
                backend: "synthetic".into(),
                qualities: DEFAULT_QUALITIES.to_vec(),
                epsilon: DEFAULT_EPSILON,
                budget_k: DEFAULT_BUDGET_K,
                budget_scope: BudgetScope::PerClass,
                out: PathBuf::from("out"),
                seed: 0,
            },
        };
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = &self.qualities {
            cfg.qualities = v.clone();
        }
        if let Some(v) = self.budget_k {
            cfg.budget_k = v;
        }
        if let Some(v) = self.budget_scope {
            cfg.budget_scope = v.into();
        }
        if let Some(v) = self.backend {
            cfg.backend = v.name().into();
        }
        if let Some(v) = &self.manifest {
            cfg.manifest = v.clone();
        }
        if let Some(v) = &self.features {
            cfg.features.original = v.clone();
        }
        for (q, p) in &self.quality_features {
            cfg.features.qualities.insert(*q, p.clone());
        }
        if cfg.manifest.as_os_str().is_empty() || cfg.features.original.as_os_str().is_empty() {
            return Err(CliError::Validation(
                "a dataset manifest and original features are required (--config or --manifest/--features)".into(),
            ));
        }
        for path in [&cfg.manifest, &cfg.features.original] {
            if !path.exists() {
                return Err(CliError::Io(format!("{} does not exist", path.display())));
            }
        }
        Ok(cfg)
    }
}

/// Synthetic benchmark parameters; defaults are the calibrated benchmark.
#[derive(Args, Clone)]
#[command(allow_negative_numbers = true)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes_per_phase: Option<usize>,
    #[arg(long)]
    phases: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    cluster_spread: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    noise_exponent: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    qualities: Option<Vec<u8>>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_BUDGET_K)]
    budget_k: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SynthArgs {
    fn config(&self) -> CliResult<SyntheticConfig> {
        let d = SyntheticConfig::default();
        let cfg = SyntheticConfig {
            dim: self.dim.unwrap_or(d.dim),
            classes_per_phase: self.classes_per_phase.unwrap_or(d.classes_per_phase),
            phases: self.phases.unwrap_or(d.phases),
            samples_per_class: self.samples_per_class.unwrap_or(d.samples_per_class),
            cluster_spread: self.cluster_spread.unwrap_or(d.cluster_spread),
            noise_scale: self.noise_scale.unwrap_or(d.noise_scale),
            noise_exponent: self.noise_exponent.unwrap_or(d.noise_exponent),
            seed: self.seed,
        };
        cfg.validate().map_err(CliError::Validation)?;
        if self.budget_k == 0 {
            return Err(CliError::Validation("budget-k must be positive".into()));
        }
        Ok(cfg)
    }

    fn candidates(&self) -> CliResult<QualityCandidateSet> {
        let q = self.qualities.clone().unwrap_or_else(|| DEFAULT_QUALITIES.to_vec());
        Ok(QualityCandidateSet::new(
            q,
            self.epsilon,
            replayq::compression::QualityRange { min: 1, max: 100 },
        )?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest, payloads, feature files, config.json)
    Generate {
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Rank each class by distance to its mean feature; one JSON per class
    Rank {
        #[command(flatten)]
        common: Common,
    },
    /// Packed quantity per candidate quality and scope key (CSV on stdout)
    Pack {
        #[command(flatten)]
        common: Common,
    },
    /// Per-phase volume reports as JSON on stdout
    Volumes {
        #[command(flatten)]
        common: Common,
    },
    /// Choose the quality; prints it on stdout
    Select {
        #[command(flatten)]
        common: Common,
        /// Where to write the full decision JSON (default: <out>/decision.json)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compress and store the buffer at the chosen (or given) quality
    BuildBuffer {
        #[command(flatten)]
        common: Common,
        /// Skip selection and use this quality
        #[arg(long)]
        quality: Option<u8>,
    },
    /// Keep only the best-ranked entries of an existing buffer
    Shrink {
        /// Buffer manifest.json
        #[arg(long)]
        manifest: PathBuf,
        /// Entries to keep per class
        #[arg(long, conflicts_with = "total_bytes")]
        keep: Option<usize>,
        /// Split this many bytes equally across the classes present
        #[arg(long)]
        total_bytes: Option<u64>,
    },
    /// One continual-learning run on the synthetic benchmark
    Simulate {
        #[command(flatten)]
        synth: SynthArgs,
        /// Replay at this quality instead of the selected one
        #[arg(long)]
        quality: Option<u8>,
        #[arg(long)]
        no_replay: bool,
    },
    /// Grid search over the candidates next to the selector's ratios
    Grid {
        #[command(flatten)]
        synth: SynthArgs,
    },
}

fn print_stdout(s: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    out.write_all(s.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
    out.flush().map_err(|e| CliError::Io(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    write_atomic(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    write_file(path, &to_json_bytes(value))
}

fn cmd_generate(synth: &SynthArgs) -> CliResult {
    let cfg = synth.config()?;
    let candidates = synth.candidates()?;
    let dir = synth.out.clone().unwrap_or_else(|| PathBuf::from("synthetic"));
    let ds = generate_synthetic(&cfg);
    let path = write_synthetic_fixture(&ds, &dir, &candidates, synth.budget_k)?;
    eprintln!(
        "wrote {} training samples in {} classes",
        ds.manifest.samples.len(),
        cfg.classes_per_phase * cfg.phases
    );
    print_stdout(&format!("{}\n", path.display()))
}

fn cmd_rank(common: &Common) -> CliResult {
    let cfg = common.run_config()?;
    let ws = Workspace::load(&cfg)?;
    let rankings = ws.rankings()?;
    let dir = cfg.out.join("rankings");
    for r in &rankings {
        write_json(&dir.join(format!("{}.json", r.class_label)), r)?;
    }
    eprintln!("ranked {} classes", rankings.len());
    Ok(())
}

fn cmd_pack(common: &Common) -> CliResult {
    let cfg = common.run_config()?;
    let ws = Workspace::load(&cfg)?;
    let curves = ws.packing_curves(&ws.rankings()?)?;
    write_json(&cfg.out.join("packing.json"), &curves)?;
    let mut csv = String::from("scope,quality,n_q_mb,bytes_used,compression_rate\n");
    for c in &curves {
        for p in &c.results {
            let rate = p.compression_rate.map(|r| r.to_string()).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                c.scope_key, p.quality, p.n_q_mb, p.bytes_used, rate
            ));
        }
    }
    print_stdout(&csv)
}

fn cmd_volumes(common: &Common) -> CliResult {
    let cfg = common.run_config()?;
    let ws = Workspace::load(&cfg)?;
    let phases = ws.evaluate(&ws.rankings()?)?;
    #[derive(Serialize)]
    struct PhaseVolumes<'a> {
        phase: usize,
        volumes: Vec<&'a replayq::volume::VolumeReport>,
    }
    let out: Vec<PhaseVolumes> = phases
        .iter()
        .map(|p| PhaseVolumes {
            phase: p.phase,
            volumes: p.reports.iter().map(|r| &r.volume).collect(),
        })
        .collect();
    print_stdout(&String::from_utf8(to_json_bytes(&out)).expect("json is utf-8"))
}

fn cmd_select(common: &Common, report: Option<&Path>) -> CliResult {
    let cfg = common.run_config()?;
    let ws = Workspace::load(&cfg)?;
    let selection = ws.select(&ws.rankings()?)?;
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join("decision.json"));
    write_json(&report_path, &selection)?;
    let d = &selection.decision;
    for row in &d.rows {
        eprintln!(
            "q={:>3} n={:>6} R={:.4} {}",
            row.quality,
            row.n_q_mb,
            row.ratio,
            if row.feasible { "feasible" } else { "infeasible" }
        );
    }
    if d.fallback_used {
        eprintln!(
            "no candidate satisfied |R - 1| < {}; falling back to {}",
            d.epsilon, d.chosen_quality
        );
    }
    print_stdout(&format!("{}\n", d.chosen_quality))
}

fn cmd_build_buffer(common: &Common, quality: Option<u8>) -> CliResult {
    let cfg = common.run_config()?;
    let ws = Workspace::load(&cfg)?;
    let rankings = ws.rankings()?;
    let quality = match quality {
        Some(q) => q,
        None => {
            let selection = ws.select(&rankings)?;
            write_json(&cfg.out.join("decision.json"), &selection)?;
            selection.decision.chosen_quality
        }
    };
    let dir = cfg.out.join("buffer");
    let manifest = ws.build_buffer(&rankings, quality, &dir)?;
    eprintln!(
        "stored {} samples at q={} ({} bytes)",
        manifest.entries.len(),
        quality,
        manifest.total_bytes()
    );
    print_stdout(&format!("{}\n", dir.join(MANIFEST_FILE).display()))
}

fn cmd_shrink(manifest_path: &Path, keep: Option<usize>, total_bytes: Option<u64>) -> CliResult {
    let set = load_buffer(manifest_path)?;
    let (shrunk, summary) = match (keep, total_bytes) {
        (Some(k), None) => shrink_buffer(&set.manifest, k),
        (None, Some(t)) => rebalance_equal(&set.manifest, t),
        _ => {
            return Err(CliError::Validation(
                "give exactly one of --keep or --total-bytes".into(),
            ))
        }
    };
    shrunk.validate()?;
    write_manifest(&shrunk, manifest_path)?;
    remove_dropped_blobs(&set.root, &set.manifest, &shrunk)?;
    for class in &summary.clamped_classes {
        eprintln!("class {class} holds fewer entries than requested; kept all");
    }
    eprintln!("stored bytes {} -> {}", summary.bytes_before, summary.bytes_after);
    print_stdout(&format!("{:.6}\n", summary.stored_fraction))
}

fn cmd_simulate(synth: &SynthArgs, quality: Option<u8>, no_replay: bool) -> CliResult {
    let cfg = synth.config()?;
    let candidates = synth.candidates()?;
    let ds = generate_synthetic(&cfg);
    let selection = select_on_synthetic(&ds, &candidates, synth.budget_k)?;
    let (plan, q) = if no_replay {
        (ReplayPlan::NoReplay, None)
    } else {
        let q = quality.unwrap_or(selection.decision.chosen_quality);
        (ReplayPlan::Quality(q), Some(q))
    };
    let run = run_continual(&ds, plan, synth.budget_k)?;
    let ratio = q
        .and_then(|q| selection.decision.rows.iter().find(|r| r.quality == q))
        .map(|r| r.ratio)
        .unwrap_or(f64::NAN);
    let row = BenchmarkRow {
        quality: q.unwrap_or(0),
        n_per_class: run.mean_replayed_per_class,
        ratio,
        aic: run.metrics.aic,
        forgetting: run.metrics.averaged_forgetting,
    };
    let csv = rows_to_csv(std::slice::from_ref(&row));
    if let Some(dir) = &synth.out {
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a SyntheticConfig,
            plan: ReplayPlan,
            budget_k: u64,
            selected_quality: u8,
            metrics: &'a replayq::harness::PhaseMetrics,
            n_per_class: f64,
        }
        write_file(&dir.join("simulate.csv"), csv.as_bytes())?;
        write_json(
            &dir.join("simulate.json"),
            &Summary {
                config: &cfg,
                plan,
                budget_k: synth.budget_k,
                selected_quality: selection.decision.chosen_quality,
                metrics: &run.metrics,
                n_per_class: run.mean_replayed_per_class,
            },
        )?;
    }
    print_stdout(&csv)
}

fn cmd_grid(synth: &SynthArgs) -> CliResult {
    let cfg = synth.config()?;
    let candidates = synth.candidates()?;
    let ds = generate_synthetic(&cfg);
    let report = benchmark(&ds, &candidates, synth.budget_k)?;
    let csv = rows_to_csv(&report.rows);
    eprintln!(
        "selector chose {}, grid search best {}",
        report.selected_quality, report.grid_best_quality
    );
    if let Some(dir) = &synth.out {
        write_file(&dir.join("grid.csv"), csv.as_bytes())?;
        write_json(&dir.join("grid.json"), &report)?;
    }
    print_stdout(&csv)
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Generate { synth } => cmd_generate(synth),
        Command::Rank { common } => cmd_rank(common),
        Command::Pack { common } => cmd_pack(common),
        Command::Volumes { common } => cmd_volumes(common),
        Command::Select { common, report } => cmd_select(common, report.as_deref()),
        Command::BuildBuffer { common, quality } => cmd_build_buffer(common, *quality),
        Command::Shrink {
            manifest,
            keep,
            total_bytes,
        } => cmd_shrink(manifest, *keep, *total_bytes),
        Command::Simulate {
            synth,
            quality,
            no_replay,
        } => cmd_simulate(synth, *quality, *no_replay),
        Command::Grid { synth } => cmd_grid(synth),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
