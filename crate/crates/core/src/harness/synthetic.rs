//! Seeded Gaussian-cluster benchmark with a nested compression model.
//!
//! Sample `i` of class `c` has feature `f_i = mu_c + w_i`, with `mu_c` a
//! random direction scaled by `cluster_spread` and `w_i ~ N(0, I/d)`. Its
//! feature after compression at quality `q` is
//!
//! ```text
//! f_i + c * (1 - q/100)^p * z_i
//! ```
//!
//! where `z_i ~ N(0, I/d)` is drawn once per sample, so degradations at
//! different qualities lie along the same direction.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compression::linear_size;
use crate::features::{DatasetManifest, FeatureMatrix, PhaseDescriptor, SampleRecord};

/// Uncompressed payload size of every synthetic sample.
pub const PAYLOAD_BYTES: u64 = 1000;
/// Share of each class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub classes_per_phase: usize,
    pub phases: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub noise_scale: f64,
    pub noise_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dim: 32,
            classes_per_phase: 10,
            phases: 5,
            samples_per_class: 25,
            cluster_spread: 0.5,
            noise_scale: 3.0,
            noise_exponent: 4.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn with_seed(seed: u64) -> Self {
        SyntheticConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 || self.classes_per_phase == 0 || self.phases == 0 {
            return Err("dim, classes_per_phase and phases must be positive".into());
        }
        if self.samples_per_class < 2 {
            return Err("samples_per_class must be at least 2 (train and test)".into());
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("noise_scale", self.noise_scale),
            ("noise_exponent", self.noise_exponent),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.noise_exponent <= 0.0 {
            return Err("noise_exponent must be positive".into());
        }
        Ok(())
    }

    pub fn displacement_scale(&self, q: u8) -> f64 {
        self.noise_scale * (1.0 - q as f64 / 100.0).powf(self.noise_exponent)
    }

    pub fn test_per_class(&self) -> usize {
        ((self.samples_per_class as f64 * TEST_FRACTION).round() as usize).clamp(1, self.samples_per_class - 1)
    }
}

pub fn class_label(class: usize) -> String {
    format!("c{class:03}")
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    /// Training samples only; payload files are not materialized.
    pub manifest: DatasetManifest,
    pub original: FeatureMatrix,
    pub test: FeatureMatrix,
    pub test_labels: Vec<String>,
    exact: Vec<f64>,
    noise: Vec<f64>,
}

impl SyntheticDataset {
    pub fn phase_classes(&self, phase: usize) -> &[String] {
        &self.manifest.phases[phase].classes
    }

    pub fn class_ids(&self, class: &str) -> Vec<&str> {
        self.manifest
            .samples
            .iter()
            .filter(|s| s.class_label == class)
            .map(|s| s.id.as_str())
            .collect()
    }

    fn compressed_column(&self, j: usize, scale: f64) -> impl Iterator<Item = f64> + '_ {
        let d = self.config.dim;
        self.exact[j * d..(j + 1) * d]
            .iter()
            .zip(&self.noise[j * d..(j + 1) * d])
            .map(move |(f, z)| f + scale * z)
    }

    /// Compressed training features at quality `q`; equals `original` at `q = 100`.
    pub fn compressed_at(&self, q: u8) -> FeatureMatrix {
        self.compressed_subset(q, self.original.sample_ids())
    }

    pub fn compressed_subset<S: AsRef<str>>(&self, q: u8, ids: &[S]) -> FeatureMatrix {
        let scale = self.config.displacement_scale(q);
        let mut values = Vec::with_capacity(ids.len() * self.config.dim);
        for id in ids {
            let j = self.original.position(id.as_ref()).expect("id from this dataset");
            values.extend(self.compressed_column(j, scale).map(|v| v as f32));
        }
        FeatureMatrix::new(
            self.config.dim,
            values,
            ids.iter().map(|s| s.as_ref().to_string()).collect(),
        )
        .expect("finite synthetic features")
    }

    pub fn compressed_family(&self, qualities: &[u8]) -> BTreeMap<u8, FeatureMatrix> {
        qualities.iter().map(|&q| (q, self.compressed_at(q))).collect()
    }

    /// Per-sample displacement `c * (1 - q/100)^p * z_i` for training column `j`.
    pub fn displacement(&self, j: usize, q: u8) -> Vec<f64> {
        let scale = self.config.displacement_scale(q);
        let d = self.config.dim;
        self.noise[j * d..(j + 1) * d].iter().map(|z| scale * z).collect()
    }

    pub fn noise_vector(&self, j: usize) -> &[f64] {
        let d = self.config.dim;
        &self.noise[j * d..(j + 1) * d]
    }

    pub fn payload_size(&self, q: u8) -> u64 {
        linear_size(PAYLOAD_BYTES, q)
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> SyntheticDataset {
    let d = config.dim;
    let n_classes = config.classes_per_phase * config.phases;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let within = 1.0 / (d as f64).sqrt();

    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.iter().map(|x| x / norm * config.cluster_spread).collect();
            }
        })
        .collect();

    let n_test = config.test_per_class();
    let mut phases = Vec::with_capacity(config.phases);
    let mut samples = Vec::new();
    let mut exact = Vec::new();
    let mut noise = Vec::new();
    let mut train_ids = Vec::new();
    let mut test_values = Vec::new();
    let mut test_ids = Vec::new();
    let mut test_labels = Vec::new();

    for phase in 0..config.phases {
        let classes: Vec<usize> = (phase * config.classes_per_phase..(phase + 1) * config.classes_per_phase).collect();
        phases.push(PhaseDescriptor {
            index: phase,
            classes: classes.iter().map(|&c| class_label(c)).collect(),
        });
        for &c in &classes {
            let label = class_label(c);
            let mut order: Vec<usize> = (0..config.samples_per_class).collect();
            order.shuffle(&mut rng);
            let mut is_test = vec![false; config.samples_per_class];
            for &i in &order[..n_test] {
                is_test[i] = true;
            }
            for (i, &test) in is_test.iter().enumerate() {
                let id = format!("{label}_s{i:03}");
                let f: Vec<f64> = means[c]
                    .iter()
                    .map(|m| m + within * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let z: Vec<f64> = (0..d).map(|_| within * rng.sample::<f64, _>(StandardNormal)).collect();
                if test {
                    test_values.extend(f.iter().map(|&v| v as f32));
                    test_ids.push(id);
                    test_labels.push(label.clone());
                } else {
                    exact.extend_from_slice(&f);
                    noise.extend_from_slice(&z);
                    samples.push(SampleRecord {
                        id: id.clone(),
                        class_label: label.clone(),
                        phase_index: phase,
                        payload_path: PathBuf::from(format!("payloads/{id}.bin")),
                        original_byte_size: PAYLOAD_BYTES,
                    });
                    train_ids.push(id);
                }
            }
        }
    }

    let original =
        FeatureMatrix::new(d, exact.iter().map(|&v| v as f32).collect(), train_ids).expect("finite synthetic features");
    let test = FeatureMatrix::new(d, test_values, test_ids).expect("finite synthetic features");
    SyntheticDataset {
        config: config.clone(),
        manifest: DatasetManifest {
            phases,
            samples,
            base_dir: PathBuf::new(),
        },
        original,
        test,
        test_labels,
        exact,
        noise,
    }
}
