//! Regenerates the checked-in JPEG fixtures under `tests/fixtures/`:
//!
//! - `jpeg_corpus/`: 100 procedurally drawn 64x64 images in one class, stored
//!   as quality-95 JPEG, with a dataset manifest, 4x4 grayscale thumbnail
//!   features for the originals and for every default candidate quality,
//!   and a `config.json` for the CLI.
//! - `test64.png`: a 64x64 image for encoder size checks.
//!
//! ```text
//! cargo run --release -p replayq-core --example jpeg_corpus
//! ```

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use replayq::compression::{quantity_curve, BudgetScope, Compressor, JpegBackend, StorageBudget};
use replayq::features::{
    write_dataset_manifest, write_feature_matrix, DatasetManifest, FeatureMatrix, PhaseDescriptor, SampleRecord,
};
use replayq::pipeline::{FeaturePaths, RunConfig};
use replayq::selector::DEFAULT_QUALITIES;
use replayq::{to_json_bytes, write_atomic};

const SIDE: u32 = 64;
const COUNT: usize = 100;
const SOURCE_QUALITY: u8 = 95;
const BUDGET_K: u64 = 20;

fn draw(rng: &mut ChaCha8Rng) -> RgbImage {
    let base: [f64; 3] = [
        rng.random_range(40.0..200.0),
        rng.random_range(40.0..200.0),
        rng.random_range(40.0..200.0),
    ];
    let grad: [f64; 2] = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(2..6))
        .map(|_| {
            (
                rng.random_range(0.0..SIDE as f64),
                rng.random_range(0.0..SIDE as f64),
                rng.random_range(6.0..20.0),
                [
                    rng.random_range(-80.0..80.0),
                    rng.random_range(-80.0..80.0),
                    rng.random_range(-80.0..80.0),
                ],
            )
        })
        .collect();
    let freq = rng.random_range(0.2..0.9);
    let texture = rng.random_range(5.0..25.0);
    let grain = rng.random_range(4.0..14.0);
    RgbImage::from_fn(SIDE, SIDE, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let wave = texture * (freq * xf).sin() * (freq * 0.7 * yf).cos();
        let mut px = [0u8; 3];
        for (ch, out) in px.iter_mut().enumerate() {
            let mut v = base[ch] + grad[0] * xf + grad[1] * yf + wave;
            for (bx, by, r, color) in &blobs {
                if (xf - bx).powi(2) + (yf - by).powi(2) < r * r {
                    v += color[ch];
                }
            }
            v += grain * (rng.random::<f64>() - 0.5) * 2.0;
            *out = v.clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

fn encode_jpeg(img: &RgbImage, q: u8) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    JpegEncoder::new_with_quality(&mut out, q)
        .encode_image(img)
        .expect("encode");
    out.into_inner()
}

fn thumbnail(jpeg: &[u8]) -> Vec<f64> {
    let img = image::load_from_memory_with_format(jpeg, ImageFormat::Jpeg).expect("decode");
    let gray = DynamicImage::ImageLuma8(img.to_luma8())
        .resize_exact(4, 4, FilterType::Triangle)
        .to_luma8();
    gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect()
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let dir = root.join("jpeg_corpus");
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_501);

    let mut samples = Vec::new();
    let mut payloads = Vec::new();
    for i in 0..COUNT {
        let id = format!("img{i:03}");
        let bytes = encode_jpeg(&draw(&mut rng), SOURCE_QUALITY);
        let rel = PathBuf::from(format!("images/{id}.jpg"));
        write_atomic(&dir.join(&rel), &bytes).expect("write image");
        samples.push(SampleRecord {
            id: id.clone(),
            class_label: "toy".into(),
            phase_index: 0,
            payload_path: rel,
            original_byte_size: bytes.len() as u64,
        });
        payloads.push((id, bytes));
    }
    let manifest = DatasetManifest {
        phases: vec![PhaseDescriptor {
            index: 0,
            classes: vec!["toy".into()],
        }],
        samples,
        base_dir: dir.clone(),
    };
    write_dataset_manifest(&manifest, &dir.join("manifest.json")).expect("write manifest");

    let original =
        FeatureMatrix::from_columns(16, payloads.iter().map(|(id, b)| (id.clone(), thumbnail(b)))).expect("features");
    write_feature_matrix(&original, &dir.join("features/original.fmx")).expect("write features");
    let backend = JpegBackend;
    let mut qualities = std::collections::BTreeMap::new();
    for &q in &DEFAULT_QUALITIES {
        let cols = payloads
            .iter()
            .map(|(id, b)| (id.clone(), thumbnail(&backend.compress(b, q).expect("compress"))));
        let m = FeatureMatrix::from_columns(16, cols).expect("features");
        let rel = PathBuf::from(format!("features/q{q:03}.fmx"));
        write_feature_matrix(&m, &dir.join(&rel)).expect("write features");
        qualities.insert(q, rel);
    }
    let cfg = RunConfig {
        manifest: "manifest.json".into(),
        features: FeaturePaths {
            original: "features/original.fmx".into(),
            qualities,
        },
        backend: "jpeg".into(),
        qualities: DEFAULT_QUALITIES.to_vec(),
        epsilon: 0.5,
        budget_k: BUDGET_K,
        budget_scope: BudgetScope::PerClass,
        out: "out".into(),
        seed: 0,
    };
    write_atomic(&dir.join("config.json"), &to_json_bytes(&cfg)).expect("write config");

    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let test = draw(&mut rng);
    test.save_with_format(root.join("test64.png"), ImageFormat::Png)
        .expect("write png");

    // Report the quantity curve in manifest order.
    let budget = StorageBudget::resolve(&manifest, BUDGET_K, BudgetScope::PerClass);
    let bytes = budget.bytes_for("toy").expect("budget");
    let ids: Vec<&str> = payloads.iter().map(|(id, _)| id.as_str()).collect();
    let mut sizer = |id: &str, q: u8| -> Result<u64, replayq::compression::CompressionError> {
        let (_, b) = payloads.iter().find(|(i, _)| i == id).expect("id");
        Ok(backend.compress(b, q)?.len() as u64)
    };
    let mut qs = DEFAULT_QUALITIES.to_vec();
    qs.push(100);
    let curve = quantity_curve(&ids, &qs, bytes, &mut sizer).expect("curve");
    println!("budget {bytes} bytes");
    for p in curve {
        println!("q={:>3} n={:>3} r={:?}", p.quality, p.n_q_mb, p.compression_rate);
    }
}
