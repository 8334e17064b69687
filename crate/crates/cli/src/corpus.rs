//! Synthetic shapes corpus: renders colored geometric shapes with template
//! captions ("a red circle on white"). Captions uniquely identify images
//! within a split; the test split re-renders the same caption inventory with
//! different jitter so held-out evaluation measures generalization over
//! nuisance variation rather than memorized pixels.

use crate::error::{Result, RunnerError};
use crate::manifest::{DatasetManifest, ManifestRecord};
use natpatch_core::nn::derive_seed;
use natpatch_core::raster::Raster;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.65, 0.15]),
    ("blue", [0.15, 0.20, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("purple", [0.55, 0.15, 0.70]),
    ("orange", [0.95, 0.55, 0.10]),
    ("teal", [0.10, 0.70, 0.70]),
    ("pink", [0.95, 0.50, 0.70]),
];

const SHAPES: [&str; 8] = ["circle", "square", "triangle", "diamond", "ring", "cross", "bar", "pillar"];

const BACKGROUNDS: [(&str, [f64; 3]); 2] = [("white", [1.0, 1.0, 1.0]), ("gray", [0.55, 0.55, 0.55])];

/// Distinct caption inventory size.
pub const MAX_COUNT: usize = COLORS.len() * SHAPES.len() * BACKGROUNDS.len();

fn caption_for(index: usize) -> String {
    let bg = index / (COLORS.len() * SHAPES.len());
    let rem = index % (COLORS.len() * SHAPES.len());
    let color = rem / SHAPES.len();
    let shape = rem % SHAPES.len();
    format!("a {} {} on {}", COLORS[color].0, SHAPES[shape], BACKGROUNDS[bg].0)
}

fn shape_hit(shape: usize, dx: f64, dy: f64, half: f64) -> bool {
    match SHAPES[shape] {
        "circle" => dx * dx + dy * dy <= half * half,
        "square" => dx.abs() <= half && dy.abs() <= half,
        "triangle" => dy >= -half && dy <= half && dx.abs() <= (dy + half) * 0.5,
        "diamond" => dx.abs() + dy.abs() <= half,
        "ring" => {
            let r2 = dx * dx + dy * dy;
            r2 <= half * half && r2 >= (0.55 * half) * (0.55 * half)
        }
        "cross" => {
            (dx.abs() <= 0.35 * half && dy.abs() <= half)
                || (dy.abs() <= 0.35 * half && dx.abs() <= half)
        }
        "bar" => dy.abs() <= 0.4 * half && dx.abs() <= half,
        "pillar" => dx.abs() <= 0.4 * half && dy.abs() <= half,
        other => unreachable!("unknown shape {other}"),
    }
}

/// Render one combo at 2x supersampling, then box-filter down.
fn render(index: usize, image_size: usize, rng: &mut ChaCha8Rng) -> Raster {
    let bg = index / (COLORS.len() * SHAPES.len());
    let rem = index % (COLORS.len() * SHAPES.len());
    let color = rem / SHAPES.len();
    let shape = rem % SHAPES.len();
    let bg_rgb = BACKGROUNDS[bg].1;
    let fg_rgb = COLORS[color].1;

    let ss = image_size * 2;
    let center = ss as f64 / 2.0;
    let jitter = ss as f64 * 0.09;
    let cx = center + rng.random_range(-jitter..jitter);
    let cy = center + rng.random_range(-jitter..jitter);
    let half = ss as f64 * 0.28 * rng.random_range(0.85..1.12);

    let mut hires = vec![0.0f64; ss * ss * 3];
    for y in 0..ss {
        for x in 0..ss {
            let hit = shape_hit(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, half);
            let rgb = if hit { fg_rgb } else { bg_rgb };
            for ch in 0..3 {
                hires[(y * ss + x) * 3 + ch] = rgb[ch];
            }
        }
    }
    let mut out = Raster::zeros(image_size, image_size, 3);
    for y in 0..image_size {
        for x in 0..image_size {
            for ch in 0..3 {
                let mut acc = 0.0;
                for sy in 0..2 {
                    for sx in 0..2 {
                        acc += hires[((y * 2 + sy) * ss + x * 2 + sx) * 3 + ch];
                    }
                }
                out.set(y, x, ch, acc / 4.0);
            }
        }
    }
    out
}

/// Generate `count` train images plus a re-jittered test split sharing the
/// caption inventory. Deterministic per seed; returns the train manifest.
pub fn generate_toy_corpus(
    out_dir: &Path,
    count: usize,
    seed: u64,
    image_size: usize,
) -> Result<DatasetManifest> {
    if count < 4 {
        return Err(RunnerError::Usage(format!("corpus count must be at least 4, got {count}")));
    }
    if count > MAX_COUNT {
        return Err(RunnerError::Usage(format!(
            "corpus count {count} exceeds the {MAX_COUNT} distinct captions available"
        )));
    }
    if image_size < 16 {
        return Err(RunnerError::Usage("image size must be at least 16".into()));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let provenance = format!("synthetic shapes corpus (count={count}, seed={seed}, size={image_size})");
    let mut manifests = Vec::new();
    for split in ["train", "test"] {
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{split}-{i:04}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
            let image = render(i, image_size, &mut rng);
            let rel = format!("images/{id}.png");
            image.save_png(&images_dir.join(format!("{id}.png")))?;
            records.push(ManifestRecord {
                id,
                image: rel,
                captions: vec![caption_for(i)],
            });
        }
        let manifest = DatasetManifest::new(records, split, out_dir, Some(provenance.clone()))?;
        manifest.write(&out_dir.join(format!("{split}.jsonl")))?;
        manifests.push(manifest);
    }
    let meta = serde_json::json!({
        "provenance": provenance,
        "seed": seed,
        "count": count,
        "image_size": image_size,
    });
    std::fs::write(out_dir.join("corpus.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(manifests.swap_remove(0))
}
