//! Procedural shape images. The class is the shape type; position, size and
//! colors are random. Shapes are moderately brighter than a mid-gray
//! background, with per-pixel noise on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataSource, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 8] = [
    "disk", "square", "cross", "stripes", "ring", "triangle", "checker", "diagonal",
];

/// Smallest and largest shape extent as a fraction of the image side. Shapes
/// always span more than half of the image area.
const MIN_EXTENT: f64 = 0.72;
const MAX_EXTENT: f64 = 0.95;
const BACKGROUND: std::ops::Range<f64> = 0.3..0.6;
/// Per-channel amount by which the foreground is brighter than the background.
const CONTRAST: std::ops::Range<f64> = 0.12..0.25;
const NOISE: f64 = 0.1;

/// Whether box coordinates `(u, v)` in `[-1, 1]^2` fall inside shape `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let band = |t: f64, n: f64| ((t + 1.0) * 0.5 * n).floor() as i64 % 2 == 0;
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => u.abs() <= 0.3 || v.abs() <= 0.3,
        3 => band(v, 6.0),
        4 => (0.3..=1.0).contains(&(u * u + v * v)),
        5 => v >= -0.9 && u.abs() <= (v + 0.9) / 1.9,
        6 => band(u, 4.0) == band(v, 4.0),
        _ => band((u + v) * 0.5, 6.0),
    }
}

fn render(class: usize, res: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let extent = rng.gen_range(MIN_EXTENT..=MAX_EXTENT) * res as f64;
    let half = extent / 2.0;
    let cy = rng.gen_range(half..=res as f64 - half);
    let cx = rng.gen_range(half..=res as f64 - half);
    let background: [f64; 3] = std::array::from_fn(|_| rng.gen_range(BACKGROUND));
    let foreground: [f64; 3] = std::array::from_fn(|c| background[c] + rng.gen_range(CONTRAST));
    let mut data = vec![0.0; 3 * res * res];
    for y in 0..res {
        for x in 0..res {
            let u = (x as f64 + 0.5 - cx) / half;
            let v = (y as f64 + 0.5 - cy) / half;
            let hit = u.abs() <= 1.0 && v.abs() <= 1.0 && inside(class, u, v);
            for c in 0..3 {
                let base = if hit { foreground[c] } else { background[c] };
                let noise = rng.gen_range(-NOISE..NOISE);
                data[(c * res + y) * res + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, res, res], data)
}

/// `per_class` RGB images of each of the first `classes` shapes, stored class
/// by class. Bitwise deterministic for a given seed.
pub fn synth_dataset(per_class: usize, classes: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SHAPE_NAMES.len()).contains(&classes) {
        return Err(Error::Config(format!(
            "synthetic dataset supports 2 to {} classes, got {classes}",
            SHAPE_NAMES.len()
        )));
    }
    if per_class == 0 || resolution < 8 {
        return Err(Error::Config("synthetic dataset needs per_class >= 1 and resolution >= 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_class * classes);
    let mut labels = Vec::with_capacity(per_class * classes);
    for class in 0..classes {
        for _ in 0..per_class {
            images.push(render(class, resolution, &mut rng));
            labels.push(class);
        }
    }
    Dataset::new(
        images,
        labels,
        SHAPE_NAMES[..classes].iter().map(|s| s.to_string()).collect(),
        DataSource::Synthetic {
            per_class,
            classes,
            resolution,
            seed,
        },
    )
}
