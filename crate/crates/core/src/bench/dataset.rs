use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnengine::Dataset;
use crate::rng::{streams, Philox};

/// Names of the procedural class patterns, in class order.
pub const RECIPES: [&str; 10] = [
    "horizontal_bars",
    "vertical_bars",
    "diagonal_stripes",
    "antidiagonal_stripes",
    "center_blob",
    "ring",
    "checker_phase0",
    "checker_phase1",
    "cross",
    "corner_blobs",
];

/// Peak-to-peak contrast of the class patterns before noise.
pub const PATTERN_CONTRAST: f32 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            classes: 8,
            samples_per_class: 500,
            image_size: 16,
            noise_sigma: 0.3,
            seed: 7,
        }
    }
}

/// Pattern intensity in [0, 1] of `class` at pixel (y, x) of an s×s image.
pub fn pattern(class: usize, y: usize, x: usize, s: usize) -> f32 {
    let c = (s as f32 - 1.0) / 2.0;
    let (fy, fx) = (y as f32 - c, x as f32 - c);
    let r = (fy * fy + fx * fx).sqrt();
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    match class {
        0 => on(y % 4 < 2),
        1 => on(x % 4 < 2),
        2 => on((x + y) % 4 < 2),
        3 => on((x + s * 4 - y) % 4 < 2),
        4 => (-(r * r) / (2.0 * (s as f32 / 5.0).powi(2))).exp(),
        5 => on((r - s as f32 / 3.0).abs() < 1.2),
        6 => on((x / 2 + y / 2) % 2 == 0),
        7 => on((x / 2 + y / 2) % 2 == 1),
        8 => on(fy.abs() < 1.5 || fx.abs() < 1.5),
        9 => {
            let q = s as f32 / 4.0;
            let d = (fy.abs() - q - 0.5).powi(2) + (fx.abs() - q - 0.5).powi(2);
            (-d / (2.0 * (s as f32 / 10.0).powi(2))).exp()
        }
        _ => unreachable!("class beyond recipe list"),
    }
}

/// Sample `n` has label `(n / 2) % classes`, so the even (train) and odd
/// (test) halves contain every class. Pixel `p` of sample `n` gets normal
/// number `n * size² + p` of the dataset-noise stream.
pub fn gen_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > RECIPES.len() {
        return Err(Error::Config(format!(
            "classes must be in 2..={}, got {}",
            RECIPES.len(),
            spec.classes
        )));
    }
    if spec.image_size < 4 || spec.samples_per_class == 0 {
        return Err(Error::Config("image_size must be ≥ 4 and samples_per_class ≥ 1".into()));
    }
    let s = spec.image_size;
    let px = s * s;
    let templates: Vec<Vec<f32>> = (0..spec.classes)
        .map(|c| {
            (0..px)
                .map(|p| PATTERN_CONTRAST * (pattern(c, p / s, p % s, s) - 0.5))
                .collect()
        })
        .collect();
    let total = spec.classes * spec.samples_per_class;
    let noise = Philox::new(spec.seed, streams::DATASET_NOISE);
    let mut inputs = Vec::with_capacity(total * px);
    let mut labels = Vec::with_capacity(total);
    for n in 0..total {
        let label = (n / 2) % spec.classes;
        for (p, &t) in templates[label].iter().enumerate() {
            let z = if spec.noise_sigma == 0.0 { 0.0 } else { noise.normal_at((n * px + p) as u64) };
            inputs.push(t + spec.noise_sigma * z);
        }
        labels.push(label);
    }
    Dataset::new(vec![1, s, s], inputs, labels)
}

/// Even-indexed samples train, odd-indexed samples test.
pub fn split(data: &Dataset) -> (Dataset, Dataset) {
    let even: Vec<usize> = (0..data.len()).step_by(2).collect();
    let odd: Vec<usize> = (1..data.len()).step_by(2).collect();
    (data.select(&even), data.select(&odd))
}
