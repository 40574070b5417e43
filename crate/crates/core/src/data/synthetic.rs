//! Small procedurally drawn shape dataset for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{quantize, Dataset, Meta};
use crate::{Error, Result, Tensor};

/// Shape families, in label order.
pub const SHAPE_CLASSES: [&str; 8] = [
    "ring", "disc", "cross", "corner", "bar_0", "bar_45", "bar_90", "bar_135",
];

fn default_size() -> usize {
    32
}
fn default_classes() -> usize {
    4
}
fn default_channels() -> usize {
    1
}
fn default_noise() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_size")]
    pub image_size: usize,
    /// At most 8: ring, disc, cross, corner, then bars at 0°, 45°, 90°, 135°.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(samples_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            image_size: default_size(),
            num_classes: default_classes(),
            samples_per_class,
            seed,
            channels: default_channels(),
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} is below 16",
                self.image_size
            )));
        }
        if !(1..=SHAPE_CLASSES.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=8, got {}",
                self.num_classes
            )));
        }
        if self.channels == 0 || !(self.noise >= 0.0) {
            return Err(Error::Config("channels must be positive and noise non-negative".into()));
        }
        Ok(())
    }
}

/// Signed distance to a segment of half-length `half` through the origin
/// along direction `(ux, uy)`, thickened by `half_width`.
fn bar(x: f64, y: f64, ux: f64, uy: f64, half: f64, half_width: f64) -> f64 {
    let along = x * ux + y * uy;
    let across = -x * uy + y * ux;
    let dx = along.abs() - half;
    let dy = across.abs() - half_width;
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    outside + dx.max(dy).min(0.0)
}

/// Signed distance function (negative inside) of one random instance of
/// `class`, in pixel units relative to the shape centre.
fn shape_sdf(class: usize, s: f64, rng: &mut ChaCha8Rng) -> (Box<dyn Fn(f64, f64) -> f64>, f64) {
    let jitter = rng.random_range(-8f64..8.0).to_radians();
    match class {
        0 => {
            let r = rng.random_range(6.0..9.5) * s;
            let t = rng.random_range(1.0..1.6) * s;
            (Box::new(move |x, y| ((x * x + y * y).sqrt() - r).abs() - t), r + t)
        }
        1 => {
            let r = rng.random_range(4.5..8.5) * s;
            (Box::new(move |x, y| (x * x + y * y).sqrt() - r), r)
        }
        2 => {
            let half = rng.random_range(6.0..9.5) * s;
            let w = rng.random_range(1.0..1.8) * s;
            let (c, sn) = (jitter.cos(), jitter.sin());
            (
                Box::new(move |x, y| bar(x, y, c, sn, half, w).min(bar(x, y, -sn, c, half, w))),
                half * 1.42,
            )
        }
        3 => {
            // an "L": two arms leaving the corner point at right angles
            let arm = rng.random_range(6.0..9.5) * s;
            let w = rng.random_range(1.0..1.8) * s;
            let turn = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2 + jitter;
            let (c, sn) = (turn.cos(), turn.sin());
            let h = arm / 2.0;
            (
                Box::new(move |x, y| {
                    let (xr, yr) = (c * x + sn * y + h, -sn * x + c * y + h);
                    bar(xr - h, yr, 1.0, 0.0, h + w, w).min(bar(xr, yr - h, 0.0, 1.0, h + w, w))
                }),
                arm * 1.42,
            )
        }
        _ => {
            let angle = (class - 4) as f64 * std::f64::consts::FRAC_PI_4 + jitter;
            let half = rng.random_range(7.0..10.5) * s;
            let w = rng.random_range(1.0..1.8) * s;
            let (c, sn) = (angle.cos(), angle.sin());
            (Box::new(move |x, y| bar(x, y, c, sn, half, w)), half)
        }
    }
}

fn render(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.image_size;
    let s = n as f64 / 32.0;
    let (sdf, extent) = shape_sdf(class, s, rng);
    let lo = (extent + 1.0).min(n as f64 / 2.0 - 1.0);
    let hi = n as f64 - 1.0 - lo;
    let cx = rng.random_range(lo..=hi.max(lo));
    let cy = rng.random_range(lo..=hi.max(lo));
    let background = rng.random_range(0.0..0.3);
    let contrast = rng.random_range(0.5..0.7);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let tint: Vec<f64> = (0..spec.channels)
        .map(|_| if spec.channels == 1 { 1.0 } else { rng.random_range(0.6..1.0) })
        .collect();
    let mut out = Vec::with_capacity(spec.channels * n * n);
    let mut coverage = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let d = sdf(x as f64 - cx, y as f64 - cy);
            coverage.push((0.5 - d).clamp(0.0, 1.0));
        }
    }
    for t in &tint {
        for &cov in &coverage {
            let v = background + t * contrast * cov + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Draws a balanced, shuffled-by-construction shape dataset. Classes cycle
/// `0, 1, .., K-1, 0, ..` so any prefix is close to balanced.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.samples_per_class * spec.num_classes;
    let mut data = Vec::with_capacity(total * spec.channels * spec.image_size.pow(2));
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.num_classes;
        data.extend(render(spec, class, &mut rng));
        labels.push(class);
    }
    let n = spec.image_size;
    let mut images = Tensor::new(vec![total, spec.channels, n, n], data)?;
    quantize(&mut images);
    Dataset::new(
        images,
        labels,
        SHAPE_CLASSES[..spec.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        Meta {
            source: "synthetic".into(),
            synthetic: Some(spec.clone()),
            ..Meta::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec::new(5, 3);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_histogram(), vec![5; 4]);
        assert_eq!(a.image_shape(), [1, 32, 32]);
        let c = generate_synthetic(&SyntheticSpec::new(5, 4)).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn zero_samples_is_empty() {
        let d = generate_synthetic(&SyntheticSpec::new(0, 1)).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn shapes_are_visible() {
        let mut spec = SyntheticSpec::new(1, 9);
        spec.num_classes = 8;
        spec.noise = 0.0;
        let d = generate_synthetic(&spec).unwrap();
        for i in 0..8 {
            let img = d.image(i);
            let max = img.data().iter().cloned().fold(0.0, f64::max);
            let min = img.data().iter().cloned().fold(1.0, f64::min);
            assert!(max - min > 0.4, "class {i} has contrast {}", max - min);
        }
    }

    #[test]
    fn rejects_small_images() {
        let mut spec = SyntheticSpec::new(1, 0);
        spec.image_size = 8;
        assert!(generate_synthetic(&spec).is_err());
        spec.image_size = 32;
        spec.num_classes = 9;
        assert!(generate_synthetic(&spec).is_err());
    }
}
