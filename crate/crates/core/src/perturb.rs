//! Deterministic image perturbations for robustness evaluation.
//!
//! Every generator is a pure function of `(image, parameters, seed)`. Images
//! are `[C, H, W]` with pixels in `[0, 1]`; outputs keep shape and range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{Error, Result, Tensor};

fn default_sigma_field() -> f64 {
    4.0
}
fn default_noise_unit() -> f64 {
    0.02
}

/// One perturbation and its parameters.
///
/// Serialized adjacently tagged: `{"kind": "rotation", "params": {"theta": 10}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum Perturbation {
    /// No change; the reference row of a sweep.
    Clean,
    /// Smooth random displacement of amplitude `alpha` pixels.
    Elastic {
        alpha: f64,
        #[serde(default = "default_sigma_field")]
        sigma_field: f64,
    },
    /// Additive noise of standard deviation `std × unit` (pixels in `[0, 1]`).
    Gaussian {
        std: f64,
        #[serde(default = "default_noise_unit")]
        unit: f64,
    },
    /// Black disc of radius `radius` at a random centre.
    Occlusion { radius: f64 },
    /// Rotation by `theta` degrees about the image centre.
    Rotation { theta: f64 },
    /// Zeroed `W/2 × H/2` rectangle starting at `(x0, y0)`.
    Cut { x0: usize, y0: usize },
    /// Centre crop of side `⌊W/factor⌋` resized back.
    Zoom { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    #[serde(flatten)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Clean,
    Elastic,
    Gaussian,
    Occlusion,
    Rotation,
    Cut,
    Zoom,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 7] = [
        PerturbKind::Clean,
        PerturbKind::Elastic,
        PerturbKind::Gaussian,
        PerturbKind::Occlusion,
        PerturbKind::Rotation,
        PerturbKind::Cut,
        PerturbKind::Zoom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Clean => "clean",
            PerturbKind::Elastic => "elastic",
            PerturbKind::Gaussian => "gaussian",
            PerturbKind::Occlusion => "occlusion",
            PerturbKind::Rotation => "rotation",
            PerturbKind::Cut => "cut",
            PerturbKind::Zoom => "zoom",
        }
    }

    /// The perturbation at severity value `s` (the kind's own parameter:
    /// α, std, r, θ, cut location, ζ). A cut uses `(s, s)` as its corner.
    pub fn at(self, s: f64) -> Perturbation {
        match self {
            PerturbKind::Clean => Perturbation::Clean,
            PerturbKind::Elastic => Perturbation::Elastic {
                alpha: s,
                sigma_field: default_sigma_field(),
            },
            PerturbKind::Gaussian => Perturbation::Gaussian {
                std: s,
                unit: default_noise_unit(),
            },
            PerturbKind::Occlusion => Perturbation::Occlusion { radius: s },
            PerturbKind::Rotation => Perturbation::Rotation { theta: s },
            PerturbKind::Cut => Perturbation::Cut {
                x0: s.max(0.0) as usize,
                y0: s.max(0.0) as usize,
            },
            PerturbKind::Zoom => Perturbation::Zoom { factor: s },
        }
    }
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation kind {s:?}")))
    }
}

impl Perturbation {
    pub fn kind(&self) -> PerturbKind {
        match self {
            Perturbation::Clean => PerturbKind::Clean,
            Perturbation::Elastic { .. } => PerturbKind::Elastic,
            Perturbation::Gaussian { .. } => PerturbKind::Gaussian,
            Perturbation::Occlusion { .. } => PerturbKind::Occlusion,
            Perturbation::Rotation { .. } => PerturbKind::Rotation,
            Perturbation::Cut { .. } => PerturbKind::Cut,
            Perturbation::Zoom { .. } => PerturbKind::Zoom,
        }
    }

    /// The value plotted on the severity axis.
    pub fn severity(&self) -> f64 {
        match *self {
            Perturbation::Clean => 0.0,
            Perturbation::Elastic { alpha, .. } => alpha,
            Perturbation::Gaussian { std, .. } => std,
            Perturbation::Occlusion { radius } => radius,
            Perturbation::Rotation { theta } => theta,
            Perturbation::Cut { x0, .. } => x0 as f64,
            Perturbation::Zoom { factor } => factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            Perturbation::Elastic { alpha, sigma_field } => {
                if !(alpha >= 0.0 && alpha.is_finite()) || !(sigma_field > 0.0) {
                    return bad(format!(
                        "elastic needs alpha >= 0 and sigma_field > 0, got {alpha}, {sigma_field}"
                    ));
                }
            }
            Perturbation::Gaussian { std, unit } => {
                if !(std >= 0.0 && std.is_finite()) || !(unit >= 0.0 && unit.is_finite()) {
                    return bad(format!("gaussian needs std >= 0 and unit >= 0, got {std}, {unit}"));
                }
            }
            Perturbation::Occlusion { radius } => {
                if !(radius >= 1.0 && radius.is_finite()) {
                    return bad(format!("occlusion radius must be >= 1, got {radius}"));
                }
            }
            Perturbation::Rotation { theta } => {
                // 360 is accepted as the full turn
                if !(0.0..=360.0).contains(&theta) {
                    return bad(format!("rotation angle must be in [0, 360), got {theta}"));
                }
            }
            Perturbation::Zoom { factor } => {
                if !(factor >= 1.0 && factor.is_finite()) {
                    return bad(format!("zoom factor must be >= 1, got {factor}"));
                }
            }
            Perturbation::Clean | Perturbation::Cut { .. } => {}
        }
        Ok(())
    }
}

impl PerturbSpec {
    pub fn new(perturbation: Perturbation, seed: u64) -> Self {
        PerturbSpec { perturbation, seed }
    }

    pub fn clean() -> Self {
        PerturbSpec::new(Perturbation::Clean, 0)
    }

    /// Applies the perturbation to one `[C, H, W]` image with the given seed.
    pub fn apply(&self, image: &Tensor, seed: u64) -> Result<Tensor> {
        self.perturbation.validate()?;
        match self.perturbation {
            Perturbation::Clean => Ok(image.clone()),
            Perturbation::Elastic { alpha, sigma_field } => elastic(image, alpha, sigma_field, seed),
            Perturbation::Gaussian { std, unit } => gaussian_noise(image, std * unit, seed),
            Perturbation::Occlusion { radius } => occlusion(image, radius, seed),
            Perturbation::Rotation { theta } => rotation(image, theta),
            Perturbation::Cut { x0, y0 } => cut(image, x0, y0),
            Perturbation::Zoom { factor } => zoom(image, factor),
        }
    }
}

/// Smooth displacement field in pixels: sampling happens at `(x + dx, y + dy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticField {
    /// `[H, W]`
    pub dx: Tensor,
    /// `[H, W]`
    pub dy: Tensor,
}

impl ElasticField {
    pub fn zeros(height: usize, width: usize) -> Self {
        ElasticField {
            dx: Tensor::zeros(&[height, width]),
            dy: Tensor::zeros(&[height, width]),
        }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        ElasticField {
            dx: Tensor::full(&[height, width], dx),
            dy: Tensor::full(&[height, width], dy),
        }
    }

    /// Gaussian-filtered white noise, each component rescaled so its
    /// standard deviation over the image is exactly `alpha`.
    pub fn random(height: usize, width: usize, alpha: f64, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut component = || {
            let noise = Tensor::from_fn(&[height, width], |_| StandardNormal.sample(&mut rng));
            let mut smooth = gaussian_blur(&noise, sigma);
            let n = smooth.len() as f64;
            let mean = smooth.sum() / n;
            let std = (smooth.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let gain = if std > 0.0 { alpha / std } else { 0.0 };
            for v in smooth.data_mut() {
                *v = (*v - mean) * gain;
            }
            smooth
        };
        let dx = component();
        let dy = component();
        ElasticField { dx, dy }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter of an `[H, W]` plane with edge replication.
fn gaussian_blur(plane: &Tensor, sigma: f64) -> Tensor {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = plane.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + clampi(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * tmp[clampi(y as isize + j as isize - r, h) * w + x])
            .sum()
    })
}

/// Bilinear sample of a plane at real coordinates; `None` outside the pixel
/// grid `[0, W-1] × [0, H-1]`.
fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    let top = if fx == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx };
    let bottom = if fx == 0.0 { at(y1, x0) } else { at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx };
    Some(if fy == 0.0 { top } else { top * (1.0 - fy) + bottom * fy })
}

fn dims3(image: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected a non-empty [C, H, W] image, got {:?}", image.shape()),
        )),
    }
}

/// Resamples every channel at `source(x, y)`; `None` sources become `fill`
/// unless `clamp` pulls them to the nearest edge pixel.
fn resample(
    image: &Tensor,
    op: &'static str,
    clamp: bool,
    source: impl Fn(usize, usize) -> (f64, f64),
) -> Result<Tensor> {
    let (c, h, w) = dims3(image, op)?;
    let mut out = Tensor::zeros(image.shape());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source(x, y);
            let (sx, sy) = if clamp {
                (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64))
            } else {
                (sx, sy)
            };
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                out.data_mut()[ch * h * w + y * w + x] = bilinear(plane, h, w, sx, sy).unwrap_or(0.0);
            }
        }
    }
    Ok(out)
}

/// Bilinear warp sampling at `(x + dx, y + dy)`, clamped to the edge.
pub fn warp(image: &Tensor, field: &ElasticField) -> Result<Tensor> {
    let (_, h, w) = dims3(image, "warp")?;
    if field.dx.shape() != [h, w] || field.dy.shape() != [h, w] {
        return Err(Error::shape(
            "warp",
            format!("field {:?} for a {h}x{w} image", field.dx.shape()),
        ));
    }
    resample(image, "warp", true, |x, y| {
        let i = y * w + x;
        (x as f64 + field.dx.data()[i], y as f64 + field.dy.data()[i])
    })
}

pub fn elastic(image: &Tensor, alpha: f64, sigma_field: f64, seed: u64) -> Result<Tensor> {
    let (_, h, w) = dims3(image, "elastic")?;
    if alpha == 0.0 {
        return Ok(image.clone());
    }
    warp(image, &ElasticField::random(h, w, alpha, sigma_field, seed))
}

/// The pre-clamp noise [`gaussian_noise`] adds for `seed`.
pub fn gaussian_noise_sample(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        std * z
    })
}

/// Adds i.i.d. `N(0, std²)` noise (pixel units of `[0, 1]`) and clamps.
pub fn gaussian_noise(image: &Tensor, std: f64, seed: u64) -> Result<Tensor> {
    dims3(image, "gaussian_noise")?;
    if std == 0.0 {
        return Ok(image.clone());
    }
    let noise = gaussian_noise_sample(image.shape(), std, seed);
    image.zip_map(&noise, |p, n| (p + n).clamp(0.0, 1.0))
}

/// Sets pixels with `(x−cx)² + (y−cy)² ≤ r²` to 0.
pub fn occlude_disc(image: &Tensor, cx: f64, cy: f64, radius: f64) -> Result<Tensor> {
    let (c, h, w) = dims3(image, "occlusion")?;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (ddx, ddy) = (x as f64 - cx, y as f64 - cy);
            if ddx * ddx + ddy * ddy <= radius * radius {
                for ch in 0..c {
                    out.data_mut()[ch * h * w + y * w + x] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Integer disc centre drawn uniformly from `[r, W−1] × [r, H−1]` (collapsing
/// to the far edge when `r` exceeds it).
pub fn occlusion_center(height: usize, width: usize, radius: f64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |n: usize, rng: &mut ChaCha8Rng| {
        let hi = n - 1;
        let lo = (radius.ceil() as usize).min(hi);
        rng.random_range(lo..=hi) as f64
    };
    let cx = pick(width, &mut rng);
    let cy = pick(height, &mut rng);
    (cx, cy)
}

pub fn occlusion(image: &Tensor, radius: f64, seed: u64) -> Result<Tensor> {
    let (_, h, w) = dims3(image, "occlusion")?;
    let (cx, cy) = occlusion_center(h, w, radius, seed);
    occlude_disc(image, cx, cy, radius)
}

/// Exact `(cos, sin)` for multiples of 90°.
fn cos_sin_degrees(theta: f64) -> (f64, f64) {
    let turns = theta / 90.0;
    if turns.fract() == 0.0 {
        match (turns as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = theta.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotates content by `theta` degrees about the image centre (clockwise as
/// displayed, since rows grow downward); exposed corners become 0.
pub fn rotation(image: &Tensor, theta: f64) -> Result<Tensor> {
    let (_, h, w) = dims3(image, "rotation")?;
    let (cos, sin) = cos_sin_degrees(theta);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    resample(image, "rotation", false, |x, y| {
        let (u, v) = (x as f64 - cx, y as f64 - cy);
        // inverse rotation maps each output pixel back into the source
        (cos * u + sin * v + cx, -sin * u + cos * v + cy)
    })
}

/// Zeros the `⌊W/2⌋ × ⌊H/2⌋` rectangle whose top-left corner is `(x0, y0)`.
pub fn cut(image: &Tensor, x0: usize, y0: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(image, "cut")?;
    let mut out = image.clone();
    for ch in 0..c {
        for y in y0.min(h)..(y0.saturating_add(h / 2)).min(h) {
            for x in x0.min(w)..(x0.saturating_add(w / 2)).min(w) {
                out.data_mut()[ch * h * w + y * w + x] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Area [`cut`] zeros for a `width × height` image.
pub fn cut_area(height: usize, width: usize, x0: usize, y0: usize) -> usize {
    let span = |start: usize, n: usize| (start.saturating_add(n / 2)).min(n).saturating_sub(start);
    span(x0, width) * span(y0, height)
}

/// Centre crop of side `⌊W/ζ⌋ × ⌊H/ζ⌋` resized back with bilinear
/// interpolation (pixel centres aligned).
pub fn zoom(image: &Tensor, factor: f64) -> Result<Tensor> {
    let (_, h, w) = dims3(image, "zoom")?;
    let side = |n: usize| ((n as f64 / factor).floor() as usize).clamp(1, n);
    let (cw, chh) = (side(w), side(h));
    let (ox, oy) = ((w - cw) / 2, (h - chh) / 2);
    let map = |i: usize, out: usize, crop: usize| (i as f64 + 0.5) * crop as f64 / out as f64 - 0.5;
    resample(image, "zoom", true, |x, y| {
        let sx = map(x, w, cw).clamp(0.0, (cw - 1) as f64) + ox as f64;
        let sy = map(y, h, chh).clamp(0.0, (chh - 1) as f64) + oy as f64;
        (sx, sy)
    })
}

/// Applies `spec` to every image; image `i` uses seed `spec.seed ^ i`.
pub fn perturb_dataset(dataset: &Dataset, spec: &PerturbSpec) -> Result<Dataset> {
    spec.perturbation.validate()?;
    let mut out = dataset.map_images(|i, img| spec.apply(img, spec.seed ^ i as u64))?;
    if spec.perturbation != Perturbation::Clean {
        out.meta.perturbation = Some(spec.clone());
    }
    Ok(out)
}

/// Ordered severity values of one perturbation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: PerturbKind,
    pub severities: Vec<f64>,
}

impl Schedule {
    pub fn specs(&self, seed: u64) -> Vec<PerturbSpec> {
        self.severities
            .iter()
            .map(|&s| PerturbSpec::new(self.kind.at(s), seed))
            .collect()
    }
}

/// Default schedules for square images of side `size`, mildest first.
/// Elastic amplitudes, occlusion radii and cut corners scale with the image;
/// at 32 px the elastic amplitudes are 1–4 px, which takes a small CNN from
/// a few points of loss to a few tens.
pub fn default_schedules(size: usize) -> Vec<Schedule> {
    let s = size as f64;
    let step = (s / 16.0).max(1.0);
    let px = s / 32.0;
    let sched = |kind, severities: Vec<f64>| Schedule { kind, severities };
    vec![
        sched(PerturbKind::Elastic, (1..=4).map(|i| i as f64 * px).collect()),
        sched(PerturbKind::Gaussian, vec![1.0, 2.0, 3.0, 4.0, 5.0]),
        sched(PerturbKind::Occlusion, (1..=4).map(|i| i as f64 * step).collect()),
        sched(PerturbKind::Rotation, vec![5.0, 10.0, 15.0, 20.0]),
        sched(
            PerturbKind::Cut,
            (1..=4).map(|i| (s - i as f64 * s / 8.0).floor()).collect(),
        ),
        sched(PerturbKind::Zoom, vec![1.1, 1.2, 1.35, 1.5]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| ((i * 37) % 101) as f64 / 100.0)
    }

    #[test]
    fn spec_json_shape() {
        let spec = PerturbSpec::new(Perturbation::Rotation { theta: 10.0 }, 7);
        let v = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["kind"], "rotation");
        assert_eq!(v["params"]["theta"], 10.0);
        assert_eq!(v["seed"], 7);
        let back: PerturbSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, spec);
        let e: PerturbSpec =
            serde_json::from_str(r#"{"kind":"elastic","params":{"alpha":1.0},"seed":3}"#).unwrap();
        assert_eq!(
            e.perturbation,
            Perturbation::Elastic {
                alpha: 1.0,
                sigma_field: 4.0
            }
        );
        let c: PerturbSpec = serde_json::from_str(r#"{"kind":"clean"}"#).unwrap();
        assert_eq!(c, PerturbSpec::clean());
    }

    #[test]
    fn invalid_parameters() {
        for p in [
            Perturbation::Occlusion { radius: 0.5 },
            Perturbation::Zoom { factor: 0.9 },
            Perturbation::Rotation { theta: -1.0 },
            Perturbation::Gaussian { std: -1.0, unit: 0.02 },
        ] {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn zero_field_and_unit_shift() {
        let img = ramp(2, 5, 6);
        assert_eq!(warp(&img, &ElasticField::zeros(5, 6)).unwrap(), img);
        let shifted = warp(&img, &ElasticField::constant(5, 6, 1.0, 0.0)).unwrap();
        for ch in 0..2 {
            for y in 0..5 {
                for x in 0..6 {
                    let src = (x + 1).min(5);
                    assert_eq!(
                        shifted.data()[ch * 30 + y * 6 + x],
                        img.data()[ch * 30 + y * 6 + src]
                    );
                }
            }
        }
    }

    #[test]
    fn identities() {
        let img = ramp(1, 8, 8);
        assert_eq!(elastic(&img, 0.0, 4.0, 1).unwrap(), img);
        assert_eq!(gaussian_noise(&img, 0.0, 1).unwrap(), img);
        assert_eq!(rotation(&img, 0.0).unwrap(), img);
        assert!(rotation(&img, 360.0).unwrap().max_abs_diff(&img) < 1e-9);
        assert_eq!(cut(&img, 8, 8).unwrap(), img);
        assert_eq!(zoom(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn rotation_by_quarter_turn_permutes() {
        let (h, w) = (6, 6);
        let img = ramp(1, h, w);
        let r = rotation(&img, 90.0).unwrap();
        for y in 0..h {
            for x in 0..w {
                // out(x, y) = in(cx + (y - cy), cy - (x - cx))
                let (sx, sy) = (y, w - 1 - x);
                let diff = (r.data()[y * w + x] - img.data()[sy * w + sx]).abs();
                assert!(diff < 1e-9);
            }
        }
        let back = rotation(&rotation(&r, 180.0).unwrap(), 90.0).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn cut_areas() {
        let img = Tensor::full(&[1, 10, 12], 0.5);
        let out = cut(&img, 0, 0).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 30);
        for (x0, y0) in [(9, 2), (11, 9), (0, 7), (12, 0)] {
            let out = cut(&img, x0, y0).unwrap();
            let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, cut_area(10, 12, x0, y0));
        }
    }

    #[test]
    fn small_disc() {
        let img = Tensor::full(&[1, 9, 9], 1.0);
        for seed in 0..20 {
            let out = occlusion(&img, 1.0, seed).unwrap();
            let changed = out.data().iter().filter(|&&v| v == 0.0).count();
            assert!((1..=5).contains(&changed));
        }
        let all = occlude_disc(&img, 4.0, 4.0, 20.0).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zoom_keeps_shape_and_range() {
        let img = ramp(3, 9, 9);
        for f in [1.3, 2.0, 3.7] {
            let z = zoom(&img, f).unwrap();
            assert_eq!(z.shape(), img.shape());
            assert!(z.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn schedules_are_ordered() {
        for s in default_schedules(32) {
            assert!(!s.severities.is_empty());
            for spec in s.specs(0) {
                spec.perturbation.validate().unwrap();
            }
        }
    }
}
