//! Banks of elastically displaced 2-D Hermite-Gaussian filters.
//!
//! Every basis function is evaluated analytically on a displaced `k×k`
//! coordinate grid, once per transformation path, so all paths keep the same
//! kernel size. Path 0 is always the identity.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

/// One rotation-scaling displacement: elasticity `alpha` and angle `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub alpha: f64,
    pub theta: f64,
}

impl TransformSpec {
    pub const IDENTITY: TransformSpec = TransformSpec {
        alpha: 0.0,
        theta: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        self.alpha == 0.0
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "transform {index}: alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..2.0 * PI).contains(&self.theta) {
            return Err(Error::Config(format!(
                "transform {index}: theta must lie in [0, 2π), got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    pub num_basis: usize,
    pub transforms: Vec<TransformSpec>,
}

impl BasisConfig {
    /// Complete basis with the identity path plus pure scaling up/down and both
    /// rotation directions at elasticity `alpha`.
    pub fn standard(kernel_size: usize, sigma: f64, alpha: f64) -> Self {
        let mut transforms = vec![TransformSpec::IDENTITY];
        transforms.extend(
            [0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2]
                .into_iter()
                .map(|theta| TransformSpec { alpha, theta }),
        );
        BasisConfig {
            kernel_size,
            sigma,
            num_basis: kernel_size * kernel_size,
            transforms,
        }
    }

    pub fn paths(&self) -> usize {
        self.transforms.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_size;
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be odd, got {k}")));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.num_basis == 0 || self.num_basis > k * k {
            return Err(Error::Config(format!(
                "num_basis must lie in 1..={}, got {}",
                k * k,
                self.num_basis
            )));
        }
        let first = self
            .transforms
            .first()
            .ok_or_else(|| Error::Config("at least one transform (the identity) is required".into()))?;
        if !first.is_identity() {
            return Err(Error::Config("transform 0 must be the identity (alpha = 0)".into()));
        }
        for (i, t) in self.transforms.iter().enumerate() {
            t.validate(i)?;
        }
        Ok(())
    }
}

/// Integer coordinates centred on the middle pixel: `x` varies along columns,
/// `y` along rows.
pub fn coordinate_grid(k: usize) -> Result<(Tensor, Tensor)> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("grid size must be odd, got {k}")));
    }
    let r = (k / 2) as f64;
    let x = Tensor::from_fn(&[k, k], |i| (i % k) as f64 - r);
    let y = Tensor::from_fn(&[k, k], |i| (i / k) as f64 - r);
    Ok((x, y))
}

/// `x' = x + α(x cosθ + y sinθ)`, `y' = y + α(−x sinθ + y cosθ)`.
pub fn rotation_scaling_displacement(
    x: &Tensor,
    y: &Tensor,
    t: TransformSpec,
) -> Result<(Tensor, Tensor)> {
    let (s, c) = t.theta.sin_cos();
    let xd = x.zip_map(y, |x, y| x + t.alpha * (x * c + y * s))?;
    let yd = x.zip_map(y, |x, y| y + t.alpha * (-x * s + y * c))?;
    Ok((xd, yd))
}

/// Physicists' Hermite polynomial `H_n(t)` by the three-term recurrence.
pub fn hermite(n: usize, t: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 2.0 * t);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = 2.0 * t * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

pub fn hermite_polynomial(n: usize, t: &Tensor) -> Tensor {
    t.map(|v| hermite(n, v))
}

/// `(n, m)` index pairs sorted by total degree, then by `n`.
pub fn basis_order(kernel_size: usize, count: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..kernel_size)
        .flat_map(|n| (0..kernel_size).map(move |m| (n, m)))
        .collect();
    pairs.sort_by_key(|&(n, m)| (n + m, n));
    pairs.truncate(count);
    pairs
}

/// Immutable stack of basis filters `[P, B, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisBank {
    filters: Tensor,
    config: BasisConfig,
    order: Vec<(usize, usize)>,
}

fn hermite_gaussian(n: usize, m: usize, sigma: f64, x: f64, y: f64) -> f64 {
    hermite(n, x / sigma) * hermite(m, y / sigma) * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        / (sigma * sigma)
}

pub fn build_basis_bank(config: &BasisConfig) -> Result<BasisBank> {
    config.validate()?;
    let k = config.kernel_size;
    let order = basis_order(k, config.num_basis);
    let (gx, gy) = coordinate_grid(k)?;
    let (paths, b) = (config.paths(), order.len());
    let mut filters = Tensor::zeros(&[paths, b, k, k]);
    for (p, t) in config.transforms.iter().enumerate() {
        let (xd, yd) = if t.is_identity() {
            (gx.clone(), gy.clone())
        } else {
            rotation_scaling_displacement(&gx, &gy, *t)?
        };
        for (bi, &(n, m)) in order.iter().enumerate() {
            let start = (p * b + bi) * k * k;
            let slice = &mut filters.data_mut()[start..start + k * k];
            for (i, v) in slice.iter_mut().enumerate() {
                *v = hermite_gaussian(n, m, config.sigma, xd.data()[i], yd.data()[i]);
            }
            let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-300 && norm.is_finite()) {
                return Err(Error::Config(format!(
                    "basis function (n={n}, m={m}) vanishes on the grid of path {p}"
                )));
            }
            slice.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(BasisBank {
        filters,
        config: config.clone(),
        order,
    })
}

impl BasisBank {
    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    pub fn config(&self) -> &BasisConfig {
        &self.config
    }

    pub fn order(&self) -> &[(usize, usize)] {
        &self.order
    }

    pub fn paths(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn num_basis(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.filters.shape()[2]
    }

    pub fn is_complete(&self) -> bool {
        self.num_basis() == self.kernel_size() * self.kernel_size()
    }

    pub fn into_shared(self) -> Arc<BasisBank> {
        Arc::new(self)
    }

    /// Filter `b` of path `p`, `k*k` values.
    pub fn filter(&self, p: usize, b: usize) -> &[f64] {
        let kk = self.kernel_size() * self.kernel_size();
        let start = (p * self.num_basis() + b) * kk;
        &self.filters.data()[start..start + kk]
    }

    fn check_weights(&self, w: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        match w.shape()[..] {
            [o, c, b] if b == self.num_basis() => Ok((o, c)),
            _ => Err(Error::shape(
                op,
                format!(
                    "weights must be [O, C, {}], got {:?}",
                    self.num_basis(),
                    w.shape()
                ),
            )),
        }
    }

    /// Kernels `[O, C, k, k]` of path `p`: `Σ_b w[o,c,b] · filters[p,b]`.
    pub fn synthesize_path(&self, w: &Tensor, p: usize) -> Result<Tensor> {
        let (o, c) = self.check_weights(w, "synthesize_kernels")?;
        let (k, b) = (self.kernel_size(), self.num_basis());
        let mut out = Tensor::zeros(&[o, c, k, k]);
        for (oc, dst) in out.data_mut().chunks_mut(k * k).enumerate() {
            for bi in 0..b {
                let coeff = w.data()[oc * b + bi];
                if coeff == 0.0 {
                    continue;
                }
                for (d, f) in dst.iter_mut().zip(self.filter(p, bi)) {
                    *d += coeff * f;
                }
            }
        }
        Ok(out)
    }

    /// Gradient w.r.t. the weights of `Σ_p <grad_kernels[p], synthesize_path(w, p)>`.
    /// Paths whose entry is `None` contribute nothing.
    pub fn synthesize_backward(&self, grad_kernels: &[Option<Tensor>]) -> Result<Tensor> {
        let first = grad_kernels
            .iter()
            .flatten()
            .next()
            .ok_or(Error::Empty("synthesize_backward"))?;
        let (o, c, k, _) = first.dims4("synthesize_backward")?;
        if grad_kernels.len() != self.paths() || k != self.kernel_size() {
            return Err(Error::shape(
                "synthesize_backward",
                format!(
                    "{} path gradients of size {k} for a bank with {} paths of size {}",
                    grad_kernels.len(),
                    self.paths(),
                    self.kernel_size()
                ),
            ));
        }
        let b = self.num_basis();
        let mut gw = Tensor::zeros(&[o, c, b]);
        for (p, gk) in grad_kernels.iter().enumerate() {
            let Some(gk) = gk else { continue };
            if gk.shape() != first.shape() {
                return Err(Error::shape("synthesize_backward", "path gradient shapes differ"));
            }
            for (oc, src) in gk.data().chunks(k * k).enumerate() {
                for bi in 0..b {
                    let dot: f64 = src.iter().zip(self.filter(p, bi)).map(|(a, f)| a * f).sum();
                    gw.data_mut()[oc * b + bi] += dot;
                }
            }
        }
        Ok(gw)
    }

    /// Least-squares projection of spatial kernels onto the identity-path basis.
    pub fn projector(&self) -> Result<Projector> {
        let (k, b) = (self.kernel_size(), self.num_basis());
        let design = DMatrix::from_fn(k * k, b, |i, j| self.filter(0, j)[i]);
        let svd = design.clone().svd(true, true);
        let sv = &svd.singular_values;
        let (max, min) = sv
            .iter()
            .fold((0.0f64, f64::INFINITY), |(mx, mn), &s| (mx.max(s), mn.min(s)));
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition < 1e10) {
            return Err(Error::RankDeficient { condition });
        }
        Ok(Projector {
            svd,
            condition,
            num_basis: b,
            kernel_size: k,
        })
    }
}

/// Solves `argmin_w ‖Σ_b w_b ψ_b − κ‖²` against the identity-path filters.
pub struct Projector {
    svd: nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    condition: f64,
    num_basis: usize,
    kernel_size: usize,
}

impl Projector {
    /// Ratio of the largest to the smallest singular value of the design matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// `kernels[O, C, k, k] -> w[O, C, B]`
    pub fn project(&self, kernels: &Tensor) -> Result<Tensor> {
        let (o, c, k, kw) = kernels.dims4("project_kernels")?;
        if k != self.kernel_size || kw != k {
            return Err(Error::shape(
                "project_kernels",
                format!(
                    "kernel size {k}x{kw} does not match basis size {}",
                    self.kernel_size
                ),
            ));
        }
        let mut w = Tensor::zeros(&[o, c, self.num_basis]);
        for (oc, src) in kernels.data().chunks(k * k).enumerate() {
            let rhs = DVector::from_column_slice(src);
            let sol = self
                .svd
                .solve(&rhs, 0.0)
                .map_err(|e| Error::Config(format!("least squares failed: {e}")))?;
            w.data_mut()[oc * self.num_basis..(oc + 1) * self.num_basis]
                .copy_from_slice(sol.as_slice());
        }
        Ok(w)
    }
}

/// All path kernels at once, `[P, O, C, k, k]`.
pub fn synthesize_kernels(bank: &BasisBank, w: &Tensor) -> Result<Tensor> {
    let parts = (0..bank.paths())
        .map(|p| bank.synthesize_path(w, p))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// Binary PGM (P5) rendering of a square filter; min maps to 0 and max to 255.
pub fn filter_to_pgm(values: &[f64], size: usize) -> Vec<u8> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 {
            ((v - min) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_is_centred() {
        let (x, y) = coordinate_grid(3).unwrap();
        assert_eq!(&x.data()[0..3], &[-1.0, 0.0, 1.0]);
        assert_eq!((x.data()[4], y.data()[4]), (0.0, 0.0));
        let (x, y) = coordinate_grid(5).unwrap();
        assert_eq!((x.data()[0], y.data()[0]), (-2.0, -2.0));
        let (x, y) = coordinate_grid(1).unwrap();
        assert_eq!((x.data(), y.data()), (&[0.0][..], &[0.0][..]));
        assert!(coordinate_grid(4).is_err());
    }

    #[test]
    fn displacement_cases() {
        let (x, y) = coordinate_grid(5).unwrap();
        let (xd, yd) = rotation_scaling_displacement(&x, &y, TransformSpec::IDENTITY).unwrap();
        assert_eq!((xd, yd), (x.clone(), y.clone()));
        let p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let q = Tensor::new(vec![1], vec![0.0]).unwrap();
        let (xd, yd) =
            rotation_scaling_displacement(&p, &q, TransformSpec { alpha: 0.5, theta: 0.0 })
                .unwrap();
        assert_eq!((xd.data()[0], yd.data()[0]), (1.5, 0.0));
    }

    #[test]
    fn hermite_values() {
        assert_eq!(hermite(0, 3.7), 1.0);
        assert_eq!(hermite(2, 1.0), 2.0);
        assert_eq!(hermite(3, 0.5), -5.0);
        let t = Tensor::new(vec![2], vec![0.0, 2.0]).unwrap();
        // H_4(t) = 16t^4 - 48t^2 + 12
        assert_eq!(hermite_polynomial(4, &t).data(), &[12.0, 16.0 * 16.0 - 48.0 * 4.0 + 12.0]);
    }

    #[test]
    fn order_is_sorted_and_distinct() {
        let order = basis_order(3, 9);
        assert_eq!(order[..4], [(0, 0), (0, 1), (1, 0), (0, 2)]);
        let mut sorted = order.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 9);
    }

    #[test]
    fn zeroth_filter_is_positive_gaussian() {
        let bank = build_basis_bank(&BasisConfig::standard(5, 1.0, 0.5)).unwrap();
        let f = bank.filter(0, 0);
        assert!(f.iter().all(|&v| v > 0.0));
        let max = f.iter().cloned().fold(0.0, f64::max);
        assert_eq!(f[12], max);
        assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transformed_paths_differ_from_identity() {
        let bank = build_basis_bank(&BasisConfig::standard(5, 1.0, 0.5)).unwrap();
        for p in 1..bank.paths() {
            let diff = (0..bank.num_basis())
                .flat_map(|b| {
                    bank.filter(p, b)
                        .iter()
                        .zip(bank.filter(0, b))
                        .map(|(a, c)| (a - c).abs())
                        .collect::<Vec<_>>()
                })
                .fold(0.0, f64::max);
            assert!(diff > 0.0, "path {p}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = BasisConfig::standard(3, 1.0, 0.5);
        cfg.num_basis = 10;
        assert!(build_basis_bank(&cfg).is_err());
        let mut cfg = BasisConfig::standard(3, 1.0, 0.5);
        cfg.transforms.swap(0, 1);
        assert!(build_basis_bank(&cfg).is_err());
        assert!(build_basis_bank(&BasisConfig::standard(4, 1.0, 0.5)).is_err());
        assert!(build_basis_bank(&BasisConfig::standard(3, 0.0, 0.5)).is_err());
    }

    #[test]
    fn synthesis_is_linear_and_one_hot_selects() {
        let bank = build_basis_bank(&BasisConfig::standard(3, 1.0, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w1 = Tensor::from_fn(&[2, 3, 9], |_| rng.random_range(-1.0..1.0));
        let w2 = Tensor::from_fn(&[2, 3, 9], |_| rng.random_range(-1.0..1.0));
        let lhs = synthesize_kernels(&bank, &w1.add(&w2).unwrap()).unwrap();
        let rhs = synthesize_kernels(&bank, &w1)
            .unwrap()
            .add(&synthesize_kernels(&bank, &w2).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        assert_eq!(
            synthesize_kernels(&bank, &Tensor::zeros(&[2, 3, 9])).unwrap().max_abs(),
            0.0
        );
        let mut onehot = Tensor::zeros(&[1, 1, 9]);
        onehot.data_mut()[4] = 1.0;
        let k = synthesize_kernels(&bank, &onehot).unwrap();
        for p in 0..bank.paths() {
            assert_eq!(&k.data()[p * 9..(p + 1) * 9], bank.filter(p, 4));
        }
        assert!(bank.synthesize_path(&Tensor::zeros(&[1, 1, 8]), 0).is_err());
    }

    #[test]
    fn projection_inverts_synthesis() {
        let bank = build_basis_bank(&BasisConfig::standard(3, 1.0, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::from_fn(&[2, 2, 9], |_| rng.random_range(-1.0..1.0));
        let proj = bank.projector().unwrap();
        let back = proj.project(&bank.synthesize_path(&w, 0).unwrap()).unwrap();
        assert!(back.max_abs_diff(&w) < 1e-10);
        assert!(proj.project(&Tensor::zeros(&[1, 1, 3, 3])).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn pgm_maps_extremes() {
        let pgm = filter_to_pgm(&[-1.0, 0.0, 1.0, 0.5], 2);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[0, 128, 255, 191]);
    }
}
