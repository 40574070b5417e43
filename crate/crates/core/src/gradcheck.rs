//! Finite-difference verification of every hand-written backward pass.
//!
//! Each check draws small random instances, rejects the ones sitting close to
//! a kink (max ties, ReLU at zero) and compares the analytic gradient against
//! central differences of the scalar `Σ out ⊙ probe` for a fixed random probe.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis_bank, BasisBank, BasisConfig};
use crate::eaconv::{EaConv2d, ResBlock};
use crate::numerics::*;
use crate::{Error, Result, Tensor};

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every entry.
pub fn numerical_gradient(
    x: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest entrywise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Minimum distance from any kink an instance must keep.
    pub margin: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            margin: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub op: String,
    pub instances: usize,
    /// Instances thrown away for sitting too close to a kink.
    pub rejected: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Check = fn(&GradcheckConfig, &mut ChaCha8Rng) -> Result<Option<f64>>;

const CHECKS: &[(&str, Check)] = &[
    ("conv2d", check_conv2d),
    ("relu", check_relu),
    ("maxpool2d", check_maxpool),
    ("global_avg_pool", check_gap),
    ("batchnorm2d_train", check_batchnorm_train),
    ("batchnorm2d_inference", check_batchnorm_inference),
    ("linear", check_linear),
    ("softmax_cross_entropy", check_cross_entropy),
    ("pixelwise_max", check_pixelwise_max),
    ("eaconv", check_eaconv),
    ("resblock", check_resblock),
    ("earesblock", check_earesblock),
];

/// Names of every check in suite order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check (or the ones named in `only`).
pub fn run_suite(config: &GradcheckConfig, only: Option<&[String]>) -> Result<Vec<CheckResult>> {
    if let Some(names) = only {
        if let Some(bad) = names.iter().find(|n| !check_names().contains(&n.as_str())) {
            return Err(Error::Config(format!("unknown gradient check {bad:?}")));
        }
    }
    let mut results = Vec::new();
    for (i, (name, check)) in CHECKS.iter().enumerate() {
        if only.is_some_and(|names| !names.iter().any(|n| n == name)) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64 * 7919));
        results.push(run_check(name, *check, config, &mut rng)?);
    }
    Ok(results)
}

fn run_check(
    name: &str,
    check: Check,
    config: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut rejected = 0;
    let budget = config.instances * 200 + 100;
    while done < config.instances {
        if rejected > budget {
            return Err(Error::Config(format!(
                "{name}: could not draw {} tie-free instances",
                config.instances
            )));
        }
        match check(config, rng)? {
            Some(err) => {
                worst = worst.max(err);
                done += 1;
            }
            None => rejected += 1,
        }
    }
    log::debug!("gradcheck {name}: {done} instances, {rejected} rejected, max rel err {worst:.3e}");
    Ok(CheckResult {
        op: name.to_string(),
        instances: done,
        rejected,
        max_rel_error: worst,
        passed: worst < config.tolerance,
    })
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ out ⊙ probe`.
fn project(out: &Tensor, probe: &Tensor) -> Result<f64> {
    out.dot(probe)
}

fn compare(
    cfg: &GradcheckConfig,
    analytic: &Tensor,
    at: &Tensor,
    f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<f64> {
    let numeric = numerical_gradient(at, cfg.step, f)?;
    Ok(max_relative_error(analytic, &numeric, cfg.floor))
}

/// Smallest gap between the largest and second largest entry of each group.
fn min_top_gap<'a>(groups: impl Iterator<Item = Vec<f64>> + 'a) -> f64 {
    groups
        .map(|mut g| {
            if g.len() < 2 {
                return f64::INFINITY;
            }
            g.sort_by(|a, b| b.total_cmp(a));
            g[0] - g[1]
        })
        .fold(f64::INFINITY, f64::min)
}

fn check_conv2d(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=k / 2);
    let c = rng.random_range(1..=3);
    let o = rng.random_range(1..=3);
    // choose a spatial extent the stride divides
    let mut h = rng.random_range(k.max(3)..=7);
    while (h + 2 * padding - k) % stride != 0 {
        h += 1;
    }
    let x = uniform(&[2, c, h, h], rng);
    let w = uniform(&[o, c, k, k], rng);
    let y = conv2d(&x, &w, stride, padding)?;
    let probe = uniform(y.shape(), rng);
    let (gx, gw) = conv2d_backward(&probe, &x, &w, stride, padding)?;
    let ex = compare(cfg, &gx, &x, |x| project(&conv2d(x, &w, stride, padding)?, &probe))?;
    let ew = compare(cfg, &gw, &w, |w| project(&conv2d(&x, w, stride, padding)?, &probe))?;
    Ok(Some(ex.max(ew)))
}

fn check_relu(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let x = uniform(&[2, 3, 4, 4], rng);
    if x.data().iter().any(|v| v.abs() < cfg.margin) {
        return Ok(None);
    }
    let probe = uniform(x.shape(), rng);
    let g = relu_backward(&probe, &x)?;
    Ok(Some(compare(cfg, &g, &x, |x| project(&relu(x), &probe))?))
}

fn check_maxpool(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let size = rng.random_range(2..=3);
    let x = uniform(&[2, 2, 2 * size, 2 * size + 1], rng);
    let (y, index) = maxpool2d(&x, size)?;
    let (n, c, oh, ow) = y.dims4("gradcheck")?;
    let w = x.shape()[3];
    let windows = (0..n * c * oh * ow).map(|i| {
        let (plane, r) = (i / (oh * ow), i % (oh * ow));
        let (oy, ox) = (r / ow, r % ow);
        let base = plane * x.shape()[2] * w;
        (0..size * size)
            .map(|j| x.data()[base + (oy * size + j / size) * w + ox * size + j % size])
            .collect()
    });
    if min_top_gap(windows) < cfg.margin {
        return Ok(None);
    }
    let probe = uniform(y.shape(), rng);
    let g = maxpool2d_backward(&probe, &index)?;
    Ok(Some(compare(cfg, &g, &x, |x| project(&maxpool2d(x, size)?.0, &probe))?))
}

fn check_gap(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let x = uniform(&[2, 3, rng.random_range(1..=5), rng.random_range(1..=5)], rng);
    let y = global_avg_pool(&x)?;
    let probe = uniform(y.shape(), rng);
    let g = global_avg_pool_backward(&probe, x.shape())?;
    Ok(Some(compare(cfg, &g, &x, |x| project(&global_avg_pool(x)?, &probe))?))
}

fn batchnorm_check(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, training: bool) -> Result<f64> {
    let c = rng.random_range(1..=3);
    let x = uniform(&[3, c, 3, 3], rng).map(|v| 2.0 * v + 0.5);
    let weight = uniform(&[c], rng);
    let bias = uniform(&[c], rng);
    let rm = uniform(&[c], rng);
    let rv = Tensor::from_fn(&[c], |_| rng.random_range(0.5..2.0));
    let eps = 1e-5;
    let bn = |x: &Tensor, w: &Tensor, b: &Tensor| batchnorm2d(x, w, b, &rm, &rv, eps, training);
    let (y, cache) = bn(&x, &weight, &bias)?;
    let probe = uniform(y.shape(), rng);
    let (gx, gw, gb) = batchnorm2d_backward(&probe, &cache, &weight)?;
    let ex = compare(cfg, &gx, &x, |x| project(&bn(x, &weight, &bias)?.0, &probe))?;
    let ew = compare(cfg, &gw, &weight, |w| project(&bn(&x, w, &bias)?.0, &probe))?;
    let eb = compare(cfg, &gb, &bias, |b| project(&bn(&x, &weight, b)?.0, &probe))?;
    Ok(ex.max(ew).max(eb))
}

fn check_batchnorm_train(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    batchnorm_check(cfg, rng, true).map(Some)
}

fn check_batchnorm_inference(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    batchnorm_check(cfg, rng, false).map(Some)
}

fn check_linear(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let (n, i, o) = (
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=5),
    );
    let x = uniform(&[n, i], rng);
    let w = uniform(&[o, i], rng);
    let b = uniform(&[o], rng);
    let probe = uniform(&[n, o], rng);
    let (gx, gw, gb) = linear_backward(&probe, &x, &w)?;
    let ex = compare(cfg, &gx, &x, |x| project(&linear(x, &w, &b)?, &probe))?;
    let ew = compare(cfg, &gw, &w, |w| project(&linear(&x, w, &b)?, &probe))?;
    let eb = compare(cfg, &gb, &b, |b| project(&linear(&x, &w, b)?, &probe))?;
    Ok(Some(ex.max(ew).max(eb)))
}

fn check_cross_entropy(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let (n, classes) = (rng.random_range(1..=5), rng.random_range(2..=10));
    let logits = uniform(&[n, classes], rng).scale(3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    Ok(Some(compare(cfg, &g, &logits, |l| {
        Ok(softmax_cross_entropy(l, &labels)?.0)
    })?))
}

fn check_pixelwise_max(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let paths = rng.random_range(1..=5);
    let stack = uniform(&[paths, 2, 2, 3, 3], rng);
    let len = stack.len() / paths;
    let columns = (0..len).map(|i| (0..paths).map(|p| stack.data()[p * len + i]).collect());
    if min_top_gap(columns) < cfg.margin {
        return Ok(None);
    }
    let (y, argmax) = pixelwise_max(&stack)?;
    let probe = uniform(y.shape(), rng);
    let g = pixelwise_max_backward(&probe, &argmax, paths)?;
    Ok(Some(compare(cfg, &g, &stack, |s| {
        project(&pixelwise_max(s)?.0, &probe)
    })?))
}

fn random_bank(rng: &mut ChaCha8Rng) -> Result<Arc<BasisBank>> {
    let alpha = rng.random_range(0.2..0.6);
    let mut config = BasisConfig::standard(3, 1.0, alpha);
    config.num_basis = rng.random_range(4..=9);
    Ok(build_basis_bank(&config)?.into_shared())
}

/// Nonzero coefficients of either sign, kept away from zero where the path
/// set changes.
fn random_beta(paths: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[paths], |_| {
        let mag = rng.random_range(0.3..1.5);
        if rng.random_bool(0.8) {
            mag
        } else {
            -mag
        }
    })
}

fn check_eaconv(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let bank = random_bank(rng)?;
    let (c, o) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let stride = rng.random_range(1..=2);
    let mut layer = EaConv2d::new(bank.clone(), c, o, stride, 1, rng);
    layer.beta.value = random_beta(bank.paths(), rng);
    layer.bias.value = uniform(&[o], rng);
    let x = uniform(&[2, c, 5, 5], rng);
    let (y, cache) = layer.forward(&x, true)?;
    let len = y.len();
    let beta = layer.beta.value.clone();
    let columns = (0..len).map(|i| {
        cache
            .responses
            .iter()
            .enumerate()
            .map(|(p, r)| beta.data()[p] * r.as_ref().expect("all paths active").data()[i])
            .collect()
    });
    if min_top_gap(columns) < cfg.margin {
        return Ok(None);
    }
    let probe = uniform(y.shape(), rng);
    let gx = layer.backward(&cache, &probe, true)?.expect("input gradient");
    let loss = |l: &EaConv2d, x: &Tensor| project(&l.forward(x, false)?.0, &probe);
    let mut worst = compare(cfg, &gx, &x, |x| loss(&layer, x))?;
    let grads = [
        layer.w.grad.clone(),
        layer.beta.grad.clone(),
        layer.bias.grad.clone(),
    ];
    let values = [&layer.w.value, &layer.beta.value, &layer.bias.value];
    for (which, (g, v)) in grads.iter().zip(values).enumerate() {
        let err = compare(cfg, g, v, |v| {
            let mut l = layer.clone();
            match which {
                0 => l.w.value = v.clone(),
                1 => l.beta.value = v.clone(),
                _ => l.bias.value = v.clone(),
            }
            loss(&l, &x)
        })?;
        worst = worst.max(err);
    }
    Ok(Some(worst))
}

fn randomize_block(block: &mut ResBlock, rng: &mut ChaCha8Rng) {
    for bn in [&mut block.bn1, &mut block.bn2] {
        bn.weight.value = Tensor::from_fn(bn.weight.value.shape(), |_| rng.random_range(0.5..1.5));
        bn.bias.value = uniform(bn.bias.value.shape(), rng).scale(0.5);
    }
    if let Some(p) = block.projection.as_mut() {
        if let Some(b) = p.bias.as_mut() {
            b.value = uniform(b.value.shape(), rng);
        }
    }
}

/// Checks every parameter of a residual block plus its input, in training mode.
fn resblock_check(
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    mut block: ResBlock,
) -> Result<Option<f64>> {
    randomize_block(&mut block, rng);
    let c = block.in_channels();
    let x = uniform(&[2, c, 4, 4], rng);
    let (y, cache) = block.forward(&x, true)?;
    let near_relu_kink = cache
        .branches
        .iter()
        .flatten()
        .any(|b| b.pre_relu.data().iter().any(|v| v.abs() < cfg.margin));
    if near_relu_kink {
        return Ok(None);
    }
    if let crate::eaconv::BranchWeights::Basis { beta, .. } = &block.weights {
        let columns = (0..y.len()).map(|i| {
            cache
                .branches
                .iter()
                .enumerate()
                .map(|(p, b)| beta.value.data()[p] * b.as_ref().expect("training").output.data()[i])
                .collect()
        });
        if min_top_gap(columns) < cfg.margin {
            return Ok(None);
        }
    }
    let probe = uniform(y.shape(), rng);
    let gx = block.backward(&cache, &probe)?;
    let loss = |b: &ResBlock, x: &Tensor| project(&b.forward(x, true)?.0, &probe);
    let mut worst = compare(cfg, &gx, &x, |x| loss(&block, x))?;
    let params: Vec<(&'static str, Tensor, Tensor)> = block
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone(), p.value.clone()))
        .collect();
    for (name, grad, value) in &params {
        let err = compare(cfg, grad, value, |v| {
            let mut b = block.clone();
            let (_, p) = b
                .params_mut()
                .into_iter()
                .find(|(n, _)| n == name)
                .expect("parameter names are stable");
            p.value = v.clone();
            loss(&b, &x)
        })?;
        worst = worst.max(err);
    }
    Ok(Some(worst))
}

fn check_resblock(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let (c, o) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let block = ResBlock::standard(c, o, 3, rng);
    resblock_check(cfg, rng, block)
}

fn check_earesblock(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let bank = random_bank(rng)?;
    let (c, o) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let mut block = ResBlock::augmented(bank.clone(), c, o, rng);
    if let crate::eaconv::BranchWeights::Basis { beta, .. } = &mut block.weights {
        beta.value = random_beta(bank.paths(), rng);
    }
    resblock_check(cfg, rng, block)
}
