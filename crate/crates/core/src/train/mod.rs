//! SGD training, evaluation, robustness sweeps and the three-model comparison.

mod compare;
mod sweep;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::eaconv::Model;
use crate::numerics::softmax_cross_entropy;
use crate::perturb::elastic;
use crate::{Error, Result, Tensor};

pub use compare::{
    compare_protocol, summarize, CompareConfig, CompareOutcome, SummaryRow, DATA_AUG, EACONV, STANDARD,
};
pub use sweep::{robustness_sweep, EvalReport, ReportRow};

/// Train-time elastic augmentation. The displacement amplitude is
/// `alpha × image width` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticAugment {
    pub alpha: f64,
    pub sigma_field: f64,
    /// Chance that a sample is deformed.
    pub probability: f64,
}

impl Default for ElasticAugment {
    fn default() -> Self {
        ElasticAugment {
            alpha: 0.06,
            sigma_field: 1.28,
            probability: 0.5,
        }
    }
}

fn d_epochs() -> usize {
    10
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    0.05
}
fn d_momentum() -> f64 {
    0.9
}
fn d_decay() -> f64 {
    5e-4
}
fn d_gamma() -> f64 {
    0.1
}
fn d_one() -> f64 {
    1.0
}
fn d_divergence() -> f64 {
    1e6
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// L2 penalty on convolution and linear weights (not on biases, batch-norm
    /// affine parameters or path coefficients).
    #[serde(default = "d_decay")]
    pub weight_decay: f64,
    /// Epochs (0-based, ascending) at whose start the rate is multiplied by
    /// `lr_gamma`.
    #[serde(default)]
    pub lr_steps: Vec<usize>,
    #[serde(default = "d_gamma")]
    pub lr_gamma: f64,
    /// Multiplier on the learning rate of path coefficients.
    #[serde(default = "d_one")]
    pub beta_lr_scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_true")]
    pub horizontal_flip: bool,
    #[serde(default)]
    pub elastic: Option<ElasticAugment>,
    /// Batch loss above which (or NaN) training aborts as diverged.
    #[serde(default = "d_divergence")]
    pub divergence_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_gamma > 0.0) || !(self.beta_lr_scale >= 0.0) {
            return bad("weight_decay, lr_gamma and beta_lr_scale must be non-negative");
        }
        if self.lr_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_steps must be strictly ascending");
        }
        if let Some(e) = &self.elastic {
            if !(e.alpha >= 0.0) || !(e.sigma_field > 0.0) || !(0.0..=1.0).contains(&e.probability) {
                return bad("elastic augmentation parameters out of range");
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_steps.iter().filter(|&&s| s <= epoch).count();
        self.learning_rate * self.lr_gamma.powi(steps as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    /// Training accuracy (%) measured on the fly in training mode.
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

/// SGD with momentum (`v ← μv + g + λw`, `w ← w − ηv`).
struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    fn new(model: &Model) -> Self {
        Sgd {
            velocity: model
                .params()
                .iter()
                .map(|(_, p)| Tensor::zeros_like(&p.value))
                .collect(),
        }
    }

    fn step(&mut self, model: &mut Model, cfg: &TrainConfig, lr: f64) -> Result<()> {
        for ((name, p), v) in model.params_mut().into_iter().zip(&mut self.velocity) {
            let decay = if p.decay { cfg.weight_decay } else { 0.0 };
            let rate = if name.ends_with("beta") {
                lr * cfg.beta_lr_scale
            } else {
                lr
            };
            for ((vi, &g), w) in v
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data_mut())
            {
                *vi = cfg.momentum * *vi + g + decay * *w;
                *w -= rate * *vi;
            }
        }
        Ok(())
    }
}

fn flip_horizontal(images: &mut Tensor, sample: usize) {
    let (h, w) = (images.shape()[2], images.shape()[3]);
    for row in images.outer_mut(sample).chunks_exact_mut(w) {
        row.reverse();
    }
    debug_assert!(h > 0);
}

/// Applies the per-sample augmentations drawn from `rng`.
fn augment(x: &mut Tensor, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    for i in 0..n {
        if cfg.horizontal_flip && rng.random_bool(0.5) {
            flip_horizontal(x, i);
        }
        if let Some(e) = &cfg.elastic {
            let seed: u64 = rng.random();
            if rng.random_bool(e.probability) {
                let img = Tensor::new(vec![c, h, w], x.outer(i).to_vec())?;
                let out = elastic(&img, e.alpha * w as f64, e.sigma_field, seed)?;
                x.outer_mut(i).copy_from_slice(out.data());
            }
        }
    }
    Ok(())
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Trains in place. Shuffling, flips and augmentation draws are fixed by
/// `config.seed`. When `eval` is given, its accuracy is recorded per epoch.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<History> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.image_shape() != model.config().input {
        return Err(Error::Incompatible(format!(
            "dataset images {:?} vs model input {:?}",
            data.image_shape(),
            model.config().input
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (mut x, y) = data.batch(chunk);
            augment(&mut x, config, &mut rng)?;
            model.zero_grad();
            let (logits, tape) = model.forward_train(&x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !(loss <= config.divergence_loss) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            model.backward(&tape, &grad, false)?;
            sgd.step(model, config, lr)?;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            loss: loss_sum / n,
            accuracy: 100.0 * correct as f64 / n,
            eval_accuracy: eval.map(|d| evaluate(model, d)).transpose()?,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.4} loss {:.4} train acc {:.2}%{}",
            record.loss,
            record.accuracy,
            record
                .eval_accuracy
                .map(|a| format!(" eval acc {a:.2}%"))
                .unwrap_or_default()
        );
        history.epochs.push(record);
    }
    Ok(history)
}

const EVAL_BATCH: usize = 100;

/// Predicted classes in inference mode.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        out.extend(argmax_rows(&model.forward(&x)?));
    }
    Ok(out)
}

/// Top-1 accuracy in percent.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let pred = predict(model, data)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::eaconv::{build_model, ModelConfig};

    fn tiny_model(seed: u64) -> Model {
        build_model(&ModelConfig::four_conv([1, 32, 32], [4, 4, 4, 4], 4), None, seed).unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 5e-4);
        c.validate().unwrap();
        let bad = TrainConfig {
            lr_steps: vec![5, 3],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let steps = TrainConfig {
            lr_steps: vec![2, 4],
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(steps.lr_at(1), 1.0);
        assert!((steps.lr_at(2) - 0.1).abs() < 1e-15);
        assert!((steps.lr_at(9) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let data = generate_synthetic(&SyntheticSpec::new(3, 1)).unwrap();
        let mut m = tiny_model(2);
        let before: Vec<Tensor> = m.params().iter().map(|(_, p)| p.value.clone()).collect();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train(&mut m, &data, &cfg, None).unwrap();
        for ((_, p), b) in m.params().iter().zip(&before) {
            assert_eq!(&p.value, b);
        }
    }

    #[test]
    fn one_epoch_on_ten_samples() {
        let mut spec = SyntheticSpec::new(5, 1);
        spec.num_classes = 2;
        let data = generate_synthetic(&spec).unwrap();
        let mut m = build_model(&ModelConfig::four_conv([1, 32, 32], [4, 4, 4, 4], 2), None, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let h = train(&mut m, &data, &cfg, Some(&data)).unwrap();
        assert!(h.epochs[0].loss.is_finite());
        assert!(h.epochs[0].eval_accuracy.is_some());
    }

    #[test]
    fn divergence_is_reported() {
        let data = generate_synthetic(&SyntheticSpec::new(4, 1)).unwrap();
        let mut m = tiny_model(0);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e30,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let err = train(&mut m, &data, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let data = generate_synthetic(&SyntheticSpec::new(0, 1)).unwrap();
        assert!(evaluate(&tiny_model(0), &data).is_err());
    }

    #[test]
    fn flip_reverses_rows() {
        let mut x = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f64);
        flip_horizontal(&mut x, 0);
        assert_eq!(x.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }
}
