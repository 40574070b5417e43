//! Stateful wrappers (parameters plus accumulated gradients) around the
//! primitive ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv2d, conv2d_backward_parts};
use super::ops::{
    batchnorm2d, batchnorm2d_backward, linear, linear_backward, BatchNormCache,
};
use crate::{Error, Result, Tensor};

/// A trainable tensor and the gradient accumulated into it.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros_like(&value);
        Param { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, grad: &Tensor) -> Result<()> {
        self.grad.add_assign(grad)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Normal samples with standard deviation `sqrt(2 / fan_in)`.
pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

pub(crate) fn add_channel_bias(x: &mut Tensor, bias: &[f64]) {
    let shape = x.shape().to_vec();
    let (c, area) = (shape[1], shape[2..].iter().product::<usize>());
    for (i, chunk) in x.data_mut().chunks_mut(area.max(1)).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

pub(crate) fn channel_sums(grad: &Tensor) -> Tensor {
    let shape = grad.shape();
    let (c, area) = (shape[1], shape[2..].iter().product::<usize>());
    let mut sums = Tensor::zeros(&[c]);
    for (i, chunk) in grad.data().chunks(area.max(1)).enumerate() {
        sums.data_mut()[i % c] += chunk.iter().sum::<f64>();
    }
    sums
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[O, C, k, k]`
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::new(
                he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
                true,
            ),
            bias: with_bias.then(|| Param::new(Tensor::zeros(&[out_channels]), false)),
            stride,
            padding,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d(x, &self.weight.value, self.stride, self.padding)?;
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, b.value.data());
        }
        Ok(y)
    }

    /// Accumulates parameter gradients; returns the input gradient if requested.
    pub fn backward(
        &mut self,
        grad_out: &Tensor,
        input: &Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let (gi, gk) = conv2d_backward_parts(
            grad_out,
            input,
            &self.weight.value,
            self.stride,
            self.padding,
            need_input_grad,
        )?;
        self.weight.accumulate(&gk)?;
        if let Some(b) = self.bias.as_mut() {
            b.accumulate(&channel_sums(grad_out))?;
        }
        Ok(gi)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm2d {
            weight: Param::new(Tensor::full(&[channels], 1.0), false),
            bias: Param::new(Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, BatchNormCache)> {
        batchnorm2d(
            x,
            &self.weight.value,
            &self.bias.value,
            &self.running_mean,
            &self.running_var,
            self.eps,
            training,
        )
    }

    /// Folds the batch statistics of a training-mode forward into the running
    /// estimates (unbiased variance).
    pub fn update_running(&mut self, cache: &BatchNormCache) -> Result<()> {
        if !cache.training {
            return Ok(());
        }
        let count = cache.normalized.len() / self.channels().max(1);
        if count < 2 {
            return Err(Error::Config(
                "batchnorm running statistics need at least 2 values per channel".into(),
            ));
        }
        let correction = count as f64 / (count - 1) as f64;
        let m = self.momentum;
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (1.0 - m) * *rm + m * cache.batch_mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (1.0 - m) * *rv + m * cache.batch_var[c] * correction;
        }
        Ok(())
    }

    pub fn backward(&mut self, grad_out: &Tensor, cache: &BatchNormCache) -> Result<Tensor> {
        let (gx, gw, gb) = batchnorm2d_backward(grad_out, cache, &self.weight.value)?;
        self.weight.accumulate(&gw)?;
        self.bias.accumulate(&gb)?;
        Ok(gx)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[O, I]`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Linear {
            weight: Param::new(
                Tensor::from_fn(&[outputs, inputs], |_| rng.random_range(-bound..bound)),
                true,
            ),
            bias: Param::new(Tensor::zeros(&[outputs]), false),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
        let (gx, gw, gb) = linear_backward(grad_out, input, &self.weight.value)?;
        self.weight.accumulate(&gw)?;
        self.bias.accumulate(&gb)?;
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_move_towards_batch() {
        let mut bn = BatchNorm2d::new(1, 0.5, 1e-5);
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (_, cache) = bn.forward(&x, true).unwrap();
        bn.update_running(&cache).unwrap();
        assert_eq!(bn.running_mean.data(), &[1.0]);
        // batch var 1 (biased), 2 unbiased
        assert_eq!(bn.running_var.data(), &[1.5]);
    }

    #[test]
    fn conv_bias_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 2, 3, 1, 1, true, &mut rng);
        conv.weight.value.fill(0.0);
        conv.bias.as_mut().unwrap().value = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let y = conv.forward(&Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }
}
