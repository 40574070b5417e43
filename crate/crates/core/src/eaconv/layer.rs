use std::sync::Arc;

use rand::Rng;

use crate::basis::BasisBank;
use crate::numerics::layers::{add_channel_bias, channel_sums, he_normal};
use crate::numerics::{conv2d, conv2d_backward_parts, max_over_paths, Param, PathIndex};
use crate::{Error, Result, Tensor};

/// Elastically-augmented convolution.
///
/// One set of basis weights `w[O, C, B]` is synthesized into a kernel per
/// transformation path of the bank. Each path response is scaled by its
/// `beta` coefficient and the layer keeps the per-pixel maximum, then adds the
/// bias once.
///
/// Paths whose `beta` is exactly zero are dormant: they do not take part in
/// the maximum, so a freshly built layer (`beta = [1, 0, ..]`) computes
/// exactly the identity-path convolution even where that response is
/// negative. During training dormant paths are still evaluated so they can
/// receive a gradient and wake up (see [`EaConv2d::backward`]).
#[derive(Debug, Clone)]
pub struct EaConv2d {
    pub bank: Arc<BasisBank>,
    /// `[O, C, B]`
    pub w: Param,
    /// `[P]`
    pub beta: Param,
    /// `[O]`
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct EaConvCache {
    pub input: Tensor,
    /// Synthesized kernels of every evaluated path.
    pub kernels: Vec<Option<Tensor>>,
    /// Raw (unscaled) responses of every evaluated path.
    pub responses: Vec<Option<Tensor>>,
    pub active: Vec<bool>,
    pub winners: PathIndex,
    /// Per-pixel maximum before the bias.
    pub max: Tensor,
}

pub(crate) fn initial_beta(paths: usize) -> Tensor {
    Tensor::from_fn(&[paths], |p| if p == 0 { 1.0 } else { 0.0 })
}

/// `beta != 0`, or every path when all coefficients vanish.
pub(crate) fn active_paths(beta: &Tensor) -> Vec<bool> {
    beta.data().iter().map(|&b| b != 0.0).collect()
}

/// Max over the active subset of β-scaled responses, winners in path indices.
pub(crate) fn max_scaled(
    responses: &[Option<Tensor>],
    beta: &Tensor,
    active: &[bool],
) -> Result<(Tensor, PathIndex)> {
    let competing: Vec<usize> = if active.iter().any(|&a| a) {
        (0..active.len()).filter(|&p| active[p]).collect()
    } else {
        (0..active.len()).collect()
    };
    let scaled = competing
        .iter()
        .map(|&p| {
            responses[p]
                .as_ref()
                .map(|r| r.scale(beta.data()[p]))
                .ok_or_else(|| Error::Config(format!("path {p} was not evaluated")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (max, idx) = max_over_paths(&scaled, &vec![true; scaled.len()])?;
    Ok((max, idx.remap(&competing)))
}

/// Gradient of the max w.r.t. one path's scaled response: `grad_out` where
/// that path won, 0 elsewhere.
pub(crate) fn routed(grad_out: &Tensor, winners: &PathIndex, p: usize) -> Tensor {
    let mut g = grad_out.clone();
    for (v, &w) in g.data_mut().iter_mut().zip(winners.winners()) {
        if w != p {
            *v = 0.0;
        }
    }
    g
}

/// Gradient signal for a dormant path: the subgradient `β_p` would receive from
/// `max(m, β_p · r_p)` at `β_p = 0`, i.e. `Σ grad_out · r_p` over pixels
/// where the current maximum `m` is negative.
pub(crate) fn dormant_beta_grad(grad_out: &Tensor, max: &Tensor, response: &Tensor) -> f64 {
    grad_out
        .data()
        .iter()
        .zip(max.data())
        .zip(response.data())
        .filter(|((_, &m), _)| m < 0.0)
        .map(|((&g, _), &r)| g * r)
        .sum()
}

impl EaConv2d {
    pub fn new(
        bank: Arc<BasisBank>,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k = bank.kernel_size();
        let paths = bank.paths();
        let w = he_normal(
            &[out_channels, in_channels, bank.num_basis()],
            in_channels * k * k,
            rng,
        );
        EaConv2d {
            bank,
            w: Param::new(w, true),
            beta: Param::new(initial_beta(paths), false),
            bias: Param::new(Tensor::zeros(&[out_channels]), false),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn paths(&self) -> usize {
        self.bank.paths()
    }

    /// Puts every coefficient back to `[1, 0, ..]`.
    pub fn reset_beta(&mut self) {
        self.beta.value = initial_beta(self.paths());
    }

    /// Spatial kernel of path `p`.
    pub fn kernel(&self, p: usize) -> Result<Tensor> {
        self.bank.synthesize_path(&self.w.value, p)
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, EaConvCache)> {
        let paths = self.paths();
        if self.beta.value.shape() != [paths] {
            return Err(Error::shape(
                "eaconv_forward",
                format!("beta {:?} for {paths} paths", self.beta.value.shape()),
            ));
        }
        let active = active_paths(&self.beta.value);
        let none_active = !active.iter().any(|&a| a);
        let mut kernels = vec![None; paths];
        let mut responses = vec![None; paths];
        for p in 0..paths {
            if active[p] || training || none_active {
                let k = self.kernel(p)?;
                responses[p] = Some(conv2d(x, &k, self.stride, self.padding)?);
                kernels[p] = Some(k);
            }
        }
        let (max, winners) = max_scaled(&responses, &self.beta.value, &active)?;
        let mut out = max.clone();
        add_channel_bias(&mut out, self.bias.value.data());
        out.debug_check_finite("eaconv_forward");
        Ok((
            out,
            EaConvCache {
                input: x.clone(),
                kernels,
                responses,
                active,
                winners,
                max,
            },
        ))
    }

    /// Accumulates gradients for `w`, `beta` and `bias`; returns the input
    /// gradient when requested.
    ///
    /// Only winning paths carry gradient into `w` and the input. A dormant
    /// path (`beta == 0`) that was evaluated gets the one-sided signal of
    /// [`dormant_beta_grad`] for its `beta`.
    pub fn backward(
        &mut self,
        cache: &EaConvCache,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        grad_out.expect_same_shape(&cache.max, "eaconv_backward")?;
        let paths = self.paths();
        let none_active = !cache.active.iter().any(|&a| a);
        let mut grad_beta = Tensor::zeros(&[paths]);
        let mut grad_kernels: Vec<Option<Tensor>> = vec![None; paths];
        let mut grad_input = need_input_grad.then(|| Tensor::zeros(cache.input.shape()));
        for p in 0..paths {
            let Some(response) = cache.responses[p].as_ref() else {
                continue;
            };
            if cache.active[p] || none_active {
                let g = routed(grad_out, &cache.winners, p);
                grad_beta.data_mut()[p] = g.dot(response)?;
                let beta = self.beta.value.data()[p];
                if beta == 0.0 {
                    continue;
                }
                let kernel = cache.kernels[p].as_ref().expect("kernel cached with response");
                let (gi, gk) = conv2d_backward_parts(
                    &g.scale(beta),
                    &cache.input,
                    kernel,
                    self.stride,
                    self.padding,
                    need_input_grad,
                )?;
                if let (Some(acc), Some(gi)) = (grad_input.as_mut(), gi) {
                    acc.add_assign(&gi)?;
                }
                grad_kernels[p] = Some(gk);
            } else {
                grad_beta.data_mut()[p] = dormant_beta_grad(grad_out, &cache.max, response);
            }
        }
        if grad_kernels.iter().any(Option::is_some) {
            let gw = self.bank.synthesize_backward(&grad_kernels)?;
            self.w.accumulate(&gw)?;
        }
        self.beta.accumulate(&grad_beta)?;
        self.bias.accumulate(&channel_sums(grad_out))?;
        Ok(grad_input)
    }
}
