use std::sync::Arc;

use rand::Rng;

use super::layer::{active_paths, dormant_beta_grad, initial_beta, max_scaled, routed};
use crate::basis::BasisBank;
use crate::numerics::layers::he_normal;
use crate::numerics::{
    conv2d, conv2d_backward, relu, relu_backward, BatchNorm2d, BatchNormCache, Conv2d, Param,
    PathIndex,
};
use crate::{Error, Result, Tensor};

/// Convolution weights of the residual branch.
#[derive(Debug, Clone)]
pub enum BranchWeights {
    /// Plain spatial kernels `[O, C, k, k]`.
    Spatial { conv1: Param, conv2: Param },
    /// Basis coefficients `[O, C, B]` evaluated once per path, plus the path
    /// coefficients `beta[P]` of the block.
    Basis {
        bank: Arc<BasisBank>,
        w1: Param,
        w2: Param,
        beta: Param,
    },
}

/// Residual block `f + G(f)` with `G = bn2 ∘ conv2 ∘ relu ∘ bn1 ∘ conv1`.
///
/// With [`BranchWeights::Basis`] the block becomes the augmented form
/// `f + max_p β_p G(f; T_p[κ1], T_p[κ2])`. Batch-norm parameters are shared by
/// all paths; in training each path normalizes with its own batch statistics
/// while the running statistics follow path 0 only.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub weights: BranchWeights,
    pub bn1: BatchNorm2d,
    pub bn2: BatchNorm2d,
    /// 1×1 convolution on the skip path when channel counts differ.
    pub projection: Option<Conv2d>,
    pub kernel_size: usize,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    pub kernel1: Tensor,
    pub kernel2: Tensor,
    pub bn1: BatchNormCache,
    /// Input of the inner ReLU.
    pub pre_relu: Tensor,
    pub hidden: Tensor,
    pub bn2: BatchNormCache,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache {
    pub input: Tensor,
    pub branches: Vec<Option<BranchCache>>,
    pub active: Vec<bool>,
    pub winners: Option<PathIndex>,
    pub max: Tensor,
}

impl ResBlockCache {
    /// Branch whose batch statistics feed the running estimates.
    pub fn stats_branch(&self) -> Option<&BranchCache> {
        self.branches[0].as_ref()
    }
}

impl ResBlock {
    pub fn standard(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k = kernel_size;
        let conv1 = he_normal(&[out_channels, in_channels, k, k], in_channels * k * k, rng);
        let conv2 = he_normal(&[out_channels, out_channels, k, k], out_channels * k * k, rng);
        Self::assemble(
            BranchWeights::Spatial {
                conv1: Param::new(conv1, true),
                conv2: Param::new(conv2, true),
            },
            in_channels,
            out_channels,
            k,
            rng,
        )
    }

    pub fn augmented(
        bank: Arc<BasisBank>,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (k, b) = (bank.kernel_size(), bank.num_basis());
        let w1 = he_normal(&[out_channels, in_channels, b], in_channels * k * k, rng);
        let w2 = he_normal(&[out_channels, out_channels, b], out_channels * k * k, rng);
        let beta = initial_beta(bank.paths());
        Self::assemble(
            BranchWeights::Basis {
                bank,
                w1: Param::new(w1, true),
                w2: Param::new(w2, true),
                beta: Param::new(beta, false),
            },
            in_channels,
            out_channels,
            k,
            rng,
        )
    }

    fn assemble(
        weights: BranchWeights,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ResBlock {
            weights,
            bn1: BatchNorm2d::new(out_channels, 0.1, 1e-5),
            bn2: BatchNorm2d::new(out_channels, 0.1, 1e-5),
            projection: (in_channels != out_channels)
                .then(|| Conv2d::new(in_channels, out_channels, 1, 1, 0, true, rng)),
            kernel_size,
        }
    }

    pub fn is_augmented(&self) -> bool {
        matches!(self.weights, BranchWeights::Basis { .. })
    }

    pub fn paths(&self) -> usize {
        match &self.weights {
            BranchWeights::Spatial { .. } => 1,
            BranchWeights::Basis { bank, .. } => bank.paths(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bn1.channels()
    }

    pub fn in_channels(&self) -> usize {
        match &self.weights {
            BranchWeights::Spatial { conv1, .. } => conv1.value.shape()[1],
            BranchWeights::Basis { w1, .. } => w1.value.shape()[1],
        }
    }

    /// Kernels `(κ1, κ2)` used by path `p`.
    pub fn kernels(&self, p: usize) -> Result<(Tensor, Tensor)> {
        match &self.weights {
            BranchWeights::Spatial { conv1, conv2 } => {
                Ok((conv1.value.clone(), conv2.value.clone()))
            }
            BranchWeights::Basis { bank, w1, w2, .. } => Ok((
                bank.synthesize_path(&w1.value, p)?,
                bank.synthesize_path(&w2.value, p)?,
            )),
        }
    }

    fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    fn branch_forward(
        &self,
        x: &Tensor,
        kernel1: Tensor,
        kernel2: Tensor,
        training: bool,
    ) -> Result<BranchCache> {
        let pad = self.padding();
        let h1 = conv2d(x, &kernel1, 1, pad)?;
        let (pre_relu, bn1) = self.bn1.forward(&h1, training)?;
        let hidden = relu(&pre_relu);
        let h2 = conv2d(&hidden, &kernel2, 1, pad)?;
        let (output, bn2) = self.bn2.forward(&h2, training)?;
        Ok(BranchCache {
            kernel1,
            kernel2,
            bn1,
            pre_relu,
            hidden,
            bn2,
            output,
        })
    }

    /// Returns `(grad_x, grad_kernel1, grad_kernel2)`; batch-norm gradients are
    /// accumulated into the shared layers.
    fn branch_backward(
        &mut self,
        cache: &BranchCache,
        input: &Tensor,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let pad = self.padding();
        let g = self.bn2.backward(grad_out, &cache.bn2)?;
        let (g, gk2) = conv2d_backward(&g, &cache.hidden, &cache.kernel2, 1, pad)?;
        let g = relu_backward(&g, &cache.pre_relu)?;
        let g = self.bn1.backward(&g, &cache.bn1)?;
        let (gx, gk1) = conv2d_backward(&g, input, &cache.kernel1, 1, pad)?;
        Ok((gx, gk1, gk2))
    }

    fn skip(&self, x: &Tensor) -> Result<Tensor> {
        match &self.projection {
            Some(p) => p.forward(x),
            None => Ok(x.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, ResBlockCache)> {
        let skip = self.skip(x)?;
        let (max, branches, active, winners) = match &self.weights {
            BranchWeights::Spatial { conv1, conv2 } => {
                let b = self.branch_forward(x, conv1.value.clone(), conv2.value.clone(), training)?;
                (b.output.clone(), vec![Some(b)], vec![true], None)
            }
            BranchWeights::Basis { bank, beta, .. } => {
                let paths = bank.paths();
                if beta.value.shape() != [paths] {
                    return Err(Error::shape(
                        "earesblock_forward",
                        format!("beta {:?} for {paths} paths", beta.value.shape()),
                    ));
                }
                let active = active_paths(&beta.value);
                let none_active = !active.iter().any(|&a| a);
                let mut branches = vec![None; paths];
                for p in 0..paths {
                    if active[p] || training || none_active {
                        let (k1, k2) = self.kernels(p)?;
                        branches[p] = Some(self.branch_forward(x, k1, k2, training)?);
                    }
                }
                let outputs: Vec<Option<Tensor>> = branches
                    .iter()
                    .map(|b| b.as_ref().map(|b: &BranchCache| b.output.clone()))
                    .collect();
                let (max, winners) = max_scaled(&outputs, &beta.value, &active)?;
                (max, branches, active, Some(winners))
            }
        };
        if skip.shape() != max.shape() {
            return Err(Error::shape(
                "resblock_forward",
                format!(
                    "skip {:?} and branch {:?} cannot be added",
                    skip.shape(),
                    max.shape()
                ),
            ));
        }
        let out = skip.add(&max)?;
        Ok((
            out,
            ResBlockCache {
                input: x.clone(),
                branches,
                active,
                winners,
                max,
            },
        ))
    }

    /// Folds path-0 batch statistics into the running estimates.
    pub fn update_running(&mut self, cache: &ResBlockCache) -> Result<()> {
        if let Some(b) = cache.stats_branch() {
            self.bn1.update_running(&b.bn1)?;
            self.bn2.update_running(&b.bn2)?;
        }
        Ok(())
    }

    pub fn backward(&mut self, cache: &ResBlockCache, grad_out: &Tensor) -> Result<Tensor> {
        grad_out.expect_same_shape(&cache.max, "resblock_backward")?;
        let mut grad_x = match self.projection.as_mut() {
            Some(p) => p
                .backward(grad_out, &cache.input, true)?
                .expect("input gradient requested"),
            None => grad_out.clone(),
        };
        if !self.is_augmented() {
            let branch = cache.branches[0].as_ref().ok_or(Error::Empty("branch cache"))?;
            let (gx, gk1, gk2) = self.branch_backward(branch, &cache.input, grad_out)?;
            grad_x.add_assign(&gx)?;
            if let BranchWeights::Spatial { conv1, conv2 } = &mut self.weights {
                conv1.accumulate(&gk1)?;
                conv2.accumulate(&gk2)?;
            }
            return Ok(grad_x);
        }

        let paths = self.paths();
        let winners = cache.winners.as_ref().ok_or(Error::Empty("path winners"))?;
        let beta_values = match &self.weights {
            BranchWeights::Basis { beta, .. } => beta.value.clone(),
            BranchWeights::Spatial { .. } => unreachable!(),
        };
        let none_active = !cache.active.iter().any(|&a| a);
        let mut grad_beta = Tensor::zeros(&[paths]);
        let mut gk1s: Vec<Option<Tensor>> = vec![None; paths];
        let mut gk2s: Vec<Option<Tensor>> = vec![None; paths];
        for p in 0..paths {
            let Some(branch) = cache.branches[p].as_ref() else {
                continue;
            };
            if cache.active[p] || none_active {
                let g = routed(grad_out, winners, p);
                grad_beta.data_mut()[p] = g.dot(&branch.output)?;
                let beta = beta_values.data()[p];
                if beta == 0.0 {
                    continue;
                }
                let (gx, gk1, gk2) = self.branch_backward(branch, &cache.input, &g.scale(beta))?;
                grad_x.add_assign(&gx)?;
                gk1s[p] = Some(gk1);
                gk2s[p] = Some(gk2);
            } else {
                grad_beta.data_mut()[p] = dormant_beta_grad(grad_out, &cache.max, &branch.output);
            }
        }
        if let BranchWeights::Basis { bank, w1, w2, beta } = &mut self.weights {
            if gk1s.iter().any(Option::is_some) {
                w1.accumulate(&bank.synthesize_backward(&gk1s)?)?;
                w2.accumulate(&bank.synthesize_backward(&gk2s)?)?;
            }
            beta.accumulate(&grad_beta)?;
        }
        Ok(grad_x)
    }

    /// `(name, param)` pairs, names relative to the block.
    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        let mut out: Vec<(&'static str, &Param)> = match &self.weights {
            BranchWeights::Spatial { conv1, conv2 } => vec![("conv1", conv1), ("conv2", conv2)],
            BranchWeights::Basis { w1, w2, beta, .. } => {
                vec![("w1", w1), ("w2", w2), ("beta", beta)]
            }
        };
        out.extend([
            ("bn1.weight", &self.bn1.weight),
            ("bn1.bias", &self.bn1.bias),
            ("bn2.weight", &self.bn2.weight),
            ("bn2.bias", &self.bn2.bias),
        ]);
        if let Some(p) = &self.projection {
            out.push(("projection.weight", &p.weight));
            if let Some(b) = &p.bias {
                out.push(("projection.bias", b));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        let mut out: Vec<(&'static str, &mut Param)> = match &mut self.weights {
            BranchWeights::Spatial { conv1, conv2 } => vec![("conv1", conv1), ("conv2", conv2)],
            BranchWeights::Basis { w1, w2, beta, .. } => {
                vec![("w1", w1), ("w2", w2), ("beta", beta)]
            }
        };
        out.extend([
            ("bn1.weight", &mut self.bn1.weight),
            ("bn1.bias", &mut self.bn1.bias),
            ("bn2.weight", &mut self.bn2.weight),
            ("bn2.bias", &mut self.bn2.bias),
        ]);
        if let Some(p) = &mut self.projection {
            out.push(("projection.weight", &mut p.weight));
            if let Some(b) = &mut p.bias {
                out.push(("projection.bias", b));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("bn1.running_mean", &mut self.bn1.running_mean),
            ("bn1.running_var", &mut self.bn1.running_var),
            ("bn2.running_mean", &mut self.bn2.running_mean),
            ("bn2.running_var", &mut self.bn2.running_var),
        ]
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("bn1.running_mean", &self.bn1.running_mean),
            ("bn1.running_var", &self.bn1.running_var),
            ("bn2.running_mean", &self.bn2.running_mean),
            ("bn2.running_var", &self.bn2.running_var),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis_bank, BasisConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(cin: usize, cout: usize, seed: u64) -> (ResBlock, ResBlock) {
        let bank = build_basis_bank(&BasisConfig::standard(3, 1.0, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ea = ResBlock::augmented(bank.into_shared(), cin, cout, &mut rng);
        ea.bn1.running_mean = Tensor::from_fn(&[cout], |i| 0.05 * i as f64);
        ea.bn2.running_var = Tensor::from_fn(&[cout], |i| 1.0 + 0.1 * i as f64);
        let mut std = ea.clone();
        let (k1, k2) = ea.kernels(0).unwrap();
        std.weights = BranchWeights::Spatial {
            conv1: Param::new(k1, true),
            conv2: Param::new(k2, true),
        };
        (ea, std)
    }

    fn input(c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[2, c, 5, 5], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn fresh_augmented_block_matches_standard() {
        for (cin, cout) in [(3, 3), (2, 4)] {
            let (ea, std) = pair(cin, cout, 11);
            let x = input(cin, 12);
            for training in [false, true] {
                let (a, _) = ea.forward(&x, training).unwrap();
                let (b, _) = std.forward(&x, training).unwrap();
                assert!(a.max_abs_diff(&b) < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_follow_path_zero() {
        let (mut ea, mut std) = pair(3, 3, 13);
        if let BranchWeights::Basis { beta, .. } = &mut ea.weights {
            beta.value = Tensor::full(&[5], 1.0);
        }
        let x = input(3, 14);
        let (_, ca) = ea.forward(&x, true).unwrap();
        let (_, cb) = std.forward(&x, true).unwrap();
        ea.update_running(&ca).unwrap();
        std.update_running(&cb).unwrap();
        assert!(ea.bn1.running_mean.max_abs_diff(&std.bn1.running_mean) < 1e-12);
        assert!(ea.bn2.running_var.max_abs_diff(&std.bn2.running_var) < 1e-12);
    }

    #[test]
    fn dormant_beta_gradient_is_reported() {
        let (mut ea, _) = pair(3, 3, 15);
        let x = input(3, 16);
        let (out, cache) = ea.forward(&x, true).unwrap();
        ea.backward(&cache, &Tensor::full(out.shape(), 1.0)).unwrap();
        let BranchWeights::Basis { beta, .. } = &ea.weights else {
            unreachable!()
        };
        assert!(beta.grad.data()[1..].iter().any(|&g| g != 0.0));
    }
}
