use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{EaConv2d, EaConvCache};
use super::resblock::{ResBlock, ResBlockCache};
use crate::basis::BasisBank;
use crate::numerics::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, BatchNorm2d, BatchNormCache, Conv2d, ConvGeometry, Linear, Param, PoolIndex,
};
use crate::{Error, Result, Tensor};

fn default_kernel() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_momentum() -> f64 {
    0.1
}
fn default_eps() -> f64 {
    1e-5
}

/// One entry of a model description. Padding defaults to `kernel / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerConfig {
    Conv {
        out: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: Option<usize>,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Kernel size comes from the basis bank.
    EaConv {
        out: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: Option<usize>,
    },
    BatchNorm {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Gap,
    Linear {
        out: usize,
    },
    ResBlock {
        out: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
    },
    EaResBlock {
        out: usize,
    },
}

impl LayerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            LayerConfig::Conv { .. } => "conv",
            LayerConfig::EaConv { .. } => "eaconv",
            LayerConfig::BatchNorm { .. } => "batchnorm",
            LayerConfig::Relu => "relu",
            LayerConfig::MaxPool { .. } => "maxpool",
            LayerConfig::Gap => "gap",
            LayerConfig::Linear { .. } => "linear",
            LayerConfig::ResBlock { .. } => "resblock",
            LayerConfig::EaResBlock { .. } => "earesblock",
        }
    }

    pub fn is_augmented(&self) -> bool {
        matches!(self, LayerConfig::EaConv { .. } | LayerConfig::EaResBlock { .. })
    }
}

/// Architecture: input extents `[C, H, W]` and the layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: [usize; 3],
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    /// The small host CNN: four 3×3 conv/batchnorm/relu stages (the first
    /// three followed by 2×2 max pooling), global average pooling and a linear
    /// classifier.
    pub fn four_conv(input: [usize; 3], widths: [usize; 4], classes: usize) -> Self {
        let mut layers = Vec::new();
        for (i, &out) in widths.iter().enumerate() {
            layers.push(LayerConfig::Conv {
                out,
                kernel: 3,
                stride: 1,
                padding: None,
                bias: true,
            });
            layers.push(LayerConfig::BatchNorm {
                momentum: 0.1,
                eps: 1e-5,
            });
            layers.push(LayerConfig::Relu);
            if i < 3 {
                layers.push(LayerConfig::MaxPool { size: 2 });
            }
        }
        layers.push(LayerConfig::Gap);
        layers.push(LayerConfig::Linear { out: classes });
        ModelConfig { input, layers }
    }

    /// A small residual network: stem conv, `blocks` residual blocks with
    /// pooling in between, global pooling and a classifier.
    pub fn small_resnet(input: [usize; 3], widths: &[usize], classes: usize) -> Self {
        let stem = widths.first().copied().unwrap_or(8);
        let mut layers = vec![
            LayerConfig::Conv {
                out: stem,
                kernel: 3,
                stride: 1,
                padding: None,
                bias: true,
            },
            LayerConfig::BatchNorm {
                momentum: 0.1,
                eps: 1e-5,
            },
            LayerConfig::Relu,
        ];
        for (i, &out) in widths.iter().enumerate() {
            layers.push(LayerConfig::ResBlock { out, kernel: 3 });
            layers.push(LayerConfig::Relu);
            if i + 1 < widths.len() {
                layers.push(LayerConfig::MaxPool { size: 2 });
            }
        }
        layers.push(LayerConfig::Gap);
        layers.push(LayerConfig::Linear { out: classes });
        ModelConfig { input, layers }
    }

    /// Indices of the layers that hold convolution kernels (conv, eaconv,
    /// resblock, earesblock), in order.
    pub fn kernel_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                matches!(
                    l,
                    LayerConfig::Conv { .. }
                        | LayerConfig::EaConv { .. }
                        | LayerConfig::ResBlock { .. }
                        | LayerConfig::EaResBlock { .. }
                )
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Swaps the layers at `positions` (indices into `layers`) for their
    /// elastically-augmented counterparts.
    pub fn augment(&self, positions: &[usize]) -> Result<ModelConfig> {
        let mut out = self.clone();
        for &i in positions {
            let layer = out
                .layers
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("layer {i} does not exist")))?;
            *layer = match layer.clone() {
                LayerConfig::Conv {
                    out, stride, padding, ..
                } => LayerConfig::EaConv {
                    out,
                    stride,
                    padding,
                },
                LayerConfig::ResBlock { out, .. } => LayerConfig::EaResBlock { out },
                other => {
                    return Err(Error::Config(format!(
                        "layer {i} ({}) cannot be augmented",
                        other.name()
                    )))
                }
            };
        }
        Ok(out)
    }

    /// Augments the first convolution only.
    pub fn augment_first_conv(&self) -> Result<ModelConfig> {
        let first = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerConfig::Conv { .. }))
            .ok_or_else(|| Error::Config("model has no convolution layer".into()))?;
        self.augment(&[first])
    }

    pub fn is_augmented(&self) -> bool {
        self.layers.iter().any(LayerConfig::is_augmented)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    EaConv(EaConv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    MaxPool(usize),
    Gap,
    Linear(Linear),
    ResBlock(ResBlock),
}

#[derive(Debug, Clone)]
enum LayerCache {
    Input(Tensor),
    EaConv(EaConvCache),
    BatchNorm(BatchNormCache),
    MaxPool(PoolIndex),
    Shape(Vec<usize>),
    Linear { input: Tensor, shape: Vec<usize> },
    ResBlock(ResBlockCache),
}

/// Per-layer caches recorded by a forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<LayerCache>,
}

impl Layer {
    fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            Layer::Conv(c) => (c.forward(x)?, LayerCache::Input(x.clone())),
            Layer::EaConv(c) => {
                let (y, cache) = c.forward(x, training)?;
                (y, LayerCache::EaConv(cache))
            }
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.forward(x, training)?;
                (y, LayerCache::BatchNorm(cache))
            }
            Layer::Relu => (relu(x), LayerCache::Input(x.clone())),
            Layer::MaxPool(size) => {
                let (y, idx) = maxpool2d(x, *size)?;
                (y, LayerCache::MaxPool(idx))
            }
            Layer::Gap => (global_avg_pool(x)?, LayerCache::Shape(x.shape().to_vec())),
            Layer::Linear(l) => {
                let n = x.shape()[0];
                let flat = x.clone().reshape(&[n, x.len() / n.max(1)])?;
                (
                    l.forward(&flat)?,
                    LayerCache::Linear {
                        input: flat,
                        shape: x.shape().to_vec(),
                    },
                )
            }
            Layer::ResBlock(b) => {
                let (y, cache) = b.forward(x, training)?;
                (y, LayerCache::ResBlock(cache))
            }
        })
    }

    fn update_running(&mut self, cache: &LayerCache) -> Result<()> {
        match (self, cache) {
            (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => bn.update_running(c),
            (Layer::ResBlock(b), LayerCache::ResBlock(c)) => b.update_running(c),
            _ => Ok(()),
        }
    }

    fn backward(
        &mut self,
        cache: &LayerCache,
        grad: &Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let mismatch = || Error::Config("tape does not match the model layers".into());
        Ok(match (self, cache) {
            (Layer::Conv(c), LayerCache::Input(x)) => c.backward(grad, x, need_input_grad)?,
            (Layer::EaConv(c), LayerCache::EaConv(cache)) => {
                c.backward(cache, grad, need_input_grad)?
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => Some(bn.backward(grad, c)?),
            (Layer::Relu, LayerCache::Input(x)) => Some(relu_backward(grad, x)?),
            (Layer::MaxPool(_), LayerCache::MaxPool(idx)) => Some(maxpool2d_backward(grad, idx)?),
            (Layer::Gap, LayerCache::Shape(shape)) => Some(global_avg_pool_backward(grad, shape)?),
            (Layer::Linear(l), LayerCache::Linear { input, shape }) => {
                Some(l.backward(grad, input)?.reshape(shape)?)
            }
            (Layer::ResBlock(b), LayerCache::ResBlock(c)) => Some(b.backward(c, grad)?),
            _ => return Err(mismatch()),
        })
    }

    fn params(&self) -> Vec<(&'static str, &Param)> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![("weight", &c.weight)];
                if let Some(b) = &c.bias {
                    v.push(("bias", b));
                }
                v
            }
            Layer::EaConv(c) => vec![("w", &c.w), ("beta", &c.beta), ("bias", &c.bias)],
            Layer::BatchNorm(bn) => vec![("weight", &bn.weight), ("bias", &bn.bias)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::ResBlock(b) => b.params(),
            Layer::Relu | Layer::MaxPool(_) | Layer::Gap => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            Layer::Conv(c) => {
                let mut v = vec![("weight", &mut c.weight)];
                if let Some(b) = &mut c.bias {
                    v.push(("bias", b));
                }
                v
            }
            Layer::EaConv(c) => vec![("w", &mut c.w), ("beta", &mut c.beta), ("bias", &mut c.bias)],
            Layer::BatchNorm(bn) => vec![("weight", &mut bn.weight), ("bias", &mut bn.bias)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::ResBlock(b) => b.params_mut(),
            Layer::Relu | Layer::MaxPool(_) | Layer::Gap => vec![],
        }
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::BatchNorm(bn) => vec![
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ],
            Layer::ResBlock(b) => b.buffers(),
            _ => vec![],
        }
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::BatchNorm(bn) => vec![
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ],
            Layer::ResBlock(b) => b.buffers_mut(),
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    bank: Option<Arc<BasisBank>>,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy)]
enum Extent {
    Map(usize, usize, usize),
    Flat(usize),
}

/// Builds a model with He-initialized weights drawn from `seed`, checking that
/// every layer accepts the shape produced by its predecessor.
pub fn build_model(
    config: &ModelConfig,
    bank: Option<Arc<BasisBank>>,
    seed: u64,
) -> Result<Model> {
    if config.layers.is_empty() {
        return Err(Error::Config("model has no layers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c0, h0, w0] = config.input;
    let mut extent = Extent::Map(c0, h0, w0);
    let mut layers = Vec::with_capacity(config.layers.len());
    for (i, lc) in config.layers.iter().enumerate() {
        let fail = |msg: String| Error::Config(format!("layer {i} ({}): {msg}", lc.name()));
        let need_map = |e: Extent| match e {
            Extent::Map(c, h, w) => Ok((c, h, w)),
            Extent::Flat(f) => Err(fail(format!("expects a feature map, got {f} flat features"))),
        };
        let need_bank = || {
            bank.clone()
                .ok_or_else(|| fail("augmented layer requires a basis bank".into()))
        };
        let conv_out = |c, h, w, o, k, stride, padding| {
            ConvGeometry::new(&[1, c, h, w], &[o, c, k, k], stride, padding)
                .map(|g| Extent::Map(o, g.out_height, g.out_width))
                .map_err(|e| fail(e.to_string()))
        };
        let layer = match *lc {
            LayerConfig::Conv {
                out,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let (c, h, w) = need_map(extent)?;
                let padding = padding.unwrap_or(kernel / 2);
                extent = conv_out(c, h, w, out, kernel, stride, padding)?;
                Layer::Conv(Conv2d::new(c, out, kernel, stride, padding, bias, &mut rng))
            }
            LayerConfig::EaConv {
                out,
                stride,
                padding,
            } => {
                let (c, h, w) = need_map(extent)?;
                let bank = need_bank()?;
                let k = bank.kernel_size();
                let padding = padding.unwrap_or(k / 2);
                extent = conv_out(c, h, w, out, k, stride, padding)?;
                Layer::EaConv(EaConv2d::new(bank, c, out, stride, padding, &mut rng))
            }
            LayerConfig::BatchNorm { momentum, eps } => {
                let (c, _, _) = need_map(extent)?;
                Layer::BatchNorm(BatchNorm2d::new(c, momentum, eps))
            }
            LayerConfig::Relu => Layer::Relu,
            LayerConfig::MaxPool { size } => {
                let (c, h, w) = need_map(extent)?;
                if size == 0 || size > h || size > w {
                    return Err(fail(format!("window {size} does not fit {h}x{w}")));
                }
                extent = Extent::Map(c, h / size, w / size);
                Layer::MaxPool(size)
            }
            LayerConfig::Gap => {
                let (c, _, _) = need_map(extent)?;
                extent = Extent::Flat(c);
                Layer::Gap
            }
            LayerConfig::Linear { out } => {
                let inputs = match extent {
                    Extent::Map(c, h, w) => c * h * w,
                    Extent::Flat(f) => f,
                };
                extent = Extent::Flat(out);
                Layer::Linear(Linear::new(inputs, out, &mut rng))
            }
            LayerConfig::ResBlock { out, kernel } => {
                let (c, h, w) = need_map(extent)?;
                if kernel % 2 == 0 {
                    return Err(fail(format!("kernel size {kernel} is even")));
                }
                extent = Extent::Map(out, h, w);
                Layer::ResBlock(ResBlock::standard(c, out, kernel, &mut rng))
            }
            LayerConfig::EaResBlock { out } => {
                let (c, h, w) = need_map(extent)?;
                let bank = need_bank()?;
                extent = Extent::Map(out, h, w);
                Layer::ResBlock(ResBlock::augmented(bank, c, out, &mut rng))
            }
        };
        if let Extent::Map(c, h, w) = extent {
            if c * h * w == 0 {
                return Err(fail("produces an empty feature map".into()));
            }
        }
        layers.push(layer);
    }
    Ok(Model {
        config: config.clone(),
        bank,
        layers,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bank(&self) -> Option<&Arc<BasisBank>> {
        self.bank.as_ref()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4("model_forward")?;
        if [c, h, w] != self.config.input {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "input extents [{c}, {h}, {w}] differ from configured {:?}",
                    self.config.input
                ),
            ));
        }
        Ok(())
    }

    /// Inference-mode forward pass (running batch-norm statistics).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, false)?.0;
        }
        Ok(h)
    }

    /// Forward pass recording a tape, without touching any state.
    pub fn forward_tape(&self, x: &Tensor, training: bool) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&h, training)?;
            caches.push(cache);
            h = y;
        }
        Ok((h, Tape { caches }))
    }

    /// Training-mode forward pass; folds batch statistics into the running
    /// estimates of every batch-norm layer.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Tape)> {
        let (y, tape) = self.forward_tape(x, true)?;
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            layer.update_running(cache)?;
        }
        Ok((y, tape))
    }

    /// Accumulates parameter gradients from `grad_out`; returns the gradient
    /// w.r.t. the model input when `need_input_grad` is set.
    pub fn backward(
        &mut self,
        tape: &Tape,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::Config("tape does not match the model layers".into()));
        }
        let mut grad = grad_out.clone();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(&tape.caches).enumerate().rev() {
            let need = i > 0 || need_input_grad;
            match layer.backward(cache, &grad, need)? {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, p) in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    /// Trainable parameters named `layers.<index>.<name>`.
    pub fn params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(n, p)| (format!("layers.{i}.{n}"), p))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params_mut()
                    .into_iter()
                    .map(move |(n, p)| (format!("layers.{i}.{n}"), p))
            })
            .collect()
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.buffers()
                    .into_iter()
                    .map(move |(n, t)| (format!("layers.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                l.buffers_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("layers.{i}.{n}"), t))
            })
            .collect()
    }

    /// Every persisted tensor: parameters followed by buffers.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .chain(self.buffers().into_iter().map(|(n, t)| (n, t.clone())))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// All path coefficients of augmented layers, concatenated in layer order.
    pub fn betas(&self) -> Vec<f64> {
        self.params()
            .iter()
            .filter(|(n, _)| n.ends_with(".beta"))
            .flat_map(|(_, p)| p.value.data().to_vec())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis_bank, BasisConfig};

    fn bank() -> Arc<BasisBank> {
        build_basis_bank(&BasisConfig::standard(3, 1.0, 0.5))
            .unwrap()
            .into_shared()
    }

    #[test]
    fn four_conv_with_eaconv_first_layer_gives_logits() {
        let cfg = ModelConfig::four_conv([3, 32, 32], [8, 8, 16, 16], 10)
            .augment_first_conv()
            .unwrap();
        assert!(matches!(cfg.layers[0], LayerConfig::EaConv { .. }));
        let model = build_model(&cfg, Some(bank()), 0).unwrap();
        let y = model.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
    }

    #[test]
    fn empty_and_broken_chains_are_reported() {
        let cfg = ModelConfig {
            input: [1, 8, 8],
            layers: vec![],
        };
        assert!(build_model(&cfg, None, 0).is_err());
        let cfg = ModelConfig {
            input: [1, 8, 8],
            layers: vec![LayerConfig::Gap, LayerConfig::Relu, LayerConfig::MaxPool { size: 2 }],
        };
        let err = build_model(&cfg, None, 0).unwrap_err().to_string();
        assert!(err.contains("layer 2"), "{err}");
        let cfg = ModelConfig {
            input: [1, 8, 8],
            layers: vec![LayerConfig::EaConv {
                out: 2,
                stride: 1,
                padding: None,
            }],
        };
        assert!(build_model(&cfg, None, 0).unwrap_err().to_string().contains("layer 0"));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig::small_resnet([1, 16, 16], &[4, 8], 3).augment(&[3]).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"earesblock\""));
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let parsed: LayerConfig = serde_json::from_str(r#"{"type":"conv","out":4}"#).unwrap();
        assert_eq!(
            parsed,
            LayerConfig::Conv {
                out: 4,
                kernel: 3,
                stride: 1,
                padding: None,
                bias: true
            }
        );
    }

    #[test]
    fn parameter_count_grows_by_paths_per_augmented_layer() {
        let std_cfg = ModelConfig::small_resnet([1, 16, 16], &[4, 8], 3);
        let ea_cfg = std_cfg.augment(&[0, 3]).unwrap();
        let b = bank();
        let std = build_model(&std_cfg, None, 0).unwrap();
        let ea = build_model(&ea_cfg, Some(b.clone()), 0).unwrap();
        assert_eq!(ea.num_trainable(), std.num_trainable() + 2 * b.paths());
    }

    #[test]
    fn input_extent_is_checked() {
        let model = build_model(&ModelConfig::four_conv([1, 16, 16], [2, 2, 2, 2], 2), None, 0)
            .unwrap();
        assert!(model.forward(&Tensor::zeros(&[1, 1, 16, 17])).is_err());
    }
}
