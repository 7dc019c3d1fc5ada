use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::batchnorm::{BatchNorm2d, BatchNormCache};
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvCache};
use crate::nn::dense::{dense_backward, dense_forward, DenseCache};
use crate::nn::elementwise::{dropout_backward, dropout_forward, relu_backward, relu_forward};
use crate::nn::param::{Param, Trainability};
use crate::nn::pool::{
    global_avg_pool_backward, global_avg_pool_forward, maxpool_backward, maxpool_forward, MaxPoolCache,
};
use crate::nn::spec::{ArchitectureSpec, FeatureShape, LayerSpec};
use crate::rng::{rng_from, stream, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A layer instance with its parameters.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d {
        weight: Param<T>,
        bias: Param<T>,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm(BatchNorm2d<T>),
    Relu,
    Dense {
        weight: Param<T>,
        bias: Param<T>,
    },
    Dropout {
        p: f64,
    },
    GlobalAvgPool,
    SoftmaxOutput,
}

/// Forward state needed by [`Layer::backward`].
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv(ConvCache<T>),
    MaxPool(MaxPoolCache),
    BatchNorm(BatchNormCache<T>),
    Relu(Tensor<T>),
    Dense(DenseCache<T>),
    Dropout(Vec<T>),
    GlobalAvgPool(Vec<usize>),
    Identity,
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

impl<T: Scalar> Layer<T> {
    fn build(spec: &LayerSpec, input: FeatureShape, rng: &mut Rng) -> Self {
        match *spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let FeatureShape::Spatial { channels, .. } = input else {
                    unreachable!("shape inference admits conv2d only on spatial input")
                };
                let fan_in = channels * kernel * kernel;
                Layer::Conv2d {
                    weight: Param::new(kaiming_uniform(&[out_channels, channels, kernel, kernel], fan_in, rng)),
                    bias: Param::new(Tensor::zeros(&[out_channels])),
                    stride,
                    padding,
                }
            }
            LayerSpec::Maxpool {
                kernel,
                stride,
                padding,
            } => Layer::MaxPool {
                kernel,
                stride,
                padding,
            },
            LayerSpec::Batchnorm => {
                let FeatureShape::Spatial { channels, .. } = input else {
                    unreachable!("shape inference admits batchnorm only on spatial input")
                };
                Layer::BatchNorm(BatchNorm2d::new(channels))
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Dense { out_features } => {
                let fan_in = input.numel();
                Layer::Dense {
                    weight: Param::new(kaiming_uniform(&[out_features, fan_in], fan_in, rng)),
                    bias: Param::new(Tensor::zeros(&[out_features])),
                }
            }
            LayerSpec::Dropout { p } => Layer::Dropout { p },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::SoftmaxOutput => Layer::SoftmaxOutput,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::MaxPool { .. } => "maxpool",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::Dense { .. } => "dense",
            Layer::Dropout { .. } => "dropout",
            Layer::GlobalAvgPool => "global-avg-pool",
            Layer::SoftmaxOutput => "softmax-output",
        }
    }

    /// Runs the layer. Training mode may update batch-norm running statistics
    /// and draws dropout masks from `rng`; evaluation mode never mutates.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<(Tensor<T>, LayerCache<T>)> {
        match (self, mode) {
            (Layer::BatchNorm(bn), Mode::Train) => {
                let (y, c) = bn.forward_train(input)?;
                Ok((y, LayerCache::BatchNorm(c)))
            }
            (Layer::Dropout { p }, Mode::Train) => {
                let (y, mask) = dropout_forward(input, *p, rng);
                Ok((y, LayerCache::Dropout(mask)))
            }
            (layer, _) => layer.forward_eval_cached(input),
        }
    }

    fn forward_eval_cached(&self, input: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        Ok(match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let (y, c) = conv2d_forward(input, &weight.value, &bias.value, *stride, *padding)?;
                (y, LayerCache::Conv(c))
            }
            Layer::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let (y, c) = maxpool_forward(input, *kernel, *stride, *padding)?;
                (y, LayerCache::MaxPool(c))
            }
            Layer::BatchNorm(bn) => {
                let (y, c) = bn.forward_eval(input)?;
                (y, LayerCache::BatchNorm(c))
            }
            Layer::Relu => (relu_forward(input), LayerCache::Relu(input.clone())),
            Layer::Dense { weight, bias } => {
                let (y, c) = dense_forward(input, &weight.value, &bias.value)?;
                (y, LayerCache::Dense(c))
            }
            Layer::Dropout { .. } => (input.clone(), LayerCache::Dropout(vec![T::one(); input.len()])),
            Layer::GlobalAvgPool => (
                global_avg_pool_forward(input)?,
                LayerCache::GlobalAvgPool(input.shape().to_vec()),
            ),
            Layer::SoftmaxOutput => (input.clone(), LayerCache::Identity),
        })
    }

    /// Evaluation-mode forward pass without a cache.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(match self {
            Layer::Relu => relu_forward(input),
            Layer::Dropout { .. } | Layer::SoftmaxOutput => input.clone(),
            Layer::GlobalAvgPool => global_avg_pool_forward(input)?,
            _ => self.forward_eval_cached(input)?.0,
        })
    }

    /// Accumulates parameter gradients into each [`Param::grad`] and returns
    /// the gradient with respect to the layer input.
    pub fn backward(&mut self, cache: &LayerCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mismatch = || Error::Usage("layer cache does not belong to this layer kind".into());
        match (self, cache) {
            (Layer::Conv2d { weight, bias, .. }, LayerCache::Conv(c)) => {
                let (gi, gw, gb) = conv2d_backward(Some(c), &weight.value, grad_out)?;
                accumulate(&mut weight.grad, &gw);
                accumulate(&mut bias.grad, &gb);
                Ok(gi)
            }
            (Layer::MaxPool { .. }, LayerCache::MaxPool(c)) => maxpool_backward(c, grad_out),
            (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => bn.backward(c, grad_out),
            (Layer::Relu, LayerCache::Relu(input)) => relu_backward(input, grad_out),
            (Layer::Dense { weight, bias }, LayerCache::Dense(c)) => {
                let (gi, gw, gb) = dense_backward(c, &weight.value, grad_out)?;
                accumulate(&mut weight.grad, &gw);
                accumulate(&mut bias.grad, &gb);
                Ok(gi)
            }
            (Layer::Dropout { .. }, LayerCache::Dropout(mask)) => dropout_backward(mask, grad_out),
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool(shape)) => global_avg_pool_backward(shape, grad_out),
            (Layer::SoftmaxOutput, LayerCache::Identity) => Ok(grad_out.clone()),
            _ => Err(mismatch()),
        }
    }

    /// Parameters with their local names.
    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            Layer::BatchNorm(bn) => vec![("gamma", &bn.gamma), ("beta", &bn.beta)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            Layer::BatchNorm(bn) => vec![("gamma", &mut bn.gamma), ("beta", &mut bn.beta)],
            _ => Vec::new(),
        }
    }
}

fn accumulate<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Runs one layer; see [`Layer::forward`].
pub fn layer_forward<T: Scalar>(
    layer: &mut Layer<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    layer.forward(input, mode, rng)
}

/// Backpropagates through one layer; parameter gradients land in the
/// layer's [`Param::grad`] tensors.
pub fn layer_backward<T: Scalar>(
    layer: &mut Layer<T>,
    cache: Option<&LayerCache<T>>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let cache = cache.ok_or_else(|| Error::Usage(format!("{} backward without a forward cache", layer.kind_name())))?;
    layer.backward(cache, grad_out)
}

/// Where activations of a convolutional layer are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapturePoint {
    /// After the ReLU that follows the layer's batch norm.
    #[default]
    PostRelu,
    /// After batch norm, before the non-linearity.
    PreRelu,
}

/// Introspection record for one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerInfo {
    /// 1-based ordinal among convolutional layers.
    pub id: usize,
    /// Position in the layer stack.
    pub index: usize,
    pub filters: usize,
    pub batchnorm: Option<usize>,
    pub relu: Option<usize>,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvLayerInfo {
    /// Index of the last layer to run to reach the capture point.
    pub fn capture_index(&self, point: CapturePoint) -> usize {
        match point {
            CapturePoint::PostRelu => self.relu.or(self.batchnorm).unwrap_or(self.index),
            CapturePoint::PreRelu => self.batchnorm.unwrap_or(self.index),
        }
    }
}

/// A sequential network built from an [`ArchitectureSpec`].
#[derive(Debug, Clone)]
pub struct Network<T> {
    arch: ArchitectureSpec,
    shapes: Vec<FeatureShape>,
    layers: Vec<Layer<T>>,
    caches: Vec<Option<LayerCache<T>>>,
}

impl<T: Scalar> Network<T> {
    /// Allocates parameters (Kaiming-uniform fan-in weights, zero biases,
    /// unit/zero batch-norm affine terms) from `seed`.
    pub fn new(arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        let shapes = arch.infer_shapes()?;
        let mut rng = rng_from(seed, &[stream::INIT]);
        let [c, h, w] = arch.input_shape;
        let mut input = FeatureShape::Spatial {
            channels: c,
            height: h,
            width: w,
        };
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (spec, &shape) in arch.layers.iter().zip(&shapes) {
            layers.push(Layer::build(spec, input, &mut rng));
            input = shape;
        }
        let caches = vec![None; layers.len()];
        Ok(Self {
            arch,
            shapes,
            layers,
            caches,
        })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn output_shapes(&self) -> &[FeatureShape] {
        &self.shapes
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.arch.input_shape;
        match x.shape() {
            [_, xc, xh, xw] if [*xc, *xh, *xw] == [c, h, w] => Ok(()),
            s => Err(Error::Config(format!(
                "network expects [B, {c}, {h}, {w}] input, got {s:?}"
            ))),
        }
    }

    /// Training-mode forward pass, retaining caches for [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (y, cache) = layer.forward(&cur, Mode::Train, rng)?;
            if !y.is_finite() {
                self.caches.iter_mut().for_each(|c| *c = None);
                return Err(Error::Numeric(format!("layer {i} ({})", layer.kind_name())));
            }
            self.caches[i] = Some(cache);
            cur = y;
        }
        Ok(cur)
    }

    /// Evaluation-mode forward pass; takes `&self` so it cannot mutate state.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_eval_through(x, self.layers.len() - 1)
    }

    /// Evaluation-mode forward pass stopping after layer `last`.
    pub fn forward_eval_through(&self, x: &Tensor<T>, last: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        if last >= self.layers.len() {
            return Err(Error::Usage(format!("layer index {last} out of range")));
        }
        let mut cur = x.clone();
        for layer in &self.layers[..=last] {
            cur = layer.forward_eval(&cur)?;
        }
        Ok(cur)
    }

    /// Backpropagates `grad` (w.r.t. the logits) through the cached forward
    /// pass, accumulating parameter gradients. Caches are consumed.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = grad.clone();
        for i in (0..self.layers.len()).rev() {
            let cache = self.caches[i].take();
            cur = layer_backward(&mut self.layers[i], cache.as_ref(), &cur)?;
        }
        Ok(cur)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, p) in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    /// Parameters named `layers.<index>.<name>`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("layers.{i}.{n}"), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut().into_iter().map(|(_, p)| p))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.trainable_count()).sum()
    }

    pub fn set_all_trainability(&mut self, t: Trainability) {
        for p in self.params_mut() {
            p.set_trainability(t.clone())
                .expect("uniform trainability fits every parameter");
        }
    }

    pub fn init_optimizer_state(&mut self) {
        self.params_mut().into_iter().for_each(Param::init_moments);
    }

    /// Drops Adam moments so the next training run starts fresh.
    pub fn reset_optimizer_state(&mut self) {
        for p in self.params_mut() {
            p.moments = None;
        }
    }

    /// Freezes or unfreezes running-statistic updates of every batch norm.
    pub fn set_all_bn_stats_frozen(&mut self, frozen: bool) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.stats_frozen = frozen;
            }
        }
    }

    /// Every convolutional layer in stack order.
    pub fn conv_layers(&self) -> Vec<ConvLayerInfo> {
        let mut out = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            let Layer::Conv2d { weight, .. } = layer else { continue };
            let mut batchnorm = None;
            let mut relu = None;
            for (j, next) in self.layers.iter().enumerate().skip(index + 1) {
                match next {
                    Layer::BatchNorm(_) if batchnorm.is_none() && relu.is_none() => batchnorm = Some(j),
                    Layer::Relu if relu.is_none() => relu = Some(j),
                    _ => break,
                }
            }
            let FeatureShape::Spatial { height, width, .. } = self.shapes[index] else {
                unreachable!("conv output is spatial")
            };
            out.push(ConvLayerInfo {
                id: out.len() + 1,
                index,
                filters: weight.value.shape()[0],
                batchnorm,
                relu,
                out_height: height,
                out_width: width,
            });
        }
        out
    }

    /// Looks up a convolutional layer by its 1-based ordinal.
    pub fn conv_layer(&self, id: usize) -> Result<ConvLayerInfo> {
        self.conv_layers()
            .into_iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Usage(format!("no convolutional layer with id {id}")))
    }
}
