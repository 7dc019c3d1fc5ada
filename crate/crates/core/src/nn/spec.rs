use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a sequential architecture.
///
/// Convolution kernels are square (`kernel`×`kernel`); padding is zero
/// padding for convolutions and implicit `-inf` padding for max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Batchnorm,
    Relu,
    Dense {
        out_features: usize,
    },
    Dropout {
        p: f64,
    },
    GlobalAvgPool,
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::SoftmaxOutput => "softmax-output",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if kernel == 0 || out_channels == 0 || stride == 0 {
                    return Err(Error::Config(format!(
                        "conv2d needs k >= 1, d >= 1, s >= 1 (got k={kernel}, d={out_channels}, s={stride})"
                    )));
                }
            }
            LayerSpec::Maxpool {
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || 2 * padding > kernel {
                    return Err(Error::Config(format!(
                        "maxpool needs k >= 1, s >= 1, p <= k/2 (got k={kernel}, s={stride}, p={padding})"
                    )));
                }
            }
            LayerSpec::Dense { out_features: 0 } => {
                return Err(Error::Config("dense layer needs at least one output".into()));
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Output spatial extent of a strided window operation.
pub fn window_output(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// A named sequential network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Shape of the activation flowing between layers (batch dimension omitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureShape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat(usize),
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            FeatureShape::Flat(n) => n,
        }
    }
}

impl ArchitectureSpec {
    /// Propagates shapes through the stack, returning the output shape of
    /// every layer.
    pub fn infer_shapes(&self) -> Result<Vec<FeatureShape>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut cur = FeatureShape::Spatial {
            channels: c,
            height: h,
            width: w,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            let err = |msg: String| Error::Config(format!("layer {i} ({}): {msg}", layer.kind_name()));
            cur = match (*layer, cur) {
                (
                    LayerSpec::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    FeatureShape::Spatial { height, width, .. },
                ) => {
                    let ho = window_output(height, kernel, stride, padding);
                    let wo = window_output(width, kernel, stride, padding);
                    match (ho, wo) {
                        (Some(ho), Some(wo)) => FeatureShape::Spatial {
                            channels: out_channels,
                            height: ho,
                            width: wo,
                        },
                        _ => return Err(err(format!("kernel {kernel} does not fit {height}x{width} input"))),
                    }
                }
                (
                    LayerSpec::Maxpool {
                        kernel,
                        stride,
                        padding,
                    },
                    FeatureShape::Spatial {
                        channels,
                        height,
                        width,
                    },
                ) => match (
                    window_output(height, kernel, stride, padding),
                    window_output(width, kernel, stride, padding),
                ) {
                    (Some(ho), Some(wo)) => FeatureShape::Spatial {
                        channels,
                        height: ho,
                        width: wo,
                    },
                    _ => return Err(err(format!("window {kernel} does not fit {height}x{width} input"))),
                },
                (LayerSpec::Batchnorm, s @ FeatureShape::Spatial { .. }) => s,
                (LayerSpec::Relu | LayerSpec::Dropout { .. }, s) => s,
                (LayerSpec::Dense { out_features }, _) => FeatureShape::Flat(out_features),
                (LayerSpec::GlobalAvgPool, FeatureShape::Spatial { channels, .. }) => FeatureShape::Flat(channels),
                (LayerSpec::SoftmaxOutput, FeatureShape::Flat(n)) => {
                    if i + 1 != self.layers.len() {
                        return Err(err("softmax-output must be the last layer".into()));
                    }
                    FeatureShape::Flat(n)
                }
                (_, s) => return Err(err(format!("incompatible input shape {s:?}"))),
            };
            out.push(cur);
        }
        match out.last() {
            Some(FeatureShape::Flat(n)) if *n == self.num_classes => Ok(out),
            other => Err(Error::Config(format!(
                "architecture `{}` ends in {other:?}, expected {} logits",
                self.name, self.num_classes
            ))),
        }
    }
}
