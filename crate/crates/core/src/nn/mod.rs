//! Minimal differentiable engine for sequential CNNs: layers with explicit
//! backward passes, masked Adam and binary checkpoints.

pub mod adam;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod elementwise;
pub mod loss;
pub mod network;
pub mod param;
pub mod pool;
pub mod spec;

pub use adam::{adam_step, AdamHyper};
pub use checkpoint::{checkpoint_load, checkpoint_save};
pub use conv::{conv2d_backward, conv2d_forward};
pub use loss::{softmax, softmax_xent};
pub use network::{layer_backward, layer_forward, CapturePoint, ConvLayerInfo, Layer, LayerCache, Mode, Network};
pub use param::{Param, Trainability};
pub use spec::{ArchitectureSpec, FeatureShape, LayerSpec};
