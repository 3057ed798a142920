//! Multigrid-structured convolutional networks.
//!
//! The crate pairs a geometric multigrid Poisson solver with the network
//! family obtained by reading multigrid smoothing as residual-correction
//! feature extraction, plus a reverse-mode gradient tape, training loop and
//! executable checks of the structural identities linking the two.
//!
//! All numerics are generic over [`Scalar`] (`f64` by default, `f32`
//! available); the `*64` / `*32` aliases below fix the precision.

pub mod autodiff;
pub mod checkpoint;
pub mod classic;
pub mod conv;
pub mod data;
pub mod equivalence;
pub mod error;
pub mod grid;
pub mod mgnet;
pub mod params;
pub mod poisson;
pub mod recorder;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use classic::{ResNet, ResNetLayout};
pub use data::LabeledImage;
pub use equivalence::{EquivalenceReport, TheoremId};
pub use error::{Error, Result};
pub use mgnet::{MgNet, MgNetConfig};
pub use poisson::PoissonHierarchy;
pub use scalar::Scalar;
pub use train::{Classifier, TrainConfig};
pub use tensor::{
    argmax, conv2d, conv2d_depthwise, conv2d_transpose, cross_entropy, one_hot, relu, softmax,
    ConvKernel, Padding, Tensor,
};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type ConvKernel64 = ConvKernel<f64>;
pub type ConvKernel32 = ConvKernel<f32>;
pub type MgNet64 = MgNet<f64>;
pub type MgNet32 = MgNet<f32>;
pub type ResNet64 = ResNet<f64>;
pub type ResNet32 = ResNet<f32>;
