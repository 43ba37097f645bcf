//! Matrix-product-state image classifier with an elementwise temperature
//! layer `A * exp(-beta * A)` applied to the site tensors.
//!
//! Images are embedded pixel by pixel with a two-dimensional feature map and
//! contracted against an MPS whose label site carries one output per class.
//! Contractions track a power-of-two exponent separately from the values so
//! that 784-site chains neither overflow nor underflow.

pub mod anneal;
pub mod checkpoint;
pub mod contraction;
pub mod data;
pub mod error;
pub mod feature_map;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use anneal::{anneal_beta, AnnealConfig, AnnealError, AnnealOutcome, ProxyObjective, TraceRow};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use contraction::{classify, count_flops, ContractionOrder, FlopCount, ScaledVector};
pub use data::{Dataset, IdxImages};
pub use error::{FttnError, Result};
pub use feature_map::{embed_image, embed_pixel, embed_pixels, EmbeddedImage, FeatureMap, LOCAL_DIM};
pub use model::{effective_sites, ModelShape, MpsClassifier, Temperature};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tensor::Tensor;
pub use training::{backward, calibrate, evaluate, train, EpochMetrics, GradientSet, Reduction, TrainConfig};
