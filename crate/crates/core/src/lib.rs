//! Spatial-frequency modulation adapters (SFMA) on a frozen learned image
//! codec, with real entropy coding, scalable two-layer streams, training
//! loops and rate-quality diagnostics.

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod kernels;
pub mod layers;
pub mod manifest;
pub mod optim;
pub mod scalable;
pub mod task;
pub mod tensor;
pub mod training;

pub use adapters::{AdapterSet, AdapterSite, AdapterSpec, PlacementConfig, SfmaConfig, Variant};
pub use codec::{CodecConfig, CodecWeights, EntropyParameters, QuantMode};
pub use entropy::{Bitstream, CodingMode, FactorizedPrior};
pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
