//! Compressible subspaces of neural networks: train a family of networks
//! indexed by `α ∈ [0, 1]` that can be compressed at inference time (channel
//! pruning, magnitude pruning, or affine quantization) without retraining or
//! normalization-statistics recalibration.

pub mod tensor;
pub mod rng;
pub mod nn;
pub mod compression;
pub mod subspace;
pub mod data;
pub mod train;
pub mod eval;
pub mod checkpoint;
pub mod config;
pub mod run;
