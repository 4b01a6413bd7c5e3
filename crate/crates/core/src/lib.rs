//! Expert-knowledge extraction from mixture-of-experts models.
//!
//! Pipeline: route domain data through an MoE model and log expert
//! activations ([`moe`]), score experts by cross-domain activation and
//! consistency ([`selection`]), Tucker-compress the chosen experts' weights
//! per projection ([`consolidation`]), collapse and resize each pack to a
//! target matrix ([`adaptation`]), and emit a dense model initialization
//! ([`init`]). [`probe`] runs the whole chain on a synthetic teacher and
//! compares training curves against a random initialization.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); files always hold
//! `f32` tensors in the [`checkpoint`] container.

pub mod adaptation;
pub mod checkpoint;
pub mod consolidation;
pub mod init;
pub mod moe;
pub mod probe;
pub mod scalar;
pub mod selection;
pub mod svd;
pub mod tensor;
pub mod tucker;

pub use scalar::Scalar;
pub use tensor::{Matrix, Tensor, TensorError};
pub use tucker::{TuckerPack, TuckerRanks};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type TuckerPackF32 = TuckerPack<f32>;
pub type TuckerPackF64 = TuckerPack<f64>;
pub type MoeModelF32 = moe::MoeModel<f32>;
pub type MoeModelF64 = moe::MoeModel<f64>;
pub type DenseModelF32 = init::DenseModel<f32>;
pub type DenseModelF64 = init::DenseModel<f64>;
pub type ConsolidatedKnowledgeF32 = consolidation::ConsolidatedKnowledge<f32>;
