//! Deterministic integer transformer inference.
//!
//! The crate is split into:
//!
//! - [`qarith`]: Q16 fixed-point arithmetic, lookup tables and RoPE tables.
//! - [`modelio`]: the byte-exact model container, quantization and toy models.
//! - [`kernels`]: integer transformer building blocks with fixed reduction order.
//! - [`engine`]: the forward pass, greedy decoding and seeded sampling.
//! - [`floatref`]: an f32 twin of the engine with a configurable reduction tree.
//! - [`trustlab`]: trust entropy, protocol simulation, divergence bounds.
//! - [`attest`]: hash attestations and verification by re-execution.

pub mod attest;
pub mod digest;
pub mod engine;
pub mod error;
pub mod floatref;
pub mod kernels;
pub mod modelio;
pub mod qarith;
pub mod trustlab;
mod wire;

pub use attest::{
    dispute_game, make_attestation, verify_by_reexecution, verify_with, Attestation, Stage,
    VerifyOutcome, Winner,
};
pub use digest::Digest;
pub use engine::{Engine, ExecConfig, GenerationResult, KvCache};
pub use error::{Error, Result};
pub use floatref::{FloatModel, LaneConfig};
pub use modelio::{gen_toy_model, weight_hash, ModelConfig, ModelFile, QuantTensor};
pub use qarith::{RopeTables, Q16};
