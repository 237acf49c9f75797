//! Transformer inference under a leveled homomorphic-encryption contract.
//!
//! The pipeline replaces every operation a leveled scheme cannot evaluate
//! (GELU, softmax, layer norm) with add/mul/relu surrogates, then runs the
//! converted model on ciphertexts with relu delegated to the key holder.

pub mod approx;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod he;
pub mod model;
pub mod protocol;
pub mod tensor;
pub mod train;
