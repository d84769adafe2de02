//! Token-bottleneck masked autoencoding (ToBo) at desk scale.
//!
//! A reference frame is squeezed into the CLS output of a ViT encoder (the
//! bottleneck token); a self-attention decoder then reconstructs a heavily
//! masked target frame from that token plus a handful of visible target
//! patches. The crate bundles the tensor engine the models run on, a
//! synthetic bouncing-sprite world that supplies frame pairs with ground
//! truth, two downstream evaluators (label propagation and a frozen-encoder
//! state probe) and the run harness behind the `tobo` binary.

pub mod digest;
pub mod error;
pub mod eval;
pub mod harness;
pub mod imaging;
pub mod objective;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
