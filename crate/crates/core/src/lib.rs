//! Discrete multimodal language modeling: a shared token space over text,
//! speech and image units, k-means speech codebooks, sequence packing, a
//! decoder-only transformer, the modality-normalized loss, and the training
//! and evaluation pipeline.

pub mod codebook;
pub mod error;
pub mod net;
pub mod objective;
mod par;
pub mod pipeline;
pub mod seqfmt;
pub mod tokenspace;

pub use error::{Error, Result};
pub use par::par_map;
pub use tokenspace::{Modality, Task, TokenId, TokenSpace};
