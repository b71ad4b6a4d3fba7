//! Length-normalized tri-modal cross-entropy and the AdamW optimizer.

mod adamw;
mod loss;

pub use adamw::{AdamW, AdamWConfig};
pub use loss::{
    loss_and_logit_grads, loss_logit_grads, trimodal_loss, LossBreakdown, LossWeights,
    ModalityTerm, Normalization,
};
