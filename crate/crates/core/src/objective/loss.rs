//! The tri-modal loss
//!
//! ```text
//! L = λ_S / n_S · Σ_{j∈S} −log p̂_j + λ_T / n_T · Σ_{j∈T} −log p̂_j + λ_I / n_I · Σ_{j∈I} −log p̂_j
//! ```
//!
//! where each sum runs over unmasked targets of one modality and `p̂_j` is
//! the softmax probability of target `j` over the whole vocabulary. A
//! modality without targets contributes exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Real;
use crate::seqfmt::{modality_slot, ShiftedSequence};
use crate::tokenspace::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_speech: f64,
    pub lambda_text: f64,
    pub lambda_image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_speech: 0.25,
            lambda_text: 0.93,
            lambda_image: 0.25,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_speech: f64, lambda_text: f64, lambda_image: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_speech,
            lambda_text,
            lambda_image,
        };
        w.validate()?;
        Ok(w)
    }

    /// In `[speech, text, image]` order.
    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda_speech, self.lambda_text, self.lambda_image]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_array();
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(Error::invalid("loss weights are all zero"));
        }
        Ok(())
    }
}

/// How the per-modality target counts `n_m` are taken over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `n_m` per sequence; sequence losses are averaged over the batch.
    #[default]
    PerSequence,
    /// `n_m` pooled over the batch.
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModalityTerm {
    /// Summed negative log-likelihood over unmasked targets.
    pub sum: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub speech: ModalityTerm,
    pub text: ModalityTerm,
    pub image: ModalityTerm,
}

impl LossBreakdown {
    pub fn term(&self, m: Modality) -> Option<&ModalityTerm> {
        match m {
            Modality::Speech => Some(&self.speech),
            Modality::Text => Some(&self.text),
            Modality::Image => Some(&self.image),
            Modality::Control => None,
        }
    }

    fn terms_mut(&mut self) -> [&mut ModalityTerm; 3] {
        [&mut self.speech, &mut self.text, &mut self.image]
    }
}

/// Per-modality coefficients `λ_m / n_m` (zero for absent modalities).
pub(crate) fn coefficients(w: &LossWeights, counts: [usize; 3]) -> [f64; 3] {
    let lambdas = w.as_array();
    std::array::from_fn(|i| {
        if counts[i] == 0 {
            0.0
        } else {
            lambdas[i] / counts[i] as f64
        }
    })
}

fn check_shapes<F: Real>(logits: &[F], vocab: usize, seq: &ShiftedSequence) -> Result<()> {
    if vocab == 0 || logits.len() != seq.len() * vocab {
        return Err(Error::invalid(format!(
            "logits have {} entries, expected {} x {vocab}",
            logits.len(),
            seq.len()
        )));
    }
    if seq.target_modalities.len() != seq.len() || seq.target_mask.len() != seq.len() {
        return Err(Error::invalid("target arrays differ in length"));
    }
    Ok(())
}

/// Evaluates `Σ_m coeff_m · Σ_{j∈m} −log p̂_j` and optionally its logit gradient
/// scaled by `grad_scale`.
pub(crate) fn weighted_cross_entropy<F: Real>(
    logits: &[F],
    vocab: usize,
    seq: &ShiftedSequence,
    coeff: [f64; 3],
    grad_scale: f64,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<F>>)> {
    check_shapes(logits, vocab, seq)?;
    let mut out = LossBreakdown::default();
    let mut grads = want_grads.then(|| vec![F::zero(); logits.len()]);
    let mut any = false;
    let mut probs = vec![0.0f64; vocab];
    for (i, row) in logits.chunks_exact(vocab).enumerate() {
        if !seq.target_mask[i] {
            continue;
        }
        let slot = modality_slot(seq.target_modalities[i]).ok_or_else(|| {
            Error::invalid(format!("unmasked control-token target at position {i}"))
        })?;
        let target = seq.targets[i] as usize;
        if target >= vocab {
            return Err(Error::InvalidToken {
                id: seq.targets[i],
                size: vocab as u32,
            });
        }
        any = true;
        let mut max = f64::NEG_INFINITY;
        for (p, &x) in probs.iter_mut().zip(row) {
            let x = x.as_f64();
            if !x.is_finite() {
                return Err(Error::Numeric(format!("non-finite logit at position {i}")));
            }
            *p = x;
            max = max.max(x);
        }
        let mut sum_exp = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            sum_exp += *p;
        }
        let nll = sum_exp.ln() + max - row[target].as_f64();
        let term = &mut out.terms_mut()[slot];
        term.sum += nll;
        term.count += 1;
        if let Some(g) = grads.as_mut() {
            let c = coeff[slot] * grad_scale;
            if c != 0.0 {
                let g_row = &mut g[i * vocab..(i + 1) * vocab];
                for (v, (gv, p)) in g_row.iter_mut().zip(&probs).enumerate() {
                    let onehot = if v == target { 1.0 } else { 0.0 };
                    *gv = F::lift(c * (p / sum_exp - onehot));
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyLoss);
    }
    let sums = [out.speech.sum, out.text.sum, out.image.sum];
    out.total = (0..3)
        .filter(|&m| coeff[m] != 0.0)
        .map(|m| coeff[m] * sums[m])
        .sum();
    Ok((out, grads))
}

/// Loss of one sequence with per-sequence normalization.
pub fn trimodal_loss<F: Real>(
    logits: &[F],
    vocab: usize,
    seq: &ShiftedSequence,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let coeff = coefficients(weights, seq.modality_counts());
    Ok(weighted_cross_entropy(logits, vocab, seq, coeff, 1.0, false)?.0)
}

/// Gradient of [`trimodal_loss`] with respect to the logits.
///
/// Row `i` of modality `m` is `λ_m / n_m · (softmax(logits_i) − onehot(target_i))`;
/// masked rows are zero.
pub fn loss_logit_grads<F: Real>(
    logits: &[F],
    vocab: usize,
    seq: &ShiftedSequence,
    weights: &LossWeights,
) -> Result<Vec<F>> {
    Ok(loss_and_logit_grads(logits, vocab, seq, weights, None, 1.0)?.1)
}

/// Loss and logit gradient in one pass.
///
/// `batch_counts` overrides the per-sequence counts (per-batch normalization);
/// `scale` multiplies the total and the gradient (e.g. `1 / batch_size`).
pub fn loss_and_logit_grads<F: Real>(
    logits: &[F],
    vocab: usize,
    seq: &ShiftedSequence,
    weights: &LossWeights,
    batch_counts: Option<[usize; 3]>,
    scale: f64,
) -> Result<(LossBreakdown, Vec<F>)> {
    let counts = batch_counts.unwrap_or_else(|| seq.modality_counts());
    let coeff = coefficients(weights, counts);
    let (mut breakdown, grads) = weighted_cross_entropy(logits, vocab, seq, coeff, scale, true)?;
    breakdown.total *= scale;
    Ok((breakdown, grads.expect("gradients requested")))
}
