//! Greedy decoding with target-modality masking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{DecodeState, ModelParams, Real};
use crate::tokenspace::{Modality, Task, TokenId, TokenRun, TokenSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// Restrict choices to the target modality and its end delimiter.
    pub constrained: bool,
}

impl GenerateOptions {
    pub fn new(max_new: usize) -> Self {
        GenerateOptions {
            max_new,
            constrained: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Output tokens without delimiters.
    pub output: TokenRun,
    /// True when decoding stopped before emitting the end delimiter.
    pub truncated: bool,
    /// Tokens emitted outside the target modality (unconstrained mode only);
    /// they are dropped from `output`.
    pub stray_tokens: usize,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<F: Real>(values: &[F]) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Decodes `[task, input..., EndA]` greedily until `EndB` or `max_new` tokens.
pub fn generate<F: Real>(
    params: &ModelParams<F>,
    space: &TokenSpace,
    task: Task,
    input: &TokenRun,
    options: GenerateOptions,
) -> Result<Generation> {
    let (in_mod, out_mod) = task
        .modalities()
        .ok_or_else(|| Error::invalid("generation needs a task with an output modality"))?;
    if input.modality != in_mod {
        return Err(Error::invalid(format!(
            "{} expects {in_mod} input, got {}",
            task.control_name(),
            input.modality
        )));
    }
    input.validate(space)?;
    if params.config.vocab_size != space.vocab_size() {
        return Err(Error::ManifestMismatch(format!(
            "model vocabulary {} differs from token space {}",
            params.config.vocab_size,
            space.vocab_size()
        )));
    }
    let mut prefix = Vec::with_capacity(input.len() + 2);
    prefix.push(space.task_token(task)?);
    prefix.extend_from_slice(&input.ids);
    prefix.push(space.end_token(in_mod)?);
    let max_len = params.config.max_seq_len;
    if prefix.len() > max_len {
        return Err(Error::invalid(format!(
            "prompt of {} tokens exceeds max_seq_len {max_len}",
            prefix.len()
        )));
    }
    let end = space.end_token(out_mod)?;
    let allowed = space
        .range(out_mod)
        .ok_or_else(|| Error::invalid("control output modality"))?;

    let mut state = DecodeState::new(params);
    let mut logits = Vec::new();
    for &id in &prefix {
        logits = state.push(params, id)?;
    }
    let mut output: Vec<TokenId> = Vec::new();
    let mut stray = 0;
    loop {
        if output.len() >= options.max_new {
            break;
        }
        let next = if options.constrained {
            let mut best = argmax(&logits[allowed.start as usize..allowed.end as usize])
                .map(|i| allowed.start + i as TokenId);
            if best.is_none_or(|b| logits[end as usize] > logits[b as usize]) {
                best = Some(end);
            }
            best.expect("end delimiter is always a candidate")
        } else {
            argmax(&logits).expect("nonempty vocabulary") as TokenId
        };
        if next == end {
            output.retain(|id| allowed.contains(id));
            return Ok(Generation {
                output: TokenRun::new(out_mod, output),
                truncated: false,
                stray_tokens: stray,
            });
        }
        if !allowed.contains(&next) {
            stray += 1;
        }
        output.push(next);
        if state.len() >= max_len {
            break;
        }
        logits = state.push(params, next)?;
    }
    output.retain(|id| allowed.contains(id));
    Ok(Generation {
        output: TokenRun::new(out_mod, output),
        truncated: true,
        stray_tokens: stray,
    })
}

/// Convenience check used by callers that need a target modality.
pub fn output_modality(task: Task) -> Result<Modality> {
    task.modalities()
        .map(|(_, out)| out)
        .ok_or_else(|| Error::invalid(format!("{} has no output modality", task.control_name())))
}
