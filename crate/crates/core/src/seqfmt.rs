//! Task-formatted sequences: `Task InputTokens EndA OutputTokens EndB`.
//!
//! Unsupervised examples use the language-modelling task tag over a single
//! run: `TASK_LM Tokens End`. The task tag is always given, so it never
//! carries loss; end delimiters are predicted and carry the loss weight of
//! the modality they terminate.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenspace::{read_jsonl, Modality, Task, TokenId, TokenRun, TokenSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub task: Task,
    pub input: TokenRun,
    /// Empty for unsupervised examples.
    pub output: TokenRun,
    pub supervision: Supervision,
}

impl TaskExample {
    pub fn supervised(task: Task, input: TokenRun, output: TokenRun) -> Self {
        TaskExample {
            task,
            input,
            output,
            supervision: Supervision::Supervised,
        }
    }

    pub fn unsupervised(run: TokenRun) -> Self {
        let modality = run.modality;
        TaskExample {
            task: Task::Lm,
            input: run,
            output: TokenRun::new(modality, Vec::new()),
            supervision: Supervision::Unsupervised,
        }
    }

    /// Checks the example against the task template and the token space.
    pub fn validate(&self, space: &TokenSpace) -> Result<()> {
        self.input.validate(space)?;
        self.output.validate(space)?;
        match self.supervision {
            Supervision::Supervised => {
                let (src, dst) = self.task.modalities().ok_or_else(|| {
                    Error::invalid("supervised examples need a translation task, not lm")
                })?;
                if self.input.modality != src || self.output.modality != dst {
                    return Err(Error::invalid(format!(
                        "{:?} maps {src} to {dst}, example has {} to {}",
                        self.task, self.input.modality, self.output.modality
                    )));
                }
                if self.input.is_empty() || self.output.is_empty() {
                    return Err(Error::invalid("supervised example with an empty run"));
                }
            }
            Supervision::Unsupervised => {
                if self.task != Task::Lm {
                    return Err(Error::invalid("unsupervised examples use the lm task"));
                }
                if !self.output.is_empty() {
                    return Err(Error::invalid("unsupervised example with nonempty output"));
                }
                if self.input.modality == Modality::Control || self.input.is_empty() {
                    return Err(Error::invalid("unsupervised example needs a nonempty content run"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackOptions {
    /// Whether end delimiters are prediction targets.
    pub delimiter_loss: bool,
}

impl Default for PackOptions {
    fn default() -> Self {
        PackOptions {
            delimiter_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<TokenId>,
    pub modality_labels: Vec<Modality>,
    /// `target_mask[i]` is true when `ids[i]` is a prediction target.
    pub target_mask: Vec<bool>,
    /// Length before padding.
    pub attention_len: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn pack(example: &TaskExample, space: &TokenSpace) -> Result<PackedSequence> {
    pack_with(example, space, PackOptions::default())
}

pub fn pack_with(
    example: &TaskExample,
    space: &TokenSpace,
    options: PackOptions,
) -> Result<PackedSequence> {
    example.validate(space)?;
    let task = space.task_token(example.task)?;
    let end_a = space.end_token(example.input.modality)?;
    let mut ids = Vec::with_capacity(example.input.len() + example.output.len() + 3);
    ids.push(task);
    ids.extend_from_slice(&example.input.ids);
    ids.push(end_a);
    if example.supervision == Supervision::Supervised {
        ids.extend_from_slice(&example.output.ids);
        ids.push(space.end_token(example.output.modality)?);
    }
    let modality_labels = ids
        .iter()
        .map(|&id| space.classify(id))
        .collect::<Result<Vec<_>>>()?;
    let target_mask = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| i > 0 && (options.delimiter_loss || space.terminated_modality(id).is_none()))
        .collect();
    let attention_len = ids.len();
    Ok(PackedSequence {
        ids,
        modality_labels,
        target_mask,
        attention_len,
    })
}

/// Recovers the example from a packed (possibly padded) sequence.
pub fn unpack(seq: &PackedSequence, space: &TokenSpace) -> Result<TaskExample> {
    let ids = &seq.ids[..seq.attention_len];
    let (&head, rest) = ids
        .split_first()
        .ok_or_else(|| Error::invalid("empty sequence"))?;
    let task = space
        .task_of(head)
        .ok_or_else(|| Error::invalid(format!("sequence starts with non-task token {head}")))?;
    let end_a = rest
        .iter()
        .position(|&id| space.terminated_modality(id).is_some())
        .ok_or_else(|| Error::invalid("sequence has no end delimiter"))?;
    let input_modality = space.terminated_modality(rest[end_a]).unwrap();
    let input = TokenRun::new(input_modality, rest[..end_a].to_vec());
    let after = &rest[end_a + 1..];
    let example = if task == Task::Lm {
        if !after.is_empty() {
            return Err(Error::invalid("tokens after the end of an lm sequence"));
        }
        TaskExample::unsupervised(input)
    } else {
        let (&end_b, output) = after
            .split_last()
            .ok_or_else(|| Error::invalid("supervised sequence has no output delimiter"))?;
        let output_modality = space
            .terminated_modality(end_b)
            .ok_or_else(|| Error::invalid("supervised sequence does not end with a delimiter"))?;
        TaskExample::supervised(task, input, TokenRun::new(output_modality, output.to_vec()))
    };
    example.validate(space)?;
    Ok(example)
}

/// Next-token view of a packed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftedSequence {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    /// Loss modality of each target: a content token's own modality, the
    /// terminated modality for end delimiters, `Control` otherwise.
    pub target_modalities: Vec<Modality>,
    pub target_mask: Vec<bool>,
}

impl ShiftedSequence {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Number of unmasked targets per loss modality, in `[speech, text, image]` order.
    pub fn modality_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for (m, &on) in self.target_modalities.iter().zip(&self.target_mask) {
            if on {
                if let Some(i) = modality_slot(*m) {
                    counts[i] += 1;
                }
            }
        }
        counts
    }
}

/// Slot of a content modality in `[speech, text, image]` arrays.
pub fn modality_slot(m: Modality) -> Option<usize> {
    match m {
        Modality::Speech => Some(0),
        Modality::Text => Some(1),
        Modality::Image => Some(2),
        Modality::Control => None,
    }
}

/// Shifts the unpadded prefix of `seq`: inputs `ids[0..L-1]`, targets `ids[1..L]`.
pub fn shift_targets(seq: &PackedSequence, space: &TokenSpace) -> Result<ShiftedSequence> {
    let len = seq.attention_len;
    if len < 2 {
        return Err(Error::invalid(format!("cannot shift a sequence of length {len}")));
    }
    let ids = &seq.ids[..len];
    let target_modalities = ids[1..]
        .iter()
        .zip(&seq.modality_labels[1..len])
        .map(|(&id, &m)| match m {
            Modality::Control => space.terminated_modality(id).unwrap_or(Modality::Control),
            content => content,
        })
        .collect();
    Ok(ShiftedSequence {
        inputs: ids[..len - 1].to_vec(),
        targets: ids[1..].to_vec(),
        target_modalities,
        target_mask: seq.target_mask[1..len].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub sequences: Vec<PackedSequence>,
    pub pad_lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Right-pads every sequence to the longest length; padding is never a target.
pub fn make_batch(examples: Vec<PackedSequence>, pad_id: TokenId) -> Result<Batch> {
    let max_len = examples
        .iter()
        .map(|s| s.len())
        .max()
        .ok_or_else(|| Error::invalid("cannot batch an empty list"))?;
    let mut pad_lengths = Vec::with_capacity(examples.len());
    let sequences = examples
        .into_iter()
        .map(|mut s| {
            let pad = max_len - s.len();
            pad_lengths.push(pad);
            s.ids.resize(max_len, pad_id);
            s.modality_labels.resize(max_len, Modality::Control);
            s.target_mask.resize(max_len, false);
            s
        })
        .collect();
    Ok(Batch {
        sequences,
        pad_lengths,
    })
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub task: String,
    pub supervision: Supervision,
    pub input_modality: Modality,
    pub input_ids: Vec<TokenId>,
    pub output_modality: Modality,
    pub output_ids: Vec<TokenId>,
}

impl From<&TaskExample> for ExampleRecord {
    fn from(ex: &TaskExample) -> Self {
        ExampleRecord {
            task: ex.task.control_name().to_string(),
            supervision: ex.supervision,
            input_modality: ex.input.modality,
            input_ids: ex.input.ids.clone(),
            output_modality: ex.output.modality,
            output_ids: ex.output.ids.clone(),
        }
    }
}

impl ExampleRecord {
    pub fn into_example(self) -> Result<TaskExample> {
        Ok(TaskExample {
            task: self.task.parse()?,
            input: TokenRun::new(self.input_modality, self.input_ids),
            output: TokenRun::new(self.output_modality, self.output_ids),
            supervision: self.supervision,
        })
    }
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[TaskExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, &ExampleRecord::from(ex))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Reads a dataset and validates every example against `space`.
pub fn read_dataset(path: impl AsRef<Path>, space: &TokenSpace) -> Result<Vec<TaskExample>> {
    let path = path.as_ref();
    let records: Vec<ExampleRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let ex = r.into_example()?;
            ex.validate(space).map_err(|e| {
                Error::ManifestMismatch(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            Ok(ex)
        })
        .collect()
}
