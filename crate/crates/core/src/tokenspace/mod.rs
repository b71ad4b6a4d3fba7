//! The unified discrete vocabulary.
//!
//! Text, speech and image tokens occupy three disjoint, contiguous id ranges
//! laid out in that order. Control tokens (task tags, end delimiters and
//! padding) follow the image range. Keeping text first means a text-only
//! model's embedding rows are a prefix of any extended vocabulary.

mod codec;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::SyntheticSpeechCodec;

pub type TokenId = u32;

/// Default character alphabet for the text tokenizer, in id order.
pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz '0123456789";

pub const PAD: &str = "PAD";
pub const END_TEXT: &str = "END_TEXT";
pub const END_SPEECH: &str = "END_SPEECH";
pub const END_IMAGE: &str = "END_IMAGE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
    Image,
    Control,
}

impl Modality {
    pub const CONTENT: [Modality; 3] = [Modality::Speech, Modality::Text, Modality::Image];

    /// Name of the delimiter token that terminates a run of this modality.
    pub fn end_token_name(self) -> Option<&'static str> {
        match self {
            Modality::Text => Some(END_TEXT),
            Modality::Speech => Some(END_SPEECH),
            Modality::Image => Some(END_IMAGE),
            Modality::Control => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
            Modality::Image => "image",
            Modality::Control => "control",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "speech" => Ok(Modality::Speech),
            "image" => Ok(Modality::Image),
            "control" => Ok(Modality::Control),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

/// Task tags. Each is a control token placed at the head of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    T2s,
    S2tt,
    I2t,
    Lm,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Asr, Task::T2s, Task::S2tt, Task::I2t, Task::Lm];

    pub fn control_name(self) -> &'static str {
        match self {
            Task::Asr => "TASK_ASR",
            Task::T2s => "TASK_T2S",
            Task::S2tt => "TASK_S2TT",
            Task::I2t => "TASK_I2T",
            Task::Lm => "TASK_LM",
        }
    }

    pub fn from_control_name(name: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.control_name() == name)
    }

    /// (input, output) modalities of a supervised example; `None` for `Lm`.
    pub fn modalities(self) -> Option<(Modality, Modality)> {
        match self {
            Task::Asr | Task::S2tt => Some((Modality::Speech, Modality::Text)),
            Task::T2s => Some((Modality::Text, Modality::Speech)),
            Task::I2t => Some((Modality::Image, Modality::Text)),
            Task::Lm => None,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let name = lower.strip_prefix("task_").unwrap_or(&lower);
        match name {
            "asr" => Ok(Task::Asr),
            "t2s" => Ok(Task::T2s),
            "s2tt" => Ok(Task::S2tt),
            "i2t" => Ok(Task::I2t),
            "lm" => Ok(Task::Lm),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Control tokens in layout order.
pub fn control_token_names() -> Vec<&'static str> {
    let mut names = vec![PAD];
    names.extend(Task::ALL.iter().map(|t| t.control_name()));
    names.extend([END_TEXT, END_SPEECH, END_IMAGE]);
    names
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub text_range: Range<TokenId>,
    pub speech_range: Range<TokenId>,
    pub image_range: Range<TokenId>,
    pub control_tokens: BTreeMap<String, TokenId>,
    pub total_size: u32,
    pub alphabet: String,
}

/// Builds the default layout: text, speech, image, then control tokens.
///
/// The text range must be nonempty; speech and image ranges may be empty (a
/// text-only base model has no speech or image tokens).
pub fn build_token_space(
    text_vocab_size: u32,
    speech_vocab_size: u32,
    image_vocab_size: u32,
) -> Result<TokenSpace> {
    let alphabet: String = DEFAULT_ALPHABET
        .chars()
        .take(text_vocab_size as usize)
        .collect();
    TokenSpace::with_alphabet(text_vocab_size, speech_vocab_size, image_vocab_size, &alphabet)
}

impl TokenSpace {
    pub fn with_alphabet(
        text_vocab_size: u32,
        speech_vocab_size: u32,
        image_vocab_size: u32,
        alphabet: &str,
    ) -> Result<TokenSpace> {
        if text_vocab_size == 0 {
            return Err(Error::invalid("text vocabulary size must be at least 1"));
        }
        let n_chars = alphabet.chars().count();
        if n_chars > text_vocab_size as usize {
            return Err(Error::invalid(format!(
                "alphabet has {n_chars} characters but the text range holds {text_vocab_size}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = alphabet.chars().find(|c| !seen.insert(*c)) {
            return Err(Error::invalid(format!("duplicate alphabet character {dup:?}")));
        }
        let overflow = || Error::invalid("vocabulary size overflows u32");
        let t1 = text_vocab_size;
        let s1 = t1.checked_add(speech_vocab_size).ok_or_else(overflow)?;
        let i1 = s1.checked_add(image_vocab_size).ok_or_else(overflow)?;
        let names = control_token_names();
        let total = i1.checked_add(names.len() as u32).ok_or_else(overflow)?;
        let control_tokens = names
            .iter()
            .enumerate()
            .map(|(i, name)| (name.to_string(), i1 + i as u32))
            .collect();
        Ok(TokenSpace {
            text_range: 0..t1,
            speech_range: t1..s1,
            image_range: s1..i1,
            control_tokens,
            total_size: total,
            alphabet: alphabet.to_string(),
        })
    }

    pub fn range(&self, modality: Modality) -> Option<Range<TokenId>> {
        match modality {
            Modality::Text => Some(self.text_range.clone()),
            Modality::Speech => Some(self.speech_range.clone()),
            Modality::Image => Some(self.image_range.clone()),
            Modality::Control => None,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.total_size as usize
    }

    /// Returns the unique modality owning `id`.
    pub fn classify(&self, id: TokenId) -> Result<Modality> {
        if id >= self.total_size {
            return Err(Error::InvalidToken {
                id,
                size: self.total_size,
            });
        }
        if self.text_range.contains(&id) {
            Ok(Modality::Text)
        } else if self.speech_range.contains(&id) {
            Ok(Modality::Speech)
        } else if self.image_range.contains(&id) {
            Ok(Modality::Image)
        } else if self.control_tokens.values().any(|&c| c == id) {
            Ok(Modality::Control)
        } else {
            Err(Error::InvalidToken {
                id,
                size: self.total_size,
            })
        }
    }

    pub fn control(&self, name: &str) -> Result<TokenId> {
        self.control_tokens
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("token space has no control token {name}")))
    }

    pub fn control_name(&self, id: TokenId) -> Option<&str> {
        self.control_tokens
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
    }

    pub fn pad(&self) -> Result<TokenId> {
        self.control(PAD)
    }

    pub fn task_token(&self, task: Task) -> Result<TokenId> {
        self.control(task.control_name())
    }

    pub fn task_of(&self, id: TokenId) -> Option<Task> {
        self.control_name(id).and_then(Task::from_control_name)
    }

    pub fn end_token(&self, modality: Modality) -> Result<TokenId> {
        let name = modality
            .end_token_name()
            .ok_or_else(|| Error::invalid("control runs have no end delimiter"))?;
        self.control(name)
    }

    /// The modality an end delimiter terminates, if `id` is one.
    pub fn terminated_modality(&self, id: TokenId) -> Option<Modality> {
        match self.control_name(id)? {
            END_TEXT => Some(Modality::Text),
            END_SPEECH => Some(Modality::Speech),
            END_IMAGE => Some(Modality::Image),
            _ => None,
        }
    }

    /// One token per character; ids follow alphabet order from the start of the text range.
    pub fn encode_text(&self, s: &str) -> Result<TokenRun> {
        let ids = s
            .chars()
            .enumerate()
            .map(|(position, ch)| {
                self.alphabet
                    .chars()
                    .position(|a| a == ch)
                    .map(|i| self.text_range.start + i as TokenId)
                    .ok_or(Error::Encoding { ch, position })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenRun {
            ids,
            modality: Modality::Text,
        })
    }

    pub fn decode_text(&self, ids: &[TokenId]) -> Result<String> {
        let chars: Vec<char> = self.alphabet.chars().collect();
        ids.iter()
            .map(|&id| {
                id.checked_sub(self.text_range.start)
                    .and_then(|i| chars.get(i as usize).copied())
                    .filter(|_| self.text_range.contains(&id))
                    .ok_or(Error::InvalidToken {
                        id,
                        size: self.total_size,
                    })
            })
            .collect()
    }

    /// Errors unless `other` describes the identical layout.
    pub fn check_same(&self, other: &TokenSpace) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::ManifestMismatch(format!(
                "token spaces differ (total size {} vs {})",
                self.total_size, other.total_size
            )))
        }
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_manifest(path: impl AsRef<Path>) -> Result<TokenSpace> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let space: TokenSpace = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        space.validate()?;
        Ok(space)
    }

    /// Checks the layout invariants of a deserialized manifest.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ManifestMismatch(m.to_string()));
        if self.text_range.start != 0
            || self.text_range.end < self.text_range.start
            || self.speech_range.start != self.text_range.end
            || self.speech_range.end < self.speech_range.start
            || self.image_range.start != self.speech_range.end
            || self.image_range.end < self.image_range.start
        {
            return bad("modality ranges are not contiguous text, speech, image");
        }
        let mut ids: Vec<TokenId> = self.control_tokens.values().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.control_tokens.len() {
            return bad("control token ids are not distinct");
        }
        if ids.iter().any(|&id| id < self.image_range.end || id >= self.total_size) {
            return bad("control token ids overlap a modality range or exceed total size");
        }
        if self.alphabet.chars().count() > self.text_range.len() {
            return bad("alphabet larger than the text range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRun {
    pub modality: Modality,
    pub ids: Vec<TokenId>,
}

impl TokenRun {
    pub fn new(modality: Modality, ids: Vec<TokenId>) -> Self {
        TokenRun { modality, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Every id must lie in the range of the run's modality.
    pub fn validate(&self, space: &TokenSpace) -> Result<()> {
        for &id in &self.ids {
            let m = space.classify(id)?;
            if m != self.modality {
                return Err(Error::invalid(format!(
                    "token {id} is {m} but the run is {}",
                    self.modality
                )));
            }
        }
        Ok(())
    }
}

pub fn write_token_runs(path: impl AsRef<Path>, runs: &[TokenRun]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for run in runs {
        serde_json::to_writer(&mut out, run)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_token_runs(path: impl AsRef<Path>) -> Result<Vec<TokenRun>> {
    read_jsonl(path)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
