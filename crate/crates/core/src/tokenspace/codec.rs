use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, TokenId, TokenRun, TokenSpace};
use crate::error::{Error, Result};

/// Deterministic text-to-speech-token codec used in place of a neural codec.
///
/// Each text token expands to `k` speech tokens through a fixed table of
/// distinct k-tuples, so with zero noise the code is injective on sequences.
/// Noise independently replaces each emitted token with a uniform speech token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeechCodec {
    pub k: usize,
    pub noise: f64,
    pub seed: u64,
    pub text_start: TokenId,
    pub speech_range: std::ops::Range<TokenId>,
    /// `alphabet_map[t - text_start]` is the speech tuple for text token `t`.
    pub alphabet_map: Vec<Vec<TokenId>>,
}

impl SyntheticSpeechCodec {
    /// Draws a random table of distinct tuples for every text id in the space.
    pub fn new(space: &TokenSpace, k: usize, noise: f64, seed: u64) -> Result<Self> {
        check_params(k, noise)?;
        let n_text = space.text_range.len();
        let n_speech = space.speech_range.len();
        if n_speech == 0 {
            return Err(Error::invalid("codec needs a nonempty speech range"));
        }
        let capacity = (n_speech as f64).powi(k as i32);
        if capacity < n_text as f64 {
            return Err(Error::invalid(format!(
                "{n_speech} speech tokens cannot give {n_text} distinct {k}-tuples"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut alphabet_map = Vec::with_capacity(n_text);
        while alphabet_map.len() < n_text {
            let tuple: Vec<TokenId> = (0..k)
                .map(|_| space.speech_range.start + rng.random_range(0..n_speech as TokenId))
                .collect();
            if seen.insert(tuple.clone()) {
                alphabet_map.push(tuple);
            }
        }
        Ok(SyntheticSpeechCodec {
            k,
            noise,
            seed,
            text_start: space.text_range.start,
            speech_range: space.speech_range.clone(),
            alphabet_map,
        })
    }

    /// Builds a codec from an explicit table, checking ranges and injectivity.
    pub fn from_map(
        space: &TokenSpace,
        k: usize,
        noise: f64,
        seed: u64,
        alphabet_map: Vec<Vec<TokenId>>,
    ) -> Result<Self> {
        check_params(k, noise)?;
        if alphabet_map.len() > space.text_range.len() {
            return Err(Error::invalid("codec table larger than the text range"));
        }
        let mut seen = HashSet::new();
        for tuple in &alphabet_map {
            if tuple.len() != k || tuple.iter().any(|id| !space.speech_range.contains(id)) {
                return Err(Error::invalid(format!(
                    "codec tuple {tuple:?} is not {k} speech tokens"
                )));
            }
            if !seen.insert(tuple.clone()) {
                return Err(Error::invalid(format!("duplicate codec tuple {tuple:?}")));
            }
        }
        Ok(SyntheticSpeechCodec {
            k,
            noise,
            seed,
            text_start: space.text_range.start,
            speech_range: space.speech_range.clone(),
            alphabet_map,
        })
    }

    /// Encodes with a generator seeded from the codec seed; repeated calls agree.
    pub fn encode(&self, text: &TokenRun) -> Result<TokenRun> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.encode_with_rng(text, &mut rng)
    }

    pub fn encode_with_rng<R: Rng>(&self, text: &TokenRun, rng: &mut R) -> Result<TokenRun> {
        if text.modality != Modality::Text {
            return Err(Error::invalid(format!(
                "speech codec expects a text run, got {}",
                text.modality
            )));
        }
        let n_speech = self.speech_range.len() as TokenId;
        let mut ids = Vec::with_capacity(text.len() * self.k);
        for &t in &text.ids {
            let tuple = t
                .checked_sub(self.text_start)
                .and_then(|i| self.alphabet_map.get(i as usize))
                .ok_or_else(|| Error::invalid(format!("codec has no entry for text token {t}")))?;
            for &s in tuple {
                if self.noise > 0.0 && rng.random_bool(self.noise) {
                    ids.push(self.speech_range.start + rng.random_range(0..n_speech));
                } else {
                    ids.push(s);
                }
            }
        }
        Ok(TokenRun::new(Modality::Speech, ids))
    }

    /// Inverts the codec block by block.
    ///
    /// Exact tuples map back directly; corrupted or partial blocks take the
    /// table entry with the smallest Hamming distance, lowest text id on ties.
    pub fn decode(&self, speech: &[TokenId]) -> Vec<TokenId> {
        let exact: HashMap<&[TokenId], usize> = self
            .alphabet_map
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_slice(), i))
            .collect();
        speech
            .chunks(self.k)
            .map(|block| {
                let idx = exact.get(block).copied().unwrap_or_else(|| {
                    let mut best = (usize::MAX, 0);
                    for (i, tuple) in self.alphabet_map.iter().enumerate() {
                        let mismatches = block.iter().zip(tuple).filter(|(a, b)| a != b).count()
                            + (self.k - block.len());
                        if mismatches < best.0 {
                            best = (mismatches, i);
                        }
                    }
                    best.1
                });
                self.text_start + idx as TokenId
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string(self)?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn check_params(k: usize, noise: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("codec expansion factor must be at least 1"));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid(format!("codec noise {noise} is not a probability")));
    }
    Ok(())
}
