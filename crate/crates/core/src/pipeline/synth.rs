//! Synthetic corpora for the toy experiments.
//!
//! Sentences are drawn from a random lexicon whose letter frequencies depend
//! on a domain, speech comes from a [`SyntheticSpeechCodec`], and frame-level
//! features for codebook experiments come from one of two Gaussian families.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::codebook::FeatureMatrix;
use crate::error::{Error, Result};
use crate::seqfmt::TaskExample;
use crate::tokenspace::{Modality, SyntheticSpeechCodec, Task, TokenId, TokenRun, TokenSpace};

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Favors the first half of the alphabet.
    A,
    /// Favors the second half of the alphabet.
    B,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Domain::A),
            "b" => Ok(Domain::B),
            other => Err(Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

impl Domain {
    fn letter_weights(self) -> Vec<f64> {
        (0..26)
            .map(|i| match (self, i < 13) {
                (Domain::A, true) | (Domain::B, false) => 1.0,
                _ => 0.08,
            })
            .collect()
    }

    fn salt(self) -> u64 {
        match self {
            Domain::A => 0x41,
            Domain::B => 0x42,
        }
    }
}

/// A fixed list of distinct words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<String>,
}

impl Lexicon {
    /// Random distinct words of 2 to 5 letters with domain-skewed letters.
    pub fn generate(size: usize, domain: Domain, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("lexicon size must be positive"));
        }
        let letters: Vec<char> = LETTERS.chars().collect();
        let pick = WeightedIndex::new(domain.letter_weights()).expect("positive weights");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (domain.salt() << 32));
        let mut words = Vec::with_capacity(size);
        let mut seen = std::collections::HashSet::new();
        let mut attempts = 0usize;
        while words.len() < size {
            attempts += 1;
            if attempts > size * 1000 {
                return Err(Error::invalid(format!("cannot draw {size} distinct words")));
            }
            let len = rng.random_range(2..=5);
            let w: String = (0..len).map(|_| letters[pick.sample(&mut rng)]).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Ok(Lexicon { words })
    }

    pub fn sentence<R: Rng>(&self, rng: &mut R, min_words: usize, max_words: usize) -> Vec<usize> {
        let n = rng.random_range(min_words..=max_words);
        (0..n).map(|_| rng.random_range(0..self.words.len())).collect()
    }

    pub fn render(&self, word_ids: &[usize]) -> String {
        word_ids
            .iter()
            .map(|&i| self.words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Which side of an unsupervised example carries content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnsupervisedKind {
    Text,
    Speech,
}

/// Parameters of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub n: usize,
    pub domain: Domain,
    /// Seed of the sentence and noise draws.
    pub seed: u64,
    /// Seed of the lexicon; keep it fixed to share vocabulary across datasets.
    pub lexicon_seed: u64,
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// For the LM task: which modality the unsupervised sequences hold.
    pub lm_modality: UnsupervisedKind,
}

impl SynthSpec {
    pub fn new(task: Task, n: usize, seed: u64) -> Self {
        SynthSpec {
            task,
            n,
            domain: Domain::A,
            seed,
            lexicon_seed: 0,
            lexicon_size: 48,
            min_words: 1,
            max_words: 3,
            lm_modality: UnsupervisedKind::Text,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::invalid(format!(
                "bad synthetic data shape: n={} words {}..={}",
                self.n, self.min_words, self.max_words
            )));
        }
        Ok(())
    }
}

/// Word-for-word translation between the domain lexicon and a second one.
fn target_lexicon(spec: &SynthSpec) -> Result<Lexicon> {
    let other = match spec.domain {
        Domain::A => Domain::B,
        Domain::B => Domain::A,
    };
    Lexicon::generate(spec.lexicon_size, other, spec.lexicon_seed.wrapping_add(0x5EED))
}

/// Generates `spec.n` examples; `codec` is required for speech tasks.
pub fn synth_examples(
    spec: &SynthSpec,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
) -> Result<Vec<TaskExample>> {
    spec.validate()?;
    let lexicon = Lexicon::generate(spec.lexicon_size, spec.domain, spec.lexicon_seed)?;
    let needs_speech = matches!(spec.task, Task::Asr | Task::T2s | Task::S2tt)
        || (spec.task == Task::Lm && spec.lm_modality == UnsupervisedKind::Speech);
    let codec = match (needs_speech, codec) {
        (true, None) => return Err(Error::invalid("speech task needs a codec")),
        (_, c) => c,
    };
    let translation = (spec.task == Task::S2tt).then(|| target_lexicon(spec)).transpose()?;
    let image_size = space.image_range.len() as TokenId;
    if spec.task == Task::I2t && image_size == 0 {
        return Err(Error::invalid("image captioning needs a nonempty image range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let words = lexicon.sentence(&mut rng, spec.min_words, spec.max_words);
        let text = space.encode_text(&lexicon.render(&words))?;
        let example = match spec.task {
            Task::Asr => {
                let speech = codec.expect("checked").encode_with_rng(&text, &mut rng)?;
                TaskExample::supervised(Task::Asr, speech, text)
            }
            Task::T2s => {
                let speech = codec.expect("checked").encode_with_rng(&text, &mut rng)?;
                TaskExample::supervised(Task::T2s, text, speech)
            }
            Task::S2tt => {
                let speech = codec.expect("checked").encode_with_rng(&text, &mut rng)?;
                let target = translation.as_ref().expect("built for s2tt").render(&words);
                TaskExample::supervised(Task::S2tt, speech, space.encode_text(&target)?)
            }
            Task::I2t => {
                // one image token per word, occasionally replaced by a random one
                let ids = words
                    .iter()
                    .map(|&w| {
                        let base = (w as TokenId) % image_size;
                        let id = if rng.random_bool(0.05) {
                            rng.random_range(0..image_size)
                        } else {
                            base
                        };
                        space.image_range.start + id
                    })
                    .collect();
                TaskExample::supervised(Task::I2t, TokenRun::new(Modality::Image, ids), text)
            }
            Task::Lm => match spec.lm_modality {
                UnsupervisedKind::Text => TaskExample::unsupervised(text),
                UnsupervisedKind::Speech => {
                    TaskExample::unsupervised(codec.expect("checked").encode_with_rng(&text, &mut rng)?)
                }
            },
        };
        out.push(example);
    }
    Ok(out)
}

/// 80/10/10 train/dev/test split in generation order.
pub fn split_80_10_10<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = items.len();
    let train = n * 8 / 10;
    let dev = n / 10;
    (
        items[..train].to_vec(),
        items[train..train + dev].to_vec(),
        items[train + dev..].to_vec(),
    )
}

/// Frame features for codebook experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    /// Frames sit close to a per-character prototype.
    LabelClustered,
    /// Per-utterance and per-frame nuisance variation dominates the label signal.
    LabelAgnostic,
}

impl std::str::FromStr for FeatureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_clustered" | "label-clustered" | "clustered" => Ok(FeatureFamily::LabelClustered),
            "label_agnostic" | "label-agnostic" | "agnostic" => Ok(FeatureFamily::LabelAgnostic),
            other => Err(Error::invalid(format!("unknown feature family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSynth {
    pub family: FeatureFamily,
    pub dim: usize,
    pub frames_per_char: usize,
    /// `prototypes[t]` is the mean frame of text token `t` (offset from the range start).
    pub prototypes: Vec<Vec<f32>>,
    pub text_start: TokenId,
}

impl FeatureSynth {
    pub fn new(space: &TokenSpace, family: FeatureFamily, dim: usize, frames_per_char: usize, seed: u64) -> Result<Self> {
        if dim == 0 || frames_per_char == 0 {
            return Err(Error::invalid("feature dim and frames per char must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let prototypes = (0..space.text_range.len())
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        Ok(FeatureSynth {
            family,
            dim,
            frames_per_char,
            prototypes,
            text_start: space.text_range.start,
        })
    }

    /// Frames for one utterance, `frames_per_char` rows per text token.
    pub fn features<R: Rng>(&self, text: &TokenRun, rng: &mut R) -> Result<FeatureMatrix> {
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let (label_scale, frame_noise, speaker_scale) = match self.family {
            FeatureFamily::LabelClustered => (1.0, 0.15, 0.0),
            FeatureFamily::LabelAgnostic => (0.15, 1.0, 1.5),
        };
        let speaker: Vec<f32> = (0..self.dim)
            .map(|_| speaker_scale * normal.sample(rng))
            .collect();
        let mut values = Vec::with_capacity(text.len() * self.frames_per_char * self.dim);
        for &t in &text.ids {
            let proto = t
                .checked_sub(self.text_start)
                .and_then(|i| self.prototypes.get(i as usize))
                .ok_or_else(|| Error::invalid(format!("no prototype for text token {t}")))?;
            for _ in 0..self.frames_per_char {
                for (p, s) in proto.iter().zip(&speaker) {
                    values.push(label_scale * p + s + frame_noise * normal.sample(rng));
                }
            }
        }
        FeatureMatrix::new(text.len() * self.frames_per_char, self.dim, values)
    }
}
