//! Corpus-level evaluation of decoded outputs.

use serde::{Deserialize, Serialize};

use super::generate::{generate, GenerateOptions};
use super::metrics::{bleu_stats, edit_distance, words, BleuOptions, BleuStats};
use crate::error::{Error, Result};
use crate::net::{forward, ModelParams, Real};
use crate::objective::{trimodal_loss, LossWeights};
use crate::par::par_map;
use crate::seqfmt::{pack, shift_targets, Supervision, TaskExample};
use crate::tokenspace::{Modality, SyntheticSpeechCodec, TokenRun, TokenSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DevMetric {
    #[default]
    #[serde(rename = "WER", alias = "wer")]
    Wer,
    #[serde(rename = "CER", alias = "cer")]
    Cer,
    #[serde(rename = "BLEU4", alias = "bleu4", alias = "bleu")]
    Bleu4,
    #[serde(rename = "Loss", alias = "loss")]
    Loss,
}

impl DevMetric {
    pub fn name(self) -> &'static str {
        match self {
            DevMetric::Wer => "WER",
            DevMetric::Cer => "CER",
            DevMetric::Bleu4 => "BLEU4",
            DevMetric::Loss => "Loss",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == DevMetric::Bleu4
    }

    /// Strict improvement of `new` over `old`.
    pub fn improves(self, new: f64, old: f64) -> bool {
        if self.higher_is_better() {
            new > old
        } else {
            new < old
        }
    }
}

impl std::str::FromStr for DevMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wer" => Ok(DevMetric::Wer),
            "cer" => Ok(DevMetric::Cer),
            "bleu4" | "bleu" => Ok(DevMetric::Bleu4),
            "loss" => Ok(DevMetric::Loss),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for DevMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub reference: String,
    pub hypothesis: String,
    /// Per-example metric value (sentence BLEU, example loss, or error rate).
    pub score: f64,
    /// Edit operations for WER/CER.
    pub errors: usize,
    /// Reference length in metric units (words or characters).
    pub ref_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<BleuStats>,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: DevMetric,
    pub value: f64,
    pub examples: usize,
    pub failed: usize,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    /// Recomputes the aggregate from the records; equals `value`.
    pub fn aggregate(metric: DevMetric, records: &[EvalRecord], bleu: BleuOptions) -> f64 {
        let ok = records.iter().filter(|r| r.failure.is_none());
        match metric {
            DevMetric::Wer | DevMetric::Cer => {
                let (e, n) = ok.fold((0usize, 0usize), |(e, n), r| (e + r.errors, n + r.ref_len));
                e as f64 / n.max(1) as f64
            }
            DevMetric::Bleu4 => {
                let mut total = BleuStats::default();
                ok.filter_map(|r| r.bleu.as_ref()).for_each(|s| total.add(s));
                total.score(bleu)
            }
            DevMetric::Loss => {
                let scores: Vec<f64> = ok.map(|r| r.score).collect();
                scores.iter().sum::<f64>() / scores.len().max(1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub metric: DevMetric,
    pub max_new: usize,
    pub constrained: bool,
    pub bleu: BleuOptions,
    pub loss_weights: LossWeights,
    pub jobs: usize,
}

impl EvalOptions {
    pub fn new(metric: DevMetric) -> Self {
        EvalOptions {
            metric,
            max_new: 64,
            constrained: true,
            bleu: BleuOptions::default(),
            loss_weights: LossWeights::default(),
            jobs: 1,
        }
    }
}

/// Renders a run as text; speech goes through the codec inverse.
pub fn detokenize(run: &TokenRun, space: &TokenSpace, codec: Option<&SyntheticSpeechCodec>) -> Result<String> {
    match run.modality {
        Modality::Text => space.decode_text(&run.ids),
        Modality::Speech => {
            let codec = codec.ok_or_else(|| Error::invalid("speech output needs a codec to score"))?;
            space.decode_text(&codec.decode(&run.ids))
        }
        other => Err(Error::invalid(format!("cannot score {other} output as text"))),
    }
}

/// Reference transcript: the text output, or the text input when the output is speech.
fn reference_text(
    example: &TaskExample,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
) -> Result<String> {
    if example.supervision != Supervision::Supervised {
        return Err(Error::invalid("evaluation needs supervised examples"));
    }
    match (example.output.modality, example.input.modality) {
        (Modality::Text, _) => space.decode_text(&example.output.ids),
        (_, Modality::Text) => space.decode_text(&example.input.ids),
        _ => detokenize(&example.output, space, codec),
    }
}

fn score_example<F: Real>(
    params: &ModelParams<F>,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
    index: usize,
    example: &TaskExample,
    options: &EvalOptions,
) -> Result<EvalRecord> {
    if options.metric == DevMetric::Loss {
        let shifted = shift_targets(&pack(example, space)?, space)?;
        let (logits, _) = forward(params, &shifted.inputs)?;
        let loss = trimodal_loss(&logits, space.vocab_size(), &shifted, &options.loss_weights)?;
        return Ok(EvalRecord {
            index,
            reference: String::new(),
            hypothesis: String::new(),
            score: loss.total,
            errors: 0,
            ref_len: 0,
            bleu: None,
            truncated: false,
            failure: None,
        });
    }
    let reference = reference_text(example, space, codec)?;
    let gen = generate(
        params,
        space,
        example.task,
        &example.input,
        GenerateOptions {
            max_new: options.max_new,
            constrained: options.constrained,
        },
    );
    let (hypothesis, truncated, failure) = match gen {
        Ok(g) => (detokenize(&g.output, space, codec)?, g.truncated, None),
        Err(e) => (String::new(), false, Some(e.to_string())),
    };
    let mut record = EvalRecord {
        index,
        score: 0.0,
        errors: 0,
        ref_len: 0,
        bleu: None,
        truncated,
        failure,
        reference,
        hypothesis,
    };
    let (r, h) = (&record.reference, &record.hypothesis);
    match options.metric {
        DevMetric::Wer => {
            let (rw, hw) = (words(r), words(h));
            record.errors = edit_distance(&rw, &hw);
            record.ref_len = rw.len();
        }
        DevMetric::Cer => {
            let (rc, hc): (Vec<char>, Vec<char>) = (r.chars().collect(), h.chars().collect());
            record.errors = edit_distance(&rc, &hc);
            record.ref_len = rc.len();
        }
        DevMetric::Bleu4 => {
            let stats = bleu_stats(&[words(r)], &words(h));
            record.score = stats.score(options.bleu);
            record.bleu = Some(stats);
        }
        DevMetric::Loss => unreachable!("handled above"),
    }
    if matches!(options.metric, DevMetric::Wer | DevMetric::Cer) {
        record.score = record.errors as f64 / record.ref_len.max(1) as f64;
    }
    Ok(record)
}

/// Decodes every example, scores it, and aggregates at corpus level.
///
/// Decoding failures are recorded per example and left out of the aggregate.
pub fn evaluate<F: Real>(
    params: &ModelParams<F>,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
    data: &[TaskExample],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if options.metric != DevMetric::Loss
        && data.iter().any(|x| x.supervision != Supervision::Supervised)
    {
        return Err(Error::invalid("evaluation needs supervised examples"));
    }
    let indexed: Vec<(usize, &TaskExample)> = data.iter().enumerate().collect();
    let records = par_map(&indexed, options.jobs, |(i, x)| {
        score_example(params, space, codec, *i, x, options)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let failed = records.iter().filter(|r| r.failure.is_some()).count();
    Ok(EvalReport {
        metric: options.metric,
        value: EvalReport::aggregate(options.metric, &records, options.bleu),
        examples: records.len(),
        failed,
        records,
    })
}
