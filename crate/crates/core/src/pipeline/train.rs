//! Mixed-supervision training with per-epoch dev evaluation and early stopping.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, DevMetric, EvalOptions};
use crate::error::{Error, Result};
use crate::net::{backward, forward, ModelParams, Real};
use crate::objective::{loss_and_logit_grads, AdamW, AdamWConfig, LossWeights, Normalization};
use crate::par::par_map;
use crate::seqfmt::{pack, read_dataset, shift_targets, ShiftedSequence, Supervision, TaskExample};
use crate::tokenspace::{SyntheticSpeechCodec, TokenSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub path: PathBuf,
    pub supervision: Supervision,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Steps per epoch; defaults to one pass over the mixed datasets.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warm-up length in steps; 0 starts at the full rate.
    pub warmup_steps: usize,
    /// Decay the rate linearly to zero over the planned step budget.
    pub linear_decay: bool,
    pub weight_decay: f64,
    /// Consecutive non-improving dev evaluations before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub normalization: Normalization,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub mix: Vec<MixEntry>,
    pub dev_path: Option<PathBuf>,
    pub dev_metric: DevMetric,
    /// Evaluate on at most this many dev examples.
    pub dev_limit: Option<usize>,
    pub max_new_tokens: usize,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            max_steps: None,
            steps_per_epoch: None,
            batch_size: 4,
            lr: 5e-5,
            warmup_steps: 0,
            linear_decay: false,
            weight_decay: 1e-4,
            patience: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            normalization: Normalization::PerSequence,
            grad_clip: None,
            mix: Vec::new(),
            dev_path: None,
            dev_metric: DevMetric::Wer,
            dev_limit: None,
            max_new_tokens: 64,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("bad learning rate {}", self.lr)));
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        self.loss_weights.validate()?;
        self.optimizer().validate()?;
        if self.mix.is_empty() {
            Ok(())
        } else {
            check_weights(self.mix.iter().map(|m| m.weight))
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn lr_at(&self, step: usize, planned: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = if self.linear_decay {
            (1.0 - step as f64 / planned.max(1) as f64).max(0.0)
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

fn check_weights(weights: impl Iterator<Item = f64>) -> Result<()> {
    let mut total = 0.0;
    for w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::invalid(format!("sampling weight {w} must be finite and nonnegative")));
        }
        total += w;
    }
    if total > 0.0 {
        Ok(())
    } else {
        Err(Error::EmptyMix)
    }
}

/// One in-memory component of the training mix.
#[derive(Debug, Clone)]
pub struct MixSource {
    pub examples: Vec<TaskExample>,
    pub supervision: Supervision,
    pub weight: f64,
}

impl MixSource {
    pub fn new(examples: Vec<TaskExample>, supervision: Supervision, weight: f64) -> Self {
        MixSource {
            examples,
            supervision,
            weight,
        }
    }
}

/// Draws (source, example) pairs: sources by weight, examples by reshuffled passes.
pub struct MixSampler {
    pick: WeightedIndex<f64>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl MixSampler {
    pub fn new(sources: &[MixSource], seed: u64) -> Result<Self> {
        check_weights(sources.iter().map(|s| s.weight))?;
        for (i, s) in sources.iter().enumerate() {
            if s.weight > 0.0 && s.examples.is_empty() {
                return Err(Error::invalid(format!("mix source {i} has weight but no examples")));
            }
            if let Some(x) = s.examples.iter().find(|x| x.supervision != s.supervision) {
                return Err(Error::invalid(format!(
                    "mix source {i} is declared {:?} but holds a {:?} example",
                    s.supervision, x.supervision
                )));
            }
        }
        let pick = WeightedIndex::new(sources.iter().map(|s| s.weight)).map_err(|_| Error::EmptyMix)?;
        Ok(MixSampler {
            pick,
            orders: sources.iter().map(|s| (0..s.examples.len()).collect()).collect(),
            cursors: vec![usize::MAX; sources.len()],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_pair(&mut self) -> (usize, usize) {
        let s = self.pick.sample(&mut self.rng);
        if self.cursors[s] >= self.orders[s].len() {
            self.orders[s].shuffle(&mut self.rng);
            self.cursors[s] = 0;
        }
        let idx = self.orders[s][self.cursors[s]];
        self.cursors[s] += 1;
        (s, idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModalityLosses {
    pub speech: Option<f64>,
    pub text: Option<f64>,
    pub image: Option<f64>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_total: f64,
    /// Mean per-target negative log-likelihood of each modality in the batch.
    pub loss_per_modality: ModalityLosses,
    /// Set on the last step of each epoch.
    pub dev_metric: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    /// Best-dev parameters, or the final ones without a dev set.
    pub params: ModelParams<F>,
    pub log: Vec<LogRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<f64>,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Writes records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    crate::tokenspace::read_jsonl(path.as_ref())
}

/// Reads the mix and dev files named in the config, validating them against `space`.
pub fn load_data(config: &TrainConfig, space: &TokenSpace) -> Result<(Vec<MixSource>, Option<Vec<TaskExample>>)> {
    let sources = config
        .mix
        .iter()
        .map(|m| Ok(MixSource::new(read_dataset(&m.path, space)?, m.supervision, m.weight)))
        .collect::<Result<Vec<_>>>()?;
    let dev = config
        .dev_path
        .as_ref()
        .map(|p| read_dataset(p, space))
        .transpose()?;
    Ok((sources, dev))
}

/// Loads the config's data files and trains.
pub fn train<F: Real>(
    config: &TrainConfig,
    params: ModelParams<F>,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if config.mix.is_empty() {
        return Err(Error::EmptyMix);
    }
    let (sources, dev) = load_data(config, space)?;
    train_on(config, params, space, codec, &sources, dev.as_deref())
}

fn dev_score<F: Real>(
    config: &TrainConfig,
    params: &ModelParams<F>,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
    dev: &[TaskExample],
) -> Result<f64> {
    let limit = config.dev_limit.unwrap_or(dev.len()).min(dev.len());
    let mut options = EvalOptions::new(config.dev_metric);
    options.max_new = config.max_new_tokens;
    options.loss_weights = config.loss_weights;
    options.jobs = config.jobs;
    Ok(evaluate(params, space, codec, &dev[..limit], &options)?.value)
}

struct StepResult<F> {
    grads: ModelParams<F>,
    sums: [f64; 3],
    counts: [usize; 3],
    total: f64,
}

fn clip_grads<F: Real>(grads: &mut ModelParams<F>, max_norm: f64) {
    let sq: f64 = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(F::lift(max_norm / norm));
    }
}

/// Trains on in-memory data.
pub fn train_on<F: Real>(
    config: &TrainConfig,
    mut params: ModelParams<F>,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
    sources: &[MixSource],
    dev: Option<&[TaskExample]>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if params.config.vocab_size != space.vocab_size() {
        return Err(Error::ManifestMismatch(format!(
            "model vocabulary {} differs from token space {}",
            params.config.vocab_size,
            space.vocab_size()
        )));
    }
    if dev.is_some_and(|d| d.is_empty()) {
        return Err(Error::invalid("dev set is empty"));
    }
    let mut sampler = MixSampler::new(sources, config.seed)?;
    let shifted: Vec<Vec<ShiftedSequence>> = sources
        .iter()
        .map(|s| {
            s.examples
                .iter()
                .map(|x| {
                    x.validate(space)?;
                    shift_targets(&pack(x, space)?, space)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let max_len = shifted.iter().flatten().map(|s| s.len()).max().unwrap_or(0);
    if max_len > params.config.max_seq_len {
        return Err(Error::invalid(format!(
            "training sequence of {max_len} tokens exceeds max_seq_len {}",
            params.config.max_seq_len
        )));
    }
    let pool: usize = sources
        .iter()
        .filter(|s| s.weight > 0.0)
        .map(|s| s.examples.len())
        .sum();
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| pool.div_ceil(config.batch_size))
        .max(1);
    let planned = config
        .max_steps
        .unwrap_or(usize::MAX)
        .min(steps_per_epoch * config.epochs);
    let vocab = space.vocab_size();
    let mut opt = AdamW::new(config.optimizer())?;
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<F>)> = None;
    let mut bad = 0usize;
    let mut stopped_early = false;
    let mut step = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let mut cap_hit = false;
        for _ in 0..steps_per_epoch {
            if config.max_steps.is_some_and(|m| step >= m) {
                cap_hit = true;
                break;
            }
            let picks: Vec<(usize, usize)> = (0..config.batch_size).map(|_| sampler.next_pair()).collect();
            let batch_counts = (config.normalization == Normalization::PerBatch).then(|| {
                let mut c = [0usize; 3];
                for &(s, i) in &picks {
                    let m = shifted[s][i].modality_counts();
                    (0..3).for_each(|k| c[k] += m[k]);
                }
                c
            });
            let scale = match config.normalization {
                Normalization::PerSequence => 1.0 / config.batch_size as f64,
                Normalization::PerBatch => 1.0,
            };
            let results = par_map(&picks, config.jobs, |&(s, i)| -> Result<StepResult<F>> {
                let seq = &shifted[s][i];
                let (logits, trace) = forward(&params, &seq.inputs)?;
                let (loss, dlogits) =
                    loss_and_logit_grads(&logits, vocab, seq, &config.loss_weights, batch_counts, scale)
                        .map_err(|e| match e {
                            Error::Numeric(m) => Error::Numeric(format!(
                                "step {step}, source {s}, example {i}: {m}"
                            )),
                            other => other,
                        })?;
                let grads = backward(&params, &trace, &dlogits)?;
                Ok(StepResult {
                    grads,
                    sums: [loss.speech.sum, loss.text.sum, loss.image.sum],
                    counts: [loss.speech.count, loss.text.count, loss.image.count],
                    total: loss.total,
                })
            });
            let mut grads = params.zeros_like();
            let (mut sums, mut counts, mut total) = ([0.0; 3], [0usize; 3], 0.0);
            for r in results {
                let r = r?;
                grads.add_assign(&r.grads);
                for k in 0..3 {
                    sums[k] += r.sums[k];
                    counts[k] += r.counts[k];
                }
                total += r.total;
            }
            if !total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            if let Some(c) = config.grad_clip {
                clip_grads(&mut grads, c);
            }
            let lr = config.lr_at(step, planned);
            opt.config.lr = lr;
            opt.step(&mut params, &grads)
                .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
            let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
            log.push(LogRecord {
                step,
                loss_total: total,
                loss_per_modality: ModalityLosses {
                    speech: mean(0),
                    text: mean(1),
                    image: mean(2),
                },
                dev_metric: None,
                lr,
            });
            step += 1;
        }
        let dev_metric = match dev {
            Some(d) => Some(dev_score(config, &params, space, codec, d)?),
            None => None,
        };
        if let (Some(last), Some(m)) = (log.last_mut(), dev_metric) {
            last.dev_metric = Some(m);
        }
        epochs.push(EpochRecord {
            epoch,
            step,
            dev_metric,
        });
        if let Some(m) = dev_metric {
            let improved = best
                .as_ref()
                .is_none_or(|(b, _, _)| config.dev_metric.improves(m, *b));
            if improved {
                best = Some((m, epoch, params.clone()));
                bad = 0;
            } else {
                bad += 1;
                if config.patience > 0 && bad >= config.patience {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
        if cap_hit || config.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    let (params, best_epoch, best_dev) = match best {
        Some((m, e, p)) => (p, Some(e), Some(m)),
        None => (params, None, None),
    };
    Ok(TrainOutcome {
        params,
        log,
        epochs,
        best_epoch,
        best_dev,
        stopped_early,
        steps: step,
    })
}
