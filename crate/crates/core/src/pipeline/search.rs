//! Random search over the speech and text loss weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::DevMetric;
use super::train::{train_on, MixSource, TrainConfig};
use crate::error::{Error, Result};
use crate::net::{ModelParams, Real};
use crate::objective::LossWeights;
use crate::par::par_map;
use crate::seqfmt::TaskExample;
use crate::tokenspace::{SyntheticSpeechCodec, TokenSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpec {
    pub trials: usize,
    pub lambda_speech: (f64, f64),
    pub lambda_text: (f64, f64),
    pub seed: u64,
    /// Also train the fixed comparison rows (1, 1) and (0, 1).
    pub baselines: bool,
    /// Trials trained concurrently.
    pub jobs: usize,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            trials: 25,
            lambda_speech: (0.0, 1.0),
            lambda_text: (0.0, 1.0),
            seed: 0,
            baselines: true,
            jobs: 1,
        }
    }
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("search needs at least one trial"));
        }
        for (lo, hi) in [self.lambda_speech, self.lambda_text] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(Error::invalid(format!("bad lambda range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// The `(λ_S, λ_T)` pairs the trials will use.
    pub fn draws(&self) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut uniform = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        (0..self.trials)
            .map(|_| (uniform(self.lambda_speech), uniform(self.lambda_text)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub label: String,
    pub lambda_speech: f64,
    pub lambda_text: f64,
    pub lambda_image: f64,
    pub dev_wer: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub trials: Vec<TrialRow>,
    pub baselines: Vec<TrialRow>,
    pub best: LossWeights,
    pub best_dev_wer: f64,
}

impl SearchReport {
    /// Trials and baselines together, by ascending dev WER; failures last.
    pub fn sorted_rows(&self) -> Vec<TrialRow> {
        let mut rows: Vec<TrialRow> = self.trials.iter().chain(&self.baselines).cloned().collect();
        rows.sort_by(|a, b| {
            let key = |r: &TrialRow| r.dev_wer.unwrap_or(f64::INFINITY);
            key(a).total_cmp(&key(b))
        });
        rows
    }

    pub fn baseline(&self, label: &str) -> Option<&TrialRow> {
        self.baselines.iter().find(|r| r.label == label)
    }
}

pub const BASELINE_EQUAL: &str = "equal (1, 1)";
pub const BASELINE_MASKED: &str = "masked (0, 1)";

#[allow(clippy::too_many_arguments)]
fn run_trial<F: Real>(
    label: String,
    weights: (f64, f64),
    base: &TrainConfig,
    init: &ModelParams<F>,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
    sources: &[MixSource],
    dev: &[TaskExample],
) -> TrialRow {
    let lambda_image = base.loss_weights.lambda_image;
    let mut row = TrialRow {
        label,
        lambda_speech: weights.0,
        lambda_text: weights.1,
        lambda_image,
        dev_wer: None,
        best_epoch: None,
        steps: 0,
        error: None,
    };
    let result = LossWeights::new(weights.0, weights.1, lambda_image).and_then(|w| {
        let mut config = base.clone();
        config.loss_weights = w;
        config.dev_metric = DevMetric::Wer;
        train_on(&config, init.clone(), space, codec, sources, Some(dev))
    });
    match result {
        Ok(out) => {
            row.dev_wer = out.best_dev;
            row.best_epoch = out.best_epoch;
            row.steps = out.steps;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Trains one model per λ draw from the same initial weights and data order
/// and picks the draw with the lowest dev WER (earliest trial on ties).
#[allow(clippy::too_many_arguments)]
pub fn lambda_search<F: Real>(
    spec: &SearchSpec,
    base: &TrainConfig,
    init: &ModelParams<F>,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
    sources: &[MixSource],
    dev: &[TaskExample],
) -> Result<SearchReport> {
    spec.validate()?;
    if dev.is_empty() {
        return Err(Error::invalid("search needs a nonempty dev set"));
    }
    let mut jobs: Vec<(String, (f64, f64), bool)> = spec
        .draws()
        .into_iter()
        .enumerate()
        .map(|(i, w)| (format!("trial {}", i + 1), w, false))
        .collect();
    if spec.baselines {
        jobs.push((BASELINE_EQUAL.to_string(), (1.0, 1.0), true));
        jobs.push((BASELINE_MASKED.to_string(), (0.0, 1.0), true));
    }
    let rows = par_map(&jobs, spec.jobs, |(label, w, _)| {
        run_trial(label.clone(), *w, base, init, space, codec, sources, dev)
    });
    let (baselines, trials): (Vec<_>, Vec<_>) = rows
        .into_iter()
        .zip(&jobs)
        .partition(|(_, (_, _, is_baseline))| *is_baseline);
    let trials: Vec<TrialRow> = trials.into_iter().map(|(r, _)| r).collect();
    let baselines: Vec<TrialRow> = baselines.into_iter().map(|(r, _)| r).collect();
    let best = trials
        .iter()
        .filter_map(|r| r.dev_wer.map(|w| (w, r)))
        .fold(None::<(f64, &TrialRow)>, |acc, (w, r)| match acc {
            Some((bw, _)) if bw <= w => acc,
            _ => Some((w, r)),
        })
        .ok_or_else(|| {
            let first = trials.iter().find_map(|r| r.error.clone()).unwrap_or_default();
            Error::invalid(format!("every search trial failed: {first}"))
        })?;
    Ok(SearchReport {
        best: LossWeights {
            lambda_speech: best.1.lambda_speech,
            lambda_text: best.1.lambda_text,
            lambda_image: best.1.lambda_image,
        },
        best_dev_wer: best.0,
        trials,
        baselines,
    })
}
