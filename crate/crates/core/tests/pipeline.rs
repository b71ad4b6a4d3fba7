use dmlm_core::net::{init_random, ModelConfig, ModelParams};
use dmlm_core::pipeline::synth::{split_80_10_10, synth_examples, SynthSpec};
use dmlm_core::pipeline::{
    evaluate, generate, lambda_search, train_on, BleuOptions, DevMetric, EvalOptions, EvalRecord,
    EvalReport, GenerateOptions, MixSampler, MixSource, SearchSpec, TrainConfig, BASELINE_EQUAL,
    BASELINE_MASKED,
};
use dmlm_core::seqfmt::{Supervision, TaskExample};
use dmlm_core::tokenspace::{build_token_space, SyntheticSpeechCodec, TokenRun};
use dmlm_core::{Error, Modality, Task, TokenSpace};

fn space() -> TokenSpace {
    build_token_space(30, 16, 0).unwrap()
}

fn model(space: &TokenSpace, seed: u64) -> ModelParams<f32> {
    let config = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 48,
        vocab_size: space.vocab_size(),
        tie_embeddings: true,
    };
    init_random(&config, seed).unwrap()
}

fn asr(space: &TokenSpace, n: usize, seed: u64) -> (SyntheticSpeechCodec, Vec<TaskExample>) {
    let codec = SyntheticSpeechCodec::new(space, 2, 0.0, seed).unwrap();
    let spec = SynthSpec {
        max_words: 1,
        ..SynthSpec::new(Task::Asr, n, seed)
    };
    let xs = synth_examples(&spec, space, Some(&codec)).unwrap();
    (codec, xs)
}

fn text_examples(space: &TokenSpace, n: usize) -> Vec<TaskExample> {
    (0..n)
        .map(|i| {
            let word: String = ['w', char::from(b'a' + (i % 26) as u8)].iter().collect();
            TaskExample::unsupervised(space.encode_text(&word).unwrap())
        })
        .collect()
}

#[test]
fn sampler_follows_mix_weights() {
    let space = space();
    let sources = [
        MixSource::new(text_examples(&space, 7), Supervision::Unsupervised, 3.0),
        MixSource::new(text_examples(&space, 5), Supervision::Unsupervised, 1.0),
    ];
    let mut sampler = MixSampler::new(&sources, 42).unwrap();
    let n = 100_000;
    let mut first = 0;
    let mut seen = [vec![0usize; 7], vec![0usize; 5]];
    for _ in 0..n {
        let (s, i) = sampler.next_pair();
        seen[s][i] += 1;
        first += usize::from(s == 0);
    }
    let frac = first as f64 / n as f64;
    assert!((frac - 0.75).abs() <= 0.01, "fraction {frac}");
    // passes over a source are reshuffled permutations, so counts stay balanced
    for counts in &seen {
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }
}

#[test]
fn sampler_rejects_empty_mixes() {
    let space = space();
    let zero = [MixSource::new(text_examples(&space, 3), Supervision::Unsupervised, 0.0)];
    assert!(matches!(MixSampler::new(&zero, 0), Err(Error::EmptyMix)));
    let empty = [MixSource::new(Vec::new(), Supervision::Unsupervised, 1.0)];
    assert!(MixSampler::new(&empty, 0).is_err());
}

#[test]
fn corpus_error_rate_is_not_the_mean_of_sentence_rates() {
    let record = |errors: usize, ref_len: usize| EvalRecord {
        index: 0,
        reference: String::new(),
        hypothesis: String::new(),
        score: errors as f64 / ref_len as f64,
        errors,
        ref_len,
        bleu: None,
        truncated: false,
        failure: None,
    };
    let records = [record(1, 1), record(0, 9)];
    let corpus = EvalReport::aggregate(DevMetric::Wer, &records, BleuOptions::default());
    assert_eq!(corpus, 0.1);
    let mean = records.iter().map(|r| r.score).sum::<f64>() / 2.0;
    assert_eq!(mean, 0.5);
}

#[test]
fn generation_limits_and_task_checks() {
    let space = space();
    let params = model(&space, 1);
    let prompt = space.encode_text("ab").unwrap();
    let none = generate(&params, &space, Task::T2s, &prompt, GenerateOptions::new(0)).unwrap();
    assert!(none.output.ids.is_empty());
    assert!(none.truncated);

    let some = generate(&params, &space, Task::T2s, &prompt, GenerateOptions::new(5)).unwrap();
    assert_eq!(some.output.modality, Modality::Speech);
    assert!(some.output.ids.iter().all(|id| space.speech_range.contains(id)));
    assert!(some.output.len() <= 5);

    assert!(generate(&params, &space, Task::Asr, &prompt, GenerateOptions::new(5)).is_err());
    assert!(generate(&params, &space, Task::Lm, &prompt, GenerateOptions::new(5)).is_err());
    let long = TokenRun::new(Modality::Text, vec![space.text_range.start; 60]);
    assert!(generate(&params, &space, Task::T2s, &long, GenerateOptions::new(5)).is_err());
}

#[test]
fn training_learns_a_copy_task() {
    // noise-free single-word ASR with two speech tokens per letter
    let space = space();
    let (codec, xs) = asr(&space, 400, 3);
    let (train, dev, _) = split_80_10_10(&xs);
    let config = TrainConfig {
        epochs: 12,
        batch_size: 8,
        lr: 1e-2,
        warmup_steps: 20,
        linear_decay: true,
        grad_clip: Some(1.0),
        patience: 0,
        dev_metric: DevMetric::Cer,
        max_new_tokens: 12,
        ..TrainConfig::default()
    };
    let outcome = train_on(
        &config,
        model(&space, 3),
        &space,
        Some(&codec),
        &[MixSource::new(train, Supervision::Supervised, 1.0)],
        Some(&dev),
    )
    .unwrap();
    let first = outcome.log.first().unwrap().loss_total;
    let last = outcome.log.last().unwrap().loss_total;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    let cer = outcome.best_dev.unwrap();
    assert!(cer < 0.5, "dev CER {cer}");

    // the returned checkpoint is the one that scored best
    let mut options = EvalOptions::new(DevMetric::Cer);
    options.max_new = 12;
    let again = evaluate(&outcome.params, &space, Some(&codec), &dev, &options).unwrap();
    assert_eq!(again.value, cer);
}

#[test]
fn early_stopping_returns_the_best_epoch() {
    let space = space();
    let (codec, xs) = asr(&space, 80, 4);
    let (train, dev, _) = split_80_10_10(&xs);
    // a large step size makes the dev loss climb after the first epochs
    let config = TrainConfig {
        epochs: 30,
        batch_size: 4,
        lr: 0.3,
        patience: 2,
        dev_metric: DevMetric::Loss,
        ..TrainConfig::default()
    };
    let outcome = train_on(
        &config,
        model(&space, 4),
        &space,
        Some(&codec),
        &[MixSource::new(train, Supervision::Supervised, 1.0)],
        Some(&dev),
    )
    .unwrap();
    assert!(outcome.stopped_early, "{:?}", outcome.epochs);
    let best = outcome.best_epoch.unwrap();
    assert_eq!(best, outcome.epochs.len() - 1 - config.patience);
    let scores: Vec<f64> = outcome.epochs.iter().map(|e| e.dev_metric.unwrap()).collect();
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(scores[best], min);
    assert_eq!(outcome.best_dev, Some(min));
    let again = evaluate(&outcome.params, &space, Some(&codec), &dev, &EvalOptions::new(DevMetric::Loss)).unwrap();
    assert_eq!(again.value, min);
}

#[test]
fn search_is_deterministic_and_includes_baselines() {
    let space = space();
    let (codec, xs) = asr(&space, 60, 5);
    let (train, dev, _) = split_80_10_10(&xs);
    let base = TrainConfig {
        epochs: 1,
        batch_size: 4,
        lr: 3e-3,
        max_new_tokens: 8,
        ..TrainConfig::default()
    };
    let spec = SearchSpec {
        trials: 1,
        seed: 9,
        ..SearchSpec::default()
    };
    let sources = [MixSource::new(train, Supervision::Supervised, 1.0)];
    let init = model(&space, 5);
    let a = lambda_search(&spec, &base, &init, &space, Some(&codec), &sources, &dev).unwrap();
    let b = lambda_search(&spec, &base, &init, &space, Some(&codec), &sources, &dev).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trials.len(), 1);
    assert_eq!(a.best_dev_wer, a.trials[0].dev_wer.unwrap());
    assert_eq!(a.best.lambda_speech, a.trials[0].lambda_speech);
    let equal = a.baseline(BASELINE_EQUAL).unwrap();
    assert_eq!((equal.lambda_speech, equal.lambda_text), (1.0, 1.0));
    let masked = a.baseline(BASELINE_MASKED).unwrap();
    assert_eq!((masked.lambda_speech, masked.lambda_text), (0.0, 1.0));
    let parallel = SearchSpec { jobs: 2, ..spec };
    let c = lambda_search(&parallel, &base, &init, &space, Some(&codec), &sources, &dev).unwrap();
    assert_eq!(a, c);
}
