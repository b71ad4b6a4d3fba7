//! End-to-end acceptance checks.
//!
//! Runs every criterion and prints one `[PASS]` or `[FAIL]` line per
//! criterion. Pass substrings as arguments to run a subset, e.g.
//! `cargo test -p dmlm-cli --test acceptance -- 3 10`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dmlm_core::codebook::{
    assign_tokens, fit_minibatch_kmeans, inertia, Codebook, FeatureMatrix, KMeansConfig,
};
use dmlm_core::net::{
    backward, extend_from_pretrained, forward, init_random, init_random_with_std, load_checkpoint,
    save_checkpoint, ModelConfig, ModelParams,
};
use dmlm_core::objective::{loss_logit_grads, trimodal_loss, LossWeights};
use dmlm_core::pipeline::metrics::{cer, wer};
use dmlm_core::pipeline::synth::{
    split_80_10_10, synth_examples, Domain, FeatureFamily, FeatureSynth, SynthSpec, UnsupervisedKind,
};
use dmlm_core::pipeline::{evaluate, train_on, DevMetric, EvalOptions, MixSource, TrainConfig};
use dmlm_core::seqfmt::{ShiftedSequence, Supervision, TaskExample};
use dmlm_core::tokenspace::{build_token_space, SyntheticSpeechCodec, TokenRun};
use dmlm_core::{Modality, Task, TokenSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { id: 1, name: "loss correctness", limit: Duration::from_secs(1), run: c1_loss },
        Criterion { id: 2, name: "gradient exactness", limit: Duration::from_secs(30), run: c2_gradients },
        Criterion { id: 3, name: "loss-weight search beats fixed weights", limit: minutes(30), run: c3_search },
        Criterion { id: 4, name: "text pretraining helps", limit: minutes(45), run: c4_pretrain },
        Criterion { id: 5, name: "unsupervised target-domain data helps", limit: minutes(45), run: c5_mixed },
        Criterion { id: 6, name: "label-clustered codebooks beat label-agnostic", limit: minutes(30), run: c6_codebooks },
        Criterion { id: 7, name: "codebook oracles", limit: Duration::from_secs(10), run: c7_codebook },
        Criterion { id: 8, name: "metric oracles", limit: Duration::from_secs(10), run: c8_metrics },
        Criterion { id: 9, name: "determinism and round trips", limit: minutes(1), run: c9_determinism },
        Criterion { id: 10, name: "toy end-to-end capability", limit: minutes(30), run: c10_capability },
    ];
    let mut failed = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == &c.id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(msg) if elapsed > c.limit => Err(format!("{msg}; took {elapsed:.1?}, limit {:?}", c.limit)),
            other => other,
        };
        match result {
            Ok(msg) => println!("[PASS] criterion {}: {} ({elapsed:.1?}): {msg}", c.id, c.name),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] criterion {}: {} ({elapsed:.1?}): {msg}", c.id, c.name);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt_all(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{:.3}", x)).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------- 1

fn c1_loss() -> Outcome {
    let vocab = 12;
    let seq = ShiftedSequence {
        inputs: vec![0, 1, 2],
        targets: vec![3, 4, 5],
        target_modalities: vec![Modality::Speech, Modality::Speech, Modality::Text],
        target_mask: vec![true; 3],
    };
    let w = LossWeights::new(0.25, 0.93, 0.25).map_err(|e| e.to_string())?;
    let uniform = vec![0.37f64; 3 * vocab];
    let got = trimodal_loss(&uniform, vocab, &seq, &w).map_err(|e| e.to_string())?.total;
    let want = (0.25 + 0.93) * (vocab as f64).ln();
    check((got - want).abs() <= 1e-12, format!("uniform loss {got} vs {want}"))?;

    let masked = LossWeights::new(0.0, 0.93, 0.25).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits: Vec<f64> = (0..3 * vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
    let base = trimodal_loss(&logits, vocab, &seq, &masked).map_err(|e| e.to_string())?.total;
    let base_grad = loss_logit_grads(&logits, vocab, &seq, &masked).map_err(|e| e.to_string())?;
    for trial in 0..100 {
        let mut perturbed = logits.clone();
        // rows 0 and 1 predict speech targets
        for x in &mut perturbed[..2 * vocab] {
            *x = rng.random_range(-50.0..50.0);
        }
        let l = trimodal_loss(&perturbed, vocab, &seq, &masked).map_err(|e| e.to_string())?.total;
        let g = loss_logit_grads(&perturbed, vocab, &seq, &masked).map_err(|e| e.to_string())?;
        check(l.to_bits() == base.to_bits(), format!("trial {trial}: loss moved with speech rows"))?;
        check(
            g.iter().zip(&base_grad).all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("trial {trial}: gradient moved with speech rows"),
        )?;
    }
    Ok(format!("uniform loss error {:.1e}; masked loss bit-stable over 100 perturbations", (got - want).abs()))
}

// ---------------------------------------------------------------- 2

fn c2_gradients() -> Outcome {
    let vocab = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mods = [Modality::Speech, Modality::Text, Modality::Image];
    let len = 6;
    let seq = ShiftedSequence {
        inputs: (0..len).map(|_| rng.random_range(0..vocab as u32)).collect(),
        targets: (0..len).map(|_| rng.random_range(0..vocab as u32)).collect(),
        target_modalities: (0..len).map(|i| mods[i % 3]).collect(),
        target_mask: vec![true; len],
    };
    let w = LossWeights::new(0.25, 0.93, 0.25).map_err(|e| e.to_string())?;

    // logits
    let logits: Vec<f64> = (0..len * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
    let grad = loss_logit_grads(&logits, vocab, &seq, &w).map_err(|e| e.to_string())?;
    let loss = |l: &[f64]| trimodal_loss(l, vocab, &seq, &w).unwrap().total;
    let h = 1e-5;
    let mut worst_logit: f64 = 0.0;
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p[i] += h;
        let up = loss(&p);
        p[i] -= 2.0 * h;
        let fd = (up - loss(&p)) / (2.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
        worst_logit = worst_logit.max(rel);
    }
    check(worst_logit <= 1e-6, format!("logit gradient relative error {worst_logit:.2e}"))?;

    // every parameter of a d=8, one-layer model
    let config = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        vocab_size: vocab,
        tie_embeddings: true,
    };
    let mut params: ModelParams<f64> = init_random_with_std(&config, 7, 0.05).map_err(|e| e.to_string())?;
    for (name, t) in params.tensors_mut() {
        if !t.is_decayed() {
            let base = if name.ends_with("gain") { 1.0 } else { 0.0 };
            t.data.iter_mut().for_each(|x| *x = base + rng.random_range(-0.2..0.2));
        }
    }
    let model_loss = |p: &ModelParams<f64>| {
        let (l, _) = forward(p, &seq.inputs).unwrap();
        trimodal_loss(&l, vocab, &seq, &w).unwrap().total
    };
    let (l, trace) = forward(&params, &seq.inputs).map_err(|e| e.to_string())?;
    let dl = loss_logit_grads(&l, vocab, &seq, &w).map_err(|e| e.to_string())?;
    let grads = backward(&params, &trace, &dl).map_err(|e| e.to_string())?;
    let analytic: Vec<(String, Vec<f64>)> =
        grads.tensors().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    // small enough that the central difference's truncation error is negligible
    let h = 1e-4;
    let (mut worst, mut worst_at): (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for (k, (name, values)) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let mut p = params.clone();
            p.tensors_mut()[k].1.data[i] += h;
            let up = model_loss(&p);
            p.tensors_mut()[k].1.data[i] -= 2.0 * h;
            let fd = (up - model_loss(&p)) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                (worst, worst_at) = (rel, format!("{name}[{i}]"));
            }
            checked += 1;
        }
    }
    check(worst <= 1e-4, format!("parameter gradient relative error {worst:.2e} at {worst_at}"))?;
    Ok(format!(
        "logits max rel {worst_logit:.1e}; {checked} parameters max rel {worst:.1e} at {worst_at}"
    ))
}

// ---------------------------------------------------- shared ASR setup

fn small_model(space: &TokenSpace, seed: u64) -> ModelParams<f32> {
    model_of_width(space, seed, 32)
}

fn model_of_width(space: &TokenSpace, seed: u64, d_model: usize) -> ModelParams<f32> {
    let config = ModelConfig {
        d_model,
        n_layers: 2,
        n_heads: 4,
        d_ff: 4 * d_model,
        max_seq_len: 96,
        vocab_size: space.vocab_size(),
        tie_embeddings: true,
    };
    init_random(&config, seed).expect("model config")
}

fn recipe(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 3e-3,
        warmup_steps: 50,
        linear_decay: true,
        grad_clip: Some(1.0),
        patience: 0,
        seed,
        dev_limit: Some(100),
        max_new_tokens: 64,
        ..TrainConfig::default()
    }
}

fn speech_space() -> TokenSpace {
    build_token_space(30, 64, 0).expect("space")
}

fn asr_data(
    space: &TokenSpace,
    codec: &SyntheticSpeechCodec,
    n: usize,
    seed: u64,
    domain: Domain,
    max_words: usize,
) -> (Vec<TaskExample>, Vec<TaskExample>, Vec<TaskExample>) {
    asr_data_with_lexicon(space, codec, n, seed, domain, max_words, 48)
}

fn asr_data_with_lexicon(
    space: &TokenSpace,
    codec: &SyntheticSpeechCodec,
    n: usize,
    seed: u64,
    domain: Domain,
    max_words: usize,
    lexicon_size: usize,
) -> (Vec<TaskExample>, Vec<TaskExample>, Vec<TaskExample>) {
    let spec = SynthSpec {
        domain,
        max_words,
        lexicon_size,
        ..SynthSpec::new(Task::Asr, n, seed)
    };
    let xs = synth_examples(&spec, space, Some(codec)).expect("synth");
    split_80_10_10(&xs)
}

fn score(
    params: &ModelParams<f32>,
    space: &TokenSpace,
    codec: Option<&SyntheticSpeechCodec>,
    data: &[TaskExample],
    metric: DevMetric,
) -> f64 {
    let mut options = EvalOptions::new(metric);
    options.max_new = 64;
    evaluate(params, space, codec, data, &options).expect("evaluate").value
}

fn supervised(examples: Vec<TaskExample>, weight: f64) -> MixSource {
    MixSource::new(examples, Supervision::Supervised, weight)
}

// ---------------------------------------------------------------- 3

fn c3_search() -> Outcome {
    use dmlm_core::pipeline::{lambda_search, SearchSpec, BASELINE_EQUAL, BASELINE_MASKED};
    let space = speech_space();
    let (mut selected, mut equal, mut masked) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let codec = SyntheticSpeechCodec::new(&space, 3, 0.05, seed).map_err(|e| e.to_string())?;
        let (train, dev, _) = asr_data(&space, &codec, 2500, seed, Domain::A, 2);
        let init = small_model(&space, seed);
        let base = TrainConfig {
            dev_limit: Some(60),
            max_new_tokens: 24,
            ..recipe(seed, 4)
        };
        let spec = SearchSpec {
            trials: 25,
            seed,
            ..SearchSpec::default()
        };
        let report = lambda_search(&spec, &base, &init, &space, Some(&codec), &[supervised(train, 1.0)], &dev)
            .map_err(|e| e.to_string())?;
        let dev_of = |label: &str| {
            report
                .baseline(label)
                .and_then(|r| r.dev_wer)
                .ok_or_else(|| format!("baseline {label} missing"))
        };
        selected.push(report.best_dev_wer);
        equal.push(dev_of(BASELINE_EQUAL)?);
        masked.push(dev_of(BASELINE_MASKED)?);
    }
    let (s, e, m) = (median(&selected), median(&equal), median(&masked));
    let msg = format!(
        "median dev WER selected {s:.3} {}, equal {e:.3} {}, masked {m:.3} {}",
        fmt_all(&selected),
        fmt_all(&equal),
        fmt_all(&masked)
    );
    check(s <= e && s <= m, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 4

fn c4_pretrain() -> Outcome {
    let space = speech_space();
    let text_space = build_token_space(30, 0, 0).map_err(|e| e.to_string())?;
    let (mut pre, mut scratch) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        // text pretraining on a corpus from the same lexicon; long passages
        // train every position the transcripts later occupy, and strong decay
        // keeps the weights small enough to stay adaptable
        let corpus_spec = SynthSpec {
            max_words: 16,
            lm_modality: UnsupervisedKind::Text,
            ..SynthSpec::new(Task::Lm, 8000, seed + 100)
        };
        let corpus = synth_examples(&corpus_spec, &text_space, None).map_err(|e| e.to_string())?;
        let pre_config = TrainConfig {
            epochs: 1,
            steps_per_epoch: Some(5000),
            max_steps: Some(5000),
            weight_decay: 0.5,
            ..recipe(seed, 1)
        };
        let base = small_model(&text_space, seed);
        let base = train_on(
            &pre_config,
            base,
            &text_space,
            None,
            &[MixSource::new(corpus, Supervision::Unsupervised, 1.0)],
            None,
        )
        .map_err(|e| e.to_string())?
        .params;
        let extended = extend_from_pretrained(&base, &text_space, &space, seed).map_err(|e| e.to_string())?;

        let codec = SyntheticSpeechCodec::new(&space, 3, 0.05, seed).map_err(|e| e.to_string())?;
        let (train, dev, _) = asr_data(&space, &codec, 2500, seed, Domain::A, 3);
        let fine = TrainConfig {
            max_steps: Some(2400),
            ..recipe(seed, 10)
        };
        for (init, out) in [(extended, &mut pre), (small_model(&space, seed), &mut scratch)] {
            let outcome = train_on(&fine, init, &space, Some(&codec), &[supervised(train.clone(), 1.0)], Some(&dev))
                .map_err(|e| e.to_string())?;
            out.push(score(&outcome.params, &space, Some(&codec), &dev, DevMetric::Wer));
        }
    }
    let (p, s) = (median(&pre), median(&scratch));
    let msg = format!(
        "median dev WER pretrained {p:.3} {}, random init {s:.3} {}",
        fmt_all(&pre),
        fmt_all(&scratch)
    );
    check(p <= s, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 5

fn c5_mixed() -> Outcome {
    let space = speech_space();
    let kinds = [UnsupervisedKind::Speech, UnsupervisedKind::Text];
    let mut only = Vec::new();
    let mut mixed = [Vec::new(), Vec::new()];
    for seed in SEEDS {
        let codec = SyntheticSpeechCodec::new(&space, 3, 0.05, seed).map_err(|e| e.to_string())?;
        // a lexicon too large to memorize from the transcripts forces
        // letter-level reading, so the source domain transfers at all
        let lexicon = 400;
        let (train_a, _, _) = asr_data_with_lexicon(&space, &codec, 2500, seed, Domain::A, 3, lexicon);
        let (_, dev_b, test_b) = asr_data_with_lexicon(&space, &codec, 2500, seed + 50, Domain::B, 3, lexicon);

        // both arms see the same number of supervised examples
        let sup_steps = 1500;
        let only_config = TrainConfig {
            max_steps: Some(sup_steps),
            steps_per_epoch: Some(sup_steps / 6),
            ..recipe(seed, 6)
        };
        let mixed_config = TrainConfig {
            max_steps: Some(2 * sup_steps),
            steps_per_epoch: Some(sup_steps / 3),
            ..recipe(seed, 6)
        };
        let run = |config: &TrainConfig, sources: &[MixSource]| -> Result<f64, String> {
            let outcome = train_on(config, small_model(&space, seed), &space, Some(&codec), sources, Some(&dev_b))
                .map_err(|e| e.to_string())?;
            Ok(score(&outcome.params, &space, Some(&codec), &test_b, DevMetric::Wer))
        };
        only.push(run(&only_config, &[supervised(train_a.clone(), 1.0)])?);
        for (kind, out) in kinds.iter().zip(mixed.iter_mut()) {
            let lm_spec = SynthSpec {
                domain: Domain::B,
                max_words: 3,
                lexicon_size: lexicon,
                lm_modality: *kind,
                ..SynthSpec::new(Task::Lm, 2000, seed + 200)
            };
            let unsup = synth_examples(&lm_spec, &space, Some(&codec)).map_err(|e| e.to_string())?;
            out.push(run(
                &mixed_config,
                &[
                    supervised(train_a.clone(), 1.0),
                    MixSource::new(unsup, Supervision::Unsupervised, 1.0),
                ],
            )?);
        }
    }
    let o = median(&only);
    let mut msg = format!("target-domain test WER supervised only {o:.3} {}", fmt_all(&only));
    for (kind, m) in kinds.iter().zip(&mixed) {
        msg.push_str(&format!("; with {kind:?} {:.3} {}", median(m), fmt_all(m)));
    }
    check(mixed.iter().all(|m| median(m) <= o), msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 6

fn feature_asr(
    space: &TokenSpace,
    family: FeatureFamily,
    seed: u64,
) -> Result<f64, String> {
    let text_spec = SynthSpec {
        max_words: 2,
        lm_modality: UnsupervisedKind::Text,
        ..SynthSpec::new(Task::Lm, 2000, seed)
    };
    let texts: Vec<TokenRun> = synth_examples(&text_spec, space, None)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|x| x.input)
        .collect();
    let synth = FeatureSynth::new(space, family, 16, 2, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
    let feats: Vec<FeatureMatrix> = texts
        .iter()
        .map(|t| synth.features(t, &mut rng))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (train_f, _, _) = split_80_10_10(&feats);
    let mut km = KMeansConfig::new(64, 64, 100, seed);
    km.standardize = true;
    let cb = fit_minibatch_kmeans(&train_f, &km).map_err(|e| e.to_string())?;
    let examples: Vec<TaskExample> = feats
        .iter()
        .zip(&texts)
        .map(|(f, t)| Ok(TaskExample::supervised(Task::Asr, assign_tokens(&cb, f, space)?, t.clone())))
        .collect::<Result<_, dmlm_core::Error>>()
        .map_err(|e| e.to_string())?;
    let (train, dev, test) = split_80_10_10(&examples);
    let outcome = train_on(&recipe(seed, 6), small_model(space, seed), space, None, &[supervised(train, 1.0)], Some(&dev))
        .map_err(|e| e.to_string())?;
    Ok(score(&outcome.params, space, None, &test, DevMetric::Wer))
}

fn c6_codebooks() -> Outcome {
    let space = speech_space();
    let (mut clustered, mut agnostic) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        clustered.push(feature_asr(&space, FeatureFamily::LabelClustered, seed)?);
        agnostic.push(feature_asr(&space, FeatureFamily::LabelAgnostic, seed)?);
    }
    let (c, a) = (median(&clustered), median(&agnostic));
    let msg = format!(
        "median test WER clustered {c:.3} {}, agnostic {a:.3} {}",
        fmt_all(&clustered),
        fmt_all(&agnostic)
    );
    check(c < a, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 7

fn brute_force_nearest(cb: &Codebook, row: &[f32]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in cb.centroids.chunks(cb.dim).enumerate() {
        let d: f64 = c.iter().zip(row).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Full-batch Lloyd iterations from the best of several random starts.
fn lloyd_inertia(points: &[[f64; 2]], k: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sse = |cs: &[[f64; 2]]| -> f64 {
        points
            .iter()
            .map(|p| {
                cs.iter()
                    .map(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    let mut best = f64::INFINITY;
    for _ in 0..10 {
        let mut cs: Vec<[f64; 2]> = (0..k).map(|_| points[rng.random_range(0..points.len())]).collect();
        for _ in 0..100 {
            let mut sums = vec![[0.0; 3]; k];
            for p in points {
                let j = (0..k)
                    .min_by(|&a, &b| {
                        let da = (p[0] - cs[a][0]).powi(2) + (p[1] - cs[a][1]).powi(2);
                        let db = (p[0] - cs[b][0]).powi(2) + (p[1] - cs[b][1]).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                sums[j][0] += p[0];
                sums[j][1] += p[1];
                sums[j][2] += 1.0;
            }
            for (c, s) in cs.iter_mut().zip(&sums) {
                if s[2] > 0.0 {
                    *c = [s[0] / s[2], s[1] / s[2]];
                }
            }
        }
        best = best.min(sse(&cs));
    }
    best
}

fn c7_codebook() -> Outcome {
    let space = speech_space();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // exact nearest-centroid assignment
    let dim = 8;
    let cb_data: Vec<FeatureMatrix> = (0..10)
        .map(|_| {
            let values = (0..50 * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            FeatureMatrix::new(50, dim, values).unwrap()
        })
        .collect();
    let cb = fit_minibatch_kmeans(&cb_data, &KMeansConfig::new(64, 4, 20, 1)).map_err(|e| e.to_string())?;
    let values: Vec<f32> = (0..1000 * dim).map(|_| rng.random_range(-1.5f32..1.5)).collect();
    let frames = FeatureMatrix::new(1000, dim, values).map_err(|e| e.to_string())?;
    let run = assign_tokens(&cb, &frames, &space).map_err(|e| e.to_string())?;
    let mismatches = frames
        .iter_rows()
        .zip(&run.ids)
        .filter(|(row, &id)| (id - space.speech_range.start) as usize != brute_force_nearest(&cb, row))
        .count();
    check(mismatches == 0, format!("{mismatches} of 1000 frames differ from brute force"))?;

    // three well-separated blobs
    let centers = [[0.0, 0.0], [6.0, 0.0], [3.0, 5.0]];
    let normal = rand_distr_normal();
    let utterances: Vec<Vec<[f64; 2]>> = (0..30)
        .map(|_| {
            (0..30)
                .map(|i| {
                    let c = centers[i % 3];
                    [c[0] + normal(&mut rng), c[1] + normal(&mut rng)]
                })
                .collect()
        })
        .collect();
    let data: Vec<FeatureMatrix> = utterances
        .iter()
        .map(|u| FeatureMatrix::new(u.len(), 2, u.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect()).unwrap())
        .collect();
    let points: Vec<[f64; 2]> = data
        .iter()
        .flat_map(|m| m.iter_rows().map(|r| [r[0] as f64, r[1] as f64]).collect::<Vec<_>>())
        .collect();
    let cb = fit_minibatch_kmeans(&data, &KMeansConfig::new(3, 5, 100, 2)).map_err(|e| e.to_string())?;
    let mini = inertia(&cb, &data).map_err(|e| e.to_string())?;
    let full = lloyd_inertia(&points, 3, 3);
    let ratio = mini / full;
    check(ratio <= 1.10, format!("mini-batch inertia {mini:.3} is {ratio:.4}x full-batch {full:.3}"))?;
    Ok(format!("1000/1000 assignments exact; inertia ratio {ratio:.4}"))
}

/// Standard normal sampler via Box-Muller on the test RNG.
fn rand_distr_normal() -> impl Fn(&mut ChaCha8Rng) -> f64 {
    |rng: &mut ChaCha8Rng| {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

// ---------------------------------------------------------------- 8

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn c8_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vocab = ["a", "b", "c", "ab", "ba"];
    for pair in 0..10_000 {
        let mut words = |n: usize| -> Vec<&str> { (0..n).map(|_| vocab[rng.random_range(0..vocab.len())]).collect() };
        let (nr, nh) = (pair % 7, (pair / 7) % 9);
        let (r, h) = (words(nr), words(nh));
        let expect = levenshtein(&r, &h) as f64 / r.len().max(1) as f64;
        let got = wer(&r, &h);
        check(got == expect, format!("wer({r:?}, {h:?}) = {got}, oracle {expect}"))?;
        let (rs, hs) = (r.join(" "), h.join(" "));
        let (rc, hc): (Vec<char>, Vec<char>) = (rs.chars().collect(), hs.chars().collect());
        let expect = levenshtein(&rc, &hc) as f64 / rc.len().max(1) as f64;
        let got = cer(&rs, &hs);
        check(got == expect, format!("cer({rs:?}, {hs:?}) = {got}, oracle {expect}"))?;
    }
    let over = wer(&["a"], &["a", "c", "d", "e", "f", "g", "h", "i"]);
    check(over == 7.0, format!("one-word reference, eight-word hypothesis gives {over}"))?;
    Ok("10000 pairs exact for WER and CER; WER 7.0 on the 1-vs-8 case".into())
}

// ---------------------------------------------------------------- 9

fn dmlm(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dmlm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DMLM_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("dmlm {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn cli_recipe(dir: &Path) -> Result<(), String> {
    std::fs::write(
        dir.join("config.json"),
        r#"{"epochs": 2, "batch_size": 4, "lr": 0.003, "warmup_steps": 5, "seed": 4,
            "mix": [{"path": "data/train.jsonl", "supervision": "supervised", "weight": 1.0}],
            "dev_path": "data/dev.jsonl", "dev_limit": 10, "max_new_tokens": 20}"#,
    )
    .map_err(|e| e.to_string())?;
    let small = ["--d-model", "16", "--d-ff", "32", "--max-seq-len", "64"];
    dmlm(&["synth-data", "--task", "asr", "--n", "100", "--max-words", "2", "--seed", "4", "--out", "data"], dir)?;
    let mut train = vec!["train", "--config", "config.json", "--manifest", "data/tokenspace.json", "--codec", "data/codec.json", "--out", "run"];
    train.extend(small);
    dmlm(&train, dir)?;
    let mut search = vec![
        "lambda-search", "--config", "config.json", "--manifest", "data/tokenspace.json", "--codec",
        "data/codec.json", "--trials", "2", "--seed", "4", "--out", "search",
    ];
    search.extend(small);
    dmlm(&search, dir)?;
    dmlm(
        &["evaluate", "--model", "run/model.ckpt", "--manifest", "data/tokenspace.json", "--data", "data/test.jsonl", "--max-new", "20", "--out", "eval"],
        dir,
    )?;
    dmlm(&["report", "--input", "search/trials.json", "run/train_log.jsonl", "--out", "report"], dir)?;
    Ok(())
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    // checkpoint
    let space = speech_space();
    let params = small_model(&space, 9);
    let (a, b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    save_checkpoint(&params, &a).map_err(|e| e.to_string())?;
    let (back, _) = load_checkpoint::<f32>(&a).map_err(|e| e.to_string())?;
    check(back == params, "checkpoint parameters changed on reload")?;
    save_checkpoint(&back, &b).map_err(|e| e.to_string())?;
    check(std::fs::read(&a).ok() == std::fs::read(&b).ok(), "re-saved checkpoint bytes differ")?;

    // text round trip
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz '".chars().collect();
    for _ in 0..1000 {
        let n = rng.random_range(0..40);
        let s: String = (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        let run = space.encode_text(&s).map_err(|e| e.to_string())?;
        let back = space.decode_text(&run.ids).map_err(|e| e.to_string())?;
        check(back == s, format!("text round trip {s:?} -> {back:?}"))?;
    }

    // the CLI recipe twice
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for r in [&r1, &r2] {
        std::fs::create_dir_all(r).map_err(|e| e.to_string())?;
        cli_recipe(r)?;
    }
    let (f1, f2) = (files_under(&r1), files_under(&r2));
    check(f1 == f2, "the two runs wrote different file sets")?;
    for f in &f1 {
        check(
            std::fs::read(r1.join(f)).ok() == std::fs::read(r2.join(f)).ok(),
            format!("{} differs between runs", f.display()),
        )?;
    }
    Ok(format!("checkpoint and 1000 text round trips exact; {} CLI output files byte-identical", f1.len()))
}

// ---------------------------------------------------------------- 10

fn c10_capability() -> Outcome {
    let space = speech_space();
    let codec = SyntheticSpeechCodec::new(&space, 3, 0.0, 10).map_err(|e| e.to_string())?;

    let (train, dev, test) = asr_data(&space, &codec, 2500, 10, Domain::A, 3);
    let outcome = train_on(&recipe(10, 12), small_model(&space, 10), &space, Some(&codec), &[supervised(train, 1.0)], Some(&dev))
        .map_err(|e| e.to_string())?;
    let asr = score(&outcome.params, &space, Some(&codec), &test, DevMetric::Wer);

    // synthesis must emit three aligned tokens per letter, so it gets more
    // data, a wider model and full weight on the speech targets
    let spec = SynthSpec {
        max_words: 3,
        ..SynthSpec::new(Task::T2s, 6250, 10)
    };
    let xs = synth_examples(&spec, &space, Some(&codec)).map_err(|e| e.to_string())?;
    let (train, dev, test) = split_80_10_10(&xs);
    let config = TrainConfig {
        dev_metric: DevMetric::Cer,
        loss_weights: LossWeights::new(1.0, 0.93, 0.25).map_err(|e| e.to_string())?,
        ..recipe(10, 10)
    };
    let outcome = train_on(&config, model_of_width(&space, 10, 48), &space, Some(&codec), &[supervised(train, 1.0)], Some(&dev))
        .map_err(|e| e.to_string())?;
    let t2s = score(&outcome.params, &space, Some(&codec), &test, DevMetric::Cer);
    let msg = format!("ASR test WER {:.2}%, T2S decoded CER {:.2}%", 100.0 * asr, 100.0 * t2s);
    check(asr < 0.05 && t2s < 0.05, msg.clone())?;
    Ok(msg)
}
