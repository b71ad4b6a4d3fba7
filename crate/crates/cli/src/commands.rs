use std::path::{Path, PathBuf};

use dmlm_core::codebook::{
    assign_tokens_par, fit_minibatch_kmeans, inertia_par, load_codebook, read_features,
    save_codebook, write_features, FeatureMatrix, KMeansConfig,
};
use dmlm_core::net::{
    extend_from_pretrained, init_random, load_checkpoint, save_checkpoint, ModelConfig, ModelParams,
};
use dmlm_core::pipeline::synth::{
    split_80_10_10, synth_examples, Domain, FeatureFamily, FeatureSynth, SynthSpec, UnsupervisedKind,
};
use dmlm_core::pipeline::{
    detokenize, evaluate, generate, lambda_search, load_data, train_on, write_jsonl, BleuOptions,
    DevMetric, EvalOptions, GenerateOptions, MixEntry, SearchSpec, TrainConfig,
};
use dmlm_core::seqfmt::{read_dataset, write_dataset, Supervision, TaskExample};
use dmlm_core::tokenspace::{
    build_token_space, read_token_runs, write_token_runs, SyntheticSpeechCodec, TokenRun,
};
use dmlm_core::{Error, Modality, Task, TokenSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::*;
use crate::report;
use crate::{CliError, CliResult};

pub(crate) fn dispatch(cli: Cli) -> CliResult<()> {
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::Manifest(a) => manifest(a),
        Command::SynthData(a) => synth_data(a),
        Command::Codebook(CodebookCommand::Fit(a)) | Command::CodebookFit(a) => codebook_fit(a),
        Command::Codebook(CodebookCommand::Assign(a)) | Command::CodebookAssign(a) => {
            codebook_assign(a, jobs)
        }
        Command::Codebook(CodebookCommand::Inertia(a)) | Command::CodebookInertia(a) => {
            codebook_inertia(a, jobs)
        }
        Command::Pretrain(a) => pretrain(a, jobs),
        Command::Extend(a) => extend(a),
        Command::Train(a) => train(a, jobs),
        Command::LambdaSearch(a) => search(a, jobs),
        Command::Generate(a) => generate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a, jobs),
        Command::Report(a) => report_cmd(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn out_dir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut json = serde_json::to_string_pretty(value).map_err(Error::from)?;
    json.push('\n');
    write_text(path, &json)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_space(path: &Path) -> CliResult<TokenSpace> {
    require(path)?;
    Ok(TokenSpace::load_manifest(path)?)
}

fn space_from_args(a: &SpaceArgs) -> CliResult<TokenSpace> {
    Ok(match &a.alphabet {
        Some(alpha) => TokenSpace::with_alphabet(a.text, a.speech, a.image, alpha)?,
        None => build_token_space(a.text, a.speech, a.image)?,
    })
}

/// Loads a codec and checks it against the token space.
fn load_codec(path: &Path, space: &TokenSpace) -> CliResult<SyntheticSpeechCodec> {
    require(path)?;
    let codec = SyntheticSpeechCodec::load(path)?;
    if codec.speech_range != space.speech_range
        || codec.text_start != space.text_range.start
        || codec.alphabet_map.len() > space.text_range.len()
    {
        return Err(Error::ManifestMismatch(format!(
            "codec {} does not fit the token space",
            path.display()
        ))
        .into());
    }
    Ok(codec)
}

fn load_model(path: &Path, space: &TokenSpace) -> CliResult<ModelParams<f32>> {
    require(path)?;
    let (params, config) = load_checkpoint::<f32>(path)?;
    if config.vocab_size != space.vocab_size() {
        return Err(Error::ManifestMismatch(format!(
            "model vocabulary {} differs from the manifest's {}",
            config.vocab_size,
            space.vocab_size()
        ))
        .into());
    }
    Ok(params)
}

fn model_config(a: &ModelArgs, vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ff: a.d_ff,
        max_seq_len: a.max_seq_len,
        vocab_size: vocab,
        tie_embeddings: !a.untied,
    }
}

fn init_or_load(
    init: &Option<PathBuf>,
    model: &ModelArgs,
    space: &TokenSpace,
    seed: u64,
) -> CliResult<ModelParams<f32>> {
    match init {
        Some(p) => load_model(p, space),
        None => Ok(init_random(&model_config(model, space.vocab_size()), seed)?),
    }
}

fn manifest(a: ManifestArgs) -> CliResult<()> {
    let space = space_from_args(&a.space)?;
    out_dir(&a.out.out)?;
    space.save_manifest(a.out.out.join("tokenspace.json"))?;
    Ok(())
}

fn parse_task(s: &str) -> CliResult<Task> {
    s.parse::<Task>().map_err(|e| usage(e.to_string()))
}

fn synth_data(a: SynthArgs) -> CliResult<()> {
    let task = parse_task(&a.task)?;
    let domain: Domain = a.domain.parse().map_err(|e: Error| usage(e.to_string()))?;
    let lm_modality = match a.lm_modality.as_str() {
        "text" => UnsupervisedKind::Text,
        "speech" => UnsupervisedKind::Speech,
        other => return Err(usage(format!("unknown --lm-modality {other:?}"))),
    };
    let space = match &a.manifest {
        Some(p) => load_space(p)?,
        None => space_from_args(&a.space)?,
    };
    let out = &a.out.out;
    out_dir(out)?;
    space.save_manifest(out.join("tokenspace.json"))?;
    let spec = SynthSpec {
        task,
        n: a.n,
        domain,
        seed: a.seed.seed,
        lexicon_seed: a.lexicon_seed,
        lexicon_size: a.lexicon_size,
        min_words: a.min_words,
        max_words: a.max_words,
        lm_modality,
    };

    if let Some(family) = &a.features {
        let family: FeatureFamily = family.parse().map_err(|e: Error| usage(e.to_string()))?;
        if task != Task::Asr {
            return Err(usage("--features only applies to --task asr"));
        }
        let synth = FeatureSynth::new(&space, family, a.feature_dim, a.frames_per_char, a.prototype_seed)?;
        let text_spec = SynthSpec {
            task: Task::Lm,
            lm_modality: UnsupervisedKind::Text,
            ..spec
        };
        let texts: Vec<TokenRun> = synth_examples(&text_spec, &space, None)?
            .into_iter()
            .map(|x| x.input)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed.seed ^ 0xFEA7);
        let (train, dev, test) = split_80_10_10(&texts);
        for (name, runs) in [("train", train), ("dev", dev), ("test", test)] {
            let dir = out.join(format!("{name}_features"));
            out_dir(&dir)?;
            for (i, run) in runs.iter().enumerate() {
                write_features(dir.join(format!("{i:06}.feat")), &synth.features(run, &mut rng)?)?;
            }
            write_token_runs(out.join(format!("{name}_text.jsonl")), &runs)?;
        }
        return Ok(());
    }

    let needs_codec = matches!(task, Task::Asr | Task::T2s | Task::S2tt)
        || (task == Task::Lm && lm_modality == UnsupervisedKind::Speech);
    let codec = if needs_codec {
        let mut codec = match &a.codec {
            Some(p) => load_codec(p, &space)?,
            None => SyntheticSpeechCodec::new(&space, a.codec_k, a.noise, a.codec_seed.unwrap_or(a.seed.seed))?,
        };
        codec.noise = a.noise;
        codec.save(out.join("codec.json"))?;
        Some(codec)
    } else {
        None
    };
    let examples = synth_examples(&spec, &space, codec.as_ref())?;
    let (train, dev, test) = split_80_10_10(&examples);
    write_dataset(out.join("train.jsonl"), &train)?;
    write_dataset(out.join("dev.jsonl"), &dev)?;
    write_dataset(out.join("test.jsonl"), &test)?;
    Ok(())
}

/// Expands directories into their `.feat` files (sorted); files pass through.
fn feature_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        require(p)?;
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "feat"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(usage("no feature files given"));
    }
    Ok(files)
}

fn read_all_features(inputs: &[PathBuf]) -> CliResult<Vec<FeatureMatrix>> {
    feature_files(inputs)?
        .iter()
        .map(|f| read_features(f).map_err(CliError::from))
        .collect()
}

fn codebook_fit(a: CodebookFitArgs) -> CliResult<()> {
    let data = read_all_features(&a.features)?;
    let mut config = KMeansConfig::new(a.k, a.minibatch_utterances, a.iterations, a.seed.seed);
    config.standardize = a.standardize;
    config.source = a.source;
    config.data_tag = a.data_tag;
    let cb = fit_minibatch_kmeans(&data, &config)?;
    out_dir(&a.out.out)?;
    save_codebook(a.out.out.join("codebook.bin"), &cb)?;
    Ok(())
}

fn codebook_assign(a: CodebookAssignArgs, jobs: usize) -> CliResult<()> {
    let space = load_space(&a.manifest)?;
    require(&a.codebook)?;
    let cb = load_codebook(&a.codebook)?;
    let data = read_all_features(&a.features)?;
    let runs = data
        .iter()
        .map(|f| assign_tokens_par(&cb, f, &space, jobs).map_err(CliError::from))
        .collect::<CliResult<Vec<TokenRun>>>()?;
    out_dir(&a.out.out)?;
    match &a.transcripts {
        None => write_token_runs(a.out.out.join(format!("{}.jsonl", a.name)), &runs)?,
        Some(t) => {
            require(t)?;
            let texts = read_token_runs(t)?;
            if texts.len() != runs.len() {
                return Err(usage(format!(
                    "{} transcripts for {} feature files",
                    texts.len(),
                    runs.len()
                )));
            }
            let examples: Vec<TaskExample> = runs
                .into_iter()
                .zip(texts)
                .map(|(speech, text)| {
                    let ex = TaskExample::supervised(Task::Asr, speech, text);
                    ex.validate(&space)
                        .map_err(|e| Error::ManifestMismatch(e.to_string()))?;
                    Ok(ex)
                })
                .collect::<CliResult<_>>()?;
            write_dataset(a.out.out.join(format!("{}.jsonl", a.name)), &examples)?;
        }
    }
    Ok(())
}

fn codebook_inertia(a: CodebookInertiaArgs, jobs: usize) -> CliResult<()> {
    require(&a.codebook)?;
    let cb = load_codebook(&a.codebook)?;
    let data = read_all_features(&a.features)?;
    let value = inertia_par(&cb, &data, jobs)?;
    println!("{value}");
    if let Some(out) = &a.out {
        out_dir(out)?;
        write_json(&out.join("inertia.json"), &serde_json::json!({ "inertia": value }))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    best_epoch: Option<usize>,
    best_dev: Option<f64>,
    stopped_early: bool,
    epochs: Vec<dmlm_core::pipeline::EpochRecord>,
}

fn write_training_outputs(
    out: &Path,
    outcome: &dmlm_core::pipeline::TrainOutcome<f32>,
) -> CliResult<()> {
    save_checkpoint(&outcome.params, out.join("model.ckpt"))?;
    write_jsonl(out.join("train_log.jsonl"), &outcome.log)?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            steps: outcome.steps,
            best_epoch: outcome.best_epoch,
            best_dev: outcome.best_dev,
            stopped_early: outcome.stopped_early,
            epochs: outcome.epochs.clone(),
        },
    )
}

fn pretrain(a: PretrainArgs, jobs: usize) -> CliResult<()> {
    let space = match &a.manifest {
        Some(p) => load_space(p)?,
        None => build_token_space(a.text, 0, 0)?,
    };
    require(&a.data)?;
    let data = read_dataset(&a.data, &space)?;
    let config = TrainConfig {
        epochs: 1,
        steps_per_epoch: Some(a.steps),
        max_steps: Some(a.steps),
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        patience: 0,
        seed: a.seed.seed,
        jobs,
        ..TrainConfig::default()
    };
    let supervision = data.first().map(|x| x.supervision).unwrap_or(Supervision::Unsupervised);
    let params = init_random(&model_config(&a.model, space.vocab_size()), a.seed.seed)?;
    let sources = [dmlm_core::pipeline::MixSource::new(data, supervision, 1.0)];
    let outcome = train_on(&config, params, &space, None, &sources, None)?;
    out_dir(&a.out.out)?;
    space.save_manifest(a.out.out.join("tokenspace.json"))?;
    write_training_outputs(&a.out.out, &outcome)
}

fn extend(a: ExtendArgs) -> CliResult<()> {
    let base_space = load_space(&a.base_manifest)?;
    let space = load_space(&a.manifest)?;
    let base = load_model(&a.base, &base_space)?;
    let extended = extend_from_pretrained(&base, &base_space, &space, a.seed.seed)?;
    out_dir(&a.out.out)?;
    save_checkpoint(&extended, a.out.out.join("model.ckpt"))?;
    space.save_manifest(a.out.out.join("tokenspace.json"))?;
    Ok(())
}

/// Loads a training config and resolves its relative paths against its directory.
fn load_train_config(path: &Path) -> CliResult<TrainConfig> {
    require(path)?;
    let mut config = TrainConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    for MixEntry { path, .. } in config.mix.iter_mut() {
        resolve(path);
    }
    if let Some(dev) = config.dev_path.as_mut() {
        resolve(dev);
    }
    for p in config.mix.iter().map(|m| &m.path).chain(config.dev_path.as_ref()) {
        require(p)?;
    }
    if config.mix.is_empty() {
        return Err(Error::EmptyMix.into());
    }
    Ok(config)
}

fn train(a: TrainArgs, jobs: usize) -> CliResult<()> {
    let space = load_space(&a.manifest)?;
    let mut config = load_train_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.jobs = jobs;
    let codec = a.codec.as_ref().map(|p| load_codec(p, &space)).transpose()?;
    let params = init_or_load(&a.init, &a.model, &space, config.seed)?;
    let (sources, dev) = load_data(&config, &space)?;
    let outcome = train_on(&config, params, &space, codec.as_ref(), &sources, dev.as_deref())?;
    out_dir(&a.out.out)?;
    write_training_outputs(&a.out.out, &outcome)
}

fn search(a: SearchArgs, jobs: usize) -> CliResult<()> {
    let space = load_space(&a.manifest)?;
    let mut config = load_train_config(&a.config)?;
    config.seed = a.seed.seed;
    let codec = a.codec.as_ref().map(|p| load_codec(p, &space)).transpose()?;
    let params = init_or_load(&a.init, &a.model, &space, config.seed)?;
    let (sources, dev) = load_data(&config, &space)?;
    let dev = dev.ok_or_else(|| usage("lambda search needs dev_path in the config"))?;
    let spec = SearchSpec {
        trials: a.trials,
        lambda_speech: (a.lambda_speech_min, a.lambda_speech_max),
        lambda_text: (a.lambda_text_min, a.lambda_text_max),
        seed: a.seed.seed,
        baselines: !a.no_baselines,
        jobs,
    };
    let result = lambda_search(&spec, &config, &params, &space, codec.as_ref(), &sources, &dev)?;
    out_dir(&a.out.out)?;
    write_json(&a.out.out.join("trials.json"), &result)?;
    write_json(&a.out.out.join("best_weights.json"), &result.best)?;
    let mut rows = report::rows_from_file(&a.out.out.join("trials.json"))?;
    report::sort_rows(&mut rows);
    write_text(&a.out.out.join("trials.csv"), &report::to_csv(&rows))
}

#[derive(Serialize)]
struct GenerationRecord {
    index: usize,
    modality: Modality,
    ids: Vec<u32>,
    truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

fn generate_cmd(a: GenerateArgs) -> CliResult<()> {
    let space = load_space(&a.manifest)?;
    let params = load_model(&a.model, &space)?;
    let task = parse_task(&a.task)?;
    let codec = a.codec.as_ref().map(|p| load_codec(p, &space)).transpose()?;
    let prompts: Vec<TokenRun> = match (&a.input, &a.text) {
        (Some(p), None) => {
            require(p)?;
            let runs = read_token_runs(p)?;
            for r in &runs {
                r.validate(&space)
                    .map_err(|e| Error::ManifestMismatch(format!("{}: {e}", p.display())))?;
            }
            runs
        }
        (None, Some(t)) => vec![space.encode_text(t)?],
        _ => return Err(usage("give exactly one of --input or --text")),
    };
    let options = GenerateOptions {
        max_new: a.max_new,
        constrained: !a.unconstrained,
    };
    let mut records = Vec::with_capacity(prompts.len());
    for (index, prompt) in prompts.iter().enumerate() {
        let g = generate(&params, &space, task, prompt, options)?;
        let text = detokenize(&g.output, &space, codec.as_ref()).ok();
        records.push(GenerationRecord {
            index,
            modality: g.output.modality,
            ids: g.output.ids,
            truncated: g.truncated,
            text,
        });
    }
    out_dir(&a.out.out)?;
    write_jsonl(a.out.out.join("generations.jsonl"), &records)?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, jobs: usize) -> CliResult<()> {
    let space = load_space(&a.manifest)?;
    let params = load_model(&a.model, &space)?;
    require(&a.data)?;
    let mut data = read_dataset(&a.data, &space)?;
    if let Some(limit) = a.limit {
        data.truncate(limit);
    }
    let metric: DevMetric = a.metric.parse().map_err(|e: Error| usage(e.to_string()))?;
    let codec = a.codec.as_ref().map(|p| load_codec(p, &space)).transpose()?;
    let mut options = EvalOptions::new(metric);
    options.max_new = a.max_new;
    options.jobs = jobs;
    options.bleu = BleuOptions {
        smoothing: !a.no_smoothing,
    };
    let report = evaluate(&params, &space, codec.as_ref(), &data, &options)?;
    out_dir(&a.out.out)?;
    write_json(&a.out.out.join("eval.json"), &report)?;
    println!("{} {}", report.metric, report.value);
    Ok(())
}

fn report_cmd(a: ReportArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    for p in &a.input {
        require(p)?;
        rows.extend(report::rows_from_file(p)?);
    }
    report::sort_rows(&mut rows);
    let text = report::to_text(&rows);
    out_dir(&a.out.out)?;
    write_text(&a.out.out.join("report.txt"), &text)?;
    write_text(&a.out.out.join("report.csv"), &report::to_csv(&rows))?;
    print!("{text}");
    Ok(())
}
