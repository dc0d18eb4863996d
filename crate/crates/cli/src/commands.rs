//! Command implementations.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ctxtts::corpus::{
    generate_synthetic_corpus, phoneme_inventory, read_corpus, read_speaker_stats, speaker_stats_table, split_corpus,
    write_corpus, write_speaker_stats, Book, CorpusManifest, GeneratorSpec, SpeakerPitchStats,
};
use ctxtts::inference::{
    mean_abs_difference, outputs_to_manifest, sample_random_contexts, sidecar_records, synthesize_book,
    synthesize_with_context, ContextOverride, SynthesisOptions, SynthesisOutput,
};
use ctxtts::metrics::{evaluate_run, write_scores_table, ProsodyScores, SpeakerClassifier, SynthesizedUtterance};
use ctxtts::text_context::{LateralMode, ProviderSpec};
use ctxtts::training::{ablation_matrix, configure, CheckpointMeta, TrainConfig, TrainedModel, Trainer};
use ctxtts::tts::ModelConfig;
use serde::{Deserialize, Serialize};
use tracing::{error, info};

use crate::layout::{guard, RunDir, SYNTH_STEM, TEST_STEM, TRAIN_STEM};
use crate::plot::{self, Curve};
use crate::{usage, AblateArgs, Cli, CliError, Command, EvaluateArgs, Modality, PlotArgs, PrepareArgs, SynthesizeArgs, TrainArgs};

type CmdResult<T = ()> = Result<T, CliError>;

pub fn dispatch(cli: &Cli) -> CmdResult {
    let rd = RunDir::new(&cli.run_dir);
    match &cli.command {
        Command::Prepare(a) => prepare(&rd, a),
        Command::Train(a) => train(&rd, a),
        Command::Synthesize(a) => synthesize(&rd, a),
        Command::Evaluate(a) => evaluate(&rd, a),
        Command::Ablate(a) => ablate(&rd, a),
        Command::Plot(a) => plot_contours(&rd, a),
    }
}

/// What `prepare` did, kept next to the manifests.
#[derive(Debug, Serialize, Deserialize)]
pub struct PrepareRecord {
    pub seed: u64,
    pub source: String,
    pub held_out: Vec<String>,
    pub generator: Option<GeneratorSpec>,
}

fn prepare(rd: &RunDir, a: &PrepareArgs) -> CmdResult {
    let (corpus, generator, source) = if a.synthetic {
        let mut spec: GeneratorSpec = match &a.spec {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => GeneratorSpec::default(),
        };
        if let Some(c) = a.cue {
            spec.cue_lateral = c.into();
        }
        if let Some(n) = a.speakers {
            spec.speakers = n;
        }
        if let Some(n) = a.books {
            spec.books_per_speaker = n;
        }
        if let Some(n) = a.utterances {
            spec.utterances_per_book = n;
        }
        spec.validate().map_err(|e| usage(e.to_string()))?;
        (generate_synthetic_corpus(a.seed, &spec)?, Some(spec), "synthetic".to_string())
    } else if let Some(dir) = &a.manifest {
        (read_corpus(dir, "corpus").with_context(|| format!("reading corpus in {}", dir.display()))?, None, dir.display().to_string())
    } else {
        return Err(usage("prepare needs --synthetic or --manifest <dir>"));
    };

    let held: Vec<String> = if a.hold_out.is_empty() {
        corpus
            .speakers
            .iter()
            .filter_map(|s| corpus.books.iter().rev().find(|b| b.speaker_id() == Some(s.as_str())).map(|b| b.id.clone()))
            .collect()
    } else {
        a.hold_out.clone()
    };
    if let Some(bad) = held.iter().find(|h| corpus.book(h).is_none()) {
        return Err(usage(format!("--hold-out names unknown book `{bad}`")));
    }
    let held_refs: Vec<&str> = held.iter().map(String::as_str).collect();
    let split = split_corpus(&corpus, &held_refs)?;
    if split.train.books.is_empty() {
        return Err(usage("every book is held out; nothing left to train on"));
    }

    let data = rd.data();
    let targets = [
        data.join(format!("{TRAIN_STEM}.manifest")),
        data.join(format!("{TEST_STEM}.manifest")),
        rd.stats(),
        rd.prepare_record(),
    ];
    guard(a.force, &targets.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    fs::create_dir_all(&data)?;
    write_corpus(&split.train, &data, TRAIN_STEM)?;
    write_corpus(&split.test, &data, TEST_STEM)?;
    write_speaker_stats(&rd.stats(), &speaker_stats_table(&split.train)?)?;
    let record = PrepareRecord { seed: a.seed, source, held_out: held, generator };
    fs::write(rd.prepare_record(), toml::to_string(&record)?)?;
    println!(
        "train: {} utterances in {} books; test: {} utterances in {} books",
        split.train.num_utterances(),
        split.train.books.len(),
        split.test.num_utterances(),
        split.test.books.len()
    );
    Ok(())
}

pub struct Prepared {
    pub train: CorpusManifest,
    pub test: CorpusManifest,
    pub stats: BTreeMap<String, SpeakerPitchStats>,
}

pub fn load_prepared(rd: &RunDir) -> anyhow::Result<Prepared> {
    let data = rd.data();
    let hint = || format!("no prepared corpus in {}; run `ctxtts prepare` first", data.display());
    Ok(Prepared {
        train: read_corpus(&data, TRAIN_STEM).with_context(hint)?,
        test: read_corpus(&data, TEST_STEM).with_context(hint)?,
        stats: read_speaker_stats(&rd.stats()).with_context(hint)?,
    })
}

/// Run configuration file; every key is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub id: Option<String>,
    /// Training window length in characters.
    pub k: Option<usize>,
    /// Inference window length in characters.
    pub eval_k: Option<usize>,
    pub provider: Option<ProviderSpec>,
    pub train: Option<TrainConfig>,
}

/// Fully resolved run, stored as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub id: String,
    pub model: ModelConfig,
    pub provider: ProviderSpec,
    pub train: TrainConfig,
    pub eval_k: Option<usize>,
    pub checkpoint_from: Option<String>,
}

pub fn default_provider() -> ProviderSpec {
    ProviderSpec::ToyHash { dim: 32 }
}

pub fn base_model(corpus: &CorpusManifest) -> ModelConfig {
    ModelConfig::desk(corpus.features.mel_bins, corpus.features.phonemes.len(), corpus.speakers.len())
}

fn apply_modality(m: &mut ModelConfig, modality: Modality) {
    let lateral = if m.tce.mode == LateralMode::None { LateralMode::Bi } else { m.tce.mode };
    (m.use_ace, m.tce.mode) = match modality {
        Modality::None => (false, LateralMode::None),
        Modality::Acoustic => (true, LateralMode::None),
        Modality::Textual => (false, lateral),
        Modality::Both => (true, lateral),
    };
}

fn resolve_job(a: &TrainArgs, prepared: &Prepared) -> CmdResult<TrainJob> {
    let file: RunFile = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunFile::default(),
    };
    let id = a.id.clone().or(file.id).unwrap_or_else(|| "atce-bi".into());
    let mut model = configure(&id, &base_model(&prepared.train)).map_err(|e| usage(e.to_string()))?;
    if let Some(k) = file.k {
        model.tce.k = k;
    }
    if let Some(m) = a.modality {
        apply_modality(&mut model, m);
    }
    let mut train = file.train.unwrap_or_default();
    train.ablation_id = id.clone();
    if let Some(s) = a.max_steps {
        train.max_steps = s;
    }
    if let Some(s) = a.seed {
        train.seed = s;
    }
    if !model.use_ace {
        train.lambda_ace = 0.0;
    }
    model.validate().map_err(|e| usage(e.to_string()))?;
    train.validate().map_err(|e| usage(e.to_string()))?;
    Ok(TrainJob { id, model, provider: file.provider.unwrap_or_else(default_provider), train, eval_k: file.eval_k, checkpoint_from: None })
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Trains (or resumes) a job and writes its checkpoint, optimizer state, log and
/// resolved configuration.
pub fn run_training(rd: &RunDir, job: &TrainJob, prepared: &Prepared, resume: bool) -> anyhow::Result<TrainedModel> {
    let dir = rd.run(&job.id);
    fs::create_dir_all(&dir)?;
    let mut trainer = if resume {
        let t = Trainer::resume(&rd.model(&job.id), &rd.optimizer(&job.id), job.train.clone())
            .with_context(|| format!("resuming {}", job.id))?;
        if t.model.meta.ablation_id != job.id {
            return Err(anyhow!("checkpoint belongs to `{}`, not `{}`", t.model.meta.ablation_id, job.id));
        }
        t
    } else {
        let meta = CheckpointMeta {
            ablation_id: job.id.clone(),
            step: 0,
            model: job.model.clone(),
            provider: job.provider.clone(),
            features: prepared.train.features.clone(),
            speakers: prepared.train.speakers.clone(),
            stats: prepared.stats.values().cloned().collect(),
        };
        Trainer::new(TrainedModel::init(meta, job.train.seed)?, job.train.clone())?
    };
    let items = trainer.model.training_items(&prepared.train)?;
    let log_file = fs::OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(rd.train_log(&job.id))?;
    let mut log = BufWriter::new(log_file);
    info!(id = %job.id, from = trainer.step_count(), to = job.train.max_steps, "training");
    let records = trainer.run(&items, &mut log).with_context(|| format!("training {}", job.id))?;
    log.flush()?;
    trainer.save(&rd.model(&job.id), &rd.optimizer(&job.id))?;
    write_json(&rd.run_config(&job.id), job)?;
    if let Some(last) = records.last() {
        info!(id = %job.id, step = last.step, loss = last.loss.total, "saved checkpoint");
    }
    Ok(trainer.model)
}

fn train(rd: &RunDir, a: &TrainArgs) -> CmdResult {
    let prepared = load_prepared(rd)?;
    let job = resolve_job(a, &prepared)?;
    if a.resume {
        if !rd.optimizer(&job.id).exists() {
            return Err(usage(format!("nothing to resume: {} is missing", rd.optimizer(&job.id).display())));
        }
    } else {
        guard(a.force, &[&rd.model(&job.id), &rd.train_log(&job.id)])?;
    }
    let model = run_training(rd, &job, &prepared, a.resume)?;
    println!("{} trained to step {}", job.id, model.meta.step);
    Ok(())
}

fn check_compatible(model: &TrainedModel, corpus: &CorpusManifest) -> anyhow::Result<()> {
    if model.meta.features != corpus.features || model.meta.speakers != corpus.speakers {
        return Err(anyhow!(
            "checkpoint `{}` was trained on a different feature layout or speaker table",
            model.meta.ablation_id
        ));
    }
    Ok(())
}

/// Synthesizes books and writes `synth.manifest`, `synth.features` and the sidecar.
pub fn run_synthesis(
    rd: &RunDir,
    id: &str,
    model: &TrainedModel,
    template: &CorpusManifest,
    books: &[&Book],
    opts: &SynthesisOptions,
) -> anyhow::Result<Vec<SynthesisOutput>> {
    check_compatible(model, template)?;
    let mut pairs = Vec::with_capacity(books.len());
    for &book in books {
        let outs = synthesize_book(model, book, opts).with_context(|| format!("synthesizing {}", book.id))?;
        pairs.push((book, outs));
    }
    let dir = rd.synth(id);
    fs::create_dir_all(&dir)?;
    write_corpus(&outputs_to_manifest(template, &pairs), &dir, SYNTH_STEM)?;
    let mut side = BufWriter::new(File::create(rd.sidecar(id))?);
    for (_, outs) in &pairs {
        for rec in sidecar_records(outs, opts) {
            serde_json::to_writer(&mut side, &rec)?;
            side.write_all(b"\n")?;
        }
    }
    side.flush()?;
    Ok(pairs.into_iter().flat_map(|(_, o)| o).collect())
}

fn read_run_job(rd: &RunDir, id: &str) -> Option<TrainJob> {
    fs::read_to_string(rd.run_config(id)).ok().and_then(|t| serde_json::from_str(&t).ok())
}

fn load_model(rd: &RunDir, id: &str) -> anyhow::Result<TrainedModel> {
    let path = rd.model(id);
    TrainedModel::load(&path).with_context(|| format!("loading {}; train `{id}` first", path.display()))
}

fn synthesize(rd: &RunDir, a: &SynthesizeArgs) -> CmdResult {
    let prepared = load_prepared(rd)?;
    let overrides = a
        .context_override
        .iter()
        .map(|s| s.parse::<ContextOverride>().map_err(|e| usage(e.to_string())))
        .collect::<CmdResult<Vec<_>>>()?;
    if a.k_override == Some(0) {
        return Err(usage("--k-override must be positive"));
    }
    let books: Vec<&Book> = if a.book.is_empty() {
        prepared.test.books.iter().collect()
    } else {
        a.book
            .iter()
            .map(|b| {
                prepared.test.book(b).or_else(|| prepared.train.book(b)).ok_or_else(|| usage(format!("unknown book `{b}`")))
            })
            .collect::<CmdResult<Vec<_>>>()?
    };
    let model = load_model(rd, &a.id)?;
    let eval_k = read_run_job(rd, &a.id).and_then(|j| j.eval_k);
    let opts = SynthesisOptions { k_override: a.k_override.or(eval_k), overrides };
    guard(a.force, &[&rd.synth(&a.id).join(format!("{SYNTH_STEM}.manifest")), &rd.sidecar(&a.id)])?;
    let outs = run_synthesis(rd, &a.id, &model, &prepared.test, &books, &opts)?;
    println!("{}: synthesized {} utterances into {}", a.id, outs.len(), rd.synth(&a.id).display());
    Ok(())
}

/// Synthesized outputs of a run, read back from its feature archive.
pub fn read_outputs(rd: &RunDir, id: &str) -> anyhow::Result<Vec<SynthesizedUtterance>> {
    let dir = rd.synth(id);
    let m = read_corpus(&dir, SYNTH_STEM).with_context(|| format!("no synthesized outputs for `{id}` in {}", dir.display()))?;
    Ok(m.utterances().map(to_metric_input).collect())
}

fn to_metric_input(u: &ctxtts::corpus::Utterance) -> SynthesizedUtterance {
    SynthesizedUtterance { book_id: u.book_id.clone(), index: u.index, mel: u.mel.clone(), f0: u.pitch.clone() }
}

fn write_table(path: &Path, rows: &[(String, Option<ProsodyScores>)]) -> anyhow::Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    write_scores_table(&mut buf, rows)?;
    fs::write(path, &buf)?;
    Ok(String::from_utf8(buf)?)
}

fn evaluate(rd: &RunDir, a: &EvaluateArgs) -> CmdResult {
    let prepared = load_prepared(rd)?;
    let mut ids: Vec<String> = a.compare.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if ids.is_empty() {
        ids.extend(a.id.clone());
    }
    let out = match (&a.out, ids.as_slice()) {
        (Some(p), _) => p.clone(),
        (None, [one]) if a.compare.is_empty() && !a.ground_truth => rd.scores(one),
        (None, _) if a.ground_truth && ids.is_empty() => rd.reports().join("ground-truth.tsv"),
        (None, _) => rd.reports().join("compare.tsv"),
    };
    guard(a.force, &[&out])?;
    let classifier = SpeakerClassifier::fit_manifest(&prepared.train, a.seed)?;
    let mut rows = Vec::new();
    if a.ground_truth {
        let outs: Vec<SynthesizedUtterance> = prepared.test.utterances().map(to_metric_input).collect();
        rows.push(("ground-truth".to_string(), Some(evaluate_run(&outs, &prepared.test, &classifier)?.0)));
    }
    for id in &ids {
        let outs = read_outputs(rd, id)?;
        let (scores, _) = evaluate_run(&outs, &prepared.test, &classifier).with_context(|| format!("scoring {id}"))?;
        if scores.undefined_f0 > 0 {
            info!(id = %id, utterances = scores.undefined_f0, "utterances without jointly voiced frames left out of F0 metrics");
        }
        rows.push((id.clone(), Some(scores)));
    }
    print!("{}", write_table(&out, &rows)?);
    Ok(())
}

fn ablate(rd: &RunDir, a: &AblateArgs) -> CmdResult {
    let prepared = load_prepared(rd);
    let base = match &prepared {
        Ok(p) => base_model(&p.train),
        Err(_) if a.dry_run => ModelConfig::desk(GeneratorSpec::default().mel_bins, phoneme_inventory().len(), 1),
        Err(e) => return Err(CliError::Runtime(anyhow!("{e:#}"))),
    };
    let train = TrainConfig { seed: a.seed, max_steps: a.max_steps.unwrap_or(TrainConfig::default().max_steps), ..TrainConfig::default() };
    let runs = ablation_matrix(a.suite.into(), &base, &train);
    if a.dry_run {
        println!("id\tuse_ace\tlateral\tk\teval_k\tcheckpoint_from");
        for r in &runs {
            println!(
                "{}\t{}\t{:?}\t{}\t{}\t{}",
                r.id,
                r.model.use_ace,
                r.model.tce.mode,
                r.model.tce.k,
                r.eval_k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
                r.checkpoint_from.as_deref().unwrap_or("-")
            );
        }
        return Ok(());
    }
    let prepared = prepared?;
    let suite_name = match a.suite {
        crate::SuiteArg::Table1 => "table1",
        crate::SuiteArg::Table2 => "table2",
    };
    let report = rd.reports().join(format!("{suite_name}.tsv"));
    let mut existing: Vec<PathBuf> = vec![report.clone()];
    existing.extend(runs.iter().filter(|r| r.checkpoint_from.is_none()).map(|r| rd.model(&r.id)));
    guard(a.force, &existing.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;

    let classifier = SpeakerClassifier::fit_manifest(&prepared.train, a.seed)?;
    let books: Vec<&Book> = prepared.test.books.iter().collect();
    let mut rows = Vec::with_capacity(runs.len());
    for r in &runs {
        let job = TrainJob {
            id: r.id.clone(),
            model: r.model.clone(),
            provider: default_provider(),
            train: r.train.clone(),
            eval_k: r.eval_k,
            checkpoint_from: r.checkpoint_from.clone(),
        };
        let result = (|| -> anyhow::Result<ProsodyScores> {
            let model = match &r.checkpoint_from {
                Some(from) => {
                    fs::create_dir_all(rd.run(&r.id))?;
                    write_json(&rd.run_config(&r.id), &job)?;
                    load_model(rd, from)?
                }
                None => run_training(rd, &job, &prepared, false)?,
            };
            let opts = SynthesisOptions { k_override: r.eval_k, overrides: vec![] };
            let outs = run_synthesis(rd, &r.id, &model, &prepared.test, &books, &opts)?;
            let inputs: Vec<SynthesizedUtterance> = outs.iter().map(SynthesisOutput::to_metric_input).collect();
            Ok(evaluate_run(&inputs, &prepared.test, &classifier)?.0)
        })();
        match result {
            Ok(s) => {
                info!(id = %r.id, mcd = s.mcd, f0_rmse = s.f0_rmse, gpe = s.gpe, acc = s.speaker_acc, "row done");
                rows.push((r.id.clone(), Some(s)));
            }
            Err(e) => {
                error!(id = %r.id, "row failed: {e:#}");
                rows.push((r.id.clone(), None));
            }
        }
    }
    print!("{}", write_table(&report, &rows)?);
    let failed = rows.iter().filter(|(_, s)| s.is_none()).count();
    if failed > 0 {
        return Err(CliError::Runtime(anyhow!("{failed} of {} rows failed", rows.len())));
    }
    Ok(())
}

/// Pairwise mean absolute differences between contours, `(i, j, value)`.
pub fn pairwise_differences(curves: &[Curve]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..curves.len() {
        for j in i + 1..curves.len() {
            out.push((i, j, mean_abs_difference(&curves[i].values, &curves[j].values)));
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlotSummary {
    pub id: String,
    pub book: String,
    pub index: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    /// Source utterance of each random context.
    pub sources: Vec<String>,
    pub pairwise_mean_abs_hz: Vec<(usize, usize, f64)>,
}

fn plot_contours(rd: &RunDir, a: &PlotArgs) -> CmdResult {
    let prepared = load_prepared(rd)?;
    let corpus = &prepared.test;
    let book_id = a.book.clone().or_else(|| corpus.books.first().map(|b| b.id.clone())).ok_or_else(|| usage("no test books"))?;
    let book = corpus.book(&book_id).ok_or_else(|| usage(format!("unknown test book `{book_id}`")))?;
    if a.index >= book.utterances.len() {
        return Err(usage(format!("index {} outside book of {}", a.index, book.utterances.len())));
    }
    let stem = format!("{}-{}-{}", a.id, book_id, a.index);
    let (png, tsv, json) = (
        rd.plots().join(format!("{stem}.png")),
        rd.plots().join(format!("{stem}.tsv")),
        rd.plots().join(format!("{stem}.json")),
    );
    guard(a.force, &[&png, &tsv, &json])?;
    let model = load_model(rd, &a.id)?;
    check_compatible(&model, corpus)?;

    let prefix = Book { id: book.id.clone(), utterances: book.utterances[..=a.index].to_vec() };
    let chain = synthesize_book(&model, &prefix, &SynthesisOptions::default())?;
    let target = &book.utterances[a.index];
    let mut curves = vec![Curve { label: "Predicted".into(), values: chain.last().expect("non-empty prefix").f0.clone() }];
    let mut sources = Vec::new();
    for (k, ctx) in sample_random_contexts(&model, corpus, (&book_id, a.index), a.n, a.seed)?.into_iter().enumerate() {
        sources.push(format!("{}#{}", ctx.book_id, ctx.index));
        let out = synthesize_with_context(&model, target, ctx.text, ctx.prev_mel.as_ref())?;
        curves.push(Curve { label: format!("random-{}", k + 1), values: out.f0 });
    }
    fs::create_dir_all(rd.plots())?;
    let mut w = BufWriter::new(File::create(&tsv)?);
    plot::write_contours(&mut w, &curves)?;
    w.flush()?;
    plot::save_png(&png, &curves)?;
    let pairs = pairwise_differences(&curves);
    for &(i, j, d) in &pairs {
        println!("{} vs {}: mean |Δf0| = {d:.3} Hz", curves[i].label, curves[j].label);
    }
    let summary = PlotSummary {
        id: a.id.clone(),
        book: book_id,
        index: a.index,
        seed: a.seed,
        labels: curves.iter().map(|c| c.label.clone()).collect(),
        sources,
        pairwise_mean_abs_hz: pairs,
    };
    write_json(&json, &summary)?;
    println!("wrote {} and {}", png.display(), tsv.display());
    Ok(())
}
