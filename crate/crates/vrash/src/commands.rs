//! The subcommands as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use thiserror::Error;
use vrash_core::hash::fnv1a;
use vrash_core::midi::{encode_smf, DEFAULT_TEMPO_US_PER_QUARTER};
use vrash_core::models::{HeadSizes, LATENT_DIM};
use vrash_core::pipeline::filter_track;
use vrash_core::tokenizer::{build_vocab, decode_track, encode_track, TokenTrack};
use vrash_core::training::{evaluate, split_tracks, train, EvalResult, Split};
use vrash_core::{CorpusRecord, ModelKind, RngStream, Vocab};

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::config::{ConfigError, Settings};
use crate::corpus::{build_corpus, corpus_to_string, entropy_histogram_csv, file_candidates, filter_report_csv, parse_corpus, Manifest};
use crate::reports::{fmt_f64, latent_header, latent_row, metric_row_csv, metrics_csv, RunManifest};

/// Ticks per quarter note of generated files.
pub const OUTPUT_DIVISION: u16 = 480;

/// Failure of a command, split by exit code.
#[derive(Debug, Error)]
pub enum CommandError {
    /// Bad invocation or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Bad or missing data; exit code 1.
    #[error(transparent)]
    Data(#[from] anyhow::Error),
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        CommandError::Usage(e.to_string())
    }
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Usage(_) => 2,
            CommandError::Data(_) => 1,
        }
    }
}

pub type CmdResult<T> = Result<T, CommandError>;

fn usage<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(CommandError::Usage(msg.into()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn artifact_name(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn read_corpus(path: &Path) -> anyhow::Result<(Vec<CorpusRecord>, u64)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let records = parse_corpus(&text).with_context(|| format!("in {}", path.display()))?;
    Ok((records, fnv1a(text.as_bytes())))
}

pub fn tokenize_corpus(records: &[CorpusRecord], vocab: &Vocab) -> anyhow::Result<Vec<TokenTrack>> {
    records
        .iter()
        .map(|r| encode_track(r, vocab).with_context(|| format!("tokenizing {}", r.source)))
        .collect()
}

/// Summary of an ingest run.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub kept: usize,
    pub candidates: usize,
    pub files: usize,
    pub skipped: usize,
}

pub fn cmd_ingest(input: &Path, manifest_file: Option<&Path>, settings: &Settings, out: &Path) -> CmdResult<IngestSummary> {
    if !input.is_dir() {
        return usage(format!("input directory {} does not exist", input.display()));
    }
    let manifest = match manifest_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading manifest {}", p.display()))?;
            Manifest::parse(&text).map_err(anyhow::Error::from)?
        }
        None => Manifest::default(),
    };
    let started = Instant::now();
    let mut run = RunManifest::start("ingest", settings.to_text(), None, settings.seed);
    run.write(out).context("writing run manifest")?;

    let build = build_corpus(input, &manifest, &settings.filter).map_err(anyhow::Error::from)?;
    let corpus = corpus_to_string(&build.records);
    let mut outputs = vec![
        (out.join("corpus.jsonl"), corpus.clone()),
        (out.join("filter_report.csv"), filter_report_csv(&build.report)),
        (out.join("entropy_histogram.csv"), entropy_histogram_csv(&build.report)),
    ];
    if !build.records.is_empty() {
        let vocab = build_vocab(&build.records).map_err(anyhow::Error::from)?;
        outputs.push((out.join("vocab.txt"), vocab.to_text()));
    }
    for (path, text) in &outputs {
        write_file(path, text)?;
        run.artifacts.push(artifact_name(out, path));
    }
    run.corpus_fingerprint = format!("{:016x}", fnv1a(corpus.as_bytes()));
    run.wall_clock_secs = started.elapsed().as_secs_f64();
    run.write(out).context("writing run manifest")?;
    log::info!(
        "ingest: {} files, {} candidate tracks, {} kept, {} files skipped",
        build.files,
        build.candidates,
        build.report.kept,
        build.skipped.len()
    );
    Ok(IngestSummary {
        kept: build.report.kept,
        candidates: build.candidates,
        files: build.files,
        skipped: build.skipped.len(),
    })
}

/// One row of the comparison table printed by `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub cell: String,
    pub best_step: u64,
    pub steps: u64,
    pub train_ce: f64,
    pub valid_ce: Option<f64>,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn summary_table(rows: &[TrainSummary]) -> String {
    let mut s = format!("{:<6} {:<6} {:>9} {:>12} {:>12}\n", "model", "cell", "best_step", "train_ce", "valid_ce");
    for r in rows {
        let valid = r.valid_ce.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!("{:<6} {:<6} {:>9} {:>12.4} {:>12}\n", r.model.tag(), r.cell, r.best_step, r.train_ce, valid));
    }
    s
}

pub fn cmd_train(corpus: &Path, settings: &Settings, models: &[ModelKind], out: &Path) -> CmdResult<Vec<TrainSummary>> {
    if models.is_empty() {
        return usage("no models selected");
    }
    let (records, fingerprint) = read_corpus(corpus)?;
    if records.is_empty() {
        return Err(anyhow::anyhow!("corpus {} is empty", corpus.display()).into());
    }
    for kind in models {
        settings
            .train_config(*kind)
            .validate()
            .map_err(|e| CommandError::Usage(e.to_string()))?;
    }
    let started = Instant::now();
    let mut run = RunManifest::start("train", settings.to_text(), Some(fingerprint), settings.seed);
    run.write(out).context("writing run manifest")?;

    let vocab = build_vocab(&records).map_err(anyhow::Error::from)?;
    let tracks = tokenize_corpus(&records, &vocab)?;
    let sizes = HeadSizes::from_vocab(&vocab);
    let vocab_path = out.join("vocab.txt");
    write_file(&vocab_path, vocab.to_text())?;
    run.artifacts.push(artifact_name(out, &vocab_path));

    let mut summaries = Vec::new();
    for &kind in models {
        let cfg = settings.train_config(kind);
        let run_dir = out.join(format!("{}-{}", settings.run_name, kind.tag()));
        let tag = kind.tag();
        let outcome = train(&tracks, sizes, &cfg, &mut |rows| {
            for r in rows {
                log::info!("{tag}: {}", metric_row_csv(r));
            }
        })
        .map_err(|e| anyhow::anyhow!("training {tag}: {e}"))?;

        let metrics = run_dir.join("metrics.csv");
        write_file(&metrics, metrics_csv(&outcome.log))?;
        let best_path = checkpoint_path(&run_dir, outcome.best_step);
        let ckpt = |model, step| Checkpoint {
            seed: cfg.seed,
            step,
            vocab: vocab.clone(),
            model,
        };
        ckpt(outcome.best.clone(), outcome.best_step)
            .save(&best_path)
            .map_err(anyhow::Error::from)?;
        let last_path = checkpoint_path(&run_dir, outcome.steps);
        if outcome.steps != outcome.best_step {
            ckpt(outcome.last.clone(), outcome.steps)
                .save(&last_path)
                .map_err(anyhow::Error::from)?;
        }
        for p in [&metrics, &best_path, &last_path] {
            let name = artifact_name(out, p);
            if !run.artifacts.contains(&name) {
                run.artifacts.push(name);
            }
        }

        let at_best = |split| outcome.log.at(outcome.best_step, split).map(|r| r.ce_total);
        summaries.push(TrainSummary {
            model: kind,
            cell: cfg.model.cell.tag(),
            best_step: outcome.best_step,
            steps: outcome.steps,
            train_ce: at_best(Split::Train).unwrap_or(f64::NAN),
            valid_ce: at_best(Split::Valid),
            best_checkpoint: best_path,
            metrics,
        });
        log::info!("{tag}: stopped after {} steps ({:?})", outcome.steps, outcome.stop);
    }
    run.wall_clock_secs = started.elapsed().as_secs_f64();
    run.write(out).context("writing run manifest")?;
    Ok(summaries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateMode {
    Prior,
    Reconstruct,
    Greedy,
}

impl GenerateMode {
    pub fn parse(s: &str) -> Option<GenerateMode> {
        match s {
            "prior" => Some(GenerateMode::Prior),
            "reconstruct" => Some(GenerateMode::Reconstruct),
            "greedy" => Some(GenerateMode::Greedy),
            _ => None,
        }
    }
}

/// Ticks that one unit of delay ratio lasts at 120 BPM.
pub fn median_pause_ticks(median_pause_ms: f64) -> u64 {
    let ticks = median_pause_ms * 1000.0 * f64::from(OUTPUT_DIVISION) / f64::from(DEFAULT_TEMPO_US_PER_QUARTER);
    (ticks.round() as u64).max(1)
}

pub struct GenerateRequest<'a> {
    pub checkpoint: &'a Path,
    pub mode: GenerateMode,
    /// Source melody for reconstruct mode.
    pub input: Option<&'a Path>,
    pub vocab: Option<&'a Path>,
    pub out: &'a Path,
}

fn expected_fingerprint(vocab: Option<&Path>) -> anyhow::Result<Option<u64>> {
    match vocab {
        None => Ok(None),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading vocab {}", p.display()))?;
            Ok(Some(Vocab::from_text(&text)?.fingerprint()))
        }
    }
}

fn load_checkpoint(path: &Path, vocab: Option<&Path>) -> anyhow::Result<Checkpoint> {
    let expected = expected_fingerprint(vocab)?;
    Checkpoint::load(path, expected).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn meta_index(vocab: &Vocab, settings: &Settings) -> CmdResult<usize> {
    match &settings.meta_label {
        Some(l) => vocab
            .label_index(l)
            .map_err(|_| CommandError::Usage(format!("meta label `{l}` is not in the checkpoint vocabulary"))),
        None => Ok(0),
    }
}

/// Generate MIDI files; returns their paths.
pub fn cmd_generate(req: &GenerateRequest<'_>, settings: &Settings) -> CmdResult<Vec<PathBuf>> {
    let ckpt = load_checkpoint(req.checkpoint, req.vocab)?;
    let model = &ckpt.model;
    let meta = meta_index(&ckpt.vocab, settings)?;
    let ticks = median_pause_ticks(settings.median_pause_ms);
    if !(settings.median_pause_ms > 0.0) {
        return usage("median_pause_ms must be positive");
    }
    let started = Instant::now();
    let mut run = RunManifest::start("generate", settings.to_text(), None, settings.seed);
    run.write(req.out).context("writing run manifest")?;

    let mut melodies = Vec::new();
    match req.mode {
        GenerateMode::Prior | GenerateMode::Greedy => {
            let temperature = match req.mode {
                GenerateMode::Prior => {
                    if !(settings.temperature > 0.0) {
                        return usage("temperature must be positive");
                    }
                    Some(settings.temperature)
                }
                _ => None,
            };
            let root = RngStream::new(settings.seed);
            for i in 0..settings.count {
                let mut rng = root.fork(i as u64);
                let notes = model
                    .generate(None, meta, temperature, &mut rng, settings.max_generated_notes)
                    .map_err(anyhow::Error::from)?;
                melodies.push((format!("sample_{i:04}.mid"), notes));
            }
        }
        GenerateMode::Reconstruct => {
            if !model.kind().is_variational() {
                return Err(anyhow::anyhow!("reconstruct mode needs a vae or vrash checkpoint; {} is a language model", req.checkpoint.display()).into());
            }
            let Some(input) = req.input else {
                return usage("reconstruct mode needs --input");
            };
            let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
            let candidates = file_candidates(&bytes).map_err(|e| anyhow::anyhow!("{}: {e}", input.display()))?;
            let track = candidates
                .values()
                .find_map(|notes| filter_track(notes, &settings.filter).result.ok())
                .ok_or_else(|| anyhow::anyhow!("{} has no track that passes the filters", input.display()))?;
            let record = CorpusRecord {
                source: input.display().to_string(),
                meta_label: ckpt.vocab.meta_labels.get(meta).cloned().unwrap_or_default(),
                program: 0,
                entropy_bits: 0.0,
                track,
            };
            let tokens = encode_track(&record, &ckpt.vocab).map_err(anyhow::Error::from)?;
            let (mu, _) = model.latent_mean(&tokens).map_err(anyhow::Error::from)?;
            let mut rng = RngStream::new(settings.seed);
            let notes = model
                .generate(Some(&mu), meta, None, &mut rng, settings.max_generated_notes)
                .map_err(anyhow::Error::from)?;
            melodies.push(("reconstruct.mid".to_string(), notes));
        }
    }

    let mut paths = Vec::new();
    for (name, tokens) in melodies {
        let notes = decode_track(&tokens, &ckpt.vocab, ticks).map_err(anyhow::Error::from)?;
        let smf = encode_smf(&notes, OUTPUT_DIVISION, DEFAULT_TEMPO_US_PER_QUARTER).map_err(anyhow::Error::from)?;
        let path = req.out.join(name);
        write_file(&path, smf)?;
        run.artifacts.push(artifact_name(req.out, &path));
        paths.push(path);
    }
    run.wall_clock_secs = started.elapsed().as_secs_f64();
    run.write(req.out).context("writing run manifest")?;
    Ok(paths)
}

/// Latent means of every corpus track as CSV text.
pub fn cmd_export_latents(checkpoint: &Path, corpus: &Path, vocab: Option<&Path>, out: &Path) -> CmdResult<usize> {
    let ckpt = load_checkpoint(checkpoint, vocab)?;
    if !ckpt.model.kind().is_variational() {
        return Err(anyhow::anyhow!("export-latents needs a vae or vrash checkpoint; {} is a language model", checkpoint.display()).into());
    }
    let (records, _) = read_corpus(corpus)?;
    let tracks = tokenize_corpus(&records, &ckpt.vocab)?;
    let mut csv = latent_header();
    csv.push('\n');
    for (rec, track) in records.iter().zip(&tracks) {
        let (mu, _) = ckpt.model.latent_mean(track).map_err(anyhow::Error::from)?;
        debug_assert_eq!(mu.len(), LATENT_DIM);
        csv.push_str(&latent_row(&rec.source, &rec.meta_label, &mu));
        csv.push('\n');
    }
    write_file(out, csv)?;
    Ok(records.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Valid,
    All,
}

pub const EVAL_HEADER: &str = "model,split,tracks,ce_total,ce_pitch,ce_octave,ce_delay,kl,accuracy";

pub fn cmd_eval(checkpoint: &Path, corpus: &Path, vocab: Option<&Path>, split: EvalSplit, settings: &Settings) -> CmdResult<(EvalResult, String)> {
    let ckpt = load_checkpoint(checkpoint, vocab)?;
    let (records, _) = read_corpus(corpus)?;
    let tracks = tokenize_corpus(&records, &ckpt.vocab)?;
    let (train_set, valid_set) = split_tracks(&tracks, settings.eval_split_fraction);
    let (name, chosen) = match split {
        EvalSplit::Train => ("train", train_set),
        EvalSplit::Valid => ("valid", valid_set),
        EvalSplit::All => ("all", tracks),
    };
    if chosen.is_empty() {
        return Err(anyhow::anyhow!("the {name} split is empty").into());
    }
    let r = evaluate(&ckpt.model, &chosen).map_err(anyhow::Error::from)?;
    let mut line = format!("{},{name},{}", ckpt.model.kind().tag(), r.tracks);
    for v in [r.ce_total, r.ce_pitch, r.ce_octave, r.ce_delay, r.kl, r.accuracy] {
        line.push(',');
        line.push_str(&fmt_f64(v));
    }
    Ok((r, line))
}
