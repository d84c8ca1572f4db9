//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vrash_core::ModelKind;

use crate::commands::{cmd_eval, cmd_export_latents, cmd_generate, cmd_ingest, cmd_train, summary_table, CmdResult, CommandError, EvalSplit, GenerateMode, GenerateRequest, EVAL_HEADER};
use crate::config::Settings;

#[derive(Debug, Parser)]
#[command(name = "vrash", version, about = "Melody corpus building, training and generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a corpus from a directory of MIDI files.
    Ingest {
        input: PathBuf,
        /// directory=label lines assigning meta labels.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one or more models on a corpus file.
    Train {
        corpus: PathBuf,
        /// Comma-separated subset of lm,vae,vrash.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write generated melodies as MIDI files.
    Generate {
        checkpoint: PathBuf,
        /// prior, reconstruct or greedy.
        #[arg(long, default_value = "prior")]
        mode: String,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        /// MIDI file to reconstruct.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Vocabulary the checkpoint must match.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export latent means of every corpus track as CSV.
    ExportLatents {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Teacher-forced cross-entropy of a checkpoint on a corpus split.
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        /// train, valid or all.
        #[arg(long, default_value = "valid")]
        split: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn settings(common: &Common) -> CmdResult<Settings> {
    let mut s = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    Ok(s)
}

pub fn parse_models(list: &str) -> CmdResult<Vec<ModelKind>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let kind = ModelKind::parse(part).ok_or_else(|| CommandError::Usage(format!("unknown model `{part}`")))?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    if out.is_empty() {
        return Err(CommandError::Usage("--models is empty".into()));
    }
    Ok(out)
}

/// Run a parsed command; output for the user goes to stdout.
pub fn execute(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Ingest { input, manifest, out, common } => {
            let s = settings(&common)?;
            let r = cmd_ingest(&input, manifest.as_deref(), &s, &out)?;
            println!("files={} candidates={} kept={} skipped_files={}", r.files, r.candidates, r.kept, r.skipped);
        }
        Command::Train { corpus, models, out, common } => {
            let s = settings(&common)?;
            let models = match models {
                Some(m) => parse_models(&m)?,
                None => vec![s.model],
            };
            let rows = cmd_train(&corpus, &s, &models, &out)?;
            print!("{}", summary_table(&rows));
        }
        Command::Generate {
            checkpoint,
            mode,
            count,
            temperature,
            input,
            vocab,
            out,
            common,
        } => {
            let mut s = settings(&common)?;
            let mode = GenerateMode::parse(&mode).ok_or_else(|| CommandError::Usage(format!("unknown mode `{mode}`")))?;
            if let Some(c) = count {
                s.count = c;
            }
            if let Some(t) = temperature {
                s.temperature = t;
            }
            let req = GenerateRequest {
                checkpoint: &checkpoint,
                mode,
                input: input.as_deref(),
                vocab: vocab.as_deref(),
                out: &out,
            };
            for p in cmd_generate(&req, &s)? {
                println!("{}", p.display());
            }
        }
        Command::ExportLatents {
            checkpoint,
            corpus,
            vocab,
            out,
            common,
        } => {
            settings(&common)?;
            let n = cmd_export_latents(&checkpoint, &corpus, vocab.as_deref(), &out)?;
            println!("{n} tracks written to {}", out.display());
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            vocab,
            out,
            common,
        } => {
            let s = settings(&common)?;
            let split = match split.as_str() {
                "train" => EvalSplit::Train,
                "valid" => EvalSplit::Valid,
                "all" => EvalSplit::All,
                other => return Err(CommandError::Usage(format!("unknown split `{other}`"))),
            };
            let (_, line) = cmd_eval(&checkpoint, &corpus, vocab.as_deref(), split, &s)?;
            let text = format!("{EVAL_HEADER}\n{line}\n");
            print!("{text}");
            if let Some(out) = out {
                std::fs::write(&out, text).map_err(|e| anyhow::anyhow!("writing {}: {e}", out.display()))?;
            }
        }
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}
