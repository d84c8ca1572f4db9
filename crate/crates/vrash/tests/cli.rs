mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vrash::checkpoint::Checkpoint;
use vrash_core::midi::parse_smf;

fn vrash(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrash"))
        .args(args.iter().map(|a| a.as_ref()))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TOY_CONFIG: &str = "hidden = 16\nmax_steps = 20\neval_every = 10\nbatch_size = 4\neval_split_fraction = 0.5\nseed = 3\n";

/// Ingest a small labeled style corpus and return (dir, corpus, config).
fn toy_ingest() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let midi = dir.path().join("midi");
    let manifest = common::write_style_corpus(&midi, 6, 1, false);
    let config = dir.path().join("toy.conf");
    std::fs::write(&config, TOY_CONFIG).unwrap();
    let ingest = dir.path().join("ingest");
    let o = vrash(&[&"ingest", &midi, &"--manifest", &manifest, &"--out", &ingest, &"--config", &config]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    (dir, ingest.join("corpus.jsonl"), config)
}

fn train(dir: &Path, corpus: &Path, config: &Path, models: &str) -> PathBuf {
    let out = dir.join("train");
    let o = vrash(&[&"train", &corpus, &"--models", &models, &"--out", &out, &"--config", &config]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn best_checkpoint(run_dir: &Path) -> PathBuf {
    let mut ckpts: Vec<PathBuf> = std::fs::read_dir(run_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    ckpts.sort();
    ckpts.remove(0)
}

#[test]
fn bad_config_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "hidden = 8\nlearnig_rate = 0.1\n").unwrap();
    let o = vrash(&[&"ingest", &dir.path(), &"--out", &dir.path().join("o"), &"--config", &config]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));
}

#[test]
fn argument_errors_exit_2() {
    assert_eq!(vrash(&[&"frobnicate"]).status.code(), Some(2));
    assert_eq!(vrash(&[&"train"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = vrash(&[&"train", &dir.path().join("c.jsonl"), &"--models", &"lm,gan", &"--out", &dir.path()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gan"));
    assert_eq!(vrash(&[&"--help"]).status.code(), Some(0));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vrash(&[&"train", &dir.path().join("nope.jsonl"), &"--out", &dir.path().join("o")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ingest_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty");
    std::fs::create_dir(&input).unwrap();
    let out = dir.path().join("out");
    let o = vrash(&[&"ingest", &input, &"--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("kept=0"));
    assert_eq!(std::fs::read_to_string(out.join("corpus.jsonl")).unwrap(), "");
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn ingest_skips_corrupt_files_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let midi = dir.path().join("midi");
    let manifest = common::write_style_corpus(&midi, 5, 2, true);
    std::fs::write(midi.join("asc/broken.mid"), b"MThd\0\0\0\x06\0\x01\0\x05\x01\xe0MTrk\0\0\0\x40").unwrap();
    std::fs::write(midi.join("notes.txt"), b"not midi").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = vrash(&[&"ingest", &midi, &"--manifest", &manifest, &"--out", &out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (out, stdout(&o))
    };
    let (a, summary) = run("a");
    let (b, _) = run("b");
    assert!(summary.contains("files=11") && summary.contains("skipped_files=1") && summary.contains("kept=10"), "{summary}");
    for f in ["corpus.jsonl", "filter_report.csv", "entropy_histogram.csv", "vocab.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let corpus = std::fs::read_to_string(a.join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 10);
    assert!(corpus.contains("\"meta_label\":\"ascending\"") && corpus.contains("\"meta_label\":\"descending\""));

    let report = std::fs::read_to_string(a.join("filter_report.csv")).unwrap();
    let value = |key: &str| -> usize {
        let line = report.lines().find(|l| l.starts_with(&format!("{key},"))).unwrap();
        line.split(',').nth(1).unwrap().parse().unwrap()
    };
    let rejected: usize = ["rejected_low_entropy", "rejected_pause_variety", "rejected_too_short", "rejected_pitch_range"].iter().map(|k| value(k)).sum();
    assert_eq!(value("kept") + rejected, value("total"));
    let hist: usize = report.lines().skip(1).take_while(|l| !l.is_empty() && l.split(',').next().unwrap().parse::<f64>().is_ok()).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(hist, value("total"));
}

#[test]
fn train_generate_export_and_eval() {
    let (dir, corpus, config) = toy_ingest();
    let out = train(dir.path(), &corpus, &config, "lm,vrash");
    let table = stdout(&vrash(&[&"train", &corpus, &"--models", &"vae", &"--out", &dir.path().join("vae"), &"--config", &config]));
    assert_eq!(table.lines().filter(|l| l.starts_with("vae")).count(), 1);
    let lm_dir = out.join("run-lm");
    let vrash_dir = out.join("run-vrash");
    let metrics = std::fs::read_to_string(vrash_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,split,ce_total,ce_pitch,ce_octave,ce_delay,kl,beta");
    assert!(metrics.lines().any(|l| l.contains(",valid,")));
    let lm_ckpt = best_checkpoint(&lm_dir);
    let vrash_ckpt = best_checkpoint(&vrash_dir);

    let samples = dir.path().join("samples");
    let o = vrash(&[&"generate", &vrash_ckpt, &"--count", &"100", &"--out", &samples, &"--config", &config]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let files: Vec<PathBuf> = std::fs::read_dir(&samples).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "mid")).collect();
    assert_eq!(files.len(), 100);
    for f in &files {
        parse_smf(&std::fs::read(f).unwrap()).unwrap();
    }
    let o = vrash(&[&"generate", &lm_ckpt, &"--count", &"3", &"--temperature", &"0.5", &"--out", &dir.path().join("lm_samples")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let input = std::fs::read_dir(dir.path().join("midi/asc")).unwrap().next().unwrap().unwrap().path();
    let o = vrash(&[&"generate", &vrash_ckpt, &"--mode", &"reconstruct", &"--input", &input, &"--out", &dir.path().join("rec")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = vrash(&[&"generate", &lm_ckpt, &"--mode", &"reconstruct", &"--input", &input, &"--out", &dir.path().join("rec2")]);
    assert_eq!(o.status.code(), Some(1));

    let latents = dir.path().join("latents.csv");
    let o = vrash(&[&"export-latents", &vrash_ckpt, &corpus, &"--out", &latents]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&latents).unwrap();
    let tracks = std::fs::read_to_string(&corpus).unwrap().lines().count();
    assert_eq!(text.lines().count(), tracks + 1);
    assert!(text.starts_with("track_id,meta_label,mu0,"));
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 18));
    let o = vrash(&[&"export-latents", &lm_ckpt, &corpus, &"--out", &dir.path().join("lm.csv")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("lm.csv").exists());

    let o = vrash(&[&"eval", &vrash_ckpt, &corpus, &"--split", &"all", &"--config", &config]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o).lines().nth(1).unwrap().to_string();
    let ce: f64 = line.split(',').find_map(|f| f.parse().ok()).unwrap();
    assert!(ce.is_finite() && ce > 0.0);
}

#[test]
fn checkpoint_with_other_vocabulary_is_refused() {
    let (dir, corpus, config) = toy_ingest();
    let out = train(dir.path(), &corpus, &config, "vrash");
    let ckpt = best_checkpoint(&out.join("run-vrash"));
    let loaded = Checkpoint::load(&ckpt, None).unwrap();
    let mut other = loaded.vocab.clone();
    other.meta_labels.push("zzz".into());
    let other_path = dir.path().join("other_vocab.txt");
    std::fs::write(&other_path, other.to_text()).unwrap();
    let o = vrash(&[&"generate", &ckpt, &"--vocab", &other_path, &"--out", &dir.path().join("g")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fingerprint"), "{}", stderr(&o));
    let o = vrash(&[&"eval", &ckpt, &corpus, &"--vocab", &other_path]);
    assert_eq!(o.status.code(), Some(1));
    let o = vrash(&[&"generate", &ckpt, &"--vocab", &out.join("vocab.txt"), &"--count", &"1", &"--out", &dir.path().join("g2")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
