//! Corpus building from a directory of MIDI files, the corpus line format
//! and the filter reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vrash_core::midi::{extract_notes, parse_smf, NoteEvent};
use vrash_core::pipeline::{dominant_program, filter_track, pitch_entropy, NormalizedTrack};
use vrash_core::tokenizer::{format_ratio, parse_ratio};
use vrash_core::{CorpusRecord, FilterConfig, FilterReport};
use walkdir::WalkDir;

/// Label given to files outside every manifest directory.
pub const UNLABELED: &str = "unlabeled";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest line {line} is not of the form directory=label")]
    Manifest { line: usize },
    #[error("cannot walk {path}: {message}")]
    Walk { path: String, message: String },
}

/// One corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub source: String,
    pub meta_label: String,
    pub program: u8,
    pub pitches: Vec<u8>,
    pub delay_ratios: Vec<String>,
    pub entropy_bits: f64,
    pub transpose: i32,
    pub median_pitch_before: u8,
    pub median_pause: u64,
}

impl From<&CorpusRecord> for CorpusLine {
    fn from(r: &CorpusRecord) -> Self {
        CorpusLine {
            source: r.source.clone(),
            meta_label: r.meta_label.clone(),
            program: r.program,
            pitches: r.track.pitches.clone(),
            delay_ratios: r.track.delay_ratios.iter().map(format_ratio).collect(),
            entropy_bits: r.entropy_bits,
            transpose: r.track.transpose_semitones,
            median_pitch_before: r.track.median_pitch_before,
            median_pause: r.track.median_pause_ticks,
        }
    }
}

impl CorpusLine {
    pub fn into_record(self) -> Result<CorpusRecord, String> {
        if self.pitches.len() != self.delay_ratios.len() || self.pitches.is_empty() {
            return Err("pitches and delay_ratios must be nonempty and of equal length".into());
        }
        if self.pitches.iter().any(|&p| p > 127) {
            return Err("pitch above 127".into());
        }
        let delay_ratios = self
            .delay_ratios
            .iter()
            .map(|s| parse_ratio(s).ok_or_else(|| format!("bad ratio `{s}`")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CorpusRecord {
            source: self.source,
            meta_label: self.meta_label,
            program: self.program,
            track: NormalizedTrack {
                pitches: self.pitches,
                delay_ratios,
                median_pitch_before: self.median_pitch_before,
                transpose_semitones: self.transpose,
                median_pause_ticks: self.median_pause,
            },
            entropy_bits: self.entropy_bits,
        })
    }
}

pub fn corpus_to_string(records: &[CorpusRecord]) -> String {
    let mut out = String::new();
    for r in records {
        // Serializing a plain struct of strings and numbers cannot fail.
        out.push_str(&serde_json::to_string(&CorpusLine::from(r)).expect("corpus line serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CorpusError::Parse { line: i + 1, message };
        let parsed: CorpusLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(parsed.into_record().map_err(err)?);
    }
    Ok(out)
}

/// Maps directories (relative to the input root) to meta labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        let entries = entries
            .into_iter()
            .map(|(d, l)| (d.trim_matches('/').to_string(), l))
            .collect();
        Manifest { entries }
    }

    /// `directory=label` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Manifest, CorpusError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((d, l)) if !l.trim().is_empty() => entries.push((d.trim().to_string(), l.trim().to_string())),
                _ => return Err(CorpusError::Manifest { line: i + 1 }),
            }
        }
        Ok(Manifest::new(entries))
    }

    /// Label of the longest directory prefix containing `rel_path`.
    pub fn label_for(&self, rel_path: &str) -> &str {
        let mut best: Option<&(String, String)> = None;
        for e in &self.entries {
            let inside = e.0.is_empty() || rel_path.strip_prefix(e.0.as_str()).is_some_and(|rest| rest.starts_with('/'));
            if inside && best.is_none_or(|b| e.0.len() > b.0.len()) {
                best = Some(e);
            }
        }
        best.map_or(UNLABELED, |e| e.1.as_str())
    }
}

/// A file that could not be read or parsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBuild {
    pub records: Vec<CorpusRecord>,
    pub report: FilterReport,
    /// Candidate tracks: one per (track chunk, channel) with notes.
    pub candidates: usize,
    pub files: usize,
    pub skipped: Vec<SkippedFile>,
}

fn is_midi(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

/// Candidate melodies of one file, keyed by (track, channel).
pub fn file_candidates(bytes: &[u8]) -> Result<BTreeMap<(usize, u8), Vec<NoteEvent>>, String> {
    let smf = parse_smf(bytes).map_err(|e| e.to_string())?;
    let mut out: BTreeMap<(usize, u8), Vec<NoteEvent>> = BTreeMap::new();
    for (t, events) in smf.tracks.iter().enumerate() {
        let extracted = extract_notes(events);
        if extracted.warnings > 0 {
            log::debug!("track {t}: {} unmatched note events", extracted.warnings);
        }
        for n in extracted.notes {
            out.entry((t, n.channel)).or_default().push(n);
        }
    }
    for notes in out.values_mut() {
        notes.sort_by_key(|n| (n.onset_ticks, n.pitch));
    }
    Ok(out)
}

/// Walk `input_dir` in lexicographic path order and run every candidate
/// track through the filters. Unreadable files are logged and skipped.
pub fn build_corpus(input_dir: &Path, manifest: &Manifest, config: &FilterConfig) -> Result<CorpusBuild, CorpusError> {
    let mut build = CorpusBuild {
        records: Vec::new(),
        report: FilterReport::default(),
        candidates: 0,
        files: 0,
        skipped: Vec::new(),
    };
    let walk = WalkDir::new(input_dir).sort_by_file_name().follow_links(false);
    for entry in walk {
        let entry = match entry {
            Ok(e) => e,
            Err(e) if e.depth() == 0 => {
                return Err(CorpusError::Walk {
                    path: input_dir.display().to_string(),
                    message: e.to_string(),
                })
            }
            Err(e) => {
                log::warn!("skipping unreadable entry: {e}");
                let path = e.path().map(Path::to_path_buf).unwrap_or_default();
                build.skipped.push(SkippedFile { path, reason: e.to_string() });
                continue;
            }
        };
        if !entry.file_type().is_file() || !is_midi(entry.path()) {
            continue;
        }
        let rel: Vec<String> = entry
            .path()
            .strip_prefix(input_dir)
            .unwrap_or(entry.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let rel = rel.join("/");
        build.files += 1;

        let candidates = std::fs::read(entry.path())
            .map_err(|e| e.to_string())
            .and_then(|bytes| file_candidates(&bytes));
        let candidates = match candidates {
            Ok(c) => c,
            Err(reason) => {
                log::warn!("skipping {rel}: {reason}");
                build.skipped.push(SkippedFile {
                    path: entry.path().to_path_buf(),
                    reason,
                });
                continue;
            }
        };
        let label = manifest.label_for(&rel);
        for ((t, ch), notes) in candidates {
            build.candidates += 1;
            let outcome = filter_track(&notes, config);
            build.report.record(&outcome);
            if let Ok(track) = outcome.result {
                build.records.push(CorpusRecord {
                    source: format!("{rel}#t{t}c{ch}"),
                    meta_label: label.to_string(),
                    program: dominant_program(&notes),
                    entropy_bits: pitch_entropy(&track.pitches),
                    track,
                });
            }
        }
    }
    Ok(build)
}

/// Histogram rows `(bin, count)` followed by the totals block.
pub fn filter_report_csv(report: &FilterReport) -> String {
    let mut s = String::from("bin,count\n");
    for (lower, count) in &report.entropy_histogram {
        let _ = writeln!(s, "{lower},{count}");
    }
    for (name, count) in totals(report) {
        let _ = writeln!(s, "{name},{count}");
    }
    s
}

fn totals(report: &FilterReport) -> [(&'static str, usize); 6] {
    [
        ("kept", report.kept),
        ("rejected_low_entropy", report.rejected_low_entropy),
        ("rejected_pause_variety", report.rejected_pause_variety),
        ("rejected_too_short", report.rejected_too_short),
        ("rejected_pitch_range", report.rejected_pitch_range),
        ("total", report.total()),
    ]
}

/// Entropy distribution of every candidate before filtering.
pub fn entropy_histogram_csv(report: &FilterReport) -> String {
    let mut s = String::from("bin_lower_bits,bin_upper_bits,count\n");
    for (lower, count) in &report.entropy_histogram {
        let upper = lower + vrash_core::pipeline::ENTROPY_BIN_WIDTH;
        let _ = writeln!(s, "{lower},{upper},{count}");
    }
    s
}
