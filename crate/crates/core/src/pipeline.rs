//! Track selection and normalization.
//!
//! A candidate track goes through, in order: a length check, skyline
//! monophonic reduction, octave centering, inter-onset delays, the
//! pause-variety filter, exact rational normalization by the median pause and
//! finally the pitch-entropy filter.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use num_rational::Ratio;
use thiserror::Error;

use crate::math;
use crate::midi::NoteEvent;

/// Delay expressed as a multiple of the track's median pause.
pub type DelayRatio = Ratio<u64>;

pub const MAX_DISTINCT_PAUSES: usize = 11;
pub const ENTROPY_BIN_WIDTH: f64 = 0.25;
pub const ENTROPY_BIN_COUNT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("track is empty")]
    EmptyTrack,
    #[error("track has fewer than 2 notes")]
    TooShort,
    #[error("transposed pitch leaves the MIDI range")]
    PitchOutOfRange,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub entropy_min_bits: f64,
    pub min_notes: usize,
    pub max_notes: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            entropy_min_bits: 1.5,
            min_notes: 16,
            max_notes: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    TooShort,
    PitchRange,
    PauseVariety,
    LowEntropy,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TooShort => "too_short",
            RejectReason::PitchRange => "pitch_range",
            RejectReason::PauseVariety => "pause_variety",
            RejectReason::LowEntropy => "low_entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTrack {
    pub pitches: Vec<u8>,
    pub delay_ratios: Vec<DelayRatio>,
    pub median_pitch_before: u8,
    pub transpose_semitones: i32,
    pub median_pause_ticks: u64,
}

/// One kept track, ready to be written to the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub source: String,
    pub meta_label: String,
    pub program: u8,
    pub track: NormalizedTrack,
    pub entropy_bits: f64,
}

/// Skyline reduction: at every instant only the highest sounding note is kept.
///
/// Pitch ties go to the later onset. A held note covered by a higher one
/// resurfaces as a new note once the cover ends.
pub fn reduce_monophonic(notes: &[NoteEvent]) -> Vec<NoteEvent> {
    if notes.is_empty() {
        return Vec::new();
    }
    // (tick, is_start, index); ends sort before starts at the same tick.
    let mut boundaries: Vec<(u64, bool, usize)> = Vec::with_capacity(notes.len() * 2);
    for (i, n) in notes.iter().enumerate() {
        boundaries.push((n.onset_ticks, true, i));
        boundaries.push((n.end_ticks(), false, i));
    }
    boundaries.sort_unstable();

    let mut active: BTreeSet<(u8, u64, usize)> = BTreeSet::new();
    let mut out: Vec<NoteEvent> = Vec::new();
    // Current winner and the tick its segment started.
    let mut current: Option<(usize, u64)> = None;

    let mut i = 0;
    while i < boundaries.len() {
        let tick = boundaries[i].0;
        while i < boundaries.len() && boundaries[i].0 == tick {
            let (_, start, idx) = boundaries[i];
            let key = (notes[idx].pitch, notes[idx].onset_ticks, idx);
            if start {
                active.insert(key);
            } else {
                active.remove(&key);
            }
            i += 1;
        }
        let winner = active.last().map(|k| k.2);
        if winner != current.map(|c| c.0) {
            if let Some((idx, from)) = current {
                if tick > from {
                    out.push(NoteEvent {
                        onset_ticks: from,
                        duration_ticks: tick - from,
                        ..notes[idx]
                    });
                }
            }
            current = winner.map(|w| (w, tick));
        }
    }
    out
}

fn lower_median<T: Copy + Ord>(values: &[T]) -> T {
    let mut sorted: Vec<T> = values.to_vec();
    sorted.sort_unstable();
    sorted[(sorted.len() - 1) / 2]
}

/// Transpose by whole octaves so the lower-median pitch lands in `60..=71`.
pub fn center_pitch(pitches: &[u8]) -> Result<(Vec<u8>, i32), PipelineError> {
    if pitches.is_empty() {
        return Err(PipelineError::EmptyTrack);
    }
    let median = i32::from(lower_median(pitches));
    let shift = (5 - median / 12) * 12;
    let moved = pitches
        .iter()
        .map(|&p| {
            let q = i32::from(p) + shift;
            u8::try_from(q).ok().filter(|q| *q <= 127).ok_or(PipelineError::PitchOutOfRange)
        })
        .collect::<Result<Vec<u8>, _>>()?;
    Ok((moved, shift))
}

/// Inter-onset intervals; the last note contributes its own duration.
pub fn delays_of(notes: &[NoteEvent]) -> Result<Vec<u64>, PipelineError> {
    if notes.len() < 2 {
        return Err(PipelineError::TooShort);
    }
    let mut delays: Vec<u64> = notes
        .windows(2)
        .map(|w| w[1].onset_ticks - w[0].onset_ticks)
        .collect();
    delays.push(notes[notes.len() - 1].duration_ticks);
    Ok(delays)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PauseDecision {
    Keep { median: u64, distinct: usize },
    Reject { distinct: usize },
}

/// Keep a track only if it uses at most eleven distinct raw delay values.
pub fn pause_filter(delays: &[u64]) -> PauseDecision {
    let distinct = delays.iter().collect::<BTreeSet<_>>().len();
    if distinct <= MAX_DISTINCT_PAUSES && !delays.is_empty() {
        PauseDecision::Keep {
            median: lower_median(delays),
            distinct,
        }
    } else {
        PauseDecision::Reject { distinct }
    }
}

pub fn normalize_delays(delays: &[u64], median: u64) -> Vec<DelayRatio> {
    assert!(median > 0, "median pause must be positive");
    delays.iter().map(|&d| DelayRatio::new(d, median)).collect()
}

/// Shannon entropy (bits) of the empirical pitch distribution.
pub fn pitch_entropy(pitches: &[u8]) -> f64 {
    if pitches.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; 128];
    for &p in pitches {
        counts[(p & 0x7F) as usize] += 1;
    }
    let n = pitches.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * math::log2(p)
        })
        .sum::<f64>()
        .max(0.0)
}

/// Result of running one candidate track through the filters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Entropy of the reduced melody before any filter; `None` for tracks
    /// without notes.
    pub entropy_before: Option<f64>,
    pub result: Result<NormalizedTrack, RejectReason>,
}

pub fn filter_track(notes: &[NoteEvent], config: &FilterConfig) -> FilterOutcome {
    let mono = reduce_monophonic(notes);
    let entropy_before = if mono.is_empty() {
        None
    } else {
        Some(pitch_entropy(&mono.iter().map(|n| n.pitch).collect::<Vec<_>>()))
    };
    FilterOutcome {
        entropy_before,
        result: normalize_reduced(notes.len(), mono, config),
    }
}

fn normalize_reduced(raw_len: usize, mut mono: Vec<NoteEvent>, config: &FilterConfig) -> Result<NormalizedTrack, RejectReason> {
    let min_notes = config.min_notes.max(2);
    if raw_len < min_notes || mono.len() < min_notes {
        return Err(RejectReason::TooShort);
    }
    mono.truncate(config.max_notes.max(min_notes));

    let raw_pitches: Vec<u8> = mono.iter().map(|n| n.pitch).collect();
    let (pitches, shift) = center_pitch(&raw_pitches).map_err(|_| RejectReason::PitchRange)?;
    let delays = delays_of(&mono).map_err(|_| RejectReason::TooShort)?;
    let median = match pause_filter(&delays) {
        PauseDecision::Keep { median, .. } => median,
        PauseDecision::Reject { .. } => return Err(RejectReason::PauseVariety),
    };
    let delay_ratios = normalize_delays(&delays, median);
    if pitch_entropy(&pitches) < config.entropy_min_bits {
        return Err(RejectReason::LowEntropy);
    }
    Ok(NormalizedTrack {
        pitches,
        delay_ratios,
        median_pitch_before: lower_median(&raw_pitches),
        transpose_semitones: shift,
        median_pause_ticks: median,
    })
}

/// Most common program among the notes, lowest program on ties.
pub fn dominant_program(notes: &[NoteEvent]) -> u8 {
    let mut counts = [0usize; 128];
    for n in notes {
        counts[(n.program & 0x7F) as usize] += 1;
    }
    let mut best = 0;
    for p in 0..128 {
        if counts[p] > counts[best] {
            best = p;
        }
    }
    best as u8
}

/// Tallies over every candidate track of a corpus build.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub kept: usize,
    pub rejected_low_entropy: usize,
    pub rejected_pause_variety: usize,
    pub rejected_too_short: usize,
    pub rejected_pitch_range: usize,
    /// `(bin lower bound in bits, count)`; the last bin also takes values
    /// at or above its upper bound.
    pub entropy_histogram: Vec<(f64, usize)>,
}

impl Default for FilterReport {
    fn default() -> Self {
        FilterReport {
            kept: 0,
            rejected_low_entropy: 0,
            rejected_pause_variety: 0,
            rejected_too_short: 0,
            rejected_pitch_range: 0,
            entropy_histogram: (0..ENTROPY_BIN_COUNT)
                .map(|i| (i as f64 * ENTROPY_BIN_WIDTH, 0))
                .collect(),
        }
    }
}

impl FilterReport {
    pub fn record(&mut self, outcome: &FilterOutcome) {
        if let Some(h) = outcome.entropy_before {
            let bin = ((h / ENTROPY_BIN_WIDTH) as usize).min(ENTROPY_BIN_COUNT - 1);
            self.entropy_histogram[bin].1 += 1;
        }
        match outcome.result {
            Ok(_) => self.kept += 1,
            Err(RejectReason::LowEntropy) => self.rejected_low_entropy += 1,
            Err(RejectReason::PauseVariety) => self.rejected_pause_variety += 1,
            Err(RejectReason::TooShort) => self.rejected_too_short += 1,
            Err(RejectReason::PitchRange) => self.rejected_pitch_range += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.kept
            + self.rejected_low_entropy
            + self.rejected_pause_variety
            + self.rejected_too_short
            + self.rejected_pitch_range
    }
}
