//! Pitch-class / octave / delay vocabularies and the mapping between corpus
//! records and model tokens.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::hash::fnv1a;
use crate::midi::NoteEvent;
use crate::pipeline::{CorpusRecord, DelayRatio};

pub const PITCH_CLASSES: usize = 12;
/// Output index of the end-of-track symbol on the pitch head.
pub const EOS_PITCH: usize = PITCH_CLASSES;
pub const PITCH_HEAD_SIZE: usize = PITCH_CLASSES + 1;
pub const MAX_DELAY_VOCAB: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unknown meta label {0:?}")]
    UnknownMetaLabel(String),
    #[error("octave {0} is outside the vocabulary")]
    OctaveOutOfRange(u8),
    #[error("token index out of vocabulary")]
    IndexOutOfVocab,
    #[error("invalid vocabulary text at line {0}")]
    Parse(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// Ascending; always contains 1.
    pub delay_ratios: Vec<DelayRatio>,
    pub octave_min: u8,
    pub octave_max: u8,
    pub meta_labels: Vec<String>,
}

/// One note as the models see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenizedNote {
    pub pitch_class: u8,
    /// Absolute octave, `pitch / 12`.
    pub octave_index: u8,
    pub delay_index: usize,
}

impl TokenizedNote {
    pub fn pitch(&self) -> u8 {
        12 * self.octave_index + self.pitch_class
    }
}

/// A tokenized track with its meta label index. BOS/EOS are implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTrack {
    pub source: String,
    pub meta: usize,
    pub notes: Vec<TokenizedNote>,
}

fn abs_diff(a: DelayRatio, b: DelayRatio) -> num_rational::Ratio<u128> {
    let a = num_rational::Ratio::new_raw(u128::from(*a.numer()), u128::from(*a.denom()));
    let b = num_rational::Ratio::new_raw(u128::from(*b.numer()), u128::from(*b.denom()));
    if a >= b {
        a - b
    } else {
        b - a
    }
}

impl Vocab {
    pub fn octave_count(&self) -> usize {
        usize::from(self.octave_max - self.octave_min) + 1
    }

    pub fn delay_count(&self) -> usize {
        self.delay_ratios.len()
    }

    pub fn label_count(&self) -> usize {
        self.meta_labels.len()
    }

    /// Index of the kept ratio closest to `r`; ties go to the smaller ratio.
    pub fn delay_index(&self, r: DelayRatio) -> usize {
        if let Ok(i) = self.delay_ratios.binary_search(&r) {
            return i;
        }
        let mut best = 0;
        for i in 1..self.delay_ratios.len() {
            if abs_diff(self.delay_ratios[i], r) < abs_diff(self.delay_ratios[best], r) {
                best = i;
            }
        }
        best
    }

    pub fn label_index(&self, label: &str) -> Result<usize, TokenizerError> {
        self.meta_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| TokenizerError::UnknownMetaLabel(label.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# vrash vocab v1\n");
        s.push_str(&format!("octave_min={}\noctave_max={}\n", self.octave_min, self.octave_max));
        for r in &self.delay_ratios {
            s.push_str(&format!("delay={}/{}\n", r.numer(), r.denom()));
        }
        for l in &self.meta_labels {
            s.push_str(&format!("label={l}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab, TokenizerError> {
        let mut delay_ratios = Vec::new();
        let mut meta_labels = Vec::new();
        let mut octave_min = None;
        let mut octave_max = None;
        for (lineno, line) in text.lines().enumerate() {
            let bad = TokenizerError::Parse(lineno + 1);
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(bad.clone())?;
            match key {
                "octave_min" => octave_min = Some(value.parse::<u8>().map_err(|_| bad)?),
                "octave_max" => octave_max = Some(value.parse::<u8>().map_err(|_| bad)?),
                "delay" => delay_ratios.push(parse_ratio(value).ok_or(bad)?),
                "label" => meta_labels.push(value.to_string()),
                _ => return Err(bad),
            }
        }
        let end = text.lines().count() + 1;
        let (octave_min, octave_max) = match (octave_min, octave_max) {
            (Some(a), Some(b)) if a <= b && b <= 10 => (a, b),
            _ => return Err(TokenizerError::Parse(end)),
        };
        if delay_ratios.is_empty() || !delay_ratios.windows(2).all(|w| w[0] < w[1]) {
            return Err(TokenizerError::Parse(end));
        }
        Ok(Vocab {
            delay_ratios,
            octave_min,
            octave_max,
            meta_labels,
        })
    }

    /// Stable fingerprint of the vocabulary contents.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

/// Parse `"num/den"` or a bare integer into a positive ratio.
pub fn parse_ratio(s: &str) -> Option<DelayRatio> {
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.trim().parse::<u64>().ok()?, d.trim().parse::<u64>().ok()?),
        None => (s.trim().parse::<u64>().ok()?, 1),
    };
    (n > 0 && d > 0).then(|| DelayRatio::new(n, d))
}

pub fn format_ratio(r: &DelayRatio) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Build the vocabulary from a corpus.
///
/// Delay ratios are ranked by descending frequency (smaller ratio first on
/// ties) and capped at [`MAX_DELAY_VOCAB`]; ratio 1 is always kept.
pub fn build_vocab(corpus: &[CorpusRecord]) -> Result<Vocab, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut freq: BTreeMap<DelayRatio, usize> = BTreeMap::new();
    let mut octave_min = u8::MAX;
    let mut octave_max = 0;
    let mut labels: Vec<String> = Vec::new();
    for rec in corpus {
        for r in &rec.track.delay_ratios {
            *freq.entry(*r).or_insert(0) += 1;
        }
        for p in &rec.track.pitches {
            octave_min = octave_min.min(p / 12);
            octave_max = octave_max.max(p / 12);
        }
        labels.push(rec.meta_label.clone());
    }
    if octave_min > octave_max {
        return Err(TokenizerError::EmptyCorpus);
    }
    labels.sort();
    labels.dedup();

    let mut ranked: Vec<(DelayRatio, usize)> = freq.into_iter().collect();
    // Stable sort keeps ascending ratio order among equal counts.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let mut kept: Vec<DelayRatio> = ranked.iter().take(MAX_DELAY_VOCAB).map(|x| x.0).collect();
    let one = DelayRatio::from_integer(1);
    if !kept.contains(&one) {
        kept.pop();
        kept.push(one);
    }
    kept.sort();

    Ok(Vocab {
        delay_ratios: kept,
        octave_min,
        octave_max,
        meta_labels: labels,
    })
}

pub fn tokenize_pitch(pitch: u8) -> (u8, u8) {
    (pitch % 12, pitch / 12)
}

pub fn encode_track(record: &CorpusRecord, vocab: &Vocab) -> Result<TokenTrack, TokenizerError> {
    let meta = vocab.label_index(&record.meta_label)?;
    let notes = record
        .track
        .pitches
        .iter()
        .zip(&record.track.delay_ratios)
        .map(|(&p, &r)| {
            let (pitch_class, octave_index) = tokenize_pitch(p);
            if octave_index < vocab.octave_min || octave_index > vocab.octave_max {
                return Err(TokenizerError::OctaveOutOfRange(octave_index));
            }
            Ok(TokenizedNote {
                pitch_class,
                octave_index,
                delay_index: vocab.delay_index(r),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TokenTrack {
        source: record.source.clone(),
        meta,
        notes,
    })
}

fn check_token(t: &TokenizedNote, vocab: &Vocab) -> Result<(), TokenizerError> {
    let ok = usize::from(t.pitch_class) < PITCH_CLASSES
        && t.octave_index >= vocab.octave_min
        && t.octave_index <= vocab.octave_max
        && t.pitch() <= 127
        && t.delay_index < vocab.delay_count();
    ok.then_some(()).ok_or(TokenizerError::IndexOutOfVocab)
}

/// Pitches and delay ratios back from tokens.
pub fn tokens_to_melody(tokens: &[TokenizedNote], vocab: &Vocab) -> Result<(Vec<u8>, Vec<DelayRatio>), TokenizerError> {
    let mut pitches = Vec::with_capacity(tokens.len());
    let mut ratios = Vec::with_capacity(tokens.len());
    for t in tokens {
        check_token(t, vocab)?;
        pitches.push(t.pitch());
        ratios.push(vocab.delay_ratios[t.delay_index]);
    }
    Ok((pitches, ratios))
}

/// Render tokens as legato notes: every note lasts until the next onset.
pub fn decode_track(tokens: &[TokenizedNote], vocab: &Vocab, median_pause_ticks: u64) -> Result<Vec<NoteEvent>, TokenizerError> {
    let mut onset = 0u64;
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        check_token(t, vocab)?;
        let r = vocab.delay_ratios[t.delay_index];
        let (num, den) = (u128::from(*r.numer()), u128::from(*r.denom()));
        // round half up
        let ticks = (2 * num * u128::from(median_pause_ticks) + den) / (2 * den);
        let ticks = u64::try_from(ticks).unwrap_or(u64::MAX).max(1);
        out.push(NoteEvent {
            pitch: t.pitch(),
            onset_ticks: onset,
            duration_ticks: ticks,
            channel: 0,
            program: 0,
        });
        onset += ticks;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::NormalizedTrack;
    use alloc::vec;

    fn r(n: u64, d: u64) -> DelayRatio {
        DelayRatio::new(n, d)
    }

    fn record(pitches: Vec<u8>, ratios: Vec<DelayRatio>, label: &str) -> CorpusRecord {
        CorpusRecord {
            source: "x.mid#t0c0".into(),
            meta_label: label.into(),
            program: 0,
            track: NormalizedTrack {
                pitches,
                delay_ratios: ratios,
                median_pitch_before: 60,
                transpose_semitones: 0,
                median_pause_ticks: 240,
            },
            entropy_bits: 2.0,
        }
    }

    #[test]
    fn all_ones_vocab() {
        let v = build_vocab(&[record(vec![60, 62], vec![r(1, 1), r(1, 1)], "a")]).unwrap();
        assert_eq!(v.delay_ratios, vec![r(1, 1)]);
        assert_eq!((v.octave_min, v.octave_max), (5, 5));
        assert_eq!(build_vocab(&[]), Err(TokenizerError::EmptyCorpus));
    }

    #[test]
    fn three_ratio_vocab_sorted() {
        let v = build_vocab(&[record(
            vec![60, 62, 64, 65, 67, 69],
            vec![r(3, 2), r(1, 1), r(1, 2), r(3, 2), r(1, 1), r(1, 2)],
            "a",
        )])
        .unwrap();
        assert_eq!(v.delay_ratios, vec![r(1, 2), r(1, 1), r(3, 2)]);
    }

    #[test]
    fn pitch_tokenization() {
        assert_eq!(tokenize_pitch(60), (0, 5));
        assert_eq!(tokenize_pitch(69), (9, 5));
        for p in 0..=127u8 {
            let (pc, oct) = tokenize_pitch(p);
            assert_eq!(12 * oct + pc, p);
        }
    }

    #[test]
    fn nearest_ratio_ties_to_smaller() {
        let v = Vocab {
            delay_ratios: vec![r(1, 2), r(1, 1), r(2, 1)],
            octave_min: 5,
            octave_max: 5,
            meta_labels: vec!["a".into()],
        };
        assert_eq!(v.delay_index(r(3, 4)), 0);
        assert_eq!(v.delay_index(r(7, 5)), 1);
        assert_eq!(v.delay_index(r(3, 2)), 1);
        assert_eq!(v.delay_index(r(100, 1)), 2);
        for i in 0..3 {
            assert_eq!(v.delay_index(v.delay_ratios[i]), i);
        }
    }

    #[test]
    fn decode_single_and_empty() {
        let v = Vocab {
            delay_ratios: vec![r(1, 1)],
            octave_min: 5,
            octave_max: 5,
            meta_labels: vec![],
        };
        let t = TokenizedNote {
            pitch_class: 0,
            octave_index: 5,
            delay_index: 0,
        };
        let notes = decode_track(&[t], &v, 240).unwrap();
        assert_eq!(notes.len(), 1);
        assert_eq!((notes[0].pitch, notes[0].onset_ticks, notes[0].duration_ticks), (60, 0, 240));
        assert!(decode_track(&[], &v, 240).unwrap().is_empty());
        let bad = TokenizedNote { delay_index: 3, ..t };
        assert_eq!(decode_track(&[bad], &v, 240), Err(TokenizerError::IndexOutOfVocab));
    }

    #[test]
    fn unknown_label_rejected() {
        let rec = record(vec![60, 62], vec![r(1, 1), r(1, 1)], "a");
        let v = build_vocab(&[rec.clone()]).unwrap();
        let mut other = rec;
        other.meta_label = "b".into();
        assert_eq!(encode_track(&other, &v), Err(TokenizerError::UnknownMetaLabel("b".into())));
    }

    #[test]
    fn text_round_trip_is_byte_stable() {
        let v = Vocab {
            delay_ratios: vec![r(1, 3), r(1, 1), r(3, 2)],
            octave_min: 4,
            octave_max: 6,
            meta_labels: vec!["folk".into(), "jazz standards".into()],
        };
        let text = v.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(Vocab::from_text("octave_min=4\n").is_err());
        assert!(Vocab::from_text("bogus=1\n").is_err());
    }

    #[test]
    fn ratio_strings() {
        assert_eq!(parse_ratio("3/2"), Some(r(3, 2)));
        assert_eq!(parse_ratio("2"), Some(r(2, 1)));
        assert_eq!(parse_ratio("0/2"), None);
        assert_eq!(format_ratio(&r(4, 2)), "2/1");
    }
}
