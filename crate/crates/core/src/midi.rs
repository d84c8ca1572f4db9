//! Standard MIDI File reading and writing.
//!
//! Only the parts needed for melodic note extraction are interpreted: note
//! on/off, program changes and tempo. Other channel messages are kept as
//! opaque events; system-exclusive payloads and unknown meta events are
//! skipped by length.

use alloc::vec::Vec;

use thiserror::Error;

pub const DEFAULT_TEMPO_US_PER_QUARTER: u32 = 500_000;
pub const PERCUSSION_CHANNEL: u8 = 9;
/// Largest value a four-byte variable-length quantity can carry.
pub const VLQ_MAX: u32 = 0x0FFF_FFFF;

const NOTE_ON_VELOCITY: u8 = 96;
const NOTE_OFF_VELOCITY: u8 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MidiError {
    #[error("malformed variable-length quantity at byte {offset}")]
    MalformedVlq { offset: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("track {track} is truncated")]
    TruncatedTrack { track: usize },
    #[error("malformed event in track {track} at byte {offset}")]
    MalformedEvent { track: usize, offset: usize },
    #[error("SMPTE time division is not supported")]
    UnsupportedSmpteDivision,
    #[error("value {0} does not fit a variable-length quantity")]
    ValueTooLarge(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    NoteOn { channel: u8, key: u8, velocity: u8 },
    NoteOff { channel: u8, key: u8, velocity: u8 },
    ProgramChange { channel: u8, program: u8 },
    /// Any other channel voice message (controllers, pitch bend, aftertouch).
    Channel { status: u8, data1: u8, data2: u8 },
    Tempo { us_per_quarter: u32 },
    EndOfTrack,
}

/// A decoded event at an absolute tick position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackEvent {
    pub tick: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoChange {
    pub tick: u64,
    pub us_per_quarter: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    pub format: u16,
    /// Ticks per quarter note, always positive.
    pub division: u16,
    pub tracks: Vec<Vec<TrackEvent>>,
    /// Sorted by tick; always starts with an entry at tick 0.
    pub tempo_map: Vec<TempoChange>,
}

/// One sounded note. Velocity is intentionally not carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset_ticks: u64,
    pub duration_ticks: u64,
    pub channel: u8,
    pub program: u8,
}

impl NoteEvent {
    pub fn end_ticks(&self) -> u64 {
        self.onset_ticks + self.duration_ticks
    }
}

/// Decode a variable-length quantity starting at `offset`.
///
/// Returns the value and the number of bytes consumed (1 to 4).
pub fn decode_varlen(bytes: &[u8], offset: usize) -> Result<(u32, usize), MidiError> {
    let mut value: u32 = 0;
    for i in 0..4 {
        let b = *bytes
            .get(offset + i)
            .ok_or(MidiError::MalformedVlq { offset })?;
        value = (value << 7) | u32::from(b & 0x7F);
        if b & 0x80 == 0 {
            return Ok((value, i + 1));
        }
    }
    Err(MidiError::MalformedVlq { offset })
}

pub fn encode_varlen(value: u32, out: &mut Vec<u8>) -> Result<(), MidiError> {
    if value > VLQ_MAX {
        return Err(MidiError::ValueTooLarge(u64::from(value)));
    }
    let mut groups = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        groups[n] = (v & 0x7F) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let continuation = if i > 0 { 0x80 } else { 0 };
        out.push(groups[i] | continuation);
    }
    Ok(())
}

fn read_u16(bytes: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*bytes.get(at)?, *bytes.get(at + 1)?]))
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    let s = bytes.get(at..at + 4)?;
    Some(u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
}

pub fn parse_smf(bytes: &[u8]) -> Result<MidiFile, MidiError> {
    if bytes.get(0..4) != Some(b"MThd") {
        return Err(MidiError::MalformedHeader("missing MThd chunk"));
    }
    let header_len = read_u32(bytes, 4).ok_or(MidiError::MalformedHeader("short header"))? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader("header chunk shorter than 6 bytes"));
    }
    let format = read_u16(bytes, 8).ok_or(MidiError::MalformedHeader("short header"))?;
    let _declared_tracks = read_u16(bytes, 10).ok_or(MidiError::MalformedHeader("short header"))?;
    let division = read_u16(bytes, 12).ok_or(MidiError::MalformedHeader("short header"))?;
    if format > 1 {
        return Err(MidiError::MalformedHeader("only formats 0 and 1 are supported"));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedSmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per quarter note"));
    }

    let mut pos = 8 + header_len;
    let mut tracks = Vec::new();
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = read_u32(bytes, pos + 4).unwrap_or(0) as usize;
        let body_start = pos + 8;
        if id == b"MTrk" {
            let track = tracks.len();
            let body = bytes
                .get(body_start..body_start.saturating_add(len))
                .ok_or(MidiError::TruncatedTrack { track })?;
            tracks.push(parse_track(body, track)?);
        }
        pos = body_start.saturating_add(len);
    }
    if tracks.is_empty() {
        return Err(MidiError::MalformedHeader("no MTrk chunks"));
    }

    let mut tempo_map: Vec<TempoChange> = tracks
        .iter()
        .flatten()
        .filter_map(|e| match e.kind {
            EventKind::Tempo { us_per_quarter } => Some(TempoChange {
                tick: e.tick,
                us_per_quarter,
            }),
            _ => None,
        })
        .collect();
    tempo_map.sort_by_key(|t| t.tick);
    if tempo_map.first().map_or(true, |t| t.tick > 0) {
        tempo_map.insert(
            0,
            TempoChange {
                tick: 0,
                us_per_quarter: DEFAULT_TEMPO_US_PER_QUARTER,
            },
        );
    }

    Ok(MidiFile {
        format,
        division,
        tracks,
        tempo_map,
    })
}

fn parse_track(body: &[u8], track: usize) -> Result<Vec<TrackEvent>, MidiError> {
    let truncated = MidiError::TruncatedTrack { track };
    let mut events = Vec::new();
    let mut pos = 0;
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;

    while pos < body.len() {
        let (delta, used) = decode_varlen(body, pos).map_err(|_| truncated)?;
        pos += used;
        tick += u64::from(delta);
        let first = *body.get(pos).ok_or(truncated)?;

        match first {
            0xFF => {
                let kind = *body.get(pos + 1).ok_or(truncated)?;
                let (len, used) = decode_varlen(body, pos + 2).map_err(|_| truncated)?;
                let data_start = pos + 2 + used;
                let data = body
                    .get(data_start..data_start + len as usize)
                    .ok_or(truncated)?;
                pos = data_start + len as usize;
                running = None;
                match kind {
                    0x51 if data.len() == 3 => {
                        let us = (u32::from(data[0]) << 16) | (u32::from(data[1]) << 8) | u32::from(data[2]);
                        events.push(TrackEvent {
                            tick,
                            kind: EventKind::Tempo { us_per_quarter: us },
                        });
                    }
                    0x2F => {
                        events.push(TrackEvent {
                            tick,
                            kind: EventKind::EndOfTrack,
                        });
                        break;
                    }
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                let (len, used) = decode_varlen(body, pos + 1).map_err(|_| truncated)?;
                pos += 1 + used + len as usize;
                if pos > body.len() {
                    return Err(truncated);
                }
                running = None;
            }
            _ => {
                let status = if first & 0x80 != 0 {
                    pos += 1;
                    if first >= 0xF0 {
                        // System common / real-time bytes have no place in a file.
                        return Err(MidiError::MalformedEvent { track, offset: pos - 1 });
                    }
                    running = Some(first);
                    first
                } else {
                    running.ok_or(MidiError::MalformedEvent { track, offset: pos })?
                };
                let channel = status & 0x0F;
                let data_len = match status & 0xF0 {
                    0xC0 | 0xD0 => 1,
                    _ => 2,
                };
                let data = body.get(pos..pos + data_len).ok_or(truncated)?;
                if data.iter().any(|b| b & 0x80 != 0) {
                    return Err(MidiError::MalformedEvent { track, offset: pos });
                }
                pos += data_len;
                let d1 = data[0];
                let d2 = if data_len == 2 { data[1] } else { 0 };
                let kind = match status & 0xF0 {
                    0x90 => EventKind::NoteOn {
                        channel,
                        key: d1,
                        velocity: d2,
                    },
                    0x80 => EventKind::NoteOff {
                        channel,
                        key: d1,
                        velocity: d2,
                    },
                    0xC0 => EventKind::ProgramChange {
                        channel,
                        program: d1,
                    },
                    _ => EventKind::Channel {
                        status,
                        data1: d1,
                        data2: d2,
                    },
                };
                events.push(TrackEvent { tick, kind });
            }
        }
    }
    Ok(events)
}

/// Notes extracted from one track plus the number of repairs made.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractedNotes {
    pub notes: Vec<NoteEvent>,
    /// Zero-length notes stretched to one tick plus note-ons left open at
    /// track end.
    pub warnings: usize,
}

/// Pair note-ons with note-offs.
///
/// A note-on is matched with the earliest later note-off (or zero-velocity
/// note-on) of the same key and channel that has not been claimed by an
/// earlier note-on. Open notes are closed with a one-tick duration. The
/// percussion channel is dropped.
pub fn extract_notes(events: &[TrackEvent]) -> ExtractedNotes {
    // Open note indices per (channel, key), oldest first.
    let mut pending: Vec<Vec<usize>> = alloc::vec![Vec::new(); 16 * 128];
    let mut program = [0u8; 16];
    let mut notes: Vec<NoteEvent> = Vec::new();
    let mut closed: Vec<bool> = Vec::new();
    let mut warnings = 0;

    for e in events {
        match e.kind {
            EventKind::ProgramChange { channel, program: p } => program[channel as usize] = p,
            EventKind::NoteOn {
                channel,
                key,
                velocity,
            } if velocity > 0 => {
                if channel == PERCUSSION_CHANNEL {
                    continue;
                }
                pending[channel as usize * 128 + key as usize].push(notes.len());
                notes.push(NoteEvent {
                    pitch: key,
                    onset_ticks: e.tick,
                    duration_ticks: 0,
                    channel,
                    program: program[channel as usize],
                });
                closed.push(false);
            }
            EventKind::NoteOn { channel, key, .. } | EventKind::NoteOff { channel, key, .. } => {
                let queue = &mut pending[channel as usize * 128 + key as usize];
                if !queue.is_empty() {
                    let idx = queue.remove(0);
                    let n = &mut notes[idx];
                    let dur = e.tick - n.onset_ticks;
                    if dur == 0 {
                        warnings += 1;
                    }
                    n.duration_ticks = dur.max(1);
                    closed[idx] = true;
                }
            }
            _ => {}
        }
    }
    for (idx, done) in closed.iter().enumerate() {
        if !done {
            notes[idx].duration_ticks = 1;
            warnings += 1;
        }
    }
    notes.sort_by_key(|n| (n.onset_ticks, n.pitch, n.channel));
    ExtractedNotes { notes, warnings }
}

/// Serialize notes as a single-track format-0 file.
///
/// The track starts with a tempo meta event and, per channel, a program
/// change whenever the program differs from the channel's current one.
/// Running status is never emitted. At equal ticks note-offs precede
/// note-ons so back-to-back repeats of one key pair up correctly.
pub fn encode_smf(notes: &[NoteEvent], division: u16, tempo_us_per_quarter: u32) -> Result<Vec<u8>, MidiError> {
    // (tick, order within tick, note index, message, message length)
    let mut timeline: Vec<(u64, u8, usize, [u8; 3], usize)> = Vec::with_capacity(notes.len() * 2 + 16);
    let mut current_program: [Option<u8>; 16] = [None; 16];
    for (seq, n) in notes.iter().enumerate() {
        let ch = n.channel & 0x0F;
        if current_program[ch as usize] != Some(n.program) {
            current_program[ch as usize] = Some(n.program);
            timeline.push((n.onset_ticks, 1, seq, [0xC0 | ch, n.program & 0x7F, 0], 2));
        }
        timeline.push((n.end_ticks(), 0, seq, [0x80 | ch, n.pitch & 0x7F, NOTE_OFF_VELOCITY], 3));
        timeline.push((n.onset_ticks, 2, seq, [0x90 | ch, n.pitch & 0x7F, NOTE_ON_VELOCITY], 3));
    }
    timeline.sort_by_key(|&(tick, order, seq, _, _)| (tick, order, seq));

    let mut track = Vec::with_capacity(timeline.len() * 4 + 16);
    track.push(0x00);
    track.extend_from_slice(&[0xFF, 0x51, 0x03]);
    track.extend_from_slice(&tempo_us_per_quarter.to_be_bytes()[1..4]);

    let mut last_tick = 0u64;
    for (tick, _, _, msg, len) in timeline {
        let delta = tick - last_tick;
        let delta = u32::try_from(delta)
            .ok()
            .filter(|d| *d <= VLQ_MAX)
            .ok_or(MidiError::ValueTooLarge(delta))?;
        encode_varlen(delta, &mut track)?;
        track.extend_from_slice(&msg[..len]);
        last_tick = tick;
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&division.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn on(tick: u64, key: u8, velocity: u8) -> TrackEvent {
        TrackEvent {
            tick,
            kind: EventKind::NoteOn {
                channel: 0,
                key,
                velocity,
            },
        }
    }

    fn off(tick: u64, key: u8) -> TrackEvent {
        TrackEvent {
            tick,
            kind: EventKind::NoteOff {
                channel: 0,
                key,
                velocity: 0,
            },
        }
    }

    #[test]
    fn varlen_examples() {
        assert_eq!(decode_varlen(&[0x00], 0), Ok((0, 1)));
        assert_eq!(decode_varlen(&[0x81, 0x48], 0), Ok((200, 2)));
        assert_eq!(decode_varlen(&[0xFF, 0xFF, 0xFF, 0x7F], 0), Ok((268_435_455, 4)));
    }

    #[test]
    fn varlen_errors() {
        assert!(matches!(
            decode_varlen(&[0x80, 0x80, 0x80, 0x80, 0x00], 0),
            Err(MidiError::MalformedVlq { .. })
        ));
        assert!(matches!(decode_varlen(&[0x81], 0), Err(MidiError::MalformedVlq { .. })));
        assert!(matches!(decode_varlen(&[], 0), Err(MidiError::MalformedVlq { .. })));
        let mut out = Vec::new();
        assert_eq!(encode_varlen(VLQ_MAX + 1, &mut out), Err(MidiError::ValueTooLarge(u64::from(VLQ_MAX) + 1)));
    }

    #[test]
    fn header_fields() {
        let mut bytes = vec![0x4D, 0x54, 0x68, 0x64, 0, 0, 0, 6, 0, 1, 0, 2, 0x01, 0xE0];
        for _ in 0..2 {
            bytes.extend_from_slice(b"MTrk");
            bytes.extend_from_slice(&[0, 0, 0, 4, 0x00, 0xFF, 0x2F, 0x00]);
        }
        let f = parse_smf(&bytes).unwrap();
        assert_eq!(f.format, 1);
        assert_eq!(f.tracks.len(), 2);
        assert_eq!(f.division, 480);
        assert_eq!(
            f.tempo_map,
            vec![TempoChange {
                tick: 0,
                us_per_quarter: 500_000
            }]
        );
    }

    #[test]
    fn zero_tracks_is_malformed() {
        let bytes = [0x4D, 0x54, 0x68, 0x64, 0, 0, 0, 6, 0, 1, 0, 0, 0x01, 0xE0];
        assert!(matches!(parse_smf(&bytes), Err(MidiError::MalformedHeader(_))));
    }

    #[test]
    fn smpte_division_rejected() {
        let mut bytes = vec![0x4D, 0x54, 0x68, 0x64, 0, 0, 0, 6, 0, 0, 0, 1, 0xE7, 0x28];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&[0, 0, 0, 4, 0x00, 0xFF, 0x2F, 0x00]);
        assert_eq!(parse_smf(&bytes), Err(MidiError::UnsupportedSmpteDivision));
    }

    #[test]
    fn truncated_track_detected() {
        let mut bytes = vec![0x4D, 0x54, 0x68, 0x64, 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&[0, 0, 0, 10, 0x00, 0x90, 0x3C]);
        assert_eq!(parse_smf(&bytes), Err(MidiError::TruncatedTrack { track: 0 }));
    }

    #[test]
    fn running_status_and_unknown_chunks() {
        let mut bytes = vec![0x4D, 0x54, 0x68, 0x64, 0, 0, 0, 6, 0, 0, 0, 1, 0x00, 0x60];
        bytes.extend_from_slice(b"XFIH");
        bytes.extend_from_slice(&[0, 0, 0, 3, 1, 2, 3]);
        let body = [
            0x00, 0x90, 0x3C, 0x40, // on 60
            0x60, 0x3C, 0x00, // running status: on 60 vel 0
            0x00, 0x3E, 0x40, // on 62
            0x60, 0x80, 0x3E, 0x40, // off 62
            0x00, 0xFF, 0x2F, 0x00,
        ];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(body.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&body);
        let f = parse_smf(&bytes).unwrap();
        let notes = extract_notes(&f.tracks[0]).notes;
        assert_eq!(notes.len(), 2);
        assert_eq!((notes[0].pitch, notes[0].onset_ticks, notes[0].duration_ticks), (60, 0, 96));
        assert_eq!((notes[1].pitch, notes[1].onset_ticks, notes[1].duration_ticks), (62, 96, 96));
    }

    #[test]
    fn data_byte_without_running_status() {
        let mut bytes = vec![0x4D, 0x54, 0x68, 0x64, 0, 0, 0, 6, 0, 0, 0, 1, 0x00, 0x60];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&[0, 0, 0, 3, 0x00, 0x3C, 0x40]);
        assert!(matches!(parse_smf(&bytes), Err(MidiError::MalformedEvent { .. })));
    }

    #[test]
    fn extract_simple_pair() {
        let notes = extract_notes(&[on(0, 60, 100), off(480, 60)]).notes;
        assert_eq!(notes.len(), 1);
        assert_eq!((notes[0].pitch, notes[0].onset_ticks, notes[0].duration_ticks), (60, 0, 480));
    }

    #[test]
    fn velocity_zero_is_note_off() {
        let notes = extract_notes(&[on(0, 60, 100), on(240, 60, 0)]).notes;
        assert_eq!(notes[0].duration_ticks, 240);
    }

    #[test]
    fn unmatched_and_percussion() {
        let drum = TrackEvent {
            tick: 0,
            kind: EventKind::NoteOn {
                channel: 9,
                key: 36,
                velocity: 100,
            },
        };
        let out = extract_notes(&[drum, on(10, 64, 90)]);
        assert_eq!(out.notes.len(), 1);
        assert_eq!(out.notes[0].pitch, 64);
        assert_eq!(out.notes[0].duration_ticks, 1);
        assert_eq!(out.warnings, 1);
    }

    #[test]
    fn program_is_attached() {
        let pc = TrackEvent {
            tick: 0,
            kind: EventKind::ProgramChange { channel: 0, program: 40 },
        };
        let notes = extract_notes(&[pc, on(0, 60, 100), off(10, 60)]).notes;
        assert_eq!(notes[0].program, 40);
    }

    #[test]
    fn encode_empty_and_single() {
        let bytes = encode_smf(&[], 480, 500_000).unwrap();
        let f = parse_smf(&bytes).unwrap();
        assert_eq!(f.format, 0);
        assert_eq!(f.tracks.len(), 1);
        assert_eq!(
            f.tracks[0],
            vec![
                TrackEvent {
                    tick: 0,
                    kind: EventKind::Tempo { us_per_quarter: 500_000 }
                },
                TrackEvent {
                    tick: 0,
                    kind: EventKind::EndOfTrack
                },
            ]
        );

        let note = NoteEvent {
            pitch: 60,
            onset_ticks: 0,
            duration_ticks: 480,
            channel: 0,
            program: 0,
        };
        let f = parse_smf(&encode_smf(&[note], 480, 500_000).unwrap()).unwrap();
        let notes_only: Vec<_> = f.tracks[0]
            .iter()
            .filter(|e| matches!(e.kind, EventKind::NoteOn { .. } | EventKind::NoteOff { .. }))
            .collect();
        assert_eq!(notes_only.len(), 2);
        assert!(matches!(notes_only[0].kind, EventKind::NoteOn { key: 60, .. }));
        assert_eq!(notes_only[0].tick, 0);
        assert!(matches!(notes_only[1].kind, EventKind::NoteOff { key: 60, .. }));
        assert_eq!(notes_only[1].tick, 480);
        assert_eq!(extract_notes(&f.tracks[0]).notes, vec![note]);
    }
}
