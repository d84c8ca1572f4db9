//! Synthetic melody corpora written as real MIDI files.
#![allow(dead_code)]

use std::path::Path;

use vrash_core::midi::{encode_smf, NoteEvent};
use vrash_core::RngStream;

pub const DIVISION: u16 = 480;
pub const TEMPO: u32 = 500_000;

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];

// Even rhythms for the rising style, dotted ones for the falling style.
const EVEN: [&[u64]; 3] = [&[240, 240, 480], &[240, 240, 240, 240], &[480, 240, 240]];
const DOTTED: [&[u64]; 3] = [&[360, 120, 480], &[360, 120, 240, 240], &[720, 240, 480]];
const ROOTS: [i32; 3] = [0, 5, 7];
const MOTIFS: [[i32; 4]; 3] = [[0, 1, 2, 1], [0, 2, 1, 3], [0, -1, 1, 0]];

fn degree_pitch(root: i32, scale: &[i32; 7], degree: i32) -> u8 {
    let oct = degree.div_euclid(7);
    let step = degree.rem_euclid(7) as usize;
    (root + 12 * oct + scale[step]) as u8
}

/// A sequence of a short motif, each repetition shifted one scale degree.
/// The ascending style is major with even rhythms, the descending style
/// minor with dotted rhythms. Key, motif, rhythm and length vary per track.
///
/// With `plain`, motif and length are fixed per style so that only key and
/// rhythm vary inside a style.
pub fn style_melody(rng: &mut RngStream, ascending: bool, plain: bool) -> Vec<NoteEvent> {
    let (scale, rhythms) = if ascending { (&MAJOR, &EVEN) } else { (&MINOR, &DOTTED) };
    let root = 55 + ROOTS[rng.below(ROOTS.len())];
    let rhythm = rhythms[rng.below(rhythms.len())];
    let shape = if plain {
        MOTIFS[usize::from(!ascending)]
    } else {
        MOTIFS[rng.below(MOTIFS.len())]
    };
    let motif = &shape[..rhythm.len()];
    let reps = if plain { 8 } else { 7 + rng.below(4) as i32 };
    let dir = if ascending { 1 } else { -1 };
    let start = if ascending { -4 } else { 4 };
    let mut notes = Vec::new();
    let mut t = 0;
    for k in 0..reps {
        for (j, &m) in motif.iter().enumerate() {
            let d = rhythm[j];
            notes.push(NoteEvent {
                pitch: degree_pitch(root, scale, start + dir * k + m),
                onset_ticks: t,
                duration_ticks: d,
                channel: 0,
                program: 0,
            });
            t += d;
        }
    }
    notes
}

/// Write `per_style` ascending files under `asc/` and as many descending
/// ones under `desc/`, plus a manifest mapping the directories to labels.
/// Returns the manifest path.
pub fn write_style_corpus(root: &Path, per_style: usize, seed: u64, plain: bool) -> std::path::PathBuf {
    let mut rng = RngStream::new(seed);
    for (dir, asc) in [("asc", true), ("desc", false)] {
        std::fs::create_dir_all(root.join(dir)).unwrap();
        for i in 0..per_style {
            let notes = style_melody(&mut rng, asc, plain);
            let bytes = encode_smf(&notes, DIVISION, TEMPO).unwrap();
            std::fs::write(root.join(dir).join(format!("{i:04}.mid")), bytes).unwrap();
        }
    }
    let manifest = root.join("manifest.txt");
    std::fs::write(&manifest, "asc=ascending\ndesc=descending\n").unwrap();
    manifest
}
