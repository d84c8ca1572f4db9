//! Core algorithms for monophonic melody modelling.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (an allocator is required). File formats, the corpus
//! walker and the command line live in the `vrash` crate.
//!
//! - [`midi`]: Standard MIDI File decoding/encoding and note extraction.
//! - [`pipeline`]: monophonic reduction, pitch centering, pause normalization
//!   and the track filters.
//! - [`tokenizer`]: pitch-class / octave / delay vocabularies.
//! - [`autodiff`]: a small define-by-run reverse-mode tape, recurrent cells
//!   and Adam.
//! - [`models`]: the note language model, the variational recurrent
//!   autoencoder and its history-supported variant.
//! - [`training`]: deterministic training and evaluation loops.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod hash;
pub mod midi;
pub mod models;
pub mod pipeline;
pub mod tokenizer;
pub mod training;

mod math;

pub use autodiff::{ParameterStore, RngStream, Tape, Var};
pub use midi::{MidiFile, NoteEvent};
pub use pipeline::{CorpusRecord, FilterConfig, FilterReport};
pub use tokenizer::{TokenizedNote, Vocab};
pub use models::{LatentCode, Model, ModelKind};
pub use training::{MetricLog, TrainConfig};
