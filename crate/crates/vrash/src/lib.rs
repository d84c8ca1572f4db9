//! File formats, corpus building and the command line for the melody
//! models in `vrash_core`.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod reports;
