//! Core library for transcribing two-speaker, single-channel conversations.
//!
//! The pipeline: synthesize a toy conversation corpus ([`corpus`]), extract
//! MFCC features with context stacking ([`features`]), predict frame-level
//! speaker activity with an end-to-end diarizer ([`diarization`]),
//! run speaker-conditioned acoustic models over the mixture ([`acoustic`]),
//! decode senone posteriors into token sequences ([`decode`]), and score
//! diarization and transcription quality ([`evaluate`]). [`experiment`] wires
//! these into reproducible, config-driven runs for the CLI.

pub mod acoustic;
pub mod corpus;
pub mod decode;
pub mod diarization;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod features;
pub mod nn;

pub use error::{Error, Result};
