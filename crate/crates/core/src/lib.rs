//! Count-decode-fetch character error correction over a synthetic glyph
//! language.
//!
//! A composite character is rendered from its IDS tree, decomposed back into
//! an IDS sequence by an attention decoder steered by a radical counter,
//! checked against the dictionary of right characters and, when misspelled,
//! mapped to the intended character by the fetcher.

pub mod cli;
pub mod config;
pub mod eval;
pub mod ids;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
