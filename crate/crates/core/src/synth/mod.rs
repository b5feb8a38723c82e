//! Procedural glyph language: stroke-program radicals, layout rendering,
//! misspelling mutators and corpus generation.

pub mod corpus;
pub mod glyph;
pub mod mutate;

pub use corpus::{largest_remainder, Corpus, CorpusConfig, Label, SampleRecord, Split};
pub use glyph::{render, GlyphImage, GlyphSet, GlyphStyle, RadicalPrimitive, Segment, StrokeProgram, StyleRanges};
pub use mutate::{mutate, ErrorType};

use crate::ids::IdsError;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("layout box {width:.1}x{height:.1}px is smaller than 4px")]
    BoxTooSmall { width: f64, height: f64 },
    #[error("symbol {0} has no stroke program")]
    Undrawable(String),
    #[error("{0} is not a dictionary entry")]
    NotInDictionary(String),
    #[error("no {kind} mutant of {tree} outside the dictionary after 100 attempts")]
    Exhausted { kind: &'static str, tree: String },
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Ids(#[from] IdsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
