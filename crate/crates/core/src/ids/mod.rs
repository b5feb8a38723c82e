//! Symbol vocabulary, the IDS prefix grammar, the dictionary of right
//! characters, ground-truth counting vectors and the distance baselines.

pub mod counts;
pub mod dict;
pub mod distance;
pub mod tree;
pub mod vocab;

pub use counts::{derive_count_vector, derive_existence, CountingVector};
pub use dict::{validate, CharClass, IdsDictionary, Validation};
pub use distance::{baseline_candidates, edit_distance, prob_embedding_score, BaselineMethod};
pub use tree::{parse_ids, serialize_tree, IdsTree};
pub use vocab::{Structure, Symbol, SymbolId, SymbolKind, SymbolVocabulary};

#[derive(Debug, thiserror::Error)]
pub enum IdsError {
    #[error("malformed IDS: {0}")]
    Malformed(String),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("duplicate dictionary entry {0}")]
    DuplicateEntry(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
