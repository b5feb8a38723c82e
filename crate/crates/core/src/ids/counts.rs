use serde::{Deserialize, Serialize};

use super::vocab::SymbolId;

/// Per-symbol multiplicities over the full vocabulary (operators included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingVector(Vec<f64>);

impl CountingVector {
    pub fn zeros(n: usize) -> Self {
        CountingVector(vec![0.0; n])
    }

    /// Wraps raw counts, clamping negatives to zero.
    pub fn from_values(values: Vec<f64>) -> Self {
        CountingVector(values.into_iter().map(|v| v.max(0.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, id: SymbolId) -> f64 {
        self.0[id.index()]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Ground-truth counts: `counts[n]` is the multiplicity of symbol `n` in `seq`.
pub fn derive_count_vector(seq: &[SymbolId], n_symbols: usize) -> CountingVector {
    let mut counts = vec![0.0; n_symbols];
    for t in seq {
        counts[t.index()] += 1.0;
    }
    CountingVector(counts)
}

/// Binary existence targets: 1 where the count is positive.
pub fn derive_existence(counts: &CountingVector) -> Vec<f64> {
    counts.0.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect()
}
