use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::IdsError;

/// Dense index of a symbol in a [`SymbolVocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SymbolId(pub u32);

impl SymbolId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SymbolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Radical,
    Structure,
}

impl SymbolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SymbolKind::Radical => "radical",
            SymbolKind::Structure => "structure",
        }
    }
}

/// The ten binary layout operators, in canonical vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Structure {
    LeftRight,
    AboveBelow,
    BottomSurround,
    TopSurround,
    TopLeftSurround,
    TopRightSurround,
    BottomLeftSurround,
    FullSurround,
    LeftSurround,
    Overlaid,
}

impl Structure {
    pub const ALL: [Structure; 10] = [
        Structure::LeftRight,
        Structure::AboveBelow,
        Structure::BottomSurround,
        Structure::TopSurround,
        Structure::TopLeftSurround,
        Structure::TopRightSurround,
        Structure::BottomLeftSurround,
        Structure::FullSurround,
        Structure::LeftSurround,
        Structure::Overlaid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Structure::LeftRight => "lr",
            Structure::AboveBelow => "ab",
            Structure::BottomSurround => "sb",
            Structure::TopSurround => "st",
            Structure::TopLeftSurround => "stl",
            Structure::TopRightSurround => "str",
            Structure::BottomLeftSurround => "sbl",
            Structure::FullSurround => "sf",
            Structure::LeftSurround => "sl",
            Structure::Overlaid => "ov",
        }
    }

    pub fn from_name(name: &str) -> Option<Structure> {
        Structure::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub kind: SymbolKind,
}

/// Ordered symbol inventory: the ten structure operators followed by radicals.
///
/// Every vector of length `N` in the crate (counts, existence, energy maps)
/// is indexed by this vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolVocabulary {
    symbols: Vec<Symbol>,
    by_name: HashMap<String, SymbolId>,
}

impl SymbolVocabulary {
    /// Builds a vocabulary with the ten operators at ids `0..10` and the given
    /// radical names after them.
    pub fn with_radicals<I, S>(radicals: I) -> Result<Self, IdsError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut symbols: Vec<Symbol> = Structure::ALL
            .iter()
            .map(|s| Symbol { name: s.name().to_string(), kind: SymbolKind::Structure })
            .collect();
        symbols.extend(radicals.into_iter().map(|n| Symbol { name: n.into(), kind: SymbolKind::Radical }));
        Self::from_symbols(symbols)
    }

    pub fn from_symbols(symbols: Vec<Symbol>) -> Result<Self, IdsError> {
        let mut by_name = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.name.is_empty() || s.name.chars().any(char::is_whitespace) {
                return Err(IdsError::InvalidVocabulary(format!("bad symbol name {:?}", s.name)));
            }
            if by_name.insert(s.name.clone(), SymbolId(i as u32)).is_some() {
                return Err(IdsError::InvalidVocabulary(format!("duplicate symbol name {:?}", s.name)));
            }
        }
        let structures = symbols.iter().filter(|s| s.kind == SymbolKind::Structure).count();
        if structures != 10 {
            return Err(IdsError::InvalidVocabulary(format!(
                "expected exactly 10 structure symbols, found {structures}"
            )));
        }
        Ok(SymbolVocabulary { symbols, by_name })
    }

    /// Appends a radical (used for stroke-level variant radicals).
    pub fn push_radical(&mut self, name: impl Into<String>) -> Result<SymbolId, IdsError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(IdsError::InvalidVocabulary(format!("duplicate symbol name {name:?}")));
        }
        let id = SymbolId(self.symbols.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.symbols.push(Symbol { name, kind: SymbolKind::Radical });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn get(&self, id: SymbolId) -> Option<&Symbol> {
        self.symbols.get(id.index())
    }

    pub fn name(&self, id: SymbolId) -> &str {
        &self.symbols[id.index()].name
    }

    pub fn kind(&self, id: SymbolId) -> Option<SymbolKind> {
        self.get(id).map(|s| s.kind)
    }

    pub fn is_structure(&self, id: SymbolId) -> bool {
        self.kind(id) == Some(SymbolKind::Structure)
    }

    pub fn lookup(&self, name: &str) -> Option<SymbolId> {
        self.by_name.get(name).copied()
    }

    pub fn structure_id(&self, s: Structure) -> SymbolId {
        self.by_name[s.name()]
    }

    pub fn structure_of(&self, id: SymbolId) -> Option<Structure> {
        match self.get(id) {
            Some(sym) if sym.kind == SymbolKind::Structure => Structure::from_name(&sym.name),
            _ => None,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = SymbolId> + '_ {
        (0..self.symbols.len() as u32).map(SymbolId)
    }

    pub fn radicals(&self) -> impl Iterator<Item = SymbolId> + '_ {
        self.ids().filter(|&id| !self.is_structure(id))
    }

    pub fn structures(&self) -> impl Iterator<Item = SymbolId> + '_ {
        self.ids().filter(|&id| self.is_structure(id))
    }

    /// Resolves space-separated symbol names into ids.
    pub fn encode(&self, text: &str) -> Result<Vec<SymbolId>, IdsError> {
        text.split_whitespace()
            .map(|n| self.lookup(n).ok_or_else(|| IdsError::UnknownSymbol(n.to_string())))
            .collect()
    }

    pub fn decode(&self, tokens: &[SymbolId]) -> String {
        tokens
            .iter()
            .map(|&t| self.get(t).map_or("<?>", |s| s.name.as_str()))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Writes `<symbol_id>\t<name>\t<radical|structure>` lines.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, s) in self.symbols.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}", i, s.name, s.kind.as_str())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, IdsError> {
        let mut symbols = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = || IdsError::InvalidVocabulary(format!("line {}: {line:?}", lineno + 1));
            let mut cols = line.split('\t');
            let (Some(id), Some(name), Some(kind), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad());
            };
            let id: usize = id.parse().map_err(|_| bad())?;
            if id != symbols.len() {
                return Err(IdsError::InvalidVocabulary(format!(
                    "line {}: symbol ids must be dense and ordered, got {id}",
                    lineno + 1
                )));
            }
            let kind = match kind {
                "radical" => SymbolKind::Radical,
                "structure" => SymbolKind::Structure,
                _ => return Err(bad()),
            };
            symbols.push(Symbol { name: name.to_string(), kind });
        }
        Self::from_symbols(symbols)
    }
}
