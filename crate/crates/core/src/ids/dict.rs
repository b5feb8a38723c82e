use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::tree::parse_ids;
use super::vocab::{SymbolId, SymbolVocabulary};
use super::IdsError;

/// Index of a right character (`0..M`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CharClass(pub u32);

impl CharClass {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CharClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bijection between IDS sequences of right characters and class ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdsDictionary {
    by_seq: HashMap<Vec<SymbolId>, CharClass>,
    by_class: Vec<Vec<SymbolId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Right(CharClass),
    MisspelledCandidate,
}

impl IdsDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the next class; duplicates are rejected to keep the map bijective.
    pub fn insert(&mut self, seq: Vec<SymbolId>) -> Result<CharClass, IdsError> {
        if self.by_seq.contains_key(&seq) {
            return Err(IdsError::DuplicateEntry(format!("{seq:?}")));
        }
        let class = CharClass(self.by_class.len() as u32);
        self.by_seq.insert(seq.clone(), class);
        self.by_class.push(seq);
        Ok(class)
    }

    pub fn len(&self) -> usize {
        self.by_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }

    pub fn get(&self, seq: &[SymbolId]) -> Option<CharClass> {
        self.by_seq.get(seq).copied()
    }

    pub fn contains(&self, seq: &[SymbolId]) -> bool {
        self.by_seq.contains_key(seq)
    }

    pub fn sequence(&self, class: CharClass) -> Option<&[SymbolId]> {
        self.by_class.get(class.index()).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (CharClass, &[SymbolId])> {
        self.by_class.iter().enumerate().map(|(i, s)| (CharClass(i as u32), s.as_slice()))
    }

    /// Writes `<class_id>\t<space-separated symbol names>` lines.
    pub fn write_to<W: Write>(&self, mut w: W, vocab: &SymbolVocabulary) -> std::io::Result<()> {
        for (class, seq) in self.iter() {
            writeln!(w, "{}\t{}", class.0, vocab.decode(seq))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, vocab: &SymbolVocabulary) -> Result<Self, IdsError> {
        let mut dict = IdsDictionary::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| IdsError::InvalidDictionary(format!("line {}: {why}", lineno + 1));
            let (id, names) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad("class id is not an integer"))?;
            if id != dict.len() {
                return Err(bad("class ids must be dense and ordered"));
            }
            let seq = vocab.encode(names)?;
            parse_ids(&seq, vocab).map_err(|e| bad(&e.to_string()))?;
            dict.insert(seq)?;
        }
        Ok(dict)
    }
}

/// Exact dictionary lookup of a decoded sequence.
///
/// Unparseable sequences are reported as [`IdsError::Malformed`]; callers that
/// only need a verdict treat that as misspelled.
pub fn validate(seq: &[SymbolId], vocab: &SymbolVocabulary, dict: &IdsDictionary) -> Result<Validation, IdsError> {
    parse_ids(seq, vocab)?;
    Ok(match dict.get(seq) {
        Some(c) => Validation::Right(c),
        None => Validation::MisspelledCandidate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (SymbolVocabulary, IdsDictionary) {
        let v = SymbolVocabulary::with_radicals(["a", "b", "c"]).unwrap();
        let mut d = IdsDictionary::new();
        d.insert(v.encode("lr a b").unwrap()).unwrap();
        d.insert(v.encode("ab a lr b c").unwrap()).unwrap();
        d.insert(v.encode("c").unwrap()).unwrap();
        (v, d)
    }

    #[test]
    fn lookup_entries() {
        let (v, d) = setup();
        assert_eq!(validate(&v.encode("ab a lr b c").unwrap(), &v, &d).unwrap(), Validation::Right(CharClass(1)));
        assert_eq!(d.sequence(CharClass(2)).unwrap(), &v.encode("c").unwrap()[..]);
    }

    #[test]
    fn substituted_radical_is_candidate() {
        let (v, d) = setup();
        let mutant = v.encode("lr a c").unwrap();
        assert_eq!(validate(&mutant, &v, &d).unwrap(), Validation::MisspelledCandidate);
    }

    #[test]
    fn empty_dictionary() {
        let (v, _) = setup();
        let d = IdsDictionary::new();
        assert_eq!(validate(&v.encode("a").unwrap(), &v, &d).unwrap(), Validation::MisspelledCandidate);
    }

    #[test]
    fn malformed_is_error() {
        let (v, d) = setup();
        assert!(matches!(validate(&v.encode("lr a").unwrap(), &v, &d), Err(IdsError::Malformed(_))));
    }

    #[test]
    fn duplicate_rejected() {
        let (v, mut d) = setup();
        assert!(d.insert(v.encode("c").unwrap()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let (v, d) = setup();
        let mut buf = Vec::new();
        d.write_to(&mut buf, &v).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "0\tlr a b\n1\tab a lr b c\n2\tc\n");
        assert_eq!(IdsDictionary::read_from(&buf[..], &v).unwrap(), d);
    }

    #[test]
    fn unparseable_entry_rejected() {
        let (v, _) = setup();
        assert!(IdsDictionary::read_from("0\tlr a\n".as_bytes(), &v).is_err());
        assert!(IdsDictionary::read_from("0\tlr a zz\n".as_bytes(), &v).is_err());
    }
}
