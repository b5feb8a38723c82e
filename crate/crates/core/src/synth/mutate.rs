use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::glyph::GlyphSet;
use super::SynthError;
use crate::ids::{serialize_tree, IdsDictionary, IdsTree, SymbolId, SymbolVocabulary};

/// Rejection-sampling budget of [`mutate`].
pub const MAX_MUTATION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorType {
    None,
    Stroke,
    Radical,
    Structure,
}

impl ErrorType {
    pub const MISSPELLED: [ErrorType; 3] = [ErrorType::Stroke, ErrorType::Radical, ErrorType::Structure];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::None => "none",
            ErrorType::Stroke => "stroke",
            ErrorType::Radical => "radical",
            ErrorType::Structure => "structure",
        }
    }
}

fn node_paths(tree: &IdsTree, path: &mut Vec<bool>, leaves: &mut Vec<Vec<bool>>, nodes: &mut Vec<Vec<bool>>) {
    match tree {
        IdsTree::Leaf(_) => leaves.push(path.clone()),
        IdsTree::Node { left, right, .. } => {
            nodes.push(path.clone());
            path.push(false);
            node_paths(left, path, leaves, nodes);
            path.pop();
            path.push(true);
            node_paths(right, path, leaves, nodes);
            path.pop();
        }
    }
}

fn at_mut<'t>(tree: &'t mut IdsTree, path: &[bool]) -> &'t mut IdsTree {
    path.iter().fold(tree, |t, &right| match t {
        IdsTree::Node { left, right: r, .. } => {
            if right {
                r
            } else {
                left
            }
        }
        IdsTree::Leaf(_) => unreachable!("path leads through a leaf"),
    })
}

/// One random edit of the requested kind; may or may not leave the dictionary.
fn propose(
    tree: &IdsTree,
    kind: ErrorType,
    vocab: &SymbolVocabulary,
    glyphs: &GlyphSet,
    radicals: &[SymbolId],
    rng: &mut impl Rng,
) -> Option<IdsTree> {
    let (mut leaves, mut nodes) = (Vec::new(), Vec::new());
    node_paths(tree, &mut Vec::new(), &mut leaves, &mut nodes);
    let structures: Vec<SymbolId> = vocab.structures().collect();
    let mut out = tree.clone();
    match kind {
        ErrorType::None => return None,
        ErrorType::Stroke => {
            let candidates: Vec<&Vec<bool>> = leaves
                .iter()
                .filter(|p| !glyphs.variants_of(at_mut(&mut out.clone(), p).symbol()).is_empty())
                .collect();
            let path = *candidates.choose(rng)?;
            let leaf = at_mut(&mut out, path);
            let v = *glyphs.variants_of(leaf.symbol()).choose(rng)?;
            *leaf = IdsTree::leaf(v);
        }
        ErrorType::Radical => {
            let choice = rng.gen_range(0..10);
            if choice < 6 || (choice >= 8 && nodes.is_empty()) {
                let path = leaves.choose(rng)?;
                let leaf = at_mut(&mut out, path);
                let old = leaf.symbol();
                let new = *radicals.iter().filter(|&&r| r != old).collect::<Vec<_>>().choose(rng)?;
                *leaf = IdsTree::leaf(*new);
            } else if choice < 8 {
                let path = leaves.choose(rng)?;
                let leaf = at_mut(&mut out, path);
                let old = leaf.clone();
                let new = IdsTree::leaf(*radicals.choose(rng)?);
                let op = *structures.choose(rng)?;
                *leaf = if rng.gen_bool(0.5) { IdsTree::node(op, old, new) } else { IdsTree::node(op, new, old) };
            } else {
                // delete a leaf child, promoting its sibling
                let deletable: Vec<&Vec<bool>> = nodes
                    .iter()
                    .filter(|p| {
                        let mut t = tree.clone();
                        matches!(at_mut(&mut t, p), IdsTree::Node { left, right, .. }
                            if matches!(**left, IdsTree::Leaf(_)) || matches!(**right, IdsTree::Leaf(_)))
                    })
                    .collect();
                let path = *deletable.choose(rng)?;
                let node = at_mut(&mut out, path);
                if let IdsTree::Node { left, right, .. } = node.clone() {
                    let left_leaf = matches!(*left, IdsTree::Leaf(_));
                    let right_leaf = matches!(*right, IdsTree::Leaf(_));
                    let drop_left = if left_leaf && right_leaf { rng.gen_bool(0.5) } else { left_leaf };
                    *node = if drop_left { *right } else { *left };
                }
            }
        }
        ErrorType::Structure => {
            let path = nodes.choose(rng)?;
            let node = at_mut(&mut out, path);
            if let IdsTree::Node { op, left, right } = node {
                if rng.gen_bool(0.5) {
                    let others: Vec<SymbolId> = structures.iter().copied().filter(|s| s != op).collect();
                    *op = *others.choose(rng)?;
                } else {
                    std::mem::swap(left, right);
                }
            }
        }
    }
    Some(out)
}

/// Applies one error of `kind` to a dictionary tree, resampling until the
/// mutant's sequence is absent from the dictionary.
///
/// Stroke errors swap a leaf for one of its variant symbols; radical errors
/// substitute, insert or delete one radical; structure errors change one
/// operator or swap its operands.
pub fn mutate(
    tree: &IdsTree,
    kind: ErrorType,
    vocab: &SymbolVocabulary,
    dict: &IdsDictionary,
    glyphs: &GlyphSet,
    radicals: &[SymbolId],
    rng: &mut impl Rng,
) -> Result<IdsTree, SynthError> {
    if !dict.contains(&serialize_tree(tree)) {
        return Err(SynthError::NotInDictionary(vocab.decode(&serialize_tree(tree))));
    }
    for _ in 0..MAX_MUTATION_ATTEMPTS {
        if let Some(m) = propose(tree, kind, vocab, glyphs, radicals, rng) {
            if !dict.contains(&serialize_tree(&m)) {
                return Ok(m);
            }
        }
    }
    Err(SynthError::Exhausted { kind: kind.as_str(), tree: vocab.decode(&serialize_tree(tree)) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{parse_ids, validate, Validation};
    use crate::synth::glyph::{RadicalPrimitive, StrokeProgram};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (SymbolVocabulary, IdsDictionary, GlyphSet, Vec<SymbolId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vocab = SymbolVocabulary::with_radicals(["a", "b", "c"]).unwrap();
        let radicals: Vec<SymbolId> = vocab.radicals().collect();
        let mut prims = Vec::new();
        for &r in &radicals {
            let p = StrokeProgram::random(&mut rng, 3, 4);
            let v = vocab.push_radical(format!("{}v1", vocab.name(r))).unwrap();
            let vp = p.variant(&mut rng);
            prims.push(RadicalPrimitive { radical: r, program: p, variants: vec![(v, vp)] });
        }
        let mut dict = IdsDictionary::new();
        for s in ["lr a b", "ab a b", "lr b c", "sf a ab b c"] {
            dict.insert(vocab.encode(s).unwrap()).unwrap();
        }
        (vocab, dict, GlyphSet::new(prims), radicals)
    }

    #[test]
    fn structure_mutation_of_left_right() {
        let (vocab, dict, glyphs, radicals) = setup();
        let t = parse_ids(&vocab.encode("lr a b").unwrap(), &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = mutate(&t, ErrorType::Structure, &vocab, &dict, &glyphs, &radicals, &mut rng).unwrap();
            let s = vocab.decode(&serialize_tree(&m));
            // "ab a b" is in the dictionary, so an operator change must pick another one
            assert!(s == "lr b a" || (s.ends_with(" a b") && s != "ab a b" && s != "lr a b"), "{s}");
        }
    }

    #[test]
    fn substitution_changes_one_leaf() {
        let (vocab, dict, glyphs, radicals) = setup();
        let t = parse_ids(&vocab.encode("sf a ab b c").unwrap(), &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut seen_sub = 0;
        for _ in 0..200 {
            let m = mutate(&t, ErrorType::Radical, &vocab, &dict, &glyphs, &radicals, &mut rng).unwrap();
            let (a, b) = (serialize_tree(&t), serialize_tree(&m));
            if a.len() == b.len() {
                seen_sub += 1;
                assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
                assert!(b.iter().zip(&a).all(|(x, y)| x == y || (!vocab.is_structure(*x) && !vocab.is_structure(*y))));
            } else {
                assert_eq!((a.len() as isize - b.len() as isize).abs(), 2);
            }
        }
        assert!(seen_sub > 50);
    }

    #[test]
    fn stroke_mutation_uses_variant() {
        let (vocab, dict, glyphs, radicals) = setup();
        let t = parse_ids(&vocab.encode("lr b c").unwrap(), &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = mutate(&t, ErrorType::Stroke, &vocab, &dict, &glyphs, &radicals, &mut rng).unwrap();
        let leaves = m.leaves();
        assert_eq!(leaves.len(), 2);
        assert!(leaves.iter().any(|l| glyphs.base_of(*l).is_some()));
    }

    #[test]
    fn mutants_never_in_dictionary() {
        let (vocab, dict, glyphs, radicals) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (_, seq) in dict.iter() {
            let t = parse_ids(seq, &vocab).unwrap();
            for kind in ErrorType::MISSPELLED {
                let m = mutate(&t, kind, &vocab, &dict, &glyphs, &radicals, &mut rng).unwrap();
                let v = validate(&serialize_tree(&m), &vocab, &dict).unwrap();
                assert_eq!(v, Validation::MisspelledCandidate);
            }
        }
    }

    #[test]
    fn exhaustion_reported() {
        let vocab = SymbolVocabulary::with_radicals(["a"]).unwrap();
        let mut dict = IdsDictionary::new();
        dict.insert(vocab.encode("a").unwrap()).unwrap();
        let t = parse_ids(&vocab.encode("a").unwrap(), &vocab).unwrap();
        let glyphs = GlyphSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let err = mutate(&t, ErrorType::Structure, &vocab, &dict, &glyphs, &[], &mut rng).unwrap_err();
        assert!(matches!(err, SynthError::Exhausted { .. }));
    }
}
