use super::vocab::{SymbolId, SymbolVocabulary};
use super::IdsError;

/// Structural description of one character: operators at internal nodes,
/// radicals at the leaves.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum IdsTree {
    Leaf(SymbolId),
    Node { op: SymbolId, left: Box<IdsTree>, right: Box<IdsTree> },
}

impl IdsTree {
    pub fn leaf(id: SymbolId) -> Self {
        IdsTree::Leaf(id)
    }

    pub fn node(op: SymbolId, left: IdsTree, right: IdsTree) -> Self {
        IdsTree::Node { op, left: Box::new(left), right: Box::new(right) }
    }

    pub fn symbol(&self) -> SymbolId {
        match self {
            IdsTree::Leaf(s) => *s,
            IdsTree::Node { op, .. } => *op,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            IdsTree::Leaf(_) => 1,
            IdsTree::Node { left, right, .. } => 1 + left.len() + right.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn depth(&self) -> usize {
        match self {
            IdsTree::Leaf(_) => 0,
            IdsTree::Node { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> Vec<SymbolId> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |s| out.push(s));
        out
    }

    fn visit_leaves(&self, f: &mut impl FnMut(SymbolId)) {
        match self {
            IdsTree::Leaf(s) => f(*s),
            IdsTree::Node { left, right, .. } => {
                left.visit_leaves(f);
                right.visit_leaves(f);
            }
        }
    }

    /// Checks that operators sit on internal nodes and radicals on leaves.
    pub fn check(&self, vocab: &SymbolVocabulary) -> Result<(), IdsError> {
        match self {
            IdsTree::Leaf(s) => {
                if vocab.get(*s).is_none() {
                    return Err(IdsError::Malformed(format!("symbol {s} out of range")));
                }
                if vocab.is_structure(*s) {
                    return Err(IdsError::Malformed(format!("structure {} at a leaf", vocab.name(*s))));
                }
                Ok(())
            }
            IdsTree::Node { op, left, right } => {
                if !vocab.is_structure(*op) {
                    return Err(IdsError::Malformed(format!("non-structure symbol {op} at an internal node")));
                }
                left.check(vocab)?;
                right.check(vocab)
            }
        }
    }
}

/// Parses a prefix (depth-first) token sequence into its unique tree.
pub fn parse_ids(tokens: &[SymbolId], vocab: &SymbolVocabulary) -> Result<IdsTree, IdsError> {
    if tokens.is_empty() {
        return Err(IdsError::Malformed("empty sequence".into()));
    }
    if let Some(bad) = tokens.iter().find(|t| t.index() >= vocab.len()) {
        return Err(IdsError::Malformed(format!("symbol {bad} out of range (N = {})", vocab.len())));
    }
    let mut pos = 0;
    let tree = parse_at(tokens, &mut pos, vocab)?;
    if pos != tokens.len() {
        return Err(IdsError::Malformed(format!("{} trailing token(s) after position {pos}", tokens.len() - pos)));
    }
    Ok(tree)
}

fn parse_at(tokens: &[SymbolId], pos: &mut usize, vocab: &SymbolVocabulary) -> Result<IdsTree, IdsError> {
    let Some(&tok) = tokens.get(*pos) else {
        return Err(IdsError::Malformed(format!("operator missing operand at position {pos}")));
    };
    *pos += 1;
    if vocab.is_structure(tok) {
        let left = parse_at(tokens, pos, vocab)?;
        let right = parse_at(tokens, pos, vocab)?;
        Ok(IdsTree::node(tok, left, right))
    } else {
        Ok(IdsTree::Leaf(tok))
    }
}

/// Depth-first prefix serialization.
pub fn serialize_tree(tree: &IdsTree) -> Vec<SymbolId> {
    let mut out = Vec::with_capacity(tree.len());
    push_prefix(tree, &mut out);
    out
}

fn push_prefix(tree: &IdsTree, out: &mut Vec<SymbolId>) {
    match tree {
        IdsTree::Leaf(s) => out.push(*s),
        IdsTree::Node { op, left, right } => {
            out.push(*op);
            push_prefix(left, out);
            push_prefix(right, out);
        }
    }
}

/// True if the sequence parses.
pub fn is_well_formed(tokens: &[SymbolId], vocab: &SymbolVocabulary) -> bool {
    parse_ids(tokens, vocab).is_ok()
}
