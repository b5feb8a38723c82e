//! Sequence and tree distances used by the dictionary-matching baselines.

use serde::{Deserialize, Serialize};

use super::dict::{CharClass, IdsDictionary};
use super::tree::{parse_ids, IdsTree};
use super::vocab::{SymbolId, SymbolVocabulary};

/// Depth discount of the probability-embedding stand-in.
pub const DEFAULT_DEPTH_DISCOUNT: f64 = 0.5;

/// Levenshtein distance with unit insert/delete/substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(row[j + 1] + 1);
        }
    }
    row[b.len()]
}

/// Postorder view of a tree for Zhang–Shasha.
struct Postorder {
    labels: Vec<SymbolId>,
    depths: Vec<usize>,
    /// Leftmost leaf descendant (postorder index) of each node.
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

impl Postorder {
    fn new(tree: Option<&IdsTree>) -> Self {
        let mut p = Postorder { labels: Vec::new(), depths: Vec::new(), lml: Vec::new(), keyroots: Vec::new() };
        if let Some(t) = tree {
            p.walk(t, 0);
        }
        let n = p.labels.len();
        // A keyroot is the highest node for each distinct leftmost leaf.
        let mut seen = vec![false; n];
        for i in (0..n).rev() {
            if !seen[p.lml[i]] {
                seen[p.lml[i]] = true;
                p.keyroots.push(i);
            }
        }
        p.keyroots.sort_unstable();
        p
    }

    fn walk(&mut self, t: &IdsTree, depth: usize) -> usize {
        let leftmost = match t {
            IdsTree::Leaf(_) => self.labels.len(),
            IdsTree::Node { left, right, .. } => {
                let l = self.walk(left, depth + 1);
                self.walk(right, depth + 1);
                l
            }
        };
        self.labels.push(t.symbol());
        self.depths.push(depth);
        self.lml.push(leftmost);
        leftmost
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Weighted tree edit distance where a node at depth `d` (root depth 0) costs
/// `gamma^d` to insert or delete, and relabelling costs the mean of both
/// nodes' weights. `None` stands for an empty tree (unparseable decode).
pub fn prob_embedding_score(a: Option<&IdsTree>, b: Option<&IdsTree>, gamma: f64) -> f64 {
    let pa = Postorder::new(a);
    let pb = Postorder::new(b);
    let w = |d: usize| gamma.powi(d as i32);
    let (n, m) = (pa.len(), pb.len());
    if n == 0 || m == 0 {
        return pa.depths.iter().map(|&d| w(d)).sum::<f64>() + pb.depths.iter().map(|&d| w(d)).sum::<f64>();
    }
    let del = |i: usize| w(pa.depths[i]);
    let ins = |j: usize| w(pb.depths[j]);
    let ren = |i: usize, j: usize| {
        if pa.labels[i] == pb.labels[j] {
            0.0
        } else {
            0.5 * (w(pa.depths[i]) + w(pb.depths[j]))
        }
    };

    let mut td = vec![vec![0.0f64; m]; n];
    // Forest distance table shifted by one: fd[x + 1][y + 1] covers nodes ..=x, ..=y.
    let mut fd = vec![vec![0.0f64; m + 1]; n + 1];
    for &i in &pa.keyroots {
        for &j in &pb.keyroots {
            let (li, lj) = (pa.lml[i], pb.lml[j]);
            fd[li][lj] = 0.0;
            for x in li..=i {
                fd[x + 1][lj] = fd[x][lj] + del(x);
            }
            for y in lj..=j {
                fd[li][y + 1] = fd[li][y] + ins(y);
            }
            for x in li..=i {
                for y in lj..=j {
                    let by_del = fd[x][y + 1] + del(x);
                    let by_ins = fd[x + 1][y] + ins(y);
                    if pa.lml[x] == li && pb.lml[y] == lj {
                        let v = by_del.min(by_ins).min(fd[x][y] + ren(x, y));
                        fd[x + 1][y + 1] = v;
                        td[x][y] = v;
                    } else {
                        let by_sub = fd[pa.lml[x]][pb.lml[y]] + td[x][y];
                        fd[x + 1][y + 1] = by_del.min(by_ins).min(by_sub);
                    }
                }
            }
        }
    }
    td[n - 1][m - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Edit,
    ProbEmbed,
}

/// Ranks every dictionary class by distance to `seq` and keeps the `k`
/// closest (ascending score, ties by ascending class id). `k` larger than
/// the dictionary is truncated.
pub fn baseline_candidates(
    seq: &[SymbolId],
    vocab: &SymbolVocabulary,
    dict: &IdsDictionary,
    k: usize,
    method: BaselineMethod,
) -> Vec<(CharClass, f64)> {
    let query_tree = match method {
        BaselineMethod::ProbEmbed => parse_ids(seq, vocab).ok(),
        BaselineMethod::Edit => None,
    };
    let mut scored: Vec<(CharClass, f64)> = dict
        .iter()
        .map(|(class, entry)| {
            let score = match method {
                BaselineMethod::Edit => edit_distance(seq, entry) as f64,
                BaselineMethod::ProbEmbed => {
                    let entry_tree = parse_ids(entry, vocab).ok();
                    prob_embedding_score(query_tree.as_ref(), entry_tree.as_ref(), DEFAULT_DEPTH_DISCOUNT)
                }
            };
            (class, score)
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k.min(dict.len()));
    scored
}
