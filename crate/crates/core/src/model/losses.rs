use super::forward::{CountOutput, DecodeTrace};
use crate::tensor::{Graph, Real, Var};

/// Counter objective.
///
/// Two-step: mean existence BCE plus smooth-L1 count regression averaged over
/// the classes predicted present (`𝓟_n > 0.5`); the regression term is zero
/// when none is. One-step: smooth-L1 regression of every count.
pub fn counter_loss<T: Real>(g: &mut Graph<'_, T>, out: &CountOutput, target_counts: &[f64], two_step: bool) -> Var {
    let n = target_counts.len();
    let target = g.constant(&[n], target_counts.iter().map(|&c| T::from_f64(c)).collect());
    let diff = g.sub(out.counts, target);
    let sl1 = g.smooth_l1(diff);
    if !two_step {
        return g.mean(sl1);
    }
    let exist: Vec<T> = target_counts.iter().map(|&c| if c > 0.0 { T::one() } else { T::zero() }).collect();
    let bce = g.bce(out.existence, &exist);
    let cls = g.scale(bce, T::from_f64(1.0 / n as f64));
    let mask: Vec<T> = g.value(out.existence).iter().map(|&p| if p > T::from_f64(0.5) { T::one() } else { T::zero() }).collect();
    let n_prime = mask.iter().filter(|&&m| m > T::zero()).count();
    if n_prime == 0 {
        return cls;
    }
    let masked = g.mul_const(sl1, mask);
    let reg = g.sum(masked);
    let reg = g.scale(reg, T::from_f64(1.0 / n_prime as f64));
    g.add(cls, reg)
}

/// Mean negative log-likelihood of the targets (end token included).
pub fn decoder_loss<T: Real>(g: &mut Graph<'_, T>, trace: &DecodeTrace, targets: &[usize]) -> Result<Var, String> {
    if trace.steps.len() != targets.len() || targets.is_empty() {
        return Err(format!("trace has {} steps for {} targets", trace.steps.len(), targets.len()));
    }
    let terms: Vec<Var> = trace.steps.iter().zip(targets).map(|(s, &y)| g.nll(s.p, y)).collect();
    let total = g.add_all(&terms);
    Ok(g.scale(total, T::from_f64(1.0 / targets.len() as f64)))
}

/// `−log p_fet[ideal]`.
pub fn fetcher_loss<T: Real>(g: &mut Graph<'_, T>, p_fet: Var, ideal: usize) -> Var {
    g.nll(p_fet, ideal)
}

/// KL between the decoder's mean attention per symbol class and the
/// counter's tempered energy softmax, averaged over the distinct classes of
/// the target sequence. Steps whose target is `>= n_symbols` (the end token)
/// have no energy map and are skipped. Returns `None` if no class qualifies.
pub fn attention_regularization<T: Real>(
    g: &mut Graph<'_, T>,
    trace: &DecodeTrace,
    energy: Var,
    targets: &[usize],
    n_symbols: usize,
    temperature: f64,
) -> Option<Var> {
    let l = g.shape(energy)[0];
    let mut classes: Vec<usize> = targets.iter().copied().filter(|&y| y < n_symbols).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let mut terms = Vec::with_capacity(classes.len());
    for &c in &classes {
        let maps: Vec<Var> =
            trace.steps.iter().zip(targets).filter(|(_, &y)| y == c).map(|(s, _)| s.alpha).collect();
        let total = g.add_all(&maps);
        let decode_att = g.scale(total, T::from_f64(1.0 / maps.len() as f64));
        let col = g.slice_cols(energy, c, 1);
        let col = g.reshape(col, &[l]);
        let count_att = g.softmax(col, T::from_f64(temperature));
        terms.push(g.kl(decode_att, count_att));
    }
    let total = g.add_all(&terms);
    Some(g.scale(total, T::from_f64(1.0 / classes.len() as f64)))
}
