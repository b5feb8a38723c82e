use serde::Serialize;

/// Per-sample facts the metrics are aggregated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// Ground truth: the sample is a misspelling.
    pub misspelled: bool,
    pub predicted_misspelled: bool,
    /// Decoded sequence equals the ground truth exactly.
    pub decomposed: bool,
    /// Position of the ideal character among the candidates, if present.
    pub ideal_rank: Option<usize>,
    pub abs_count_error: f64,
    pub sq_count_error: f64,
    /// Number of count entries the two error sums run over.
    pub count_entries: usize,
}

/// Metrics over a set of samples. Misspelled is the positive class for
/// precision, recall and F1; rates that would divide by zero are `None`.
/// IACC and CR cover the misspelled samples only. MAE and MSE are scaled
/// by 100.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSet {
    pub samples: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub dacc: f64,
    /// `iacc[k - 1]` is IACC@k.
    pub iacc: Option<Vec<f64>>,
    pub cr: Option<f64>,
    pub mae: f64,
    pub mse: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricSet {
    /// Aggregates outcomes; CR uses the top-`k` candidates.
    pub fn from_outcomes(outcomes: &[SampleOutcome], k: usize) -> MetricSet {
        let n = outcomes.len();
        let tp = outcomes.iter().filter(|o| o.misspelled && o.predicted_misspelled).count();
        let predicted = outcomes.iter().filter(|o| o.predicted_misspelled).count();
        let positives = outcomes.iter().filter(|o| o.misspelled).count();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, positives);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        let dacc = ratio(outcomes.iter().filter(|o| o.decomposed).count(), n).unwrap_or(0.0);
        let mis: Vec<&SampleOutcome> = outcomes.iter().filter(|o| o.misspelled).collect();
        let iacc = (!mis.is_empty()).then(|| {
            (1..=k).map(|j| mis.iter().filter(|o| o.ideal_rank.is_some_and(|r| r < j)).count() as f64 / mis.len() as f64).collect()
        });
        let cr = ratio(mis.iter().filter(|o| o.decomposed && o.ideal_rank.is_some_and(|r| r < k)).count(), mis.len());
        let entries: usize = outcomes.iter().map(|o| o.count_entries).sum();
        let mae = ratio(1, entries).map_or(0.0, |inv| 100.0 * inv * outcomes.iter().map(|o| o.abs_count_error).sum::<f64>());
        let mse = ratio(1, entries).map_or(0.0, |inv| 100.0 * inv * outcomes.iter().map(|o| o.sq_count_error).sum::<f64>());
        MetricSet { samples: n, precision, recall, f1, dacc, iacc, cr, mae, mse }
    }
}
