//! Assessment and correction pipeline plus the metric suite.

mod metrics;

pub use metrics::{MetricSet, SampleOutcome};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ids::{baseline_candidates, derive_count_vector, validate, BaselineMethod, CharClass, IdsDictionary, SymbolId, SymbolVocabulary, Validation};
use crate::model::{CdfModel, DecodeMode, ModelError};
use crate::synth::{Corpus, ErrorType, GlyphImage, Split};
use crate::tensor::{Graph, Real};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("split {0} has no samples")]
    EmptySplit(String),
    #[error("checkpoint and corpus disagree: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads a checkpoint and rebuilds the symbol vocabulary it was trained on.
pub fn load_checkpoint<R: std::io::Read>(r: R) -> Result<(CdfModel<f32>, SymbolVocabulary), EvalError> {
    let (model, meta) = CdfModel::<f32>::load(r)?;
    let radicals = meta.symbols.iter().skip(crate::ids::Structure::ALL.len());
    let vocab = SymbolVocabulary::with_radicals(radicals).map_err(|e| EvalError::Incompatible(e.to_string()))?;
    if vocab.ids().map(|id| vocab.name(id)).ne(meta.symbols.iter().map(String::as_str)) {
        return Err(EvalError::Incompatible("unexpected symbol order in checkpoint".into()));
    }
    Ok((model, vocab))
}

/// Fails unless `model` and `vocab` match the corpus vocabulary and dictionary.
pub fn check_compatible(model: &CdfModel<f32>, vocab: &SymbolVocabulary, corpus: &Corpus) -> Result<(), EvalError> {
    let same = vocab.len() == corpus.vocab.len() && vocab.ids().all(|id| vocab.name(id) == corpus.vocab.name(id));
    if !same || model.config.n_classes != corpus.n_classes() {
        return Err(EvalError::Incompatible("checkpoint was trained on a different vocabulary or dictionary".into()));
    }
    Ok(())
}

/// Source of correction candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corrector {
    Fetcher,
    Edit,
    ProbEmbed,
}

impl std::str::FromStr for Corrector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fetcher" => Ok(Corrector::Fetcher),
            "edit" => Ok(Corrector::Edit),
            "prob_embed" => Ok(Corrector::ProbEmbed),
            _ => Err(format!("unknown corrector {s:?} (expected fetcher, edit or prob_embed)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub reweight: bool,
    /// Feed the counting vector to the decoder (only meaningful for a model
    /// trained with it).
    pub count_vector: bool,
    pub corrector: Corrector,
    pub topk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { reweight: true, count_vector: true, corrector: Corrector::Fetcher, topk: 5 }
    }
}

/// Everything inference produces for one image.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub symbols: Vec<SymbolId>,
    /// Counter prediction over the N symbols.
    pub counts: Vec<f64>,
    /// Decoding hit the length limit without an end token.
    pub overflow: bool,
    /// Fetcher distribution over the M right characters.
    pub fetch: Vec<f64>,
}

fn with_count_vector<T: Real>(model: &CdfModel<T>, on: bool) -> std::borrow::Cow<'_, CdfModel<T>> {
    if model.config.use_count_vector == on {
        std::borrow::Cow::Borrowed(model)
    } else {
        let mut m = model.clone();
        m.config.use_count_vector = on;
        std::borrow::Cow::Owned(m)
    }
}

/// Encode, count, greedy decode and fetch (no RandomDrop).
pub fn analyze<T: Real>(model: &CdfModel<T>, image: &[f32], reweight: bool) -> Result<Analysis, ModelError> {
    let mut g = Graph::new(&model.store);
    let (f, f_chw) = model.encode(&mut g, image)?;
    let counted = model.count(&mut g, f);
    let counts: Vec<f64> = g.value(counted.counts).iter().map(|&v| Real::to_f64(v)).collect();
    let trace = model.decode(&mut g, f, f_chw, &counts, DecodeMode::Greedy { reweight });
    let feats: Vec<_> = trace.steps.iter().map(|s| s.g).collect();
    let p = model.fetch(&mut g, f_chw, &feats, None)?;
    let end = model.config.end_token();
    Ok(Analysis {
        symbols: trace.symbols(end).into_iter().map(|i| SymbolId(i as u32)).collect(),
        counts,
        overflow: trace.overflow,
        fetch: g.value(p).iter().map(|&v| Real::to_f64(v)).collect(),
    })
}

/// Top-`k` entries of a distribution, descending, ties by ascending class.
pub fn top_k(p: &[f64], k: usize) -> Vec<(CharClass, f64)> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (CharClass(i as u32), p[i])).collect()
}

/// Correction candidates for a decoded sequence. Fetcher scores are
/// probabilities (descending); baseline scores are distances (ascending).
pub fn candidates(
    analysis: &Analysis,
    corrector: Corrector,
    vocab: &SymbolVocabulary,
    dict: &IdsDictionary,
    k: usize,
) -> Vec<(CharClass, f64)> {
    match corrector {
        Corrector::Fetcher => top_k(&analysis.fetch, k),
        Corrector::Edit => baseline_candidates(&analysis.symbols, vocab, dict, k, BaselineMethod::Edit),
        Corrector::ProbEmbed => baseline_candidates(&analysis.symbols, vocab, dict, k, BaselineMethod::ProbEmbed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Right { class: CharClass },
    Misspelled {
        decomposed: Vec<SymbolId>,
        /// The decode was not a well-formed IDS.
        unparseable: bool,
        candidates: Vec<(CharClass, f64)>,
    },
}

impl Verdict {
    pub fn is_misspelled(&self) -> bool {
        matches!(self, Verdict::Misspelled { .. })
    }
}

/// Dictionary verdict for an analysis.
pub fn verdict_of(analysis: &Analysis, vocab: &SymbolVocabulary, dict: &IdsDictionary, opts: &EvalOptions) -> Verdict {
    let (right, unparseable) = match validate(&analysis.symbols, vocab, dict) {
        Ok(Validation::Right(c)) => (Some(c), false),
        Ok(Validation::MisspelledCandidate) => (None, false),
        Err(_) => (None, true),
    };
    match right {
        Some(class) => Verdict::Right { class },
        None => Verdict::Misspelled {
            decomposed: analysis.symbols.clone(),
            unparseable,
            candidates: candidates(analysis, opts.corrector, vocab, dict, opts.topk),
        },
    }
}

/// Full pipeline for one image.
pub fn assess<T: Real>(
    model: &CdfModel<T>,
    image: &[f32],
    vocab: &SymbolVocabulary,
    dict: &IdsDictionary,
    opts: &EvalOptions,
) -> Result<Verdict, ModelError> {
    let model = with_count_vector(model, opts.count_vector);
    let a = analyze(&model, image, opts.reweight)?;
    Ok(verdict_of(&a, vocab, dict, opts))
}

/// Fraction of `indices` decoded exactly.
pub fn decomposition_accuracy<T: Real>(model: &CdfModel<T>, corpus: &Corpus, indices: &[usize], reweight: bool) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let hits: usize = indices
        .par_iter()
        .map(|&i| {
            let a = analyze(model, &corpus.images[i].intensities(), reweight).expect("corpus image matches model");
            usize::from(a.symbols == corpus.records[i].ids)
        })
        .sum();
    hits as f64 / indices.len() as f64
}

/// Outcome of one labeled sample under the given options.
pub fn outcome(analysis: &Analysis, truth_ids: &[SymbolId], misspelled: bool, ideal: CharClass, corpus: &Corpus, opts: &EvalOptions) -> SampleOutcome {
    let verdict = verdict_of(analysis, &corpus.vocab, &corpus.dict, opts);
    // IACC is measured for every misspelled sample, whatever the verdict.
    let ranked = candidates(analysis, opts.corrector, &corpus.vocab, &corpus.dict, opts.topk);
    let ideal_rank = ranked.iter().position(|(c, _)| *c == ideal);
    let truth = derive_count_vector(truth_ids, corpus.n_symbols());
    let (abs, sq) = analysis.counts.iter().zip(truth.as_slice()).fold((0.0, 0.0), |(a, s), (&p, &t)| {
        let d = p - t;
        (a + d.abs(), s + d * d)
    });
    SampleOutcome {
        misspelled,
        predicted_misspelled: verdict.is_misspelled(),
        decomposed: analysis.symbols == truth_ids,
        ideal_rank,
        abs_count_error: abs,
        sq_count_error: sq,
        count_entries: analysis.counts.len(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub seed: u64,
    pub options: EvalOptions,
    pub all: MetricSet,
    pub right: Option<MetricSet>,
    pub misspelled: Option<MetricSet>,
    /// Misspelled samples grouped by error type.
    pub by_error_type: BTreeMap<String, MetricSet>,
    pub model: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluates `indices` of the corpus.
pub fn evaluate_indices<T: Real>(
    model: &CdfModel<T>,
    corpus: &Corpus,
    indices: &[usize],
    split_name: &str,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptySplit(split_name.to_string()));
    }
    if model.config.n_symbols != corpus.n_symbols() || model.config.n_classes != corpus.n_classes() {
        return Err(EvalError::Incompatible(format!(
            "model has N = {}, M = {}; corpus has N = {}, M = {}",
            model.config.n_symbols,
            model.config.n_classes,
            corpus.n_symbols(),
            corpus.n_classes()
        )));
    }
    let model = with_count_vector(model, opts.count_vector);
    let outcomes: Vec<(SampleOutcome, ErrorType)> = indices
        .par_iter()
        .map(|&i| {
            let rec = &corpus.records[i];
            let a = analyze(&model, &corpus.images[i].intensities(), opts.reweight)?;
            Ok((outcome(&a, &rec.ids, rec.is_misspelled(), rec.ideal, corpus, opts), rec.error_type))
        })
        .collect::<Result<_, ModelError>>()?;
    let pick = |f: &dyn Fn(&(SampleOutcome, ErrorType)) -> bool| -> Vec<SampleOutcome> {
        outcomes.iter().filter(|o| f(o)).map(|o| o.0.clone()).collect()
    };
    let subset = |v: Vec<SampleOutcome>| (!v.is_empty()).then(|| MetricSet::from_outcomes(&v, opts.topk));
    let mut by_error_type = BTreeMap::new();
    for kind in ErrorType::MISSPELLED {
        if let Some(m) = subset(pick(&|o| o.0.misspelled && o.1 == kind)) {
            by_error_type.insert(kind.as_str().to_string(), m);
        }
    }
    let all: Vec<SampleOutcome> = outcomes.iter().map(|o| o.0.clone()).collect();
    Ok(EvalReport {
        split: split_name.to_string(),
        samples: indices.len(),
        seed: corpus.config.seed,
        options: *opts,
        all: MetricSet::from_outcomes(&all, opts.topk),
        right: subset(pick(&|o| !o.0.misspelled)),
        misspelled: subset(pick(&|o| o.0.misspelled)),
        by_error_type,
        model: serde_json::to_value(&model.config).expect("config serializes"),
    })
}

/// Evaluates a whole split.
pub fn evaluate<T: Real>(model: &CdfModel<T>, corpus: &Corpus, split: Split, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    evaluate_indices(model, corpus, &corpus.indices(split), split.as_str(), opts)
}

/// Rescales values to the full 8-bit range (a constant map becomes zero).
fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect()
}

/// Nearest-neighbour upsampling of a `side`×`side` map to `size`×`size`.
fn upsample(map: &[f64], side: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            out.push(map[(y * side / size) * side + x * side / size]);
        }
    }
    out
}

/// Writes each decoding step's attention and the counter energy map of
/// every decoded symbol class as PGM files over the input grid, plus
/// `index.txt`. Returns the written image paths in order.
pub fn export_attention<T: Real>(
    model: &CdfModel<T>,
    image: &[f32],
    vocab: &SymbolVocabulary,
    reweight: bool,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let cfg = &model.config;
    let (side, size) = (cfg.feature_side(), cfg.image_size);
    let mut g = Graph::new(&model.store);
    let (f, f_chw) = model.encode(&mut g, image)?;
    let counted = model.count(&mut g, f);
    let counts: Vec<f64> = g.value(counted.counts).iter().map(|&v| Real::to_f64(v)).collect();
    let trace = model.decode(&mut g, f, f_chw, &counts, DecodeMode::Greedy { reweight });
    let energy: Vec<f64> = g.value(counted.energy).iter().map(|&v| Real::to_f64(v)).collect();
    let end = cfg.end_token();
    let name = |y: usize| if y == end { "<end>".to_string() } else { vocab.name(SymbolId(y as u32)).to_string() };
    let mut paths = Vec::new();
    let mut index = std::io::BufWriter::new(std::fs::File::create(dir.join("index.txt"))?);
    let mut write = |file: String, values: &[f64], label: String, paths: &mut Vec<PathBuf>| -> std::io::Result<()> {
        let img = GlyphImage { size, pixels: to_gray(&upsample(values, side, size)) };
        let path = dir.join(&file);
        img.write_pgm(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        writeln!(index, "{file}\t{label}")?;
        paths.push(path);
        Ok(())
    };
    for (t, step) in trace.steps.iter().enumerate() {
        let alpha: Vec<f64> = g.value(step.alpha).iter().map(|&v| Real::to_f64(v)).collect();
        write(format!("step_{t:02}.pgm"), &alpha, format!("decoder step {t} {}", name(step.y)), &mut paths)?;
    }
    let mut classes: Vec<usize> = trace.steps.iter().map(|s| s.y).filter(|&y| y < cfg.n_symbols).collect();
    classes.sort_unstable();
    classes.dedup();
    let n = cfg.n_symbols;
    for c in classes {
        let col: Vec<f64> = (0..side * side).map(|l| energy[l * n + c]).collect();
        write(format!("energy_{}.pgm", name(c)), &col, format!("counter energy {} count {:.3}", name(c), counts[c]), &mut paths)?;
    }
    index.flush()?;
    Ok(paths)
}

#[cfg(test)]
mod tests;
