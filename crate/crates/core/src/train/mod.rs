//! Joint optimization of the counter, decoder and fetcher with attention
//! regularization, plus the epoch loop with validation-driven selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval;
use crate::ids::derive_count_vector;
use crate::model::{
    attention_regularization, counter_loss, decoder_loss, fetcher_loss, CdfModel, DecodeMode, ModelConfig, ModelError,
};
use crate::synth::{Corpus, Split};
use crate::tensor::{Adadelta, Gradients, Graph, Real, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} ({value}) in sample {sample}")]
    NonFiniteLoss { term: &'static str, value: f64, sample: usize },
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error("corpus has no {0} samples")]
    MissingSplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What the objective trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Counter, decoder and fetcher jointly.
    Full,
    /// Encoder and counter only, on the counting loss.
    CounterOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_count: f64,
    pub lambda_decode: f64,
    pub lambda_fetch: f64,
    pub lambda_reg: f64,
    /// Softmax temperature applied to energy maps in the regularizer.
    pub reg_temperature: f64,
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub validate_every: usize,
    /// Start decoding from ground-truth counts instead of the counter's.
    pub teacher_counts: bool,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_count: 1.0,
            lambda_decode: 1.0,
            lambda_fetch: 1.0,
            lambda_reg: 0.5,
            reg_temperature: 0.2,
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            validate_every: 1,
            teacher_counts: false,
            mode: TrainMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let lambdas = [self.lambda_count, self.lambda_decode, self.lambda_fetch, self.lambda_reg];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad(format!("loss weights must be finite and non-negative, got {lambdas:?}"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho {} outside (0, 1)", self.rho));
        }
        if !(self.eps > 0.0 && self.lr > 0.0 && self.reg_temperature > 0.0) {
            return bad("eps, lr and reg_temperature must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return bad("epochs, batch_size and validate_every must be positive".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adadelta {
        Adadelta { rho: self.rho, eps: self.eps, lr: self.lr }
    }
}

/// One right-character training sample.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Vec<f32>,
    /// Symbol indices followed by the end token.
    pub targets: Vec<usize>,
    /// Ground-truth counts over the N symbols.
    pub counts: Vec<f64>,
    pub ideal: usize,
}

impl Example {
    pub fn from_corpus(corpus: &Corpus, index: usize) -> Example {
        let rec = &corpus.records[index];
        let n = corpus.n_symbols();
        let mut targets: Vec<usize> = rec.ids.iter().map(|s| s.index()).collect();
        targets.push(n);
        Example {
            image: corpus.images[index].intensities(),
            targets,
            counts: derive_count_vector(&rec.ids, n).as_slice().to_vec(),
            ideal: rec.ideal.index(),
        }
    }
}

/// Loss components of one sample or the mean over a batch. Skipped terms
/// are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Losses {
    pub count: f64,
    pub decode: f64,
    pub fetch: f64,
    pub reg: f64,
    pub total: f64,
}

impl Losses {
    fn add(&mut self, o: &Losses) {
        self.count += o.count;
        self.decode += o.decode;
        self.fetch += o.fetch;
        self.reg += o.reg;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Losses {
        self.count *= s;
        self.decode *= s;
        self.fetch *= s;
        self.reg *= s;
        self.total *= s;
        self
    }
}

/// Bernoulli keep mask for the fetcher's radical attention.
pub fn drop_mask(rng: &mut impl Rng, len: usize, p: f64) -> Vec<bool> {
    (0..len).map(|_| !rng.gen_bool(p)).collect()
}

/// Builds the training objective of one sample in `g`. Terms with a zero
/// weight are not built, so their parameters receive no gradient. `keep`
/// is the fetcher's drop mask (`None` keeps every step).
pub fn objective<T: Real>(
    model: &CdfModel<T>,
    g: &mut Graph<'_, T>,
    ex: &Example,
    cfg: &TrainConfig,
    keep: Option<&[bool]>,
) -> Result<(Var, Losses), TrainError> {
    objective_with(model, g, ex, cfg, keep, None)
}

/// Values of the fetcher's inputs (feature map and radical features),
/// which the fetcher sees through a stop-gradient.
#[derive(Debug, Clone)]
pub struct FetchInputs<T> {
    pub f_chw: (Vec<usize>, Vec<T>),
    pub features: Vec<(Vec<usize>, Vec<T>)>,
}

impl<T: Real> FetchInputs<T> {
    /// Captures the fetcher inputs of `ex` under the current parameters.
    pub fn capture(model: &CdfModel<T>, ex: &Example, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let mut g = Graph::new(&model.store);
        let (f, f_chw) = model.encode(&mut g, &ex.image)?;
        let counted = model.count(&mut g, f);
        let c0 = initial_counts(&g, &counted, ex, cfg);
        let trace = model.decode(&mut g, f, f_chw, &c0, DecodeMode::TeacherForced(&ex.targets));
        let snap = |v: Var| (g.shape(v).to_vec(), g.value(v).to_vec());
        Ok(FetchInputs { f_chw: snap(f_chw), features: trace.steps.iter().map(|s| snap(s.g)).collect() })
    }
}

fn initial_counts<T: Real>(g: &Graph<'_, T>, counted: &crate::model::CountOutput, ex: &Example, cfg: &TrainConfig) -> Vec<f64> {
    if cfg.teacher_counts {
        ex.counts.clone()
    } else {
        g.value(counted.counts).iter().map(|&v| Real::to_f64(v)).collect()
    }
}

/// [`objective`] with the fetcher fed from `frozen` instead of the live
/// graph. Perturbing parameters then leaves the fetcher inputs fixed, which
/// is what the stop-gradient means; finite differences of this function
/// are the reference for the analytic gradient.
pub fn objective_with<T: Real>(
    model: &CdfModel<T>,
    g: &mut Graph<'_, T>,
    ex: &Example,
    cfg: &TrainConfig,
    keep: Option<&[bool]>,
    frozen: Option<&FetchInputs<T>>,
) -> Result<(Var, Losses), TrainError> {
    let mc = &model.config;
    let (f, f_chw) = model.encode(g, &ex.image)?;
    let counted = model.count(g, f);
    let mut terms: Vec<(Var, f64, &'static str)> = Vec::new();
    let mut losses = Losses::default();
    if cfg.lambda_count > 0.0 {
        let l = counter_loss(g, &counted, &ex.counts, mc.two_step_counter);
        terms.push((l, cfg.lambda_count, "L_c"));
    }
    if cfg.mode == TrainMode::Full {
        let c0 = initial_counts(g, &counted, ex, cfg);
        let trace = model.decode(g, f, f_chw, &c0, DecodeMode::TeacherForced(&ex.targets));
        if cfg.lambda_decode > 0.0 {
            let l = decoder_loss(g, &trace, &ex.targets).map_err(TrainError::Config)?;
            terms.push((l, cfg.lambda_decode, "L_d"));
        }
        if cfg.lambda_fetch > 0.0 {
            let (chw, feats) = match frozen {
                Some(fr) => (
                    g.constant(&fr.f_chw.0, fr.f_chw.1.clone()),
                    fr.features.iter().map(|(sh, v)| g.constant(sh, v.clone())).collect(),
                ),
                None => (f_chw, trace.steps.iter().map(|s| s.g).collect::<Vec<Var>>()),
            };
            let p = model.fetch(g, chw, &feats, keep)?;
            let l = fetcher_loss(g, p, ex.ideal);
            terms.push((l, cfg.lambda_fetch, "L_f"));
        }
        if cfg.lambda_reg > 0.0 {
            if let Some(l) = attention_regularization(g, &trace, counted.energy, &ex.targets, mc.n_symbols, cfg.reg_temperature) {
                terms.push((l, cfg.lambda_reg, "L_r"));
            }
        }
    }
    let mut weighted = Vec::with_capacity(terms.len());
    for &(v, w, name) in &terms {
        let value = Real::to_f64(g.scalar(v));
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { term: name, value, sample: 0 });
        }
        match name {
            "L_c" => losses.count = value,
            "L_d" => losses.decode = value,
            "L_f" => losses.fetch = value,
            _ => losses.reg = value,
        }
        losses.total += w * value;
        weighted.push(g.scale(v, T::from_f64(w)));
    }
    let total = if weighted.is_empty() { g.constant(&[1], vec![T::zero()]) } else { g.add_all(&weighted) };
    Ok((total, losses))
}

/// Seed of the drop mask for one sample, independent of thread scheduling.
fn sample_rng(seed: u64, step: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d409);
    rng.set_stream(((step as u64) << 20) | position as u64);
    rng
}

/// Mean objective and gradients of a batch, computed in parallel.
pub fn batch_gradients<T: Real>(
    model: &CdfModel<T>,
    batch: &[&Example],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Losses, Gradients<T>), TrainError> {
    let per: Vec<Result<(Losses, Gradients<T>), TrainError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut g = Graph::new(&model.store);
            let keep = drop_mask(&mut sample_rng(cfg.seed, step, i), ex.targets.len(), model.config.drop_p);
            let (o, losses) = objective(model, &mut g, ex, cfg, Some(&keep)).map_err(|e| match e {
                TrainError::NonFiniteLoss { term, value, .. } => TrainError::NonFiniteLoss { term, value, sample: i },
                e => e,
            })?;
            Ok((losses, g.backward(o)))
        })
        .collect();
    let mut sum = Losses::default();
    let mut grads = Gradients::zeros_like(&model.store);
    for r in per {
        let (l, gr) = r?;
        sum.add(&l);
        grads.merge(&gr);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(T::from_f64(inv));
    Ok((sum.scaled(inv), grads))
}

/// Adadelta training state.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub model: CdfModel<T>,
    pub config: TrainConfig,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: CdfModel<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Trainer { model, config, step: 0 })
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<Losses, TrainError> {
        let (losses, grads) = batch_gradients(&self.model, batch, &self.config, self.step)?;
        if !grads.all_finite() {
            return Err(TrainError::NonFiniteGradient(self.step));
        }
        self.config.optimizer().step(&mut self.model.store, &grads);
        self.step += 1;
        Ok(losses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: Losses,
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitReport {
    /// The selected model (best validation DACC; ties go to the later epoch).
    pub model: CdfModel<f32>,
    pub best_epoch: usize,
    pub best_val_dacc: f64,
    pub history: Vec<HistoryRow>,
    /// Mean objective per epoch.
    pub epoch_loss: Vec<f64>,
    /// `(epoch, validation DACC)` pairs.
    pub validation: Vec<(usize, f64)>,
}

/// Writes the per-step history CSV.
pub fn write_history<W: Write>(mut w: W, rows: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(w, "epoch,step,L_c,L_d,L_f,L_r,O")?;
    for r in rows {
        let l = &r.losses;
        writeln!(w, "{},{},{},{},{},{},{}", r.epoch, r.step, l.count, l.decode, l.fetch, l.reg, l.total)?;
    }
    Ok(())
}

/// Model config matching a corpus (vocabulary size and class count).
pub fn model_config_for(corpus: &Corpus, mut base: ModelConfig) -> ModelConfig {
    base.n_symbols = corpus.n_symbols();
    base.n_classes = corpus.n_classes();
    base.image_size = corpus.config.image_size;
    base
}

/// Per-epoch progress passed to the [`fit`] callback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_dacc: Option<f64>,
    pub seconds: f64,
}

/// Trains on the corpus train split and keeps the checkpoint with the best
/// decomposition accuracy on the unseen-right validation split. When
/// `out_dir` is given, writes `history.csv`, `validation.csv` and
/// `best.ckpt` there.
pub fn fit(
    corpus: &Corpus,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<FitReport, TrainError> {
    cfg.validate()?;
    let train_idx = corpus.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::MissingSplit("train"));
    }
    let val_idx = corpus.indices(Split::Val);
    let val_right: Vec<usize> = val_idx.into_iter().filter(|&i| !corpus.records[i].is_misspelled()).collect();
    if val_right.is_empty() && cfg.mode == TrainMode::Full {
        return Err(TrainError::MissingSplit("validation"));
    }
    let examples: Vec<Example> = train_idx.iter().map(|&i| Example::from_corpus(corpus, i)).collect();
    let model = CdfModel::<f32>::new(model_config_for(corpus, model_cfg))?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FitReport {
        model: trainer.model.clone(),
        best_epoch: 0,
        best_val_dacc: f64::NEG_INFINITY,
        history: Vec::new(),
        epoch_loss: Vec::new(),
        validation: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let losses = trainer.train_step(&batch)?;
            total += losses.total;
            batches += 1;
            report.history.push(HistoryRow { epoch, step: trainer.step, losses });
        }
        let mean_loss = total / batches as f64;
        report.epoch_loss.push(mean_loss);
        let mut val_dacc = None;
        if cfg.mode == TrainMode::Full && (epoch % cfg.validate_every == 0 || epoch == cfg.epochs) {
            let dacc = eval::decomposition_accuracy(&trainer.model, corpus, &val_right, true);
            report.validation.push((epoch, dacc));
            val_dacc = Some(dacc);
            if dacc >= report.best_val_dacc {
                report.best_val_dacc = dacc;
                report.best_epoch = epoch;
                report.model = trainer.model.clone();
            }
        }
        progress(&EpochSummary { epoch, mean_loss, val_dacc, seconds: started.elapsed().as_secs_f64() });
    }
    if cfg.mode == TrainMode::CounterOnly || report.best_epoch == 0 {
        report.model = trainer.model.clone();
        report.best_epoch = cfg.epochs;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_history(std::io::BufWriter::new(std::fs::File::create(dir.join("history.csv"))?), &report.history)?;
        let mut v = std::io::BufWriter::new(std::fs::File::create(dir.join("validation.csv"))?);
        writeln!(v, "epoch,val_dacc")?;
        for (e, d) in &report.validation {
            writeln!(v, "{e},{d}")?;
        }
        let symbols: Vec<String> = corpus.vocab.ids().map(|id| corpus.vocab.name(id).to_string()).collect();
        let run = serde_json::json!({
            "train": cfg,
            "best_epoch": report.best_epoch,
            "best_val_dacc": report.best_val_dacc,
            "corpus_seed": corpus.config.seed,
        });
        report.model.save(std::io::BufWriter::new(std::fs::File::create(dir.join("best.ckpt"))?), &symbols, run)?;
    }
    Ok(report)
}
