//! The count-decode-fetch network: convolutional encoder, radical counter,
//! coverage-attention decoder steered by a counting vector, and the fetcher.

mod forward;
pub mod losses;

pub use forward::{argmax, reweight, update_counts, CountOutput, DecodeMode, DecodeTrace, StepRecord, REWEIGHT_DELTA};
pub use losses::{attention_regularization, counter_loss, decoder_loss, fetcher_loss};

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{read_checkpoint, write_checkpoint, GruCell, ParamId, ParamStore, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error("image is {got}px, model expects {expected}px")]
    ImageSize { got: usize, expected: usize },
    #[error("fetcher needs at least one radical feature")]
    InvalidTrace,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Network dimensions and switches. `n_symbols` is the vocabulary size N;
/// the decoder's output layer has N + 1 entries, the last being the end token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_symbols: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub enc_channels: [usize; 3],
    /// Radical prototype dimension.
    pub proto_dim: usize,
    /// Side of the per-class counting filter.
    pub count_kernel: usize,
    pub emb_dim: usize,
    pub state_dim: usize,
    pub att_dim: usize,
    pub coverage_channels: usize,
    pub coverage_kernel: usize,
    /// Radical feature dimension; maxout halves it before the output layer.
    pub glimpse_dim: usize,
    pub key_dim: usize,
    pub char_dim: usize,
    pub drop_p: f64,
    /// Pinned counting-vector entry of the end token.
    pub end_count: f64,
    pub max_len: usize,
    pub use_count_vector: bool,
    /// Existence-then-count counter; `false` regresses counts directly.
    pub two_step_counter: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_symbols: 0,
            n_classes: 0,
            image_size: 64,
            enc_channels: [32, 64, 128],
            proto_dim: 256,
            count_kernel: 8,
            emb_dim: 256,
            state_dim: 256,
            att_dim: 256,
            coverage_channels: 128,
            coverage_kernel: 11,
            glimpse_dim: 256,
            key_dim: 128,
            char_dim: 256,
            drop_p: 0.3,
            end_count: 10.0,
            max_len: 64,
            use_count_vector: true,
            two_step_counter: true,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_symbols == 0 || self.n_classes == 0 {
            return bad(format!("n_symbols ({}) and n_classes ({}) must be positive", self.n_symbols, self.n_classes));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.glimpse_dim % 2 != 0 {
            return bad(format!("glimpse_dim {} must be even for maxout", self.glimpse_dim));
        }
        if !(0.0..=1.0).contains(&self.drop_p) {
            return bad(format!("drop_p {} outside [0, 1]", self.drop_p));
        }
        let dims = [
            self.proto_dim,
            self.count_kernel,
            self.emb_dim,
            self.state_dim,
            self.att_dim,
            self.coverage_channels,
            self.coverage_kernel,
            self.key_dim,
            self.char_dim,
            self.max_len,
        ];
        if dims.contains(&0) || self.enc_channels.contains(&0) {
            return bad("all dimensions must be positive".into());
        }
        Ok(())
    }

    /// Decoder output size: symbols plus the end token.
    pub fn n_outputs(&self) -> usize {
        self.n_symbols + 1
    }

    pub fn end_token(&self) -> usize {
        self.n_symbols
    }

    pub fn feature_side(&self) -> usize {
        self.image_size / 8
    }

    pub fn feature_len(&self) -> usize {
        self.feature_side() * self.feature_side()
    }

    pub fn channels(&self) -> usize {
        self.enc_channels[2]
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub enc: [[Conv; 2]; 3],
    pub w_r: ParamId,
    pub proto: ParamId,
    pub q: ParamId,
    pub emb: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub gru1: GruCell,
    pub gru2: GruCell,
    pub att_w: ParamId,
    pub att_u: ParamId,
    pub att_b: ParamId,
    pub att_wh: ParamId,
    pub att_v: ParamId,
    pub cov_w: ParamId,
    pub out_wv: ParamId,
    pub out_ws: ParamId,
    pub out_wa: ParamId,
    pub out_wc: ParamId,
    pub out_wp: ParamId,
    pub fet_uq: ParamId,
    pub fet_uk: ParamId,
    pub fet_uv: ParamId,
    pub fet_uf: ParamId,
}

/// Parameter-name prefixes of the three trainable parts.
pub const ENCODER_PREFIX: &str = "enc.";
pub const COUNTER_PREFIX: &str = "count.";
pub const DECODER_PREFIX: &str = "dec.";
pub const FETCHER_PREFIX: &str = "fet.";

fn register<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: Option<&mut ChaCha8Rng>) -> Result<Params, ModelError> {
    let mut rng = rng;
    let mut init = |shape: &[usize], fan_in: usize, fan_out: usize| -> Tensor<T> {
        let n: usize = shape.iter().product();
        match rng.as_deref_mut() {
            Some(r) => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::new(shape, (0..n).map(|_| T::from_f64(r.gen_range(-a..a))).collect()).expect("shape")
            }
            None => Tensor::zeros(shape),
        }
    };
    let add = |store: &mut ParamStore<T>, name: &str, t: Tensor<T>| store.add(name, t);
    let c = cfg.channels();
    let k_out = cfg.n_outputs();
    let mut enc = [[Conv { w: ParamId(0), b: ParamId(0) }; 2]; 3];
    let mut cin = 1;
    for (b, block) in enc.iter_mut().enumerate() {
        let cout = cfg.enc_channels[b];
        for (j, conv) in block.iter_mut().enumerate() {
            let fi = if j == 0 { cin } else { cout };
            // He-style range for relu stacks
            let w = init(&[cout, fi, 3, 3], fi * 9, fi * 3);
            conv.w = add(store, &format!("enc.b{b}.c{j}.w"), w)?;
            conv.b = add(store, &format!("enc.b{b}.c{j}.b"), Tensor::zeros(&[cout]))?;
        }
        cin = cout;
    }
    let n = cfg.n_symbols;
    let kk = cfg.count_kernel;
    let w_r = add(store, "count.w_r", init(&[c, cfg.proto_dim], c, cfg.proto_dim))?;
    let proto = add(store, "count.proto", init(&[cfg.proto_dim, n], cfg.proto_dim, n))?;
    let q = {
        let mut t = init(&[n, 1, kk, kk], kk * kk, kk * kk);
        let base = T::from_f64(1.0 / (kk * kk) as f64);
        t.data_mut().iter_mut().for_each(|v| *v = base + *v * T::from_f64(0.1));
        add(store, "count.q", t)?
    };
    let emb = add(store, "dec.emb", init(&[k_out + 1, cfg.emb_dim], 1, cfg.emb_dim))?;
    let init_w = add(store, "dec.init.w", init(&[c, cfg.state_dim], c, cfg.state_dim))?;
    let init_b = add(store, "dec.init.b", Tensor::zeros(&[cfg.state_dim]))?;
    let gru1 = GruCell::register(store, "dec.gru1", cfg.emb_dim, cfg.state_dim, &mut init)?;
    let gru2 = GruCell::register(store, "dec.gru2", c, cfg.state_dim, &mut init)?;
    let att_w = add(store, "dec.att.w", init(&[cfg.state_dim, cfg.att_dim], cfg.state_dim, cfg.att_dim))?;
    let att_u = add(store, "dec.att.u", init(&[c, cfg.att_dim], c, cfg.att_dim))?;
    let att_b = add(store, "dec.att.b", Tensor::zeros(&[cfg.att_dim]))?;
    let att_wh = add(store, "dec.att.wh", init(&[cfg.coverage_channels, cfg.att_dim], cfg.coverage_channels, cfg.att_dim))?;
    let att_v = add(store, "dec.att.v", init(&[cfg.att_dim, 1], cfg.att_dim, 1))?;
    let ck = cfg.coverage_kernel;
    let cov_w = add(store, "dec.cov.w", init(&[cfg.coverage_channels, 1, ck, ck], ck * ck, cfg.coverage_channels))?;
    let dg = cfg.glimpse_dim;
    let out_wv = add(store, "dec.out.wv", init(&[cfg.emb_dim, dg], cfg.emb_dim, dg))?;
    let out_ws = add(store, "dec.out.ws", init(&[cfg.state_dim, dg], cfg.state_dim, dg))?;
    let out_wa = add(store, "dec.out.wa", init(&[c, dg], c, dg))?;
    let out_wc = add(store, "dec.out.wc", init(&[k_out, dg], k_out, dg))?;
    let out_wp = add(store, "dec.out.wp", init(&[dg / 2, k_out], dg / 2, k_out))?;
    let fet_uq = add(store, "fet.uq", init(&[c, cfg.key_dim], c, cfg.key_dim))?;
    let fet_uk = add(store, "fet.uk", init(&[dg, cfg.key_dim], dg, cfg.key_dim))?;
    let fet_uv = add(store, "fet.uv", init(&[dg, cfg.char_dim], dg, cfg.char_dim))?;
    let fet_uf = add(store, "fet.uf", init(&[cfg.char_dim, cfg.n_classes], cfg.char_dim, cfg.n_classes))?;
    Ok(Params {
        enc,
        w_r,
        proto,
        q,
        emb,
        init_w,
        init_b,
        gru1,
        gru2,
        att_w,
        att_u,
        att_b,
        att_wh,
        att_v,
        cov_w,
        out_wv,
        out_ws,
        out_wa,
        out_wc,
        out_wp,
        fet_uq,
        fet_uk,
        fet_uv,
        fet_uf,
    })
}

/// Metadata stored alongside checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Symbol names in vocabulary order, to catch a mismatched corpus.
    pub symbols: Vec<String>,
    /// Free-form JSON echo of the run that produced the checkpoint.
    #[serde(default)]
    pub run: serde_json::Value,
}

/// Parameters plus the ids needed to address them.
#[derive(Debug, Clone)]
pub struct CdfModel<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub(crate) p: Params,
}

impl<T: Real> CdfModel<T> {
    /// Freshly initialized network (seeded by `config.init_seed`).
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let p = register(&config, &mut store, Some(&mut rng))?;
        Ok(CdfModel { config, store, p })
    }

    /// Wraps an existing store, checking every expected parameter and shape.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut template = ParamStore::<T>::new();
        let p = register(&config, &mut template, None)?;
        if template.len() != store.len() {
            return Err(ModelError::Mismatch(format!("expected {} tensors, found {}", template.len(), store.len())));
        }
        for (id, tp) in template.iter() {
            let sid = store.id(&tp.name).ok_or_else(|| ModelError::Mismatch(format!("missing tensor {}", tp.name)))?;
            if sid != id {
                return Err(ModelError::Mismatch(format!("tensor {} out of order", tp.name)));
            }
            if store.value(sid).shape() != tp.value.shape() {
                return Err(ModelError::Mismatch(format!(
                    "{} has shape {:?}, config implies {:?}",
                    tp.name,
                    store.value(sid).shape(),
                    tp.value.shape()
                )));
            }
        }
        Ok(CdfModel { config, store, p })
    }

    pub fn cast<U: Real>(&self) -> CdfModel<U> {
        CdfModel { config: self.config.clone(), store: self.store.cast(), p: self.p.clone() }
    }

    pub fn save<W: Write>(&self, w: W, symbols: &[String], run: serde_json::Value) -> Result<(), ModelError> {
        let meta = CheckpointMeta { model: self.config.clone(), symbols: symbols.to_vec(), run };
        let text = serde_json::to_string(&meta).expect("metadata serializes");
        write_checkpoint(w, &self.store, &text)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<(Self, CheckpointMeta), ModelError> {
        let (store, text) = read_checkpoint::<T, R>(r)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| ModelError::Mismatch(format!("metadata: {e}")))?;
        if meta.symbols.len() != meta.model.n_symbols {
            return Err(ModelError::Mismatch(format!(
                "{} symbol names for n_symbols = {}",
                meta.symbols.len(),
                meta.model.n_symbols
            )));
        }
        let model = Self::from_store(meta.model.clone(), store)?;
        Ok((model, meta))
    }

    /// Ids of parameters whose names start with `prefix`.
    pub fn param_ids(&self, prefix: &str) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
    }
}

#[cfg(test)]
mod tests;
