use super::{CdfModel, ModelError};
use crate::tensor::{Conv2dSpec, Graph, PadMode, Real, Tensor, Var};

/// Offset added to remaining counts before the `tanh` re-weighting.
pub const REWEIGHT_DELTA: f64 = 0.7;

/// `p ⊙ tanh(𝓒 + δ)`; scores, not renormalized.
pub fn reweight(p: &[f64], counts: &[f64], delta: f64) -> Vec<f64> {
    p.iter().zip(counts).map(|(&pi, &ci)| pi * (ci + delta).tanh()).collect()
}

/// `𝓒_t = relu(𝓒_{t−1} − onehot(y))`, keeping the end-token entry pinned.
pub fn update_counts(counts: &mut [f64], y: usize, end: usize, end_count: f64) {
    if let Some(c) = counts.get_mut(y) {
        *c = (*c - 1.0).max(0.0);
    }
    if let Some(c) = counts.get_mut(end) {
        *c = end_count;
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Counter outputs for one image.
#[derive(Debug, Clone, Copy)]
pub struct CountOutput {
    /// `[L, N]` sigmoid energy, column `n` is `E*_n`.
    pub energy: Var,
    /// `[N]` existence probabilities (spatial maxima).
    pub existence: Var,
    /// `[N]` predicted counts.
    pub counts: Var,
}

#[derive(Debug, Clone, Copy)]
pub enum DecodeMode<'a> {
    /// Consume the given targets (symbol ids followed by the end token).
    TeacherForced(&'a [usize]),
    Greedy { reweight: bool },
}

/// One decoding step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub y: usize,
    /// `[K]` output distribution.
    pub p: Var,
    /// `[L]` attention over feature positions.
    pub alpha: Var,
    /// `[1, d_g]` radical feature.
    pub g: Var,
    /// Remaining counts after consuming `y` (length K).
    pub counts: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    /// Counting vector the decode started from (length K, end entry pinned).
    pub initial_counts: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Greedy decode stopped at `max_len` without emitting the end token.
    pub overflow: bool,
}

impl DecodeTrace {
    /// Emitted symbols without the trailing end token.
    pub fn symbols(&self, end: usize) -> Vec<usize> {
        self.steps.iter().map(|s| s.y).filter(|&y| y != end).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl<T: Real> CdfModel<T> {
    /// Feature map of an image given as row-major intensities in `[0, 1]`.
    /// Returns `F` as `[L, C]` and as `[C, H, W]`.
    pub fn encode(&self, g: &mut Graph<'_, T>, image: &[f32]) -> Result<(Var, Var), ModelError> {
        let s = self.config.image_size;
        if image.len() != s * s {
            return Err(ModelError::ImageSize { got: (image.len() as f64).sqrt() as usize, expected: s });
        }
        let x = Tensor::new(&[1, s, s], image.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        let mut h = g.input(x);
        for (b, block) in self.p.enc.iter().enumerate() {
            if b > 0 {
                h = g.max_pool2(h);
            }
            for (j, conv) in block.iter().enumerate() {
                let spec = if b == 0 && j == 0 { Conv2dSpec::same(3).with_stride(2) } else { Conv2dSpec::same(3) };
                let (w, bias) = (g.param(conv.w), g.param(conv.b));
                h = g.conv2d(h, w, Some(bias), spec);
                h = g.relu(h);
            }
        }
        let c = self.config.channels();
        let l = self.config.feature_len();
        let flat = g.reshape(h, &[c, l]);
        let f = g.transpose(flat);
        Ok((f, h))
    }

    /// Energy maps, existence probabilities and counts.
    pub fn count(&self, g: &mut Graph<'_, T>, f: Var) -> CountOutput {
        let n = self.config.n_symbols;
        let side = self.config.feature_side();
        let (w_r, proto, q) = (g.param(self.p.w_r), g.param(self.p.proto), g.param(self.p.q));
        let compat = g.matmul(w_r, proto);
        let logits = g.matmul(f, compat);
        let energy = g.sigmoid(logits);
        let per_class = g.transpose(energy);
        let maps = g.reshape(per_class, &[n, side, side]);
        let (existence, counts) = self.count_from_maps(g, maps, q);
        CountOutput { energy, existence, counts }
    }

    /// Existence maxima and grouped-convolution counts of `[N, H, W]` maps.
    pub fn count_from_maps(&self, g: &mut Graph<'_, T>, maps: Var, q: Var) -> (Var, Var) {
        let n = self.config.n_symbols;
        let existence = g.spatial_max(maps);
        let spec = Conv2dSpec::same(self.config.count_kernel).with_groups(n).with_mode(PadMode::Replicate);
        let filtered = g.conv2d(maps, q, None, spec);
        (existence, g.global_avg_pool(filtered))
    }

    /// Extends an N-entry count vector with the pinned end-token entry and
    /// clamps it at zero.
    pub fn decoder_counts(&self, counts: &[f64]) -> Vec<f64> {
        let mut c: Vec<f64> = counts.iter().map(|v| v.max(0.0)).collect();
        c.push(self.config.end_count);
        c
    }

    /// Runs the decoder from counting vector `c0` (length N).
    pub fn decode(&self, g: &mut Graph<'_, T>, f: Var, f_chw: Var, c0: &[f64], mode: DecodeMode<'_>) -> DecodeTrace {
        let cfg = &self.config;
        let k_out = cfg.n_outputs();
        let end = cfg.end_token();
        let l = cfg.feature_len();
        let side = cfg.feature_side();
        let p = &self.p;

        let gap = g.global_avg_pool(f_chw);
        let gap = g.reshape(gap, &[1, cfg.channels()]);
        let (iw, ib) = (g.param(p.init_w), g.param(p.init_b));
        let s0 = g.matmul(gap, iw);
        let s0 = g.add_row(s0, ib);
        let mut s = g.tanh(s0);

        let (att_u, att_b) = (g.param(p.att_u), g.param(p.att_b));
        let uf = g.matmul(f, att_u);
        let uf = g.add_row(uf, att_b);
        let emb = g.param(p.emb);
        let (att_w, att_wh, att_v, cov_w) = (g.param(p.att_w), g.param(p.att_wh), g.param(p.att_v), g.param(p.cov_w));
        let (wv, ws, wa, wc, wp) =
            (g.param(p.out_wv), g.param(p.out_ws), g.param(p.out_wa), g.param(p.out_wc), g.param(p.out_wp));

        let mut counts = self.decoder_counts(c0);
        let initial_counts = counts.clone();
        let mut prev = k_out; // start embedding row
        let mut coverage: Option<Var> = None;
        let mut steps = Vec::new();
        let limit = match mode {
            DecodeMode::TeacherForced(t) => t.len(),
            DecodeMode::Greedy { .. } => cfg.max_len,
        };
        let mut overflow = false;
        for t in 0..limit {
            let v = g.embedding(emb, prev);
            let s_hat = p.gru1.forward(g, v, s);

            let query = g.matmul(s_hat, att_w);
            let mut pre = uf;
            if let Some(cov) = coverage {
                let cov_map = g.reshape(cov, &[1, side, side]);
                let h = g.conv2d(cov_map, cov_w, None, Conv2dSpec::same(cfg.coverage_kernel));
                let h = g.reshape(h, &[cfg.coverage_channels, l]);
                let wh = g.matmul_t(h, att_wh, true, false);
                pre = g.add(pre, wh);
            }
            let pre = g.add_row(pre, query);
            let act = g.tanh(pre);
            let e = g.matmul(act, att_v);
            let e = g.reshape(e, &[l]);
            let alpha = g.softmax(e, T::one());
            let alpha_row = g.reshape(alpha, &[1, l]);
            let a = g.matmul(alpha_row, f);
            coverage = Some(match coverage {
                Some(c) => g.add(c, alpha),
                None => alpha,
            });

            s = p.gru2.forward(g, a, s_hat);
            let gv = g.matmul(v, wv);
            let gs = g.matmul(s, ws);
            let ga = g.matmul(a, wa);
            let glimpse = g.add_all(&[gv, gs, ga]);
            let mut pre_out = glimpse;
            if cfg.use_count_vector {
                let cvec = g.constant(&[1, k_out], counts.iter().map(|&x| T::from_f64(x)).collect());
                let wcc = g.matmul(cvec, wc);
                pre_out = g.add(pre_out, wcc);
            }
            let phi = g.maxout(pre_out);
            let logits = g.matmul(phi, wp);
            let logits = g.reshape(logits, &[k_out]);
            let probs = g.softmax(logits, T::one());

            let y = match mode {
                DecodeMode::TeacherForced(targets) => targets[t],
                DecodeMode::Greedy { reweight: rw } => {
                    let pv: Vec<f64> = g.value(probs).iter().map(|&x| Real::to_f64(x)).collect();
                    if rw {
                        argmax(&reweight(&pv, &counts, REWEIGHT_DELTA))
                    } else {
                        argmax(&pv)
                    }
                }
            };
            update_counts(&mut counts, y, end, cfg.end_count);
            steps.push(StepRecord { y, p: probs, alpha, g: glimpse, counts: counts.clone() });
            prev = y;
            if matches!(mode, DecodeMode::Greedy { .. }) && y == end {
                break;
            }
            if matches!(mode, DecodeMode::Greedy { .. }) && t + 1 == limit {
                overflow = true;
            }
        }
        DecodeTrace { initial_counts, steps, overflow }
    }

    /// Ideal-character distribution `[M]` from the (blocked) feature map and
    /// radical features. `keep` is the RandomDrop mask over steps.
    pub fn fetch(&self, g: &mut Graph<'_, T>, f_chw: Var, radical_features: &[Var], keep: Option<&[bool]>) -> Result<Var, ModelError> {
        let t_len = radical_features.len();
        if t_len == 0 {
            return Err(ModelError::InvalidTrace);
        }
        let cfg = &self.config;
        let gap = g.global_avg_pool(f_chw);
        let gap = g.stop_gradient(gap);
        let gap = g.reshape(gap, &[1, cfg.channels()]);
        let stacked = g.concat_rows(radical_features);
        let gm = g.stop_gradient(stacked);
        let (uq, uk, uv, uf) = (g.param(self.p.fet_uq), g.param(self.p.fet_uk), g.param(self.p.fet_uv), g.param(self.p.fet_uf));
        let q = g.matmul(gap, uq);
        let k = g.matmul(gm, uk);
        let b = g.matmul_t(k, q, false, true);
        let b = g.scale(b, T::from_f64(1.0 / (cfg.key_dim as f64).sqrt()));
        let b = g.reshape(b, &[t_len]);
        let mut beta = g.softmax(b, T::one());
        if let Some(mask) = keep {
            assert_eq!(mask.len(), t_len, "drop mask length");
            beta = g.mul_const(beta, mask.iter().map(|&k| if k { T::one() } else { T::zero() }).collect());
        }
        let beta = g.reshape(beta, &[1, t_len]);
        let values = g.matmul(gm, uv);
        let m = g.matmul(beta, values);
        let logits = g.matmul(m, uf);
        let logits = g.reshape(logits, &[cfg.n_classes]);
        Ok(g.softmax(logits, T::one()))
    }
}
