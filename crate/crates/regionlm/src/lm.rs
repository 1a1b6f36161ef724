//! Tiny decoder-only language backbone.
//!
//! Pre-norm causal transformer with learned absolute positions, SiLU
//! feed-forward, and a tied (by default) output head. Forward and backward
//! are hand-written over f64 so analytic gradients can be held to
//! finite-difference accuracy. Generation is greedy with ties broken toward
//! the lowest token id and stops at `<|end|>`.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seq::END_ID;
use crate::ModelError;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub lm_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub tie_head: bool,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.lm_dim == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(ModelError::Shape("lm config fields must be positive".into()));
        }
        if self.lm_dim % self.n_heads != 0 {
            return Err(ModelError::Shape(format!(
                "lm_dim {} not divisible by n_heads {}",
                self.lm_dim, self.n_heads
            )));
        }
        if self.vocab_size < crate::seq::VOCAB_SIZE {
            return Err(ModelError::Shape(format!(
                "vocab_size {} smaller than tokenizer vocabulary {}",
                self.vocab_size,
                crate::seq::VOCAB_SIZE
            )));
        }
        if self.max_seq == 0 {
            return Err(ModelError::Shape("max_seq must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm { gain: Array1::ones(dim), bias: Array1::zeros(dim) }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let (n, d) = x.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = s;
            for j in 0..d {
                xhat[(i, j)] = (row[j] - mean) * s;
            }
        }
        let out = &xhat * &self.gain + &self.bias;
        (out, LnCache { xhat, inv_std })
    }

    fn backward(
        &self,
        cache: &LnCache,
        d_out: &Array2<f64>,
        d_gain: &mut Array1<f64>,
        d_bias: &mut Array1<f64>,
    ) -> Array2<f64> {
        let (n, d) = d_out.dim();
        *d_gain += &(d_out * &cache.xhat).sum_axis(Axis(0));
        *d_bias += &d_out.sum_axis(Axis(0));
        let d_xhat = d_out * &self.gain;
        let mut d_x = Array2::zeros((n, d));
        for i in 0..n {
            let dxh = d_xhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_dxh = dxh.sum() / d as f64;
            let mean_dxh_xh = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                d_x[(i, j)] = cache.inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        d_x
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Array1<f64>,
    pub bk: Array1<f64>,
    pub bv: Array1<f64>,
    pub bo: Array1<f64>,
    pub ln2: LayerNorm,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    ln1_out: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head causal attention rows; zero above the diagonal.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    ln2_out: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Array1<f64>,
    pub bk: Array1<f64>,
    pub bv: Array1<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Decoder parameters.
#[derive(Debug, Clone)]
pub struct Lm {
    pub cfg: LmConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub lnf: LayerNorm,
    /// Untied output head `(vocab, lm_dim)`; `None` reuses `tok_emb`.
    pub head: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct LmGrads {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockGrads>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    pub head: Option<Array2<f64>>,
}

impl LmGrads {
    pub fn zeros_like(lm: &Lm) -> Self {
        let d = lm.cfg.lm_dim;
        let h = d * lm.cfg.ffn_mult;
        LmGrads {
            tok_emb: Array2::zeros(lm.tok_emb.dim()),
            pos_emb: Array2::zeros(lm.pos_emb.dim()),
            blocks: lm
                .blocks
                .iter()
                .map(|_| BlockGrads {
                    ln1_gain: Array1::zeros(d),
                    ln1_bias: Array1::zeros(d),
                    wq: Array2::zeros((d, d)),
                    wk: Array2::zeros((d, d)),
                    wv: Array2::zeros((d, d)),
                    wo: Array2::zeros((d, d)),
                    bq: Array1::zeros(d),
                    bk: Array1::zeros(d),
                    bv: Array1::zeros(d),
                    bo: Array1::zeros(d),
                    ln2_gain: Array1::zeros(d),
                    ln2_bias: Array1::zeros(d),
                    w1: Array2::zeros((d, h)),
                    b1: Array1::zeros(h),
                    w2: Array2::zeros((h, d)),
                    b2: Array1::zeros(d),
                })
                .collect(),
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            head: lm.head.as_ref().map(|h| Array2::zeros(h.dim())),
        }
    }
}

/// Forward activations for one sequence.
#[derive(Debug, Clone)]
pub struct LmCache {
    x0: Array2<f64>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    y: Array2<f64>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Lm {
    pub fn new(cfg: LmConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.lm_dim;
        let h = d * cfg.ffn_mult;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let emb_dist = Normal::new(0.0, 0.02).expect("finite std");
        let lin = |rng: &mut ChaCha20Rng, rows: usize, cols: usize| {
            let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        let tok_emb = Array2::from_shape_fn((cfg.vocab_size, d), |_| emb_dist.sample(&mut rng));
        let pos_emb = Array2::from_shape_fn((cfg.max_seq, d), |_| emb_dist.sample(&mut rng));
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: lin(&mut rng, d, d),
                wk: lin(&mut rng, d, d),
                wv: lin(&mut rng, d, d),
                wo: lin(&mut rng, d, d),
                bq: Array1::zeros(d),
                bk: Array1::zeros(d),
                bv: Array1::zeros(d),
                bo: Array1::zeros(d),
                ln2: LayerNorm::new(d),
                w1: lin(&mut rng, d, h),
                b1: Array1::zeros(h),
                w2: lin(&mut rng, h, d),
                b2: Array1::zeros(d),
            })
            .collect();
        let head = if cfg.tie_head {
            None
        } else {
            Some(Array2::from_shape_fn((cfg.vocab_size, d), |_| emb_dist.sample(&mut rng)))
        };
        Ok(Lm {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            lnf: LayerNorm::new(d),
            head,
        })
    }

    fn head_matrix(&self) -> &Array2<f64> {
        self.head.as_ref().unwrap_or(&self.tok_emb)
    }

    /// Runs the decoder over pre-position embeddings and returns logits.
    pub fn forward(&self, emb: &Array2<f64>) -> Result<(Array2<f64>, LmCache), ModelError> {
        let (len, d) = emb.dim();
        if len == 0 {
            return Err(ModelError::Shape("empty sequence".into()));
        }
        if d != self.cfg.lm_dim {
            return Err(ModelError::Shape(format!(
                "embedding width {d} does not match lm_dim {}",
                self.cfg.lm_dim
            )));
        }
        if len > self.cfg.max_seq {
            return Err(ModelError::SequenceTooLong { len, max: self.cfg.max_seq });
        }
        let n_heads = self.cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x0 = emb.clone();
        x0 += &self.pos_emb.slice(ndarray::s![..len, ..]);
        let mut x = x0.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (ln1_out, ln1) = block.ln1.forward(&x);
            let q = ln1_out.dot(&block.wq) + &block.bq;
            let k = ln1_out.dot(&block.wk) + &block.bk;
            let v = ln1_out.dot(&block.wv) + &block.bv;
            let mut ctx = Array2::zeros((len, d));
            let mut probs = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let cols = head * dh..(head + 1) * dh;
                let qh = q.slice(ndarray::s![.., cols.clone()]);
                let kh = k.slice(ndarray::s![.., cols.clone()]);
                let vh = v.slice(ndarray::s![.., cols.clone()]);
                let scores = qh.dot(&kh.t()) * scale;
                let mut p = Array2::zeros((len, len));
                for i in 0..len {
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        m = m.max(scores[(i, j)]);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (scores[(i, j)] - m).exp();
                        p[(i, j)] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        p[(i, j)] /= z;
                    }
                }
                let ctx_h = p.dot(&vh);
                ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
                probs.push(p);
            }
            let att = ctx.dot(&block.wo) + &block.bo;
            let x_mid = &x + &att;
            let (ln2_out, ln2) = block.ln2.forward(&x_mid);
            let h_pre = ln2_out.dot(&block.w1) + &block.b1;
            let h_act = h_pre.mapv(silu);
            let f = h_act.dot(&block.w2) + &block.b2;
            x = &x_mid + &f;
            caches.push(BlockCache {
                ln1,
                ln1_out,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                ln2_out,
                h_pre,
                h_act,
            });
        }
        let (y, lnf) = self.lnf.forward(&x);
        let logits = y.dot(&self.head_matrix().t());
        Ok((logits, LmCache { x0, blocks: caches, lnf, y }))
    }

    /// Backpropagates a logits gradient; returns the gradient with respect
    /// to the input embeddings (pre-position) and accumulates into `grads`.
    pub fn backward(
        &self,
        cache: &LmCache,
        d_logits: &Array2<f64>,
        grads: &mut LmGrads,
    ) -> Result<Array2<f64>, ModelError> {
        let (len, d) = cache.x0.dim();
        if d_logits.dim() != (len, self.cfg.vocab_size) {
            return Err(ModelError::Shape(format!(
                "logits gradient shape {:?} does not match ({len}, {})",
                d_logits.dim(),
                self.cfg.vocab_size
            )));
        }
        let n_heads = self.cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        // head: logits = y . H^T
        let d_head = d_logits.t().dot(&cache.y);
        let d_y = d_logits.dot(self.head_matrix());
        match (&mut grads.head, self.head.as_ref()) {
            (Some(gh), Some(_)) => *gh += &d_head,
            (None, None) => grads.tok_emb += &d_head,
            _ => return Err(ModelError::Shape("gradient/head tying mismatch".into())),
        }
        let mut d_x = self.lnf.backward(&cache.lnf, &d_y, &mut grads.lnf_gain, &mut grads.lnf_bias);
        for (idx, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[idx];
            let bg = &mut grads.blocks[idx];
            // ffn: x = x_mid + silu(ln2_out.w1 + b1).w2 + b2
            let d_f = &d_x;
            bg.w2 += &bc.h_act.t().dot(d_f);
            bg.b2 += &d_f.sum_axis(Axis(0));
            let d_h_act = d_f.dot(&block.w2.t());
            let d_h_pre = &d_h_act * &bc.h_pre.mapv(silu_grad);
            bg.w1 += &bc.ln2_out.t().dot(&d_h_pre);
            bg.b1 += &d_h_pre.sum_axis(Axis(0));
            let d_ln2_out = d_h_pre.dot(&block.w1.t());
            let mut d_x_mid =
                block.ln2.backward(&bc.ln2, &d_ln2_out, &mut bg.ln2_gain, &mut bg.ln2_bias);
            d_x_mid += &d_x; // residual
            // attention: x_mid = x_in + ctx.wo + bo
            bg.wo += &bc.ctx.t().dot(&d_x_mid);
            bg.bo += &d_x_mid.sum_axis(Axis(0));
            let d_ctx = d_x_mid.dot(&block.wo.t());
            let mut d_q = Array2::zeros((len, d));
            let mut d_k = Array2::zeros((len, d));
            let mut d_v = Array2::zeros((len, d));
            for head in 0..n_heads {
                let cols = head * dh..(head + 1) * dh;
                let p = &bc.probs[head];
                let vh = bc.v.slice(ndarray::s![.., cols.clone()]);
                let qh = bc.q.slice(ndarray::s![.., cols.clone()]);
                let kh = bc.k.slice(ndarray::s![.., cols.clone()]);
                let d_ctx_h = d_ctx.slice(ndarray::s![.., cols.clone()]);
                let d_p = d_ctx_h.dot(&vh.t());
                let d_vh = p.t().dot(&d_ctx_h);
                // softmax rows: ds = p * (dp - sum(dp * p))
                let mut d_s = Array2::zeros((len, len));
                for i in 0..len {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += d_p[(i, j)] * p[(i, j)];
                    }
                    for j in 0..=i {
                        d_s[(i, j)] = p[(i, j)] * (d_p[(i, j)] - dot);
                    }
                }
                let d_qh = d_s.dot(&kh) * scale;
                let d_kh = d_s.t().dot(&qh) * scale;
                d_q.slice_mut(ndarray::s![.., cols.clone()]).assign(&d_qh);
                d_k.slice_mut(ndarray::s![.., cols.clone()]).assign(&d_kh);
                d_v.slice_mut(ndarray::s![.., cols]).assign(&d_vh);
            }
            bg.wq += &bc.ln1_out.t().dot(&d_q);
            bg.wk += &bc.ln1_out.t().dot(&d_k);
            bg.wv += &bc.ln1_out.t().dot(&d_v);
            bg.bq += &d_q.sum_axis(Axis(0));
            bg.bk += &d_k.sum_axis(Axis(0));
            bg.bv += &d_v.sum_axis(Axis(0));
            let d_ln1_out = d_q.dot(&block.wq.t()) + d_k.dot(&block.wk.t()) + d_v.dot(&block.wv.t());
            let d_x_in_norm =
                block.ln1.backward(&bc.ln1, &d_ln1_out, &mut bg.ln1_gain, &mut bg.ln1_bias);
            d_x = d_x_in_norm + d_x_mid; // residual through attention
        }
        // x0 = emb + pos
        let mut pos_slice = grads.pos_emb.slice_mut(ndarray::s![..len, ..]);
        pos_slice += &d_x;
        Ok(d_x)
    }

    /// Greedy decoding from a prefix of pre-position embeddings.
    pub fn generate(&self, prefix: &Array2<f64>, max_new: usize) -> Result<Vec<u32>, ModelError> {
        if max_new == 0 {
            return Err(ModelError::Shape("max_new must be at least 1".into()));
        }
        let d = self.cfg.lm_dim;
        let mut rows: Vec<Array1<f64>> = prefix.rows().into_iter().map(|r| r.to_owned()).collect();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if rows.len() > self.cfg.max_seq {
                return Err(ModelError::SequenceTooLong {
                    len: rows.len(),
                    max: self.cfg.max_seq,
                });
            }
            let mut emb = Array2::zeros((rows.len(), d));
            for (i, r) in rows.iter().enumerate() {
                emb.row_mut(i).assign(r);
            }
            let (logits, _) = self.forward(&emb)?;
            let last = logits.row(logits.nrows() - 1);
            for &v in last.iter() {
                if !v.is_finite() {
                    return Err(ModelError::NonFiniteInput("logits".into()));
                }
            }
            let id = argmax_lowest(&last.to_owned());
            if id == END_ID {
                break;
            }
            out.push(id);
            rows.push(self.tok_emb.row(id as usize).to_owned());
        }
        Ok(out)
    }
}

/// Index of the maximum entry; the lowest index wins ties.
pub fn argmax_lowest(row: &Array1<f64>) -> u32 {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Summed cross-entropy over masked positions, log-sum-exp stabilized.
/// Returns the sum and the masked-position count.
pub fn cross_entropy_sum(
    logits: &Array2<f64>,
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, usize), ModelError> {
    let (len, vocab) = logits.dim();
    if targets.len() != len || loss_mask.len() != len {
        return Err(ModelError::Shape(format!(
            "targets/mask length {} / {} does not match logits rows {len}",
            targets.len(),
            loss_mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..len {
        if !loss_mask[i] {
            continue;
        }
        let t = targets[i] as usize;
        if t >= vocab {
            return Err(ModelError::Shape(format!("target {t} outside vocabulary {vocab}")));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        sum += lse - row[t];
        count += 1;
    }
    Ok((sum, count))
}

/// Mean cross-entropy over masked positions.
pub fn loss(
    logits: &Array2<f64>,
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<f64, ModelError> {
    let (sum, count) = cross_entropy_sum(logits, targets, loss_mask)?;
    if count == 0 {
        return Err(ModelError::EmptyLossMask);
    }
    Ok(sum / count as f64)
}

/// Gradient of [`cross_entropy_sum`] with respect to the logits: softmax
/// minus one-hot on masked rows, exactly zero elsewhere.
pub fn cross_entropy_backward_sum(
    logits: &Array2<f64>,
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<Array2<f64>, ModelError> {
    let (len, vocab) = logits.dim();
    if targets.len() != len || loss_mask.len() != len {
        return Err(ModelError::Shape("targets/mask length mismatch".into()));
    }
    let mut d = Array2::zeros((len, vocab));
    for i in 0..len {
        if !loss_mask[i] {
            continue;
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row.iter() {
            z += (v - m).exp();
        }
        for j in 0..vocab {
            d[(i, j)] = (row[j] - m).exp() / z;
        }
        d[(i, targets[i] as usize)] -= 1.0;
    }
    Ok(d)
}
