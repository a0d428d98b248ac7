//! Decoder-only transformer over the unified vocabulary.
//!
//! Pre-LayerNorm blocks with causal multi-head attention and a GELU MLP,
//! learned absolute position embeddings (optionally plus a learned embedding
//! of the offset inside the current image block), a final LayerNorm whose output is the
//! hidden state `h`, a linear LM head producing logits, and a linear
//! projection head mapping image-span hidden rows into codebook space.
//!
//! Everything runs in f64 on one thread; backward passes are hand-written and
//! checked against finite differences in the test suite.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sequence::{Span, SpanKind, PAD};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MMCKPT1";
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds context length {max}")]
    Overlength { len: usize, max: usize },
    #[error("token id {id} >= vocab size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("image span of length {got}, expected {expected}")]
    SpanLength { got: usize, expected: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which hidden rows stand for an image in the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenAlignment {
    /// Rows whose next-token target is each visual token (BOI .. second-to-last visual).
    #[default]
    Predicting,
    /// Rows at the visual tokens themselves.
    AtToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub proj_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub hidden_alignment: HiddenAlignment,
    /// When set, positions inside an image block also receive a learned
    /// embedding of their offset from BOI.
    #[serde(default)]
    pub image_layout: Option<ImageLayout>,
}

/// Where image blocks sit in the vocabulary, for the in-image offset embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLayout {
    pub boi: u32,
    pub vis_lo: u32,
    pub vis_hi: u32,
    pub block_len: usize,
}

impl ImageLayout {
    pub fn from_vocab(v: &crate::sequence::UnifiedVocab) -> Self {
        Self {
            boi: v.boi(),
            vis_lo: v.vis_lo(),
            vis_hi: v.vis_hi(),
            block_len: v.block_len,
        }
    }

    /// Offset of the last position of `ids` from the BOI of the image block it
    /// lies in (0 at BOI, `block_len` at the last visual token), if any.
    pub fn offset_of_last(&self, ids: &[u32]) -> Option<usize> {
        for (k, &id) in ids.iter().rev().take(self.block_len + 1).enumerate() {
            if id == self.boi {
                return Some(k);
            }
            if !(self.vis_lo..self.vis_hi).contains(&id) {
                return None;
            }
        }
        None
    }

    pub fn offsets(&self, ids: &[u32]) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(ids.len());
        let mut open: Option<usize> = None;
        for (i, &id) in ids.iter().enumerate() {
            if id == self.boi {
                open = Some(i);
            } else if !(self.vis_lo..self.vis_hi).contains(&id) {
                open = None;
            }
            let k = open.map(|b| i - b).filter(|&k| k <= self.block_len);
            if k.is_none() {
                open = None;
            }
            out.push(k);
        }
        out
    }
}

impl ModelConfig {
    pub fn new(vocab_size: usize, proj_dim: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            hidden_dim: 128,
            ff_dim: 512,
            context_length: 512,
            vocab_size,
            proj_dim,
            seed: 0,
            hidden_alignment: HiddenAlignment::Predicting,
            image_layout: None,
        }
    }

    fn image_offsets(&self) -> usize {
        self.image_layout.map_or(0, |l| l.block_len + 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.hidden_dim == 0 || self.ff_dim == 0 {
            return bad("layers, heads, hidden_dim and ff_dim must be positive");
        }
        if self.hidden_dim % self.heads != 0 {
            return bad("hidden_dim must be divisible by heads");
        }
        if self.vocab_size == 0 || self.context_length == 0 || self.proj_dim == 0 {
            return bad("vocab_size, context_length and proj_dim must be positive");
        }
        if let Some(l) = self.image_layout {
            let v = self.vocab_size as u32;
            if l.block_len == 0 || l.vis_lo >= l.vis_hi || l.vis_hi > v || l.boi >= v || (l.vis_lo..l.vis_hi).contains(&l.boi) {
                return bad("inconsistent image layout");
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.hidden_dim, self.ff_dim, self.vocab_size);
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        v * d + self.context_length * d + self.layers * per_layer + 2 * d + (d * v + v)
            + (d * self.proj_dim + self.proj_dim)
            + self.image_offsets() * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_fc1: Array2<f64>,
    pub b_fc1: Array1<f64>,
    pub w_fc2: Array2<f64>,
    pub b_fc2: Array1<f64>,
}

/// All trainable tensors. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_head: Array2<f64>,
    pub b_head: Array1<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
    /// In-image offset embeddings; zero rows when the config has no layout.
    pub img_pos_emb: Array2<f64>,
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.hidden_dim, cfg.ff_dim, cfg.vocab_size);
        let layer = LayerWeights {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_fc1: Array2::zeros((d, f)),
            b_fc1: Array1::zeros(f),
            w_fc2: Array2::zeros((f, d)),
            b_fc2: Array1::zeros(d),
        };
        Self {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((cfg.context_length, d)),
            layers: vec![layer; cfg.layers],
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            w_head: Array2::zeros((d, v)),
            b_head: Array1::zeros(v),
            w_proj: Array2::zeros((d, cfg.proj_dim)),
            b_proj: Array1::zeros(cfg.proj_dim),
            img_pos_emb: Array2::zeros((cfg.image_offsets(), d)),
        }
    }

    /// N(0, 0.02) matrices and embeddings, unit LayerNorm gains, zero biases.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut w = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (name, mut t) in w.named_mut() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            if leaf.ends_with("_g") {
                t.fill(1.0);
            } else if !leaf.starts_with("b_") && !leaf.ends_with("_b") {
                t.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
        w
    }

    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("ln1_g"), l.ln1_g.view().into_dyn()),
                (p("ln1_b"), l.ln1_b.view().into_dyn()),
                (p("w_qkv"), l.w_qkv.view().into_dyn()),
                (p("b_qkv"), l.b_qkv.view().into_dyn()),
                (p("w_o"), l.w_o.view().into_dyn()),
                (p("b_o"), l.b_o.view().into_dyn()),
                (p("ln2_g"), l.ln2_g.view().into_dyn()),
                (p("ln2_b"), l.ln2_b.view().into_dyn()),
                (p("w_fc1"), l.w_fc1.view().into_dyn()),
                (p("b_fc1"), l.b_fc1.view().into_dyn()),
                (p("w_fc2"), l.w_fc2.view().into_dyn()),
                (p("b_fc2"), l.b_fc2.view().into_dyn()),
            ]);
        }
        out.extend([
            ("lnf_g".to_string(), self.lnf_g.view().into_dyn()),
            ("lnf_b".to_string(), self.lnf_b.view().into_dyn()),
            ("w_head".to_string(), self.w_head.view().into_dyn()),
            ("b_head".to_string(), self.b_head.view().into_dyn()),
            ("w_proj".to_string(), self.w_proj.view().into_dyn()),
            ("b_proj".to_string(), self.b_proj.view().into_dyn()),
            ("img_pos_emb".to_string(), self.img_pos_emb.view().into_dyn()),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("ln1_g"), l.ln1_g.view_mut().into_dyn()),
                (p("ln1_b"), l.ln1_b.view_mut().into_dyn()),
                (p("w_qkv"), l.w_qkv.view_mut().into_dyn()),
                (p("b_qkv"), l.b_qkv.view_mut().into_dyn()),
                (p("w_o"), l.w_o.view_mut().into_dyn()),
                (p("b_o"), l.b_o.view_mut().into_dyn()),
                (p("ln2_g"), l.ln2_g.view_mut().into_dyn()),
                (p("ln2_b"), l.ln2_b.view_mut().into_dyn()),
                (p("w_fc1"), l.w_fc1.view_mut().into_dyn()),
                (p("b_fc1"), l.b_fc1.view_mut().into_dyn()),
                (p("w_fc2"), l.w_fc2.view_mut().into_dyn()),
                (p("b_fc2"), l.b_fc2.view_mut().into_dyn()),
            ]);
        }
        out.extend([
            ("lnf_g".to_string(), self.lnf_g.view_mut().into_dyn()),
            ("lnf_b".to_string(), self.lnf_b.view_mut().into_dyn()),
            ("w_head".to_string(), self.w_head.view_mut().into_dyn()),
            ("b_head".to_string(), self.b_head.view_mut().into_dyn()),
            ("w_proj".to_string(), self.w_proj.view_mut().into_dyn()),
            ("b_proj".to_string(), self.b_proj.view_mut().into_dyn()),
            ("img_pos_emb".to_string(), self.img_pos_emb.view_mut().into_dyn()),
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.named()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn scale(&mut self, k: f64) {
        for (_, mut t) in self.named_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a += &b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over the raw f64 bits, in tensor order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named() {
            for v in t.iter() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| (v - mean) * rs);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let rs = cache.rstd[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = rs * (dh[j] - mean_dh - xh[j] * mean_dhx);
        }
    }
    dx
}

fn layer_norm_vec(x: ArrayView1<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    x.mapv(|v| (v - mean) * rs) * g + b
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a_in: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    m_in: Array2<f64>,
    f_pre: Array2<f64>,
    f_act: Array2<f64>,
}

/// Activations of one sequence, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SeqCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    pub hidden: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Batched forward result: `hidden` is B×L×D, `logits` is B×L×V.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Array3<f64>,
    pub logits: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self { config, weights })
    }

    pub fn with_weights(config: ModelConfig, weights: Weights) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = Weights::zeros(&config);
        for ((name, a), (_, b)) in weights.named().iter().zip(expected.named()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {:?} != {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self { config, weights })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.len() > self.config.context_length {
            return Err(ModelError::Overlength {
                len: ids.len(),
                max: self.config.context_length,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::IdOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Full causal forward over one sequence, caching activations.
    pub fn forward_seq(&self, ids: &[u32]) -> Result<SeqCache, ModelError> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let w = &self.weights;
        let (l, d, dh) = (ids.len(), cfg.hidden_dim, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = Array2::zeros((l, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&w.tok_emb.row(id as usize));
            row += &w.pos_emb.row(i);
        }
        if let Some(layout) = cfg.image_layout {
            for (i, k) in layout.offsets(ids).into_iter().enumerate() {
                if let Some(k) = k {
                    let mut row = x.row_mut(i);
                    row += &w.img_pos_emb.row(k);
                }
            }
        }
        let mut caches = Vec::with_capacity(cfg.layers);
        for lw in &w.layers {
            let (a_in, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
            let qkv = a_in.dot(&lw.w_qkv) + &lw.b_qkv;
            let mut attn = Array2::zeros((l, d));
            let mut probs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let row = row.as_slice_mut().expect("contiguous");
                    for val in row[..=i].iter_mut() {
                        *val *= scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(0.0);
                }
                attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
                probs.push(p);
            }
            x += &(attn.dot(&lw.w_o) + &lw.b_o);
            let (m_in, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
            let f_pre = m_in.dot(&lw.w_fc1) + &lw.b_fc1;
            let f_act = f_pre.mapv(gelu);
            x += &(f_act.dot(&lw.w_fc2) + &lw.b_fc2);
            caches.push(LayerCache {
                ln1,
                a_in,
                qkv,
                probs,
                attn,
                ln2,
                m_in,
                f_pre,
                f_act,
            });
        }
        let (hidden, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
        let logits = hidden.dot(&w.w_head) + &w.b_head;
        Ok(SeqCache {
            ids: ids.to_vec(),
            layers: caches,
            lnf,
            hidden,
            logits,
        })
    }

    /// Accumulates parameter gradients for one sequence given upstream
    /// gradients on the logits (L×V) and, optionally, directly on the hidden
    /// states (L×D).
    pub fn backward_seq(
        &self,
        cache: &SeqCache,
        dlogits: &Array2<f64>,
        dhidden_extra: Option<&Array2<f64>>,
        grads: &mut Weights,
    ) {
        let cfg = &self.config;
        let w = &self.weights;
        let (d, dh) = (cfg.hidden_dim, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        grads.w_head += &cache.hidden.t().dot(dlogits);
        grads.b_head += &dlogits.sum_axis(Axis(0));
        let mut dhidden = dlogits.dot(&w.w_head.t());
        if let Some(extra) = dhidden_extra {
            dhidden += extra;
        }
        let mut dx = layer_norm_backward(
            &dhidden,
            &cache.lnf,
            &w.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );

        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let lw = &w.layers[li];
            let lg = &mut grads.layers[li];
            // MLP branch
            lg.w_fc2 += &lc.f_act.t().dot(&dx);
            lg.b_fc2 += &dx.sum_axis(Axis(0));
            let mut df = dx.dot(&lw.w_fc2.t());
            df.zip_mut_with(&lc.f_pre, |g, &pre| *g *= gelu_grad(pre));
            lg.w_fc1 += &lc.m_in.t().dot(&df);
            lg.b_fc1 += &df.sum_axis(Axis(0));
            let dm_in = df.dot(&lw.w_fc1.t());
            dx += &layer_norm_backward(&dm_in, &lc.ln2, &lw.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);

            // attention branch
            lg.w_o += &lc.attn.t().dot(&dx);
            lg.b_o += &dx.sum_axis(Axis(0));
            let dattn = dx.dot(&lw.w_o.t());
            let mut dqkv = Array2::zeros(lc.qkv.raw_dim());
            for h in 0..cfg.heads {
                let cols = h * dh..(h + 1) * dh;
                let q = lc.qkv.slice(s![.., cols.clone()]);
                let k = lc.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = lc.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let p = &lc.probs[h];
                let dout = dattn.slice(s![.., cols.clone()]);
                let dp = dout.dot(&v.t());
                let dv = p.t().dot(&dout);
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                    drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - dot) * scale);
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![.., cols]).assign(&dq);
                dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
                dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
            }
            lg.w_qkv += &lc.a_in.t().dot(&dqkv);
            lg.b_qkv += &dqkv.sum_axis(Axis(0));
            let da_in = dqkv.dot(&lw.w_qkv.t());
            dx += &layer_norm_backward(&da_in, &lc.ln1, &lw.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        }

        for (i, &id) in cache.ids.iter().enumerate() {
            let g = dx.row(i);
            let mut te = grads.tok_emb.row_mut(id as usize);
            te += &g;
            let mut pe = grads.pos_emb.row_mut(i);
            pe += &g;
        }
        if let Some(layout) = cfg.image_layout {
            for (i, k) in layout.offsets(&cache.ids).into_iter().enumerate() {
                if let Some(k) = k {
                    let mut ie = grads.img_pos_emb.row_mut(k);
                    ie += &dx.row(i);
                }
            }
        }
    }

    /// Batched forward; rows are right-padded with PAD to the longest row.
    pub fn forward(&self, batch: &[Vec<u32>]) -> Result<ForwardOutput, ModelError> {
        let l = batch.iter().map(Vec::len).max().unwrap_or(0);
        let (d, v) = (self.config.hidden_dim, self.config.vocab_size);
        let mut hidden = Array3::zeros((batch.len(), l, d));
        let mut logits = Array3::zeros((batch.len(), l, v));
        for (b, row) in batch.iter().enumerate() {
            let mut ids = row.clone();
            ids.resize(l, PAD);
            let c = self.forward_seq(&ids)?;
            hidden.slice_mut(s![b, .., ..]).assign(&c.hidden);
            logits.slice_mut(s![b, .., ..]).assign(&c.logits);
        }
        Ok(ForwardOutput { hidden, logits })
    }

    /// Hidden-row positions that represent the visual tokens of `span`.
    pub fn image_rows(&self, span: &Span, block_len: usize) -> Result<std::ops::Range<usize>, ModelError> {
        if span.kind != SpanKind::Image || span.len() != block_len + 2 {
            return Err(ModelError::SpanLength {
                got: span.len().saturating_sub(2),
                expected: block_len,
            });
        }
        let r = span.visual_range();
        Ok(match self.config.hidden_alignment {
            HiddenAlignment::Predicting => r.start - 1..r.end - 1,
            HiddenAlignment::AtToken => r,
        })
    }

    /// Applies the projection head to rows of a hidden matrix (n×D → n×D′).
    pub fn project_rows(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        rows.dot(&self.weights.w_proj) + &self.weights.b_proj
    }

    /// Accumulates projection-head gradients and returns d(rows).
    pub fn project_rows_backward(
        &self,
        rows: ArrayView2<f64>,
        dproj: &Array2<f64>,
        grads: &mut Weights,
    ) -> Array2<f64> {
        grads.w_proj += &rows.t().dot(dproj);
        grads.b_proj += &dproj.sum_axis(Axis(0));
        dproj.dot(&self.weights.w_proj.t())
    }

    /// Projects each image span of each batch row into codebook space.
    /// `spans[b]` lists the spans of batch row `b`; text spans are skipped.
    pub fn project_visual(
        &self,
        hidden: &Array3<f64>,
        spans: &[Vec<Span>],
        block_len: usize,
    ) -> Result<Vec<Array2<f64>>, ModelError> {
        let mut out = Vec::new();
        for (b, row_spans) in spans.iter().enumerate() {
            for span in row_spans.iter().filter(|s| s.kind == SpanKind::Image) {
                let rows = self.image_rows(span, block_len)?;
                out.push(self.project_rows(hidden.slice(s![b, rows, ..])));
            }
        }
        Ok(out)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache {
            tokens: Vec::new(),
            keys: vec![Vec::new(); self.config.layers],
            values: vec![Vec::new(); self.config.layers],
            last_logits: None,
        }
    }

    /// Feeds one token at the next position and returns its logits.
    fn step_token(&self, cache: &mut KvCache, id: u32) -> Array1<f64> {
        let cfg = &self.config;
        let w = &self.weights;
        let (d, dh) = (cfg.hidden_dim, cfg.head_dim());
        let pos = cache.tokens.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = &w.tok_emb.row(id as usize) + &w.pos_emb.row(pos);
        cache.tokens.push(id);
        if let Some(k) = cfg.image_layout.and_then(|l| l.offset_of_last(&cache.tokens)) {
            x += &w.img_pos_emb.row(k);
        }
        cache.tokens.pop();
        for (li, lw) in w.layers.iter().enumerate() {
            let a = layer_norm_vec(x.view(), &lw.ln1_g, &lw.ln1_b);
            let qkv = a.dot(&lw.w_qkv) + &lw.b_qkv;
            cache.keys[li].extend(qkv.slice(s![d..2 * d]).iter());
            cache.values[li].extend(qkv.slice(s![2 * d..]).iter());
            let n = pos + 1;
            let keys = ArrayView2::from_shape((n, d), &cache.keys[li]).expect("cache layout");
            let vals = ArrayView2::from_shape((n, d), &cache.values[li]).expect("cache layout");
            let mut attn = Array1::zeros(d);
            for h in 0..cfg.heads {
                let cols = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![cols.clone()]);
                let mut sc = keys.slice(s![.., cols.clone()]).dot(&q);
                sc.mapv_inplace(|v| v * scale);
                softmax_in_place(sc.as_slice_mut().expect("contiguous"));
                attn.slice_mut(s![cols.clone()])
                    .assign(&vals.slice(s![.., cols]).t().dot(&sc));
            }
            x += &(attn.dot(&lw.w_o) + &lw.b_o);
            let m = layer_norm_vec(x.view(), &lw.ln2_g, &lw.ln2_b);
            let f = (m.dot(&lw.w_fc1) + &lw.b_fc1).mapv(gelu);
            x += &(f.dot(&lw.w_fc2) + &lw.b_fc2);
        }
        let h = layer_norm_vec(x.view(), &w.lnf_g, &w.lnf_b);
        cache.tokens.push(id);
        h.dot(&w.w_head) + &w.b_head
    }

    /// Brings the cache to exactly `context`, reusing the longest shared
    /// prefix, and returns the logits at its last position.
    pub fn logits_for(&self, cache: &mut KvCache, context: &[u32]) -> Result<Array1<f64>, ModelError> {
        self.check_ids(context)?;
        if context.is_empty() {
            return Err(ModelError::Config("empty decoding context".into()));
        }
        let shared = cache
            .tokens
            .iter()
            .zip(context)
            .take_while(|(a, b)| a == b)
            .count();
        if shared == context.len() && cache.tokens.len() == shared {
            if let Some(l) = &cache.last_logits {
                return Ok(l.clone());
            }
        }
        let keep = shared.min(context.len() - 1);
        cache.truncate(keep, self.config.hidden_dim);
        let mut last = None;
        for &id in &context[keep..] {
            last = Some(self.step_token(cache, id));
        }
        let logits = last.expect("at least one token fed");
        cache.last_logits = Some(logits.clone());
        Ok(logits)
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step,
            meta: serde_json::Value::Null,
            tensors: self
                .weights
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.to_owned()))
                .collect(),
        }
    }

    /// Rebuilds a model from the `model.*`-free tensor names of a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.config.validate()?;
        let mut weights = Weights::zeros(&ck.config);
        for (name, mut t) in weights.named_mut() {
            let src = ck
                .tensor(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {:?} incompatible with config {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.assign(src);
        }
        Ok(Self {
            config: ck.config.clone(),
            weights,
        })
    }
}

/// Per-layer key/value rows for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache {
    tokens: Vec<u32>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    last_logits: Option<Array1<f64>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    fn truncate(&mut self, n: usize, d: usize) {
        if n < self.tokens.len() {
            self.tokens.truncate(n);
            for k in &mut self.keys {
                k.truncate(n * d);
            }
            for v in &mut self.values {
                v.truncate(n * d);
            }
            self.last_logits = None;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Versioned container: magic, u32 header length, JSON header, then every
/// tensor as little-endian f64 in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            version: 1,
            config: self.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if header.version != 1 {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut word = [0u8; 8];
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut word)?;
                data.push(f64::from_le_bytes(word));
            }
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden_dim: 16,
            ff_dim: 32,
            context_length: 40,
            vocab_size: vocab,
            proj_dim: 4,
            seed: 3,
            hidden_alignment: HiddenAlignment::Predicting,
            image_layout: None,
        }
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [tiny(30), ModelConfig::new(80, 16)] {
            let m = Model::new(cfg.clone()).unwrap();
            assert_eq!(m.weights.num_params(), cfg.param_count());
        }
    }

    #[test]
    fn config_rejects_bad_heads() {
        let mut cfg = tiny(30);
        cfg.heads = 3;
        assert!(Model::new(cfg).is_err());
    }

    #[test]
    fn causality_bit_exact() {
        let m = Model::new(tiny(30)).unwrap();
        let a: Vec<u32> = (0..20).map(|i| (i * 7 % 30) as u32).collect();
        let mut b = a.clone();
        for t in b[12..].iter_mut() {
            *t = (*t + 5) % 30;
        }
        let out = m.forward(&[a, b]).unwrap();
        for i in 0..12 {
            for v in 0..30 {
                assert_eq!(
                    out.logits[[0, i, v]].to_bits(),
                    out.logits[[1, i, v]].to_bits(),
                    "position {i}"
                );
            }
        }
        assert_ne!(out.logits[[0, 12, 0]], out.logits[[1, 12, 0]]);
    }

    #[test]
    fn pad_rows_are_finite() {
        let m = Model::new(tiny(30)).unwrap();
        let out = m.forward(&[vec![PAD; 10], vec![PAD; 3]]).unwrap();
        assert!(out.logits.iter().all(|v| v.is_finite()));
        assert!(out.hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_overlength_and_bad_ids() {
        let m = Model::new(tiny(30)).unwrap();
        assert!(matches!(
            m.forward_seq(&vec![1; 41]),
            Err(ModelError::Overlength { len: 41, max: 40 })
        ));
        assert!(matches!(
            m.forward_seq(&[1, 30]),
            Err(ModelError::IdOutOfRange { id: 30, .. })
        ));
    }

    #[test]
    fn untrained_cross_entropy_near_log_vocab() {
        let v = 80;
        let m = Model::new(ModelConfig::new(v, 16)).unwrap();
        let ids: Vec<u32> = (0..64).map(|i| (i * 13 % v) as u32).collect();
        let c = m.forward_seq(&ids).unwrap();
        let mut total = 0.0;
        for i in 0..ids.len() - 1 {
            let row = c.logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[ids[i + 1] as usize];
        }
        let ce = total / (ids.len() - 1) as f64;
        let ln_v = (v as f64).ln();
        assert!((ce - ln_v).abs() / ln_v < 0.05, "ce {ce} vs ln V {ln_v}");
    }

    #[test]
    fn kv_cache_matches_full_forward() {
        let m = Model::new(tiny(30)).unwrap();
        let ids: Vec<u32> = (0..25).map(|i| (i * 11 % 30) as u32).collect();
        let full = m.forward_seq(&ids).unwrap();
        let mut cache = m.new_cache();
        for n in [5, 9, 25, 7, 25] {
            let got = m.logits_for(&mut cache, &ids[..n]).unwrap();
            for (a, b) in got.iter().zip(full.logits.row(n - 1)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        // a divergent context reuses only the shared prefix
        let mut other = ids[..10].to_vec();
        other.push(4);
        let got = m.logits_for(&mut cache, &other).unwrap();
        let want = m.forward_seq(&other).unwrap();
        for (a, b) in got.iter().zip(want.logits.row(10)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn image_offsets_and_cached_decoding() {
        let layout = ImageLayout {
            boi: 20,
            vis_lo: 10,
            vis_hi: 19,
            block_len: 4,
        };
        let ids = [1, 25, 3, 20, 10, 11, 12, 13, 21, 26, 20, 14, 15];
        let offs = layout.offsets(&ids);
        let want = [None, None, None, Some(0), Some(1), Some(2), Some(3), Some(4), None, None, Some(0), Some(1), Some(2)];
        assert_eq!(offs, want);
        for n in 1..=ids.len() {
            assert_eq!(layout.offset_of_last(&ids[..n]), want[n - 1]);
        }
        let m = Model::new(ModelConfig {
            image_layout: Some(layout),
            ..tiny(30)
        })
        .unwrap();
        assert_eq!(m.weights.num_params(), m.config.param_count());
        let full = m.forward_seq(&ids).unwrap();
        let mut cache = m.new_cache();
        for n in [4, 13, 9] {
            let got = m.logits_for(&mut cache, &ids[..n]).unwrap();
            for (a, b) in got.iter().zip(full.logits.row(n - 1)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn projection_shapes() {
        let m = Model::new(tiny(30)).unwrap();
        let hidden = Array3::zeros((1, 12, 16));
        let span = Span {
            kind: SpanKind::Image,
            start: 3,
            end: 9,
        };
        let out = m.project_visual(&hidden, &[vec![span]], 4).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].dim(), (4, 4));
        assert!(out[0].iter().all(|&v| v == 0.0));
        assert!(m.project_visual(&hidden, &[vec![]], 4).unwrap().is_empty());
        assert!(matches!(
            m.project_visual(&hidden, &[vec![span]], 5),
            Err(ModelError::SpanLength { .. })
        ));
        assert_eq!(m.image_rows(&span, 4).unwrap(), 3..7);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(tiny(30)).unwrap();
        let mut buf = Vec::new();
        m.to_checkpoint(17).write_to(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"MMCKPT1");
        let ck = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(ck.step, 17);
        let back = Model::from_checkpoint(&ck).unwrap();
        assert_eq!(back, m);

        let mut wrong = ck.clone();
        wrong.config.hidden_dim = 8;
        wrong.config.heads = 2;
        assert!(Model::from_checkpoint(&wrong).is_err());
    }
}
