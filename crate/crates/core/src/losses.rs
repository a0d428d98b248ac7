//! Next-token cross-entropy, visual reconstruction MSE and their weighted sum.
//!
//! Both terms use mean reduction: the cross-entropy averages over all
//! supervised target positions of the batch, the reconstruction term averages
//! the per-image MSE (normalized by T·D′) over all images of the batch.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{codebook_features, Codebook, VisualTokenBlock};
use crate::model::{Model, ModelError, Weights};
use crate::sequence::{build_loss_mask, LossMask, MaskPolicy, MultimodalSequence, Span, SpanKind, UnifiedVocab};

/// λ grid used by the ablation runner.
pub const ABLATION_LAMBDAS: [f64; 4] = [0.0, 0.5, 1.0, 5.0];

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("{spans} image spans but {targets} targets")]
    TargetCount { spans: usize, targets: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Validated reconstruction weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Lambda(f64);

impl Lambda {
    pub fn new(v: f64) -> Result<Self, LossError> {
        if v.is_finite() && v >= 0.0 {
            Ok(Self(v))
        } else {
            Err(LossError::BadLambda(v))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Lambda {
    fn default() -> Self {
        Self(1.0)
    }
}

impl TryFrom<f64> for Lambda {
    type Error = LossError;
    fn try_from(v: f64) -> Result<Self, LossError> {
        Lambda::new(v)
    }
}

impl From<Lambda> for f64 {
    fn from(l: Lambda) -> f64 {
        l.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_mm: f64,
    pub loss_rec: f64,
    pub loss_total: f64,
    pub lambda: f64,
    pub n_valid_positions: usize,
    pub n_images: usize,
    /// Cross-entropy restricted to non-visual targets.
    pub mm_text: f64,
    /// Cross-entropy restricted to visual-token targets.
    pub mm_visual: f64,
    pub n_text_positions: usize,
    pub n_visual_positions: usize,
}

fn log_softmax_at(row: ArrayView2<f64>, i: usize, target: usize) -> (f64, f64) {
    let r = row.row(i);
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = r.iter().map(|z| (z - max).exp()).sum();
    (r[target] - max - sum.ln(), max + sum.ln())
}

/// Mean NLL of `targets[b, i+1]` under `logits[b, i]` over positions where
/// `mask[b, i+1]` holds. Returns 0 when nothing is supervised.
pub fn loss_mm(
    logits: ArrayView3<f64>,
    targets: ArrayView2<u32>,
    mask: ArrayView2<bool>,
) -> Result<f64, LossError> {
    let (b, l, v) = logits.dim();
    if targets.dim() != (b, l) || mask.dim() != (b, l) {
        return Err(LossError::Shape(format!(
            "logits {:?}, targets {:?}, mask {:?}",
            logits.dim(),
            targets.dim(),
            mask.dim()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for bi in 0..b {
        let rows = logits.slice(s![bi, .., ..]);
        for i in 0..l.saturating_sub(1) {
            if !mask[[bi, i + 1]] {
                continue;
            }
            let t = targets[[bi, i + 1]] as usize;
            if t >= v {
                return Err(LossError::Shape(format!("target {t} >= vocab {v}")));
            }
            total -= log_softmax_at(rows, i, t).0;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Mean over images of ‖p − c‖² / (T·D′); 0 for an empty list.
pub fn reconstruction_mse(projected: &[Array2<f64>], features: &[Array2<f64>]) -> Result<f64, LossError> {
    if projected.len() != features.len() {
        return Err(LossError::TargetCount {
            spans: projected.len(),
            targets: features.len(),
        });
    }
    if projected.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, c) in projected.iter().zip(features) {
        if p.dim() != c.dim() {
            return Err(LossError::Shape(format!("{:?} vs {:?}", p.dim(), c.dim())));
        }
        let sq: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / p.len() as f64;
    }
    Ok(total / projected.len() as f64)
}

/// Reconstruction loss from batched hidden states (B×L×D), per-row spans and
/// one target block per image span, in span order.
pub fn loss_rec(
    model: &Model,
    hidden: &Array3<f64>,
    spans: &[Vec<Span>],
    codebook: &Codebook,
    targets: &[VisualTokenBlock],
    block_len: usize,
) -> Result<f64, LossError> {
    let projected = model.project_visual(hidden, spans, block_len)?;
    if projected.len() != targets.len() {
        return Err(LossError::TargetCount {
            spans: projected.len(),
            targets: targets.len(),
        });
    }
    let features: Vec<Array2<f64>> = targets.iter().map(|t| codebook_features(t, codebook)).collect();
    reconstruction_mse(&projected, &features)
}

pub fn loss_total(loss_mm: f64, loss_rec: f64, lambda: f64) -> Result<LossReport, LossError> {
    let lambda = Lambda::new(lambda)?.get();
    Ok(LossReport {
        loss_mm,
        loss_rec,
        loss_total: loss_mm + lambda * loss_rec,
        lambda,
        n_valid_positions: 0,
        n_images: 0,
        mm_text: 0.0,
        mm_visual: 0.0,
        n_text_positions: 0,
        n_visual_positions: 0,
    })
}

/// A training row: an assembled sequence and its supervision mask.
#[derive(Debug, Clone)]
pub struct Example {
    pub seq: MultimodalSequence,
    pub mask: LossMask,
}

impl Example {
    pub fn new(seq: MultimodalSequence, policy: MaskPolicy) -> Self {
        let mask = build_loss_mask(&seq.ids, policy);
        Self { seq, mask }
    }

    /// Codebook indices of every image span, in order.
    pub fn image_targets(&self, vocab: &UnifiedVocab) -> Vec<VisualTokenBlock> {
        self.seq
            .image_spans()
            .map(|sp| {
                let toks = self.seq.ids[sp.visual_range()]
                    .iter()
                    .map(|&id| (id - vocab.vis_lo()) as u16)
                    .collect();
                VisualTokenBlock::new(toks, vocab.num_visual).expect("validated sequence")
            })
            .collect()
    }
}

/// Composite objective over a batch with optional gradients.
pub struct Objective<'a> {
    pub model: &'a Model,
    pub codebook: &'a Codebook,
    pub vocab: &'a UnifiedVocab,
    pub lambda: Lambda,
}

impl Objective<'_> {
    pub fn evaluate(&self, batch: &[Example], with_grad: bool) -> Result<(LossReport, Option<Weights>), LossError> {
        let vocab = self.vocab;
        let t = vocab.block_len;
        let dprime = self.codebook.feature_dim();
        if self.model.config.proj_dim != dprime {
            return Err(LossError::Shape(format!(
                "projection dim {} != codebook dim {dprime}",
                self.model.config.proj_dim
            )));
        }
        let n_valid: usize = batch
            .iter()
            .map(|ex| ex.mask.0.iter().skip(1).filter(|&&b| b).count())
            .sum();
        let n_images: usize = batch.iter().map(|ex| ex.seq.image_spans().count()).sum();
        let lambda = self.lambda.get();
        let mut grads = with_grad.then(|| Weights::zeros(&self.model.config));

        let (mut nll_sum, mut rec_sum) = (0.0, 0.0);
        let (mut text_sum, mut vis_sum, mut n_text, mut n_vis) = (0.0, 0.0, 0usize, 0usize);
        for ex in batch {
            let ids = &ex.seq.ids;
            if ex.mask.len() != ids.len() {
                return Err(LossError::Shape(format!(
                    "mask length {} != sequence length {}",
                    ex.mask.len(),
                    ids.len()
                )));
            }
            let cache = self.model.forward_seq(ids)?;
            let mut dlogits = Array2::<f64>::zeros(cache.logits.raw_dim());
            for i in 0..ids.len().saturating_sub(1) {
                if !ex.mask.0[i + 1] {
                    continue;
                }
                let target = ids[i + 1] as usize;
                let (logp, lse) = log_softmax_at(cache.logits.view(), i, target);
                nll_sum -= logp;
                if vocab.is_visual(ids[i + 1]) {
                    vis_sum -= logp;
                    n_vis += 1;
                } else {
                    text_sum -= logp;
                    n_text += 1;
                }
                if grads.is_some() {
                    let scale = 1.0 / n_valid as f64;
                    let mut g = dlogits.row_mut(i);
                    g.assign(&cache.logits.row(i).mapv(|z| (z - lse).exp() * scale));
                    g[target] -= scale;
                }
            }
            let mut dhidden = Array2::<f64>::zeros(cache.hidden.raw_dim());
            for (span, block) in ex
                .seq
                .spans
                .iter()
                .filter(|s| s.kind == SpanKind::Image)
                .zip(ex.image_targets(vocab))
            {
                let rows = self.model.image_rows(span, t)?;
                let h = cache.hidden.slice(s![rows.clone(), ..]);
                let p = self.model.project_rows(h);
                let c = codebook_features(&block, self.codebook);
                let diff = &p - &c;
                let norm = (t * dprime) as f64;
                rec_sum += diff.iter().map(|d| d * d).sum::<f64>() / norm;
                if let Some(g) = grads.as_mut() {
                    if lambda != 0.0 {
                        let dp = diff.mapv(|d| 2.0 * d * lambda / (norm * n_images as f64));
                        let dh = self.model.project_rows_backward(h, &dp, g);
                        let mut slot = dhidden.slice_mut(s![rows, ..]);
                        slot += &dh;
                    }
                }
            }
            if let Some(g) = grads.as_mut() {
                self.model.backward_seq(&cache, &dlogits, Some(&dhidden), g);
            }
        }
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        let mut report = loss_total(mean(nll_sum, n_valid), mean(rec_sum, n_images), lambda)?;
        report.n_valid_positions = n_valid;
        report.n_images = n_images;
        report.mm_text = mean(text_sum, n_text);
        report.mm_visual = mean(vis_sum, n_vis);
        report.n_text_positions = n_text;
        report.n_visual_positions = n_vis;
        Ok((report, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn near_one_hot_logits() {
        let v = 10;
        let targets = ndarray::arr2(&[[1u32, 4, 7, 2]]);
        let mut logits = Array3::zeros((1, 4, v));
        for i in 0..3 {
            logits[[0, i, targets[[0, i + 1]] as usize]] = 100.0;
        }
        let mask = ndarray::arr2(&[[false, true, true, true]]);
        let l = loss_mm(logits.view(), targets.view(), mask.view()).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let v = 37;
        let logits = Array3::zeros((2, 5, v));
        let targets = Array2::from_elem((2, 5), 3u32);
        let mask = Array2::from_elem((2, 5), true);
        let l = loss_mm(logits.view(), targets.view(), mask.view()).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn no_valid_positions_is_zero() {
        let logits = Array3::zeros((1, 3, 4));
        let targets = Array2::zeros((1, 3));
        let mask = Array2::from_elem((1, 3), false);
        assert_eq!(loss_mm(logits.view(), targets.view(), mask.view()).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let logits = Array3::zeros((1, 3, 4));
        let targets = Array2::zeros((1, 2));
        let mask = Array2::from_elem((1, 3), false);
        assert!(loss_mm(logits.view(), targets.view(), mask.view()).is_err());
    }

    #[test]
    fn reconstruction_cases() {
        let c = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        assert_eq!(reconstruction_mse(&[c.clone()], &[c.clone()]).unwrap(), 0.0);
        let p = &c + 1.0;
        assert_eq!(reconstruction_mse(&[p], &[c.clone()]).unwrap(), 1.0);
        assert_eq!(reconstruction_mse(&[], &[]).unwrap(), 0.0);
        assert!(reconstruction_mse(&[c.clone()], &[]).is_err());
    }

    #[test]
    fn total_composition() {
        assert_eq!(loss_total(2.0, 0.5, 1.0).unwrap().loss_total, 2.5);
        assert_eq!(loss_total(2.0, 0.5, 0.0).unwrap().loss_total, 2.0);
        assert!(matches!(loss_total(2.0, 0.5, -1.0), Err(LossError::BadLambda(_))));
        for l in ABLATION_LAMBDAS {
            assert!(Lambda::new(l).is_ok());
        }
        assert!(serde_json::from_str::<Lambda>("-0.5").is_err());
    }
}
