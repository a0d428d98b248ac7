//! Two-stage training, evaluation suites, the loss ablation grid and report
//! rendering.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_tokens, Codebook};
use crate::datagen::{derive_rng, PromptRecord};
use crate::losses::{Example, Lambda, LossError, Objective};
use crate::model::{Checkpoint, ImageLayout, Model, ModelConfig, ModelError, Weights};
use crate::sampler::{generate_trace, GenerateOptions, SamplerError, SegmentScales};
use crate::sequence::{assemble_trace, dump_line, MaskPolicy, Payload, SeqError, ThoughtTrace, TraceMode, UnifiedVocab};
use crate::toyworld::{detect_objects, score_geneval, GenevalCategory, ImageGrid, SceneSpec, PALETTE_RGB};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; batch dumped to {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("dataset: {0}")]
    Data(String),
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("sequence: {0}")]
    Sequence(#[from] SeqError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// Linear decay from the base rate at step 0 to zero, no warmup.
    #[default]
    Linear,
    Constant,
}

/// Optimisation settings. The defaults are sized for a single CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub mask_policy: MaskPolicy,
    /// Probability of training a row with its prompt removed, which gives the
    /// unconditional guidance contexts something to predict.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_stage1()
    }
}

impl TrainConfig {
    // Full-scale reference: 5K steps at batch 1536, lr 1e-5, linear decay,
    // clip 1.0, AdamW (0.9, 0.999). A 2-layer model at batch 32 needs far
    // fewer steps and a much larger step size. The base is left unannealed:
    // a fully decayed one fine-tunes noticeably worse in stage 2.
    pub fn desk_stage1() -> Self {
        Self {
            stage: 1,
            steps: 4000,
            batch_size: 32,
            lr: 3e-3,
            schedule: LrSchedule::Constant,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lambda: 1.0,
            seed: 0,
            checkpoint_every: 0,
            mask_policy: MaskPolicy::ResponseOnly,
            cond_dropout: 0.1,
        }
    }

    // Full-scale reference: 2K steps (subgoal) or 26K steps (critique) at
    // batch 8, lr 1e-5.
    pub fn desk_stage2() -> Self {
        Self {
            stage: 2,
            steps: 1500,
            batch_size: 16,
            lr: 3e-3,
            schedule: LrSchedule::Linear,
            ..Self::desk_stage1()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout must lie in [0, 1]");
        }
        if !matches!(self.stage, 1 | 2) {
            return bad("stage must be 1 or 2");
        }
        Lambda::new(self.lambda)?;
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => self.lr * (1.0 - step as f64 / self.steps as f64),
        }
    }
}

/// Transformer size used for the desk-scale experiments.
pub fn desk_model_config(vocab: &UnifiedVocab, proj_dim: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 4,
        hidden_dim: 64,
        ff_dim: 256,
        context_length: 512,
        seed,
        image_layout: Some(ImageLayout::from_vocab(vocab)),
        ..ModelConfig::new(vocab.size(), proj_dim)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Weights,
    pub v: Weights,
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: Weights::zeros(cfg),
            v: Weights::zeros(cfg),
            t: 0,
        }
    }

    pub fn update(&mut self, w: &mut Weights, g: &Weights, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let tensors = w
            .named_mut()
            .into_iter()
            .zip(self.m.named_mut())
            .zip(self.v.named_mut())
            .zip(g.named());
        for ((((_, mut wt), (_, mut mt)), (_, mut vt)), (_, gt)) in tensors {
            ndarray::Zip::from(&mut wt)
                .and(&mut mt)
                .and(&mut vt)
                .and(&gt)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let step = (*m / c1) / ((*v / c2).sqrt() + cfg.eps) + cfg.weight_decay * *w;
                    *w -= lr * step;
                });
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_mm: f64,
    pub loss_rec: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
    pub mm_text: f64,
    pub mm_visual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_step: usize,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Model plus optimiser state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    /// Completed steps.
    pub step: usize,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let opt = AdamW::new(&model.config);
        Ok(Self {
            model,
            opt,
            step: 0,
            cfg,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.step as u64);
        ck.meta = serde_json::json!({
            "stage": self.cfg.stage,
            "train_config": self.cfg,
            "adam_t": self.opt.t,
        });
        for (prefix, w) in [("adam.m.", &self.opt.m), ("adam.v.", &self.opt.v)] {
            for (name, t) in w.named() {
                ck.tensors.push((format!("{prefix}{name}"), t.to_owned()));
            }
        }
        ck
    }

    /// Restores model, optimiser moments and step counter. `cfg` overrides
    /// the stored training config (the step counter is kept either way).
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<TrainConfig>) -> Result<Self, HarnessError> {
        let model = Model::from_checkpoint(ck)?;
        let stored: Option<TrainConfig> = ck
            .meta
            .get("train_config")
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        let cfg = cfg
            .or(stored)
            .ok_or_else(|| HarnessError::Config("checkpoint has no training config".into()))?;
        cfg.validate()?;
        let mut opt = AdamW::new(&model.config);
        let has_moments = ck.tensors.iter().any(|(n, _)| n.starts_with("adam."));
        if has_moments {
            for (prefix, w) in [("adam.m.", &mut opt.m), ("adam.v.", &mut opt.v)] {
                for (name, mut t) in w.named_mut() {
                    let src: &ArrayD<f64> = ck
                        .tensor(&format!("{prefix}{name}"))
                        .ok_or_else(|| HarnessError::Config(format!("missing optimiser tensor {prefix}{name}")))?;
                    if src.shape() != t.shape() {
                        return Err(HarnessError::Config(format!("optimiser tensor {prefix}{name} has wrong shape")));
                    }
                    t.assign(src);
                }
            }
            opt.t = ck.meta.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
        }
        Ok(Self {
            model,
            opt,
            step: ck.step as usize,
            cfg,
        })
    }

    /// Runs from the current step up to `cfg.steps`.
    pub fn run(
        &mut self,
        data: &[ThoughtTrace],
        codebook: &Codebook,
        vocab: &UnifiedVocab,
        out_dir: Option<&Path>,
    ) -> Result<TrainSummary, HarnessError> {
        self.run_until(self.cfg.steps, data, codebook, vocab, out_dir)
    }

    /// Like [`Trainer::run`] but stops after step `stop` (capped at
    /// `cfg.steps`), checkpointing there.
    pub fn run_until(
        &mut self,
        stop: usize,
        data: &[ThoughtTrace],
        codebook: &Codebook,
        vocab: &UnifiedVocab,
        out_dir: Option<&Path>,
    ) -> Result<TrainSummary, HarnessError> {
        self.cfg.validate()?;
        let stop = stop.min(self.cfg.steps);
        if data.is_empty() {
            return Err(HarnessError::Data("empty training set".into()));
        }
        check_stage(data, self.cfg.stage)?;
        let cfg = self.cfg.clone();
        let examples = assemble_examples(data, vocab, cfg.mask_policy, false)?;
        let dropped = if cfg.cond_dropout > 0.0 {
            Some(assemble_examples(data, vocab, cfg.mask_policy, true)?)
        } else {
            None
        };
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut summary = TrainSummary {
            steps_run: 0,
            final_step: self.step,
            metrics: Vec::new(),
            checkpoints: Vec::new(),
        };
        let mut batcher = Batcher::new(data.len(), cfg.seed);
        while self.step < stop {
            let step = self.step;
            let idx = batcher.batch(step, cfg.batch_size);
            let mut drop_rng = derive_rng(cfg.seed ^ 0x0D0D, step as u64);
            let batch: Vec<Example> = idx
                .iter()
                .map(|&i| match &dropped {
                    Some(d) if drop_rng.random::<f64>() < cfg.cond_dropout => d[i].clone(),
                    _ => examples[i].clone(),
                })
                .collect();
            let objective = Objective {
                model: &self.model,
                codebook,
                vocab,
                lambda: Lambda::new(cfg.lambda)?,
            };
            let (report, grads) = objective.evaluate(&batch, true)?;
            let mut grads = grads.expect("requested gradients");
            if !report.loss_total.is_finite() || !grads.all_finite() {
                let dump = dump_batch(out_dir, step + 1, &batch)?;
                return Err(HarnessError::NonFinite {
                    step: step + 1,
                    dump: dump.display().to_string(),
                });
            }
            let norm = grads.sq_norm().sqrt();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            let clipped = grads.sq_norm().sqrt();
            let lr = cfg.lr_at(step);
            self.opt.update(&mut self.model.weights, &grads, lr, &cfg);
            self.step += 1;
            let m = StepMetrics {
                step: self.step,
                loss_mm: report.loss_mm,
                loss_rec: report.loss_rec,
                loss_total: report.loss_total,
                lr,
                grad_norm: norm,
                grad_norm_clipped: clipped,
                mm_text: report.mm_text,
                mm_visual: report.mm_visual,
            };
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &m).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            summary.metrics.push(m);
            summary.steps_run += 1;
            let periodic = cfg.checkpoint_every > 0 && self.step % cfg.checkpoint_every == 0;
            if let Some(dir) = out_dir {
                if periodic || self.step == stop {
                    let path = if self.step == cfg.steps {
                        dir.join("final.mmckpt")
                    } else {
                        dir.join(format!("step_{:06}.mmckpt", self.step))
                    };
                    self.to_checkpoint().save(&path)?;
                    summary.checkpoints.push(path);
                }
            }
        }
        if let Some(mut w) = log {
            w.flush()?;
        }
        summary.final_step = self.step;
        Ok(summary)
    }
}

/// Convenience wrapper: fresh optimiser, train to `cfg.steps`.
pub fn train(
    model: Model,
    data: &[ThoughtTrace],
    codebook: &Codebook,
    vocab: &UnifiedVocab,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainSummary), HarnessError> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let s = t.run(data, codebook, vocab, out_dir)?;
    Ok((t.model, s))
}

fn check_stage(data: &[ThoughtTrace], stage: u8) -> Result<(), HarnessError> {
    for (i, t) in data.iter().enumerate() {
        t.validate()?;
        if stage == 1 && t.mode != TraceMode::Direct {
            return Err(HarnessError::Data(format!("trace {i} is {} but stage 1 trains on direct traces", t.mode)));
        }
    }
    Ok(())
}

fn assemble_examples(
    data: &[ThoughtTrace],
    vocab: &UnifiedVocab,
    policy: MaskPolicy,
    drop_prompt: bool,
) -> Result<Vec<Example>, HarnessError> {
    data.iter()
        .map(|t| {
            let seq = if drop_prompt {
                let bare = ThoughtTrace {
                    prompt: String::new(),
                    ..t.clone()
                };
                assemble_trace(&bare, vocab)?
            } else {
                assemble_trace(t, vocab)?
            };
            Ok(Example::new(seq, policy))
        })
        .collect()
}

fn dump_batch(out_dir: Option<&Path>, step: usize, batch: &[Example]) -> Result<PathBuf, HarnessError> {
    let dir = out_dir.map_or_else(std::env::temp_dir, Path::to_path_buf);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("nonfinite_batch_step_{step:06}.txt"));
    let mut w = BufWriter::new(File::create(&path)?);
    for ex in batch {
        writeln!(w, "{}", dump_line(&ex.seq.ids))?;
    }
    w.flush()?;
    Ok(path)
}

/// Deterministic epoch-shuffled batches; batch `s` depends only on
/// (seed, s), so resuming reproduces the uninterrupted order.
struct Batcher {
    n: usize,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: None }
    }

    fn perm(&mut self, epoch: usize) -> &[usize] {
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut p: Vec<usize> = (0..self.n).collect();
            p.shuffle(&mut derive_rng(self.seed, 1 << 32 | epoch as u64));
            self.epoch = Some((epoch, p));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    fn batch(&mut self, step: usize, size: usize) -> Vec<usize> {
        (0..size)
            .map(|i| {
                let (k, n) = (step * size + i, self.n);
                self.perm(k / n)[k % n]
            })
            .collect()
    }
}

/// Result of asking a generator for one trace.
#[derive(Debug, Clone, Default)]
pub struct GenOutcome {
    pub trace: Option<ThoughtTrace>,
    pub diagnostic: Option<String>,
    pub scales_log: Vec<SegmentScales>,
}

/// Anything that turns suite prompts into traces.
pub trait TraceGenerator {
    fn generate(&mut self, index: usize, prompt: &str) -> Result<GenOutcome, HarnessError>;
}

/// Decodes with a trained model; prompt `i` samples with seed stream `i`.
pub struct ModelGenerator<'a> {
    pub model: &'a Model,
    pub vocab: UnifiedVocab,
    pub opts: GenerateOptions,
}

impl TraceGenerator for ModelGenerator<'_> {
    fn generate(&mut self, index: usize, prompt: &str) -> Result<GenOutcome, HarnessError> {
        let mut opts = self.opts.clone();
        opts.params.seed = derive_rng(self.opts.params.seed, index as u64).random();
        let g = generate_trace(self.model, &self.vocab, prompt, &opts)?;
        Ok(GenOutcome {
            trace: g.trace,
            diagnostic: g.diagnostic,
            scales_log: g.scales_log,
        })
    }
}

/// Replays fixed traces, e.g. the ground truth.
pub struct ReplayGenerator(pub Vec<ThoughtTrace>);

impl TraceGenerator for ReplayGenerator {
    fn generate(&mut self, index: usize, _prompt: &str) -> Result<GenOutcome, HarnessError> {
        Ok(GenOutcome {
            trace: self.0.get(index).cloned(),
            diagnostic: None,
            scales_log: vec![],
        })
    }
}

/// Scores of one image row over the six categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    /// `(label, prompts scored, mean score)`; the mean is `None` when no
    /// prompt of the suite falls in that category.
    pub categories: Vec<(String, usize, Option<f64>)>,
    /// Unweighted mean of the category means that exist.
    pub overall: Option<f64>,
}

impl ScoreRow {
    fn from_scores(per_cat: &BTreeMap<GenevalCategory, Vec<u8>>) -> Self {
        let categories: Vec<(String, usize, Option<f64>)> = GenevalCategory::ALL
            .iter()
            .map(|c| {
                let v = per_cat.get(c).map_or(&[][..], |v| v.as_slice());
                let mean = (!v.is_empty()).then(|| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64);
                (c.label().to_string(), v.len(), mean)
            })
            .collect();
        let present: Vec<f64> = categories.iter().filter_map(|c| c.2).collect();
        let overall = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Self { categories, overall }
    }

    pub fn get(&self, cat: GenevalCategory) -> Option<f64> {
        self.categories.iter().find(|c| c.0 == cat.label()).and_then(|c| c.2)
    }

    /// Element-wise mean over rows (seeds).
    pub fn mean_of(rows: &[ScoreRow]) -> Option<ScoreRow> {
        let first = rows.first()?;
        let categories = first
            .categories
            .iter()
            .enumerate()
            .map(|(i, (label, n, _))| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.categories[i].2).collect();
                let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                (label.clone(), *n, mean)
            })
            .collect::<Vec<_>>();
        let present: Vec<f64> = categories.iter().filter_map(|c| c.2).collect();
        let overall = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Some(ScoreRow { categories, overall })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub mode: TraceMode,
    pub n_prompts: usize,
    pub n_ungrammatical: usize,
    #[serde(rename = "final")]
    pub final_image: ScoreRow,
    /// Critique mode only.
    pub hypothesis: Option<ScoreRow>,
}

/// Per-prompt evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub prompt: String,
    pub trace: Option<ThoughtTrace>,
    pub diagnostic: Option<String>,
    pub final_scores: BTreeMap<String, u8>,
    pub hypothesis_scores: Option<BTreeMap<String, u8>>,
    pub scales_log: Vec<SegmentScales>,
}

fn score_image(block: Option<&crate::codec::VisualTokenBlock>, spec: &SceneSpec) -> BTreeMap<GenevalCategory, u8> {
    let detected = block
        .and_then(|b| decode_tokens(b, spec.canvas_size).ok())
        .map(|d| detect_objects(&d.image));
    GenevalCategory::applicable(spec)
        .into_iter()
        .map(|c| {
            let s = detected
                .as_ref()
                .map_or(0, |d| score_geneval(d, spec, c).expect("applicable category"));
            (c, s)
        })
        .collect()
}

/// Generates one trace per suite prompt and scores its final image (and, in
/// critique mode, its hypothesis image). Ungrammatical outputs score 0.
pub fn evaluate(
    generator: &mut dyn TraceGenerator,
    suite: &[PromptRecord],
    mode: TraceMode,
    name: &str,
) -> Result<(EvalReport, Vec<EvalRecord>), HarnessError> {
    let mut fin: BTreeMap<GenevalCategory, Vec<u8>> = BTreeMap::new();
    let mut hyp: BTreeMap<GenevalCategory, Vec<u8>> = BTreeMap::new();
    let mut records = Vec::with_capacity(suite.len());
    let mut ungrammatical = 0;
    for (i, rec) in suite.iter().enumerate() {
        let out = generator.generate(i, &rec.prompt)?;
        let trace = out.trace.filter(|t| t.validate().is_ok() && t.mode == mode);
        if trace.is_none() {
            ungrammatical += 1;
        }
        let f = score_image(trace.as_ref().and_then(|t| t.final_image()), &rec.scene);
        for (c, s) in &f {
            fin.entry(*c).or_default().push(*s);
        }
        let h = (mode == TraceMode::Critique).then(|| {
            let h = score_image(trace.as_ref().and_then(|t| t.hypothesis_image()), &rec.scene);
            for (c, s) in &h {
                hyp.entry(*c).or_default().push(*s);
            }
            h
        });
        let labelled = |m: BTreeMap<GenevalCategory, u8>| m.into_iter().map(|(c, s)| (c.label().to_string(), s)).collect();
        records.push(EvalRecord {
            index: i,
            prompt: rec.prompt.clone(),
            trace,
            diagnostic: out.diagnostic,
            final_scores: labelled(f),
            hypothesis_scores: h.map(labelled),
            scales_log: out.scales_log,
        });
    }
    let report = EvalReport {
        name: name.to_string(),
        mode,
        n_prompts: suite.len(),
        n_ungrammatical: ungrammatical,
        final_image: ScoreRow::from_scores(&fin),
        hypothesis: (mode == TraceMode::Critique).then(|| ScoreRow::from_scores(&hyp)),
    };
    Ok((report, records))
}

/// Row label of the ablation table for weight `lambda`.
pub fn ablation_label(lambda: f64) -> String {
    if lambda == 0.0 {
        "L_mm".into()
    } else if lambda == 1.0 {
        "L_mm+L_rec".into()
    } else {
        format!("L_mm+{lambda}·L_rec")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub scores: Option<ScoreRow>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub mode: TraceMode,
    pub rows: Vec<AblationRow>,
}

/// Everything one ablation cell needs besides λ and the seed.
pub struct AblationSetup<'a> {
    pub init: &'a Model,
    pub data: &'a [ThoughtTrace],
    pub suite: &'a [PromptRecord],
    pub codebook: &'a Codebook,
    pub vocab: &'a UnifiedVocab,
    pub train: TrainConfig,
    pub gen: GenerateOptions,
}

/// Trains and evaluates one model per (λ, seed). A failing cell is recorded
/// in its row and the grid carries on.
pub fn ablate_losses(setup: &AblationSetup, lambdas: &[f64], seeds: &[u64]) -> AblationTable {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let mut scored = Vec::new();
        let mut errors = Vec::new();
        for &seed in seeds {
            let cell = || -> Result<ScoreRow, HarnessError> {
                let cfg = TrainConfig {
                    lambda,
                    seed,
                    ..setup.train.clone()
                };
                let (model, _) = train(setup.init.clone(), setup.data, setup.codebook, setup.vocab, &cfg, None)?;
                let mut gen_opts = setup.gen.clone();
                gen_opts.params.seed ^= seed;
                let mut g = ModelGenerator {
                    model: &model,
                    vocab: *setup.vocab,
                    opts: gen_opts,
                };
                let (r, _) = evaluate(&mut g, setup.suite, setup.gen.mode, &ablation_label(lambda))?;
                Ok(r.final_image)
            };
            match cell() {
                Ok(r) => scored.push(r),
                Err(e) => errors.push(format!("seed {seed}: {e}")),
            }
        }
        rows.push(AblationRow {
            label: ablation_label(lambda),
            lambda,
            seeds: seeds.to_vec(),
            scores: ScoreRow::mean_of(&scored),
            errors,
        });
    }
    AblationTable {
        mode: setup.gen.mode,
        rows,
    }
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "–".to_string(), |x| format!("{x:.2}"))
}

fn table_header(first: &str) -> String {
    let mut s = format!("| {first} |");
    for c in GenevalCategory::ALL {
        s += &format!(" {} |", c.label());
    }
    s += " Overall |\n|---|";
    s += &"---:|".repeat(GenevalCategory::ALL.len() + 1);
    s.push('\n');
    s
}

fn table_row(label: &str, row: &ScoreRow) -> String {
    let mut s = format!("| {label} |");
    for c in &row.categories {
        s += &format!(" {} |", fmt_score(c.2));
    }
    s += &format!(" {} |\n", fmt_score(row.overall));
    s
}

/// Markdown table in the layout of the GenEval results; critique reports
/// get a "(visual hypo.)" row above their "(final)" row.
pub fn render_eval_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from("## GenEval-style scores\n\n");
    if reports.iter().all(|r| r.n_prompts == 0) {
        s += "No prompts were evaluated (0 prompts in the suite).\n";
        return s;
    }
    s += &table_header("Method");
    for r in reports {
        match &r.hypothesis {
            Some(h) => {
                s += &table_row(&format!("{} (visual hypo.)", r.name), h);
                s += &table_row(&format!("{} (final)", r.name), &r.final_image);
            }
            None => s += &table_row(&r.name, &r.final_image),
        }
    }
    s.push('\n');
    for r in reports {
        let counts: Vec<String> = r
            .final_image
            .categories
            .iter()
            .map(|c| format!("{} {}", c.0, c.1))
            .collect();
        s += &format!(
            "- {}: {} prompts ({} mode), {} ungrammatical; prompts per category: {}\n",
            r.name,
            r.n_prompts,
            r.mode,
            r.n_ungrammatical,
            counts.join(", ")
        );
    }
    s
}

pub fn render_ablation_markdown(t: &AblationTable) -> String {
    let mut s = String::from("## Loss ablation\n\n");
    s += &table_header("Loss");
    for r in &t.rows {
        match &r.scores {
            Some(row) => s += &table_row(&r.label, row),
            None => {
                s += &format!("| {} |", r.label);
                s += &" – |".repeat(GenevalCategory::ALL.len() + 1);
                s.push('\n');
            }
        }
    }
    let failures: Vec<String> = t
        .rows
        .iter()
        .flat_map(|r| r.errors.iter().map(move |e| format!("- {}: {e}\n", r.label)))
        .collect();
    if !failures.is_empty() {
        s += "\nFailed cells:\n\n";
        s += &failures.concat();
    }
    s
}

fn encode_png(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>, HarnessError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header()?;
        wr.write_image_data(rgb)?;
    }
    Ok(out)
}

/// PNG bytes of one canvas, each cell drawn as a `scale`×`scale` square.
pub fn image_png(img: &ImageGrid, scale: usize) -> Result<Vec<u8>, HarnessError> {
    let side = img.size() * scale;
    encode_png(side, side, &img.to_rgb(scale))
}

/// Image grid, one row per trace and one column per segment. Text segments
/// are drawn as grey tiles, absent segments as black ones.
pub fn trace_grid_png(traces: &[Option<ThoughtTrace>], canvas: usize, scale: usize) -> Result<(Vec<u8>, usize), HarnessError> {
    let cols = traces
        .iter()
        .map(|t| t.as_ref().map_or(1, |t| t.segments.len()))
        .max()
        .unwrap_or(1);
    let rows = traces.len().max(1);
    let tile = canvas * scale;
    let pad = 2;
    let (w, h) = (cols * (tile + pad) + pad, rows * (tile + pad) + pad);
    let mut px = vec![255u8; w * h * 3];
    let mut fill = |r0: usize, c0: usize, rgb: &dyn Fn(usize, usize) -> [u8; 3]| {
        for y in 0..tile {
            for x in 0..tile {
                let o = ((r0 + y) * w + c0 + x) * 3;
                px[o..o + 3].copy_from_slice(&rgb(y, x));
            }
        }
    };
    for (ri, t) in traces.iter().enumerate() {
        for ci in 0..cols {
            let (r0, c0) = (pad + ri * (tile + pad), pad + ci * (tile + pad));
            let seg = t.as_ref().and_then(|t| t.segments.get(ci));
            match seg.map(|s| &s.payload) {
                Some(Payload::Image(b)) => {
                    let img = decode_tokens(b, canvas)
                        .map(|d| d.image)
                        .unwrap_or_else(|_| ImageGrid::blank(canvas));
                    fill(r0, c0, &|y, x| PALETTE_RGB[img.get(y / scale, x / scale) as usize]);
                }
                Some(Payload::Text(_)) => fill(r0, c0, &|_, _| [128, 128, 128]),
                None => fill(r0, c0, &|_, _| [0, 0, 0]),
            }
        }
    }
    Ok((encode_png(w, h, &px)?, rows * cols))
}

/// Writes `report.md` plus one PNG grid per evaluation with traces.
pub fn write_report(
    out_dir: &Path,
    reports: &[(EvalReport, Vec<EvalRecord>)],
    ablation: Option<&AblationTable>,
    canvas: usize,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut md = String::from("# Results\n\n");
    if !reports.is_empty() {
        let plain: Vec<EvalReport> = reports.iter().map(|r| r.0.clone()).collect();
        md += &render_eval_markdown(&plain);
        md.push('\n');
    }
    if let Some(t) = ablation {
        md += &render_ablation_markdown(t);
        md.push('\n');
    }
    for (i, (r, recs)) in reports.iter().enumerate() {
        if recs.is_empty() {
            continue;
        }
        let traces: Vec<Option<ThoughtTrace>> = recs.iter().map(|x| x.trace.clone()).collect();
        let (png_bytes, _) = trace_grid_png(&traces, canvas, 8)?;
        let name = format!("grid_{i:02}.png");
        std::fs::write(out_dir.join(&name), png_bytes)?;
        md += &format!("![{}]({name})\n\n", r.name);
        written.push(out_dir.join(name));
    }
    let path = out_dir.join("report.md");
    std::fs::write(&path, md)?;
    written.insert(0, path);
    Ok(written)
}
