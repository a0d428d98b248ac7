//! Grammar-constrained decoding with multi-condition classifier-free guidance.
//!
//! A [`DecodeState`] tracks where the emitted stream sits in its trace
//! grammar and masks every token that would break it, so decoded sequences
//! parse by construction. Guidance mixes logits from five contexts built
//! by [`build_condition_contexts`].

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{KvCache, Model, ModelError};
use crate::sequence::{
    parse_prefix, parse_sequence, tokenize_text, PartialTrace, SeqError, ThoughtTrace, TraceMode,
    UnifiedVocab, BOS, EOS, SEP, WORDS,
};
use crate::toyworld::MAX_OBJECTS;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("logit length {got} != {expected}")]
    Length { got: usize, expected: usize },
    #[error("missing logits for the {0} condition")]
    MissingCondition(&'static str),
    #[error("non-finite guidance scale")]
    BadScale,
    #[error("prompt: {0}")]
    Prompt(#[from] SeqError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
}

/// Guidance weights of the full, image, negative and prompt conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgScales {
    pub full: f64,
    pub image: f64,
    pub negative: f64,
    pub prompt: f64,
}

impl CfgScales {
    pub const SUBGOAL_IMAGES: CfgScales = CfgScales::new(5.0, 0.0, 3.0, 0.0);
    pub const SUBGOAL_FINAL: CfgScales = CfgScales::new(2.0, 1.2, 3.0, 5.0);
    pub const CRITIQUE: CfgScales = CfgScales::new(1.5, 0.8, 3.0, 5.0);
    /// Plain conditional sampling.
    pub const CONDITIONAL: CfgScales = CfgScales::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(full: f64, image: f64, negative: f64, prompt: f64) -> Self {
        Self {
            full,
            image,
            negative,
            prompt,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "subgoal-images" => Some(Self::SUBGOAL_IMAGES),
            "subgoal-final" => Some(Self::SUBGOAL_FINAL),
            "critique" => Some(Self::CRITIQUE),
            "conditional" => Some(Self::CONDITIONAL),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let all = [self.full, self.image, self.negative, self.prompt];
        if all.iter().all(|s| s.is_finite()) {
            Ok(())
        } else {
            Err(SamplerError::BadScale)
        }
    }

    /// Weight left on the unconditional logits.
    pub fn uncond_weight(&self) -> f64 {
        1.0 - self.full - self.image - self.prompt + self.negative
    }
}

/// Logits of each condition; `None` where the condition was not evaluated.
#[derive(Debug, Clone, Default)]
pub struct ConditionLogits {
    pub full: Option<Array1<f64>>,
    pub image: Option<Array1<f64>>,
    pub negative: Option<Array1<f64>>,
    pub prompt: Option<Array1<f64>>,
    pub uncond: Option<Array1<f64>>,
}

/// `ℓ_u + s_f(ℓ_f − ℓ_u) + s_i(ℓ_i − ℓ_u) + s_p(ℓ_p − ℓ_u) + s_n(ℓ_u − ℓ_n)`,
/// evaluated as a weighted sum so that zero-weight terms are never touched
/// and `(1, 0, 0, 0)` returns `ℓ_full` bit for bit.
pub fn cfg_combine(l: &ConditionLogits, scales: &CfgScales) -> Result<Array1<f64>, SamplerError> {
    scales.validate()?;
    let terms: [(f64, &Option<Array1<f64>>, &'static str); 5] = [
        (scales.full, &l.full, "full"),
        (scales.image, &l.image, "image"),
        (scales.prompt, &l.prompt, "prompt"),
        (-scales.negative, &l.negative, "negative"),
        (scales.uncond_weight(), &l.uncond, "unconditional"),
    ];
    let mut acc: Option<Array1<f64>> = None;
    for (w, logits, name) in terms {
        if w == 0.0 {
            continue;
        }
        let v = logits.as_ref().ok_or(SamplerError::MissingCondition(name))?;
        match acc.as_mut() {
            None => acc = Some(if w == 1.0 { v.clone() } else { v * w }),
            Some(a) => {
                if a.len() != v.len() {
                    return Err(SamplerError::Length {
                        got: v.len(),
                        expected: a.len(),
                    });
                }
                a.scaled_add(w, v);
            }
        }
    }
    let len = [&l.full, &l.image, &l.negative, &l.prompt, &l.uncond]
        .iter()
        .find_map(|x| x.as_ref().map(|v| v.len()));
    Ok(acc.unwrap_or_else(|| Array1::zeros(len.unwrap_or(0))))
}

/// The five decoding contexts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionContexts {
    pub full: Vec<u32>,
    pub image: Vec<u32>,
    pub negative: Vec<u32>,
    pub prompt: Vec<u32>,
    pub uncond: Vec<u32>,
}

/// Builds the contexts from token ids. `history` is everything emitted after
/// the separator. Only the full context sees history text; the image context
/// keeps completed image spans; an image still being drawn is appended to
/// every context so that all of them predict the same position.
pub fn build_condition_contexts(
    prompt: &[u32],
    history: &[u32],
    negative: &[u32],
    vocab: &UnifiedVocab,
) -> ConditionContexts {
    let wrap = |body: &[u32]| {
        let mut v = Vec::with_capacity(body.len() + 2);
        v.push(BOS);
        v.extend_from_slice(body);
        v.push(SEP);
        v
    };
    let mut images = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in history.iter().enumerate() {
        if t == vocab.boi() {
            open = Some(i);
        } else if t == vocab.eoi() {
            if let Some(s) = open.take() {
                images.extend_from_slice(&history[s..=i]);
            }
        }
    }
    let tail = open.map_or(&[][..], |s| &history[s..]);
    let with_tail = |mut v: Vec<u32>| {
        v.extend_from_slice(tail);
        v
    };
    let mut full = wrap(prompt);
    full.extend_from_slice(history);
    let mut image = wrap(&[]);
    image.extend_from_slice(&images);
    ConditionContexts {
        full,
        image: with_tail(image),
        negative: with_tail(wrap(negative)),
        prompt: with_tail(wrap(prompt)),
        uncond: with_tail(wrap(&[])),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// 0 means greedy.
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    /// Tokens whose probability after temperature falls below this floor are
    /// never sampled (the most likely token always survives). 0 disables it.
    #[serde(default)]
    pub min_prob: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            min_prob: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    Text,
    Image { remaining: usize },
}

/// Longest text segment the state machine lets through before forcing the
/// segment to close.
pub const DEFAULT_MAX_TEXT_TOKENS: usize = 32;

/// Modality and grammar position of one decoding stream.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub mode: DecodeMode,
    pub trace_mode: TraceMode,
    pub vocab: UnifiedVocab,
    /// Tokens emitted after the separator.
    pub emitted: Vec<u32>,
    pub images_done: usize,
    /// Visual subgoals announced by the plan (subgoal mode).
    pub planned_subgoals: Option<usize>,
    pub max_text_tokens: usize,
    pub finished: bool,
    text_run: usize,
    rng: ChaCha8Rng,
}

/// What the grammar permits at the next position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Allowed {
    Forced(u32),
    /// Per-id permission.
    Mask(Vec<bool>),
}

impl DecodeState {
    pub fn new(trace_mode: TraceMode, vocab: UnifiedVocab, seed: u64) -> Self {
        Self {
            mode: DecodeMode::Text,
            trace_mode,
            vocab,
            emitted: Vec::new(),
            images_done: 0,
            planned_subgoals: None,
            max_text_tokens: DEFAULT_MAX_TEXT_TOKENS,
            finished: false,
            text_run: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Images the grammar still requires, counting the one in progress.
    fn images_total(&self) -> usize {
        match self.trace_mode {
            TraceMode::Direct => 1,
            TraceMode::Critique => 2,
            TraceMode::Subgoal => self.planned_subgoals.map_or(usize::MAX, |n| n + 1),
        }
    }

    /// Whether the image being drawn (or about to be) is the final one.
    pub fn at_final_image(&self) -> bool {
        self.images_done + 1 == self.images_total()
    }

    pub fn allowed(&self) -> Allowed {
        let v = &self.vocab;
        if self.finished {
            return Allowed::Forced(EOS);
        }
        match self.mode {
            DecodeMode::Image { remaining: 0 } => Allowed::Forced(v.eoi()),
            DecodeMode::Image { .. } => {
                let mask = (0..v.size() as u32).map(|id| v.is_visual(id)).collect();
                Allowed::Mask(mask)
            }
            DecodeMode::Text => {
                if self.images_done == self.images_total() {
                    return Allowed::Forced(EOS);
                }
                // a text segment is due unless the next segment is an image
                // that follows another image or opens a direct/critique trace
                let text_due = match self.trace_mode {
                    TraceMode::Direct => false,
                    TraceMode::Critique => self.images_done == 1,
                    TraceMode::Subgoal => true,
                };
                if !text_due || self.text_run >= self.max_text_tokens {
                    return Allowed::Forced(v.boi());
                }
                let mut mask: Vec<bool> = (0..v.size() as u32).map(|id| id >= v.text_lo()).collect();
                mask[v.boi() as usize] = self.text_run > 0;
                Allowed::Mask(mask)
            }
        }
    }

    /// Advances the grammar position past `token` (assumed allowed).
    pub fn push(&mut self, token: u32) {
        let v = self.vocab;
        self.emitted.push(token);
        if token == EOS {
            self.finished = true;
        } else if token == v.boi() {
            if self.trace_mode == TraceMode::Subgoal && self.planned_subgoals.is_none() {
                self.planned_subgoals = Some(count_planned(&self.emitted, &v));
            }
            self.mode = DecodeMode::Image {
                remaining: v.block_len,
            };
            self.text_run = 0;
        } else if token == v.eoi() {
            self.mode = DecodeMode::Text;
            self.images_done += 1;
        } else if let DecodeMode::Image { remaining } = &mut self.mode {
            *remaining -= 1;
        } else {
            self.text_run += 1;
        }
    }
}

/// Subgoals announced by a plan: one per "draw", clamped to 1..=4.
fn count_planned(emitted: &[u32], vocab: &UnifiedVocab) -> usize {
    let draw = vocab.text_id(WORDS.iter().position(|w| *w == "draw").expect("draw is a word") as u32);
    emitted.iter().filter(|&&t| t == draw).count().clamp(1, MAX_OBJECTS)
}

/// Samples the next token from `logits` under the grammar mask and advances
/// `state`. Forced positions ignore `logits` and draw nothing from the rng.
pub fn step(state: &mut DecodeState, logits: &Array1<f64>, params: &SamplingParams) -> u32 {
    let token = match state.allowed() {
        Allowed::Forced(t) => t,
        Allowed::Mask(mask) => sample_masked(logits, &mask, params, &mut state.rng),
    };
    state.push(token);
    token
}

fn sample_masked(logits: &Array1<f64>, mask: &[bool], params: &SamplingParams, rng: &mut ChaCha8Rng) -> u32 {
    let mut cand: Vec<(usize, f64)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &ok)| ok)
        .map(|(i, _)| (i, logits[i]))
        .collect();
    debug_assert!(!cand.is_empty());
    if params.temperature <= 0.0 {
        let best = cand
            .iter()
            .fold(cand[0], |b, &c| if c.1 > b.1 { c } else { b });
        return best.0 as u32;
    }
    if params.top_k > 0 && params.top_k < cand.len() {
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cand.truncate(params.top_k);
        cand.sort_by_key(|c| c.0);
    }
    let max = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = cand
        .iter()
        .map(|c| ((c.1 - max) / params.temperature).exp())
        .collect();
    let mut total: f64 = weights.iter().sum();
    if params.min_prob > 0.0 {
        let floor = params.min_prob * total;
        for w in weights.iter_mut().filter(|w| **w < floor && **w < 1.0) {
            *w = 0.0;
        }
        total = weights.iter().sum();
    }
    let mut u = rng.random::<f64>() * total;
    for (c, w) in cand.iter().zip(&weights) {
        if u < *w {
            return c.0 as u32;
        }
        u -= w;
    }
    cand.last().expect("non-empty").0 as u32
}

/// Per-phase guidance, following the trace grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub subgoal_images: CfgScales,
    pub subgoal_final: CfgScales,
    pub critique: CfgScales,
    pub direct: CfgScales,
    /// Also guide text positions (otherwise they use plain conditional logits).
    pub guide_text: bool,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        Self {
            subgoal_images: CfgScales::SUBGOAL_IMAGES,
            subgoal_final: CfgScales::SUBGOAL_FINAL,
            critique: CfgScales::CRITIQUE,
            direct: CfgScales::CONDITIONAL,
            guide_text: true,
        }
    }
}

impl ScaleSchedule {
    pub fn conditional() -> Self {
        Self::uniform(CfgScales::CONDITIONAL)
    }

    pub fn uniform(s: CfgScales) -> Self {
        Self {
            subgoal_images: s,
            subgoal_final: s,
            critique: s,
            direct: s,
            guide_text: true,
        }
    }

    /// Named phase and scales for the next position of `state`.
    pub fn phase(&self, state: &DecodeState) -> (&'static str, CfgScales) {
        let in_text = state.mode == DecodeMode::Text;
        let (name, s) = match state.trace_mode {
            TraceMode::Direct => ("direct", self.direct),
            TraceMode::Critique => ("critique", self.critique),
            TraceMode::Subgoal if !in_text && state.at_final_image() => ("subgoal-final", self.subgoal_final),
            TraceMode::Subgoal => ("subgoal-images", self.subgoal_images),
        };
        if in_text && !self.guide_text {
            ("conditional", CfgScales::CONDITIONAL)
        } else {
            (name, s)
        }
    }
}

/// Scales in force when a segment started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScales {
    pub segment: usize,
    pub image: bool,
    pub phase: String,
    pub scales: CfgScales,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub mode: TraceMode,
    pub schedule: ScaleSchedule,
    pub params: SamplingParams,
    pub negative_text: String,
    /// Response-token cap; `None` means 8·(T+2) + 128.
    pub max_new_tokens: Option<usize>,
    pub max_text_tokens: usize,
}

impl GenerateOptions {
    pub fn new(mode: TraceMode, schedule: ScaleSchedule, params: SamplingParams) -> Self {
        Self {
            mode,
            schedule,
            params,
            negative_text: crate::datagen::NEGATIVE_TEXT.into(),
            max_new_tokens: None,
            max_text_tokens: DEFAULT_MAX_TEXT_TOKENS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// Full id sequence including BOS, prompt and SEP.
    pub ids: Vec<u32>,
    pub trace: Option<ThoughtTrace>,
    pub partial: Option<PartialTrace>,
    pub diagnostic: Option<String>,
    pub scales_log: Vec<SegmentScales>,
}

/// One KV cache per condition.
struct Caches {
    full: KvCache,
    image: KvCache,
    negative: KvCache,
    prompt: KvCache,
    uncond: KvCache,
}

pub fn generate_trace(
    model: &Model,
    vocab: &UnifiedVocab,
    prompt: &str,
    opts: &GenerateOptions,
) -> Result<Generation, SamplerError> {
    let prompt_ids = tokenize_text(prompt, vocab)?;
    let negative_ids = tokenize_text(&opts.negative_text, vocab)?;
    let mut state = DecodeState::new(opts.mode, *vocab, opts.params.seed);
    state.max_text_tokens = opts.max_text_tokens.max(1);
    let cap = opts
        .max_new_tokens
        .unwrap_or(8 * (vocab.block_len + 2) + 128)
        .min(model.config.context_length.saturating_sub(prompt_ids.len() + 2));
    let mut caches = Caches {
        full: model.new_cache(),
        image: model.new_cache(),
        negative: model.new_cache(),
        prompt: model.new_cache(),
        uncond: model.new_cache(),
    };
    let mut scales_log = Vec::new();
    let mut diagnostic = None;
    while !state.finished {
        if state.emitted.len() >= cap {
            diagnostic = Some(format!("length cap of {cap} response tokens reached"));
            break;
        }
        let token = match state.allowed() {
            Allowed::Forced(t) => {
                state.push(t);
                t
            }
            Allowed::Mask(_) => {
                let (_, scales) = opts.schedule.phase(&state);
                let ctx = build_condition_contexts(&prompt_ids, &state.emitted, &negative_ids, vocab);
                let logits = condition_logits(model, &mut caches, &ctx, &scales)?;
                let combined = cfg_combine(&logits, &scales)?;
                step(&mut state, &combined, &opts.params)
            }
        };
        let opens_text = token >= vocab.text_lo() && state.text_run == 1;
        if token == vocab.boi() || opens_text {
            let (phase, scales) = opts.schedule.phase(&state);
            scales_log.push(SegmentScales {
                segment: scales_log.len(),
                image: token == vocab.boi(),
                phase: phase.into(),
                scales,
            });
        }
    }
    let mut ids = Vec::with_capacity(prompt_ids.len() + state.emitted.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(&prompt_ids);
    ids.push(SEP);
    ids.extend_from_slice(&state.emitted);
    let (trace, partial) = if state.finished {
        match parse_sequence(&ids, vocab) {
            Ok(t) => (Some(t), None),
            Err(e) => {
                diagnostic = Some(format!("decoded sequence failed to parse: {e}"));
                (None, parse_prefix(&ids, vocab).ok())
            }
        }
    } else {
        let p = parse_prefix(&ids, vocab).ok();
        if p.as_ref().is_some_and(|p| !p.payloads.iter().any(|x| matches!(x, crate::sequence::Payload::Image(_)))) {
            diagnostic = diagnostic.map(|d| d + " before any image");
        }
        (None, p)
    };
    Ok(Generation {
        ids,
        trace,
        partial,
        diagnostic,
        scales_log,
    })
}

/// Runs only the conditions whose weight is non-zero.
fn condition_logits(
    model: &Model,
    caches: &mut Caches,
    ctx: &ConditionContexts,
    s: &CfgScales,
) -> Result<ConditionLogits, SamplerError> {
    let run = |w: f64, cache: &mut KvCache, c: &[u32]| -> Result<Option<Array1<f64>>, SamplerError> {
        Ok(if w != 0.0 { Some(model.logits_for(cache, c)?) } else { None })
    };
    Ok(ConditionLogits {
        full: run(s.full, &mut caches.full, &ctx.full)?,
        image: run(s.image, &mut caches.image, &ctx.image)?,
        negative: run(s.negative, &mut caches.negative, &ctx.negative)?,
        prompt: run(s.prompt, &mut caches.prompt, &ctx.prompt)?,
        uncond: run(s.uncond_weight(), &mut caches.uncond, &ctx.uncond)?,
    })
}
