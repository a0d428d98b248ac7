//! Synthetic SFT pipeline: prompt brainstorming with dedup, subgoal
//! decomposition, corrupted first-round hypotheses with oracle critiques,
//! trace assembly and quality filtering.
//!
//! Every generator is a deterministic function of a seed. Per-prompt
//! randomness comes from a ChaCha stream keyed by the prompt index, so output
//! order never depends on scheduling.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_tokens, encode_image, CodecError, VisualTokenBlock};
use crate::sequence::{write_traces, Segment, SegmentKind, SeqError, ThoughtTrace, TraceMode};
use crate::toyworld::{
    describe_scene, detect_objects, render_scene, score_geneval, Color, DescribeStyle,
    DetectedObject, GenevalCategory, ObjectSpec, Relation, SceneError, SceneSampler, SceneSpec,
    Shape, MAX_OBJECTS, PALETTE_SIZE,
};

pub const GENERATOR_VERSION: &str = "mmcot-datagen/1";
pub const MAX_CORRUPTION_ATTEMPTS: usize = 8;
/// Closed-vocabulary stand-in for "blurry, wrong color, missing object".
pub const NEGATIVE_TEXT: &str = "blurry wrong color missing object";
pub const CLEAN_CRITIQUE: &str = "the image matches the prompt";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("no valid corruption after {attempts} attempts")]
    Corruption { attempts: usize },
    #[error("invalid corruption model: {0}")]
    BadCorruptionModel(String),
    #[error("scene: {0}")]
    Scene(#[from] SceneError),
    #[error("sequence: {0}")]
    Sequence(#[from] SeqError),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error("unparseable critique: {0}")]
    Critique(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// ChaCha stream `stream` of `seed`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flaw {
    DropObject,
    WrongColor,
    WrongShape,
    WrongPosition,
    ExtraObject,
}

impl Flaw {
    pub const ALL: [Flaw; 5] = [
        Flaw::DropObject,
        Flaw::WrongColor,
        Flaw::WrongShape,
        Flaw::WrongPosition,
        Flaw::ExtraObject,
    ];

    fn applies_to(self, spec: &SceneSpec) -> bool {
        match self {
            Flaw::DropObject => spec.objects.len() >= 2,
            Flaw::ExtraObject => spec.objects.len() < MAX_OBJECTS,
            Flaw::WrongPosition => !spec.relations.is_empty(),
            Flaw::WrongColor | Flaw::WrongShape => true,
        }
    }
}

/// Simulated weak first-round generator.
///
/// With probability `clean_rate` the hypothesis is the target itself;
/// otherwise one flaw is drawn from `flaw_probs` (indexed like [`Flaw::ALL`]),
/// renormalised over the flaws applicable to the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionModel {
    pub flaw_probs: [f64; 5],
    pub clean_rate: f64,
    pub seed: u64,
}

impl Default for CorruptionModel {
    fn default() -> Self {
        Self {
            flaw_probs: [0.2; 5],
            clean_rate: 0.25,
            seed: 0,
        }
    }
}

impl CorruptionModel {
    pub fn only(flaw: Flaw, seed: u64) -> Self {
        let mut flaw_probs = [0.0; 5];
        flaw_probs[Flaw::ALL.iter().position(|f| *f == flaw).unwrap()] = 1.0;
        Self {
            flaw_probs,
            clean_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::BadCorruptionModel(m.into()));
        if self.flaw_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad("negative or non-finite flaw probability");
        }
        let sum: f64 = self.flaw_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(&format!("flaw probabilities sum to {sum}"));
        }
        if !(0.0..1.0).contains(&self.clean_rate) {
            return bad("clean_rate must lie in [0, 1)");
        }
        Ok(())
    }

    /// Draws a flaw among those applicable to `spec`.
    pub fn draw_flaw<R: Rng + ?Sized>(&self, spec: &SceneSpec, rng: &mut R) -> Option<Flaw> {
        let weights: Vec<(Flaw, f64)> = Flaw::ALL
            .into_iter()
            .zip(self.flaw_probs)
            .filter(|(f, p)| *p > 0.0 && f.applies_to(spec))
            .collect();
        let total: f64 = weights.iter().map(|w| w.1).sum();
        if total <= 0.0 {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        for (f, p) in &weights {
            if u < *p {
                return Some(*f);
            }
            u -= p;
        }
        weights.last().map(|w| w.0)
    }

    /// Applies `flaw` to a copy of `spec`; `None` when this attempt found no
    /// valid scene. Placements are chosen uniformly among the valid ones.
    pub fn apply<R: Rng + ?Sized>(&self, spec: &SceneSpec, flaw: Flaw, rng: &mut R) -> Option<SceneSpec> {
        let mut objects = spec.objects.clone();
        let n = objects.len();
        let g = spec.canvas_size;
        let mut relations = spec.relations.clone();
        match flaw {
            Flaw::DropObject => {
                let i = rng.random_range(0..n);
                objects.remove(i);
                relations.retain(|r| r.subject != i && r.object != i);
                for r in &mut relations {
                    r.subject -= (r.subject > i) as usize;
                    r.object -= (r.object > i) as usize;
                }
            }
            Flaw::WrongColor => {
                let i = rng.random_range(0..n);
                let others: Vec<Color> = Color::ALL.into_iter().filter(|c| *c != objects[i].color).collect();
                objects[i].color = others[rng.random_range(0..others.len())];
            }
            Flaw::WrongShape => {
                let fits: Vec<(usize, Shape)> = (0..n)
                    .flat_map(|i| Shape::ALL.into_iter().map(move |s| (i, s)))
                    .filter(|&(i, s)| s != objects[i].shape)
                    .filter(|&(i, s)| fits_among(&objects, i, &ObjectSpec { shape: s, ..objects[i] }, g))
                    .collect();
                if fits.is_empty() {
                    return None;
                }
                let (i, shape) = fits[rng.random_range(0..fits.len())];
                objects[i].shape = shape;
            }
            Flaw::WrongPosition => {
                let rel = relations[rng.random_range(0..relations.len())];
                let i = rel.subject;
                let ob = objects[rel.object].bbox()?;
                let spots: Vec<ObjectSpec> = anchors(&objects[i], g)
                    .filter(|c| fits_among(&objects, i, c, g))
                    .filter(|c| c.bbox().is_some_and(|b| !rel.relation.holds(b, ob)))
                    .collect();
                if spots.is_empty() {
                    return None;
                }
                objects[i] = spots[rng.random_range(0..spots.len())];
                relations.clear();
            }
            Flaw::ExtraObject => {
                let spots: Vec<ObjectSpec> = Shape::ALL
                    .into_iter()
                    .flat_map(|shape| Color::ALL.into_iter().map(move |color| (shape, color)))
                    .flat_map(|(shape, color)| [1u8, 2].map(|e| ObjectSpec::new(shape, color, 0, 0, e)))
                    .flat_map(|proto| anchors(&proto, g).collect::<Vec<_>>())
                    .filter(|c| fits_among(&objects, usize::MAX, c, g))
                    .collect();
                if spots.is_empty() {
                    return None;
                }
                objects.push(spots[rng.random_range(0..spots.len())]);
            }
        }
        // the hypothesis is a picture, not a prompt: relations only constrain validity
        let relations = relations
            .into_iter()
            .filter(|r| {
                matches!((objects[r.subject].bbox(), objects[r.object].bbox()),
                    (Some(a), Some(b)) if r.relation.holds(a, b))
            })
            .collect();
        SceneSpec::new(spec.canvas_size, objects, relations).ok()
    }

    /// Corrupted copy of `spec`. Each attempt draws a fresh flaw; after
    /// [`MAX_CORRUPTION_ATTEMPTS`] invalid results this is a hard error.
    pub fn corrupt<R: Rng + ?Sized>(&self, spec: &SceneSpec, rng: &mut R) -> Result<(SceneSpec, Option<Flaw>), DatagenError> {
        self.validate()?;
        if rng.random::<f64>() < self.clean_rate {
            return Ok((spec.clone(), None));
        }
        for _ in 0..MAX_CORRUPTION_ATTEMPTS {
            let Some(flaw) = self.draw_flaw(spec, rng) else { break };
            if let Some(s) = self.apply(spec, flaw, rng) {
                return Ok((s, Some(flaw)));
            }
        }
        Err(DatagenError::Corruption {
            attempts: MAX_CORRUPTION_ATTEMPTS,
        })
    }
}

/// Every in-bounds placement of `o`'s stencil.
fn anchors(o: &ObjectSpec, g: usize) -> impl Iterator<Item = ObjectSpec> + '_ {
    let (h, w) = o.stencil().map_or((g + 1, g + 1), |s| (s.height(), s.width()));
    let (rows, cols) = ((g + 1).saturating_sub(h), (g + 1).saturating_sub(w));
    (0..rows * cols).map(move |k| ObjectSpec {
        anchor_cell: (k / cols, k % cols),
        ..*o
    })
}

/// Whether `cand` stays in bounds and clear of every object except `skip`.
fn fits_among(objects: &[ObjectSpec], skip: usize, cand: &ObjectSpec, g: usize) -> bool {
    let Some(bb) = cand.bbox() else { return false };
    bb.row_max() < g
        && bb.col_max() < g
        && objects
            .iter()
            .enumerate()
            .all(|(j, o)| j == skip || o.bbox().is_some_and(|ob| !ob.touches(&bb)))
}

/// Which prompts the brainstormer emits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityProfile {
    pub sampler: SceneSampler,
    pub style: DescribeStyle,
}

impl ComplexityProfile {
    pub fn mixed() -> Self {
        Self {
            sampler: SceneSampler::default(),
            style: DescribeStyle::Relational,
        }
    }

    pub fn objects(min: usize, max: usize) -> Self {
        Self {
            sampler: SceneSampler::default().with_objects(min, max),
            style: DescribeStyle::Relational,
        }
    }

    pub fn two_object() -> Self {
        Self::objects(2, 2)
    }

    /// Parses the CLI names `mixed`, `two-object` and `N-M` (object range).
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "mixed" => Some(Self::mixed()),
            "two-object" => Some(Self::two_object()),
            _ => {
                let (a, b) = name.split_once('-')?;
                let (a, b) = (a.parse().ok()?, b.parse().ok()?);
                (1 <= a && a <= b && b <= MAX_OBJECTS).then(|| Self::objects(a, b))
            }
        }
    }
}

/// One generated prompt and its ground-truth scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    pub scene: SceneSpec,
}

pub fn brainstorm_prompts(n: usize, seed: u64, profile: &ComplexityProfile) -> Vec<PromptRecord> {
    brainstorm_excluding(n, seed, profile, &HashSet::new())
}

/// Like [`brainstorm_prompts`] but also rejects any prompt in `exclude`
/// (held-out suites). Gives up after `1000·n` draws and returns what it has.
pub fn brainstorm_excluding(
    n: usize,
    seed: u64,
    profile: &ComplexityProfile,
    exclude: &HashSet<String>,
) -> Vec<PromptRecord> {
    let mut rng = derive_rng(seed, 0);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut draws = 0usize;
    while out.len() < n && draws < n.saturating_mul(1000) {
        draws += 1;
        let scene = profile.sampler.sample(&mut rng);
        let prompt = describe_scene(&scene, profile.style).expect("sampled scenes are valid");
        if exclude.contains(&prompt) || !seen.insert(prompt.clone()) {
            continue;
        }
        out.push(PromptRecord { prompt, scene });
    }
    out
}

/// Held-out evaluation prompts: 1–2 object scenes drawn until every category
/// a 1–2 object scene can exercise has at least `min_per_category` prompts.
/// Single Obj. is capped at the 32 distinct one-object prompts that exist.
pub fn balanced_suite(
    n: usize,
    seed: u64,
    min_per_category: usize,
    exclude: &HashSet<String>,
) -> Vec<PromptRecord> {
    let profile = ComplexityProfile::objects(1, 2);
    let mut rng = derive_rng(seed, 1);
    let mut seen = HashSet::new();
    let mut counts: BTreeMap<GenevalCategory, usize> = BTreeMap::new();
    let quota = |c: GenevalCategory| match c {
        GenevalCategory::Colors => 0,
        GenevalCategory::SingleObj => min_per_category.min(Shape::ALL.len() * Color::ALL.len()),
        _ => min_per_category,
    };
    let mut out = Vec::with_capacity(n);
    let mut draws = 0usize;
    while out.len() < n && draws < n.saturating_mul(10_000) {
        draws += 1;
        let scene = profile.sampler.sample(&mut rng);
        let prompt = describe_scene(&scene, profile.style).expect("sampled scenes are valid");
        if exclude.contains(&prompt) || seen.contains(&prompt) {
            continue;
        }
        let have = |c: GenevalCategory| counts.get(&c).copied().unwrap_or(0);
        let cats = GenevalCategory::applicable(&scene);
        let total_deficit: usize = GenevalCategory::ALL
            .into_iter()
            .map(|c| quota(c).saturating_sub(have(c)))
            .sum();
        let helps = cats.iter().any(|&c| have(c) < quota(c));
        if !helps && n - out.len() <= total_deficit {
            continue;
        }
        seen.insert(prompt.clone());
        for c in cats {
            *counts.entry(c).or_default() += 1;
        }
        out.push(PromptRecord { prompt, scene });
    }
    out
}

/// Prompts training sets must avoid. One-object prompts are exempt: there
/// are only 32 of them and stage 1 needs every one.
pub fn held_out_prompts(suite: &[PromptRecord]) -> HashSet<String> {
    suite
        .iter()
        .filter(|r| r.scene.objects.len() >= 2)
        .map(|r| r.prompt.clone())
        .collect()
}

/// One single-object scene per object, in object order.
pub fn decompose_subgoals(spec: &SceneSpec) -> Vec<SceneSpec> {
    spec.objects
        .iter()
        .map(|o| SceneSpec::new(spec.canvas_size, vec![*o], vec![]).expect("sub-scene of a valid scene"))
        .collect()
}

fn object_phrase(o: &ObjectSpec) -> String {
    format!("{} {}", o.color.word(), o.shape.word())
}

pub fn planning_text(spec: &SceneSpec) -> String {
    let mut parts: Vec<String> = spec
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{} draw a {}", if i == 0 { "first" } else { "then" }, object_phrase(o)))
        .collect();
    parts.push("then combine all".into());
    parts.join(" ")
}

pub fn reflection_text(spec: &SceneSpec, done: usize) -> String {
    let o = &spec.objects[done];
    match spec.objects.get(done + 1) {
        Some(next) => format!("the {} is done next draw the {}", object_phrase(o), object_phrase(next)),
        None => format!("the {} is done now combine all", object_phrase(o)),
    }
}

pub fn encode_scene(spec: &SceneSpec) -> Result<VisualTokenBlock, DatagenError> {
    Ok(encode_image(&render_scene(spec)?, PALETTE_SIZE)?)
}

pub fn make_subgoal_trace(spec: &SceneSpec) -> Result<ThoughtTrace, DatagenError> {
    let prompt = describe_scene(spec, DescribeStyle::Relational)?;
    let mut segments = vec![Segment::text(SegmentKind::TextPlanning, planning_text(spec))];
    for (i, sub) in decompose_subgoals(spec).iter().enumerate() {
        segments.push(Segment::image(SegmentKind::VisualSubgoal, encode_scene(sub)?));
        segments.push(Segment::text(SegmentKind::Reflection, reflection_text(spec, i)));
    }
    segments.push(Segment::image(SegmentKind::FinalImage, encode_scene(spec)?));
    let trace = ThoughtTrace {
        prompt,
        mode: TraceMode::Subgoal,
        segments,
    };
    trace.validate()?;
    Ok(trace)
}

pub fn make_direct_trace(spec: &SceneSpec) -> Result<ThoughtTrace, DatagenError> {
    let prompt = describe_scene(spec, DescribeStyle::Relational)?;
    Ok(ThoughtTrace::direct(prompt, encode_scene(spec)?))
}

/// One difference between a target scene and what an image shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Discrepancy {
    Missing { shape: Shape, color: Color },
    Extra { shape: Shape, color: Color },
    WrongColor { shape: Shape, want: Color, got: Color },
    WrongShape { color: Color, want: Shape, got: Shape },
    WrongPosition {
        subject: (Shape, Color),
        relation: Relation,
        object: (Shape, Color),
    },
}

impl Discrepancy {
    pub fn clause(&self) -> String {
        match *self {
            Discrepancy::Missing { shape, color } => format!("add the missing {} {}", color.word(), shape.word()),
            Discrepancy::Extra { shape, color } => format!("remove the extra {} {}", color.word(), shape.word()),
            Discrepancy::WrongColor { shape, want, got } => {
                format!("the {} should be {} not {}", shape.word(), want.word(), got.word())
            }
            Discrepancy::WrongShape { color, want, got } => {
                format!("the {} {} should be a {}", color.word(), got.word(), want.word())
            }
            Discrepancy::WrongPosition {
                subject,
                relation,
                object,
            } => format!(
                "the {} {} should be {} the {} {}",
                subject.1.word(),
                subject.0.word(),
                relation.phrase(),
                object.1.word(),
                object.0.word()
            ),
        }
    }
}

/// Oracle diff between the target and the objects detected in an image.
///
/// Matching is greedy and deterministic: exact (shape, color) pairs first,
/// then same shape (wrong color), then same color (wrong shape); leftovers
/// are missing or extra. Declared relations are checked whenever both of
/// their objects were found.
pub fn scene_diff(target: &SceneSpec, detected: &[DetectedObject]) -> Vec<Discrepancy> {
    let mut want: Vec<Option<(Shape, Color)>> = target.objects.iter().map(|o| Some(o.key())).collect();
    let mut have: Vec<Option<(Shape, Color)>> = detected.iter().map(|o| Some(o.key())).collect();
    for w in want.iter_mut() {
        if let Some(h) = have.iter_mut().find(|h| h.is_some() && *h == w) {
            *h = None;
            *w = None;
        }
    }
    let mut out = Vec::new();
    for w in want.iter_mut() {
        let Some((shape, color)) = *w else { continue };
        if let Some(h) = have.iter_mut().find(|h| matches!(h, Some((s, _)) if *s == shape)) {
            let got = h.take().unwrap().1;
            *w = None;
            out.push(Discrepancy::WrongColor { shape, want: color, got });
        }
    }
    for w in want.iter_mut() {
        let Some((shape, color)) = *w else { continue };
        if let Some(h) = have.iter_mut().find(|h| matches!(h, Some((_, c)) if *c == color)) {
            let got = h.take().unwrap().0;
            *w = None;
            out.push(Discrepancy::WrongShape { color, want: shape, got });
        }
    }
    for (shape, color) in want.into_iter().flatten() {
        out.push(Discrepancy::Missing { shape, color });
    }
    for (shape, color) in have.into_iter().flatten() {
        out.push(Discrepancy::Extra { shape, color });
    }
    for rel in &target.relations {
        let s = target.objects[rel.subject].key();
        let o = target.objects[rel.object].key();
        let subjects: Vec<_> = detected.iter().enumerate().filter(|(_, d)| d.key() == s).collect();
        let objects: Vec<_> = detected.iter().enumerate().filter(|(_, d)| d.key() == o).collect();
        if subjects.is_empty() || objects.is_empty() {
            continue;
        }
        let holds = subjects.iter().any(|(i, a)| {
            objects
                .iter()
                .any(|(j, b)| i != j && rel.relation.holds(a.bbox(), b.bbox()))
        });
        if !holds {
            out.push(Discrepancy::WrongPosition {
                subject: s,
                relation: rel.relation,
                object: o,
            });
        }
    }
    out
}

pub fn critique_text(diff: &[Discrepancy]) -> String {
    if diff.is_empty() {
        return CLEAN_CRITIQUE.into();
    }
    diff.iter().map(Discrepancy::clause).collect::<Vec<_>>().join(" and ")
}

/// Inverse of [`critique_text`].
pub fn parse_critique(text: &str) -> Result<Vec<Discrepancy>, DatagenError> {
    if text == CLEAN_CRITIQUE {
        return Ok(vec![]);
    }
    let err = || DatagenError::Critique(text.to_string());
    let shape = |w: &str| Shape::from_word(w).ok_or_else(err);
    let color = |w: &str| Color::from_word(w).ok_or_else(err);
    text.split(" and ")
        .map(|clause| {
            let w: Vec<&str> = clause.split(' ').collect();
            match w.as_slice() {
                ["add", "the", "missing", c, s] => Ok(Discrepancy::Missing { shape: shape(s)?, color: color(c)? }),
                ["remove", "the", "extra", c, s] => Ok(Discrepancy::Extra { shape: shape(s)?, color: color(c)? }),
                ["the", s, "should", "be", want, "not", got] => Ok(Discrepancy::WrongColor {
                    shape: shape(s)?,
                    want: color(want)?,
                    got: color(got)?,
                }),
                ["the", c, got, "should", "be", "a", want] => Ok(Discrepancy::WrongShape {
                    color: color(c)?,
                    want: shape(want)?,
                    got: shape(got)?,
                }),
                ["the", sc, ss, "should", "be", rest @ .., "the", oc, os] => {
                    let phrase = rest.join(" ");
                    let relation = Relation::ALL
                        .into_iter()
                        .find(|r| r.phrase() == phrase)
                        .ok_or_else(err)?;
                    Ok(Discrepancy::WrongPosition {
                        subject: (shape(ss)?, color(sc)?),
                        relation,
                        object: (shape(os)?, color(oc)?),
                    })
                }
                _ => Err(err()),
            }
        })
        .collect()
}

/// Builds a critique trace; `rng` drives the corruption.
pub fn make_critique_trace<R: Rng + ?Sized>(
    spec: &SceneSpec,
    corruption: &CorruptionModel,
    rng: &mut R,
) -> Result<ThoughtTrace, DatagenError> {
    let prompt = describe_scene(spec, DescribeStyle::Relational)?;
    let (hypo, _) = corruption.corrupt(spec, rng)?;
    let hypo_grid = render_scene(&hypo)?;
    let diff = scene_diff(spec, &detect_objects(&hypo_grid).objects);
    let trace = ThoughtTrace {
        prompt,
        mode: TraceMode::Critique,
        segments: vec![
            Segment::image(SegmentKind::InitialHypothesis, encode_image(&hypo_grid, PALETTE_SIZE)?),
            Segment::text(SegmentKind::Critique, critique_text(&diff)),
            Segment::image(SegmentKind::FinalImage, encode_scene(spec)?),
        ],
    };
    trace.validate()?;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum FilterVerdict {
    Keep,
    Drop(String),
}

/// Keeps a trace only if its final image satisfies every category that
/// applies to `spec`.
pub fn quality_filter(trace: &ThoughtTrace, spec: &SceneSpec) -> Result<FilterVerdict, DatagenError> {
    trace.validate()?;
    let block = trace
        .final_image()
        .ok_or_else(|| DatagenError::Malformed("no final image".into()))?;
    let decoded = decode_tokens(block, spec.canvas_size)?;
    if decoded.lossy {
        return Ok(FilterVerdict::Drop("final image has non-palette tokens".into()));
    }
    let found = detect_objects(&decoded.image);
    for cat in GenevalCategory::applicable(spec) {
        if score_geneval(&found, spec, cat)? == 0 {
            return Ok(FilterVerdict::Drop("final mismatches spec".into()));
        }
    }
    Ok(FilterVerdict::Keep)
}

/// Captioned single-image pairs for stage 1.
pub fn build_stage1_pairs(n: usize, seed: u64) -> Vec<(PromptRecord, ThoughtTrace)> {
    build_stage1_with(n, seed, &ComplexityProfile::mixed(), &HashSet::new())
}

pub fn build_stage1_with(
    n: usize,
    seed: u64,
    profile: &ComplexityProfile,
    exclude: &HashSet<String>,
) -> Vec<(PromptRecord, ThoughtTrace)> {
    brainstorm_excluding(n, seed, profile, exclude)
        .into_iter()
        .map(|rec| {
            let t = make_direct_trace(&rec.scene).expect("valid scene");
            (rec, t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Stage1,
    Subgoal,
    Critique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub mode: DataMode,
    pub n: usize,
    pub seed: u64,
    pub profile: ComplexityProfile,
    #[serde(default)]
    pub corruption: CorruptionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub mode: DataMode,
    pub seed: u64,
    pub requested: usize,
    pub generated: usize,
    pub kept: usize,
    pub pass_rate: f64,
    pub counts: BTreeMap<String, usize>,
    pub drop_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub traces: Vec<ThoughtTrace>,
    pub scenes: Vec<SceneSpec>,
    pub manifest: DatasetManifest,
}

/// Runs the whole pipeline; `exclude` holds prompts reserved for evaluation.
pub fn generate_dataset(cfg: &GenConfig, exclude: &HashSet<String>) -> Result<Dataset, DatagenError> {
    let prompts = brainstorm_excluding(cfg.n, cfg.seed, &cfg.profile, exclude);
    let mut traces = Vec::new();
    let mut scenes = Vec::new();
    let mut drop_reasons = BTreeMap::new();
    for (i, rec) in prompts.iter().enumerate() {
        let trace = match cfg.mode {
            DataMode::Stage1 => make_direct_trace(&rec.scene)?,
            DataMode::Subgoal => make_subgoal_trace(&rec.scene)?,
            DataMode::Critique => {
                let mut rng = derive_rng(cfg.seed ^ cfg.corruption.seed, 1 + i as u64);
                make_critique_trace(&rec.scene, &cfg.corruption, &mut rng)?
            }
        };
        match quality_filter(&trace, &rec.scene)? {
            FilterVerdict::Keep => {
                traces.push(trace);
                scenes.push(rec.scene.clone());
            }
            FilterVerdict::Drop(r) => *drop_reasons.entry(r).or_insert(0) += 1,
        }
    }
    let mut counts = BTreeMap::new();
    for t in &traces {
        *counts.entry(t.mode.to_string()).or_insert(0) += 1;
    }
    let generated = prompts.len();
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.into(),
        mode: cfg.mode,
        seed: cfg.seed,
        requested: cfg.n,
        generated,
        kept: traces.len(),
        pass_rate: if generated == 0 { 0.0 } else { traces.len() as f64 / generated as f64 },
        counts,
        drop_reasons,
    };
    Ok(Dataset {
        traces,
        scenes,
        manifest,
    })
}

pub fn write_scenes<W: Write>(mut w: W, scenes: &[SceneSpec]) -> std::io::Result<()> {
    for s in scenes {
        w.write_all(s.to_json_line().as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_scenes(path: &Path) -> Result<Vec<SceneSpec>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let s: SceneSpec = serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1))?;
            s.validate().map_err(|e| format!("line {}: {e}", i + 1))?;
            Ok(s)
        })
        .collect()
}

/// Writes `traces.jsonl`, `scenes.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DatagenError> {
    std::fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("traces.jsonl"))?);
    write_traces(&mut w, &ds.traces)?;
    w.flush()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("scenes.jsonl"))?);
    write_scenes(&mut w, &ds.scenes)?;
    w.flush()?;
    let mut manifest = serde_json::to_string_pretty(&ds.manifest).expect("plain data");
    manifest.push('\n');
    std::fs::write(dir.join("manifest.json"), manifest)?;
    Ok(())
}
