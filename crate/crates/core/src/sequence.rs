//! Unified token vocabulary, interleaved sequences and thought-trace schemas.
//!
//! Layout of the id space (K = visual codebook size, W = text word count):
//!
//! ```text
//! 0 PAD | 1 BOS | 2 EOS | 3 SEP | 4 .. 4+K visual | 4+K EOI | 5+K BOI | 6+K .. 6+K+W text
//! ```
//!
//! A trace is serialized as `BOS prompt SEP segment* EOS`, where text segments
//! are plain word ids and image segments are `BOI block EOI`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{VisualTokenBlock, MAX_CODEBOOK_ENTRIES};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const VIS_LO: u32 = 4;

/// Closed word list shared by prompts, plans, reflections and critiques.
pub const WORDS: &[&str] = &[
    // counts and articles
    "a", "two", "three", "four", "the",
    // colors
    "red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink",
    // shapes
    "circle", "square", "triangle", "cross",
    "circles", "squares", "triangles", "crosses",
    // relations
    "to", "left", "right", "of", "above", "below", "and",
    // planning and reflection
    "first", "draw", "then", "combine", "all", "is", "done", "next", "now",
    // critique
    "add", "missing", "remove", "extra", "should", "be", "not", "image", "matches", "prompt",
    // negative prompt
    "blurry", "wrong", "color", "object",
];

fn word_index() -> &'static HashMap<&'static str, u32> {
    static INDEX: OnceLock<HashMap<&'static str, u32>> = OnceLock::new();
    INDEX.get_or_init(|| {
        WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| (*w, i as u32))
            .collect()
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SeqError {
    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),
    #[error("token id {0} outside vocabulary")]
    IdOutOfRange(u32),
    #[error("id {0} is not a text token")]
    NotText(u32),
    #[error("grammar violation: {0}")]
    Grammar(String),
    #[error("image block has {got} tokens, expected {expected}")]
    BlockLength { got: usize, expected: usize },
    #[error("visual token {token} outside codebook of size {k}")]
    VisualRange { token: u16, k: usize },
    #[error("invalid vocabulary layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    MissingBos,
    MissingSep,
    MissingEos,
    DanglingBoi,
    BlockLength,
    VisualOutsideImage,
    StrayDelimiter,
    UnexpectedSpecial,
    TrailingTokens,
    NoGrammarMatch,
    IdOutOfRange,
}

impl ParseErrorKind {
    fn describe(self) -> &'static str {
        match self {
            ParseErrorKind::MissingBos => "missing BOS",
            ParseErrorKind::MissingSep => "missing SEP after prompt",
            ParseErrorKind::MissingEos => "missing EOS",
            ParseErrorKind::DanglingBoi => "dangling BOI",
            ParseErrorKind::BlockLength => "wrong block length",
            ParseErrorKind::VisualOutsideImage => "visual token outside image span",
            ParseErrorKind::StrayDelimiter => "EOI without matching BOI",
            ParseErrorKind::UnexpectedSpecial => "unexpected special token",
            ParseErrorKind::TrailingTokens => "tokens after EOS",
            ParseErrorKind::NoGrammarMatch => "no grammar match",
            ParseErrorKind::IdOutOfRange => "id outside vocabulary",
        }
    }
}

/// Structured parse failure naming the first violating position.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{} at position {position}", kind.describe())]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

impl ParseError {
    fn at(position: usize, kind: ParseErrorKind) -> Self {
        Self { position, kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Pad,
    Bos,
    Eos,
    Sep,
    Boi,
    Eoi,
    /// Codebook index.
    Visual(u16),
    /// Word-list index.
    Text(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    pub num_visual: usize,
    pub num_text: usize,
    /// Visual tokens per image (G×G).
    pub block_len: usize,
}

impl UnifiedVocab {
    pub fn new(num_visual: usize, num_text: usize, block_len: usize) -> Result<Self, SeqError> {
        if num_visual == 0 || block_len == 0 {
            return Err(SeqError::Layout(format!(
                "K={num_visual} T={block_len}"
            )));
        }
        Ok(Self {
            num_visual,
            num_text,
            block_len,
        })
    }

    /// Palette codebook plus the full word list.
    pub fn standard(num_visual: usize, canvas_size: usize) -> Self {
        Self {
            num_visual,
            num_text: WORDS.len(),
            block_len: canvas_size * canvas_size,
        }
    }

    pub fn vis_lo(&self) -> u32 {
        VIS_LO
    }

    pub fn vis_hi(&self) -> u32 {
        VIS_LO + self.num_visual as u32
    }

    pub fn eoi(&self) -> u32 {
        self.vis_hi()
    }

    pub fn boi(&self) -> u32 {
        self.vis_hi() + 1
    }

    pub fn text_lo(&self) -> u32 {
        self.vis_hi() + 2
    }

    pub fn size(&self) -> usize {
        self.text_lo() as usize + self.num_text
    }

    pub fn is_visual(&self, id: u32) -> bool {
        (VIS_LO..self.vis_hi()).contains(&id)
    }

    pub fn visual_id(&self, index: u16) -> u32 {
        VIS_LO + index as u32
    }

    pub fn text_id(&self, word: u32) -> u32 {
        self.text_lo() + word
    }

    pub fn classify(&self, id: u32) -> Result<TokenClass, SeqError> {
        Ok(match id {
            PAD => TokenClass::Pad,
            BOS => TokenClass::Bos,
            EOS => TokenClass::Eos,
            SEP => TokenClass::Sep,
            _ if self.is_visual(id) => TokenClass::Visual((id - VIS_LO) as u16),
            _ if id == self.eoi() => TokenClass::Eoi,
            _ if id == self.boi() => TokenClass::Boi,
            _ if (id as usize) < self.size() => TokenClass::Text(id - self.text_lo()),
            _ => return Err(SeqError::IdOutOfRange(id)),
        })
    }
}

pub fn tokenize_text(s: &str, vocab: &UnifiedVocab) -> Result<Vec<u32>, SeqError> {
    s.split_whitespace()
        .map(|w| match word_index().get(w) {
            Some(&i) if (i as usize) < vocab.num_text => Ok(vocab.text_id(i)),
            _ => Err(SeqError::OutOfVocabulary(w.to_string())),
        })
        .collect()
}

pub fn detokenize(ids: &[u32], vocab: &UnifiedVocab) -> Result<String, SeqError> {
    let words = ids
        .iter()
        .map(|&id| match vocab.classify(id)? {
            TokenClass::Text(i) => WORDS
                .get(i as usize)
                .copied()
                .ok_or(SeqError::NotText(id)),
            _ => Err(SeqError::NotText(id)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(words.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    Subgoal,
    Critique,
    Direct,
}

impl fmt::Display for TraceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceMode::Subgoal => "subgoal",
            TraceMode::Critique => "critique",
            TraceMode::Direct => "direct",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    TextPlanning,
    VisualSubgoal,
    Reflection,
    InitialHypothesis,
    Critique,
    FinalImage,
}

impl SegmentKind {
    pub fn is_image(self) -> bool {
        matches!(
            self,
            SegmentKind::VisualSubgoal | SegmentKind::InitialHypothesis | SegmentKind::FinalImage
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Payload {
    Text(String),
    Image(VisualTokenBlock),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SegmentRecord", into = "SegmentRecord")]
pub struct Segment {
    pub kind: SegmentKind,
    pub payload: Payload,
}

impl Segment {
    pub fn text(kind: SegmentKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            payload: Payload::Text(text.into()),
        }
    }

    pub fn image(kind: SegmentKind, block: VisualTokenBlock) -> Self {
        Self {
            kind,
            payload: Payload::Image(block),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match &self.payload {
            Payload::Text(t) => Some(t),
            Payload::Image(_) => None,
        }
    }

    pub fn as_image(&self) -> Option<&VisualTokenBlock> {
        match &self.payload {
            Payload::Image(b) => Some(b),
            Payload::Text(_) => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    kind: SegmentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<u16>>,
}

impl TryFrom<SegmentRecord> for Segment {
    type Error = String;

    fn try_from(r: SegmentRecord) -> Result<Self, String> {
        match (r.kind.is_image(), r.text, r.tokens) {
            (false, Some(t), None) => Ok(Segment::text(r.kind, t)),
            (true, None, Some(toks)) => VisualTokenBlock::new(toks, MAX_CODEBOOK_ENTRIES)
                .map(|b| Segment::image(r.kind, b))
                .map_err(|e| e.to_string()),
            _ => Err(format!("segment {:?} has the wrong payload", r.kind)),
        }
    }
}

impl From<Segment> for SegmentRecord {
    fn from(s: Segment) -> Self {
        match s.payload {
            Payload::Text(t) => SegmentRecord {
                kind: s.kind,
                text: Some(t),
                tokens: None,
            },
            Payload::Image(b) => SegmentRecord {
                kind: s.kind,
                text: None,
                tokens: Some(b.tokens().to_vec()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThoughtTrace {
    pub prompt: String,
    pub mode: TraceMode,
    pub segments: Vec<Segment>,
}

/// Mode implied by a segment-kind sequence, if it matches one of the grammars.
pub fn match_grammar(kinds: &[SegmentKind]) -> Option<TraceMode> {
    use SegmentKind::*;
    match kinds {
        [FinalImage] => Some(TraceMode::Direct),
        [InitialHypothesis, Critique, FinalImage] => Some(TraceMode::Critique),
        [TextPlanning, middle @ .., FinalImage]
            if !middle.is_empty()
                && middle.len() % 2 == 0
                && middle
                    .chunks(2)
                    .all(|p| p[0] == VisualSubgoal && p[1] == Reflection) =>
        {
            Some(TraceMode::Subgoal)
        }
        _ => None,
    }
}

impl ThoughtTrace {
    pub fn direct(prompt: impl Into<String>, final_image: VisualTokenBlock) -> Self {
        Self {
            prompt: prompt.into(),
            mode: TraceMode::Direct,
            segments: vec![Segment::image(SegmentKind::FinalImage, final_image)],
        }
    }

    pub fn kinds(&self) -> Vec<SegmentKind> {
        self.segments.iter().map(|s| s.kind).collect()
    }

    pub fn validate(&self) -> Result<(), SeqError> {
        match match_grammar(&self.kinds()) {
            Some(m) if m == self.mode => {}
            Some(m) => {
                return Err(SeqError::Grammar(format!(
                    "segments form a {m} trace but mode is {}",
                    self.mode
                )))
            }
            None => {
                return Err(SeqError::Grammar(format!(
                    "segment order {:?} matches no {} grammar",
                    self.kinds(),
                    self.mode
                )))
            }
        }
        for s in &self.segments {
            match (&s.payload, s.kind.is_image()) {
                (Payload::Text(t), false) if !t.trim().is_empty() => {}
                (Payload::Image(_), true) => {}
                (Payload::Text(_), false) => {
                    return Err(SeqError::Grammar(format!("empty {:?} text", s.kind)))
                }
                _ => return Err(SeqError::Grammar(format!("{:?} has wrong payload", s.kind))),
            }
        }
        Ok(())
    }

    pub fn images(&self) -> impl Iterator<Item = &VisualTokenBlock> {
        self.segments.iter().filter_map(|s| s.as_image())
    }

    pub fn final_image(&self) -> Option<&VisualTokenBlock> {
        self.segments
            .iter()
            .rev()
            .find(|s| s.kind == SegmentKind::FinalImage)
            .and_then(|s| s.as_image())
    }

    pub fn hypothesis_image(&self) -> Option<&VisualTokenBlock> {
        self.segments
            .iter()
            .find(|s| s.kind == SegmentKind::InitialHypothesis)
            .and_then(|s| s.as_image())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Text,
    Image,
}

/// `[start, end)` over sequence positions; image spans include BOI and EOI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Positions of the visual tokens inside an image span.
    pub fn visual_range(&self) -> std::ops::Range<usize> {
        self.start + 1..self.end - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultimodalSequence {
    pub ids: Vec<u32>,
    pub spans: Vec<Span>,
}

impl MultimodalSequence {
    /// Validates structure and annotates spans.
    pub fn from_ids(ids: Vec<u32>, vocab: &UnifiedVocab) -> Result<Self, ParseError> {
        let scan = scan(&ids, vocab, false)?;
        Ok(Self {
            ids,
            spans: scan.spans,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_spans(&self) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(|s| s.kind == SpanKind::Image)
    }

    /// Position of the prompt/response separator.
    pub fn sep_position(&self) -> Option<usize> {
        self.ids.iter().position(|&t| t == SEP)
    }

    pub fn to_dump_line(&self) -> String {
        dump_line(&self.ids)
    }
}

pub fn dump_line(ids: &[u32]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_dump_line(line: &str) -> Result<Vec<u32>, std::num::ParseIntError> {
    line.split_whitespace().map(str::parse).collect()
}

struct Scan {
    prompt_end: usize,
    spans: Vec<Span>,
    complete: bool,
}

/// Structural pass shared by strict and prefix parsing.
///
/// In prefix mode the sequence may stop anywhere; an unfinished trailing
/// segment is dropped and `complete` reports whether EOS was reached.
fn scan(ids: &[u32], vocab: &UnifiedVocab, prefix: bool) -> Result<Scan, ParseError> {
    use ParseErrorKind::*;
    let class = |i: usize| {
        vocab
            .classify(ids[i])
            .map_err(|_| ParseError::at(i, IdOutOfRange))
    };
    if ids.is_empty() || class(0)? != TokenClass::Bos {
        if prefix && ids.is_empty() {
            return Ok(Scan {
                prompt_end: 0,
                spans: vec![],
                complete: false,
            });
        }
        return Err(ParseError::at(0, MissingBos));
    }
    let mut spans = Vec::new();
    let mut pos = 1;
    let text_start = pos;
    loop {
        if pos == ids.len() {
            return if prefix {
                Ok(Scan {
                    prompt_end: pos,
                    spans,
                    complete: false,
                })
            } else {
                Err(ParseError::at(pos, MissingSep))
            };
        }
        match class(pos)? {
            TokenClass::Text(_) => pos += 1,
            TokenClass::Sep => break,
            TokenClass::Visual(_) => return Err(ParseError::at(pos, VisualOutsideImage)),
            _ => return Err(ParseError::at(pos, MissingSep)),
        }
    }
    if pos > text_start {
        spans.push(Span {
            kind: SpanKind::Text,
            start: text_start,
            end: pos,
        });
    }
    let prompt_end = pos;
    pos += 1;
    let mut text_open: Option<usize> = None;
    let close_text = |spans: &mut Vec<Span>, open: &mut Option<usize>, at: usize| {
        if let Some(s) = open.take() {
            spans.push(Span {
                kind: SpanKind::Text,
                start: s,
                end: at,
            });
        }
    };
    while pos < ids.len() {
        match class(pos)? {
            TokenClass::Text(_) => {
                text_open.get_or_insert(pos);
                pos += 1;
            }
            TokenClass::Boi => {
                close_text(&mut spans, &mut text_open, pos);
                let start = pos;
                let mut p = pos + 1;
                while p < ids.len() && vocab.is_visual(ids[p]) {
                    p += 1;
                }
                let n = p - start - 1;
                if p == ids.len() {
                    if prefix {
                        return Ok(Scan {
                            prompt_end,
                            spans,
                            complete: false,
                        });
                    }
                    return Err(ParseError::at(start, DanglingBoi));
                }
                if class(p)? != TokenClass::Eoi {
                    return Err(if n < vocab.block_len {
                        ParseError::at(start, DanglingBoi)
                    } else {
                        ParseError::at(p, BlockLength)
                    });
                }
                if n != vocab.block_len {
                    return Err(ParseError::at(p, BlockLength));
                }
                spans.push(Span {
                    kind: SpanKind::Image,
                    start,
                    end: p + 1,
                });
                pos = p + 1;
            }
            TokenClass::Eos => {
                close_text(&mut spans, &mut text_open, pos);
                if pos + 1 != ids.len() {
                    return Err(ParseError::at(pos + 1, TrailingTokens));
                }
                return Ok(Scan {
                    prompt_end,
                    spans,
                    complete: true,
                });
            }
            TokenClass::Visual(_) => return Err(ParseError::at(pos, VisualOutsideImage)),
            TokenClass::Eoi => return Err(ParseError::at(pos, StrayDelimiter)),
            _ => return Err(ParseError::at(pos, UnexpectedSpecial)),
        }
    }
    if prefix {
        // an unterminated text tail is still in progress; drop it
        Ok(Scan {
            prompt_end,
            spans,
            complete: false,
        })
    } else {
        Err(ParseError::at(ids.len(), MissingEos))
    }
}

fn span_payload(ids: &[u32], span: &Span, vocab: &UnifiedVocab) -> Payload {
    match span.kind {
        SpanKind::Text => Payload::Text(
            detokenize(&ids[span.start..span.end], vocab).expect("scan checked text ids"),
        ),
        SpanKind::Image => {
            let toks = ids[span.visual_range()]
                .iter()
                .map(|&t| (t - VIS_LO) as u16)
                .collect();
            Payload::Image(
                VisualTokenBlock::new(toks, vocab.num_visual).expect("scan checked visual ids"),
            )
        }
    }
}

/// Assigns segment kinds to a payload list by grammar shape.
fn label_segments(payloads: Vec<Payload>) -> Option<(TraceMode, Vec<Segment>)> {
    use SegmentKind::*;
    let is_img: Vec<bool> = payloads.iter().map(|p| matches!(p, Payload::Image(_))).collect();
    let n = payloads.len();
    let (mode, kinds): (TraceMode, Vec<SegmentKind>) = match is_img.as_slice() {
        [true] => (TraceMode::Direct, vec![FinalImage]),
        [true, false, true] => (TraceMode::Critique, vec![InitialHypothesis, Critique, FinalImage]),
        [false, rest @ ..] if n >= 4 && n % 2 == 0 => {
            let alternating = rest
                .iter()
                .enumerate()
                .all(|(i, &img)| img == (i % 2 == 0));
            if !alternating {
                return None;
            }
            let mut kinds = vec![TextPlanning];
            for i in 1..n - 1 {
                kinds.push(if i % 2 == 1 { VisualSubgoal } else { Reflection });
            }
            kinds.push(FinalImage);
            (TraceMode::Subgoal, kinds)
        }
        _ => return None,
    };
    let segments = kinds
        .into_iter()
        .zip(payloads)
        .map(|(kind, payload)| Segment { kind, payload })
        .collect();
    Some((mode, segments))
}

pub fn assemble_trace(
    trace: &ThoughtTrace,
    vocab: &UnifiedVocab,
) -> Result<MultimodalSequence, SeqError> {
    trace.validate()?;
    let mut ids = vec![BOS];
    let mut spans = Vec::new();
    let prompt = tokenize_text(&trace.prompt, vocab)?;
    if !prompt.is_empty() {
        spans.push(Span {
            kind: SpanKind::Text,
            start: 1,
            end: 1 + prompt.len(),
        });
    }
    ids.extend(prompt);
    ids.push(SEP);
    for seg in &trace.segments {
        let start = ids.len();
        match &seg.payload {
            Payload::Text(t) => {
                ids.extend(tokenize_text(t, vocab)?);
                spans.push(Span {
                    kind: SpanKind::Text,
                    start,
                    end: ids.len(),
                });
            }
            Payload::Image(block) => {
                if block.len() != vocab.block_len {
                    return Err(SeqError::BlockLength {
                        got: block.len(),
                        expected: vocab.block_len,
                    });
                }
                ids.push(vocab.boi());
                for &t in block.tokens() {
                    if t as usize >= vocab.num_visual {
                        return Err(SeqError::VisualRange {
                            token: t,
                            k: vocab.num_visual,
                        });
                    }
                    ids.push(vocab.visual_id(t));
                }
                ids.push(vocab.eoi());
                spans.push(Span {
                    kind: SpanKind::Image,
                    start,
                    end: ids.len(),
                });
            }
        }
    }
    ids.push(EOS);
    Ok(MultimodalSequence { ids, spans })
}

pub fn parse_sequence(ids: &[u32], vocab: &UnifiedVocab) -> Result<ThoughtTrace, ParseError> {
    let scan = scan(ids, vocab, false)?;
    let prompt = detokenize(&ids[1..scan.prompt_end], vocab).expect("scan checked text ids");
    let body: Vec<&Span> = scan
        .spans
        .iter()
        .filter(|s| s.start > scan.prompt_end)
        .collect();
    let payloads = body.iter().map(|s| span_payload(ids, s, vocab)).collect();
    match label_segments(payloads) {
        Some((mode, segments)) => Ok(ThoughtTrace {
            prompt,
            mode,
            segments,
        }),
        None => Err(ParseError::at(
            body.first().map_or(scan.prompt_end + 1, |s| s.start),
            ParseErrorKind::NoGrammarMatch,
        )),
    }
}

/// Completed segments of a possibly truncated sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialTrace {
    pub prompt: String,
    pub payloads: Vec<Payload>,
    pub reached_eos: bool,
}

pub fn parse_prefix(ids: &[u32], vocab: &UnifiedVocab) -> Result<PartialTrace, ParseError> {
    let scan = scan(ids, vocab, true)?;
    let prompt_ids = if scan.prompt_end > 1 { &ids[1..scan.prompt_end] } else { &[][..] };
    let prompt = detokenize(prompt_ids, vocab).expect("scan checked text ids");
    let payloads = scan
        .spans
        .iter()
        .filter(|s| s.start > scan.prompt_end)
        .map(|s| span_payload(ids, s, vocab))
        .collect();
    Ok(PartialTrace {
        prompt,
        payloads,
        reached_eos: scan.complete,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    #[default]
    ResponseOnly,
    AllContent,
}

/// Per-position supervision flags over target positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Works on raw (possibly PAD-extended) id rows.
pub fn build_loss_mask(ids: &[u32], policy: MaskPolicy) -> LossMask {
    let prompt_end = match policy {
        MaskPolicy::ResponseOnly => ids.iter().position(|&t| t == SEP),
        MaskPolicy::AllContent => None,
    };
    LossMask(
        ids.iter()
            .enumerate()
            .map(|(i, &t)| t != PAD && prompt_end.is_none_or(|p| i > p))
            .collect(),
    )
}

pub fn write_traces<'a, W: Write>(
    mut w: W,
    traces: impl IntoIterator<Item = &'a ThoughtTrace>,
) -> std::io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<ThoughtTrace>, String> {
    r.lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| {
            let l = l.map_err(|e| e.to_string())?;
            serde_json::from_str(&l).map_err(|e| format!("line {}: {e}", i + 1))
        })
        .collect()
}

pub fn load_traces(path: &Path) -> Result<Vec<ThoughtTrace>, String> {
    let f = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    read_traces(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> UnifiedVocab {
        UnifiedVocab::standard(9, 8)
    }

    fn block(fill: u16) -> VisualTokenBlock {
        VisualTokenBlock::new(vec![fill; 64], 9).unwrap()
    }

    #[test]
    fn large_codebook_delimiters() {
        let v = UnifiedVocab::new(8192, WORDS.len(), 1024).unwrap();
        assert_eq!(v.vis_lo(), 4);
        assert_eq!(v.vis_hi() - 1, 8195);
        assert_eq!(v.eoi(), 8196);
        assert_eq!(v.boi(), 8197);
    }

    #[test]
    fn classification_is_total_and_exclusive() {
        let v = vocab();
        let mut counts = [0usize; 3];
        for id in 0..v.size() as u32 {
            match v.classify(id).unwrap() {
                TokenClass::Visual(_) => counts[1] += 1,
                TokenClass::Text(_) => counts[2] += 1,
                _ => counts[0] += 1,
            }
        }
        assert_eq!(counts, [6, 9, WORDS.len()]);
        assert!(v.classify(v.size() as u32).is_err());
    }

    #[test]
    fn tokenizer_cases() {
        let v = vocab();
        assert!(tokenize_text("", &v).unwrap().is_empty());
        let ids = tokenize_text("a red square", &v).unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(detokenize(&ids, &v).unwrap(), "a red square");
        assert_eq!(
            tokenize_text("xylophone", &v).unwrap_err(),
            SeqError::OutOfVocabulary("xylophone".into())
        );
    }

    #[test]
    fn word_list_has_no_duplicates() {
        assert_eq!(word_index().len(), WORDS.len());
    }

    #[test]
    fn direct_trace_layout_and_masks() {
        let v = vocab();
        let t = ThoughtTrace::direct("a red square", block(0));
        let seq = assemble_trace(&t, &v).unwrap();
        // BOS + 3 prompt words + SEP + (BOI + 64 + EOI) + EOS
        assert_eq!(seq.len(), 72);
        let resp = build_loss_mask(&seq.ids, MaskPolicy::ResponseOnly);
        assert_eq!(resp.count(), 67);
        let all = build_loss_mask(&seq.ids, MaskPolicy::AllContent);
        assert_eq!(all.count(), 72);

        let mut padded = seq.ids.clone();
        padded.extend([PAD; 8]);
        let m = build_loss_mask(&padded, MaskPolicy::ResponseOnly);
        assert!(m.0[72..].iter().all(|&b| !b));
        assert_eq!(m.count(), 67);
    }

    #[test]
    fn subgoal_trace_has_three_images() {
        let v = vocab();
        let t = ThoughtTrace {
            prompt: "a red square and a blue circle".into(),
            mode: TraceMode::Subgoal,
            segments: vec![
                Segment::text(SegmentKind::TextPlanning, "first draw a red square"),
                Segment::image(SegmentKind::VisualSubgoal, block(1)),
                Segment::text(SegmentKind::Reflection, "the red square is done"),
                Segment::image(SegmentKind::VisualSubgoal, block(6)),
                Segment::text(SegmentKind::Reflection, "now combine all"),
                Segment::image(SegmentKind::FinalImage, block(0)),
            ],
        };
        let seq = assemble_trace(&t, &v).unwrap();
        assert_eq!(seq.image_spans().count(), 3);
        assert_eq!(parse_sequence(&seq.ids, &v).unwrap(), t);
    }

    #[test]
    fn bad_grammar_rejected() {
        let v = vocab();
        let t = ThoughtTrace {
            prompt: "a red square".into(),
            mode: TraceMode::Critique,
            segments: vec![Segment::image(SegmentKind::FinalImage, block(0))],
        };
        assert!(matches!(assemble_trace(&t, &v), Err(SeqError::Grammar(_))));
        let short = ThoughtTrace::direct("a", VisualTokenBlock::new(vec![0; 10], 9).unwrap());
        assert!(matches!(
            assemble_trace(&short, &v),
            Err(SeqError::BlockLength { got: 10, expected: 64 })
        ));
    }

    #[test]
    fn short_block_error_at_eoi() {
        let v = vocab();
        let mut ids = vec![BOS, SEP, v.boi()];
        ids.extend(std::iter::repeat_n(v.visual_id(0), 63));
        ids.push(v.eoi());
        ids.push(EOS);
        let err = parse_sequence(&ids, &v).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::BlockLength);
        assert_eq!(err.position, 66);
    }

    #[test]
    fn visual_token_in_text_region() {
        let v = vocab();
        let ids = vec![BOS, SEP, v.text_id(0), v.visual_id(3), EOS];
        let err = parse_sequence(&ids, &v).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::VisualOutsideImage);
        assert_eq!(err.position, 3);
        assert!(err.to_string().contains("visual token outside image span"));
    }

    #[test]
    fn dangling_boi() {
        let v = vocab();
        let mut ids = vec![BOS, SEP, v.boi()];
        ids.extend(std::iter::repeat_n(v.visual_id(0), 5));
        ids.push(EOS);
        let err = parse_sequence(&ids, &v).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::DanglingBoi);
        assert_eq!(err.position, 2);
    }

    #[test]
    fn critique_sequence_parses() {
        let v = vocab();
        let t = ThoughtTrace {
            prompt: "a red square".into(),
            mode: TraceMode::Critique,
            segments: vec![
                Segment::image(SegmentKind::InitialHypothesis, block(6)),
                Segment::text(SegmentKind::Critique, "the square should be red not blue"),
                Segment::image(SegmentKind::FinalImage, block(1)),
            ],
        };
        let seq = assemble_trace(&t, &v).unwrap();
        let back = parse_sequence(&seq.ids, &v).unwrap();
        assert_eq!(back.mode, TraceMode::Critique);
        assert_eq!(back.segments.len(), 3);
    }

    #[test]
    fn text_only_response_has_no_grammar() {
        let v = vocab();
        let ids = vec![BOS, SEP, v.text_id(0), v.text_id(1), EOS];
        let err = parse_sequence(&ids, &v).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::NoGrammarMatch);
    }

    #[test]
    fn prefix_parse_drops_unfinished_tail() {
        let v = vocab();
        let t = ThoughtTrace::direct("a red square", block(2));
        let seq = assemble_trace(&t, &v).unwrap();
        let cut = &seq.ids[..40];
        let p = parse_prefix(cut, &v).unwrap();
        assert_eq!(p.prompt, "a red square");
        assert!(p.payloads.is_empty());
        assert!(!p.reached_eos);
        let full = parse_prefix(&seq.ids, &v).unwrap();
        assert!(full.reached_eos);
        assert_eq!(full.payloads.len(), 1);
    }

    #[test]
    fn trace_json_shape() {
        let t = ThoughtTrace {
            prompt: "a red square".into(),
            mode: TraceMode::Critique,
            segments: vec![
                Segment::image(SegmentKind::InitialHypothesis, block(6)),
                Segment::text(SegmentKind::Critique, "the image matches the prompt"),
                Segment::image(SegmentKind::FinalImage, block(1)),
            ],
        };
        let line = serde_json::to_string(&t).unwrap();
        assert!(line.starts_with(r#"{"prompt":"a red square","mode":"critique","segments":[{"kind":"initial_hypothesis","tokens":[6,"#));
        assert!(line.contains(r#"{"kind":"critique","text":"the image matches the prompt"}"#));
        let back: ThoughtTrace = serde_json::from_str(&line).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"prompt":"","mode":"direct","segments":[{"kind":"final_image","text":"oops"}]}"#;
        assert!(serde_json::from_str::<ThoughtTrace>(bad).is_err());
    }

    #[test]
    fn dump_lines() {
        let ids = vec![1, 20, 3, 2];
        assert_eq!(dump_line(&ids), "1 20 3 2");
        assert_eq!(parse_dump_line("1 20  3 2\n").unwrap(), ids);
    }
}
