//! Finite-difference gradient check of the composite loss on a tiny model.

use mmcot::codec::{Codebook, VisualTokenBlock};
use mmcot::losses::{Example, Lambda, Objective};
use mmcot::model::{HiddenAlignment, ImageLayout, Model, ModelConfig};
use mmcot::sequence::{assemble_trace, MaskPolicy, Segment, SegmentKind, ThoughtTrace, TraceMode, UnifiedVocab};

const STEP: f64 = 1e-5;

fn tiny_setup(alignment: HiddenAlignment) -> (Model, Codebook, UnifiedVocab, Vec<Example>) {
    // 4 specials + 9 visual + EOI/BOI + 9 words = 24 ids, T = 4 (2×2 canvas)
    let vocab = UnifiedVocab::new(9, 9, 4).unwrap();
    assert_eq!(vocab.size(), 24);
    let codebook = Codebook::new(9, 4, 11).unwrap();
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        hidden_dim: 8,
        ff_dim: 16,
        context_length: 24,
        vocab_size: 24,
        proj_dim: 4,
        seed: 5,
        hidden_alignment: alignment,
        image_layout: Some(ImageLayout::from_vocab(&vocab)),
    };
    let mut model = Model::new(cfg).unwrap();
    // move LayerNorm gains/biases away from their init so their gradients are generic
    for (name, mut t) in model.weights.named_mut() {
        if name.contains("ln") {
            t.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += 0.1 * ((i as f64) * 0.7).sin());
        }
    }
    let block = |t: [u16; 4]| VisualTokenBlock::new(t.to_vec(), 9).unwrap();
    let critique = ThoughtTrace {
        prompt: "a red".into(),
        mode: TraceMode::Critique,
        segments: vec![
            Segment::image(SegmentKind::InitialHypothesis, block([0, 3, 3, 0])),
            Segment::text(SegmentKind::Critique, "two the"),
            Segment::image(SegmentKind::FinalImage, block([1, 0, 0, 8])),
        ],
    };
    let direct = ThoughtTrace::direct("three", block([5, 5, 0, 2]));
    let batch = [critique, direct]
        .iter()
        .map(|t| Example::new(assemble_trace(t, &vocab).unwrap(), MaskPolicy::ResponseOnly))
        .collect();
    (model, codebook, vocab, batch)
}

fn objective<'a>(model: &'a Model, codebook: &'a Codebook, vocab: &'a UnifiedVocab) -> Objective<'a> {
    Objective {
        model,
        codebook,
        vocab,
        lambda: Lambda::new(1.0).unwrap(),
    }
}

pub fn max_relative_error(alignment: HiddenAlignment) -> (f64, String, usize) {
    let (model, codebook, vocab, batch) = tiny_setup(alignment);
    let (report, grads) = objective(&model, &codebook, &vocab).evaluate(&batch, true).unwrap();
    assert!(report.n_images == 3 && report.loss_rec > 0.0);
    let grads = grads.unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();

    let mut worst = (0.0f64, String::new(), 0usize);
    let mut probe = model.clone();
    for (ti, (name, ana)) in analytic.iter().enumerate() {
        for (k, &a) in ana.iter().enumerate() {
            let orig = {
                let mut named = probe.weights.named_mut();
                let slot = named[ti].1.iter_mut().nth(k).unwrap();
                let o = *slot;
                *slot = o + STEP;
                o
            };
            let plus = objective(&probe, &codebook, &vocab).evaluate(&batch, false).unwrap().0.loss_total;
            *probe.weights.named_mut()[ti].1.iter_mut().nth(k).unwrap() = orig - STEP;
            let minus = objective(&probe, &codebook, &vocab).evaluate(&batch, false).unwrap().0.loss_total;
            *probe.weights.named_mut()[ti].1.iter_mut().nth(k).unwrap() = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            // absolute floor at the finite-difference round-off level
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, name.clone(), k);
            }
        }
    }
    worst
}
