use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmcot::datagen::{derive_rng, make_critique_trace, make_direct_trace, make_subgoal_trace, CorruptionModel};
use mmcot::losses::Example;
use mmcot::model::{ImageLayout, Model, ModelConfig};
use mmcot::sequence::{ThoughtTrace, UnifiedVocab};
use mmcot::toyworld::{SceneSampler, SceneSpec};

pub fn scene(seed: u64) -> SceneSpec {
    SceneSampler::default().sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Direct softmax NLL over masked targets, pooled over the batch.
pub fn nll_oracle(model: &Model, batch: &[Example]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for ex in batch {
        let logits = model.forward_seq(&ex.seq.ids).unwrap().logits;
        for t in 1..ex.seq.ids.len() {
            if !ex.mask.0[t] {
                continue;
            }
            let row = logits.row(t - 1);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[ex.seq.ids[t] as usize];
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn random_trace(seed: u64) -> ThoughtTrace {
    let spec = scene(seed);
    match seed % 3 {
        0 => make_direct_trace(&spec).unwrap(),
        1 => make_subgoal_trace(&spec).unwrap(),
        _ => make_critique_trace(&spec, &CorruptionModel::default(), &mut derive_rng(seed, 9)).unwrap(),
    }
}

pub fn small_model(vocab: &UnifiedVocab, seed: u64) -> Model {
    Model::new(ModelConfig {
        layers: 1,
        heads: 2,
        hidden_dim: 16,
        ff_dim: 32,
        context_length: 512,
        seed,
        image_layout: Some(ImageLayout::from_vocab(vocab)),
        ..ModelConfig::new(vocab.size(), 8)
    })
    .unwrap()
}
