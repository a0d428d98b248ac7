mod common;

use common::fixtures::{scene, small_model};
use mmcot::codec::Codebook;
use mmcot::datagen::make_direct_trace;
use mmcot::harness::{LrSchedule, TrainConfig, Trainer};
use mmcot::sequence::UnifiedVocab;
use mmcot::toyworld::PALETTE_SIZE;

#[test]
fn loss_falls_on_eight_fixed_batches() {
    let vocab = UnifiedVocab::standard(PALETTE_SIZE, 8);
    let cb = Codebook::new(PALETTE_SIZE, 8, 1).unwrap();
    // eight one-trace batches, revisited in a fresh order every epoch
    let data: Vec<_> = (0..8)
        .map(|i| make_direct_trace(&scene(i)).unwrap())
        .collect();
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 1,
        lr: 3e-3,
        schedule: LrSchedule::Constant,
        cond_dropout: 0.0,
        checkpoint_every: 0,
        ..TrainConfig::desk_stage1()
    };
    let mut t = Trainer::new(small_model(&vocab, 2), cfg).unwrap();
    let s = t.run(&data, &cb, &vocab, None).unwrap();
    assert_eq!(s.metrics.len(), 50);
    let epochs: Vec<f64> = s.metrics.chunks_exact(8).map(|c| c.iter().map(|m| m.loss_mm).sum::<f64>() / 8.0).collect();
    assert_eq!(epochs.len(), 6);
    assert!(epochs.windows(2).all(|w| w[1] < w[0]), "epoch means {epochs:?}");
}
