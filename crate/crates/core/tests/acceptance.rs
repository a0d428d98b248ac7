//! One PASS/FAIL line per acceptance criterion.
//!
//! The training-based claims (subgoal, critique, loss ablation, the greedy
//! "a red square" example) take tens of minutes even in release mode, so they
//! live in the ignored `desk_claims` test:
//!
//! ```text
//! cargo test --release -p mmcot --test acceptance -- --ignored --nocapture
//! ```

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::fixtures::{nll_oracle, random_trace, scene, small_model};
use common::gradcheck::max_relative_error;
use mmcot::codec::{decode_tokens, encode_image, Codebook};
use mmcot::datagen::{
    balanced_suite, build_stage1_with, generate_dataset, held_out_prompts, ComplexityProfile, DataMode, GenConfig,
};
use mmcot::harness::{
    ablate_losses, desk_model_config, evaluate, render_ablation_markdown, render_eval_markdown, train,
    AblationSetup, EvalReport, ModelGenerator, TrainConfig,
};
use mmcot::losses::{reconstruction_mse, Example, Lambda, Objective};
use mmcot::model::{HiddenAlignment, Model};
use mmcot::sampler::{
    cfg_combine, generate_trace, step, Allowed, CfgScales, ConditionLogits, DecodeState, GenerateOptions,
    SamplingParams, ScaleSchedule,
};
use mmcot::sequence::{
    assemble_trace, parse_sequence, tokenize_text, MaskPolicy, MultimodalSequence, TraceMode, UnifiedVocab, BOS,
    EOS, SEP, WORDS,
};
use mmcot::toyworld::{
    detect_objects, render_scene, Color, GenevalCategory, ObjectSpec, SceneSpec, Shape, PALETTE_SIZE,
};

/// Written straight to the stderr handle so the lines show up even when the
/// harness captures test output.
fn report(pass: bool, name: &str, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "ACCEPTANCE {verdict} {name}: {detail}");
}

fn skip(name: &str, why: &str) {
    let _ = writeln!(std::io::stderr(), "ACCEPTANCE SKIP {name}: {why}");
}

fn codec_exactness() -> bool {
    let t = Instant::now();
    let mut failures = 0usize;
    for seed in 0..1000 {
        let img = render_scene(&scene(seed)).unwrap();
        let back = decode_tokens(&encode_image(&img, PALETTE_SIZE).unwrap(), img.size()).unwrap();
        failures += usize::from(back.lossy || back.image != img);
    }
    let mut exhaustive = 0usize;
    for shape in Shape::ALL {
        for color in Color::ALL {
            for extent in 1..=4u8 {
                for r in 0..4 {
                    for c in 0..4 {
                        let Ok(spec) = SceneSpec::new(4, vec![ObjectSpec::new(shape, color, r, c, extent)], vec![])
                        else {
                            continue;
                        };
                        let img = render_scene(&spec).unwrap();
                        let back = decode_tokens(&encode_image(&img, PALETTE_SIZE).unwrap(), 4).unwrap();
                        failures += usize::from(back.image != img);
                        exhaustive += 1;
                    }
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = failures == 0 && secs < 10.0;
    report(
        pass,
        "codec exactness",
        &format!("1000 random + {exhaustive} exhaustive 4x4 scenes, {failures} mismatches, {secs:.2}s (< 10s)"),
    );
    pass
}

fn sequence_round_trip() -> bool {
    let t = Instant::now();
    let vocab = UnifiedVocab::standard(PALETTE_SIZE, 8);
    let failures = (0..1000u64)
        .filter(|&seed| {
            let tr = random_trace(seed);
            parse_sequence(&assemble_trace(&tr, &vocab).unwrap().ids, &vocab).ok() != Some(tr)
        })
        .count();
    let secs = t.elapsed().as_secs_f64();
    let pass = failures == 0 && secs < 10.0;
    report(pass, "sequence round trip", &format!("1000 traces, {failures} mismatches, {secs:.2}s (< 10s)"));
    pass
}

fn vocabulary_layout() -> bool {
    let big = UnifiedVocab::new(8192, WORDS.len(), 64).unwrap();
    let small = UnifiedVocab::standard(PALETTE_SIZE, 8);
    let pass = big.eoi() == 8196 && big.boi() == 8197 && small.eoi() == 13 && small.boi() == 14 && small.size() == 66;
    report(
        pass,
        "vocabulary layout",
        &format!(
            "K=8192: EOI {} BOI {}; K=9: EOI {} BOI {} V {}",
            big.eoi(),
            big.boi(),
            small.eoi(),
            small.boi(),
            small.size()
        ),
    );
    pass
}

fn loss_oracles() -> bool {
    let vocab = UnifiedVocab::standard(PALETTE_SIZE, 8);
    let mut worst = 0.0f64;
    for b in 0..100u64 {
        let cb = Codebook::new(PALETTE_SIZE, 8, b).unwrap();
        let model = small_model(&vocab, b);
        let policy = if b % 2 == 0 { MaskPolicy::ResponseOnly } else { MaskPolicy::AllContent };
        let batch: Vec<Example> = (0..1 + b % 3)
            .map(|i| Example::new(assemble_trace(&random_trace(1000 * b + i), &vocab).unwrap(), policy))
            .collect();
        let obj = Objective { model: &model, codebook: &cb, vocab: &vocab, lambda: Lambda::new(1.0).unwrap() };
        let r = obj.evaluate(&batch, false).unwrap().0;
        worst = worst.max((r.loss_mm - nll_oracle(&model, &batch)).abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let feats: Vec<_> = (0..3).map(|_| ndarray::Array2::from_shape_fn((64, 16), |_| rng.random::<f64>())).collect();
    let shifted: Vec<_> = feats.iter().map(|f| f + 1.0).collect();
    let perfect = reconstruction_mse(&feats, &feats).unwrap();
    let unit = reconstruction_mse(&shifted, &feats).unwrap();

    // prompt and a text-only response: no image spans anywhere
    let mut ids = vec![BOS];
    ids.extend(tokenize_text("a red square", &vocab).unwrap());
    ids.push(SEP);
    ids.extend(tokenize_text("draw the red square", &vocab).unwrap());
    ids.push(EOS);
    let textual = Example::new(MultimodalSequence::from_ids(ids, &vocab).unwrap(), MaskPolicy::ResponseOnly);
    let model = small_model(&vocab, 3);
    let cb = Codebook::new(PALETTE_SIZE, 8, 3).unwrap();
    let obj = Objective { model: &model, codebook: &cb, vocab: &vocab, lambda: Lambda::new(1.0).unwrap() };
    let imageless = obj.evaluate(&[textual], true).unwrap().0;

    let pass = worst < 1e-9
        && perfect == 0.0
        && (unit - 1.0).abs() < 1e-12
        && imageless.loss_rec == 0.0
        && imageless.n_images == 0;
    report(
        pass,
        "loss oracles",
        &format!(
            "loss_mm vs NLL max |diff| {worst:.1e} over 100 batches (< 1e-9); loss_rec perfect {perfect}, unit offset {unit}, imageless {}",
            imageless.loss_rec
        ),
    );
    pass
}

fn gradient_check() -> bool {
    let t = Instant::now();
    let (a, an, ak) = max_relative_error(HiddenAlignment::Predicting);
    let (b, bn, bk) = max_relative_error(HiddenAlignment::AtToken);
    let secs = t.elapsed().as_secs_f64();
    let pass = a < 1e-4 && b < 1e-4 && secs < 120.0;
    report(
        pass,
        "gradient check",
        &format!("max relative error {a:.2e} ({an}[{ak}]), at-token {b:.2e} ({bn}[{bk}]), {secs:.1}s (< 1e-4, < 2 min)"),
    );
    pass
}

fn constrained_decoding() -> bool {
    let t = Instant::now();
    let vocab = UnifiedVocab::standard(PALETTE_SIZE, 8);
    let model = small_model(&vocab, 99);
    let prompts = balanced_suite(50, 4, 0, &Default::default());
    let modes = [TraceMode::Direct, TraceMode::Subgoal, TraceMode::Critique];
    let mut invalid = Vec::new();
    let n = 10_000usize;
    for i in 0..n {
        let mode = modes[i % 3];
        let schedule = if i % 2 == 0 { ScaleSchedule::default() } else { ScaleSchedule::conditional() };
        let opts = GenerateOptions::new(mode, schedule, SamplingParams { temperature: 1.0, top_k: 0, min_prob: 0.0, seed: i as u64 });
        let prompt = &prompts[i % prompts.len()].prompt;
        let g = generate_trace(&model, &vocab, prompt, &opts).unwrap();
        let ok = g.trace.as_ref().is_some_and(|t| {
            t.mode == mode
                && t.validate().is_ok()
                && t.images().all(|b| b.tokens().len() == vocab.block_len)
                && parse_sequence(&g.ids, &vocab).as_ref() == Ok(t)
        });
        if !ok {
            invalid.push(i);
        }
    }

    // the (1, 0, 0, 0) guidance weights reproduce the full-condition logits bit for bit
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand_logits = || Some(Array1::from_shape_fn(vocab.size(), |_| rng.random_range(-30.0..30.0)));
    let mut combine_mismatch = 0usize;
    for _ in 0..1000 {
        let l = ConditionLogits {
            full: rand_logits(),
            image: rand_logits(),
            negative: rand_logits(),
            prompt: rand_logits(),
            uncond: rand_logits(),
        };
        let out = cfg_combine(&l, &CfgScales::CONDITIONAL).unwrap();
        combine_mismatch += usize::from(out.iter().zip(l.full.as_ref().unwrap()).any(|(a, b)| a.to_bits() != b.to_bits()));
    }
    // and a guided decode with them matches a plain single-context sampler token for token
    let mut decode_mismatch = 0usize;
    for (i, rec) in prompts.iter().take(30).enumerate() {
        let mode = modes[i % 3];
        let params = SamplingParams { temperature: 1.0, top_k: 0, min_prob: 0.0, seed: 700 + i as u64 };
        let guided = generate_trace(&model, &vocab, &rec.prompt, &GenerateOptions::new(mode, ScaleSchedule::conditional(), params))
            .unwrap();
        let prompt = tokenize_text(&rec.prompt, &vocab).unwrap();
        let mut st = DecodeState::new(mode, vocab, params.seed);
        let mut cache = model.new_cache();
        while !st.finished {
            match st.allowed() {
                Allowed::Forced(t) => st.push(t),
                Allowed::Mask(_) => {
                    let mut ctx = vec![BOS];
                    ctx.extend(&prompt);
                    ctx.push(SEP);
                    ctx.extend(&st.emitted);
                    let l = model.logits_for(&mut cache, &ctx).unwrap();
                    step(&mut st, &l, &params);
                }
            }
        }
        decode_mismatch += usize::from(guided.ids[prompt.len() + 2..] != st.emitted[..]);
    }

    let secs = t.elapsed().as_secs_f64();
    let pass = invalid.is_empty() && combine_mismatch == 0 && decode_mismatch == 0;
    report(
        pass,
        "constrained decoding",
        &format!(
            "{}/{n} untrained decodes valid (first invalid: {:?}); CFG (1,0,0,0) bit-exact on 1000 logit sets ({combine_mismatch} off) and 30 decodes ({decode_mismatch} off); {secs:.1}s",
            n - invalid.len(),
            invalid.first()
        ),
    );
    pass
}

fn mmcot(args: &[&str], cwd: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mmcot"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MMCOT_SEED")
        .output()
        .expect("spawn mmcot");
    assert!(out.status.success(), "mmcot {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn pipeline(dir: &Path) -> Vec<u8> {
    mmcot(&["gen-data", "--mode", "direct", "--n", "64", "--seed", "3", "--out", "data"], dir);
    mmcot(&["gen-suite", "--n", "10", "--min-per-category", "0", "--seed", "4", "--out", "suite.jsonl"], dir);
    let train = ["train", "--data", "data/traces.jsonl", "--steps", "50", "--batch-size", "4", "--seed", "5"];
    mmcot(&[&train[..], &["--checkpoint-every", "25", "--out", "run"]].concat(), dir);
    mmcot(
        &[
            "sample", "--ckpt", "run/final.mmckpt", "--mode", "direct", "--prompts-file", "suite.jsonl", "--seed", "6",
            "--out", "samples.jsonl", "--png-dir", "png",
        ],
        dir,
    );
    mmcot(&["eval", "--suite", "suite.jsonl", "--mode", "direct", "--traces", "samples.jsonl", "--out", "eval"], dir)
        .stdout
}

fn end_to_end_determinism() -> bool {
    let t = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = pipeline(a.path());
    let out_b = pipeline(b.path());
    let files = files_under(a.path());
    let differing: Vec<_> = files
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    let same_listing = files == files_under(b.path());
    let samples = std::fs::read_to_string(a.path().join("samples.jsonl")).unwrap().lines().count();
    let secs = t.elapsed().as_secs_f64();
    let pass = differing.is_empty() && same_listing && out_a == out_b && samples == 10 && files.len() > 10;
    report(
        pass,
        "end-to-end determinism",
        &format!(
            "gen-data -> train(50) -> sample(10) -> eval twice: {} files compared, {} differ {:?}, {samples} samples, {secs:.1}s",
            files.len(),
            differing.len(),
            differing
        ),
    );
    pass
}

#[test]
fn acceptance() {
    let results = [
        codec_exactness(),
        sequence_round_trip(),
        vocabulary_layout(),
        loss_oracles(),
        gradient_check(),
        constrained_decoding(),
    ];
    let claims = "trained on the desk configuration; run the ignored desk_claims test";
    skip("subgoal claim", claims);
    skip("critique claim", claims);
    skip("loss ablation", claims);
    let determinism = end_to_end_determinism();
    assert!(results.iter().all(|&p| p) && determinism, "see the ACCEPTANCE lines above");
}

// ---------------------------------------------------------------------------
// Desk-scale claims.

const SUITE_SIZE: usize = 200;
const SUITE_SEED: u64 = 7;
const STAGE1_PAIRS: usize = 4000;
const STAGE1_STEPS: usize = 4000;
const STAGE1_LR: f64 = 3e-3;
const STAGE2_TRACES: usize = 2000;
const STAGE2_STEPS: usize = 1500;
const STAGE2_LR: f64 = 3e-3;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Desk {
    vocab: UnifiedVocab,
    codebook: Codebook,
    suite: Vec<mmcot::datagen::PromptRecord>,
    held: std::collections::HashSet<String>,
    base: Model,
}

fn note(msg: &str) {
    let _ = writeln!(std::io::stderr(), "  {msg}");
}

fn stage1() -> Desk {
    let vocab = UnifiedVocab::standard(PALETTE_SIZE, 8);
    let codebook = Codebook::default_palette();
    let suite = balanced_suite(SUITE_SIZE, SUITE_SEED, 50, &Default::default());
    let held = held_out_prompts(&suite);
    let t = Instant::now();
    let pairs: Vec<_> =
        build_stage1_with(STAGE1_PAIRS, 1, &ComplexityProfile::mixed(), &held).into_iter().map(|p| p.1).collect();
    let cfg = TrainConfig { steps: STAGE1_STEPS, lr: STAGE1_LR, ..TrainConfig::desk_stage1() };
    let init = Model::new(desk_model_config(&vocab, codebook.feature_dim(), 0)).unwrap();
    let (base, s) = train(init, &pairs, &codebook, &vocab, &cfg, None).unwrap();
    note(&format!(
        "stage 1: {} pairs, {} steps, final loss_mm {:.4}, {:.0}s",
        pairs.len(),
        STAGE1_STEPS,
        s.metrics.last().unwrap().loss_mm,
        t.elapsed().as_secs_f64()
    ));
    Desk { vocab, codebook, suite, held, base }
}

fn stage2(desk: &Desk, data: DataMode, seed: u64, lambda: f64) -> Model {
    let t = Instant::now();
    let gen = GenConfig {
        mode: data,
        n: STAGE2_TRACES,
        seed: 100 + seed,
        profile: ComplexityProfile::mixed(),
        corruption: Default::default(),
    };
    let ds = generate_dataset(&gen, &desk.held).unwrap();
    let cfg = TrainConfig { stage: 2, steps: STAGE2_STEPS, lr: STAGE2_LR, lambda, seed, ..TrainConfig::desk_stage2() };
    let (m, s) = train(desk.base.clone(), &ds.traces, &desk.codebook, &desk.vocab, &cfg, None).unwrap();
    note(&format!(
        "stage 2 {data:?} seed {seed}: {} traces, final loss_mm {:.4}, {:.0}s",
        ds.traces.len(),
        s.metrics.last().unwrap().loss_mm,
        t.elapsed().as_secs_f64()
    ));
    m
}

// Plain conditional logits with a 5% probability floor; see the README for
// why the guided presets are not used at this scale.
fn sampling(mode: TraceMode, seed: u64) -> GenerateOptions {
    let params = SamplingParams { temperature: 1.0, top_k: 0, min_prob: 0.05, seed: 1000 + seed };
    GenerateOptions::new(mode, ScaleSchedule::conditional(), params)
}

fn eval(desk: &Desk, model: &Model, mode: TraceMode, seed: u64, name: &str) -> EvalReport {
    let mut g = ModelGenerator { model, vocab: desk.vocab, opts: sampling(mode, seed) };
    evaluate(&mut g, &desk.suite, mode, name).unwrap().0
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
#[ignore = "trains about a dozen desk-scale models; run in release"]
fn desk_claims() {
    let start = Instant::now();
    let desk = stage1();
    let two = GenevalCategory::TwoObj;

    let mut direct_two = Vec::new();
    let mut subgoal_two = Vec::new();
    let mut hyp_overall = Vec::new();
    let mut final_overall = Vec::new();
    let mut reports = Vec::new();
    let mut red_square = None;
    for seed in SEEDS {
        let direct = stage2(&desk, DataMode::Stage1, seed, 1.0);
        let r = eval(&desk, &direct, TraceMode::Direct, seed, &format!("direct s{seed}"));
        direct_two.push(r.final_image.get(two).unwrap_or(0.0));
        reports.push(r);
        if red_square.is_none() {
            let opts = GenerateOptions::new(TraceMode::Direct, ScaleSchedule::default(), SamplingParams {
                temperature: 0.0,
                top_k: 0,
                min_prob: 0.0,
                seed: 0,
            });
            let g = generate_trace(&direct, &desk.vocab, "a red square", &opts).unwrap();
            let hit = g.trace.as_ref().and_then(|t| t.final_image()).map(|b| {
                let img = decode_tokens(b, 8).unwrap().image;
                let objs = detect_objects(&img).objects;
                objs.len() == 1 && objs[0].key() == (Shape::Square, Color::Red)
            });
            red_square = Some(hit == Some(true));
        }

        let subgoal = stage2(&desk, DataMode::Subgoal, seed, 1.0);
        let r = eval(&desk, &subgoal, TraceMode::Subgoal, seed, &format!("subgoal s{seed}"));
        subgoal_two.push(r.final_image.get(two).unwrap_or(0.0));
        reports.push(r);

        let critique = stage2(&desk, DataMode::Critique, seed, 1.0);
        let r = eval(&desk, &critique, TraceMode::Critique, seed, &format!("critique s{seed}"));
        final_overall.push(r.final_image.overall.unwrap_or(0.0));
        hyp_overall.push(r.hypothesis.as_ref().and_then(|h| h.overall).unwrap_or(0.0));
        reports.push(r);
    }
    let _ = writeln!(std::io::stderr(), "{}", render_eval_markdown(&reports));

    let (d, s) = (mean(&direct_two), mean(&subgoal_two));
    let subgoal_pass = s >= d + 0.05;
    report(
        subgoal_pass,
        "subgoal claim",
        &format!("Two Obj. subgoal {s:.3} vs direct {d:.3} over seeds {SEEDS:?} (needs >= +0.05); per seed {subgoal_two:?} vs {direct_two:?}"),
    );
    let (h, f) = (mean(&hyp_overall), mean(&final_overall));
    let critique_pass = f >= h + 0.02;
    report(
        critique_pass,
        "critique claim",
        &format!("overall final {f:.3} vs hypothesis {h:.3} (needs >= +0.02); per seed {final_overall:?} vs {hyp_overall:?}"),
    );

    let gen = GenConfig {
        mode: DataMode::Stage1,
        n: STAGE2_TRACES,
        seed: 100,
        profile: ComplexityProfile::mixed(),
        corruption: Default::default(),
    };
    let data = generate_dataset(&gen, &desk.held).unwrap().traces;
    let setup = AblationSetup {
        init: &desk.base,
        data: &data,
        suite: &desk.suite,
        codebook: &desk.codebook,
        vocab: &desk.vocab,
        train: TrainConfig { stage: 2, steps: STAGE2_STEPS, lr: STAGE2_LR, ..TrainConfig::desk_stage2() },
        gen: sampling(TraceMode::Direct, 0),
    };
    let table = ablate_losses(&setup, &[0.0, 0.5, 1.0, 5.0], &[0]);
    let md = render_ablation_markdown(&table);
    let _ = writeln!(std::io::stderr(), "{md}");
    let shaped = table.rows.len() == 4 && table.rows.iter().all(|r| r.scores.is_some()) && md.lines().count() >= 6;
    report(shaped, "loss ablation", &format!("{} rows (lambda 0, 0.5, 1, 5; 1 seed), no directional assertion", table.rows.len()));

    let red = red_square == Some(true);
    report(red, "greedy 'a red square' (example)", "direct model, greedy decode, single red square detected");

    let hours = start.elapsed().as_secs_f64() / 3600.0;
    report(hours <= 3.0, "desk budget", &format!("{hours:.2} h CPU (<= 3 h)"));
    assert!(subgoal_pass && critique_pass && shaped && red && hours <= 3.0, "see the ACCEPTANCE lines above");
}
