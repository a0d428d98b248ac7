//! Python bindings. Structured values (scenes, traces, reports) cross the
//! boundary as JSON strings; grids and token ids as plain lists.

use std::collections::HashSet;
use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use mmcot_core::codec::{decode_tokens, encode_image, Codebook, VisualTokenBlock};
use mmcot_core::datagen::{
    balanced_suite, generate_dataset, make_critique_trace, make_direct_trace, make_subgoal_trace, derive_rng,
    ComplexityProfile, CorruptionModel, DataMode, GenConfig,
};
use mmcot_core::harness::{desk_model_config, evaluate, ModelGenerator, ReplayGenerator, TrainConfig, Trainer};
use mmcot_core::model::{Checkpoint, Model as CoreModel};
use mmcot_core::sampler::{generate_trace, GenerateOptions, SamplingParams, ScaleSchedule};
use mmcot_core::sequence::{assemble_trace, parse_sequence, ThoughtTrace, TraceMode, UnifiedVocab};
use mmcot_core::toyworld::{
    describe_scene, detect_objects, render_scene, score_geneval, DescribeStyle, GenevalCategory, ImageGrid, SceneSpec,
    DEFAULT_CANVAS, PALETTE_SIZE,
};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scene(json: &str) -> PyResult<SceneSpec> {
    let s: SceneSpec = serde_json::from_str(json).map_err(err)?;
    s.validate().map_err(err)?;
    Ok(s)
}

fn trace(json: &str) -> PyResult<ThoughtTrace> {
    serde_json::from_str(json).map_err(err)
}

fn mode(name: &str) -> PyResult<TraceMode> {
    match name {
        "direct" => Ok(TraceMode::Direct),
        "subgoal" => Ok(TraceMode::Subgoal),
        "critique" => Ok(TraceMode::Critique),
        _ => Err(err(format!("unknown mode {name:?}"))),
    }
}

fn grid(rows: Vec<Vec<u8>>) -> PyResult<ImageGrid> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(err("grid must be square"));
    }
    ImageGrid::from_cells(n, rows.concat()).map_err(err)
}

fn rows(g: &ImageGrid) -> Vec<Vec<u8>> {
    g.cells().chunks(g.size()).map(<[u8]>::to_vec).collect()
}

fn vocab() -> UnifiedVocab {
    UnifiedVocab::standard(PALETTE_SIZE, DEFAULT_CANVAS)
}

/// Renders a scene (JSON) to a grid of palette indices.
#[pyfunction]
fn render(scene_json: &str) -> PyResult<Vec<Vec<u8>>> {
    Ok(rows(&render_scene(&scene(scene_json)?).map_err(err)?))
}

/// Detected objects of a grid, as JSON.
#[pyfunction]
fn detect(cells: Vec<Vec<u8>>) -> PyResult<String> {
    serde_json::to_string(&detect_objects(&grid(cells)?)).map_err(err)
}

#[pyfunction]
fn describe(scene_json: &str) -> PyResult<String> {
    describe_scene(&scene(scene_json)?, DescribeStyle::Relational).map_err(err)
}

#[pyfunction]
fn encode(cells: Vec<Vec<u8>>) -> PyResult<Vec<u16>> {
    Ok(encode_image(&grid(cells)?, PALETTE_SIZE).map_err(err)?.tokens().to_vec())
}

#[pyfunction]
fn decode(tokens: Vec<u16>) -> PyResult<Vec<Vec<u8>>> {
    let n = (tokens.len() as f64).sqrt() as usize;
    let block = VisualTokenBlock::new(tokens, PALETTE_SIZE).map_err(err)?;
    Ok(rows(&decode_tokens(&block, n).map_err(err)?.image))
}

/// Per-category scores of `cells` against the scene, as a JSON object.
#[pyfunction]
fn score(cells: Vec<Vec<u8>>, scene_json: &str) -> PyResult<String> {
    let spec = scene(scene_json)?;
    let det = detect_objects(&grid(cells)?);
    let mut out = serde_json::Map::new();
    for c in GenevalCategory::applicable(&spec) {
        out.insert(c.label().into(), score_geneval(&det, &spec, c).map_err(err)?.into());
    }
    Ok(serde_json::Value::Object(out).to_string())
}

/// Token ids of a trace (JSON) in the unified vocabulary.
#[pyfunction]
fn assemble(trace_json: &str) -> PyResult<Vec<u32>> {
    Ok(assemble_trace(&trace(trace_json)?, &vocab()).map_err(err)?.ids)
}

#[pyfunction]
fn parse(ids: Vec<u32>) -> PyResult<String> {
    serde_json::to_string(&parse_sequence(&ids, &vocab()).map_err(err)?).map_err(err)
}

/// Ground-truth trace for a scene in the given mode.
#[pyfunction]
#[pyo3(signature = (scene_json, mode_name, seed=0))]
fn make_trace(scene_json: &str, mode_name: &str, seed: u64) -> PyResult<String> {
    let spec = scene(scene_json)?;
    let t = match mode(mode_name)? {
        TraceMode::Direct => make_direct_trace(&spec),
        TraceMode::Subgoal => make_subgoal_trace(&spec),
        TraceMode::Critique => make_critique_trace(&spec, &CorruptionModel::default(), &mut derive_rng(seed, 0)),
    }
    .map_err(err)?;
    serde_json::to_string(&t).map_err(err)
}

/// Generated training traces as a list of JSON strings.
#[pyfunction]
#[pyo3(signature = (mode_name, n, seed=0, profile="mixed"))]
fn gen_data(mode_name: &str, n: usize, seed: u64, profile: &str) -> PyResult<Vec<String>> {
    let cfg = GenConfig {
        mode: match mode(mode_name)? {
            TraceMode::Direct => DataMode::Stage1,
            TraceMode::Subgoal => DataMode::Subgoal,
            TraceMode::Critique => DataMode::Critique,
        },
        n,
        seed,
        profile: ComplexityProfile::from_name(profile).ok_or_else(|| err(format!("unknown profile {profile:?}")))?,
        corruption: CorruptionModel::default(),
    };
    let ds = generate_dataset(&cfg, &HashSet::new()).map_err(err)?;
    ds.traces.iter().map(|t| serde_json::to_string(t).map_err(err)).collect()
}

/// Balanced evaluation suite as JSON lines (`{"prompt", "scene"}`).
#[pyfunction]
#[pyo3(signature = (n, seed=0, min_per_category=0))]
fn gen_suite(n: usize, seed: u64, min_per_category: usize) -> PyResult<Vec<String>> {
    balanced_suite(n, seed, min_per_category, &HashSet::new())
        .iter()
        .map(|r| serde_json::to_string(r).map_err(err))
        .collect()
}

/// A desk-scale transformer with its training state.
#[pyclass(name = "Model")]
struct PyModel {
    trainer: Trainer,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> PyResult<Self> {
        let v = vocab();
        let m = CoreModel::new(desk_model_config(&v, Codebook::default_palette().feature_dim(), seed)).map_err(err)?;
        Ok(Self {
            trainer: Trainer::new(m, TrainConfig::desk_stage1()).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(Path::new(path)).map_err(err)?;
        let trainer = match Trainer::from_checkpoint(&ck, None) {
            Ok(t) => t,
            Err(_) => Trainer::new(CoreModel::from_checkpoint(&ck).map_err(err)?, TrainConfig::desk_stage1())
                .map_err(err)?,
        };
        Ok(Self { trainer })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.trainer.to_checkpoint().save(Path::new(path)).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.trainer.model.weights.num_params()
    }

    #[getter]
    fn step(&self) -> usize {
        self.trainer.step
    }

    fn checksum(&self) -> u64 {
        self.trainer.model.weights.checksum()
    }

    /// Trains for `steps` more steps on JSON traces; returns per-step metrics as JSON.
    #[pyo3(signature = (traces, steps, stage=1, batch_size=8, lr=1e-3, lam=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        traces: Vec<String>,
        steps: usize,
        stage: u8,
        batch_size: usize,
        lr: f64,
        lam: f64,
        seed: u64,
    ) -> PyResult<String> {
        let data = traces.iter().map(|t| trace(t)).collect::<PyResult<Vec<_>>>()?;
        self.trainer.cfg = TrainConfig {
            stage,
            steps: self.trainer.step + steps,
            batch_size,
            lr,
            lambda: lam,
            seed,
            ..TrainConfig::desk_stage1()
        };
        let s = self
            .trainer
            .run(&data, &Codebook::default_palette(), &vocab(), None)
            .map_err(err)?;
        serde_json::to_string(&s.metrics).map_err(err)
    }

    /// Samples one trace; returns its JSON, or None when decoding failed.
    #[pyo3(signature = (prompt, mode_name="direct", temperature=1.0, seed=0, guidance=false))]
    fn generate(&self, prompt: &str, mode_name: &str, temperature: f64, seed: u64, guidance: bool) -> PyResult<Option<String>> {
        let sched = if guidance { ScaleSchedule::default() } else { ScaleSchedule::conditional() };
        let opts = GenerateOptions::new(mode(mode_name)?, sched, SamplingParams { temperature, top_k: 0, min_prob: 0.0, seed });
        let g = generate_trace(&self.trainer.model, &vocab(), prompt, &opts).map_err(err)?;
        g.trace.map(|t| serde_json::to_string(&t).map_err(err)).transpose()
    }

    /// Evaluates on suite records (JSON lines); returns the report as JSON.
    #[pyo3(signature = (suite, mode_name, temperature=1.0, seed=0, guidance=false))]
    fn evaluate(&self, suite: Vec<String>, mode_name: &str, temperature: f64, seed: u64, guidance: bool) -> PyResult<String> {
        let recs = suite
            .iter()
            .map(|s| serde_json::from_str(s).map_err(err))
            .collect::<PyResult<Vec<_>>>()?;
        let m = mode(mode_name)?;
        let sched = if guidance { ScaleSchedule::default() } else { ScaleSchedule::conditional() };
        let opts = GenerateOptions::new(m, sched, SamplingParams { temperature, top_k: 0, min_prob: 0.0, seed });
        let mut g = ModelGenerator {
            model: &self.trainer.model,
            vocab: vocab(),
            opts,
        };
        let (r, _) = evaluate(&mut g, &recs, m, "model").map_err(err)?;
        serde_json::to_string(&r).map_err(err)
    }
}

/// Scores ground-truth traces for suite records; an upper-bound sanity check.
#[pyfunction]
fn evaluate_traces(suite: Vec<String>, traces: Vec<String>, mode_name: &str) -> PyResult<String> {
    let recs = suite
        .iter()
        .map(|s| serde_json::from_str(s).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    let ts = traces.iter().map(|t| trace(t)).collect::<PyResult<Vec<_>>>()?;
    let (r, _) = evaluate(&mut ReplayGenerator(ts), &recs, mode(mode_name)?, "replay").map_err(err)?;
    serde_json::to_string(&r).map_err(err)
}

#[pymodule]
fn mmcot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(describe, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(assemble, m)?)?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(make_trace, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(gen_suite, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_traces, m)?)?;
    m.add("VOCAB_SIZE", vocab().size())?;
    Ok(())
}
