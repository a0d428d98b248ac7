use std::collections::HashSet;
use std::error::Error;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mmcot::codec::{decode_tokens, Codebook};
use mmcot::datagen::{
    balanced_suite, generate_dataset, held_out_prompts, write_dataset, ComplexityProfile, CorruptionModel, DataMode,
    GenConfig, PromptRecord,
};
use mmcot::harness::{
    ablate_losses, desk_model_config, evaluate, image_png, render_ablation_markdown, write_report, AblationSetup,
    AblationTable, EvalRecord, EvalReport, ModelGenerator, ReplayGenerator, TraceGenerator, TrainConfig, Trainer,
};
use mmcot::model::{Checkpoint, Model};
use mmcot::sampler::{GenerateOptions, SamplingParams, ScaleSchedule};
use mmcot::sequence::{load_traces, write_traces, Payload, ThoughtTrace, TraceMode, UnifiedVocab};
use mmcot::toyworld::{DEFAULT_CANVAS, PALETTE_SIZE};

type Res<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "mmcot", version, about = "Toy multimodal chain-of-thought image generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a training dataset (traces.jsonl, scenes.jsonl, manifest.json).
    GenData(GenDataArgs),
    /// Generate a category-balanced evaluation suite.
    GenSuite(GenSuiteArgs),
    /// Train a model on a trace file.
    Train(TrainArgs),
    /// Sample traces for one or more prompts.
    Sample(SampleArgs),
    /// Score a model (or a trace file) on an evaluation suite.
    Eval(EvalArgs),
    /// Train and evaluate one model per loss weight.
    Ablate(AblateArgs),
    /// Render markdown tables and PNG grids from eval/ablation outputs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Stage1,
    Direct,
    Subgoal,
    Critique,
}

impl ModeArg {
    fn data_mode(self) -> DataMode {
        match self {
            ModeArg::Stage1 | ModeArg::Direct => DataMode::Stage1,
            ModeArg::Subgoal => DataMode::Subgoal,
            ModeArg::Critique => DataMode::Critique,
        }
    }

    fn trace_mode(self) -> TraceMode {
        match self {
            ModeArg::Stage1 | ModeArg::Direct => TraceMode::Direct,
            ModeArg::Subgoal => TraceMode::Subgoal,
            ModeArg::Critique => TraceMode::Critique,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `mixed`, `two-object` or an object range such as `1-3`.
    #[arg(long)]
    profile: Option<String>,
    /// JSON generation config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Suite whose multi-object prompts must not appear in the data.
    #[arg(long)]
    exclude_suite: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenSuiteArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    min_per_category: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOverrides {
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage: Option<u8>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    cond_dropout: Option<f64>,
}

impl TrainOverrides {
    fn resolve(&self, base: TrainConfig) -> Res<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => read_json(p)?,
            None => base,
        };
        if let Some(v) = self.stage {
            c.stage = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.checkpoint_every {
            c.checkpoint_every = v;
        }
        if let Some(v) = self.cond_dropout {
            c.cond_dropout = v;
        }
        c.seed = seed_or_env(self.seed.or((self.config.is_some()).then_some(c.seed)));
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Trace file (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Start from these weights with a fresh optimiser.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue an interrupted run, optimiser state included.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[command(flatten)]
    cfg: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Sampling {
    /// `cfg` (mode-specific guidance presets) or `conditional`.
    #[arg(long, default_value = "cfg")]
    preset: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    /// Probability floor below which tokens are never sampled.
    #[arg(long, default_value_t = 0.0)]
    min_prob: f64,
    #[arg(long)]
    seed: Option<u64>,
}

impl Sampling {
    fn options(&self, mode: TraceMode) -> Res<GenerateOptions> {
        let schedule = match self.preset.as_str() {
            "cfg" | "subgoal" | "critique" => ScaleSchedule::default(),
            "conditional" => ScaleSchedule::conditional(),
            other => return Err(format!("unknown preset {other:?}").into()),
        };
        let params = SamplingParams {
            temperature: self.temperature,
            top_k: self.top_k,
            min_prob: self.min_prob,
            seed: seed_or_env(self.seed),
        };
        Ok(GenerateOptions::new(mode, schedule, params))
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Repeatable.
    #[arg(long)]
    prompt: Vec<String>,
    /// One prompt per line, or a suite file.
    #[arg(long)]
    prompts_file: Option<PathBuf>,
    #[command(flatten)]
    sampling: Sampling,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    png_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, required_unless_present = "traces")]
    ckpt: Option<PathBuf>,
    /// Score these traces (one per suite prompt, in order) instead of sampling.
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    sampling: Sampling,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    suite: PathBuf,
    /// Starting weights shared by every cell.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,5")]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "direct")]
    mode: ModeArg,
    #[command(flatten)]
    cfg: TrainOverrides,
    #[command(flatten)]
    sampling: Sampling,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directories of `eval` runs.
    #[arg(long)]
    eval: Vec<PathBuf>,
    #[arg(long)]
    ablation: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn seed_or_env(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("MMCOT_SEED").ok()?.trim().parse().ok())
        .unwrap_or(0)
}

fn read_json<T: DeserializeOwned>(p: &Path) -> Res<T> {
    let f = File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Res<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(p, s)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(p: &Path) -> Res<Vec<T>> {
    let f = File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| format!("{}:{}: {e}", p.display(), i + 1))?);
        }
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(p: &Path, rows: &[T]) -> Res<()> {
    let mut w = BufWriter::new(File::create(p)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn vocab() -> UnifiedVocab {
    UnifiedVocab::standard(PALETTE_SIZE, DEFAULT_CANVAS)
}

fn codebook(p: Option<&Path>) -> Res<Codebook> {
    Ok(match p {
        Some(p) => Codebook::load(p)?,
        None => Codebook::default_palette(),
    })
}

fn load_model(p: &Path) -> Res<Model> {
    Ok(Model::from_checkpoint(&Checkpoint::load(p)?)?)
}

fn load_suite(p: &Path) -> Res<Vec<PromptRecord>> {
    read_jsonl(p)
}

fn gen_data(a: GenDataArgs) -> Res<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig {
            mode: a.mode.data_mode(),
            n: 1000,
            seed: 0,
            profile: ComplexityProfile::mixed(),
            corruption: CorruptionModel::default(),
        },
    };
    cfg.mode = a.mode.data_mode();
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(p) = &a.profile {
        cfg.profile = ComplexityProfile::from_name(p).ok_or_else(|| format!("unknown profile {p:?}"))?;
    }
    cfg.seed = seed_or_env(a.seed.or(a.config.is_some().then_some(cfg.seed)));
    let exclude = match &a.exclude_suite {
        Some(p) => held_out_prompts(&load_suite(p)?),
        None => HashSet::new(),
    };
    let ds = generate_dataset(&cfg, &exclude)?;
    write_dataset(&a.out, &ds)?;
    eprintln!(
        "wrote {} traces to {} (pass rate {:.3})",
        ds.manifest.kept,
        a.out.display(),
        ds.manifest.pass_rate
    );
    Ok(())
}

fn gen_suite(a: GenSuiteArgs) -> Res<()> {
    let suite = balanced_suite(a.n, seed_or_env(a.seed), a.min_per_category, &HashSet::new());
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_jsonl(&a.out, &suite)?;
    eprintln!("wrote {} prompts to {}", suite.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Res<()> {
    let traces = load_traces(&a.data)?;
    let cb = codebook(a.codebook.as_deref())?;
    let v = vocab();
    std::fs::create_dir_all(&a.out)?;
    let mut trainer = match (&a.resume, &a.init) {
        (Some(p), _) => {
            let ck = Checkpoint::load(p)?;
            let stored = Trainer::from_checkpoint(&ck, None)?.cfg;
            let cfg = a.cfg.resolve(stored)?;
            Trainer::from_checkpoint(&ck, Some(cfg))?
        }
        (None, Some(p)) => {
            let model = load_model(p)?;
            let stage = if a.cfg.stage == Some(1) { TrainConfig::desk_stage1() } else { TrainConfig::desk_stage2() };
            Trainer::new(model, a.cfg.resolve(stage)?)?
        }
        (None, None) => {
            let cfg = a.cfg.resolve(TrainConfig::desk_stage1())?;
            let model = Model::new(desk_model_config(&v, cb.feature_dim(), cfg.seed))?;
            Trainer::new(model, cfg)?
        }
    };
    write_json(&a.out.join("train_config.json"), &trainer.cfg)?;
    cb.save(&a.out.join("codebook.mmcb"))?;
    let s = trainer.run(&traces, &cb, &v, Some(&a.out))?;
    if let Some(m) = s.metrics.last() {
        eprintln!("step {} loss_total {:.5} loss_mm {:.5} loss_rec {:.5}", m.step, m.loss_total, m.loss_mm, m.loss_rec);
    }
    Ok(())
}

fn read_prompts(a: &SampleArgs) -> Res<Vec<String>> {
    let mut prompts = a.prompt.clone();
    if let Some(p) = &a.prompts_file {
        for line in std::fs::read_to_string(p)?.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<PromptRecord>(line) {
                Ok(r) => prompts.push(r.prompt),
                Err(_) => prompts.push(line.trim().to_string()),
            }
        }
    }
    if prompts.is_empty() {
        return Err("no prompts given (use --prompt or --prompts-file)".into());
    }
    Ok(prompts)
}

fn sample(a: SampleArgs) -> Res<()> {
    let model = load_model(&a.ckpt)?;
    let v = vocab();
    let mode = a.mode.trace_mode();
    let opts = a.sampling.options(mode)?;
    let prompts = read_prompts(&a)?;
    let mut gen = ModelGenerator { model: &model, vocab: v, opts };
    let mut traces = Vec::new();
    let mut failures = 0;
    for (i, p) in prompts.iter().enumerate() {
        let out = gen.generate(i, p)?;
        match out.trace {
            Some(t) => traces.push(t),
            None => {
                failures += 1;
                eprintln!("prompt {i} ({p:?}): {}", out.diagnostic.unwrap_or_else(|| "no trace".into()));
            }
        }
    }
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_traces(&mut w, &traces)?;
    w.flush()?;
    if let Some(dir) = &a.png_dir {
        std::fs::create_dir_all(dir)?;
        for (i, t) in traces.iter().enumerate() {
            export_pngs(dir, i, t)?;
        }
    }
    eprintln!("wrote {} traces ({failures} failed) to {}", traces.len(), a.out.display());
    Ok(())
}

fn export_pngs(dir: &Path, index: usize, t: &ThoughtTrace) -> Res<()> {
    for (k, seg) in t.segments.iter().enumerate() {
        if let Payload::Image(b) = &seg.payload {
            let img = decode_tokens(b, DEFAULT_CANVAS)?.image;
            std::fs::write(dir.join(format!("trace{index:04}_seg{k:02}.png")), image_png(&img, 8)?)?;
        }
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Res<()> {
    let suite = load_suite(&a.suite)?;
    let mode = a.mode.trace_mode();
    let name = a.name.clone().unwrap_or_else(|| mode.to_string());
    let (report, records) = match (&a.traces, &a.ckpt) {
        (Some(p), _) => evaluate(&mut ReplayGenerator(load_traces(p)?), &suite, mode, &name)?,
        (None, Some(ck)) => {
            let model = load_model(ck)?;
            let opts = a.sampling.options(mode)?;
            let mut g = ModelGenerator { model: &model, vocab: vocab(), opts };
            evaluate(&mut g, &suite, mode, &name)?
        }
        (None, None) => unreachable!("clap requires --ckpt or --traces"),
    };
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("eval.json"), &report)?;
    write_jsonl(&a.out.join("records.jsonl"), &records)?;
    print!("{}", mmcot::harness::render_eval_markdown(std::slice::from_ref(&report)));
    Ok(())
}

fn ablate(a: AblateArgs) -> Res<()> {
    let data = load_traces(&a.data)?;
    let suite = load_suite(&a.suite)?;
    let cb = codebook(a.codebook.as_deref())?;
    let v = vocab();
    let base = if a.init.is_some() { TrainConfig::desk_stage2() } else { TrainConfig::desk_stage1() };
    let train = a.cfg.resolve(base)?;
    let init = match &a.init {
        Some(p) => load_model(p)?,
        None => Model::new(desk_model_config(&v, cb.feature_dim(), train.seed))?,
    };
    let mode = a.mode.trace_mode();
    let setup = AblationSetup {
        init: &init,
        data: &data,
        suite: &suite,
        codebook: &cb,
        vocab: &v,
        train,
        gen: a.sampling.options(mode)?,
    };
    let table = ablate_losses(&setup, &a.lambdas, &a.seeds);
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("ablation.json"), &table)?;
    let md = render_ablation_markdown(&table);
    std::fs::write(a.out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn report(a: ReportArgs) -> Res<()> {
    let mut evals: Vec<(EvalReport, Vec<EvalRecord>)> = Vec::new();
    for dir in &a.eval {
        let r: EvalReport = read_json(&dir.join("eval.json"))?;
        let recs_path = dir.join("records.jsonl");
        let recs = if recs_path.exists() { read_jsonl(&recs_path)? } else { vec![] };
        evals.push((r, recs));
    }
    let ablation: Option<AblationTable> = match &a.ablation {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    let written = write_report(&a.out, &evals, ablation.as_ref(), DEFAULT_CANVAS)?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::GenSuite(a) => gen_suite(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::Report(a) => report(a),
    };
    if let Err(e) = r {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
