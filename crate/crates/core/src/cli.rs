//! Command-line front end: `train`, `eval`, `sample`, `gradcheck` and
//! `flowtrace`.
//!
//! Exit codes: 0 ok, 1 check failed, 2 usage or config error, 3 divergence,
//! 4 I/O or checkpoint error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cells::Arch;
use crate::diagnostics::{grad_check, trace_initial_flow, GradCheckConfig, Oracle};
use crate::error::Error;
use crate::linalg::{Real, Rng};
use crate::sequence::{ModelLayout, Predictor, SequenceSample, Topology, TopologyKind};
use crate::tasks::{
    load_checkpoint, load_text_corpus, make_copy_task, one_hot, sample_char_windows, save_checkpoint, Vocab,
};
use crate::training::{evaluate, StepMetrics, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Charlm,
}

/// A complete run description: the training hyperparameters plus model
/// shape, task and file locations. Loaded from a JSON file; command-line
/// flags take precedence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub arch: Arch,
    /// Defaults to what the task needs (many-to-one for copy, many-to-many
    /// for charlm).
    pub topology: Option<TopologyKind>,
    pub task: TaskKind,
    pub corpus: Option<PathBuf>,
    /// Copy task: sequence length; the symbol at step 0 is the target at
    /// the last step.
    pub lag: usize,
    /// Copy task: number of distinct symbols.
    pub symbols: usize,
    /// Character model: training window length.
    pub window: usize,
    pub hidden: usize,
    pub layers: usize,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    /// Print progress to stderr every this many steps (0 = never).
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            arch: Arch::Lstm,
            topology: None,
            task: TaskKind::Copy,
            corpus: None,
            lag: 20,
            symbols: 8,
            window: 32,
            hidden: 32,
            layers: 1,
            checkpoint_in: None,
            checkpoint_out: None,
            metrics: None,
            log_every: 0,
        }
    }
}

impl RunConfig {
    /// Builds a config from an optional JSON object with `overrides` applied
    /// on top, rejecting unknown keys.
    pub fn from_parts(file: Option<Value>, overrides: Map<String, Value>) -> Result<Self, String> {
        let mut obj = match file {
            Some(Value::Object(m)) => m,
            Some(_) => return Err("config file must hold a JSON object".into()),
            None => Map::new(),
        };
        obj.extend(overrides);
        let known = match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(format!("unknown config key '{k}'"));
        }
        serde_json::from_value(Value::Object(obj)).map_err(|e| format!("bad config: {e}"))
    }

    pub fn load(path: Option<&Path>, overrides: Map<String, Value>) -> Result<Self, Failure> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
                let v = serde_json::from_str(&text)
                    .map_err(|e| Failure::Usage(format!("{}: not valid JSON: {e}", p.display())))?;
                Some(v)
            }
            None => None,
        };
        Self::from_parts(file, overrides).map_err(Failure::Usage)
    }

    pub fn topology_kind(&self) -> TopologyKind {
        self.topology.unwrap_or(match self.task {
            TaskKind::Copy => TopologyKind::ManyToOne,
            TaskKind::Charlm => TopologyKind::ManyToMany,
        })
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if self.hidden == 0 || self.layers == 0 {
            return Err("hidden size and layer count must be positive".into());
        }
        let topo = self.topology_kind();
        match self.task {
            TaskKind::Copy => {
                if self.corpus.is_some() {
                    return Err("the copy task takes no corpus".into());
                }
                if self.lag < 2 || self.symbols < 2 {
                    return Err(format!(
                        "copy task needs lag >= 2 and symbols >= 2, got {} and {}",
                        self.lag, self.symbols
                    ));
                }
                if topo != TopologyKind::ManyToOne {
                    return Err(format!("the copy task is many-to-one, not {topo}"));
                }
            }
            TaskKind::Charlm => {
                if self.corpus.is_none() {
                    return Err("charlm needs a corpus path".into());
                }
                if self.window == 0 {
                    return Err("window must be positive".into());
                }
                if topo != TopologyKind::ManyToMany {
                    return Err(format!("charlm is many-to-many, not {topo}"));
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self, input_dim: usize, output_dim: usize) -> ModelLayout {
        self.train
            .layout(self.arch, input_dim, self.hidden, output_dim, self.layers)
    }
}

/// Why a command stopped early, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(String),
    Diverged(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Check(_) => EXIT_CHECK_FAILED,
            Failure::Diverged(_) => EXIT_DIVERGED,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Check(m) | Failure::Diverged(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format(_) => Failure::Io(e.to_string()),
            Error::NonFinite(_) => Failure::Diverged(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "seqgrad", version, about = "Train and inspect recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write per-step metrics.
    Train(TrainArgs),
    /// Loss and accuracy of a checkpoint on freshly drawn data.
    Eval(EvalArgs),
    /// Generate text from a character-model checkpoint.
    Sample(SampleArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Per-step gradient norms of a freshly initialised network.
    Flowtrace(FlowArgs),
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_topology(s: &str) -> Result<TopologyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_set(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set learning_rate=0.01`. Applied
    /// after every other flag.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    set: Vec<(String, Value)>,
}

impl ConfigArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        if let Some(a) = self.arch {
            m.insert("arch".into(), Value::String(a.name().into()));
        }
        if let Some(h) = self.hidden {
            m.insert("hidden".into(), h.into());
        }
        if let Some(l) = self.layers {
            m.insert("layers".into(), l.into());
        }
        if let Some(s) = self.seed {
            m.insert("seed".into(), s.into());
        }
        m
    }

    fn apply_set(&self, m: &mut Map<String, Value>) {
        for (k, v) in &self.set {
            m.insert(k.clone(), v.clone());
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, value_enum)]
    task: Option<TaskKind>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    lag: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<Real>,
    #[arg(long)]
    optimizer: Option<String>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of sequences to draw.
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Defaults to the checkpoint's config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Character model only; defaults to the corpus it was trained on.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SampleMode {
    Greedy,
    Stochastic,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    seed_text: String,
    #[arg(long, default_value_t = 100)]
    length: usize,
    #[arg(long, value_enum, default_value_t = SampleMode::Greedy)]
    mode: SampleMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long, default_value_t = 3)]
    input_dim: usize,
    #[arg(long, default_value_t = 3)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    output_dim: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: Real,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: Real,
    #[arg(long, value_parser = parse_topology, default_value = "many-to-many")]
    topology: TopologyKind,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long)]
    layer_norm: bool,
    #[arg(long)]
    projection_dim: Option<usize>,
    #[arg(long)]
    trainable_initial_state: bool,
    #[arg(long, default_value_t = 1.0)]
    keep_prob: Real,
    #[arg(long)]
    truncation: Option<usize>,
    /// `extended` (double-double reference loss) or `native` (f64).
    #[arg(long, default_value = "extended")]
    oracle: String,
    /// Write `param_name,rel_error` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FlowArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Sequence length.
    #[arg(long, default_value_t = 50)]
    length: usize,
    #[arg(long, default_value_t = 4)]
    input_dim: usize,
    #[arg(long, default_value_t = 4)]
    output_dim: usize,
    /// Zero every recurrent matrix after initialisation.
    #[arg(long)]
    zero_recurrent: bool,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() && !e.to_string().contains("Usage:") {
                let mut cmd = Cli::command();
                cmd.build();
                let sub = args.get(1).and_then(|a| a.to_str());
                let usage = match sub.and_then(|s| cmd.find_subcommand_mut(s)) {
                    Some(c) => c.render_usage(),
                    None => cmd.render_usage(),
                };
                eprintln!("\n{usage}");
            }
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Flowtrace(a) => cmd_flowtrace(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

/// Where training batches come from.
enum DataSource {
    Copy {
        lag: usize,
        symbols: usize,
    },
    Chars {
        vocab: Vocab,
        seq: Vec<usize>,
        window: usize,
    },
}

impl DataSource {
    fn open(cfg: &RunConfig, corpus: Option<&Path>) -> Result<Self, Failure> {
        Ok(match cfg.task {
            TaskKind::Copy => DataSource::Copy {
                lag: cfg.lag,
                symbols: cfg.symbols,
            },
            TaskKind::Charlm => {
                let path = corpus
                    .or(cfg.corpus.as_deref())
                    .expect("validated: charlm has a corpus");
                let (vocab, seq) = load_text_corpus(path)?;
                if seq.len() < cfg.window + 1 {
                    return Err(Failure::Usage(format!(
                        "corpus has {} characters, fewer than window {} + 1",
                        seq.len(),
                        cfg.window
                    )));
                }
                DataSource::Chars {
                    vocab,
                    seq,
                    window: cfg.window,
                }
            }
        })
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            DataSource::Copy { symbols, .. } => (symbols + 1, *symbols),
            DataSource::Chars { vocab, .. } => (vocab.len(), vocab.len()),
        }
    }

    fn vocab(&self) -> Option<Vocab> {
        match self {
            DataSource::Chars { vocab, .. } => Some(vocab.clone()),
            DataSource::Copy { .. } => None,
        }
    }

    fn draw(&self, rng: &mut Rng, count: usize) -> crate::error::Result<Vec<SequenceSample>> {
        match self {
            DataSource::Copy { lag, symbols } => make_copy_task(rng, *lag, *symbols, count),
            DataSource::Chars { vocab, seq, window } => sample_char_windows(rng, seq, vocab.len(), *window, count),
        }
    }
}

fn train_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut m = a.common.overrides();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            m.insert(k.into(), v);
        }
    };
    put("task", a.task.map(|t| serde_json::to_value(t).expect("enum")));
    put(
        "corpus",
        a.corpus.as_ref().map(|p| Value::String(p.display().to_string())),
    );
    put("lag", a.lag.map(Into::into));
    put("steps", a.steps.map(Into::into));
    put("batch_size", a.batch_size.map(Into::into));
    put("learning_rate", a.learning_rate.map(|v| (v as f64).into()));
    put(
        "optimizer",
        a.optimizer.clone().map(|s| Value::String(s.to_lowercase())),
    );
    put(
        "checkpoint_in",
        a.resume.as_ref().map(|p| Value::String(p.display().to_string())),
    );
    put(
        "checkpoint_out",
        a.checkpoint_out
            .as_ref()
            .map(|p| Value::String(p.display().to_string())),
    );
    put(
        "metrics",
        a.metrics.as_ref().map(|p| Value::String(p.display().to_string())),
    );
    put("log_every", a.log_every.map(Into::into));
    if a.parallel {
        put("parallel", Some(Value::Bool(true)));
    }
    a.common.apply_set(&mut m);
    let cfg = RunConfig::load(a.common.config.as_deref(), m)?;
    cfg.validate().map_err(Failure::Usage)?;
    if cfg.checkpoint_out.is_none() {
        return Err(Failure::Usage("train needs checkpoint_out".into()));
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<i32, Failure> {
    let cfg = train_config(&a)?;
    let data = DataSource::open(&cfg, None)?;
    let (input_dim, output_dim) = data.dims();
    let layout = cfg.layout(input_dim, output_dim);
    let topology = Topology::new(cfg.topology_kind());

    let mut trainer = match &cfg.checkpoint_in {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.params.layout != layout {
                return Err(Failure::Usage(format!(
                    "checkpoint {} holds a different model than the config describes",
                    path.display()
                )));
            }
            if ck.vocab != data.vocab() {
                return Err(Failure::Usage("checkpoint vocabulary does not match the corpus".into()));
            }
            if ck.optimizer.kind != cfg.train.optimizer {
                return Err(Failure::Usage(format!(
                    "checkpoint was trained with {}, config asks for {}",
                    ck.optimizer.kind, cfg.train.optimizer
                )));
            }
            let mut t = Trainer::from_checkpoint(ck, topology)?;
            t.config = cfg.train.clone();
            t
        }
        None => Trainer::new(&layout, cfg.train.clone(), topology)?,
    };

    let mut metrics = match &cfg.metrics {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io_err(p))?);
            writeln!(w, "{}", StepMetrics::CSV_HEADER).map_err(io_err(p))?;
            Some((p.as_path(), w))
        }
        None => None,
    };

    let mut outcome = Ok(());
    for _ in 0..cfg.train.steps {
        let step = data
            .draw(&mut trainer.rng, cfg.train.batch_size)
            .and_then(|batch| trainer.train_step(&batch));
        let m = match step {
            Ok(m) => m,
            Err(e) => {
                outcome = Err(Failure::from(e));
                break;
            }
        };
        if let Some((p, w)) = metrics.as_mut() {
            writeln!(w, "{}", m.csv_row()).map_err(io_err(p))?;
        }
        if cfg.log_every > 0 && m.step % cfg.log_every as u64 == 0 {
            eprintln!(
                "step {:>6}  loss {:.5}  norm_loss {:.5}  grad_norm {:.4}{}",
                m.step,
                m.loss,
                m.norm_loss,
                m.grad_norm,
                if m.clipped { "  clipped" } else { "" }
            );
        }
    }
    if let Some((p, mut w)) = metrics {
        w.flush().map_err(io_err(p))?;
    }
    outcome?;

    let out = cfg.checkpoint_out.as_deref().expect("validated");
    let run = serde_json::to_value(&cfg).ok();
    save_checkpoint(out, &trainer.checkpoint(data.vocab(), run))?;
    Ok(EXIT_OK)
}

fn run_config_of(ck: &crate::tasks::Checkpoint) -> Result<RunConfig, Failure> {
    let v = ck
        .run
        .clone()
        .ok_or_else(|| Failure::Usage("checkpoint carries no run config".into()))?;
    let cfg: RunConfig =
        serde_json::from_value(v).map_err(|e| Failure::Io(format!("bad run config in checkpoint: {e}")))?;
    Ok(cfg)
}

fn cmd_eval(a: EvalArgs) -> Result<i32, Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = run_config_of(&ck)?;
    if a.count == 0 {
        return Err(Failure::Usage("count must be positive".into()));
    }
    let data = DataSource::open(&cfg, a.corpus.as_deref())?;
    if data.vocab() != ck.vocab {
        return Err(Failure::Usage("corpus vocabulary does not match the checkpoint".into()));
    }
    let mut rng = Rng::new(a.seed.unwrap_or(ck.config.seed));
    let samples = data.draw(&mut rng, a.count)?;
    let r = evaluate(&ck.params, &samples, Topology::new(cfg.topology_kind()))?;
    println!(
        "samples={} targets={} loss={} loss_per_target={} accuracy={}",
        r.samples, r.targets, r.loss_per_sample, r.loss_per_target, r.accuracy
    );
    Ok(EXIT_OK)
}

fn cmd_sample(a: SampleArgs) -> Result<i32, Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let vocab = ck
        .vocab
        .as_ref()
        .ok_or_else(|| Failure::Usage("checkpoint has no vocabulary (not a character model)".into()))?;
    let l = &ck.params.layout;
    if l.input_dim != vocab.len() || l.output_dim != vocab.len() {
        return Err(Failure::Usage(
            "checkpoint dimensions do not match its vocabulary".into(),
        ));
    }
    let seed_idx = vocab.encode(&a.seed_text)?;
    let mut rng = Rng::new(a.seed);
    let mut pred = Predictor::new(&ck.params)?;
    let mut dist = pred.current()?;
    for &i in &seed_idx {
        dist = pred.step(&one_hot(i, vocab.len())?)?;
    }
    let mut out = Vec::with_capacity(a.length);
    for _ in 0..a.length {
        let next = match a.mode {
            SampleMode::Greedy => dist.argmax().expect("non-empty vocabulary"),
            SampleMode::Stochastic => rng.categorical(&dist),
        };
        out.push(next);
        dist = pred.step(&one_hot(next, vocab.len())?)?;
    }
    println!("{}{}", a.seed_text, vocab.decode(&out)?);
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32, Failure> {
    if !(a.tolerance >= 0.0) {
        return Err(Failure::Usage("tolerance must be non-negative".into()));
    }
    let oracle: Oracle = a.oracle.parse()?;
    let cfg = GradCheckConfig {
        topology: a.topology,
        seed: a.seed,
        tolerance: a.tolerance,
        epsilon: a.epsilon,
        layers: a.layers,
        layer_norm: a.layer_norm,
        projection_dim: a.projection_dim,
        trainable_initial_state: a.trainable_initial_state,
        keep_prob: a.keep_prob,
        truncation: a.truncation,
        oracle,
        ..GradCheckConfig::new(a.arch, a.input_dim, a.hidden, a.output_dim, a.steps)
    };
    cfg.layout().validate()?;
    let report = grad_check(&cfg)?;
    println!("{}", report.summary());
    if let Some(p) = &a.csv {
        report.write_csv(p)?;
    }
    if report.passed {
        Ok(EXIT_OK)
    } else {
        Err(Failure::Check(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_rel_error, report.tolerance
        )))
    }
}

fn cmd_flowtrace(a: FlowArgs) -> Result<i32, Failure> {
    let mut m = a.common.overrides();
    a.common.apply_set(&mut m);
    let cfg = RunConfig::load(a.common.config.as_deref(), m)?;
    cfg.train.validate()?;
    if a.length == 0 {
        return Err(Failure::Usage("length must be positive".into()));
    }
    let layout = cfg
        .train
        .layout(cfg.arch, a.input_dim, cfg.hidden, a.output_dim, cfg.layers);
    layout.validate()?;
    let trace = trace_initial_flow(&layout, &cfg.train, a.length, a.zero_recurrent)?;
    match &a.out {
        Some(p) => trace.write_csv(p)?,
        None => print!("{}", trace.to_csv()),
    }
    eprintln!("{}: decay ratio {:.3e}", trace.config, trace.decay_ratio());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn cfg(v: Value) -> Result<RunConfig, String> {
        let c = RunConfig::from_parts(Some(v), Map::new())?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn defaults_validate() {
        let c = cfg(json!({})).unwrap();
        assert_eq!(c.topology_kind(), TopologyKind::ManyToOne);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn flattened_keys_and_overrides() {
        let mut o = Map::new();
        o.insert("learning_rate".into(), json!(0.5));
        let c = RunConfig::from_parts(Some(json!({"learning_rate": 0.1, "arch": "gru"})), o).unwrap();
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.arch, Arch::Gru);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        for bad in [
            json!({"task": "charlm"}),
            json!({"task": "copy", "corpus": "x.txt"}),
            json!({"task": "copy", "topology": "many-to-many"}),
            json!({"lag": 1}),
            json!({"hidden": 0}),
            json!({"learning_rate": -1.0}),
            json!({"keep_prob": 0.0}),
            json!({"truncation": 0}),
            json!({"arch": "transformer"}),
            json!({"learning_rat": 0.1}),
        ] {
            assert!(cfg(bad.clone()).is_err(), "{bad}");
        }
        assert!(cfg(json!({"task": "charlm", "corpus": "c.txt"})).is_ok());
    }

    #[test]
    fn set_values_parse_as_json_or_string() {
        assert_eq!(parse_set("a=0.5").unwrap(), ("a".into(), json!(0.5)));
        assert_eq!(parse_set("clip_threshold=null").unwrap().1, Value::Null);
        assert_eq!(parse_set("optimizer=sgd").unwrap().1, json!("sgd"));
        assert!(parse_set("novalue").is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(Failure::from(Error::NonFinite("loss")).code(), EXIT_DIVERGED);
        assert_eq!(Failure::from(Error::Format("x".into())).code(), EXIT_IO);
        assert_eq!(Failure::from(Error::InvalidArgument("x".into())).code(), EXIT_USAGE);
    }

    #[test]
    fn bad_arch_is_usage_error() {
        assert_eq!(run(["seqgrad", "gradcheck", "--arch", "cnn"]), EXIT_USAGE);
        assert_eq!(run(["seqgrad", "nope"]), EXIT_USAGE);
    }
}
