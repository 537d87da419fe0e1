//! Experiment front end shared by the command-line tool and the tests:
//! configuration loading, the four commands, and their output files.
//!
//! Every command writes into an output directory. Apart from `timing.json`,
//! which holds wall-clock measurements, every file is a pure function of the
//! resolved configuration.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::costmodel::{self, perf_improvement, project_runtime, speedup, Schedule, SweepRow};
use crate::driver::{self, CorpusSource, IterRecord, Mode, RunConfig, RunOutput, RunStats, TrajectoryLog, WorkerMode};
use crate::error::{Error, Result};
use crate::numerics::{self, Batch, Corpus, ModelConfig};
use crate::optim::{AdamWConfig, ScheduleConfig};
use crate::params::ParamVector;
use crate::real::{Precision, Real};

pub const CODE_VERSION: &str = concat!("pier-core ", env!("CARGO_PKG_VERSION"));

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Every key the configuration file accepts. Missing keys take the desk
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub mode: Mode,
    /// Modes run by `compare`.
    pub modes: Vec<Mode>,
    pub seed: u64,
    /// Seeds run by `compare`; empty means just `seed`.
    pub seeds: Vec<u64>,
    pub workers: WorkerMode,

    pub groups: usize,
    pub dp_per_group: usize,
    pub tp_size: usize,
    pub global_batch: usize,
    pub val_batches: usize,
    pub offload: bool,

    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub precision: Precision,

    pub total_iters: usize,
    pub warmup_fraction: f64,
    pub sync_interval: usize,
    pub inner_lr_peak: f64,
    pub inner_lr_min: f64,
    pub inner_warmup_fraction: f64,
    /// Iteration at which the inner cosine reaches its minimum; 0 means
    /// `total_iters`.
    pub decay_iters: usize,

    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,

    pub outer_lr: Option<f64>,
    pub outer_mu: Option<f64>,

    /// Text file to train on; the synthetic Markov corpus when absent.
    pub corpus_file: Option<PathBuf>,
    pub val_fraction: f64,
    pub chain_seed: u64,
    pub train_len: usize,
    pub val_len: usize,

    pub preset: String,
    pub gpus: Vec<usize>,
    pub intervals: Vec<usize>,

    pub gradcheck_epsilon: f64,
    pub gradcheck_coords: usize,
    pub gradcheck_threshold: f64,
    /// Relative perturbation applied to the analytic gradient before
    /// checking it. Only useful to confirm that the check can fail.
    pub gradcheck_corrupt: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let run = RunConfig::default();
        let m = run.model;
        let s = run.sched;
        let a = run.adamw;
        let (chain_seed, train_len, val_len) = match run.corpus {
            CorpusSource::Synthetic {
                chain_seed,
                train_len,
                val_len,
            } => (chain_seed, train_len, val_len),
            CorpusSource::File { .. } => unreachable!("default corpus is synthetic"),
        };
        Settings {
            mode: run.mode,
            modes: vec![Mode::AdamwBaseline, Mode::DilocoBaseline, Mode::Pier],
            seed: run.seed,
            seeds: Vec::new(),
            workers: run.workers,
            groups: run.groups,
            dp_per_group: run.dp_per_group,
            tp_size: run.tp_size,
            global_batch: run.global_batch,
            val_batches: run.val_batches,
            offload: run.offload,
            vocab_size: m.vocab_size,
            embed_dim: m.embed_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            seq_len: m.seq_len,
            precision: m.precision,
            total_iters: s.total_iters,
            warmup_fraction: s.warmup_fraction,
            sync_interval: s.sync_interval,
            inner_lr_peak: s.inner_lr_peak,
            inner_lr_min: s.inner_lr_min,
            inner_warmup_fraction: s.inner_warmup_fraction,
            decay_iters: 0,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            clip_norm: a.clip_norm,
            outer_lr: None,
            outer_mu: None,
            corpus_file: None,
            val_fraction: 0.1,
            chain_seed,
            train_len,
            val_len,
            preset: "a100-node4".into(),
            gpus: vec![8, 16, 32, 64, 128, 256],
            intervals: vec![50, 100, 200, 500],
            gradcheck_epsilon: 1e-5,
            gradcheck_coords: 64,
            gradcheck_threshold: 1e-4,
            gradcheck_corrupt: 0.0,
        }
    }
}

impl Settings {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            seq_len: self.seq_len,
            precision: self.precision,
        }
    }

    pub fn sched(&self) -> ScheduleConfig {
        ScheduleConfig {
            total_iters: self.total_iters,
            warmup_fraction: self.warmup_fraction,
            sync_interval: self.sync_interval,
            inner_lr_peak: self.inner_lr_peak,
            inner_lr_min: self.inner_lr_min,
            inner_warmup_fraction: self.inner_warmup_fraction,
            decay_iters: if self.decay_iters == 0 {
                self.total_iters
            } else {
                self.decay_iters
            },
        }
    }

    pub fn corpus_source(&self) -> CorpusSource {
        match &self.corpus_file {
            Some(path) => CorpusSource::File {
                path: path.clone(),
                val_fraction: self.val_fraction,
            },
            None => CorpusSource::Synthetic {
                chain_seed: self.chain_seed,
                train_len: self.train_len,
                val_len: self.val_len,
            },
        }
    }

    /// Validated run configuration for one mode and seed.
    pub fn run_config(&self, mode: Mode, seed: u64) -> Result<RunConfig> {
        let cfg = RunConfig {
            mode,
            model: self.model(),
            sched: self.sched(),
            adamw: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
                clip_norm: self.clip_norm,
            },
            groups: self.groups,
            dp_per_group: self.dp_per_group,
            tp_size: self.tp_size,
            seed,
            corpus: self.corpus_source(),
            global_batch: self.global_batch,
            val_batches: self.val_batches,
            offload: self.offload,
            workers: self.workers,
            outer_lr_override: self.outer_lr,
            outer_mu_override: self.outer_mu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn compare_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize to TOML")
    }
}

/// Reads the configuration file (if any) and applies `key=value` overrides
/// in order. Values use TOML syntax; bare words are taken as strings.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Settings> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.as_str(), "override must look like key=value"))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.to_string(), value);
    }
    let settings: Settings = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(field_of(&e), e.message().to_string()))?;
    Ok(settings)
}

/// Best guess at the key a deserialization error is about.
fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`')
        .nth(1)
        .filter(|f| !f.is_empty())
        .unwrap_or("config")
        .to_string()
}

/// Builds one JSON object with floats written to 17 significant digits.
struct JsonLine {
    buf: String,
}

impl JsonLine {
    fn new() -> Self {
        JsonLine { buf: String::from("{") }
    }

    fn key(&mut self, k: &str) -> &mut String {
        if self.buf.len() > 1 {
            self.buf.push(',');
        }
        self.buf.push_str(&serde_json::to_string(k).expect("string serializes"));
        self.buf.push(':');
        &mut self.buf
    }

    fn str(mut self, k: &str, v: &str) -> Self {
        let s = serde_json::to_string(v).expect("string serializes");
        self.key(k).push_str(&s);
        self
    }

    fn int(mut self, k: &str, v: u64) -> Self {
        self.key(k).push_str(&v.to_string());
        self
    }

    fn num(mut self, k: &str, v: f64) -> Self {
        let s = fmt_f64(v);
        self.key(k).push_str(&s);
        self
    }

    fn opt_num(self, k: &str, v: Option<f64>) -> Self {
        match v {
            Some(x) => self.num(k, x),
            None => self.raw(k, "null"),
        }
    }

    fn bool(self, k: &str, v: bool) -> Self {
        self.raw(k, if v { "true" } else { "false" })
    }

    fn raw(mut self, k: &str, json: &str) -> Self {
        self.key(k).push_str(json);
        self
    }

    fn finish(mut self) -> String {
        self.buf.push('}');
        self.buf
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".into()
    }
}

fn header(command: &str, settings: &Settings, extra: &[(&str, String)]) -> String {
    let cfg = serde_json::to_string(settings).expect("settings serialize to JSON");
    let mut line = JsonLine::new()
        .str("kind", "header")
        .str("command", command)
        .str("code_version", CODE_VERSION)
        .int("seed", settings.seed);
    for (k, v) in extra {
        line = line.raw(k, v);
    }
    line.raw("config", &cfg).finish()
}

fn record_line(r: &IterRecord) -> String {
    let phase = serde_json::to_string(&r.phase).expect("phase serializes");
    let digest = match &r.params_digest {
        Some(d) => serde_json::to_string(d).expect("digest serializes"),
        None => "null".into(),
    };
    JsonLine::new()
        .int("iter", r.iter as u64)
        .raw("phase", &phase)
        .num("train_loss", r.train_loss)
        .opt_num("val_loss", r.val_loss)
        .num("inner_lr", r.inner_lr)
        .opt_num("outer_lr", r.outer_lr)
        .opt_num("mu", r.mu)
        .int("comm_bytes", r.comm_bytes)
        .raw("params_digest", &digest)
        .finish()
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        out.write_all(l.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the records of a trajectory file, skipping its header.
pub fn read_trajectory(path: &Path) -> Result<Vec<IterRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    if !head.contains("\"kind\":\"header\"") {
        return Err(Error::Format(format!("{} has no header line", path.display())));
    }
    lines
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

const PARAMS_MAGIC: &[u8; 8] = b"PIERPRM\0";
const PARAMS_VERSION: u32 = 1;

/// Parameters read back from a `params.bin` file.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredParams {
    Single(ParamVector<f32>),
    Double(ParamVector<f64>),
}

/// Layout: 8-byte magic, `u32` format version, `u32` bytes per element,
/// `u64` element count, then the elements; all little-endian.
pub fn write_params<T: Real>(path: &Path, params: &ParamVector<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(24 + params.len() * T::PRECISION.width());
    bytes.extend_from_slice(PARAMS_MAGIC);
    bytes.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(T::PRECISION.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&params.to_le_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<StoredParams> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != PARAMS_MAGIC {
        return Err(bad("not a parameter file"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if word(8) != PARAMS_VERSION {
        return Err(bad("unsupported version"));
    }
    let width = word(12) as usize;
    let len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let body = &bytes[24..];
    if body.len() != len.checked_mul(width).ok_or_else(|| bad("length overflows"))? {
        return Err(bad("length does not match header"));
    }
    match width {
        4 => Ok(StoredParams::Single(decode(body, 4))),
        8 => Ok(StoredParams::Double(decode(body, 8))),
        _ => Err(bad("unknown element width")),
    }
}

fn decode<T: Real>(body: &[u8], width: usize) -> ParamVector<T> {
    ParamVector::from_vec(body.chunks_exact(width).map(T::from_le_slice).collect())
}

/// What `train` reports, besides its files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub seed: u64,
    pub initial_val_loss: f64,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub params_digest: String,
    pub stats: RunStats,
}

/// Output of one training run, kept in memory for `compare`.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub summary: TrainSummary,
    pub log: TrajectoryLog,
    pub wall_seconds: f64,
}

fn val_set(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Batch>> {
    corpus.val_batches(cfg.seed, cfg.val_batches, cfg.global_batch, cfg.model.seq_len + 1)
}

fn train_typed<T: Real>(cfg: &RunConfig, corpus: &Corpus, out: &Path) -> Result<(TrainSummary, TrajectoryLog)> {
    let init: ParamVector<T> = cfg.model.init_params(cfg.seed);
    let initial_val_loss = driver::evaluate(&init, &cfg.model, &val_set(cfg, corpus)?)?;
    let RunOutput { log, params, stats } = driver::run::<T>(cfg, corpus, None)?;
    write_params(&out.join("params.bin"), &params)?;
    let last = log
        .records()
        .last()
        .ok_or_else(|| Error::Protocol("run produced no iterations".into()))?;
    let summary = TrainSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        initial_val_loss,
        final_train_loss: last.train_loss,
        final_val_loss: log.final_val().unwrap_or(f64::NAN),
        params_digest: params.digest(),
        stats,
    };
    Ok((summary, log))
}

/// Runs one configuration and writes `trajectory.jsonl`, `summary.json`,
/// `params.bin`, `config.toml` and `timing.json` into `out`.
pub fn train_one(settings: &Settings, mode: Mode, seed: u64, out: &Path) -> Result<TrainResult> {
    let cfg = settings.run_config(mode, seed)?;
    let corpus = cfg.corpus.load()?;
    fs::create_dir_all(out)?;
    let resolved = Settings {
        mode,
        seed,
        ..settings.clone()
    };
    fs::write(out.join("config.toml"), resolved.to_toml())?;
    let start = Instant::now();
    let (summary, log) = match cfg.model.precision {
        Precision::Single => train_typed::<f32>(&cfg, &corpus, out)?,
        Precision::Double => train_typed::<f64>(&cfg, &corpus, out)?,
    };
    let wall_seconds = start.elapsed().as_secs_f64();

    let head = header("train", &resolved, &[("mode", format!("\"{}\"", mode.name()))]);
    write_lines(
        &out.join("trajectory.jsonl"),
        std::iter::once(head).chain(log.records().iter().map(record_line)),
    )?;
    let stats = serde_json::to_string(&summary.stats).expect("stats serialize");
    let line = JsonLine::new()
        .str("kind", "summary")
        .str("mode", mode.name())
        .int("seed", seed)
        .num("initial_val_loss", summary.initial_val_loss)
        .num("final_train_loss", summary.final_train_loss)
        .num("final_val_loss", summary.final_val_loss)
        .str("params_digest", &summary.params_digest)
        .raw("stats", &stats)
        .finish();
    write_lines(&out.join("summary.json"), [line])?;
    let timing = JsonLine::new().num("wall_seconds", wall_seconds).finish();
    write_lines(&out.join("timing.json"), [timing])?;
    Ok(TrainResult {
        summary,
        log,
        wall_seconds,
    })
}

pub fn cmd_train(settings: &Settings, out: &Path) -> Result<TrainResult> {
    train_one(settings, settings.mode, settings.seed, out)
}

/// Largest rise of the validation loss above its value at the end of lazy
/// start, over the first `windows` sync points after it. Negative when the
/// loss only falls.
pub fn transition_spike(log: &TrajectoryLog, lazy_iters: usize, interval: usize, windows: usize) -> Option<f64> {
    let base = log.val_at(lazy_iters)?;
    (1..=windows)
        .map(|j| log.val_at(lazy_iters + j * interval).map(|v| v - base))
        .try_fold(f64::NEG_INFINITY, |acc, d| d.map(|d| acc.max(d)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeOutcome {
    pub mode: Mode,
    pub final_val_loss: f64,
    pub spike: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub outcomes: Vec<ModeOutcome>,
    /// `(pier - adamw) / adamw` on final validation loss.
    pub pier_vs_adamw: Option<f64>,
    /// `(pier - diloco) / diloco` on final validation loss.
    pub pier_vs_diloco: Option<f64>,
}

impl SeedComparison {
    pub fn outcome(&self, mode: Mode) -> Option<&ModeOutcome> {
        self.outcomes.iter().find(|o| o.mode == mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub seeds: Vec<SeedComparison>,
    /// Cost-model projection for this run's topology and schedule.
    pub projected_speedup: f64,
    pub projected_perf_improvement: f64,
}

fn check_compare(settings: &Settings) -> Result<Vec<RunConfig>> {
    if settings.modes.len() < 2 {
        return Err(Error::config("modes", "compare needs at least two modes"));
    }
    for (i, m) in settings.modes.iter().enumerate() {
        if settings.modes[..i].contains(m) {
            return Err(Error::config("modes", format!("{} listed twice", m.name())));
        }
    }
    let mut cfgs = Vec::new();
    for seed in settings.compare_seeds() {
        for &mode in &settings.modes {
            cfgs.push(settings.run_config(mode, seed)?);
        }
    }
    Ok(cfgs)
}

/// Runs every mode for every seed with shared data order, then writes
/// `compare.jsonl` (aligned validation curves) and `report.json`.
pub fn cmd_compare(settings: &Settings, out: &Path) -> Result<CompareReport> {
    check_compare(settings)?;
    fs::create_dir_all(out)?;
    let sched = settings.sched();
    let lazy = sched.lazy_iters();
    let r = sched.sync_interval;
    let mut seeds = Vec::new();
    let mut series: Vec<String> = Vec::new();
    let mut timing = Vec::new();
    for seed in settings.compare_seeds() {
        let mut runs = Vec::new();
        for &mode in &settings.modes {
            let dir = out.join(format!("seed{seed}")).join(mode.name());
            let res = train_one(settings, mode, seed, &dir)?;
            timing.push(
                JsonLine::new()
                    .int("seed", seed)
                    .str("mode", mode.name())
                    .num("wall_seconds", res.wall_seconds)
                    .finish(),
            );
            runs.push((mode, res));
        }
        let eval_iters: Vec<usize> = runs[0].1.log.records().iter().filter(|r| r.val_loss.is_some()).map(|r| r.iter).collect();
        for t in eval_iters {
            let mut line = JsonLine::new().int("seed", seed).int("iter", t as u64);
            for (mode, res) in &runs {
                line = line.opt_num(mode.name(), res.log.val_at(t));
            }
            series.push(line.finish());
        }
        let outcomes: Vec<ModeOutcome> = runs
            .iter()
            .map(|(mode, res)| ModeOutcome {
                mode: *mode,
                final_val_loss: res.summary.final_val_loss,
                spike: if *mode == Mode::AdamwBaseline && lazy == 0 {
                    None
                } else {
                    transition_spike(&res.log, lazy, r, 3)
                },
            })
            .collect();
        let fin = |m: Mode| outcomes.iter().find(|o| o.mode == m).map(|o| o.final_val_loss);
        let rel = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| (a - b) / b);
        seeds.push(SeedComparison {
            seed,
            pier_vs_adamw: rel(fin(Mode::Pier), fin(Mode::AdamwBaseline)),
            pier_vs_diloco: rel(fin(Mode::Pier), fin(Mode::DilocoBaseline)),
            outcomes,
        });
    }

    let pre = costmodel::preset(&settings.preset)?;
    let topo = settings.run_config(settings.modes[0], settings.seed)?.topology()?;
    let base = project_runtime(&pre.params, &topo, &sched, Schedule::AdamwBaseline)?;
    let pier = project_runtime(&pre.params, &topo, &sched, Schedule::Pier)?;
    let report = CompareReport {
        seeds,
        projected_speedup: speedup(base.total_time, pier.total_time)?,
        projected_perf_improvement: perf_improvement(base.total_time, pier.total_time)?,
    };

    let head = header("compare", settings, &[]);
    write_lines(&out.join("compare.jsonl"), std::iter::once(head).chain(series))?;
    write_lines(&out.join("report.json"), [report_line(&report)])?;
    write_lines(&out.join("timing.json"), timing)?;
    Ok(report)
}

fn report_line(report: &CompareReport) -> String {
    let seeds: Vec<String> = report
        .seeds
        .iter()
        .map(|s| {
            let outcomes: Vec<String> = s
                .outcomes
                .iter()
                .map(|o| {
                    JsonLine::new()
                        .str("mode", o.mode.name())
                        .num("final_val_loss", o.final_val_loss)
                        .opt_num("spike", o.spike)
                        .finish()
                })
                .collect();
            JsonLine::new()
                .int("seed", s.seed)
                .opt_num("pier_vs_adamw", s.pier_vs_adamw)
                .opt_num("pier_vs_diloco", s.pier_vs_diloco)
                .raw("outcomes", &format!("[{}]", outcomes.join(",")))
                .finish()
        })
        .collect();
    JsonLine::new()
        .str("kind", "compare_report")
        .raw("seeds", &format!("[{}]", seeds.join(",")))
        .num("projected_speedup", report.projected_speedup)
        .num("projected_perf_improvement", report.projected_perf_improvement)
        .finish()
}

/// Human-readable table of a compare report.
pub fn format_compare(report: &CompareReport) -> String {
    let mut s = String::new();
    for seed in &report.seeds {
        s.push_str(&format!("seed {}\n", seed.seed));
        for o in &seed.outcomes {
            let spike = o.spike.map_or("-".to_string(), |v| format!("{v:+.4}"));
            s.push_str(&format!(
                "  {:<16} final val {:.4}  transition spike {}\n",
                o.mode.name(),
                o.final_val_loss,
                spike
            ));
        }
        if let Some(d) = seed.pier_vs_adamw {
            s.push_str(&format!("  pier vs adamw  {:+.2}%\n", d * 100.0));
        }
        if let Some(d) = seed.pier_vs_diloco {
            s.push_str(&format!("  pier vs diloco {:+.2}%\n", d * 100.0));
        }
    }
    s.push_str(&format!(
        "projected speedup {:.3} ({:.1}% less time)\n",
        report.projected_speedup, report.projected_perf_improvement
    ));
    s
}

/// Sweeps GPU counts and sync intervals on a cost-model preset; writes
/// `projection.jsonl`.
pub fn cmd_project(settings: &Settings, out: &Path) -> Result<Vec<SweepRow>> {
    let pre = costmodel::preset(&settings.preset)?;
    if settings.intervals.is_empty() {
        return Err(Error::config("intervals", "must list at least one interval"));
    }
    let rows = costmodel::sweep(&pre, &settings.gpus, &settings.intervals, &settings.sched())?;
    fs::create_dir_all(out)?;
    let head = header("project", settings, &[("preset", format!("\"{}\"", pre.name))]);
    let lines = rows.iter().map(|r| {
        JsonLine::new()
            .int("gpus", r.gpus as u64)
            .int("groups", r.groups as u64)
            .int("sync_interval", r.sync_interval as u64)
            .num("baseline_time", r.baseline.total_time)
            .num("pier_time", r.pier.total_time)
            .num("baseline_comm", r.baseline.inner_comm_time + r.baseline.outer_comm_time)
            .num("pier_inner_comm", r.pier.inner_comm_time)
            .num("pier_outer_comm", r.pier.outer_comm_time)
            .int("pier_outer_events", r.pier.outer_events as u64)
            .num("speedup", r.speedup)
            .num("perf_improvement", r.perf_improvement)
            .num("baseline_efficiency", r.baseline_efficiency)
            .num("pier_efficiency", r.pier_efficiency)
            .finish()
    });
    write_lines(&out.join("projection.jsonl"), std::iter::once(head).chain(lines))?;
    Ok(rows)
}

pub fn format_projection(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>5} {:>6} {:>5} {:>12} {:>12} {:>8} {:>8} {:>8}\n",
        "gpus", "groups", "r", "adamw [s]", "pier [s]", "speedup", "eff(a)", "eff(p)"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>5} {:>6} {:>5} {:>12.1} {:>12.1} {:>8.3} {:>8.3} {:>8.3}\n",
            r.gpus,
            r.groups,
            r.sync_interval,
            r.baseline.total_time,
            r.pier.total_time,
            r.speedup,
            r.baseline_efficiency,
            r.pier_efficiency
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub threshold: f64,
    pub coords: usize,
    pub passed: bool,
}

/// Finite-difference check of the double-precision gradient at the
/// configured model's initial parameters, on the first training batch.
/// Writes `gradcheck.json`. A breach is reported, not returned as an error.
pub fn cmd_gradcheck(settings: &Settings, out: &Path) -> Result<GradcheckReport> {
    let model = ModelConfig {
        precision: Precision::Double,
        ..settings.model()
    };
    model.validate()?;
    if !(settings.gradcheck_threshold > 0.0) {
        return Err(Error::config("gradcheck_threshold", "must be positive"));
    }
    let corpus = settings.corpus_source().load()?;
    let params: ParamVector<f64> = model.init_params(settings.seed);
    let rows = settings.global_batch.max(1);
    let batch = corpus.train_batch(settings.seed, 1, rows, model.seq_len + 1)?;
    let mut grad = numerics::backward(&params, &model, &batch)?;
    if settings.gradcheck_corrupt != 0.0 {
        for g in grad.iter_mut() {
            *g *= 1.0 + settings.gradcheck_corrupt;
        }
    }
    let err = numerics::grad_check_against(
        &params,
        &model,
        &batch,
        &grad,
        settings.gradcheck_epsilon,
        settings.gradcheck_coords,
        settings.seed,
    )?;
    let report = GradcheckReport {
        max_rel_error: err,
        threshold: settings.gradcheck_threshold,
        coords: settings.gradcheck_coords,
        passed: err < settings.gradcheck_threshold,
    };
    fs::create_dir_all(out)?;
    let head = header("gradcheck", settings, &[]);
    let line = JsonLine::new()
        .str("kind", "gradcheck")
        .num("max_rel_error", report.max_rel_error)
        .num("threshold", report.threshold)
        .int("coords", report.coords as u64)
        .bool("passed", report.passed)
        .finish();
    write_lines(&out.join("gradcheck.json"), [head, line])?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_config_gives_defaults() {
        let s = load_config(None, &[]).unwrap();
        assert_eq!(s, Settings::default());
        s.run_config(Mode::Pier, 0).unwrap();
    }

    #[test]
    fn overrides_apply_in_order() {
        let s = load_config(None, &overrides(&["sync_interval=500", "mode=adamw_baseline", "workers=par", "seeds=[1,2]"])).unwrap();
        assert_eq!(s.sync_interval, 500);
        assert_eq!(s.mode, Mode::AdamwBaseline);
        assert_eq!(s.workers, WorkerMode::Concurrent);
        assert_eq!(s.seeds, vec![1, 2]);
        // 300 is not a multiple of 500
        assert!(s.run_config(Mode::Pier, 0).is_err());
    }

    #[test]
    fn divisibility_violation_names_the_field() {
        let s = load_config(None, &overrides(&["total_iters=1000", "sync_interval=33"])).unwrap();
        let err = s.run_config(Mode::Pier, 0).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "sync_interval"), "{err}");
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let err = load_config(None, &overrides(&["sync_intervall=5"])).unwrap_err();
        assert!(err.to_string().contains("sync_intervall"), "{err}");
        let err = load_config(None, &overrides(&["groups=\"four\""])).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(load_config(None, &overrides(&["groups"])).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        let s = Settings {
            groups: 2,
            outer_lr: Some(0.5),
            ..Settings::default()
        };
        fs::write(&path, s.to_toml()).unwrap();
        assert_eq!(load_config(Some(&path), &[]).unwrap(), s);
        fs::write(&path, "groups = [").unwrap();
        assert!(matches!(load_config(Some(&path), &[]), Err(Error::Config { .. })));
    }

    #[test]
    fn floats_keep_seventeen_digits() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, -0.0] {
            let s = fmt_f64(x);
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
            let digits = s.split('e').next().unwrap().chars().filter(|c| c.is_ascii_digit()).count();
            assert_eq!(digits, 17);
        }
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let v = ParamVector::from_vec(vec![1.0f64, -0.0, f64::MAX, 1e-310]);
        write_params(&path, &v).unwrap();
        assert_eq!(read_params(&path).unwrap(), StoredParams::Double(v.clone()));
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], PARAMS_MAGIC);
        assert_eq!(bytes.len(), 24 + 32);
        let w = ParamVector::from_vec(vec![0.5f32, 3.0]);
        write_params(&path, &w).unwrap();
        assert_eq!(read_params(&path).unwrap(), StoredParams::Single(w));
        fs::write(&path, &bytes[..30]).unwrap();
        assert!(matches!(read_params(&path), Err(Error::Format(_))));
    }

    #[test]
    fn spike_uses_first_three_windows() {
        let mut log = TrajectoryLog::default();
        for (t, v) in [(10, 2.0), (20, 2.5), (30, 2.1), (40, 1.9), (50, 9.0)] {
            log.push(IterRecord {
                iter: t,
                phase: driver::Phase::Pier,
                train_loss: v,
                val_loss: Some(v),
                inner_lr: 0.0,
                outer_lr: None,
                mu: None,
                comm_bytes: 0,
                params_digest: None,
            })
            .unwrap();
        }
        assert_eq!(transition_spike(&log, 10, 10, 3), Some(0.5));
        assert_eq!(transition_spike(&log, 20, 10, 2), Some(2.1 - 2.5));
        assert_eq!(transition_spike(&log, 20, 10, 4), None);
    }

    #[test]
    fn compare_rejects_a_single_mode() {
        let s = load_config(None, &overrides(&["modes=[\"pier\"]"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_compare(&s, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "modes"));
    }

    #[test]
    fn compare_validates_every_mode_before_running() {
        // p = 0 is fine for the baselines but leaves pier without an outer
        // learning rate.
        let s = load_config(None, &overrides(&["warmup_fraction=0.0"])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(cmd_compare(&s, dir.path()).is_err());
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
