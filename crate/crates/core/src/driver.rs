//! End-to-end training runs: lazy start with momentum warmup, group-local
//! inner AdamW, periodic outer Nesterov steps, and the two reference
//! baselines.
//!
//! Every simulated worker owns its tensor-parallel shard of the parameters,
//! its AdamW moments for that shard, its copy of the outer snapshot and
//! momentum, and a private [`HostStore`]. Collectives in [`crate::topology`]
//! are the only points where workers exchange values.

use std::collections::BTreeMap;
use std::ops::{ControlFlow, Range};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{forward_loss, loss_and_grad, Batch, Corpus, ModelConfig};
use crate::optim::{
    clip_factor, inner_lr, momentum_mu, outer_lr, outer_step_in_place, AdamWConfig, AdamWState,
    ScheduleConfig,
};
use crate::params::{squared_norm, ParamVector};
use crate::real::Real;
use crate::topology::{allreduce_avg, concat, ring_traffic, split_ranges, Topology};

/// Momentum coefficient used while accumulating during lazy start.
pub const WARMUP_MU: f64 = 0.9;
/// Fixed outer settings of the DiLoCo reference.
pub const DILOCO_MU: f64 = 0.9;
pub const DILOCO_OUTER_LR: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pier,
    AdamwBaseline,
    DilocoBaseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pier => "pier",
            Mode::AdamwBaseline => "adamw_baseline",
            Mode::DilocoBaseline => "diloco_baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerMode {
    /// One thread steps every worker in rank order.
    #[serde(alias = "seq")]
    Sequential,
    /// One scoped thread per model replica for the forward and backward pass.
    #[serde(alias = "par")]
    Concurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    LazyStart,
    Pier,
    Diloco,
    Synchronous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic {
        chain_seed: u64,
        train_len: usize,
        val_len: usize,
    },
    File {
        path: PathBuf,
        val_fraction: f64,
    },
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            CorpusSource::Synthetic {
                chain_seed,
                train_len,
                val_len,
            } => Ok(Corpus::synthetic(*chain_seed, *train_len, *val_len)),
            CorpusSource::File { path, val_fraction } => {
                let bytes = std::fs::read(path)?;
                Corpus::from_bytes(&bytes, *val_fraction)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub sched: ScheduleConfig,
    pub adamw: AdamWConfig,
    pub groups: usize,
    pub dp_per_group: usize,
    pub tp_size: usize,
    pub seed: u64,
    pub corpus: CorpusSource,
    /// Rows per iteration across all replicas.
    pub global_batch: usize,
    pub val_batches: usize,
    pub offload: bool,
    pub workers: WorkerMode,
    /// Replaces the scheduled outer learning rate (both outer modes).
    pub outer_lr_override: Option<f64>,
    /// Replaces the scheduled outer momentum coefficient (both outer modes).
    pub outer_mu_override: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Pier,
            model: ModelConfig::default(),
            sched: ScheduleConfig::default(),
            adamw: AdamWConfig::default(),
            groups: 4,
            dp_per_group: 1,
            tp_size: 1,
            seed: 0,
            corpus: CorpusSource::Synthetic {
                chain_seed: 0,
                train_len: 200_000,
                val_len: 20_000,
            },
            global_batch: 32,
            val_batches: 4,
            offload: false,
            workers: WorkerMode::Sequential,
            outer_lr_override: None,
            outer_mu_override: None,
        }
    }
}

impl RunConfig {
    pub fn topology(&self) -> Result<Topology> {
        Topology::new(self.groups, self.dp_per_group, self.tp_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sched.validate()?;
        self.adamw.validate()?;
        let topo = self.topology()?;
        if self.global_batch == 0 || !self.global_batch.is_multiple_of(topo.replicas()) {
            return Err(Error::config(
                "global_batch",
                format!(
                    "{} rows cannot be split evenly over {} replicas",
                    self.global_batch,
                    topo.replicas()
                ),
            ));
        }
        if self.val_batches == 0 {
            return Err(Error::config("val_batches", "must be positive"));
        }
        if self.tp_size > self.model.param_count() {
            return Err(Error::config("tp_size", "exceeds the parameter count"));
        }
        for (field, v) in [
            ("outer_lr", self.outer_lr_override),
            ("outer_mu", self.outer_mu_override),
        ] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::config(field, "must be finite and non-negative"));
                }
            }
        }
        if self.mode == Mode::Pier && self.outer_lr_override.is_none() {
            let first = self.outer_iters().first().copied();
            if let Some(t) = first {
                outer_lr(t, self.sched.total_iters).map_err(|_| {
                    Error::config(
                        "warmup_fraction",
                        format!(
                            "first outer step at iteration {t} precedes the outer learning-rate schedule; \
                             set outer_lr explicitly or lengthen the lazy start"
                        ),
                    )
                })?;
            }
        }
        Ok(())
    }

    /// Iterations at which an outer step runs: every multiple of the sync
    /// interval after lazy start, plus a closing step at the final iteration
    /// when it is not itself a multiple.
    pub fn outer_iters(&self) -> Vec<usize> {
        if self.mode == Mode::AdamwBaseline {
            return Vec::new();
        }
        let total = self.sched.total_iters;
        let r = self.sched.sync_interval;
        let mut out: Vec<usize> = (self.sched.lazy_iters() + 1..=total).filter(|t| t % r == 0).collect();
        if !total.is_multiple_of(r) && self.sched.lazy_iters() < total {
            out.push(total);
        }
        out
    }

    fn outer_settings(&self, t: usize) -> Result<(f64, f64)> {
        let total = self.sched.total_iters;
        let lr = match (self.outer_lr_override, self.mode) {
            (Some(v), _) => v,
            (None, Mode::Pier) => outer_lr(t, total)?,
            (None, _) => DILOCO_OUTER_LR,
        };
        let mu = match (self.outer_mu_override, self.mode) {
            (Some(v), _) => v,
            (None, Mode::Pier) => momentum_mu(t, total),
            (None, _) => DILOCO_MU,
        };
        Ok((lr, mu))
    }

    fn is_eval_iter(&self, t: usize) -> bool {
        t.is_multiple_of(self.sched.sync_interval) || t == self.sched.total_iters
    }

    fn phase(&self, t: usize) -> Phase {
        match self.mode {
            Mode::AdamwBaseline => Phase::Synchronous,
            _ if t <= self.sched.lazy_iters() => Phase::LazyStart,
            Mode::Pier => Phase::Pier,
            Mode::DilocoBaseline => Phase::Diloco,
        }
    }
}

/// One line of the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub inner_lr: f64,
    pub outer_lr: Option<f64>,
    pub mu: Option<f64>,
    /// Bytes moved by gradient and model collectives this iteration.
    pub comm_bytes: u64,
    /// Digest of replica 0's parameters, recorded with each evaluation.
    pub params_digest: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    records: Vec<IterRecord>,
}

impl TrajectoryLog {
    pub fn push(&mut self, rec: IterRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.iter <= last.iter {
                return Err(Error::Protocol(format!(
                    "iteration {} logged after {}",
                    rec.iter, last.iter
                )));
            }
            if rec.phase < last.phase {
                return Err(Error::Protocol(format!(
                    "phase {:?} after {:?} at iteration {}",
                    rec.phase, last.phase, rec.iter
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[IterRecord] {
        &self.records
    }

    pub fn val_at(&self, iter: usize) -> Option<f64> {
        self.records
            .binary_search_by_key(&iter, |r| r.iter)
            .ok()
            .and_then(|i| self.records[i].val_loss)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StateKind {
    Snapshot,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct HostKey {
    pub kind: StateKind,
    pub replica: usize,
    pub tp: usize,
}

/// Host-memory storage private to one worker.
#[derive(Debug, Clone)]
pub struct HostStore<T> {
    enabled: bool,
    entries: BTreeMap<HostKey, ParamVector<T>>,
    live_bytes: u64,
    peak_bytes: u64,
    offloaded_bytes: u64,
    reloaded_bytes: u64,
}

impl<T: Real> HostStore<T> {
    pub fn new(enabled: bool) -> Self {
        HostStore {
            enabled,
            entries: BTreeMap::new(),
            live_bytes: 0,
            peak_bytes: 0,
            offloaded_bytes: 0,
            reloaded_bytes: 0,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Copies `shard` to host memory. Does nothing when offload is disabled.
    pub fn offload(&mut self, key: HostKey, shard: &[T]) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.entries.contains_key(&key) {
            return Err(Error::Protocol(format!("{key:?} is already offloaded")));
        }
        let bytes = (shard.len() * T::PRECISION.width()) as u64;
        self.entries.insert(key, ParamVector::from_vec(shard.to_vec()));
        self.live_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.offloaded_bytes += bytes;
        Ok(())
    }

    /// Moves a shard back out of host memory; `None` when offload is disabled.
    pub fn reload(&mut self, key: HostKey) -> Result<Option<ParamVector<T>>> {
        if !self.enabled {
            return Ok(None);
        }
        let shard = self
            .entries
            .remove(&key)
            .ok_or_else(|| Error::Protocol(format!("{key:?} is not offloaded")))?;
        let bytes = (shard.len() * T::PRECISION.width()) as u64;
        self.live_bytes -= bytes;
        self.reloaded_bytes += bytes;
        Ok(Some(shard))
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes
    }

    pub fn offloaded_bytes(&self) -> u64 {
        self.offloaded_bytes
    }

    pub fn reloaded_bytes(&self) -> u64 {
        self.reloaded_bytes
    }
}

/// Counters reported alongside the trajectory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub iterations: usize,
    pub inner_steps: u64,
    pub warmup_accumulations: usize,
    pub outer_steps: usize,
    pub grad_sync_events: usize,
    pub outer_sync_events: usize,
    pub comm_bytes: u64,
    pub host_offloaded_bytes: u64,
    pub host_reloaded_bytes: u64,
    pub host_peak_bytes: u64,
    /// Largest snapshot-plus-momentum footprint any one device keeps
    /// resident between outer steps.
    pub device_state_resident_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub log: TrajectoryLog,
    /// Replica 0's parameters at the end of the run.
    pub params: ParamVector<T>,
    pub stats: RunStats,
}

#[derive(Debug, Clone)]
pub struct WarmupOutput<T> {
    pub theta: ParamVector<T>,
    pub momentum: ParamVector<T>,
    pub adam: AdamWState<T>,
    pub log: TrajectoryLog,
}

/// Called after every iteration with the full parameters of each replica.
/// Returning `Break` ends the run early.
pub type Observer<'a, T> = dyn FnMut(usize, Phase, &[ParamVector<T>]) -> ControlFlow<()> + 'a;

/// Mean loss over the validation batches.
pub fn evaluate<T: Real>(params: &ParamVector<T>, model: &ModelConfig, val: &[Batch]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::config("val_batches", "must be positive"));
    }
    let mut sum = 0.0;
    for b in val {
        sum += forward_loss(params, model, b)?.as_f64();
    }
    Ok(sum / val.len() as f64)
}

pub fn run_pier<T: Real>(cfg: &RunConfig, corpus: &Corpus) -> Result<RunOutput<T>> {
    expect_mode(cfg, Mode::Pier)?;
    run(cfg, corpus, None)
}

pub fn run_adamw_baseline<T: Real>(cfg: &RunConfig, corpus: &Corpus) -> Result<RunOutput<T>> {
    expect_mode(cfg, Mode::AdamwBaseline)?;
    run(cfg, corpus, None)
}

pub fn run_diloco_baseline<T: Real>(cfg: &RunConfig, corpus: &Corpus) -> Result<RunOutput<T>> {
    expect_mode(cfg, Mode::DilocoBaseline)?;
    run(cfg, corpus, None)
}

/// Synchronous lazy start with momentum accumulation, stopped at the
/// transition.
pub fn momentum_warmup_phase<T: Real>(cfg: &RunConfig, corpus: &Corpus) -> Result<WarmupOutput<T>> {
    expect_mode(cfg, Mode::Pier)?;
    cfg.validate()?;
    let mut engine = Engine::<T>::new(cfg, corpus)?;
    for t in 1..=cfg.sched.lazy_iters() {
        let _ = engine.iteration(t, None)?;
    }
    let theta = engine.replica_params(0);
    let momentum = engine.gather_momentum()?;
    let adam = engine.gather_adam(0);
    Ok(WarmupOutput {
        theta,
        momentum,
        adam,
        log: engine.log,
    })
}

/// Runs whichever mode `cfg` selects.
pub fn run<T: Real>(
    cfg: &RunConfig,
    corpus: &Corpus,
    mut observer: Option<&mut Observer<'_, T>>,
) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let mut engine = Engine::<T>::new(cfg, corpus)?;
    for t in 1..=cfg.sched.total_iters {
        let flow = engine.iteration(t, observer.as_deref_mut())?;
        if flow.is_break() {
            break;
        }
    }
    engine.finish()
}

fn expect_mode(cfg: &RunConfig, mode: Mode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::config(
            "mode",
            format!("expected {}, got {}", mode.name(), cfg.mode.name()),
        ));
    }
    Ok(())
}

struct Worker<T> {
    params: ParamVector<T>,
    adam: AdamWState<T>,
    snapshot: Option<ParamVector<T>>,
    momentum: Option<ParamVector<T>>,
    /// Iteration at which the snapshot was taken.
    snapshot_iter: usize,
    host: HostStore<T>,
}

struct Engine<'a, T> {
    cfg: &'a RunConfig,
    corpus: &'a Corpus,
    topo: Topology,
    shards: Vec<Range<usize>>,
    /// Indexed by global rank.
    workers: Vec<Worker<T>>,
    val: Vec<Batch>,
    outer_iters: Vec<usize>,
    log: TrajectoryLog,
    stats: RunStats,
}

impl<'a, T: Real> Engine<'a, T> {
    fn new(cfg: &'a RunConfig, corpus: &'a Corpus) -> Result<Self> {
        if T::PRECISION != cfg.model.precision {
            return Err(Error::config(
                "precision",
                format!("run configured for {:?} arithmetic", cfg.model.precision),
            ));
        }
        let topo = cfg.topology()?;
        let init: ParamVector<T> = cfg.model.init_params(cfg.seed);
        let shards = topo.shard_ranges(init.len());
        let outer = cfg.mode != Mode::AdamwBaseline;
        let workers = (0..topo.world_size())
            .map(|rank| {
                let range = shards[topo.coord(rank).tp].clone();
                let shard = ParamVector::from_vec(init[range.clone()].to_vec());
                Worker {
                    adam: AdamWState::new(shard.len()),
                    momentum: outer.then(|| ParamVector::zeros(shard.len())),
                    snapshot: outer.then(|| shard.clone()),
                    params: shard,
                    snapshot_iter: 0,
                    host: HostStore::new(cfg.offload),
                }
            })
            .collect();
        let width = cfg.model.seq_len + 1;
        let val = corpus.val_batches(cfg.seed, cfg.val_batches, cfg.global_batch, width)?;
        let mut engine = Engine {
            cfg,
            corpus,
            topo,
            shards,
            workers,
            val,
            outer_iters: cfg.outer_iters(),
            log: TrajectoryLog::default(),
            stats: RunStats::default(),
        };
        if outer {
            engine.offload_state()?;
        }
        Ok(engine)
    }

    fn rank(&self, replica: usize, tp: usize) -> usize {
        self.topo.rank_of_replica(replica, tp)
    }

    fn replica_params(&self, replica: usize) -> ParamVector<T> {
        concat((0..self.topo.tp_size()).map(|s| self.workers[self.rank(replica, s)].params.as_slice()))
    }

    fn gather_adam(&self, replica: usize) -> AdamWState<T> {
        let tp = self.topo.tp_size();
        let ws: Vec<&Worker<T>> = (0..tp).map(|s| &self.workers[self.rank(replica, s)]).collect();
        AdamWState {
            m: concat(ws.iter().map(|w| w.adam.m.as_slice())),
            v: concat(ws.iter().map(|w| w.adam.v.as_slice())),
            step: ws[0].adam.step,
        }
    }

    fn gather_momentum(&mut self) -> Result<ParamVector<T>> {
        self.reload_state()?;
        let m = concat(
            (0..self.topo.tp_size()).map(|s| self.workers[self.rank(0, s)].momentum.as_deref().unwrap_or(&[])),
        );
        Ok(m)
    }

    fn iteration(&mut self, t: usize, observer: Option<&mut Observer<'_, T>>) -> Result<ControlFlow<()>> {
        let cfg = self.cfg;
        let phase = cfg.phase(t);
        let replicas = self.topo.replicas();
        let lr = inner_lr(t, &cfg.sched);
        let mut comm_bytes = 0u64;

        // Forward and backward on each replica's slice of the global batch.
        let width = cfg.model.seq_len + 1;
        let batch = self.corpus.train_batch(cfg.seed, t, cfg.global_batch, width)?;
        let rows = cfg.global_batch / replicas;
        let micro: Vec<Batch> = (0..replicas).map(|r| batch.slice_rows(r * rows, rows)).collect();
        let full: Vec<ParamVector<T>> = (0..replicas).map(|r| self.replica_params(r)).collect();
        let results = compute_all(cfg, &full, &micro)?;
        for (r, (loss, grad)) in results.iter().enumerate() {
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Numeric {
                    iteration: t,
                    message: format!("replica {r} produced a non-finite loss or gradient"),
                });
            }
        }

        // Gradient averaging: all replicas while synchronous, else per group.
        let sets: Vec<Range<usize>> = match phase {
            Phase::Synchronous | Phase::LazyStart => vec![0..replicas],
            _ => (0..self.topo.groups()).map(|g| self.topo.group_replicas(g)).collect(),
        };
        let shard_bytes: Vec<usize> = self.shards.iter().map(|r| r.len() * T::PRECISION.width()).collect();
        let mut synced = false;
        for (set_idx, set) in sets.iter().enumerate() {
            let mut avg = Vec::with_capacity(self.shards.len());
            for (s, range) in self.shards.iter().enumerate() {
                let g = if sets.len() == 1 {
                    let views: Vec<&[T]> = set.clone().map(|r| &results[r].1[range.clone()]).collect();
                    allreduce_avg(&views)?
                } else {
                    let contributions: Vec<(usize, &[T])> = set
                        .clone()
                        .map(|r| (self.rank(r, s), &results[r].1[range.clone()]))
                        .collect();
                    self.topo.inner_gradient_sync(set_idx, s, &contributions)?
                };
                comm_bytes += ring_traffic(set.len(), shard_bytes[s]);
                avg.push(g);
            }
            synced |= set.len() > 1;
            // Clip against the norm of the whole averaged gradient, summed
            // across shards in parameter order.
            if let Some(scale) = clip_factor(squared_norm(avg.iter().map(|g| g.as_slice())), cfg.adamw.clip_norm) {
                for g in avg.iter_mut().flat_map(|g| g.iter_mut()) {
                    *g *= scale;
                }
            }
            for r in set.clone() {
                for (s, g) in avg.iter().enumerate() {
                    let rank = self.rank(r, s);
                    let w = &mut self.workers[rank];
                    w.adam.step(&mut w.params, g, lr, &cfg.adamw)?;
                }
            }
        }
        if synced {
            self.stats.grad_sync_events += 1;
        }
        self.stats.inner_steps += 1;

        let mut train_loss = 0.0;
        for (loss, _) in &results {
            train_loss += loss.as_f64();
        }
        train_loss /= replicas as f64;

        let mut rec_outer_lr = None;
        let mut rec_mu = None;
        let lazy = cfg.sched.lazy_iters();
        let r = cfg.sched.sync_interval;
        if cfg.mode == Mode::Pier && phase == Phase::LazyStart && t.is_multiple_of(r) {
            self.accumulate(t)?;
            rec_mu = Some(WARMUP_MU);
        }
        if cfg.mode == Mode::DilocoBaseline && t == lazy {
            self.reset_outer_state(t)?;
        }
        if self.outer_iters.binary_search(&t).is_ok() {
            let (olr, mu) = cfg.outer_settings(t)?;
            comm_bytes += self.outer_step(t, olr, mu)?;
            rec_outer_lr = Some(olr);
            rec_mu = Some(mu);
        }

        let (val_loss, params_digest) = if cfg.is_eval_iter(t) {
            let p = self.replica_params(0);
            (Some(evaluate(&p, &cfg.model, &self.val)?), Some(p.digest()))
        } else {
            (None, None)
        };
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    iteration: t,
                    message: "validation loss is not finite".into(),
                });
            }
        }
        self.stats.comm_bytes += comm_bytes;
        self.stats.iterations = t;
        self.log.push(IterRecord {
            iter: t,
            phase,
            train_loss,
            val_loss,
            inner_lr: lr,
            outer_lr: rec_outer_lr,
            mu: rec_mu,
            comm_bytes,
            params_digest,
        })?;

        Ok(match observer {
            Some(obs) => {
                let full: Vec<ParamVector<T>> = (0..replicas).map(|r| self.replica_params(r)).collect();
                obs(t, phase, &full)
            }
            None => ControlFlow::Continue(()),
        })
    }

    /// Lazy-start accumulation: `M <- mu M + (theta_t - theta_{t-r})`,
    /// leaving the parameters untouched.
    fn accumulate(&mut self, t: usize) -> Result<()> {
        self.reload_state()?;
        let mu = T::of(WARMUP_MU);
        for w in &mut self.workers {
            let (params, snap, m) = w.outer_view()?;
            for i in 0..params.len() {
                m[i] = mu * m[i] + (params[i] - snap[i]);
            }
            snap.copy_from_slice(params);
            w.snapshot_iter = t;
        }
        self.stats.warmup_accumulations += 1;
        self.offload_state()
    }

    fn reset_outer_state(&mut self, t: usize) -> Result<()> {
        self.reload_state()?;
        for w in &mut self.workers {
            let (params, snap, m) = w.outer_view()?;
            m.fill(T::zero());
            snap.copy_from_slice(params);
            w.snapshot_iter = t;
        }
        self.offload_state()
    }

    /// Averages the groups' parameters per shard and applies the outer
    /// Nesterov step on every worker. Returns the bytes communicated.
    fn outer_step(&mut self, t: usize, lr: f64, mu: f64) -> Result<u64> {
        self.reload_state()?;
        let version = self.workers[0].snapshot_iter;
        if let Some(w) = self.workers.iter().position(|w| w.snapshot_iter != version) {
            return Err(Error::Protocol(format!(
                "worker {w} holds a snapshot from iteration {} but worker 0 from {version}",
                self.workers[w].snapshot_iter
            )));
        }
        let mut bytes = 0;
        for s in 0..self.topo.tp_size() {
            let mut reps: Vec<&[T]> = Vec::with_capacity(self.topo.groups());
            for g in 0..self.topo.groups() {
                let members = self.topo.group_replicas(g);
                let lead = &self.workers[self.rank(members.start, s)].params;
                for r in members.clone().skip(1) {
                    if !self.workers[self.rank(r, s)].params.bitwise_eq(lead) {
                        return Err(Error::Protocol(format!(
                            "replicas of group {g} disagree on shard {s} at iteration {t}"
                        )));
                    }
                }
                reps.push(lead);
            }
            let avg = self.topo.outer_delta_sync(&reps)?;
            bytes += ring_traffic(self.topo.replicas(), avg.len() * T::PRECISION.width());
            for r in 0..self.topo.replicas() {
                let rank = self.rank(r, s);
                let w = &mut self.workers[rank];
                let (params, snap, m) = w.outer_view()?;
                params.copy_from_slice(&avg);
                outer_step_in_place(m, params, snap, lr, mu)?;
                snap.copy_from_slice(params);
                w.snapshot_iter = t;
            }
        }
        self.stats.outer_steps += 1;
        if self.topo.replicas() > 1 {
            self.stats.outer_sync_events += 1;
        }
        self.offload_state()?;
        Ok(bytes)
    }

    fn note_device_state(&mut self) {
        let width = T::PRECISION.width() as u64;
        for w in &self.workers {
            let held = w.snapshot.as_ref().map_or(0, |s| s.len()) + w.momentum.as_ref().map_or(0, |m| m.len());
            self.stats.device_state_resident_bytes = self.stats.device_state_resident_bytes.max(held as u64 * width);
        }
    }

    /// Each worker keeps only its own slice of the snapshot and momentum in
    /// host memory; the device copies are released.
    fn offload_state(&mut self) -> Result<()> {
        if !self.cfg.offload {
            self.note_device_state();
            return Ok(());
        }
        let replicas = self.topo.replicas();
        for (rank, w) in self.workers.iter_mut().enumerate() {
            let replica = rank / self.topo.tp_size();
            let tp = rank % self.topo.tp_size();
            let piece = split_ranges(w.params.len(), replicas)[replica].clone();
            for (kind, state) in [(StateKind::Snapshot, &mut w.snapshot), (StateKind::Momentum, &mut w.momentum)] {
                let full = state
                    .take()
                    .ok_or_else(|| Error::Protocol(format!("{kind:?} missing on worker {rank}")))?;
                w.host.offload(HostKey { kind, replica, tp }, &full[piece.clone()])?;
            }
        }
        self.note_device_state();
        Ok(())
    }

    /// Gathers every worker's slice back so each holds its full shard again.
    fn reload_state(&mut self) -> Result<()> {
        if !self.cfg.offload {
            return Ok(());
        }
        let replicas = self.topo.replicas();
        for s in 0..self.topo.tp_size() {
            for kind in [StateKind::Snapshot, StateKind::Momentum] {
                let mut pieces = Vec::with_capacity(replicas);
                for r in 0..replicas {
                    let rank = self.rank(r, s);
                    let piece = self.workers[rank]
                        .host
                        .reload(HostKey { kind, replica: r, tp: s })?
                        .ok_or_else(|| Error::Protocol("host store disabled during offload".into()))?;
                    pieces.push(piece);
                }
                let full = concat(pieces.iter().map(|p| p.as_slice()));
                for r in 0..replicas {
                    let rank = self.rank(r, s);
                    let slot = match kind {
                        StateKind::Snapshot => &mut self.workers[rank].snapshot,
                        StateKind::Momentum => &mut self.workers[rank].momentum,
                    };
                    *slot = Some(full.clone());
                }
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunOutput<T>> {
        for w in &self.workers {
            self.stats.host_offloaded_bytes += w.host.offloaded_bytes();
            self.stats.host_reloaded_bytes += w.host.reloaded_bytes();
            self.stats.host_peak_bytes = self.stats.host_peak_bytes.max(w.host.peak_bytes());
        }
        Ok(RunOutput {
            params: self.replica_params(0),
            log: self.log,
            stats: self.stats,
        })
    }
}

impl<T: Real> Worker<T> {
    /// Parameters, snapshot and momentum, borrowed together.
    fn outer_view(&mut self) -> Result<(&mut [T], &mut [T], &mut [T])> {
        match (self.snapshot.as_mut(), self.momentum.as_mut()) {
            (Some(s), Some(m)) => Ok((&mut self.params[..], &mut s[..], &mut m[..])),
            _ => Err(Error::Protocol("outer state is not resident".into())),
        }
    }
}

fn compute_all<T: Real>(
    cfg: &RunConfig,
    params: &[ParamVector<T>],
    micro: &[Batch],
) -> Result<Vec<(T, ParamVector<T>)>> {
    match cfg.workers {
        WorkerMode::Sequential => params
            .iter()
            .zip(micro)
            .map(|(p, b)| loss_and_grad(p, &cfg.model, b))
            .collect(),
        WorkerMode::Concurrent => std::thread::scope(|scope| {
            let handles: Vec<_> = params
                .iter()
                .zip(micro)
                .map(|(p, b)| scope.spawn(move || loss_and_grad(p, &cfg.model, b)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            model: ModelConfig {
                vocab_size: 128,
                embed_dim: 8,
                num_layers: 1,
                num_heads: 2,
                seq_len: 8,
                ..ModelConfig::default()
            },
            sched: ScheduleConfig {
                total_iters: 60,
                warmup_fraction: 0.2,
                sync_interval: 4,
                decay_iters: 60,
                ..ScheduleConfig::default()
            },
            groups: 2,
            global_batch: 4,
            val_batches: 1,
            corpus: CorpusSource::Synthetic {
                chain_seed: 1,
                train_len: 4000,
                val_len: 500,
            },
            ..RunConfig::default()
        }
    }

    fn corpus(cfg: &RunConfig) -> Corpus {
        cfg.corpus.load().unwrap()
    }

    #[test]
    fn host_store_round_trip_and_accounting() {
        let mut h = HostStore::<f64>::new(true);
        let key = HostKey {
            kind: StateKind::Momentum,
            replica: 1,
            tp: 0,
        };
        let v = [1.5, -0.0, f64::MIN_POSITIVE];
        h.offload(key, &v).unwrap();
        assert_eq!(h.live_bytes(), 24);
        assert!(matches!(h.offload(key, &v), Err(Error::Protocol(_))));
        let back = h.reload(key).unwrap().unwrap();
        assert!(back.bitwise_eq(&ParamVector::from_vec(v.to_vec())));
        assert_eq!(h.live_bytes(), 0);
        assert_eq!(h.reloaded_bytes(), 24);
        assert!(h.reload(key).is_err());
    }

    #[test]
    fn disabled_host_store_is_inert() {
        let mut h = HostStore::<f32>::new(false);
        let key = HostKey {
            kind: StateKind::Snapshot,
            replica: 0,
            tp: 0,
        };
        h.offload(key, &[1.0, 2.0]).unwrap();
        assert_eq!(h.offloaded_bytes(), 0);
        assert_eq!(h.reload(key).unwrap(), None);
    }

    #[test]
    fn outer_iterations_include_closing_step() {
        let mut cfg = tiny(Mode::Pier);
        assert_eq!(cfg.outer_iters().first(), Some(&16));
        assert_eq!(cfg.outer_iters().len(), 12);
        cfg.sched.sync_interval = 12;
        assert_eq!(cfg.outer_iters(), vec![24, 36, 48, 60]);
        cfg.sched.sync_interval = 7;
        cfg.sched.warmup_fraction = 0.0;
        cfg.outer_lr_override = Some(1.0);
        assert_eq!(*cfg.outer_iters().last().unwrap(), 60);
        assert!(cfg.outer_iters().contains(&56));
        cfg.mode = Mode::AdamwBaseline;
        assert!(cfg.outer_iters().is_empty());
    }

    #[test]
    fn validation_catches_batch_and_schedule_errors() {
        let mut cfg = tiny(Mode::Pier);
        cfg.global_batch = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "global_batch"));
        let mut cfg = tiny(Mode::Pier);
        cfg.sched.warmup_fraction = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "warmup_fraction"));
        cfg.outer_lr_override = Some(1.0);
        cfg.validate().unwrap();
        let wrong = run_adamw_baseline::<f64>(&cfg, &corpus(&cfg));
        assert!(matches!(wrong, Err(Error::Config { field, .. }) if field == "mode"));
    }

    #[test]
    fn warmup_accumulation_count() {
        let cfg = tiny(Mode::Pier);
        let out = run::<f64>(&cfg, &corpus(&cfg), None).unwrap();
        assert_eq!(out.stats.warmup_accumulations, 3);
        assert_eq!(out.stats.outer_steps, 12);
        assert_eq!(out.stats.inner_steps, 60);
        let phases: Vec<Phase> = out.log.records().iter().map(|r| r.phase).collect();
        assert_eq!(phases[11], Phase::LazyStart);
        assert_eq!(phases[12], Phase::Pier);
    }

    #[test]
    fn warmup_momentum_is_decayed_sum_of_interval_deltas() {
        let mut cfg = tiny(Mode::Pier);
        cfg.sched.warmup_fraction = 0.1;
        cfg.sched.sync_interval = 3;
        cfg.sched.total_iters = 60;
        cfg.outer_lr_override = Some(1.0);
        let c = corpus(&cfg);
        let mut thetas = Vec::new();
        let mut obs = |t: usize, _: Phase, p: &[ParamVector<f64>]| {
            if t.is_multiple_of(3) {
                thetas.push(p[0].clone());
            }
            ControlFlow::Continue(())
        };
        run::<f64>(&cfg, &c, Some(&mut obs)).unwrap();
        let warm = momentum_warmup_phase::<f64>(&cfg, &c).unwrap();
        let theta0: ParamVector<f64> = cfg.model.init_params(cfg.seed);
        assert!(warm.theta.bitwise_eq(&thetas[1]));
        for i in 0..theta0.len() {
            let d1 = thetas[0][i] - theta0[i];
            let d2 = thetas[1][i] - thetas[0][i];
            assert_eq!(warm.momentum[i], 0.9 * d1 + d2);
        }
        assert_eq!(warm.adam.step, 6);
    }

    #[test]
    fn identical_group_data_keeps_groups_identical() {
        // A batch of one row per group can still differ, so duplicate rows by
        // using a corpus that is a single repeated token.
        let mut cfg = tiny(Mode::Pier);
        let c = Corpus::new(vec![3; 200], vec![3; 50]);
        cfg.sched.warmup_fraction = 0.2;
        let mut agree = true;
        let mut obs = |_: usize, _: Phase, p: &[ParamVector<f64>]| {
            agree &= p[0].bitwise_eq(&p[1]);
            ControlFlow::Continue(())
        };
        run::<f64>(&cfg, &c, Some(&mut obs)).unwrap();
        assert!(agree);
    }

    #[test]
    fn diloco_has_one_outer_step_when_interval_spans_the_rest() {
        let mut cfg = tiny(Mode::DilocoBaseline);
        cfg.sched.sync_interval = 12;
        cfg.sched.warmup_fraction = 0.8;
        let out = run::<f64>(&cfg, &corpus(&cfg), None).unwrap();
        assert_eq!(out.stats.outer_steps, 1);
    }

    #[test]
    fn observer_can_stop_early() {
        let cfg = tiny(Mode::AdamwBaseline);
        let mut obs = |t: usize, _: Phase, _: &[ParamVector<f64>]| {
            if t == 5 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        };
        let out = run::<f64>(&cfg, &corpus(&cfg), Some(&mut obs)).unwrap();
        assert_eq!(out.log.records().len(), 5);
    }

    #[test]
    fn precision_must_match() {
        let cfg = tiny(Mode::AdamwBaseline);
        assert!(run::<f32>(&cfg, &corpus(&cfg), None).is_err());
    }

    #[test]
    fn divergence_aborts_with_iteration() {
        let mut cfg = tiny(Mode::AdamwBaseline);
        cfg.sched.inner_lr_peak = 1e200;
        cfg.sched.inner_lr_min = 1e200;
        cfg.adamw.weight_decay = 0.0;
        let err = run::<f64>(&cfg, &corpus(&cfg), None).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }), "{err}");
    }
}
