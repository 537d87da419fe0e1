//! Browser bindings for the demo page in `www/`. Every export returns a JSON
//! string that the page plots; errors come back as JS exceptions.

use pier_core::costmodel;
use pier_core::driver::{self, CorpusSource, Mode, RunConfig, WorkerMode};
use pier_core::numerics::ModelConfig;
use pier_core::optim::{self, ScheduleConfig};
use pier_core::{Error, Precision};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

#[derive(Serialize)]
struct Curves {
    iters: Vec<usize>,
    inner_lr: Vec<f64>,
    outer_lr: Vec<Option<f64>>,
    mu: Vec<f64>,
    lazy_iters: usize,
    outer_iters: Vec<usize>,
}

fn schedule(total: usize, warmup_fraction: f64, sync_interval: usize) -> ScheduleConfig {
    ScheduleConfig {
        total_iters: total,
        warmup_fraction,
        sync_interval,
        decay_iters: total,
        ..ScheduleConfig::default()
    }
}

/// Inner learning rate, outer learning rate and outer momentum at every
/// iteration, plus the iterations where groups synchronize.
pub fn schedule_curves_json(total: usize, warmup_fraction: f64, sync_interval: usize) -> Result<String, Error> {
    let sched = schedule(total, warmup_fraction, sync_interval);
    let cfg = RunConfig {
        sched,
        ..RunConfig::default()
    };
    cfg.validate()?;
    let iters: Vec<usize> = (1..=total).collect();
    let curves = Curves {
        inner_lr: iters.iter().map(|&t| optim::inner_lr(t, &sched)).collect(),
        outer_lr: iters.iter().map(|&t| optim::outer_lr(t, total).ok()).collect(),
        mu: iters.iter().map(|&t| optim::momentum_mu(t, total)).collect(),
        lazy_iters: sched.lazy_iters(),
        outer_iters: cfg.outer_iters(),
        iters,
    };
    Ok(to_json(&curves))
}

fn parse_list(what: &str, text: &str) -> Result<Vec<usize>, Error> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::config(what, format!("`{s}` is not a count"))))
        .collect()
}

/// Projected runtimes for a hardware preset over comma-separated GPU counts
/// and sync intervals.
pub fn projection_json(preset: &str, gpus: &str, intervals: &str, total: usize) -> Result<String, Error> {
    let pre = costmodel::preset(preset)?;
    let sched = schedule(total, 0.1, 1);
    let rows = costmodel::sweep(&pre, &parse_list("gpus", gpus)?, &parse_list("intervals", intervals)?, &sched)?;
    Ok(to_json(&rows))
}

#[derive(Serialize)]
struct Series {
    mode: &'static str,
    iters: Vec<usize>,
    val_loss: Vec<f64>,
}

/// Trains a very small model with each of the three modes on the same data
/// and returns their validation curves.
pub fn tiny_compare_json(total: usize, sync_interval: usize, groups: usize, seed: u64) -> Result<String, Error> {
    let mut out = Vec::new();
    for mode in [Mode::AdamwBaseline, Mode::DilocoBaseline, Mode::Pier] {
        let cfg = RunConfig {
            mode,
            model: ModelConfig {
                vocab_size: 128,
                embed_dim: 16,
                num_layers: 1,
                num_heads: 2,
                seq_len: 8,
                precision: Precision::Double,
            },
            sched: ScheduleConfig {
                inner_lr_peak: 1e-2,
                inner_lr_min: 1e-3,
                ..schedule(total, 0.1, sync_interval)
            },
            groups,
            seed,
            corpus: CorpusSource::Synthetic {
                chain_seed: 0,
                train_len: 20_000,
                val_len: 2_000,
            },
            global_batch: 8 * groups,
            val_batches: 2,
            workers: WorkerMode::Sequential,
            ..RunConfig::default()
        };
        cfg.validate()?;
        let corpus = cfg.corpus.load()?;
        let res = driver::run::<f64>(&cfg, &corpus, None)?;
        let (iters, val_loss) = res
            .log
            .records()
            .iter()
            .filter_map(|r| r.val_loss.map(|v| (r.iter, v)))
            .unzip();
        out.push(Series {
            mode: mode.name(),
            iters,
            val_loss,
        });
    }
    Ok(to_json(&out))
}

#[wasm_bindgen]
pub fn schedule_curves(total: usize, warmup_fraction: f64, sync_interval: usize) -> Result<String, JsValue> {
    schedule_curves_json(total, warmup_fraction, sync_interval).map_err(js_err)
}

#[wasm_bindgen]
pub fn projection(preset: &str, gpus: &str, intervals: &str, total: usize) -> Result<String, JsValue> {
    projection_json(preset, gpus, intervals, total).map_err(js_err)
}

#[wasm_bindgen]
pub fn tiny_compare(total: usize, sync_interval: usize, groups: usize, seed: u64) -> Result<String, JsValue> {
    tiny_compare_json(total, sync_interval, groups, seed).map_err(js_err)
}
