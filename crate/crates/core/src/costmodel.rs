//! Analytical runtime projection over a two-level network, and the speedup
//! and efficiency metrics used to compare schedules.
//!
//! Collectives are costed as ring all-reduces moving `2 S (n - 1) / n` bytes
//! per participant. A collective whose participants live on more than one
//! node runs entirely at the inter-node bandwidth. Compute and communication
//! do not overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ScheduleConfig;
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Bytes per second between GPUs of one node.
    pub intra_node_bw: f64,
    /// Bytes per second between nodes.
    pub inter_node_bw: f64,
    /// Fixed cost of one collective, in seconds.
    pub per_collective_latency: f64,
    /// Seconds of computation per iteration on each GPU.
    pub per_iter_compute_time: f64,
    /// Size of the full model (or gradient) in bytes.
    pub model_bytes: f64,
    pub gpus_per_node: usize,
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("intra_node_bw", self.intra_node_bw),
            ("inter_node_bw", self.inter_node_bw),
            ("per_collective_latency", self.per_collective_latency),
            ("per_iter_compute_time", self.per_iter_compute_time),
            ("model_bytes", self.model_bytes),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and positive"));
            }
        }
        if self.gpus_per_node == 0 {
            return Err(Error::config("gpus_per_node", "must be positive"));
        }
        if self.intra_node_bw < self.inter_node_bw {
            return Err(Error::config(
                "intra_node_bw",
                "must not be below inter_node_bw",
            ));
        }
        Ok(())
    }
}

/// A named machine description with a model-size and compute default.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub params: CostModelParams,
    /// Seconds one GPU needs for a full global batch; sweeps divide this by
    /// the GPU count.
    pub single_gpu_iter_time: f64,
}

/// Bytes of a 1.5B-parameter model in 16-bit precision.
const GPT2_XL_BYTES: f64 = 1.5e9 * 2.0;
/// One GPU's time for a 512 x 1024-token batch of that model at roughly
/// 150 TFLOP/s sustained.
const GPT2_XL_SINGLE_GPU_ITER: f64 = 6.0 * 1.5e9 * 512.0 * 1024.0 / 150e12;

pub fn presets() -> Vec<Preset> {
    vec![
        Preset {
            // Four A100s per node on third-generation NVLink; four 200 Gb/s
            // Slingshot NICs per node.
            name: "a100-node4",
            params: CostModelParams {
                intra_node_bw: 600e9,
                inter_node_bw: 100e9,
                per_collective_latency: 10e-6,
                per_iter_compute_time: GPT2_XL_SINGLE_GPU_ITER / 4.0,
                model_bytes: GPT2_XL_BYTES,
                gpus_per_node: 4,
            },
            single_gpu_iter_time: GPT2_XL_SINGLE_GPU_ITER,
        },
        Preset {
            // One GH200 per node; 400 Gb/s NDR InfiniBand.
            name: "gh200-node1",
            params: CostModelParams {
                intra_node_bw: 900e9,
                inter_node_bw: 50e9,
                per_collective_latency: 10e-6,
                per_iter_compute_time: GPT2_XL_SINGLE_GPU_ITER / 2.0,
                model_bytes: GPT2_XL_BYTES,
                gpus_per_node: 1,
            },
            single_gpu_iter_time: GPT2_XL_SINGLE_GPU_ITER / 2.0,
        },
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let known: Vec<&str> = presets().iter().map(|p| p.name).collect();
        Error::config("preset", format!("unknown preset {name:?}; known: {}", known.join(", ")))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Global gradient all-reduce every iteration.
    AdamwBaseline,
    /// Lazy start, then group-local all-reduce every iteration and a global
    /// model all-reduce every sync interval.
    Pier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeProjection {
    pub total_time: f64,
    pub compute_time: f64,
    pub inner_comm_time: f64,
    pub outer_comm_time: f64,
    pub inner_events: usize,
    pub outer_events: usize,
}

/// `t_baseline / t_pier`.
pub fn speedup(t_baseline: f64, t_pier: f64) -> Result<f64> {
    positive("t_baseline", t_baseline)?;
    positive("t_pier", t_pier)?;
    Ok(t_baseline / t_pier)
}

/// Runtime reduction relative to the baseline, in percent.
pub fn perf_improvement(t_baseline: f64, t_pier: f64) -> Result<f64> {
    positive("t_baseline", t_baseline)?;
    if !t_pier.is_finite() {
        return Err(Error::Domain(format!("t_pier must be finite, got {t_pier}")));
    }
    Ok((t_baseline - t_pier) / t_baseline * 100.0)
}

/// Strong-scaling efficiency from `m` to `n` GPUs: `(t_m / t_n) (m / n)`.
pub fn scaling_efficiency(t_m: f64, t_n: f64, m: f64, n: f64) -> Result<f64> {
    positive("t_m", t_m)?;
    positive("t_n", t_n)?;
    positive("m", m)?;
    positive("n", n)?;
    Ok(t_m / t_n * (m / n))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Time of one ring all-reduce over `n` participants, or zero for one.
fn allreduce_time(p: &CostModelParams, bytes: f64, n: usize, spans_nodes: bool) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let bw = if spans_nodes { p.inter_node_bw } else { p.intra_node_bw };
    p.per_collective_latency + 2.0 * bytes * (n - 1) as f64 / n as f64 / bw
}

fn node_of(p: &CostModelParams, rank: usize) -> usize {
    rank / p.gpus_per_node
}

/// Whether any group's data-parallel ranks sit on more than one node.
fn groups_span_nodes(p: &CostModelParams, topo: &Topology) -> bool {
    (0..topo.groups()).any(|g| {
        let reps = topo.group_replicas(g);
        let first = topo.rank_of_replica(reps.start, 0);
        let last = topo.rank_of_replica(reps.end - 1, topo.tp_size() - 1);
        node_of(p, first) != node_of(p, last)
    })
}

fn world_spans_nodes(p: &CostModelParams, topo: &Topology) -> bool {
    node_of(p, 0) != node_of(p, topo.world_size() - 1)
}

/// Projected wall time for `sched.total_iters` iterations.
///
/// Each tensor-parallel rank reduces its `1 / tp_size` share of the model.
/// The sync interval and lazy-start length are used as given, without the
/// divisibility checks a training run needs.
pub fn project_runtime(
    params: &CostModelParams,
    topo: &Topology,
    sched: &ScheduleConfig,
    schedule: Schedule,
) -> Result<RuntimeProjection> {
    params.validate()?;
    if sched.sync_interval == 0 {
        return Err(Error::config("sync_interval", "must be positive"));
    }
    let total = sched.total_iters;
    let shard = params.model_bytes / topo.tp_size() as f64;
    let replicas = topo.replicas();
    let global = allreduce_time(params, shard, replicas, world_spans_nodes(params, topo));
    let global_events = usize::from(replicas > 1);
    let compute_time = total as f64 * params.per_iter_compute_time;

    let (inner_comm_time, outer_comm_time, inner_events, outer_events) = match schedule {
        Schedule::AdamwBaseline => (total as f64 * global, 0.0, total * global_events, 0),
        Schedule::Pier => {
            let lazy = sched.lazy_iters().min(total);
            let local = total - lazy;
            let group = allreduce_time(params, shard, topo.dp_per_group(), groups_span_nodes(params, topo));
            let group_events = usize::from(topo.dp_per_group() > 1);
            let outer = local / sched.sync_interval;
            (
                lazy as f64 * global + local as f64 * group,
                outer as f64 * global,
                lazy * global_events + local * group_events,
                outer * global_events,
            )
        }
    };
    Ok(RuntimeProjection {
        total_time: compute_time + inner_comm_time + outer_comm_time,
        compute_time,
        inner_comm_time,
        outer_comm_time,
        inner_events,
        outer_events,
    })
}

/// One row of a GPU-count by sync-interval sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gpus: usize,
    pub groups: usize,
    pub sync_interval: usize,
    pub baseline: RuntimeProjection,
    pub pier: RuntimeProjection,
    pub speedup: f64,
    pub perf_improvement: f64,
    /// Efficiency relative to the smallest GPU count of the sweep.
    pub baseline_efficiency: f64,
    pub pier_efficiency: f64,
}

/// Strong-scaling sweep with pure data parallelism and one group per node
/// (one per GPU when a node holds a single GPU).
pub fn sweep(
    preset: &Preset,
    gpu_counts: &[usize],
    intervals: &[usize],
    sched: &ScheduleConfig,
) -> Result<Vec<SweepRow>> {
    let base_n = *gpu_counts
        .iter()
        .min()
        .ok_or_else(|| Error::config("gpus", "sweep needs at least one GPU count"))?;
    let per_node = preset.params.gpus_per_node;
    let setup = |n: usize| -> Result<(CostModelParams, Topology)> {
        if n == 0 {
            return Err(Error::config("gpus", "GPU counts must be positive"));
        }
        let mut p = preset.params;
        p.per_iter_compute_time = preset.single_gpu_iter_time / n as f64;
        let dp = per_node.min(n);
        if !n.is_multiple_of(dp) {
            return Err(Error::config("gpus", format!("{n} GPUs do not fill nodes of {per_node}")));
        }
        Ok((p, Topology::new(n / dp, dp, 1)?))
    };
    let mut rows = Vec::new();
    for &r in intervals {
        let s = ScheduleConfig {
            sync_interval: r,
            ..*sched
        };
        let (bp, bt) = setup(base_n)?;
        let base_baseline = project_runtime(&bp, &bt, &s, Schedule::AdamwBaseline)?;
        let base_pier = project_runtime(&bp, &bt, &s, Schedule::Pier)?;
        for &n in gpu_counts {
            let (p, topo) = setup(n)?;
            let baseline = project_runtime(&p, &topo, &s, Schedule::AdamwBaseline)?;
            let pier = project_runtime(&p, &topo, &s, Schedule::Pier)?;
            rows.push(SweepRow {
                gpus: n,
                groups: topo.groups(),
                sync_interval: r,
                speedup: speedup(baseline.total_time, pier.total_time)?,
                perf_improvement: perf_improvement(baseline.total_time, pier.total_time)?,
                baseline_efficiency: scaling_efficiency(
                    base_baseline.total_time,
                    baseline.total_time,
                    base_n as f64,
                    n as f64,
                )?,
                pier_efficiency: scaling_efficiency(base_pier.total_time, pier.total_time, base_n as f64, n as f64)?,
                baseline,
                pier,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ulps(a: f64, b: f64) -> u64 {
        (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
    }

    fn sched(r: usize) -> ScheduleConfig {
        ScheduleConfig {
            sync_interval: r,
            ..ScheduleConfig::default()
        }
    }

    fn a100() -> CostModelParams {
        preset("a100-node4").unwrap().params
    }

    #[test]
    fn metric_examples() {
        assert_eq!(speedup(100.0, 50.0).unwrap(), 2.0);
        assert_eq!(speedup(7.0, 7.0).unwrap(), 1.0);
        assert_eq!(perf_improvement(100.0, 50.0).unwrap(), 50.0);
        assert_eq!(perf_improvement(3.0, 3.0).unwrap(), 0.0);
        assert!(perf_improvement(100.0, 150.0).unwrap() < 0.0);
        assert_eq!(scaling_efficiency(100.0, 50.0, 8.0, 16.0).unwrap(), 1.0);
        assert!(ulps(scaling_efficiency(100.0, 60.0, 8.0, 16.0).unwrap(), 5.0 / 6.0) <= 4);
        assert_eq!(scaling_efficiency(3.0, 3.0, 5.0, 5.0).unwrap(), 1.0);
    }

    #[test]
    fn metric_domain_errors() {
        assert!(matches!(speedup(0.0, 1.0), Err(Error::Domain(_))));
        assert!(speedup(1.0, -1.0).is_err());
        assert!(perf_improvement(0.0, 1.0).is_err());
        assert!(scaling_efficiency(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(speedup(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn presets_are_valid() {
        for p in presets() {
            p.params.validate().unwrap();
        }
        assert!(preset("tpu").is_err());
    }

    #[test]
    fn long_interval_leaves_at_most_one_outer_event() {
        let p = a100();
        let topo = Topology::new(2, 4, 1).unwrap();
        let s = sched(2800);
        let proj = project_runtime(&p, &topo, &s, Schedule::Pier).unwrap();
        assert!(proj.outer_events <= 1);
        let s = sched(2701);
        let proj = project_runtime(&p, &topo, &s, Schedule::Pier).unwrap();
        assert_eq!(proj.outer_events, 0);
        // Past lazy start only node-local traffic remains.
        let intra = allreduce_time(&p, p.model_bytes, 4, false);
        let global = allreduce_time(&p, p.model_bytes, 8, true);
        let expected = 300.0 * global + 2700.0 * intra;
        assert!((proj.inner_comm_time - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn groups_as_nodes_beat_baseline() {
        let p = a100();
        for nodes in [2, 8, 64] {
            let topo = Topology::new(nodes, 4, 1).unwrap();
            let b = project_runtime(&p, &topo, &sched(50), Schedule::AdamwBaseline).unwrap();
            let q = project_runtime(&p, &topo, &sched(50), Schedule::Pier).unwrap();
            assert!(speedup(b.total_time, q.total_time).unwrap() > 1.0);
        }
    }

    #[test]
    fn per_step_global_sync_equals_baseline() {
        let mut p = a100();
        p.gpus_per_node = 1;
        let topo = Topology::new(16, 1, 1).unwrap();
        let b = project_runtime(&p, &topo, &sched(1), Schedule::AdamwBaseline).unwrap();
        let q = project_runtime(&p, &topo, &sched(1), Schedule::Pier).unwrap();
        assert!((b.total_time - q.total_time).abs() <= 1e-12 * b.total_time);
        assert_eq!(b.inner_events, q.inner_events + q.outer_events);
    }

    #[test]
    fn single_gpu_has_no_communication() {
        let topo = Topology::new(1, 1, 1).unwrap();
        let q = project_runtime(&a100(), &topo, &sched(20), Schedule::Pier).unwrap();
        assert_eq!(q.total_time, q.compute_time);
        assert_eq!((q.inner_events, q.outer_events), (0, 0));
    }

    #[test]
    fn tensor_parallel_shrinks_payload() {
        let p = a100();
        let one = project_runtime(&p, &Topology::new(8, 1, 1).unwrap(), &sched(50), Schedule::AdamwBaseline).unwrap();
        let two = project_runtime(&p, &Topology::new(8, 1, 2).unwrap(), &sched(50), Schedule::AdamwBaseline).unwrap();
        assert!(two.inner_comm_time < one.inner_comm_time);
    }

    #[test]
    fn sweep_baseline_communication_grows_with_gpus() {
        let pre = preset("a100-node4").unwrap();
        let counts = [8, 16, 32, 64, 128, 256];
        let rows = sweep(&pre, &counts, &[50], &ScheduleConfig::default()).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].baseline.inner_comm_time >= w[0].baseline.inner_comm_time);
        }
        assert_eq!(rows[0].baseline_efficiency, 1.0);
        assert!(sweep(&pre, &[6], &[50], &ScheduleConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn speedup_is_reciprocal(a in 1e-3f64..1e6, b in 1e-3f64..1e6) {
            let p = speedup(a, b).unwrap() * speedup(b, a).unwrap();
            prop_assert!(ulps(p, 1.0) <= 2);
        }

        #[test]
        fn improvement_matches_speedup(a in 1e-3f64..1e6, b in 1e-3f64..1e6) {
            let s = speedup(a, b).unwrap();
            let lhs = perf_improvement(a, b).unwrap();
            let rhs = (1.0 - 1.0 / s) * 100.0;
            // Both sides round near zero when a and b are close, so compare
            // against the scale of the terms being subtracted.
            prop_assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * 100.0 * (1.0 + b / a), "{} vs {}", lhs, rhs);
        }

        #[test]
        fn perfect_scaling_has_unit_efficiency(t in 1e-3f64..1e6, m in 1usize..512, n in 1usize..512) {
            let (m, n) = (m as f64, n as f64);
            let e = scaling_efficiency(t, t * m / n, m, n).unwrap();
            prop_assert!((e - 1.0).abs() <= 4.0 * f64::EPSILON);
        }

        #[test]
        fn projection_is_additive_and_monotone(
            k in 1usize..33, dp in 1usize..5, tp in 1usize..3,
            r in 1usize..600, bytes in 1e6f64..1e10, factor in 1.0f64..4.0,
        ) {
            let p = a100();
            let topo = Topology::new(k, dp, tp).unwrap();
            for schedule in [Schedule::AdamwBaseline, Schedule::Pier] {
                let base = CostModelParams { model_bytes: bytes, ..p };
                let q = project_runtime(&base, &topo, &sched(r), schedule).unwrap();
                prop_assert_eq!(q.total_time, q.compute_time + q.inner_comm_time + q.outer_comm_time);
                prop_assert!(q.inner_comm_time >= 0.0 && q.outer_comm_time >= 0.0);

                let bigger = CostModelParams { model_bytes: bytes * factor, ..base };
                prop_assert!(project_runtime(&bigger, &topo, &sched(r), schedule).unwrap().total_time >= q.total_time);
                let faster_inter = CostModelParams { inter_node_bw: base.inter_node_bw * factor, intra_node_bw: base.intra_node_bw * factor, ..base };
                prop_assert!(project_runtime(&faster_inter, &topo, &sched(r), schedule).unwrap().total_time <= q.total_time);
                let faster_intra = CostModelParams { intra_node_bw: base.intra_node_bw * factor, ..base };
                prop_assert!(project_runtime(&faster_intra, &topo, &sched(r), schedule).unwrap().total_time <= q.total_time);
            }
            let q1 = project_runtime(&p, &topo, &sched(r), Schedule::Pier).unwrap();
            let q2 = project_runtime(&p, &topo, &sched(2 * r), Schedule::Pier).unwrap();
            prop_assert!(q2.total_time <= q1.total_time);
        }
    }
}
