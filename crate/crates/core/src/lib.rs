//! Two-level local-update training on a toy causal language model.
//!
//! Workers are arranged in `k` groups of data-parallel replicas, each replica
//! optionally split across tensor-parallel ranks. Inside a group every
//! iteration runs AdamW on group-averaged gradients; every `r` iterations the
//! groups exchange model deltas and apply a Nesterov-style outer step. The
//! first fraction of training runs fully synchronous AdamW while an outer
//! momentum buffer is accumulated from model differences ("momentum warmup"),
//! and the outer momentum coefficient is stepped down afterwards ("momentum
//! decay").
//!
//! Module map:
//! - [`numerics`]: model, loss, gradients, finite-difference checks, corpus.
//! - [`optim`]: AdamW, clipping, outer step, and every schedule.
//! - [`topology`]: rank layout, sharding and deterministic collectives.
//! - [`driver`]: the training loops (pier, synchronous AdamW, DiLoCo) and host offload.
//! - [`costmodel`]: analytical runtime projection and speedup metrics.
//! - [`harness`]: config files, artifacts and the command implementations.

pub mod costmodel;
pub mod driver;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod real;
pub mod topology;

pub use error::{Error, Result};
pub use params::ParamVector;
pub use real::{Precision, Real};
