//! Rank layout and simulated collectives for groups × data-parallel ×
//! tensor-parallel training.
//!
//! Global ranks are laid out tensor-parallel-minor: the `tp_size` ranks of one
//! model replica are adjacent, replicas of one group are adjacent, and groups
//! follow each other. A replica is identified by `group * dp_per_group + dp`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RankCoord {
    pub group: usize,
    pub dp: usize,
    pub tp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    groups: usize,
    dp_per_group: usize,
    tp_size: usize,
}

impl Topology {
    pub fn new(groups: usize, dp_per_group: usize, tp_size: usize) -> Result<Self> {
        for (field, v) in [("groups", groups), ("dp_per_group", dp_per_group), ("tp_size", tp_size)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(Topology {
            groups,
            dp_per_group,
            tp_size,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn dp_per_group(&self) -> usize {
        self.dp_per_group
    }

    pub fn tp_size(&self) -> usize {
        self.tp_size
    }

    /// Number of model replicas, `groups * dp_per_group`.
    pub fn replicas(&self) -> usize {
        self.groups * self.dp_per_group
    }

    pub fn world_size(&self) -> usize {
        self.replicas() * self.tp_size
    }

    pub fn rank(&self, c: RankCoord) -> usize {
        debug_assert!(c.group < self.groups && c.dp < self.dp_per_group && c.tp < self.tp_size);
        (c.group * self.dp_per_group + c.dp) * self.tp_size + c.tp
    }

    pub fn coord(&self, rank: usize) -> RankCoord {
        debug_assert!(rank < self.world_size());
        let replica = rank / self.tp_size;
        RankCoord {
            group: replica / self.dp_per_group,
            dp: replica % self.dp_per_group,
            tp: rank % self.tp_size,
        }
    }

    pub fn replica_of(&self, rank: usize) -> usize {
        rank / self.tp_size
    }

    pub fn group_of_replica(&self, replica: usize) -> usize {
        replica / self.dp_per_group
    }

    pub fn rank_of_replica(&self, replica: usize, tp: usize) -> usize {
        replica * self.tp_size + tp
    }

    pub fn group_replicas(&self, group: usize) -> Range<usize> {
        group * self.dp_per_group..(group + 1) * self.dp_per_group
    }

    /// Ranks that average gradients for shard `tp` inside `group`.
    pub fn inner_participants(&self, group: usize, tp: usize) -> Vec<usize> {
        self.group_replicas(group)
            .map(|r| self.rank_of_replica(r, tp))
            .collect()
    }

    /// Ranks holding shard `tp` across every group: one per replica.
    pub fn outer_participants(&self, tp: usize) -> Vec<usize> {
        (0..self.replicas()).map(|r| self.rank_of_replica(r, tp)).collect()
    }

    /// Contiguous parameter ranges owned by each tensor-parallel rank.
    pub fn shard_ranges(&self, len: usize) -> Vec<Range<usize>> {
        split_ranges(len, self.tp_size)
    }

    /// Averages each group's copy of one shard. Every group contributes
    /// exactly one vector, in group order.
    pub fn outer_delta_sync<T: Real>(&self, per_group: &[&[T]]) -> Result<ParamVector<T>> {
        if per_group.len() != self.groups {
            return Err(Error::Protocol(format!(
                "outer sync expects {} group contributions, got {}",
                self.groups,
                per_group.len()
            )));
        }
        allreduce_avg(per_group)
    }

    /// Averages one shard over the data-parallel ranks of `group`.
    /// Contributions may arrive in any order; the reduction runs in ascending
    /// rank order.
    pub fn inner_gradient_sync<T: Real>(
        &self,
        group: usize,
        tp: usize,
        contributions: &[(usize, &[T])],
    ) -> Result<ParamVector<T>> {
        if group >= self.groups || tp >= self.tp_size {
            return Err(Error::Protocol(format!("no shard {tp} in group {group}")));
        }
        let ranks = self.inner_participants(group, tp);
        let mut ordered = Vec::with_capacity(ranks.len());
        for rank in &ranks {
            let mut found = contributions.iter().filter(|(r, _)| r == rank);
            match (found.next(), found.next()) {
                (Some(&(_, v)), None) => ordered.push(v),
                (None, _) => return Err(Error::Protocol(format!("rank {rank} did not contribute"))),
                (Some(_), Some(_)) => return Err(Error::Protocol(format!("rank {rank} contributed twice"))),
            }
        }
        if contributions.len() != ranks.len() {
            return Err(Error::Protocol(format!(
                "{} contributions for a group of {}",
                contributions.len(),
                ranks.len()
            )));
        }
        allreduce_avg(&ordered)
    }
}

/// Elementwise mean. Participants are summed left to right in the given
/// order with a running compensation term, then divided by their count; the
/// compensation keeps the mean of identical inputs within one ulp of them.
pub fn allreduce_avg<T: Real>(vectors: &[&[T]]) -> Result<ParamVector<T>> {
    let (first, rest) = vectors
        .split_first()
        .ok_or_else(|| Error::Protocol("collective with no participants".into()))?;
    if rest.is_empty() {
        return Ok(ParamVector::from_vec(first.to_vec()));
    }
    if let Some(v) = rest.iter().find(|v| v.len() != first.len()) {
        return Err(Error::Protocol(format!(
            "participant length {} differs from {}",
            v.len(),
            first.len()
        )));
    }
    let n = T::of(vectors.len() as f64);
    let mut sum = first.to_vec();
    let mut comp = vec![T::zero(); first.len()];
    for v in rest {
        for ((s, c), &x) in sum.iter_mut().zip(comp.iter_mut()).zip(v.iter()) {
            let t = *s + x;
            *c += if s.abs() >= x.abs() { (*s - t) + x } else { (x - t) + *s };
            *s = t;
        }
    }
    let mean = sum.iter().zip(&comp).map(|(&s, &c)| (s + c) / n).collect();
    Ok(ParamVector::from_vec(mean))
}

/// Bytes sent in total by `n` participants of a ring all-reduce over a
/// payload of `bytes`.
pub fn ring_traffic(n: usize, bytes: usize) -> u64 {
    2 * bytes as u64 * n.saturating_sub(1) as u64
}

/// Splits `0..len` into `parts` contiguous ranges whose lengths differ by at
/// most one, longer ranges first.
pub fn split_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    assert!(parts > 0, "split into zero parts");
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let n = base + usize::from(i < extra);
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

/// A parameter vector split into contiguous tensor-parallel shards.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedParams<T> {
    shards: Vec<ParamVector<T>>,
    offsets: Vec<Range<usize>>,
}

impl<T: Real> ShardedParams<T> {
    pub fn split(full: &[T], tp_size: usize) -> Self {
        let offsets = split_ranges(full.len(), tp_size);
        let shards = offsets
            .iter()
            .map(|r| ParamVector::from_vec(full[r.clone()].to_vec()))
            .collect();
        ShardedParams { shards, offsets }
    }

    pub fn shards(&self) -> &[ParamVector<T>] {
        &self.shards
    }

    pub fn offsets(&self) -> &[Range<usize>] {
        &self.offsets
    }

    pub fn concat(&self) -> ParamVector<T> {
        concat(self.shards.iter().map(|s| s.as_slice()))
    }
}

pub fn concat<'a, T: Real>(pieces: impl IntoIterator<Item = &'a [T]>) -> ParamVector<T> {
    let mut out = Vec::new();
    for p in pieces {
        out.extend_from_slice(p);
    }
    ParamVector::from_vec(out)
}
