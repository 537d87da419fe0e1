//! Inner AdamW, the outer Nesterov step, gradient clipping, and the
//! learning-rate / momentum schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{squared_norm, ParamVector};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: ParamVector<T>,
    pub v: ParamVector<T>,
    pub step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        AdamWState {
            m: ParamVector::zeros(len),
            v: ParamVector::zeros(len),
            step: 0,
        }
    }

    /// One decoupled-weight-decay AdamW step with bias correction, in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64, cfg: &AdamWConfig) -> Result<()> {
        let n = self.m.len();
        if params.len() != n {
            return Err(Error::length_mismatch("params", n, params.len()));
        }
        if grads.len() != n {
            return Err(Error::length_mismatch("grads", n, grads.len()));
        }
        self.step += 1;
        let step = i32::try_from(self.step).unwrap_or(i32::MAX);
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let one = T::one();
        let bc1 = one - b1.powi(step);
        let bc2 = one - b2.powi(step);
        let lr_t = T::of(lr);
        let decay = one - lr_t * T::of(cfg.weight_decay);
        let eps = T::of(cfg.eps);
        for i in 0..n {
            let g = grads[i];
            let m = b1 * self.m[i] + (one - b1) * g;
            let v = b2 * self.v[i] + (one - b2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] = params[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Value-in, value-out form of [`AdamWState::step`].
pub fn adamw_step<T: Real>(
    state: &AdamWState<T>,
    params: &ParamVector<T>,
    grads: &ParamVector<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(ParamVector<T>, AdamWState<T>)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.step(&mut params, grads, lr, cfg)?;
    Ok((params, state))
}

/// Multiplier that brings a vector of squared norm `sq_norm` within `max_norm`.
pub fn clip_factor<T: Real>(sq_norm: T, max_norm: f64) -> Option<T> {
    let norm = sq_norm.sqrt();
    let max = T::of(max_norm);
    (norm > max).then(|| max / norm)
}

pub fn clip_global_norm<T: Real>(grads: &ParamVector<T>, max_norm: f64) -> ParamVector<T> {
    let mut out = grads.clone();
    if let Some(scale) = clip_factor(squared_norm([grads.as_slice()]), max_norm) {
        for g in out.iter_mut() {
            *g *= scale;
        }
    }
    out
}

/// Iteration counts and learning-rate schedule of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_iters: usize,
    /// Fraction of `total_iters` spent in the synchronous lazy-start phase.
    pub warmup_fraction: f64,
    pub sync_interval: usize,
    pub inner_lr_peak: f64,
    pub inner_lr_min: f64,
    pub inner_warmup_fraction: f64,
    pub decay_iters: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_iters: 3000,
            warmup_fraction: 0.1,
            sync_interval: 20,
            inner_lr_peak: 3e-3,
            inner_lr_min: 3e-4,
            inner_warmup_fraction: 0.02,
            decay_iters: 3000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("total_iters", "must be positive"));
        }
        if self.sync_interval == 0 {
            return Err(Error::config("sync_interval", "must be positive"));
        }
        if self.sync_interval >= self.total_iters {
            return Err(Error::config(
                "sync_interval",
                format!(
                    "{} must be smaller than total_iters {}",
                    self.sync_interval, self.total_iters
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must lie in [0, 1)"));
        }
        let lazy = self.warmup_fraction * self.total_iters as f64;
        if (lazy - lazy.round()).abs() > 1e-9 {
            return Err(Error::config(
                "warmup_fraction",
                format!("warmup_fraction * total_iters = {lazy} is not an integer"),
            ));
        }
        if !self.lazy_iters().is_multiple_of(self.sync_interval) {
            return Err(Error::config(
                "sync_interval",
                format!(
                    "lazy-start length {} is not a multiple of sync_interval {}",
                    self.lazy_iters(),
                    self.sync_interval
                ),
            ));
        }
        if !(self.inner_lr_min >= 0.0 && self.inner_lr_min <= self.inner_lr_peak) {
            return Err(Error::config("inner_lr_min", "must lie in [0, inner_lr_peak]"));
        }
        if !(0.0..1.0).contains(&self.inner_warmup_fraction) {
            return Err(Error::config("inner_warmup_fraction", "must lie in [0, 1)"));
        }
        if self.decay_iters == 0 || self.decay_iters <= self.inner_warmup_iters() {
            return Err(Error::config("decay_iters", "must exceed the inner warmup length"));
        }
        Ok(())
    }

    /// Length of the lazy-start phase, `p * T`.
    pub fn lazy_iters(&self) -> usize {
        (self.warmup_fraction * self.total_iters as f64).round() as usize
    }

    pub fn inner_warmup_iters(&self) -> usize {
        (self.inner_warmup_fraction * self.total_iters as f64).floor() as usize
    }
}

/// Linear warmup to the peak, cosine decay to the minimum at `decay_iters`,
/// constant afterwards.
pub fn inner_lr(t: usize, sched: &ScheduleConfig) -> f64 {
    let warm = sched.inner_warmup_iters();
    let peak = sched.inner_lr_peak;
    let min = sched.inner_lr_min;
    if t < warm {
        return peak * (t as f64 / warm as f64);
    }
    if t == warm {
        return peak;
    }
    if t >= sched.decay_iters {
        return min;
    }
    let progress = (t - warm) as f64 / (sched.decay_iters - warm) as f64;
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `floor(total * percent / 100)` in integer arithmetic.
fn boundary(total: usize, percent: usize) -> usize {
    total * percent / 100
}

/// Outer learning rate: linear ramp 0 -> 1 on [10%, 20%) of training, 1.1
/// on [20%, 80%), 0.9 on [80%, 100%].
pub fn outer_lr(t: usize, total: usize) -> Result<f64> {
    let start = boundary(total, 10);
    let plateau = boundary(total, 20);
    let tail = boundary(total, 80);
    if t < start || t > total {
        return Err(Error::Contract(format!(
            "outer_lr({t}) is defined on [{start}, {total}]"
        )));
    }
    Ok(if t < plateau {
        (t - start) as f64 / (plateau - start) as f64
    } else if t < tail {
        1.1
    } else {
        0.9
    })
}

/// Outer momentum coefficient: 0.99 on [10%, 15%), 0.95 on [15%, 20%), 0.9
/// otherwise (including the lazy-start phase).
pub fn momentum_mu(t: usize, total: usize) -> f64 {
    if t >= boundary(total, 10) && t < boundary(total, 15) {
        0.99
    } else if t >= boundary(total, 15) && t < boundary(total, 20) {
        0.95
    } else {
        0.9
    }
}

/// Outer optimizer state: momentum buffer, snapshot of the parameters at the
/// previous synchronization, and the coefficient last used.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterState<T> {
    pub momentum: ParamVector<T>,
    pub theta_prev: ParamVector<T>,
    pub mu: f64,
}

impl<T: Real> OuterState<T> {
    pub fn new(theta: ParamVector<T>) -> Self {
        OuterState {
            momentum: ParamVector::zeros(theta.len()),
            theta_prev: theta,
            mu: 0.9,
        }
    }

    /// Accumulate a model difference into the momentum buffer without
    /// applying it: `M <- mu M + delta`.
    pub fn accumulate(&mut self, delta: &[T], mu: f64) -> Result<()> {
        if delta.len() != self.momentum.len() {
            return Err(Error::length_mismatch("delta", self.momentum.len(), delta.len()));
        }
        let mu_t = T::of(mu);
        for (m, &d) in self.momentum.iter_mut().zip(delta) {
            *m = mu_t * *m + d;
        }
        self.mu = mu;
        Ok(())
    }
}

/// Nesterov outer step in the single-evaluation form:
/// `M' = mu M + delta`, `theta = theta_prev + lr (mu M' + delta)`.
/// The returned state keeps the old snapshot; the caller refreshes it.
pub fn outer_step<T: Real>(
    outer: &OuterState<T>,
    delta: &ParamVector<T>,
    lr: f64,
    mu: f64,
) -> Result<(ParamVector<T>, OuterState<T>)> {
    let n = outer.momentum.len();
    delta.check_len("delta", n)?;
    outer.theta_prev.check_len("theta_prev", n)?;
    let mut next = outer.clone();
    next.accumulate(delta, mu)?;
    let (lr_t, mu_t) = (T::of(lr), T::of(mu));
    let theta = outer
        .theta_prev
        .iter()
        .zip(next.momentum.iter())
        .zip(delta.iter())
        .map(|((&prev, &m), &d)| prev + lr_t * (mu_t * m + d))
        .collect();
    Ok((ParamVector::from_vec(theta), next))
}

/// The same outer step, applied to a shard in place and anchored on the
/// averaged current parameters instead of the snapshot.
///
/// With `avg = snapshot + delta` the result
/// `avg + (lr (mu M' + delta) - delta)` equals `snapshot + lr (mu M' + delta)`
/// algebraically, but when `lr = 1` and `mu = 0` it returns `avg` bit for bit,
/// which makes a single-group run reproduce synchronous training exactly.
/// On return `avg` holds the new parameters and `momentum` holds `M'`.
pub fn outer_step_in_place<T: Real>(
    momentum: &mut [T],
    avg: &mut [T],
    snapshot: &[T],
    lr: f64,
    mu: f64,
) -> Result<()> {
    let n = momentum.len();
    if avg.len() != n {
        return Err(Error::length_mismatch("params", n, avg.len()));
    }
    if snapshot.len() != n {
        return Err(Error::length_mismatch("snapshot", n, snapshot.len()));
    }
    let (lr_t, mu_t) = (T::of(lr), T::of(mu));
    for i in 0..n {
        let delta = avg[i] - snapshot[i];
        let m = mu_t * momentum[i] + delta;
        momentum[i] = m;
        avg[i] += lr_t * (mu_t * m + delta) - delta;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector<f64> {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn clip_examples() {
        let c = clip_global_norm(&pv(&[3.0, 4.0]), 1.0);
        assert!((c[0] - 0.6).abs() < 4.0 * f64::EPSILON && (c[1] - 0.8).abs() < 4.0 * f64::EPSILON);
        assert_eq!(clip_global_norm(&pv(&[0.1, 0.1]), 1.0).as_slice(), &[0.1, 0.1]);
        assert_eq!(clip_global_norm(&pv(&[0.0, 0.0]), 1.0).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn adamw_hand_evaluated_step() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let (p, s) = adamw_step(&AdamWState::new(1), &pv(&[1.0]), &pv(&[1.0]), 0.1, &cfg).unwrap();
        assert_eq!(s.step, 1);
        assert!((s.m[0] - 0.1).abs() < 1e-15);
        assert!((s.v[0] - 0.001).abs() < 1e-15);
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-14, "{}", p[0]);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let params = pv(&[1.0, -2.0, 0.5]);
        let (p, s) = adamw_step(&AdamWState::new(3), &params, &pv(&[0.0; 3]), 0.1, &cfg).unwrap();
        assert!(p.bitwise_eq(&params));
        assert_eq!(s.step, 1);

        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let (p, _) = adamw_step(&AdamWState::new(1), &pv(&[1.0]), &pv(&[0.0]), 0.1, &cfg).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adamw_length_mismatch() {
        let r = adamw_step(&AdamWState::new(2), &pv(&[1.0]), &pv(&[1.0]), 0.1, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn adamw_config_validation() {
        let bad = AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AdamWConfig {
            clip_norm: 0.0,
            ..AdamWConfig::default()
        };
        assert!(bad.validate().is_err());
        AdamWConfig::default().validate().unwrap();
    }

    fn sched(total: usize) -> ScheduleConfig {
        ScheduleConfig {
            total_iters: total,
            decay_iters: total,
            ..ScheduleConfig::default()
        }
    }

    #[test]
    fn inner_lr_examples() {
        let s = sched(1000);
        assert_eq!(inner_lr(0, &s), 0.0);
        assert_eq!(inner_lr(20, &s), s.inner_lr_peak);
        assert_eq!(inner_lr(1000, &s), s.inner_lr_min);
        assert_eq!(inner_lr(1200, &s), s.inner_lr_min);
        assert!((inner_lr(10, &s) - 0.5 * s.inner_lr_peak).abs() < 1e-18);
    }

    #[test]
    fn inner_lr_nonincreasing_after_peak() {
        let s = sched(3000);
        let mut prev = inner_lr(s.inner_warmup_iters(), &s);
        for t in s.inner_warmup_iters() + 1..=s.decay_iters {
            let lr = inner_lr(t, &s);
            assert!(lr <= prev, "t={t}");
            prev = lr;
        }
    }

    #[test]
    fn outer_lr_examples() {
        assert_eq!(outer_lr(100, 1000).unwrap(), 0.0);
        assert_eq!(outer_lr(150, 1000).unwrap(), 0.5);
        assert_eq!(outer_lr(500, 1000).unwrap(), 1.1);
        assert_eq!(outer_lr(900, 1000).unwrap(), 0.9);
        assert_eq!(outer_lr(1000, 1000).unwrap(), 0.9);
        assert!(matches!(outer_lr(99, 1000), Err(Error::Contract(_))));
        assert!(outer_lr(1001, 1000).is_err());
    }

    #[test]
    fn momentum_examples() {
        assert_eq!(momentum_mu(120, 1000), 0.99);
        assert_eq!(momentum_mu(170, 1000), 0.95);
        assert_eq!(momentum_mu(500, 1000), 0.9);
        assert_eq!(momentum_mu(50, 1000), 0.9);
    }

    #[test]
    fn schedule_validation() {
        sched(1000).validate().unwrap();
        let bad = ScheduleConfig {
            sync_interval: 33,
            ..sched(1000)
        };
        let err = bad.validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "sync_interval"));
        let degenerate = ScheduleConfig {
            warmup_fraction: 0.0,
            ..sched(1000)
        };
        degenerate.validate().unwrap();
        assert_eq!(degenerate.lazy_iters(), 0);
        assert!(ScheduleConfig { warmup_fraction: 0.1005, ..sched(1000) }.validate().is_err());
    }

    #[test]
    fn outer_step_examples() {
        let d = pv(&[0.5, -1.25, 3.0]);
        let prev = pv(&[1.0, 2.0, -3.0]);
        let outer = OuterState::new(prev.clone());

        let (theta, next) = outer_step(&outer, &d, 1.0, 0.0).unwrap();
        for i in 0..3 {
            assert_eq!(theta[i].to_bits(), (prev[i] + d[i]).to_bits());
        }
        assert_eq!(next.theta_prev, prev);

        let (theta, next) = outer_step(&outer, &d, 1.0, 0.9).unwrap();
        assert_eq!(next.momentum, d);
        for i in 0..3 {
            assert!((theta[i] - (prev[i] + 1.9 * d[i])).abs() < 1e-14);
        }

        let m = pv(&[2.0, -4.0, 0.25]);
        let outer = OuterState {
            momentum: m.clone(),
            theta_prev: prev.clone(),
            mu: 0.9,
        };
        let (theta, next) = outer_step(&outer, &pv(&[0.0; 3]), 1.0, 0.9).unwrap();
        for i in 0..3 {
            assert!((next.momentum[i] - 0.9 * m[i]).abs() < 1e-15);
            assert!((theta[i] - (prev[i] + 0.81 * m[i])).abs() < 1e-14);
        }
        assert!(outer_step(&outer, &pv(&[0.0; 2]), 1.0, 0.9).is_err());
    }

    #[test]
    fn anchored_step_is_exact_in_degenerate_case() {
        let snap = [1e-17f64, -3.0, 0.1, 7.5e-3];
        let cur = [1.0f64, 2.0e-9, -0.3, -7.4e-3];
        let mut avg = cur;
        let mut m = [5.0, -1.0, 2.0, 0.0];
        outer_step_in_place(&mut m, &mut avg, &snap, 1.0, 0.0).unwrap();
        for i in 0..4 {
            assert_eq!(avg[i].to_bits(), cur[i].to_bits());
        }
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(v in prop::collection::vec(-1e3f64..1e3, 1..64), max in 1e-3f64..10.0) {
            let out = clip_global_norm(&pv(&v), max);
            let n = out.norm();
            prop_assert!(n <= max * (1.0 + 4.0 * f64::EPSILON), "norm {} max {}", n, max);
        }

        #[test]
        fn adamw_fresh_zero_grad_is_identity(v in prop::collection::vec(-10f64..10.0, 1..32), lr in 0f64..1.0) {
            let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
            let params = pv(&v);
            let (p, _) = adamw_step(&AdamWState::new(v.len()), &params, &pv(&vec![0.0; v.len()]), lr, &cfg).unwrap();
            prop_assert!(p.bitwise_eq(&params));
        }

        #[test]
        fn anchored_matches_snapshot_form(
            snap in prop::collection::vec(-1f64..1.0, 8),
            delta in prop::collection::vec(-0.1f64..0.1, 8),
            m in prop::collection::vec(-1f64..1.0, 8),
            lr in 0f64..1.2,
            mu in 0f64..0.99,
        ) {
            let outer = OuterState { momentum: pv(&m), theta_prev: pv(&snap), mu };
            let mut avg: Vec<f64> = snap.iter().zip(&delta).map(|(s, d)| s + d).collect();
            let exact_delta: Vec<f64> = avg.iter().zip(&snap).map(|(a, s)| a - s).collect();
            let (theta, next) = outer_step(&outer, &pv(&exact_delta), lr, mu).unwrap();
            let mut mm = m.clone();
            outer_step_in_place(&mut mm, &mut avg, &snap, lr, mu).unwrap();
            for i in 0..8 {
                prop_assert_eq!(mm[i].to_bits(), next.momentum[i].to_bits());
                prop_assert!((avg[i] - theta[i]).abs() <= 1e-15 * (1.0 + theta[i].abs()));
            }
        }

        #[test]
        fn schedules_are_pure(t in 0usize..=5000, total in 100usize..5000) {
            prop_assert_eq!(momentum_mu(t, total).to_bits(), momentum_mu(t, total).to_bits());
            if let Ok(a) = outer_lr(t, total) {
                prop_assert_eq!(a.to_bits(), outer_lr(t, total).unwrap().to_bits());
            }
        }
    }
}
