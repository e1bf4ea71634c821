//! Core timestamp types, clock transformations, and the frequency-correction
//! primitive shared by all other modules.
//!
//! All timestamps are signed 64-bit counts of 1-picosecond ticks. At that
//! resolution an `i64` spans roughly ±106 days, comfortably covering
//! day-scale acquisitions, and every public operation stays in exact integer
//! arithmetic (rounding happens once, to the nearest tick, where a clock
//! mapping is applied).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::sub_rng;
use rand_distr::{Distribution, Normal};

/// Picoseconds per second.
pub const TICKS_PER_SEC: i64 = 1_000_000_000_000;

/// A point in time (or a duration) in integer picosecond ticks.
#[derive(
    Debug, Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimeTick(pub i64);

impl TimeTick {
    pub const ZERO: TimeTick = TimeTick(0);

    pub fn from_ps(ps: i64) -> Self {
        TimeTick(ps)
    }

    pub fn from_ns(ns: i64) -> Self {
        TimeTick(ns * 1_000)
    }

    pub fn from_us(us: i64) -> Self {
        TimeTick(us * 1_000_000)
    }

    /// Nearest-tick conversion from seconds.
    pub fn from_secs_f64(s: f64) -> Self {
        TimeTick((s * TICKS_PER_SEC as f64).round() as i64)
    }

    pub fn as_ps(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / TICKS_PER_SEC as f64
    }
}

impl std::ops::Add for TimeTick {
    type Output = TimeTick;
    fn add(self, rhs: TimeTick) -> TimeTick {
        TimeTick(self.0 + rhs.0)
    }
}

impl std::ops::Sub for TimeTick {
    type Output = TimeTick;
    fn sub(self, rhs: TimeTick) -> TimeTick {
        TimeTick(self.0 - rhs.0)
    }
}

impl std::ops::Neg for TimeTick {
    type Output = TimeTick;
    fn neg(self) -> TimeTick {
        TimeTick(-self.0)
    }
}

#[derive(Debug, Error)]
pub enum TimetagError {
    #[error("event stream is not time-ordered at index {index}")]
    NotSorted { index: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("clock frequency offset exceeds |du| < 1e-3 over the stream span")]
    FrequencyOutOfRange,
}

/// A monotone sequence of detector click times on one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub channel: u8,
    pub ticks: Vec<TimeTick>,
    /// Span covered by the acquisition (not necessarily last − first).
    pub duration: TimeTick,
    /// Nominal rate in counts/s, informational.
    pub nominal_rate: f64,
}

impl EventStream {
    pub fn new(channel: u8, ticks: Vec<TimeTick>, duration: TimeTick, nominal_rate: f64) -> Self {
        EventStream {
            channel,
            ticks,
            duration,
            nominal_rate,
        }
    }

    /// Builds a stream from raw tick values, deriving duration and rate.
    pub fn from_ticks(channel: u8, ticks: Vec<TimeTick>) -> Self {
        let duration = ticks.last().copied().unwrap_or(TimeTick::ZERO);
        let rate = if duration.0 > 0 {
            ticks.len() as f64 / duration.as_secs_f64()
        } else {
            0.0
        };
        EventStream::new(channel, ticks, duration, rate)
    }

    pub fn len(&self) -> usize {
        self.ticks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ticks.is_empty()
    }

    /// Index of the first violation of non-decreasing order, if any.
    pub fn check_sorted(&self) -> Result<(), TimetagError> {
        for (i, w) in self.ticks.windows(2).enumerate() {
            if w[1] < w[0] {
                return Err(TimetagError::NotSorted { index: i + 1 });
            }
        }
        Ok(())
    }

    /// Events with `start <= t < start + len`, as a new stream.
    pub fn window(&self, start: TimeTick, len: TimeTick) -> EventStream {
        let lo = self.ticks.partition_point(|t| *t < start);
        let hi = self.ticks.partition_point(|t| t.0 < start.0 + len.0);
        EventStream {
            channel: self.channel,
            ticks: self.ticks[lo..hi].to_vec(),
            duration: len,
            nominal_rate: self.nominal_rate,
        }
    }

    /// Adds a constant offset to every timestamp.
    pub fn shifted(&self, offset: TimeTick) -> EventStream {
        EventStream {
            channel: self.channel,
            ticks: self.ticks.iter().map(|t| *t + offset).collect(),
            duration: self.duration,
            nominal_rate: self.nominal_rate,
        }
    }

    /// Observed mean rate over the stream span.
    pub fn observed_rate(&self) -> f64 {
        if self.duration.0 > 0 {
            self.len() as f64 / self.duration.as_secs_f64()
        } else {
            0.0
        }
    }
}

/// Parametric mapping from true time to a local clock's reading.
///
/// The instantaneous fractional frequency offset is
/// `du(t) = du0 + drift_rate·t + rw(t)` where `rw` is a clamped random walk
/// discretized at 1 s steps (linearly interpolated between steps), and the
/// clock reads `offset + t + ∫ du(t') dt'`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClockModel {
    pub offset: TimeTick,
    /// Constant fractional frequency offset (dimensionless, ppb-scale).
    pub du0: f64,
    /// Linear change of du per second.
    pub drift_rate: f64,
    /// Random-walk standard deviation accumulated over one second.
    pub rw_step: f64,
    /// Clamp on |rw(t)|; the paper-scale crystal clocks stay within a few
    /// tens of ppb, so the walk is bounded rather than free.
    pub rw_bound: f64,
    pub seed: u64,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel {
            offset: TimeTick::ZERO,
            du0: 0.0,
            drift_rate: 0.0,
            rw_step: 0.0,
            rw_bound: 35e-9,
            seed: 0,
        }
    }
}

const RW_SALT: u64 = 0x636c_6f63;

impl ClockModel {
    /// Identity clock.
    pub fn identity() -> Self {
        ClockModel::default()
    }

    /// Materializes the stochastic part of the clock over `[0, span]`.
    pub fn realize(&self, span: TimeTick) -> Result<ClockRealization, TimetagError> {
        let span_s = (span.0.max(0) / TICKS_PER_SEC + 2) as usize;
        let mut rw = Vec::with_capacity(span_s + 1);
        let mut rng = sub_rng(self.seed, RW_SALT);
        let step = Normal::new(0.0, 1.0).expect("unit normal");
        let mut w = 0.0_f64;
        rw.push(w);
        for _ in 0..span_s {
            w += step.sample(&mut rng) * self.rw_step;
            w = w.clamp(-self.rw_bound, self.rw_bound);
            rw.push(w);
        }
        // du at the 1 s knots, then cumulative ∫du dt (in ticks) by the
        // trapezoid rule, exact for the piecewise-linear interpolant.
        let du: Vec<f64> = rw
            .iter()
            .enumerate()
            .map(|(k, w)| self.du0 + self.drift_rate * k as f64 + w)
            .collect();
        if du.iter().any(|d| d.abs() >= 1e-3) {
            return Err(TimetagError::FrequencyOutOfRange);
        }
        let mut integral = Vec::with_capacity(du.len());
        let mut acc = 0.0_f64;
        integral.push(0.0);
        for k in 1..du.len() {
            acc += 0.5 * (du[k - 1] + du[k]) * TICKS_PER_SEC as f64;
            integral.push(acc);
        }
        Ok(ClockRealization {
            offset: self.offset,
            du,
            integral,
        })
    }
}

/// A deterministic realization of a [`ClockModel`] over a time span:
/// the ground-truth du(t) trace and its integral.
#[derive(Debug, Clone)]
pub struct ClockRealization {
    offset: TimeTick,
    /// du at integer-second knots starting at t = 0.
    du: Vec<f64>,
    /// ∫₀ᵗ du dt' in ticks, at the same knots.
    integral: Vec<f64>,
}

impl ClockRealization {
    /// Instantaneous fractional frequency offset at `t` (seconds), linearly
    /// interpolated between the 1 s knots.
    pub fn du_at(&self, t_s: f64) -> f64 {
        let last = (self.du.len() - 1) as f64;
        let t = t_s.clamp(0.0, last);
        let k = (t.floor() as usize).min(self.du.len() - 2);
        let frac = t - k as f64;
        self.du[k] * (1.0 - frac) + self.du[k + 1] * frac
    }

    /// du at the 1 s knots (ground truth for tests).
    pub fn du_knots(&self) -> &[f64] {
        &self.du
    }

    /// Clock reading for an event at true time `t`, rounded to the nearest tick.
    pub fn transform(&self, t: TimeTick) -> TimeTick {
        self.offset + t + TimeTick(self.elapsed_correction(t).round() as i64)
    }

    /// ∫₀ᵗ du dt' in ticks (piecewise quadratic between knots).
    fn elapsed_correction(&self, t: TimeTick) -> f64 {
        let last = (self.du.len() - 1) as i64 * TICKS_PER_SEC;
        let tc = t.0.clamp(0, last);
        let k = (tc / TICKS_PER_SEC).min(self.du.len() as i64 - 2) as usize;
        let dt = (tc - k as i64 * TICKS_PER_SEC) as f64;
        let frac = dt / TICKS_PER_SEC as f64;
        let du_t = self.du[k] * (1.0 - frac) + self.du[k + 1] * frac;
        let inside = 0.5 * (self.du[k] + du_t) * dt;
        let base = self.integral[k] + inside;
        // Outside the realized span the clock continues at the edge rate.
        if t.0 < 0 {
            base + self.du[0] * t.0 as f64
        } else if t.0 > last {
            base + *self.integral.last().unwrap() - self.integral[k] - inside
                + self.du[self.du.len() - 1] * (t.0 - last) as f64
        } else {
            base
        }
    }
}

/// Transforms a stream of true-time events into the timestamps read by a
/// local clock. Deterministic for a fixed model seed.
pub fn apply_clock(stream: &EventStream, clock: &ClockModel) -> Result<EventStream, TimetagError> {
    stream.check_sorted()?;
    let span = stream.ticks.last().copied().unwrap_or(TimeTick::ZERO);
    let real = clock.realize(span)?;
    let ticks: Vec<TimeTick> = stream.ticks.iter().map(|t| real.transform(*t)).collect();
    debug_assert!(ticks.windows(2).all(|w| w[0] <= w[1]));
    Ok(EventStream {
        channel: stream.channel,
        ticks,
        duration: stream.duration,
        nominal_rate: stream.nominal_rate,
    })
}

/// Frequency precompensation: rescales a timestamp set by `1 + du` anchored
/// at its first timestamp, `t_i → t_0 + (t_i − t_0)(1 + du)`.
///
/// The integer part of `t_i − t_0` is carried exactly; only the correction
/// `(t_i − t_0)·du` is computed in floating point and rounded to the nearest
/// tick, so the error per event stays below one tick for |du| < 1e-3 at
/// day-long spans.
pub fn correct_frequency(stream: &EventStream, du: f64) -> Result<EventStream, TimetagError> {
    let anchor = stream.ticks.first().copied().unwrap_or(TimeTick::ZERO);
    correct_frequency_anchored(stream, du, anchor)
}

/// [`correct_frequency`] with an explicit anchor, so corrections applied to
/// different windows of the same stream stay mutually consistent.
pub fn correct_frequency_anchored(
    stream: &EventStream,
    du: f64,
    anchor: TimeTick,
) -> Result<EventStream, TimetagError> {
    stream.check_sorted()?;
    let ticks: Vec<TimeTick> = stream
        .ticks
        .iter()
        .map(|t| {
            let delta = t.0 - anchor.0;
            TimeTick(anchor.0 + delta + (delta as f64 * du).round() as i64)
        })
        .collect();
    Ok(EventStream {
        channel: stream.channel,
        ticks,
        duration: stream.duration,
        nominal_rate: stream.nominal_rate,
    })
}

/// One matched detection pair and its timing difference `tau = t_a − t_b`.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub struct Pair {
    pub t_a: TimeTick,
    pub t_b: TimeTick,
    pub tau: TimeTick,
}

/// Nearest in-window partner for every event of `xs` among `ys`, where the
/// target position for `x` is `x - shift`. Two-pointer sweep; ties go to the
/// earlier partner.
fn nearest_in_window(xs: &[TimeTick], ys: &[TimeTick], shift: i64, window: i64) -> Vec<Option<usize>> {
    let mut out = vec![None; xs.len()];
    let mut j = 0usize;
    for (i, x) in xs.iter().enumerate() {
        let target = x.0 - shift;
        while j < ys.len() && 2 * (target - ys[j].0) > window {
            j += 1;
        }
        let mut best: Option<usize> = None;
        let mut k = j;
        while k < ys.len() && 2 * (ys[k].0 - target) <= window {
            let closer = match best {
                None => true,
                Some(prev) => (ys[k].0 - target).abs() < (ys[prev].0 - target).abs(),
            };
            if closer {
                best = Some(k);
            }
            k += 1;
        }
        out[i] = best;
    }
    out
}

/// Pairs a-events with b-events whose `tau = t_a − t_b` lies within
/// `center ± window/2` (closed interval), keeping mutual nearest neighbors so
/// each event appears in at most one pair. Swapping the two streams (and
/// negating `center`) negates every tau. Linear time.
pub fn coincidence_pairs(
    a: &EventStream,
    b: &EventStream,
    center: TimeTick,
    window: TimeTick,
) -> Result<Vec<Pair>, TimetagError> {
    if window.0 <= 0 {
        return Err(TimetagError::InvalidParameter(
            "coincidence window must be positive".into(),
        ));
    }
    a.check_sorted()?;
    b.check_sorted()?;
    let nearest_b = nearest_in_window(&a.ticks, &b.ticks, center.0, window.0);
    let nearest_a = nearest_in_window(&b.ticks, &a.ticks, -center.0, window.0);
    let mut pairs = Vec::new();
    for (i, nb) in nearest_b.iter().enumerate() {
        if let Some(j) = nb {
            if nearest_a[*j] == Some(i) {
                let (ta, tb) = (a.ticks[i], b.ticks[*j]);
                pairs.push(Pair {
                    t_a: ta,
                    t_b: tb,
                    tau: ta - tb,
                });
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;
    use rand_distr::Exp;

    fn poisson_stream(rate: f64, duration_s: f64, seed: u64, channel: u8) -> EventStream {
        let mut rng = sub_rng(seed, channel as u64);
        let exp = Exp::new(rate).unwrap();
        let mut t = 0.0_f64;
        let mut ticks = Vec::new();
        loop {
            t += exp.sample(&mut rng);
            if t >= duration_s {
                break;
            }
            ticks.push(TimeTick::from_secs_f64(t));
        }
        EventStream::new(
            channel,
            ticks,
            TimeTick::from_secs_f64(duration_s),
            rate,
        )
    }

    #[test]
    fn apply_clock_identity() {
        let s = EventStream::from_ticks(0, vec![TimeTick(0), TimeTick(5), TimeTick(100)]);
        let out = apply_clock(&s, &ClockModel::identity()).unwrap();
        assert_eq!(out.ticks, s.ticks);
    }

    #[test]
    fn apply_clock_constant_offset_scales_linearly() {
        // +100 ppb at t = 1 s shifts by +100 ns.
        let clock = ClockModel {
            du0: 100e-9,
            ..ClockModel::default()
        };
        let s = EventStream::from_ticks(0, vec![TimeTick(0), TimeTick(TICKS_PER_SEC)]);
        let out = apply_clock(&s, &clock).unwrap();
        assert_eq!(out.ticks[1].0, TICKS_PER_SEC + 100_000);
    }

    #[test]
    fn apply_clock_rejects_unsorted() {
        let s = EventStream::from_ticks(0, vec![TimeTick(5), TimeTick(1)]);
        assert!(matches!(
            apply_clock(&s, &ClockModel::identity()),
            Err(TimetagError::NotSorted { index: 1 })
        ));
    }

    #[test]
    fn random_walk_finite_differences_match_internal_trace() {
        // Reconstruct du(t) from centered finite differences of the mapping
        // and compare against the generator's stored knots: < 0.1 ppb.
        let clock = ClockModel {
            rw_step: 3.3e-9,
            rw_bound: 1e-6,
            seed: 7,
            ..ClockModel::default()
        };
        let span = TimeTick(600 * TICKS_PER_SEC);
        let real = clock.realize(span).unwrap();
        // du is piecewise linear between 1 s knots, so the finite difference
        // over [k, k+1] equals du at the segment midpoint exactly.
        for k in 0..599usize {
            let t = k as i64 * TICKS_PER_SEC;
            let lo = real.transform(TimeTick(t));
            let hi = real.transform(TimeTick(t + TICKS_PER_SEC));
            let du_fd = (hi.0 - lo.0 - TICKS_PER_SEC) as f64 / TICKS_PER_SEC as f64;
            let du_true = real.du_at(k as f64 + 0.5);
            assert!(
                (du_fd - du_true).abs() < 0.1e-9,
                "knot {k}: fd {du_fd:e} vs true {du_true:e}"
            );
        }
    }

    #[test]
    fn correct_frequency_identity_and_direct_case() {
        let s = EventStream::from_ticks(0, vec![TimeTick(0), TimeTick(1_000_000)]);
        let out = correct_frequency(&s, 0.0).unwrap();
        assert_eq!(out.ticks, s.ticks);
        let out = correct_frequency(&s, 1e-6).unwrap();
        assert_eq!(out.ticks, vec![TimeTick(0), TimeTick(1_000_001)]);
    }

    #[test]
    fn correct_frequency_inverts_constant_clock() {
        let s = poisson_stream(50_000.0, 2.0, 3, 0);
        let u = 4.0e-6;
        let clock = ClockModel {
            du0: u,
            ..ClockModel::default()
        };
        let skewed = apply_clock(&s, &clock).unwrap();
        let recovered = correct_frequency(&skewed, -u / (1.0 + u)).unwrap();
        assert_eq!(recovered.len(), s.len());
        for (r, orig) in recovered.ticks.iter().zip(&s.ticks) {
            assert!(
                (r.0 - orig.0).abs() <= 1,
                "round trip error {} ticks",
                r.0 - orig.0
            );
        }
    }

    #[test]
    fn pairs_trivial_and_window_boundary() {
        let a = EventStream::from_ticks(0, vec![TimeTick::from_ns(100)]);
        let b = EventStream::from_ticks(1, vec![TimeTick::from_ns(100)]);
        let pairs =
            coincidence_pairs(&a, &b, TimeTick::ZERO, TimeTick::from_ns(256)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].tau, TimeTick::ZERO);

        // tau = -200 ns is outside a 256 ns window centered at 0.
        let a = EventStream::from_ticks(0, vec![TimeTick(0)]);
        let b = EventStream::from_ticks(1, vec![TimeTick::from_ns(200)]);
        let pairs =
            coincidence_pairs(&a, &b, TimeTick::ZERO, TimeTick::from_ns(256)).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn pairs_rejects_bad_window() {
        let a = EventStream::from_ticks(0, vec![]);
        assert!(coincidence_pairs(&a, &a.clone(), TimeTick::ZERO, TimeTick::ZERO).is_err());
    }

    #[test]
    fn accidental_pair_rate_matches_formula() {
        // Uncorrelated Poisson streams: pair rate ~ s1*s2*window.
        let s1 = 100_000.0;
        let s2 = 100_000.0;
        let dur = 1.0;
        let a = poisson_stream(s1, dur, 11, 0);
        let b = poisson_stream(s2, dur, 12, 1);
        let window = TimeTick::from_ns(256);
        let pairs = coincidence_pairs(&a, &b, TimeTick::ZERO, window).unwrap();
        let expected = s1 * s2 * window.as_secs_f64() * dur;
        let sigma = expected.sqrt();
        assert!(
            (pairs.len() as f64 - expected).abs() < 3.0 * sigma,
            "pairs {} vs expected {expected}",
            pairs.len()
        );
    }

    #[test]
    fn pair_symmetry_negates_tau() {
        let a = poisson_stream(20_000.0, 0.5, 21, 0);
        let b = poisson_stream(20_000.0, 0.5, 22, 1);
        let w = TimeTick::from_ns(512);
        let ab = coincidence_pairs(&a, &b, TimeTick::ZERO, w).unwrap();
        let ba = coincidence_pairs(&b, &a, TimeTick::ZERO, w).unwrap();
        // Swapping roles negates tau for the pairs both directions agree on;
        // check the multisets of |tau| overlap heavily and signs flip.
        let taus_ab: Vec<i64> = ab.iter().map(|p| p.tau.0).collect();
        let mut taus_ba: Vec<i64> = ba.iter().map(|p| -p.tau.0).collect();
        taus_ba.sort_unstable();
        let mut sorted_ab = taus_ab.clone();
        sorted_ab.sort_unstable();
        assert_eq!(sorted_ab, taus_ba);
    }

    #[test]
    fn window_slice_bounds() {
        let s = EventStream::from_ticks(0, (0..10).map(|k| TimeTick(k * 10)).collect());
        let w = s.window(TimeTick(20), TimeTick(30));
        assert_eq!(
            w.ticks,
            vec![TimeTick(20), TimeTick(30), TimeTick(40)]
        );
    }
}
