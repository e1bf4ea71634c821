//! Streaming correlation-peak tracker.
//!
//! Events from the two parties arrive as one time-ordered feed. Each a-event
//! pairs with the nearest (frequency-compensated) b-event inside the
//! coincidence window around the current offset estimate; the resulting
//! `tau_i = t_a − t_b` samples are dominated by accidentals, so an
//! exponential moving average `τ' ← α·τ_i + (1−α)·τ'` damps them. The
//! filter coefficient follows `α = 1 − exp(−Δt̄/β)` with `Δt̄` the observed
//! mean separation between pair events, recomputed every serve interval.
//!
//! Active frequency compensation rescales the b timestamps recursively
//! (`t'_i = t'_{i−1} + Δt_i·(1+du)`); du is re-estimated from the drift of
//! τ' (a regression over a sliding window) and accumulated in the product
//! form `Δu = Π(1+Δu_i) − 1`. Raw per-pair frequency estimates are far too
//! noisy to apply directly at g² ≤ 1.5 signal levels.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timetag::{EventStream, TimeTick, TICKS_PER_SEC};

#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossReason {
    /// No pair at all within the starvation timeout.
    Starvation,
    /// Pair rate fell to the accidental floor for several serve intervals:
    /// the window no longer contains the correlation peak.
    NoExcess,
}

impl std::fmt::Display for LossReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossReason::Starvation => write!(f, "pair starvation"),
            LossReason::NoExcess => write!(f, "no coincidence excess over accidentals"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("event on channel {channel} at {t} ps precedes the feed watermark {last} ps")]
    OutOfOrder { channel: u8, t: i64, last: i64 },
    #[error("tracking lost at {t_s:.3} s: {reason}")]
    TrackingLost { t_s: f64, reason: LossReason },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Tracker configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// EMA time constant in seconds.
    pub beta: f64,
    /// Coincidence window width.
    pub window: TimeTick,
    /// Serve (log sample) cadence in seconds.
    pub serve_interval: f64,
    pub initial_tau: TimeTick,
    pub initial_du: f64,
    /// Sliding-window length for the du regression, in seconds. Corrections
    /// committed per serve are scaled by `serve_interval/du_window`, so the
    /// compensation loop settles on the du_window timescale. 0 freezes du
    /// at `initial_du`.
    pub du_window: f64,
    /// Hard starvation timeout in seconds (no pair at all).
    pub starvation_timeout: f64,
    /// Excess-rate lock monitor: σ threshold and how many consecutive
    /// below-threshold serve intervals declare loss.
    pub min_excess_sigma: f64,
    pub lock_check_intervals: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            beta: 0.050,
            window: TimeTick::from_ns(256),
            serve_interval: 0.5,
            initial_tau: TimeTick::ZERO,
            initial_du: 0.0,
            du_window: 2.0,
            starvation_timeout: 2.0,
            min_excess_sigma: 3.0,
            lock_check_intervals: 4,
        }
    }
}

impl TrackerConfig {
    fn validate(&self) -> Result<(), TrackerError> {
        if self.beta <= 0.0 || self.serve_interval <= 0.0 {
            return Err(TrackerError::InvalidParameter(
                "beta and serve_interval must be positive".into(),
            ));
        }
        if self.window.0 <= 0 {
            return Err(TrackerError::InvalidParameter(
                "coincidence window must be positive".into(),
            ));
        }
        if self.du_window < 0.0 || self.starvation_timeout <= 0.0 {
            return Err(TrackerError::InvalidParameter(
                "du_window must be >= 0 and starvation_timeout > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One served tracking sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ServedSample {
    /// Serve time on the feed timebase, seconds.
    pub t_s: f64,
    /// Served raw-clock offset `t_a − t_b` in ps.
    pub tau_ps: f64,
    /// Served accumulated frequency offset `f_a/f_b − 1`.
    pub du: f64,
    /// Observed pair rate over the last interval, 1/s.
    pub pairs_per_s: f64,
    /// Accidental-rate estimate `s1·s2·window` from observed singles, 1/s.
    pub accidentals_per_s: f64,
}

/// Tracking log CSV: `t_s,tau_ps,du_ppb,pairs_per_s,accidentals_per_s`.
pub fn write_log_csv<W: std::io::Write>(
    samples: &[ServedSample],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "t_s,tau_ps,du_ppb,pairs_per_s,accidentals_per_s")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.t_s,
            s.tau_ps,
            s.du * 1e9,
            s.pairs_per_s,
            s.accidentals_per_s
        )?;
    }
    Ok(())
}

/// Steady-state tracking lag under a constant uncompensated frequency
/// offset. Accidental pairs inside the window pull toward the current
/// estimate rather than the true peak, diluting the filter gain by the
/// signal fraction (true pairs / all pairs), so the lag is
/// `du·β / signal_fraction` rather than the bare `du·β`.
pub fn expected_lag(du: f64, beta: f64, signal_fraction: f64) -> f64 {
    assert!(
        signal_fraction > 0.0 && signal_fraction <= 1.0,
        "signal fraction must be in (0, 1]"
    );
    du * beta / signal_fraction
}

/// Streaming tracker. Single-owner: feed events through [`Tracker::push`] in
/// one time-ordered sequence and collect served samples with
/// [`Tracker::drain`].
#[derive(Debug)]
pub struct Tracker {
    cfg: TrackerConfig,
    // Channel-b compensation (recursive form), f64 ticks.
    comp_last_raw: Option<i64>,
    comp_last: f64,
    du_accum: f64,
    // EMA state in compensated space.
    tau_f: f64,
    alpha: f64,
    // Pairing buffers.
    pending_a: VecDeque<i64>,
    recent_b: VecDeque<f64>,
    feed_watermark: i64,
    started: Option<i64>,
    // (t_ticks, tau_f) regression samples for du updates.
    du_samples: VecDeque<(f64, f64)>,
    // Serve bookkeeping.
    next_serve: Option<i64>,
    pairs_in_interval: u64,
    a_in_interval: u64,
    b_in_interval: u64,
    bootstrap_pairs: u64,
    last_pair_t: Option<i64>,
    low_excess_runs: u32,
    lost: Option<(f64, LossReason)>,
    out: VecDeque<ServedSample>,
    total_pairs: u64,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self, TrackerError> {
        cfg.validate()?;
        Ok(Tracker {
            alpha: 0.01, // provisional until the pair rate is observed
            tau_f: cfg.initial_tau.0 as f64,
            du_accum: cfg.initial_du,
            cfg,
            comp_last_raw: None,
            comp_last: 0.0,
            pending_a: VecDeque::new(),
            recent_b: VecDeque::new(),
            feed_watermark: i64::MIN,
            started: None,
            du_samples: VecDeque::new(),
            next_serve: None,
            pairs_in_interval: 0,
            a_in_interval: 0,
            b_in_interval: 0,
            bootstrap_pairs: 0,
            last_pair_t: None,
            low_excess_runs: 0,
            lost: None,
            out: VecDeque::new(),
            total_pairs: 0,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Currently served raw-clock offset `t_a − t_b` in ps.
    pub fn tau_raw(&self) -> f64 {
        let comp_offset = match self.comp_last_raw {
            Some(raw) => self.comp_last - raw as f64,
            None => 0.0,
        };
        self.tau_f + comp_offset
    }

    /// Currently served frequency offset.
    pub fn du(&self) -> f64 {
        self.du_accum
    }

    pub fn total_pairs(&self) -> u64 {
        self.total_pairs
    }

    /// Feeds one event (channel 0 = a, anything else = b). Events must
    /// arrive in non-decreasing time order across both channels; merge the
    /// two streams first.
    pub fn push(&mut self, channel: u8, t: TimeTick) -> Result<(), TrackerError> {
        if let Some((t_s, reason)) = self.lost {
            return Err(TrackerError::TrackingLost { t_s, reason });
        }
        if t.0 < self.feed_watermark {
            return Err(TrackerError::OutOfOrder {
                channel,
                t: t.0,
                last: self.feed_watermark,
            });
        }
        self.feed_watermark = t.0;
        let start = *self.started.get_or_insert(t.0);
        if self.next_serve.is_none() {
            self.next_serve = Some(start + self.interval_ticks());
        }

        match channel {
            0 => {
                self.a_in_interval += 1;
                self.pending_a.push_back(t.0);
            }
            _ => {
                self.b_in_interval += 1;
                let comp = match self.comp_last_raw {
                    None => t.0 as f64,
                    Some(prev) => self.comp_last + (t.0 - prev) as f64 * (1.0 + self.du_accum),
                };
                self.comp_last_raw = Some(t.0);
                self.comp_last = comp;
                self.recent_b.push_back(comp);
            }
        }
        self.resolve_pairs(false);
        self.run_serves();
        self.check_starvation();
        if let Some((t_s, reason)) = self.lost {
            return Err(TrackerError::TrackingLost { t_s, reason });
        }
        Ok(())
    }

    /// Resolves any a-events still waiting for b data (end of feed).
    pub fn finish(&mut self) {
        if self.lost.is_none() {
            self.resolve_pairs(true);
        }
    }

    /// Takes all served samples produced so far.
    pub fn drain(&mut self) -> Vec<ServedSample> {
        self.out.drain(..).collect()
    }

    fn interval_ticks(&self) -> i64 {
        (self.cfg.serve_interval * TICKS_PER_SEC as f64).round() as i64
    }

    fn resolve_pairs(&mut self, force: bool) {
        let half = self.cfg.window.0 as f64 / 2.0;
        while let Some(&ta) = self.pending_a.front() {
            let target = ta as f64 - self.tau_f;
            // Only resolve once the compensated b stream has conclusively
            // passed the window top (no later b-event can still land in it).
            if !force && self.comp_last <= target + half {
                break;
            }
            self.pending_a.pop_front();

            // Prune b-events no current or future window can reach. Future
            // a-events are >= ta and tau_f moves by well under a window per
            // event, so two windows of slack is plenty.
            let prune_below = target - 3.0 * half;
            while let Some(&front) = self.recent_b.front() {
                if front < prune_below && self.recent_b.len() > 1 {
                    self.recent_b.pop_front();
                } else {
                    break;
                }
            }

            let idx = self.recent_b.partition_point(|&v| v < target);
            let mut best: Option<f64> = None;
            for cand in [idx.checked_sub(1), Some(idx)] {
                let Some(i) = cand else { continue };
                let Some(&tb) = self.recent_b.get(i) else {
                    continue;
                };
                let closer = match best {
                    None => true,
                    Some(prev) => (tb - target).abs() < (prev - target).abs(),
                };
                if closer {
                    best = Some(tb);
                }
            }
            if let Some(tb) = best {
                if (tb - target).abs() <= half {
                    self.on_pair(ta, tb);
                }
            }
        }
    }

    fn on_pair(&mut self, ta: i64, tb_comp: f64) {
        let tau_i = ta as f64 - tb_comp;
        self.total_pairs += 1;
        self.pairs_in_interval += 1;
        self.last_pair_t = Some(ta);

        // Bootstrap alpha from the observed pair spacing until the serve
        // loop takes over.
        if self.bootstrap_pairs < 256 {
            self.bootstrap_pairs += 1;
            if self.bootstrap_pairs >= 8 {
                if let Some(start) = self.started {
                    let elapsed = (ta - start) as f64 / TICKS_PER_SEC as f64;
                    if elapsed > 0.0 {
                        let dt_mean = elapsed / self.bootstrap_pairs as f64;
                        self.alpha = 1.0 - (-dt_mean / self.cfg.beta).exp();
                    }
                }
            }
        }

        self.tau_f += self.alpha * (tau_i - self.tau_f);

        if self.cfg.du_window > 0.0 {
            self.du_samples.push_back((ta as f64, self.tau_f));
            let horizon =
                self.cfg.du_window.max(self.cfg.serve_interval) * TICKS_PER_SEC as f64;
            while let Some(&(t0, _)) = self.du_samples.front() {
                if ta as f64 - t0 > horizon {
                    self.du_samples.pop_front();
                } else {
                    break;
                }
            }
        }
    }

    fn run_serves(&mut self) {
        while let Some(ns) = self.next_serve {
            if self.feed_watermark < ns {
                break;
            }
            self.update_du();
            self.update_alpha();

            let dt = self.cfg.serve_interval;
            let pair_rate = self.pairs_in_interval as f64 / dt;
            let ra = self.a_in_interval as f64 / dt;
            let rb = self.b_in_interval as f64 / dt;
            let accidental = ra * rb * self.cfg.window.as_secs_f64();
            let t_s = ns as f64 / TICKS_PER_SEC as f64;
            self.out.push_back(ServedSample {
                t_s,
                tau_ps: self.tau_raw(),
                du: self.du_accum,
                pairs_per_s: pair_rate,
                accidentals_per_s: accidental,
            });

            // Lock monitor: pair rate must exceed the accidental estimate.
            let sigma = (self.pairs_in_interval.max(1) as f64).sqrt() / dt;
            if pair_rate - accidental < self.cfg.min_excess_sigma * sigma {
                self.low_excess_runs += 1;
                if self.low_excess_runs >= self.cfg.lock_check_intervals {
                    self.lost = Some((t_s, LossReason::NoExcess));
                }
            } else {
                self.low_excess_runs = 0;
            }

            self.pairs_in_interval = 0;
            self.a_in_interval = 0;
            self.b_in_interval = 0;
            self.next_serve = Some(ns + self.interval_ticks());
            if self.lost.is_some() {
                break;
            }
        }
    }

    /// Regression of τ' over the sliding window; the residual slope folds
    /// into the accumulated compensation with gain serve/du_window.
    fn update_du(&mut self) {
        if self.cfg.du_window <= 0.0 || self.du_samples.len() < 16 {
            return;
        }
        let n = self.du_samples.len() as f64;
        let (mut mt, mut my) = (0.0, 0.0);
        for &(t, y) in &self.du_samples {
            mt += t;
            my += y;
        }
        mt /= n;
        my /= n;
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for &(t, y) in &self.du_samples {
            let dt = t - mt;
            sxx += dt * dt;
            sxy += dt * (y - my);
        }
        let span = self.du_samples.back().unwrap().0 - self.du_samples.front().unwrap().0;
        if sxx <= 0.0 || span < 0.5 * self.cfg.serve_interval * TICKS_PER_SEC as f64 {
            return;
        }
        let slope = sxy / sxx;
        let gain = (self.cfg.serve_interval / self.cfg.du_window).min(1.0);
        self.du_accum = (1.0 + self.du_accum) * (1.0 + slope * gain) - 1.0;
    }

    fn update_alpha(&mut self) {
        if self.pairs_in_interval == 0 {
            return;
        }
        let dt_mean = self.cfg.serve_interval / self.pairs_in_interval as f64;
        self.alpha = 1.0 - (-dt_mean / self.cfg.beta).exp();
        self.bootstrap_pairs = 256; // bootstrap done
    }

    fn check_starvation(&mut self) {
        if self.lost.is_some() {
            return;
        }
        let reference = self.last_pair_t.or(self.started);
        if let Some(t0) = reference {
            let gap = (self.feed_watermark - t0) as f64 / TICKS_PER_SEC as f64;
            if gap > self.cfg.starvation_timeout {
                self.lost = Some((
                    self.feed_watermark as f64 / TICKS_PER_SEC as f64,
                    LossReason::Starvation,
                ));
            }
        }
    }
}

/// Merges two event streams into one feed ordered by timestamp; ties go to
/// stream a. The merge is deterministic, so file-based and live tracking of
/// identical data produce identical feeds.
pub fn merged_events<'a>(
    a: &'a EventStream,
    b: &'a EventStream,
) -> impl Iterator<Item = (u8, TimeTick)> + 'a {
    let mut ia = 0usize;
    let mut ib = 0usize;
    std::iter::from_fn(move || {
        let ta = a.ticks.get(ia);
        let tb = b.ticks.get(ib);
        match (ta, tb) {
            (None, None) => None,
            (Some(&t), None) => {
                ia += 1;
                Some((0u8, t))
            }
            (None, Some(&t)) => {
                ib += 1;
                Some((1u8, t))
            }
            (Some(&x), Some(&y)) => {
                if x <= y {
                    ia += 1;
                    Some((0u8, x))
                } else {
                    ib += 1;
                    Some((1u8, y))
                }
            }
        }
    })
}

/// Outcome of a single tracking pass over two streams.
#[derive(Debug, Clone)]
pub struct TrackRun {
    pub samples: Vec<ServedSample>,
    pub loss: Option<(f64, LossReason)>,
}

/// Drives a tracker over two full streams (file mode).
pub fn track_streams(
    a: &EventStream,
    b: &EventStream,
    cfg: TrackerConfig,
) -> Result<TrackRun, TrackerError> {
    let mut tracker = Tracker::new(cfg)?;
    let mut samples = Vec::new();
    let mut loss = None;
    for (ch, t) in merged_events(a, b) {
        match tracker.push(ch, t) {
            Ok(()) => {}
            Err(TrackerError::TrackingLost { t_s, reason }) => {
                loss = Some((t_s, reason));
                break;
            }
            Err(e) => return Err(e),
        }
        samples.extend(tracker.drain());
    }
    tracker.finish();
    samples.extend(tracker.drain());
    Ok(TrackRun { samples, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;
    use crate::source::{generate, SourceParams};
    use crate::timetag::{apply_clock, ClockModel};
    use rand_distr::{Distribution, Exp};

    fn poisson_stream(rate: f64, duration_s: f64, seed: u64, channel: u8) -> EventStream {
        let mut rng = sub_rng(seed, channel as u64 + 9000);
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
        EventStream::new(channel, ticks, TimeTick::from_secs_f64(duration_s), rate)
    }

    #[test]
    fn identical_streams_stay_locked_at_zero() {
        let a = poisson_stream(50_000.0, 5.0, 1, 0);
        let mut b = a.clone();
        b.channel = 1;
        let run = track_streams(&a, &b, TrackerConfig::default()).unwrap();
        assert!(run.loss.is_none(), "lost: {:?}", run.loss);
        assert!(!run.samples.is_empty());
        for s in &run.samples {
            assert!(s.tau_ps.abs() < 100.0, "tau drifted to {} ps", s.tau_ps);
            assert!(s.du.abs() < 1e-9, "du drifted to {:e}", s.du);
        }
    }

    #[test]
    fn ema_contracts_step_with_time_constant_beta() {
        // Quiet noise: every pair is a true pair at tau_true = 0; start the
        // filter displaced by 50 ns and check when the error hits delta/e.
        let rate = 50_000.0;
        let a = poisson_stream(rate, 1.0, 3, 0);
        let mut b = a.clone();
        b.channel = 1;
        let delta_ps = 50_000.0;
        let beta = 0.050;
        let cfg = TrackerConfig {
            beta,
            initial_tau: TimeTick(delta_ps as i64),
            window: TimeTick::from_ns(256),
            du_window: 0.0,
            serve_interval: 0.01,
            ..TrackerConfig::default()
        };
        let mut tracker = Tracker::new(cfg).unwrap();
        let mut crossing: Option<f64> = None;
        for (ch, t) in merged_events(&a, &b) {
            tracker.push(ch, t).unwrap();
            if crossing.is_none() && tracker.tau_raw().abs() <= delta_ps / std::f64::consts::E {
                crossing = Some(t.as_secs_f64());
            }
        }
        let t_cross = crossing.expect("filter never contracted");
        assert!(
            (t_cross - beta).abs() <= 0.2 * beta,
            "1/e crossing at {t_cross:.4} s, expected {beta} ± 20%"
        );
    }

    #[test]
    fn tracks_constant_frequency_offset() {
        // Scaled-down Fig.4-style run: du = 10 ppb on clock a.
        let params = SourceParams {
            s1: 200_000.0,
            s2: 200_000.0,
            g2_peak: 1.42,
            duration: 12.0,
            seed: 5,
            ..SourceParams::default()
        };
        let (a0, b) = generate(&params).unwrap();
        let clock = ClockModel {
            du0: 10e-9,
            ..ClockModel::default()
        };
        let a = apply_clock(&a0, &clock).unwrap();
        let real = clock.realize(a0.duration).unwrap();

        let run = track_streams(&a, &b, TrackerConfig::default()).unwrap();
        assert!(run.loss.is_none(), "lost: {:?}", run.loss);
        let errs: Vec<f64> = run
            .samples
            .iter()
            .filter(|s| s.t_s > 3.0) // skip the du-acquisition transient
            .map(|s| {
                let t = TimeTick::from_secs_f64(s.t_s);
                let tau_true = (real.transform(t) - t).0 as f64;
                s.tau_ps - tau_true
            })
            .collect();
        assert!(!errs.is_empty());
        let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!(rms <= 15_000.0, "rms error {rms} ps");
        let last = run.samples.last().unwrap();
        assert!(
            (last.du - 10e-9).abs() < 5e-9,
            "served du {:e}",
            last.du
        );
    }

    #[test]
    fn serve_log_rates_flag_signal_presence() {
        // Correlated streams: pair rate clearly above accidentals.
        let params = SourceParams {
            duration: 6.0,
            seed: 9,
            ..SourceParams::default()
        };
        let (a, b) = generate(&params).unwrap();
        let run = track_streams(&a, &b, TrackerConfig::default()).unwrap();
        assert!(run.loss.is_none());
        let above = run
            .samples
            .iter()
            .filter(|s| s.pairs_per_s > s.accidentals_per_s)
            .count();
        assert!(
            above == run.samples.len(),
            "{above}/{} serves above accidentals",
            run.samples.len()
        );
    }

    #[test]
    fn uncorrelated_streams_report_no_excess_loss() {
        let a = poisson_stream(150_000.0, 8.0, 11, 0);
        let b = poisson_stream(150_000.0, 8.0, 12, 1);
        let run = track_streams(&a, &b, TrackerConfig::default()).unwrap();
        match run.loss {
            Some((_, LossReason::NoExcess)) => {}
            other => panic!("expected NoExcess loss, got {other:?}"),
        }
    }

    #[test]
    fn starvation_reports_loss() {
        let a = poisson_stream(10_000.0, 0.2, 13, 0);
        // b events far outside any window and then silence.
        let b = EventStream::new(
            1,
            vec![TimeTick::from_secs_f64(3.0)],
            TimeTick::from_secs_f64(4.0),
            1.0,
        );
        let run = track_streams(&a, &b, TrackerConfig::default()).unwrap();
        match run.loss {
            Some((_, LossReason::Starvation)) => {}
            other => panic!("expected starvation, got {other:?}"),
        }
    }

    #[test]
    fn out_of_order_feed_is_rejected() {
        let mut tracker = Tracker::new(TrackerConfig::default()).unwrap();
        tracker.push(0, TimeTick(1000)).unwrap();
        assert!(matches!(
            tracker.push(1, TimeTick(500)),
            Err(TrackerError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn empty_input_produces_empty_log() {
        let a = EventStream::from_ticks(0, vec![]);
        let b = EventStream::from_ticks(1, vec![]);
        let run = track_streams(&a, &b, TrackerConfig::default()).unwrap();
        assert!(run.samples.is_empty());
        assert!(run.loss.is_none());
    }

    #[test]
    fn expected_lag_model() {
        assert_eq!(expected_lag(0.0, 0.05, 0.2), 0.0);
        // du=10 ppb, beta=50 ms, signal fraction ~0.18: a few ns of lag.
        let lag = expected_lag(10e-9, 0.05, 0.18);
        assert!(lag > 1e-9 && lag < 10e-9, "lag {lag}");
    }

    #[test]
    fn log_csv_schema() {
        let samples = vec![ServedSample {
            t_s: 0.5,
            tau_ps: 1234.5,
            du: 10e-9,
            pairs_per_s: 9000.0,
            accidentals_per_s: 7000.0,
        }];
        let mut buf = Vec::new();
        write_log_csv(&samples, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_s,tau_ps,du_ppb,pairs_per_s,accidentals_per_s\n"));
        assert!(text.contains("0.5,1234.5,10,9000,7000"));
    }
}
