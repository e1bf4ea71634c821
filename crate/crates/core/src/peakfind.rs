//! Initial acquisition of the timing and frequency offset between two
//! timestamp streams: FFT correlation with a max-order acceptance threshold,
//! frequency precompensation sweep, and hierarchical refinement with
//! progressively smaller time bins.
//!
//! Sign conventions: `tau = t_a − t_b` is the raw offset between the two
//! local clocks, and `du = f_a/f_b − 1` is the fractional frequency offset,
//! so `tau` drifts at rate `+du`. Compensating stream b with
//! `correct_frequency(b, du)` makes the pair comparable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{bin_events, signed_lag, Correlator, CorrelationError, GridParams};
use crate::stats::max_order_quantile;
use crate::timetag::{correct_frequency_anchored, EventStream, TimeTick, TimetagError};

#[derive(Debug, Error)]
pub enum PeakFindError {
    #[error("stream spans {have:.3} s, need at least {need:.3} s")]
    InsufficientSpan { have: f64, need: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no peak above threshold: best candidate {best}")]
    NotFound { best: Box<PeakCandidate> },
    #[error("frequency estimation failed in the {which} segment: {source}")]
    SegmentFailed {
        which: &'static str,
        #[source]
        source: Box<PeakFindError>,
    },
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
    #[error(transparent)]
    Timetag(#[from] TimetagError),
}

/// One correlation-peak measurement at a single resolution level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeakCandidate {
    /// Offset estimate `t_a − t_b` for the processed window (±δt/2).
    #[serde(rename = "tau_ps")]
    pub tau: TimeTick,
    pub peak_counts: i64,
    /// Second-highest correlation value (strict-max diagnostics).
    pub runner_up: i64,
    pub noise_mean: f64,
    pub noise_std: f64,
    /// Peak excess over the accidental floor in single-bin standard
    /// deviations, `(peak − mean)/sqrt(mean)`.
    pub significance: f64,
    pub grid: GridParams,
    pub lag_index: usize,
    /// Threshold (same σ units) this candidate was tested against.
    pub threshold_sigma: f64,
}

impl std::fmt::Display for PeakCandidate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "tau {} ps, peak {} vs noise {:.1}±{:.1} (S = {:.2}, threshold {:.2})",
            self.tau.0,
            self.peak_counts,
            self.noise_mean,
            self.noise_std,
            self.significance,
            self.threshold_sigma
        )
    }
}

/// Acceptance threshold in single-bin σ units derived from the max-order
/// quantile at false-accept probability `alpha`: the largest of `n` noise
/// bins exceeds it with probability ≤ alpha.
pub fn acceptance_threshold_sigma(alpha: f64, lambda: f64, n: u64) -> f64 {
    if lambda <= 0.0 {
        return f64::INFINITY;
    }
    let q = max_order_quantile(1.0 - alpha, lambda, n);
    (q as f64 - lambda) / lambda.sqrt()
}

/// Correlates two event streams on `grid` and locates the argmax.
/// Accepts when the peak exceeds the non-peak mean by
/// `threshold_sigma · sqrt(noise variance)`.
pub fn find_once(
    a: &EventStream,
    b: &EventStream,
    grid: &GridParams,
    threshold_sigma: f64,
) -> Result<PeakCandidate, PeakFindError> {
    let mut ctx = FindContext::new(a, grid)?;
    ctx.find(b, threshold_sigma)
}

/// Caches the reference stream's spectrum so repeated correlations against
/// candidate corrections of the other stream pay only one transform each.
struct FindContext {
    grid: GridParams,
    correlator: Correlator,
    spec_a: Vec<rustfft::num_complex::Complex<f64>>,
    span_s: f64,
}

impl FindContext {
    fn new(a: &EventStream, grid: &GridParams) -> Result<Self, PeakFindError> {
        let span_s = grid.span().as_secs_f64();
        check_span(a, span_s)?;
        let mut correlator = Correlator::new(grid.n_bins())?;
        let trace = bin_events(a, grid);
        let spec_a = correlator.spectrum(&trace)?;
        Ok(FindContext {
            grid: *grid,
            correlator,
            spec_a,
            span_s,
        })
    }

    fn find(
        &mut self,
        b: &EventStream,
        threshold_sigma: f64,
    ) -> Result<PeakCandidate, PeakFindError> {
        check_span(b, self.span_s)?;
        let trace = bin_events(b, &self.grid);
        let spec_b = self.correlator.spectrum(&trace)?;
        let corr = self.correlator.cross_from_spectra(&self.spec_a, &spec_b)?;

        let n = corr.len();
        let (mut peak_idx, mut peak, mut runner_up) = (0usize, i64::MIN, i64::MIN);
        for (k, &v) in corr.iter().enumerate() {
            if v > peak {
                runner_up = peak;
                peak = v;
                peak_idx = k;
            } else if v > runner_up {
                runner_up = v;
            }
        }
        let sum: i64 = corr.iter().sum();
        let noise_n = (n - 1) as f64;
        let noise_mean = (sum - peak) as f64 / noise_n;
        let var = corr
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != peak_idx)
            .map(|(_, &v)| {
                let d = v as f64 - noise_mean;
                d * d
            })
            .sum::<f64>()
            / (noise_n - 1.0).max(1.0);
        let noise_std = var.sqrt();
        let significance = if noise_mean > 0.0 {
            (peak as f64 - noise_mean) / noise_mean.sqrt()
        } else {
            f64::INFINITY
        };
        // Lag index k means bin(b) − bin(a) = k, i.e. tau = t_a − t_b = −k·δt.
        let tau = TimeTick(-signed_lag(peak_idx, n) * self.grid.delta_t.0);
        let candidate = PeakCandidate {
            tau,
            peak_counts: peak,
            runner_up,
            noise_mean,
            noise_std,
            significance,
            grid: self.grid,
            lag_index: peak_idx,
            threshold_sigma,
        };
        let accepted = (peak as f64 - noise_mean) > threshold_sigma * noise_std;
        if accepted {
            Ok(candidate)
        } else {
            Err(PeakFindError::NotFound {
                best: Box::new(candidate),
            })
        }
    }
}

fn check_span(s: &EventStream, need_s: f64) -> Result<(), PeakFindError> {
    let have = s.duration.as_secs_f64();
    if have + 1e-12 < need_s {
        return Err(PeakFindError::InsufficientSpan { have, need: need_s });
    }
    Ok(())
}

/// Precompensation sweep configuration. Candidate frequency offsets run from
/// `du_min` to `du_max` in steps of `du_step`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub du_min: f64,
    pub du_max: f64,
    pub du_step: f64,
    /// False-accept probability for the max-order acceptance threshold.
    pub alpha: f64,
    /// Stop the coarse pass at the first accepted candidate.
    pub early_exit: bool,
    /// Evaluate every grid point instead of the coarse/fine schedule.
    pub full_scan: bool,
    /// Bound on |tau| used to pad the b-window so in-window pairs survive
    /// the slicing; defaults to a quarter of the correlation span.
    pub max_tau: Option<TimeTick>,
}

impl SweepConfig {
    pub fn symmetric(range: f64, step: f64) -> Self {
        SweepConfig {
            du_min: -range,
            du_max: range,
            du_step: step,
            alpha: 1e-3,
            early_exit: true,
            full_scan: false,
            max_tau: None,
        }
    }
}

/// Sweep outcome: the compensation that maximized peak significance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub du: f64,
    pub candidate: PeakCandidate,
    /// Number of (du, correlation) evaluations performed.
    pub evaluated: usize,
    /// Set when the grid collapsed to a single candidate (step > range).
    pub degenerate: bool,
}

struct SweepState<'a> {
    ctx: FindContext,
    b: &'a EventStream,
    anchor: TimeTick,
    window_start: TimeTick,
    window_len: TimeTick,
    threshold: f64,
    evaluated: usize,
}

impl SweepState<'_> {
    fn eval(&mut self, du: f64) -> Result<PeakCandidate, PeakFindError> {
        self.evaluated += 1;
        let win = self.b.window(self.window_start, self.window_len);
        let corrected = correct_frequency_anchored(&win, du, self.anchor)?;
        self.ctx.find(&corrected, self.threshold)
    }
}

/// Sweeps trial frequency compensations of stream b and returns the one
/// maximizing peak significance. Ties resolve to the lowest du.
///
/// Unless `full_scan` is set the sweep runs in two phases: a coarse pass
/// whose stride keeps the residual drift under ~δt/3 across the correlation
/// span, then a fine pass at `du_step` around the coarse winner. The
/// returned residual stays within `du_step/2` either way.
pub fn sweep_precompensation(
    a: &EventStream,
    b: &EventStream,
    grid: &GridParams,
    cfg: &SweepConfig,
) -> Result<SweepResult, PeakFindError> {
    if cfg.du_step <= 0.0 {
        return Err(PeakFindError::InvalidParameter(
            "du_step must be positive".into(),
        ));
    }
    if cfg.du_max < cfg.du_min {
        return Err(PeakFindError::InvalidParameter(
            "du_max must be >= du_min".into(),
        ));
    }
    let n_candidates = ((cfg.du_max - cfg.du_min) / cfg.du_step).floor() as i64 + 1;
    let degenerate = n_candidates <= 1;

    let span = grid.span();
    let t_start = TimeTick(
        a.ticks
            .first()
            .map(|t| t.0)
            .unwrap_or(0)
            .max(b.ticks.first().map(|t| t.0).unwrap_or(0)),
    );
    let pad = cfg
        .max_tau
        .unwrap_or(TimeTick(span.0 / 4))
        .0
        .min(span.0 / 2);
    let a_win = a.window(t_start, span);
    let anchor = b.ticks.first().copied().unwrap_or(TimeTick::ZERO);

    let ctx = FindContext::new(&a_win, grid)?;
    // Accidental level per correlation bin, for the acceptance threshold.
    let b_rate = b.observed_rate();
    let lambda = a_win.len() as f64 * b_rate * grid.delta_t.as_secs_f64();
    let threshold = acceptance_threshold_sigma(cfg.alpha, lambda, grid.n_bins() as u64);

    let mut state = SweepState {
        ctx,
        b,
        anchor,
        window_start: TimeTick(t_start.0 - pad),
        window_len: TimeTick(span.0 + 2 * pad),
        threshold,
        evaluated: 0,
    };

    let du_at = |k: i64| cfg.du_min + k as f64 * cfg.du_step;
    let mut best: Option<(f64, PeakCandidate)> = None;
    let mut best_rejected: Option<PeakCandidate> = None;

    let consider =
        |best: &mut Option<(f64, PeakCandidate)>, du: f64, cand: PeakCandidate| match best {
            Some((_, prev)) if cand.significance <= prev.significance => {}
            _ => *best = Some((du, cand)),
        };

    if cfg.full_scan || degenerate {
        for k in 0..n_candidates {
            let du = du_at(k);
            match state.eval(du) {
                Ok(c) => consider(&mut best, du, c),
                Err(PeakFindError::NotFound { best: b }) => track_rejected(&mut best_rejected, *b),
                Err(e) => return Err(e),
            }
        }
    } else {
        // Coarse stride: residual drift over the span stays below ~δt/3.
        let t_span = span.as_secs_f64();
        let stride_du = grid.delta_t.as_secs_f64() / (3.0 * t_span);
        let stride = ((stride_du / cfg.du_step).floor() as i64).clamp(1, n_candidates.max(1));
        let mut coarse_hit: Option<(i64, PeakCandidate)> = None;
        let mut k = 0;
        while k < n_candidates {
            let du = du_at(k);
            match state.eval(du) {
                Ok(c) => {
                    let better = coarse_hit
                        .as_ref()
                        .map_or(true, |(_, prev)| c.significance > prev.significance);
                    if better {
                        coarse_hit = Some((k, c));
                    }
                    if cfg.early_exit {
                        break;
                    }
                }
                Err(PeakFindError::NotFound { best: b }) => track_rejected(&mut best_rejected, *b),
                Err(e) => return Err(e),
            }
            k += stride;
        }
        if let Some((k0, _)) = coarse_hit {
            let lo = (k0 - stride + 1).max(0);
            let hi = (k0 + stride - 1).min(n_candidates - 1);
            for k in lo..=hi {
                let du = du_at(k);
                match state.eval(du) {
                    Ok(c) => consider(&mut best, du, c),
                    Err(PeakFindError::NotFound { best: b }) => {
                        track_rejected(&mut best_rejected, *b)
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }

    match best {
        Some((du, candidate)) => Ok(SweepResult {
            du,
            candidate,
            evaluated: state.evaluated,
            degenerate,
        }),
        None => {
            let best = best_rejected
                .ok_or_else(|| PeakFindError::InvalidParameter("empty sweep grid".into()))?;
            Err(PeakFindError::NotFound {
                best: Box::new(best),
            })
        }
    }
}

fn track_rejected(slot: &mut Option<PeakCandidate>, cand: PeakCandidate) {
    let better = slot
        .as_ref()
        .map_or(true, |prev| cand.significance > prev.significance);
    if better {
        *slot = Some(cand);
    }
}

/// Two-segment frequency estimate at a fixed prior offset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DuEstimate {
    /// Residual fractional frequency offset of the (already corrected)
    /// streams fed in.
    pub du: f64,
    pub tau_early: TimeTick,
    pub tau_late: TimeTick,
    /// Separation of the segment centers, in seconds.
    pub baseline_s: f64,
    /// 1σ quantization-limited uncertainty of `du`.
    pub sigma: f64,
}

/// Estimates the frequency offset by measuring the peak position in the
/// first and last `grid.span()`-long segments and differencing:
/// `du = (τ_late − τ_early) / Δt_centers`. Stream b should already carry the
/// caller's current rate correction; `prior_tau` re-centers its windows.
pub fn estimate_du(
    a: &EventStream,
    b: &EventStream,
    prior_tau: TimeTick,
    grid: &GridParams,
    threshold_sigma: f64,
) -> Result<DuEstimate, PeakFindError> {
    let span = grid.span();
    let t0 = TimeTick(
        a.ticks
            .first()
            .map(|t| t.0)
            .unwrap_or(0)
            .max(b.ticks.first().map(|t| t.0 + prior_tau.0).unwrap_or(0)),
    );
    let t1 = TimeTick(
        a.ticks
            .last()
            .map(|t| t.0)
            .unwrap_or(0)
            .min(b.ticks.last().map(|t| t.0 + prior_tau.0).unwrap_or(0)),
    );
    if (t1.0 - t0.0) < 2 * span.0 {
        return Err(PeakFindError::InsufficientSpan {
            have: (t1.0 - t0.0) as f64 / 1e12,
            need: 2.0 * span.as_secs_f64(),
        });
    }
    // Shift b by the prior so residual offsets are near zero in both windows.
    let pad = TimeTick(span.0 / 8);
    let b_shifted = b.shifted(prior_tau);
    let measure = |start: TimeTick, which: &'static str| -> Result<TimeTick, PeakFindError> {
        let a_win = a.window(start, span);
        let b_win = b_shifted.window(start - pad, TimeTick(span.0 + 2 * pad.0));
        let run = || -> Result<PeakCandidate, PeakFindError> {
            let mut ctx = FindContext::new(&a_win, grid)?;
            ctx.find(&b_win, threshold_sigma)
        };
        match run() {
            Ok(cand) => Ok(cand.tau + prior_tau),
            Err(e) => Err(PeakFindError::SegmentFailed {
                which,
                source: Box::new(e),
            }),
        }
    };
    let tau_early = measure(t0, "early")?;
    let tau_late = measure(TimeTick(t1.0 - span.0), "late")?;
    let baseline_s = (t1.0 - span.0 - t0.0) as f64 / 1e12;
    let du = (tau_late.0 - tau_early.0) as f64 / (baseline_s * 1e12);
    let quant = grid.delta_t.0 as f64 / 12f64.sqrt();
    Ok(DuEstimate {
        du,
        tau_early,
        tau_late,
        baseline_s,
        sigma: std::f64::consts::SQRT_2 * quant / (baseline_s * 1e12),
    })
}

/// Full acquisition result: offset and frequency estimates plus per-level
/// diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindResult {
    /// Raw clock offset `t_a − t_b` near the start of the processed streams.
    #[serde(rename = "tau_ps")]
    pub tau: TimeTick,
    /// Frequency offset `f_a/f_b − 1`.
    pub du: f64,
    pub levels: Vec<PeakCandidate>,
    pub accepted: bool,
    /// Populated when refinement stopped early; the result carries the last
    /// accepted level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Refinement configuration; each level halves the bin width until
/// `target_delta_t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    pub target_delta_t: TimeTick,
    pub alpha: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            target_delta_t: TimeTick::from_ns(256),
            alpha: 1e-3,
        }
    }
}

/// Hierarchical refinement: halves δt (keeping N constant), re-centers the
/// search window on the prior τ, and re-estimates du at each level. A level
/// that fails to re-accept stops the descent and the last accepted level is
/// returned with a warning.
pub fn refine(
    a: &EventStream,
    b: &EventStream,
    initial: &FindResult,
    cfg: &RefineConfig,
) -> Result<FindResult, PeakFindError> {
    if !initial.accepted {
        return Err(PeakFindError::InvalidParameter(
            "refine requires an accepted initial result".into(),
        ));
    }
    let Some(last) = initial.levels.last() else {
        return Err(PeakFindError::InvalidParameter(
            "initial result has no levels".into(),
        ));
    };
    let mut result = initial.clone();
    if cfg.target_delta_t.0 >= last.grid.delta_t.0 {
        return Ok(result); // nothing to refine
    }
    let anchor = b.ticks.first().copied().unwrap_or(TimeTick::ZERO);
    let t_start = TimeTick(a.ticks.first().map(|t| t.0).unwrap_or(0).max(anchor.0));
    let q = last.grid.q;
    let mut delta_t = last.grid.delta_t;
    let mut tau = result.tau;
    let mut du = result.du;

    loop {
        let next = TimeTick((delta_t.0 / 2).max(cfg.target_delta_t.0));
        if next.0 >= delta_t.0 {
            break;
        }
        delta_t = next;
        let grid = GridParams::new(q, delta_t, TimeTick::ZERO)?;
        let span = grid.span();

        // Current best correction of b: rate, then offset re-centering.
        let b_rate_corr = correct_frequency_anchored(b, du, anchor)?;
        let b_centered = b_rate_corr.shifted(tau);

        let a_win = a.window(t_start, span);
        let lambda = a_win.len() as f64 * b.observed_rate() * grid.delta_t.as_secs_f64();
        let threshold = acceptance_threshold_sigma(cfg.alpha, lambda, grid.n_bins() as u64);
        let pad = TimeTick(span.0 / 8);
        let b_win = b_centered.window(t_start - pad, TimeTick(span.0 + 2 * pad.0));
        let level = (|| -> Result<PeakCandidate, PeakFindError> {
            let mut ctx = FindContext::new(&a_win, &grid)?;
            ctx.find(&b_win, threshold)
        })();
        let mut level = match level {
            Ok(c) => c,
            Err(PeakFindError::NotFound { best }) => {
                result.warning = Some(format!(
                    "refinement stopped at {} ps bins: {}",
                    delta_t.0 * 2,
                    best
                ));
                return Ok(result);
            }
            Err(e) => return Err(e),
        };
        tau = tau + level.tau;

        // Re-estimate du over the full stream at this resolution when the
        // span allows it; fold the residual slope into the running estimate.
        match estimate_du(a, &b_rate_corr, tau, &grid, level.threshold_sigma) {
            Ok(est) => {
                du = (1.0 + du) * (1.0 + est.du) - 1.0;
                tau = est.tau_early;
            }
            Err(PeakFindError::InsufficientSpan { .. }) => {}
            Err(PeakFindError::SegmentFailed { .. }) => {}
            Err(e) => return Err(e),
        }

        level.tau = tau;
        result.levels.push(level);
        result.tau = tau;
        result.du = du;
    }
    Ok(result)
}

/// End-to-end acquisition configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindConfig {
    /// Coarse grid; crystal-oscillator scale offsets want q=20, δt=1024 ns.
    pub q: u32,
    pub coarse_delta_t: TimeTick,
    pub sweep: SweepConfig,
    pub refine: RefineConfig,
}

impl Default for FindConfig {
    fn default() -> Self {
        FindConfig {
            q: 20,
            coarse_delta_t: TimeTick::from_ns(1024),
            sweep: SweepConfig::symmetric(10e-6, 100e-9),
            refine: RefineConfig::default(),
        }
    }
}

/// Sweep + refine pipeline. On a rejected sweep the binning origin is
/// retried at a half-bin shift to recover peaks split across a bin boundary.
pub fn find_offset(
    a: &EventStream,
    b: &EventStream,
    cfg: &FindConfig,
) -> Result<FindResult, PeakFindError> {
    let mut last_err: Option<PeakFindError> = None;
    for origin_frac in [0i64, 2] {
        let origin = TimeTick(origin_frac * cfg.coarse_delta_t.0 / 4);
        let grid = GridParams::new(cfg.q, cfg.coarse_delta_t, origin)?;
        match sweep_precompensation(a, b, &grid, &cfg.sweep) {
            Ok(sweep) => {
                let initial = FindResult {
                    tau: sweep.candidate.tau,
                    du: sweep.du,
                    levels: vec![sweep.candidate.clone()],
                    accepted: true,
                    warning: None,
                };
                return refine(a, b, &initial, &cfg.refine);
            }
            Err(e @ PeakFindError::NotFound { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err
        .unwrap_or_else(|| PeakFindError::InvalidParameter("sweep produced no candidates".into())))
}
