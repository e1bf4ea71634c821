//! Binned time traces, FFT-based circular cross-correlation, a brute-force
//! oracle, and g² normalization/fitting.
//!
//! Integer counts are carried through the transform in double precision and
//! rounded back; results are exact while `N·max_count² < 2^52`, which holds
//! comfortably at desk scales.

use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timetag::{EventStream, TimeTick};

#[derive(Debug, Error)]
pub enum CorrelationError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("trace lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trace length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("histogram has no normalized view; call normalize first")]
    MissingNormalization,
    #[error("fit did not converge after {iterations} iterations (residual norm {residual_norm:.3e})")]
    FitDidNotConverge { iterations: u32, residual_norm: f64 },
    #[error("histogram too small for fitting: {0}")]
    InsufficientData(String),
}

/// A circular binning grid with `N = 2^q` bins of width `delta_t`.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridParams {
    pub q: u32,
    pub delta_t: TimeTick,
    pub origin: TimeTick,
}

impl GridParams {
    pub fn new(q: u32, delta_t: TimeTick, origin: TimeTick) -> Result<Self, CorrelationError> {
        if q == 0 || q > 30 {
            return Err(CorrelationError::InvalidParameter(format!(
                "q = {q} out of range [1, 30]"
            )));
        }
        if delta_t.0 < 1 {
            return Err(CorrelationError::InvalidParameter(
                "delta_t must be at least one tick".into(),
            ));
        }
        Ok(GridParams { q, delta_t, origin })
    }

    pub fn n_bins(&self) -> usize {
        1usize << self.q
    }

    /// Acquisition span T = N·δt.
    pub fn span(&self) -> TimeTick {
        TimeTick(self.n_bins() as i64 * self.delta_t.0)
    }
}

/// Circular fold: events are counted at `floor((t − origin)/δt) mod N`.
pub fn bin_events(stream: &EventStream, grid: &GridParams) -> Vec<u32> {
    let n = grid.n_bins() as i64;
    let mut trace = vec![0u32; n as usize];
    for t in &stream.ticks {
        let idx = (t.0 - grid.origin.0).div_euclid(grid.delta_t.0).rem_euclid(n);
        trace[idx as usize] += 1;
    }
    trace
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

/// Reusable FFT plans and buffers for repeated correlations at one size.
pub struct Correlator {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Correlator {
    pub fn new(n: usize) -> Result<Self, CorrelationError> {
        if !n.is_power_of_two() {
            return Err(CorrelationError::NotPowerOfTwo(n));
        }
        let (fwd, inv) = {
            let mut p = planner().lock().expect("fft planner poisoned");
            (p.plan_fft_forward(n), p.plan_fft_inverse(n))
        };
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Ok(Correlator {
            n,
            fwd,
            inv,
            scratch: vec![Complex::default(); scratch_len],
        })
    }

    /// Forward spectrum of an integer trace.
    pub fn spectrum(&mut self, trace: &[u32]) -> Result<Vec<Complex<f64>>, CorrelationError> {
        if trace.len() != self.n {
            return Err(CorrelationError::LengthMismatch(trace.len(), self.n));
        }
        let mut buf: Vec<Complex<f64>> = trace
            .iter()
            .map(|&v| Complex::new(v as f64, 0.0))
            .collect();
        self.fwd.process_with_scratch(&mut buf, &mut self.scratch);
        Ok(buf)
    }

    /// Circular cross-correlation from two spectra:
    /// `out[k] = Σ_j a[j]·b[(j+k) mod N]`, rounded to integers.
    pub fn cross_from_spectra(
        &mut self,
        spec_a: &[Complex<f64>],
        spec_b: &[Complex<f64>],
    ) -> Result<Vec<i64>, CorrelationError> {
        if spec_a.len() != self.n || spec_b.len() != self.n {
            return Err(CorrelationError::LengthMismatch(spec_a.len(), spec_b.len()));
        }
        let mut buf: Vec<Complex<f64>> = spec_a
            .iter()
            .zip(spec_b)
            .map(|(a, b)| a.conj() * b)
            .collect();
        self.inv.process_with_scratch(&mut buf, &mut self.scratch);
        let scale = 1.0 / self.n as f64;
        Ok(buf.iter().map(|v| (v.re * scale).round() as i64).collect())
    }
}

/// Circular cross-correlation `F⁻¹{conj(F{a})·F{b}}` of two integer traces,
/// rounded to integers. `out[k] = Σ_j a[j]·b[(j+k) mod N]`.
pub fn xcorr(a: &[u32], b: &[u32]) -> Result<Vec<i64>, CorrelationError> {
    if a.len() != b.len() {
        return Err(CorrelationError::LengthMismatch(a.len(), b.len()));
    }
    let mut c = Correlator::new(a.len())?;
    let sa = c.spectrum(a)?;
    let sb = c.spectrum(b)?;
    c.cross_from_spectra(&sa, &sb)
}

/// Brute-force O(N²) reference for [`xcorr`]; exact integer arithmetic.
pub fn xcorr_direct(a: &[u32], b: &[u32]) -> Result<Vec<i64>, CorrelationError> {
    if a.len() != b.len() {
        return Err(CorrelationError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let mut out = vec![0i64; n];
    for (j, &aj) in a.iter().enumerate() {
        if aj == 0 {
            continue;
        }
        for (k, slot) in out.iter_mut().enumerate() {
            let bj = b[(j + k) % n];
            *slot += aj as i64 * bj as i64;
        }
    }
    Ok(out)
}

/// Maps a circular lag index to a signed lag in `[-N/2, N/2)`.
pub fn signed_lag(k: usize, n: usize) -> i64 {
    if k < n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// How a histogram's counts were produced; determines the lag axis.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistogramKind {
    /// Counts indexed by circular bin-index difference `bin(a) − bin(b)`,
    /// re-centered so index `i` holds the signed difference `i − N/2`.
    Circular,
    /// Counts of pairs with `tau = t_a − t_b` in
    /// `[origin + i·δt, origin + (i+1)·δt)`.
    Windowed,
}

/// N counts over bins of width δt with an origin offset, plus an optional
/// g²-normalized view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub grid: GridParams,
    pub kind: HistogramKind,
    pub counts: Vec<u64>,
    /// Events used per channel.
    pub totals: (u64, u64),
    pub normalized: Option<Vec<f64>>,
    pub g2_err: Option<Vec<f64>>,
}

impl CorrelationHistogram {
    /// Circular correlation of two streams folded onto `grid` (FFT path).
    pub fn from_xcorr(
        a: &EventStream,
        b: &EventStream,
        grid: &GridParams,
    ) -> Result<Self, CorrelationError> {
        let ta = bin_events(a, grid);
        let tb = bin_events(b, grid);
        let raw = xcorr(&ta, &tb)?;
        Ok(Self::from_raw_xcorr(&raw, a.len(), b.len(), grid))
    }

    /// Re-indexes a raw lag-space correlation into tau bins: the tau bin for
    /// bin-index difference `m = bin(a) − bin(b)` lives at raw index
    /// `(−m) mod N`.
    pub fn from_raw_xcorr(raw: &[i64], n_a: usize, n_b: usize, grid: &GridParams) -> Self {
        let n = raw.len();
        let half = n as i64 / 2;
        let counts: Vec<u64> = (0..n)
            .map(|i| {
                let m = i as i64 - half;
                raw[(-m).rem_euclid(n as i64) as usize].max(0) as u64
            })
            .collect();
        CorrelationHistogram {
            grid: *grid,
            kind: HistogramKind::Circular,
            counts,
            totals: (n_a as u64, n_b as u64),
            normalized: None,
            g2_err: None,
        }
    }

    /// Windowed pair histogram: counts each (a, b) pair whose
    /// `tau = t_a − t_b` falls inside the grid span. Linear-time sweep;
    /// this is the brute-force view used for g² estimation at small lags,
    /// where folding the full acquisition would drown the peak in
    /// accidentals.
    pub fn from_pairs(
        a: &EventStream,
        b: &EventStream,
        grid: &GridParams,
    ) -> Result<Self, CorrelationError> {
        a.check_sorted()
            .map_err(|e| CorrelationError::InvalidParameter(e.to_string()))?;
        b.check_sorted()
            .map_err(|e| CorrelationError::InvalidParameter(e.to_string()))?;
        let n = grid.n_bins();
        let span = grid.span().0;
        let mut counts = vec![0u64; n];
        let mut j0 = 0usize;
        for &ta in &a.ticks {
            // tau in [origin, origin + span)  <=>
            // t_b in (ta - origin - span, ta - origin].
            let hi = ta.0 - grid.origin.0;
            let lo = hi - span;
            while j0 < b.ticks.len() && b.ticks[j0].0 <= lo {
                j0 += 1;
            }
            let mut j = j0;
            while j < b.ticks.len() && b.ticks[j].0 <= hi {
                let tau = ta.0 - b.ticks[j].0;
                let idx = (tau - grid.origin.0).div_euclid(grid.delta_t.0);
                if (0..n as i64).contains(&idx) {
                    counts[idx as usize] += 1;
                }
                j += 1;
            }
        }
        Ok(CorrelationHistogram {
            grid: *grid,
            kind: HistogramKind::Windowed,
            counts,
            totals: (a.len() as u64, b.len() as u64),
            normalized: None,
            g2_err: None,
        })
    }

    /// Lag-axis centers in picoseconds.
    pub fn lag_centers_ps(&self) -> Vec<f64> {
        let n = self.grid.n_bins();
        let dt = self.grid.delta_t.0 as f64;
        match self.kind {
            HistogramKind::Circular => (0..n)
                .map(|i| (i as i64 - n as i64 / 2) as f64 * dt)
                .collect(),
            HistogramKind::Windowed => (0..n)
                .map(|i| self.grid.origin.0 as f64 + (i as f64 + 0.5) * dt)
                .collect(),
        }
    }

    /// Attaches the g² view: `normalized[k] = counts[k]/(s1·s2·δt·T)` with
    /// Poissonian errors `sqrt(counts)` scaled the same way. `t_acq` is the
    /// acquisition time in seconds.
    pub fn normalize(&mut self, s1: f64, s2: f64, t_acq: f64) -> Result<(), CorrelationError> {
        if s1 <= 0.0 || s2 <= 0.0 || t_acq <= 0.0 {
            return Err(CorrelationError::InvalidParameter(
                "normalization requires positive rates and acquisition time".into(),
            ));
        }
        let denom = s1 * s2 * self.grid.delta_t.as_secs_f64() * t_acq;
        self.normalized = Some(self.counts.iter().map(|&c| c as f64 / denom).collect());
        self.g2_err = Some(
            self.counts
                .iter()
                .map(|&c| (c as f64).sqrt() / denom)
                .collect(),
        );
        Ok(())
    }

    /// CSV export with header `lag_ps,counts,g2,g2_err`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "lag_ps,counts,g2,g2_err")?;
        let lags = self.lag_centers_ps();
        for (i, lag) in lags.iter().enumerate() {
            let g2 = self.normalized.as_ref().map_or(f64::NAN, |v| v[i]);
            let err = self.g2_err.as_ref().map_or(f64::NAN, |v| v[i]);
            writeln!(w, "{},{},{},{}", lag, self.counts[i], g2, err)?;
        }
        Ok(())
    }
}

/// Result of fitting `1 + A·exp(−2|τ−τ0|/τ_c)` to a normalized histogram.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct G2Fit {
    pub amplitude: f64,
    pub amplitude_err: f64,
    pub tau_c_ps: f64,
    pub tau_c_err_ps: f64,
    pub tau0_ps: f64,
    pub tau0_err_ps: f64,
    /// Fitted g²(0) = 1 + A.
    pub g2_zero: f64,
    pub residual_norm: f64,
    pub iterations: u32,
    /// Set when the peak amplitude is consistent with zero and τ_c is
    /// unidentifiable.
    pub degenerate: bool,
}

fn model(lag: f64, a: f64, tau_c: f64, tau0: f64) -> f64 {
    1.0 + a * (-2.0 * (lag - tau0).abs() / tau_c).exp()
}

/// Solves a 3x3 linear system; returns None when singular.
fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in (col + 1)..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for col in (0..3).rev() {
        let mut v = rhs[col];
        for k in (col + 1)..3 {
            v -= m[col][k] * x[k];
        }
        x[col] = v / m[col][col];
    }
    Some(x)
}

/// Weighted Levenberg–Marquardt fit of the bunching model to the histogram's
/// normalized view, initialized from the peak bin and half-max width.
pub fn fit_g2(hist: &CorrelationHistogram) -> Result<G2Fit, CorrelationError> {
    let g2 = hist
        .normalized
        .as_ref()
        .ok_or(CorrelationError::MissingNormalization)?;
    let lags = hist.lag_centers_ps();
    let n = g2.len();
    if n < 10 {
        return Err(CorrelationError::InsufficientData(format!("{n} bins < 10")));
    }
    let sigmas: Vec<f64> = match &hist.g2_err {
        Some(errs) => {
            // Zero-count bins get a one-count error floor.
            let floor = errs
                .iter()
                .copied()
                .filter(|e| *e > 0.0)
                .fold(f64::INFINITY, f64::min);
            let floor = if floor.is_finite() { floor } else { 1.0 };
            errs.iter().map(|e| e.max(floor)).collect()
        }
        None => vec![1.0; n],
    };

    // Init from the peak bin and half-max width.
    let peak = (0..n)
        .max_by(|&i, &j| g2[i].partial_cmp(&g2[j]).unwrap())
        .unwrap();
    let mut a = (g2[peak] - 1.0).max(1e-6);
    let mut tau0 = lags[peak];
    let half = 1.0 + a / 2.0;
    let mut right = peak;
    while right + 1 < n && g2[right] > half {
        right += 1;
    }
    let mut left = peak;
    while left > 0 && g2[left] > half {
        left -= 1;
    }
    let width = (lags[right] - lags[left])
        .abs()
        .max(hist.grid.delta_t.0 as f64);
    let mut tau_c = (width / std::f64::consts::LN_2).max(hist.grid.delta_t.0 as f64 * 0.5);

    let span = lags[n - 1] - lags[0];
    if span < 3.0 * tau_c {
        return Err(CorrelationError::InsufficientData(format!(
            "lag span {span:.0} ps below 3x the nominal coherence time {tau_c:.0} ps"
        )));
    }

    let chi2 = |a: f64, tc: f64, t0: f64| -> f64 {
        lags.iter()
            .zip(g2)
            .zip(&sigmas)
            .map(|((l, y), s)| {
                let r = (y - model(*l, a, tc, t0)) / s;
                r * r
            })
            .sum()
    };

    let mut lambda_lm = 1e-3;
    let mut cost = chi2(a, tau_c, tau0);
    let mut converged = false;
    let max_iter = 200u32;
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for ((l, y), s) in lags.iter().zip(g2).zip(&sigmas) {
            let d = l - tau0;
            let e = (-2.0 * d.abs() / tau_c).exp();
            let m = 1.0 + a * e;
            let grad = [
                e,
                a * e * 2.0 * d.abs() / (tau_c * tau_c),
                a * e * 2.0 * d.signum() / tau_c,
            ];
            let w = 1.0 / (s * s);
            let r = y - m;
            for i in 0..3 {
                jtr[i] += w * grad[i] * r;
                for k in 0..3 {
                    jtj[i][k] += w * grad[i] * grad[k];
                }
            }
        }
        let mut damped = jtj;
        for (i, row) in damped.iter_mut().enumerate() {
            row[i] *= 1.0 + lambda_lm;
            row[i] += 1e-30;
        }
        let Some(step) = solve3(damped, jtr) else {
            lambda_lm *= 10.0;
            continue;
        };
        let a_new = a + step[0];
        let tau_c_new = (tau_c + step[1]).max(hist.grid.delta_t.0 as f64 * 1e-2);
        let tau0_new = tau0 + step[2];
        let cost_new = chi2(a_new, tau_c_new, tau0_new);
        if cost_new <= cost {
            let rel = (cost - cost_new) / cost.max(1e-300);
            let step_small = step.iter().map(|s| s.abs()).sum::<f64>()
                < 1e-12 * (a.abs() + tau_c.abs() + tau0.abs() + 1.0);
            a = a_new;
            tau_c = tau_c_new;
            tau0 = tau0_new;
            cost = cost_new;
            lambda_lm = (lambda_lm * 0.3).max(1e-12);
            if rel < 1e-14 || step_small {
                converged = true;
                break;
            }
        } else {
            lambda_lm *= 10.0;
            if lambda_lm > 1e12 {
                converged = true; // stuck at a local minimum; accept
                break;
            }
        }
    }
    if !converged {
        return Err(CorrelationError::FitDidNotConverge {
            iterations: iter,
            residual_norm: cost.sqrt(),
        });
    }

    // 1σ parameter errors from the normal matrix, scaled by reduced χ².
    let mut jtj = [[0.0f64; 3]; 3];
    for (l, s) in lags.iter().zip(&sigmas) {
        let d = l - tau0;
        let e = (-2.0 * d.abs() / tau_c).exp();
        let grad = [
            e,
            a * e * 2.0 * d.abs() / (tau_c * tau_c),
            a * e * 2.0 * d.signum() / tau_c,
        ];
        let w = 1.0 / (s * s);
        for i in 0..3 {
            for k in 0..3 {
                jtj[i][k] += w * grad[i] * grad[k];
            }
        }
    }
    let dof = (n as f64 - 3.0).max(1.0);
    let s2 = cost / dof;
    let mut errs = [f64::INFINITY; 3];
    let mut invertible = true;
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        match solve3(jtj, e) {
            Some(col) => errs[i] = (col[i].max(0.0) * s2).sqrt(),
            None => invertible = false,
        }
    }
    let degenerate = !invertible
        || a.abs() <= 2.0 * errs[0]
        || tau_c > 10.0 * span
        || !a.is_finite()
        || !tau_c.is_finite();

    Ok(G2Fit {
        amplitude: a,
        amplitude_err: errs[0],
        tau_c_ps: tau_c,
        tau_c_err_ps: errs[1],
        tau0_ps: tau0,
        tau0_err_ps: errs[2],
        g2_zero: 1.0 + a,
        residual_norm: cost.sqrt(),
        iterations: iter,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Exp};

    fn poisson_stream(rate: f64, duration_s: f64, seed: u64, channel: u8) -> EventStream {
        let mut rng = sub_rng(seed, channel as u64 + 100);
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
    fn bin_events_basics() {
        let grid = GridParams::new(3, TimeTick(10), TimeTick::ZERO).unwrap();
        let empty = EventStream::from_ticks(0, vec![]);
        assert!(bin_events(&empty, &grid).iter().all(|&c| c == 0));

        let one = EventStream::from_ticks(0, vec![TimeTick::ZERO]);
        let trace = bin_events(&one, &grid);
        assert_eq!(trace[0], 1);
        assert_eq!(trace.iter().sum::<u32>(), 1);

        // Folding: events at origin + span and at negative times wrap around.
        let wrapped = EventStream::from_ticks(0, vec![TimeTick(-10), TimeTick(80)]);
        let trace = bin_events(&wrapped, &grid);
        assert_eq!(trace[7], 1);
        assert_eq!(trace[0], 1);
    }

    #[test]
    fn bin_occupancy_matches_poisson_mean() {
        let rate = 100_000.0;
        let grid = GridParams::new(10, TimeTick::from_ns(1000), TimeTick::ZERO).unwrap();
        let dur = grid.span().as_secs_f64();
        let s = poisson_stream(rate, dur, 5, 0);
        let trace = bin_events(&s, &grid);
        let mean = trace.iter().map(|&c| c as f64).sum::<f64>() / grid.n_bins() as f64;
        let expect = rate * grid.delta_t.as_secs_f64();
        let sigma = (expect / grid.n_bins() as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * sigma, "mean {mean} vs {expect}");
    }

    #[test]
    fn xcorr_delta_cases() {
        let a = [1u32, 0, 0, 0];
        assert_eq!(xcorr(&a, &a).unwrap(), vec![1, 0, 0, 0]);
        let b = [0u32, 1, 0, 0];
        let c = xcorr(&a, &b).unwrap();
        assert_eq!(c, vec![0, 1, 0, 0]);
    }

    #[test]
    fn xcorr_rejects_bad_shapes() {
        assert!(matches!(
            xcorr(&[1, 0], &[1, 0, 0]),
            Err(CorrelationError::LengthMismatch(2, 3))
        ));
        assert!(matches!(
            xcorr(&[1, 0, 0], &[1, 0, 0]),
            Err(CorrelationError::NotPowerOfTwo(3))
        ));
    }

    #[test]
    fn xcorr_matches_direct_sum_exactly() {
        let mut rng = sub_rng(7, 0);
        for trial in 0..20 {
            let q = 6 + (trial % 7); // up to 2^12
            let n = 1usize << q;
            let events = rng.random_range(1..=10_000usize);
            let mut a = vec![0u32; n];
            let mut b = vec![0u32; n];
            for _ in 0..events {
                a[rng.random_range(0..n)] += 1;
                b[rng.random_range(0..n)] += 1;
            }
            let fast = xcorr(&a, &b).unwrap();
            let slow = xcorr_direct(&a, &b).unwrap();
            assert_eq!(fast, slow, "trial {trial}, n {n}");
        }
    }

    #[test]
    fn xcorr_total_mass_is_product_of_sums() {
        let mut rng = sub_rng(8, 0);
        let n = 1usize << 9;
        let mut a = vec![0u32; n];
        let mut b = vec![0u32; n];
        for _ in 0..3000 {
            a[rng.random_range(0..n)] += 1;
            b[rng.random_range(0..n)] += 1;
        }
        let c = xcorr(&a, &b).unwrap();
        let lhs: i64 = c.iter().sum();
        let rhs = a.iter().map(|&v| v as i64).sum::<i64>()
            * b.iter().map(|&v| v as i64).sum::<i64>();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn circular_shift_moves_argmax() {
        let mut rng = sub_rng(9, 0);
        let n = 1usize << 10;
        let mut a = vec![0u32; n];
        for _ in 0..2000 {
            a[rng.random_range(0..n)] += 1;
        }
        let base = xcorr(&a, &a).unwrap();
        let base_argmax = base.iter().enumerate().max_by_key(|(_, v)| **v).unwrap().0;
        assert_eq!(base_argmax, 0);
        for &shift in &[1usize, 17, 513] {
            let mut b = vec![0u32; n];
            for (i, &v) in a.iter().enumerate() {
                b[(i + shift) % n] = v;
            }
            let c = xcorr(&a, &b).unwrap();
            let argmax = c.iter().enumerate().max_by_key(|(_, v)| **v).unwrap().0;
            assert_eq!(argmax, shift, "shift {shift}");
        }
    }

    #[test]
    fn flat_poisson_normalizes_to_unity() {
        let rate = 200_000.0;
        let dur = 2.0;
        let a = poisson_stream(rate, dur, 31, 0);
        let b = poisson_stream(rate, dur, 32, 1);
        let grid = GridParams::new(7, TimeTick::from_ns(64), TimeTick(-64 * 64_000)).unwrap();
        let mut hist = CorrelationHistogram::from_pairs(&a, &b, &grid).unwrap();
        hist.normalize(a.observed_rate(), b.observed_rate(), dur)
            .unwrap();
        let g2 = hist.normalized.as_ref().unwrap();
        let chi2: f64 = g2
            .iter()
            .zip(hist.g2_err.as_ref().unwrap())
            .map(|(v, e)| ((v - 1.0) / e.max(1e-12)).powi(2))
            .sum();
        let dof = g2.len() as f64;
        assert!(
            chi2 < dof + 4.0 * (2.0 * dof).sqrt(),
            "chi2 {chi2} vs dof {dof}"
        );
        let mean = g2.iter().sum::<f64>() / g2.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean g2 {mean}");
    }

    #[test]
    fn zero_counts_normalize_to_zero() {
        let grid = GridParams::new(4, TimeTick(100), TimeTick::ZERO).unwrap();
        let mut hist = CorrelationHistogram {
            grid,
            kind: HistogramKind::Windowed,
            counts: vec![0; 16],
            totals: (0, 0),
            normalized: None,
            g2_err: None,
        };
        hist.normalize(1e5, 1e5, 1.0).unwrap();
        assert!(hist.normalized.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rejects_zero_rates() {
        let grid = GridParams::new(4, TimeTick(100), TimeTick::ZERO).unwrap();
        let mut hist = CorrelationHistogram {
            grid,
            kind: HistogramKind::Windowed,
            counts: vec![0; 16],
            totals: (0, 0),
            normalized: None,
            g2_err: None,
        };
        assert!(hist.normalize(0.0, 1e5, 1.0).is_err());
    }

    #[test]
    fn fit_recovers_noiseless_curve() {
        let grid = GridParams::new(7, TimeTick::from_ns(16), TimeTick(-64 * 16_000)).unwrap();
        let lags: Vec<f64> = (0..128)
            .map(|i| grid.origin.0 as f64 + (i as f64 + 0.5) * 16_000.0)
            .collect();
        let g2: Vec<f64> = lags.iter().map(|l| model(*l, 0.5, 180_000.0, 0.0)).collect();
        let hist = CorrelationHistogram {
            grid,
            kind: HistogramKind::Windowed,
            counts: vec![1; 128],
            totals: (0, 0),
            normalized: Some(g2),
            g2_err: None,
        };
        let fit = fit_g2(&hist).unwrap();
        assert_relative_eq!(fit.amplitude, 0.5, max_relative = 1e-6);
        assert_relative_eq!(fit.tau_c_ps, 180_000.0, max_relative = 1e-6);
        assert!(fit.tau0_ps.abs() < 1.0);
        assert!(!fit.degenerate);
    }

    #[test]
    fn fit_flags_flat_input_as_degenerate() {
        let grid = GridParams::new(7, TimeTick::from_ns(16), TimeTick(-64 * 16_000)).unwrap();
        let mut rng = sub_rng(77, 0);
        let g2: Vec<f64> = (0..128).map(|_| 1.0 + 0.001 * rng.random::<f64>()).collect();
        let hist = CorrelationHistogram {
            grid,
            kind: HistogramKind::Windowed,
            counts: vec![100; 128],
            totals: (0, 0),
            normalized: Some(g2),
            g2_err: Some(vec![0.01; 128]),
        };
        let fit = fit_g2(&hist).unwrap();
        assert!(fit.degenerate, "flat fit should be degenerate: {fit:?}");
    }

    #[test]
    fn fit_requires_enough_bins() {
        let grid = GridParams::new(3, TimeTick(100), TimeTick::ZERO).unwrap();
        let hist = CorrelationHistogram {
            grid,
            kind: HistogramKind::Windowed,
            counts: vec![1; 8],
            totals: (0, 0),
            normalized: Some(vec![1.0; 8]),
            g2_err: None,
        };
        assert!(matches!(
            fit_g2(&hist),
            Err(CorrelationError::InsufficientData(_))
        ));
    }

    #[test]
    fn csv_schema() {
        let grid = GridParams::new(2, TimeTick(100), TimeTick(-200)).unwrap();
        let mut hist = CorrelationHistogram {
            grid,
            kind: HistogramKind::Windowed,
            counts: vec![1, 2, 3, 4],
            totals: (10, 10),
            normalized: None,
            g2_err: None,
        };
        hist.normalize(1e5, 1e5, 1.0).unwrap();
        let mut buf = Vec::new();
        hist.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "lag_ps,counts,g2,g2_err");
        assert_eq!(text.lines().count(), 5);
    }
}
