//! Poisson max-order statistics and the peak-finding success-probability
//! model.
//!
//! Accidental coincidences in each of the N correlation bins are Poisson
//! with mean λ = s1·s2·δt·T. The largest noise bin follows the max-order
//! distribution `F(x|λ)^N − F(x−1|λ)^N`, evaluated here directly on CDF
//! values in [0,1] (the form is numerically tame: exponentiation of numbers
//! in the unit interval). A peak is found when the signal bin strictly
//! exceeds every noise bin; ties count as failures.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur};
use thiserror::Error;

use crate::rng::sub_rng;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bin mean {0:.3e} outside the numerically stable range")]
    RangeError(f64),
}

/// Largest bin mean accepted by the probability models.
const LAMBDA_MAX: f64 = 1e9;

// ---------------------------------------------------------------------------
// Poisson pmf (saddle-point evaluation) and cdf
// ---------------------------------------------------------------------------

/// ln(n!) for n <= 18, exact in f64.
const LN_FACT: [f64; 19] = [
    0.0,
    0.0,
    0.6931471805599453,
    1.791759469228055,
    3.1780538303479458,
    4.787491742782046,
    6.579251212010101,
    8.525161361065415,
    10.60460290274525,
    12.801827480081469,
    15.104412573075516,
    17.502307845873887,
    19.987214495661885,
    22.552163853123425,
    25.19122118273868,
    27.89927138384089,
    30.671860106080672,
    33.50507345013689,
    36.39544520803305,
];

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// stirlerr(n) = ln(n!) − ln(√(2πn)·(n/e)ⁿ).
fn stirlerr(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 18.0 {
        let k = n as usize;
        return LN_FACT[k] - ((n + 0.5) * n.ln() - n + LN_SQRT_2PI);
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term x·ln(x/λ) + λ − x, evaluated without cancellation when
/// x ≈ λ.
fn bd0(x: f64, lambda: f64) -> f64 {
    if (x - lambda).abs() < 0.1 * (x + lambda) {
        let v = (x - lambda) / (x + lambda);
        let mut s = (x - lambda) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        let mut j = 1u32;
        loop {
            ej *= v2;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
            j += 1;
        }
    }
    x * (x / lambda).ln() + lambda - x
}

/// Poisson probability mass `P(X = x | λ)`.
///
/// Negative `x` yields 0 (convention). Relative error stays below 1e-12 for
/// λ up to 1e6 by evaluating through the saddle-point form rather than the
/// cancellation-prone `exp(x lnλ − λ − lnΓ(x+1))`.
pub fn poisson_pmf(x: i64, lambda: f64) -> f64 {
    assert!(lambda > 0.0, "poisson_pmf requires lambda > 0");
    if x < 0 {
        return 0.0;
    }
    let xf = x as f64;
    if x == 0 {
        return (-lambda).exp();
    }
    (-stirlerr(xf) - bd0(xf, lambda)).exp() / (2.0 * std::f64::consts::PI * xf).sqrt()
}

/// Poisson CDF `P(X <= x | λ)`; 0 for negative x, 1 for λ = 0.
pub fn poisson_cdf(x: i64, lambda: f64) -> f64 {
    if x < 0 {
        return 0.0;
    }
    if lambda == 0.0 {
        return 1.0;
    }
    gamma_ur((x + 1) as f64, lambda)
}

/// Poisson survival `P(X > x | λ)`, accurate deep in the upper tail.
pub fn poisson_sf(x: i64, lambda: f64) -> f64 {
    if x < 0 {
        return 1.0;
    }
    if lambda == 0.0 {
        return 0.0;
    }
    gamma_lr((x + 1) as f64, lambda)
}

/// Smallest x with `P(X <= x) >= p`, i.e. `sf(x) <= 1 − p` (pass the
/// complement directly to keep tail resolution).
fn poisson_quantile_by_sf(target_sf: f64, lambda: f64) -> i64 {
    if lambda == 0.0 {
        return 0;
    }
    let mut hi = (lambda + 10.0 * lambda.sqrt() + 10.0).ceil() as i64;
    while poisson_sf(hi, lambda) > target_sf {
        hi = ((lambda + 2.0 * (hi as f64 - lambda) + 10.0).ceil()) as i64;
    }
    let mut lo = -1i64;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if poisson_sf(mid, lambda) <= target_sf {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

// ---------------------------------------------------------------------------
// Max-order statistics
// ---------------------------------------------------------------------------

fn check_n(n: u64) -> i32 {
    assert!(n >= 1 && n <= i32::MAX as u64, "bin count out of range");
    n as i32
}

/// `F(x|λ)^n` without losing the distance of F from 1: once the survival
/// probability is small, F has been rounded onto the 1-ulp grid and a plain
/// power amplifies that quantization by n, so switch to exp(n·ln1p(−sf)).
fn cdf_pow(x: i64, lambda: f64, n: i32) -> f64 {
    let sf = poisson_sf(x, lambda);
    if sf <= 0.1 {
        (n as f64 * (-sf).ln_1p()).exp()
    } else {
        (1.0 - sf).powi(n)
    }
}

/// PMF of the maximum over `n` iid Poisson(λ) bins:
/// `F(x|λ)^n − F(x−1|λ)^n`.
pub fn max_order_pmf(x: i64, lambda: f64, n: u64) -> f64 {
    let n = check_n(n);
    if x < 0 {
        return 0.0;
    }
    if n == 1 {
        // Single bin: the difference of CDF powers reduces to the pmf.
        return poisson_pmf(x, lambda);
    }
    let hi = cdf_pow(x, lambda, n);
    let lo = cdf_pow(x - 1, lambda, n);
    (hi - lo).max(0.0)
}

/// CDF of the maximum over `n` iid Poisson(λ) bins.
pub fn max_order_cdf(x: i64, lambda: f64, n: u64) -> f64 {
    let n = check_n(n);
    cdf_pow(x, lambda, n)
}

/// Normal-approximation max-order density `n·f(x)·F(x)^(n−1)` with
/// μ = λ, σ = √λ. Appropriate for λ > 1e4; at small λ it underestimates the
/// upper tail relative to [`max_order_pmf`].
pub fn max_order_pmf_normal(x: f64, lambda: f64, n: u64) -> f64 {
    let n = check_n(n);
    assert!(lambda > 0.0);
    let sigma = lambda.sqrt();
    let z = (x - lambda) / sigma;
    let pdf = (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    n as f64 * pdf * normal_cdf(z).powi(n - 1)
}

/// Standard normal CDF via erfc (tail-accurate).
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Smallest x with `P(max <= x) >= p`.
pub fn max_order_quantile(p: f64, lambda: f64, n: u64) -> i64 {
    let n = check_n(n) as f64;
    assert!((0.0..1.0).contains(&p) && p > 0.0, "p must be in (0,1)");
    // F(x) >= p^(1/n)  <=>  sf(x) <= -expm1(ln p / n)
    let target_sf = -f64::exp_m1(p.ln() / n);
    poisson_quantile_by_sf(target_sf, lambda)
}

/// Mean of the max-order distribution, by direct summation.
pub fn max_order_mean(lambda: f64, n: u64) -> f64 {
    let hi = (lambda + 20.0 * lambda.sqrt() + 80.0).ceil() as i64;
    let mut mean = 0.0;
    let mut prev = 0.0;
    for x in 0..=hi {
        let cdf_n = max_order_cdf(x, lambda, n);
        mean += x as f64 * (cdf_n - prev);
        prev = cdf_n;
    }
    mean
}

// ---------------------------------------------------------------------------
// Success-probability model
// ---------------------------------------------------------------------------

/// Parameters of the Eq.-style peak-finding probability model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuccessModelParams {
    /// Number of bins is N = 2^q.
    pub q: u32,
    /// Bin width in seconds.
    pub delta_t: f64,
    /// Singles rates in counts/s.
    pub s1: f64,
    pub s2: f64,
    /// Total excess coincidence rate in counts/s (integrated over all tau).
    pub c: f64,
    /// Source coherence time in seconds; when set, the per-bin excess rate
    /// is c_e = c·(1 − exp(−δt/τ_c)). When `None`, `c` is taken as c_e
    /// directly.
    pub tau_c: Option<f64>,
    /// Bin overlap in [0.5, 1].
    pub nu: f64,
    /// Residual fractional frequency offset.
    pub du: f64,
}

impl SuccessModelParams {
    pub fn n_bins(&self) -> u64 {
        1u64 << self.q
    }

    /// Acquisition span T = N·δt in seconds.
    pub fn total_time(&self) -> f64 {
        self.n_bins() as f64 * self.delta_t
    }

    /// Accidental mean per bin, λ = s1·s2·δt·T.
    pub fn lambda_accidental(&self) -> f64 {
        self.s1 * self.s2 * self.delta_t * self.total_time()
    }

    /// Drift penalty ξ = max{1, N·Δu}.
    pub fn xi(&self) -> f64 {
        (self.n_bins() as f64 * self.du.abs()).max(1.0)
    }

    /// Per-bin excess rate after the centered-bin capture factor.
    pub fn c_e(&self) -> f64 {
        match self.tau_c {
            Some(tc) => self.c * (1.0 - (-self.delta_t / tc).exp()),
            None => self.c,
        }
    }

    /// Mean excess count in the signal bin, ν·c_e·T/ξ.
    pub fn signal_shift(&self) -> f64 {
        self.nu * self.c_e() * self.total_time() / self.xi()
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.q == 0 || self.q > 30 {
            return Err(StatsError::InvalidParameter(format!(
                "q = {} out of range [1, 30]",
                self.q
            )));
        }
        if !(0.5..=1.0).contains(&self.nu) {
            return Err(StatsError::InvalidParameter(format!(
                "nu = {} outside [0.5, 1]",
                self.nu
            )));
        }
        if self.delta_t <= 0.0 || self.s1 < 0.0 || self.s2 < 0.0 || self.c < 0.0 {
            return Err(StatsError::InvalidParameter(
                "delta_t must be positive and rates non-negative".into(),
            ));
        }
        if let Some(tc) = self.tau_c {
            if tc <= 0.0 {
                return Err(StatsError::InvalidParameter("tau_c must be positive".into()));
            }
        }
        let lambda = self.lambda_accidental();
        if !(lambda.is_finite()) || lambda > LAMBDA_MAX {
            return Err(StatsError::RangeError(lambda));
        }
        Ok(())
    }
}

/// P(signal bin strictly exceeds the max of n−1 noise bins), with the signal
/// bin Poisson(λ_a + shift) and noise bins Poisson(λ_a).
pub fn success_probability_for(lambda_a: f64, shift: f64, n: u64) -> Result<f64, StatsError> {
    if lambda_a < 0.0 || shift < 0.0 {
        return Err(StatsError::InvalidParameter(
            "negative rate in probability model".into(),
        ));
    }
    let lambda_s = lambda_a + shift;
    if lambda_s > LAMBDA_MAX {
        return Err(StatsError::RangeError(lambda_s));
    }
    let nm1 = check_n(n) - 1;
    if nm1 == 0 {
        return Ok(1.0);
    }
    if lambda_s == 0.0 {
        // Signal is always 0 and cannot strictly exceed anything.
        return Ok(0.0);
    }
    let lo = ((lambda_s - 15.0 * lambda_s.sqrt() - 30.0).floor()).max(0.0) as i64;
    let hi = (lambda_s + 15.0 * lambda_s.sqrt() + 60.0).ceil() as i64;
    // Walk the signal pmf and the noise cdf by recurrence from the window
    // start; both recurrences are monotone and stay well-conditioned.
    let mut p_sig = poisson_pmf(lo, lambda_s);
    let mut p_noise = if lambda_a > 0.0 {
        poisson_pmf(lo - 1, lambda_a)
    } else {
        0.0
    };
    let mut cdf_noise = poisson_cdf(lo - 1, lambda_a);
    let mut total = 0.0;
    for x in lo..=hi {
        total += p_sig * cdf_noise.powi(nm1);
        p_sig *= lambda_s / (x + 1) as f64;
        if lambda_a > 0.0 {
            p_noise = if x == 0 && lo == 0 {
                poisson_pmf(0, lambda_a)
            } else {
                p_noise * lambda_a / x.max(1) as f64
            };
            cdf_noise = (cdf_noise + p_noise).min(1.0);
        } else {
            cdf_noise = 1.0;
        }
    }
    Ok(total.min(1.0))
}

/// Analytic success probability for the model parameters (exact Poisson
/// noise-max statistics).
pub fn success_probability(params: &SuccessModelParams) -> Result<f64, StatsError> {
    params.validate()?;
    success_probability_for(params.lambda_accidental(), params.signal_shift(), params.n_bins())
}

/// Success probability with the noise bins replaced by the normal
/// approximation N(λ_a, √λ_a); the signal bin stays Poisson. Overestimates
/// the exact probability at small λ_a because the normal upper tail is too
/// thin.
pub fn success_probability_normal_for(
    lambda_a: f64,
    shift: f64,
    n: u64,
) -> Result<f64, StatsError> {
    if lambda_a <= 0.0 {
        return Err(StatsError::InvalidParameter(
            "normal approximation requires lambda_a > 0".into(),
        ));
    }
    let lambda_s = lambda_a + shift;
    if lambda_s > LAMBDA_MAX {
        return Err(StatsError::RangeError(lambda_s));
    }
    let nm1 = check_n(n) - 1;
    if nm1 == 0 {
        return Ok(1.0);
    }
    let sigma = lambda_a.sqrt();
    let lo = ((lambda_s - 15.0 * lambda_s.sqrt() - 30.0).floor()).max(0.0) as i64;
    let hi = (lambda_s + 15.0 * lambda_s.sqrt() + 60.0).ceil() as i64;
    let mut p_sig = poisson_pmf(lo, lambda_s);
    let mut total = 0.0;
    for x in lo..=hi {
        let z = (x as f64 - lambda_a) / sigma;
        total += p_sig * normal_cdf(z).powi(nm1);
        p_sig *= lambda_s / (x + 1) as f64;
    }
    Ok(total.min(1.0))
}

/// Normal-approximation variant of [`success_probability`].
pub fn success_probability_normal(params: &SuccessModelParams) -> Result<f64, StatsError> {
    params.validate()?;
    success_probability_normal_for(
        params.lambda_accidental(),
        params.signal_shift(),
        params.n_bins(),
    )
}

/// A Monte Carlo probability estimate with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McEstimate {
    pub probability: f64,
    pub successes: u64,
    pub trials: u64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl McEstimate {
    fn from_counts(successes: u64, trials: u64) -> McEstimate {
        let p = successes as f64 / trials as f64;
        let z = 1.959_963_984_540_054; // 95%
        let nf = trials as f64;
        let denom = 1.0 + z * z / nf;
        let center = (p + z * z / (2.0 * nf)) / denom;
        let half = z * ((p * (1.0 - p) + z * z / (4.0 * nf)) / nf).sqrt() / denom;
        McEstimate {
            probability: p,
            successes,
            trials,
            ci_low: (center - half).max(0.0),
            ci_high: (center + half).min(1.0),
        }
    }

    /// Binomial standard error of the estimate.
    pub fn sigma(&self) -> f64 {
        (self.probability * (1.0 - self.probability) / self.trials as f64)
            .sqrt()
            .max(1.0 / self.trials as f64)
    }
}

/// Monte Carlo estimate of the success probability. Each trial draws the
/// maximum of the n−1 noise bins by inverse-CDF sampling of the exact
/// max-order distribution (identical in law to drawing the bins
/// individually) plus one Poisson signal bin; success means a strict
/// excess. Deterministic per seed: trial k uses the sub-stream
/// `hash(seed, k)`, so any evaluation order gives the same estimate.
pub fn success_probability_mc(
    params: &SuccessModelParams,
    trials: u64,
    seed: u64,
) -> Result<McEstimate, StatsError> {
    params.validate()?;
    success_probability_mc_for(
        params.lambda_accidental(),
        params.signal_shift(),
        params.n_bins(),
        trials,
        seed,
    )
}

/// Lower-level Monte Carlo entry point (see [`success_probability_mc`]).
pub fn success_probability_mc_for(
    lambda_a: f64,
    shift: f64,
    n: u64,
    trials: u64,
    seed: u64,
) -> Result<McEstimate, StatsError> {
    if trials == 0 {
        return Err(StatsError::InvalidParameter("trials must be >= 1".into()));
    }
    let lambda_s = lambda_a + shift;
    if lambda_s > LAMBDA_MAX || lambda_a > LAMBDA_MAX {
        return Err(StatsError::RangeError(lambda_s.max(lambda_a)));
    }
    let nm1 = (check_n(n) - 1) as u64;

    // Tabulated max-order CDF over the support that matters (mass outside
    // is below 1e-12 per side).
    let table = if nm1 > 0 && lambda_a > 0.0 {
        let nm1f = nm1 as f64;
        let lo_sf = -f64::exp_m1((1e-12f64).ln() / nm1f);
        let x_lo = if lo_sf >= 1.0 {
            0
        } else {
            poisson_quantile_by_sf(lo_sf, lambda_a)
        };
        let hi_sf = -f64::exp_m1((1.0 - 1e-12f64).ln() / nm1f);
        let x_hi = poisson_quantile_by_sf(hi_sf, lambda_a);
        let mut cdf = poisson_cdf(x_lo, lambda_a);
        let mut pmf = poisson_pmf(x_lo, lambda_a);
        let mut tab = Vec::with_capacity((x_hi - x_lo + 1) as usize);
        tab.push(cdf.powi(nm1 as i32));
        for x in (x_lo + 1)..=x_hi {
            pmf *= lambda_a / x as f64;
            cdf = (cdf + pmf).min(1.0);
            tab.push(cdf.powi(nm1 as i32));
        }
        Some((x_lo, tab))
    } else {
        None
    };

    let signal_dist = if lambda_s > 0.0 {
        Some(Poisson::new(lambda_s).map_err(|e| StatsError::InvalidParameter(e.to_string()))?)
    } else {
        None
    };

    let mut successes = 0u64;
    for trial in 0..trials {
        let mut rng = sub_rng(seed, trial);
        let noise_max = match &table {
            None => {
                if nm1 == 0 {
                    -1.0
                } else {
                    0.0 // lambda_a == 0: every noise bin is empty
                }
            }
            Some((x_lo, tab)) => {
                let u: f64 = rng.random();
                let idx = tab.partition_point(|c| *c < u);
                (*x_lo + idx.min(tab.len() - 1) as i64) as f64
            }
        };
        let signal = match &signal_dist {
            Some(d) => d.sample(&mut rng),
            None => 0.0,
        };
        if signal > noise_max {
            successes += 1;
        }
    }
    Ok(McEstimate::from_counts(successes, trials))
}

// ---------------------------------------------------------------------------
// Legacy significance metric
// ---------------------------------------------------------------------------

/// Legacy statistical-significance metric `S = c_e·√(N/(s1·s2))`: standard
/// deviations of the coincidence peak above a single bin's accidentals.
/// Better read as a peak *misidentification* proxy — it ignores the
/// max-order growth of the noise floor.
pub fn significance(c_e: f64, n: u64, s1: f64, s2: f64) -> f64 {
    assert!(c_e >= 0.0 && s1 > 0.0 && s2 > 0.0);
    c_e * ((n as f64) / (s1 * s2)).sqrt()
}

// ---------------------------------------------------------------------------
// Surface export
// ---------------------------------------------------------------------------

/// One point of a success-probability surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub q: u32,
    pub delta_t_ps: i64,
    pub prob: f64,
    pub prob_mc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prob_normal: Option<f64>,
}

/// CSV export `q,delta_t_ps,prob,prob_mc,ci_low,ci_high[,prob_normal]`.
pub fn write_surface_csv<W: std::io::Write>(
    rows: &[SurfaceRow],
    mut w: W,
) -> std::io::Result<()> {
    let with_normal = rows.iter().any(|r| r.prob_normal.is_some());
    if with_normal {
        writeln!(w, "q,delta_t_ps,prob,prob_mc,ci_low,ci_high,prob_normal")?;
    } else {
        writeln!(w, "q,delta_t_ps,prob,prob_mc,ci_low,ci_high")?;
    }
    for r in rows {
        write!(
            w,
            "{},{},{},{},{},{}",
            r.q, r.delta_t_ps, r.prob, r.prob_mc, r.ci_low, r.ci_high
        )?;
        if with_normal {
            write!(w, ",{}", r.prob_normal.unwrap_or(f64::NAN))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // mpmath (50 dps) references.
    const PMF_GOLDENS: &[(i64, f64, f64)] = &[
        (0, 1.0, 0.3678794411714423216),
        (1, 1.0, 0.3678794411714423216),
        (10, 3.5, 0.0022955498270153578915),
        (10_000, 10_000.0, 0.0039893895589628256487),
        (9_900, 10_000.0, 0.0024278067065407016904),
        (1_000_000, 1_000_000.0, 0.0003989422471562440297),
        (998_000, 1_000_000.0, 5.3972950011367852602e-5),
        (500, 1_000.0, 4.1601554755355283914e-69),
        (2, 1e-3, 4.9950024991668749583e-7),
        (150, 100.0, 6.5111604687863426424e-7),
    ];

    #[test]
    fn pmf_matches_high_precision_reference() {
        for &(x, lambda, want) in PMF_GOLDENS {
            let got = poisson_pmf(x, lambda);
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn pmf_negative_x_is_zero() {
        assert_eq!(poisson_pmf(-1, 2.0), 0.0);
    }

    #[test]
    fn pmf_tail_normalization() {
        for &lambda in &[1.0f64, 100.0, 1e4] {
            let hi = (lambda + 20.0 * lambda.sqrt()).ceil() as i64;
            let total: f64 = (0..=hi).map(|x| poisson_pmf(x, lambda)).sum();
            assert!(total >= 1.0 - 1e-9, "lambda {lambda}: sum {total}");
        }
    }

    #[test]
    fn cdf_matches_reference() {
        let cases: &[(i64, f64, f64)] = &[
            (1, 1.0, 0.73575888234288464319),
            (0, 1.0, 0.3678794411714423216),
            (10, 1.0, 0.99999998995223362431),
            (1_000, 1_000.0, 0.50840936716850599121),
            (9_900, 10_000.0, 0.15987118224528374274),
            (1_100, 1_000.0, 0.99913235903655643791),
            (900, 1_000.0, 0.00069776732779630678213),
        ];
        for &(x, lambda, want) in cases {
            assert_relative_eq!(poisson_cdf(x, lambda), want, max_relative = 1e-12);
        }
        assert_relative_eq!(
            poisson_sf(1_100, 1_000.0),
            0.00086764096344356208518,
            max_relative = 1e-12
        );
    }

    #[test]
    fn max_order_reduces_to_pmf_for_single_bin() {
        for &(x, lambda, _) in PMF_GOLDENS.iter().filter(|(x, ..)| *x < 100_000) {
            let a = max_order_pmf(x, lambda, 1);
            let b = poisson_pmf(x, lambda);
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn max_order_small_lambda_concentrates_at_zero() {
        assert!(max_order_pmf(0, 1e-12, 1 << 10) > 1.0 - 1e-6);
    }

    #[test]
    fn max_order_two_bins_hand_enumeration() {
        // F(1|1)^2 − F(0|1)^2 = (2/e)^2 − (1/e)^2 = 3/e^2.
        assert_relative_eq!(
            max_order_pmf(1, 1.0, 2),
            0.40600584970983807568,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            max_order_pmf(7, 1.0, 1 << 10),
            0.071270065418798613885,
            max_relative = 1e-11
        );
        assert_relative_eq!(
            max_order_pmf(1_150, 1_000.0, 1 << 20),
            0.042312955612850729657,
            max_relative = 1e-10
        );
    }

    #[test]
    fn max_order_normalizes_over_support() {
        for &lambda in &[0.1f64, 1.0, 10.0, 1e3] {
            for &n in &[1u64, 1 << 10, 1 << 20] {
                let hi = (lambda + 20.0 * lambda.sqrt() + 50.0).ceil() as i64;
                let total: f64 = (0..=hi).map(|x| max_order_pmf(x, lambda, n)).sum();
                assert!(
                    (total - 1.0).abs() < 1e-9,
                    "lambda {lambda}, n {n}: sum {total}"
                );
            }
        }
    }

    #[test]
    fn max_order_mean_nondecreasing_in_n() {
        for &lambda in &[0.5, 10.0, 200.0] {
            let mut prev = 0.0;
            for &n in &[1u64, 2, 16, 1 << 10, 1 << 16, 1 << 22] {
                let mean = max_order_mean(lambda, n);
                assert!(
                    mean >= prev - 1e-9,
                    "lambda {lambda}: mean({n}) = {mean} < {prev}"
                );
                prev = mean;
            }
        }
        assert_relative_eq!(max_order_mean(1.0, 2), 1.5237776118026086987, max_relative = 1e-10);
        assert_relative_eq!(
            max_order_mean(10.0, 1 << 10),
            21.737671159406624441,
            max_relative = 1e-10
        );
    }

    #[test]
    fn normal_variant_single_bin_is_plain_density() {
        let lambda = 2e4f64;
        let x = 2e4f64 + 37.0;
        let sigma = lambda.sqrt();
        let z = (x - lambda) / sigma;
        let want = (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        assert_relative_eq!(max_order_pmf_normal(x, lambda, 1), want, max_relative = 1e-12);
    }

    #[test]
    fn normal_variant_mode_close_to_exact_at_large_lambda() {
        let lambda = 1e6f64;
        let n = 1u64 << 20;
        let lo = (lambda + 3.0 * lambda.sqrt()) as i64;
        let hi = (lambda + 8.0 * lambda.sqrt()) as i64;
        let exact_mode = (lo..=hi)
            .max_by(|a, b| {
                max_order_pmf(*a, lambda, n)
                    .partial_cmp(&max_order_pmf(*b, lambda, n))
                    .unwrap()
            })
            .unwrap();
        let normal_mode = (lo..=hi)
            .max_by(|a, b| {
                max_order_pmf_normal(*a as f64, lambda, n)
                    .partial_cmp(&max_order_pmf_normal(*b as f64, lambda, n))
                    .unwrap()
            })
            .unwrap();
        let rel = (exact_mode - normal_mode).abs() as f64 / exact_mode as f64;
        assert!(rel < 0.01, "modes {exact_mode} vs {normal_mode}");
    }

    #[test]
    fn normal_variant_mean_below_exact_at_small_lambda() {
        // Fat Poisson tail: the exact max-order mean exceeds the normal one.
        let lambda = 10.0;
        let n = 1u64 << 20;
        let exact = max_order_mean(lambda, n);
        let lo = 0.0;
        let hi = lambda + 30.0 * lambda.sqrt();
        let steps = 40_000;
        let dx = (hi - lo) / steps as f64;
        let normal_mean: f64 = (0..steps)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * dx;
                x * max_order_pmf_normal(x, lambda, n) * dx
            })
            .sum();
        assert!(
            normal_mean < exact,
            "normal mean {normal_mean} !< exact {exact}"
        );
    }

    #[test]
    fn success_probability_reference_values() {
        let cases: &[(f64, f64, u64, f64)] = &[
            (1.0, 1.0, 2, 0.60570314110766843361),
            (5.0, 10.0, 1 << 10, 0.56699037944740036164),
            (100.0, 80.0, 1 << 12, 0.99880225465937459195),
            (0.5, 0.0, 16, 0.030407324976042143787),
        ];
        for &(lambda_a, shift, n, want) in cases {
            let got = success_probability_for(lambda_a, shift, n).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-9);
        }
    }

    #[test]
    fn success_probability_exchangeability_bound_without_signal() {
        for &(q, delta_t) in &[(10u32, 1e-6), (14, 2e-7), (18, 1e-7)] {
            let params = SuccessModelParams {
                q,
                delta_t,
                s1: 1e5,
                s2: 1e5,
                c: 0.0,
                tau_c: None,
                nu: 0.5,
                du: 0.0,
            };
            let p = success_probability(&params).unwrap();
            assert!(
                p <= 1.0 / params.n_bins() as f64 + 1e-12,
                "q={q}: p={p}"
            );
        }
    }

    #[test]
    fn success_probability_separation_limit() {
        let p = success_probability_for(1.0, 1e3, 1 << 10).unwrap();
        assert!(p > 0.999, "p = {p}");
    }

    #[test]
    fn success_probability_monotone_in_signal_and_noise() {
        let n = 1u64 << 12;
        let mut prev = 0.0;
        for shift in [0.0, 5.0, 20.0, 60.0, 150.0] {
            let p = success_probability_for(50.0, shift, n).unwrap();
            assert!(p >= prev - 1e-12);
            prev = p;
        }
        let mut prev = 1.0;
        for lambda_a in [1.0, 10.0, 100.0, 1000.0] {
            let p = success_probability_for(lambda_a, 50.0, n).unwrap();
            assert!(p <= prev + 1e-12);
            prev = p;
        }
    }

    #[test]
    fn normal_model_overestimates_at_small_lambda() {
        let n = 1u64 << 16;
        for &(lambda_a, shift) in &[(10.0, 30.0), (100.0, 90.0), (900.0, 280.0)] {
            let exact = success_probability_for(lambda_a, shift, n).unwrap();
            let normal = success_probability_normal_for(lambda_a, shift, n).unwrap();
            assert!(
                normal >= exact,
                "lambda {lambda_a}: normal {normal} < exact {exact}"
            );
        }
    }

    #[test]
    fn mc_agrees_with_analytic() {
        let cases: &[(f64, f64, u64)] = &[
            (1.0, 1.0, 2),
            (5.0, 10.0, 1 << 10),
            (100.0, 80.0, 1 << 12),
            (687.0, 66.0, 1 << 20),
        ];
        for &(lambda_a, shift, n) in cases {
            let analytic = success_probability_for(lambda_a, shift, n).unwrap();
            let mc = success_probability_mc_for(lambda_a, shift, n, 100_000, 17).unwrap();
            let tol = (3.0 * mc.sigma()).max(0.02);
            assert!(
                (mc.probability - analytic).abs() <= tol,
                "lambda {lambda_a}, n {n}: mc {} vs analytic {analytic}",
                mc.probability
            );
        }
    }

    #[test]
    fn mc_no_noise_is_certain() {
        let est = success_probability_mc_for(0.0, 50.0, 1 << 10, 20_000, 3).unwrap();
        assert_eq!(est.successes, est.trials);
    }

    #[test]
    fn mc_two_bin_symmetric_case() {
        // N=2, no signal: success probability is P(X > Y) for iid Poisson.
        let want = 0.41667128368009171222; // lambda = 3, mpmath
        let est = success_probability_mc_for(3.0, 0.0, 2, 200_000, 11).unwrap();
        assert!(
            (est.probability - want).abs() < 3.0 * est.sigma(),
            "got {}",
            est.probability
        );
    }

    #[test]
    fn mc_deterministic_per_seed() {
        let a = success_probability_mc_for(5.0, 10.0, 1 << 10, 10_000, 99).unwrap();
        let b = success_probability_mc_for(5.0, 10.0, 1 << 10, 10_000, 99).unwrap();
        assert_eq!(a.successes, b.successes);
    }

    #[test]
    fn significance_reference_and_scaling() {
        assert_relative_eq!(
            significance(650.0, 1 << 20, 1e5, 1e5),
            6.656,
            max_relative = 1e-12
        );
        // Quadrupling N doubles S; no delta_t anywhere in the formula.
        let s1 = significance(650.0, 1 << 20, 1e5, 1e5);
        let s2 = significance(650.0, 1 << 22, 1e5, 1e5);
        assert_relative_eq!(s2, 2.0 * s1, max_relative = 1e-12);
    }

    #[test]
    fn max_order_quantile_brackets_cdf() {
        for &(lambda, n) in &[(1.0, 1u64 << 10), (100.0, 1 << 20), (1e4, 1 << 12)] {
            for &p in &[0.001, 0.5, 0.999] {
                let x = max_order_quantile(p, lambda, n);
                assert!(max_order_cdf(x, lambda, n) >= p);
                if x > 0 {
                    assert!(max_order_cdf(x - 1, lambda, n) < p);
                }
            }
        }
    }

    #[test]
    fn surface_csv_schema() {
        let rows = vec![SurfaceRow {
            q: 20,
            delta_t_ps: 256_000,
            prob: 0.5,
            prob_mc: 0.51,
            ci_low: 0.50,
            ci_high: 0.52,
            prob_normal: None,
        }];
        let mut buf = Vec::new();
        write_surface_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("q,delta_t_ps,prob,prob_mc,ci_low,ci_high\n"));
        assert!(text.contains("20,256000,"));
    }
}
