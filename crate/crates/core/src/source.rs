//! Statistical simulator for a bunched-light coincidence experiment.
//!
//! Rather than modeling the optics, channel 1 is a homogeneous Poisson
//! process and each of its events spawns a channel-2 partner with
//! probability p at a two-sided exponential delay, so the cross-correlation
//! carries exactly the configured `1 + (g2_peak−1)·exp(−2|τ|/τ_c)` signature
//! in expectation. Dark counts, Gaussian detector jitter, and detector dead
//! time are applied afterwards, in that order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::sub_rng;
use crate::timetag::{EventStream, TimeTick, TICKS_PER_SEC};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "unphysical parameter combination: required pair probability p = {p:.3} exceeds 1 \
         (need (g2_peak−1)·s2·τ_c ≤ 1)"
    )]
    PairProbabilityTooLarge { p: f64 },
    #[error(
        "unphysical parameter combination: correlated rate {corr:.0}/s exceeds the requested \
         channel-2 budget {budget:.0}/s"
    )]
    ChannelBudgetExceeded { corr: f64, budget: f64 },
}

/// Source and detector parameters for [`generate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceParams {
    /// g²(0) of the source, in (1, 1.5].
    pub g2_peak: f64,
    /// Coherence time.
    pub tau_c: TimeTick,
    /// Detected singles rates including darks, counts/s.
    pub s1: f64,
    pub s2: f64,
    /// Dark-count rates, counts/s.
    pub dark1: f64,
    pub dark2: f64,
    /// Detector timing jitter (1σ).
    pub jitter_sigma: TimeTick,
    /// Per-detector dead time; 0 disables.
    pub dead_time: TimeTick,
    /// Acquisition length in seconds.
    pub duration: f64,
    pub seed: u64,
}

impl Default for SourceParams {
    fn default() -> Self {
        // The desk-scale defaults mirror the experiment: g2(0)=1.42,
        // tau_c=180 ns, singles 192k/182k counts/s, 20 ps tagger jitter.
        SourceParams {
            g2_peak: 1.42,
            tau_c: TimeTick::from_ns(180),
            s1: 192_000.0,
            s2: 182_000.0,
            dark1: 0.0,
            dark2: 0.0,
            jitter_sigma: TimeTick::from_ps(20),
            dead_time: TimeTick::ZERO,
            duration: 1.0,
            seed: 0,
        }
    }
}

impl SourceParams {
    /// Total excess coincidence rate c = (g2_peak − 1)·s1·s2·τ_c, counts/s.
    pub fn excess_rate(&self) -> f64 {
        (self.g2_peak - 1.0) * self.s1 * self.s2 * self.tau_c.as_secs_f64()
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        if !(self.g2_peak > 1.0 && self.g2_peak <= 1.5) {
            return Err(SourceError::InvalidParameter(format!(
                "g2_peak = {} outside (1, 1.5]",
                self.g2_peak
            )));
        }
        if self.tau_c.0 <= 0 {
            return Err(SourceError::InvalidParameter("tau_c must be positive".into()));
        }
        if self.s1 < 0.0 || self.s2 < 0.0 || self.dark1 < 0.0 || self.dark2 < 0.0 {
            return Err(SourceError::InvalidParameter("rates must be non-negative".into()));
        }
        if self.dark1 > self.s1 || self.dark2 > self.s2 {
            return Err(SourceError::InvalidParameter(
                "dark rate exceeds the channel singles rate".into(),
            ));
        }
        if self.duration < 0.0 {
            return Err(SourceError::InvalidParameter("duration must be >= 0".into()));
        }
        if self.jitter_sigma.0 < 0 || self.dead_time.0 < 0 {
            return Err(SourceError::InvalidParameter(
                "jitter and dead time must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn push_poisson_events(ticks: &mut Vec<i64>, rate: f64, duration_s: f64, rng: &mut ChaCha8Rng) {
    if rate <= 0.0 || duration_s <= 0.0 {
        return;
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = 0.0_f64;
    loop {
        t += exp.sample(rng);
        if t >= duration_s {
            return;
        }
        ticks.push((t * TICKS_PER_SEC as f64).round() as i64);
    }
}

fn finish_channel(
    mut ticks: Vec<i64>,
    params: &SourceParams,
    channel: u8,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> EventStream {
    let duration_ticks = (params.duration * TICKS_PER_SEC as f64).round() as i64;
    if params.jitter_sigma.0 > 0 {
        let jitter = Normal::new(0.0, params.jitter_sigma.0 as f64).expect("jitter sigma");
        for t in ticks.iter_mut() {
            *t += jitter.sample(rng).round() as i64;
        }
    }
    ticks.sort_unstable();
    ticks.retain(|t| (0..duration_ticks).contains(t));
    if params.dead_time.0 > 0 {
        let dead = params.dead_time.0.max(1);
        let mut last = i64::MIN / 2;
        ticks.retain(|&t| {
            if t - last >= dead {
                last = t;
                true
            } else {
                false
            }
        });
    }
    EventStream::new(
        channel,
        ticks.into_iter().map(TimeTick).collect(),
        TimeTick(duration_ticks),
        rate,
    )
}

/// Generates the two detector streams. Deterministic per seed; the two
/// channels use independent sub-streams derived as `hash(seed, channel)`.
pub fn generate(params: &SourceParams) -> Result<(EventStream, EventStream), SourceError> {
    params.validate()?;
    let sig1 = params.s1 - params.dark1;
    // Excess coincidence density must integrate to c = (g2−1)·s1·s2·τ_c,
    // carried by pairs injected at rate p per channel-1 signal event.
    let c = params.excess_rate();
    let p = if sig1 > 0.0 { c / sig1 } else { 0.0 };
    if p > 1.0 {
        return Err(SourceError::PairProbabilityTooLarge { p });
    }
    let bg2 = params.s2 - params.dark2 - c;
    if bg2 < 0.0 {
        return Err(SourceError::ChannelBudgetExceeded {
            corr: c,
            budget: params.s2 - params.dark2,
        });
    }

    let mut rng1 = sub_rng(params.seed, 1);
    let mut rng2 = sub_rng(params.seed, 2);

    let mut ch1: Vec<i64> = Vec::new();
    push_poisson_events(&mut ch1, sig1, params.duration, &mut rng1);

    // Channel-2 partners at a two-sided exponential delay with density
    // (1/τ_c)·exp(−2|τ|/τ_c): scale τ_c/2 per side.
    let mut ch2: Vec<i64> = Vec::new();
    if p > 0.0 && !ch1.is_empty() {
        let delay = Exp::new(2.0 / params.tau_c.0 as f64).expect("tau_c positive");
        for &t in &ch1 {
            if rng2.random::<f64>() < p {
                let mag = delay.sample(&mut rng2);
                let sign = if rng2.random::<bool>() { 1.0 } else { -1.0 };
                ch2.push(t + (sign * mag).round() as i64);
            }
        }
    }
    push_poisson_events(&mut ch2, bg2, params.duration, &mut rng2);
    push_poisson_events(&mut ch1, params.dark1, params.duration, &mut rng1);
    push_poisson_events(&mut ch2, params.dark2, params.duration, &mut rng2);

    let a = finish_channel(ch1, params, 0, params.s1, &mut rng1);
    let b = finish_channel(ch2, params, 1, params.s2, &mut rng2);
    Ok((a, b))
}

/// Bernoulli thinning with survival probability `10^(loss_db/10)`.
/// `loss_db` must be ≤ 0 (an attenuation).
pub fn attenuate(stream: &EventStream, loss_db: f64, seed: u64) -> Result<EventStream, SourceError> {
    if loss_db > 0.0 {
        return Err(SourceError::InvalidParameter(format!(
            "loss must be expressed in dB <= 0, got {loss_db}"
        )));
    }
    if loss_db == 0.0 {
        return Ok(stream.clone());
    }
    let survival = 10f64.powf(loss_db / 10.0);
    let mut rng = sub_rng(seed, 0x6174_7465);
    let ticks: Vec<TimeTick> = stream
        .ticks
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < survival)
        .collect();
    Ok(EventStream::new(
        stream.channel,
        ticks,
        stream.duration,
        stream.nominal_rate * survival,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{fit_g2, CorrelationHistogram, GridParams};
    use crate::timetag::coincidence_pairs;

    fn g2_fit_of(a: &EventStream, b: &EventStream, duration: f64) -> crate::correlation::G2Fit {
        let dt = TimeTick::from_ns(32);
        let grid = GridParams::new(7, dt, TimeTick(-64 * dt.0)).unwrap();
        let mut hist = CorrelationHistogram::from_pairs(a, b, &grid).unwrap();
        hist.normalize(a.observed_rate(), b.observed_rate(), duration)
            .unwrap();
        fit_g2(&hist).unwrap()
    }

    #[test]
    fn singles_rates_match_request() {
        let params = SourceParams {
            duration: 5.0,
            seed: 42,
            ..SourceParams::default()
        };
        let (a, b) = generate(&params).unwrap();
        for (s, want) in [(&a, params.s1), (&b, params.s2)] {
            let n = s.len() as f64;
            let expect = want * params.duration;
            assert!(
                (n - expect).abs() < 3.0 * expect.sqrt(),
                "channel {}: {} vs {}",
                s.channel,
                n,
                expect
            );
        }
    }

    #[test]
    fn uncorrelated_limit_is_flat() {
        // g2_peak -> 1 means p -> 0; the normalized histogram stays at 1.
        let params = SourceParams {
            g2_peak: 1.0 + 1e-9,
            duration: 4.0,
            seed: 7,
            ..SourceParams::default()
        };
        let (a, b) = generate(&params).unwrap();
        let fit = g2_fit_of(&a, &b, params.duration);
        assert!(
            fit.degenerate || fit.amplitude.abs() < 0.02,
            "expected flat g2, got {fit:?}"
        );
    }

    #[test]
    fn paper_scale_source_reproduces_g2() {
        let params = SourceParams {
            duration: 10.0,
            seed: 1,
            ..SourceParams::default()
        };
        let (a, b) = generate(&params).unwrap();
        let fit = g2_fit_of(&a, &b, params.duration);
        assert!(!fit.degenerate);
        assert!(
            (fit.g2_zero - 1.42).abs() < 0.05,
            "g2(0) = {} != 1.42 ± 0.05",
            fit.g2_zero
        );
        assert!(
            (fit.tau_c_ps - 180_000.0).abs() < 15_000.0,
            "tau_c = {} ps",
            fit.tau_c_ps
        );
    }

    #[test]
    fn excess_coincidence_rate_matches_model() {
        // g2 = 1.5, s1 = s2 = 100 kcps, tau_c = 180 ns -> c = 900/s.
        let params = SourceParams {
            g2_peak: 1.5,
            s1: 100_000.0,
            s2: 100_000.0,
            duration: 20.0,
            seed: 5,
            ..SourceParams::default()
        };
        let c_model = params.excess_rate();
        assert!((c_model - 900.0).abs() < 1e-9);
        let (a, b) = generate(&params).unwrap();
        // Brute-force count of every pair with |tau| <= 5 tau_c, then
        // subtract the accidental expectation.
        let grid = GridParams::new(1, TimeTick(5 * params.tau_c.0), TimeTick(-5 * params.tau_c.0))
            .unwrap();
        let hist = CorrelationHistogram::from_pairs(&a, &b, &grid).unwrap();
        let got: u64 = hist.counts.iter().sum();
        let accidental = a.observed_rate() * b.observed_rate()
            * grid.span().as_secs_f64()
            * params.duration;
        // The +/- 5 tau_c window captures 1 − e^{−10} of the excess.
        let expect = c_model * params.duration * (1.0 - (-10.0f64).exp()) + accidental;
        let sigma = expect.sqrt();
        assert!(
            (got as f64 - expect).abs() < 3.0 * sigma,
            "pairs {got} vs expected {expect}"
        );
    }

    #[test]
    fn rejects_unphysical_pair_probability() {
        let params = SourceParams {
            g2_peak: 1.5,
            s2: 2.0e7,
            s1: 1_000.0,
            ..SourceParams::default()
        };
        // p = 0.5 * 1000 * 2e7 * 180e-9 / 1000 = 1800 > 1... via budget or p.
        let err = generate(&params).unwrap_err();
        match err {
            SourceError::PairProbabilityTooLarge { .. }
            | SourceError::ChannelBudgetExceeded { .. } => {}
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn dead_time_enforces_spacing() {
        let params = SourceParams {
            dead_time: TimeTick::from_ns(50),
            duration: 1.0,
            seed: 3,
            ..SourceParams::default()
        };
        let (a, _) = generate(&params).unwrap();
        assert!(a
            .ticks
            .windows(2)
            .all(|w| w[1].0 - w[0].0 >= params.dead_time.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let params = SourceParams {
            duration: 1.0,
            seed: 9,
            ..SourceParams::default()
        };
        let (a1, b1) = generate(&params).unwrap();
        let (a2, b2) = generate(&params).unwrap();
        assert_eq!(a1.ticks, a2.ticks);
        assert_eq!(b1.ticks, b2.ticks);
    }

    #[test]
    fn attenuate_identity_and_counting() {
        let params = SourceParams {
            duration: 5.0,
            seed: 13,
            ..SourceParams::default()
        };
        let (a, _) = generate(&params).unwrap();
        let same = attenuate(&a, 0.0, 1).unwrap();
        assert_eq!(same.ticks, a.ticks);
        assert!(attenuate(&a, 1.0, 1).is_err());

        let thinned = attenuate(&a, -3.0, 1).unwrap();
        let survival = 10f64.powf(-0.3);
        let expect = a.len() as f64 * survival;
        let sigma = (a.len() as f64 * survival * (1.0 - survival)).sqrt();
        assert!(
            (thinned.len() as f64 - expect).abs() < 3.0 * sigma,
            "{} vs {expect}",
            thinned.len()
        );
    }

    #[test]
    fn attenuation_preserves_bunching() {
        let params = SourceParams {
            s1: 500_000.0,
            s2: 500_000.0,
            duration: 10.0,
            seed: 21,
            ..SourceParams::default()
        };
        let (a, b) = generate(&params).unwrap();
        let a10 = attenuate(&a, -5.0, 101).unwrap();
        let b10 = attenuate(&b, -5.0, 102).unwrap();
        let fit = g2_fit_of(&a10, &b10, params.duration);
        assert!(!fit.degenerate);
        assert!(
            (fit.g2_zero - params.g2_peak).abs() < 0.06,
            "thinned g2(0) = {}",
            fit.g2_zero
        );
    }

    #[test]
    fn attenuation_commutes_with_rate_scaling() {
        // -3 dB thinning of both channels matches generation at the thinned
        // rates, statistically: compare total pair counts in a window.
        let base = SourceParams {
            s1: 200_000.0,
            s2: 200_000.0,
            duration: 5.0,
            seed: 33,
            ..SourceParams::default()
        };
        let survival = 10f64.powf(-3.0 / 10.0);
        let (a, b) = generate(&base).unwrap();
        let a3 = attenuate(&a, -3.0, 201).unwrap();
        let b3 = attenuate(&b, -3.0, 202).unwrap();
        let direct = SourceParams {
            s1: base.s1 * survival,
            s2: base.s2 * survival,
            seed: 34,
            ..base.clone()
        };
        let (ad, bd) = generate(&direct).unwrap();
        let w = TimeTick::from_ns(512);
        let thinned_pairs =
            coincidence_pairs(&a3, &b3, TimeTick::ZERO, w).unwrap().len() as f64;
        let direct_pairs =
            coincidence_pairs(&ad, &bd, TimeTick::ZERO, w).unwrap().len() as f64;
        let sigma = (thinned_pairs + direct_pairs).sqrt();
        assert!(
            (thinned_pairs - direct_pairs).abs() < 4.0 * sigma,
            "thinned {thinned_pairs} vs direct {direct_pairs}"
        );
    }
}
