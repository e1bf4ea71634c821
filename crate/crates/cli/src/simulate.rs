//! `wcps simulate`: generate two detector timestamp files plus a ground-truth
//! sidecar.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use wcps_core::io::write_timetags;
use wcps_core::rng::derive_seed;
use wcps_core::source::{attenuate, generate, SourceParams};
use wcps_core::timetag::{apply_clock, ClockModel, EventStream, TimeTick};

use crate::output::{io_err, load_config_file, write_json_with_config, CliError};
use crate::units;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub duration_s: f64,
    pub g2_peak: f64,
    pub tau_c: TimeTick,
    pub s1: f64,
    pub s2: f64,
    pub dark1: f64,
    pub dark2: f64,
    pub jitter_sigma: TimeTick,
    pub dead_time: TimeTick,
    /// Channel attenuations in dB (≤ 0), applied before the clocks.
    pub loss_a_db: f64,
    pub loss_b_db: f64,
    /// Initial offset τ(0) = t_a − t_b.
    pub offset: TimeTick,
    /// Frequency offset du = f_a/f_b − 1, realized on party a's clock.
    pub du: f64,
    /// Linear drift of du per second.
    pub drift: f64,
    /// Random-walk std of du per second, clamped to ±rw_bound.
    pub rw_step: f64,
    pub rw_bound: f64,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            duration_s: 60.0,
            g2_peak: 1.42,
            tau_c: TimeTick::from_ns(180),
            s1: 192_000.0,
            s2: 182_000.0,
            dark1: 0.0,
            dark2: 0.0,
            jitter_sigma: TimeTick::from_ps(20),
            dead_time: TimeTick::ZERO,
            loss_a_db: 0.0,
            loss_b_db: 0.0,
            offset: TimeTick::ZERO,
            du: 0.0,
            drift: 0.0,
            rw_step: 0.0,
            rw_bound: 35e-9,
            seed: 0,
        }
    }
}

pub fn preset(name: &str) -> Option<SimulateConfig> {
    match name {
        // Source characterization run: 10 s at the measured source and
        // detector parameters.
        "paper-fig1" => Some(SimulateConfig {
            duration_s: 10.0,
            ..SimulateConfig::default()
        }),
        // Tracking characterization: symmetric 200 kcps singles and a
        // constant 10 ppb frequency offset.
        "paper-fig4" => Some(SimulateConfig {
            duration_s: 60.0,
            s1: 200_000.0,
            s2: 200_000.0,
            du: 10e-9,
            ..SimulateConfig::default()
        }),
        _ => None,
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output timestamp file for party a.
    #[arg(long)]
    pub out_a: PathBuf,
    /// Output timestamp file for party b.
    #[arg(long)]
    pub out_b: PathBuf,
    /// Ground-truth JSON sidecar (true tau(t) and du(t)).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Named parameter preset (paper-fig1, paper-fig4).
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON config from a previous run; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = units::parse_seconds)]
    pub duration: Option<f64>,
    /// Source g²(0), in (1, 1.5].
    #[arg(long)]
    pub g2: Option<f64>,
    #[arg(long, value_parser = units::parse_ticks)]
    pub tau_c: Option<TimeTick>,
    /// Detected singles rates, counts/s.
    #[arg(long)]
    pub s1: Option<f64>,
    #[arg(long)]
    pub s2: Option<f64>,
    #[arg(long)]
    pub dark1: Option<f64>,
    #[arg(long)]
    pub dark2: Option<f64>,
    #[arg(long, value_parser = units::parse_ticks)]
    pub jitter: Option<TimeTick>,
    #[arg(long, value_parser = units::parse_ticks)]
    pub dead_time: Option<TimeTick>,
    /// Channel attenuations in dB (≤ 0).
    #[arg(long, value_parser = units::parse_db)]
    pub loss_a: Option<f64>,
    #[arg(long, value_parser = units::parse_db)]
    pub loss_b: Option<f64>,
    /// Initial timing offset t_a − t_b.
    #[arg(long, value_parser = units::parse_ticks)]
    pub offset: Option<TimeTick>,
    /// Frequency offset f_a/f_b − 1 (e.g. 4ppm).
    #[arg(long, value_parser = units::parse_ratio)]
    pub du: Option<f64>,
    /// Linear drift of du per second (e.g. 0.1ppb).
    #[arg(long, value_parser = units::parse_ratio)]
    pub drift: Option<f64>,
    /// Random-walk std of du per second (e.g. 3.3ppb).
    #[arg(long, value_parser = units::parse_ratio)]
    pub rw_step: Option<f64>,
    #[arg(long, value_parser = units::parse_ratio)]
    pub rw_bound: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SimulateArgs {
    pub fn resolve(&self) -> Result<SimulateConfig, CliError> {
        let mut cfg = SimulateConfig::default();
        if let Some(name) = &self.preset {
            cfg = preset(name)
                .ok_or_else(|| CliError::new("parse", format!("unknown preset {name:?}")))?;
        }
        if let Some(path) = &self.config {
            cfg = load_config_file(path)?;
        }
        macro_rules! take {
            ($field:ident, $arg:ident) => {
                if let Some(v) = self.$arg {
                    cfg.$field = v;
                }
            };
        }
        take!(duration_s, duration);
        take!(g2_peak, g2);
        take!(tau_c, tau_c);
        take!(s1, s1);
        take!(s2, s2);
        take!(dark1, dark1);
        take!(dark2, dark2);
        take!(jitter_sigma, jitter);
        take!(dead_time, dead_time);
        take!(loss_a_db, loss_a);
        take!(loss_b_db, loss_b);
        take!(offset, offset);
        take!(du, du);
        take!(drift, drift);
        take!(rw_step, rw_step);
        take!(rw_bound, rw_bound);
        take!(seed, seed);
        Ok(cfg)
    }
}

/// Sample step of the ground-truth sidecar arrays.
pub const TRUTH_STEP_S: f64 = 0.25;

pub struct SimOutput {
    pub a: EventStream,
    pub b: EventStream,
    pub clock_a: ClockModel,
}

/// Runs the full simulation pipeline: source → attenuation → party-a clock.
pub fn run_simulation(cfg: &SimulateConfig) -> Result<SimOutput, CliError> {
    let params = SourceParams {
        g2_peak: cfg.g2_peak,
        tau_c: cfg.tau_c,
        s1: cfg.s1,
        s2: cfg.s2,
        dark1: cfg.dark1,
        dark2: cfg.dark2,
        jitter_sigma: cfg.jitter_sigma,
        dead_time: cfg.dead_time,
        duration: cfg.duration_s,
        seed: cfg.seed,
    };
    let (a0, b0) = generate(&params)
        .map_err(|e| CliError::new("unphysical", e.to_string()))?;
    let a1 = attenuate(&a0, cfg.loss_a_db, derive_seed(cfg.seed, 11))
        .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
    let b1 = attenuate(&b0, cfg.loss_b_db, derive_seed(cfg.seed, 12))
        .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
    let clock_a = ClockModel {
        offset: cfg.offset,
        du0: cfg.du,
        drift_rate: cfg.drift,
        rw_step: cfg.rw_step,
        rw_bound: cfg.rw_bound,
        seed: derive_seed(cfg.seed, 21),
    };
    let a = apply_clock(&a1, &clock_a)
        .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
    Ok(SimOutput { a, b: b1, clock_a })
}

/// Ground-truth samples for the sidecar: raw offset `t_a − t_b` and du at a
/// fixed cadence.
pub fn truth_tables(
    clock_a: &ClockModel,
    duration_s: f64,
) -> Result<(Vec<i64>, Vec<f64>), CliError> {
    let span = TimeTick::from_secs_f64(duration_s.max(TRUTH_STEP_S));
    let real = clock_a
        .realize(span)
        .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
    let steps = (duration_s / TRUTH_STEP_S).ceil() as usize + 1;
    let mut tau = Vec::with_capacity(steps);
    let mut du = Vec::with_capacity(steps);
    for k in 0..steps {
        let t_s = k as f64 * TRUTH_STEP_S;
        let t = TimeTick::from_secs_f64(t_s);
        tau.push((real.transform(t) - t).0);
        du.push(real.du_at(t_s));
    }
    Ok((tau, du))
}

pub fn run(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let out = run_simulation(&cfg)?;

    for (path, stream) in [(&args.out_a, &out.a), (&args.out_b, &out.b)] {
        let file = File::create(path).map_err(|e| io_err(&format!("create {path:?}"), e))?;
        write_timetags(stream, BufWriter::new(file))
            .map_err(|e| CliError::new("io", format!("write {path:?}: {e}")))?;
    }

    if let Some(sidecar) = &args.sidecar {
        let (tau_true_ps, du_true) = truth_tables(&out.clock_a, cfg.duration_s)?;
        write_json_with_config(
            sidecar,
            &cfg,
            serde_json::json!({
                "kind": "wcps-truth",
                "sample_step_s": TRUTH_STEP_S,
                "tau_true_ps": tau_true_ps,
                "du_true": du_true,
                "counts": { "a": out.a.len(), "b": out.b.len() },
            }),
        )?;
    }
    log::info!(
        "simulated {:.3} s: {} + {} events",
        cfg.duration_s,
        out.a.len(),
        out.b.len()
    );
    Ok(())
}
