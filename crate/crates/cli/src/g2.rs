//! `wcps g2`: second-order coherence histogram and bunching-model fit from
//! two timestamp files.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use wcps_core::correlation::{fit_g2, CorrelationError, CorrelationHistogram, GridParams};
use wcps_core::timetag::TimeTick;

use crate::output::{load_config_file, write_csv_with_config, write_json_with_config, CliError};
use crate::units;
use crate::util::read_stream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct G2Config {
    pub bin: TimeTick,
    /// Histogram covers lags in ±half_span (rounded up to 2^q bins).
    pub half_span: TimeTick,
}

impl Default for G2Config {
    fn default() -> Self {
        G2Config {
            bin: TimeTick::from_ns(32),
            half_span: TimeTick::from_ns(2048),
        }
    }
}

#[derive(Debug, Args)]
pub struct G2Args {
    pub file_a: PathBuf,
    pub file_b: PathBuf,
    /// Histogram CSV output (lag_ps,counts,g2,g2_err).
    #[arg(long)]
    pub out: PathBuf,
    /// Fit parameters JSON output.
    #[arg(long)]
    pub fit_out: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = units::parse_ticks)]
    pub bin: Option<TimeTick>,
    #[arg(long, value_parser = units::parse_ticks)]
    pub half_span: Option<TimeTick>,
}

impl G2Args {
    fn resolve(&self) -> Result<G2Config, CliError> {
        let mut cfg = G2Config::default();
        if let Some(name) = &self.preset {
            cfg = match name.as_str() {
                "paper-fig1" => G2Config::default(),
                other => {
                    return Err(CliError::new("parse", format!("unknown preset {other:?}")))
                }
            };
        }
        if let Some(path) = &self.config {
            cfg = load_config_file(path)?;
        }
        if let Some(v) = self.bin {
            cfg.bin = v;
        }
        if let Some(v) = self.half_span {
            cfg.half_span = v;
        }
        Ok(cfg)
    }
}

/// Smallest power-of-two bin count covering ±half_span.
pub fn grid_for(cfg: &G2Config) -> Result<GridParams, CliError> {
    if cfg.bin.0 < 1 {
        return Err(CliError::new("invalid-parameter", "bin must be >= 1 ps"));
    }
    let bins_needed = (2 * cfg.half_span.0).div_ceil(cfg.bin.0).max(2) as u64;
    let q = 64 - (bins_needed - 1).leading_zeros();
    let n = 1i64 << q;
    let origin = TimeTick(-(n / 2) * cfg.bin.0);
    GridParams::new(q, cfg.bin, origin)
        .map_err(|e| CliError::new("invalid-parameter", e.to_string()))
}

pub fn run(args: &G2Args) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let a = read_stream(&args.file_a)?;
    let b = read_stream(&args.file_b)?;
    let grid = grid_for(&cfg)?;

    let mut hist = CorrelationHistogram::from_pairs(&a, &b, &grid)
        .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
    let t_acq = a
        .duration
        .as_secs_f64()
        .max(b.duration.as_secs_f64())
        .max(f64::MIN_POSITIVE);
    hist.normalize(a.observed_rate(), b.observed_rate(), t_acq)
        .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
    write_csv_with_config(&args.out, &cfg, |w| hist.write_csv(w))?;

    if let Some(fit_path) = &args.fit_out {
        match fit_g2(&hist) {
            Ok(fit) => {
                write_json_with_config(
                    fit_path,
                    &cfg,
                    serde_json::json!({ "fit": fit, "t_acq_s": t_acq }),
                )?;
                log::info!(
                    "g2(0) = {:.3} ± {:.3}, tau_c = {:.1} ± {:.1} ns{}",
                    fit.g2_zero,
                    fit.amplitude_err,
                    fit.tau_c_ps / 1e3,
                    fit.tau_c_err_ps / 1e3,
                    if fit.degenerate { " (degenerate)" } else { "" }
                );
            }
            Err(e @ CorrelationError::FitDidNotConverge { .. }) => {
                return Err(CliError::new("fit", e.to_string()).with_exit(2));
            }
            Err(e) => return Err(CliError::new("invalid-parameter", e.to_string())),
        }
    }
    Ok(())
}
