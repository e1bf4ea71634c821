//! `wcps find`: initial timing/frequency offset acquisition from two
//! timestamp files.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use wcps_core::peakfind::{find_offset, FindConfig, PeakFindError, RefineConfig, SweepConfig};
use wcps_core::timetag::TimeTick;

use crate::output::{load_config_file, write_json_with_config, CliError};
use crate::units;
use crate::util::read_stream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FindCliConfig {
    pub q: u32,
    pub coarse_bin: TimeTick,
    pub target_bin: TimeTick,
    pub sweep_range: f64,
    pub sweep_step: f64,
    pub alpha: f64,
    pub full_scan: bool,
    /// Bound on the unknown |tau|; pads slicing windows.
    pub max_tau: Option<TimeTick>,
}

impl Default for FindCliConfig {
    fn default() -> Self {
        FindCliConfig {
            q: 20,
            coarse_bin: TimeTick::from_ns(1024),
            target_bin: TimeTick::from_ns(256),
            sweep_range: 10e-6,
            sweep_step: 100e-9,
            alpha: 1e-3,
            full_scan: false,
            max_tau: None,
        }
    }
}

impl FindCliConfig {
    pub fn to_core(&self) -> FindConfig {
        FindConfig {
            q: self.q,
            coarse_delta_t: self.coarse_bin,
            sweep: SweepConfig {
                full_scan: self.full_scan,
                alpha: self.alpha,
                max_tau: self.max_tau,
                ..SweepConfig::symmetric(self.sweep_range, self.sweep_step)
            },
            refine: RefineConfig {
                target_delta_t: self.target_bin,
                alpha: self.alpha,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct FindArgs {
    pub file_a: PathBuf,
    pub file_b: PathBuf,
    /// Result JSON output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Coarse grid exponent (N = 2^q bins).
    #[arg(long)]
    pub q: Option<u32>,
    #[arg(long, value_parser = units::parse_ticks)]
    pub coarse_bin: Option<TimeTick>,
    /// Refinement target bin width.
    #[arg(long, value_parser = units::parse_ticks)]
    pub target_bin: Option<TimeTick>,
    /// Precompensation sweep half-range (e.g. 10ppm).
    #[arg(long, value_parser = units::parse_ratio)]
    pub sweep_range: Option<f64>,
    /// Sweep step (e.g. 100ppb).
    #[arg(long, value_parser = units::parse_ratio)]
    pub sweep_step: Option<f64>,
    /// False-accept probability of the peak acceptance threshold.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Evaluate every sweep point (no coarse/fine schedule).
    #[arg(long)]
    pub full_scan: bool,
    /// Bound on the unknown |tau| (default: a quarter of the coarse span).
    #[arg(long, value_parser = units::parse_ticks)]
    pub max_tau: Option<TimeTick>,
}

impl FindArgs {
    fn resolve(&self) -> Result<FindCliConfig, CliError> {
        let mut cfg = FindCliConfig::default();
        if let Some(path) = &self.config {
            cfg = load_config_file(path)?;
        }
        if let Some(v) = self.q {
            cfg.q = v;
        }
        if let Some(v) = self.coarse_bin {
            cfg.coarse_bin = v;
        }
        if let Some(v) = self.target_bin {
            cfg.target_bin = v;
        }
        if let Some(v) = self.sweep_range {
            cfg.sweep_range = v;
        }
        if let Some(v) = self.sweep_step {
            cfg.sweep_step = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if self.full_scan {
            cfg.full_scan = true;
        }
        if let Some(v) = self.max_tau {
            cfg.max_tau = Some(v);
        }
        Ok(cfg)
    }
}

pub fn run(args: &FindArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let a = read_stream(&args.file_a)?;
    let b = read_stream(&args.file_b)?;
    match find_offset(&a, &b, &cfg.to_core()) {
        Ok(result) => {
            log::info!(
                "tau = {} ps, du = {:.3} ppb ({} levels{})",
                result.tau.0,
                result.du * 1e9,
                result.levels.len(),
                if result.warning.is_some() {
                    ", with warning"
                } else {
                    ""
                }
            );
            let payload = serde_json::to_value(&result).expect("result serializes");
            write_json_with_config(&args.out, &cfg, payload)
        }
        Err(PeakFindError::NotFound { best }) => Err(CliError::new(
            "not-found",
            format!("no credible correlation peak: best {best}"),
        )
        .with_exit(2)
        .with_detail(serde_json::to_value(&*best).expect("candidate serializes"))),
        Err(e) => Err(CliError::new("invalid-parameter", e.to_string())),
    }
}
