//! `wcps track`: serve (τ', du) continuously from two timestamp files or a
//! live two-process exchange session.
//!
//! File mode feeds both files through the tracker; on tracking loss it
//! re-enters peak finding on the remaining data using the last served
//! frequency offset and ±100 ppb, per the recovery policy. Live mode
//! exchanges timestamps over TCP and merges the remote feed with the local
//! file deterministically (by timestamp, channel 0 first on ties), so a
//! loopback live run reproduces the file-mode log bit for bit.

use std::collections::VecDeque;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::time::Duration;

use clap::Args;
use serde::{Deserialize, Serialize};

use wcps_core::io::{
    ExchangeSession, Role, SessionCommand, SessionConfig, SessionEvent,
};
use wcps_core::peakfind::{sweep_precompensation, SweepConfig};
use wcps_core::correlation::GridParams;
use wcps_core::peaktrack::{
    merged_events, write_log_csv, LossReason, ServedSample, Tracker, TrackerConfig, TrackerError,
};
use wcps_core::timetag::{EventStream, TimeTick};

use crate::output::{load_config_file, write_csv_with_config, write_json_with_config, CliError};
use crate::units;
use crate::util::read_stream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackCliConfig {
    pub window: TimeTick,
    pub beta_s: f64,
    pub serve_s: f64,
    pub du_window_s: f64,
    pub timeout_s: f64,
    pub initial_tau: TimeTick,
    pub initial_du: f64,
    pub recover: bool,
    pub recover_q: u32,
    pub recover_bin: TimeTick,
    pub max_recoveries: u32,
    /// Live mode: batch granularity for the outgoing timestamp frames.
    pub batch_events: usize,
}

impl Default for TrackCliConfig {
    fn default() -> Self {
        TrackCliConfig {
            window: TimeTick::from_ns(256),
            beta_s: 0.050,
            serve_s: 0.5,
            du_window_s: 2.0,
            timeout_s: 2.0,
            initial_tau: TimeTick::ZERO,
            initial_du: 0.0,
            recover: true,
            recover_q: 18,
            recover_bin: TimeTick::from_ns(1024),
            max_recoveries: 3,
            batch_events: 8192,
        }
    }
}

impl TrackCliConfig {
    fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            beta: self.beta_s,
            window: self.window,
            serve_interval: self.serve_s,
            initial_tau: self.initial_tau,
            initial_du: self.initial_du,
            du_window: self.du_window_s,
            starvation_timeout: self.timeout_s,
            ..TrackerConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Timestamp files: two in file mode (a then b), one (the local
    /// channel) in live mode.
    pub files: Vec<PathBuf>,
    /// Tracking log CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// Run summary JSON output.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Live exchange endpoint: listen:HOST:PORT or connect:HOST:PORT.
    #[arg(long)]
    pub live: Option<String>,
    /// Live mode: which tracker channel the local file carries (0 = a).
    #[arg(long, default_value_t = 0)]
    pub channel: u8,
    /// Seed (tau, du) from a find-result JSON instead of flags.
    #[arg(long)]
    pub from_find: Option<PathBuf>,
    /// Ground-truth sidecar; adds error statistics to the summary.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = units::parse_ticks)]
    pub tau: Option<TimeTick>,
    #[arg(long, value_parser = units::parse_ratio)]
    pub du: Option<f64>,
    #[arg(long, value_parser = units::parse_ticks)]
    pub window: Option<TimeTick>,
    #[arg(long, value_parser = units::parse_seconds)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = units::parse_seconds)]
    pub serve: Option<f64>,
    #[arg(long, value_parser = units::parse_seconds)]
    pub du_window: Option<f64>,
    #[arg(long, value_parser = units::parse_seconds)]
    pub timeout: Option<f64>,
    /// Disable peak-finding recovery after tracking loss.
    #[arg(long)]
    pub no_recover: bool,
}

impl TrackArgs {
    fn resolve(&self) -> Result<TrackCliConfig, CliError> {
        let mut cfg = TrackCliConfig::default();
        if let Some(name) = &self.preset {
            cfg = match name.as_str() {
                // Fig.4-style tracking parameters (β = 50 ms, 256 ns window).
                "paper-fig4" => TrackCliConfig::default(),
                other => {
                    return Err(CliError::new("parse", format!("unknown preset {other:?}")))
                }
            };
        }
        if let Some(path) = &self.config {
            cfg = load_config_file(path)?;
        }
        if let Some(path) = &self.from_find {
            let doc: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(path)
                    .map_err(|e| CliError::new("io", format!("read {path:?}: {e}")))?,
            )
            .map_err(|e| CliError::new("parse", format!("{path:?}: {e}")))?;
            let tau = doc
                .get("tau_ps")
                .and_then(|v| v.as_i64())
                .ok_or_else(|| CliError::new("parse", "find result lacks tau_ps"))?;
            let du = doc
                .get("du")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| CliError::new("parse", "find result lacks du"))?;
            cfg.initial_tau = TimeTick(tau);
            cfg.initial_du = du;
        }
        if let Some(v) = self.tau {
            cfg.initial_tau = v;
        }
        if let Some(v) = self.du {
            cfg.initial_du = v;
        }
        if let Some(v) = self.window {
            cfg.window = v;
        }
        if let Some(v) = self.beta {
            cfg.beta_s = v;
        }
        if let Some(v) = self.serve {
            cfg.serve_s = v;
        }
        if let Some(v) = self.du_window {
            cfg.du_window_s = v;
        }
        if let Some(v) = self.timeout {
            cfg.timeout_s = v;
        }
        if self.no_recover {
            cfg.recover = false;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossEvent {
    pub t_s: f64,
    pub reason: String,
    pub recovered: bool,
}

#[derive(Debug, Default)]
pub struct TrackOutcome {
    pub samples: Vec<ServedSample>,
    pub losses: Vec<LossEvent>,
    pub final_loss: Option<(f64, String)>,
}

/// File-mode tracking with the re-acquisition policy: after a loss, sweep
/// the last served du ±100 ppb on the remaining data and restart.
pub fn track_files(
    a: &EventStream,
    b: &EventStream,
    cfg: &TrackCliConfig,
) -> Result<TrackOutcome, CliError> {
    let mut outcome = TrackOutcome::default();
    let mut tracker_cfg = cfg.tracker();
    let mut from = TimeTick(i64::MIN / 4);
    let end = TimeTick(i64::MAX / 4);
    let mut attempts = 0u32;

    loop {
        let a_cur = a.window(from, TimeTick(end.0 - from.0));
        let b_cur = b.window(from, TimeTick(end.0 - from.0));
        let mut tracker = Tracker::new(tracker_cfg.clone())
            .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
        let mut loss: Option<(f64, LossReason)> = None;
        for (ch, t) in merged_events(&a_cur, &b_cur) {
            match tracker.push(ch, t) {
                Ok(()) => {}
                Err(TrackerError::TrackingLost { t_s, reason }) => {
                    loss = Some((t_s, reason));
                    break;
                }
                Err(e) => return Err(CliError::new("invalid-parameter", e.to_string())),
            }
        }
        tracker.finish();
        let last_du = tracker.du();
        outcome.samples.extend(tracker.drain());

        let Some((t_s, reason)) = loss else {
            break; // ran to the end of the data
        };
        if !cfg.recover || attempts >= cfg.max_recoveries {
            outcome.losses.push(LossEvent {
                t_s,
                reason: reason.to_string(),
                recovered: false,
            });
            outcome.final_loss = Some((t_s, reason.to_string()));
            break;
        }
        attempts += 1;
        from = TimeTick::from_secs_f64(t_s);
        let a_rest = a.window(from, TimeTick(end.0 - from.0));
        let b_rest = b.window(from, TimeTick(end.0 - from.0));
        let grid = GridParams::new(cfg.recover_q, cfg.recover_bin, TimeTick::ZERO)
            .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
        let sweep = SweepConfig {
            du_min: last_du - 100e-9,
            du_max: last_du + 100e-9,
            du_step: 100e-9,
            full_scan: true,
            ..SweepConfig::symmetric(0.0, 100e-9)
        };
        match sweep_precompensation(&a_rest, &b_rest, &grid, &sweep) {
            Ok(found) => {
                log::info!(
                    "recovered at {:.2} s: tau {} ps, du {:.1} ppb",
                    t_s,
                    found.candidate.tau.0,
                    found.du * 1e9
                );
                outcome.losses.push(LossEvent {
                    t_s,
                    reason: reason.to_string(),
                    recovered: true,
                });
                tracker_cfg.initial_tau = found.candidate.tau;
                tracker_cfg.initial_du = found.du;
            }
            Err(_) => {
                outcome.losses.push(LossEvent {
                    t_s,
                    reason: reason.to_string(),
                    recovered: false,
                });
                outcome.final_loss = Some((t_s, reason.to_string()));
                break;
            }
        }
    }
    Ok(outcome)
}

/// Live mode: exchange timestamps with the peer and track the merged feed.
fn track_live(
    endpoint: &str,
    local: &EventStream,
    local_channel: u8,
    cfg: &TrackCliConfig,
) -> Result<TrackOutcome, CliError> {
    let stream = open_endpoint(endpoint)?;
    stream
        .set_read_timeout(Some(Duration::from_millis(100)))
        .map_err(|e| CliError::new("io", format!("set timeout: {e}")))?;
    let reader = stream
        .try_clone()
        .map_err(|e| CliError::new("io", format!("clone socket: {e}")))?;
    let session = ExchangeSession::spawn(
        SessionConfig {
            role: if endpoint.starts_with("listen:") {
                Role::Responder
            } else {
                Role::Initiator
            },
            heartbeat_interval: Duration::from_millis(500),
            peer_timeout: Duration::from_secs(5),
        },
        reader,
        stream,
    );

    // Ship the whole local stream in order; batches preserve it.
    for chunk in local.ticks.chunks(cfg.batch_events.max(1)) {
        session.send(SessionCommand::SendBatch {
            channel: local_channel,
            ticks: chunk.to_vec(),
        });
    }

    let mut tracker = Tracker::new(cfg.tracker())
        .map_err(|e| CliError::new("invalid-parameter", e.to_string()))?;
    let mut outcome = TrackOutcome::default();
    let mut local_iter = local.ticks.iter().copied().peekable();
    let mut remote: VecDeque<TimeTick> = VecDeque::new();
    let mut remote_done = false;
    let remote_channel = 1 - (local_channel & 1);
    let mut loss: Option<(f64, LossReason)> = None;

    'merge: loop {
        // Refill the remote queue as needed.
        while remote.is_empty() && !remote_done {
            match session.events.recv_timeout(Duration::from_secs(30)) {
                Ok(SessionEvent::Batch { ticks, .. }) => {
                    remote.extend(ticks);
                }
                Ok(SessionEvent::Served { .. }) => {}
                Ok(SessionEvent::PeerLost) | Ok(SessionEvent::Closed) => remote_done = true,
                Ok(SessionEvent::Error(e)) => {
                    session.shutdown();
                    return Err(CliError::new("session", e));
                }
                Err(_) => remote_done = true,
            }
        }
        // Emit the next event in deterministic merge order.
        let next: Option<(u8, TimeTick)> = match (local_iter.peek(), remote.front()) {
            (None, None) => None,
            (Some(&l), None) if remote_done => {
                local_iter.next();
                Some((local_channel, l))
            }
            (Some(_), None) => continue, // wait for more remote data
            (None, Some(&r)) => {
                remote.pop_front();
                Some((remote_channel, r))
            }
            (Some(&l), Some(&r)) => {
                let local_first = if l.0 != r.0 {
                    l < r
                } else {
                    local_channel == 0
                };
                if local_first {
                    local_iter.next();
                    Some((local_channel, l))
                } else {
                    remote.pop_front();
                    Some((remote_channel, r))
                }
            }
        };
        let Some((ch, t)) = next else { break };
        match tracker.push(ch, t) {
            Ok(()) => {}
            Err(TrackerError::TrackingLost { t_s, reason }) => {
                loss = Some((t_s, reason));
                break 'merge;
            }
            Err(e) => {
                session.shutdown();
                return Err(CliError::new("invalid-parameter", e.to_string()));
            }
        }
        // Share served offsets with the peer as they appear.
        for s in tracker.drain() {
            session.send(SessionCommand::SendServed {
                tau_ps: s.tau_ps.round() as i64,
                du_femto: (s.du * 1e15).round() as i64,
            });
            outcome.samples.push(s);
        }
    }
    tracker.finish();
    outcome.samples.extend(tracker.drain());
    if let Some((t_s, reason)) = loss {
        outcome.losses.push(LossEvent {
            t_s,
            reason: reason.to_string(),
            recovered: false,
        });
        outcome.final_loss = Some((t_s, reason.to_string()));
    }
    session.shutdown();
    Ok(outcome)
}

fn open_endpoint(endpoint: &str) -> Result<TcpStream, CliError> {
    if let Some(addr) = endpoint.strip_prefix("listen:") {
        let listener = TcpListener::bind(addr)
            .map_err(|e| CliError::new("io", format!("bind {addr}: {e}")))?;
        let (stream, peer) = listener
            .accept()
            .map_err(|e| CliError::new("io", format!("accept on {addr}: {e}")))?;
        log::info!("accepted exchange peer {peer}");
        Ok(stream)
    } else if let Some(addr) = endpoint.strip_prefix("connect:") {
        // The listener may come up slightly later; retry briefly.
        let deadline = std::time::Instant::now() + Duration::from_secs(10);
        loop {
            match TcpStream::connect(addr) {
                Ok(s) => return Ok(s),
                Err(e) if std::time::Instant::now() < deadline => {
                    log::debug!("connect {addr}: {e}, retrying");
                    std::thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(CliError::new("io", format!("connect {addr}: {e}"))),
            }
        }
    } else {
        Err(CliError::new(
            "parse",
            format!("endpoint {endpoint:?} must start with listen: or connect:"),
        ))
    }
}

/// Ground-truth tables from a simulate sidecar.
struct Truth {
    step_s: f64,
    tau_ps: Vec<f64>,
    du: Vec<f64>,
}

impl Truth {
    fn load(path: &std::path::Path) -> Result<Truth, CliError> {
        let doc: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(path)
                .map_err(|e| CliError::new("io", format!("read {path:?}: {e}")))?,
        )
        .map_err(|e| CliError::new("parse", format!("{path:?}: {e}")))?;
        let step_s = doc
            .get("sample_step_s")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| CliError::new("parse", "sidecar lacks sample_step_s"))?;
        let arr = |key: &str| -> Result<Vec<f64>, CliError> {
            doc.get(key)
                .and_then(|v| v.as_array())
                .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
                .ok_or_else(|| CliError::new("parse", format!("sidecar lacks {key}")))
        };
        Ok(Truth {
            step_s,
            tau_ps: arr("tau_true_ps")?,
            du: arr("du_true")?,
        })
    }

    fn interp(table: &[f64], step: f64, t: f64) -> f64 {
        if table.is_empty() {
            return f64::NAN;
        }
        let x = (t / step).clamp(0.0, (table.len() - 1) as f64);
        let k = (x.floor() as usize).min(table.len().saturating_sub(2));
        let frac = x - k as f64;
        table[k] * (1.0 - frac) + table[(k + 1).min(table.len() - 1)] * frac
    }

    fn tau_at(&self, t: f64) -> f64 {
        Self::interp(&self.tau_ps, self.step_s, t)
    }

    fn du_at(&self, t: f64) -> f64 {
        Self::interp(&self.du, self.step_s, t)
    }
}

fn summarize(
    outcome: &TrackOutcome,
    truth: Option<&Truth>,
    skip_transient_s: f64,
) -> serde_json::Value {
    let samples = &outcome.samples;
    let n = samples.len();
    let mean = |f: &dyn Fn(&ServedSample) -> f64| -> f64 {
        if n == 0 {
            return f64::NAN;
        }
        samples.iter().map(|s| f(s)).sum::<f64>() / n as f64
    };
    let mut doc = serde_json::json!({
        "samples": n,
        "duration_s": samples.last().map(|s| s.t_s).unwrap_or(0.0),
        "mean_pairs_per_s": mean(&|s| s.pairs_per_s),
        "mean_accidentals_per_s": mean(&|s| s.accidentals_per_s),
        "losses": outcome.losses,
        "final_loss": outcome.final_loss.as_ref().map(|(t_s, reason)| {
            serde_json::json!({ "t_s": t_s, "reason": reason })
        }),
    });
    if let Some(truth) = truth {
        let t0 = samples.first().map(|s| s.t_s).unwrap_or(0.0);
        let used: Vec<&ServedSample> = samples
            .iter()
            .filter(|s| s.t_s - t0 >= skip_transient_s)
            .collect();
        if !used.is_empty() {
            let errs: Vec<f64> = used
                .iter()
                .map(|s| s.tau_ps - truth.tau_at(s.t_s))
                .collect();
            let mean_err = errs.iter().sum::<f64>() / errs.len() as f64;
            let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
            let du_errs: Vec<f64> = used
                .iter()
                .map(|s| s.du - truth.du_at(s.t_s))
                .collect();
            let du_rms =
                (du_errs.iter().map(|e| e * e).sum::<f64>() / du_errs.len() as f64).sqrt();
            let sign_n = used
                .iter()
                .filter(|s| truth.du_at(s.t_s).abs() > 5e-9)
                .count();
            let sign_ok = used
                .iter()
                .filter(|s| {
                    let d = truth.du_at(s.t_s);
                    d.abs() > 5e-9 && d.signum() == s.du.signum()
                })
                .count();
            doc["truth"] = serde_json::json!({
                "skip_transient_s": skip_transient_s,
                "evaluated_samples": used.len(),
                "mean_error_ps": mean_err,
                "rms_error_ps": rms,
                "rms_du_error_ppb": du_rms * 1e9,
                "du_sign_agreement": if sign_n > 0 {
                    sign_ok as f64 / sign_n as f64
                } else {
                    f64::NAN
                },
            });
        }
    }
    doc
}

pub fn run(args: &TrackArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let outcome = match &args.live {
        None => {
            if args.files.len() != 2 {
                return Err(CliError::new(
                    "parse",
                    "file mode needs exactly two timestamp files (a b)",
                ));
            }
            let a = read_stream(&args.files[0])?;
            let b = read_stream(&args.files[1])?;
            track_files(&a, &b, &cfg)?
        }
        Some(endpoint) => {
            if args.files.len() != 1 {
                return Err(CliError::new(
                    "parse",
                    "live mode needs exactly one local timestamp file",
                ));
            }
            let local = read_stream(&args.files[0])?;
            track_live(endpoint, &local, args.channel, &cfg)?
        }
    };

    write_csv_with_config(&args.out, &cfg, |w| write_log_csv(&outcome.samples, w))?;
    let truth = match &args.truth {
        Some(path) => Some(Truth::load(path)?),
        None => None,
    };
    if let Some(summary_path) = &args.summary {
        let doc = summarize(&outcome, truth.as_ref(), 3.0);
        write_json_with_config(summary_path, &cfg, doc)?;
    }
    if let Some((t_s, reason)) = &outcome.final_loss {
        log::warn!("tracking lost at {t_s:.3} s: {reason}");
    }
    Ok(())
}
