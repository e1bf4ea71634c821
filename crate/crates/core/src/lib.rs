//! Synchronization of free-running clocks from the arrival timestamps of
//! weakly time-correlated (bunched) photons.
//!
//! The crate is organized around a processing pipeline:
//!
//! * [`timetag`] — integer-picosecond timestamps, clock models, and the
//!   frequency-correction primitive shared by everything else.
//! * [`source`] — a statistical simulator producing detector event streams
//!   whose cross-correlation carries the bunching signature.
//! * [`correlation`] — binned time traces, FFT circular cross-correlation
//!   with a brute-force oracle, and g² normalization/fitting.
//! * [`stats`] — exact Poisson max-order statistics and the peak-finding
//!   success-probability model (analytic and Monte Carlo).
//! * [`peakfind`] — initial timing/frequency offset acquisition via
//!   precompensation sweep and hierarchical refinement.
//! * [`peaktrack`] — streaming offset tracker with EMA damping and active
//!   frequency compensation.
//! * [`io`] — timestamp persistence and the framed exchange protocol.

pub mod correlation;
pub mod io;
pub mod peakfind;
pub mod peaktrack;
pub mod rng;
pub mod source;
pub mod stats;
pub mod timetag;

pub use timetag::{ClockModel, ClockRealization, EventStream, TimeTick};
