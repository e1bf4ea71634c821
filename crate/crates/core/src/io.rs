//! Bit-exact timestamp persistence (WCPT files) and the framed streaming
//! protocol for two-process timestamp exchange.
//!
//! All integers on disk and on the wire are little-endian. The WCPT layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "WCPT"
//! 4       2     version = 1 (u16)
//! 6       1     channel id (u8)
//! 7       1     reserved = 0
//! 8       8     tick resolution in femtoseconds = 1_000_000 (1 ps)
//! 16      8     record count (u64)
//! 24      8·n   records: signed 64-bit tick values, non-decreasing
//! ```
//!
//! Exchange frames are `[length: u32][frame_type: u8][payload: length]`
//! where length covers the payload exactly. Frame types: 0 = timestamp
//! batch (`channel: u8` + n×i64 ticks), 1 = served offset (`tau_ps: i64` +
//! `du` in units of 1e-15), 2 = heartbeat (empty).

use std::io::{BufReader, BufWriter, Read, Write};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::timetag::{EventStream, TimeTick};

pub const MAGIC: [u8; 4] = *b"WCPT";
pub const VERSION: u16 = 1;
pub const TICK_RESOLUTION_FS: u64 = 1_000_000;
pub const HEADER_LEN: u64 = 24;

/// Upper bound on a single frame payload; malformed lengths beyond this are
/// rejected before any allocation.
pub const MAX_FRAME_LEN: u32 = 1 << 24;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic at byte offset 0: expected \"WCPT\", found {found:02x?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {0} (expected {VERSION})")]
    UnsupportedVersion(u16),
    #[error("reserved header byte at offset 7 must be zero, found {0:#04x}")]
    ReservedNonZero(u8),
    #[error("unsupported tick resolution {0} fs (expected {TICK_RESOLUTION_FS})")]
    UnsupportedResolution(u64),
    #[error(
        "truncated record section: header declares {expected} records but only {got} complete \
         records are present (failed at byte offset {offset})"
    )]
    Truncated { expected: u64, got: u64, offset: u64 },
    #[error("records not non-decreasing at record index {index} (byte offset {offset})")]
    NotMonotone { index: u64, offset: u64 },
    #[error("input stream is not sorted; refusing to write")]
    UnsortedInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes a stream in the WCPT layout; returns the bytes written.
pub fn write_timetags<W: Write>(stream: &EventStream, sink: W) -> Result<u64, IoError> {
    if stream.check_sorted().is_err() {
        return Err(IoError::UnsortedInput);
    }
    let mut w = BufWriter::new(sink);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[stream.channel, 0u8])?;
    w.write_all(&TICK_RESOLUTION_FS.to_le_bytes())?;
    w.write_all(&(stream.len() as u64).to_le_bytes())?;
    for t in &stream.ticks {
        w.write_all(&t.0.to_le_bytes())?;
    }
    w.flush()?;
    Ok(HEADER_LEN + 8 * stream.len() as u64)
}

/// Reads and validates a WCPT stream without requiring the whole payload in
/// memory at once (records are consumed in 64 KiB chunks).
pub fn read_timetags<R: Read>(source: R) -> Result<EventStream, IoError> {
    let mut r = BufReader::new(source);
    let mut header = [0u8; HEADER_LEN as usize];
    read_exact_at(&mut r, &mut header, 0)?;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&header[0..4]);
    if magic != MAGIC {
        return Err(IoError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let channel = header[6];
    if header[7] != 0 {
        return Err(IoError::ReservedNonZero(header[7]));
    }
    let resolution = u64::from_le_bytes(header[8..16].try_into().unwrap());
    if resolution != TICK_RESOLUTION_FS {
        return Err(IoError::UnsupportedResolution(resolution));
    }
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap());

    let mut ticks: Vec<TimeTick> = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut chunk = [0u8; 8 * 8192];
    let mut got: u64 = 0;
    let mut prev = i64::MIN;
    while got < count {
        let want = (((count - got) * 8).min(chunk.len() as u64)) as usize;
        let offset = HEADER_LEN + got * 8;
        let n = read_up_to(&mut r, &mut chunk[..want])?;
        if n == 0 || n % 8 != 0 {
            return Err(IoError::Truncated {
                expected: count,
                got: got + (n / 8) as u64,
                offset: offset + n as u64,
            });
        }
        for rec in chunk[..n].chunks_exact(8) {
            let v = i64::from_le_bytes(rec.try_into().unwrap());
            if v < prev {
                return Err(IoError::NotMonotone {
                    index: got,
                    offset: HEADER_LEN + got * 8,
                });
            }
            prev = v;
            ticks.push(TimeTick(v));
            got += 1;
        }
    }
    Ok(EventStream::from_ticks(channel, ticks))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<(), IoError> {
    let n = read_up_to(r, buf)?;
    if n < buf.len() {
        return Err(IoError::Truncated {
            expected: 0,
            got: 0,
            offset: offset + n as u64,
        });
    }
    Ok(())
}

/// Reads until `buf` is full or EOF; returns bytes read.
fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, IoError> {
    let mut filled = 0usize;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

// ---------------------------------------------------------------------------
// Exchange frames
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    /// Ordered timestamp batch from one channel.
    Batch { channel: u8, ticks: Vec<TimeTick> },
    /// Served offset sample: tau in ps, du in units of 1e-15.
    Served { tau_ps: i64, du_femto: i64 },
    Heartbeat,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN}-byte limit")]
    Oversize(u32),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("frame payload length {len} invalid for type {frame_type}")]
    BadPayload { frame_type: u8, len: u32 },
}

/// Appends the wire encoding of `frame` to `out`.
pub fn encode_frame(frame: &Frame, out: &mut Vec<u8>) {
    match frame {
        Frame::Batch { channel, ticks } => {
            let len = 1 + 8 * ticks.len() as u32;
            assert!(len <= MAX_FRAME_LEN, "batch too large for one frame");
            out.extend_from_slice(&len.to_le_bytes());
            out.push(0);
            out.push(*channel);
            for t in ticks {
                out.extend_from_slice(&t.0.to_le_bytes());
            }
        }
        Frame::Served { tau_ps, du_femto } => {
            out.extend_from_slice(&16u32.to_le_bytes());
            out.push(1);
            out.extend_from_slice(&tau_ps.to_le_bytes());
            out.extend_from_slice(&du_femto.to_le_bytes());
        }
        Frame::Heartbeat => {
            out.extend_from_slice(&0u32.to_le_bytes());
            out.push(2);
        }
    }
}

/// Attempts to decode one frame from the start of `buf`. Returns
/// `Ok(None)` when more bytes are needed, otherwise the frame and the
/// number of bytes consumed. Never reads past the declared length.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Frame, usize)>, FrameError> {
    if buf.len() < 5 {
        return Ok(None);
    }
    let len = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    if len > MAX_FRAME_LEN {
        return Err(FrameError::Oversize(len));
    }
    let frame_type = buf[4];
    let total = 5usize + len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let payload = &buf[5..total];
    let frame = match frame_type {
        0 => {
            if payload.is_empty() || (payload.len() - 1) % 8 != 0 {
                return Err(FrameError::BadPayload { frame_type, len });
            }
            let channel = payload[0];
            let ticks = payload[1..]
                .chunks_exact(8)
                .map(|c| TimeTick(i64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            Frame::Batch { channel, ticks }
        }
        1 => {
            if payload.len() != 16 {
                return Err(FrameError::BadPayload { frame_type, len });
            }
            Frame::Served {
                tau_ps: i64::from_le_bytes(payload[0..8].try_into().unwrap()),
                du_femto: i64::from_le_bytes(payload[8..16].try_into().unwrap()),
            }
        }
        2 => {
            if !payload.is_empty() {
                return Err(FrameError::BadPayload { frame_type, len });
            }
            Frame::Heartbeat
        }
        other => return Err(FrameError::UnknownType(other)),
    };
    Ok(Some((frame, total)))
}

// ---------------------------------------------------------------------------
// Exchange session
// ---------------------------------------------------------------------------

#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub role: Role,
    /// Heartbeat cadence on the send side.
    pub heartbeat_interval: Duration,
    /// Silence (no frame at all) after which the peer counts as lost. Only
    /// observable when the transport has a read timeout configured.
    pub peer_timeout: Duration,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            role: Role::Initiator,
            heartbeat_interval: Duration::from_secs(1),
            peer_timeout: Duration::from_secs(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    Batch { channel: u8, ticks: Vec<TimeTick> },
    Served { tau_ps: i64, du_femto: i64 },
    /// No frame from the peer within the timeout.
    PeerLost,
    /// Transport closed cleanly.
    Closed,
    /// Malformed frame or transport failure.
    Error(String),
}

#[derive(Debug, Clone)]
pub enum SessionCommand {
    SendBatch { channel: u8, ticks: Vec<TimeTick> },
    SendServed { tau_ps: i64, du_femto: i64 },
    Close,
}

/// A running exchange session: a writer thread framing outgoing commands
/// (with heartbeats on idle) and a reader thread decoding incoming frames.
pub struct ExchangeSession {
    pub events: Receiver<SessionEvent>,
    commands: Sender<SessionCommand>,
    writer: Option<JoinHandle<()>>,
    reader: Option<JoinHandle<()>>,
}

impl ExchangeSession {
    /// Spawns the session threads over a reliable ordered byte transport,
    /// split into its read and write halves. For peer-loss detection the
    /// read half should have a read timeout configured (a fraction of
    /// `peer_timeout`).
    pub fn spawn<R, W>(cfg: SessionConfig, reader: R, writer: W) -> ExchangeSession
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (cmd_tx, cmd_rx) = channel::<SessionCommand>();
        let (evt_tx, evt_rx) = channel::<SessionEvent>();

        let writer_handle = std::thread::spawn(move || {
            writer_loop(writer, cmd_rx, cfg.heartbeat_interval);
        });
        let reader_handle = std::thread::spawn(move || {
            reader_loop(reader, evt_tx, cfg.peer_timeout);
        });
        ExchangeSession {
            events: evt_rx,
            commands: cmd_tx,
            writer: Some(writer_handle),
            reader: Some(reader_handle),
        }
    }

    pub fn commands(&self) -> Sender<SessionCommand> {
        self.commands.clone()
    }

    pub fn send(&self, cmd: SessionCommand) -> bool {
        self.commands.send(cmd).is_ok()
    }

    /// Closes the send side and joins both threads (the reader finishes when
    /// the peer closes or errors).
    pub fn shutdown(mut self) {
        let _ = self.commands.send(SessionCommand::Close);
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ExchangeSession {
    fn drop(&mut self) {
        let _ = self.commands.send(SessionCommand::Close);
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

fn writer_loop<W: Write>(mut w: W, commands: Receiver<SessionCommand>, heartbeat: Duration) {
    let mut buf = Vec::new();
    loop {
        let frame = match commands.recv_timeout(heartbeat) {
            Ok(SessionCommand::Close) => return,
            Ok(SessionCommand::SendBatch { channel, ticks }) => Frame::Batch { channel, ticks },
            Ok(SessionCommand::SendServed { tau_ps, du_femto }) => {
                Frame::Served { tau_ps, du_femto }
            }
            Err(RecvTimeoutError::Timeout) => Frame::Heartbeat,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        buf.clear();
        encode_frame(&frame, &mut buf);
        if w.write_all(&buf).and_then(|_| w.flush()).is_err() {
            return;
        }
    }
}

fn reader_loop<R: Read>(mut r: R, events: Sender<SessionEvent>, peer_timeout: Duration) {
    let mut pending: Vec<u8> = Vec::new();
    let mut chunk = [0u8; 64 * 1024];
    let mut last_rx = Instant::now();
    let mut lost_sent = false;
    loop {
        match r.read(&mut chunk) {
            Ok(0) => {
                let _ = events.send(SessionEvent::Closed);
                return;
            }
            Ok(n) => {
                last_rx = Instant::now();
                lost_sent = false;
                pending.extend_from_slice(&chunk[..n]);
                loop {
                    match decode_frame(&pending) {
                        Ok(Some((frame, used))) => {
                            pending.drain(..used);
                            let event = match frame {
                                Frame::Batch { channel, ticks } => {
                                    Some(SessionEvent::Batch { channel, ticks })
                                }
                                Frame::Served { tau_ps, du_femto } => {
                                    Some(SessionEvent::Served { tau_ps, du_femto })
                                }
                                Frame::Heartbeat => None,
                            };
                            if let Some(e) = event {
                                if events.send(e).is_err() {
                                    return;
                                }
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            let _ = events.send(SessionEvent::Error(e.to_string()));
                            return;
                        }
                    }
                }
            }
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                if !lost_sent && last_rx.elapsed() > peer_timeout {
                    lost_sent = true;
                    if events.send(SessionEvent::PeerLost).is_err() {
                        return;
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => {
                let _ = events.send(SessionEvent::Error(e.to_string()));
                return;
            }
        }
    }
}
