//! Network collection endpoint and windowed aggregation.
//!
//! The collector accepts newline-delimited JSON snapshots over TCP and the
//! same payload via `POST /v1/snapshot` on the same port (the first bytes of
//! a connection decide the protocol). Parsing and validation happen on
//! per-connection worker threads; invalid messages are counted and dropped.
//!
//! Windows partition the stream by snapshot timestamp: window `i` covers
//! `[i*W, (i+1)*W)` milliseconds. A window closes when its wall-clock
//! boundary passes, when a snapshot at or past its end arrives, or when
//! intake is closed. Late snapshots for an already-closed window are counted
//! as dropped, which keeps the every-snapshot-in-exactly-one-window
//! invariant exact.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{parse_snapshot, SceneSnapshot};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectorConfig {
    pub bind: String,
    pub window_seconds: f64,
    pub queue_capacity: usize,
    pub max_message_bytes: usize,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            window_seconds: 10.0,
            queue_capacity: 4096,
            max_message_bytes: 64 * 1024,
        }
    }
}

/// All snapshots received for one window, sorted by timestamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentBatch {
    pub window_index: u64,
    pub t_start: u64,
    pub t_end: u64,
    pub snapshots: Vec<SceneSnapshot>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct IngestStats {
    pub accepted: u64,
    pub dropped_invalid: u64,
    pub dropped_overflow: u64,
    pub dropped_late: u64,
}

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("bind failure on {addr}: {source}")]
    BindFailure {
        addr: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
}

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("deadline reached before the window closed")]
    TimedOut,
    #[error("collector stopped and all windows drained")]
    CollectorStopped,
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("empty batch with no previous snapshot and no default")]
    NoDataEver,
}

struct IntakeState {
    windows: BTreeMap<u64, Vec<SceneSnapshot>>,
    queued: usize,
    next_window: u64,
    max_ts_seen: Option<u64>,
    intake_closed: bool,
    stats: IngestStats,
}

struct Inner {
    state: Mutex<IntakeState>,
    cond: Condvar,
    window_ms: u64,
    queue_capacity: usize,
    max_message_bytes: usize,
    epoch: Instant,
    shutdown: AtomicBool,
}

/// Handle to a running collector. Many producers, one logical consumer:
/// `next_segment` must not be called from two threads at once.
pub struct CollectorHandle {
    inner: Arc<Inner>,
    addr: SocketAddr,
    accept_thread: Option<thread::JoinHandle<()>>,
}

/// Binds the endpoint and spawns the accept loop.
pub fn start_collector(config: &CollectorConfig) -> Result<CollectorHandle, CollectorError> {
    if config.window_seconds <= 0.0 {
        return Err(CollectorError::ConfigInvalid(format!(
            "window_seconds must be > 0, got {}",
            config.window_seconds
        )));
    }
    if config.queue_capacity == 0 {
        return Err(CollectorError::ConfigInvalid(
            "queue_capacity must be >= 1".into(),
        ));
    }

    let listener = TcpListener::bind(&config.bind).map_err(|source| CollectorError::BindFailure {
        addr: config.bind.clone(),
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| CollectorError::BindFailure {
        addr: config.bind.clone(),
        source,
    })?;
    listener.set_nonblocking(true).expect("nonblocking listener");

    let inner = Arc::new(Inner {
        state: Mutex::new(IntakeState {
            windows: BTreeMap::new(),
            queued: 0,
            next_window: 0,
            max_ts_seen: None,
            intake_closed: false,
            stats: IngestStats::default(),
        }),
        cond: Condvar::new(),
        window_ms: ((config.window_seconds * 1000.0).round() as u64).max(1),
        queue_capacity: config.queue_capacity,
        max_message_bytes: config.max_message_bytes,
        epoch: Instant::now(),
        shutdown: AtomicBool::new(false),
    });

    let accept_inner = Arc::clone(&inner);
    let accept_thread = thread::spawn(move || accept_loop(listener, accept_inner));

    Ok(CollectorHandle {
        inner,
        addr,
        accept_thread: Some(accept_thread),
    })
}

fn accept_loop(listener: TcpListener, inner: Arc<Inner>) {
    loop {
        if inner.shutdown.load(Ordering::Relaxed) {
            break;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let conn_inner = Arc::clone(&inner);
                thread::spawn(move || handle_connection(stream, conn_inner));
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                log::warn!("collector accept error: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handle_connection(stream: TcpStream, inner: Arc<Inner>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(300)));
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(clone) => clone,
        Err(_) => return,
    });

    let mut first_line = String::new();
    if reader.read_line(&mut first_line).is_err() || first_line.is_empty() {
        return;
    }

    if first_line.starts_with("POST ") || first_line.starts_with("GET ") {
        handle_http(&first_line, reader, stream, &inner);
    } else {
        ingest_line(&first_line, &inner);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) | Err(_) => break,
                Ok(_) => ingest_line(&line, &inner),
            }
        }
    }
}

fn ingest_line(line: &str, inner: &Inner) {
    let line = line.trim();
    if line.is_empty() {
        return;
    }
    if line.len() > inner.max_message_bytes {
        inner.state.lock().unwrap().stats.dropped_invalid += 1;
        return;
    }
    match parse_snapshot(line) {
        Ok(snapshot) => push_snapshot(inner, snapshot),
        Err(e) => {
            log::debug!("dropping invalid snapshot: {e}");
            inner.state.lock().unwrap().stats.dropped_invalid += 1;
        }
    }
}

fn push_snapshot(inner: &Inner, snapshot: SceneSnapshot) {
    let mut state = inner.state.lock().unwrap();
    if state.intake_closed {
        return;
    }
    let window = snapshot.timestamp / inner.window_ms;
    if window < state.next_window {
        state.stats.dropped_late += 1;
        return;
    }
    if state.queued >= inner.queue_capacity {
        // Drop-oldest backpressure: freshness beats completeness here.
        let oldest = *state.windows.keys().next().expect("queued implies a window");
        let bucket = state.windows.get_mut(&oldest).unwrap();
        bucket.remove(0);
        if bucket.is_empty() {
            state.windows.remove(&oldest);
        }
        state.queued -= 1;
        state.stats.dropped_overflow += 1;
    }
    state.max_ts_seen = Some(state.max_ts_seen.map_or(snapshot.timestamp, |m| m.max(snapshot.timestamp)));
    state.windows.entry(window).or_default().push(snapshot);
    state.queued += 1;
    state.stats.accepted += 1;
    drop(state);
    inner.cond.notify_all();
}

fn handle_http(first_line: &str, mut reader: BufReader<TcpStream>, mut stream: TcpStream, inner: &Inner) {
    let mut parts = first_line.split_whitespace();
    let method = parts.next().unwrap_or("");
    let path = parts.next().unwrap_or("/");

    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).is_err() {
            return;
        }
        let line = line.trim();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
        {
            content_length = v.parse().unwrap_or(0);
        }
    }

    let (status, reason, body) = match (method, path) {
        ("GET", "/v1/health") => (200, "OK", "{\"status\":\"ok\"}".to_string()),
        ("POST", "/v1/snapshot") => {
            if content_length > inner.max_message_bytes {
                inner.state.lock().unwrap().stats.dropped_invalid += 1;
                (413, "Payload Too Large", "{\"error\":\"too large\"}".into())
            } else {
                let mut raw = vec![0u8; content_length];
                if reader.read_exact(&mut raw).is_err() {
                    return;
                }
                let text = String::from_utf8_lossy(&raw);
                match parse_snapshot(&text) {
                    Ok(snapshot) => {
                        push_snapshot(inner, snapshot);
                        (202, "Accepted", "{\"status\":\"accepted\"}".into())
                    }
                    Err(e) => {
                        inner.state.lock().unwrap().stats.dropped_invalid += 1;
                        (400, "Bad Request", format!("{{\"error\":{:?}}}", e.to_string()))
                    }
                }
            }
        }
        _ => (404, "Not Found", "{\"error\":\"not found\"}".into()),
    };

    let _ = write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

impl CollectorHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> IngestStats {
        self.inner.state.lock().unwrap().stats
    }

    pub fn window_ms(&self) -> u64 {
        self.inner.window_ms
    }

    /// Wall-clock origin of window 0; window `i` nominally closes at
    /// `epoch + (i + 1) * window_ms`.
    pub fn epoch(&self) -> Instant {
        self.inner.epoch
    }

    /// Stops accepting new snapshots; remaining windows can still be drained
    /// with `next_segment`, which then reports `CollectorStopped`.
    pub fn close_intake(&self) {
        let mut state = self.inner.state.lock().unwrap();
        state.intake_closed = true;
        drop(state);
        self.inner.cond.notify_all();
    }

    /// Blocks until the next window closes and returns its batch. Windows
    /// are contiguous: idle windows yield empty batches.
    pub fn next_segment(&self, deadline: Instant) -> Result<SegmentBatch, SegmentError> {
        let window_ms = self.inner.window_ms;
        let mut state = self.inner.state.lock().unwrap();
        loop {
            let index = state.next_window;
            let t_start = index * window_ms;
            let t_end = t_start + window_ms;
            let close_at = self.inner.epoch + Duration::from_millis(t_end);

            let data_complete = state.max_ts_seen.is_some_and(|m| m >= t_end);
            let wall_closed = Instant::now() >= close_at;

            if state.intake_closed {
                // Drain: return remaining windows in order, then stop.
                let has_later_data = state.windows.keys().next_back().is_some_and(|&w| w >= index);
                if !has_later_data {
                    return Err(SegmentError::CollectorStopped);
                }
                return Ok(Self::pop_window(&mut state, index, t_start, t_end));
            }
            if data_complete || wall_closed {
                return Ok(Self::pop_window(&mut state, index, t_start, t_end));
            }

            let now = Instant::now();
            if now >= deadline {
                return Err(SegmentError::TimedOut);
            }
            let wait = close_at.min(deadline).saturating_duration_since(now);
            let (next_state, _) = self
                .inner
                .cond
                .wait_timeout(state, wait.min(Duration::from_millis(200)))
                .unwrap();
            state = next_state;
        }
    }

    fn pop_window(state: &mut IntakeState, index: u64, t_start: u64, t_end: u64) -> SegmentBatch {
        let mut snapshots = state.windows.remove(&index).unwrap_or_default();
        state.queued -= snapshots.len();
        state.next_window = index + 1;
        snapshots.sort_by_key(|s| s.timestamp);
        SegmentBatch {
            window_index: index,
            t_start,
            t_end,
            snapshots,
        }
    }

    pub fn stop(&self) {
        self.inner.shutdown.store(true, Ordering::Relaxed);
        self.close_intake();
    }
}

impl Drop for CollectorHandle {
    fn drop(&mut self) {
        self.stop();
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

/// Collapses a window into one snapshot: last-write-wins per field, with
/// `Being Attacked` true if true anywhere in the window and `Hostile Entity`
/// the union of entries seen. An empty batch carries the previous snapshot
/// forward.
pub fn aggregate(
    batch: &SegmentBatch,
    previous: Option<&SceneSnapshot>,
) -> Result<SceneSnapshot, AggregateError> {
    let Some(last) = batch.snapshots.last() else {
        return previous.cloned().ok_or(AggregateError::NoDataEver);
    };
    let mut out = last.clone();
    out.being_attacked = batch.snapshots.iter().any(|s| s.being_attacked);
    let mut hostiles = indexmap::IndexMap::new();
    for snapshot in &batch.snapshots {
        for (k, v) in &snapshot.hostile_entity {
            hostiles.insert(k.clone(), v.clone());
        }
    }
    out.hostile_entity = hostiles;
    Ok(out)
}
