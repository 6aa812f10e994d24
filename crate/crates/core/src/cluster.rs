// SPDX-License-Identifier: Apache-2.0

//! Hub-and-spoke runtime: one primary owns the tile queue and the merge,
//! workers pull tiles, correct them and send the results back.
//!
//! Wire protocol v1. Every frame is `len: u32 | type: u8 | payload[len]`,
//! integers big-endian:
//!
//! | type | name         | payload                                              |
//! |------|--------------|------------------------------------------------------|
//! | 0x01 | HELLO        | `"EDAC"`, version `0x01`, 16-byte worker nonce       |
//! | 0x02 | WORK_REQ     | empty                                                |
//! | 0x03 | WORK         | tile id u32, core 4×i32, LAYOUTv1 text              |
//! | 0x04 | RESULT       | tile id u32, stats block, LAYOUTv1 text             |
//! | 0x05 | NO_MORE_WORK | empty                                                |
//! | 0x06 | ACK          | run parameters after HELLO, empty after RESULT       |
//! | 0x07 | ERR          | UTF-8 reason                                         |
//!
//! The RESULT stats block is `iterations u32 | converged u8 | clamp_count u32
//! | max_abs_epe f64 bits | n u32 | offsets i32×n`. The offsets let the
//! primary merge results by fragment provenance instead of geometry.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layout::{parse_layout, write_layout, Layout, LayoutError, Rect};
use crate::litho::{ModelError, OpticalModel};
use crate::opc::{correct_tile, CorrectionStats, OpcError, OpcParams, DEFAULT_FRAG_LEN};
use crate::secure_store::{validate_name, ObjectStore, StoreError, StoreMode};
use crate::tiler::{partition, Stitcher, TileError, TileResult, Tiling};
use crate::transport::{self, Acceptor, Channel, Credentials, PeerIdentity, SecurityMode, TransportError, WireSink};

pub const MAX_FRAME: u32 = 64 << 20;
pub const HELLO_MAGIC: &[u8; 4] = b"EDAC";
pub const PROTOCOL_VERSION: u8 = 1;
pub const DEFAULT_INFLIGHT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_MAX_REDISPATCH: u32 = 3;
const HELLO_TIMEOUT: Duration = Duration::from_secs(30);
const POLL: Duration = Duration::from_millis(100);

/// Phase names, in run order.
pub const PHASES: [&str; 5] = ["read", "partition", "correct", "stitch", "write"];

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Opc(#[from] OpcError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("frame of {0} bytes exceeds the 64 MiB limit")]
    FrameTooLarge(u64),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("peer reported: {0}")]
    Remote(String),
    #[error("tile {tile} failed after {attempts} redispatches")]
    Exhausted { tile: u32, attempts: u32 },
    #[error("no worker connected within {0:?}")]
    NoWorkers(Duration),
    #[error("two results for tile {0} differ; correction is not deterministic")]
    Nondeterministic(u32),
    #[error("queue conservation violated: {pending} pending + {in_flight} in flight + {done} done != {total}")]
    Conservation {
        pending: usize,
        in_flight: usize,
        done: usize,
        total: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("injected worker fault")]
    InjectedFault,
}

type Result<T> = std::result::Result<T, ClusterError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    WorkReq = 0x02,
    Work = 0x03,
    Result = 0x04,
    NoMoreWork = 0x05,
    Ack = 0x06,
    Err = 0x07,
}

impl TryFrom<u8> for MsgType {
    type Error = ClusterError;
    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => Self::Hello,
            0x02 => Self::WorkReq,
            0x03 => Self::Work,
            0x04 => Self::Result,
            0x05 => Self::NoMoreWork,
            0x06 => Self::Ack,
            0x07 => Self::Err,
            _ => return Err(ClusterError::UnknownType(b)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgType,
    pub payload: Vec<u8>,
}

pub fn encode_frame(kind: MsgType, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() as u64 > MAX_FRAME as u64 {
        return Err(ClusterError::FrameTooLarge(payload.len() as u64));
    }
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(kind as u8);
    out.extend_from_slice(payload);
    Ok(out)
}

fn check_header(h: &[u8]) -> Result<(usize, MsgType)> {
    let len = u32::from_be_bytes(h[..4].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(ClusterError::FrameTooLarge(len as u64));
    }
    Ok((len as usize, MsgType::try_from(h[4])?))
}

/// Incremental decoder: feed arbitrary byte slices, pull whole frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// The next complete frame, if buffered. Header errors surface as soon
    /// as the five header bytes arrive.
    pub fn next_frame(&mut self) -> Result<Option<Frame>> {
        if self.buf.len() < 5 {
            return Ok(None);
        }
        let (len, kind) = check_header(&self.buf[..5])?;
        if self.buf.len() < 5 + len {
            return Ok(None);
        }
        let payload = self.buf[5..5 + len].to_vec();
        self.buf.drain(..5 + len);
        Ok(Some(Frame { kind, payload }))
    }

    /// Call at end of stream: leftover bytes mean a cut-off frame.
    pub fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(ClusterError::Truncated)
        }
    }
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    let mut d = FrameDecoder::new();
    d.push(bytes);
    let f = d.next_frame()?.ok_or(ClusterError::Truncated)?;
    if !d.buf.is_empty() {
        return Err(ClusterError::Protocol("trailing bytes after frame".into()));
    }
    Ok(f)
}

/// Reads one frame; `None` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < 5 {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ClusterError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (len, kind) = check_header(&head)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ClusterError::Truncated,
        _ => e.into(),
    })?;
    Ok(Some(Frame { kind, payload }))
}

pub fn write_frame(w: &mut impl Write, kind: MsgType, payload: &[u8]) -> Result<()> {
    w.write_all(&encode_frame(kind, payload)?)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    b: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() < n {
            return Err(ClusterError::Protocol("payload too short".into()));
        }
        let (h, t) = self.b.split_at(n);
        self.b = t;
        Ok(h)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn layout(self) -> Result<Layout> {
        let text = std::str::from_utf8(self.b).map_err(|_| ClusterError::Protocol("layout is not UTF-8".into()))?;
        Ok(parse_layout(text)?)
    }
    fn done(&self) -> Result<()> {
        if self.b.is_empty() {
            Ok(())
        } else {
            Err(ClusterError::Protocol("trailing payload bytes".into()))
        }
    }
}

fn i32_of(v: i64) -> Result<i32> {
    i32::try_from(v).map_err(|_| ClusterError::Protocol(format!("{v} does not fit in i32")))
}

pub fn encode_hello(nonce: &[u8; 16]) -> Vec<u8> {
    let mut p = HELLO_MAGIC.to_vec();
    p.push(PROTOCOL_VERSION);
    p.extend_from_slice(nonce);
    p
}

pub fn decode_hello(p: &[u8]) -> Result<[u8; 16]> {
    if p.len() != 21 || &p[..4] != HELLO_MAGIC {
        return Err(ClusterError::Protocol("bad HELLO magic".into()));
    }
    if p[4] != PROTOCOL_VERSION {
        return Err(ClusterError::Protocol(format!("unsupported protocol version {}", p[4])));
    }
    Ok(p[5..].try_into().unwrap())
}

pub fn encode_work(tile_id: u32, core: Rect, layout: &Layout) -> Result<Vec<u8>> {
    let mut p = tile_id.to_be_bytes().to_vec();
    for v in [core.x0, core.y0, core.x1, core.y1] {
        p.extend_from_slice(&i32_of(v)?.to_be_bytes());
    }
    p.extend_from_slice(write_layout(layout).as_bytes());
    Ok(p)
}

pub fn decode_work(p: &[u8]) -> Result<(u32, Rect, Layout)> {
    let mut c = Cursor { b: p };
    let id = c.u32()?;
    let core = Rect::new(c.i32()? as i64, c.i32()? as i64, c.i32()? as i64, c.i32()? as i64);
    Ok((id, core, c.layout()?))
}

pub fn encode_result(r: &TileResult) -> Result<Vec<u8>> {
    let mut p = Vec::with_capacity(25 + 4 * r.offsets.len());
    p.extend_from_slice(&r.tile_id.to_be_bytes());
    p.extend_from_slice(&r.stats.iterations.to_be_bytes());
    p.push(r.stats.converged as u8);
    p.extend_from_slice(&r.stats.clamp_count.to_be_bytes());
    p.extend_from_slice(&r.stats.max_abs_epe.to_bits().to_be_bytes());
    p.extend_from_slice(&(r.offsets.len() as u32).to_be_bytes());
    for &o in &r.offsets {
        p.extend_from_slice(&i32_of(o)?.to_be_bytes());
    }
    p.extend_from_slice(write_layout(&r.corrected).as_bytes());
    Ok(p)
}

pub fn decode_result(p: &[u8]) -> Result<TileResult> {
    let mut c = Cursor { b: p };
    let tile_id = c.u32()?;
    let iterations = c.u32()?;
    let converged = match c.u8()? {
        0 => false,
        1 => true,
        b => return Err(ClusterError::Protocol(format!("converged flag {b}"))),
    };
    let clamp_count = c.u32()?;
    let max_abs_epe = c.f64()?;
    let n = c.u32()? as usize;
    if n > c.b.len() / 4 {
        return Err(ClusterError::Protocol("offset count exceeds payload".into()));
    }
    let offsets = (0..n).map(|_| c.i32().map(i64::from)).collect::<Result<Vec<_>>>()?;
    Ok(TileResult {
        tile_id,
        corrected: c.layout()?,
        stats: CorrectionStats {
            iterations,
            max_abs_epe,
            clamp_count,
            converged,
        },
        offsets,
    })
}

/// Correction settings the primary hands every worker in its HELLO ACK.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireParams {
    pub model: OpticalModel,
    pub opc: OpcParams,
    pub frag_len: i64,
}

impl WireParams {
    pub fn encode(&self) -> Vec<u8> {
        let m = &self.model;
        let o = &self.opc;
        let mut p = Vec::with_capacity(80);
        for v in [m.sigma(), m.threshold(), m.cull_radius(), m.search_radius()] {
            p.extend_from_slice(&v.to_bits().to_be_bytes());
        }
        p.extend_from_slice(&o.max_iter.to_be_bytes());
        for v in [o.epe_tol, o.gain, o.max_step, o.max_total_offset] {
            p.extend_from_slice(&v.to_bits().to_be_bytes());
        }
        p.extend_from_slice(&(self.frag_len as u64).to_be_bytes());
        p
    }

    pub fn decode(p: &[u8]) -> Result<Self> {
        let mut c = Cursor { b: p };
        let model = OpticalModel::new(c.f64()?, c.f64()?, c.f64()?, c.f64()?)?;
        let opc = OpcParams {
            max_iter: c.u32()?,
            epe_tol: c.f64()?,
            gain: c.f64()?,
            max_step: c.f64()?,
            max_total_offset: c.f64()?,
        };
        opc.validate()?;
        let frag_len = c.u64()? as i64;
        c.done()?;
        if frag_len < 1 {
            return Err(ClusterError::Protocol(format!("frag_len {frag_len}")));
        }
        Ok(Self { model, opc, frag_len })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InFlight {
    session: u64,
    since: Instant,
}

/// What happened to a RESULT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    /// First result for the tile; it moved to done.
    Accepted,
    /// The tile was already done; the new result was identical and dropped.
    Duplicate,
}

/// Tile bookkeeping. Every tile id is in exactly one of pending,
/// in-flight or done, and done is final.
#[derive(Debug)]
pub struct QueueState {
    total: usize,
    pending: VecDeque<u32>,
    in_flight: BTreeMap<u32, InFlight>,
    done: BTreeMap<u32, (TileResult, Vec<u8>)>,
    redispatches: Vec<u32>,
    max_redispatch: u32,
    checks: u64,
}

impl QueueState {
    pub fn new(total: usize, max_redispatch: u32) -> Self {
        Self {
            total,
            pending: (0..total as u32).collect(),
            in_flight: BTreeMap::new(),
            done: BTreeMap::new(),
            redispatches: vec![0; total],
            max_redispatch,
            checks: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn pending(&self) -> Vec<u32> {
        self.pending.iter().copied().collect()
    }

    pub fn in_flight(&self) -> Vec<u32> {
        self.in_flight.keys().copied().collect()
    }

    pub fn done(&self) -> impl Iterator<Item = &TileResult> {
        self.done.values().map(|(r, _)| r)
    }

    pub fn done_count(&self) -> usize {
        self.done.len()
    }

    pub fn is_complete(&self) -> bool {
        self.done.len() == self.total
    }

    pub fn redispatches(&self, tile: u32) -> u32 {
        self.redispatches.get(tile as usize).copied().unwrap_or(0)
    }

    /// Number of conservation checks run so far.
    pub fn checks(&self) -> u64 {
        self.checks
    }

    pub fn conserved(&self) -> bool {
        let mut seen = vec![0u8; self.total];
        let ids = self
            .pending
            .iter()
            .chain(self.in_flight.keys())
            .chain(self.done.keys());
        for &t in ids {
            match seen.get_mut(t as usize) {
                Some(s) => *s += 1,
                None => return false,
            }
        }
        seen.iter().all(|&s| s == 1)
    }

    fn check(&mut self) -> Result<()> {
        self.checks += 1;
        if self.conserved() {
            Ok(())
        } else {
            Err(ClusterError::Conservation {
                pending: self.pending.len(),
                in_flight: self.in_flight.len(),
                done: self.done.len(),
                total: self.total,
            })
        }
    }

    /// Hands the front pending tile to `session`.
    pub fn dispatch(&mut self, session: u64, now: Instant) -> Result<Option<u32>> {
        let Some(t) = self.pending.pop_front() else {
            return Ok(None);
        };
        self.in_flight.insert(t, InFlight { session, since: now });
        self.check()?;
        Ok(Some(t))
    }

    /// Records a result. Late results for requeued tiles are accepted too;
    /// a second result for a done tile must match the first byte for byte.
    pub fn complete(&mut self, result: TileResult) -> Result<Completion> {
        let t = result.tile_id;
        if t as usize >= self.total {
            return Err(TileError::UnknownTile(t).into());
        }
        let bytes = encode_result(&result)?;
        if let Some((_, first)) = self.done.get(&t) {
            return if *first == bytes {
                Ok(Completion::Duplicate)
            } else {
                Err(ClusterError::Nondeterministic(t))
            };
        }
        self.in_flight.remove(&t);
        self.pending.retain(|&p| p != t);
        self.done.insert(t, (result, bytes));
        self.check()?;
        Ok(Completion::Accepted)
    }

    fn requeue(&mut self, mut tiles: Vec<u32>) -> Result<Vec<u32>> {
        tiles.sort_unstable();
        if let Some(&t) = tiles
            .iter()
            .find(|&&t| self.redispatches[t as usize] >= self.max_redispatch)
        {
            return Err(ClusterError::Exhausted {
                tile: t,
                attempts: self.redispatches[t as usize],
            });
        }
        for &t in tiles.iter().rev() {
            self.in_flight.remove(&t);
            self.redispatches[t as usize] += 1;
            self.pending.push_front(t);
        }
        self.check()?;
        Ok(tiles)
    }

    /// Moves in-flight tiles older than `timeout` back to the front of the
    /// queue and returns them.
    pub fn requeue_expired(&mut self, now: Instant, timeout: Duration) -> Result<Vec<u32>> {
        let expired: Vec<u32> = self
            .in_flight
            .iter()
            .filter(|(_, f)| now.saturating_duration_since(f.since) >= timeout)
            .map(|(&t, _)| t)
            .collect();
        if expired.is_empty() {
            return Ok(expired);
        }
        self.requeue(expired)
    }

    /// Requeues everything `session` had in flight.
    pub fn close_session(&mut self, session: u64) -> Result<Vec<u32>> {
        let owned: Vec<u32> = self
            .in_flight
            .iter()
            .filter(|(_, f)| f.session == session)
            .map(|(&t, _)| t)
            .collect();
        if owned.is_empty() {
            return Ok(owned);
        }
        self.requeue(owned)
    }
}

/// Primary run parameters.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub listen: String,
    pub expected_workers: usize,
    pub security: SecurityMode,
    pub store: StoreMode,
    pub tile_size: i64,
    pub model: OpticalModel,
    pub opc: OpcParams,
    pub frag_len: i64,
    pub input: String,
    pub output: String,
    pub inflight_timeout: Duration,
    pub max_redispatch: u32,
    /// How long to wait for the first worker.
    pub connect_timeout: Duration,
}

impl RunConfig {
    pub fn new(input: &str, output: &str, tile_size: i64) -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            expected_workers: 1,
            security: SecurityMode::Plain,
            store: StoreMode::Passthrough,
            tile_size,
            model: OpticalModel::default(),
            opc: OpcParams::default(),
            frag_len: DEFAULT_FRAG_LEN,
            input: input.into(),
            output: output.into(),
            inflight_timeout: DEFAULT_INFLIGHT_TIMEOUT,
            max_redispatch: DEFAULT_MAX_REDISPATCH,
            connect_timeout: Duration::from_secs(60),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClusterError::Config(m));
        if self.expected_workers < 1 {
            return bad("expected_workers must be at least 1".into());
        }
        if self.tile_size < 1 {
            return bad(format!("tile size must be at least 1, got {}", self.tile_size));
        }
        if self.frag_len < 1 {
            return bad(format!("frag_len must be at least 1, got {}", self.frag_len));
        }
        if self.inflight_timeout.is_zero() {
            return bad("in-flight timeout must be positive".into());
        }
        validate_name(&self.input)?;
        validate_name(&self.output)?;
        self.opc.validate()?;
        Ok(())
    }

    fn wire(&self) -> WireParams {
        WireParams {
            model: self.model,
            opc: self.opc,
            frag_len: self.frag_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileReport {
    pub tile_id: u32,
    pub polygons: usize,
    pub stats: CorrectionStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Seconds per entry of [`PHASES`].
    pub phases: [f64; 5],
    pub wall_seconds: f64,
    pub tiles: Vec<TileReport>,
    pub workers_observed: usize,
    pub redispatches: u32,
    /// Conservation checks passed during the run.
    pub queue_checks: u64,
    pub output_id: String,
    /// Hex SHA-256 of the merged LAYOUTv1 bytes.
    pub output_digest: String,
}

impl RunSummary {
    pub fn converged(&self) -> bool {
        self.tiles.iter().all(|t| t.stats.converged)
    }

    pub fn max_abs_epe(&self) -> f64 {
        self.tiles.iter().map(|t| t.stats.max_abs_epe).fold(0.0, f64::max)
    }
}

struct Inner {
    queue: QueueState,
    stitcher: Option<Stitcher>,
    abort: Option<ClusterError>,
    workers: usize,
    next_session: u64,
}

/// Shared primary-side state; one session per worker connection.
#[derive(Clone)]
pub struct Hub {
    tiling: Arc<Tiling>,
    params: Vec<u8>,
    state: Arc<(Mutex<Inner>, Condvar)>,
}

impl fmt::Debug for Hub {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Hub").field("tiles", &self.tiling.len()).finish_non_exhaustive()
    }
}

impl Hub {
    pub fn new(original: Arc<Layout>, tiling: Tiling, params: WireParams, max_redispatch: u32) -> Result<Self> {
        let stitcher = Stitcher::new(original, &tiling, params.frag_len)?;
        let inner = Inner {
            queue: QueueState::new(tiling.len(), max_redispatch),
            stitcher: Some(stitcher),
            abort: None,
            workers: 0,
            next_session: 0,
        };
        Ok(Self {
            tiling: Arc::new(tiling),
            params: params.encode(),
            state: Arc::new((Mutex::new(inner), Condvar::new())),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.state.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn fail(&self, g: &mut Inner, e: ClusterError) {
        log::error!("run aborted: {e}");
        g.abort.get_or_insert(e);
        self.state.1.notify_all();
    }

    /// Runs the HELLO exchange and then serves work requests until the
    /// worker leaves or the queue is complete.
    pub fn session(&self, mut ch: Channel) -> Result<()> {
        ch.set_read_timeout(Some(HELLO_TIMEOUT))?;
        let hello = match read_frame(&mut ch) {
            Ok(Some(f)) if f.kind == MsgType::Hello => decode_hello(&f.payload),
            Ok(Some(f)) => Err(ClusterError::Protocol(format!("expected HELLO, got {:?}", f.kind))),
            Ok(None) => Err(ClusterError::Truncated),
            Err(e) => Err(e),
        };
        if let Err(e) = hello {
            let _ = write_frame(&mut ch, MsgType::Err, e.to_string().as_bytes());
            ch.shutdown();
            return Err(e);
        }
        ch.set_read_timeout(None)?;
        let sid = {
            let mut g = self.lock();
            g.workers += 1;
            g.next_session += 1;
            g.next_session
        };
        log::info!("worker session {sid} joined from {:?}", ch.peer_addr().ok());
        write_frame(&mut ch, MsgType::Ack, &self.params)?;
        let r = self.serve(sid, &mut ch);
        let mut g = self.lock();
        match g.queue.close_session(sid) {
            Ok(back) if !back.is_empty() => log::info!("session {sid} closed; requeued tiles {back:?}"),
            Ok(_) => {}
            Err(e) => self.fail(&mut g, e),
        }
        self.state.1.notify_all();
        drop(g);
        if let Err(e) = &r {
            log::info!("worker session {sid} ended: {e}");
        }
        r
    }

    fn serve(&self, sid: u64, ch: &mut Channel) -> Result<()> {
        loop {
            let Some(f) = read_frame(ch)? else {
                return Ok(());
            };
            match f.kind {
                MsgType::WorkReq => match self.next_tile(sid)? {
                    Some(t) => {
                        let e = &self.tiling.elements[t as usize];
                        write_frame(ch, MsgType::Work, &encode_work(t, e.core, &e.halo_geom)?)?;
                    }
                    None => {
                        write_frame(ch, MsgType::NoMoreWork, &[])?;
                    }
                },
                MsgType::Result => {
                    let result = match decode_result(&f.payload) {
                        Ok(r) => r,
                        Err(e) => {
                            let _ = write_frame(ch, MsgType::Err, e.to_string().as_bytes());
                            return Err(e);
                        }
                    };
                    self.record(result)?;
                    write_frame(ch, MsgType::Ack, &[])?;
                }
                MsgType::Err => {
                    return Err(ClusterError::Remote(String::from_utf8_lossy(&f.payload).into_owned()));
                }
                other => {
                    let e = ClusterError::Protocol(format!("unexpected {other:?} from worker"));
                    let _ = write_frame(ch, MsgType::Err, e.to_string().as_bytes());
                    return Err(e);
                }
            }
        }
    }

    /// Blocks until a tile is available, or returns `None` once the run is
    /// complete or aborted.
    fn next_tile(&self, sid: u64) -> Result<Option<u32>> {
        let mut g = self.lock();
        loop {
            if g.queue.is_complete() || g.abort.is_some() {
                return Ok(None);
            }
            match g.queue.dispatch(sid, Instant::now()) {
                Ok(Some(t)) => return Ok(Some(t)),
                Ok(None) => {}
                Err(e) => {
                    self.fail(&mut g, e);
                    return Ok(None);
                }
            }
            g = self.state.1.wait_timeout(g, POLL).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    fn record(&self, result: TileResult) -> Result<()> {
        let t = result.tile_id;
        let element = self
            .tiling
            .elements
            .get(t as usize)
            .ok_or(TileError::UnknownTile(t))?;
        let mut g = self.lock();
        match g.queue.complete(result.clone()) {
            Ok(Completion::Duplicate) => {
                log::debug!("duplicate result for tile {t} discarded");
                Ok(())
            }
            Ok(Completion::Accepted) => {
                let accepted = match g.stitcher.as_mut() {
                    Some(s) => s.accept(element, &result),
                    None => Ok(()),
                };
                if let Err(e) = accepted {
                    self.fail(&mut g, e.into());
                }
                self.state.1.notify_all();
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                self.fail(&mut g, e);
                Err(ClusterError::Protocol(msg))
            }
        }
    }

    /// Waits for every tile to be done, requeueing expired ones.
    pub fn wait(&self, inflight_timeout: Duration, connect_timeout: Duration) -> Result<()> {
        let start = Instant::now();
        let mut g = self.lock();
        loop {
            if let Some(e) = g.abort.take() {
                return Err(e);
            }
            if g.queue.is_complete() {
                return Ok(());
            }
            if g.workers == 0 && start.elapsed() >= connect_timeout {
                return Err(ClusterError::NoWorkers(connect_timeout));
            }
            match g.queue.requeue_expired(Instant::now(), inflight_timeout) {
                Ok(back) if !back.is_empty() => {
                    log::warn!("in-flight timeout; requeued tiles {back:?}");
                    self.state.1.notify_all();
                }
                Ok(_) => {}
                Err(e) => return Err(e),
            }
            g = self.state.1.wait_timeout(g, POLL).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    fn take_results(&self) -> Result<(Stitcher, Vec<TileReport>, usize, u32, u64)> {
        let mut g = self.lock();
        let stitcher = g
            .stitcher
            .take()
            .ok_or_else(|| ClusterError::Protocol("results already taken".into()))?;
        let tiles = g
            .queue
            .done()
            .map(|r| TileReport {
                tile_id: r.tile_id,
                polygons: self.tiling.elements[r.tile_id as usize].halo_geom.polygons().len(),
                stats: r.stats,
            })
            .collect();
        let redispatches = (0..g.queue.total() as u32).map(|t| g.queue.redispatches(t)).sum();
        Ok((stitcher, tiles, g.workers, redispatches, g.queue.checks()))
    }
}

/// A bound primary, ready to run.
pub struct Primary {
    config: RunConfig,
    listener: transport::Listener,
    store: Box<dyn ObjectStore>,
}

impl fmt::Debug for Primary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Primary").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Primary {
    pub fn bind(config: RunConfig, creds: Option<&Credentials>, store: Box<dyn ObjectStore>) -> Result<Self> {
        config.validate()?;
        let listener = transport::listen(config.listen.as_str(), config.security, creds)?;
        Ok(Self {
            config,
            listener,
            store,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.tcp.local_addr()?)
    }

    /// Reads, partitions, serves workers until every tile is done, stitches
    /// and writes the merged layout. Returns after the output is stored.
    pub fn run(self) -> Result<RunSummary> {
        let c = &self.config;
        let wall = Instant::now();
        let mut phases = [0.0; 5];

        let t = Instant::now();
        let raw = self.store.get(&c.input)?;
        let text = String::from_utf8(raw).map_err(|_| ClusterError::Protocol("input is not UTF-8".into()))?;
        let original = Arc::new(parse_layout(&text)?);
        phases[0] = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let tiling = partition(&original, c.tile_size, &c.model, &c.opc)?;
        log::info!("{} tiles of {} for {} polygons", tiling.len(), c.tile_size, original.polygons().len());
        let hub = Hub::new(original, tiling, c.wire(), c.max_redispatch)?;
        phases[1] = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let tcp = self.listener.tcp.try_clone()?;
            let acc: Acceptor = self.listener.acceptor.clone();
            let hub = hub.clone();
            let stop = stop.clone();
            thread::Builder::new().name("primary-accept".into()).spawn(move || {
                for conn in tcp.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let (acc, hub) = (acc.clone(), hub.clone());
                    let _ = thread::Builder::new().name("primary-session".into()).spawn(move || {
                        match acc.establish(stream, None) {
                            Ok(ch) => {
                                let _ = hub.session(ch);
                            }
                            Err(e) => log::warn!("rejected connection: {e}"),
                        }
                    });
                }
            })?
        };
        let waited = hub.wait(c.inflight_timeout, c.connect_timeout);
        stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(addr);
        let _ = acceptor.join();
        waited?;
        phases[2] = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (stitcher, tiles, workers_observed, redispatches, queue_checks) = hub.take_results()?;
        let merged = write_layout(&stitcher.finish()?);
        phases[3] = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let output_id = self.store.put(&c.output, merged.as_bytes())?;
        phases[4] = t.elapsed().as_secs_f64();

        if workers_observed < c.expected_workers {
            log::warn!("expected {} workers, saw {workers_observed}", c.expected_workers);
        }
        Ok(RunSummary {
            phases,
            wall_seconds: wall.elapsed().as_secs_f64(),
            tiles,
            workers_observed,
            redispatches,
            queue_checks,
            output_id,
            output_digest: hex::encode(Sha256::digest(merged.as_bytes())),
        })
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub primary: String,
    pub security: SecurityMode,
    pub creds: Option<Credentials>,
    /// Copy of every byte on the wire, both directions.
    pub tap: Option<WireSink>,
    /// Drop the connection on receiving a tile after this many completed.
    pub fail_after: Option<usize>,
    /// Keep retrying a refused connection for this long.
    pub connect_retry: Duration,
}

impl WorkerConfig {
    pub fn new(primary: impl Into<String>, security: SecurityMode, creds: Option<Credentials>) -> Self {
        Self {
            primary: primary.into(),
            security,
            creds,
            tap: None,
            fail_after: None,
            connect_retry: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSummary {
    pub tiles: usize,
    pub compute_seconds: f64,
    pub peer: Option<PeerIdentity>,
}

fn expect(ch: &mut Channel, want: MsgType) -> Result<Vec<u8>> {
    match read_frame(ch)? {
        Some(f) if f.kind == want => Ok(f.payload),
        Some(f) if f.kind == MsgType::Err => Err(ClusterError::Remote(String::from_utf8_lossy(&f.payload).into_owned())),
        Some(f) => Err(ClusterError::Protocol(format!("expected {want:?}, got {:?}", f.kind))),
        None => Err(ClusterError::Truncated),
    }
}

fn connect_with_retry(cfg: &WorkerConfig) -> Result<Channel> {
    let start = Instant::now();
    loop {
        match transport::connect(cfg.primary.as_str(), cfg.security, cfg.creds.as_ref(), cfg.tap.clone()) {
            Err(TransportError::Io(e))
                if e.kind() == io::ErrorKind::ConnectionRefused && start.elapsed() < cfg.connect_retry =>
            {
                thread::sleep(Duration::from_millis(100));
            }
            r => return Ok(r?),
        }
    }
}

/// Pulls and corrects tiles until the primary says there is no more work.
pub fn run_worker(cfg: &WorkerConfig) -> Result<WorkerSummary> {
    let mut ch = connect_with_retry(cfg)?;
    let peer = ch.peer().cloned();
    let mut nonce = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut nonce);
    write_frame(&mut ch, MsgType::Hello, &encode_hello(&nonce))?;
    let params = WireParams::decode(&expect(&mut ch, MsgType::Ack)?)?;
    let mut tiles = 0;
    let mut compute = 0.0;
    loop {
        write_frame(&mut ch, MsgType::WorkReq, &[])?;
        let f = read_frame(&mut ch)?.ok_or(ClusterError::Truncated)?;
        match f.kind {
            MsgType::NoMoreWork => break,
            MsgType::Work => {}
            MsgType::Err => return Err(ClusterError::Remote(String::from_utf8_lossy(&f.payload).into_owned())),
            k => return Err(ClusterError::Protocol(format!("unexpected {k:?} from primary"))),
        }
        if cfg.fail_after.is_some_and(|n| tiles >= n) {
            ch.shutdown();
            return Err(ClusterError::InjectedFault);
        }
        let (tile_id, _core, layout) = decode_work(&f.payload)?;
        let t = Instant::now();
        let outcome = correct_tile(&layout, &params.model, &params.opc, params.frag_len);
        compute += t.elapsed().as_secs_f64();
        let c = match outcome {
            Ok(c) => c,
            Err(e) => {
                let _ = write_frame(&mut ch, MsgType::Err, format!("tile {tile_id}: {e}").as_bytes());
                return Err(e.into());
            }
        };
        let result = TileResult {
            tile_id,
            corrected: c.layout,
            stats: c.stats,
            offsets: c.offsets,
        };
        write_frame(&mut ch, MsgType::Result, &encode_result(&result)?)?;
        expect(&mut ch, MsgType::Ack)?;
        tiles += 1;
    }
    ch.shutdown();
    Ok(WorkerSummary {
        tiles,
        compute_seconds: compute,
        peer,
    })
}

/// One in-process worker for [`run_local`].
#[derive(Debug, Clone, Default)]
pub struct LocalWorker {
    pub creds: Option<Credentials>,
    pub tap: Option<WireSink>,
    pub fail_after: Option<usize>,
}

#[derive(Debug)]
pub struct LocalRun {
    pub summary: RunSummary,
    pub workers: Vec<Result<WorkerSummary>>,
}

/// Primary plus worker threads on loopback.
pub fn run_local(
    config: RunConfig,
    primary_creds: Option<&Credentials>,
    store: Box<dyn ObjectStore>,
    workers: Vec<LocalWorker>,
) -> Result<LocalRun> {
    if workers.is_empty() {
        return Err(ClusterError::Config("at least one worker".into()));
    }
    let security = config.security;
    let primary = Primary::bind(config, primary_creds, store)?;
    let addr = primary.local_addr()?.to_string();
    let handles: Vec<_> = workers
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let cfg = WorkerConfig {
                tap: w.tap,
                fail_after: w.fail_after,
                ..WorkerConfig::new(addr.clone(), security, w.creds)
            };
            thread::Builder::new()
                .name(format!("worker-{i}"))
                .spawn(move || run_worker(&cfg))
        })
        .collect::<io::Result<_>>()?;
    let summary = primary.run();
    let workers: Vec<_> = handles
        .into_iter()
        .map(|h| h.join().unwrap_or_else(|_| Err(ClusterError::Protocol("worker panicked".into()))))
        .collect();
    Ok(LocalRun {
        summary: summary?,
        workers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{gen_random, GenParams};
    use crate::secure_store::PlainStore;
    use rand::{Rng, SeedableRng};
    use std::net::TcpListener;

    #[test]
    fn empty_frame_is_five_bytes() {
        assert_eq!(encode_frame(MsgType::WorkReq, &[]).unwrap(), vec![0, 0, 0, 0, 2]);
    }

    #[test]
    fn frames_round_trip_through_any_split() {
        let mut payload = vec![0u8; 1 << 20];
        rand_chacha::ChaCha8Rng::seed_from_u64(1).fill(&mut payload[..]);
        let bytes = encode_frame(MsgType::Work, &payload).unwrap();
        let f = decode_frame(&bytes).unwrap();
        assert_eq!((f.kind, f.payload == payload), (MsgType::Work, true));

        let mut stream = bytes.clone();
        stream.extend(encode_frame(MsgType::Ack, b"x").unwrap());
        let mut d = FrameDecoder::new();
        let mut got = Vec::new();
        for piece in stream.chunks(4093) {
            d.push(piece);
            while let Some(f) = d.next_frame().unwrap() {
                got.push(f);
            }
        }
        d.finish().unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].payload, b"x");
    }

    #[test]
    fn frame_errors() {
        let mut d = FrameDecoder::new();
        d.push(&[0xff, 0xff, 0xff, 0xff, 0x02]);
        assert!(matches!(d.next_frame(), Err(ClusterError::FrameTooLarge(4294967295))));
        assert!(matches!(decode_frame(&[0, 0, 0, 0, 0x09]), Err(ClusterError::UnknownType(9))));
        assert!(matches!(decode_frame(&[0, 0, 0, 3, 0x07, b'a']), Err(ClusterError::Truncated)));
        let mut r: &[u8] = &[0, 0, 0, 3, 0x07, b'a'];
        assert!(matches!(read_frame(&mut r), Err(ClusterError::Truncated)));
        let mut r: &[u8] = &[];
        assert!(read_frame(&mut r).unwrap().is_none());
        assert!(encode_frame(MsgType::Work, &vec![0; MAX_FRAME as usize + 1]).is_err());
    }

    #[test]
    fn messages_round_trip() {
        let l = gen_random(&GenParams {
            n_polys: 3,
            bbox: Rect::new(0, 0, 1000, 1000),
            ..GenParams::regression(2)
        })
        .unwrap();
        let (id, core, back) = decode_work(&encode_work(7, Rect::new(-5, 0, 500, 1000), &l).unwrap()).unwrap();
        assert_eq!((id, core, back), (7, Rect::new(-5, 0, 500, 1000), l.clone()));

        let c = correct_tile(&l, &OpticalModel::default(), &OpcParams::default(), DEFAULT_FRAG_LEN).unwrap();
        let r = TileResult {
            tile_id: 3,
            corrected: c.layout,
            stats: c.stats,
            offsets: c.offsets,
        };
        assert_eq!(decode_result(&encode_result(&r).unwrap()).unwrap(), r);

        let p = WireParams {
            model: OpticalModel::with_sigma(15.0, 0.4).unwrap(),
            opc: OpcParams::default(),
            frag_len: 55,
        };
        assert_eq!(WireParams::decode(&p.encode()).unwrap(), p);
        assert_eq!(decode_hello(&encode_hello(&[9; 16])).unwrap(), [9; 16]);
        assert!(decode_hello(b"EDAX\x01aaaaaaaaaaaaaaaa").is_err());
    }

    fn result(t: u32) -> TileResult {
        TileResult {
            tile_id: t,
            corrected: Layout::new(
                crate::layout::GridPitch::from_nm(1).unwrap(),
                Rect::new(0, 0, 10, 10),
                vec![],
            )
            .unwrap(),
            stats: CorrectionStats {
                iterations: 1,
                max_abs_epe: 0.0,
                clamp_count: 0,
                converged: true,
            },
            offsets: vec![t as i64],
        }
    }

    #[test]
    fn queue_transitions_conserve_tiles() {
        let t0 = Instant::now();
        let mut q = QueueState::new(3, 3);
        assert_eq!(q.requeue_expired(t0, Duration::from_secs(1)).unwrap(), Vec::<u32>::new());
        assert_eq!(q.pending(), vec![0, 1, 2]);
        for s in 0..3 {
            q.dispatch(s, t0 + Duration::from_secs(s)).unwrap();
        }
        assert_eq!(q.dispatch(9, t0).unwrap(), None);
        // only tile 0 is older than 2 s at t0 + 2.5 s
        let back = q.requeue_expired(t0 + Duration::from_millis(2500), Duration::from_secs(2)).unwrap();
        assert_eq!(back, vec![0]);
        assert_eq!(q.pending(), vec![0]);
        assert_eq!(q.in_flight(), vec![1, 2]);
        assert_eq!(q.redispatches(0), 1);
        assert_eq!(q.complete(result(1)).unwrap(), Completion::Accepted);
        assert_eq!(q.complete(result(1)).unwrap(), Completion::Duplicate);
        let mut other = result(1);
        other.offsets = vec![5];
        assert!(matches!(q.complete(other), Err(ClusterError::Nondeterministic(1))));
        assert_eq!(q.close_session(2).unwrap(), vec![2]);
        assert_eq!(q.pending(), vec![2, 0]);
        // a late result for a requeued tile still counts
        assert_eq!(q.complete(result(0)).unwrap(), Completion::Accepted);
        assert_eq!(q.pending(), vec![2]);
        assert!(q.conserved());
        assert!(q.checks() > 0);
    }

    #[test]
    fn redispatch_cap_aborts() {
        let t0 = Instant::now();
        let mut q = QueueState::new(1, 3);
        for round in 0..3 {
            q.dispatch(round, t0).unwrap();
            assert_eq!(q.close_session(round).unwrap(), vec![0]);
        }
        q.dispatch(7, t0).unwrap();
        let e = q.requeue_expired(t0 + Duration::from_secs(5), Duration::from_secs(1));
        assert!(matches!(e, Err(ClusterError::Exhausted { tile: 0, attempts: 3 })));
        assert!(q.conserved());
    }

    fn hub_for(layout: Layout, tile: i64) -> Hub {
        let p = WireParams {
            model: OpticalModel::default(),
            opc: OpcParams::default(),
            frag_len: DEFAULT_FRAG_LEN,
        };
        let t = partition(&layout, tile, &p.model, &p.opc).unwrap();
        Hub::new(Arc::new(layout), t, p, 3).unwrap()
    }

    /// Serves each accepted connection with `hub` on a background thread.
    fn serve(hub: Hub) -> SocketAddr {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        let acc = Acceptor::new(SecurityMode::Plain, None).unwrap();
        thread::spawn(move || {
            for s in l.incoming().flatten() {
                let (acc, hub) = (acc.clone(), hub.clone());
                thread::spawn(move || hub.session(acc.establish(s, None).unwrap()));
            }
        });
        addr
    }

    fn small() -> Layout {
        gen_random(&GenParams {
            n_polys: 2,
            bbox: Rect::new(0, 0, 800, 800),
            ..GenParams::regression(4)
        })
        .unwrap()
    }

    #[test]
    fn empty_queue_sends_no_more_work() {
        let hub = hub_for(small(), 1000);
        {
            let mut g = hub.lock();
            g.queue = QueueState::new(0, 3);
        }
        let addr = serve(hub);
        let s = run_worker(&WorkerConfig::new(addr.to_string(), SecurityMode::Plain, None)).unwrap();
        assert_eq!(s.tiles, 0);
    }

    #[test]
    fn wrong_magic_gets_err_and_close() {
        let addr = serve(hub_for(small(), 1000));
        let mut s = TcpStream::connect(addr).unwrap();
        let mut bad = encode_hello(&[0; 16]);
        bad[3] = b'X';
        write_frame(&mut s, MsgType::Hello, &bad).unwrap();
        let f = read_frame(&mut s).unwrap().unwrap();
        assert_eq!(f.kind, MsgType::Err);
        assert!(String::from_utf8(f.payload).unwrap().contains("magic"));
        assert!(read_frame(&mut s).unwrap().is_none());
    }

    #[test]
    fn duplicate_result_is_acked_and_discarded() {
        let hub = hub_for(small(), 1000);
        let addr = serve(hub.clone());
        let mut s = TcpStream::connect(addr).unwrap();
        write_frame(&mut s, MsgType::Hello, &encode_hello(&[1; 16])).unwrap();
        let params = WireParams::decode(&read_frame(&mut s).unwrap().unwrap().payload).unwrap();
        write_frame(&mut s, MsgType::WorkReq, &[]).unwrap();
        let (id, _, l) = decode_work(&read_frame(&mut s).unwrap().unwrap().payload).unwrap();
        let c = correct_tile(&l, &params.model, &params.opc, params.frag_len).unwrap();
        let r = TileResult {
            tile_id: id,
            corrected: c.layout,
            stats: c.stats,
            offsets: c.offsets,
        };
        for _ in 0..2 {
            write_frame(&mut s, MsgType::Result, &encode_result(&r).unwrap()).unwrap();
            assert_eq!(read_frame(&mut s).unwrap().unwrap().kind, MsgType::Ack);
        }
        let g = hub.lock();
        assert_eq!(g.queue.done_count(), 1);
        assert_eq!(g.queue.done().next().unwrap(), &r);
    }

    #[test]
    fn single_tile_single_worker() {
        let tmp = tempfile::tempdir().unwrap();
        let store = PlainStore::open(tmp.path()).unwrap();
        store.put("in.lay", write_layout(&small()).as_bytes()).unwrap();
        let run = run_local(
            RunConfig::new("in.lay", "out.lay", 1000),
            None,
            Box::new(store.clone()),
            vec![LocalWorker::default()],
        )
        .unwrap();
        assert_eq!(run.summary.tiles.len(), 1);
        assert_eq!(run.summary.workers_observed, 1);
        assert_eq!(run.workers[0].as_ref().unwrap().tiles, 1);
        let mono = correct_tile(&small(), &OpticalModel::default(), &OpcParams::default(), DEFAULT_FRAG_LEN).unwrap();
        assert_eq!(store.get("out.lay").unwrap(), write_layout(&mono.layout).into_bytes());
    }

    #[test]
    fn no_worker_times_out() {
        let tmp = tempfile::tempdir().unwrap();
        let store = PlainStore::open(tmp.path()).unwrap();
        store.put("in.lay", write_layout(&small()).as_bytes()).unwrap();
        let mut cfg = RunConfig::new("in.lay", "out.lay", 1000);
        cfg.connect_timeout = Duration::from_millis(300);
        let p = Primary::bind(cfg, None, Box::new(store)).unwrap();
        assert!(matches!(p.run(), Err(ClusterError::NoWorkers(_))));
    }
}
