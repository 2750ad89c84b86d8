//! Two-party session: frames, typed messages, the phase machine and the
//! server/client drivers. Transports only move whole frames.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::adapt::{adapt, backend_logits, evaluate, fresh_head, labels_for_ids, AdaptConfig, LossOracle};
use crate::bytes::{Reader, Writer};
use crate::client::{client_loss, prepare_uploads, ClientConfig, ClientUploads};
use crate::error::{bail, Error, Result};
use crate::quant::{QuantizedFrontend, QuantizedRep};
use crate::server::ServerState;
use crate::tensor::Tensor;
use crate::vit::{fnv1a, read_shaped, write_shaped, ModelSpec};

pub const FRAME_MAGIC: &[u8; 4] = b"SAPM";
pub const FRAME_VERSION: u16 = 1;
/// magic, version, tag, session, seq, payload length
pub const FRAME_HEADER_LEN: usize = 4 + 2 + 1 + 8 + 8 + 8;
pub const FRAME_TRAILER_LEN: usize = 4;
/// Upper bound on a payload; larger lengths are treated as corruption.
pub const MAX_PAYLOAD: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tag {
    Hello = 1,
    FrontendPackage = 2,
    RepUpload = 3,
    Logits = 4,
    LossGrad = 5,
    EvalRequest = 6,
    EvalResult = 7,
    Done = 8,
    Error = 9,
}

impl Tag {
    pub const ALL: [Tag; 9] = [
        Tag::Hello,
        Tag::FrontendPackage,
        Tag::RepUpload,
        Tag::Logits,
        Tag::LossGrad,
        Tag::EvalRequest,
        Tag::EvalResult,
        Tag::Done,
        Tag::Error,
    ];

    pub fn from_u8(v: u8) -> Option<Tag> {
        Tag::ALL.iter().copied().find(|&t| t as u8 == v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub session: u64,
    pub seq: u64,
    pub payload: Vec<u8>,
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut w = Writer::with_capacity(FRAME_HEADER_LEN + frame.payload.len() + FRAME_TRAILER_LEN);
    w.bytes(FRAME_MAGIC);
    w.u16(FRAME_VERSION);
    w.u8(frame.tag as u8);
    w.u64(frame.session);
    w.u64(frame.seq);
    w.u64(frame.payload.len() as u64);
    w.bytes(&frame.payload);
    w.u32(crc32fast::hash(&frame.payload));
    w.finish()
}

/// Validates a frame header and returns the total frame length it announces.
pub fn frame_len(header: &[u8]) -> Result<usize> {
    let mut r = Reader::new(header);
    if r.take(4)? != FRAME_MAGIC {
        return Err(Error::Decode { offset: 0, reason: "bad frame magic".into() });
    }
    let version = r.u16()?;
    if version != FRAME_VERSION {
        return Err(Error::Decode { offset: 4, reason: format!("unsupported frame version {version}") });
    }
    let tag = r.u8()?;
    if Tag::from_u8(tag).is_none() {
        return Err(Error::Decode { offset: 6, reason: format!("unknown tag {tag}") });
    }
    r.u64()?;
    r.u64()?;
    let at = r.offset();
    let len = r.u64()?;
    if len > MAX_PAYLOAD {
        return Err(Error::Decode { offset: at, reason: format!("payload length {len} exceeds limit") });
    }
    Ok(FRAME_HEADER_LEN + len as usize + FRAME_TRAILER_LEN)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Frame> {
    let total = frame_len(bytes)?;
    if bytes.len() != total {
        return Err(Error::Decode {
            offset: bytes.len().min(total),
            reason: format!("frame length {} but header announces {}", bytes.len(), total),
        });
    }
    let mut r = Reader::new(bytes);
    r.take(6)?;
    let tag = Tag::from_u8(r.u8()?).expect("checked by frame_len");
    let session = r.u64()?;
    let seq = r.u64()?;
    let len = r.u64()? as usize;
    let payload = r.take(len)?.to_vec();
    let at = r.offset();
    let crc = r.u32()?;
    if crc != crc32fast::hash(&payload) {
        return Err(Error::Decode { offset: at, reason: "CRC mismatch".into() });
    }
    Ok(Frame { tag, session, seq, payload })
}

/// Which representation set an upload or evaluation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RepSet {
    Train = 0,
    /// Client test images through the noisy frontend, for evaluation only.
    Test = 1,
}

impl RepSet {
    fn from_u8(v: u8, r: &Reader<'_>) -> Result<Self> {
        match v {
            0 => Ok(RepSet::Train),
            1 => Ok(RepSet::Test),
            _ => Err(r.error(format!("unknown representation set {v}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub spec_hash: u64,
    /// Session seed: task-module init and batch order on the server.
    pub seed: u64,
    pub classes: u16,
    pub train_samples: u32,
    /// Number of training copies (`N^Aug + 1`).
    pub copies: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepUpload {
    pub set: RepSet,
    pub index: u32,
    pub rep: QuantizedRep,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    FrontendPackage(Vec<u8>),
    RepUpload(RepUpload),
    Logits { ids: Vec<u32>, logits: Tensor },
    LossGrad { loss: f64, grad: Tensor },
    EvalRequest { set: RepSet, logits: Tensor },
    EvalResult { set: RepSet, accuracy: f64 },
    Done,
    Error(String),
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::Hello(_) => Tag::Hello,
            Message::FrontendPackage(_) => Tag::FrontendPackage,
            Message::RepUpload(_) => Tag::RepUpload,
            Message::Logits { .. } => Tag::Logits,
            Message::LossGrad { .. } => Tag::LossGrad,
            Message::EvalRequest { .. } => Tag::EvalRequest,
            Message::EvalResult { .. } => Tag::EvalResult,
            Message::Done => Tag::Done,
            Message::Error(_) => Tag::Error,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::Hello(h) => {
                w.u64(h.spec_hash);
                w.u64(h.seed);
                w.u16(h.classes);
                w.u32(h.train_samples);
                w.u32(h.copies);
            }
            Message::FrontendPackage(b) => w.bytes(b),
            Message::RepUpload(u) => {
                w.u8(u.set as u8);
                w.u32(u.index);
                w.u8(u.rep.shape.len() as u8);
                for &d in &u.rep.shape {
                    w.u32(d as u32);
                }
                w.f64(u.rep.scale);
                for &c in &u.rep.codes {
                    w.i8(c);
                }
            }
            Message::Logits { ids, logits } => {
                w.u32(ids.len() as u32);
                for &id in ids {
                    w.u32(id);
                }
                write_shaped(&mut w, logits);
            }
            Message::LossGrad { loss, grad } => {
                w.f64(*loss);
                write_shaped(&mut w, grad);
            }
            Message::EvalRequest { set, logits } => {
                w.u8(*set as u8);
                write_shaped(&mut w, logits);
            }
            Message::EvalResult { set, accuracy } => {
                w.u8(*set as u8);
                w.f64(*accuracy);
            }
            Message::Done => {}
            Message::Error(s) => w.str(s),
        }
        w.finish()
    }

    /// Parses a payload; offsets in errors are relative to the frame start.
    pub fn parse(tag: Tag, payload: &[u8]) -> Result<Message> {
        let mut r = Reader::with_base(payload, FRAME_HEADER_LEN);
        let msg = match tag {
            Tag::Hello => Message::Hello(Hello {
                spec_hash: r.u64()?,
                seed: r.u64()?,
                classes: r.u16()?,
                train_samples: r.u32()?,
                copies: r.u32()?,
            }),
            Tag::FrontendPackage => Message::FrontendPackage(r.take(payload.len())?.to_vec()),
            Tag::RepUpload => {
                let set = RepSet::from_u8(r.u8()?, &r)?;
                let index = r.u32()?;
                let rank = r.u8()? as usize;
                if rank != 3 {
                    return Err(r.error(format!("representation rank {rank}, expected 3")));
                }
                let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
                let scale = r.f64()?;
                if !(scale > 0.0) || !scale.is_finite() {
                    return Err(r.error(format!("invalid representation scale {scale}")));
                }
                let n =
                    shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.error("shape overflow"))?;
                let codes = r.take(n)?.iter().map(|&b| b as i8).collect();
                Message::RepUpload(RepUpload { set, index, rep: QuantizedRep { shape: shape.to_vec(), codes, scale } })
            }
            Tag::Logits => {
                let n = r.u32()? as usize;
                if r.remaining() / 4 < n {
                    return Err(r.error(format!("{n} ids do not fit")));
                }
                let ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let logits = read_shaped(&mut r)?;
                if logits.rank() != 2 || logits.shape()[0] != n {
                    return Err(r.error(format!("logits {:?} for {} ids", logits.shape(), n)));
                }
                Message::Logits { ids, logits }
            }
            Tag::LossGrad => Message::LossGrad { loss: r.f64()?, grad: read_shaped(&mut r)? },
            Tag::EvalRequest => {
                Message::EvalRequest { set: RepSet::from_u8(r.u8()?, &r)?, logits: read_shaped(&mut r)? }
            }
            Tag::EvalResult => Message::EvalResult { set: RepSet::from_u8(r.u8()?, &r)?, accuracy: r.f64()? },
            Tag::Done => Message::Done,
            Tag::Error => Message::Error(r.str()?),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Moves whole encoded frames between the parties.
pub trait Transport {
    fn send(&mut self, frame: &[u8]) -> Result<()>;
    fn recv(&mut self) -> Result<Vec<u8>>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        (**self).recv()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Traffic {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// One side of a session: session id binding and per-direction sequence numbers.
pub struct Endpoint<T> {
    transport: T,
    session: Option<u64>,
    next_seq: u64,
    last_seen: Option<u64>,
    pub traffic: Traffic,
}

impl<T: Transport> Endpoint<T> {
    /// `session` None adopts the id of the first frame received.
    pub fn new(transport: T, session: Option<u64>) -> Self {
        Self { transport, session, next_seq: 0, last_seen: None, traffic: Traffic::default() }
    }

    pub fn session(&self) -> Option<u64> {
        self.session
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        let Some(session) = self.session else {
            bail!(Protocol, "cannot send before a session id is known");
        };
        let bytes = encode(&Frame { tag: msg.tag(), session, seq: self.next_seq, payload: msg.payload() });
        self.transport.send(&bytes)?;
        self.next_seq += 1;
        self.traffic.frames_sent += 1;
        self.traffic.bytes_sent += bytes.len() as u64;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message> {
        let bytes = self.transport.recv()?;
        self.traffic.frames_received += 1;
        self.traffic.bytes_received += bytes.len() as u64;
        let frame = decode(&bytes)?;
        match self.session {
            None => self.session = Some(frame.session),
            Some(s) if s != frame.session => bail!(Protocol, "frame for session {} on session {}", frame.session, s),
            _ => {}
        }
        if self.last_seen.is_some_and(|last| frame.seq <= last) {
            bail!(Protocol, "sequence number {} does not increase", frame.seq);
        }
        self.last_seen = Some(frame.seq);
        Message::parse(frame.tag, &frame.payload)
    }

    /// Best-effort error notice to the peer.
    pub fn send_error(&mut self, reason: &str) {
        if self.session.is_some() {
            let _ = self.send(&Message::Error(reason.to_string()));
        }
    }

    pub fn into_transport(self) -> T {
        self.transport
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Init,
    FrontendSent,
    RepsReceived,
    Adapting,
    Evaluating,
    Done,
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub phase: Phase,
    pub epoch: usize,
    /// LOGITS/LOSS_GRAD cycles completed.
    pub cycles: usize,
    pub seed: Option<u64>,
}

impl Default for SessionState {
    fn default() -> Self {
        Self { phase: Phase::Init, epoch: 0, cycles: 0, seed: None }
    }
}

impl SessionState {
    /// Moves to `next` if it is the successor of the current phase; any live
    /// phase may abort.
    pub fn advance(&mut self, next: Phase) -> Result<()> {
        use Phase::*;
        let ok = match (self.phase, next) {
            (Done | Aborted, _) => false,
            (_, Aborted) => true,
            (Init, FrontendSent)
            | (FrontendSent, RepsReceived)
            | (RepsReceived, Adapting)
            | (Adapting, Evaluating)
            | (Evaluating, Done) => true,
            _ => false,
        };
        if !ok {
            bail!(Protocol, "illegal transition {:?} -> {:?}", self.phase, next);
        }
        self.phase = next;
        Ok(())
    }

    pub fn require(&self, phase: Phase) -> Result<()> {
        if self.phase != phase {
            bail!(Protocol, "in phase {:?}, expected {:?}", self.phase, phase);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub session: u64,
    pub phase: Phase,
    pub abort_reason: Option<String>,
    pub seed: u64,
    pub classes: usize,
    pub train_samples: usize,
    pub copies: usize,
    pub cycles: usize,
    pub epoch_losses: Vec<f64>,
    /// Test accuracy as computed by the client.
    pub accuracy: Option<f64>,
    /// Hash of the adapted backend and head parameters (of the untouched
    /// backend when aborted).
    pub param_hash: u64,
    pub traffic: Traffic,
}

impl SessionReport {
    pub fn completed(&self) -> bool {
        self.phase == Phase::Done
    }
}

pub fn params_hash<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut w = Writer::new();
    for t in tensors {
        w.f64s(t.data());
    }
    fnv1a(&w.finish())
}

fn expect_peer(msg: Message, want: Tag) -> Result<Message> {
    match msg {
        Message::Error(reason) => bail!(Protocol, "peer aborted: {}", reason),
        m if m.tag() == want => Ok(m),
        m => bail!(Protocol, "unexpected {:?}, expected {:?}", m.tag(), want),
    }
}

struct RemoteOracle<'a, T> {
    ep: &'a mut Endpoint<T>,
    state: &'a mut SessionState,
    per_epoch: usize,
}

impl<T: Transport> LossOracle for RemoteOracle<'_, T> {
    fn loss_grad(&mut self, ids: &[u32], logits: &Tensor) -> Result<(f64, Tensor)> {
        self.ep.send(&Message::Logits { ids: ids.to_vec(), logits: logits.clone() })?;
        let Message::LossGrad { loss, grad } = expect_peer(self.ep.recv()?, Tag::LossGrad)? else { unreachable!() };
        if grad.shape() != logits.shape() || !grad.all_finite() || !loss.is_finite() {
            bail!(Protocol, "malformed loss gradient {:?} for logits {:?}", grad.shape(), logits.shape());
        }
        self.state.cycles += 1;
        self.state.epoch = self.state.cycles / self.per_epoch;
        Ok((loss, grad))
    }
}

/// Server side of one session. Never panics on peer input; any failure
/// becomes an aborted report and the tuned backend is discarded.
pub fn serve_session<T: Transport>(transport: T, server: &ServerState, cfg: &AdaptConfig) -> SessionReport {
    let mut ep = Endpoint::new(transport, None);
    let mut state = SessionState::default();
    let mut report = SessionReport {
        session: 0,
        phase: Phase::Init,
        abort_reason: None,
        seed: 0,
        classes: 0,
        train_samples: 0,
        copies: 0,
        cycles: 0,
        epoch_losses: Vec::new(),
        accuracy: None,
        param_hash: params_hash(server.backend.tensors()),
        traffic: Traffic::default(),
    };
    let outcome = serve_phases(&mut ep, server, cfg, &mut state, &mut report);
    if let Err(e) = outcome {
        let reason = e.to_string();
        ep.send_error(&reason);
        let _ = state.advance(Phase::Aborted);
        report.abort_reason = Some(reason);
        report.epoch_losses.clear();
        report.accuracy = None;
        report.param_hash = params_hash(server.backend.tensors());
    }
    report.session = ep.session().unwrap_or(0);
    report.phase = state.phase;
    report.cycles = state.cycles;
    report.traffic = ep.traffic;
    report
}

fn serve_phases<T: Transport>(
    ep: &mut Endpoint<T>,
    server: &ServerState,
    cfg: &AdaptConfig,
    state: &mut SessionState,
    report: &mut SessionReport,
) -> Result<()> {
    let spec = server.spec;
    let Message::Hello(hello) = expect_peer(ep.recv()?, Tag::Hello)? else { unreachable!() };
    if hello.spec_hash != spec.hash() {
        bail!(Protocol, "spec hash {:#x} does not match server {:#x}", hello.spec_hash, spec.hash());
    }
    if hello.classes < 2 || hello.train_samples == 0 || hello.copies == 0 {
        bail!(Protocol, "degenerate session request {:?}", hello);
    }
    state.seed = Some(hello.seed);
    report.seed = hello.seed;
    report.classes = hello.classes as usize;
    report.train_samples = hello.train_samples as usize;
    report.copies = hello.copies as usize;
    ep.send(&Message::Hello(Hello { spec_hash: spec.hash(), ..hello }))?;
    let package = server.package();
    ep.send(&Message::FrontendPackage(package.to_bytes()))?;
    state.advance(Phase::FrontendSent)?;

    let n = hello.train_samples as usize;
    let scale = package.output_scale();
    let check = |u: &RepUpload, set: RepSet, index: u32, rows: Option<usize>| -> Result<()> {
        if u.set != set || u.index != index {
            bail!(Protocol, "upload {:?}/{} out of order, expected {:?}/{}", u.set, u.index, set, index);
        }
        let shape = &u.rep.shape;
        if shape[1] != spec.tokens()
            || shape[2] != spec.embed_dim
            || rows.is_some_and(|r| r != shape[0])
            || shape[0] == 0
        {
            bail!(Protocol, "upload shape {:?} invalid", shape);
        }
        if u.rep.scale != scale {
            bail!(Protocol, "upload scale {} differs from the package scale {}", u.rep.scale, scale);
        }
        Ok(())
    };
    let mut sets = Vec::with_capacity(hello.copies as usize);
    for j in 0..hello.copies {
        let Message::RepUpload(u) = expect_peer(ep.recv()?, Tag::RepUpload)? else { unreachable!() };
        check(&u, RepSet::Train, j, Some(n))?;
        sets.push(u.rep.dequantize());
    }
    let Message::RepUpload(u) = expect_peer(ep.recv()?, Tag::RepUpload)? else { unreachable!() };
    check(&u, RepSet::Test, 0, None)?;
    let test = u.rep.dequantize();
    state.advance(Phase::RepsReceived)?;

    state.advance(Phase::Adapting)?;
    let acfg = AdaptConfig { seed: hello.seed, ..*cfg };
    let head = fresh_head(spec.embed_dim, hello.classes as usize, hello.seed);
    let per_epoch = (n * sets.len()).div_ceil(acfg.batch_size.max(1)).max(1);
    let outcome = {
        let mut oracle = RemoteOracle { ep: &mut *ep, state: &mut *state, per_epoch };
        adapt(&server.backend, &head, &sets, true, &acfg, &mut oracle)?
    };

    state.advance(Phase::Evaluating)?;
    let logits = backend_logits(&outcome.backend, &outcome.head, &test)?;
    ep.send(&Message::EvalRequest { set: RepSet::Test, logits })?;
    let Message::EvalResult { set, accuracy } = expect_peer(ep.recv()?, Tag::EvalResult)? else { unreachable!() };
    if set != RepSet::Test || !(0.0..=1.0).contains(&accuracy) {
        bail!(Protocol, "bad evaluation result {:?} {}", set, accuracy);
    }
    report.accuracy = Some(accuracy);
    ep.send(&Message::Done)?;
    state.advance(Phase::Done)?;
    report.epoch_losses = outcome.epoch_losses;
    report.param_hash = params_hash(outcome.backend.tensors().into_iter().chain(outcome.head.tensors()));
    Ok(())
}

/// What the client holds: labelled few-shot images and its labelled test set.
pub struct ClientData<'a> {
    pub train_images: &'a Tensor,
    pub train_labels: &'a [usize],
    pub test_images: &'a Tensor,
    pub test_labels: &'a [usize],
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub session: u64,
    pub accuracy: Option<f64>,
    pub cycles: usize,
    pub traffic: Traffic,
    pub uploads: ClientUploads,
}

/// Client side of one session. Errors are reported to the server before returning.
pub fn client_session<T: Transport>(
    transport: T,
    session: u64,
    spec: &ModelSpec,
    cfg: &ClientConfig,
    data: &ClientData<'_>,
) -> Result<ClientReport> {
    let mut ep = Endpoint::new(transport, Some(session));
    match client_phases(&mut ep, spec, cfg, data) {
        Ok(mut report) => {
            report.traffic = ep.traffic;
            Ok(report)
        }
        Err(e) => {
            ep.send_error(&e.to_string());
            Err(e)
        }
    }
}

fn client_phases<T: Transport>(
    ep: &mut Endpoint<T>,
    spec: &ModelSpec,
    cfg: &ClientConfig,
    data: &ClientData<'_>,
) -> Result<ClientReport> {
    let n = data.train_labels.len();
    if n == 0 || data.train_images.shape()[0] != n || data.test_images.shape()[0] != data.test_labels.len() {
        bail!(Argument, "client images and labels disagree");
    }
    if data.train_labels.iter().chain(data.test_labels).any(|&y| y >= data.classes) {
        bail!(Argument, "label out of range for {} classes", data.classes);
    }
    let copies = if cfg.use_pr { cfg.n_aug + 1 } else { 1 };
    let hello = Hello {
        spec_hash: spec.hash(),
        seed: cfg.seed,
        classes: data.classes as u16,
        train_samples: n as u32,
        copies: copies as u32,
    };
    ep.send(&Message::Hello(hello))?;
    let Message::Hello(reply) = expect_peer(ep.recv()?, Tag::Hello)? else { unreachable!() };
    if reply != hello {
        bail!(Protocol, "server answered HELLO with {:?}", reply);
    }
    let Message::FrontendPackage(bytes) = expect_peer(ep.recv()?, Tag::FrontendPackage)? else { unreachable!() };
    let package = QuantizedFrontend::from_bytes(&bytes)?;
    if package.spec.hash() != spec.hash() {
        bail!(Protocol, "frontend package built for another model spec");
    }
    let uploads = prepare_uploads(&package, cfg, data.train_images, data.test_images)?;
    for (j, rep) in uploads.train.iter().enumerate() {
        ep.send(&Message::RepUpload(RepUpload { set: RepSet::Train, index: j as u32, rep: rep.clone() }))?;
    }
    // the noiseless test extraction stays on the client
    ep.send(&Message::RepUpload(RepUpload { set: RepSet::Test, index: 0, rep: uploads.test_noisy.clone() }))?;

    let mut report = ClientReport {
        session: ep.session().unwrap_or(0),
        accuracy: None,
        cycles: 0,
        traffic: Traffic::default(),
        uploads,
    };
    let limit = (copies * n) as u32;
    loop {
        match ep.recv()? {
            Message::Logits { ids, logits } => {
                if ids.iter().any(|&id| id >= limit) || logits.shape()[1] != data.classes {
                    bail!(Protocol, "LOGITS with unknown ids or {} columns", logits.shape()[1]);
                }
                let labels = labels_for_ids(data.train_labels, &ids)?;
                let (loss, grad) = client_loss(&logits, &labels)?;
                ep.send(&Message::LossGrad { loss, grad })?;
                report.cycles += 1;
            }
            Message::EvalRequest { set, logits } => {
                if set != RepSet::Test {
                    bail!(Protocol, "evaluation requested on training uploads");
                }
                let accuracy = evaluate(&logits, data.test_labels)?;
                report.accuracy = Some(accuracy);
                ep.send(&Message::EvalResult { set, accuracy })?;
            }
            Message::Done => return Ok(report),
            Message::Error(reason) => bail!(Protocol, "server aborted: {}", reason),
            m => bail!(Protocol, "unexpected {:?} during adaptation", m.tag()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Transport wrapper that keeps a copy of every frame in both directions.
pub struct WireTap<T> {
    pub inner: T,
    pub frames: Vec<(Direction, Vec<u8>)>,
}

impl<T> WireTap<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, frames: vec![] }
    }
}

impl<T: Transport> Transport for WireTap<T> {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.frames.push((Direction::Sent, frame.to_vec()));
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        let f = self.inner.recv()?;
        self.frames.push((Direction::Received, f.clone()));
        Ok(f)
    }
}

/// Splits a concatenation of frames (a wire-tap dump) back into frames.
pub fn split_frames(mut bytes: &[u8]) -> Result<Vec<Frame>> {
    let mut out = Vec::new();
    let mut base = 0;
    while !bytes.is_empty() {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(Error::Decode { offset: base, reason: "truncated frame header".into() });
        }
        let total = frame_len(&bytes[..FRAME_HEADER_LEN]).map_err(|e| shift(e, base))?;
        if bytes.len() < total {
            return Err(Error::Decode { offset: base + bytes.len(), reason: "truncated frame".into() });
        }
        out.push(decode(&bytes[..total]).map_err(|e| shift(e, base))?);
        bytes = &bytes[total..];
        base += total;
    }
    Ok(out)
}

fn shift(e: Error, base: usize) -> Error {
    match e {
        Error::Decode { offset, reason } => Error::Decode { offset: offset + base, reason },
        e => e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::VecDeque;

    #[test]
    fn header_layout_is_fixed() {
        let f = Frame { tag: Tag::Done, session: 0x0102, seq: 7, payload: vec![0xAA] };
        let b = encode(&f);
        assert_eq!(&b[..4], b"SAPM");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 8);
        assert_eq!(&b[7..15], &[2, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(b[15], 7);
        assert_eq!(b[23], 1);
        assert_eq!(b.len(), FRAME_HEADER_LEN + 1 + 4);
        assert_eq!(&b[32..], &crc32fast::hash(&[0xAA]).to_le_bytes());
        assert_eq!(decode(&b).unwrap(), f);
    }

    #[test]
    fn corrupted_checksum_names_crc() {
        let mut b = encode(&Frame { tag: Tag::Hello, session: 1, seq: 0, payload: vec![1, 2, 3] });
        let last = b.len() - 1;
        b[last] ^= 1;
        let e = decode(&b).unwrap_err();
        assert!(matches!(&e, Error::Decode { offset, reason } if *offset == b.len() - 4 && reason.contains("CRC")));
    }

    #[test]
    fn unknown_tag_and_truncation_rejected() {
        let mut b = encode(&Frame { tag: Tag::Done, session: 1, seq: 0, payload: vec![] });
        for cut in 0..b.len() {
            assert!(decode(&b[..cut]).is_err());
        }
        b[6] = 0;
        assert!(matches!(decode(&b), Err(Error::Decode { offset: 6, .. })));
    }

    #[test]
    fn phase_machine_only_moves_forward() {
        let mut s = SessionState::default();
        assert!(s.advance(Phase::RepsReceived).is_err());
        for p in [Phase::FrontendSent, Phase::RepsReceived, Phase::Adapting, Phase::Evaluating, Phase::Done] {
            s.advance(p).unwrap();
        }
        assert!(s.advance(Phase::Aborted).is_err());
        let mut s = SessionState::default();
        s.advance(Phase::FrontendSent).unwrap();
        s.advance(Phase::Aborted).unwrap();
        assert!(s.advance(Phase::RepsReceived).is_err());
    }

    struct Queue(VecDeque<Vec<u8>>, Vec<Vec<u8>>);

    impl Transport for Queue {
        fn send(&mut self, frame: &[u8]) -> Result<()> {
            self.1.push(frame.to_vec());
            Ok(())
        }
        fn recv(&mut self) -> Result<Vec<u8>> {
            self.0.pop_front().ok_or_else(|| Error::Transport("closed".into()))
        }
    }

    #[test]
    fn endpoint_rejects_replayed_sequence_numbers() {
        let f = encode(&Frame { tag: Tag::Done, session: 3, seq: 5, payload: vec![] });
        let mut ep = Endpoint::new(Queue(VecDeque::from([f.clone(), f]), vec![]), None);
        assert_eq!(ep.recv().unwrap(), Message::Done);
        assert_eq!(ep.session(), Some(3));
        assert!(ep.recv().is_err());
    }

    #[test]
    fn endpoint_rejects_foreign_session() {
        let f = encode(&Frame { tag: Tag::Done, session: 4, seq: 0, payload: vec![] });
        let mut ep = Endpoint::new(Queue(VecDeque::from([f]), vec![]), Some(3));
        assert!(matches!(ep.recv(), Err(Error::Protocol(_))));
    }

    #[test]
    fn split_frames_reverses_concatenation() {
        let a = Frame { tag: Tag::Error, session: 1, seq: 0, payload: Message::Error("x".into()).payload() };
        let b = Frame { tag: Tag::Done, session: 1, seq: 1, payload: vec![] };
        let mut dump = encode(&a);
        let first = dump.len();
        dump.extend(encode(&b));
        assert_eq!(split_frames(&dump).unwrap(), [a, b]);
        assert!(matches!(split_frames(&dump[..dump.len() - 1]), Err(Error::Decode { .. })));
        dump[first] = b'X';
        assert!(matches!(split_frames(&dump), Err(Error::Decode { offset, .. }) if offset == first));
    }
}
