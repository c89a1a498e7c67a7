//! End-to-end sessions over a transport, with the adversary as the hop in
//! the middle.
//!
//! The memory transport is a single-threaded scheduler: every frame the
//! master sends is pushed through the hop and handled by the outstation
//! before the master looks at its inbox, so runs are fully reproducible.
//! The TCP transport runs master, proxy and outstation on separate threads
//! over loopback sockets.

use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::crseq::CellReplyTable;
use crate::ducm::Tolerance;
use crate::endpoints::{
    events_to_jsonl, AbortReason, ChallengeOutcome, Event, MasterSession, MasterState, OutstationSession,
    OutstationState, ProtocolError, Verdict,
};
use crate::net::adversary::{Adversary, Direction};
use crate::net::config::{ExperimentConfig, TransportKind};
use crate::net::frame::{Frame, FrameError, Message, MsgType};
use crate::plant::{Plant, PlantError};

// Seeds for the master's challenge stream and the outstation's table stream
// are derived from the scenario seed.
const MASTER_SEED_SALT: u64 = 0x4D41_5354;
const CRT_SEED_SALT: u64 = 0x4352_5453;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("invalid scenario: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundOutcome {
    Accepted,
    Rejected,
    OutstationAbort(AbortReason),
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Quiet,
    Enrolling,
    AwaitingReply,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Observation {
    Enrolled,
    EnrollRefused,
    Round(RoundOutcome),
    Nothing,
}

/// The master session wrapped with its side of the wire.
#[derive(Debug)]
pub struct MasterNode {
    pub session: MasterSession,
    phase: Phase,
}

impl MasterNode {
    pub fn new(session: MasterSession) -> Self {
        Self {
            session,
            phase: Phase::Quiet,
        }
    }

    fn waiting(&self) -> bool {
        self.phase != Phase::Quiet
    }

    fn begin_enrollment(&mut self) -> Frame {
        self.phase = Phase::Enrolling;
        self.session.note("enroll_requested", "");
        Frame::enroll_request()
    }

    fn begin_round(&mut self) -> Result<Frame, ProtocolError> {
        let ch = self.session.build_challenge()?;
        self.phase = Phase::AwaitingReply;
        Ok(Frame::challenge(ch.encode()))
    }

    fn on_frame(&mut self, frame: &Frame) -> (Vec<Frame>, Observation) {
        let msg = match Message::try_from(frame) {
            Ok(m) => m,
            Err(e) => {
                self.session.note("frame_dropped", e.to_string());
                return (Vec::new(), Observation::Nothing);
            }
        };
        match (self.phase, msg) {
            (Phase::Enrolling, Message::EnrollTable(crt)) => {
                self.phase = Phase::Quiet;
                match self.session.accept_enrollment(crt) {
                    Ok(()) => {
                        let confirm = Verdict::Accept {
                            round: 0,
                            command: Vec::new(),
                        };
                        (vec![Frame::verdict(&confirm)], Observation::Enrolled)
                    }
                    Err(e) => {
                        self.session.note("enroll_failed", e.to_string());
                        (Vec::new(), Observation::EnrollRefused)
                    }
                }
            }
            (Phase::Enrolling, Message::Abort { reason, .. }) => {
                self.phase = Phase::Quiet;
                self.session.note("enroll_failed", reason.name());
                (Vec::new(), Observation::EnrollRefused)
            }
            (Phase::AwaitingReply, Message::Reply(w)) => {
                self.phase = Phase::Quiet;
                match self.session.verify_reply(crate::crseq::AuthReply(w)) {
                    Ok(v) => {
                        let outcome = if v.is_accept() {
                            RoundOutcome::Accepted
                        } else {
                            RoundOutcome::Rejected
                        };
                        (vec![Frame::verdict(&v)], Observation::Round(outcome))
                    }
                    Err(e) => {
                        self.session.note("verify_failed", e.to_string());
                        (Vec::new(), Observation::Nothing)
                    }
                }
            }
            (Phase::AwaitingReply, Message::Abort { reason, .. }) => {
                self.phase = Phase::Quiet;
                self.session.abort(reason.name());
                if matches!(reason, AbortReason::Desync | AbortReason::Protocol) {
                    self.session.note("reenrollment_required", reason.name());
                    self.session.reset();
                }
                (Vec::new(), Observation::Round(RoundOutcome::OutstationAbort(reason)))
            }
            (_, other) => {
                self.session.note("frame_ignored", format!("{other:?}"));
                (Vec::new(), Observation::Nothing)
            }
        }
    }

    /// No answer came. An unanswered challenge is abandoned with a reject so
    /// an outstation that did reply rolls its table back.
    fn on_timeout(&mut self) -> (Vec<Frame>, Observation) {
        let phase = std::mem::replace(&mut self.phase, Phase::Quiet);
        match phase {
            Phase::Enrolling => {
                self.session.note("enroll_timeout", "");
                (Vec::new(), Observation::EnrollRefused)
            }
            Phase::AwaitingReply => {
                self.session.abort("timeout");
                let v = Verdict::Reject {
                    round: self.session.round(),
                };
                (vec![Frame::verdict(&v)], Observation::Round(RoundOutcome::TimedOut))
            }
            Phase::Quiet => (Vec::new(), Observation::Nothing),
        }
    }
}

/// The outstation session wrapped with its side of the wire.
#[derive(Debug)]
pub struct OutstationNode {
    pub session: OutstationSession,
    /// Set once the connection was torn down, with the reason.
    pub closed: Option<String>,
}

impl OutstationNode {
    pub fn new(session: OutstationSession) -> Self {
        Self { session, closed: None }
    }

    /// Handle raw bytes off the wire. A frame that cannot be parsed tears
    /// the connection down.
    pub fn on_bytes(&mut self, bytes: &[u8]) -> Vec<Frame> {
        if self.closed.is_some() {
            return Vec::new();
        }
        match Frame::decode(bytes) {
            Ok(f) => self.on_frame(&f),
            Err(e) => {
                self.close(&e);
                Vec::new()
            }
        }
    }

    fn close(&mut self, e: &FrameError) {
        self.session.note("connection_aborted", e.to_string());
        self.closed = Some(e.to_string());
    }

    pub fn on_frame(&mut self, frame: &Frame) -> Vec<Frame> {
        let round = self.session.round();
        let msg = match Message::try_from(frame) {
            Ok(m) => m,
            Err(e) => {
                self.session.note("frame_rejected", e.to_string());
                return vec![Frame::abort(AbortReason::Malformed, round)];
            }
        };
        match msg {
            Message::EnrollRequest => {
                if self.session.state() == OutstationState::Aborted {
                    self.session.reset();
                }
                match self.session.offer_enrollment() {
                    Ok(crt) => vec![Frame::enroll_table(&crt)],
                    Err(e) => {
                        self.session.note("enroll_refused", e.to_string());
                        vec![Frame::abort(AbortReason::Protocol, round)]
                    }
                }
            }
            Message::Verdict(v) if self.session.state() == OutstationState::Idle => {
                if v.is_accept() && v.round() == 0 {
                    if let Err(e) = self.session.confirm_enrollment() {
                        self.session.note("verdict_ignored", e.to_string());
                    }
                } else {
                    self.session.note("verdict_ignored", "not enrolled");
                }
                Vec::new()
            }
            Message::Verdict(v) => {
                if let Err(e) = self.session.handle_verdict(&v) {
                    self.session.note("verdict_ignored", e.to_string());
                }
                Vec::new()
            }
            Message::Challenge(w) => match self.session.handle_challenge(w) {
                Ok(ChallengeOutcome::Reply(r)) => vec![Frame::reply(r.0)],
                Ok(ChallengeOutcome::Abort(reason)) => {
                    vec![Frame::abort(reason, self.session.round())]
                }
                Err(e) => {
                    self.session.note("challenge_failed", e.to_string());
                    vec![Frame::abort(AbortReason::Gauge, round)]
                }
            },
            other => {
                self.session.note("frame_ignored", format!("{other:?}"));
                Vec::new()
            }
        }
    }
}

/// The hop between the endpoints: a lossy enrollment channel plus the adversary.
#[derive(Debug)]
pub struct Hop {
    pub adversary: Adversary,
    enroll_drops_left: u32,
    log: Vec<Event>,
}

impl Hop {
    pub fn new(adversary: Adversary, enroll_drops: u32) -> Self {
        Self {
            adversary,
            enroll_drops_left: enroll_drops,
            log: Vec::new(),
        }
    }

    pub fn pass(&mut self, dir: Direction, frame: Frame) -> Option<Frame> {
        if frame.msg_type == MsgType::EnrollCrt && self.enroll_drops_left > 0 {
            self.enroll_drops_left -= 1;
            self.log.push(Event {
                round: 0,
                role: crate::endpoints::Role::Adversary,
                event: "lost".into(),
                state: "transport".into(),
                detail: format!("{} {:?}", frame.msg_type.name(), dir),
            });
            return None;
        }
        let out = self.adversary.intercept(dir, frame);
        self.log.extend(self.adversary.take_events());
        out
    }

    fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.log)
    }
}

/// What the master's round driver needs from a transport.
trait Link {
    fn send(&mut self, frame: Frame);
    /// Next frame for the master, or `None` once nothing more will arrive.
    fn recv(&mut self) -> Option<Frame>;
    fn record(&mut self, events: Vec<Event>);
    /// Tables equal after the round, where the transport can see both ends.
    fn tables_agree(&self, master: &MasterSession) -> Option<bool>;
}

struct MemoryLink {
    outstation: OutstationNode,
    hop: Hop,
    inbox: VecDeque<Frame>,
    log: Vec<Event>,
}

impl MemoryLink {
    fn drain(&mut self) {
        self.log.extend(self.hop.take_events());
        self.log.extend(self.outstation.session.take_events());
    }
}

impl Link for MemoryLink {
    fn send(&mut self, frame: Frame) {
        let delivered = self.hop.pass(Direction::ToOutstation, frame);
        self.drain();
        let Some(frame) = delivered else { return };
        // bytes on the wire, so a bad header is caught where it would be on a socket
        for out in self.outstation.on_bytes(&frame.encode()) {
            self.drain();
            if let Some(f) = self.hop.pass(Direction::ToMaster, out) {
                self.inbox.push_back(f);
            }
        }
        self.drain();
    }

    fn recv(&mut self) -> Option<Frame> {
        self.inbox.pop_front()
    }

    fn record(&mut self, events: Vec<Event>) {
        self.log.extend(events);
    }

    fn tables_agree(&self, master: &MasterSession) -> Option<bool> {
        let out = &self.outstation.session;
        let settled =
            master.state() != MasterState::Idle && out.state() == OutstationState::Enrolled && !out.awaiting_verdict();
        settled.then(|| master.crt() == out.crt())
    }
}

#[derive(Debug, Clone)]
pub struct SessionReport {
    pub transport: TransportKind,
    pub events: Vec<Event>,
    pub outcomes: Vec<RoundOutcome>,
    /// Per round, whether both tables were equal afterwards; `None` where the
    /// ends were not both settled or the transport cannot see both.
    pub tables_equal: Vec<Option<bool>>,
    pub reenrollments: u64,
    pub enroll_attempts: u64,
    pub halted: Option<String>,
    pub master_crt: Option<CellReplyTable>,
    pub outstation_crt: Option<CellReplyTable>,
    pub outstation_state: OutstationState,
    pub captured: Vec<(Direction, Frame)>,
}

impl SessionReport {
    fn count(&self, f: impl Fn(&RoundOutcome) -> bool) -> usize {
        self.outcomes.iter().filter(|o| f(o)).count()
    }

    pub fn accepts(&self) -> usize {
        self.count(|o| *o == RoundOutcome::Accepted)
    }

    pub fn rejects(&self) -> usize {
        self.count(|o| *o == RoundOutcome::Rejected)
    }

    pub fn aborts(&self) -> usize {
        self.count(|o| matches!(o, RoundOutcome::OutstationAbort(_) | RoundOutcome::TimedOut))
    }

    pub fn lockstep(&self) -> bool {
        self.master_crt.is_some() && self.master_crt == self.outstation_crt
    }

    pub fn events_jsonl(&self) -> String {
        events_to_jsonl(&self.events)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "rounds={} accepted={} rejected={} aborted={} reenrollments={} lockstep={}",
            self.outcomes.len(),
            self.accepts(),
            self.rejects(),
            self.aborts(),
            self.reenrollments,
            self.lockstep()
        );
        if let Some(h) = &self.halted {
            s.push_str(&format!(" halted=\"{h}\""));
        }
        s
    }
}

struct Driven {
    outcomes: Vec<RoundOutcome>,
    tables_equal: Vec<Option<bool>>,
    reenrollments: u64,
    enroll_attempts: u64,
    halted: Option<String>,
}

/// Exchange frames until the master stops waiting or the link goes quiet.
fn pump<L: Link>(master: &mut MasterNode, link: &mut L) -> Observation {
    let mut last = Observation::Nothing;
    while master.waiting() {
        let (out, obs) = match link.recv() {
            Some(f) => master.on_frame(&f),
            None => master.on_timeout(),
        };
        link.record(master.session.take_events());
        for f in out {
            link.send(f);
        }
        if obs != Observation::Nothing {
            last = obs;
        }
    }
    last
}

fn enroll<L: Link>(master: &mut MasterNode, link: &mut L, attempts: u32, driven: &mut Driven) -> bool {
    for _ in 0..attempts {
        driven.enroll_attempts += 1;
        let f = master.begin_enrollment();
        link.record(master.session.take_events());
        link.send(f);
        if pump(master, link) == Observation::Enrolled {
            return true;
        }
    }
    false
}

fn drive<L: Link>(master: &mut MasterNode, link: &mut L, config: &ExperimentConfig) -> Driven {
    let proto = &config.protocol;
    let mut d = Driven {
        outcomes: Vec::new(),
        tables_equal: Vec::new(),
        reenrollments: 0,
        enroll_attempts: 0,
        halted: None,
    };
    if !enroll(master, link, proto.max_enroll_attempts, &mut d) {
        d.halted = Some("enrollment failed".into());
        return d;
    }
    for _ in 0..proto.rounds {
        match master.session.state() {
            MasterState::Idle => {
                if !proto.auto_reenroll {
                    d.halted = Some("re-enrollment required".into());
                    break;
                }
                if !enroll(master, link, proto.max_enroll_attempts, &mut d) {
                    d.halted = Some("re-enrollment failed".into());
                    break;
                }
                d.reenrollments += 1;
            }
            MasterState::Aborted => {
                master.session.resume().expect("aborted master with a table can resume");
            }
            _ => {}
        }
        let f = match master.begin_round() {
            Ok(f) => f,
            Err(e) => {
                d.halted = Some(e.to_string());
                break;
            }
        };
        link.record(master.session.take_events());
        link.send(f);
        if let Observation::Round(outcome) = pump(master, link) {
            d.outcomes.push(outcome);
        }
        d.tables_equal.push(link.tables_agree(&master.session));
    }
    link.record(master.session.take_events());
    d
}

fn build_endpoints(
    config: &ExperimentConfig,
    seed: u64,
    plant: Plant,
) -> Result<(MasterNode, OutstationNode), SessionError> {
    let variant = config.protocol.transform.into();
    let mut master = MasterSession::new(plant.n_cells(), seed ^ MASTER_SEED_SALT);
    master.variant = variant;
    master.command = config.protocol.command.as_bytes().to_vec();
    let tol = Tolerance::new(config.ducm.tau_mah).map_err(|e| SessionError::Config(e.to_string()))?;
    let mut outstation = OutstationSession::new(plant, tol, seed ^ CRT_SEED_SALT);
    outstation.variant = variant;
    Ok((MasterNode::new(master), OutstationNode::new(outstation)))
}

/// Commission a pack from `seed` and run the scenario.
pub fn run_session(config: &ExperimentConfig, seed: u64) -> Result<SessionReport, SessionError> {
    config.validate().map_err(|e| SessionError::Config(e.to_string()))?;
    let plant = Plant::commission(seed, config.protocol.n_cells, &config.pack, &config.gauge, &config.ducm)?;
    run_session_with(config, seed, plant)
}

/// Run the scenario against an already commissioned plant.
pub fn run_session_with(config: &ExperimentConfig, seed: u64, plant: Plant) -> Result<SessionReport, SessionError> {
    let mut plant = plant;
    plant.set_update_interval(config.ducm.update_interval);
    let (master, outstation) = build_endpoints(config, seed, plant)?;
    let mut adversary = Adversary::new(config.adversary.clone());
    adversary.variant = config.protocol.transform.into();
    let hop = Hop::new(adversary, config.protocol.enroll_drops);
    match config.protocol.transport {
        TransportKind::Memory => Ok(run_memory(config, master, outstation, hop)),
        TransportKind::Tcp => run_tcp(config, master, outstation, hop),
    }
}

fn run_memory(
    config: &ExperimentConfig,
    mut master: MasterNode,
    outstation: OutstationNode,
    hop: Hop,
) -> SessionReport {
    let mut link = MemoryLink {
        outstation,
        hop,
        inbox: VecDeque::new(),
        log: Vec::new(),
    };
    let d = drive(&mut master, &mut link, config);
    link.drain();
    SessionReport {
        transport: TransportKind::Memory,
        events: link.log,
        outcomes: d.outcomes,
        tables_equal: d.tables_equal,
        reenrollments: d.reenrollments,
        enroll_attempts: d.enroll_attempts,
        halted: d.halted,
        master_crt: master.session.crt().cloned(),
        outstation_crt: link.outstation.session.crt().cloned(),
        outstation_state: link.outstation.session.state(),
        captured: link.hop.adversary.capture_log,
    }
}

struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    log: Vec<Event>,
}

impl Link for TcpLink {
    fn send(&mut self, frame: Frame) {
        if let Err(e) = frame.write_to(&mut self.writer) {
            self.log.push(transport_event("send_failed", e.to_string()));
        }
    }

    fn recv(&mut self) -> Option<Frame> {
        match Frame::read_from(&mut self.reader) {
            Ok(f) => Some(f),
            Err(FrameError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => None,
            Err(e) => {
                self.log.push(transport_event("recv_failed", e.to_string()));
                None
            }
        }
    }

    fn record(&mut self, events: Vec<Event>) {
        self.log.extend(events);
    }

    fn tables_agree(&self, _: &MasterSession) -> Option<bool> {
        None
    }
}

fn transport_event(event: &str, detail: String) -> Event {
    Event {
        round: 0,
        role: crate::endpoints::Role::Master,
        event: event.into(),
        state: "transport".into(),
        detail,
    }
}

fn serve_outstation(mut node: OutstationNode, stream: TcpStream) -> OutstationNode {
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(e) => {
            node.session.note("connection_aborted", e.to_string());
            return node;
        }
    });
    let mut writer = BufWriter::new(stream);
    loop {
        let frame = match Frame::read_from(&mut reader) {
            Ok(f) => f,
            Err(FrameError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => {
                node.close(&e);
                break;
            }
        };
        for out in node.on_frame(&frame) {
            if out.write_to(&mut writer).is_err() {
                return node;
            }
        }
    }
    node
}

fn proxy_direction(hop: Arc<Mutex<Hop>>, dir: Direction, from: TcpStream, to: TcpStream) {
    let mut reader = BufReader::new(from);
    let mut writer = BufWriter::new(to);
    loop {
        let frame = match Frame::read_from(&mut reader) {
            Ok(f) => f,
            Err(e) => {
                if !matches!(&e, FrameError::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof) {
                    let mut hop = hop.lock().expect("hop lock");
                    hop.log.push(Event {
                        round: 0,
                        role: crate::endpoints::Role::Adversary,
                        event: "connection_aborted".into(),
                        state: "transport".into(),
                        detail: e.to_string(),
                    });
                }
                break;
            }
        };
        let forwarded = hop.lock().expect("hop lock").pass(dir, frame);
        if let Some(f) = forwarded {
            if f.write_to(&mut writer).is_err() {
                break;
            }
        }
    }
    let _ = writer.get_ref().shutdown(Shutdown::Write);
}

fn run_tcp(
    config: &ExperimentConfig,
    mut master: MasterNode,
    outstation: OutstationNode,
    hop: Hop,
) -> Result<SessionReport, SessionError> {
    let out_listener = TcpListener::bind("127.0.0.1:0")?;
    let proxy_listener = TcpListener::bind("127.0.0.1:0")?;
    let out_addr = out_listener.local_addr()?;
    let proxy_addr = proxy_listener.local_addr()?;

    let out_thread = thread::spawn(move || -> io::Result<OutstationNode> {
        let (stream, _) = out_listener.accept()?;
        stream.set_nodelay(true)?;
        Ok(serve_outstation(outstation, stream))
    });
    let hop = Arc::new(Mutex::new(hop));
    let proxy_hop = Arc::clone(&hop);
    let proxy_thread = thread::spawn(move || -> io::Result<()> {
        let (from_master, _) = proxy_listener.accept()?;
        let to_out = TcpStream::connect(out_addr)?;
        from_master.set_nodelay(true)?;
        to_out.set_nodelay(true)?;
        let up = {
            let (hop, a, b) = (Arc::clone(&proxy_hop), from_master.try_clone()?, to_out.try_clone()?);
            thread::spawn(move || proxy_direction(hop, Direction::ToOutstation, a, b))
        };
        proxy_direction(proxy_hop, Direction::ToMaster, to_out, from_master);
        let _ = up.join();
        Ok(())
    });

    let stream = TcpStream::connect(proxy_addr)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(config.protocol.timeout_ms.max(1))))?;
    let mut link = TcpLink {
        reader: BufReader::new(stream.try_clone()?),
        writer: BufWriter::new(stream.try_clone()?),
        log: Vec::new(),
    };
    let d = drive(&mut master, &mut link, config);
    stream.shutdown(Shutdown::Both)?;
    let master_log = std::mem::take(&mut link.log);
    drop(link);

    let mut outstation = out_thread
        .join()
        .map_err(|_| io::Error::other("outstation thread panicked"))??;
    proxy_thread
        .join()
        .map_err(|_| io::Error::other("proxy thread panicked"))??;
    let mut hop = Arc::try_unwrap(hop)
        .map_err(|_| io::Error::other("proxy still holds the hop"))?
        .into_inner()
        .map_err(|_| io::Error::other("hop lock poisoned"))?;

    // one log per role; interleaving across threads is not reproducible
    let mut log = master_log;
    log.extend(hop.take_events());
    log.extend(outstation.session.take_events());

    Ok(SessionReport {
        transport: TransportKind::Tcp,
        events: log,
        outcomes: d.outcomes,
        tables_equal: d.tables_equal,
        reenrollments: d.reenrollments,
        enroll_attempts: d.enroll_attempts,
        halted: d.halted,
        master_crt: master.session.crt().cloned(),
        outstation_crt: outstation.session.crt().cloned(),
        outstation_state: outstation.session.state(),
        captured: hop.adversary.capture_log,
    })
}
