//! Master and outstation state machines for enrollment and authentication.
//!
//! Both sides advance their cell-reply table on their own; the verdict that
//! the master sends back after every reply carries the master's round number
//! so the outstation can commit, roll back or detect that the two have
//! drifted apart.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crseq::{
    build_temp_reply, quantize_bs, AuthReply, CellReplyTable, Challenge, CrseqError, TransformSpec, TransformVariant,
    LSET1_LEN, LSET2_LEN,
};
use crate::ducm::{DucmError, SelfAuth, Tolerance};
use crate::fuel_gauge::{GaugeError, Measurement};
use crate::plant::{Plant, PlantError};
use crate::CellId;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("{role} cannot {action} while {state}")]
    State {
        role: Role,
        action: &'static str,
        state: &'static str,
    },
    #[error("no challenge is outstanding")]
    NoPendingChallenge,
    #[error(transparent)]
    Codec(#[from] CrseqError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Master,
    Outstation,
    Adversary,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Master => "master",
            Role::Outstation => "outstation",
            Role::Adversary => "adversary",
        })
    }
}

/// One line of the JSON-lines event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub round: u64,
    pub role: Role,
    pub event: String,
    pub state: String,
    pub detail: String,
}

impl Event {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event fields are plain strings and integers")
    }
}

pub fn events_to_jsonl(events: &[Event]) -> String {
    events.iter().map(|e| e.to_json() + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MasterState {
    Idle,
    Enrolled,
    ChallengeOutstanding,
    Verified,
    Aborted,
}

impl MasterState {
    pub fn name(self) -> &'static str {
        match self {
            MasterState::Idle => "idle",
            MasterState::Enrolled => "enrolled",
            MasterState::ChallengeOutstanding => "challenge_outstanding",
            MasterState::Verified => "verified",
            MasterState::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OutstationState {
    Idle,
    Enrolled,
    Aborted,
}

impl OutstationState {
    pub fn name(self) -> &'static str {
        match self {
            OutstationState::Idle => "idle",
            OutstationState::Enrolled => "enrolled",
            OutstationState::Aborted => "aborted",
        }
    }
}

/// Why the outstation refused a challenge. The discriminants are the wire codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[repr(u8)]
pub enum AbortReason {
    SelfAuth = 1,
    Malformed = 2,
    Gauge = 3,
    Desync = 4,
    Protocol = 5,
}

impl AbortReason {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => Self::SelfAuth,
            2 => Self::Malformed,
            3 => Self::Gauge,
            4 => Self::Desync,
            5 => Self::Protocol,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SelfAuth => "self_auth",
            Self::Malformed => "malformed",
            Self::Gauge => "gauge",
            Self::Desync => "desync",
            Self::Protocol => "protocol",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept { round: u64, command: Vec<u8> },
    Reject { round: u64 },
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept { .. })
    }

    pub fn round(&self) -> u64 {
        match *self {
            Verdict::Accept { round, .. } | Verdict::Reject { round } => round,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChallengeOutcome {
    Reply(AuthReply),
    Abort(AbortReason),
}

/// Draw `k` distinct ids below `n` in sampling order.
fn distinct_ids<const K: usize>(rng: &mut ChaCha8Rng, n: usize) -> [CellId; K] {
    let picked = sample(rng, n, K);
    let mut out = [0; K];
    for (slot, id) in out.iter_mut().zip(picked.iter()) {
        *slot = id as CellId;
    }
    out
}

#[derive(Debug, Clone)]
pub struct MasterSession {
    crt: Option<CellReplyTable>,
    state: MasterState,
    pending: Option<Challenge>,
    round: u64,
    n_cells: usize,
    rng: ChaCha8Rng,
    pub variant: TransformVariant,
    pub command: Vec<u8>,
    events: Vec<Event>,
}

impl MasterSession {
    pub fn new(n_cells: usize, seed: u64) -> Self {
        Self {
            crt: None,
            state: MasterState::Idle,
            pending: None,
            round: 0,
            n_cells,
            rng: ChaCha8Rng::seed_from_u64(seed),
            variant: TransformVariant::default(),
            command: b"dispatch".to_vec(),
            events: Vec::new(),
        }
    }

    pub fn state(&self) -> MasterState {
        self.state
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn crt(&self) -> Option<&CellReplyTable> {
        self.crt.as_ref()
    }

    pub fn pending(&self) -> Option<&Challenge> {
        self.pending.as_ref()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    fn log(&mut self, event: &str, detail: impl Into<String>) {
        self.events.push(Event {
            round: self.round,
            role: Role::Master,
            event: event.to_string(),
            state: self.state.name().to_string(),
            detail: detail.into(),
        });
    }

    /// Record a transport-level observation in this session's log.
    pub fn note(&mut self, event: &str, detail: impl Into<String>) {
        self.log(event, detail);
    }

    fn wrong_state(&self, action: &'static str) -> ProtocolError {
        ProtocolError::State {
            role: Role::Master,
            action,
            state: self.state.name(),
        }
    }

    /// Take the table the outstation shared during enrollment.
    pub fn accept_enrollment(&mut self, crt: CellReplyTable) -> Result<(), ProtocolError> {
        if self.state != MasterState::Idle {
            return Err(self.wrong_state("enroll"));
        }
        if crt.version != 0 || crt.len() != self.n_cells {
            return Err(ProtocolError::State {
                role: Role::Master,
                action: "accept a stale or mis-sized table",
                state: self.state.name(),
            });
        }
        self.crt = Some(crt);
        self.round = 0;
        self.state = MasterState::Enrolled;
        self.log("enrolled", format!("{} cells", self.n_cells));
        Ok(())
    }

    pub fn build_challenge(&mut self) -> Result<Challenge, ProtocolError> {
        if !matches!(self.state, MasterState::Enrolled | MasterState::Verified) {
            return Err(self.wrong_state("build a challenge"));
        }
        let lset1 = distinct_ids::<LSET1_LEN>(&mut self.rng, self.n_cells);
        let lset2 = distinct_ids::<LSET2_LEN>(&mut self.rng, self.n_cells);
        let rt = loop {
            let rt = TransformSpec::from_bits(self.rng.gen());
            // an identity transform would put the bare temporary reply on the wire
            if !rt.is_identity() {
                break rt;
            }
        };
        let ch = Challenge { lset1, lset2, rt };
        self.pending = Some(ch);
        self.state = MasterState::ChallengeOutstanding;
        self.log("challenge_sent", format!("{:016x}", ch.encode()));
        Ok(ch)
    }

    /// Check a reply against the outstanding challenge. Accept advances the
    /// table; Reject leaves it alone and aborts the session.
    pub fn verify_reply(&mut self, reply: AuthReply) -> Result<Verdict, ProtocolError> {
        if self.state != MasterState::ChallengeOutstanding {
            return Err(ProtocolError::NoPendingChallenge);
        }
        let ch = self.pending.take().ok_or(ProtocolError::NoPendingChallenge)?;
        let crt = self.crt.as_mut().expect("enrolled master holds a table");
        let temp = reply.to_temp(ch.rt, self.variant);
        let expected = build_temp_reply(crt, &ch, temp.bess_state())?;
        if temp.replies() == expected.replies() {
            crt.update(temp.bess_state());
            self.round += 1;
            self.state = MasterState::Verified;
            self.log("command_authorized", format!("reply {:016x}", reply.0));
            Ok(Verdict::Accept {
                round: self.round,
                command: self.command.clone(),
            })
        } else {
            self.state = MasterState::Aborted;
            self.log("reply_rejected", format!("reply {:016x}", reply.0));
            Ok(Verdict::Reject { round: self.round })
        }
    }

    /// Abandon the outstanding round without touching the table.
    pub fn abort(&mut self, reason: &str) {
        self.pending = None;
        if self.state != MasterState::Idle {
            self.state = MasterState::Aborted;
        }
        self.log("round_aborted", reason);
    }

    /// Leave the aborted state to retry with the current table.
    pub fn resume(&mut self) -> Result<(), ProtocolError> {
        if self.state != MasterState::Aborted || self.crt.is_none() {
            return Err(self.wrong_state("resume"));
        }
        self.state = MasterState::Enrolled;
        self.log("resumed", "");
        Ok(())
    }

    /// Drop the table; the next step must be a fresh enrollment.
    pub fn reset(&mut self) {
        self.crt = None;
        self.pending = None;
        self.round = 0;
        self.state = MasterState::Idle;
        self.log("reset", "");
    }
}

#[derive(Debug, Clone)]
pub struct OutstationSession {
    crt: Option<CellReplyTable>,
    offer: Option<CellReplyTable>,
    state: OutstationState,
    round: u64,
    /// Table as it stood before the last reply, kept until the verdict.
    backup: Option<CellReplyTable>,
    pub plant: Plant,
    pub tolerance: Tolerance,
    pub variant: TransformVariant,
    crt_seed: u64,
    enrollments: u64,
    events: Vec<Event>,
}

impl OutstationSession {
    pub fn new(plant: Plant, tolerance: Tolerance, crt_seed: u64) -> Self {
        Self {
            crt: None,
            offer: None,
            state: OutstationState::Idle,
            round: 0,
            backup: None,
            plant,
            tolerance,
            variant: TransformVariant::default(),
            crt_seed,
            enrollments: 0,
            events: Vec::new(),
        }
    }

    pub fn state(&self) -> OutstationState {
        self.state
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn crt(&self) -> Option<&CellReplyTable> {
        self.crt.as_ref()
    }

    pub fn awaiting_verdict(&self) -> bool {
        self.backup.is_some()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    fn log(&mut self, event: &str, detail: impl Into<String>) {
        self.events.push(Event {
            round: self.round,
            role: Role::Outstation,
            event: event.to_string(),
            state: self.state.name().to_string(),
            detail: detail.into(),
        });
    }

    /// Record a transport-level observation in this session's log.
    pub fn note(&mut self, event: &str, detail: impl Into<String>) {
        self.log(event, detail);
    }

    /// Produce the table to share. The session stays idle until the master
    /// confirms receipt, so a lost transfer can simply be repeated.
    pub fn offer_enrollment(&mut self) -> Result<CellReplyTable, ProtocolError> {
        if self.state != OutstationState::Idle {
            return Err(ProtocolError::State {
                role: Role::Outstation,
                action: "enroll",
                state: self.state.name(),
            });
        }
        if self.offer.is_none() {
            // a new seed per enrollment so an old table never comes back
            let seed = self
                .crt_seed
                .wrapping_add(self.enrollments.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            self.offer = Some(CellReplyTable::init(seed, self.plant.n_cells())?);
            self.log("crt_offered", format!("{} cells", self.plant.n_cells()));
        }
        Ok(self.offer.clone().expect("offer was just set"))
    }

    pub fn confirm_enrollment(&mut self) -> Result<(), ProtocolError> {
        let offer = match (self.state, self.offer.take()) {
            (OutstationState::Idle, Some(offer)) => offer,
            (state, offer) => {
                self.offer = offer;
                return Err(ProtocolError::State {
                    role: Role::Outstation,
                    action: "confirm enrollment",
                    state: state.name(),
                });
            }
        };
        self.crt = Some(offer);
        self.round = 0;
        self.backup = None;
        self.enrollments += 1;
        self.state = OutstationState::Enrolled;
        self.log("enrolled", "");
        Ok(())
    }

    /// Run the measurement loop for `cycles` cycles outside any round.
    pub fn advance(&mut self, cycles: u64) -> Result<(), ProtocolError> {
        for _ in 0..cycles {
            let ms = self.plant.tick()?;
            self.plant.absorb(&ms);
        }
        Ok(())
    }

    fn refuse(&mut self, reason: AbortReason, detail: String) -> ChallengeOutcome {
        self.log("challenge_aborted", format!("{}: {detail}", reason.name()));
        ChallengeOutcome::Abort(reason)
    }

    pub fn handle_challenge(&mut self, word: u64) -> Result<ChallengeOutcome, ProtocolError> {
        match self.state {
            OutstationState::Enrolled => {}
            OutstationState::Idle | OutstationState::Aborted => {
                let state = self.state.name();
                return Ok(self.refuse(AbortReason::Protocol, format!("not enrolled ({state})")));
            }
        }
        if self.backup.is_some() {
            // the verdict for the last reply never arrived
            self.state = OutstationState::Aborted;
            self.backup = None;
            return Ok(self.refuse(AbortReason::Desync, "verdict missing; re-enrollment required".into()));
        }
        let ch = Challenge::decode(word);
        if let Err(e) = ch.validate(self.plant.n_cells()) {
            return Ok(self.refuse(AbortReason::Malformed, e.to_string()));
        }

        let ms = self.plant.tick()?;
        let verdicts: Vec<(CellId, Result<SelfAuth, PlantError>)> = ch
            .lset1
            .iter()
            .map(|&id| (id, self.plant.check(&ms[id as usize], self.tolerance)))
            .collect();
        // the refresh loop keeps running whatever the round's fate
        self.plant.absorb(&ms);
        for (id, v) in verdicts {
            match v {
                Ok(SelfAuth::Pass { .. }) => {}
                Ok(SelfAuth::Fail { residual_mah }) => {
                    return Ok(self.refuse(
                        AbortReason::SelfAuth,
                        format!("cell {id} residual {residual_mah:.3} mAh"),
                    ));
                }
                Err(PlantError::Gauge(GaugeError::NotLearned(_))) => {
                    return Ok(self.refuse(AbortReason::Gauge, format!("cell {id} not learned")));
                }
                Err(PlantError::Model(e @ DucmError::OutOfWindow(_))) => {
                    return Ok(self.refuse(AbortReason::SelfAuth, format!("cell {id}: {e}")));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let lset2: [Measurement; LSET2_LEN] = ch.lset2.map(|id| ms[id as usize]);
        let (bs, clipped) = quantize_bs(&lset2);
        let crt = self.crt.as_mut().expect("enrolled outstation holds a table");
        let temp = build_temp_reply(crt, &ch, bs)?;
        let reply = AuthReply::from_temp(temp, ch.rt, self.variant);
        self.backup = Some(crt.clone());
        crt.update(bs);
        self.round += 1;
        let detail = if clipped {
            format!("reply {:016x}; bs clipped", reply.0)
        } else {
            format!("reply {:016x}", reply.0)
        };
        self.log("reply_sent", detail);
        Ok(ChallengeOutcome::Reply(reply))
    }

    /// Apply the master's verdict on the last reply.
    pub fn handle_verdict(&mut self, verdict: &Verdict) -> Result<(), ProtocolError> {
        if self.state != OutstationState::Enrolled {
            return Err(ProtocolError::State {
                role: Role::Outstation,
                action: "take a verdict",
                state: self.state.name(),
            });
        }
        let Some(backup) = self.backup.take() else {
            // nothing outstanding: a reject for the current round is harmless
            if !verdict.is_accept() && verdict.round() == self.round {
                self.log("verdict_ignored", "no reply outstanding");
                return Ok(());
            }
            self.state = OutstationState::Aborted;
            self.log("desync", format!("unexpected verdict for round {}", verdict.round()));
            return Ok(());
        };
        match verdict {
            Verdict::Accept { round, command } if *round == self.round => {
                self.log("command_executed", format!("{} byte command", command.len()));
            }
            Verdict::Reject { round } if round + 1 == self.round => {
                self.crt = Some(backup);
                self.round -= 1;
                self.log("rolled_back", "");
            }
            _ => {
                self.state = OutstationState::Aborted;
                self.log(
                    "desync",
                    format!("verdict round {} against own round {}", verdict.round(), self.round),
                );
            }
        }
        Ok(())
    }

    /// Drop the table; a fresh enrollment must follow.
    pub fn reset(&mut self) {
        self.crt = None;
        self.offer = None;
        self.backup = None;
        self.round = 0;
        self.state = OutstationState::Idle;
        self.log("reset", "");
    }
}
