//! Man-in-the-middle hop between master and outstation.

use serde::{Deserialize, Serialize};

use crate::crseq::{AuthReply, CellReplyTable, Challenge, TempReply, TransformVariant};
use crate::endpoints::{Event, Role, Verdict};
use crate::net::frame::{Frame, Message, MsgType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    ToOutstation,
    ToMaster,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryMode {
    /// Forward everything, keep a copy.
    #[default]
    Passive,
    /// Swap each reply for the one captured in the previous round.
    Replay,
    /// Flip one bit (0 = least significant) of the reply word, in every
    /// round or only in round `round` (counted from 1).
    Tamper { bit: u8, round: Option<u64> },
    /// Drop frames of one type; all of them unless `count` is set.
    Block { msg_type: u8, count: Option<u32> },
    /// From round `depth` on, re-sign replies with the enrollment-time table.
    Rollback { depth: u64 },
}

impl AdversaryMode {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            AdversaryMode::Tamper { bit, .. } if bit > 63 => Err(format!("tamper bit {bit} is not in 0..=63")),
            AdversaryMode::Block { msg_type, .. } if MsgType::from_code(msg_type).is_none() => {
                Err(format!("cannot block unknown message type {msg_type}"))
            }
            AdversaryMode::Rollback { depth: 0 } => Err("rollback depth must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adversary {
    pub mode: AdversaryMode,
    pub capture_log: Vec<(Direction, Frame)>,
    pub variant: TransformVariant,
    last_reply: Option<Frame>,
    last_challenge: Option<Challenge>,
    stale_crt: Option<CellReplyTable>,
    blocked: u32,
    challenges_seen: u64,
    events: Vec<Event>,
}

impl Adversary {
    pub fn new(mode: AdversaryMode) -> Self {
        Self {
            mode,
            capture_log: Vec::new(),
            variant: TransformVariant::default(),
            last_reply: None,
            last_challenge: None,
            stale_crt: None,
            blocked: 0,
            challenges_seen: 0,
            events: Vec::new(),
        }
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    fn log(&mut self, event: &str, detail: String) {
        self.events.push(Event {
            round: self.challenges_seen,
            role: Role::Adversary,
            event: event.to_string(),
            state: "active".into(),
            detail,
        });
    }

    /// Hand the hop one frame; `None` means it was dropped.
    pub fn intercept(&mut self, dir: Direction, frame: Frame) -> Option<Frame> {
        self.capture_log.push((dir, frame.clone()));
        match Message::try_from(&frame) {
            Ok(Message::Challenge(w)) => {
                self.challenges_seen += 1;
                self.last_challenge = Some(Challenge::decode(w));
            }
            // enrollment is observed but never interfered with
            Ok(Message::EnrollTable(crt)) => {
                self.stale_crt.get_or_insert(crt);
                return Some(frame);
            }
            Ok(Message::EnrollRequest) => return Some(frame),
            Ok(Message::Verdict(Verdict::Accept { round: 0, .. })) => return Some(frame),
            _ => {}
        }

        match self.mode.clone() {
            AdversaryMode::Passive => Some(frame),
            AdversaryMode::Block { msg_type, count } => {
                let limit_hit = count.is_some_and(|c| self.blocked >= c);
                if frame.msg_type as u8 == msg_type && !limit_hit {
                    self.blocked += 1;
                    self.log("blocked", frame.msg_type.name().into());
                    None
                } else {
                    Some(frame)
                }
            }
            AdversaryMode::Replay if frame.msg_type == MsgType::Reply => {
                let previous = self.last_reply.replace(frame.clone());
                match previous {
                    Some(old) => {
                        self.log("replayed", format!("{:016x}", old.word().unwrap_or(0)));
                        Some(old)
                    }
                    None => Some(frame),
                }
            }
            AdversaryMode::Tamper { bit, round }
                if frame.msg_type == MsgType::Reply && round.is_none_or(|r| r == self.challenges_seen) =>
            {
                let w = frame.word()? ^ (1u64 << bit);
                self.log("tampered", format!("bit {bit}"));
                Some(Frame::reply(w))
            }
            AdversaryMode::Rollback { depth } if frame.msg_type == MsgType::Reply => {
                match (&self.stale_crt, self.last_challenge, frame.word()) {
                    (Some(stale), Some(ch), Some(w)) if self.challenges_seen >= depth => {
                        let genuine = AuthReply(w).to_temp(ch.rt, self.variant);
                        let mut replies = [0u8; 4];
                        for (slot, &id) in replies.iter_mut().zip(&ch.lset1) {
                            *slot = stale.reply(id).unwrap_or(0);
                        }
                        let forged = TempReply::new(genuine.bess_state(), replies);
                        let out = AuthReply::from_temp(forged, ch.rt, self.variant);
                        self.log("rolled_back", format!("{:016x}", out.0));
                        Some(Frame::reply(out.0))
                    }
                    _ => Some(frame),
                }
            }
            _ => Some(frame),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passive_never_alters() {
        let mut adv = Adversary::new(AdversaryMode::Passive);
        for f in [Frame::challenge(1), Frame::reply(2), Frame::enroll_request()] {
            assert_eq!(adv.intercept(Direction::ToOutstation, f.clone()), Some(f));
        }
        assert_eq!(adv.capture_log.len(), 3);
    }

    #[test]
    fn replay_sends_previous_reply() {
        let mut adv = Adversary::new(AdversaryMode::Replay);
        assert_eq!(
            adv.intercept(Direction::ToMaster, Frame::reply(1)),
            Some(Frame::reply(1))
        );
        assert_eq!(
            adv.intercept(Direction::ToMaster, Frame::reply(2)),
            Some(Frame::reply(1))
        );
        assert_eq!(
            adv.intercept(Direction::ToMaster, Frame::reply(3)),
            Some(Frame::reply(2))
        );
    }

    #[test]
    fn tamper_flips_one_bit() {
        let mut adv = Adversary::new(AdversaryMode::Tamper { bit: 63, round: None });
        assert_eq!(
            adv.intercept(Direction::ToMaster, Frame::reply(1)),
            Some(Frame::reply(0x8000_0000_0000_0001))
        );
        assert_eq!(
            adv.intercept(Direction::ToMaster, Frame::challenge(1)),
            Some(Frame::challenge(1))
        );
    }

    #[test]
    fn one_shot_tamper_hits_only_its_round() {
        let mut adv = Adversary::new(AdversaryMode::Tamper { bit: 0, round: Some(2) });
        let mut out = Vec::new();
        for _ in 0..3 {
            adv.intercept(Direction::ToOutstation, Frame::challenge(0));
            out.push(adv.intercept(Direction::ToMaster, Frame::reply(0)).unwrap());
        }
        assert_eq!(out, [Frame::reply(0), Frame::reply(1), Frame::reply(0)]);
    }

    #[test]
    fn block_honours_count() {
        let mut adv = Adversary::new(AdversaryMode::Block {
            msg_type: MsgType::Verdict as u8,
            count: Some(1),
        });
        let confirm = Frame::verdict(&Verdict::Accept {
            round: 0,
            command: vec![],
        });
        assert!(adv.intercept(Direction::ToOutstation, confirm).is_some());
        let verdict = Frame::verdict(&Verdict::Reject { round: 0 });
        assert_eq!(adv.intercept(Direction::ToOutstation, verdict.clone()), None);
        assert_eq!(adv.intercept(Direction::ToOutstation, verdict.clone()), Some(verdict));
    }

    #[test]
    fn mode_validation() {
        assert!(AdversaryMode::Tamper { bit: 64, round: None }.validate().is_err());
        assert!(AdversaryMode::Block {
            msg_type: 9,
            count: None
        }
        .validate()
        .is_err());
        assert!(AdversaryMode::Rollback { depth: 0 }.validate().is_err());
        assert!(AdversaryMode::Replay.validate().is_ok());
    }
}
