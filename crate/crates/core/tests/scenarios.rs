use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use derauth::crseq::{AuthReply, BessState, CellReplyTable, TempReply, TransformVariant};
use derauth::endpoints::{AbortReason, ChallengeOutcome, MasterSession, OutstationSession, OutstationState, Verdict};
use derauth::net::adversary::AdversaryMode;
use derauth::net::config::{ExperimentConfig, TransportKind};
use derauth::net::frame::{Frame, MsgType};
use derauth::net::session::{run_session, OutstationNode, RoundOutcome};
use derauth::plant::Plant;
use derauth::{DucmConfig, GaugeConfig, PackConfig, Tolerance};

fn config(n_cells: usize, rounds: u64, adversary: AdversaryMode) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.protocol.n_cells = n_cells;
    c.protocol.rounds = rounds;
    c.adversary = adversary;
    c
}

fn plant(seed: u64, n: usize) -> Plant {
    Plant::commission(
        seed,
        n,
        &PackConfig::default(),
        &GaugeConfig::default(),
        &DucmConfig::default(),
    )
    .unwrap()
}

#[test]
fn passive_session_accepts_every_round() {
    let r = run_session(&config(100, 10, AdversaryMode::Passive), 11).unwrap();
    let non_accepts: Vec<_> = r.outcomes.iter().filter(|o| **o != RoundOutcome::Accepted).collect();
    // a self-auth abort is legitimate at tau = 1 mAh, but never a reject
    assert!(non_accepts
        .iter()
        .all(|o| matches!(o, RoundOutcome::OutstationAbort(AbortReason::SelfAuth))));
    assert!(r.accepts() >= 9, "{}", r.summary());
    assert!(r.lockstep());
    assert!(r.tables_equal.iter().all(|t| *t != Some(false)));
    assert_eq!(r.master_crt.as_ref().unwrap().version, r.accepts() as u64);
}

#[test]
fn replayed_reply_is_rejected() {
    let r = run_session(&config(100, 20, AdversaryMode::Replay), 12).unwrap();
    let first_reply = r.outcomes.iter().position(|o| *o == RoundOutcome::Accepted).unwrap();
    for o in &r.outcomes[first_reply + 1..] {
        assert!(!matches!(o, RoundOutcome::Accepted), "{:?}", r.outcomes);
    }
    assert_eq!(r.accepts(), 1);
    assert!(r.lockstep(), "a reject leaves both tables where they were");
}

#[test]
fn blocked_verdict_forces_reenrollment() {
    let mode = AdversaryMode::Block {
        msg_type: MsgType::Verdict as u8,
        count: Some(1),
    };
    let r = run_session(&config(30, 5, mode.clone()), 13).unwrap();
    assert!(
        r.halted.as_deref().unwrap().contains("re-enrollment"),
        "{}",
        r.summary()
    );
    assert_eq!(r.outstation_state, OutstationState::Aborted);
    assert!(r
        .events
        .iter()
        .any(|e| e.event == "challenge_aborted" && e.detail.starts_with(AbortReason::Desync.name())));

    let mut c = config(30, 5, mode);
    c.protocol.auto_reenroll = true;
    let r = run_session(&c, 13).unwrap();
    assert!(r.halted.is_none());
    assert_eq!(r.reenrollments, 1);
    assert!(r.lockstep());
}

#[test]
fn lossy_enrollment_retries_from_idle() {
    let mut c = config(20, 3, AdversaryMode::Passive);
    c.protocol.enroll_drops = 2;
    let r = run_session(&c, 14).unwrap();
    assert_eq!(r.enroll_attempts, 3);
    assert!(r.lockstep());
    assert!(r.events.iter().filter(|e| e.event == "lost").count() == 2);

    c.protocol.enroll_drops = 3;
    let r = run_session(&c, 14).unwrap();
    assert!(r.master_crt.is_none());
    assert!(r.outcomes.is_empty());
    assert_eq!(r.outstation_state, OutstationState::Idle);
}

#[test]
fn memory_logs_are_byte_identical_for_equal_seeds() {
    for mode in [
        AdversaryMode::Passive,
        AdversaryMode::Replay,
        AdversaryMode::Rollback { depth: 3 },
    ] {
        let a = run_session(&config(40, 15, mode.clone()), 15).unwrap().events_jsonl();
        let b = run_session(&config(40, 15, mode.clone()), 15).unwrap().events_jsonl();
        assert_eq!(a, b);
        let c = run_session(&config(40, 15, mode), 16).unwrap().events_jsonl();
        assert_ne!(a, c);
    }
}

#[test]
fn tcp_transport_matches_memory_outcomes() {
    let mut c = config(30, 25, AdversaryMode::Passive);
    let memory = run_session(&c, 17).unwrap();
    c.protocol.transport = TransportKind::Tcp;
    let tcp = run_session(&c, 17).unwrap();
    assert_eq!(tcp.outcomes, memory.outcomes);
    assert!(tcp.lockstep());

    c.adversary = AdversaryMode::Replay;
    let tcp = run_session(&c, 17).unwrap();
    assert_eq!(tcp.accepts(), 1);
}

#[test]
fn event_log_lines_carry_the_five_fields() {
    let r = run_session(&config(20, 3, AdversaryMode::Passive), 18).unwrap();
    for line in r.events_jsonl().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5, "{line}");
        for k in ["round", "role", "event", "state", "detail"] {
            assert!(keys.contains(&k), "{line}");
        }
    }
}

#[test]
fn unknown_message_type_tears_down_the_connection() {
    let session = OutstationSession::new(plant(19, 8), Tolerance::new(1.0).unwrap(), 1);
    let mut node = OutstationNode::new(session);
    assert!(node.on_bytes(&[0xDE, 0xA7, 0x09, 0x00, 0x00]).is_empty());
    assert!(node.closed.as_deref().unwrap().contains("9"));
    assert!(node.session.events().iter().any(|e| e.event == "connection_aborted"));
    // nothing is processed after the teardown
    assert!(node.on_bytes(&Frame::enroll_request().encode()).is_empty());
}

#[test]
fn look_alike_cells_pass_far_more_often_at_wide_tolerance() {
    let n = 20;
    let mut p = plant(20, n);
    let (mut tight, mut wide, mut probes) = (0u64, 0u64, 0u64);
    for _ in 0..2000 {
        let ms = p.tick().unwrap();
        for m in &ms {
            let other = &p.models[(m.cell_id as usize + 1) % n];
            if let Ok(r) = other.residual_against(m) {
                probes += 1;
                tight += u64::from(r <= 1.0);
                wide += u64::from(r <= 50.0);
            }
        }
        p.absorb(&ms);
    }
    assert!(probes > 10_000);
    assert!(tight < wide, "tight {tight} wide {wide} of {probes}");
}

/// Honest rounds on a synchronized pair; for each, hand the forger what it
/// is allowed to see and try the forgery on a copy of the master.
fn forge_trials(forge: impl Fn(&mut ChaCha8Rng, &Ctx) -> AuthReply) -> (u64, u64) {
    let mut master = MasterSession::new(24, 21);
    let mut out = OutstationSession::new(plant(21, 24), Tolerance::new(1.0).unwrap(), 22);
    let enrolled = out.offer_enrollment().unwrap();
    master.accept_enrollment(enrolled.clone()).unwrap();
    out.confirm_enrollment().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut trials, mut successes) = (0u64, 0u64);
    while trials < 10_000 {
        let ch = master.build_challenge().unwrap();
        let current = master.crt().unwrap().clone();
        match out.handle_challenge(ch.encode()).unwrap() {
            ChallengeOutcome::Reply(genuine) => {
                let ctx = Ctx {
                    genuine,
                    rt: ch.rt,
                    lset1: ch.lset1,
                    current,
                    enrolled: enrolled.clone(),
                };
                // compare only against a table that has moved away from enrollment
                let stale_differs = ch
                    .lset1
                    .iter()
                    .any(|&id| ctx.enrolled.reply(id).unwrap() != ctx.current.reply(id).unwrap());
                if stale_differs {
                    let forged = forge(&mut rng, &ctx);
                    if forged != genuine {
                        trials += 1;
                        let mut probe = master.clone();
                        successes += u64::from(probe.verify_reply(forged).unwrap().is_accept());
                    }
                }
                let verdict = master.verify_reply(genuine).unwrap();
                assert!(verdict.is_accept());
                out.handle_verdict(&verdict).unwrap();
            }
            ChallengeOutcome::Abort(reason) => {
                master.abort(reason.name());
                master.resume().unwrap();
            }
        }
        master.take_events();
        out.take_events();
    }
    (trials, successes)
}

struct Ctx {
    genuine: AuthReply,
    rt: derauth::crseq::TransformSpec,
    lset1: [u8; 4],
    current: CellReplyTable,
    enrolled: CellReplyTable,
}

impl Ctx {
    fn replies(&self, crt: &CellReplyTable) -> [u8; 4] {
        self.lset1.map(|id| crt.reply(id).unwrap())
    }

    fn genuine_bs(&self) -> BessState {
        self.genuine.to_temp(self.rt, TransformVariant::WholeWord).bess_state()
    }
}

#[test]
fn forger_without_layout_fails() {
    // correct table and transform, but the halves packed the other way round
    let (trials, successes) = forge_trials(|rng, ctx| {
        let r = u32::from_be_bytes(ctx.replies(&ctx.current)) as u64;
        let guess: u32 = rng.gen();
        AuthReply::from_temp(TempReply(r << 32 | guess as u64), ctx.rt, TransformVariant::WholeWord)
    });
    assert_eq!((trials, successes), (10_000, 0));
}

#[test]
fn forger_without_transform_fails() {
    // sends the plain layout, or scrambles it with a transform of its own
    let (trials, successes) = forge_trials(|rng, ctx| {
        let temp = TempReply::new(ctx.genuine_bs(), ctx.replies(&ctx.current));
        if rng.gen() {
            AuthReply(temp.0)
        } else {
            AuthReply(temp.0.rotate_left(rng.gen_range(1..64)) ^ rng.gen::<u64>())
        }
    });
    assert!(trials == 10_000 && successes == 0, "{successes}/{trials}");
}

#[test]
fn forger_with_stale_table_fails() {
    let (trials, successes) = forge_trials(|_, ctx| {
        let temp = TempReply::new(ctx.genuine_bs(), ctx.replies(&ctx.enrolled));
        AuthReply::from_temp(temp, ctx.rt, TransformVariant::WholeWord)
    });
    assert_eq!((trials, successes), (10_000, 0));
}

#[test]
fn aborted_rounds_leave_both_tables_untouched() {
    let mut master = MasterSession::new(16, 24);
    let mut out = OutstationSession::new(plant(24, 16), Tolerance::new(1.0).unwrap(), 25);
    master.accept_enrollment(out.offer_enrollment().unwrap()).unwrap();
    out.confirm_enrollment().unwrap();
    for _ in 0..20 {
        let ch = master.build_challenge().unwrap();
        let before = (master.crt().cloned(), out.crt().cloned(), out.round());
        out.tolerance = Tolerance::new(1e-9).unwrap();
        let outcome = out.handle_challenge(ch.encode()).unwrap();
        assert!(matches!(outcome, ChallengeOutcome::Abort(AbortReason::SelfAuth)));
        master.abort("self_auth");
        master.resume().unwrap();
        assert_eq!(before, (master.crt().cloned(), out.crt().cloned(), out.round()));

        out.tolerance = Tolerance::new(1.0).unwrap();
        let ch = master.build_challenge().unwrap();
        if let ChallengeOutcome::Reply(r) = out.handle_challenge(ch.encode()).unwrap() {
            let v = master.verify_reply(r).unwrap();
            out.handle_verdict(&v).unwrap();
        } else {
            master.abort("self_auth");
            master.resume().unwrap();
        }
        assert_eq!(master.crt(), out.crt());
    }
}

#[test]
fn late_reject_rolls_the_outstation_back() {
    let mut master = MasterSession::new(16, 26);
    let mut out = OutstationSession::new(plant(26, 16), Tolerance::new(1.0).unwrap(), 27);
    master.accept_enrollment(out.offer_enrollment().unwrap()).unwrap();
    out.confirm_enrollment().unwrap();
    let before = out.crt().cloned();
    let ch = master.build_challenge().unwrap();
    let ChallengeOutcome::Reply(_) = out.handle_challenge(ch.encode()).unwrap() else {
        panic!("healthy pack should reply");
    };
    assert_ne!(out.crt().cloned(), before);
    out.handle_verdict(&Verdict::Reject { round: 0 }).unwrap();
    assert_eq!(out.crt().cloned(), before);
    assert_eq!(out.round(), 0);
}
