//! Alice: matches coincidences, answers parity queries, chooses the public
//! randomness.

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bits::BitString;
use crate::cascade::CascadeResponder;
use crate::privamp::{toeplitz_hash, HashSeed};
use crate::sifting::{alice_key_bit, classify, CoincidenceClass};
use crate::timetag::{count_accidentals, decode_records, find_delay, match_coincidences, ns_to_ticks};

use super::common::*;
use super::frame::{Frame, FrameType};
use super::messages::*;
use super::{AbortReason, BlockStats, Endpoint, Phase, Role, SessionConfig, TagSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Hello,
    Batch,
    BobBell,
    Sample,
    Parity,
    BobStats,
    ConfirmTag,
    Finished,
}

pub struct AliceSession {
    cfg: SessionConfig,
    tags: TagBuffer,
    window: u64,
    delay: Option<i64>,
    prev_end: u64,
    rng: ChaCha8Rng,
    phase: Phase,
    step: Step,
    block: Block,
    qber_estimate: Option<f64>,
    sample_positions: Vec<u32>,
    responder: Option<CascadeResponder>,
    shuffle_seed: u64,
    leak: u64,
    block_key: BitString,
    pending: Option<BlockStats>,
    stats: Vec<BlockStats>,
    key: BitString,
    abort: Option<(AbortReason, Option<String>)>,
}

impl AliceSession {
    pub fn new(cfg: SessionConfig, source: TagSource) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0xA);
        Self {
            window: window_ticks(&cfg),
            cfg,
            tags: TagBuffer::new(source),
            delay: None,
            prev_end: 0,
            rng,
            phase: Phase::Hello,
            step: Step::Hello,
            block: Block::new(0),
            qber_estimate: None,
            sample_positions: Vec::new(),
            responder: None,
            shuffle_seed: 0,
            leak: 0,
            block_key: BitString::new(),
            pending: None,
            stats: Vec::new(),
            key: BitString::new(),
            abort: None,
        }
    }

    /// Clock offset found on the first batch, in ticks.
    pub fn delay_ticks(&self) -> Option<i64> {
        self.delay
    }

    fn on_batch(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let bob = decode_records(payload).map_err(|e| Fail::violation(e.to_string()))?;
        let Some(last) = bob.last() else {
            self.phase = Phase::Done;
            self.step = Step::Finished;
            return Ok(Vec::new());
        };
        if bob.iter().any(|t| t.detector != 1 && t.detector != 3) {
            return Err(Fail::violation("time tags must carry the basis only"));
        }
        if bob.windows(2).any(|w| w[0].tick > w[1].tick) || bob[0].tick < self.prev_end {
            return Err(Fail::violation("time tags out of order"));
        }
        let start = self.prev_end;
        let end = window_end(last.tick, self.window);
        if bob[0].tick < end - self.window {
            return Err(Fail::violation("batch spans more than one window"));
        }

        let delay = match self.delay {
            Some(d) => d,
            None => {
                let span = ns_to_ticks(self.cfg.window.search_span_us * 1e3) as i128;
                let horizon = end as i128 + span;
                self.tags.fill_past(horizon);
                let cut = self.tags.tags.partition_point(|t| (t.tick as i128) < horizon);
                let est = find_delay(&self.tags.tags[..cut], &bob, &self.cfg.window).map_err(|e| Fail {
                    reason: AbortReason::NoPeak,
                    detail: e.to_string(),
                })?;
                self.delay = Some(est.delay_ticks);
                self.phase = Phase::Sift;
                est.delay_ticks
            }
        };

        // Alice tags whose delay-corrected time falls in Bob's window.
        let lo = start as i128 - delay as i128;
        let hi = end as i128 - delay as i128;
        self.tags.fill_past(hi);
        let mut mine = self.tags.take_before(hi);
        let first = mine.partition_point(|t| (t.tick as i128) < lo);
        mine.drain(..first);

        let records = match_coincidences(&mine, &bob, delay, &self.cfg.window);
        let accidentals = count_accidentals(&mine, &bob, delay, &self.cfg.window);
        let mut entries = Vec::with_capacity(records.len());
        for r in &records {
            let class = classify(r.alice_detector, r.bob_detector).map_err(|e| Fail::violation(e.to_string()))?;
            match class {
                CoincidenceClass::Key => self.block.key.push(alice_key_bit(r.alice_detector).expect("key detector")),
                CoincidenceClass::Bell => self.block.bell.push(r.alice_detector),
                CoincidenceClass::Discard => {}
            }
            entries.push(MatchEntry {
                alice_index: r.alice_index as u32,
                bob_index: r.bob_index as u32,
                class,
            });
        }
        self.block.coincidences += records.len() as u64;
        self.block.accidentals += accidentals;
        self.block.add_window(start, end);
        self.prev_end = end;

        let mut out = vec![MatchAnnounce {
            accidentals: accidentals as u32,
            entries,
        }
        .to_frame()];
        if self.block.key.len() >= key_target(&self.cfg, self.qber_estimate.is_none()) {
            out.push(bell_reveal_frame(&self.block.bell));
            self.phase = Phase::Bell;
            self.step = Step::BobBell;
        }
        Ok(out)
    }

    fn on_bob_bell(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let est = evaluate_bell(&self.block.bell, payload);
        if let Ok(e) = &est {
            self.block.estimate = Some(*e);
        }
        let est = est?;
        if is_insecure(&est) {
            return Err(Fail {
                reason: AbortReason::InsecureRegime,
                detail: format!("|S| = {:.4}", est.s_value.abs()),
            });
        }
        self.phase = Phase::Reconcile;
        if self.qber_estimate.is_none() {
            let n = self.block.key.len();
            let m = sample_size(&self.cfg, n);
            let mut positions: Vec<u32> = index::sample(&mut self.rng, n, m).into_iter().map(|i| i as u32).collect();
            positions.sort_unstable();
            let bits = positions.iter().map(|&p| self.block.key.get(p as usize)).collect();
            self.sample_positions = positions.clone();
            self.step = Step::Sample;
            return Ok(vec![QberSample { positions, bits }.to_frame()]);
        }
        Ok(vec![self.start_cascade()?])
    }

    fn on_sample(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let reply = QberSample::parse(payload)?;
        if !reply.positions.is_empty() || reply.bits.len() != self.sample_positions.len() {
            return Err(Fail::violation("sample reply does not match the request"));
        }
        let mine: BitString = self.sample_positions.iter().map(|&p| self.block.key.get(p as usize)).collect();
        let errors = mine.hamming_distance(&reply.bits);
        self.qber_estimate = Some(if mine.is_empty() {
            0.0
        } else {
            errors as f64 / mine.len() as f64
        });
        self.block.key = remove_positions(&self.block.key, &self.sample_positions);
        Ok(vec![self.start_cascade()?])
    }

    fn start_cascade(&mut self) -> Result<Frame, Fail> {
        self.shuffle_seed = self.rng.next_u64();
        let responder = CascadeResponder::new(
            self.block.key.clone(),
            self.shuffle_seed,
            self.cfg.cascade.verification_tag_bits,
        )
        .map_err(|e| Fail::violation(e.to_string()))?;
        self.responder = Some(responder);
        self.step = Step::Parity;
        Ok(u64_frame(FrameType::ShuffleSeed, self.shuffle_seed))
    }

    fn on_parity(&mut self, frame: &Frame) -> Result<Vec<Frame>, Fail> {
        let responder = self.responder.as_mut().expect("responder active");
        match frame.kind {
            FrameType::ParityRequest => {
                let blocks = crate::cascade::CascadeMessage::decode_parity_request(&frame.payload)
                    .map_err(|e| Fail::violation(e.to_string()))?;
                let bits = responder
                    .answer_parities(&blocks)
                    .map_err(|e| Fail::violation(e.to_string()))?;
                Ok(vec![bits_frame(FrameType::ParityResponse, &bits)])
            }
            FrameType::VerifyTag => {
                let bob_tag = parse_u64(&frame.payload)?;
                let tag = responder.answer_verify(bob_tag);
                let reply = u64_frame(FrameType::VerifyTag, tag);
                if tag != bob_tag {
                    return Ok(self.fail_with(reply, AbortReason::VerificationFailed, "reconciled keys differ"));
                }
                self.leak = responder.leaked_bits();
                self.responder = None;
                self.amplify(reply)
            }
            _ => Err(Fail::violation(format!("{:?} during reconciliation", frame.kind))),
        }
    }

    fn amplify(&mut self, verify_reply: Frame) -> Result<Vec<Frame>, Fail> {
        let n = self.block.key.len();
        let s_abs = self.block.estimate.expect("estimate").s_value.abs();
        let sec = security(&self.cfg, n, self.leak, s_abs)?;
        let m = sec.final_length as usize;
        let seed = if m > 0 {
            let seed = HashSeed::random(n, m, &mut self.rng).map_err(|e| Fail::violation(e.to_string()))?;
            self.block_key = toeplitz_hash(&self.block.key, &seed, m).map_err(|e| Fail::violation(e.to_string()))?;
            seed.bits().clone()
        } else {
            self.block_key = BitString::new();
            BitString::new()
        };
        let mut stats = self.block.base_stats();
        stats.leak_ec = self.leak;
        stats.i_eve = sec.i_eve;
        stats.final_bits = sec.final_length;
        self.pending = Some(stats);
        self.phase = Phase::Amplify;
        self.step = Step::BobStats;
        Ok(vec![
            verify_reply,
            PaParams {
                input_len: n as u32,
                output_len: m as u32,
            }
            .to_frame(),
            bits_frame(FrameType::PaSeed, &seed),
        ])
    }

    fn on_bob_stats(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let theirs = BlockStats::decode(payload)?;
        let mut mine = self.pending.expect("pending stats");
        // Only Bob knows how many bits were corrected.
        if !(0.0..=1.0).contains(&theirs.qber) {
            return Err(Fail::violation("QBER out of range"));
        }
        mine.qber = theirs.qber;
        if !mine.same_as(&theirs) {
            return Err(Fail::violation(format!("block statistics differ: {mine:?} vs {theirs:?}")));
        }
        self.pending = Some(mine);
        self.phase = Phase::Confirm;
        self.step = Step::ConfirmTag;
        Ok(vec![
            Frame::new(FrameType::BlockStats, mine.encode()),
            u64_frame(FrameType::VerifyTag, confirm_tag(&self.block_key, self.shuffle_seed)),
        ])
    }

    fn on_confirm(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let theirs = parse_u64(payload)?;
        if theirs != confirm_tag(&self.block_key, self.shuffle_seed) {
            self.phase = Phase::Aborted;
            self.step = Step::Finished;
            self.abort = Some((AbortReason::VerificationFailed, Some("final keys differ".into())));
            return Ok(Vec::new());
        }
        let stats = self.pending.take().expect("pending stats");
        self.stats.push(stats);
        self.key.extend(&self.block_key);
        self.qber_estimate = Some(stats.qber);
        self.block = Block::new(self.block.index + 1);
        self.block_key = BitString::new();
        self.phase = Phase::Sift;
        self.step = Step::Batch;
        Ok(Vec::new())
    }

    fn fail_with(&mut self, first: Frame, reason: AbortReason, detail: &str) -> Vec<Frame> {
        self.phase = Phase::Aborted;
        self.step = Step::Finished;
        self.abort = Some((reason, Some(detail.to_string())));
        vec![first, abort_frame(reason)]
    }

    fn dispatch(&mut self, frame: &Frame) -> Result<Vec<Frame>, Fail> {
        use FrameType as T;
        match (self.step, frame.kind) {
            (Step::Hello, T::Hello) => {
                check_hello(&self.cfg, Role::Alice, &frame.payload)?;
                self.phase = Phase::Sync;
                self.step = Step::Batch;
                Ok(Vec::new())
            }
            (Step::Batch, T::TimetagBatch) => self.on_batch(&frame.payload),
            (Step::BobBell, T::BellReveal) => self.on_bob_bell(&frame.payload),
            (Step::Sample, T::QberSample) => self.on_sample(&frame.payload),
            (Step::Parity, _) => self.on_parity(frame),
            (Step::BobStats, T::BlockStats) => self.on_bob_stats(&frame.payload),
            (Step::ConfirmTag, T::VerifyTag) => self.on_confirm(&frame.payload),
            (step, kind) => Err(Fail::violation(format!("{kind:?} not allowed in {step:?}"))),
        }
    }
}

impl Endpoint for AliceSession {
    fn role(&self) -> Role {
        Role::Alice
    }

    fn phase(&self) -> Phase {
        self.phase
    }

    fn start(&mut self) -> Vec<Frame> {
        vec![hello(&self.cfg, Role::Alice).to_frame()]
    }

    fn advance(&mut self, frame: Frame) -> Vec<Frame> {
        if self.is_finished() {
            return Vec::new();
        }
        if frame.kind == FrameType::Abort {
            let reason = AbortReason::from_code(frame.payload.first().copied().unwrap_or(0));
            self.phase = Phase::Aborted;
            self.step = Step::Finished;
            self.abort = Some((reason, Some("aborted by peer".into())));
            return Vec::new();
        }
        match self.dispatch(&frame) {
            Ok(out) => out,
            Err(fail) => {
                if fail.reason == AbortReason::InsecureRegime {
                    // Reported like any other block, with no key.
                    self.stats.push(self.block.base_stats());
                }
                self.phase = Phase::Aborted;
                self.step = Step::Finished;
                self.abort = Some((fail.reason, Some(fail.detail)));
                vec![abort_frame(fail.reason)]
            }
        }
    }

    fn abort(&self) -> Option<(AbortReason, Option<String>)> {
        self.abort.clone()
    }

    fn block_stats(&self) -> &[BlockStats] {
        &self.stats
    }

    fn final_key(&self) -> &BitString {
        &self.key
    }
}
