//! Bob: ships basis-only time tags and drives the error correction.

use crate::bits::BitString;
use crate::cascade::{Action, CascadeCorrector, CascadeError, CascadeMessage, CascadeParams, ReconciliationResult};
use crate::privamp::{toeplitz_hash, HashSeed};
use crate::sifting::{bob_key_bit, CoincidenceClass};
use crate::timetag::{encode_records, TimeTag};

use super::common::*;
use super::frame::{Frame, FrameType};
use super::messages::*;
use super::{AbortReason, BlockStats, Endpoint, Phase, Role, SessionConfig, TagSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Hello,
    Matches,
    AliceBell,
    Sample,
    Seed,
    Parity,
    ReconcileTag,
    PaParams,
    PaSeed,
    AliceStats,
    ConfirmTag,
    Finished,
}

pub struct BobSession {
    cfg: SessionConfig,
    tags: TagBuffer,
    window: u64,
    /// Unmasked copy of the batch awaiting its match announcement.
    batch: Vec<TimeTag>,
    batch_range: (u64, u64),
    sent_end: u64,
    phase: Phase,
    step: Step,
    block: Block,
    qber_estimate: Option<f64>,
    corrector: Option<CascadeCorrector>,
    shuffle_seed: u64,
    result: Option<ReconciliationResult>,
    pa_len: usize,
    block_key: BitString,
    pending: Option<BlockStats>,
    stats: Vec<BlockStats>,
    key: BitString,
    abort: Option<(AbortReason, Option<String>)>,
}

impl BobSession {
    pub fn new(cfg: SessionConfig, source: TagSource) -> Self {
        Self {
            window: window_ticks(&cfg),
            cfg,
            tags: TagBuffer::new(source),
            batch: Vec::new(),
            batch_range: (0, 0),
            sent_end: 0,
            phase: Phase::Hello,
            step: Step::Hello,
            block: Block::new(0),
            qber_estimate: None,
            corrector: None,
            shuffle_seed: 0,
            result: None,
            pa_len: 0,
            block_key: BitString::new(),
            pending: None,
            stats: Vec::new(),
            key: BitString::new(),
            abort: None,
        }
    }

    /// Next non-empty window of tags, or an empty batch at end of data.
    fn next_batch(&mut self) -> Frame {
        loop {
            let Some(first) = self.tags.tags.first() else {
                if self.tags.pull() {
                    continue;
                }
                self.phase = Phase::Done;
                self.step = Step::Finished;
                return Frame::empty(FrameType::TimetagBatch);
            };
            let end = window_end(first.tick, self.window);
            self.tags.fill_past(end as i128);
            self.batch = self.tags.take_before(end as i128);
            self.batch_range = (self.sent_end, end);
            self.sent_end = end;
            self.step = Step::Matches;
            let masked: Vec<TimeTag> = self
                .batch
                .iter()
                .map(|t| TimeTag {
                    tick: t.tick,
                    detector: basis_only(t.detector),
                })
                .collect();
            return Frame::new(FrameType::TimetagBatch, encode_records(&masked));
        }
    }

    fn on_matches(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let ann = MatchAnnounce::parse(payload)?;
        let mut used = vec![false; self.batch.len()];
        for e in &ann.entries {
            let j = e.bob_index as usize;
            if j >= self.batch.len() || std::mem::replace(&mut used[j], true) {
                return Err(Fail::violation("bad or repeated tag index"));
            }
            let det = self.batch[j].detector;
            match e.class {
                CoincidenceClass::Key => {
                    let bit = bob_key_bit(det).ok_or_else(|| Fail::violation("key class on the wrong basis"))?;
                    self.block.key.push(bit);
                }
                CoincidenceClass::Discard if det <= 2 => return Err(Fail::violation("discard class on the key basis")),
                CoincidenceClass::Discard => {}
                CoincidenceClass::Bell => self.block.bell.push(det),
            }
        }
        self.block.coincidences += ann.entries.len() as u64;
        self.block.accidentals += ann.accidentals as u64;
        self.block.add_window(self.batch_range.0, self.batch_range.1);
        self.batch.clear();
        if self.phase == Phase::Sync {
            self.phase = Phase::Sift;
        }
        if self.block.key.len() >= key_target(&self.cfg, self.qber_estimate.is_none()) {
            self.phase = Phase::Bell;
            self.step = Step::AliceBell;
            return Ok(Vec::new());
        }
        Ok(vec![self.next_batch()])
    }

    fn on_alice_bell(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let reveal = bell_reveal_frame(&self.block.bell);
        let est = evaluate_bell(payload, &self.block.bell);
        if let Ok(e) = &est {
            self.block.estimate = Some(*e);
        }
        // Alice reaches the same verdict from the same records, so an
        // insecure block ends with our reveal rather than an abort frame.
        let detail = match est {
            Ok(e) if !is_insecure(&e) => None,
            Ok(e) => Some(format!("|S| = {:.4}", e.s_value.abs())),
            Err(f) if f.reason == AbortReason::InsecureRegime => Some(f.detail),
            Err(f) => return Err(f),
        };
        if let Some(detail) = detail {
            self.stats.push(self.block.base_stats());
            self.phase = Phase::Aborted;
            self.step = Step::Finished;
            self.abort = Some((AbortReason::InsecureRegime, Some(detail)));
            return Ok(vec![reveal]);
        }
        self.phase = Phase::Reconcile;
        self.step = if self.qber_estimate.is_none() {
            Step::Sample
        } else {
            Step::Seed
        };
        Ok(vec![reveal])
    }

    fn on_sample(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let req = QberSample::parse(payload)?;
        let n = self.block.key.len();
        let ok = req.positions.len() == req.bits.len()
            && req.positions.len() == sample_size(&self.cfg, n)
            && req.positions.windows(2).all(|w| w[0] < w[1])
            && req.positions.last().is_none_or(|&p| (p as usize) < n);
        if !ok {
            return Err(Fail::violation("malformed QBER sample"));
        }
        let mine: BitString = req.positions.iter().map(|&p| self.block.key.get(p as usize)).collect();
        let errors = mine.hamming_distance(&req.bits);
        self.qber_estimate = Some(if mine.is_empty() {
            0.0
        } else {
            errors as f64 / mine.len() as f64
        });
        self.block.key = remove_positions(&self.block.key, &req.positions);
        self.step = Step::Seed;
        Ok(vec![QberSample {
            positions: Vec::new(),
            bits: mine,
        }
        .to_frame()])
    }

    fn on_seed(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        self.shuffle_seed = parse_u64(payload)?;
        let params = CascadeParams {
            shuffle_seed: self.shuffle_seed,
            ..self.cfg.cascade
        };
        let qber = self.qber_estimate.expect("estimate set before reconciliation");
        let mut corrector = CascadeCorrector::new(self.block.key.clone(), qber, params).map_err(cascade_fail)?;
        let action = corrector.start();
        self.corrector = Some(corrector);
        Ok(vec![self.act(action)])
    }

    fn act(&mut self, action: Action) -> Frame {
        match action {
            Action::Request(blocks) => {
                self.step = Step::Parity;
                Frame::new(FrameType::ParityRequest, CascadeMessage::ParityRequest(blocks).encode_payload())
            }
            Action::Verify(tag) => {
                self.step = Step::ReconcileTag;
                u64_frame(FrameType::VerifyTag, tag)
            }
        }
    }

    fn on_parities(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let bits = parse_bits(payload)?;
        let action = self
            .corrector
            .as_mut()
            .expect("corrector active")
            .on_parities(&bits)
            .map_err(cascade_fail)?;
        Ok(vec![self.act(action)])
    }

    fn on_reconcile_tag(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let tag = parse_u64(payload)?;
        let corrector = self.corrector.take().expect("corrector active");
        let result = corrector.on_verify(tag).map_err(cascade_fail)?;
        let n = result.corrected_bits.len();
        let s_abs = self.block.estimate.expect("estimate").s_value.abs();
        let sec = security(&self.cfg, n, result.leaked_bits, s_abs)?;
        let mut stats = self.block.base_stats();
        stats.qber = result.corrections as f64 / n as f64;
        stats.leak_ec = result.leaked_bits;
        stats.i_eve = sec.i_eve;
        stats.final_bits = sec.final_length;
        self.pending = Some(stats);
        self.pa_len = sec.final_length as usize;
        self.result = Some(result);
        self.phase = Phase::Amplify;
        self.step = Step::PaParams;
        Ok(Vec::new())
    }

    fn on_pa_params(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let p = PaParams::parse(payload)?;
        let n = self.result.as_ref().expect("result").corrected_bits.len();
        if p.input_len as usize != n || p.output_len as usize != self.pa_len {
            return Err(Fail::violation(format!(
                "privacy amplification parameters {p:?} differ from local ({n}, {})",
                self.pa_len
            )));
        }
        self.step = Step::PaSeed;
        Ok(Vec::new())
    }

    fn on_pa_seed(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let bits = parse_bits(payload)?;
        let key = &self.result.as_ref().expect("result").corrected_bits;
        self.block_key = if self.pa_len == 0 {
            if !bits.is_empty() {
                return Err(Fail::violation("unexpected hash seed"));
            }
            BitString::new()
        } else {
            let seed = HashSeed::new(bits, key.len(), self.pa_len).map_err(|e| Fail::violation(e.to_string()))?;
            toeplitz_hash(key, &seed, self.pa_len).map_err(|e| Fail::violation(e.to_string()))?
        };
        self.phase = Phase::Confirm;
        self.step = Step::AliceStats;
        let stats = self.pending.expect("pending stats");
        Ok(vec![Frame::new(FrameType::BlockStats, stats.encode())])
    }

    fn on_alice_stats(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let theirs = BlockStats::decode(payload)?;
        let mine = self.pending.expect("pending stats");
        if !mine.same_as(&theirs) {
            return Err(Fail::violation(format!("block statistics differ: {mine:?} vs {theirs:?}")));
        }
        self.step = Step::ConfirmTag;
        Ok(Vec::new())
    }

    fn on_confirm(&mut self, payload: &[u8]) -> Result<Vec<Frame>, Fail> {
        let theirs = parse_u64(payload)?;
        let mine = confirm_tag(&self.block_key, self.shuffle_seed);
        let reply = u64_frame(FrameType::VerifyTag, mine);
        if theirs != mine {
            self.phase = Phase::Aborted;
            self.step = Step::Finished;
            self.abort = Some((AbortReason::VerificationFailed, Some("final keys differ".into())));
            return Ok(vec![reply, abort_frame(AbortReason::VerificationFailed)]);
        }
        let stats = self.pending.take().expect("pending stats");
        self.stats.push(stats);
        self.key.extend(&self.block_key);
        self.qber_estimate = Some(stats.qber);
        self.block = Block::new(self.block.index + 1);
        self.block_key = BitString::new();
        self.result = None;
        self.phase = Phase::Sift;
        Ok(vec![reply, self.next_batch()])
    }

    fn dispatch(&mut self, frame: &Frame) -> Result<Vec<Frame>, Fail> {
        use FrameType as T;
        match (self.step, frame.kind) {
            (Step::Hello, T::Hello) => {
                check_hello(&self.cfg, Role::Bob, &frame.payload)?;
                self.phase = Phase::Sync;
                let hello = hello(&self.cfg, Role::Bob).to_frame();
                Ok(vec![hello, self.next_batch()])
            }
            (Step::Matches, T::MatchAnnounce) => self.on_matches(&frame.payload),
            (Step::AliceBell, T::BellReveal) => self.on_alice_bell(&frame.payload),
            (Step::Sample, T::QberSample) => self.on_sample(&frame.payload),
            (Step::Seed, T::ShuffleSeed) => self.on_seed(&frame.payload),
            (Step::Parity, T::ParityResponse) => self.on_parities(&frame.payload),
            (Step::ReconcileTag, T::VerifyTag) => self.on_reconcile_tag(&frame.payload),
            (Step::PaParams, T::PaParams) => self.on_pa_params(&frame.payload),
            (Step::PaSeed, T::PaSeed) => self.on_pa_seed(&frame.payload),
            (Step::AliceStats, T::BlockStats) => self.on_alice_stats(&frame.payload),
            (Step::ConfirmTag, T::VerifyTag) => self.on_confirm(&frame.payload),
            (step, kind) => Err(Fail::violation(format!("{kind:?} not allowed in {step:?}"))),
        }
    }
}

fn cascade_fail(e: CascadeError) -> Fail {
    match e {
        CascadeError::VerificationFailed => Fail {
            reason: AbortReason::VerificationFailed,
            detail: "reconciled keys differ".into(),
        },
        other => Fail::violation(other.to_string()),
    }
}

impl Endpoint for BobSession {
    fn role(&self) -> Role {
        Role::Bob
    }

    fn phase(&self) -> Phase {
        self.phase
    }

    fn start(&mut self) -> Vec<Frame> {
        Vec::new()
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
