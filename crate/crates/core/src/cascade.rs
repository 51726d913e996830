//! CASCADE error correction with exact accounting of disclosed bits.
//!
//! Bob drives the reconciliation ([`CascadeCorrector`]); Alice answers
//! parity queries about her key ([`CascadeResponder`]). Both are sans-IO:
//! the corrector emits [`Action`]s and is fed the responses, so the same
//! code runs in-process, over the session protocol, or in tests.
//!
//! Blocks are addressed as `(start, len)` ranges over the concatenation of
//! the per-pass permutations: pass `p` occupies indices `p*n .. (p+1)*n`.
//! Pass 0 uses the identity permutation; later passes use seeded uniform
//! shuffles that both sides derive from the shared shuffle seed.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bits::BitString;
use crate::privamp::{toeplitz_hash, HashSeed};

/// Upper bound on passes a responder will serve.
pub const MAX_PASSES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error("verification tags differ after reconciliation")]
    VerificationFailed,
    #[error("reconciliation channel closed")]
    ChannelClosed,
    #[error("key lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot reconcile an empty key")]
    EmptyKey,
    #[error("invalid block descriptor ({start}, {len})")]
    InvalidBlock { start: u32, len: u32 },
    #[error("unexpected message: {0}")]
    Unexpected(&'static str),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

/// Classic first-pass block size `ceil(0.73 / qber)`, clamped to `[8, n/2]`.
pub fn classic_initial_block(qber: f64, n: usize) -> usize {
    let upper = (n / 2).max(1);
    let k = if qber > 0.0 {
        (0.73 / qber).ceil().min(usize::MAX as f64 / 2.0) as usize
    } else {
        upper
    };
    k.max(8).min(upper)
}

#[derive(Debug, Clone, Copy)]
pub struct CascadeParams {
    pub passes: usize,
    pub initial_block_fn: fn(f64, usize) -> usize,
    pub shuffle_seed: u64,
    pub verification_tag_bits: usize,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self {
            passes: 4,
            initial_block_fn: classic_initial_block,
            shuffle_seed: 0,
            verification_tag_bits: 64,
        }
    }
}

impl CascadeParams {
    /// Block size of every pass: the first from the QBER estimate, then
    /// doubling, capped at `n`.
    pub fn block_sizes(&self, qber: f64, n: usize) -> Vec<usize> {
        let k0 = (self.initial_block_fn)(qber, n).clamp(1, n.max(1));
        (0..self.passes)
            .map(|p| k0.saturating_mul(1usize << p.min(40)).min(n.max(1)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockDescriptor {
    pub start: u32,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CascadeMessage {
    ShuffleSeed(u64),
    ParityRequest(Vec<BlockDescriptor>),
    ParityResponse(BitString),
    VerifyTag(u64),
}

impl CascadeMessage {
    pub fn encode_payload(&self) -> Vec<u8> {
        match self {
            CascadeMessage::ShuffleSeed(s) | CascadeMessage::VerifyTag(s) => s.to_le_bytes().to_vec(),
            CascadeMessage::ParityRequest(blocks) => {
                let mut out = Vec::with_capacity(blocks.len() * 8);
                for b in blocks {
                    out.extend_from_slice(&b.start.to_le_bytes());
                    out.extend_from_slice(&b.len.to_le_bytes());
                }
                out
            }
            CascadeMessage::ParityResponse(bits) => {
                let mut out = (bits.len() as u32).to_le_bytes().to_vec();
                out.extend_from_slice(&bits.to_bytes_msb());
                out
            }
        }
    }

    pub fn decode_shuffle_seed(payload: &[u8]) -> Result<u64, CascadeError> {
        payload
            .try_into()
            .map(u64::from_le_bytes)
            .map_err(|_| CascadeError::Malformed("expected 8-byte value"))
    }

    pub fn decode_parity_request(payload: &[u8]) -> Result<Vec<BlockDescriptor>, CascadeError> {
        if !payload.len().is_multiple_of(8) {
            return Err(CascadeError::Malformed("parity request length"));
        }
        Ok(payload
            .chunks_exact(8)
            .map(|c| BlockDescriptor {
                start: u32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                len: u32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            })
            .collect())
    }

    pub fn decode_parity_response(payload: &[u8]) -> Result<BitString, CascadeError> {
        if payload.len() < 4 {
            return Err(CascadeError::Malformed("parity response header"));
        }
        let n = u32::from_le_bytes(payload[..4].try_into().expect("4 bytes")) as usize;
        BitString::from_bytes_msb(&payload[4..], n).ok_or(CascadeError::Malformed("parity response length"))
    }
}

/// Per-pass permutations derived from the shuffle seed.
#[derive(Debug, Clone)]
struct Permutations {
    n: usize,
    seed: u64,
    forward: Vec<Vec<u32>>,
    inverse: Vec<Vec<u32>>,
}

impl Permutations {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            forward: Vec::new(),
            inverse: Vec::new(),
        }
    }

    fn ensure(&mut self, pass: usize) {
        while self.forward.len() <= pass {
            let p = self.forward.len();
            let mut perm: Vec<u32> = (0..self.n as u32).collect();
            if p > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(p as u64);
                perm.shuffle(&mut rng);
            }
            let mut inv = vec![0u32; self.n];
            for (pos, &idx) in perm.iter().enumerate() {
                inv[idx as usize] = pos as u32;
            }
            self.forward.push(perm);
            self.inverse.push(inv);
        }
    }

    fn positions(&mut self, block: BlockDescriptor) -> &[u32] {
        let pass = block.start as usize / self.n;
        self.ensure(pass);
        let off = block.start as usize % self.n;
        &self.forward[pass][off..off + block.len as usize]
    }

    fn parity(&mut self, bits: &BitString, block: BlockDescriptor) -> bool {
        self.positions(block)
            .iter()
            .fold(false, |acc, &i| acc ^ bits.get(i as usize))
    }
}

fn tag_input(bits: &BitString, tag_bits: usize) -> BitString {
    let mut input = bits.clone();
    while input.len() < tag_bits.max(1) {
        input.push(false);
    }
    input
}

/// Universal-hash verification tag over `bits`.
///
/// The tag is a `tag_bits x n` Toeplitz hash with a seed derived from
/// `seed`; distinct keys collide with probability at most `2^-tag_bits`.
pub fn verify_keys(bits: &BitString, tag_bits: usize, seed: u64) -> u64 {
    assert!((1..=64).contains(&tag_bits), "tag must fit in 64 bits");
    let input = tag_input(bits, tag_bits);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let hash_seed = HashSeed::random(input.len(), tag_bits, &mut rng).expect("tag fits the input");
    let out = toeplitz_hash(&input, &hash_seed, tag_bits).expect("sizes checked");
    out.iter()
        .enumerate()
        .fold(0u64, |acc, (i, b)| acc | ((b as u64) << i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconciliationResult {
    pub corrected_bits: BitString,
    /// Parity bits disclosed plus the verification tag.
    pub leaked_bits: u64,
    pub exchanged_messages: u64,
    pub verified: bool,
    /// Bits Bob flipped (0 on Alice's side until she is told).
    pub corrections: u64,
}

/// Alice's side: answers parity queries from her key.
#[derive(Debug, Clone)]
pub struct CascadeResponder {
    bits: BitString,
    perms: Permutations,
    tag_bits: usize,
    leaked: u64,
    messages: u64,
    verified: Option<bool>,
}

impl CascadeResponder {
    pub fn new(bits: BitString, shuffle_seed: u64, tag_bits: usize) -> Result<Self, CascadeError> {
        if bits.is_empty() {
            return Err(CascadeError::EmptyKey);
        }
        let n = bits.len();
        Ok(Self {
            bits,
            perms: Permutations::new(n, shuffle_seed),
            tag_bits,
            leaked: 0,
            // The shuffle seed announcement.
            messages: 1,
            verified: None,
        })
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.perms.seed
    }

    pub fn answer_parities(&mut self, blocks: &[BlockDescriptor]) -> Result<BitString, CascadeError> {
        let n = self.bits.len();
        let mut out = BitString::new();
        for &b in blocks {
            let pass = b.start as usize / n;
            let off = b.start as usize % n;
            if b.len == 0 || pass >= MAX_PASSES || off + b.len as usize > n {
                return Err(CascadeError::InvalidBlock {
                    start: b.start,
                    len: b.len,
                });
            }
            out.push(self.perms.parity(&self.bits, b));
        }
        self.leaked += out.len() as u64;
        self.messages += 2;
        Ok(out)
    }

    /// Compares Bob's tag with Alice's own and returns Alice's tag.
    pub fn answer_verify(&mut self, bob_tag: u64) -> u64 {
        let tag = verify_keys(&self.bits, self.tag_bits, self.perms.seed);
        self.leaked += self.tag_bits as u64;
        self.messages += 2;
        self.verified = Some(tag == bob_tag);
        tag
    }

    pub fn finish(self) -> Result<ReconciliationResult, CascadeError> {
        match self.verified {
            Some(true) => Ok(ReconciliationResult {
                corrected_bits: self.bits,
                leaked_bits: self.leaked,
                exchanged_messages: self.messages,
                verified: true,
                corrections: 0,
            }),
            Some(false) => Err(CascadeError::VerificationFailed),
            None => Err(CascadeError::Unexpected("reconciliation not finished")),
        }
    }

    pub fn leaked_bits(&self) -> u64 {
        self.leaked
    }
}

/// What the corrector needs next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Ask Alice for these parities.
    Request(Vec<BlockDescriptor>),
    /// All passes done; send this tag and compare with Alice's.
    Verify(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Awaiting {
    TopLevel,
    Half(BlockDescriptor),
    Tag,
    Nothing,
}

/// Bob's side of CASCADE.
#[derive(Debug, Clone)]
pub struct CascadeCorrector {
    bits: BitString,
    n: usize,
    params: CascadeParams,
    sizes: Vec<usize>,
    perms: Permutations,
    known: HashMap<BlockDescriptor, bool>,
    pass: usize,
    queue: VecDeque<BlockDescriptor>,
    search: Option<BlockDescriptor>,
    awaiting: Awaiting,
    leaked: u64,
    messages: u64,
    corrections: u64,
    my_tag: u64,
}

impl CascadeCorrector {
    pub fn new(bits: BitString, qber_estimate: f64, params: CascadeParams) -> Result<Self, CascadeError> {
        if bits.is_empty() {
            return Err(CascadeError::EmptyKey);
        }
        if params.passes == 0 || params.passes > MAX_PASSES {
            return Err(CascadeError::Malformed("pass count"));
        }
        let n = bits.len();
        Ok(Self {
            sizes: params.block_sizes(qber_estimate, n),
            perms: Permutations::new(n, params.shuffle_seed),
            bits,
            n,
            params,
            known: HashMap::new(),
            pass: 0,
            queue: VecDeque::new(),
            search: None,
            awaiting: Awaiting::Nothing,
            leaked: 0,
            messages: 1,
            corrections: 0,
            my_tag: 0,
        })
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn top_level_blocks(&self, pass: usize) -> Vec<BlockDescriptor> {
        let k = self.sizes[pass];
        (0..self.n)
            .step_by(k)
            .map(|off| BlockDescriptor {
                start: (pass * self.n + off) as u32,
                len: k.min(self.n - off) as u32,
            })
            .collect()
    }

    fn block_containing(&mut self, pass: usize, index: usize) -> BlockDescriptor {
        self.perms.ensure(pass);
        let pos = self.perms.inverse[pass][index] as usize;
        let k = self.sizes[pass];
        let off = pos / k * k;
        BlockDescriptor {
            start: (pass * self.n + off) as u32,
            len: k.min(self.n - off) as u32,
        }
    }

    fn mismatched(&mut self, block: BlockDescriptor) -> Option<bool> {
        let alice = *self.known.get(&block)?;
        Some(alice != self.perms.parity(&self.bits, block))
    }

    /// First request; pass-0 parities.
    pub fn start(&mut self) -> Action {
        self.awaiting = Awaiting::TopLevel;
        Action::Request(self.top_level_blocks(0))
    }

    /// Feeds Alice's answer to the last request.
    pub fn on_parities(&mut self, parities: &BitString) -> Result<Action, CascadeError> {
        match self.awaiting {
            Awaiting::TopLevel => {
                let blocks = self.top_level_blocks(self.pass);
                if parities.len() != blocks.len() {
                    return Err(CascadeError::Malformed("parity count"));
                }
                for (b, p) in blocks.iter().zip(parities.iter()) {
                    self.known.insert(*b, p);
                }
                for b in blocks {
                    if self.mismatched(b) == Some(true) {
                        self.queue.push_back(b);
                    }
                }
            }
            Awaiting::Half(block) => {
                if parities.len() != 1 {
                    return Err(CascadeError::Malformed("parity count"));
                }
                self.known.insert(block, parities.get(0));
            }
            _ => return Err(CascadeError::Unexpected("parity response")),
        }
        self.leaked += parities.len() as u64;
        self.messages += 2;
        Ok(self.run())
    }

    fn flip(&mut self, index: usize) {
        self.bits.flip(index);
        self.corrections += 1;
        // Every processed pass now has the block holding this bit toggled.
        for q in 0..=self.pass {
            let b = self.block_containing(q, index);
            if self.mismatched(b) == Some(true) && !self.queue.contains(&b) {
                self.queue.push_back(b);
            }
        }
    }

    fn run(&mut self) -> Action {
        loop {
            if let Some(cur) = self.search {
                if cur.len == 1 {
                    let pass = cur.start as usize / self.n;
                    self.perms.ensure(pass);
                    let index = self.perms.forward[pass][cur.start as usize % self.n] as usize;
                    self.search = None;
                    self.flip(index);
                    continue;
                }
                let left = BlockDescriptor {
                    start: cur.start,
                    len: cur.len / 2,
                };
                let right = BlockDescriptor {
                    start: cur.start + left.len,
                    len: cur.len - left.len,
                };
                match self.known.get(&left).copied() {
                    Some(left_parity) => {
                        // Alice's parity of the right half follows from the
                        // parent's without disclosing anything new.
                        let parent = self.known[&cur];
                        self.known.insert(right, parent ^ left_parity);
                        let next = if self.mismatched(left) == Some(true) { left } else { right };
                        self.search = Some(next);
                    }
                    None => {
                        self.awaiting = Awaiting::Half(left);
                        return Action::Request(vec![left]);
                    }
                }
            } else if let Some(block) = self.queue.pop_front() {
                if self.mismatched(block) == Some(true) {
                    self.search = Some(block);
                }
            } else if self.pass + 1 < self.params.passes {
                self.pass += 1;
                self.awaiting = Awaiting::TopLevel;
                return Action::Request(self.top_level_blocks(self.pass));
            } else {
                self.awaiting = Awaiting::Tag;
                self.my_tag = verify_keys(&self.bits, self.params.verification_tag_bits, self.params.shuffle_seed);
                return Action::Verify(self.my_tag);
            }
        }
    }

    /// Final step: compare Alice's tag.
    pub fn on_verify(mut self, alice_tag: u64) -> Result<ReconciliationResult, CascadeError> {
        if self.awaiting != Awaiting::Tag {
            return Err(CascadeError::Unexpected("verification tag"));
        }
        self.leaked += self.params.verification_tag_bits as u64;
        self.messages += 2;
        if alice_tag != self.my_tag {
            return Err(CascadeError::VerificationFailed);
        }
        Ok(ReconciliationResult {
            corrected_bits: self.bits,
            leaked_bits: self.leaked,
            exchanged_messages: self.messages,
            verified: true,
            corrections: self.corrections,
        })
    }

    pub fn leaked_bits(&self) -> u64 {
        self.leaked
    }

    pub fn corrections(&self) -> u64 {
        self.corrections
    }
}

/// Message transport for a blocking reconciliation driven from Bob's side.
pub trait CascadeLink {
    /// Sends a request and waits for the reply.
    fn exchange(&mut self, msg: CascadeMessage) -> Result<CascadeMessage, CascadeError>;
}

/// Runs Bob's side to completion over `link`; the shuffle seed must
/// already be agreed.
pub fn reconcile_over<L: CascadeLink>(
    mut corrector: CascadeCorrector,
    link: &mut L,
) -> Result<ReconciliationResult, CascadeError> {
    let mut action = corrector.start();
    loop {
        match action {
            Action::Request(blocks) => match link.exchange(CascadeMessage::ParityRequest(blocks))? {
                CascadeMessage::ParityResponse(bits) => action = corrector.on_parities(&bits)?,
                _ => return Err(CascadeError::Unexpected("expected parity response")),
            },
            Action::Verify(tag) => match link.exchange(CascadeMessage::VerifyTag(tag))? {
                CascadeMessage::VerifyTag(alice) => return corrector.on_verify(alice),
                _ => return Err(CascadeError::Unexpected("expected verification tag")),
            },
        }
    }
}

impl CascadeLink for CascadeResponder {
    fn exchange(&mut self, msg: CascadeMessage) -> Result<CascadeMessage, CascadeError> {
        match msg {
            CascadeMessage::ParityRequest(blocks) => Ok(CascadeMessage::ParityResponse(self.answer_parities(&blocks)?)),
            CascadeMessage::VerifyTag(tag) => Ok(CascadeMessage::VerifyTag(self.answer_verify(tag))),
            _ => Err(CascadeError::Unexpected("request")),
        }
    }
}

/// In-process reconciliation returning Alice's and Bob's results.
///
/// A verification failure is reported as `Err(VerificationFailed)` and the
/// block must be discarded.
pub fn reconcile(
    alice_bits: &BitString,
    bob_bits: &BitString,
    qber_estimate: f64,
    params: CascadeParams,
) -> Result<(ReconciliationResult, ReconciliationResult), CascadeError> {
    if alice_bits.len() != bob_bits.len() {
        return Err(CascadeError::LengthMismatch(alice_bits.len(), bob_bits.len()));
    }
    let mut alice = CascadeResponder::new(alice_bits.clone(), params.shuffle_seed, params.verification_tag_bits)?;
    let bob = CascadeCorrector::new(bob_bits.clone(), qber_estimate, params)?;
    let bob_result = reconcile_over(bob, &mut alice)?;
    Ok((alice.finish()?, bob_result))
}

/// Size of the first half when a block of `len` is split.
fn left_half(len: usize) -> usize {
    len / 2
}

/// Binary search for one error in a block whose parity is known to differ
/// from Alice's. `alice_parity` returns Alice's parity of a subset of the
/// block's indices. Flips the located bit and returns its index together
/// with the number of parities disclosed.
pub fn binary_search_correct<F>(
    block: &[usize],
    bits: &mut BitString,
    mut alice_parity: F,
) -> Result<(usize, u32), CascadeError>
where
    F: FnMut(&[usize]) -> Result<bool, CascadeError>,
{
    if block.is_empty() {
        return Err(CascadeError::EmptyKey);
    }
    let mut range = block;
    let mut exchanges = 0;
    while range.len() > 1 {
        let (left, right) = range.split_at(left_half(range.len()));
        let theirs = alice_parity(left)?;
        exchanges += 1;
        let ours = left.iter().fold(false, |acc, &i| acc ^ bits.get(i));
        range = if theirs != ours { left } else { right };
    }
    bits.flip(range[0]);
    Ok((range[0], exchanges))
}
