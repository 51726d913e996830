//! Entangled photon-pair channel model.
//!
//! A source emits polarization-singlet pairs as a Poisson process. Each
//! photon is routed passively to one analyzer setting, survives loss and
//! detector inefficiency independently, and is time-stamped with Gaussian
//! jitter. Uncorrelated background counts are added per detector, and an
//! intercept-resend eavesdropper can be placed on Bob's arm.
//!
//! Generation is split into fixed-length segments, each seeded from
//! `(rng_seed, segment index)`, so either endpoint can regenerate its own
//! side of the stream independently and bit-identically.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use thiserror::Error;

use crate::timetag::{TimeTag, TICK_NS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("{field} = {value} is out of range")]
    Domain { field: &'static str, value: f64 },
}

fn check(field: &'static str, value: f64, ok: bool) -> Result<(), PhysicsError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(PhysicsError::Domain { field, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Alice,
    Bob,
}

impl Side {
    pub fn detector_count(self) -> u8 {
        match self {
            Side::Alice => 6,
            Side::Bob => 4,
        }
    }

    pub fn is_valid_detector(self, detector: u8) -> bool {
        (1..=self.detector_count()).contains(&detector)
    }
}

/// Analyzer settings. Alice has the key basis `AK` and the two Bell bases;
/// Bob has `B0` (shared with the key) and `B1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    AK,
    A0,
    A1,
    B0,
    B1,
}

impl Setting {
    pub fn side(self) -> Side {
        match self {
            Setting::AK | Setting::A0 | Setting::A1 => Side::Alice,
            Setting::B0 | Setting::B1 => Side::Bob,
        }
    }
}

/// Measurement result of one analyzer: the photon left through the `+1`
/// port (polarized along the setting angle) or the orthogonal `-1` port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub fn sign(self) -> i32 {
        match self {
            Outcome::Plus => 1,
            Outcome::Minus => -1,
        }
    }

    fn index(self) -> usize {
        match self {
            Outcome::Plus => 0,
            Outcome::Minus => 1,
        }
    }
}

/// Analyzer angles (degrees, polarization of the `+1` detector) and the
/// detector numbering.
///
/// Detectors are numbered per side: Alice 1/2 (`AK`), 3/4 (`A0`), 5/6
/// (`A1`); Bob 1/2 (`B0`, written 1'/2'), 3/4 (`B1`). Odd detectors are the
/// `+1` ports. With the default angles an ideal singlet gives
/// `S = -2*sqrt(2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettingGeometry {
    pub a_k: f64,
    pub a_0: f64,
    pub a_1: f64,
    pub b_0: f64,
    pub b_1: f64,
}

impl Default for SettingGeometry {
    fn default() -> Self {
        Self {
            a_k: 0.0,
            a_0: 22.5,
            // The -67.5/+22.5 basis, labeled so that its +1 port sits at 157.5.
            a_1: 157.5,
            b_0: 0.0,
            b_1: 45.0,
        }
    }
}

impl SettingGeometry {
    pub fn angle(&self, setting: Setting) -> f64 {
        match setting {
            Setting::AK => self.a_k,
            Setting::A0 => self.a_0,
            Setting::A1 => self.a_1,
            Setting::B0 => self.b_0,
            Setting::B1 => self.b_1,
        }
    }

    pub fn detector(setting: Setting, outcome: Outcome) -> u8 {
        let base = match setting {
            Setting::AK | Setting::B0 => 1,
            Setting::A0 | Setting::B1 => 3,
            Setting::A1 => 5,
        };
        base + outcome.index() as u8
    }

    pub fn decode(side: Side, detector: u8) -> Option<(Setting, Outcome)> {
        if !side.is_valid_detector(detector) {
            return None;
        }
        let outcome = if detector % 2 == 1 {
            Outcome::Plus
        } else {
            Outcome::Minus
        };
        let setting = match (side, detector.div_ceil(2)) {
            (Side::Alice, 1) => Setting::AK,
            (Side::Alice, 2) => Setting::A0,
            (Side::Alice, 3) => Setting::A1,
            (Side::Bob, 1) => Setting::B0,
            (Side::Bob, 2) => Setting::B1,
            _ => unreachable!(),
        };
        Some((setting, outcome))
    }

    /// `+1`/`-1` value carried by a detector click.
    pub fn sign(side: Side, detector: u8) -> Option<i32> {
        Self::decode(side, detector).map(|(_, o)| o.sign())
    }

    /// True when both settings lie on the H/V axes, where the source has its
    /// best polarization correlation.
    pub fn is_hv_pair(&self, alice: Setting, bob: Setting) -> bool {
        let on_axis = |deg: f64| (deg.rem_euclid(90.0)).abs() < 1e-9;
        on_axis(self.angle(alice)) && on_axis(self.angle(bob))
    }
}

/// Probability table `P(i, j)` over Alice's and Bob's outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTable {
    pub p: [[f64; 2]; 2],
}

impl JointTable {
    fn from_correlation(e: f64) -> Self {
        let same = 0.25 * (1.0 + e);
        let diff = 0.25 * (1.0 - e);
        Self {
            p: [[same, diff], [diff, same]],
        }
    }

    pub fn prob(&self, alice: Outcome, bob: Outcome) -> f64 {
        self.p[alice.index()][bob.index()]
    }

    pub fn correlation(&self) -> f64 {
        self.p[0][0] + self.p[1][1] - self.p[0][1] - self.p[1][0]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Outcome, Outcome) {
        let u: f64 = rng.random();
        let cells = [
            (Outcome::Plus, Outcome::Plus),
            (Outcome::Plus, Outcome::Minus),
            (Outcome::Minus, Outcome::Plus),
            (Outcome::Minus, Outcome::Minus),
        ];
        let mut acc = 0.0;
        for &(a, b) in &cells[..3] {
            acc += self.prob(a, b);
            if u < acc {
                return (a, b);
            }
        }
        cells[3]
    }
}

/// Werner-type singlet statistics: `E = -V cos 2(theta_a - theta_b)`.
pub fn joint_probability(theta_a: f64, theta_b: f64, visibility: f64) -> Result<JointTable, PhysicsError> {
    check("visibility", visibility, (0.0..=1.0).contains(&visibility))?;
    let e = -visibility * (2.0 * (theta_a - theta_b).to_radians()).cos();
    Ok(JointTable::from_correlation(e))
}

/// Correlations after Eve measures Bob's photon at `eve_angle` and resends
/// what she saw: `E = -cos 2(theta_a - e) cos 2(theta_b - e)`.
pub fn intercept_resend_probability(theta_a: f64, theta_b: f64, eve_angle: f64) -> JointTable {
    let ca = (2.0 * (theta_a - eve_angle).to_radians()).cos();
    let cb = (2.0 * (theta_b - eve_angle).to_radians()).cos();
    JointTable::from_correlation(-ca * cb)
}

/// Passive basis choice: Alice sends half her photons to the key analyzer
/// and splits the rest evenly between the two Bell analyzers; Bob splits
/// 50:50.
pub fn route_detection<R: Rng + ?Sized>(side: Side, rng: &mut R) -> Setting {
    match side {
        Side::Alice => {
            if rng.random_bool(0.5) {
                Setting::AK
            } else if rng.random_bool(0.5) {
                Setting::A0
            } else {
                Setting::A1
            }
        }
        Side::Bob => {
            if rng.random_bool(0.5) {
                Setting::B0
            } else {
                Setting::B1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    /// Pairs per second leaving the source.
    pub pair_rate: f64,
    pub loss_db_bob: f64,
    pub detector_efficiency: f64,
    pub visibility_hv: f64,
    pub visibility_diag: f64,
    /// Uncorrelated counts per second on every detector.
    pub background_rate: f64,
    /// Standard deviation of the Alice-Bob arrival-time difference (ns);
    /// each side contributes `jitter_sigma / sqrt(2)`.
    pub jitter_sigma: f64,
    /// Bob's clock/path offset relative to Alice (ns).
    pub bob_delay: f64,
    pub duration: f64,
    pub rng_seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            pair_rate: 18_000.0,
            loss_db_bob: 3.0,
            detector_efficiency: 1.0,
            visibility_hv: 0.92,
            visibility_diag: 0.888,
            background_rate: 19_000.0,
            jitter_sigma: 0.5,
            bob_delay: 12_345.0,
            duration: 60.0,
            rng_seed: 1,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        check("pair_rate", self.pair_rate, self.pair_rate >= 0.0)?;
        check("loss_db_bob", self.loss_db_bob, self.loss_db_bob >= 0.0)?;
        check(
            "detector_efficiency",
            self.detector_efficiency,
            (0.0..=1.0).contains(&self.detector_efficiency),
        )?;
        check(
            "visibility_hv",
            self.visibility_hv,
            (0.0..=1.0).contains(&self.visibility_hv),
        )?;
        check(
            "visibility_diag",
            self.visibility_diag,
            (0.0..=1.0).contains(&self.visibility_diag),
        )?;
        check("background_rate", self.background_rate, self.background_rate >= 0.0)?;
        check("jitter_sigma", self.jitter_sigma, self.jitter_sigma >= 0.0)?;
        check("bob_delay", self.bob_delay, true)?;
        check("duration", self.duration, self.duration >= 0.0)?;
        Ok(())
    }

    pub fn bob_transmission(&self) -> f64 {
        self.detector_efficiency * 10f64.powf(-self.loss_db_bob / 10.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub intercept_fraction: f64,
    /// Angle of Eve's analyzer in degrees; 0 is the H/V basis.
    pub attack_basis: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            intercept_fraction: 0.0,
            attack_basis: 0.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        check(
            "intercept_fraction",
            self.intercept_fraction,
            (0.0..=1.0).contains(&self.intercept_fraction),
        )?;
        check("attack_basis", self.attack_basis, true)
    }
}

/// Channel statistics for one setting combination, mixing the undisturbed
/// source with the intercepted fraction.
pub fn pair_table(
    geometry: &SettingGeometry,
    channel: &ChannelConfig,
    attack: &AttackConfig,
    alice: Setting,
    bob: Setting,
    intercepted: bool,
) -> Result<JointTable, PhysicsError> {
    let (ta, tb) = (geometry.angle(alice), geometry.angle(bob));
    if intercepted {
        return Ok(intercept_resend_probability(ta, tb, attack.attack_basis));
    }
    let v = if geometry.is_hv_pair(alice, bob) {
        channel.visibility_hv
    } else {
        channel.visibility_diag
    };
    joint_probability(ta, tb, v)
}

/// Expected correlation of the configured model for a setting pair.
pub fn model_correlation(
    geometry: &SettingGeometry,
    channel: &ChannelConfig,
    attack: &AttackConfig,
    alice: Setting,
    bob: Setting,
) -> Result<f64, PhysicsError> {
    let p = attack.intercept_fraction;
    let clean = pair_table(geometry, channel, attack, alice, bob, false)?.correlation();
    let ir = pair_table(geometry, channel, attack, alice, bob, true)?.correlation();
    Ok((1.0 - p) * clean + p * ir)
}

/// CHSH combination `E(a0,b0) + E(a0,b1) + E(a1,b0) - E(a1,b1)` of the model.
pub fn analytic_chsh(
    geometry: &SettingGeometry,
    channel: &ChannelConfig,
    attack: &AttackConfig,
) -> Result<f64, PhysicsError> {
    let e = |a, b| model_correlation(geometry, channel, attack, a, b);
    Ok(e(Setting::A0, Setting::B0)? + e(Setting::A0, Setting::B1)? + e(Setting::A1, Setting::B0)?
        - e(Setting::A1, Setting::B1)?)
}

/// One emitted pair's settings and outcomes, before loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub alice_setting: Setting,
    pub bob_setting: Setting,
    pub alice_outcome: Outcome,
    pub bob_outcome: Outcome,
    pub intercepted: bool,
}

pub fn sample_pair<R: Rng + ?Sized>(
    geometry: &SettingGeometry,
    channel: &ChannelConfig,
    attack: &AttackConfig,
    rng: &mut R,
) -> Result<PairSample, PhysicsError> {
    let alice_setting = route_detection(Side::Alice, rng);
    let bob_setting = route_detection(Side::Bob, rng);
    let intercepted = attack.intercept_fraction > 0.0 && rng.random_bool(attack.intercept_fraction);
    let table = pair_table(geometry, channel, attack, alice_setting, bob_setting, intercepted)?;
    let (alice_outcome, bob_outcome) = table.sample(rng);
    Ok(PairSample {
        alice_setting,
        bob_setting,
        alice_outcome,
        bob_outcome,
        intercepted,
    })
}

/// A pair for which both photons were detected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruePair {
    pub alice: TimeTag,
    pub bob: TimeTag,
    pub sample: PairSample,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventStreams {
    pub alice_tags: Vec<TimeTag>,
    pub bob_tags: Vec<TimeTag>,
    /// Simulator-only record for test oracles; never sent on the wire.
    pub ground_truth: Option<Vec<TruePair>>,
}

impl EventStreams {
    pub fn tags(&self, side: Side) -> &[TimeTag] {
        match side {
            Side::Alice => &self.alice_tags,
            Side::Bob => &self.bob_tags,
        }
    }
}

/// Both clocks start this far before the first possible event so jitter
/// never produces a negative tick.
const CLOCK_MARGIN_NS: f64 = 100.0;

pub const DEFAULT_SEGMENT_SECONDS: f64 = 1.0;

/// Segment-wise, seed-deterministic event generator.
#[derive(Debug, Clone)]
pub struct StreamGenerator {
    channel: ChannelConfig,
    attack: AttackConfig,
    geometry: SettingGeometry,
    segment_seconds: f64,
}

impl StreamGenerator {
    pub fn new(
        channel: ChannelConfig,
        attack: AttackConfig,
        geometry: SettingGeometry,
    ) -> Result<Self, PhysicsError> {
        channel.validate()?;
        attack.validate()?;
        Ok(Self {
            channel,
            attack,
            geometry,
            segment_seconds: DEFAULT_SEGMENT_SECONDS,
        })
    }

    pub fn with_segment_seconds(mut self, seconds: f64) -> Result<Self, PhysicsError> {
        check("segment_seconds", seconds, seconds > 0.0)?;
        self.segment_seconds = seconds;
        Ok(self)
    }

    pub fn channel(&self) -> &ChannelConfig {
        &self.channel
    }

    pub fn segment_count(&self) -> u64 {
        (self.channel.duration / self.segment_seconds).ceil() as u64
    }

    fn segment_bounds(&self, index: u64) -> (f64, f64) {
        let start = index as f64 * self.segment_seconds;
        let end = ((index + 1) as f64 * self.segment_seconds).min(self.channel.duration);
        (start, end)
    }

    fn rng(&self, index: u64, lane: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.channel.rng_seed);
        rng.set_stream(index * 3 + lane);
        rng
    }

    fn side_offset_ns(&self, side: Side) -> f64 {
        let d = self.channel.bob_delay;
        CLOCK_MARGIN_NS
            + match side {
                Side::Alice => (-d).max(0.0),
                Side::Bob => d.max(0.0),
            }
    }

    fn to_tick(ns: f64) -> u64 {
        (ns / TICK_NS).round().max(0.0) as u64
    }

    /// Generates one segment. `want` selects which sides are materialized;
    /// the pair-level random draws are identical either way.
    fn segment_impl(&self, index: u64, want_alice: bool, want_bob: bool, truth: bool) -> EventStreams {
        let ch = &self.channel;
        let (start, end) = self.segment_bounds(index);
        let mut out = EventStreams {
            ground_truth: truth.then(Vec::new),
            ..Default::default()
        };
        if end <= start {
            return out;
        }
        let alice_offset = self.side_offset_ns(Side::Alice);
        let bob_offset = self.side_offset_ns(Side::Bob);
        let side_sigma = ch.jitter_sigma / SQRT_2;
        let jitter = (side_sigma > 0.0).then(|| Normal::new(0.0, side_sigma).expect("finite sigma"));
        let bob_survival = ch.bob_transmission();

        if ch.pair_rate > 0.0 {
            let mut rng = self.rng(index, 0);
            let gaps = Exp::new(ch.pair_rate).expect("positive rate");
            let mut t = start + gaps.sample(&mut rng);
            while t < end {
                let sample = sample_pair(&self.geometry, ch, &self.attack, &mut rng)
                    .expect("validated configuration");
                let alice_seen = rng.random_bool(ch.detector_efficiency);
                let bob_seen = rng.random_bool(bob_survival);
                let mut jitter_ns = || jitter.map_or(0.0, |j| j.sample(&mut rng));
                let (ja, jb) = (jitter_ns(), jitter_ns());
                let t_ns = t * 1e9;
                let alice = TimeTag {
                    tick: Self::to_tick(t_ns + alice_offset + ja),
                    detector: SettingGeometry::detector(sample.alice_setting, sample.alice_outcome),
                };
                let bob = TimeTag {
                    tick: Self::to_tick(t_ns + bob_offset + jb),
                    detector: SettingGeometry::detector(sample.bob_setting, sample.bob_outcome),
                };
                if alice_seen && want_alice {
                    out.alice_tags.push(alice);
                }
                if bob_seen && want_bob {
                    out.bob_tags.push(bob);
                }
                if alice_seen && bob_seen {
                    if let Some(gt) = out.ground_truth.as_mut() {
                        gt.push(TruePair { alice, bob, sample });
                    }
                }
                t += gaps.sample(&mut rng);
            }
        }

        if ch.background_rate > 0.0 {
            let counts = Poisson::new(ch.background_rate * (end - start)).expect("positive mean");
            for (side, lane, want) in [(Side::Alice, 1, want_alice), (Side::Bob, 2, want_bob)] {
                if !want {
                    continue;
                }
                let mut rng = self.rng(index, lane);
                let offset = self.side_offset_ns(side);
                let tags = match side {
                    Side::Alice => &mut out.alice_tags,
                    Side::Bob => &mut out.bob_tags,
                };
                for detector in 1..=side.detector_count() {
                    let count = counts.sample(&mut rng) as u64;
                    for _ in 0..count {
                        let t = rng.random_range(start..end);
                        tags.push(TimeTag {
                            tick: Self::to_tick(t * 1e9 + offset),
                            detector,
                        });
                    }
                }
            }
        }

        out.alice_tags.sort_unstable();
        out.bob_tags.sort_unstable();
        out
    }

    /// Both sides of one segment, with ground truth.
    pub fn segment(&self, index: u64) -> EventStreams {
        self.segment_impl(index, true, true, true)
    }

    /// One side of one segment, sorted by tick.
    pub fn segment_side(&self, index: u64, side: Side) -> Vec<TimeTag> {
        let s = self.segment_impl(index, side == Side::Alice, side == Side::Bob, false);
        match side {
            Side::Alice => s.alice_tags,
            Side::Bob => s.bob_tags,
        }
    }

    /// Iterator over one side's segments, in order.
    pub fn side_segments(&self, side: Side) -> impl Iterator<Item = Vec<TimeTag>> + '_ {
        (0..self.segment_count()).map(move |i| self.segment_side(i, side))
    }

    /// Owning variant of [`Self::side_segments`], for handing one side's
    /// stream to another thread.
    pub fn into_side_segments(self, side: Side) -> impl Iterator<Item = Vec<TimeTag>> + Send + 'static {
        (0..self.segment_count()).map(move |i| self.segment_side(i, side))
    }

    /// The whole run, both sides merged and sorted.
    pub fn generate(&self) -> EventStreams {
        let mut out = EventStreams {
            ground_truth: Some(Vec::new()),
            ..Default::default()
        };
        for i in 0..self.segment_count() {
            let seg = self.segment(i);
            out.alice_tags.extend(seg.alice_tags);
            out.bob_tags.extend(seg.bob_tags);
            if let (Some(all), Some(gt)) = (out.ground_truth.as_mut(), seg.ground_truth) {
                all.extend(gt);
            }
        }
        // Jitter can reorder events across a segment boundary.
        out.alice_tags.sort_unstable();
        out.bob_tags.sort_unstable();
        out
    }
}

/// Runs the full source-to-detector model for the configured duration.
pub fn generate_event_streams(
    channel: &ChannelConfig,
    attack: &AttackConfig,
    geometry: &SettingGeometry,
) -> Result<EventStreams, PhysicsError> {
    Ok(StreamGenerator::new(channel.clone(), *attack, *geometry)?.generate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> ChannelConfig {
        ChannelConfig {
            pair_rate: 50_000.0,
            loss_db_bob: 0.0,
            detector_efficiency: 1.0,
            visibility_hv: 1.0,
            visibility_diag: 1.0,
            background_rate: 0.0,
            jitter_sigma: 0.5,
            bob_delay: 1000.0,
            duration: 1.0,
            rng_seed: 7,
        }
    }

    /// `<psi-|P_a (x) P_b|psi->` for linear-polarization projectors, computed
    /// from the two-photon state vector in the H/V basis.
    fn state_vector_prob(theta_a: f64, theta_b: f64, plus_a: bool, plus_b: bool) -> f64 {
        let proj = |theta: f64, plus: bool| {
            let t = theta.to_radians();
            if plus {
                [t.cos(), t.sin()]
            } else {
                [-t.sin(), t.cos()]
            }
        };
        let a = proj(theta_a, plus_a);
        let b = proj(theta_b, plus_b);
        // |psi-> = (|HV> - |VH>)/sqrt 2 with H=0, V=1.
        let psi = [[0.0, 1.0 / SQRT_2], [-1.0 / SQRT_2, 0.0]];
        let mut amp = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                amp += a[i] * b[j] * psi[i][j];
            }
        }
        amp * amp
    }

    #[test]
    fn joint_probability_matches_state_vector() {
        for &(ta, tb) in &[(0.0, 0.0), (22.5, 0.0), (22.5, 45.0), (157.5, 45.0), (13.0, 71.0)] {
            let t = joint_probability(ta, tb, 1.0).unwrap();
            for (i, pa) in [(Outcome::Plus, true), (Outcome::Minus, false)] {
                for (j, pb) in [(Outcome::Plus, true), (Outcome::Minus, false)] {
                    let want = state_vector_prob(ta, tb, pa, pb);
                    assert!((t.prob(i, j) - want).abs() < 1e-12, "{ta} {tb}");
                }
            }
        }
    }

    #[test]
    fn joint_probability_examples() {
        let t = joint_probability(0.0, 0.0, 1.0).unwrap();
        assert!((t.prob(Outcome::Plus, Outcome::Minus) - 0.5).abs() < 1e-15);
        assert!(t.prob(Outcome::Plus, Outcome::Plus).abs() < 1e-15);

        let t = joint_probability(22.5, 0.0, 1.0).unwrap();
        assert!((t.correlation() + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!((t.prob(Outcome::Plus, Outcome::Plus) - 0.0732233).abs() < 1e-6);
        assert!((t.prob(Outcome::Plus, Outcome::Minus) - 0.4267767).abs() < 1e-6);

        let t = joint_probability(31.0, 87.0, 0.0).unwrap();
        for row in t.p {
            for v in row {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
        assert!(joint_probability(0.0, 0.0, 1.1).is_err());
        assert!(joint_probability(0.0, 0.0, -0.1).is_err());
    }

    /// Eve measures Bob's photon at angle `e`, each outcome with probability
    /// 1/2, leaving Alice's photon orthogonal; both analyzers then follow
    /// Malus' law.
    fn intercept_enumeration(ta: f64, tb: f64, e: f64) -> f64 {
        let malus = |photon: f64, analyzer: f64| (photon - analyzer).to_radians().cos().powi(2);
        let mut corr = 0.0;
        for eve_pol in [e, e + 90.0] {
            let alice_pol = eve_pol + 90.0;
            let pa = malus(alice_pol, ta);
            let pb = malus(eve_pol, tb);
            let ea = 2.0 * pa - 1.0;
            let eb = 2.0 * pb - 1.0;
            corr += 0.5 * ea * eb;
        }
        corr
    }

    #[test]
    fn intercept_resend_examples() {
        for &(ta, tb) in &[(0.0, 0.0), (22.5, 45.0), (22.5, 0.0), (157.5, 45.0), (10.0, 33.0)] {
            let t = intercept_resend_probability(ta, tb, 0.0);
            assert!((t.correlation() - intercept_enumeration(ta, tb, 0.0)).abs() < 1e-12);
            let sum: f64 = t.p.iter().flatten().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(t.p.iter().flatten().all(|&v| v >= 0.0));
        }
        assert!((intercept_resend_probability(0.0, 0.0, 0.0).correlation() + 1.0).abs() < 1e-12);
        assert!(intercept_resend_probability(22.5, 45.0, 0.0).correlation().abs() < 1e-12);
        assert!((intercept_resend_probability(22.5, 0.0, 0.0).correlation() + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn geometry_gives_tsirelson_value() {
        let ch = ChannelConfig {
            visibility_diag: 1.0,
            visibility_hv: 1.0,
            ..noiseless()
        };
        let s = analytic_chsh(&SettingGeometry::default(), &ch, &AttackConfig::default()).unwrap();
        assert!((s + 2.0 * SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn chsh_is_linear_in_intercept_fraction() {
        let ch = noiseless();
        let g = SettingGeometry::default();
        for i in 0..=10 {
            let p = i as f64 / 10.0;
            let attack = AttackConfig {
                intercept_fraction: p,
                attack_basis: 0.0,
            };
            let s = analytic_chsh(&g, &ch, &attack).unwrap();
            assert!((s.abs() - (2.0 * SQRT_2 - p * SQRT_2)).abs() < 1e-12);
        }
        let full = AttackConfig {
            intercept_fraction: 1.0,
            attack_basis: 0.0,
        };
        let key = model_correlation(&g, &ch, &full, Setting::AK, Setting::B0).unwrap();
        assert!((key + 1.0).abs() < 1e-12);
    }

    #[test]
    fn detector_numbering_round_trips() {
        for setting in [Setting::AK, Setting::A0, Setting::A1, Setting::B0, Setting::B1] {
            for outcome in [Outcome::Plus, Outcome::Minus] {
                let d = SettingGeometry::detector(setting, outcome);
                assert_eq!(SettingGeometry::decode(setting.side(), d), Some((setting, outcome)));
            }
        }
        assert_eq!(SettingGeometry::decode(Side::Bob, 5), None);
        assert_eq!(SettingGeometry::decode(Side::Alice, 0), None);
        // Each setting's two ports carry opposite signs.
        for d in (1..=6).step_by(2) {
            assert_eq!(
                SettingGeometry::sign(Side::Alice, d).unwrap(),
                -SettingGeometry::sign(Side::Alice, d + 1).unwrap()
            );
        }
    }

    fn binomial_ok(count: usize, n: usize, p: f64) -> bool {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - n as f64 * p).abs() <= 5.0 * sigma
    }

    #[test]
    fn routing_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let mut alice = [0usize; 3];
        let mut bob = [0usize; 2];
        let (mut bell, mut key, mut discard) = (0, 0, 0);
        for _ in 0..n {
            let a = route_detection(Side::Alice, &mut rng);
            let b = route_detection(Side::Bob, &mut rng);
            alice[match a {
                Setting::AK => 0,
                Setting::A0 => 1,
                _ => 2,
            }] += 1;
            bob[(b == Setting::B1) as usize] += 1;
            match (a, b) {
                (Setting::AK, Setting::B0) => key += 1,
                (Setting::AK, Setting::B1) => discard += 1,
                _ => bell += 1,
            }
        }
        assert!(binomial_ok(alice[0], n, 0.5));
        assert!(binomial_ok(alice[1], n, 0.25));
        assert!(binomial_ok(alice[2], n, 0.25));
        assert!(binomial_ok(bob[0], n, 0.5));
        assert!(binomial_ok(bob[1], n, 0.5));
        assert!(binomial_ok(bell, n, 0.5));
        assert!(binomial_ok(key, n, 0.25));
        assert!(binomial_ok(discard, n, 0.25));
    }

    #[test]
    fn monte_carlo_correlation_agrees_with_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(ta, tb, v) in &[(22.5, 0.0, 1.0), (157.5, 45.0, 0.8), (10.0, 80.0, 0.5)] {
            let table = joint_probability(ta, tb, v).unwrap();
            let n = 1_000_000;
            let mut sum = 0i64;
            for _ in 0..n {
                let (a, b) = table.sample(&mut rng);
                sum += (a.sign() * b.sign()) as i64;
            }
            let e_hat = sum as f64 / n as f64;
            let e = -v * (2.0 * (ta - tb).to_radians()).cos();
            let se = ((1.0 - e * e) / n as f64).sqrt();
            assert!((e_hat - e).abs() <= 5.0 * se, "{e_hat} vs {e}");
        }
    }

    #[test]
    fn empty_source_gives_empty_streams() {
        let ch = ChannelConfig {
            pair_rate: 0.0,
            background_rate: 0.0,
            ..noiseless()
        };
        let s = generate_event_streams(&ch, &AttackConfig::default(), &SettingGeometry::default()).unwrap();
        assert!(s.alice_tags.is_empty() && s.bob_tags.is_empty());
    }

    #[test]
    fn bob_detections_follow_poisson_thinning() {
        let ch = ChannelConfig {
            pair_rate: 18_000.0,
            loss_db_bob: 3.0,
            detector_efficiency: 1.0,
            background_rate: 0.0,
            duration: 1.0,
            ..noiseless()
        };
        let s = generate_event_streams(&ch, &AttackConfig::default(), &SettingGeometry::default()).unwrap();
        let mean = 18_000.0 * 10f64.powf(-0.3);
        assert!((s.bob_tags.len() as f64 - mean).abs() <= 5.0 * mean.sqrt());
    }

    #[test]
    fn generation_is_deterministic_and_sorted() {
        let ch = ChannelConfig {
            background_rate: 1000.0,
            duration: 2.5,
            ..noiseless()
        };
        let a = generate_event_streams(&ch, &AttackConfig::default(), &SettingGeometry::default()).unwrap();
        let b = generate_event_streams(&ch, &AttackConfig::default(), &SettingGeometry::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.alice_tags.windows(2).all(|w| w[0].tick <= w[1].tick));
        assert!(a.bob_tags.windows(2).all(|w| w[0].tick <= w[1].tick));
        assert!(a.alice_tags.iter().all(|t| Side::Alice.is_valid_detector(t.detector)));
        assert!(a.bob_tags.iter().all(|t| Side::Bob.is_valid_detector(t.detector)));
    }

    #[test]
    fn side_only_generation_matches_full_segments() {
        let ch = ChannelConfig {
            background_rate: 500.0,
            duration: 2.0,
            ..noiseless()
        };
        let gen = StreamGenerator::new(ch, AttackConfig::default(), SettingGeometry::default()).unwrap();
        for i in 0..gen.segment_count() {
            let full = gen.segment(i);
            assert_eq!(gen.segment_side(i, Side::Alice), full.alice_tags);
            assert_eq!(gen.segment_side(i, Side::Bob), full.bob_tags);
        }
    }

    #[test]
    fn config_validation() {
        let bad = ChannelConfig {
            visibility_diag: 1.2,
            ..noiseless()
        };
        assert_eq!(
            bad.validate(),
            Err(PhysicsError::Domain {
                field: "visibility_diag",
                value: 1.2
            })
        );
        let bad = AttackConfig {
            intercept_fraction: -0.1,
            attack_basis: 0.0,
        };
        assert!(bad.validate().is_err());
        assert!(ChannelConfig::default().validate().is_ok());
    }
}
