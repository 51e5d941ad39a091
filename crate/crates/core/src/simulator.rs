//! Monte Carlo generation of Alice/Bob tag streams.
//!
//! Pairs are created by a homogeneous Poisson process. Each photon picks its
//! measurement basis with a fair coin (the 50:50 beam splitter in front of the
//! TOA and TSUP modules), the joint outcome is drawn by
//! [`sample_pair_outcome`], and each arm is thinned by its transmission.
//! Background and dark counts are added per detector, Gaussian jitter is
//! applied to every signal detection, and Bob's timestamps are finally
//! mapped through his free-running clock.
//!
//! Every detected signal tag is traceable to its pair through
//! [`GroundTruth`], which the sync and discretization tests use as an oracle.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};

use crate::rng::{substream, SimRng};
use crate::timetag::{Basis, Channel, Party, Sign, TagStream, TimeTag, PS_PER_S};
use crate::{Error, Result};

/// Locally detected pair rate per mW of pump power.
pub const DETECTED_PAIR_RATE_PER_MW: f64 = 65e3;
/// Pump power of the source.
pub const PUMP_POWER_MW: f64 = 28.5;
/// Local heralding efficiency, detectors included.
pub const HERALDING_EFFICIENCY: f64 = 0.26;
/// Interferometer imbalance of the TSUP modules.
pub const TAU_MZI_PS: i64 = 2700;
/// Sample spacing of the simulated clock random walk.
pub const WALK_STEP_PS: i64 = 10_000_000_000;

/// Power transmission for a loss in dB.
pub fn transmission(loss_db: f64) -> f64 {
    libm::pow(10.0, -loss_db / 10.0)
}

fn loss_db(transmission: f64) -> f64 {
    -10.0 * libm::log10(transmission)
}

/// Piecewise-linear function of session time (seconds), held constant
/// outside its first and last knot.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    knots: Vec<(f64, f64)>,
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Self {
            knots: alloc::vec![(0.0, value)],
        }
    }

    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Config("profile needs at least one knot"));
        }
        if knots.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::Config("profile knots must be finite"));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("profile knot times must be strictly increasing"));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, t_s: f64) -> f64 {
        let k = &self.knots;
        let i = k.partition_point(|&(t, _)| t <= t_s);
        if i == 0 {
            return k[0].1;
        }
        if i == k.len() {
            return k[k.len() - 1].1;
        }
        let (t0, v0) = k[i - 1];
        let (t1, v1) = k[i];
        v0 + (v1 - v0) * (t_s - t0) / (t1 - t0)
    }

    pub fn max_value(&self) -> f64 {
        self.knots.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.knots.iter().map(|k| k.1).fold(f64::INFINITY, f64::min)
    }

    pub fn is_constant(&self) -> bool {
        self.max_value() == self.min_value()
    }

    pub fn scaled(&self, factor: f64) -> Profile {
        Profile {
            knots: self.knots.iter().map(|&(t, v)| (t, v * factor)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceConfig {
    /// Pairs per second leaving the source.
    pub pair_rate_hz: f64,
    /// Two-photon interference visibility of the TSUP measurement.
    pub tsup_visibility: f64,
    /// Probability that the two arrival times are correlated. Otherwise Bob's
    /// TOA photon is displaced uniformly within one frame length either side.
    pub toa_visibility: f64,
    /// Probability of matching H/V labels in a TOA/TOA coincidence.
    pub polarization_match: f64,
    /// Locked phase of the state, radians in `[0, 2π)`.
    pub phase_rad: f64,
    pub tau_mzi_ps: i64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            pair_rate_hz: DETECTED_PAIR_RATE_PER_MW * PUMP_POWER_MW
                / (HERALDING_EFFICIENCY * HERALDING_EFFICIENCY),
            tsup_visibility: 0.9,
            toa_visibility: 1.0,
            polarization_match: 0.99,
            phase_rad: 0.0,
            tau_mzi_ps: TAU_MZI_PS,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate_hz >= 0.0 && self.pair_rate_hz.is_finite()) {
            return Err(Error::Config("pair_rate_hz must be finite and non-negative"));
        }
        for v in [self.tsup_visibility, self.toa_visibility, self.polarization_match] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config("visibilities must lie in [0, 1]"));
            }
        }
        if !(0.0..TAU).contains(&self.phase_rad) {
            return Err(Error::Config("phase_rad must lie in [0, 2π)"));
        }
        if self.tau_mzi_ps <= 0 {
            return Err(Error::Config("tau_mzi_ps must be positive"));
        }
        Ok(())
    }

    /// Probability of equal TSUP signs for a TSUP/TSUP pair.
    pub fn tsup_match_probability(&self) -> f64 {
        (1.0 + self.tsup_visibility * libm::cos(self.phase_rad)) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    /// Total Alice-arm loss including detection.
    pub loss_alice_db: f64,
    /// Total Bob-arm loss including the free-space link and detection.
    pub loss_bob_db: f64,
    /// Additional time-dependent Bob loss (rain, pointing), dB.
    pub bob_extra_loss_db: Profile,
    pub jitter_sigma_ps: f64,
    /// Background rate per Bob detector, Hz.
    pub background_bob_hz: Profile,
    /// Background rate per Alice detector, Hz.
    pub background_alice_hz: Profile,
    /// Dark-count rate per detector, both parties, Hz.
    pub dark_rate_hz: f64,
    /// Bob clock minus Alice clock at t = 0.
    pub clock_offset_ps: f64,
    pub clock_drift_ps_per_s: f64,
    pub drift_noise_ps_per_sqrt_s: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            loss_alice_db: loss_db(HERALDING_EFFICIENCY),
            loss_bob_db: 25.0,
            bob_extra_loss_db: Profile::constant(0.0),
            jitter_sigma_ps: 50.0,
            background_bob_hz: Profile::constant(0.0),
            background_alice_hz: Profile::constant(0.0),
            dark_rate_hz: 100.0,
            clock_offset_ps: 250_000.0,
            clock_drift_ps_per_s: 30.0,
            drift_noise_ps_per_sqrt_s: 5.0,
        }
    }
}

impl ChannelConfig {
    /// An ideal channel: lossless, noiseless, jitter-free, shared clock.
    pub fn ideal() -> Self {
        Self {
            loss_alice_db: 0.0,
            loss_bob_db: 0.0,
            bob_extra_loss_db: Profile::constant(0.0),
            jitter_sigma_ps: 0.0,
            background_bob_hz: Profile::constant(0.0),
            background_alice_hz: Profile::constant(0.0),
            dark_rate_hz: 0.0,
            clock_offset_ps: 0.0,
            clock_drift_ps_per_s: 0.0,
            drift_noise_ps_per_sqrt_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_non_negative = |v: f64| v >= 0.0 && v.is_finite();
        if !finite_non_negative(self.loss_alice_db) || !finite_non_negative(self.loss_bob_db) {
            return Err(Error::Config("losses must be finite and non-negative"));
        }
        if self.bob_extra_loss_db.min_value() < 0.0 {
            return Err(Error::Config("bob_extra_loss_db must be non-negative"));
        }
        if !finite_non_negative(self.jitter_sigma_ps)
            || !finite_non_negative(self.dark_rate_hz)
            || !finite_non_negative(self.drift_noise_ps_per_sqrt_s)
        {
            return Err(Error::Config("jitter, dark rate and drift noise must be non-negative"));
        }
        if self.background_bob_hz.min_value() < 0.0 || self.background_alice_hz.min_value() < 0.0 {
            return Err(Error::Config("background profiles must be non-negative"));
        }
        if !self.clock_offset_ps.is_finite() || !self.clock_drift_ps_per_s.is_finite() {
            return Err(Error::Config("clock offset and drift must be finite"));
        }
        Ok(())
    }

    /// Bob's signal singles rate (all four detectors) without extra loss.
    pub fn bob_signal_rate_hz(&self, source: &SourceConfig) -> f64 {
        source.pair_rate_hz * transmission(self.loss_bob_db)
    }

    /// Per-detector background rate that makes Bob's total background
    /// `ratio` times his signal singles rate.
    pub fn background_per_detector_for_ratio(&self, source: &SourceConfig, ratio: f64) -> f64 {
        ratio * self.bob_signal_rate_hz(source) / Channel::ALL.len() as f64
    }
}

/// A detector click before jitter and clock transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Click {
    pub channel: Channel,
    pub time_ps: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairOutcome {
    pub alice: Click,
    pub bob: Click,
}

fn coin<R: Rng + ?Sized>(rng: &mut R) -> bool {
    rng.random::<bool>()
}

fn random_basis<R: Rng + ?Sized>(rng: &mut R) -> Basis {
    if coin(rng) {
        Basis::Toa
    } else {
        Basis::Tsup
    }
}

fn flip_sign(s: Sign) -> Sign {
    match s {
        Sign::Plus => Sign::Minus,
        Sign::Minus => Sign::Plus,
    }
}

fn flip_polarization(c: Channel) -> Channel {
    match c {
        Channel::ToaH => Channel::ToaV,
        _ => Channel::ToaH,
    }
}

fn uniform_outcome<R: Rng + ?Sized>(basis: Basis, rng: &mut R) -> Channel {
    match (basis, coin(rng)) {
        (Basis::Toa, true) => Channel::ToaH,
        (Basis::Toa, false) => Channel::ToaV,
        (Basis::Tsup, true) => Channel::TsupPlus,
        (Basis::Tsup, false) => Channel::TsupMinus,
    }
}

/// Joint outcome of one pair for the given `(alice, bob)` bases.
///
/// TSUP clicks are reported at the creation time, i.e. in the time bin whose
/// superposition with the bin `τ_MZI` later they represent.
pub fn sample_pair_outcome<R: Rng + ?Sized>(
    bases: (Basis, Basis),
    source: &SourceConfig,
    creation_ps: i64,
    rng: &mut R,
) -> PairOutcome {
    let at = |channel| Click {
        channel,
        time_ps: creation_ps,
    };
    match bases {
        (Basis::Toa, Basis::Toa) => {
            let pol_a = uniform_outcome(Basis::Toa, rng);
            let pol_b = if rng.random::<f64>() < source.polarization_match {
                pol_a
            } else {
                flip_polarization(pol_a)
            };
            let frame = 2 * source.tau_mzi_ps;
            let bob_time = if rng.random::<f64>() < source.toa_visibility {
                creation_ps
            } else {
                creation_ps + rng.random_range(-frame..frame)
            };
            PairOutcome {
                alice: at(pol_a),
                bob: Click {
                    channel: pol_b,
                    time_ps: bob_time,
                },
            }
        }
        (Basis::Tsup, Basis::Tsup) => {
            let sign_a = if coin(rng) { Sign::Plus } else { Sign::Minus };
            let sign_b = if rng.random::<f64>() < source.tsup_match_probability() {
                sign_a
            } else {
                flip_sign(sign_a)
            };
            PairOutcome {
                alice: at(Channel::tsup(sign_a)),
                bob: at(Channel::tsup(sign_b)),
            }
        }
        (basis_a, basis_b) => PairOutcome {
            alice: at(uniform_outcome(basis_a, rng)),
            bob: at(uniform_outcome(basis_b, rng)),
        },
    }
}

/// Origin of an emitted tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagSource {
    /// Index into [`GroundTruth::pairs`].
    Signal(u32),
    Background,
    Dark,
}

/// One pair with at least one detected photon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRecord {
    pub creation_ps: i64,
    /// Bob's arrival relative to creation (non-zero only for decorrelated
    /// TOA/TOA pairs), before jitter and clock.
    pub bob_delay_ps: i32,
    pub channel_alice: Channel,
    pub channel_bob: Channel,
    pub detected_alice: bool,
    pub detected_bob: bool,
}

impl PairRecord {
    pub fn basis_alice(&self) -> Basis {
        self.channel_alice.basis()
    }

    pub fn basis_bob(&self) -> Basis {
        self.channel_bob.basis()
    }
}

/// The realized Bob clock: `local = true + offset + drift·t + walk(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockTruth {
    pub offset_ps: f64,
    pub drift_ps_per_s: f64,
    pub walk_step_ps: i64,
    /// Random-walk samples at multiples of `walk_step_ps`, starting at 0.
    pub walk_ps: Vec<f64>,
}

impl ClockTruth {
    pub fn sample<R: Rng + ?Sized>(channel: &ChannelConfig, span_end_ps: i64, rng: &mut R) -> Self {
        let mut walk_ps = Vec::new();
        if channel.drift_noise_ps_per_sqrt_s > 0.0 {
            let steps = (span_end_ps.max(0) / WALK_STEP_PS) as usize + 2;
            let step_s = WALK_STEP_PS as f64 / PS_PER_S as f64;
            let normal = Normal::new(0.0, channel.drift_noise_ps_per_sqrt_s * libm::sqrt(step_s))
                .expect("finite sigma");
            let mut w = 0.0;
            walk_ps.reserve(steps);
            walk_ps.push(w);
            for _ in 1..steps {
                w += normal.sample(rng);
                walk_ps.push(w);
            }
        }
        Self {
            offset_ps: channel.clock_offset_ps,
            drift_ps_per_s: channel.clock_drift_ps_per_s,
            walk_step_ps: WALK_STEP_PS,
            walk_ps,
        }
    }

    fn walk_at(&self, t_ps: i64) -> f64 {
        let w = &self.walk_ps;
        if w.is_empty() || t_ps <= 0 {
            return w.first().copied().unwrap_or(0.0);
        }
        let i = (t_ps / self.walk_step_ps) as usize;
        if i + 1 >= w.len() {
            return w[w.len() - 1];
        }
        let frac = (t_ps % self.walk_step_ps) as f64 / self.walk_step_ps as f64;
        w[i] + (w[i + 1] - w[i]) * frac
    }

    /// Bob-minus-Alice clock offset at true time `t_ps`.
    pub fn offset_at(&self, t_ps: i64) -> f64 {
        self.offset_ps + self.drift_ps_per_s * (t_ps as f64 / PS_PER_S as f64) + self.walk_at(t_ps)
    }

    /// Bob's clock reading for an event at true time `t_ps`.
    pub fn to_local(&self, t_ps: i64) -> i64 {
        t_ps + libm::round(self.offset_at(t_ps)) as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// All pairs created during the session, detected or not.
    pub pairs_created: u64,
    /// Pairs with at least one detected photon, in creation order.
    pub pairs: Vec<PairRecord>,
    /// Provenance of each tag of Alice's stream, index-aligned.
    pub alice_sources: Vec<TagSource>,
    /// Provenance of each tag of Bob's stream, index-aligned.
    pub bob_sources: Vec<TagSource>,
    pub clock: ClockTruth,
}

impl GroundTruth {
    pub fn both_detected(&self) -> u64 {
        self.pairs
            .iter()
            .filter(|p| p.detected_alice && p.detected_bob)
            .count() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub alice: TagStream,
    pub bob: TagStream,
    pub truth: GroundTruth,
    pub duration_s: f64,
}

/// Poisson events in `[lo, hi)` at `4·profile(t)` spread uniformly over the
/// four detectors, generated by thinning at the profile maximum.
fn poisson_events<R: Rng + ?Sized>(profile: &Profile, lo: i64, hi: i64, rng: &mut R) -> Vec<TimeTag> {
    let max_rate = profile.max_value();
    let mut out = Vec::new();
    if max_rate <= 0.0 || hi <= lo {
        return out;
    }
    let n_ch = Channel::ALL.len();
    let exp = Exp::new(max_rate * n_ch as f64 / PS_PER_S as f64).expect("positive rate");
    let constant = profile.is_constant();
    let mut t = lo as f64;
    loop {
        t += exp.sample(rng);
        if t >= hi as f64 {
            break;
        }
        if !constant {
            let rate = profile.eval(t / PS_PER_S as f64);
            if rng.random::<f64>() * max_rate >= rate {
                continue;
            }
        }
        let ch = Channel::ALL[rng.random_range(0..n_ch)];
        out.push(TimeTag::new(t as i64, ch));
    }
    out
}

/// Background tags of one party: an inhomogeneous Poisson process per
/// detector with rate `profile(t)` over `[0, duration_s)`.
pub fn generate_background<R: Rng + ?Sized>(
    party: Party,
    profile: &Profile,
    duration_s: f64,
    rng: &mut R,
) -> TagStream {
    let end_ps = libm::round(duration_s * PS_PER_S as f64) as i64;
    TagStream::sorted_dedup(party, 0, poisson_events(profile, 0, end_ps, rng))
}

/// Maps Bob's stream through a freshly sampled clock. Returns the shifted
/// stream and the realized clock.
pub fn apply_clock<R: Rng + ?Sized>(
    stream: &TagStream,
    channel: &ChannelConfig,
    rng: &mut R,
) -> (TagStream, ClockTruth) {
    let clock = ClockTruth::sample(channel, stream.last_ps().unwrap_or(0) + 1, rng);
    let tags = stream
        .tags()
        .iter()
        .map(|t| TimeTag::new(clock.to_local(t.timestamp), t.channel))
        .collect();
    (TagStream::sorted_dedup(stream.party(), stream.epoch(), tags), clock)
}

/// Length of the independently seeded generation segments.
pub const SEGMENT_PS: i64 = PS_PER_S;

const SRC_BACKGROUND: u32 = u32::MAX;
const SRC_DARK: u32 = u32::MAX - 1;

#[derive(Clone, Copy)]
struct RawTag {
    t: i64,
    src: u32,
    ch: Channel,
}

impl RawTag {
    fn source(&self) -> TagSource {
        match self.src {
            SRC_BACKGROUND => TagSource::Background,
            SRC_DARK => TagSource::Dark,
            i => TagSource::Signal(i),
        }
    }
}

fn push_noise(raw: &mut Vec<RawTag>, events: Vec<TimeTag>, src: u32) {
    raw.extend(events.into_iter().map(|e| RawTag {
        t: e.timestamp,
        src,
        ch: e.channel,
    }));
}

fn finish(party: Party, mut raw: Vec<RawTag>, keep_sources: bool) -> (TagStream, Vec<TagSource>) {
    // Stable sort keeps generation order among equal keys, so the surviving
    // duplicate is deterministic.
    raw.sort_by_key(|r| (r.t, r.ch));
    raw.dedup_by_key(|r| (r.t, r.ch));
    let sources = if keep_sources {
        raw.iter().map(RawTag::source).collect()
    } else {
        Vec::new()
    };
    let tags = raw.into_iter().map(|r| TimeTag::new(r.t, r.ch)).collect();
    (TagStream::sorted_dedup(party, 0, tags), sources)
}

struct Generator<'a> {
    source: &'a SourceConfig,
    channel: &'a ChannelConfig,
    seed: u64,
    end_ps: i64,
    eta_a: f64,
    eta_b_max: f64,
    q_max: f64,
    keep_truth: bool,
    pairs: Vec<PairRecord>,
    pair_count: u64,
    lost: u64,
    alice: Vec<RawTag>,
    bob: Vec<RawTag>,
}

impl<'a> Generator<'a> {
    fn new(source: &'a SourceConfig, channel: &'a ChannelConfig, duration_s: f64, seed: u64, keep_truth: bool) -> Result<Self> {
        source.validate()?;
        channel.validate()?;
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::Config("duration must be positive"));
        }
        let eta_a = transmission(channel.loss_alice_db);
        let eta_b_max = transmission(channel.loss_bob_db + channel.bob_extra_loss_db.min_value());
        Ok(Self {
            source,
            channel,
            seed,
            end_ps: libm::round(duration_s * PS_PER_S as f64) as i64,
            eta_a,
            eta_b_max,
            // Probability that a pair leaves at least one click, at its largest.
            q_max: 1.0 - (1.0 - eta_a) * (1.0 - eta_b_max),
            keep_truth,
            pairs: Vec::new(),
            pair_count: 0,
            lost: 0,
            alice: Vec::new(),
            bob: Vec::new(),
        })
    }

    /// Pairs created in `[lo, hi)`. Candidates are the pairs that could leave
    /// a click at the lowest loss; each is then assigned a detection pattern
    /// with the probabilities at its own time, or dropped.
    fn pairs_in(&mut self, segment: u64, lo: i64, hi: i64) {
        if !(self.source.pair_rate_hz > 0.0 && self.q_max > 0.0) {
            return;
        }
        let mut rng = substream(self.seed, "pairs", segment);
        let exp = Exp::new(self.source.pair_rate_hz * self.q_max / PS_PER_S as f64).expect("positive rate");
        let extra = &self.channel.bob_extra_loss_db;
        let eta_a = self.eta_a;
        let mut t = lo as f64;
        loop {
            t += exp.sample(&mut rng);
            if t >= hi as f64 {
                break;
            }
            let creation = t as i64;
            let eta_b = if extra.is_constant() {
                self.eta_b_max
            } else {
                transmission(self.channel.loss_bob_db + extra.eval(t / PS_PER_S as f64))
            };
            let p_both = eta_a * eta_b;
            let p_alice = eta_a * (1.0 - eta_b);
            let p_bob = (1.0 - eta_a) * eta_b;
            let u = rng.random::<f64>() * self.q_max;
            let (det_a, det_b) = if u < p_both {
                (true, true)
            } else if u < p_both + p_alice {
                (true, false)
            } else if u < p_both + p_alice + p_bob {
                (false, true)
            } else {
                self.lost += 1;
                continue;
            };

            let bases = (random_basis(&mut rng), random_basis(&mut rng));
            let outcome = sample_pair_outcome(bases, self.source, creation, &mut rng);
            let idx = u32::try_from(self.pair_count)
                .ok()
                .filter(|&i| i < SRC_DARK)
                .expect("detected pair count fits the provenance index");
            self.pair_count += 1;
            if self.keep_truth {
                self.pairs.push(PairRecord {
                    creation_ps: creation,
                    bob_delay_ps: (outcome.bob.time_ps - creation) as i32,
                    channel_alice: outcome.alice.channel,
                    channel_bob: outcome.bob.channel,
                    detected_alice: det_a,
                    detected_bob: det_b,
                });
            }
            if det_a {
                self.alice.push(RawTag {
                    t: outcome.alice.time_ps,
                    src: idx,
                    ch: outcome.alice.channel,
                });
            }
            if det_b {
                self.bob.push(RawTag {
                    t: outcome.bob.time_ps,
                    src: idx,
                    ch: outcome.bob.channel,
                });
            }
        }
    }

    fn segment(&mut self, segment: u64) {
        let lo = segment as i64 * SEGMENT_PS;
        let hi = (lo + SEGMENT_PS).min(self.end_ps);
        let (a0, b0) = (self.alice.len(), self.bob.len());
        self.pairs_in(segment, lo, hi);

        if self.channel.jitter_sigma_ps > 0.0 {
            let normal = Normal::new(0.0, self.channel.jitter_sigma_ps).expect("finite sigma");
            let mut rng = substream(self.seed, "jitter", segment);
            for r in self.alice[a0..].iter_mut().chain(self.bob[b0..].iter_mut()) {
                r.t += libm::round(normal.sample(&mut rng)) as i64;
            }
        }

        let (seed, ch) = (self.seed, self.channel);
        let noise = |profile: &Profile, name: &str| poisson_events(profile, lo, hi, &mut substream(seed, name, segment));
        push_noise(&mut self.alice, noise(&ch.background_alice_hz, "background_alice"), SRC_BACKGROUND);
        push_noise(&mut self.bob, noise(&ch.background_bob_hz, "background_bob"), SRC_BACKGROUND);
        let dark = Profile::constant(ch.dark_rate_hz);
        push_noise(&mut self.alice, noise(&dark, "dark_alice"), SRC_DARK);
        push_noise(&mut self.bob, noise(&dark, "dark_bob"), SRC_DARK);
    }

    fn run(mut self) -> Result<Session> {
        let end_ps = self.end_ps;
        let segments = ((end_ps + SEGMENT_PS - 1) / SEGMENT_PS) as u64;
        for s in 0..segments {
            self.segment(s);
        }

        let mut pairs_created = self.pair_count + self.lost;
        let never_candidates = self.source.pair_rate_hz * (end_ps as f64 / PS_PER_S as f64) * (1.0 - self.q_max);
        if never_candidates > 0.0 {
            let mut rng = substream(self.seed, "unseen_pairs", 0);
            let poisson = Poisson::new(never_candidates).map_err(|_| Error::Config("pair count overflow"))?;
            pairs_created += poisson.sample(&mut rng) as u64;
        }

        let mut alice = core::mem::take(&mut self.alice);
        alice.retain(|r| (0..end_ps).contains(&r.t));
        let (alice, alice_sources) = finish(Party::Alice, alice, self.keep_truth);

        let clock = ClockTruth::sample(self.channel, end_ps, &mut substream(self.seed, "clock", 0));
        let mut bob = core::mem::take(&mut self.bob);
        bob.retain(|r| (0..end_ps).contains(&r.t));
        for r in bob.iter_mut() {
            r.t = clock.to_local(r.t);
        }
        let (bob, bob_sources) = finish(Party::Bob, bob, self.keep_truth);

        Ok(Session {
            alice,
            bob,
            truth: GroundTruth {
                pairs_created,
                pairs: self.pairs,
                alice_sources,
                bob_sources,
                clock,
            },
            duration_s: end_ps as f64 / PS_PER_S as f64,
        })
    }
}

/// Simulates one session of `duration_s` seconds with full ground truth.
/// Deterministic in `seed`.
pub fn simulate_session(
    source: &SourceConfig,
    channel: &ChannelConfig,
    duration_s: f64,
    seed: u64,
) -> Result<Session> {
    Generator::new(source, channel, duration_s, seed, true)?.run()
}

/// Same streams and clock as [`simulate_session`], but without the per-pair
/// records and per-tag provenance, which dominate memory for long sessions.
/// `pairs_created` is still filled in.
pub fn simulate_streams(
    source: &SourceConfig,
    channel: &ChannelConfig,
    duration_s: f64,
    seed: u64,
) -> Result<Session> {
    Generator::new(source, channel, duration_s, seed, false)?.run()
}

/// Convenience for tests and examples: one named substream generator.
pub fn rng_for(seed: u64, name: &str) -> SimRng {
    substream(seed, name, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::f64::consts::PI;

    fn ideal_source(rate: f64) -> SourceConfig {
        SourceConfig {
            pair_rate_hz: rate,
            tsup_visibility: 1.0,
            toa_visibility: 1.0,
            polarization_match: 1.0,
            phase_rad: 0.0,
            tau_mzi_ps: TAU_MZI_PS,
        }
    }

    fn within_3_sigma(observed: f64, n: f64, p: f64) -> bool {
        let sigma = libm::sqrt(n * p * (1.0 - p));
        libm::fabs(observed - n * p) <= 3.0 * sigma.max(1e-12)
    }

    #[test]
    fn nominal_defaults() {
        let s = SourceConfig::default();
        assert!((s.pair_rate_hz - 65e3 * 28.5 / 0.0676).abs() < 1e-6);
        let c = ChannelConfig::default();
        assert!((transmission(c.loss_alice_db) - 0.26).abs() < 1e-12);
        assert_eq!(c.loss_bob_db, 25.0);
        assert_eq!(c.clock_drift_ps_per_s, 30.0);
        assert!(s.validate().is_ok() && c.validate().is_ok());
    }

    #[test]
    fn profile_interpolates_and_clamps() {
        let p = Profile::new(vec![(1.0, 0.0), (3.0, 10.0)]).unwrap();
        assert_eq!(p.eval(0.0), 0.0);
        assert_eq!(p.eval(2.0), 5.0);
        assert_eq!(p.eval(9.0), 10.0);
        assert!(Profile::new(vec![(1.0, 0.0), (1.0, 2.0)]).is_err());
        assert!(Profile::new(vec![]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut s = SourceConfig::default();
        s.tsup_visibility = 1.5;
        assert!(s.validate().is_err());
        let mut s = SourceConfig::default();
        s.phase_rad = TAU;
        assert!(s.validate().is_err());
        let mut c = ChannelConfig::default();
        c.loss_bob_db = -1.0;
        assert!(c.validate().is_err());
        assert!(simulate_session(&SourceConfig::default(), &ChannelConfig::ideal(), 0.0, 1).is_err());
    }

    #[test]
    fn tsup_limits() {
        let mut rng = rng_for(1, "t");
        let src = ideal_source(1.0);
        for _ in 0..2000 {
            let o = sample_pair_outcome((Basis::Tsup, Basis::Tsup), &src, 0, &mut rng);
            assert_eq!(o.alice.channel, o.bob.channel);
        }
        let mut src = ideal_source(1.0);
        src.tsup_visibility = 0.0;
        let mut counts = [0u32; 4];
        let n = 40_000;
        for _ in 0..n {
            let o = sample_pair_outcome((Basis::Tsup, Basis::Tsup), &src, 0, &mut rng);
            let i = (o.alice.channel.code() - 2) * 2 + (o.bob.channel.code() - 2);
            counts[usize::from(i)] += 1;
        }
        for c in counts {
            assert!(within_3_sigma(f64::from(c), f64::from(n), 0.25), "{counts:?}");
        }
    }

    #[test]
    fn tsup_match_probability_grid() {
        let n = 20_000u32;
        for v in [0.0, 0.5, 0.9, 1.0] {
            for phi in [0.0, PI / 2.0, PI] {
                let src = SourceConfig {
                    tsup_visibility: v,
                    phase_rad: phi,
                    ..ideal_source(1.0)
                };
                let mut rng = rng_for(42, "grid");
                let matches = (0..n)
                    .filter(|_| {
                        let o = sample_pair_outcome((Basis::Tsup, Basis::Tsup), &src, 0, &mut rng);
                        o.alice.channel == o.bob.channel
                    })
                    .count();
                let p = (1.0 + v * libm::cos(phi)) / 2.0;
                assert!(
                    within_3_sigma(matches as f64, f64::from(n), p),
                    "V={v} φ={phi}: {matches}/{n} vs {p}"
                );
            }
        }
    }

    #[test]
    fn tsup_visibility_point_nine() {
        let src = SourceConfig {
            tsup_visibility: 0.9,
            ..ideal_source(1.0)
        };
        let mut rng = rng_for(3, "v09");
        let n = 100_000;
        let matches = (0..n)
            .filter(|_| {
                let o = sample_pair_outcome((Basis::Tsup, Basis::Tsup), &src, 0, &mut rng);
                o.alice.channel == o.bob.channel
            })
            .count();
        assert!(within_3_sigma(matches as f64, n as f64, 0.95));
    }

    #[test]
    fn mixed_bases_are_uniform_and_simultaneous() {
        let src = ideal_source(1.0);
        let mut rng = rng_for(5, "mixed");
        let n = 20_000;
        let mut plus = 0;
        for _ in 0..n {
            let o = sample_pair_outcome((Basis::Toa, Basis::Tsup), &src, 77, &mut rng);
            assert_eq!(o.alice.channel.basis(), Basis::Toa);
            assert_eq!((o.alice.time_ps, o.bob.time_ps), (77, 77));
            plus += usize::from(o.bob.channel == Channel::TsupPlus);
        }
        assert!(within_3_sigma(plus as f64, n as f64, 0.5));
    }

    #[test]
    fn decorrelated_toa_stays_within_one_frame() {
        let src = SourceConfig {
            toa_visibility: 0.0,
            ..ideal_source(1.0)
        };
        let mut rng = rng_for(6, "toa");
        for _ in 0..5000 {
            let o = sample_pair_outcome((Basis::Toa, Basis::Toa), &src, 100_000, &mut rng);
            let d = o.bob.time_ps - 100_000;
            assert!((-5400..5400).contains(&d));
        }
    }

    #[test]
    fn zero_rate_gives_only_noise() {
        let mut ch = ChannelConfig::ideal();
        ch.dark_rate_hz = 1000.0;
        ch.background_bob_hz = Profile::constant(2000.0);
        let s = simulate_session(&ideal_source(0.0), &ch, 1.0, 9).unwrap();
        assert!(s.truth.pairs.is_empty());
        assert_eq!(s.truth.pairs_created, 0);
        assert!(!s.alice.is_empty() && !s.bob.is_empty());
        assert!(s.truth.alice_sources.iter().all(|t| *t == TagSource::Dark));
        assert!(s
            .truth
            .bob_sources
            .iter()
            .all(|t| matches!(t, TagSource::Dark | TagSource::Background)));
    }

    #[test]
    fn perfect_limit_matched_bases_agree() {
        let s = simulate_session(&ideal_source(1e4), &ChannelConfig::ideal(), 1.0, 11).unwrap();
        assert!(s.truth.pairs.len() > 9_000);
        assert_eq!(s.alice.len(), s.truth.pairs.len());
        assert_eq!(s.bob.len(), s.truth.pairs.len());
        for p in &s.truth.pairs {
            assert!(p.detected_alice && p.detected_bob);
            assert_eq!(p.bob_delay_ps, 0);
            if p.basis_alice() == p.basis_bob() {
                assert_eq!(p.channel_alice, p.channel_bob);
            }
        }
        // Every tag maps back to its pair at the creation time.
        for (tag, src) in s.alice.tags().iter().zip(&s.truth.alice_sources) {
            let TagSource::Signal(i) = *src else { panic!("noise in ideal run") };
            let p = s.truth.pairs[i as usize];
            assert_eq!(tag.timestamp, p.creation_ps);
            assert_eq!(tag.channel, p.channel_alice);
        }
    }

    #[test]
    fn bob_loss_thins_coincidences_binomially() {
        let mut ch = ChannelConfig::ideal();
        ch.loss_bob_db = 25.0;
        let s = simulate_session(&ideal_source(2e5), &ch, 1.0, 12).unwrap();
        let n = s.truth.pairs_created as f64;
        let both = s.truth.both_detected() as f64;
        assert!(within_3_sigma(both, n, transmission(25.0)), "{both} of {n}");
    }

    #[test]
    fn coincidence_rate_follows_total_loss() {
        for (la, lb) in [(0.0, 10.0), (3.0, 10.0), (5.0, 15.0)] {
            let mut ch = ChannelConfig::ideal();
            ch.loss_alice_db = la;
            ch.loss_bob_db = lb;
            let s = simulate_session(&ideal_source(1e6), &ch, 1.0, 13).unwrap();
            let expected = 1e6 * transmission(la + lb);
            let rel = (s.truth.both_detected() as f64 - expected).abs() / expected;
            assert!(rel < 0.05, "loss {la}+{lb}: rel error {rel}");
        }
    }

    #[test]
    fn background_counts() {
        let mut rng = rng_for(1, "bg");
        assert!(generate_background(Party::Bob, &Profile::constant(0.0), 1.0, &mut rng).is_empty());

        let s = generate_background(Party::Bob, &Profile::constant(1e4), 1.0, &mut rng);
        let n = s.len() as f64;
        assert!((n - 4e4).abs() <= 3.0 * libm::sqrt(4e4), "{n}");

        let ramp = Profile::new(vec![(0.0, 0.0), (1.0, 2e4)]).unwrap();
        let s = generate_background(Party::Bob, &ramp, 1.0, &mut rng);
        let first = s.range(0, PS_PER_S / 2).len() as f64;
        let second = s.range(PS_PER_S / 2, PS_PER_S).len() as f64;
        // Halves of a ramp hold 1/4 and 3/4 of the counts.
        let total = first + second;
        assert!(within_3_sigma(first, total, 0.25), "{first} / {second}");
    }

    #[test]
    fn clock_maps() {
        let stream = TagStream::new(
            Party::Bob,
            0,
            (0..=100).map(|i| TimeTag::new(i * PS_PER_S, Channel::ToaH)).collect(),
        )
        .unwrap();
        let mut rng = rng_for(2, "clk");

        let (same, _) = apply_clock(&stream, &ChannelConfig::ideal(), &mut rng);
        assert_eq!(same, stream);

        let ch = ChannelConfig {
            clock_offset_ps: 1e8,
            ..ChannelConfig::ideal()
        };
        let (shifted, _) = apply_clock(&stream, &ch, &mut rng);
        assert_eq!(shifted, stream.shifted(100_000_000));

        let ch = ChannelConfig {
            clock_drift_ps_per_s: 30.0,
            ..ChannelConfig::ideal()
        };
        let (drifted, _) = apply_clock(&stream, &ch, &mut rng);
        let shift = |i: usize| drifted.tags()[i].timestamp - stream.tags()[i].timestamp;
        assert_eq!(shift(100) - shift(0), 3000);
    }

    #[test]
    fn clock_walk_is_continuous() {
        let ch = ChannelConfig {
            drift_noise_ps_per_sqrt_s: 5.0,
            ..ChannelConfig::ideal()
        };
        let clock = ClockTruth::sample(&ch, 100 * PS_PER_S, &mut rng_for(3, "walk"));
        let step = clock.walk_step_ps;
        let a = clock.offset_at(5 * step);
        let b = clock.offset_at(5 * step + 1);
        assert!((a - b).abs() < 1e-3);
        assert_eq!(clock.offset_at(0), 0.0);
    }

    #[test]
    fn deterministic_in_seed() {
        let ch = ChannelConfig {
            background_bob_hz: Profile::constant(5e3),
            ..ChannelConfig::default()
        };
        let src = SourceConfig {
            pair_rate_hz: 1e6,
            ..SourceConfig::default()
        };
        let a = simulate_session(&src, &ch, 0.05, 99).unwrap();
        let b = simulate_session(&src, &ch, 0.05, 99).unwrap();
        let c = simulate_session(&src, &ch, 0.05, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.alice, c.alice);
    }

    #[test]
    fn extra_loss_profile_reduces_bob_rate() {
        let mut ch = ChannelConfig::ideal();
        ch.bob_extra_loss_db = Profile::new(vec![(0.0, 0.0), (0.5, 0.0), (0.5001, 10.0)]).unwrap();
        let s = simulate_session(&ideal_source(1e5), &ch, 1.0, 4).unwrap();
        let first = s.bob.range(0, PS_PER_S / 2).len() as f64;
        let second = s.bob.range(PS_PER_S / 2, PS_PER_S).len() as f64;
        assert!((second / first - 0.1).abs() < 0.02, "{first} {second}");
    }
}
