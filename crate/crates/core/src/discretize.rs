//! Time-frame discretization of synchronized tag streams.
//!
//! The time axis is tiled into frames of `Δt_f = d·Δt_b` starting at the
//! grid phase `t_0`. A TOA click in bin `j` of a frame is the outcome `|j⟩`.
//! A TSUP click in bin `i` is the projection onto `(|i⟩ ± |i+k⟩)/√2`, with
//! `k = τ_MZI/Δt_b`, and only exists inside the frame when `i < d − k`.
//! Frames where both parties register an outcome are coincidences; they feed
//! one TOA matrix and four TSUP matrices indexed by the sign pair.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::timetag::{slice_range, Basis, Channel, Sign, TimeTag, PS_PER_S};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscretizationConfig {
    pub tau_mzi_ps: i64,
    pub frame_len_ps: i64,
    pub bin_len_ps: i64,
    pub d: usize,
    /// Bin offset of the superposition partner, `τ_MZI/Δt_b`.
    pub k: usize,
    /// Frame grid origin `t_0`.
    pub grid_phase_ps: i64,
}

impl DiscretizationConfig {
    /// Standard configuration with `Δt_f = 2·τ_MZI`, so that `k = d/2`.
    pub fn for_dimension(d: usize, tau_mzi_ps: i64) -> Result<Self> {
        if d % 2 != 0 {
            return Err(Error::Config("dimension must be even for a frame of 2·τ_MZI"));
        }
        Self::new(tau_mzi_ps, 2 * tau_mzi_ps, d, 0)
    }

    /// General configuration: `frame_len_ps` must split into `d` whole bins
    /// and `τ_MZI` must be a whole number `k` of bins with `0 < k < d`.
    pub fn new(tau_mzi_ps: i64, frame_len_ps: i64, d: usize, grid_phase_ps: i64) -> Result<Self> {
        if tau_mzi_ps <= 0 || frame_len_ps <= 0 || d < 2 {
            return Err(Error::Config("τ_MZI, frame length and dimension must be positive"));
        }
        if frame_len_ps % d as i64 != 0 {
            return Err(Error::Config("frame length must be a whole number of bins"));
        }
        let bin_len_ps = frame_len_ps / d as i64;
        if tau_mzi_ps % bin_len_ps != 0 {
            return Err(Error::Config("τ_MZI must be a whole number of bins"));
        }
        let k = (tau_mzi_ps / bin_len_ps) as usize;
        if k >= d {
            return Err(Error::Config("τ_MZI must be shorter than the frame"));
        }
        Ok(Self {
            tau_mzi_ps,
            frame_len_ps,
            bin_len_ps,
            d,
            k,
            grid_phase_ps,
        })
    }

    pub fn with_grid_phase(self, grid_phase_ps: i64) -> Self {
        Self { grid_phase_ps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(self.tau_mzi_ps, self.frame_len_ps, self.d, self.grid_phase_ps)?;
        if fresh != *self {
            return Err(Error::Config("inconsistent discretization parameters"));
        }
        Ok(())
    }

    /// Number of in-frame TSUP start bins, `d − k`.
    pub fn tsup_bins(&self) -> usize {
        self.d - self.k
    }

    /// Size of the TSUP outcome set (two signs per in-frame start bin).
    pub fn tsup_outcomes(&self) -> usize {
        2 * self.tsup_bins()
    }

    /// Index of the frame containing `t`.
    pub fn frame_of(&self, t_ps: i64) -> i64 {
        (t_ps - self.grid_phase_ps).div_euclid(self.frame_len_ps)
    }

    pub fn frame_start(&self, frame: i64) -> i64 {
        self.grid_phase_ps + frame * self.frame_len_ps
    }
}

/// `(d, Δt_b)` for every even `d` that tiles a frame of `frame_len_ps` with a
/// whole number of bins, `τ_MZI` also being a whole number of bins.
pub fn valid_dimensions(tau_mzi_ps: i64, frame_len_ps: i64) -> Vec<(usize, i64)> {
    (2..=frame_len_ps.max(0) as usize)
        .step_by(2)
        .filter_map(|d| DiscretizationConfig::new(tau_mzi_ps, frame_len_ps, d, 0).ok())
        .map(|c| (c.d, c.bin_len_ps))
        .collect()
}

/// A single in-frame measurement result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    /// Arrival in bin `bin`.
    Toa { bin: usize },
    /// Projection onto `(|bin⟩ ± |bin+k⟩)/√2`.
    Tsup { bin: usize, sign: Sign },
}

impl Outcome {
    pub fn basis(&self) -> Basis {
        match self {
            Outcome::Toa { .. } => Basis::Toa,
            Outcome::Tsup { .. } => Basis::Tsup,
        }
    }
}

/// One party's clicks in one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartyFrame {
    Empty,
    /// A TSUP click outside the frame's Hilbert space; counts as empty.
    OutOfFrame,
    Single(Outcome),
    Multi(Vec<Outcome>),
}

impl PartyFrame {
    pub fn is_empty(&self) -> bool {
        matches!(self, PartyFrame::Empty | PartyFrame::OutOfFrame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePair {
    pub index: i64,
    pub alice: PartyFrame,
    pub bob: PartyFrame,
}

/// Frames of one block, yielded lazily in frame order. Frames with no click
/// on either side are skipped; [`Frames::total_frames`] counts them all.
#[derive(Debug, Clone)]
pub struct Frames<'a> {
    cfg: DiscretizationConfig,
    a: &'a [TimeTag],
    b: &'a [TimeTag],
    first_frame: i64,
    total_frames: u64,
}

impl Frames<'_> {
    pub fn total_frames(&self) -> u64 {
        self.total_frames
    }

    pub fn first_frame(&self) -> i64 {
        self.first_frame
    }

    /// Integrated time of the frames in the block.
    pub fn integration_s(&self) -> f64 {
        (self.total_frames as f64 * self.cfg.frame_len_ps as f64) / PS_PER_S as f64
    }
}

fn classify_click(cfg: &DiscretizationConfig, frame_start: i64, tag: &TimeTag) -> Option<Outcome> {
    let bin = ((tag.timestamp - frame_start) / cfg.bin_len_ps) as usize;
    match tag.channel.sign() {
        None => Some(Outcome::Toa { bin }),
        Some(sign) if bin < cfg.tsup_bins() => Some(Outcome::Tsup { bin, sign }),
        Some(_) => None,
    }
}

fn party_frame(cfg: &DiscretizationConfig, frame_start: i64, clicks: &[TimeTag]) -> PartyFrame {
    match clicks {
        [] => PartyFrame::Empty,
        [one] => match classify_click(cfg, frame_start, one) {
            Some(o) => PartyFrame::Single(o),
            None => PartyFrame::OutOfFrame,
        },
        many => {
            let outcomes: Option<Vec<Outcome>> = many.iter().map(|t| classify_click(cfg, frame_start, t)).collect();
            match outcomes {
                Some(o) => PartyFrame::Multi(o),
                None => PartyFrame::OutOfFrame,
            }
        }
    }
}

fn take_before<'a>(s: &mut &'a [TimeTag], end: i64) -> &'a [TimeTag] {
    let n = s.iter().position(|t| t.timestamp >= end).unwrap_or(s.len());
    let (head, tail) = s.split_at(n);
    *s = tail;
    head
}

impl Iterator for Frames<'_> {
    type Item = FramePair;

    fn next(&mut self) -> Option<FramePair> {
        let cfg = self.cfg;
        let next_a = self.a.first().map(|t| cfg.frame_of(t.timestamp));
        let next_b = self.b.first().map(|t| cfg.frame_of(t.timestamp));
        let index = match (next_a, next_b) {
            (None, None) => return None,
            (Some(x), None) | (None, Some(x)) => x,
            (Some(x), Some(y)) => x.min(y),
        };
        let start = cfg.frame_start(index);
        let end = start + cfg.frame_len_ps;
        let a = take_before(&mut self.a, end);
        let b = take_before(&mut self.b, end);
        Some(FramePair {
            index,
            alice: party_frame(&cfg, start, a),
            bob: party_frame(&cfg, start, b),
        })
    }
}

/// Classifies the frames whose start lies in `[block_start, block_end)`.
/// Every tag in the span of those frames belongs to exactly one of them,
/// so consecutive blocks partition the frames.
pub fn classify_frames<'a>(
    a: &'a [TimeTag],
    b: &'a [TimeTag],
    cfg: &DiscretizationConfig,
    block_start: i64,
    block_end: i64,
) -> Result<Frames<'a>> {
    cfg.validate()?;
    if block_end < block_start {
        return Err(Error::Config("block end precedes its start"));
    }
    let first = (block_start - cfg.grid_phase_ps).div_euclid(cfg.frame_len_ps)
        + i64::from((block_start - cfg.grid_phase_ps).rem_euclid(cfg.frame_len_ps) != 0);
    let end_frame = (block_end - cfg.grid_phase_ps).div_euclid(cfg.frame_len_ps)
        + i64::from((block_end - cfg.grid_phase_ps).rem_euclid(cfg.frame_len_ps) != 0);
    let total = (end_frame - first).max(0);
    let lo = cfg.frame_start(first);
    let hi = cfg.frame_start(first + total);
    Ok(Frames {
        cfg: *cfg,
        a: slice_range(a, lo, hi),
        b: slice_range(b, lo, hi),
        first_frame: first,
        total_frames: total as u64,
    })
}

/// Uniformly random replacement outcome for a multi-click frame: a fair
/// basis choice, then a uniform in-frame outcome of that basis.
pub fn fair_sampling_assign<R: Rng + ?Sized>(clicks: &[Outcome], cfg: &DiscretizationConfig, rng: &mut R) -> Outcome {
    debug_assert!(clicks.len() >= 2, "fair sampling applies to multi-click frames");
    if rng.random::<bool>() {
        Outcome::Toa {
            bin: rng.random_range(0..cfg.d),
        }
    } else {
        let bin = rng.random_range(0..cfg.tsup_bins());
        let sign = if rng.random::<bool>() { Sign::Plus } else { Sign::Minus };
        Outcome::Tsup { bin, sign }
    }
}

/// Square matrix of coincidence counts, row = Alice, column = Bob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    d: usize,
    counts: Vec<u64>,
}

impl CountMatrix {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            counts: vec![0; d * d],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Self {
        let d = rows.len();
        assert!(rows.iter().all(|r| r.len() == d), "matrix must be square");
        Self {
            d,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.d + j]
    }

    pub fn add(&mut self, i: usize, j: usize, n: u64) {
        self.counts[i * self.d + j] += n;
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.counts[i * self.d..(i + 1) * self.d]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.d).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            d: self.d,
            counts: self.counts.iter().map(|c| c * factor).collect(),
        }
    }
}

/// Frame bookkeeping of one block. The first five fields partition
/// `total_frames`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameStats {
    pub total_frames: u64,
    /// No outcome on either side.
    pub empty: u64,
    /// An outcome on exactly one side.
    pub single_sided: u64,
    /// Exactly one click per side, same basis.
    pub valid: u64,
    /// Outcomes on both sides in different bases (after fair sampling).
    pub mixed_basis: u64,
    /// Matched-basis coincidences where at least one side was resolved by
    /// fair sampling.
    pub multi_resolved: u64,
    pub out_of_frame_alice: u64,
    pub out_of_frame_bob: u64,
    pub multi_alice: u64,
    pub multi_bob: u64,
}

impl FrameStats {
    pub fn accepted(&self) -> u64 {
        self.valid + self.multi_resolved
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrices {
    pub cfg: DiscretizationConfig,
    pub toa: CountMatrix,
    pub tsup_pp: CountMatrix,
    pub tsup_pm: CountMatrix,
    pub tsup_mp: CountMatrix,
    pub tsup_mm: CountMatrix,
    pub stats: FrameStats,
    pub integration_s: f64,
}

impl CorrelationMatrices {
    pub fn empty(cfg: &DiscretizationConfig, integration_s: f64) -> Self {
        let z = CountMatrix::zeros(cfg.d);
        Self {
            cfg: *cfg,
            toa: z.clone(),
            tsup_pp: z.clone(),
            tsup_pm: z.clone(),
            tsup_mp: z.clone(),
            tsup_mm: z,
            stats: FrameStats::default(),
            integration_s,
        }
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    pub fn tsup(&self, alice: Sign, bob: Sign) -> &CountMatrix {
        match (alice, bob) {
            (Sign::Plus, Sign::Plus) => &self.tsup_pp,
            (Sign::Plus, Sign::Minus) => &self.tsup_pm,
            (Sign::Minus, Sign::Plus) => &self.tsup_mp,
            (Sign::Minus, Sign::Minus) => &self.tsup_mm,
        }
    }

    fn tsup_mut(&mut self, alice: Sign, bob: Sign) -> &mut CountMatrix {
        match (alice, bob) {
            (Sign::Plus, Sign::Plus) => &mut self.tsup_pp,
            (Sign::Plus, Sign::Minus) => &mut self.tsup_pm,
            (Sign::Minus, Sign::Plus) => &mut self.tsup_mp,
            (Sign::Minus, Sign::Minus) => &mut self.tsup_mm,
        }
    }

    /// Mass of all five matrices.
    pub fn total(&self) -> u64 {
        self.toa.total() + self.tsup_pp.total() + self.tsup_pm.total() + self.tsup_mp.total() + self.tsup_mm.total()
    }

    /// Every count multiplied by `factor`, statistics included.
    pub fn scaled(&self, factor: u64) -> Self {
        let s = self.stats;
        Self {
            cfg: self.cfg,
            toa: self.toa.scaled(factor),
            tsup_pp: self.tsup_pp.scaled(factor),
            tsup_pm: self.tsup_pm.scaled(factor),
            tsup_mp: self.tsup_mp.scaled(factor),
            tsup_mm: self.tsup_mm.scaled(factor),
            stats: FrameStats {
                total_frames: s.total_frames * factor,
                empty: s.empty * factor,
                single_sided: s.single_sided * factor,
                valid: s.valid * factor,
                mixed_basis: s.mixed_basis * factor,
                multi_resolved: s.multi_resolved * factor,
                out_of_frame_alice: s.out_of_frame_alice * factor,
                out_of_frame_bob: s.out_of_frame_bob * factor,
                multi_alice: s.multi_alice * factor,
                multi_bob: s.multi_bob * factor,
            },
            integration_s: self.integration_s,
        }
    }
}

fn resolve<R: Rng + ?Sized>(f: &PartyFrame, cfg: &DiscretizationConfig, rng: &mut R) -> Outcome {
    match f {
        PartyFrame::Single(o) => *o,
        PartyFrame::Multi(clicks) => fair_sampling_assign(clicks, cfg, rng),
        PartyFrame::Empty | PartyFrame::OutOfFrame => unreachable!("empty frames are discarded first"),
    }
}

/// Builds the correlation matrices of a block from its frames. Frames where a
/// side has no outcome are discarded; multi-click sides are resolved by fair
/// sampling (Alice first, then Bob); matched-basis coincidences are counted.
pub fn accumulate<I, R>(
    frames: I,
    total_frames: u64,
    integration_s: f64,
    cfg: &DiscretizationConfig,
    rng: &mut R,
) -> CorrelationMatrices
where
    I: IntoIterator<Item = FramePair>,
    R: Rng + ?Sized,
{
    let mut m = CorrelationMatrices::empty(cfg, integration_s);
    let mut seen = 0u64;
    for f in frames {
        seen += 1;
        let st = &mut m.stats;
        st.out_of_frame_alice += u64::from(f.alice == PartyFrame::OutOfFrame);
        st.out_of_frame_bob += u64::from(f.bob == PartyFrame::OutOfFrame);
        let multi_a = matches!(f.alice, PartyFrame::Multi(_));
        let multi_b = matches!(f.bob, PartyFrame::Multi(_));
        st.multi_alice += u64::from(multi_a);
        st.multi_bob += u64::from(multi_b);
        match (f.alice.is_empty(), f.bob.is_empty()) {
            (true, true) => {
                st.empty += 1;
                continue;
            }
            (true, false) | (false, true) => {
                st.single_sided += 1;
                continue;
            }
            (false, false) => {}
        }
        let oa = resolve(&f.alice, cfg, rng);
        let ob = resolve(&f.bob, cfg, rng);
        match (oa, ob) {
            (Outcome::Toa { bin: i }, Outcome::Toa { bin: j }) => m.toa.add(i, j, 1),
            (Outcome::Tsup { bin: i, sign: sa }, Outcome::Tsup { bin: j, sign: sb }) => {
                m.tsup_mut(sa, sb).add(i, j, 1)
            }
            _ => {
                m.stats.mixed_basis += 1;
                continue;
            }
        }
        if multi_a || multi_b {
            m.stats.multi_resolved += 1;
        } else {
            m.stats.valid += 1;
        }
    }
    debug_assert!(seen <= total_frames);
    m.stats.total_frames = total_frames;
    m.stats.empty += total_frames.saturating_sub(seen);
    m
}

/// Classifies and accumulates one block.
pub fn discretize_block<R: Rng + ?Sized>(
    a: &[TimeTag],
    b: &[TimeTag],
    cfg: &DiscretizationConfig,
    block_start: i64,
    block_end: i64,
    rng: &mut R,
) -> Result<CorrelationMatrices> {
    let frames = classify_frames(a, b, cfg, block_start, block_end)?;
    let (total, integration) = (frames.total_frames(), frames.integration_s());
    Ok(accumulate(frames, total, integration, cfg, rng))
}

/// The counts backing one qubit subspace `{|i⟩, |i+d/2⟩}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubspaceCounts {
    /// `m[i][i], m[i][i+d/2], m[i+d/2][i], m[i+d/2][i+d/2]` of the TOA matrix.
    pub toa: [u64; 4],
    /// `++, +−, −+, −−` TSUP counts at `[i][i]`.
    pub tsup: [u64; 4],
}

impl SubspaceCounts {
    pub fn total(&self) -> u64 {
        self.toa.iter().chain(&self.tsup).sum()
    }
}

pub fn subspace_counts(m: &CorrelationMatrices, i: usize) -> Result<SubspaceCounts> {
    let h = m.d() / 2;
    if i >= h {
        return Err(Error::SubspaceOutOfRange { index: i, count: h });
    }
    Ok(SubspaceCounts {
        toa: [m.toa.get(i, i), m.toa.get(i, i + h), m.toa.get(i + h, i), m.toa.get(i + h, i + h)],
        tsup: [
            m.tsup_pp.get(i, i),
            m.tsup_pm.get(i, i),
            m.tsup_mp.get(i, i),
            m.tsup_mm.get(i, i),
        ],
    })
}

/// Number of phases scanned by default during grid calibration.
pub const DEFAULT_PHASE_STEPS: usize = 16;

/// Picks the grid phase in `{s·Δt_b/steps}` that puts the most coincidences
/// on the diagonals of the TOA matrix and the sign-matched TSUP matrices over
/// the calibration span. Ties go to the smaller phase.
pub fn calibrate_grid_phase<R: Rng + ?Sized>(
    a: &[TimeTag],
    b: &[TimeTag],
    cfg: &DiscretizationConfig,
    span_start: i64,
    span_end: i64,
    steps: usize,
    rng: &mut R,
) -> Result<i64> {
    if steps == 0 {
        return Err(Error::Config("phase scan needs at least one step"));
    }
    let mut best = (0u64, cfg.grid_phase_ps);
    for s in 0..steps {
        let phase = cfg.grid_phase_ps + (s as i64 * cfg.bin_len_ps) / steps as i64;
        let trial = cfg.with_grid_phase(phase);
        let m = discretize_block(a, b, &trial, span_start, span_end, rng)?;
        let mass = m.toa.trace() + m.tsup_pp.trace() + m.tsup_mm.trace();
        if mass > best.0 {
            best = (mass, phase);
        }
    }
    Ok(best.1)
}

/// The channel of a click with the given outcome; the inverse of
/// classification, used to build fixtures.
pub fn channel_for(outcome: Outcome, toa_polarization: Channel) -> Channel {
    match outcome {
        Outcome::Toa { .. } => toa_polarization,
        Outcome::Tsup { sign, .. } => Channel::tsup(sign),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::simulator::{simulate_session, ChannelConfig, SourceConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(d: usize) -> DiscretizationConfig {
        DiscretizationConfig::for_dimension(d, 2700).unwrap()
    }

    fn tag(t: i64, ch: Channel) -> TimeTag {
        TimeTag::new(t, ch)
    }

    #[test]
    fn grid_table() {
        let table = valid_dimensions(2700, 5400);
        for (d, bin) in [(4, 1350), (6, 900), (12, 450), (18, 300), (36, 150)] {
            assert!(table.contains(&(d, bin)), "missing {d}");
            let c = cfg(d);
            assert_eq!((c.bin_len_ps, c.k), (bin, d / 2));
        }
        assert!(table.iter().all(|(d, _)| d % 2 == 0));
        assert!(DiscretizationConfig::for_dimension(5, 2700).is_err());
        assert!(DiscretizationConfig::for_dimension(7, 2700).is_err());
        assert!(DiscretizationConfig::new(2700, 5400, 7, 0).is_err());
    }

    #[test]
    fn outcome_space_has_d_elements_per_basis() {
        for d in [4, 6, 12, 18, 36] {
            let c = cfg(d);
            assert_eq!(c.tsup_outcomes(), d);
        }
    }

    #[test]
    fn no_tags_all_frames_empty() {
        let c = cfg(4);
        let frames = classify_frames(&[], &[], &c, 0, 54_000).unwrap();
        assert_eq!(frames.total_frames(), 10);
        let m = accumulate(frames, 10, 0.0, &c, &mut substream(0, "t", 0));
        assert_eq!(m.stats.empty, 10);
        assert_eq!(m.total(), 0);
    }

    #[test]
    fn direct_binning() {
        let c = cfg(4);
        let t = 3 * 1350 + 1;
        let a = [tag(t, Channel::ToaH)];
        let b = [tag(t, Channel::ToaH)];
        let f: Vec<_> = classify_frames(&a, &b, &c, 0, 5400).unwrap().collect();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].alice, PartyFrame::Single(Outcome::Toa { bin: 3 }));
        assert_eq!(f[0].bob, PartyFrame::Single(Outcome::Toa { bin: 3 }));
    }

    #[test]
    fn out_of_frame_tsup_is_empty() {
        let c = cfg(4);
        let a = [tag(3 * 1350, Channel::TsupPlus)];
        let b = [tag(0, Channel::TsupPlus)];
        let f: Vec<_> = classify_frames(&a, &b, &c, 0, 5400).unwrap().collect();
        assert_eq!(f[0].alice, PartyFrame::OutOfFrame);
        assert_eq!(f[0].bob, PartyFrame::Single(Outcome::Tsup { bin: 0, sign: Sign::Plus }));
        let m = accumulate(f, 1, 0.0, &c, &mut substream(0, "t", 0));
        assert_eq!(m.stats.single_sided, 1);
        assert_eq!(m.stats.out_of_frame_alice, 1);
    }

    #[test]
    fn frames_respect_grid_phase_and_block() {
        let c = cfg(4).with_grid_phase(100);
        // Frames starting in [0, 10_900): those at 100 and 5500.
        let a = [tag(99, Channel::ToaH), tag(100, Channel::ToaV)];
        let frames = classify_frames(&a, &[], &c, 0, 10_900).unwrap();
        assert_eq!(frames.total_frames(), 2);
        assert_eq!(frames.first_frame(), 0);
        let f: Vec<_> = frames.collect();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].alice, PartyFrame::Single(Outcome::Toa { bin: 0 }));
    }

    #[test]
    fn fair_sampling_is_reproducible_and_uniform() {
        let c = cfg(4);
        let clicks = [Outcome::Toa { bin: 0 }, Outcome::Toa { bin: 1 }];
        let x = fair_sampling_assign(&clicks, &c, &mut substream(1, "fs", 0));
        let y = fair_sampling_assign(&clicks, &c, &mut substream(1, "fs", 0));
        assert_eq!(x, y);

        let n = 100_000;
        let mut rng = substream(2, "fs", 0);
        let mut toa_bins = [0u64; 4];
        let mut toa = 0u64;
        for _ in 0..n {
            match fair_sampling_assign(&clicks, &c, &mut rng) {
                Outcome::Toa { bin } => {
                    toa += 1;
                    toa_bins[bin] += 1;
                }
                Outcome::Tsup { bin, .. } => assert!(bin < 2),
            }
        }
        let sigma = libm::sqrt(n as f64 * 0.25);
        assert!((toa as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma);
        // χ² with 3 degrees of freedom; 16.27 is the 0.1% critical value.
        let e = toa as f64 / 4.0;
        let chi2: f64 = toa_bins.iter().map(|&o| (o as f64 - e) * (o as f64 - e) / e).sum();
        assert!(chi2 < 16.27, "χ² = {chi2}");
    }

    #[test]
    fn hand_counted_six_frames() {
        let c = cfg(4);
        let f = 5400;
        let a = [
            // 0: valid TOA bin 1 / bin 1
            tag(1350, Channel::ToaH),
            // 1: valid TSUP + / − at bin 0 / bin 1
            tag(f + 10, Channel::TsupPlus),
            // 2: Alice only
            tag(2 * f + 2700, Channel::ToaV),
            // 3: mixed basis
            tag(3 * f, Channel::ToaH),
            // 5: valid TOA bin 3 / bin 2
            tag(5 * f + 4100, Channel::ToaV),
        ];
        let b = [
            tag(1400, Channel::ToaV),
            tag(f + 1350, Channel::TsupMinus),
            tag(3 * f + 20, Channel::TsupPlus),
            // 4: Bob only
            tag(4 * f + 5, Channel::ToaH),
            tag(5 * f + 2700, Channel::ToaH),
        ];
        let m = discretize_block(&a, &b, &c, 0, 6 * f, &mut substream(0, "h", 0)).unwrap();
        let mut toa = CountMatrix::zeros(4);
        toa.add(1, 1, 1);
        toa.add(3, 2, 1);
        let mut pm = CountMatrix::zeros(4);
        pm.add(0, 1, 1);
        assert_eq!(m.toa, toa);
        assert_eq!(m.tsup_pm, pm);
        assert_eq!(m.tsup_pp.total() + m.tsup_mp.total() + m.tsup_mm.total(), 0);
        let s = m.stats;
        assert_eq!((s.total_frames, s.empty, s.single_sided, s.valid, s.mixed_basis), (6, 0, 2, 3, 1));
        assert!((m.integration_s - 6.0 * 5400e-12).abs() < 1e-20);
    }

    #[test]
    fn perfect_simulation_is_diagonal() {
        let source = SourceConfig {
            pair_rate_hz: 1e3,
            tsup_visibility: 1.0,
            toa_visibility: 1.0,
            polarization_match: 1.0,
            ..SourceConfig::default()
        };
        let s = simulate_session(&source, &ChannelConfig::ideal(), 10.0, 3).unwrap();
        let c = cfg(4);
        let m = discretize_block(s.alice.tags(), s.bob.tags(), &c, 0, 10 * PS_PER_S, &mut substream(0, "p", 0)).unwrap();
        // Two pairs in one frame would be resolved at random.
        assert_eq!(m.stats.multi_alice + m.stats.multi_bob, 0);
        assert_eq!(m.toa.trace(), m.toa.total());
        assert!(m.toa.total() > 0);
        assert_eq!(m.tsup_pm.total() + m.tsup_mp.total(), 0);
        for sm in [&m.tsup_pp, &m.tsup_mm] {
            assert_eq!(sm.trace(), sm.total());
            assert_eq!(sm.row(2).iter().chain(sm.row(3)).sum::<u64>(), 0);
        }
        for i in 0..2 {
            let q = subspace_counts(&m, i).unwrap();
            assert_eq!((q.tsup[1], q.tsup[2]), (0, 0));
            assert_eq!((q.toa[1], q.toa[2]), (0, 0));
        }
        assert_eq!(m.total(), m.stats.accepted());
    }

    #[test]
    fn subspace_index_arithmetic() {
        let mut m = CorrelationMatrices::empty(&cfg(4), 1.0);
        for i in 0..4 {
            for j in 0..4 {
                m.toa.add(i, j, (10 * i + j) as u64);
            }
        }
        assert_eq!(subspace_counts(&m, 0).unwrap().toa, [0, 2, 20, 22]);
        assert_eq!(
            subspace_counts(&m, 2),
            Err(Error::SubspaceOutOfRange { index: 2, count: 2 })
        );
    }

    #[test]
    fn calibration_recovers_offset_grid() {
        // Correlated clicks at the centre of bins of a grid shifted by 300 ps;
        // jitter of ±600 ps splits them across bins unless the grid is within
        // 75 ps of the shift.
        let c = cfg(4);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut rng = substream(5, "cal", 0);
        for n in 0..2000i64 {
            let bin = rng.random_range(0..4i64);
            let t = 300 + n * 5400 + bin * 1350 + 675;
            a.push(tag(t + rng.random_range(-600..600), Channel::ToaH));
            b.push(tag(t + rng.random_range(-600..600), Channel::ToaH));
        }
        a.sort();
        b.sort();
        let phase = calibrate_grid_phase(&a, &b, &c, 0, 2001 * 5400, 16, &mut rng).unwrap();
        assert!((phase - 300).abs() <= 1350 / 16, "{phase}");
    }

    fn random_tags(seed: u64, n: usize, span: i64) -> Vec<TimeTag> {
        let mut rng = substream(seed, "rt", 0);
        let mut v: Vec<TimeTag> = (0..n)
            .map(|_| tag(rng.random_range(0..span), Channel::ALL[rng.random_range(0..4)]))
            .collect();
        v.sort();
        v.dedup();
        v
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn frame_stats_partition_total(seed in 0u64..500, d in prop::sample::select(vec![4usize, 6, 12, 18, 36]), phase in 0i64..5400) {
            let a = random_tags(seed, 400, 2_000_000);
            let b = random_tags(seed + 7, 400, 2_000_000);
            let c = cfg(d).with_grid_phase(phase);
            let m = discretize_block(&a, &b, &c, 0, 2_000_000, &mut substream(seed, "acc", 0)).unwrap();
            let s = m.stats;
            prop_assert_eq!(s.empty + s.single_sided + s.valid + s.mixed_basis + s.multi_resolved, s.total_frames);
            prop_assert_eq!(m.total(), s.accepted());
            prop_assert_eq!(s.total_frames as i64, (2_000_000 - phase + 5399) / 5400);
            let again = discretize_block(&a, &b, &c, 0, 2_000_000, &mut substream(seed, "acc", 0)).unwrap();
            prop_assert_eq!(m, again);
        }

        #[test]
        fn every_tag_in_exactly_one_frame(seed in 0u64..500, phase in 0i64..5400, split in 1i64..2_000_000) {
            let a: Vec<TimeTag> = random_tags(seed, 300, 2_000_000)
                .into_iter()
                .filter(|t| t.channel.basis() == Basis::Toa)
                .collect();
            let c = cfg(6).with_grid_phase(phase);
            let clicks = |lo, hi| -> usize {
                classify_frames(&a, &[], &c, lo, hi).unwrap().map(|f| match f.alice {
                    PartyFrame::Single(_) => 1,
                    PartyFrame::Multi(v) => v.len(),
                    _ => 0,
                }).sum()
            };
            prop_assert_eq!(clicks(-5400, split) + clicks(split, 2_000_000 + 5400), a.len());
            let first = classify_frames(&a, &[], &c, -5400, split).unwrap();
            let second = classify_frames(&a, &[], &c, split, 2_000_000 + 5400).unwrap();
            prop_assert_eq!(first.first_frame() + first.total_frames() as i64, second.first_frame());
        }

        #[test]
        fn subspace_counts_match_direct_indexing(vals in prop::collection::vec(0u64..1000, 36 * 5), i in 0usize..3) {
            let c = cfg(6);
            let mut m = CorrelationMatrices::empty(&c, 1.0);
            let mut it = vals.iter();
            for mat in [&mut m.toa, &mut m.tsup_pp, &mut m.tsup_pm, &mut m.tsup_mp, &mut m.tsup_mm] {
                for r in 0..6 {
                    for col in 0..6 {
                        mat.add(r, col, *it.next().unwrap());
                    }
                }
            }
            let q = subspace_counts(&m, i).unwrap();
            let at = |mi: usize, r: usize, col: usize| vals[mi * 36 + r * 6 + col];
            prop_assert_eq!(q.toa, [at(0, i, i), at(0, i, i + 3), at(0, i + 3, i), at(0, i + 3, i + 3)]);
            prop_assert_eq!(q.tsup, [at(1, i, i), at(2, i, i), at(3, i, i), at(4, i, i)]);
        }
    }
}
