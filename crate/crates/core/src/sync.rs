//! Clock recovery from the photon streams themselves.
//!
//! Bob's clock is related to Alice's by a slowly varying offset. Pair
//! coincidences produce a sharp peak in the cross-correlation of the two
//! streams at exactly that offset, riding on a flat floor of accidentals.
//! [`track_drift`] follows the peak block by block: a coarse histogram finds
//! it, a fine one localizes it, and the per-block offsets become the knots of
//! a piecewise-linear [`ClockModel`].

use alloc::vec;
use alloc::vec::Vec;

use crate::timetag::{slice_range, TagStream, TimeTag, PS_PER_S};
use crate::{Error, Result};

/// Counts of `t_b − t_a` differences on a uniform grid `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationHistogram {
    bin_width_ps: i64,
    lo_ps: i64,
    counts: Vec<u64>,
}

impl CorrelationHistogram {
    pub fn new(bin_width_ps: i64, lo_ps: i64, hi_ps: i64) -> Result<Self> {
        if bin_width_ps < 1 {
            return Err(Error::Config("bin width must be at least 1 ps"));
        }
        if hi_ps <= lo_ps {
            return Err(Error::Config("search window is empty"));
        }
        if (hi_ps - lo_ps) % bin_width_ps != 0 {
            return Err(Error::Config("search window must be a whole number of bins"));
        }
        let n = ((hi_ps - lo_ps) / bin_width_ps) as usize;
        Ok(Self {
            bin_width_ps,
            lo_ps,
            counts: vec![0; n],
        })
    }

    /// Builds a histogram from explicit counts; mainly for tests.
    pub fn from_counts(bin_width_ps: i64, lo_ps: i64, counts: Vec<u64>) -> Result<Self> {
        let mut h = Self::new(bin_width_ps, lo_ps, lo_ps + bin_width_ps * counts.len().max(1) as i64)?;
        if !counts.is_empty() {
            h.counts = counts;
        }
        Ok(h)
    }

    pub fn bin_width_ps(&self) -> i64 {
        self.bin_width_ps
    }

    pub fn lo_ps(&self) -> i64 {
        self.lo_ps
    }

    pub fn hi_ps(&self) -> i64 {
        self.lo_ps + self.bin_width_ps * self.counts.len() as i64
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_center_ps(&self, m: usize) -> f64 {
        self.lo_ps as f64 + (m as f64 + 0.5) * self.bin_width_ps as f64
    }

    /// Index of the bin holding `offset_ps`, if inside the window.
    pub fn bin_of(&self, offset_ps: i64) -> Option<usize> {
        if offset_ps < self.lo_ps || offset_ps >= self.hi_ps() {
            return None;
        }
        Some(((offset_ps - self.lo_ps) / self.bin_width_ps) as usize)
    }
}

/// Histogram of `t_b − t_a` over all pairs within `[lo, hi)`, by a two-pointer
/// sweep whose cost is linear in the inputs plus the pairs in the window.
pub fn cross_correlate(
    a: &[TimeTag],
    b: &[TimeTag],
    bin_width_ps: i64,
    search_lo_ps: i64,
    search_hi_ps: i64,
) -> Result<CorrelationHistogram> {
    let mut h = CorrelationHistogram::new(bin_width_ps, search_lo_ps, search_hi_ps)?;
    let mut start = 0;
    for ta in a {
        let lo = ta.timestamp + search_lo_ps;
        let hi = ta.timestamp + search_hi_ps;
        while start < b.len() && b[start].timestamp < lo {
            start += 1;
        }
        for tb in &b[start..] {
            if tb.timestamp >= hi {
                break;
            }
            let m = ((tb.timestamp - lo) / bin_width_ps) as usize;
            h.counts[m] += 1;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub offset_ps: f64,
    pub significance: f64,
    pub max_bin: usize,
    pub max_count: u64,
}

/// Bins either side of the maximum left out of the floor statistics.
pub const PEAK_EXCLUSION_BINS: usize = 2;

/// Locates the histogram maximum. The offset is the centroid of the maximum
/// and its two neighbours; the significance is the height above the mean in
/// units of the standard deviation of the bins away from the peak.
pub fn find_peak(h: &CorrelationHistogram) -> Result<Peak> {
    let c = h.counts();
    if c.len() < 3 {
        return Err(Error::Config("peak search needs at least 3 bins"));
    }
    let (max_bin, &max_count) = c
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(&x.0)))
        .expect("non-empty");
    if max_count == 0 {
        return Err(Error::NoPeak);
    }

    let lo = max_bin.saturating_sub(1);
    let hi = (max_bin + 1).min(c.len() - 1);
    let (mut w, mut wx) = (0.0, 0.0);
    for m in lo..=hi {
        w += c[m] as f64;
        wx += c[m] as f64 * h.bin_center_ps(m);
    }
    let offset_ps = wx / w;

    let floor = c
        .iter()
        .enumerate()
        .filter(|(m, _)| m.abs_diff(max_bin) > PEAK_EXCLUSION_BINS)
        .map(|(_, &v)| v as f64);
    let (mut n, mut sum, mut sum2) = (0.0, 0.0, 0.0);
    for v in floor {
        n += 1.0;
        sum += v;
        sum2 += v * v;
    }
    let significance = if n == 0.0 {
        f64::INFINITY
    } else {
        let mean = sum / n;
        let var = (sum2 / n - mean * mean).max(0.0);
        let excess = max_count as f64 - mean;
        if var == 0.0 {
            if excess > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            excess / libm::sqrt(var)
        }
    };

    Ok(Peak {
        offset_ps,
        significance,
        max_bin,
        max_count,
    })
}

/// Background-subtracted centroid of the histogram within `half_width_ps` of
/// `center_ps`, re-centred a few times. The floor is the mean of the bins
/// more than three half-widths from the centre.
pub fn refine_centroid(h: &CorrelationHistogram, center_ps: f64, half_width_ps: f64) -> f64 {
    let mut center = center_ps;
    for _ in 0..4 {
        let (mut n_far, mut far) = (0.0, 0.0);
        for (m, &v) in h.counts().iter().enumerate() {
            if libm::fabs(h.bin_center_ps(m) - center) > 3.0 * half_width_ps {
                n_far += 1.0;
                far += v as f64;
            }
        }
        let floor = if n_far > 0.0 { far / n_far } else { 0.0 };
        let (mut w, mut wx) = (0.0, 0.0);
        for (m, &v) in h.counts().iter().enumerate() {
            let x = h.bin_center_ps(m);
            if libm::fabs(x - center) <= half_width_ps {
                let excess = v as f64 - floor;
                w += excess;
                wx += excess * x;
            }
        }
        if w <= 0.0 {
            break;
        }
        let next = wx / w;
        let done = libm::fabs(next - center) < 0.01;
        center = next;
        if done {
            break;
        }
    }
    center
}

/// One block's offset estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knot {
    /// Block centre on Alice's time axis, seconds.
    pub time_s: f64,
    /// Bob minus Alice clock reading.
    pub offset_ps: f64,
    pub significance: f64,
    /// False when the block had no significant peak and its offset was
    /// interpolated from its neighbours.
    pub locked: bool,
}

/// Piecewise-linear Bob-minus-Alice offset as a function of Alice time.
/// The outer segments extend beyond the first and last knots, so the tail
/// half-blocks at either end of a session follow the drift.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockModel {
    knots: Vec<Knot>,
}

impl ClockModel {
    pub fn new(knots: Vec<Knot>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Config("clock model needs at least one knot"));
        }
        if knots.iter().any(|k| !k.time_s.is_finite() || !k.offset_ps.is_finite()) {
            return Err(Error::Config("clock model knots must be finite"));
        }
        if knots.windows(2).any(|w| w[1].time_s <= w[0].time_s) {
            return Err(Error::Config("clock model knots must be strictly increasing in time"));
        }
        Ok(Self { knots })
    }

    pub fn constant(offset_ps: f64) -> Self {
        Self {
            knots: vec![Knot {
                time_s: 0.0,
                offset_ps,
                significance: f64::INFINITY,
                locked: true,
            }],
        }
    }

    pub fn knots(&self) -> &[Knot] {
        &self.knots
    }

    pub fn offset_at_s(&self, t_s: f64) -> f64 {
        let k = &self.knots;
        if k.len() == 1 {
            return k[0].offset_ps;
        }
        let i = k.partition_point(|x| x.time_s <= t_s).clamp(1, k.len() - 1);
        let (a, b) = (k[i - 1], k[i]);
        a.offset_ps + (b.offset_ps - a.offset_ps) * (t_s - a.time_s) / (b.time_s - a.time_s)
    }

    pub fn offset_at_ps(&self, t_ps: i64) -> f64 {
        self.offset_at_s(t_ps as f64 / PS_PER_S as f64)
    }

    /// Alice-clock time of an event Bob stamped at `t_b`. The model is a
    /// function of Alice time, so it is evaluated at a first estimate.
    pub fn to_alice(&self, t_b: i64) -> i64 {
        let first = t_b as f64 - self.offset_at_ps(t_b);
        let t = t_b as f64 - self.offset_at_s(first / PS_PER_S as f64);
        libm::round(t) as i64
    }

    /// Least-squares slope of the locked knots, ps per second.
    pub fn fitted_drift_ps_per_s(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .knots
            .iter()
            .filter(|k| k.locked)
            .map(|k| (k.time_s, k.offset_ps))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        Some(sxy / sxx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncParams {
    pub block_len_s: f64,
    pub coarse_bin_ps: i64,
    /// Coarse half-window while tracking, around the predicted offset.
    pub coarse_half_window_ps: i64,
    /// Coarse half-window before the first lock, around `initial_offset_ps`.
    pub acquire_half_window_ps: i64,
    pub initial_offset_ps: i64,
    pub fine_bin_ps: i64,
    pub fine_half_window_ps: i64,
    /// Half-width of the centroid window used for the final estimate.
    pub refine_half_width_ps: f64,
    pub significance_threshold: f64,
    /// Minimum height of the coarse maximum for a lock.
    pub min_peak_counts: u64,
}

impl Default for SyncParams {
    fn default() -> Self {
        Self {
            block_len_s: 1.0,
            coarse_bin_ps: 1000,
            coarse_half_window_ps: 1_000_000,
            acquire_half_window_ps: 1_000_000,
            initial_offset_ps: 0,
            fine_bin_ps: 10,
            fine_half_window_ps: 10_000,
            refine_half_width_ps: 500.0,
            significance_threshold: 5.0,
            min_peak_counts: 10,
        }
    }
}

impl SyncParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.block_len_s > 0.0 && self.block_len_s.is_finite()) {
            return Err(Error::Config("sync block length must be positive"));
        }
        if self.coarse_bin_ps < 1 || self.fine_bin_ps < 1 {
            return Err(Error::Config("bin widths must be at least 1 ps"));
        }
        let whole = |half: i64, bin: i64| half > 0 && (2 * half) % bin == 0;
        if !whole(self.coarse_half_window_ps, self.coarse_bin_ps)
            || !whole(self.acquire_half_window_ps, self.coarse_bin_ps)
            || !whole(self.fine_half_window_ps, self.fine_bin_ps)
        {
            return Err(Error::Config("search windows must be a positive whole number of bins"));
        }
        if !(self.refine_half_width_ps > 0.0) {
            return Err(Error::Config("refine half-width must be positive"));
        }
        if !(self.significance_threshold >= 0.0) {
            return Err(Error::Config("significance threshold must be non-negative"));
        }
        Ok(())
    }
}

struct BlockFit {
    offset_ps: f64,
    significance: f64,
    locked: bool,
}

fn fit_block(a: &[TimeTag], b: &[TimeTag], center: i64, half: i64, p: &SyncParams) -> Result<BlockFit> {
    let b_slice = |lo: i64, hi: i64| {
        let (first, last) = (a[0].timestamp, a[a.len() - 1].timestamp);
        slice_range(b, first + lo, last + hi)
    };
    let lo = center - half;
    let hi = center + half;
    let coarse = cross_correlate(a, b_slice(lo, hi), p.coarse_bin_ps, lo, hi)?;
    let peak = match find_peak(&coarse) {
        Ok(peak) => peak,
        Err(Error::NoPeak) => {
            return Ok(BlockFit {
                offset_ps: 0.0,
                significance: 0.0,
                locked: false,
            })
        }
        Err(e) => return Err(e),
    };
    if peak.significance < p.significance_threshold || peak.max_count < p.min_peak_counts {
        return Ok(BlockFit {
            offset_ps: peak.offset_ps,
            significance: peak.significance,
            locked: false,
        });
    }

    let fine_center = libm::round(peak.offset_ps) as i64;
    let lo = fine_center - p.fine_half_window_ps;
    let hi = fine_center + p.fine_half_window_ps;
    let fine = cross_correlate(a, b_slice(lo, hi), p.fine_bin_ps, lo, hi)?;
    let offset_ps = match find_peak(&fine) {
        Ok(f) => refine_centroid(&fine, f.offset_ps, p.refine_half_width_ps),
        Err(_) => peak.offset_ps,
    };
    Ok(BlockFit {
        offset_ps,
        significance: peak.significance,
        locked: true,
    })
}

/// Tracks the Bob-minus-Alice offset block by block over Alice's time span.
///
/// Before the first lock each block is searched over the acquisition window;
/// afterwards the search is centred on the offset extrapolated from the last
/// two locked blocks. Blocks without a significant peak are kept as flagged
/// knots with offsets interpolated from the locked ones.
pub fn track_drift(a: &TagStream, b: &TagStream, params: &SyncParams) -> Result<ClockModel> {
    params.validate()?;
    let (Some(start), Some(last)) = (a.first_ps(), a.last_ps()) else {
        return Err(Error::SyncFailure { locked: 0, blocks: 0 });
    };
    let block_ps = libm::round(params.block_len_s * PS_PER_S as f64) as i64;
    let n_blocks = ((last - start) / block_ps + 1) as usize;

    let mut fits: Vec<(f64, BlockFit)> = Vec::with_capacity(n_blocks);
    let mut history: Vec<(f64, f64)> = Vec::new();
    for n in 0..n_blocks {
        let lo = start + n as i64 * block_ps;
        let hi = (lo + block_ps).min(last + 1);
        let time_s = (lo + hi) as f64 / 2.0 / PS_PER_S as f64;
        let a_block = slice_range(a.tags(), lo, hi);
        if a_block.is_empty() {
            fits.push((
                time_s,
                BlockFit {
                    offset_ps: 0.0,
                    significance: 0.0,
                    locked: false,
                },
            ));
            continue;
        }
        let predicted = match history.as_slice() {
            [] => None,
            [(_, o)] => Some(*o),
            [.., (t0, o0), (t1, o1)] => Some(o1 + (o1 - o0) / (t1 - t0) * (time_s - t1)),
        };
        let mut fit = match predicted {
            Some(o) => fit_block(a_block, b.tags(), libm::round(o) as i64, params.coarse_half_window_ps, params)?,
            None => BlockFit {
                offset_ps: 0.0,
                significance: 0.0,
                locked: false,
            },
        };
        if !fit.locked {
            fit = fit_block(a_block, b.tags(), params.initial_offset_ps, params.acquire_half_window_ps, params)?;
        }
        if fit.locked {
            history.push((time_s, fit.offset_ps));
        }
        fits.push((time_s, fit));
    }

    let locked = history.len();
    if locked < 2 {
        return Err(Error::SyncFailure {
            locked,
            blocks: n_blocks,
        });
    }
    let locked_model = ClockModel::new(
        history
            .iter()
            .map(|&(time_s, offset_ps)| Knot {
                time_s,
                offset_ps,
                significance: 0.0,
                locked: true,
            })
            .collect(),
    )?;
    let knots = fits
        .into_iter()
        .map(|(time_s, f)| Knot {
            time_s,
            offset_ps: if f.locked {
                f.offset_ps
            } else {
                locked_model.offset_at_s(time_s)
            },
            significance: f.significance,
            locked: f.locked,
        })
        .collect();
    ClockModel::new(knots)
}

/// Maps Bob's stream onto Alice's clock.
pub fn apply_model(b: &TagStream, model: &ClockModel) -> TagStream {
    let tags = b
        .tags()
        .iter()
        .map(|t| TimeTag::new(model.to_alice(t.timestamp), t.channel))
        .collect();
    TagStream::sorted_dedup(b.party(), b.epoch(), tags)
}
