//! Entanglement witness and asymptotic key rate from correlation matrices.
//!
//! Each qubit subspace `{|i⟩, |i+d/2⟩}` yields a TOA and a TSUP matching
//! frequency. Their sum exceeds 3/2 only for entangled states, and
//! `1 − H(p_TOA) − H(p_TSUP)` lower-bounds the secret fraction per
//! post-selected coincidence.

use alloc::vec::Vec;

use crate::discretize::{discretize_block, subspace_counts, CorrelationMatrices, DiscretizationConfig, SubspaceCounts};
use crate::rng::substream;
use crate::timetag::TimeTag;
use crate::{Error, Result};

/// Witness values above this certify entanglement.
pub const WITNESS_THRESHOLD: f64 = 1.5;

/// `(q[0] + q[3]) / Σq`, or `None` without counts.
pub fn p_match(q: [u64; 4]) -> Option<f64> {
    let n = q.iter().sum::<u64>();
    (n > 0).then(|| (q[0] + q[3]) as f64 / n as f64)
}

/// Matching frequency of a TOA quadruple `(m_ii, m_i,i+h, m_i+h,i, m_i+h,i+h)`.
pub fn p_match_toa(q: [u64; 4]) -> Option<f64> {
    p_match(q)
}

/// Matching frequency of a TSUP quadruple `(++, +−, −+, −−)`.
pub fn p_match_tsup(q: [u64; 4]) -> Option<f64> {
    p_match(q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubspaceStats {
    pub index: usize,
    pub p_toa: Option<f64>,
    pub p_tsup: Option<f64>,
    pub n_toa: u64,
    pub n_tsup: u64,
}

fn binomial_se(p: Option<f64>, n: u64) -> Option<f64> {
    p.map(|p| libm::sqrt(p * (1.0 - p) / n as f64))
}

impl SubspaceStats {
    pub fn from_counts(index: usize, q: &SubspaceCounts) -> Self {
        Self {
            index,
            p_toa: p_match_toa(q.toa),
            p_tsup: p_match_tsup(q.tsup),
            n_toa: q.toa.iter().sum(),
            n_tsup: q.tsup.iter().sum(),
        }
    }

    pub fn coincidences(&self) -> u64 {
        self.n_toa + self.n_tsup
    }

    /// `p_TOA + p_TSUP` when both are defined.
    pub fn witness(&self) -> Option<f64> {
        Some(self.p_toa? + self.p_tsup?)
    }

    pub fn se_toa(&self) -> Option<f64> {
        binomial_se(self.p_toa, self.n_toa)
    }

    pub fn se_tsup(&self) -> Option<f64> {
        binomial_se(self.p_tsup, self.n_tsup)
    }
}

pub fn subspace_stats(m: &CorrelationMatrices) -> Vec<SubspaceStats> {
    (0..m.d() / 2)
        .map(|i| SubspaceStats::from_counts(i, &subspace_counts(m, i).expect("index in range")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    /// Mean over the subspaces with defined statistics.
    pub average: Option<f64>,
    pub per_subspace: Vec<Option<f64>>,
    /// Subspaces left out of the average for lack of counts.
    pub excluded: Vec<usize>,
}

impl Witness {
    pub fn certified(&self) -> bool {
        self.average.is_some_and(|w| w > WITNESS_THRESHOLD)
    }
}

fn witness_of(stats: &[SubspaceStats]) -> Witness {
    let per_subspace: Vec<Option<f64>> = stats.iter().map(SubspaceStats::witness).collect();
    let defined: Vec<f64> = per_subspace.iter().flatten().copied().collect();
    let excluded = stats
        .iter()
        .filter(|s| s.witness().is_none())
        .map(|s| s.index)
        .collect();
    let average = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Witness {
        average,
        per_subspace,
        excluded,
    }
}

pub fn witness(m: &CorrelationMatrices) -> Witness {
    witness_of(&subspace_stats(m))
}

/// `−p log₂ p − (1−p) log₂(1−p)`, zero at both ends.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::ProbabilityDomain(p));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    let a = -p * libm::log2(p);
    let b = -(1.0 - p) * libm::log1p(-p) / core::f64::consts::LN_2;
    Ok(a + b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyFraction {
    /// `1 − H(p_TOA) − H(p_TSUP)`, possibly negative.
    pub raw: f64,
    /// The raw bound clamped at zero.
    pub usable: f64,
}

pub fn key_fraction_from(p_toa: f64, p_tsup: f64) -> Result<KeyFraction> {
    let raw = 1.0 - binary_entropy(p_toa)? - binary_entropy(p_tsup)?;
    Ok(KeyFraction {
        raw,
        usable: raw.max(0.0),
    })
}

/// Koashi–Preskill fraction of one subspace; `None` if a frequency is undefined.
pub fn key_fraction(s: &SubspaceStats) -> Option<KeyFraction> {
    key_fraction_from(s.p_toa?, s.p_tsup?).ok()
}

/// How per-subspace key fractions are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Weighting {
    /// Plain mean over subspaces with defined statistics.
    #[default]
    Uniform,
    /// Mean weighted by each subspace's post-selected coincidences.
    Coincidences,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    pub block_id: u64,
    pub d: usize,
    pub witness_avg: Option<f64>,
    pub witness_per_subspace: Vec<Option<f64>>,
    /// Average usable key fraction, bits per subspace coincidence.
    pub key_fraction_avg: Option<f64>,
    /// Average of the unclamped bounds, for diagnostics.
    pub key_fraction_raw_avg: Option<f64>,
    pub key_rate_bps: Option<f64>,
    /// Coincidences kept by subspace post-selection, both bases.
    pub subspace_coincidences: u64,
    /// Matched-basis coincidences entering the matrices.
    pub accepted_coincidences: u64,
    pub integration_s: f64,
    pub subspaces: Vec<SubspaceStats>,
}

impl AnalysisResult {
    pub fn witness_certified(&self) -> bool {
        self.witness_avg.is_some_and(|w| w > WITNESS_THRESHOLD)
    }

    pub fn key_positive(&self) -> bool {
        self.key_rate_bps.is_some_and(|k| k > 0.0)
    }

    /// Key rate with an undefined value read as zero.
    pub fn key_rate_or_zero(&self) -> f64 {
        self.key_rate_bps.unwrap_or(0.0)
    }
}

fn weighted_mean(values: &[(f64, f64)]) -> Option<f64> {
    let w: f64 = values.iter().map(|v| v.1).sum();
    (w > 0.0).then(|| values.iter().map(|v| v.0 * v.1).sum::<f64>() / w)
}

/// Witness, key fraction and key rate of one block's matrices.
pub fn key_rate(m: &CorrelationMatrices, block_id: u64, weighting: Weighting) -> Result<AnalysisResult> {
    if m.d() % 2 != 0 {
        return Err(Error::Config("subspace analysis needs an even dimension"));
    }
    if !(m.integration_s > 0.0) {
        return Err(Error::Config("integration time must be positive"));
    }
    let subspaces = subspace_stats(m);
    let w = witness_of(&subspaces);
    let weight = |s: &SubspaceStats| match weighting {
        Weighting::Uniform => 1.0,
        Weighting::Coincidences => s.coincidences() as f64,
    };
    let fractions: Vec<(KeyFraction, f64)> = subspaces
        .iter()
        .filter_map(|s| key_fraction(s).map(|k| (k, weight(s))))
        .collect();
    let usable: Vec<(f64, f64)> = fractions.iter().map(|(k, w)| (k.usable, *w)).collect();
    let raw: Vec<(f64, f64)> = fractions.iter().map(|(k, w)| (k.raw, *w)).collect();
    let key_fraction_avg = weighted_mean(&usable);
    let subspace_coincidences = subspaces.iter().map(SubspaceStats::coincidences).sum();
    Ok(AnalysisResult {
        block_id,
        d: m.d(),
        witness_avg: w.average,
        witness_per_subspace: w.per_subspace,
        key_fraction_avg,
        key_fraction_raw_avg: weighted_mean(&raw),
        key_rate_bps: key_fraction_avg.map(|k| k * subspace_coincidences as f64 / m.integration_s),
        subspace_coincidences,
        accepted_coincidences: m.stats.accepted(),
        integration_s: m.integration_s,
        subspaces,
    })
}

/// Index of the result with the highest positive key rate, ties towards the
/// smaller dimension.
pub fn best_dimension(results: &[AnalysisResult]) -> Option<usize> {
    let mut best: Option<&AnalysisResult> = None;
    for r in results {
        let k = r.key_rate_or_zero();
        if k <= 0.0 {
            continue;
        }
        best = match best {
            Some(b) if b.key_rate_or_zero() > k || (b.key_rate_or_zero() == k && b.d <= r.d) => Some(b),
            _ => Some(r),
        };
    }
    best.map(|r| r.d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimensionChoice {
    pub best_d: Option<usize>,
    pub results: Vec<AnalysisResult>,
}

/// Discretizes and analyzes one block at every candidate configuration and
/// picks the dimension with the highest key rate. Fair sampling for each
/// candidate draws from its own substream of `seed`.
pub fn optimize_dimension(
    a: &[TimeTag],
    b: &[TimeTag],
    block_start: i64,
    block_end: i64,
    candidates: &[DiscretizationConfig],
    weighting: Weighting,
    block_id: u64,
    seed: u64,
) -> Result<DimensionChoice> {
    let mut results = Vec::with_capacity(candidates.len());
    for cfg in candidates {
        let mut rng = substream(seed, "fair_sampling", fair_sampling_stream(block_id, cfg.d));
        let m = discretize_block(a, b, cfg, block_start, block_end, &mut rng)?;
        results.push(key_rate(&m, block_id, weighting)?);
    }
    Ok(DimensionChoice {
        best_d: best_dimension(&results),
        results,
    })
}

/// Substream index of the fair-sampling generator for a block and dimension.
pub fn fair_sampling_stream(block_id: u64, d: usize) -> u64 {
    (block_id << 16) | d as u64
}
