//! In-memory stages shared by the subcommands: block planning, grid
//! calibration, per-block dimension analysis and the noise sweep.

use rayon::prelude::*;
use timebin_core::analysis::{best_dimension, fair_sampling_stream, key_rate, AnalysisResult, Weighting};
use timebin_core::discretize::{calibrate_grid_phase, discretize_block, CorrelationMatrices, DiscretizationConfig};
use timebin_core::rng::substream;
use timebin_core::simulator::{simulate_streams, ChannelConfig, Profile, Session, SourceConfig};
use timebin_core::sync::{apply_model, track_drift, ClockModel, SyncParams};
use timebin_core::{TagStream, PS_PER_S};

use crate::config::AnalysisParams;
use crate::error::{Error, Result};

/// Half-open analysis block on Alice's clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub id: u64,
    pub start_ps: i64,
    pub end_ps: i64,
}

impl Block {
    pub fn start_s(&self) -> f64 {
        self.start_ps as f64 / PS_PER_S as f64
    }

    pub fn len_s(&self) -> f64 {
        (self.end_ps - self.start_ps) as f64 / PS_PER_S as f64
    }
}

/// Tiles Alice's time span with blocks of `block_len_s`, starting at the
/// block-length multiple at or before her first tag. The last block ends at
/// her last tag.
pub fn plan_blocks(alice: &TagStream, block_len_s: f64) -> Result<Vec<Block>> {
    let block_ps = (block_len_s * PS_PER_S as f64).round() as i64;
    if block_ps < 1 {
        return Err(Error::Config("block length must be at least 1 ps".into()));
    }
    let (Some(first), Some(last)) = (alice.first_ps(), alice.last_ps()) else {
        return Err(Error::Data("Alice's stream is empty".into()));
    };
    let origin = first.div_euclid(block_ps) * block_ps;
    let end = last + 1;
    let n = (end - origin + block_ps - 1) / block_ps;
    Ok((0..n)
        .map(|i| {
            let start_ps = origin + i * block_ps;
            Block {
                id: i as u64,
                start_ps,
                end_ps: (start_ps + block_ps).min(end),
            }
        })
        .collect())
}

/// Calibrates the grid phase of each configuration on the start of `block`.
pub fn calibrate(
    alice: &TagStream,
    bob: &TagStream,
    configs: &[DiscretizationConfig],
    block: &Block,
    params: &AnalysisParams,
    seed: u64,
) -> Result<Vec<DiscretizationConfig>> {
    let span = (params.calibration_s * PS_PER_S as f64).round() as i64;
    let end = (block.start_ps + span.max(1)).min(block.end_ps);
    configs
        .par_iter()
        .map(|cfg| {
            let mut rng = substream(seed, "grid_calibration", cfg.d as u64);
            let phase = calibrate_grid_phase(alice.tags(), bob.tags(), cfg, block.start_ps, end, params.phase_steps, &mut rng)?;
            Ok(cfg.with_grid_phase(phase))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub block: Block,
    pub bob_singles: u64,
    pub best_d: Option<usize>,
    pub results: Vec<AnalysisResult>,
    /// Present when matrices were requested.
    pub matrices: Vec<CorrelationMatrices>,
}

impl BlockReport {
    pub fn singles_rate_bob(&self) -> f64 {
        self.bob_singles as f64 / self.block.len_s()
    }

    pub fn result(&self, d: usize) -> Option<&AnalysisResult> {
        self.results.iter().find(|r| r.d == d)
    }
}

/// Discretizes and analyzes every block at every configuration. Blocks run
/// in parallel; each (block, d) pair draws fair-sampling outcomes from its
/// own substream, so results do not depend on scheduling.
pub fn analyze_blocks(
    alice: &TagStream,
    bob: &TagStream,
    blocks: &[Block],
    configs: &[DiscretizationConfig],
    weighting: Weighting,
    seed: u64,
    keep_matrices: bool,
) -> Result<Vec<BlockReport>> {
    blocks
        .par_iter()
        .map(|block| {
            let mut results = Vec::with_capacity(configs.len());
            let mut matrices = Vec::new();
            for cfg in configs {
                let mut rng = substream(seed, "fair_sampling", fair_sampling_stream(block.id, cfg.d));
                let m = discretize_block(alice.tags(), bob.tags(), cfg, block.start_ps, block.end_ps, &mut rng)?;
                results.push(key_rate(&m, block.id, weighting)?);
                if keep_matrices {
                    matrices.push(m);
                }
            }
            Ok(BlockReport {
                block: *block,
                bob_singles: bob.range(block.start_ps, block.end_ps).len() as u64,
                best_d: best_dimension(&results),
                results,
                matrices,
            })
        })
        .collect()
}

/// Calibration plus analysis of a synchronized pair of streams.
pub fn analyze_streams(
    alice: &TagStream,
    bob: &TagStream,
    params: &AnalysisParams,
    tau_mzi_ps: i64,
    seed: u64,
    keep_matrices: bool,
) -> Result<Vec<BlockReport>> {
    let blocks = plan_blocks(alice, params.block_len_s)?;
    let configs = calibrate(alice, bob, &params.configs(tau_mzi_ps)?, &blocks[0], params, seed)?;
    analyze_blocks(alice, bob, &blocks, &configs, params.weighting, seed, keep_matrices)
}

/// Recovers the clock model and maps Bob's stream onto Alice's clock.
pub fn synchronize(alice: &TagStream, bob: &TagStream, params: &SyncParams) -> Result<(ClockModel, TagStream)> {
    let model = track_drift(alice, bob, params)?;
    let corrected = apply_model(bob, &model);
    Ok((model, corrected))
}

/// Adds a constant Bob background of `ratio` times his signal singles rate
/// to the configured profile.
pub fn with_extra_noise(channel: &ChannelConfig, source: &SourceConfig, ratio: f64) -> ChannelConfig {
    let extra = channel.background_per_detector_for_ratio(source, ratio);
    let knots = channel.background_bob_hz.knots().iter().map(|&(t, v)| (t, v + extra)).collect();
    ChannelConfig {
        background_bob_hz: Profile::new(knots).expect("shifting values keeps knots valid"),
        ..channel.clone()
    }
}

pub struct SweepPoint {
    pub noise_level: f64,
    pub reports: Vec<BlockReport>,
}

/// Simulates, synchronizes and analyzes one session per noise level. Every
/// level reuses `seed`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    source: &SourceConfig,
    channel: &ChannelConfig,
    duration_s: f64,
    sync: &SyncParams,
    analysis: &AnalysisParams,
    noise_levels: &[f64],
    seed: u64,
    mut progress: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(noise_levels.len());
    for &noise_level in noise_levels {
        let ch = with_extra_noise(channel, source, noise_level);
        let Session { alice, bob, .. } = simulate_streams(source, &ch, duration_s, seed)?;
        let (_, bob) = synchronize(&alice, &bob, sync)?;
        let reports = analyze_streams(&alice, &bob, analysis, source.tau_mzi_ps, seed, false)?;
        let point = SweepPoint { noise_level, reports };
        progress(&point);
        out.push(point);
    }
    Ok(out)
}
