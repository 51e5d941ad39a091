//! Scenario configuration in TOML.
//!
//! Every section and key is optional and falls back to the defaults of the
//! core crate; unknown keys are rejected. Rate and loss profiles are either
//! a number or a list of `[t_s, value]` knots.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use timebin_core::analysis::Weighting;
use timebin_core::discretize::{valid_dimensions, DiscretizationConfig, DEFAULT_PHASE_STEPS};
use timebin_core::simulator::{ChannelConfig, Profile, SourceConfig, DETECTED_PAIR_RATE_PER_MW, HERALDING_EFFICIENCY};
use timebin_core::sync::SyncParams;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Constant(f64),
    Knots(Vec<(f64, f64)>),
}

impl ProfileSpec {
    pub fn to_profile(&self, key: &str) -> Result<Profile> {
        match self {
            ProfileSpec::Constant(v) => {
                if !v.is_finite() {
                    return Err(Error::Config(format!("{key} must be finite")));
                }
                Ok(Profile::constant(*v))
            }
            ProfileSpec::Knots(k) => Profile::new(k.clone()).map_err(|e| Error::Config(format!("{key}: {e}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub pair_rate_hz: Option<f64>,
    /// Alternative to `pair_rate_hz`: pump power in mW at the default
    /// detected rate per mW and heralding efficiency.
    pub pump_power_mw: Option<f64>,
    pub tsup_visibility: Option<f64>,
    pub toa_visibility: Option<f64>,
    pub polarization_match: Option<f64>,
    pub phase_rad: Option<f64>,
    pub tau_mzi_ps: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub loss_alice_db: Option<f64>,
    pub loss_bob_db: Option<f64>,
    pub bob_extra_loss_db: Option<ProfileSpec>,
    pub jitter_sigma_ps: Option<f64>,
    /// Bob's per-detector background rate.
    pub background_bob_hz: Option<ProfileSpec>,
    /// Bob's total background as a multiple of his signal singles rate.
    pub background_bob_ratio: Option<ProfileSpec>,
    pub background_alice_hz: Option<ProfileSpec>,
    pub dark_rate_hz: Option<f64>,
    pub clock_offset_ps: Option<f64>,
    pub clock_drift_ps_per_s: Option<f64>,
    pub drift_noise_ps_per_sqrt_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSection {
    pub duration_s: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncSection {
    pub block_len_s: Option<f64>,
    pub coarse_bin_ps: Option<i64>,
    pub coarse_half_window_ps: Option<i64>,
    pub acquire_half_window_ps: Option<i64>,
    pub initial_offset_ps: Option<i64>,
    pub fine_bin_ps: Option<i64>,
    pub fine_half_window_ps: Option<i64>,
    pub refine_half_width_ps: Option<f64>,
    pub significance_threshold: Option<f64>,
    pub min_peak_counts: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingSpec {
    #[default]
    Uniform,
    Coincidences,
}

impl From<WeightingSpec> for Weighting {
    fn from(w: WeightingSpec) -> Self {
        match w {
            WeightingSpec::Uniform => Weighting::Uniform,
            WeightingSpec::Coincidences => Weighting::Coincidences,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub dimensions: Option<Vec<usize>>,
    pub block_len_s: Option<f64>,
    pub weighting: Option<WeightingSpec>,
    pub phase_steps: Option<usize>,
    /// Length of the span at the start of the first block used to calibrate
    /// the frame grid phase.
    pub calibration_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Bob background levels as multiples of his signal singles rate.
    pub noise_ratios: Option<Vec<f64>>,
}

/// The file as written, used for the manifest snapshot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub source: SourceSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub session: SessionSection,
    #[serde(default)]
    pub sync: SyncSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

pub const DEFAULT_DURATION_S: f64 = 10.0;
pub const DEFAULT_ANALYSIS_BLOCK_S: f64 = 200.0;
pub const DEFAULT_CALIBRATION_S: f64 = 0.2;
pub const DEFAULT_DIMENSIONS: [usize; 5] = [4, 6, 12, 18, 36];
pub const DEFAULT_NOISE_RATIOS: [f64; 8] = [0.0, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 20.0];

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisParams {
    pub dimensions: Vec<usize>,
    pub block_len_s: f64,
    pub weighting: Weighting,
    pub phase_steps: usize,
    pub calibration_s: f64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            dimensions: DEFAULT_DIMENSIONS.to_vec(),
            block_len_s: DEFAULT_ANALYSIS_BLOCK_S,
            weighting: Weighting::Uniform,
            phase_steps: DEFAULT_PHASE_STEPS,
            calibration_s: DEFAULT_CALIBRATION_S,
        }
    }
}

impl AnalysisParams {
    pub fn validate(&self, tau_mzi_ps: i64) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(Error::Config("analysis.dimensions must not be empty".into()));
        }
        self.configs(tau_mzi_ps)?;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.block_len_s) {
            return Err(Error::Config("analysis.block_len_s must be positive".into()));
        }
        if !positive(self.calibration_s) {
            return Err(Error::Config("analysis.calibration_s must be positive".into()));
        }
        if self.phase_steps == 0 {
            return Err(Error::Config("analysis.phase_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Discretization configurations for each requested dimension, grid phase 0.
    pub fn configs(&self, tau_mzi_ps: i64) -> Result<Vec<DiscretizationConfig>> {
        self.dimensions
            .iter()
            .map(|&d| {
                DiscretizationConfig::for_dimension(d, tau_mzi_ps).map_err(|_| {
                    let valid: Vec<String> = valid_dimensions(tau_mzi_ps, 2 * tau_mzi_ps)
                        .iter()
                        .map(|(d, _)| d.to_string())
                        .collect();
                    Error::Config(format!(
                        "dimension {d} is not valid for tau_mzi_ps = {tau_mzi_ps} (valid: {})",
                        valid.join(", ")
                    ))
                })
            })
            .collect()
    }
}

/// A validated configuration with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub file: ConfigFile,
    pub source: SourceConfig,
    pub channel: ChannelConfig,
    pub duration_s: f64,
    pub seed: Option<u64>,
    pub sync: SyncParams,
    pub analysis: AnalysisParams,
    pub noise_ratios: Vec<f64>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        Self::from_file(file)
    }

    pub fn from_file(file: ConfigFile) -> Result<Self> {
        let core = |e: timebin_core::Error| Error::Config(e.to_string());

        let s = &file.source;
        let mut source = SourceConfig::default();
        match (s.pair_rate_hz, s.pump_power_mw) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("set either source.pair_rate_hz or source.pump_power_mw, not both".into()))
            }
            (Some(r), None) => source.pair_rate_hz = r,
            (None, Some(p)) => {
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(Error::Config("source.pump_power_mw must be non-negative".into()));
                }
                source.pair_rate_hz = p * DETECTED_PAIR_RATE_PER_MW / (HERALDING_EFFICIENCY * HERALDING_EFFICIENCY);
            }
            (None, None) => {}
        }
        set(&mut source.tsup_visibility, s.tsup_visibility);
        set(&mut source.toa_visibility, s.toa_visibility);
        set(&mut source.polarization_match, s.polarization_match);
        set(&mut source.phase_rad, s.phase_rad);
        set(&mut source.tau_mzi_ps, s.tau_mzi_ps);
        source.validate().map_err(core)?;

        let c = &file.channel;
        let mut channel = ChannelConfig::default();
        set(&mut channel.loss_alice_db, c.loss_alice_db);
        set(&mut channel.loss_bob_db, c.loss_bob_db);
        if let Some(p) = &c.bob_extra_loss_db {
            channel.bob_extra_loss_db = p.to_profile("channel.bob_extra_loss_db")?;
        }
        set(&mut channel.jitter_sigma_ps, c.jitter_sigma_ps);
        match (&c.background_bob_hz, &c.background_bob_ratio) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either channel.background_bob_hz or channel.background_bob_ratio, not both".into(),
                ))
            }
            (Some(p), None) => channel.background_bob_hz = p.to_profile("channel.background_bob_hz")?,
            (None, Some(p)) => {
                let ratio = p.to_profile("channel.background_bob_ratio")?;
                channel.background_bob_hz = ratio.scaled(channel.background_per_detector_for_ratio(&source, 1.0));
            }
            (None, None) => {}
        }
        if let Some(p) = &c.background_alice_hz {
            channel.background_alice_hz = p.to_profile("channel.background_alice_hz")?;
        }
        set(&mut channel.dark_rate_hz, c.dark_rate_hz);
        set(&mut channel.clock_offset_ps, c.clock_offset_ps);
        set(&mut channel.clock_drift_ps_per_s, c.clock_drift_ps_per_s);
        set(&mut channel.drift_noise_ps_per_sqrt_s, c.drift_noise_ps_per_sqrt_s);
        channel.validate().map_err(core)?;

        let duration_s = file.session.duration_s.unwrap_or(DEFAULT_DURATION_S);
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::Config(format!("session.duration_s must be positive, got {duration_s}")));
        }

        let y = &file.sync;
        let mut sync = SyncParams::default();
        set(&mut sync.block_len_s, y.block_len_s);
        set(&mut sync.coarse_bin_ps, y.coarse_bin_ps);
        set(&mut sync.coarse_half_window_ps, y.coarse_half_window_ps);
        set(&mut sync.acquire_half_window_ps, y.acquire_half_window_ps);
        set(&mut sync.initial_offset_ps, y.initial_offset_ps);
        set(&mut sync.fine_bin_ps, y.fine_bin_ps);
        set(&mut sync.fine_half_window_ps, y.fine_half_window_ps);
        set(&mut sync.refine_half_width_ps, y.refine_half_width_ps);
        set(&mut sync.significance_threshold, y.significance_threshold);
        set(&mut sync.min_peak_counts, y.min_peak_counts);
        sync.validate().map_err(core)?;

        let a = &file.analysis;
        let mut analysis = AnalysisParams::default();
        set(&mut analysis.dimensions, a.dimensions.clone());
        set(&mut analysis.block_len_s, a.block_len_s);
        set(&mut analysis.weighting, a.weighting.map(Weighting::from));
        set(&mut analysis.phase_steps, a.phase_steps);
        set(&mut analysis.calibration_s, a.calibration_s);
        analysis.validate(source.tau_mzi_ps)?;

        let noise_ratios = file.sweep.noise_ratios.clone().unwrap_or_else(|| DEFAULT_NOISE_RATIOS.to_vec());
        validate_noise(&noise_ratios)?;

        Ok(Config {
            seed: file.session.seed,
            file,
            source,
            channel,
            duration_s,
            sync,
            analysis,
            noise_ratios,
        })
    }
}

pub fn validate_noise(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::Config("noise grid must not be empty".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("noise ratio {r} must be finite and non-negative")));
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
