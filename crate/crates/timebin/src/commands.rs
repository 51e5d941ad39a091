//! File-backed subcommands. Each one validates its inputs, then creates a
//! fresh run directory and records every artifact in its manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use timebin_core::analysis::Weighting;
use timebin_core::simulator::simulate_session;
use timebin_core::sync::SyncParams;
use timebin_core::{Party, TagStream};

use crate::config::{validate_noise, AnalysisParams, Config};
use crate::error::{Error, Result};
use crate::io::{encode_binary, encode_csv, read_tags, TagFormat};
use crate::manifest::{Manifest, RunDir};
use crate::pipeline::{analyze_streams, synchronize, BlockReport};
use crate::report;

/// A finished run directory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn finish(run: RunDir, result: Result<()>) -> Result<RunOutput> {
    let dir = run.root().to_path_buf();
    run.finish(result).map(|((), manifest)| RunOutput { dir, manifest })
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: TagFormat,
}

impl Common {
    fn seed(&self, config: Option<&Config>) -> u64 {
        self.seed.or(config.and_then(|c| c.seed)).unwrap_or(0)
    }

    /// The requested run directory, or the first free `runs/<cmd>-seed<seed>-<n>`.
    fn run_dir(&self, command: &str, seed: u64) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        (1..)
            .map(|n| PathBuf::from("runs").join(format!("{command}-seed{seed}-{n}")))
            .find(|p| !p.exists())
            .expect("unbounded search")
    }
}

/// Overrides for synchronization parameters.
#[derive(Debug, Clone, Default)]
pub struct SyncOverrides {
    pub block_len_s: Option<f64>,
    pub coarse_bin_ps: Option<i64>,
    pub coarse_half_window_ps: Option<i64>,
    pub acquire_half_window_ps: Option<i64>,
    pub initial_offset_ps: Option<i64>,
    pub fine_bin_ps: Option<i64>,
    pub fine_half_window_ps: Option<i64>,
    pub significance_threshold: Option<f64>,
}

impl SyncOverrides {
    fn apply(&self, mut p: SyncParams) -> Result<SyncParams> {
        fn set<T: Copy>(slot: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *slot = v;
            }
        }
        set(&mut p.block_len_s, self.block_len_s);
        set(&mut p.coarse_bin_ps, self.coarse_bin_ps);
        set(&mut p.coarse_half_window_ps, self.coarse_half_window_ps);
        set(&mut p.acquire_half_window_ps, self.acquire_half_window_ps);
        set(&mut p.initial_offset_ps, self.initial_offset_ps);
        set(&mut p.fine_bin_ps, self.fine_bin_ps);
        set(&mut p.fine_half_window_ps, self.fine_half_window_ps);
        set(&mut p.significance_threshold, self.significance_threshold);
        p.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(p)
    }
}

/// Overrides for analysis parameters.
#[derive(Debug, Clone, Default)]
pub struct AnalysisOverrides {
    pub dimensions: Option<Vec<usize>>,
    pub block_len_s: Option<f64>,
    pub tau_mzi_ps: Option<i64>,
    pub weighting: Option<Weighting>,
    pub phase_steps: Option<usize>,
}

impl AnalysisOverrides {
    fn apply(&self, mut p: AnalysisParams, tau: i64) -> Result<(AnalysisParams, i64)> {
        if let Some(d) = &self.dimensions {
            p.dimensions = d.clone();
        }
        if let Some(v) = self.block_len_s {
            p.block_len_s = v;
        }
        if let Some(v) = self.weighting {
            p.weighting = v;
        }
        if let Some(v) = self.phase_steps {
            p.phase_steps = v;
        }
        let tau = self.tau_mzi_ps.unwrap_or(tau);
        if tau < 1 {
            return Err(Error::Config("tau_mzi_ps must be positive".into()));
        }
        p.validate(tau)?;
        Ok((p, tau))
    }
}

fn load_config(path: &Path) -> Result<(Config, String)> {
    let config = Config::load(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok((config, text))
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.into_iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k, strip_nulls(v))).collect()),
        other => other,
    }
}

fn record_config(run: &mut RunDir, config: &Config, text: &str) -> Result<()> {
    run.set_config(strip_nulls(serde_json::to_value(&config.file).expect("config serializes")));
    run.write_bytes("config.toml", text.as_bytes())?;
    Ok(())
}

fn sync_json(p: &SyncParams) -> Value {
    json!({
        "block_len_s": p.block_len_s,
        "coarse_bin_ps": p.coarse_bin_ps,
        "coarse_half_window_ps": p.coarse_half_window_ps,
        "acquire_half_window_ps": p.acquire_half_window_ps,
        "initial_offset_ps": p.initial_offset_ps,
        "fine_bin_ps": p.fine_bin_ps,
        "fine_half_window_ps": p.fine_half_window_ps,
        "refine_half_width_ps": p.refine_half_width_ps,
        "significance_threshold": p.significance_threshold,
        "min_peak_counts": p.min_peak_counts,
    })
}

fn analysis_json(p: &AnalysisParams, tau: i64) -> Value {
    json!({
        "dimensions": p.dimensions,
        "block_len_s": p.block_len_s,
        "tau_mzi_ps": tau,
        "weighting": format!("{:?}", p.weighting).to_lowercase(),
        "phase_steps": p.phase_steps,
        "calibration_s": p.calibration_s,
    })
}

fn write_stream(run: &mut RunDir, stem: &str, s: &TagStream, format: TagFormat) -> Result<PathBuf> {
    let name = format!("{stem}.{}", format.extension());
    run.write_with(&name, |w| match format {
        TagFormat::Binary => encode_binary(s, w),
        TagFormat::Csv => encode_csv(s, w),
    })
}

fn read_party(path: &Path, party: Party) -> Result<TagStream> {
    let s = read_tags(path, TagFormat::from_path(path), party)?;
    if s.party() != party {
        return Err(Error::Data(format!(
            "{} holds {:?}'s tags, expected {:?}",
            path.display(),
            s.party(),
            party
        )));
    }
    Ok(s)
}

fn write_analysis(run: &mut RunDir, reports: &[BlockReport], export_matrices: bool) -> Result<()> {
    let rows = report::report_rows(reports);
    run.write_with("report.csv", |w| report::write_report(w, &rows))?;
    run.write_with("frames.csv", |w| report::write_frame_stats(w, reports))?;
    if export_matrices {
        for r in reports {
            for m in &r.matrices {
                for (name, matrix) in report::named_matrices(m) {
                    let rel = format!("matrices/block{:04}_d{}_{name}.csv", r.block.id, m.d());
                    run.write_with(&rel, |w| report::write_matrix(w, matrix))?;
                }
            }
        }
    }
    Ok(())
}

/// `simulate`: tag files, ground truth and manifest.
pub fn simulate(config_path: &Path, duration_s: Option<f64>, common: &Common) -> Result<RunOutput> {
    let (config, text) = load_config(config_path)?;
    let duration = duration_s.unwrap_or(config.duration_s);
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    let seed = common.seed(Some(&config));
    let mut run = RunDir::create(&common.run_dir("simulate", seed), "simulate", seed)?;
    run.add_input(config_path)?;
    run.set_parameters(json!({ "duration_s": duration, "format": common.format.to_string() }));
    let result = (|| {
        record_config(&mut run, &config, &text)?;
        simulate_stage(&mut run, &config, duration, seed, common.format)?;
        Ok(())
    })();
    finish(run, result)
}

fn simulate_stage(
    run: &mut RunDir,
    config: &Config,
    duration: f64,
    seed: u64,
    format: TagFormat,
) -> Result<timebin_core::simulator::Session> {
    run.stage("simulate", |run| {
        let session = simulate_session(&config.source, &config.channel, duration, seed)?;
        write_stream(run, "alice", &session.alice, format)?;
        write_stream(run, "bob", &session.bob, format)?;
        let summary = report::truth_summary(&session.truth, session.duration_s);
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        run.write_bytes("ground_truth.json", json.as_bytes())?;
        run.write_with("pairs.csv", |w| report::write_pairs(w, &session.truth))?;
        Ok(session)
    })
}

/// `sync`: clock model and Bob's stream on Alice's clock.
pub fn sync(
    alice: &Path,
    bob: &Path,
    config_path: Option<&Path>,
    overrides: &SyncOverrides,
    common: &Common,
) -> Result<RunOutput> {
    let loaded = config_path.map(load_config).transpose()?;
    let base = loaded.as_ref().map(|c| c.0.sync.clone()).unwrap_or_default();
    let params = overrides.apply(base)?;
    let seed = common.seed(loaded.as_ref().map(|c| &c.0));
    let a = read_party(alice, Party::Alice)?;
    let b = read_party(bob, Party::Bob)?;
    let mut run = RunDir::create(&common.run_dir("sync", seed), "sync", seed)?;
    run.add_input(alice)?;
    run.add_input(bob)?;
    run.set_parameters(json!({ "sync": sync_json(&params), "format": common.format.to_string() }));
    let result = (|| {
        if let (Some(path), Some((config, text))) = (config_path, &loaded) {
            run.add_input(path)?;
            record_config(&mut run, config, text)?;
        }
        let (model, corrected) = run.stage("sync", |_| synchronize(&a, &b, &params))?;
        run.write_with("clock_model.csv", |w| report::write_clock_model(w, &model))?;
        write_stream(&mut run, "bob_corrected", &corrected, common.format)?;
        Ok(())
    })();
    finish(run, result)
}

/// `analyze`: per-block report for already synchronized streams.
pub fn analyze(
    alice: &Path,
    bob: &Path,
    config_path: Option<&Path>,
    overrides: &AnalysisOverrides,
    export_matrices: bool,
    common: &Common,
) -> Result<RunOutput> {
    let loaded = config_path.map(load_config).transpose()?;
    let (base, tau) = loaded
        .as_ref()
        .map(|c| (c.0.analysis.clone(), c.0.source.tau_mzi_ps))
        .unwrap_or_else(|| (AnalysisParams::default(), timebin_core::simulator::TAU_MZI_PS));
    let (params, tau) = overrides.apply(base, tau)?;
    let seed = common.seed(loaded.as_ref().map(|c| &c.0));
    let a = read_party(alice, Party::Alice)?;
    let b = read_party(bob, Party::Bob)?;
    if a.is_empty() {
        return Err(Error::Data(format!("{} holds no tags", alice.display())));
    }
    let mut run = RunDir::create(&common.run_dir("analyze", seed), "analyze", seed)?;
    run.add_input(alice)?;
    run.add_input(bob)?;
    run.set_parameters(json!({ "analysis": analysis_json(&params, tau), "export_matrices": export_matrices }));
    let result = (|| {
        if let (Some(path), Some((config, text))) = (config_path, &loaded) {
            run.add_input(path)?;
            record_config(&mut run, config, text)?;
        }
        let reports = run.stage("analyze", |_| analyze_streams(&a, &b, &params, tau, seed, true))?;
        write_analysis(&mut run, &reports, export_matrices)
    })();
    finish(run, result)
}

/// `sweep`: key rate and witness against added Bob background.
pub fn sweep(
    config_path: &Path,
    dimensions: Option<Vec<usize>>,
    noise: Option<Vec<f64>>,
    common: &Common,
    mut progress: impl FnMut(f64),
) -> Result<RunOutput> {
    let (config, text) = load_config(config_path)?;
    let overrides = AnalysisOverrides {
        dimensions,
        ..Default::default()
    };
    let (params, tau) = overrides.apply(config.analysis.clone(), config.source.tau_mzi_ps)?;
    let noise = noise.unwrap_or_else(|| config.noise_ratios.clone());
    validate_noise(&noise)?;
    let seed = common.seed(Some(&config));
    let mut run = RunDir::create(&common.run_dir("sweep", seed), "sweep", seed)?;
    run.add_input(config_path)?;
    run.set_parameters(json!({
        "analysis": analysis_json(&params, tau),
        "sync": sync_json(&config.sync),
        "noise_levels": noise,
        "duration_s": config.duration_s,
    }));
    let result = (|| {
        record_config(&mut run, &config, &text)?;
        let points = run.stage("sweep", |_| {
            crate::pipeline::sweep(
                &config.source,
                &config.channel,
                config.duration_s,
                &config.sync,
                &params,
                &noise,
                seed,
                |p| progress(p.noise_level),
            )
        })?;
        run.write_with("sweep.csv", |w| report::write_sweep(w, &points))?;
        Ok(())
    })();
    finish(run, result)
}

/// `pipeline`: simulate, synchronize, analyze and report in one run
/// directory.
pub fn pipeline(config_path: &Path, common: &Common) -> Result<RunOutput> {
    let (config, text) = load_config(config_path)?;
    let seed = common.seed(Some(&config));
    let mut run = RunDir::create(&common.run_dir("pipeline", seed), "pipeline", seed)?;
    run.add_input(config_path)?;
    run.set_parameters(json!({
        "duration_s": config.duration_s,
        "sync": sync_json(&config.sync),
        "analysis": analysis_json(&config.analysis, config.source.tau_mzi_ps),
        "format": common.format.to_string(),
    }));
    let result = (|| {
        record_config(&mut run, &config, &text)?;
        let session = simulate_stage(&mut run, &config, config.duration_s, seed, common.format)?;
        let truth = session.truth.clock.clone();
        let alice = session.alice;
        let bob = session.bob;
        drop(session.truth);
        let (model, bob) = run.stage("sync", |run| {
            let (model, corrected) = synchronize(&alice, &bob, &config.sync)?;
            run.write_with("clock_model.csv", |w| report::write_clock_model(w, &model))?;
            run.write_with("sync_check.csv", |w| report::write_sync_check(w, &model, &truth))?;
            Ok((model, corrected))
        })?;
        drop(model);
        let reports = run.stage("analyze", |_| {
            analyze_streams(&alice, &bob, &config.analysis, config.source.tau_mzi_ps, seed, true)
        })?;
        run.stage("report", |run| {
            write_analysis(run, &reports, false)?;
            let rows: Vec<_> = report::report_rows(&reports).into_iter().map(|r| (None, r)).collect();
            run.write_with("summary.csv", |w| report::write_summary(w, &rows))?;
            Ok(())
        })
    })();
    finish(run, result)
}

/// `report`: best dimension per block from a report or sweep CSV, or from a
/// run directory containing one. Prints to `sink` unless `--out` is given.
pub fn report(input: &Path, common: &Common, sink: &mut dyn Write) -> Result<Option<RunOutput>> {
    let path = if input.is_dir() {
        ["report.csv", "sweep.csv"]
            .iter()
            .map(|n| input.join(n))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Data(format!("{} has no report.csv or sweep.csv", input.display())))?
    } else {
        input.to_path_buf()
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let rows = report::parse_report(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let Some(out) = &common.out else {
        report::write_summary(sink, &rows).map_err(|e| Error::io("<stdout>", e))?;
        return Ok(None);
    };
    let mut run = RunDir::create(out, "report", common.seed.unwrap_or(0))?;
    run.add_input(&path)?;
    let result = run.write_with("summary.csv", |w| report::write_summary(w, &rows)).map(|_| ());
    finish(run, result).map(Some)
}
