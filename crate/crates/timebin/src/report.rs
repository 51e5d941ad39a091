//! CSV and JSON artifacts.
//!
//! Floats use Rust's shortest round-trip formatting, so output is
//! byte-stable for identical inputs. Undefined values are empty fields.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use timebin_core::discretize::{CorrelationMatrices, CountMatrix};
use timebin_core::simulator::{ClockTruth, GroundTruth, TagSource};
use timebin_core::sync::ClockModel;
use timebin_core::PS_PER_S;

use crate::error::{Error, Result};
use crate::pipeline::{BlockReport, SweepPoint};

pub const REPORT_HEADER: &str = "block_start_s,d,witness_avg,key_fraction,key_rate_bps,coincidences,singles_rate_bob";
pub const SWEEP_HEADER: &str =
    "noise_level,block_start_s,d,witness_avg,key_fraction,key_rate_bps,coincidences,singles_rate_bob,best_d";
pub const SUMMARY_HEADER: &str = "block_start_s,best_d,witness_avg,key_fraction,key_rate_bps,coincidences,singles_rate_bob";
pub const CLOCK_HEADER: &str = "block_center_s,offset_ps,significance,locked";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row of the per-block time series.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub block_start_s: f64,
    pub d: usize,
    pub witness_avg: Option<f64>,
    pub key_fraction: Option<f64>,
    pub key_rate_bps: Option<f64>,
    pub coincidences: u64,
    pub singles_rate_bob: f64,
}

impl ReportRow {
    fn fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.block_start_s,
            self.d,
            opt(self.witness_avg),
            opt(self.key_fraction),
            opt(self.key_rate_bps),
            self.coincidences,
            self.singles_rate_bob
        )
    }
}

pub fn report_rows(reports: &[BlockReport]) -> Vec<ReportRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.results.iter().map(move |res| ReportRow {
                block_start_s: r.block.start_s(),
                d: res.d,
                witness_avg: res.witness_avg,
                key_fraction: res.key_fraction_avg,
                key_rate_bps: res.key_rate_bps,
                coincidences: res.subspace_coincidences,
                singles_rate_bob: r.singles_rate_bob(),
            })
        })
        .collect()
}

pub fn write_report(w: &mut dyn Write, rows: &[ReportRow]) -> io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.fields())?;
    }
    Ok(())
}

pub fn write_sweep(w: &mut dyn Write, points: &[SweepPoint]) -> io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for p in points {
        for block in &p.reports {
            for row in report_rows(std::slice::from_ref(block)) {
                writeln!(w, "{},{},{}", p.noise_level, row.fields(), opt(block.best_d))?;
            }
        }
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, name: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Data(format!("line {line}: bad {name} `{s}`")))
}

/// Parses a report CSV (also accepts sweep CSVs, keyed by noise level).
pub fn parse_report(text: &str) -> Result<Vec<(Option<f64>, ReportRow)>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let offset = match header {
        REPORT_HEADER => 0,
        SWEEP_HEADER => 1,
        _ => return Err(Error::Data(format!("unrecognized report header `{header}`"))),
    };
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 + 2 * offset {
            return Err(Error::Data(format!("line {line_no}: expected {} fields", 7 + 2 * offset)));
        }
        let noise = if offset == 1 { parse_field(f[0], line_no, "noise_level")? } else { None };
        let f = &f[offset..];
        let required = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Data(format!("line {line_no}: missing {name}")));
        rows.push((
            noise,
            ReportRow {
                block_start_s: required(parse_field(f[0], line_no, "block_start_s")?, "block_start_s")?,
                d: parse_field(f[1], line_no, "d")?.ok_or_else(|| Error::Data(format!("line {line_no}: missing d")))?,
                witness_avg: parse_field(f[2], line_no, "witness_avg")?,
                key_fraction: parse_field(f[3], line_no, "key_fraction")?,
                key_rate_bps: parse_field(f[4], line_no, "key_rate_bps")?,
                coincidences: parse_field(f[5], line_no, "coincidences")?.unwrap_or(0),
                singles_rate_bob: required(parse_field(f[6], line_no, "singles_rate_bob")?, "singles_rate_bob")?,
            },
        ));
    }
    Ok(rows)
}

/// Best dimension per block: highest positive key rate, ties to smaller d.
/// Rows are grouped by consecutive (noise level, block start).
pub fn write_summary(w: &mut dyn Write, rows: &[(Option<f64>, ReportRow)]) -> io::Result<()> {
    let with_noise = rows.iter().any(|r| r.0.is_some());
    if with_noise {
        writeln!(w, "noise_level,{SUMMARY_HEADER}")?;
    } else {
        writeln!(w, "{SUMMARY_HEADER}")?;
    }
    let mut i = 0;
    while i < rows.len() {
        let key = (rows[i].0, rows[i].1.block_start_s);
        let mut j = i;
        while j < rows.len() && (rows[j].0, rows[j].1.block_start_s) == key {
            j += 1;
        }
        let group = &rows[i..j];
        let best = group
            .iter()
            .map(|r| &r.1)
            .filter(|r| r.key_rate_bps.unwrap_or(0.0) > 0.0)
            .fold(None::<&ReportRow>, |acc, r| match acc {
                Some(b) if b.key_rate_bps >= r.key_rate_bps => Some(b),
                _ => Some(r),
            });
        if with_noise {
            write!(w, "{},", opt(key.0))?;
        }
        match best {
            Some(b) => writeln!(
                w,
                "{},{},{},{},{},{},{}",
                b.block_start_s,
                b.d,
                opt(b.witness_avg),
                opt(b.key_fraction),
                opt(b.key_rate_bps),
                b.coincidences,
                b.singles_rate_bob
            )?,
            None => writeln!(w, "{},,,,0,0,{}", key.1, group[0].1.singles_rate_bob)?,
        }
        i = j;
    }
    Ok(())
}

pub fn write_clock_model(w: &mut dyn Write, model: &ClockModel) -> io::Result<()> {
    writeln!(w, "{CLOCK_HEADER}")?;
    for k in model.knots() {
        writeln!(w, "{},{},{},{}", k.time_s, k.offset_ps, k.significance, u8::from(k.locked))?;
    }
    Ok(())
}

/// Recovered against true offsets at each knot.
pub fn write_sync_check(w: &mut dyn Write, model: &ClockModel, truth: &ClockTruth) -> io::Result<()> {
    writeln!(w, "block_center_s,model_offset_ps,true_offset_ps,residual_ps")?;
    for k in model.knots() {
        let t = truth.offset_at((k.time_s * PS_PER_S as f64).round() as i64);
        writeln!(w, "{},{},{},{}", k.time_s, k.offset_ps, t, k.offset_ps - t)?;
    }
    Ok(())
}

pub fn write_matrix(w: &mut dyn Write, m: &CountMatrix) -> io::Result<()> {
    for i in 0..m.dim() {
        let row: Vec<String> = m.row(i).iter().map(u64::to_string).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn named_matrices(m: &CorrelationMatrices) -> [(&'static str, &CountMatrix); 5] {
    [
        ("toa", &m.toa),
        ("tsup_pp", &m.tsup_pp),
        ("tsup_pm", &m.tsup_pm),
        ("tsup_mp", &m.tsup_mp),
        ("tsup_mm", &m.tsup_mm),
    ]
}

pub const FRAMES_HEADER: &str = "block_start_s,d,grid_phase_ps,total_frames,empty,single_sided,valid,mixed_basis,multi_resolved,out_of_frame_alice,out_of_frame_bob,multi_alice,multi_bob";

pub fn write_frame_stats(w: &mut dyn Write, reports: &[BlockReport]) -> io::Result<()> {
    writeln!(w, "{FRAMES_HEADER}")?;
    for r in reports {
        for m in &r.matrices {
            let s = &m.stats;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.block.start_s(),
                m.d(),
                m.cfg.grid_phase_ps,
                s.total_frames,
                s.empty,
                s.single_sided,
                s.valid,
                s.mixed_basis,
                s.multi_resolved,
                s.out_of_frame_alice,
                s.out_of_frame_bob,
                s.multi_alice,
                s.multi_bob
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub signal: u64,
    pub background: u64,
    pub dark: u64,
}

impl SourceCounts {
    fn of(sources: &[TagSource]) -> Self {
        let mut c = Self::default();
        for s in sources {
            match s {
                TagSource::Signal(_) => c.signal += 1,
                TagSource::Background => c.background += 1,
                TagSource::Dark => c.dark += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub duration_s: f64,
    pub pairs_created: u64,
    pub pairs_recorded: u64,
    pub both_detected: u64,
    pub alice_tags: SourceCounts,
    pub bob_tags: SourceCounts,
    pub clock_offset_ps: f64,
    pub clock_drift_ps_per_s: f64,
    pub clock_walk_step_ps: i64,
    pub clock_walk_ps: Vec<f64>,
}

pub fn truth_summary(truth: &GroundTruth, duration_s: f64) -> TruthSummary {
    TruthSummary {
        duration_s,
        pairs_created: truth.pairs_created,
        pairs_recorded: truth.pairs.len() as u64,
        both_detected: truth.both_detected(),
        alice_tags: SourceCounts::of(&truth.alice_sources),
        bob_tags: SourceCounts::of(&truth.bob_sources),
        clock_offset_ps: truth.clock.offset_ps,
        clock_drift_ps_per_s: truth.clock.drift_ps_per_s,
        clock_walk_step_ps: truth.clock.walk_step_ps,
        clock_walk_ps: truth.clock.walk_ps.clone(),
    }
}

/// Pairs detected by both parties, on the true (Alice) time axis.
pub fn write_pairs(w: &mut dyn Write, truth: &GroundTruth) -> io::Result<()> {
    writeln!(w, "creation_ps,bob_delay_ps,channel_alice,channel_bob")?;
    for p in truth.pairs.iter().filter(|p| p.detected_alice && p.detected_bob) {
        writeln!(
            w,
            "{},{},{},{}",
            p.creation_ps,
            p.bob_delay_ps,
            p.channel_alice.name(),
            p.channel_bob.name()
        )?;
    }
    Ok(())
}
