use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Mutex;

use timebin::manifest::Manifest;
use timebin::report::parse_report;

// Full-rate sessions take ~0.5 GB each; run them one at a time.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn timebin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timebin")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn report_rows(dir: &Path, name: &str) -> Vec<(Option<f64>, timebin::report::ReportRow)> {
    parse_report(&fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

fn small_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = "[source]\npair_rate_hz = 2e6\n[channel]\nloss_bob_db = 10\n[session]\nduration_s = 0.4\n[sync]\nblock_len_s = 0.1\n[analysis]\nblock_len_s = 0.2\ndimensions = [4, 36]\ncalibration_s = 0.05\n";

#[test]
fn simulate_night_writes_streams_and_truth() {
    let _g = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = timebin(&["simulate", s(&scenario("night.cfg")), "--duration", "0.2", "--out", s(&out)]);
    ok(&o);
    for f in ["alice.ftag", "bob.ftag", "ground_truth.json", "pairs.csv", "config.toml", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ground_truth.json")).unwrap()).unwrap();
    assert!(truth["both_detected"].as_u64().unwrap() > 1000);
    let pairs = fs::read_to_string(out.join("pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count() as u64 - 1, truth["both_detected"].as_u64().unwrap());

    let m = Manifest::load(&out).unwrap();
    assert_eq!(m.status, "ok");
    assert_eq!(m.seed, 1, "seed comes from the scenario");
    let mut listed: Vec<&str> = m.outputs.iter().map(|d| d.path.as_str()).collect();
    listed.sort();
    let mut present: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    present.sort();
    assert_eq!(listed, present, "every artifact is in the manifest");
}

#[test]
fn simulate_is_reproducible_and_never_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&timebin(&["simulate", s(&cfg), "--seed", "9", "--out", s(&a)]));
    ok(&timebin(&["simulate", s(&cfg), "--seed", "9", "--out", s(&b)]));
    let (ma, mb) = (Manifest::load(&a).unwrap(), Manifest::load(&b).unwrap());
    assert_eq!(ma.outputs, mb.outputs);
    assert_eq!(ma.config, mb.config);

    let again = timebin(&["simulate", s(&cfg), "--seed", "9", "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(Manifest::load(&a).unwrap(), ma);

    let c = tmp.path().join("c");
    ok(&timebin(&["simulate", s(&cfg), "--seed", "10", "--out", s(&c)]));
    assert_ne!(Manifest::load(&c).unwrap().outputs[1].sha256, ma.outputs[1].sha256);
}

#[test]
fn config_errors_exit_1_without_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cases = [
        ("[session]\nduration_s = 0\n", "duration"),
        ("[source]\nunknown_key = 1\n", "unknown_key"),
        ("[analysis]\ndimensions = [5]\n", "dimension 5"),
    ];
    for (body, needle) in cases {
        let cfg = small_config(tmp.path(), body);
        for cmd in ["simulate", "pipeline", "sweep"] {
            let o = timebin(&[cmd, s(&cfg), "--out", s(&out)]);
            assert_eq!(o.status.code(), Some(1), "{cmd} {body}");
            assert!(String::from_utf8_lossy(&o.stderr).contains(needle), "{}", String::from_utf8_lossy(&o.stderr));
            assert!(!out.exists());
        }
    }
    let o = timebin(&["pipeline", s(&tmp.path().join("missing.cfg")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.cfg"));
    assert!(!out.exists());

    assert_eq!(timebin(&["pipeline"]).status.code(), Some(1));
    assert_eq!(timebin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(timebin(&["--help"]).status.code(), Some(0));
}

#[test]
fn sync_and_analyze_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), SMALL);
    let sim = tmp.path().join("sim");
    ok(&timebin(&["simulate", s(&cfg), "--format", "csv", "--out", s(&sim)]));
    let (alice, bob) = (sim.join("alice.csv"), sim.join("bob.csv"));
    assert!(fs::read_to_string(&alice).unwrap().starts_with("channel,timestamp_ps\n"));

    let sync = tmp.path().join("sync");
    ok(&timebin(&["sync", s(&alice), s(&bob), "--block-len", "0.1", "--out", s(&sync)]));
    let model = fs::read_to_string(sync.join("clock_model.csv")).unwrap();
    let lines: Vec<&str> = model.lines().collect();
    assert_eq!(lines[0], "block_center_s,offset_ps,significance,locked");
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        let offset: f64 = l.split(',').nth(1).unwrap().parse().unwrap();
        assert!((offset - 250_000.0).abs() < 200.0, "{l}");
    }

    let analyze = tmp.path().join("analyze");
    ok(&timebin(&[
        "analyze",
        s(&alice),
        s(&sync.join("bob_corrected.ftag")),
        "--dims",
        "4,6",
        "--block-len",
        "0.2",
        "--export-matrices",
        "--out",
        s(&analyze),
    ]));
    let rows = report_rows(&analyze, "report.csv");
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.1.witness_avg.unwrap() > 1.5));
    let m = fs::read_to_string(analyze.join("matrices/block0001_d6_toa.csv")).unwrap();
    assert_eq!(m.lines().count(), 6);
    assert!(m.lines().all(|l| l.split(',').count() == 6));
    assert_eq!(Manifest::load(&analyze).unwrap().outputs.len(), 2 + 2 * 2 * 5);

    // Bob's stream analyzed before synchronization carries no correlations.
    let raw = tmp.path().join("raw");
    ok(&timebin(&["analyze", s(&alice), s(&bob), "--dims", "4", "--block-len", "0.2", "--out", s(&raw)]));
    assert!(report_rows(&raw, "report.csv").iter().all(|r| r.1.witness_avg.unwrap() < 1.5));

    let corrected = sync.join("bob_corrected.ftag");
    let o = timebin(&["sync", s(&corrected), s(&corrected), "--out", s(&tmp.path().join("swapped"))]);
    assert_eq!(o.status.code(), Some(2), "binary headers carry the party");

    let fail = tmp.path().join("fail");
    let o = timebin(&["sync", s(&alice), s(&bob), "--block-len", "0.1", "--significance", "1e9", "--out", s(&fail)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("synchronization failed"));
    assert_eq!(Manifest::load(&fail).unwrap().status, "failed");
}

#[test]
fn malformed_tag_files_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "channel,timestamp_ps\nTOA_H,10\nTOA_H,5\n").unwrap();
    let o = timebin(&["analyze", s(&bad), s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    let bad = tmp.path().join("bad.ftag");
    fs::write(&bad, b"FTAG\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    let o = timebin(&["sync", s(&bad), s(&bad), "--out", s(&tmp.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte 16"));
    assert!(!tmp.path().join("x").exists() && !tmp.path().join("y").exists());
}

#[test]
fn night_pipeline_certifies_every_block() {
    let _g = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("night");
    ok(&timebin(&["pipeline", s(&scenario("night.cfg")), "--out", s(&out)]));
    let rows = report_rows(&out, "report.csv");
    assert_eq!(rows.len(), 4 * 5);
    for (_, r) in &rows {
        assert!(r.witness_avg.unwrap() > 1.5, "{r:?}");
        assert!(r.key_rate_bps.unwrap() > 0.0, "{r:?}");
    }
    let check = fs::read_to_string(out.join("sync_check.csv")).unwrap();
    for l in check.lines().skip(1) {
        let residual: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!(residual.abs() < 20.0, "{l}");
    }
    let m = Manifest::load(&out).unwrap();
    let stages: Vec<&str> = m.timings.iter().map(|t| t.stage.as_str()).collect();
    assert_eq!(stages, ["simulate", "sync", "analyze", "report"]);

    let printed = timebin(&["report", s(&out)]);
    ok(&printed);
    let text = String::from_utf8(printed.stdout).unwrap();
    assert_eq!(text, fs::read_to_string(out.join("summary.csv")).unwrap());
}

#[test]
fn day_extreme_loses_certification_late() {
    let _g = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("day");
    ok(&timebin(&["pipeline", s(&scenario("day_extreme.cfg")), "--out", s(&out)]));
    let d4: Vec<_> = report_rows(&out, "report.csv").into_iter().map(|r| r.1).filter(|r| r.d == 4).collect();
    assert_eq!(d4.len(), 4);
    for r in &d4[2..] {
        assert!(r.witness_avg.unwrap() < 1.5, "{r:?}");
        assert_eq!(r.key_rate_bps, Some(0.0));
    }
    assert!(d4[0].witness_avg > d4[3].witness_avg);
}

#[test]
fn rain_burst_dips_and_recovers() {
    let _g = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rain");
    ok(&timebin(&["pipeline", s(&scenario("rain_burst.cfg")), "--out", s(&out)]));
    let rows = report_rows(&out, "report.csv");
    let rate = |start: f64, d: usize| {
        rows.iter()
            .find(|r| r.1.block_start_s == start && r.1.d == d)
            .and_then(|r| r.1.key_rate_bps)
            .unwrap()
    };
    for d in [4, 6, 12, 18, 36] {
        assert!(rate(1.0, d) < rate(0.0, d) / 2.0, "d={d}");
        assert!(rate(2.0, d) > rate(1.0, d), "d={d}");
    }
}

#[test]
fn sunrise_sweep_best_d_non_decreasing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sunrise");
    ok(&timebin(&["sweep", s(&scenario("sunrise_ramp.cfg")), "--out", s(&out)]));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut best: Vec<(String, usize)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[8].parse().unwrap())
        })
        .collect();
    best.dedup();
    assert_eq!(best.len(), 3);
    assert!(best.windows(2).all(|w| w[0].1 <= w[1].1), "{best:?}");
    assert!(best[2].1 > best[0].1);
}

#[test]
fn sweep_grid_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), SMALL);
    let out = tmp.path().join("one");
    ok(&timebin(&["sweep", s(&cfg), "--dims", "6", "--noise", "0.5", "--out", s(&out)]));
    let rows = report_rows(&out, "sweep.csv");
    assert_eq!(rows.len(), 2, "one row per block");
    assert!(rows.iter().all(|r| r.0 == Some(0.5) && r.1.d == 6));

    let out = tmp.path().join("grid");
    ok(&timebin(&["sweep", s(&cfg), "--noise", "0,2,4", "--out", s(&out)]));
    assert_eq!(report_rows(&out, "sweep.csv").len(), 3 * 2 * 2);

    let o = timebin(&["sweep", s(&cfg), "--noise", "-1", "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn extreme_noise_sweep_has_no_key() {
    let _g = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(
        tmp.path(),
        "[session]\nduration_s = 0.5\n[sync]\nblock_len_s = 0.1\n[analysis]\nblock_len_s = 0.25\ncalibration_s = 0.05\n",
    );
    let out = tmp.path().join("extreme");
    ok(&timebin(&["sweep", s(&cfg), "--noise", "200", "--out", s(&out)]));
    let rows = report_rows(&out, "sweep.csv");
    assert_eq!(rows.len(), 2 * 5);
    for (_, r) in &rows {
        assert_eq!(r.key_rate_bps, Some(0.0), "{r:?}");
    }
    for (_, r) in rows.iter().filter(|r| r.1.block_start_s > 0.0) {
        assert!(r.witness_avg.unwrap() < 1.5, "{r:?}");
    }
}
