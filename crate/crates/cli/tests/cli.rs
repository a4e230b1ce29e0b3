use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use roibin::frames::{self, Dims4};
use roibin::metrics::{self, PairedIntensities, Scale};
use serde_json::Value;
use tempfile::TempDir;

const DIMS: &str = "4,1,96,96";

fn roibin(args: &[&str], dir: &Path) -> Output {
    roibin_env(args, dir, &[])
}

fn roibin_env(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_roibin"));
    cmd.args(args).current_dir(dir);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("ROIBIN_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Seeded synthetic frames plus planted peaks.
fn synth(dir: &Path) -> (PathBuf, PathBuf) {
    let out = roibin(
        &[
            "synth", "--dims", DIMS, "--peaks-per-event", "1,3", "--seed", "11", "--out", "f.u16",
            "--peaks-out", "p.csv",
        ],
        dir,
    );
    ok(&out);
    (dir.join("f.u16"), dir.join("p.csv"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn calibrated_bytes(raw: &Path) -> Vec<u8> {
    let bytes = std::fs::read(raw).unwrap();
    bytes
        .chunks_exact(2)
        .flat_map(|b| f32::from(u16::from_le_bytes([b[0], b[1]])).to_le_bytes())
        .collect()
}

#[test]
fn lossless_round_trip_matches_calibrated_input() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&roibin(
        &[
            "compress", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--bin", "1x1", "--codec",
            "raw", "--out", "c.rbsz", "--report", "r.json",
        ],
        d,
    ));
    ok(&roibin(&["decompress", "--input", "c.rbsz", "--out", "d.f32"], d));
    assert_eq!(std::fs::read(d.join("d.f32")).unwrap(), calibrated_bytes(&d.join("f.u16")));
    let r = read_json(&d.join("r.json"));
    assert_eq!(r["report"]["raw_bytes"], 2 * 4 * 96 * 96);
    assert_eq!(r["config"]["pipeline"]["background"]["codec"], "raw");
}

#[test]
fn missing_dims_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = roibin(&["compress", "--input", "f.u16", "--out", "c.rbsz"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--dims"));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn relative_bound_on_constant_input_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let raw: Vec<u8> = std::iter::repeat_n(7u16.to_le_bytes(), 4 * 96 * 96).flatten().collect();
    std::fs::write(d.join("const.u16"), raw).unwrap();
    let out = roibin(
        &["compress", "--input", "const.u16", "--dims", DIMS, "--rel-error", "1e-3", "--out", "c.rbsz"],
        d,
    );
    assert_eq!(out.status.code(), Some(3));
    let msg = stderr(&out);
    assert!(msg.contains("zero value range"), "{msg}");
    assert!(msg.contains("chunk 0"), "{msg}");
}

#[test]
fn lossy_round_trip_keeps_peaks_and_bound() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&roibin(
        &[
            "compress", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--abs-error", "10",
            "--out", "c.rbsz", "--report", "r.json",
        ],
        d,
    ));
    let r = read_json(&d.join("r.json"));
    assert!(r["report"]["max_binned_error"].as_f64().unwrap() <= 10.0);
    assert!(r["report"]["cr"].as_f64().unwrap() > 1.0);
    ok(&roibin(&["decompress", "--input", "c.rbsz", "--out", "d.f32", "--peaks-out", "q.csv"], d));
    let orig = frames::f32_from_le_bytes(&calibrated_bytes(&d.join("f.u16"))).unwrap();
    let dec = frames::f32_from_le_bytes(&std::fs::read(d.join("d.f32")).unwrap()).unwrap();
    let dims = Dims4::new(4, 1, 96, 96).unwrap();
    let peaks = roibin::peakfind::PeakList::read_csv(std::fs::File::open(d.join("q.csv")).unwrap(), dims).unwrap();
    assert!(!peaks.is_empty());
    for p in peaks.peaks() {
        let i = dims.offset(p.event, p.panel, p.row, p.col);
        assert_eq!(orig[i].to_bits(), dec[i].to_bits());
    }
}

#[test]
fn single_event_equals_full_decode_slice() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&roibin(
        &["compress", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--chunk", "3", "--out", "c.rbsz", "--report", "r.json"],
        d,
    ));
    ok(&roibin(&["decompress", "--input", "c.rbsz", "--out", "all.f32"], d));
    ok(&roibin(&["decompress", "--input", "c.rbsz", "--out", "e3.f32", "--event", "3"], d));
    let all = std::fs::read(d.join("all.f32")).unwrap();
    let one = std::fs::read(d.join("e3.f32")).unwrap();
    let n = 96 * 96 * 4;
    assert_eq!(one, all[3 * n..4 * n]);
    let out = roibin(&["decompress", "--input", "c.rbsz", "--out", "x.f32", "--event", "4"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn damaged_and_missing_files() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&roibin(
        &["compress", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--out", "c.rbsz", "--report", "r.json"],
        d,
    ));
    let mut bytes = std::fs::read(d.join("c.rbsz")).unwrap();
    let k = bytes.len() - 5;
    bytes[k] ^= 0x10;
    std::fs::write(d.join("bad.rbsz"), &bytes).unwrap();
    let out = roibin(&["decompress", "--input", "bad.rbsz", "--out", "d.f32"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("corrupt"), "{}", stderr(&out));

    let out = roibin(&["decompress", "--input", "nope.rbsz", "--out", "d.f32"], d);
    assert_eq!(out.status.code(), Some(4));
    let out = roibin(&["compress", "--input", "f.u16", "--dims", "5,1,96,96", "--out", "c.rbsz"], d);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn outputs_are_idempotent() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    let first = std::fs::read(d.join("f.u16")).unwrap();
    synth(d);
    assert_eq!(first, std::fs::read(d.join("f.u16")).unwrap());
    for name in ["a.rbsz", "b.rbsz"] {
        ok(&roibin(
            &["compress", "--input", "f.u16", "--dims", DIMS, "--out", name, "--report", "r.json"],
            d,
        ));
    }
    assert_eq!(std::fs::read(d.join("a.rbsz")).unwrap(), std::fs::read(d.join("b.rbsz")).unwrap());
}

#[test]
fn recompress_from_container_keeps_stored_peaks() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&roibin(
        &["compress", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--out", "a.rbsz", "--report", "a.json"],
        d,
    ));
    ok(&roibin(
        &["compress", "--container", "a.rbsz", "--abs-error", "45", "--out", "b.rbsz", "--report", "b.json"],
        d,
    ));
    let a = read_json(&d.join("a.json"));
    let b = read_json(&d.join("b.json"));
    assert_eq!(b["peaks_source"], "container");
    assert_eq!(a["report"]["peaks"], b["report"]["peaks"]);
}

#[test]
fn settings_precedence() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    std::fs::write(d.join("cfg.toml"), "chunk = 3\nbin = \"3x3\"\n[threads]\ntasks = 2\n").unwrap();
    let env = [("ROIBIN_CHUNK", "1"), ("ROIBIN_THREADS_TASKS", "3"), ("ROIBIN_CODEC", "deflate:9")];
    let base = ["compress", "--input", "f.u16", "--dims", DIMS, "--out", "c.rbsz", "--report", "r.json"];

    ok(&roibin_env(&base, d, &env));
    let r = read_json(&d.join("r.json"));
    assert_eq!(r["config"]["pipeline"]["chunk_events"], 1);
    assert_eq!(r["config"]["pipeline"]["background"]["codec"], "deflate");

    let mut with_cfg = base.to_vec();
    with_cfg.extend(["--config", "cfg.toml"]);
    ok(&roibin_env(&with_cfg, d, &env));
    let r = read_json(&d.join("r.json"));
    assert_eq!(r["config"]["pipeline"]["chunk_events"], 3);
    assert_eq!(r["config"]["pipeline"]["threads"]["tasks"], 2);
    assert_eq!(r["config"]["pipeline"]["bin"]["factor_rows"], 3);

    with_cfg.extend(["--chunk", "2", "--threads-tasks", "1"]);
    ok(&roibin_env(&with_cfg, d, &env));
    let r = read_json(&d.join("r.json"));
    assert_eq!(r["config"]["pipeline"]["chunk_events"], 2);
    assert_eq!(r["config"]["pipeline"]["threads"]["tasks"], 1);

    let out = roibin_env(&base, d, &[("ROIBIN_CHUNK", "lots")]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(d.join("typo.toml"), "chunks = 3\n").unwrap();
    let mut typo = base.to_vec();
    typo.extend(["--config", "typo.toml"]);
    assert_eq!(roibin(&typo, d).status.code(), Some(2));
}

#[test]
fn nhr_is_reported_apart_from_cr() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&roibin(
        &["compress", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--nhr", "2", "--out", "c.rbsz", "--report", "r.json"],
        d,
    ));
    let r = read_json(&d.join("r.json"));
    let kept = r["nhr"]["kept_events"].as_u64().unwrap();
    let dims = Dims4::new(4, 1, 96, 96).unwrap();
    let planted = roibin::peakfind::PeakList::read_csv(std::fs::File::open(d.join("p.csv")).unwrap(), dims).unwrap();
    let expected = planted.per_event_counts().iter().filter(|&&n| n >= 2).count() as u64;
    assert_eq!(kept, expected);
    assert_eq!(r["nhr"]["total_events"], 4);
    assert!((r["nhr"]["ratio"].as_f64().unwrap() - 4.0 / kept as f64).abs() < 1e-12);
    assert_eq!(r["report"]["raw_bytes"].as_u64().unwrap(), kept * 2 * 96 * 96);
    let cr = r["report"]["cr"].as_f64().unwrap();
    let bytes = r["report"]["compressed_bytes"].as_f64().unwrap();
    assert!((cr - (kept * 2 * 96 * 96) as f64 / bytes).abs() < 1e-9);
}

#[test]
fn tune_singleton_then_cache_reuse() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    let args = [
        "tune", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--tune-cache", "t.json", "--max-tasks", "1",
        "--max-threads", "1",
    ];
    let out = roibin(&args, d);
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["reused"], false);
    assert_eq!(v["winner"], serde_json::json!([1, 1, 1, 1, 1]));
    let rec = read_json(&d.join("t.json"));
    assert_eq!(rec["trials"].as_array().unwrap().len(), 1);

    let before = std::fs::read(d.join("t.json")).unwrap();
    let out = roibin(&args, d);
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["reused"], true);
    assert!(stderr(&out).contains("reusing"));
    assert_eq!(before, std::fs::read(d.join("t.json")).unwrap());

    // A compress run picks the cached allocation up.
    ok(&roibin(
        &["compress", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--tune-cache", "t.json", "--out", "c.rbsz", "--report", "r.json"],
        d,
    ));
    assert_eq!(read_json(&d.join("r.json"))["tuned_threads"]["tasks"], 1);
}

#[test]
fn fresh_tune_stays_in_bounds() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    let out = roibin(
        &[
            "tune", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--chunk", "1", "--tune-cache",
            "t.json", "--max-threads", "2", "--budget", "6", "--repeats", "1", "--seed", "5",
        ],
        d,
    );
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let t = &v["threads"];
    assert!((1..=4).contains(&t["tasks"].as_u64().unwrap()));
    for k in ["roi", "bin", "codec", "roi_codec"] {
        assert!((1..=2).contains(&t[k].as_u64().unwrap()), "{k}");
    }
    let rec = read_json(&d.join("t.json"));
    assert!(rec["trials"].as_array().unwrap().len() <= 6);
}

#[test]
fn grid_emits_nine_rows() {
    let tmp = TempDir::new().unwrap();
    let out = roibin(&["grid", "--dims", "2,1,64,64", "--peaks-per-event", "1,2"], tmp.path());
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines[0].starts_with("sweep,binning,tolerance,dims,cr"));
}

#[test]
fn bench_emits_one_row_per_configuration() {
    let tmp = TempDir::new().unwrap();
    let out = roibin(&["bench", "--dims", "2,1,64,64", "--peaks-per-event", "1,2"], tmp.path());
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    let out = roibin(&["bench", "--dims", "2,1,64,64", "--peaks-per-event", "1,2", "--reps", "2"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn metrics_on_identical_files() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("a.csv"), "intensity\n10\n20\n35\n41\n").unwrap();
    let out = roibin(&["metrics", "a.csv", "a.csv", "--format", "json"], d);
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rsplit"].as_f64().unwrap(), 0.0);
    assert_eq!(v["cc_half"].as_f64().unwrap(), 1.0);
    let out = roibin(&["metrics", "a.csv", "a.csv"], d);
    ok(&out);
    assert!(String::from_utf8(out.stdout).unwrap().contains("rsplit"));
}

#[test]
fn metrics_on_round_trip_match_library() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synth(d);
    ok(&roibin(
        &["compress", "--input", "f.u16", "--dims", DIMS, "--peaks", "p.csv", "--out", "c.rbsz", "--report", "r.json"],
        d,
    ));
    ok(&roibin(&["decompress", "--input", "c.rbsz", "--out", "d.f32"], d));
    let orig = frames::f32_from_le_bytes(&calibrated_bytes(&d.join("f.u16"))).unwrap();
    let dec = frames::f32_from_le_bytes(&std::fs::read(d.join("d.f32")).unwrap()).unwrap();
    let to_csv = |v: &[f32]| v.iter().map(|x| format!("{x}\n")).collect::<String>();
    std::fs::write(d.join("o.csv"), to_csv(&orig)).unwrap();
    std::fs::write(d.join("r.csv"), to_csv(&dec)).unwrap();
    let out = roibin(&["metrics", "o.csv", "r.csv", "--format", "json"], d);
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let f = |x: &[f32]| x.iter().map(|&y| f64::from(y)).collect::<Vec<_>>();
    let pair = PairedIntensities::new(f(&orig), f(&dec)).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
    assert!(rel(v["psnr_db"].as_f64().unwrap(), metrics::psnr(&orig, &dec).unwrap()));
    assert!(rel(v["cc_half"].as_f64().unwrap(), metrics::cc_half(&pair).unwrap()));
    assert!(rel(v["rsplit"].as_f64().unwrap(), metrics::rsplit(&pair, Scale::Auto).unwrap()));
}
