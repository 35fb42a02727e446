use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nonosgood"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("NONOSGOOD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn build_params_is_deterministic_and_holds_the_first_n_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["build-params"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(dir.path().join("params.json")).unwrap();
    let v = json(&dir.path().join("params.json"));
    assert_eq!(v["format_version"], 1);
    assert_eq!(v["levels"][0]["n_seq"][0], 1.0);
    assert_eq!(v["levels"][0]["n_seq"][1], 2.0);
    assert!(v["certificates"].as_array().unwrap().iter().all(|c| c["pass"] == true));
    assert!(run(dir.path(), &["build-params"]).status.success());
    assert_eq!(first, fs::read(dir.path().join("params.json")).unwrap());
}

#[test]
fn osgood_modulus_exits_2_with_error_object() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--set", "omega=linear(slope=1)", "build-params"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "divergence");
    assert!(!dir.path().join("params.json").exists());
}

#[test]
fn config_file_and_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nomega_tilde = linear(slope=1)\n").unwrap();
    let o = run(dir.path(), &["--config", cfg.to_str().unwrap(), "build-params"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let o = run(dir.path(), &["--config", cfg.to_str().unwrap(), "build-params"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn trace_writes_one_file_per_centre() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["trace", "--generations", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = fs::read_dir(dir.path().join("trace")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "csv").count();
    assert_eq!(files, 4 + 16 + 64);
    let m = json(&dir.path().join("trace/manifest.json"));
    assert_eq!(m["failures"], 0);
    assert!(m["max_relative_error"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn reverse_trace_lands_on_cantor_centres() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["trace", "--reverse", "--from-dyadic", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&dir.path().join("trace_reverse/manifest.json"));
    assert_eq!(m["trajectories"], 20);
    assert!(m["max_relative_error"].as_f64().unwrap() <= 1e-4);
}

fn pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let header: Vec<&[u8]> = bytes.splitn(4, |b| b.is_ascii_whitespace()).collect();
    assert_eq!(header[0], b"P5");
    let w: usize = std::str::from_utf8(header[1]).unwrap().parse().unwrap();
    let h: usize = std::str::from_utf8(header[2]).unwrap().parse().unwrap();
    let rest = header[3];
    assert!(rest.starts_with(b"255\n"));
    (w, h, rest[4..].to_vec())
}

#[test]
fn density_frames_at_the_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--set", "grid=64", "density", "--times", "0,1,0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for t in ["0", "1", "0.5"] {
        let d = json(&dir.path().join(format!("density_t{t}.json")));
        assert_eq!(d["format_version"], 1);
        assert!((d["mass"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    let (w, h, px) = pgm(&dir.path().join("frame_t1.pgm"));
    assert_eq!((w, h), (64, 64));
    assert!(px.iter().all(|&p| p == 255));
    let (_, _, px) = pgm(&dir.path().join("frame_t0.pgm"));
    let lit: Vec<usize> = px.iter().enumerate().filter(|(_, &p)| p > 0).map(|(i, _)| i).collect();
    assert_eq!(lit.len(), 4);
    // Corner cubes at ±1/4: pixel index 16 or 48 on each axis.
    for i in lit {
        let (r, c) = (i / 64, i % 64);
        assert!([15, 16, 47, 48].contains(&r) && [15, 16, 47, 48].contains(&c), "{r} {c}");
    }
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "--criterion", "5,8,10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 3);
    assert!(lines.iter().all(|r| r["pass"] == true && r["format_version"] == 1));
    assert!(dir.path().join("reports.jsonl").exists());

    let o = run(dir.path(), &["--depth", "0", "verify", "--criterion", "6"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(o.stdout.trim_ascii()).unwrap();
    assert_eq!(r["flagged"], true);

    assert!(run(dir.path(), &["build-params"]).status.success());
    let p = dir.path().join("params.json");
    let mut v = json(&p);
    v["levels"][0]["n_seq"][0] = serde_json::json!(2.0);
    fs::write(&p, v.to_string()).unwrap();
    let o = run(dir.path(), &["verify", "--criterion", "5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn render_field_writes_quiver_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["render-field", "--field", "cantor", "--time", "0.2", "--points", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("field_cantor_t0.2.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 256);
    assert!(rows.iter().any(|r| r.split(',').skip(2).any(|v| v.parse::<f64>().unwrap() != 0.0)));
}
