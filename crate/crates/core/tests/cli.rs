use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn imf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imf"))
        .args(args)
        .env("IMF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(
        &path,
        "[data]\nsize = 45\nground_size = 8\nsubset_size = 2\n\
         [train]\nepochs = 1\nbatch_size = 10\n[train.estimator]\nsamples = 1\n\
         [bench]\nk_list = [1, 2, 4, 8]\nrepeats = 1\nbatch_size = 1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_split_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = imf(&["gen-data", "--dataset", "gaussian", "--seed", "7", "--out", out, "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&dir.path().join("train.jsonl")).len(), 1 + 667);
    assert_eq!(lines(&dir.path().join("test.jsonl")).len(), 1 + 333);
    let first = std::fs::read(dir.path().join("train.jsonl")).unwrap();
    assert!(imf(&["gen-data", "--dataset", "gaussian", "--seed", "7", "--out", out]).status.success());
    assert_eq!(first, std::fs::read(dir.path().join("train.jsonl")).unwrap());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("config-hash: "), "{stdout}");
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = imf(&["gen-data", "--dataset", "blobs", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("blobs"));
    assert_eq!(imf(&["train", "--out", out]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 1\n").unwrap();
    assert_eq!(imf(&["verify", "--config", bad.to_str().unwrap(), "--out", out]).status.code(), Some(2));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = small_config(dir.path());
    let base = ["--config", cfg.as_str(), "--out", out, "--quiet"];
    assert!(imf(&[&["gen-data"][..], &base].concat()).status.success());
    let o = imf(&[&["train"][..], &base].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let hist = lines(&dir.path().join("history.jsonl"));
    assert!(hist.iter().all(|r| r["version"] == 1));
    assert!(hist.iter().any(|r| r["kind"] == "epoch"));

    for mode in ["one-step", "converge"] {
        let o = imf(&[&["eval", "--mode", mode][..], &base].concat());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let m = &lines(&dir.path().join("metrics.jsonl"))[0];
        assert_eq!(m["mode"], mode);
        let jc = m["mean_jc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&jc));
        assert_eq!(m["per_sample"].as_array().unwrap().len(), 15);
        assert!(m["config_hash"].is_string() && m["seed"].is_u64() && m["wall_seconds"].is_f64());
    }
    let o = imf(&[&["eval", "--min-jc", "1.01"][..], &base].concat());
    assert_eq!(o.status.code(), Some(1));

    let model = dir.path().join("model.json");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    v["segments"][3]["data"].as_array_mut().unwrap().truncate(2);
    let name = v["segments"][3]["name"].as_str().unwrap().to_string();
    std::fs::write(&model, v.to_string()).unwrap();
    let o = imf(&[&["eval"][..], &base].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(&name));
}

#[test]
fn verify_reports_every_check_and_catches_faults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = imf(&["verify", "--out", out, "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = lines(&dir.path().join("verify.jsonl"));
    let checks: Vec<&Value> = recs.iter().filter(|r| r["kind"] == "check").collect();
    assert_eq!(checks.len(), implicit_meanfield::cli::verify::CHECKS.len());
    assert!(checks.iter().all(|c| c["passed"] == true && c["measured"].is_number() && c["threshold"].is_number()));

    let o = imf(&["verify", "--out", out, "--quiet", "--inject-fault", "sigma-prime-sign"]);
    assert_eq!(o.status.code(), Some(1));
    let recs = lines(&dir.path().join("verify.jsonl"));
    let failing: Vec<&str> = recs
        .iter()
        .filter(|r| r["kind"] == "check" && r["passed"] == false)
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert!(failing.contains(&"implicit_gradient_vs_finite_differences"), "{failing:?}");
}

#[test]
fn bench_memory_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = small_config(dir.path());
    let o = imf(&["bench-memory", "--config", &cfg, "--out", out, "--quiet", "--k-list", "5,10,20,40"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = lines(&dir.path().join("profile.jsonl"));
    let points: Vec<&Value> = recs.iter().filter(|r| r["kind"] == "point").collect();
    assert_eq!(points.len(), 8);
    let series = |mode: &str| -> Vec<f64> {
        points.iter().filter(|p| p["mode"] == mode).map(|p| p["mean"].as_f64().unwrap()).collect()
    };
    let unrolled = series("unrolled");
    assert!(unrolled.windows(2).all(|w| w[0] <= w[1]));
    let implicit = series("implicit");
    let (lo, hi) = implicit.iter().fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(hi / lo <= 1.2);
    let svg = std::fs::read_to_string(dir.path().join("profile.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            implicit_meanfield::cli::RunConfig::load(&path)
                .and_then(|c| c.resolve())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 4);
}
