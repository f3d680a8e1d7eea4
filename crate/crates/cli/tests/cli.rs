use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_streamforge");

fn run(out: &Path, args: &[&str]) -> Output {
    run_with(out, args, None)
}

fn run_with(out: &Path, args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(["--preset", "smoke", "--out"]).arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).env_remove("STREAMFORGE_THREADS");
    cmd.output().expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const WORKFLOW: [&str; 6] = ["gen-data", "train-ode", "train-dmd", "stream", "bench", "eval"];

fn workflow(out: &Path) {
    for c in WORKFLOW {
        ok(&run(out, &[c]));
    }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut all = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                all.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    all
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let head = r.headers().unwrap().clone();
    r.records()
        .map(|rec| head.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.into(), v.into())).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

#[test]
fn smoke_workflow_is_fast_and_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let start = Instant::now();
    workflow(&out);
    let took = start.elapsed().as_secs_f64();
    assert!(took < 60.0, "{took} s");
    ok(&run(&out, &["ablate"]));
    let fa = files(&out);
    fs::remove_dir_all(&out).unwrap();
    workflow(&out);
    ok(&run(&out, &["ablate"]));
    let fb = files(&out);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs", k.display());
    }
    assert!(fa.keys().any(|k| k.extension().is_some_and(|e| e == "ltv1")));
    assert!(fa.keys().any(|k| k.extension().is_some_and(|e| e == "csv")));
    assert!(fa.keys().any(|k| k.extension().is_some_and(|e| e == "jsonl")));
}

#[test]
fn every_command_writes_the_resolved_config() {
    let dir = TempDir::new().unwrap();
    workflow(dir.path());
    let resolved = ok(&run(dir.path(), &["config"]));
    for c in WORKFLOW {
        let m: toml::Table = fs::read_to_string(dir.path().join(c).join("manifest.toml"))
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(m["command"].as_str(), Some(c));
        let want: toml::Table = resolved.parse().unwrap();
        let mut got = m["config"].as_table().unwrap().clone();
        got.remove("out");
        let mut want = want;
        want.remove("out");
        assert_eq!(got, want, "{c}");
    }
}

fn resume_matches(command: &str, stop: usize, compare: &[&str]) {
    let (full, split) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&full, &split] {
        ok(&run(d.path(), &["gen-data"]));
        if command == "train-dmd" {
            ok(&run(d.path(), &["train-ode"]));
        }
    }
    ok(&run(full.path(), &[command]));
    let stopped = run(split.path(), &[command, "--stop-after", &stop.to_string()]);
    assert_eq!(stopped.status.code(), Some(2), "{}", stderr(&stopped));
    ok(&run(split.path(), &[command, "--resume"]));
    for f in compare {
        let p = Path::new(command).join(f);
        assert_eq!(
            fs::read(full.path().join(&p)).unwrap(),
            fs::read(split.path().join(&p)).unwrap(),
            "{}",
            p.display()
        );
    }
}

#[test]
fn resumed_ode_training_matches_an_uninterrupted_run() {
    resume_matches("train-ode", 30, &["student.ltv1", "train_log.csv", "state.json"]);
}

#[test]
fn resumed_dmd_training_matches_an_uninterrupted_run() {
    resume_matches("train-dmd", 25, &["best.ltv1", "ema.ltv1", "gen.ltv1", "critic.ltv1", "train_log.csv"]);
}

#[test]
fn missing_inputs_give_clear_errors() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["train-ode"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("run gen-data first"), "{}", stderr(&o));

    let o = run(dir.path(), &["stream"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("loading checkpoint"), "{}", stderr(&o));

    ok(&run(dir.path(), &["gen-data"]));
    let o = run(dir.path(), &["train-ode", "--resume"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no checkpoint"), "{}", stderr(&o));

    let o = run(dir.path(), &["eval", "--checkpoint", "/nonexistent/student"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/student"), "{}", stderr(&o));
}

#[test]
fn corrupted_magic_is_rejected() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), &["gen-data"]));
    let f = dir.path().join("gen-data/train.audio.ltv1");
    let mut bytes = fs::read(&f).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&f, bytes).unwrap();
    ok(&run(dir.path(), &["train-ode"]));
    let o = run(dir.path(), &["train-dmd"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn bundle_manifest_lists_every_condition() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("n64.toml");
    fs::write(&cfg, "[data]\nn_train = 64\ncurate = false\n").unwrap();
    ok(&run_with(dir.path(), &["gen-data"], Some(&cfg)));
    for name in ["pool", "train"] {
        let m: toml::Table = fs::read_to_string(dir.path().join(format!("gen-data/{name}.toml")))
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(m["count"].as_integer(), Some(64));
        assert_eq!(m["entries"].as_array().unwrap().len(), 64);
    }
}

#[test]
fn flags_override_the_file_which_overrides_the_preset() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 5\ninit_scale = 0.25\n").unwrap();
    let parse = |o: Output| -> toml::Table { ok(&o).parse().unwrap() };
    let t = parse(run_with(dir.path(), &["config"], Some(&cfg)));
    assert_eq!(t["seed"].as_integer(), Some(5));
    assert_eq!(t["init_scale"].as_float(), Some(0.25));
    assert_eq!(t["world"]["dim"].as_integer(), Some(4));
    let t = parse(run_with(dir.path(), &["--seed", "9", "config"], Some(&cfg)));
    assert_eq!(t["seed"].as_integer(), Some(9));
}

#[test]
fn bad_thread_count_is_an_error() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(BIN)
        .args(["--preset", "smoke", "--out"])
        .arg(dir.path())
        .arg("config")
        .env("STREAMFORGE_THREADS", "many")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("STREAMFORGE_THREADS"));
}

#[test]
fn zero_delay_stream_has_no_stalls() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[stream]\ndenoise_ms = 0.0\ndecode_ms = 0.0\n").unwrap();
    for c in ["gen-data", "train-ode", "train-dmd", "stream"] {
        ok(&run_with(dir.path(), &[c], Some(&cfg)));
    }
    let rows = csv_rows(&dir.path().join("stream/report.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["stall_count"], "0");
    assert_eq!(rows[0]["blocks"], "20");
}

#[test]
fn bench_speedup_follows_the_stage_delays() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[bench]\nblocks = 12\ndenoise_ms = 30.0\ndecode_ms = 20.0\n").unwrap();
    for c in ["gen-data", "train-ode", "train-dmd"] {
        ok(&run_with(dir.path(), &[c], Some(&cfg)));
    }
    for clock in [&["bench"][..], &["bench", "--wall-clock"][..]] {
        ok(&run_with(dir.path(), clock, Some(&cfg)));
        let s = &csv_rows(&dir.path().join("bench/summary.csv"))[0];
        let theory = 50.0 / 30.0;
        assert!((num(s, "theoretical_speedup") - theory).abs() < 1e-12);
        let rel = (num(s, "speedup") - theory).abs() / theory;
        assert!(rel <= 0.15, "{clock:?}: speedup {} vs {theory}", num(s, "speedup"));
        assert_eq!(s["identical_outputs"], "true");
    }
}

#[test]
fn ablation_writes_one_row_per_arm() {
    let dir = TempDir::new().unwrap();
    ok(&run(dir.path(), &["ablate"]));
    let rows = csv_rows(&dir.path().join("ablate/arms.csv"));
    let arms: Vec<&str> = rows.iter().map(|r| r["arm"].as_str()).collect();
    assert_eq!(
        arms,
        ["baseline", "+curated", "+converged_ode", "+aggressive_lr", "+tuned_cfg", "final_without_curation"]
    );
    assert!(rows.iter().all(|r| num(r, "best_frechet").is_finite() && num(r, "final_sync").is_finite()));
    let report = csv_rows(&dir.path().join("ablate/report.csv"));
    assert!(report.iter().all(|r| r["seed"] == "0"));
}
