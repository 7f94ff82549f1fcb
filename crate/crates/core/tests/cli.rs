use std::fs;
use std::path::Path;
use std::process::Command;

use nanonas::cli::*;
use nanonas::nas::read_sweep_csv;
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "data.n_train=160",
    "data.n_test=40",
    "data.input_hw=[24,40]",
    "model.widths=[4,4,4,8,8,8,8]",
    "train.epochs=2",
    "quant.train.epochs=1",
    "search.search_epochs=1",
    "simulate.seeds=[0,1]",
    "simulate.episode.duration=4.0",
];

fn small(extra: &[&str]) -> RunConfig {
    let sets: Vec<String> = SMALL.iter().chain(extra).map(|s| s.to_string()).collect();
    RunConfig::resolve(None, &sets).unwrap()
}

fn bin(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_nanonas")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into(),
        String::from_utf8_lossy(&out.stderr).into(),
    )
}

fn set_args(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).flat_map(|s| ["--set".to_string(), s.to_string()]).collect()
}

#[test]
fn zero_lambda_sweep_row_equals_seed_training() {
    let dir = TempDir::new().unwrap();
    let cfg = small(&["search.lambdas=[0.0]"]);
    execute(&Job::Train, &cfg, &dir.path().join("train")).unwrap();
    execute(&Job::Sweep, &cfg, &dir.path().join("sweep")).unwrap();
    let rows = read_sweep_csv(fs::File::open(dir.path().join("sweep/sweep.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    let t: TrainSummary = read_envelope(&fs::read(dir.path().join("train/metrics.json")).unwrap(), "train").unwrap();
    assert_eq!(rows[0], (0.0, t.params, t.mae_total));
}

#[test]
fn every_command_replays_bit_identically() {
    let dir = TempDir::new().unwrap();
    let d = |s: &str| dir.path().join(s);
    let cfg = small(&["search.lambdas=[0.0,1e-3]"]);
    let runs = [
        (Job::Train, "train"),
        (Job::Search { lambda: 1e-3 }, "search"),
        (Job::Sweep, "sweep"),
        (Job::Quantize { model: d("train/model.ckpt") }, "quant"),
        (Job::Plan { input: d("quant/model.qgraph") }, "plan"),
        (
            Job::Simulate {
                estimator: EstimatorChoice::Model { path: d("quant/model.qgraph") },
            },
            "sim",
        ),
        (
            Job::Simulate {
                estimator: EstimatorChoice::Trivial,
            },
            "sim_trivial",
        ),
        (Job::Report { run: d("sweep") }, "report"),
    ];
    for (job, name) in &runs {
        let m = execute(job, &cfg, &d(name)).unwrap();
        assert!(!m.artifacts.is_empty(), "{name}");
        let r = replay(&d(name).join(MANIFEST_FILE), &d(&format!("{name}_replay"))).unwrap();
        assert!(r.identical(), "{name}: {:?}", r.mismatched);
        assert_eq!(r.manifest.job, m.job);
    }
    let m = RunManifest::load(&d("quant").join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.inputs.len(), 1);
    assert_eq!(m.seeds.data, cfg.data.seed);
}

#[test]
fn report_shows_both_fronts_and_rejects_unknown_versions() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("sweep");
    let cfg = small(&["search.lambdas=[0.0,1e-2,1.0]", "search.lambda_scale=100.0"]);
    execute(&Job::Sweep, &cfg, &run).unwrap();
    let (r, read) = build_report(&run).unwrap();
    let t = r.sweep.unwrap();
    assert_eq!(t.rows.len() + t.failed.len(), 3);
    assert!(!t.params_front.is_empty() && !t.cycles_front.is_empty());
    assert!(t.rows.iter().any(|r| r.on_params_front));
    assert!(r.text.contains("params-vs-MAE front") && r.text.contains("cycles-vs-MAE front"));
    assert_eq!(read.len(), 2);

    let out = dir.path().join("rep");
    let (code, stdout, _) = bin(&["report", "--from", run.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.contains("cycles-vs-MAE front"));

    let p = run.join("sweep.json");
    let orig = fs::read_to_string(&p).unwrap();
    let (a, b) = orig.split_at(orig.rfind("\"schema_version\": 1").unwrap());
    fs::write(&p, format!("{a}{}", b.replacen("1", "2", 1))).unwrap();
    assert!(matches!(build_report(&run), Err(nanonas::Error::SchemaVersion { found: 2, .. })));
    fs::write(&p, orig.replace("\"schema_version\": 1", "\"schema_version\": 2")).unwrap();
    assert!(matches!(build_report(&run), Err(nanonas::Error::SchemaVersion { found: 2, .. })));
    let (code, _, err) = bin(&["report", "--from", run.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("schema version 2"));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t");
    let o = out.to_str().unwrap();
    let mut args = vec!["train".to_string(), "-o".into(), o.into()];
    args.extend(set_args(&[]));
    let a: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(bin(&a).0, 0);
    assert!(out.join(MANIFEST_FILE).is_file());

    assert_eq!(bin(&["train", "--set", "train.epochz=3", "-o", o]).0, 1);
    assert_eq!(bin(&["train", "--set", "data.n_train=0", "-o", o]).0, 1);
    assert_eq!(bin(&["quantize", "--model", "/no/such/model.ckpt", "-o", o]).0, 1);
    assert_eq!(bin(&["simulate", "--oracle", "--trivial", "-o", o]).0, 1);
    assert_eq!(bin(&["frobnicate"]).0, 1);
    assert_eq!(bin(&["--help"]).0, 0);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train\nepochs = 1").unwrap();
    assert_eq!(bin(&["train", "-c", bad.to_str().unwrap(), "-o", o]).0, 1);

    // a diverging run is a runtime failure
    let mut args = vec!["train".to_string(), "-o".into(), dir.path().join("div").to_str().unwrap().into()];
    args.extend(set_args(&["train.lr=1e30"]));
    let a: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, _, err) = bin(&a);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn replay_detects_changed_inputs_and_artifacts() {
    let dir = TempDir::new().unwrap();
    let d = |s: &str| dir.path().join(s);
    let cfg = small(&[]);
    execute(&Job::Train, &cfg, &d("train")).unwrap();
    execute(&Job::Plan { input: d("train/model.ckpt") }, &cfg, &d("plan")).unwrap();

    let mpath = d("plan").join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["artifacts"][0]["sha256"] = "00".into();
    fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
    let (code, _, err) = bin(&["replay", "--manifest", mpath.to_str().unwrap(), "-o", d("r1").to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("plan.json"));

    fs::write(&mpath, &text).unwrap();
    let (code, out, _) = bin(&["replay", "--manifest", mpath.to_str().unwrap(), "-o", d("r2").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("identical"));

    let mut ck = fs::read(d("train/model.ckpt")).unwrap();
    let n = ck.len();
    ck[n - 1] ^= 1;
    fs::write(d("train/model.ckpt"), ck).unwrap();
    let err = replay(&mpath, &d("r3")).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(replay(&mpath, &d("plan")).is_err());
}

#[test]
fn config_command_prints_a_loadable_config() {
    let (code, out, _) = bin(&["config", "--set", "train.epochs=9", "--set", "model.family=mobilenet"]);
    assert_eq!(code, 0);
    let c = RunConfig::from_toml(&out).unwrap();
    assert_eq!(c.train.epochs, 9);
    assert_eq!(c.model.family, nanonas::zoo::Family::Mobilenet);
    assert!(Path::new(env!("CARGO_BIN_EXE_nanonas")).exists());
}
