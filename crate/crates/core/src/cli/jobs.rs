//! Pipeline commands, their artifacts and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::report::build_report;
use crate::artifact::{sha256_file, sha256_hex, write_atomic};
use crate::deploy::{
    deploy_report, estimate_cycles, estimate_power_fps, operating_point, plan_tiling, DeployNet, OperatingPoint,
};
use crate::error::{Error, Result};
use crate::metrics::RegressionMetrics;
use crate::nas::{lambda_sweep, search_lambda, write_sweep_csv};
use crate::quant::{fake_quantize_train, integerize, load_integer_graph, quantization_report, save_integer_graph};
use crate::sim::{run_episode, write_trace_csv, Estimator, SimMetrics};
use crate::zoo::{count_macs, count_params, evaluate, generate_dataset, train, ArchSpec, Camera, Network};

/// Version of every JSON artifact envelope and of the run manifest.
pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorChoice {
    Oracle,
    /// Constant training-set mean.
    Trivial,
    /// A float checkpoint or an integer graph (`.qgraph`).
    Model { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Train,
    Search { lambda: f64 },
    Sweep,
    Quantize { model: PathBuf },
    Plan { input: PathBuf },
    Simulate { estimator: EstimatorChoice },
    Report { run: PathBuf },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Train => "train",
            Job::Search { .. } => "search",
            Job::Sweep => "sweep",
            Job::Quantize { .. } => "quantize",
            Job::Plan { .. } => "plan",
            Job::Simulate { .. } => "simulate",
            Job::Report { .. } => "report",
        }
    }

    /// Same job with input paths made absolute.
    fn canonical(&self) -> Result<Job> {
        let abs = |p: &PathBuf| fs::canonicalize(p).map_err(|e| missing(p, e));
        Ok(match self {
            Job::Quantize { model } => Job::Quantize { model: abs(model)? },
            Job::Plan { input } => Job::Plan { input: abs(input)? },
            Job::Simulate {
                estimator: EstimatorChoice::Model { path },
            } => Job::Simulate {
                estimator: EstimatorChoice::Model { path: abs(path)? },
            },
            Job::Report { run } => Job::Report { run: abs(run)? },
            j => j.clone(),
        })
    }
}

fn missing(p: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub quant: u64,
    pub simulate: Vec<u64>,
}

/// Everything needed to re-run a command: the job, the resolved config and
/// the hashes of what went in and came out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub job: Job,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| missing(path, e))?;
        let v: serde_json::Value = serde_json::from_slice(&bytes)?;
        check_version(&v, "manifest")?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn artifact(&self, name: &str) -> Option<&FileHash> {
        self.artifacts.iter().find(|a| a.path == name)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn check_version(v: &serde_json::Value, what: &str) -> Result<()> {
    let found = v
        .get("schema_version")
        .and_then(|s| s.as_u64())
        .ok_or_else(|| Error::Format(format!("{what} has no schema_version")))?;
    if found != u64::from(ARTIFACT_SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found: found.try_into().unwrap_or(u32::MAX),
            expected: ARTIFACT_SCHEMA_VERSION,
        });
    }
    Ok(())
}

/// `{"schema_version", "kind", "data"}` JSON wrapper used by every artifact.
pub fn envelope<T: Serialize>(kind: &str, data: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(&serde_json::json!({
        "schema_version": ARTIFACT_SCHEMA_VERSION,
        "kind": kind,
        "data": data,
    }))?;
    v.push(b'\n');
    Ok(v)
}

pub fn read_envelope<T: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<T> {
    let v: serde_json::Value = serde_json::from_slice(bytes)?;
    check_version(&v, kind)?;
    match v.get("kind").and_then(|k| k.as_str()) {
        Some(k) if k == kind => {}
        k => return Err(Error::Format(format!("expected a `{kind}` artifact, found {k:?}"))),
    }
    Ok(serde_json::from_value(v["data"].clone())?)
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileHash>,
}

impl Outputs {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.files.push(FileHash {
            path: name.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Records a file some library call already wrote.
    fn record(&mut self, name: &str) -> Result<()> {
        let sha256 = sha256_file(&self.dir.join(name))?;
        self.files.push(FileHash {
            path: name.into(),
            sha256,
        });
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub metrics: RegressionMetrics,
    pub mae_total: f64,
    pub params: usize,
    pub macs: u64,
    pub epoch_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub metrics: SimMetrics,
    pub lost_at: Option<f64>,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub estimator: String,
    pub estimate_hz: f64,
    pub episodes: Vec<EpisodeSummary>,
    pub mean_e_xy: f64,
    pub min_completion: f64,
}

enum Loaded {
    Float(Network),
    Integer(crate::quant::IntegerGraph),
}

/// Loads `.qgraph` integer graphs, `.json` architectures or float checkpoints.
fn deploy_net_from_file(path: &Path) -> Result<DeployNet> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("qgraph") => DeployNet::from_integer_graph(&load_integer_graph(path)?),
        Some("json") => DeployNet::from_arch(&ArchSpec::from_json(&fs::read_to_string(path)?)?),
        _ => DeployNet::from_arch(&Network::load(path)?.arch),
    }
}

fn planned_cycles(net: &DeployNet, cfg: &RunConfig) -> Result<(u64, u64)> {
    let plan = plan_tiling(net, &cfg.deploy.memory)?;
    let est = estimate_cycles(&plan, &cfg.deploy.cycles);
    Ok((est.total, est.frame))
}

fn planned_fps(net: &DeployNet, cfg: &RunConfig) -> Result<f64> {
    let (_, frame) = planned_cycles(net, cfg)?;
    Ok(estimate_power_fps(frame, &operating_point(&cfg.deploy.operating_point)?)?.fps)
}

/// Runs `job` and writes its artifacts plus `manifest.json` into `out`.
pub fn execute(job: &Job, cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let job = job.canonical()?;
    let started_unix = now();
    fs::create_dir_all(out)?;
    let out_abs = fs::canonicalize(out)?;
    let mut o = Outputs {
        dir: out.to_path_buf(),
        files: Vec::new(),
    };
    let mut inputs = Vec::new();
    let mut input = |p: &Path| -> Result<()> {
        inputs.push(FileHash {
            path: p.display().to_string(),
            sha256: sha256_file(p)?,
        });
        Ok(())
    };
    let arch_cost = |a: &ArchSpec| Ok(planned_cycles(&DeployNet::from_arch(a)?, cfg)?.0);

    match &job {
        Job::Train => {
            let (tr, te) = cfg.datasets()?;
            let arch = cfg.seed_arch()?;
            let mut net = Network::init(&arch, cfg.train.seed, Some(tr.label_means()))?;
            let log = train(&mut net, &tr, &cfg.train)?;
            let m = evaluate(&net, &te)?;
            net.save(&o.dir.join("model.ckpt"))?;
            o.record("model.ckpt")?;
            o.put("arch.json", arch.to_json()?.as_bytes())?;
            let summary = TrainSummary {
                metrics: m,
                mae_total: m.mae_total(),
                params: count_params(&arch),
                macs: count_macs(&arch, arch.input)?,
                epoch_loss: log.epoch_loss,
            };
            o.put("metrics.json", &envelope("train", &summary)?)?;
        }
        Job::Search { lambda } => {
            let (tr, te) = cfg.datasets()?;
            let seed = cfg.seed_arch()?;
            let res = search_lambda(&seed, &tr, &te, &cfg.search_config(), *lambda, Some(&arch_cost))?;
            res.net.save(&o.dir.join("model.ckpt"))?;
            o.record("model.ckpt")?;
            o.put("arch.json", res.net.arch.to_json()?.as_bytes())?;
            o.put("search.json", &envelope("search", &res.record)?)?;
        }
        Job::Sweep => {
            let (tr, te) = cfg.datasets()?;
            let seed = cfg.seed_arch()?;
            let summary = lambda_sweep(&seed, &tr, &te, &cfg.search_config(), Some(&arch_cost))?;
            let mut csv = Vec::new();
            write_sweep_csv(&mut csv, &summary)?;
            o.put("sweep.csv", &csv)?;
            o.put("sweep.json", &envelope("sweep", &summary)?)?;
        }
        Job::Quantize { model } => {
            input(model)?;
            let net = Network::load(model)?;
            let (tr, te) = cfg.datasets()?;
            let fq = fake_quantize_train(&net, &tr, &cfg.quant)?;
            let g = integerize(&fq)?;
            let report = quantization_report(&net, &fq, &g, &te)?;
            save_integer_graph(&o.dir.join("model.qgraph"), &g)?;
            o.record("model.qgraph")?;
            o.put("quant.json", &envelope("quant", &report)?)?;
        }
        Job::Plan { input: path } => {
            input(path)?;
            let net = deploy_net_from_file(path)?;
            let r = deploy_report(&net, &cfg.deploy.memory, &cfg.deploy.cycles, &OperatingPoint::defaults())?;
            o.put("plan.json", &envelope("plan", &r)?)?;
            o.put("plan.txt", r.to_text().as_bytes())?;
        }
        Job::Simulate { estimator } => {
            let mut ep_cfg = cfg.simulate.episode.clone();
            let loaded = match estimator {
                EstimatorChoice::Model { path } => {
                    input(path)?;
                    let (m, dn) = if path.extension().is_some_and(|e| e == "qgraph") {
                        let g = load_integer_graph(path)?;
                        let dn = DeployNet::from_integer_graph(&g)?;
                        (Loaded::Integer(g), dn)
                    } else {
                        let n = Network::load(path)?;
                        let dn = DeployNet::from_arch(&n.arch)?;
                        (Loaded::Float(n), dn)
                    };
                    if cfg.simulate.deploy_rate {
                        ep_cfg.estimate_hz = planned_fps(&dn, cfg)?;
                    }
                    Some(m)
                }
                _ => None,
            };
            let (est, name) = match (estimator, &loaded) {
                (_, Some(Loaded::Float(n))) => (Estimator::Float(n), "float"),
                (_, Some(Loaded::Integer(g))) => (Estimator::Integer(g), "integer"),
                (EstimatorChoice::Trivial, _) => {
                    let d = &cfg.data;
                    let ranges = cfg.simulate.trivial_ranges.unwrap_or(d.ranges);
                    let cam = Camera::new(d.input_hw[0], d.input_hw[1]);
                    let means = generate_dataset(d.n_train, d.seed, &ranges, &cam)?.label_means();
                    (Estimator::Trivial(means), "trivial")
                }
                _ => (Estimator::Oracle, "oracle"),
            };
            let mut episodes = Vec::new();
            for &seed in &cfg.simulate.seeds {
                let ep = run_episode(&est, &ep_cfg, seed)?;
                let mut csv = Vec::new();
                write_trace_csv(&mut csv, &ep.trace)?;
                o.put(&format!("trace_seed{seed}.csv"), &csv)?;
                episodes.push(EpisodeSummary {
                    seed,
                    metrics: ep.metrics,
                    lost_at: ep.lost_at,
                    aborted: ep.aborted,
                });
            }
            let n = episodes.len() as f64;
            let summary = SimSummary {
                estimator: name.into(),
                estimate_hz: ep_cfg.estimate_hz,
                mean_e_xy: episodes.iter().map(|e| e.metrics.e_xy).sum::<f64>() / n,
                min_completion: episodes.iter().map(|e| e.metrics.completion).fold(f64::INFINITY, f64::min),
                episodes,
            };
            o.put("sim.json", &envelope("sim", &summary)?)?;
        }
        Job::Report { run } => {
            if *run == out_abs {
                return Err(Error::InvalidArgument("report output must differ from the run directory".into()));
            }
            let (report, read) = build_report(run)?;
            for p in &read {
                input(p)?;
            }
            o.put("report.json", &envelope("report", &report)?)?;
            o.put("report.txt", report.text.as_bytes())?;
        }
    }

    let manifest = RunManifest {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seeds: Seeds {
            data: cfg.data.seed,
            train: cfg.train.seed,
            quant: cfg.quant.train.seed,
            simulate: cfg.simulate.seeds.clone(),
        },
        job,
        config: cfg.clone(),
        inputs,
        artifacts: o.files,
        started_unix,
        finished_unix: now(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&out.join(MANIFEST_FILE), &bytes)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub manifest: RunManifest,
    /// Artifacts whose hash differs or that only one run produced.
    pub mismatched: Vec<String>,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-runs a manifest single-threaded into `out` and compares artifact hashes.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayOutcome> {
    let old = RunManifest::load(manifest_path)?;
    for i in &old.inputs {
        let now = sha256_file(Path::new(&i.path)).map_err(|e| Error::Format(format!("input {}: {e}", i.path)))?;
        if now != i.sha256 {
            return Err(Error::Format(format!("input {} changed since the run", i.path)));
        }
    }
    if let Some(dir) = manifest_path.parent() {
        if out.exists() && fs::canonicalize(out)? == fs::canonicalize(dir.join("."))? {
            return Err(Error::InvalidArgument("replay output must differ from the original run".into()));
        }
    }
    let mut cfg = old.config.clone();
    cfg.search.threads = 1;
    let new = execute(&old.job, &cfg, out)?;
    let mut mismatched: Vec<String> = old
        .artifacts
        .iter()
        .filter(|a| new.artifact(&a.path) != Some(a))
        .map(|a| a.path.clone())
        .collect();
    mismatched.extend(
        new.artifacts
            .iter()
            .filter(|a| old.artifact(&a.path).is_none())
            .map(|a| a.path.clone()),
    );
    Ok(ReplayOutcome {
        manifest: new,
        mismatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_checks_version_and_kind() {
        let b = envelope("plan", &[1, 2, 3]).unwrap();
        assert_eq!(read_envelope::<Vec<i32>>(&b, "plan").unwrap(), vec![1, 2, 3]);
        assert!(matches!(read_envelope::<Vec<i32>>(&b, "sim"), Err(Error::Format(_))));
        let bumped = String::from_utf8(b).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(
            read_envelope::<Vec<i32>>(bumped.as_bytes(), "plan"),
            Err(Error::SchemaVersion { found: 9, .. })
        ));
    }

    #[test]
    fn job_tags_round_trip() {
        let jobs = [
            Job::Search { lambda: 1e-6 },
            Job::Simulate {
                estimator: EstimatorChoice::Model { path: "m.qgraph".into() },
            },
            Job::Sweep,
        ];
        for j in jobs {
            let s = serde_json::to_string(&j).unwrap();
            assert_eq!(serde_json::from_str::<Job>(&s).unwrap(), j);
        }
    }
}
