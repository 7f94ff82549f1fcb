//! Consolidated tables over the artifacts of one run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::jobs::{read_envelope, RunManifest, SimSummary, TrainSummary, MANIFEST_FILE};
use crate::deploy::{DeployReport, FitVerdict};
use crate::error::{Error, Result};
use crate::nas::{pareto_front, CostAxis, ParetoPoint, SweepRecord, SweepSummary, SWEEP_SCHEMA_VERSION};
use crate::quant::QuantReport;
use crate::zoo::OUTPUTS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub lambda: f64,
    pub params: usize,
    pub macs: u64,
    pub cycles: Option<u64>,
    pub mae: [f64; OUTPUTS],
    pub mae_total: f64,
    pub on_params_front: bool,
    pub on_cycles_front: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub seed_params: usize,
    pub failed: Vec<(f64, String)>,
    /// Every successful point, by increasing lambda.
    pub rows: Vec<FrontRow>,
    /// Lambdas on each front, by increasing cost.
    pub params_front: Vec<f64>,
    pub cycles_front: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: Option<String>,
    pub sweep: Option<SweepTable>,
    pub train: Option<TrainSummary>,
    pub search: Option<SweepRecord>,
    pub quant: Option<QuantReport>,
    pub plan: Option<DeployReport>,
    pub sim: Option<SimSummary>,
    pub text: String,
}

pub fn sweep_table(s: &SweepSummary) -> SweepTable {
    let pts: Vec<ParetoPoint> = s.points();
    let pf = pareto_front(&pts, CostAxis::Params);
    let cf = pareto_front(&pts, CostAxis::Cycles);
    let mut rows: Vec<FrontRow> = pts
        .iter()
        .map(|p| FrontRow {
            lambda: p.lambda,
            params: p.params,
            macs: p.macs,
            cycles: p.cycles,
            mae: p.mae,
            mae_total: p.mae_total,
            on_params_front: pf.contains(p),
            on_cycles_front: cf.contains(p),
        })
        .collect();
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    SweepTable {
        seed_params: s.seed_params,
        failed: s
            .records
            .iter()
            .filter_map(|r| r.error.clone().map(|e| (r.lambda, e)))
            .collect(),
        rows,
        params_front: pf.iter().map(|p| p.lambda).collect(),
        cycles_front: cf.iter().map(|p| p.lambda).collect(),
    }
}

fn sweep_text(t: &SweepTable, s: &mut String) {
    let _ = writeln!(s, "sweep: {} points, seed {} params", t.rows.len(), t.seed_params);
    let _ = writeln!(
        s,
        "{:>10} {:>9} {:>11} {:>11} {:>8}  front",
        "lambda", "params", "MACs", "cycles", "MAE"
    );
    for r in &t.rows {
        let flag = match (r.on_params_front, r.on_cycles_front) {
            (true, true) => "params,cycles",
            (true, false) => "params",
            (false, true) => "cycles",
            _ => "",
        };
        let cycles = r.cycles.map_or("-".to_string(), |c| c.to_string());
        let _ = writeln!(
            s,
            "{:>10.2e} {:>9} {:>11} {:>11} {:>8.4}  {flag}",
            r.lambda, r.params, r.macs, cycles, r.mae_total
        );
    }
    for (l, e) in &t.failed {
        let _ = writeln!(s, "{l:>10.2e} failed: {e}");
    }
    let list = |v: &[f64]| v.iter().map(|l| format!("{l:.2e}")).collect::<Vec<_>>().join(", ");
    let _ = writeln!(s, "params-vs-MAE front: {}", list(&t.params_front));
    let _ = writeln!(s, "cycles-vs-MAE front: {}", list(&t.cycles_front));
}

fn read_opt<T: serde::de::DeserializeOwned>(
    dir: &Path,
    name: &str,
    kind: &str,
    read: &mut Vec<PathBuf>,
) -> Result<Option<T>> {
    let p = dir.join(name);
    if !p.is_file() {
        return Ok(None);
    }
    let v = read_envelope(&fs::read(&p)?, kind).map_err(|e| match e {
        Error::SchemaVersion { .. } => e,
        e => Error::Format(format!("{}: {e}", p.display())),
    })?;
    read.push(p);
    Ok(Some(v))
}

/// Reads every known artifact in `dir`. Returns the report and the files read.
pub fn build_report(dir: &Path) -> Result<(Report, Vec<PathBuf>)> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a run directory", dir.display())));
    }
    let mut read = Vec::new();
    let mut r = Report::default();
    let mf = dir.join(MANIFEST_FILE);
    if mf.is_file() {
        r.command = Some(RunManifest::load(&mf)?.job.name().to_string());
        read.push(mf);
    }
    let sweep: Option<SweepSummary> = read_opt(dir, "sweep.json", "sweep", &mut read)?;
    if let Some(sw) = &sweep {
        if sw.schema_version != SWEEP_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: sw.schema_version,
                expected: SWEEP_SCHEMA_VERSION,
            });
        }
    }
    r.sweep = sweep.as_ref().map(sweep_table);
    r.train = read_opt(dir, "metrics.json", "train", &mut read)?;
    r.search = read_opt(dir, "search.json", "search", &mut read)?;
    r.quant = read_opt(dir, "quant.json", "quant", &mut read)?;
    r.plan = read_opt(dir, "plan.json", "plan", &mut read)?;
    r.sim = read_opt(dir, "sim.json", "sim", &mut read)?;
    if r.sweep.is_none() && r.train.is_none() && r.search.is_none() && r.quant.is_none() && r.plan.is_none() && r.sim.is_none()
    {
        return Err(Error::Format(format!("no known artifacts in {}", dir.display())));
    }

    let mut s = String::new();
    if let Some(c) = &r.command {
        let _ = writeln!(s, "run: {c}");
    }
    if let Some(t) = &r.sweep {
        sweep_text(t, &mut s);
    }
    if let Some(t) = &r.train {
        let _ = writeln!(
            s,
            "train: {} params, {} MACs, MAE {:.4} (x {:.3}, y {:.3}, z {:.3}, phi {:.3})",
            t.params, t.macs, t.mae_total, t.metrics.mae[0], t.metrics.mae[1], t.metrics.mae[2], t.metrics.mae[3]
        );
    }
    if let Some(rec) = &r.search {
        match &rec.point {
            Some(p) => {
                let _ = writeln!(
                    s,
                    "search: lambda {:.2e} -> {} params, MAE {:.4}",
                    rec.lambda, p.params, p.mae_total
                );
            }
            None => {
                let _ = writeln!(s, "search: lambda {:.2e} failed", rec.lambda);
            }
        }
    }
    if let Some(q) = &r.quant {
        let _ = writeln!(
            s,
            "quant: MAE float {:.4}, fake-quant {:.4} ({:+.1}%), integer {:.4} ({:+.1}%)",
            q.float.mae_total(),
            q.fake_quant.mae_total(),
            q.fake_quant_degradation_pct[OUTPUTS],
            q.integer.mae_total(),
            q.integer_degradation_pct[OUTPUTS]
        );
    }
    if let Some(p) = &r.plan {
        let verdict = match &p.verdict {
            FitVerdict::FitsL2 { .. } => "fits L2".to_string(),
            FitVerdict::NeedsDramStreaming { binding, .. } => format!("needs DRAM streaming ({binding})"),
            FitVerdict::Undeployable { binding, .. } => format!("undeployable ({binding})"),
        };
        let _ = write!(s, "plan: {}, {} MACs, {verdict}", p.name, p.macs);
        if let Some(c) = &p.cycles {
            let _ = write!(s, ", {} cycles", c.total);
        }
        for op in &p.op_points {
            let _ = write!(s, ", {} {:.1} fps", op.point.name, op.fps);
        }
        s.push('\n');
    }
    if let Some(m) = &r.sim {
        let _ = writeln!(
            s,
            "simulate: {} at {:.1} Hz, {} episodes, mean e_xy {:.3} m, min completion {:.1}%",
            m.estimator,
            m.estimate_hz,
            m.episodes.len(),
            m.mean_e_xy,
            m.min_completion
        );
    }
    r.text = s;
    Ok((r, read))
}
