use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    estimate_cycles, estimate_memory, estimate_power_fps, fit_check, plan_tiling, validate_plan, CycleEstimate,
    CycleModel, DeployNet, FitVerdict, MemoryEstimate, MemoryHierarchy, OperatingPoint, TilingPlan,
};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpPointReport {
    pub point: OperatingPoint,
    pub fps: f64,
    pub power_mw: f64,
    pub energy_mj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployReport {
    pub name: String,
    pub macs: u64,
    pub memory: MemoryEstimate,
    pub verdict: FitVerdict,
    /// Absent for undeployable networks.
    pub plan: Option<TilingPlan>,
    pub cycles: Option<CycleEstimate>,
    pub op_points: Vec<OpPointReport>,
}

pub fn deploy_report(
    net: &DeployNet,
    mem: &MemoryHierarchy,
    model: &CycleModel,
    points: &[OperatingPoint],
) -> Result<DeployReport> {
    model.validate()?;
    let verdict = fit_check(net, mem);
    let (mut plan, mut cycles, mut op_points) = (None, None, Vec::new());
    if verdict.deployable() {
        let p = plan_tiling(net, mem)?;
        validate_plan(&p)?;
        let c = estimate_cycles(&p, model);
        for op in points {
            let pf = estimate_power_fps(c.frame, op)?;
            op_points.push(OpPointReport {
                point: op.clone(),
                fps: pf.fps,
                power_mw: pf.power_mw,
                energy_mj: pf.energy_mj,
            });
        }
        plan = Some(p);
        cycles = Some(c);
    }
    Ok(DeployReport {
        name: net.name.clone(),
        macs: net.macs(),
        memory: estimate_memory(net),
        verdict,
        plan,
        cycles,
        op_points,
    })
}

impl DeployReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.memory;
        let _ = writeln!(s, "network {}  ({} MACs)", self.name, self.macs);
        let _ = writeln!(
            s,
            "memory  weights {} B, biases {} B, activations {} B, total {} B ({} B with streamed weights)",
            m.weights, m.biases, m.peak_activations, m.total, m.streamed_l2
        );
        let v = match &self.verdict {
            FitVerdict::FitsL2 { bytes, l2_bytes } => format!("fits L2 ({bytes} / {l2_bytes} B)"),
            FitVerdict::NeedsDramStreaming { l2_bytes, binding, .. } => {
                format!("needs DRAM streaming: {binding} > {l2_bytes} B")
            }
            FitVerdict::Undeployable { binding, reason } => format!("undeployable: {binding}: {reason}"),
        };
        let _ = writeln!(s, "verdict {v}");
        if let (Some(plan), Some(c)) = (&self.plan, &self.cycles) {
            let _ = writeln!(
                s,
                "\n{:<16} {:>12} {:>6} {:>8} {:>6} {:>12} {:>12}",
                "layer", "tile c*r*w", "tiles", "L1 B", "MAC/c", "compute", "cycles"
            );
            for (lp, lc) in plan.layers.iter().zip(&c.layers) {
                let t = lp.tile;
                let _ = writeln!(
                    s,
                    "{:<16} {:>12} {:>6} {:>8} {:>6.2} {:>12.0} {:>12.0}",
                    lp.layer.name,
                    format!("{}x{}x{}", t.channels, t.rows, t.cols),
                    lp.n_tiles,
                    lp.l1_bytes,
                    lc.efficiency,
                    lc.compute,
                    lc.cycles
                );
            }
            let _ = writeln!(s, "\ncycles {} (frame {})", c.total, c.frame);
            for o in &self.op_points {
                let _ = writeln!(
                    s,
                    "{:<18} FC {:>5} MHz CL {:>5} MHz {:.2} V  {:7.2} mW  {:7.2} fps  {:.3} mJ/frame",
                    o.point.name, o.point.fc_mhz, o.point.cl_mhz, o.point.vdd, o.power_mw, o.fps, o.energy_mj
                );
            }
        }
        s
    }
}
