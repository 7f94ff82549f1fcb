//! Analytic cycle, throughput and power model.
//!
//! Each tile costs `max(compute, dma) + tile_overhead`: transfers of the next
//! tile overlap computation of the current one. Compute is tile operations
//! over a per-layer efficiency that interpolates between the no-reuse floor
//! and a per-family peak according to how well the tile feeds the kernel's
//! 4-channel x 2-pixel register block. A frame adds a fixed overhead and a
//! per-layer launch cost on top of the tiles.

use serde::{Deserialize, Serialize};

use super::{estimate_memory, plan_tiling, DeployNet, LayerPlan, MemoryHierarchy, TilingPlan};
use crate::error::{Error, Result};
use crate::zoo::{reference_networks, Family, LayerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleModel {
    pub peak_mac_per_cycle: f64,
    pub theoretical_max: f64,
    pub no_reuse_floor: f64,
    /// Efficiency reached by fully fed tiles, per family.
    pub frontnet_efficiency: f64,
    pub mobilenet_efficiency: f64,
    pub dma_bytes_per_cycle: f64,
    pub tile_overhead: f64,
    pub frame_overhead: f64,
    pub layer_overhead: f64,
}

impl Default for CycleModel {
    fn default() -> Self {
        Self {
            peak_mac_per_cycle: 15.6,
            theoretical_max: 32.0,
            no_reuse_floor: 8.0,
            frontnet_efficiency: 8.0,
            mobilenet_efficiency: 10.35,
            dma_bytes_per_cycle: 8.0,
            tile_overhead: 42_000.0,
            frame_overhead: 651_600.0,
            layer_overhead: 21_560.0,
        }
    }
}

impl CycleModel {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.no_reuse_floor, self.peak_mac_per_cycle);
        if !(0.0 < lo && lo <= hi && hi <= self.theoretical_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < floor <= peak <= max, got {lo} / {hi} / {}",
                self.theoretical_max
            )));
        }
        for e in [self.frontnet_efficiency, self.mobilenet_efficiency] {
            if !(lo..=hi).contains(&e) {
                return Err(Error::InvalidArgument(format!("efficiency {e} outside [{lo}, {hi}]")));
            }
        }
        if !(self.dma_bytes_per_cycle > 0.0) {
            return Err(Error::InvalidArgument("DMA bandwidth must be positive".into()));
        }
        if [self.tile_overhead, self.frame_overhead, self.layer_overhead]
            .iter()
            .any(|o| !(o.is_finite() && *o >= 0.0))
        {
            return Err(Error::InvalidArgument("overheads must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn family_efficiency(&self, f: Family) -> f64 {
        match f {
            Family::Frontnet => self.frontnet_efficiency,
            Family::Mobilenet => self.mobilenet_efficiency,
            Family::Custom => 0.5 * (self.frontnet_efficiency + self.mobilenet_efficiency),
        }
    }

    /// Efficiency of a layer under its tiling.
    pub fn layer_efficiency(&self, lp: &LayerPlan, family: Family) -> f64 {
        let floor = self.no_reuse_floor;
        floor + (self.family_efficiency(family) - floor) * reuse(lp)
    }

    /// Fixed cycles of one frame with `layers` kernels.
    pub fn frame_cycles(&self, layers: usize) -> f64 {
        self.frame_overhead + self.layer_overhead * layers as f64
    }
}

/// Fraction of the kernel's 4x2 output block a tile keeps busy. Depthwise,
/// pooling and the classifier get no reuse.
fn reuse(lp: &LayerPlan) -> f64 {
    match lp.layer.kind {
        LayerKind::Conv | LayerKind::Pointwise => {
            let ch = lp.tile.channels.min(4) as f64 / 4.0;
            let px = (lp.tile.rows * lp.tile.cols).min(2) as f64 / 2.0;
            ch * px
        }
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub name: String,
    pub tiles: usize,
    pub efficiency: f64,
    pub compute: f64,
    pub dma: f64,
    pub overhead: f64,
    pub cycles: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleEstimate {
    pub name: String,
    pub layers: Vec<LayerCycles>,
    /// Sum over tiles and layers.
    pub total: u64,
    /// `total` plus the per-frame overheads; what one inference takes.
    pub frame: u64,
}

pub fn estimate_cycles(plan: &TilingPlan, model: &CycleModel) -> CycleEstimate {
    let mut layers = Vec::with_capacity(plan.layers.len());
    let mut sum = 0.0;
    for lp in &plan.layers {
        let eff = model.layer_efficiency(lp, plan.family);
        let (mut compute, mut dma, mut cycles) = (0.0, 0.0, 0.0);
        for t in &lp.tiles {
            let c = t.ops as f64 / eff;
            let d = t.buffers.total() as f64 / model.dma_bytes_per_cycle;
            compute += c;
            dma += d;
            cycles += c.max(d) + model.tile_overhead;
        }
        sum += cycles;
        layers.push(LayerCycles {
            name: lp.layer.name.clone(),
            tiles: lp.tiles.len(),
            efficiency: eff,
            compute,
            dma,
            overhead: model.tile_overhead * lp.tiles.len() as f64,
            cycles,
        });
    }
    CycleEstimate {
        name: plan.name.clone(),
        total: sum.round() as u64,
        frame: (sum + model.frame_cycles(plan.layers.len())).round() as u64,
        layers,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub name: String,
    pub fc_mhz: f64,
    pub cl_mhz: f64,
    pub vdd: f64,
    /// Modeled SoC power while inferring.
    pub power_mw: f64,
}

pub const MAX_PERF: &str = "max_performance";

/// Measured power of the four reference networks at maximum performance.
const MAX_PERF_POWER: [f64; 4] = [92.2, 81.3, 86.9, 88.3];
/// Static share of the SoC power, assumed.
const STATIC_MW: f64 = 5.0;

impl OperatingPoint {
    /// The three profiled operating points. Maximum performance uses the mean
    /// measured power; the slower points scale its dynamic part with
    /// `V^2 * (f_fc + f_cl)`.
    pub fn defaults() -> Vec<OperatingPoint> {
        let max_p = MAX_PERF_POWER.iter().sum::<f64>() / MAX_PERF_POWER.len() as f64;
        let k = (max_p - STATIC_MW) / (1.2f64.powi(2) * (250.0 + 170.0));
        let point = |name: &str, fc: f64, cl: f64, v: f64| OperatingPoint {
            name: name.into(),
            fc_mhz: fc,
            cl_mhz: cl,
            vdd: v,
            power_mw: STATIC_MW + k * v * v * (fc + cl),
        };
        vec![
            point("min_power", 25.0, 25.0, 1.0),
            point("energy_efficient", 25.0, 75.0, 1.0),
            point(MAX_PERF, 250.0, 170.0, 1.2),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cl_mhz > 0.0 && self.fc_mhz > 0.0 && self.vdd > 0.0 && self.power_mw > 0.0) {
            return Err(Error::InvalidArgument(format!("operating point `{}` has non-positive values", self.name)));
        }
        Ok(())
    }
}

pub fn operating_point(name: &str) -> Result<OperatingPoint> {
    OperatingPoint::defaults()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown operating point `{name}`")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFps {
    pub power_mw: f64,
    pub fps: f64,
    /// mJ per inference.
    pub energy_mj: f64,
}

/// `fps = cl_mhz * 1e6 / frame_cycles`.
pub fn estimate_power_fps(frame_cycles: u64, op: &OperatingPoint) -> Result<PowerFps> {
    op.validate()?;
    if frame_cycles == 0 {
        return Err(Error::InvalidArgument("frame takes zero cycles".into()));
    }
    let fps = op.cl_mhz * 1e6 / frame_cycles as f64;
    Ok(PowerFps {
        power_mw: op.power_mw,
        fps,
        energy_mj: op.power_mw / fps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub name: String,
    pub tiles: usize,
    pub cycles: u64,
    pub cycles_ref: f64,
    pub fps: f64,
    pub fps_ref: f64,
    pub memory_bytes: usize,
    pub memory_ref_kb: f64,
    pub power_mw: f64,
    pub power_ref_mw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub model: CycleModel,
    pub rows: Vec<CalibrationRow>,
}

struct Fixture {
    family: Family,
    /// Per layer: reuse and per-tile (ops, bytes).
    layers: Vec<(f64, Vec<(f64, f64)>)>,
    n_layers: usize,
    cycles_ref: f64,
    fps_ref: f64,
}

fn fixture_cycles(f: &Fixture, floor: f64, eff: f64, overhead: f64, bw: f64) -> f64 {
    f.layers
        .iter()
        .map(|(u, tiles)| {
            let e = floor + (eff - floor) * u;
            tiles.iter().map(|&(o, b)| (o / e).max(b / bw) + overhead).sum::<f64>()
        })
        .sum()
}

/// Fits the family efficiencies, the tile overhead and the frame overheads
/// to the reference networks. Efficiencies and tile overhead minimize the
/// squared log error of the cycle counts on a grid; the frame terms are the
/// least-squares solution for the measured frame rates at maximum
/// performance.
pub fn calibrate(mem: &MemoryHierarchy) -> Result<Calibration> {
    let base = CycleModel::default();
    let refs = reference_networks()?;
    let mut fixtures = Vec::with_capacity(refs.len());
    let mut plans = Vec::with_capacity(refs.len());
    for r in &refs {
        let net = DeployNet::from_arch(&r.arch)?;
        let plan = plan_tiling(&net, mem)?;
        fixtures.push(Fixture {
            family: net.family,
            layers: plan
                .layers
                .iter()
                .map(|lp| {
                    let tiles = lp.tiles.iter().map(|t| (t.ops as f64, t.buffers.total() as f64)).collect();
                    (reuse(lp), tiles)
                })
                .collect(),
            n_layers: plan.layers.len(),
            cycles_ref: r.cycles,
            fps_ref: r.fps,
        });
        plans.push((net, plan));
    }
    let (floor, peak, bw) = (base.no_reuse_floor, base.peak_mac_per_cycle, base.dma_bytes_per_cycle);
    let effs: Vec<f64> = (0..)
        .map(|i| floor + 0.05 * i as f64)
        .take_while(|e| *e <= peak + 1e-9)
        .collect();
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for step in 0..=200 {
        let overhead = 500.0 * step as f64;
        let mut err = 0.0;
        let mut fam_eff = [floor; 2];
        for (slot, fam) in [Family::Frontnet, Family::Mobilenet].into_iter().enumerate() {
            let mut fb: Option<(f64, f64)> = None;
            for &e in &effs {
                let s: f64 = fixtures
                    .iter()
                    .filter(|f| f.family == fam)
                    .map(|f| (fixture_cycles(f, floor, e, overhead, bw) / f.cycles_ref).ln().powi(2))
                    .sum();
                if fb.is_none_or(|(b, _)| s < b) {
                    fb = Some((s, e));
                }
            }
            let (s, e) = fb.expect("non-empty grid");
            err += s;
            fam_eff[slot] = e;
        }
        if best.is_none_or(|b| err < b.0) {
            best = Some((err, overhead, fam_eff[0], fam_eff[1]));
        }
    }
    let (_, tile_overhead, fe, me) = best.expect("non-empty grid");
    let mut model = CycleModel {
        frontnet_efficiency: fe,
        mobilenet_efficiency: me,
        tile_overhead,
        ..base
    };
    let op = operating_point(MAX_PERF)?;
    // y = a + b * n_layers, least squares
    let pts: Vec<(f64, f64)> = fixtures
        .iter()
        .map(|f| {
            let eff = model.family_efficiency(f.family);
            let c = fixture_cycles(f, floor, eff, tile_overhead, bw);
            (f.n_layers as f64, op.cl_mhz * 1e6 / f.fps_ref - c)
        })
        .collect();
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / n, sy / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    model.layer_overhead = slope;
    model.frame_overhead = (my - slope * mx).max(0.0);
    model.validate()?;

    let mut rows = Vec::with_capacity(refs.len());
    for (r, (net, plan)) in refs.iter().zip(&plans) {
        let est = estimate_cycles(plan, &model);
        let pf = estimate_power_fps(est.frame, &op)?;
        rows.push(CalibrationRow {
            name: r.name.into(),
            tiles: plan.total_tiles(),
            cycles: est.total,
            cycles_ref: r.cycles,
            fps: pf.fps,
            fps_ref: r.fps,
            memory_bytes: estimate_memory(net).total,
            memory_ref_kb: r.memory_kb,
            power_mw: pf.power_mw,
            power_ref_mw: r.power_mw,
        });
    }
    Ok(Calibration { model, rows })
}
