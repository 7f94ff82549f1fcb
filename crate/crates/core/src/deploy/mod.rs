//! Deployment model of a two-level scratchpad SoC: L1 tiling with double
//! buffered DMA, an analytic cycle model, memory footprint, power and fit
//! verdicts.

mod cost;
mod report;
mod tiling;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{IntegerGraph, QOp};
use crate::zoo::{ArchSpec, Family, LayerKind};

pub use cost::{
    calibrate, estimate_cycles, estimate_power_fps, operating_point, Calibration, CalibrationRow, CycleEstimate,
    CycleModel, LayerCycles, OperatingPoint, PowerFps, MAX_PERF,
};
pub use report::{deploy_report, DeployReport, OpPointReport};
pub use tiling::{
    plan_layer, plan_tiling, tile_buffers, validate_plan, LayerPlan, Step, TileBuffers, TileShape, TilingPlan,
    TiledRegion,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryHierarchy {
    pub l1_bytes: usize,
    pub l2_bytes: usize,
    pub dram_bytes: usize,
    pub dma_channels: usize,
}

impl Default for MemoryHierarchy {
    fn default() -> Self {
        Self {
            l1_bytes: 64 * 1024,
            l2_bytes: 512 * 1024,
            dram_bytes: 8 << 20,
            dma_channels: 2,
        }
    }
}

impl MemoryHierarchy {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1_bytes > 0 && self.l1_bytes < self.l2_bytes && self.l2_bytes < self.dram_bytes) {
            return Err(Error::InvalidArgument(format!(
                "memory levels must satisfy 0 < l1 < l2 < dram, got {} / {} / {}",
                self.l1_bytes, self.l2_bytes, self.dram_bytes
            )));
        }
        if self.dma_channels == 0 {
            return Err(Error::InvalidArgument("need at least one DMA channel".into()));
        }
        Ok(())
    }
}

/// One executed kernel. Affine layers are folded into the convolution before
/// them and activations fused, so only convolutions, pools and the classifier
/// remain. Fully connected layers see their input flattened to `[C, 1, 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployLayer {
    /// Position in the source network.
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub in_hw: [usize; 2],
    pub out_hw: [usize; 2],
}

impl DeployLayer {
    fn new(
        index: usize,
        kind: LayerKind,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        in_hw: [usize; 2],
    ) -> Result<Self> {
        let dim = |n: usize, k: usize, s: usize, p: usize| {
            if n + 2 * p < k || s == 0 {
                None
            } else {
                Some((n + 2 * p - k) / s + 1)
            }
        };
        let (Some(ho), Some(wo)) = (
            dim(in_hw[0], kernel[0], stride[0], padding[0]),
            dim(in_hw[1], kernel[1], stride[1], padding[1]),
        ) else {
            return Err(Error::InvalidArch(format!("layer {index}: kernel does not fit a {in_hw:?} input")));
        };
        let name = format!("{index}:{}", kind_name(kind));
        Ok(Self {
            index,
            name,
            kind,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            in_hw,
            out_hw: [ho, wo],
        })
    }

    /// Output channels are computed independently from their own input
    /// channel.
    pub fn channelwise(&self) -> bool {
        matches!(self.kind, LayerKind::Depthwise | LayerKind::Pool | LayerKind::GlobalPool)
    }

    pub fn has_weights(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv | LayerKind::Pointwise | LayerKind::Depthwise | LayerKind::Fc
        )
    }

    /// Kernel operations per output element (MACs, or compares/adds for
    /// pooling).
    pub fn ops_per_output(&self) -> u64 {
        let kv = (self.kernel[0] * self.kernel[1]) as u64;
        if self.channelwise() {
            kv
        } else {
            kv * self.c_in as u64
        }
    }

    pub fn outputs(&self) -> u64 {
        (self.c_out * self.out_hw[0] * self.out_hw[1]) as u64
    }

    pub fn ops(&self) -> u64 {
        self.ops_per_output() * self.outputs()
    }

    pub fn macs(&self) -> u64 {
        if self.has_weights() {
            self.ops()
        } else {
            0
        }
    }

    pub fn weight_bytes(&self) -> usize {
        let kv = self.kernel[0] * self.kernel[1];
        match self.kind {
            LayerKind::Depthwise => self.c_out * kv,
            LayerKind::Conv | LayerKind::Pointwise | LayerKind::Fc => self.c_out * self.c_in * kv,
            _ => 0,
        }
    }

    /// int32 biases, one per output channel.
    pub fn bias_bytes(&self) -> usize {
        if self.has_weights() {
            4 * self.c_out
        } else {
            0
        }
    }

    pub fn in_bytes(&self) -> usize {
        self.c_in * self.in_hw[0] * self.in_hw[1]
    }

    pub fn out_bytes(&self) -> usize {
        self.c_out * self.out_hw[0] * self.out_hw[1]
    }
}

fn kind_name(k: LayerKind) -> &'static str {
    match k {
        LayerKind::Conv => "conv",
        LayerKind::Depthwise => "depthwise",
        LayerKind::Pointwise => "pointwise",
        LayerKind::Pool => "max_pool",
        LayerKind::GlobalPool => "global_pool",
        LayerKind::Fc => "fc",
        LayerKind::Affine => "affine",
        LayerKind::Relu => "relu",
    }
}

/// Kernel sequence of a network as the deployment tools see it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployNet {
    pub name: String,
    pub family: Family,
    pub input: [usize; 3],
    pub layers: Vec<DeployLayer>,
}

impl DeployNet {
    pub fn from_arch(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let inputs = arch.input_shapes()?;
        let mut layers = Vec::new();
        for (i, (l, inp)) in arch.layers.iter().zip(&inputs).enumerate() {
            let hw = [inp[1], inp[2]];
            let d = match l.kind {
                LayerKind::Affine | LayerKind::Relu => continue,
                LayerKind::GlobalPool => DeployLayer::new(i, l.kind, l.c_in, l.c_out, hw, [1, 1], [0, 0], hw)?,
                LayerKind::Fc => DeployLayer::new(i, l.kind, l.c_in, l.c_out, [1, 1], [1, 1], [0, 0], [1, 1])?,
                _ => DeployLayer::new(i, l.kind, l.c_in, l.c_out, l.kernel, l.stride, l.padding, hw)?,
            };
            layers.push(d);
        }
        Ok(Self {
            name: arch.name.clone(),
            family: arch.family,
            input: arch.input,
            layers,
        })
    }

    /// Family is inferred: depthwise layers mean a MobileNet-style network.
    pub fn from_integer_graph(g: &IntegerGraph) -> Result<Self> {
        let [mut c, mut h, mut w] = g.input;
        let mut layers = Vec::with_capacity(g.layers.len());
        let mut dw = false;
        for (i, l) in g.layers.iter().enumerate() {
            let d = match l.op {
                QOp::Conv {
                    depthwise,
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding,
                } => {
                    dw |= depthwise;
                    let kind = if depthwise {
                        LayerKind::Depthwise
                    } else if kernel == [1, 1] {
                        LayerKind::Pointwise
                    } else {
                        LayerKind::Conv
                    };
                    if c_in != c {
                        return Err(Error::shape("deploy", format!("layer {i}: {c} channels, expected {c_in}")));
                    }
                    DeployLayer::new(i, kind, c_in, c_out, kernel, stride, padding, [h, w])?
                }
                QOp::MaxPool { k, s } => DeployLayer::new(i, LayerKind::Pool, c, c, [k, k], [s, s], [0, 0], [h, w])?,
                QOp::GlobalPool => DeployLayer::new(i, LayerKind::GlobalPool, c, c, [h, w], [1, 1], [0, 0], [h, w])?,
                QOp::Fc { c_in, c_out } => {
                    if c_in != c * h * w {
                        return Err(Error::shape("deploy", format!("layer {i}: {} features, expected {c_in}", c * h * w)));
                    }
                    DeployLayer::new(i, LayerKind::Fc, c_in, c_out, [1, 1], [1, 1], [0, 0], [1, 1])?
                }
            };
            c = d.c_out;
            [h, w] = d.out_hw;
            layers.push(d);
        }
        Ok(Self {
            name: g.name.clone(),
            family: if dw { Family::Mobilenet } else { Family::Frontnet },
            input: g.input,
            layers,
        })
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(DeployLayer::macs).sum()
    }
}

/// L2 footprint. `total` keeps every weight resident next to the largest
/// pair of activation buffers. `streamed_l2` is the alternative where weights
/// live in DRAM and only the largest layer's weights are staged in L2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub weights: usize,
    pub biases: usize,
    pub peak_activations: usize,
    pub total: usize,
    pub streamed_l2: usize,
}

pub fn estimate_memory(net: &DeployNet) -> MemoryEstimate {
    let weights = net.layers.iter().map(DeployLayer::weight_bytes).sum();
    let biases = net.layers.iter().map(DeployLayer::bias_bytes).sum();
    let peak_activations = net.layers.iter().map(|l| l.in_bytes() + l.out_bytes()).max().unwrap_or(0);
    let largest = net
        .layers
        .iter()
        .map(|l| l.weight_bytes() + l.bias_bytes())
        .max()
        .unwrap_or(0);
    MemoryEstimate {
        weights,
        biases,
        peak_activations,
        total: weights + biases + peak_activations,
        streamed_l2: largest + peak_activations,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum FitVerdict {
    FitsL2 { bytes: usize, l2_bytes: usize },
    /// Weights must be streamed from DRAM; `binding` names the constraint.
    NeedsDramStreaming { bytes: usize, l2_bytes: usize, binding: String },
    Undeployable { binding: String, reason: String },
}

impl FitVerdict {
    pub fn fits(&self) -> bool {
        matches!(self, FitVerdict::FitsL2 { .. })
    }

    pub fn deployable(&self) -> bool {
        !matches!(self, FitVerdict::Undeployable { .. })
    }
}

pub fn fit_check(net: &DeployNet, mem: &MemoryHierarchy) -> FitVerdict {
    for l in &net.layers {
        let w = l.weight_bytes();
        if w > mem.l2_bytes {
            return FitVerdict::Undeployable {
                binding: l.name.clone(),
                reason: format!("{w} B of weights exceed the {} B L2", mem.l2_bytes),
            };
        }
        if l.in_bytes() + l.out_bytes() > mem.l2_bytes {
            return FitVerdict::Undeployable {
                binding: l.name.clone(),
                reason: format!(
                    "{} B of activations exceed the {} B L2",
                    l.in_bytes() + l.out_bytes(),
                    mem.l2_bytes
                ),
            };
        }
        if let Err(e) = plan_layer(l, mem) {
            return FitVerdict::Undeployable {
                binding: l.name.clone(),
                reason: e.to_string(),
            };
        }
    }
    let m = estimate_memory(net);
    if m.total <= mem.l2_bytes {
        FitVerdict::FitsL2 {
            bytes: m.total,
            l2_bytes: mem.l2_bytes,
        }
    } else if m.weights + m.biases <= mem.dram_bytes && m.streamed_l2 <= mem.l2_bytes {
        FitVerdict::NeedsDramStreaming {
            bytes: m.total,
            l2_bytes: mem.l2_bytes,
            binding: format!("total footprint {} B", m.total),
        }
    } else {
        FitVerdict::Undeployable {
            binding: "total footprint".into(),
            reason: format!("{} B does not fit L2 even with weights streamed from DRAM", m.total),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_frontnet, build_mobilenet, FrontnetConfig, LayerSpec, MobileNetConfig};

    #[test]
    fn default_hierarchy_is_ordered() {
        MemoryHierarchy::default().validate().unwrap();
        let bad = MemoryHierarchy {
            l1_bytes: 1 << 20,
            ..MemoryHierarchy::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn macs_match_the_zoo_count() {
        let a = build_frontnet(&FrontnetConfig::default()).unwrap();
        let d = DeployNet::from_arch(&a).unwrap();
        assert_eq!(d.macs(), crate::zoo::count_macs(&a, a.input).unwrap());
        assert_eq!(d.layers.len(), 9);
        let m = build_mobilenet(0.25, &MobileNetConfig::default()).unwrap();
        let d = DeployNet::from_arch(&m).unwrap();
        assert_eq!(d.macs(), crate::zoo::count_macs(&m, m.input).unwrap());
        assert_eq!(d.layers.len(), 29);
    }

    #[test]
    fn single_conv_memory() {
        let a = ArchSpec {
            name: "one".into(),
            family: Family::Custom,
            input: [3, 10, 10],
            output_dim: 4,
            width_multiplier: None,
            layers: vec![LayerSpec::conv(3, 8, 3, 1, 1), LayerSpec::fc(800, 4)],
        };
        let m = estimate_memory(&DeployNet::from_arch(&a).unwrap());
        assert_eq!(m.weights, 8 * 27 + 800 * 4);
        assert_eq!(m.biases, 4 * 8 + 4 * 4);
        assert_eq!(m.peak_activations, 300 + 800);
        assert_eq!(m.total, m.weights + m.biases + 1100);
    }
}
