use serde::{Deserialize, Serialize};

use super::{ArchSpec, Family, LayerSpec, OUTPUTS};
use crate::error::{Error, Result};

/// Full camera resolution of the seeds (H, W).
pub const FULL_HW: [usize; 2] = [96, 160];
/// Reduced resolution used for desk-scale training.
pub const DESK_HW: [usize; 2] = [48, 80];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontnetConfig {
    /// (H, W) of the grayscale input.
    pub input_hw: [usize; 2],
    /// Output channels of the 5x5 stem followed by the six 3x3 convolutions.
    pub widths: Vec<usize>,
}

impl Default for FrontnetConfig {
    fn default() -> Self {
        Self {
            input_hw: FULL_HW,
            widths: vec![32, 32, 32, 64, 64, 128, 128],
        }
    }
}

impl FrontnetConfig {
    pub fn desk() -> Self {
        Self {
            input_hw: DESK_HW,
            ..Self::default()
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }
}

/// Stem 5x5/2 conv, 2x2 max pool, then six 3x3 convolutions with strides
/// (2,1,2,1,2,1), each followed by affine + ReLU, and a linear head.
pub fn build_frontnet(cfg: &FrontnetConfig) -> Result<ArchSpec> {
    const STRIDES: [usize; 6] = [2, 1, 2, 1, 2, 1];
    if cfg.widths.len() != 7 {
        return Err(Error::InvalidArch(format!(
            "frontnet needs 7 channel widths, got {}",
            cfg.widths.len()
        )));
    }
    if cfg.widths.contains(&0) {
        return Err(Error::InvalidArch("channel widths must be positive".into()));
    }
    let w = &cfg.widths;
    let mut layers = vec![
        LayerSpec::conv(1, w[0], 5, 2, 2),
        LayerSpec::affine(w[0]),
        LayerSpec::relu(w[0]),
        LayerSpec::max_pool(w[0], 2, 2),
    ];
    for (i, &s) in STRIDES.iter().enumerate() {
        let c = w[i + 1];
        layers.push(LayerSpec::conv(w[i], c, 3, s, 1));
        layers.push(LayerSpec::affine(c));
        layers.push(LayerSpec::relu(c));
    }
    finish(
        format!("frontnet_{}", w.iter().map(usize::to_string).collect::<Vec<_>>().join("-")),
        Family::Frontnet,
        cfg.input_hw,
        None,
        layers,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobileNetConfig {
    pub input_hw: [usize; 2],
    /// Explicit widths (stem + 13 pointwise); overrides the multiplier rule.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    /// Use the calibrated 216-channel head for the 0.25 multiplier.
    #[serde(default = "yes")]
    pub calibrated_head: bool,
}

fn yes() -> bool {
    true
}

impl Default for MobileNetConfig {
    fn default() -> Self {
        Self {
            input_hw: FULL_HW,
            widths: None,
            calibrated_head: true,
        }
    }
}

impl MobileNetConfig {
    pub fn desk() -> Self {
        Self {
            input_hw: DESK_HW,
            ..Self::default()
        }
    }
}

const MOBILENET_STEM: usize = 32;
const MOBILENET_PW: [usize; 13] = [64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512, 1024, 1024];
const MOBILENET_DW_STRIDES: [usize; 13] = [1, 2, 1, 2, 1, 2, 1, 1, 1, 1, 1, 2, 1];

/// Stem and pointwise widths for a multiplier.
pub fn mobilenet_widths(width_multiplier: f64, calibrated_head: bool) -> Vec<usize> {
    let scale = |c: usize| ((c as f64 * width_multiplier).round() as usize).max(1);
    let mut w: Vec<usize> = std::iter::once(MOBILENET_STEM)
        .chain(MOBILENET_PW)
        .map(scale)
        .collect();
    if calibrated_head && width_multiplier == 0.25 {
        *w.last_mut().unwrap() = 216;
    }
    w
}

/// 3x3/2 stem, 13 depthwise-separable blocks (dw 3x3 + pw 1x1, each with
/// affine + ReLU), global average pooling and a linear head.
pub fn build_mobilenet(width_multiplier: f64, cfg: &MobileNetConfig) -> Result<ArchSpec> {
    if !(width_multiplier > 0.0 && width_multiplier.is_finite()) {
        return Err(Error::InvalidArch(format!(
            "width multiplier must be positive, got {width_multiplier}"
        )));
    }
    let w = match &cfg.widths {
        Some(w) => w.clone(),
        None => mobilenet_widths(width_multiplier, cfg.calibrated_head),
    };
    if w.len() != 14 || w.contains(&0) {
        return Err(Error::InvalidArch(format!(
            "mobilenet needs 14 positive widths, got {w:?}"
        )));
    }
    let mut layers = vec![
        LayerSpec::conv(1, w[0], 3, 2, 1),
        LayerSpec::affine(w[0]),
        LayerSpec::relu(w[0]),
    ];
    for (i, &s) in MOBILENET_DW_STRIDES.iter().enumerate() {
        let (c, n) = (w[i], w[i + 1]);
        layers.extend([
            LayerSpec::depthwise(c, 3, s, 1),
            LayerSpec::affine(c),
            LayerSpec::relu(c),
            LayerSpec::pointwise(c, n),
            LayerSpec::affine(n),
            LayerSpec::relu(n),
        ]);
    }
    layers.push(LayerSpec::global_pool(w[13]));
    finish(
        format!("mobilenet_{width_multiplier}"),
        Family::Mobilenet,
        cfg.input_hw,
        Some(width_multiplier),
        layers,
    )
}

/// Reference network of the deployment table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceNet {
    pub name: &'static str,
    pub arch: ArchSpec,
    /// Measured cycles, memory (kB), power (mW) and throughput (fps).
    pub cycles: f64,
    pub memory_kb: f64,
    pub power_mw: f64,
    pub fps: f64,
}

/// Full-resolution seed and searched networks with their measured on-board
/// figures. The searched widths are reconstructed from the published
/// parameter and MAC totals.
pub fn reference_networks() -> Result<Vec<ReferenceNet>> {
    let frontnet = |w: Vec<usize>| build_frontnet(&FrontnetConfig::default().with_widths(w));
    let mobilenet = |alpha: f64, w: Vec<usize>| {
        build_mobilenet(
            alpha,
            &MobileNetConfig {
                widths: Some(w),
                ..MobileNetConfig::default()
            },
        )
    };
    let named = |mut a: ArchSpec, n: &str| {
        a.name = n.into();
        a
    };
    Ok(vec![
        ReferenceNet {
            name: "f_soa",
            arch: named(frontnet(vec![32, 32, 32, 64, 64, 128, 128])?, "f_soa"),
            cycles: 3.2e6,
            memory_kb: 499.0,
            power_mw: 92.2,
            fps: 45.3,
        },
        ReferenceNet {
            name: "f_small",
            arch: named(frontnet(vec![32, 26, 24, 39, 37, 10, 33])?, "f_small"),
            cycles: 1.5e6,
            memory_kb: 231.0,
            power_mw: 81.3,
            fps: 71.6,
        },
        ReferenceNet {
            name: "m025_small",
            arch: named(
                mobilenet(0.25, vec![8, 16, 32, 32, 64, 64, 67, 79, 99, 99, 81, 59, 59, 58])?,
                "m025_small",
            ),
            cycles: 2.2e6,
            memory_kb: 591.0,
            power_mw: 86.9,
            fps: 51.2,
        },
        ReferenceNet {
            name: "m100_small",
            arch: named(
                mobilenet(1.0, vec![27, 34, 70, 15, 158, 20, 92, 11, 11, 260, 12, 12, 467, 29])?,
                "m100_small",
            ),
            cycles: 3.7e6,
            memory_kb: 415.0,
            power_mw: 88.3,
            fps: 32.7,
        },
    ])
}

fn finish(
    name: String,
    family: Family,
    hw: [usize; 2],
    width_multiplier: Option<f64>,
    mut layers: Vec<LayerSpec>,
) -> Result<ArchSpec> {
    let mut cur = [1, hw[0], hw[1]];
    for l in &layers {
        cur = l.output_shape(cur)?;
    }
    layers.push(LayerSpec::fc(cur.iter().product(), OUTPUTS));
    let arch = ArchSpec {
        name,
        family,
        input: [1, hw[0], hw[1]],
        output_dim: OUTPUTS,
        width_multiplier,
        layers,
    };
    arch.validate()?;
    Ok(arch)
}
