//! Declarative CNN descriptions, the two seed families, exact parameter/MAC
//! accounting and the synthetic pose dataset.

mod builders;
mod dataset;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::out_extent;

pub use builders::{
    build_frontnet, build_mobilenet, mobilenet_widths, reference_networks, FrontnetConfig, MobileNetConfig, ReferenceNet,
    DESK_HW, FULL_HW,
};
pub use dataset::{generate_dataset, render, silhouette_area, Camera, Dataset, LabelRanges, SyntheticSample};
pub use network::{evaluate, predict, train, train_step, Network, Slot, TrainConfig, TrainLog};
pub(crate) use network::{epoch_batches, pose_loss};

/// Number of regression outputs: x, y, z, phi.
pub const OUTPUTS: usize = 4;
pub const OUTPUT_NAMES: [&str; OUTPUTS] = ["x", "y", "z", "phi"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Pointwise,
    /// Max pooling with `kernel`/`stride`.
    Pool,
    /// Global average pooling over the spatial axes.
    GlobalPool,
    Fc,
    Affine,
    Relu,
}

impl LayerKind {
    /// Convolution-like layers whose output channels carry a search mask.
    pub fn is_conv_like(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Depthwise | LayerKind::Pointwise)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    #[serde(default = "one_by_one")]
    pub kernel: [usize; 2],
    #[serde(default = "one_by_one")]
    pub stride: [usize; 2],
    #[serde(default)]
    pub padding: [usize; 2],
    #[serde(default)]
    pub bias: bool,
}

fn one_by_one() -> [usize; 2] {
    [1, 1]
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            c_in,
            c_out,
            kernel: [k, k],
            stride: [stride, stride],
            padding: [pad, pad],
            bias: false,
        }
    }

    pub fn depthwise(c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Depthwise,
            ..Self::conv(c, c, k, stride, pad)
        }
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Self {
            kind: LayerKind::Pointwise,
            ..Self::conv(c_in, c_out, 1, 1, 0)
        }
    }

    pub fn affine(c: usize) -> Self {
        Self::simple(LayerKind::Affine, c)
    }

    pub fn relu(c: usize) -> Self {
        Self::simple(LayerKind::Relu, c)
    }

    pub fn max_pool(c: usize, k: usize, stride: usize) -> Self {
        Self {
            kernel: [k, k],
            stride: [stride, stride],
            ..Self::simple(LayerKind::Pool, c)
        }
    }

    pub fn global_pool(c: usize) -> Self {
        Self::simple(LayerKind::GlobalPool, c)
    }

    /// `c_in` is the flattened feature count.
    pub fn fc(c_in: usize, c_out: usize) -> Self {
        Self {
            bias: true,
            ..Self::simple(LayerKind::Fc, c_in)
        }
        .with_out(c_out)
    }

    fn simple(kind: LayerKind, c: usize) -> Self {
        Self {
            kind,
            c_in: c,
            c_out: c,
            kernel: [1, 1],
            stride: [1, 1],
            padding: [0, 0],
            bias: false,
        }
    }

    fn with_out(mut self, c_out: usize) -> Self {
        self.c_out = c_out;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    /// Weight tensor shape, if the layer has one.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        let [kh, kw] = self.kernel;
        match self.kind {
            LayerKind::Conv | LayerKind::Pointwise => Some(vec![self.c_out, self.c_in, kh, kw]),
            LayerKind::Depthwise => Some(vec![self.c_out, 1, kh, kw]),
            LayerKind::Fc => Some(vec![self.c_out, self.c_in]),
            _ => None,
        }
    }

    /// Shapes of every trainable tensor of the layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut v: Vec<Vec<usize>> = self.weight_shape().into_iter().collect();
        match self.kind {
            LayerKind::Affine => {
                v.push(vec![self.c_out]);
                v.push(vec![self.c_out]);
            }
            _ if self.bias && v.len() == 1 => v.push(vec![self.c_out]),
            _ => {}
        }
        v
    }

    pub fn param_count(&self) -> usize {
        let [kh, kw] = self.kernel;
        let kv = kh * kw;
        let bias = if self.bias { self.c_out } else { 0 };
        match self.kind {
            LayerKind::Conv | LayerKind::Pointwise => kv * self.c_in * self.c_out + bias,
            LayerKind::Depthwise => kv * self.c_out + bias,
            LayerKind::Fc => self.c_in * self.c_out + bias,
            LayerKind::Affine => 2 * self.c_out,
            _ => 0,
        }
    }

    /// Output `(C, H, W)` for an input of `(C, H, W)`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        let bad = |detail: String| Err(Error::InvalidArch(detail));
        let expect_c = match self.kind {
            LayerKind::Fc => c * h * w,
            _ => c,
        };
        if self.c_in != expect_c {
            return bad(format!(
                "{:?} layer expects {} input channels/features, producer gives {expect_c}",
                self.kind, self.c_in
            ));
        }
        match self.kind {
            LayerKind::Conv | LayerKind::Depthwise | LayerKind::Pointwise | LayerKind::Pool => {
                if self.kind == LayerKind::Depthwise && self.c_out != self.c_in {
                    return bad(format!("depthwise layer maps {} -> {} channels", self.c_in, self.c_out));
                }
                if self.kind == LayerKind::Pool && self.c_out != self.c_in {
                    return bad("pooling cannot change channel count".into());
                }
                if self.kind == LayerKind::Pointwise && self.kernel != [1, 1] {
                    return bad("pointwise layer needs a 1x1 kernel".into());
                }
                if self.stride.contains(&0) || self.kernel.contains(&0) {
                    return bad(format!("{:?} layer with zero kernel or stride", self.kind));
                }
                let ho = out_extent(h, self.kernel[0], self.stride[0], self.padding[0]);
                let wo = out_extent(w, self.kernel[1], self.stride[1], self.padding[1]);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => Ok([self.c_out, ho, wo]),
                    _ => bad(format!("{:?} kernel {:?} does not fit a {h}x{w} map", self.kind, self.kernel)),
                }
            }
            LayerKind::GlobalPool => {
                if self.c_out != c {
                    return bad("pooling cannot change channel count".into());
                }
                Ok([c, 1, 1])
            }
            LayerKind::Fc => Ok([self.c_out, 1, 1]),
            LayerKind::Affine | LayerKind::Relu => {
                if self.c_out != c {
                    return bad(format!("{:?} layer cannot change channel count", self.kind));
                }
                Ok(input)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Frontnet,
    Mobilenet,
    Custom,
}

/// A sequential CNN: `input -> layers[0] -> ... -> layers[n-1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub family: Family,
    /// `(C, H, W)`.
    pub input: [usize; 3],
    pub output_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_multiplier: Option<f64>,
    pub layers: Vec<LayerSpec>,
}

pub const ARCH_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArchFile {
    schema_version: u32,
    #[serde(flatten)]
    arch: ArchSpec,
}

impl ArchSpec {
    /// Checks channel continuity, output dimension and shape arithmetic.
    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Activation shape after every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArch("no layers".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::InvalidArch(format!("empty input shape {:?}", self.input)));
        }
        if self.output_dim != OUTPUTS {
            return Err(Error::InvalidArch(format!(
                "output dimension must be {OUTPUTS}, got {}",
                self.output_dim
            )));
        }
        if let Some(m) = self.width_multiplier {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::InvalidArch(format!("width multiplier {m} must be positive")));
            }
        }
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.c_in == 0 || l.c_out == 0 {
                return Err(Error::InvalidArch(format!("layer {i} has an empty channel dimension")));
            }
            cur = l
                .output_shape(cur)
                .map_err(|e| Error::InvalidArch(format!("layer {i}: {e}")))?;
            out.push(cur);
        }
        if cur != [self.output_dim, 1, 1] || self.layers.last().map(|l| l.kind) != Some(LayerKind::Fc) {
            return Err(Error::InvalidArch(format!(
                "network must end in a fully connected layer with {} outputs",
                self.output_dim
            )));
        }
        Ok(out)
    }

    /// Input shape of every layer.
    pub fn input_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let outs = self.shapes()?;
        let mut ins = vec![self.input];
        ins.extend_from_slice(&outs[..outs.len() - 1]);
        Ok(ins)
    }

    /// Same network at a different input resolution; the classifier input is
    /// re-derived from the new feature map.
    pub fn with_input_hw(&self, h: usize, w: usize) -> Result<ArchSpec> {
        let mut a = self.clone();
        a.input[1] = h;
        a.input[2] = w;
        let mut cur = a.input;
        for l in &mut a.layers {
            if l.kind == LayerKind::Fc {
                l.c_in = cur.iter().product();
            }
            cur = l.output_shape(cur)?;
        }
        a.validate()?;
        Ok(a)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ArchFile {
            schema_version: ARCH_SCHEMA_VERSION,
            arch: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<ArchSpec> {
        let f: ArchFile = serde_json::from_str(s)?;
        if f.schema_version != ARCH_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: f.schema_version,
                expected: ARCH_SCHEMA_VERSION,
            });
        }
        f.arch.validate()?;
        Ok(f.arch)
    }

    /// Indices of the convolution-like layers.
    pub fn conv_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_conv_like())
            .map(|(i, _)| i)
    }
}

/// Exact number of trainable scalars (weights, biases, affine scale/shift).
pub fn count_params(arch: &ArchSpec) -> usize {
    arch.layers.iter().map(LayerSpec::param_count).sum()
}

/// Multiply-accumulates of one forward pass at `input` resolution.
/// Convolutions count `output elements * kernel volume * c_in` (depthwise:
/// kernel volume only), fully connected layers `c_in * c_out`. Pooling,
/// affine and activations are free.
pub fn count_macs(arch: &ArchSpec, input: [usize; 3]) -> Result<u64> {
    let arch = if input == arch.input {
        arch.clone()
    } else {
        if input[0] != arch.input[0] {
            return Err(Error::InvalidArch(format!(
                "network expects {} input channels, got {}",
                arch.input[0], input[0]
            )));
        }
        arch.with_input_hw(input[1], input[2])?
    };
    let outs = arch.shapes()?;
    Ok(arch
        .layers
        .iter()
        .zip(&outs)
        .map(|(l, o)| layer_macs(l, *o))
        .sum())
}

pub(crate) fn layer_macs(l: &LayerSpec, out: [usize; 3]) -> u64 {
    let elems = (out[0] * out[1] * out[2]) as u64;
    let kv = (l.kernel[0] * l.kernel[1]) as u64;
    match l.kind {
        LayerKind::Conv | LayerKind::Pointwise => elems * kv * l.c_in as u64,
        LayerKind::Depthwise => elems * kv,
        LayerKind::Fc => (l.c_in * l.c_out) as u64,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(layer: LayerSpec, input: [usize; 3]) -> ArchSpec {
        let out = layer.output_shape(input).unwrap();
        let feat = out.iter().product();
        ArchSpec {
            name: "t".into(),
            family: Family::Custom,
            input,
            output_dim: 4,
            width_multiplier: None,
            layers: vec![layer, LayerSpec::fc(feat, 4)],
        }
    }

    #[test]
    fn conv_with_bias_param_count() {
        assert_eq!(LayerSpec::conv(3, 8, 3, 1, 1).with_bias(true).param_count(), 224);
    }

    #[test]
    fn pointwise_macs() {
        let a = single(LayerSpec::pointwise(4, 2), [4, 8, 8]);
        let fc = 2 * 8 * 8 * 4;
        assert_eq!(count_macs(&a, [4, 8, 8]).unwrap(), 512 + fc as u64);
    }

    #[test]
    fn rejects_broken_chains() {
        let mut a = single(LayerSpec::conv(1, 8, 3, 1, 1), [1, 6, 6]);
        a.layers.insert(1, LayerSpec::affine(7));
        assert!(matches!(a.validate(), Err(Error::InvalidArch(_))));
        let mut a = single(LayerSpec::conv(1, 8, 3, 1, 1), [1, 6, 6]);
        a.output_dim = 3;
        assert!(a.validate().is_err());
        let mut dw = LayerSpec::depthwise(4, 3, 1, 1);
        dw.c_out = 5;
        assert!(dw.output_shape([4, 5, 5]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let a = single(LayerSpec::conv(1, 8, 3, 2, 1), [1, 9, 7]);
        let s = a.to_json().unwrap();
        assert!(s.contains("\"schema_version\": 1"));
        assert_eq!(ArchSpec::from_json(&s).unwrap(), a);
        let bumped = s.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(ArchSpec::from_json(&bumped), Err(Error::SchemaVersion { .. })));
    }
}
