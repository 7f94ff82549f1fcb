use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchSpec, Dataset, LayerKind, OUTPUTS};
use crate::error::{Error, Result};
use crate::metrics::{regression_metrics, RegressionMetrics};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamId, ParamStore, Sgd, Tensor, Var};

/// Parameter handles of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    None,
    Weight { w: ParamId, b: Option<ParamId> },
    Affine { scale: ParamId, bias: ParamId },
}

/// An [`ArchSpec`] with instantiated parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub arch: ArchSpec,
    pub params: ParamStore<f32>,
    slots: Vec<Slot>,
}

impl Network {
    /// He-normal convolutions, unit affine scale, classifier bias at
    /// `output_bias` (typically the training label means).
    pub fn init(arch: &ArchSpec, seed: u64, output_bias: Option<[f64; OUTPUTS]>) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, l) in arch.layers.iter().enumerate() {
            let kv = l.kernel[0] * l.kernel[1];
            match l.kind {
                LayerKind::Conv | LayerKind::Pointwise | LayerKind::Depthwise | LayerKind::Fc => {
                    let shape = l.weight_shape().expect("weighted layer");
                    let (fan_in, gain) = match l.kind {
                        LayerKind::Depthwise => (kv, 2.0),
                        LayerKind::Fc => (l.c_in, 1.0),
                        _ => (kv * l.c_in, 2.0),
                    };
                    let std = (gain / fan_in as f64).sqrt();
                    params.add(format!("{i}.weight"), Tensor::randn(shape, std, &mut rng))?;
                    if l.bias {
                        let b = match (l.kind, output_bias) {
                            (LayerKind::Fc, Some(m)) if l.c_out == OUTPUTS => {
                                Tensor::from_f64(vec![OUTPUTS], &m)?
                            }
                            _ => Tensor::zeros(vec![l.c_out]),
                        };
                        params.add(format!("{i}.bias"), b)?;
                    }
                }
                LayerKind::Affine => {
                    params.add(format!("{i}.scale"), Tensor::full(vec![l.c_out], 1.0))?;
                    params.add(format!("{i}.bias"), Tensor::zeros(vec![l.c_out]))?;
                }
                _ => {}
            }
        }
        Self::from_params(arch.clone(), params)
    }

    /// Binds an existing parameter store, checking names and shapes.
    pub fn from_params(arch: ArchSpec, params: ParamStore<f32>) -> Result<Self> {
        arch.validate()?;
        let lookup = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let mut slots = Vec::with_capacity(arch.layers.len());
        let mut expected = 0;
        for (i, l) in arch.layers.iter().enumerate() {
            let slot = match l.kind {
                LayerKind::Affine => Slot::Affine {
                    scale: lookup(format!("{i}.scale"), &[l.c_out])?,
                    bias: lookup(format!("{i}.bias"), &[l.c_out])?,
                },
                _ => match l.weight_shape() {
                    Some(ws) => Slot::Weight {
                        w: lookup(format!("{i}.weight"), &ws)?,
                        b: if l.bias {
                            Some(lookup(format!("{i}.bias"), &[l.c_out])?)
                        } else {
                            None
                        },
                    },
                    None => Slot::None,
                },
            };
            expected += l.param_shapes().len();
            slots.push(slot);
        }
        if expected != params.len() {
            return Err(Error::Format(format!(
                "parameter store has {} tensors, architecture needs {expected}",
                params.len()
            )));
        }
        Ok(Self { arch, params, slots })
    }

    pub fn slot(&self, layer: usize) -> Slot {
        self.slots[layer]
    }

    pub fn graph(&self) -> Graph<'_, f32> {
        Graph::with_params(&self.params)
    }

    /// Records the forward pass of `x` (`[N,C,H,W]`) on `g`, which must be
    /// bound to `self.params`.
    ///
    /// `masks[i]`, when present, is a `{0,1}` vector over the output channels
    /// of layer `i`. Convolution filters and biases, depthwise kernels and
    /// affine scale/shift are multiplied by it, so a dead channel produces an
    /// exact zero.
    pub fn forward(&self, g: &mut Graph<'_, f32>, x: Var, masks: Option<&[Option<Var>]>) -> Result<Var> {
        if let Some(m) = masks {
            if m.len() != self.arch.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} masks for {} layers",
                    m.len(),
                    self.arch.layers.len()
                )));
            }
        }
        let mut h = x;
        for (i, (l, slot)) in self.arch.layers.iter().zip(&self.slots).enumerate() {
            let mask = masks.and_then(|m| m[i]);
            h = match (l.kind, *slot) {
                (LayerKind::Conv | LayerKind::Pointwise | LayerKind::Depthwise, Slot::Weight { w, b }) => {
                    let mut w = g.param(w)?;
                    if let Some(m) = mask {
                        w = g.mul_outer(w, m)?;
                    }
                    let mut y = if l.kind == LayerKind::Depthwise {
                        g.depthwise_conv2d(h, w, l.stride, l.padding)?
                    } else {
                        g.conv2d(h, w, l.stride, l.padding)?
                    };
                    if let Some(b) = b {
                        let mut b = g.param(b)?;
                        if let Some(m) = mask {
                            b = g.mul(b, m)?;
                        }
                        y = g.channel_bias(y, b)?;
                    }
                    y
                }
                (LayerKind::Affine, Slot::Affine { scale, bias }) => {
                    let (mut s, mut b) = (g.param(scale)?, g.param(bias)?);
                    if let Some(m) = mask {
                        s = g.mul(s, m)?;
                        b = g.mul(b, m)?;
                    }
                    g.affine_channel(h, s, b)?
                }
                (LayerKind::Relu, _) => g.relu(h)?,
                (LayerKind::Pool, _) => g.max_pool(h, l.kernel[0], l.stride[0])?,
                (LayerKind::GlobalPool, _) => g.global_avg_pool(h)?,
                (LayerKind::Fc, Slot::Weight { w, b }) => {
                    let flat = g.flatten(h)?;
                    let w = g.param(w)?;
                    let b = b.map(|b| g.param(b)).transpose()?;
                    g.fully_connected(flat, w, b)?
                }
                (kind, slot) => {
                    return Err(Error::InvalidArch(format!("layer {i}: {kind:?} bound to {slot:?}")));
                }
            };
        }
        Ok(h)
    }

    /// Forward pass without recording gradients of interest.
    pub fn infer(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = self.graph();
        let xv = g.input(x);
        let y = self.forward(&mut g, xv, None)?;
        Ok(g.value(y).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "arch": self.arch });
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let arch: ArchSpec = serde_json::from_value(
            ck.meta
                .get("arch")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint carries no architecture".into()))?,
        )?;
        Self::from_params(arch, ck.params)
    }
}

/// Batch-mean of the per-sample L1 loss summed over the four outputs.
pub(crate) fn pose_loss(g: &mut Graph<'_, f32>, pred: Var, target: Var, batch: usize) -> Result<Var> {
    let l = g.l1_loss(pred, target)?;
    g.scale(l, 1.0 / batch as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "need finite lr >= 0, batch size > 0 and momentum in [0, 1) (lr={}, batch={}, momentum={})",
                self.lr, self.batch_size, self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-sample loss of every epoch.
    pub epoch_loss: Vec<f64>,
}

/// Shuffled mini-batches of one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// One SGD step on `x`/`y`; returns the batch loss. `masks` are fixed
/// `{0,1}` channel masks (see [`Network::forward`]).
pub fn train_step(
    net: &mut Network,
    opt: &mut Sgd<f32>,
    x: Tensor<f32>,
    y: Tensor<f32>,
    masks: Option<&[Option<Tensor<f32>>]>,
) -> Result<f32> {
    let n = x.shape()[0];
    let (loss, grads) = {
        let mut g = net.graph();
        let mvars: Option<Vec<Option<Var>>> =
            masks.map(|ms| ms.iter().map(|m| m.clone().map(|t| g.input(t))).collect());
        let xv = g.input(x);
        let yv = g.input(y);
        let pred = net.forward(&mut g, xv, mvars.as_deref())?;
        let loss = pose_loss(&mut g, pred, yv, n)?;
        (g.value(loss).item()?, g.backward(loss)?)
    };
    net.params.zero_grad();
    net.params.accumulate(&grads)?;
    opt.step(&mut net.params)?;
    Ok(loss)
}

pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let (x, y) = data.batch(&idx)?;
            let loss = train_step(net, &mut opt, x, y, None)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss became {loss} in epoch {epoch}")));
            }
            total += f64::from(loss) * idx.len() as f64;
        }
        log.epoch_loss.push(total / data.len() as f64);
    }
    Ok(log)
}

/// Predictions for every sample, in dataset order.
pub fn predict(net: &Network, data: &Dataset) -> Result<Vec<[f64; OUTPUTS]>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, _) = data.batch(chunk)?;
        let y = net.infer(x)?;
        for row in y.data().chunks(OUTPUTS) {
            let mut r = [0.0; OUTPUTS];
            r.iter_mut().zip(row).for_each(|(a, &b)| *a = f64::from(b));
            out.push(r);
        }
    }
    Ok(out)
}

pub fn evaluate(net: &Network, data: &Dataset) -> Result<RegressionMetrics> {
    let pred = predict(net, data)?;
    let truth: Vec<[f64; OUTPUTS]> = (0..data.len()).map(|i| data.label(i).map(f64::from)).collect();
    regression_metrics(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_frontnet, build_mobilenet, FrontnetConfig, MobileNetConfig};

    #[test]
    fn forward_gives_four_outputs_at_several_resolutions() {
        for hw in [[48, 80], [64, 96], [96, 160]] {
            let f = build_frontnet(&FrontnetConfig {
                input_hw: hw,
                widths: vec![4, 4, 4, 8, 8, 8, 8],
            })
            .unwrap();
            let m = build_mobilenet(
                0.25,
                &MobileNetConfig {
                    input_hw: hw,
                    widths: Some(vec![4; 14]),
                    calibrated_head: false,
                },
            )
            .unwrap();
            for arch in [f, m] {
                let net = Network::init(&arch, 1, None).unwrap();
                let y = net.infer(Tensor::full(vec![2, 1, hw[0], hw[1]], 0.5)).unwrap();
                assert_eq!(y.shape(), &[2, OUTPUTS]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let arch = build_frontnet(&FrontnetConfig {
            input_hw: [48, 80],
            widths: vec![4, 4, 4, 8, 8, 8, 8],
        })
        .unwrap();
        let net = Network::init(&arch, 3, Some([2.0, 0.0, 0.0, 0.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.ckpt");
        net.save(&p).unwrap();
        let back = Network::load(&p).unwrap();
        let x = Tensor::full(vec![1, 1, 48, 80], 0.25);
        assert_eq!(net.infer(x.clone()).unwrap(), back.infer(x).unwrap());
    }
}
