//! 8-bit quantization: float network -> fake-quantized network -> integer
//! graph.
//!
//! Each convolution absorbs the affine layer behind it and ends in a PACT
//! activation on 256 levels. Weights are symmetric per-layer int8, biases
//! int32 on the `eps_in * eps_w` grid. The activation step of a layer is
//! snapped to the value its fixed-point requantizer actually encodes, so the
//! fake-quantized forward and the integer interpreter round the same numbers.

mod format;
mod interp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{regression_metrics, RegressionMetrics};
use crate::tensor::{round_half_up, Element, Graph, ParamId, ParamStore, Sgd, Tensor, Var};
use crate::zoo::{epoch_batches, pose_loss, predict, Dataset, LayerKind, Network, Slot, TrainConfig, OUTPUTS};

pub use format::{load_integer_graph, read_integer_graph, save_integer_graph, write_integer_graph, QGRAPH_VERSION};
pub use interp::{int_forward, IntLayer, IntStats, QOp, Requant};

pub const ACT_LEVELS: u32 = 255;
pub const WEIGHT_MAX: i32 = 127;
pub const OUT_MAX: i32 = 127;
const BIAS_MAX: f64 = i32::MAX as f64;

/// Encodes `ratio` as `mult * 2^-shift` with `mult` in `[2^30, 2^31)`.
pub fn encode_scale(ratio: f64) -> Result<Requant> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::ScaleEncoding { ratio });
    }
    let e = ratio.log2().floor() as i32;
    let mut shift = 30 - e;
    let mut m = (ratio * 2f64.powi(shift)).round();
    if m >= 2f64.powi(31) {
        m /= 2.0;
        shift -= 1;
    }
    if !(0..=62).contains(&shift) {
        return Err(Error::ScaleEncoding { ratio });
    }
    Ok(Requant {
        mult: m as i32,
        shift: shift as u32,
    })
}

pub fn decode_scale(r: Requant) -> f64 {
    r.mult as f64 * 2f64.powi(-(r.shift as i32))
}

/// `clamp(round_half_up(t / eps), lo, hi)` elementwise.
pub fn quantize_values(t: &[f64], eps: f64, lo: f64, hi: f64) -> Vec<i64> {
    t.iter().map(|&v| round_half_up(v / eps).clamp(lo, hi) as i64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub bits: u32,
    pub train: TrainConfig,
    /// Images used to initialize the PACT bounds.
    pub calib_samples: usize,
    /// Quantile of the float activations used as the initial bound.
    pub calib_quantile: f64,
    /// Headroom of the output range over the largest calibration label.
    pub output_margin: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            train: TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
            calib_samples: 256,
            calib_quantile: 0.999,
            output_margin: 1.1,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.bits != 8 {
            return Err(Error::InvalidArgument(format!("only 8-bit quantization is supported, got {}", self.bits)));
        }
        if self.calib_samples == 0 || !(0.0..=1.0).contains(&self.calib_quantile) || !(self.output_margin >= 1.0) {
            return Err(Error::InvalidArgument("bad calibration settings".into()));
        }
        Ok(())
    }
}

/// Quantization steps of one layer boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScale {
    pub eps_in: f64,
    pub eps_w: f64,
    pub eps_out: f64,
    pub requant: Option<Requant>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct QIds {
    w: Option<ParamId>,
    b: Option<ParamId>,
    alpha: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Float,
    Train,
    Eval,
}

/// Folded network with quantization-aware forward passes.
#[derive(Clone, Debug)]
pub struct FakeQuantNet {
    pub name: String,
    pub input: [usize; 3],
    pub ops: Vec<QOp>,
    pub params: ParamStore<f32>,
    pub input_eps: f64,
    /// Requested output step before snapping.
    pub output_eps: f64,
    ids: Vec<QIds>,
}

fn tensor_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

impl FakeQuantNet {
    /// Folds affine layers into the preceding convolutions and calibrates
    /// activation and output ranges on `calib`.
    pub fn from_float(net: &Network, calib: &Dataset, cfg: &QuantConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = &net.arch.layers;
        let mut ops = Vec::new();
        let mut params = ParamStore::new();
        let mut ids = Vec::new();
        let mut i = 0;
        while i < layers.len() {
            let l = &layers[i];
            let j = ops.len();
            match (l.kind, net.slot(i)) {
                (LayerKind::Conv | LayerKind::Pointwise | LayerKind::Depthwise, Slot::Weight { w, b }) => {
                    let mut wt = tensor_f64(net.params.get(w));
                    let mut bias = match b {
                        Some(b) => tensor_f64(net.params.get(b)),
                        None => vec![0.0; l.c_out],
                    };
                    if let Some(next) = layers.get(i + 1).filter(|n| n.kind == LayerKind::Affine) {
                        let _ = next;
                        i += 1;
                        let Slot::Affine { scale, bias: shift } = net.slot(i) else {
                            return Err(Error::InvalidArch(format!("layer {i}: affine without parameters")));
                        };
                        let (s, sh) = (tensor_f64(net.params.get(scale)), tensor_f64(net.params.get(shift)));
                        let per = wt.len() / l.c_out;
                        for o in 0..l.c_out {
                            wt[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= s[o]);
                            bias[o] = bias[o] * s[o] + sh[o];
                        }
                    }
                    if layers.get(i + 1).map(|n| n.kind) != Some(LayerKind::Relu) {
                        return Err(Error::InvalidArch(format!(
                            "layer {i}: integer pipeline needs a ReLU after every convolution"
                        )));
                    }
                    i += 1;
                    let shape = l.weight_shape().expect("weighted layer");
                    let wid = params.add(format!("{j}.weight"), Tensor::from_f64(shape, &wt)?)?;
                    let bid = params.add(format!("{j}.bias"), Tensor::from_f64(vec![l.c_out], &bias)?)?;
                    let aid = params.add(format!("{j}.alpha"), Tensor::scalar(1.0))?;
                    ops.push(QOp::Conv {
                        depthwise: l.kind == LayerKind::Depthwise,
                        c_in: l.c_in,
                        c_out: l.c_out,
                        kernel: l.kernel,
                        stride: l.stride,
                        padding: l.padding,
                    });
                    ids.push(QIds {
                        w: Some(wid),
                        b: Some(bid),
                        alpha: Some(aid),
                    });
                }
                (LayerKind::Pool, _) => {
                    if l.kernel[0] != l.kernel[1] || l.stride[0] != l.stride[1] {
                        return Err(Error::InvalidArch(format!("layer {i}: only square pooling is supported")));
                    }
                    ops.push(QOp::MaxPool {
                        k: l.kernel[0],
                        s: l.stride[0],
                    });
                    ids.push(QIds { w: None, b: None, alpha: None });
                }
                (LayerKind::GlobalPool, _) => {
                    ops.push(QOp::GlobalPool);
                    ids.push(QIds { w: None, b: None, alpha: None });
                }
                (LayerKind::Fc, Slot::Weight { w, b }) => {
                    if i + 1 != layers.len() {
                        return Err(Error::InvalidArch(format!("layer {i}: classifier must be last")));
                    }
                    let wid = params.add(format!("{j}.weight"), net.params.get(w).clone())?;
                    let bt = match b {
                        Some(b) => net.params.get(b).clone(),
                        None => Tensor::zeros(vec![l.c_out]),
                    };
                    let bid = params.add(format!("{j}.bias"), bt)?;
                    ops.push(QOp::Fc {
                        c_in: l.c_in,
                        c_out: l.c_out,
                    });
                    ids.push(QIds {
                        w: Some(wid),
                        b: Some(bid),
                        alpha: None,
                    });
                }
                (kind, _) => {
                    return Err(Error::InvalidArch(format!(
                        "layer {i}: {kind:?} is only supported right after a convolution"
                    )));
                }
            }
            i += 1;
        }
        if !matches!(ops.last(), Some(QOp::Fc { .. })) {
            return Err(Error::InvalidArch("integer pipeline needs a final classifier".into()));
        }
        let n = calib.len().min(cfg.calib_samples);
        if n == 0 {
            return Err(Error::InvalidArgument("calibration set is empty".into()));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (x, _) = calib.batch(&idx)?;
        let pix_max = x.data().iter().fold(0.0f32, |m, &v| m.max(v));
        let label_max = calib.labels()[..n * OUTPUTS].iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let mut fq = Self {
            name: net.arch.name.clone(),
            input: net.arch.input,
            ops,
            params,
            input_eps: if pix_max > 0.0 { f64::from(pix_max) / ACT_LEVELS as f64 } else { 1.0 / ACT_LEVELS as f64 },
            output_eps: f64::from(label_max.max(1e-3)) * cfg.output_margin / OUT_MAX as f64,
            ids,
        };
        fq.calibrate(x, cfg.calib_quantile)?;
        Ok(fq)
    }

    fn calibrate(&mut self, x: Tensor<f32>, q: f64) -> Result<()> {
        let acts = {
            let scales = self.scales()?;
            let mut g = Graph::with_params(&self.params);
            let xv = g.input(x);
            let mut acts = Vec::new();
            self.forward(&mut g, xv, Mode::Float, &scales, Some(&mut acts))?;
            acts.into_iter()
                .map(|(j, v)| {
                    let mut d: Vec<f32> = g.value(v).data().to_vec();
                    d.sort_by(f32::total_cmp);
                    let k = ((d.len() - 1) as f64 * q).round() as usize;
                    (j, d[k])
                })
                .collect::<Vec<_>>()
        };
        for (j, a) in acts {
            let id = self.ids[j].alpha.expect("activation layer");
            *self.params.get_mut(id) = Tensor::scalar(if a > 0.0 { a } else { 1.0 });
        }
        Ok(())
    }

    pub fn alpha(&self, layer: usize) -> Option<f32> {
        self.ids[layer].alpha.map(|a| self.params.get(a).data()[0])
    }

    /// Steps of every layer, derived from the current weights and bounds.
    pub fn scales(&self) -> Result<Vec<LayerScale>> {
        let mut eps = self.input_eps;
        let mut out = Vec::with_capacity(self.ops.len());
        for (op, ids) in self.ops.iter().zip(&self.ids) {
            let s = match op {
                QOp::Conv { .. } | QOp::Fc { .. } => {
                    let w = self.params.get(ids.w.expect("weights"));
                    let m = w.data().iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
                    let eps_w = if m > 0.0 { m / WEIGHT_MAX as f64 } else { 1.0 };
                    let target = match ids.alpha {
                        Some(a) => f64::from(self.params.get(a).data()[0]) / ACT_LEVELS as f64,
                        None => self.output_eps,
                    };
                    let rq = encode_scale(eps * eps_w / target)?;
                    LayerScale {
                        eps_in: eps,
                        eps_w,
                        eps_out: eps * eps_w / decode_scale(rq),
                        requant: Some(rq),
                    }
                }
                QOp::MaxPool { .. } | QOp::GlobalPool => LayerScale {
                    eps_in: eps,
                    eps_w: 1.0,
                    eps_out: eps,
                    requant: None,
                },
            };
            eps = s.eps_out;
            out.push(s);
        }
        Ok(out)
    }

    fn forward<E: Element>(
        &self,
        g: &mut Graph<'_, E>,
        x: Var,
        mode: Mode,
        scales: &[LayerScale],
        mut acts: Option<&mut Vec<(usize, Var)>>,
    ) -> Result<Var> {
        let e = E::from_f64_lossy;
        let levels = e(ACT_LEVELS as f64);
        let mut h = if mode == Mode::Float {
            x
        } else {
            g.quant_ste(x, e(self.input_eps), E::zero(), levels)?
        };
        for (j, (op, ids)) in self.ops.iter().zip(&self.ids).enumerate() {
            let s = scales[j];
            let quant_wb = |g: &mut Graph<'_, E>| -> Result<(Var, Var)> {
                let (mut w, mut b) = (g.param(ids.w.expect("weights"))?, g.param(ids.b.expect("bias"))?);
                if mode != Mode::Float {
                    let wm = e(WEIGHT_MAX as f64);
                    w = g.quant_ste(w, e(s.eps_w), -wm, wm)?;
                    b = g.quant_ste(b, e(s.eps_in * s.eps_w), e(-BIAS_MAX), e(BIAS_MAX))?;
                }
                Ok((w, b))
            };
            h = match *op {
                QOp::Conv {
                    depthwise,
                    stride,
                    padding,
                    ..
                } => {
                    let (w, b) = quant_wb(g)?;
                    let y = if depthwise {
                        g.depthwise_conv2d(h, w, stride, padding)?
                    } else {
                        g.conv2d(h, w, stride, padding)?
                    };
                    let y = g.channel_bias(y, b)?;
                    let a = match mode {
                        Mode::Float => g.relu(y)?,
                        Mode::Train => {
                            let alpha = g.param(ids.alpha.expect("alpha"))?;
                            g.pact_quant(y, alpha, ACT_LEVELS)?
                        }
                        Mode::Eval => g.quant_ste(y, e(s.eps_out), E::zero(), levels)?,
                    };
                    if let Some(acts) = acts.as_deref_mut() {
                        acts.push((j, a));
                    }
                    a
                }
                QOp::MaxPool { k, s: st } => g.max_pool(h, k, st)?,
                QOp::GlobalPool => {
                    let p = g.global_avg_pool(h)?;
                    if mode == Mode::Float {
                        p
                    } else {
                        g.quant_ste(p, e(s.eps_out), E::zero(), levels)?
                    }
                }
                QOp::Fc { .. } => {
                    let (w, b) = quant_wb(g)?;
                    let flat = g.flatten(h)?;
                    let y = g.fully_connected(flat, w, Some(b))?;
                    if mode == Mode::Float {
                        y
                    } else {
                        let m = e(OUT_MAX as f64);
                        g.quant_ste(y, e(s.eps_out), -m, m)?
                    }
                }
            };
        }
        Ok(h)
    }

    /// Folded float forward, no quantization.
    pub fn infer_float(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let scales = self.scales()?;
        let mut g = Graph::with_params(&self.params);
        let xv = g.input(x);
        let y = self.forward(&mut g, xv, Mode::Float, &scales, None)?;
        Ok(g.value(y).clone())
    }

    /// Fake-quantized forward in double precision. Values lie on the output
    /// grid of [`integerize`].
    pub fn infer(&self, x: Tensor<f32>) -> Result<Tensor<f64>> {
        let scales = self.scales()?;
        let p64 = self.params.cast::<f64>();
        let mut g = Graph::with_params(&p64);
        let xv = g.input(x.cast());
        let y = self.forward(&mut g, xv, Mode::Eval, &scales, None)?;
        Ok(g.value(y).clone())
    }

    /// Fake-quantized activations of every convolution for `x` (double
    /// precision), keyed by op index.
    pub fn activations(&self, x: Tensor<f32>) -> Result<Vec<(usize, Tensor<f64>)>> {
        let scales = self.scales()?;
        let p64 = self.params.cast::<f64>();
        let mut g = Graph::with_params(&p64);
        let xv = g.input(x.cast());
        let mut acts = Vec::new();
        self.forward(&mut g, xv, Mode::Eval, &scales, Some(&mut acts))?;
        Ok(acts.into_iter().map(|(j, v)| (j, g.value(v).clone())).collect())
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<[f64; OUTPUTS]>> {
        let mut out = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(64) {
            let (x, _) = data.batch(chunk)?;
            for row in self.infer(x)?.data().chunks(OUTPUTS) {
                out.push([row[0], row[1], row[2], row[3]]);
            }
        }
        Ok(out)
    }

    /// One quantization-aware step; returns the batch loss.
    pub fn train_step(&mut self, opt: &mut Sgd<f32>, x: Tensor<f32>, y: Tensor<f32>) -> Result<f32> {
        let n = x.shape()[0];
        let scales = self.scales()?;
        let (loss, grads) = {
            let mut g = Graph::with_params(&self.params);
            let xv = g.input(x);
            let yv = g.input(y);
            let pred = self.forward(&mut g, xv, Mode::Train, &scales, None)?;
            let loss = pose_loss(&mut g, pred, yv, n)?;
            (g.value(loss).item()?, g.backward(loss)?)
        };
        self.params.zero_grad();
        self.params.accumulate(&grads)?;
        opt.step(&mut self.params)?;
        for ids in &self.ids {
            if let Some(a) = ids.alpha {
                let t = self.params.get_mut(a);
                t.data_mut()[0] = t.data()[0].max(1e-3);
            }
        }
        Ok(loss)
    }
}

fn mean_l1(pred: &[[f64; OUTPUTS]], data: &Dataset) -> f64 {
    let s: f64 = pred
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = data.label(i);
            p.iter().zip(t).map(|(a, b)| (a - f64::from(b)).abs()).sum::<f64>()
        })
        .sum();
    s / pred.len().max(1) as f64
}

/// Converts `net` to a fake-quantized network and fine-tunes it on `data`.
/// Aborts when an epoch loss exceeds ten times the float model's loss.
pub fn fake_quantize_train(net: &Network, data: &Dataset, cfg: &QuantConfig) -> Result<FakeQuantNet> {
    let mut fq = FakeQuantNet::from_float(net, data, cfg)?;
    let float_loss = mean_l1(&predict(net, data)?, data);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.train.seed);
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum);
    for epoch in 0..cfg.train.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(data.len(), cfg.train.batch_size, &mut rng) {
            let (x, y) = data.batch(&idx)?;
            let l = fq.train_step(&mut opt, x, y)?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!("fake-quant loss became {l} in epoch {epoch}")));
            }
            total += f64::from(l) * idx.len() as f64;
        }
        let mean = total / data.len() as f64;
        if mean > 10.0 * float_loss {
            return Err(Error::Diverged(format!(
                "fake-quant loss {mean:.4} exceeds 10x the float loss {float_loss:.4} in epoch {epoch}"
            )));
        }
    }
    Ok(fq)
}

/// Deployable integer network.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegerGraph {
    pub name: String,
    pub input: [usize; 3],
    pub input_eps: f64,
    pub output_eps: f64,
    pub layers: Vec<IntLayer>,
    pub scales: Vec<LayerScale>,
}

/// Replaces every tensor of `fq` by integer codes and step sizes.
pub fn integerize(fq: &FakeQuantNet) -> Result<IntegerGraph> {
    let scales = fq.scales()?;
    let mut layers = Vec::with_capacity(fq.ops.len());
    for ((op, ids), s) in fq.ops.iter().zip(&fq.ids).zip(&scales) {
        let (weight, bias) = match (ids.w, ids.b) {
            (Some(w), Some(b)) => {
                let wm = WEIGHT_MAX as f64;
                let w = quantize_values(&tensor_f64(fq.params.get(w)), s.eps_w, -wm, wm);
                let b = quantize_values(&tensor_f64(fq.params.get(b)), s.eps_in * s.eps_w, -BIAS_MAX, BIAS_MAX);
                (
                    w.into_iter().map(|v| v as i8).collect(),
                    b.into_iter().map(|v| v as i32).collect(),
                )
            }
            _ => (Vec::new(), Vec::new()),
        };
        layers.push(IntLayer {
            op: *op,
            weight,
            bias,
            requant: s.requant,
        });
    }
    Ok(IntegerGraph {
        name: fq.name.clone(),
        input: fq.input,
        input_eps: scales.first().map_or(fq.input_eps, |s| s.eps_in),
        output_eps: scales.last().map_or(1.0, |s| s.eps_out),
        layers,
        scales,
    })
}

impl IntegerGraph {
    /// Input codes of a float image on the input grid.
    pub fn quantize_input(&self, image: &[f32]) -> Vec<u8> {
        image
            .iter()
            .map(|&v| round_half_up(f64::from(v) / self.input_eps).clamp(0.0, ACT_LEVELS as f64) as u8)
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last().map(|l| l.op) {
            Some(QOp::Fc { c_out, .. }) => c_out,
            _ => 0,
        }
    }

    /// Integer-only inference of one float image; returns output codes and
    /// counters.
    pub fn run(&self, image: &[f32]) -> Result<(Vec<i32>, IntStats)> {
        int_forward(self, &self.quantize_input(image))
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<[f64; OUTPUTS]>> {
        (0..data.len())
            .map(|i| {
                let (q, _) = self.run(data.image(i))?;
                if q.len() != OUTPUTS {
                    return Err(Error::InvalidArch(format!("graph has {} outputs", q.len())));
                }
                Ok([0, 1, 2, 3].map(|k| q[k] as f64 * self.output_eps))
            })
            .collect()
    }

    /// Int8 weights plus int32 biases, in bytes.
    pub fn weight_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + 4 * l.bias.len()).sum()
    }
}

/// Accuracy of the float, fake-quantized and integer versions of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub float: RegressionMetrics,
    pub fake_quant: RegressionMetrics,
    pub integer: RegressionMetrics,
    /// Relative MAE increase in percent, per output then total.
    pub fake_quant_degradation_pct: [f64; OUTPUTS + 1],
    pub integer_degradation_pct: [f64; OUTPUTS + 1],
}

fn degradation(base: &RegressionMetrics, m: &RegressionMetrics) -> [f64; OUTPUTS + 1] {
    let pct = |a: f64, b: f64| if a > 0.0 { 100.0 * (b - a) / a } else { 0.0 };
    let mut d = [0.0; OUTPUTS + 1];
    for k in 0..OUTPUTS {
        d[k] = pct(base.mae[k], m.mae[k]);
    }
    d[OUTPUTS] = pct(base.mae_total(), m.mae_total());
    d
}

pub fn quantization_report(
    float_model: &Network,
    fq: &FakeQuantNet,
    graph: &IntegerGraph,
    test: &Dataset,
) -> Result<QuantReport> {
    let truth: Vec<[f64; OUTPUTS]> = (0..test.len()).map(|i| test.label(i).map(f64::from)).collect();
    let float = regression_metrics(&predict(float_model, test)?, &truth)?;
    let fake_quant = regression_metrics(&fq.predict(test)?, &truth)?;
    let integer = regression_metrics(&graph.predict(test)?, &truth)?;
    Ok(QuantReport {
        fake_quant_degradation_pct: degradation(&float, &fake_quant),
        integer_degradation_pct: degradation(&float, &integer),
        float,
        fake_quant,
        integer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_encoding_round_trip() {
        for r in [1e-9, 3.7e-4, 0.5, 0.999, 1.0, 17.25] {
            let q = encode_scale(r).unwrap();
            assert!((1 << 30..=i32::MAX).contains(&q.mult));
            assert!((decode_scale(q) / r - 1.0).abs() < 1e-9);
        }
        assert!(matches!(encode_scale(0.0), Err(Error::ScaleEncoding { .. })));
        assert!(matches!(encode_scale(1e-20), Err(Error::ScaleEncoding { .. })));
        assert!(matches!(encode_scale(1e12), Err(Error::ScaleEncoding { .. })));
    }

    #[test]
    fn unit_step_keeps_integer_grid_values() {
        let t = [-3.0, 0.0, 5.0, 127.0];
        assert_eq!(quantize_values(&t, 1.0, -127.0, 127.0), vec![-3, 0, 5, 127]);
    }

    #[test]
    fn bad_bit_width_is_rejected() {
        let cfg = QuantConfig {
            bits: 4,
            ..QuantConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
