//! Mask-based channel search.
//!
//! Every standard/pointwise convolution owns a trainable vector `theta`
//! (one entry per output channel). Its binarization `H(theta)` multiplies
//! the filters, and the same vector also gates the affine layer that follows
//! and any depthwise convolution fed by it, whose channels are fully
//! determined by that producer. The regularizer is the exact parameter count
//! of the pruned network written as a function of the alive-channel counts.

mod sweep;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Sgd, Tensor, Var};
use crate::zoo::{pose_loss, ArchSpec, LayerKind, LayerSpec, Network, Slot};

pub use sweep::{
    lambda_sweep, log_grid, pareto_front, read_sweep_csv, spearman, write_sweep_csv, CostAxis, ParetoPoint,
    search_lambda, SearchConfig, SearchOutcome, SweepRecord, SweepSummary, DEFAULT_LAMBDA_RANGE, SWEEP_SCHEMA_VERSION,
};

pub const DEFAULT_TAU: f32 = 0.5;
pub const DEFAULT_WINDOW: f32 = 0.5;
pub const THETA_INIT: f32 = 1.0;

/// One trainable mask vector and the layers it gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    /// Index of the convolution that owns the mask.
    pub owner: usize,
    /// Every layer gated by this mask, owner included.
    pub layers: Vec<usize>,
    pub theta: Vec<f32>,
    pub tau: f32,
    pub window: f32,
    /// Depthwise layer bound to this mask, if any.
    pub shared_group: Option<usize>,
}

impl MaskState {
    pub fn new(owner: usize, c_out: usize) -> Self {
        Self {
            owner,
            layers: vec![owner],
            theta: vec![THETA_INIT; c_out],
            tau: DEFAULT_TAU,
            window: DEFAULT_WINDOW,
            shared_group: None,
        }
    }

    /// `H(theta)` with the keep-alive rule applied.
    pub fn binarized(&self) -> Vec<bool> {
        crate::tensor::binarize(&self.theta, self.tau)
            .into_iter()
            .map(|v| v != 0.0)
            .collect()
    }

    pub fn alive(&self) -> usize {
        self.binarized().into_iter().filter(|&b| b).count()
    }
}

/// All masks of one network plus the layer -> mask lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub states: Vec<MaskState>,
    /// Mask gating the output channels of each layer.
    pub layer_mask: Vec<Option<usize>>,
    /// Mask gating the input channels of each layer.
    pub input_mask: Vec<Option<usize>>,
}

/// Groups layers by the convolution that determines their channels.
pub fn bind_shared_masks(arch: &ArchSpec) -> Result<MaskSet> {
    arch.validate()?;
    let n = arch.layers.len();
    let mut states: Vec<MaskState> = Vec::new();
    let mut layer_mask = vec![None; n];
    let mut input_mask = vec![None; n];
    let mut cur: Option<usize> = None;
    for (i, l) in arch.layers.iter().enumerate() {
        input_mask[i] = cur;
        match l.kind {
            LayerKind::Conv | LayerKind::Pointwise => {
                states.push(MaskState::new(i, l.c_out));
                cur = Some(states.len() - 1);
                layer_mask[i] = cur;
            }
            LayerKind::Depthwise => {
                let g = cur.ok_or_else(|| {
                    Error::InvalidArch(format!("depthwise layer {i} has no producing convolution"))
                })?;
                states[g].layers.push(i);
                states[g].shared_group = Some(i);
                layer_mask[i] = Some(g);
            }
            LayerKind::Affine => {
                if let Some(g) = cur {
                    states[g].layers.push(i);
                    layer_mask[i] = Some(g);
                }
            }
            LayerKind::Relu | LayerKind::Pool | LayerKind::GlobalPool => layer_mask[i] = cur,
            LayerKind::Fc => cur = None,
        }
    }
    Ok(MaskSet {
        states,
        layer_mask,
        input_mask,
    })
}

impl MaskSet {
    pub fn binarized(&self) -> Vec<Vec<bool>> {
        self.states.iter().map(MaskState::binarized).collect()
    }

    pub fn alive_counts(&self) -> Vec<usize> {
        self.states.iter().map(MaskState::alive).collect()
    }

    pub fn total_alive(&self) -> usize {
        self.alive_counts().iter().sum()
    }

    /// Replaces every theta with a binary pattern (`true` -> 1, `false` -> 0).
    pub fn set_binary(&mut self, pattern: &[Vec<bool>]) -> Result<()> {
        if pattern.len() != self.states.len() {
            return Err(Error::InvalidArgument(format!(
                "{} mask vectors for {} masks",
                pattern.len(),
                self.states.len()
            )));
        }
        for (s, p) in self.states.iter_mut().zip(pattern) {
            if p.len() != s.theta.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask of layer {} has {} channels, got {}",
                    s.owner,
                    s.theta.len(),
                    p.len()
                )));
            }
            s.theta = p.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        }
        Ok(())
    }

    /// Records `theta` leaves and their binarizations on `g`.
    pub fn record(&self, g: &mut Graph<'_, f32>) -> Result<MaskVars> {
        let mut theta = Vec::with_capacity(self.states.len());
        let mut hard = Vec::with_capacity(self.states.len());
        for s in &self.states {
            let t = g.input(Tensor::new(vec![s.theta.len()], s.theta.clone())?);
            hard.push(g.heaviside_ste(t, s.tau, s.window)?);
            theta.push(t);
        }
        let per_layer = self.layer_gates().map(|m| m.map(|k| hard[k])).collect();
        Ok(MaskVars {
            theta,
            hard,
            per_layer,
        })
    }

    /// Mask applied to the parameters of each layer: only layers with
    /// parameters are gated.
    fn layer_gates(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        let mut gated = vec![None; self.layer_mask.len()];
        for (k, s) in self.states.iter().enumerate() {
            for &l in &s.layers {
                gated[l] = Some(k);
            }
        }
        gated.into_iter()
    }

    /// Fixed `{0,1}` tensors in the layout expected by [`Network::forward`].
    pub fn hard_masks(&self) -> Vec<Option<Tensor<f32>>> {
        let bins = self.binarized();
        self.layer_gates()
            .map(|m| {
                m.map(|k| {
                    let v: Vec<f32> = bins[k].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                    Tensor::new(vec![v.len()], v).expect("1-d")
                })
            })
            .collect()
    }
}

/// Graph handles produced by [`MaskSet::record`].
pub struct MaskVars {
    pub theta: Vec<Var>,
    pub hard: Vec<Var>,
    /// Gate for each layer's parameters, ready for [`Network::forward`].
    pub per_layer: Vec<Option<Var>>,
}

/// `W ⊙ H(theta)` along the output-channel axis.
pub fn apply_mask(w: &Tensor<f32>, mask: &MaskState) -> Result<Tensor<f32>> {
    let o = *w.shape().first().unwrap_or(&0);
    if o != mask.theta.len() {
        return Err(Error::shape(
            "apply_mask",
            format!("{} filters, mask has {} entries", o, mask.theta.len()),
        ));
    }
    let mut g = Graph::new();
    let wv = g.input(w.clone());
    let t = g.input(Tensor::new(vec![o], mask.theta.clone())?);
    let h = g.heaviside_ste(t, mask.tau, mask.window)?;
    let y = g.mul_outer(wv, h)?;
    Ok(g.value(y).clone())
}

/// Differentiable parameter count of the pruned network.
///
/// Per layer: convolutions `kv * alive_in * alive_out` (+ `alive_out` with
/// bias), depthwise `kv * alive`, affine `2 * alive`, and the classifier
/// `alive_in * spatial * outputs + outputs`. Alive counts are sums of the
/// straight-through binarized masks.
pub fn regularizer_params(g: &mut Graph<'_, f32>, arch: &ArchSpec, masks: &MaskSet, vars: &MaskVars) -> Result<Var> {
    if vars.hard.len() != masks.states.len() {
        return Err(Error::InvalidArgument("mask variables do not match the mask set".into()));
    }
    let in_shapes = arch.input_shapes()?;
    let mut alive = Vec::with_capacity(vars.hard.len());
    for &h in &vars.hard {
        alive.push(g.sum(h)?);
    }
    let mut constant = 0.0f64;
    let mut terms: Vec<Var> = Vec::new();
    for (i, l) in arch.layers.iter().enumerate() {
        let kv = (l.kernel[0] * l.kernel[1]) as f32;
        let out = masks.layer_mask[i].map(|k| alive[k]);
        let inp = masks.input_mask[i].map(|k| alive[k]);
        match l.kind {
            LayerKind::Conv | LayerKind::Pointwise => {
                let out = out.expect("convolutions own a mask");
                match inp {
                    Some(a) => {
                        let p = g.mul(a, out)?;
                        terms.push(g.scale(p, kv)?);
                    }
                    None => terms.push(g.scale(out, kv * l.c_in as f32)?),
                }
                if l.bias {
                    terms.push(out);
                }
            }
            LayerKind::Depthwise => {
                let out = out.expect("depthwise layers are bound to a mask");
                terms.push(g.scale(out, kv)?);
                if l.bias {
                    terms.push(out);
                }
            }
            LayerKind::Affine => match out {
                Some(a) => terms.push(g.scale(a, 2.0)?),
                None => constant += 2.0 * l.c_out as f64,
            },
            LayerKind::Fc => {
                let [_, h, w] = in_shapes[i];
                match inp {
                    Some(a) => terms.push(g.scale(a, (h * w * l.c_out) as f32)?),
                    None => constant += (l.c_in * l.c_out) as f64,
                }
                if l.bias {
                    constant += l.c_out as f64;
                }
            }
            _ => {}
        }
    }
    let mut total = g.input(Tensor::scalar(constant as f32));
    for t in terms {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Loss values of one search step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub task: f32,
    pub reg: f32,
}

/// One joint step on `task + lambda * reg`: the optimizer updates the
/// weights, `theta` moves by plain SGD with `mask_lr`.
pub fn nas_train_step(
    net: &mut Network,
    opt: &mut Sgd<f32>,
    masks: &mut MaskSet,
    x: Tensor<f32>,
    y: Tensor<f32>,
    lambda: f32,
    mask_lr: f32,
) -> Result<StepLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let n = x.shape()[0];
    let (task, reg, grads, theta_vars) = {
        let mut g = net.graph();
        let mv = masks.record(&mut g)?;
        let xv = g.input(x);
        let yv = g.input(y);
        let pred = net.forward(&mut g, xv, Some(&mv.per_layer))?;
        let task = pose_loss(&mut g, pred, yv, n)?;
        let reg = regularizer_params(&mut g, &net.arch, masks, &mv)?;
        let weighted = g.scale(reg, lambda)?;
        let total = g.add(task, weighted)?;
        let (tv, rv) = (g.value(task).item()?, g.value(reg).item()?);
        if !tv.is_finite() || !g.value(total).item()?.is_finite() {
            return Err(Error::Diverged(format!("search loss is not finite (task={tv}, reg={rv})")));
        }
        (tv, rv, g.backward(total)?, mv.theta)
    };
    net.params.zero_grad();
    net.params.accumulate(&grads)?;
    opt.step(&mut net.params)?;
    for (s, v) in masks.states.iter_mut().zip(theta_vars) {
        if let Some(d) = grads.wrt(v) {
            s.theta.iter_mut().zip(d).for_each(|(t, &d)| *t -= mask_lr * d);
        }
    }
    Ok(StepLoss { task, reg })
}

fn alive_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

/// Pruned architecture for binary `pattern` (one vector per mask).
pub fn extract_architecture(seed: &ArchSpec, masks: &MaskSet, pattern: &[Vec<bool>]) -> Result<ArchSpec> {
    check_pattern(masks, pattern)?;
    let in_shapes = seed.input_shapes()?;
    let count = |k: Option<usize>, full: usize| k.map_or(full, |k| pattern[k].iter().filter(|&&b| b).count());
    let mut arch = seed.clone();
    arch.name = format!("{}_pruned", seed.name);
    for (i, l) in arch.layers.iter_mut().enumerate() {
        let out = count(masks.layer_mask[i], l.c_out);
        let inp = count(masks.input_mask[i], l.c_in);
        *l = match l.kind {
            LayerKind::Conv | LayerKind::Pointwise => LayerSpec {
                c_in: inp,
                c_out: out,
                ..l.clone()
            },
            LayerKind::Fc => {
                let [c, h, w] = in_shapes[i];
                LayerSpec {
                    c_in: count(masks.input_mask[i], c) * h * w,
                    ..l.clone()
                }
            }
            _ => LayerSpec {
                c_in: out,
                c_out: out,
                ..l.clone()
            },
        };
    }
    arch.validate()?;
    Ok(arch)
}

fn check_pattern(masks: &MaskSet, pattern: &[Vec<bool>]) -> Result<()> {
    if pattern.len() != masks.states.len() {
        return Err(Error::InvalidArgument(format!(
            "{} mask vectors for {} masks",
            pattern.len(),
            masks.states.len()
        )));
    }
    for (s, p) in masks.states.iter().zip(pattern) {
        if p.len() != s.theta.len() {
            return Err(Error::InvalidArgument(format!(
                "mask of layer {} expects {} entries, got {}",
                s.owner,
                s.theta.len(),
                p.len()
            )));
        }
        if !p.iter().any(|&b| b) {
            return Err(Error::KeepAlive { layer: s.owner });
        }
    }
    Ok(())
}

/// Pruned network with weights sliced from `net`.
pub fn extract_network(net: &Network, masks: &MaskSet, pattern: &[Vec<bool>]) -> Result<Network> {
    let arch = extract_architecture(&net.arch, masks, pattern)?;
    let in_shapes = net.arch.input_shapes()?;
    let keep = |k: Option<usize>, full: usize| match k {
        Some(k) => alive_indices(&pattern[k]),
        None => (0..full).collect(),
    };
    let mut params = crate::tensor::ParamStore::new();
    for (i, l) in net.arch.layers.iter().enumerate() {
        let outs = keep(masks.layer_mask[i], l.c_out);
        let ins = keep(masks.input_mask[i], l.c_in);
        match (l.kind, net.slot(i)) {
            (LayerKind::Conv | LayerKind::Pointwise, Slot::Weight { w, b }) => {
                let wt = net.params.get(w);
                let kv = l.kernel[0] * l.kernel[1];
                let mut d = Vec::with_capacity(outs.len() * ins.len() * kv);
                for &o in &outs {
                    for &c in &ins {
                        let base = (o * l.c_in + c) * kv;
                        d.extend_from_slice(&wt.data()[base..base + kv]);
                    }
                }
                params.add(format!("{i}.weight"), Tensor::new(vec![outs.len(), ins.len(), l.kernel[0], l.kernel[1]], d)?)?;
                if let Some(b) = b {
                    params.add(format!("{i}.bias"), gather(net.params.get(b), &outs, 1)?)?;
                }
            }
            (LayerKind::Depthwise, Slot::Weight { w, b }) => {
                let kv = l.kernel[0] * l.kernel[1];
                params.add(format!("{i}.weight"), gather(net.params.get(w), &outs, kv)?)?;
                if let Some(b) = b {
                    params.add(format!("{i}.bias"), gather(net.params.get(b), &outs, 1)?)?;
                }
            }
            (LayerKind::Affine, Slot::Affine { scale, bias }) => {
                params.add(format!("{i}.scale"), gather(net.params.get(scale), &outs, 1)?)?;
                params.add(format!("{i}.bias"), gather(net.params.get(bias), &outs, 1)?)?;
            }
            (LayerKind::Fc, Slot::Weight { w, b }) => {
                let [c, h, wd] = in_shapes[i];
                let sp = h * wd;
                let chans = keep(masks.input_mask[i], c);
                let wt = net.params.get(w);
                let mut d = Vec::with_capacity(l.c_out * chans.len() * sp);
                for o in 0..l.c_out {
                    let row = &wt.data()[o * l.c_in..(o + 1) * l.c_in];
                    for &ch in &chans {
                        d.extend_from_slice(&row[ch * sp..(ch + 1) * sp]);
                    }
                }
                params.add(format!("{i}.weight"), Tensor::new(vec![l.c_out, chans.len() * sp], d)?)?;
                if let Some(b) = b {
                    params.add(format!("{i}.bias"), net.params.get(b).clone())?;
                }
            }
            _ => {}
        }
    }
    Network::from_params(arch, params)
}

/// Rows `idx` of a tensor whose leading axis has `inner`-sized rows.
fn gather(t: &Tensor<f32>, idx: &[usize], inner: usize) -> Result<Tensor<f32>> {
    let mut d = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        d.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_frontnet, build_mobilenet, count_params, FrontnetConfig, MobileNetConfig};

    fn tiny_frontnet() -> ArchSpec {
        build_frontnet(&FrontnetConfig {
            input_hw: [32, 48],
            widths: vec![4, 4, 6, 6, 8, 8, 8],
        })
        .unwrap()
    }

    #[test]
    fn figure_one_patterns() {
        let w = Tensor::new(vec![4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut m = MaskState::new(0, 4);
        m.theta = vec![1.0, 1.0, 0.0, 0.0];
        assert_eq!(apply_mask(&w, &m).unwrap().data(), &[1.0, 2.0, 0.0, 0.0]);
        m.theta = vec![0.0, 1.0, 0.0, 1.0];
        assert_eq!(apply_mask(&w, &m).unwrap().data(), &[0.0, 2.0, 0.0, 4.0]);
        m.theta = vec![0.9; 4];
        assert_eq!(apply_mask(&w, &m).unwrap(), w);
        m.theta = vec![1.0; 3];
        assert!(apply_mask(&w, &m).is_err());
    }

    #[test]
    fn mobilenet_blocks_share_masks() {
        let a = build_mobilenet(1.0, &MobileNetConfig::default()).unwrap();
        let m = bind_shared_masks(&a).unwrap();
        // stem + 13 pointwise
        assert_eq!(m.states.len(), 14);
        for s in &m.states[..13] {
            let dw = s.shared_group.expect("every producer feeds a depthwise");
            assert_eq!(a.layers[dw].kind, LayerKind::Depthwise);
            assert_eq!(a.layers[dw].c_in, s.theta.len());
        }
        assert_eq!(m.states[1].theta.len(), 64);
    }

    #[test]
    fn frontnet_masks_are_independent() {
        let a = tiny_frontnet();
        let m = bind_shared_masks(&a).unwrap();
        assert_eq!(m.states.len(), 7);
        assert!(m.states.iter().all(|s| s.shared_group.is_none()));
    }

    #[test]
    fn orphan_depthwise_is_an_error() {
        let mut a = tiny_frontnet();
        a.layers[0] = LayerSpec::depthwise(1, 5, 2, 2);
        a.layers[0].c_out = 1;
        a.layers[1] = LayerSpec::affine(1);
        a.layers[2] = LayerSpec::relu(1);
        a.layers[3] = LayerSpec::max_pool(1, 2, 2);
        a.layers[4].c_in = 1;
        assert!(matches!(bind_shared_masks(&a), Err(Error::InvalidArch(_))));
    }

    #[test]
    fn half_filters_of_single_conv() {
        let arch = ArchSpec {
            name: "single".into(),
            family: crate::zoo::Family::Custom,
            input: [4, 5, 5],
            output_dim: 4,
            width_multiplier: None,
            layers: vec![
                LayerSpec::conv(4, 8, 3, 1, 1).with_bias(true),
                LayerSpec::fc(8 * 25, 4),
            ],
        };
        let mut masks = bind_shared_masks(&arch).unwrap();
        masks.states[0].theta = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut g = Graph::new();
        let mv = masks.record(&mut g).unwrap();
        let r = regularizer_params(&mut g, &arch, &masks, &mv).unwrap();
        let fc = 4 * 25 * 4 + 4;
        // 4 of 8 filters: 9*4*4 weights + 4 biases
        assert_eq!(g.value(r).item().unwrap(), (148 + fc) as f32);
    }

    #[test]
    fn all_alive_regularizer_is_seed_count() {
        for a in [
            tiny_frontnet(),
            build_mobilenet(0.25, &MobileNetConfig::default()).unwrap(),
        ] {
            let masks = bind_shared_masks(&a).unwrap();
            let mut g = Graph::new();
            let mv = masks.record(&mut g).unwrap();
            let r = regularizer_params(&mut g, &a, &masks, &mv).unwrap();
            assert_eq!(g.value(r).item().unwrap() as usize, count_params(&a));
            let ex = extract_architecture(&a, &masks, &masks.binarized()).unwrap();
            assert_eq!(ex.layers, a.layers);
        }
    }

    #[test]
    fn toggling_shared_entry_moves_pw_and_dw() {
        let a = build_mobilenet(0.25, &MobileNetConfig::default()).unwrap();
        let masks = bind_shared_masks(&a).unwrap();
        let mut p = masks.binarized();
        p[1][0] = false;
        let ex = extract_architecture(&a, &masks, &p).unwrap();
        let pw = masks.states[1].owner;
        let dw = masks.states[1].shared_group.unwrap();
        assert_eq!(ex.layers[pw].c_out, a.layers[pw].c_out - 1);
        assert_eq!(ex.layers[dw].c_in, a.layers[dw].c_in - 1);
        assert_eq!(ex.layers[dw].c_out, a.layers[dw].c_out - 1);
    }

    #[test]
    fn figure_one_extraction_and_keep_alive() {
        let a = tiny_frontnet();
        let masks = bind_shared_masks(&a).unwrap();
        let mut p = masks.binarized();
        p[0] = vec![true, true, false, false];
        let ex = extract_architecture(&a, &masks, &p).unwrap();
        assert_eq!(ex.layers[0].c_out, 2);
        p[0] = vec![false; 4];
        assert!(matches!(
            extract_architecture(&a, &masks, &p),
            Err(Error::KeepAlive { layer: 0 })
        ));
    }
}
