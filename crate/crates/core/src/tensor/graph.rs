use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<E> {
    Owned(Tensor<E>),
    Param(ParamId),
}

enum Op<E> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<E>,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
        hw: usize,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L1Loss {
        pred: Var,
        target: Var,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: E,
    },
    MulOuter {
        x: Var,
        m: Var,
    },
    Heaviside {
        theta: Var,
        tau: E,
        window: E,
    },
    PactQuant {
        x: Var,
        alpha: Var,
    },
    QuantSte {
        x: Var,
        lo: E,
        hi: E,
    },
}

struct Node<E> {
    value: Value<E>,
    op: Op<E>,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order of the graph.
pub struct Graph<'p, E: Element = f32> {
    params: Option<&'p ParamStore<E>>,
    nodes: Vec<Node<E>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<E: Element> Default for Graph<'static, E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<'static, E> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }
}

impl<'p, E: Element> Graph<'p, E> {
    pub fn with_params(params: &'p ParamStore<E>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param node without a store")
                .get(*id),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant or input leaf.
    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records (once) a leaf bound to a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::InvalidArgument("graph has no parameter store".into()))?;
        if id.index() >= store.len() {
            return Err(Error::InvalidArgument(format!("unknown parameter {id:?}")));
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: [usize; 2], padding: [usize; 2]) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        let geom = conv_geom("conv2d", xs, ws[0], ws[2], ws[3], stride, padding)?;
        let (out, cols) = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(vec![geom.n, geom.c_out, geom.ho, geom.wo], out)?;
        self.push(t, Op::Conv2d { x, w, geom, cols }, "conv2d")
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input {xs:?}, weight {ws:?} (expected [C,1,K,K])"),
            ));
        }
        if xs[1] != ws[0] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input has {} channels, weight has {}", xs[1], ws[0]),
            ));
        }
        let geom = conv_geom("depthwise_conv2d", xs, ws[0], ws[2], ws[3], stride, padding)?;
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(vec![geom.n, geom.c_out, geom.ho, geom.wo], out)?;
        self.push(t, Op::Depthwise { x, w, geom }, "depthwise_conv2d")
    }

    /// Adds `b[c]` to channel `c` (axis 1).
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, inner) = channel_layout("channel_bias", self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(Error::shape("channel_bias", format!("bias {:?} for {c} channels", self.shape(b))));
        }
        let bv = self.value(b).data();
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv[(i / inner) % c];
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::ChannelBias { x, b }, "channel_bias")
    }

    /// Per-channel `x * scale[c] + bias[c]`.
    pub fn affine_channel(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let (c, inner) = channel_layout("affine_channel", self.shape(x))?;
        if self.shape(scale) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape(
                "affine_channel",
                format!("scale {:?}, bias {:?} for {c} channels", self.shape(scale), self.shape(bias)),
            ));
        }
        let (sv, bv) = (self.value(scale).data(), self.value(bias).data());
        let xv = self.value(x);
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                v * sv[ch] + bv[ch]
            })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::Affine { x, scale, bias }, "affine_channel")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        self.push(t, Op::Relu { x }, "relu")
    }

    pub fn max_pool(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || s == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::shape("max_pool", format!("input {xs:?}, k={k}, s={s}")));
        }
        let (out, argmax, ho, wo) =
            kernels::max_pool_forward(self.value(x).data(), xs[0], xs[1], xs[2], xs[3], k, s);
        let t = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        self.push(t, Op::MaxPool { x, argmax }, "max_pool")
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = E::one() / E::from_f64_lossy(hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<E>() * inv)
            .collect();
        let t = Tensor::new(vec![xs[0], xs[1]], out)?;
        self.push(t, Op::GlobalAvgPool { x, hw }, "global_avg_pool")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x }, "reshape")
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.first().ok_or_else(|| Error::shape("flatten", "scalar"))?;
        let f = xs[1..].iter().product();
        self.reshape(x, vec![n, f])
    }

    /// `x[N,F] * w[O,F]^T + b[O]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("fully_connected", format!("input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("fully_connected", format!("bias {:?}", self.shape(b))));
            }
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let wv = self.value(w).data();
        let mut wt = vec![E::zero(); f * o];
        for oi in 0..o {
            for fi in 0..f {
                wt[fi * o + oi] = wv[oi * f + fi];
            }
        }
        let mut out = vec![E::zero(); n * o];
        kernels::gemm_nn(n, o, f, self.value(x).data(), &wt, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let t = Tensor::new(vec![n, o], out)?;
        self.push(t, Op::Linear { x, w, b }, "fully_connected")
    }

    /// Sum of absolute errors, reduced to a scalar.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                "l1_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        self.push(Tensor::scalar(s), Op::L1Loss { pred, target }, "l1_loss")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// Elementwise sum; `b` may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, "add")
    }

    /// Elementwise product; `b` may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, "mul")
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)
        } else if bv.len() == 1 && bv.shape().is_empty() {
            let y = bv.data()[0];
            Ok(av.map(|x| f(x, y)))
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())))
        }
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c }, "scale")
    }

    /// Multiplies slice `o` along the leading axis by `m[o]`.
    pub fn mul_outer(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x);
        let o = *xs.first().ok_or_else(|| Error::shape("mul_outer", "scalar input"))?;
        if self.shape(m) != [o] {
            return Err(Error::shape(
                "mul_outer",
                format!("mask {:?} for leading extent {o}", self.shape(m)),
            ));
        }
        let inner = self.value(x).len() / o.max(1);
        let mv = self.value(m).data();
        let xv = self.value(x);
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mv[i / inner])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::MulOuter { x, m }, "mul_outer")
    }

    /// Binarizes `theta` with a straight-through gradient.
    ///
    /// Forward: `1` where `theta >= tau`, else `0`; if every entry is dead the
    /// largest one (first on ties) is kept alive. Backward: the incoming
    /// gradient passes unchanged where `|theta - tau| <= window`, zero elsewhere.
    pub fn heaviside_ste(&mut self, theta: Var, tau: E, window: E) -> Result<Var> {
        if self.shape(theta).len() != 1 {
            return Err(Error::shape("heaviside_ste", format!("{:?}", self.shape(theta))));
        }
        let t = binarize(self.value(theta).data(), tau);
        let t = Tensor::new(self.shape(theta).to_vec(), t)?;
        self.push(t, Op::Heaviside { theta, tau, window }, "heaviside_ste")
    }

    /// PACT clip to `[0, alpha]` followed by rounding onto `levels` steps of
    /// `alpha / levels`. `alpha` is a scalar parameter.
    pub fn pact_quant(&mut self, x: Var, alpha: Var, levels: u32) -> Result<Var> {
        let a = self.value(alpha).item()?;
        if a.is_nan() || a <= E::zero() {
            return Err(Error::InvalidArgument(format!("PACT alpha must be > 0, got {a:?}")));
        }
        let eps = a / E::from_f64_lossy(levels as f64);
        let hi = E::from_f64_lossy(levels as f64);
        let t = self.value(x).map(|v| {
            let c = v.max(E::zero()).min(a);
            round_half_up(c / eps).min(hi) * eps
        });
        self.push(t, Op::PactQuant { x, alpha }, "pact_quant")
    }

    /// Rounds onto the grid `eps * q`, `q` in `[lo, hi]`, with a
    /// straight-through gradient inside the representable range.
    pub fn quant_ste(&mut self, x: Var, eps: E, lo: E, hi: E) -> Result<Var> {
        if !(eps > E::zero()) {
            return Err(Error::InvalidArgument(format!("quantization step must be > 0, got {eps:?}")));
        }
        let t = self
            .value(x)
            .map(|v| round_half_up(v / eps).max(lo).min(hi) * eps);
        self.push(t, Op::QuantSte { x, lo: lo * eps, hi: hi * eps }, "quant_ste")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.value {
                Value::Param(id) => Some((id, Var(i))),
                Value::Owned(_) => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom, cols } => {
                let (dx, dw) = kernels::conv2d_backward(g, self.value(*w).data(), cols, geom);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = kernels::depthwise_backward(
                    g,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    geom,
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
            }
            Op::ChannelBias { x, b } => {
                let (c, inner) = channel_layout("channel_bias", self.shape(*x))?;
                let mut db = vec![E::zero(); c];
                for (j, &gv) in g.iter().enumerate() {
                    db[(j / inner) % c] += gv;
                }
                accumulate(grads, *x, g.to_vec());
                accumulate(grads, *b, db);
            }
            Op::Affine { x, scale, bias } => {
                let (c, inner) = channel_layout("affine_channel", self.shape(*x))?;
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                let mut ds = vec![E::zero(); c];
                let mut db = vec![E::zero(); c];
                let mut dx = vec![E::zero(); g.len()];
                for (j, &gv) in g.iter().enumerate() {
                    let ch = (j / inner) % c;
                    dx[j] = gv * sv[ch];
                    ds[ch] += gv * xv[j];
                    db[ch] += gv;
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *scale, ds);
                accumulate(grads, *bias, db);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > E::zero() { gv } else { E::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![E::zero(); self.value(*x).len()];
                for (&gv, &a) in g.iter().zip(argmax) {
                    dx[a] += gv;
                }
                accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x, hw } => {
                let inv = E::one() / E::from_f64_lossy(*hw as f64);
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * inv).take(*hw))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, f, o) = (xs[0], xs[1], ws[0]);
                let mut dx = vec![E::zero(); n * f];
                kernels::gemm_nn(n, f, o, g, self.value(*w).data(), &mut dx);
                let mut dw = vec![E::zero(); o * f];
                kernels::gemm_tn(o, f, n, g, self.value(*x).data(), &mut dw);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![E::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::L1Loss { pred, target } => {
                let gv = g[0];
                let dp: Vec<E> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(self.value(*target).data())
                    .map(|(&p, &t)| gv * sign(p - t))
                    .collect();
                let dt = dp.iter().map(|&v| -v).collect();
                accumulate(grads, *pred, dp);
                accumulate(grads, *target, dt);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                if self.shape(*a) == self.shape(*b) {
                    accumulate(grads, *b, g.to_vec());
                } else {
                    accumulate(grads, *b, vec![g.iter().copied().sum()]);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.shape(*a) == self.shape(*b) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                    accumulate(grads, *b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
                } else {
                    let y = bv[0];
                    accumulate(grads, *a, g.iter().map(|&gv| gv * y).collect());
                    let db = g.iter().zip(av).map(|(&gv, &x)| gv * x).sum();
                    accumulate(grads, *b, vec![db]);
                }
            }
            Op::Scale { x, c } => accumulate(grads, *x, g.iter().map(|&gv| gv * *c).collect()),
            Op::MulOuter { x, m } => {
                let o = self.value(*m).len();
                let inner = g.len() / o.max(1);
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                let mut dm = vec![E::zero(); o];
                let mut dx = vec![E::zero(); g.len()];
                for (j, &gv) in g.iter().enumerate() {
                    dx[j] = gv * mv[j / inner];
                    dm[j / inner] += gv * xv[j];
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *m, dm);
            }
            Op::Heaviside { theta, tau, window } => {
                let tv = self.value(*theta).data();
                let d = g
                    .iter()
                    .zip(tv)
                    .map(|(&gv, &t)| if (t - *tau).abs() <= *window { gv } else { E::zero() })
                    .collect();
                accumulate(grads, *theta, d);
            }
            Op::PactQuant { x, alpha } => {
                let a = self.value(*alpha).item()?;
                let xv = self.value(*x).data();
                let mut da = E::zero();
                let mut dx = vec![E::zero(); g.len()];
                for (j, (&gv, &v)) in g.iter().zip(xv).enumerate() {
                    if v >= a {
                        da += gv;
                    } else if v > E::zero() {
                        dx[j] = gv;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *alpha, vec![da]);
            }
            Op::QuantSte { x, lo, hi } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { E::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

/// Gradients from one reverse pass, indexed by node.
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Vec<E>>>,
    params: Vec<(ParamId, Var)>,
}

impl<E: Element> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameters touched by the pass together with their gradients.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[E])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], v: Var, g: Vec<E>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn conv_geom(
    op: &'static str,
    xs: &[usize],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 2],
    padding: [usize; 2],
) -> Result<ConvGeom> {
    if stride[0] == 0 || stride[1] == 0 {
        return Err(Error::shape(op, "stride must be >= 1"));
    }
    let ho = kernels::out_extent(xs[2], kh, stride[0], padding[0]);
    let wo = kernels::out_extent(xs[3], kw, stride[1], padding[1]);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::shape(op, format!("kernel {kh}x{kw} larger than padded input {xs:?}")));
    };
    Ok(ConvGeom {
        n: xs[0],
        c_in: xs[1],
        h: xs[2],
        w: xs[3],
        c_out,
        kh,
        kw,
        sh: stride[0],
        sw: stride[1],
        ph: padding[0],
        pw: padding[1],
        ho,
        wo,
    })
}

/// `(channels, elements per channel block)` for per-channel ops on axis 1.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        1 => Ok((shape[0], 1)),
        2 => Ok((shape[1], 1)),
        4 => Ok((shape[1], shape[2] * shape[3])),
        _ => Err(Error::shape(op, format!("unsupported rank for {shape:?}"))),
    }
}

fn sign<E: Element>(v: E) -> E {
    if v > E::zero() {
        E::one()
    } else if v < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

pub(crate) fn round_half_up<E: Element>(v: E) -> E {
    (v + E::from_f64_lossy(0.5)).floor()
}

/// Heaviside with the keep-alive rule.
pub(crate) fn binarize<E: Element>(theta: &[E], tau: E) -> Vec<E> {
    let mut m: Vec<E> = theta
        .iter()
        .map(|&t| if t >= tau { E::one() } else { E::zero() })
        .collect();
    if !m.is_empty() && m.iter().all(|&v| v == E::zero()) {
        let mut best = 0;
        for (i, &t) in theta.iter().enumerate() {
            if t > theta[best] {
                best = i;
            }
        }
        m[best] = E::one();
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        t(shape, &d)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut g = Graph::new();
        let xv = g.input(t(&[1, 1, 3, 3], &x));
        let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(xv, w, [1, 1], [0, 0]).unwrap();
        assert_eq!(g.value(y).data(), &x[..]);
    }

    #[test]
    fn pointwise_conv_is_per_pixel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[1, 4, 3, 2]);
        let w = rand_t(&mut rng, &[2, 4, 1, 1]);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, [1, 1], [0, 0]).unwrap();
        let y = g.value(y).data();
        for o in 0..2 {
            for p in 0..6 {
                let mut acc = 0.0;
                for c in 0..4 {
                    acc += w.data()[o * 4 + c] * x.data()[c * 6 + p];
                }
                assert!((y[o * 6 + p] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 3, 3]));
        let w = g.input(Tensor::zeros(vec![1, 3, 1, 1]));
        assert!(matches!(g.conv2d(x, w, [1, 1], [0, 0]), Err(Error::Shape { .. })));
        assert!(g.conv2d(x, x, [0, 1], [0, 0]).is_err());
    }

    #[test]
    fn depthwise_identity_and_per_channel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[2, 2, 4, 4]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let id = g.input(t(&[2, 1, 1, 1], &[1.0, 1.0]));
        let y = g.depthwise_conv2d(xv, id, [1, 1], [0, 0]).unwrap();
        assert_eq!(g.value(y).data(), x.data());

        let w = rand_t(&mut rng, &[2, 1, 3, 3]);
        let wv = g.input(w.clone());
        let y = g.depthwise_conv2d(xv, wv, [2, 2], [1, 1]).unwrap();
        let y = g.value(y).clone();
        for c in 0..2 {
            let mut xs = Vec::new();
            for n in 0..2 {
                xs.extend_from_slice(&x.data()[(n * 2 + c) * 16..(n * 2 + c + 1) * 16]);
            }
            let mut h = Graph::new();
            let xc = h.input(t(&[2, 1, 4, 4], &xs));
            let wc = h.input(t(&[1, 1, 3, 3], &w.data()[c * 9..(c + 1) * 9]));
            let yc = h.conv2d(xc, wc, [2, 2], [1, 1]).unwrap();
            let yc = h.value(yc).data();
            for n in 0..2 {
                let got = &y.data()[(n * 2 + c) * 4..(n * 2 + c + 1) * 4];
                let want = &yc[n * 4..(n + 1) * 4];
                got.iter().zip(want).for_each(|(a, b)| assert!((a - b).abs() < 1e-12));
            }
        }
        let bad = g.input(Tensor::zeros(vec![3, 1, 3, 3]));
        assert!(g.depthwise_conv2d(xv, bad, [1, 1], [1, 1]).is_err());
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.3, -1.0]));
        let l = g.l1_loss(x, x).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
        let gr = g.backward(l).unwrap();
        assert!(gr.wrt(x).unwrap().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let p = g.input(t(&[2], &[1.0, 2.0]));
        let z = g.input(t(&[2], &[0.0, 0.0]));
        let l = g.l1_loss(p, z).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 3.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.wrt(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn grad_of_sum_is_ones_and_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2, 3], &[1.0; 6])).unwrap();
        for round in 1..=2 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let w = g.param(id).unwrap();
                let s = g.sum(w).unwrap();
                g.backward(s).unwrap()
            };
            store.accumulate(&grads).unwrap();
            let want = vec![round as f64; 6];
            assert_eq!(store.get(id).grad().unwrap(), &want[..]);
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(&mut rng, &[1, 2, 5, 5]);
        let w = rand_t(&mut rng, &[3, 2, 3, 3]);
        let a = 3.7;
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, wv) = (g.input(x), g.input(w.clone()));
            let y = g.conv2d(xv, wv, [1, 1], [1, 1]).unwrap();
            g.value(y).clone()
        };
        let y1 = run(x.map(|v| v * a));
        let y2 = run(x);
        for (p, q) in y1.data().iter().zip(y2.data()) {
            assert!((p - a * q).abs() <= 1e-6 * p.abs().max(1e-12));
        }
    }

    #[test]
    fn heaviside_forward_and_window() {
        let mut g = Graph::new();
        let th = g.input(t(&[2], &[10.0, -10.0]));
        let h = g.heaviside_ste(th, 0.5, 0.5).unwrap();
        assert_eq!(g.value(h).data(), &[1.0, 0.0]);

        let th = g.input(t(&[1], &[0.5]));
        let h = g.heaviside_ste(th, 0.5, 0.5).unwrap();
        assert_eq!(g.value(h).data(), &[1.0]);

        let vals = [-0.2, 0.0, 0.3, 0.5, 0.9, 1.0, 1.2];
        let th = g.input(t(&[vals.len()], &vals));
        let h = g.heaviside_ste(th, 0.5, 0.5).unwrap();
        let s = g.sum(h).unwrap();
        let m = g.scale(s, 1.0 / vals.len() as f64).unwrap();
        let gr = g.backward(m).unwrap();
        for (&v, &d) in vals.iter().zip(gr.wrt(th).unwrap()) {
            assert_eq!(d != 0.0, (v - 0.5f64).abs() <= 0.5, "theta {v}");
        }
    }

    #[test]
    fn keep_alive_picks_largest_theta() {
        assert_eq!(binarize(&[0.1, 0.4, 0.3], 0.5), vec![0.0, 1.0, 0.0]);
        assert_eq!(binarize(&[0.2, 0.2], 0.5), vec![1.0, 0.0]);
    }

    #[test]
    fn pact_output_stays_in_clip_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[64]).map(|v| v * 4.0);
        let mut g = Graph::new();
        let xv = g.input(x);
        let a = g.input(Tensor::scalar(1.5));
        let y = g.pact_quant(xv, a, 255).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (0.0..=1.5).contains(&v)));
    }

    #[test]
    fn quant_ste_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[50]);
        let eps = 1.0 / 127.0;
        let mut g = Graph::new();
        let xv = g.input(x);
        let q1 = g.quant_ste(xv, eps, -127.0, 127.0).unwrap();
        let q2 = g.quant_ste(q1, eps, -127.0, 127.0).unwrap();
        assert_eq!(g.value(q1).data(), g.value(q2).data());
    }
}
