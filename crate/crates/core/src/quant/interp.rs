//! Integer-only interpreter. Nothing in this file touches floating point
//! arithmetic: activations are `u8` codes, weights `i8`, biases and
//! accumulators checked `i32`, requantization a fixed-point multiply and an
//! arithmetic shift with round-half-up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operation of one integer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum QOp {
    /// Convolution (or depthwise when `depthwise`) followed by a clipped
    /// activation on `[0, 255]`.
    Conv {
        depthwise: bool,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    MaxPool { k: usize, s: usize },
    GlobalPool,
    /// Classifier producing signed codes on `[-127, 127]`.
    Fc { c_in: usize, c_out: usize },
}

/// `x * mult / 2^shift`, rounded half up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requant {
    pub mult: i32,
    pub shift: u32,
}

impl Requant {
    pub fn apply(self, acc: i32) -> i64 {
        let v = acc as i64 * self.mult as i64;
        if self.shift == 0 {
            v
        } else {
            (v + (1i64 << (self.shift - 1))) >> self.shift
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntLayer {
    pub op: QOp,
    pub weight: Vec<i8>,
    pub bias: Vec<i32>,
    pub requant: Option<Requant>,
}

/// Integer inference counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntStats {
    pub macs: u64,
    /// Floating point operations executed. Stays 0: the interpreter has no
    /// float code path to count.
    pub float_ops: u64,
}

pub(crate) struct Act {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

fn overflow(layer: usize) -> Error {
    Error::AccumulatorOverflow { stage: layer }
}

fn clamp_u8(v: i64) -> u8 {
    v.clamp(0, 255) as u8
}

pub(crate) fn run_layer(j: usize, l: &IntLayer, x: Act, stats: &mut IntStats) -> Result<Act> {
    match l.op {
        QOp::Conv {
            depthwise,
            c_in,
            c_out,
            kernel: [kh, kw],
            stride: [sh, sw],
            padding: [ph, pw],
        } => {
            if x.c != c_in {
                return Err(Error::shape("int conv", format!("layer {j}: {} channels, expected {c_in}", x.c)));
            }
            let rq = l.requant.ok_or_else(|| Error::Format(format!("layer {j} has no requantizer")))?;
            if x.h + 2 * ph < kh || x.w + 2 * pw < kw {
                return Err(Error::shape("int conv", format!("layer {j}: kernel larger than input")));
            }
            let ho = (x.h + 2 * ph - kh) / sh + 1;
            let wo = (x.w + 2 * pw - kw) / sw + 1;
            let per = if depthwise { 1 } else { c_in };
            let mut out = vec![0u8; c_out * ho * wo];
            for o in 0..c_out {
                let chans = if depthwise { o..o + 1 } else { 0..c_in };
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = l.bias[o];
                        for c in chans.clone() {
                            let wbase = (o * per + if depthwise { 0 } else { c }) * kh * kw;
                            for ky in 0..kh {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= x.h as isize {
                                    continue;
                                }
                                let row = (c * x.h + iy as usize) * x.w;
                                for kx in 0..kw {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix < 0 || ix >= x.w as isize {
                                        continue;
                                    }
                                    let p = x.data[row + ix as usize] as i32 * l.weight[wbase + ky * kw + kx] as i32;
                                    acc = acc.checked_add(p).ok_or_else(|| overflow(j))?;
                                }
                            }
                        }
                        stats.macs += (per * kh * kw) as u64;
                        out[(o * ho + oy) * wo + ox] = clamp_u8(rq.apply(acc));
                    }
                }
            }
            Ok(Act {
                c: c_out,
                h: ho,
                w: wo,
                data: out,
            })
        }
        QOp::MaxPool { k, s } => {
            if x.h < k || x.w < k || s == 0 {
                return Err(Error::shape("int max_pool", format!("layer {j}: {}x{} input", x.h, x.w)));
            }
            let (ho, wo) = ((x.h - k) / s + 1, (x.w - k) / s + 1);
            let mut out = vec![0u8; x.c * ho * wo];
            for c in 0..x.c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut m = 0u8;
                        for ky in 0..k {
                            for kx in 0..k {
                                m = m.max(x.data[(c * x.h + oy * s + ky) * x.w + ox * s + kx]);
                            }
                        }
                        out[(c * ho + oy) * wo + ox] = m;
                    }
                }
            }
            Ok(Act {
                c: x.c,
                h: ho,
                w: wo,
                data: out,
            })
        }
        QOp::GlobalPool => {
            let hw = (x.h * x.w) as i64;
            let out = x
                .data
                .chunks(x.h * x.w)
                .map(|ch| {
                    let s: i64 = ch.iter().map(|&v| v as i64).sum();
                    clamp_u8((2 * s + hw).div_euclid(2 * hw))
                })
                .collect();
            Ok(Act {
                c: x.c,
                h: 1,
                w: 1,
                data: out,
            })
        }
        QOp::Fc { .. } => Err(Error::Format(format!("classifier at layer {j} must be the last layer"))),
    }
}

pub(crate) fn run_fc(j: usize, l: &IntLayer, x: &Act, stats: &mut IntStats) -> Result<Vec<i32>> {
    let QOp::Fc { c_in, c_out } = l.op else {
        return Err(Error::Format(format!("layer {j} is not a classifier")));
    };
    if x.data.len() != c_in {
        return Err(Error::shape("int fc", format!("layer {j}: {} features, expected {c_in}", x.data.len())));
    }
    let rq = l.requant.ok_or_else(|| Error::Format(format!("layer {j} has no requantizer")))?;
    let mut out = Vec::with_capacity(c_out);
    for o in 0..c_out {
        let mut acc = l.bias[o];
        for (i, &v) in x.data.iter().enumerate() {
            acc = acc
                .checked_add(v as i32 * l.weight[o * c_in + i] as i32)
                .ok_or_else(|| overflow(j))?;
        }
        stats.macs += c_in as u64;
        out.push(rq.apply(acc).clamp(-127, 127) as i32);
    }
    Ok(out)
}

/// Runs one image given as `[C,H,W]` input codes. Returns the output codes;
/// the prediction is `output_eps * code`.
pub fn int_forward(graph: &super::IntegerGraph, image: &[u8]) -> Result<(Vec<i32>, IntStats)> {
    let [c, h, w] = graph.input;
    if image.len() != c * h * w {
        return Err(Error::shape("int_forward", format!("{} input codes for a {c}x{h}x{w} input", image.len())));
    }
    let Some((last, body)) = graph.layers.split_last() else {
        return Err(Error::Format("integer graph has no layers".into()));
    };
    let mut stats = IntStats::default();
    let mut x = Act {
        c,
        h,
        w,
        data: image.to_vec(),
    };
    for (j, l) in body.iter().enumerate() {
        x = run_layer(j, l, x, &mut stats)?;
    }
    let out = run_fc(body.len(), last, &x, &mut stats)?;
    Ok((out, stats))
}
