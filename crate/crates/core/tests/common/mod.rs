//! Shared fixtures for the integration and acceptance targets.
#![allow(dead_code)]

use nanonas::tensor::gradcheck::{check_gradients, GradCheck};
use nanonas::tensor::{Graph, Tensor, Var};
use nanonas::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Values bounded away from zero so piecewise-linear kinks stay out of reach
/// of the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Distinct values with gaps of at least 0.05 in shuffled order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 + rng.random_range(0.0..0.01)).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        data.swap(i, j);
    }
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, turning any op into a scalar loss
/// with a non-trivial upstream gradient.
fn project(g: &mut Graph<'static, f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = g.input(r.clone());
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn probe_for(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(&mut rng(seed ^ 0x9e37_79b9), shape, -1.0, 1.0)
}

type Case = fn(u64) -> Result<GradCheck>;

/// Every differentiable op paired with a randomized finite-difference check.
pub fn grad_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d_case),
        ("conv2d_strided_padded", conv2d_strided_case),
        ("depthwise_conv2d", depthwise_case),
        ("channel_bias", channel_bias_case),
        ("affine_channel", affine_case),
        ("relu", relu_case),
        ("max_pool", max_pool_case),
        ("global_avg_pool", gap_case),
        ("fully_connected", fc_case),
        ("l1_loss", l1_case),
        ("add", add_case),
        ("mul", mul_case),
        ("scale", scale_case),
        ("mul_outer", mul_outer_case),
        ("reshape_sum", reshape_case),
        ("chain_conv_relu_fc_l1", chain_case),
    ]
}

fn conv2d_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let p = probe_for(&[1, 3, 3, 3], seed);
    check_gradients(&[x, w], FD_STEP, |g, v| {
        let y = g.conv2d(v[0], v[1], [1, 1], [0, 0])?;
        project(g, y, &p)
    })
}

fn conv2d_strided_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 6, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let p = probe_for(&[2, 4, 3, 3], seed);
    check_gradients(&[x, w], FD_STEP, |g, v| {
        let y = g.conv2d(v[0], v[1], [2, 2], [1, 1])?;
        project(g, y, &p)
    })
}

fn depthwise_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 5, 6], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 1, 3, 3], -1.0, 1.0);
    let stride = if seed % 2 == 0 { [1, 1] } else { [2, 2] };
    let ho = (5 + 2 - 3) / stride[0] + 1;
    let wo = (6 + 2 - 3) / stride[1] + 1;
    let p = probe_for(&[2, 3, ho, wo], seed);
    check_gradients(&[x, w], FD_STEP, |g, v| {
        let y = g.depthwise_conv2d(v[0], v[1], stride, [1, 1])?;
        project(g, y, &p)
    })
}

fn channel_bias_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
    let b = uniform(&mut r, &[3], -1.0, 1.0);
    let p = probe_for(&[2, 3, 2, 2], seed);
    check_gradients(&[x, b], FD_STEP, |g, v| {
        let y = g.channel_bias(v[0], v[1])?;
        project(g, y, &p)
    })
}

fn affine_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0);
    let s = uniform(&mut r, &[3], -1.5, 1.5);
    let b = uniform(&mut r, &[3], -1.0, 1.0);
    let p = probe_for(&[2, 3, 3, 2], seed);
    check_gradients(&[x, s, b], FD_STEP, |g, v| {
        let y = g.affine_channel(v[0], v[1], v[2])?;
        project(g, y, &p)
    })
}

fn relu_case(seed: u64) -> Result<GradCheck> {
    let x = away_from_zero(&mut rng(seed), &[2, 3, 4]);
    let p = probe_for(&[2, 3, 4], seed);
    check_gradients(&[x], FD_STEP, |g, v| {
        let y = g.relu(v[0])?;
        project(g, y, &p)
    })
}

fn max_pool_case(seed: u64) -> Result<GradCheck> {
    let x = distinct(&mut rng(seed), &[1, 2, 6, 6]);
    let p = probe_for(&[1, 2, 3, 3], seed);
    check_gradients(&[x], FD_STEP, |g, v| {
        let y = g.max_pool(v[0], 2, 2)?;
        project(g, y, &p)
    })
}

fn gap_case(seed: u64) -> Result<GradCheck> {
    let x = uniform(&mut rng(seed), &[2, 3, 3, 4], -1.0, 1.0);
    let p = probe_for(&[2, 3], seed);
    check_gradients(&[x], FD_STEP, |g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, &p)
    })
}

fn fc_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    let p = probe_for(&[3, 4], seed);
    check_gradients(&[x, w, b], FD_STEP, |g, v| {
        let y = g.fully_connected(v[0], v[1], Some(v[2]))?;
        project(g, y, &p)
    })
}

fn l1_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let pred = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let gap = away_from_zero(&mut r, &[3, 4]);
    let target = Tensor::new(
        vec![3, 4],
        pred.data().iter().zip(gap.data()).map(|(a, b)| a + b).collect(),
    )?;
    check_gradients(&[pred, target], FD_STEP, |g, v| g.l1_loss(v[0], v[1]))
}

fn add_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let c = Tensor::scalar(r.random_range(-1.0..1.0));
    let p = probe_for(&[2, 3], seed);
    check_gradients(&[a, b, c], FD_STEP, |g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.add(y, v[2])?;
        project(g, y, &p)
    })
}

fn mul_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let c = Tensor::scalar(r.random_range(-1.0..1.0));
    let p = probe_for(&[2, 3], seed);
    check_gradients(&[a, b, c], FD_STEP, |g, v| {
        let y = g.mul(v[0], v[1])?;
        let y = g.mul(y, v[2])?;
        project(g, y, &p)
    })
}

fn scale_case(seed: u64) -> Result<GradCheck> {
    let x = uniform(&mut rng(seed), &[4], -1.0, 1.0);
    let p = probe_for(&[4], seed);
    check_gradients(&[x], FD_STEP, |g, v| {
        let y = g.scale(v[0], -2.5)?;
        project(g, y, &p)
    })
}

fn mul_outer_case(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let w = uniform(&mut r, &[4, 2, 3, 3], -1.0, 1.0);
    let m = uniform(&mut r, &[4], -1.0, 1.0);
    let p = probe_for(&[4, 2, 3, 3], seed);
    check_gradients(&[w, m], FD_STEP, |g, v| {
        let y = g.mul_outer(v[0], v[1])?;
        project(g, y, &p)
    })
}

fn reshape_case(seed: u64) -> Result<GradCheck> {
    let x = uniform(&mut rng(seed), &[2, 3, 2, 2], -1.0, 1.0);
    let p = probe_for(&[2, 12], seed);
    check_gradients(&[x], FD_STEP, |g, v| {
        let y = g.flatten(v[0])?;
        project(g, y, &p)
    })
}

/// conv -> relu -> fc -> l1, resampled until every kink (relu input, loss
/// residual) sits well outside the stencil.
fn chain_case(seed: u64) -> Result<GradCheck> {
    for attempt in 0..1000 {
        let mut r = rng(seed.wrapping_mul(1000).wrapping_add(attempt));
        let x = uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
        let w = uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let fw = uniform(&mut r, &[4, 27], -0.5, 0.5);
        let fb = uniform(&mut r, &[4], -0.5, 0.5);
        let t = uniform(&mut r, &[2, 4], -1.0, 1.0);

        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let pre = g.conv2d(xv, wv, [1, 1], [0, 0])?;
        let act = g.relu(pre)?;
        let flat = g.flatten(act)?;
        let (fwv, fbv) = (g.input(fw.clone()), g.input(fb.clone()));
        let out = g.fully_connected(flat, fwv, Some(fbv))?;
        let pre_ok = g.value(pre).data().iter().all(|v| v.abs() > 0.02);
        let res_ok = g
            .value(out)
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| (a - b).abs() > 0.02);
        if !(pre_ok && res_ok) {
            continue;
        }
        return check_gradients(&[x, w, fw, fb, t], FD_STEP, |g, v| {
            let y = g.conv2d(v[0], v[1], [1, 1], [0, 0])?;
            let y = g.relu(y)?;
            let y = g.flatten(y)?;
            let y = g.fully_connected(y, v[2], Some(v[3]))?;
            g.l1_loss(y, v[4])
        });
    }
    panic!("no kink-free sample found for seed {seed}");
}

/// Random binary pattern with at least one alive entry per mask.
pub fn random_pattern(masks: &nanonas::nas::MaskSet, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    masks
        .states
        .iter()
        .map(|s| {
            let p_alive = rng.random_range(0.1..1.0);
            let mut v: Vec<bool> = (0..s.theta.len()).map(|_| rng.random_bool(p_alive)).collect();
            if !v.iter().any(|&b| b) {
                let k = rng.random_range(0..v.len());
                v[k] = true;
            }
            v
        })
        .collect()
}

/// Small Frontnet and MobileNet seeds for fast forward passes.
pub fn small_seeds() -> Vec<nanonas::zoo::ArchSpec> {
    use nanonas::zoo::*;
    vec![
        build_frontnet(&FrontnetConfig {
            input_hw: [24, 40],
            widths: vec![6, 6, 8, 8, 10, 10, 12],
        })
        .unwrap(),
        build_mobilenet(
            1.0,
            &MobileNetConfig {
                input_hw: [32, 32],
                widths: Some(vec![4, 6, 8, 8, 10, 10, 12, 12, 12, 12, 12, 12, 14, 14]),
                calibrated_head: false,
            },
        )
        .unwrap(),
    ]
}

pub fn random_images(n: usize, arch: &nanonas::zoo::ArchSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let [c, h, w] = arch.input;
    let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![n, c, h, w], data).unwrap()
}
