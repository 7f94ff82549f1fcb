//! L1 tiling. A tile spans `channels` output channels and `rows` output rows
//! over the full width. Non-channelwise layers need every input channel in
//! each tile. When a layer takes more than one tile all its buffers are
//! doubled so the DMA can fill one copy while the cluster computes on the
//! other.

use serde::{Deserialize, Serialize};

use super::{DeployLayer, DeployNet, MemoryHierarchy};
use crate::error::{Error, Result};
use crate::zoo::Family;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileBuffers {
    pub weights: usize,
    pub bias: usize,
    pub input: usize,
    pub output: usize,
}

impl TileBuffers {
    pub fn total(&self) -> usize {
        self.weights + self.bias + self.input + self.output
    }

    /// Bytes loaded before compute.
    pub fn inbound(&self) -> usize {
        self.weights + self.bias + self.input
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileShape {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Input rows `[lo, hi)` needed for output rows `[r0, r1)`.
fn input_rows(l: &DeployLayer, r0: usize, r1: usize) -> (usize, usize) {
    let (k, s, p, h) = (l.kernel[0], l.stride[0], l.padding[0], l.in_hw[0]);
    let lo = (r0 * s).saturating_sub(p);
    let hi = ((r1 - 1) * s + k).saturating_sub(p).min(h);
    (lo, hi)
}

/// Buffers of a full `channels x rows` tile. The input buffer is sized for
/// the unpadded worst case `(rows - 1) * stride + kernel`.
pub fn tile_buffers(l: &DeployLayer, channels: usize, rows: usize) -> TileBuffers {
    let kv = l.kernel[0] * l.kernel[1];
    let c_in = if l.channelwise() { channels } else { l.c_in };
    let in_rows = ((rows - 1) * l.stride[0] + l.kernel[0]).min(l.in_hw[0]);
    TileBuffers {
        weights: if !l.has_weights() {
            0
        } else if l.channelwise() {
            channels * kv
        } else {
            channels * l.c_in * kv
        },
        bias: if l.has_weights() { 4 * channels } else { 0 },
        input: c_in * in_rows * l.in_hw[1],
        output: channels * rows * l.out_hw[1],
    }
}

fn n_tiles(l: &DeployLayer, channels: usize, rows: usize) -> usize {
    l.c_out.div_ceil(channels) * l.out_hw[0].div_ceil(rows)
}

fn resident(l: &DeployLayer, channels: usize, rows: usize) -> usize {
    let b = tile_buffers(l, channels, rows).total();
    if n_tiles(l, channels, rows) > 1 {
        2 * b
    } else {
        b
    }
}

/// `a` is a better tiling than `b`: fewer tiles, then more kernel operations
/// per byte moved, then wider and taller tiles.
fn better(l: &DeployLayer, a: (usize, usize), b: (usize, usize)) -> bool {
    let (na, nb) = (n_tiles(l, a.0, a.1), n_tiles(l, b.0, b.1));
    if na != nb {
        return na < nb;
    }
    let per = l.ops_per_output() as u128 * l.out_hw[1] as u128;
    let oa = per * (a.0 * a.1) as u128 * tile_buffers(l, b.0, b.1).total() as u128;
    let ob = per * (b.0 * b.1) as u128 * tile_buffers(l, a.0, a.1).total() as u128;
    if oa != ob {
        return oa > ob;
    }
    (a.0, a.1) > (b.0, b.1)
}

/// One scheduled tile: output channels `c`, output rows `rows`, and the
/// input channel and row ranges it loads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TiledRegion {
    pub c: [usize; 2],
    pub rows: [usize; 2],
    pub in_c: [usize; 2],
    pub in_rows: [usize; 2],
    pub ops: u64,
    pub buffers: TileBuffers,
    /// Double-buffer slot.
    pub slot: usize,
}

/// Pipeline step `k`: load tile `k`, compute tile `k - 1`, store tile `k - 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub dma_in: Option<usize>,
    pub compute: Option<usize>,
    pub dma_out: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: DeployLayer,
    pub tile: TileShape,
    pub n_tiles: usize,
    pub double_buffered: bool,
    /// Buffers of one full tile.
    pub buffers: TileBuffers,
    /// L1 bytes reserved, counting both copies when double buffered.
    pub l1_bytes: usize,
    pub tiles: Vec<TiledRegion>,
}

impl LayerPlan {
    pub fn schedule(&self) -> Vec<Step> {
        let n = self.tiles.len();
        let at = |k: usize, lag: usize| k.checked_sub(lag).filter(|&i| i < n);
        (0..n + 2)
            .map(|k| Step {
                dma_in: at(k, 0),
                compute: at(k, 1),
                dma_out: at(k, 2),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub name: String,
    pub family: Family,
    pub hierarchy: MemoryHierarchy,
    pub layers: Vec<LayerPlan>,
}

impl TilingPlan {
    pub fn total_tiles(&self) -> usize {
        self.layers.iter().map(|l| l.n_tiles).sum()
    }
}

fn regions(l: &DeployLayer, channels: usize, rows: usize) -> Vec<TiledRegion> {
    let mut out = Vec::with_capacity(n_tiles(l, channels, rows));
    for c0 in (0..l.c_out).step_by(channels) {
        let c1 = (c0 + channels).min(l.c_out);
        for r0 in (0..l.out_hw[0]).step_by(rows) {
            let r1 = (r0 + rows).min(l.out_hw[0]);
            let (i0, i1) = input_rows(l, r0, r1);
            let in_c = if l.channelwise() { [c0, c1] } else { [0, l.c_in] };
            let b = tile_buffers(l, c1 - c0, r1 - r0);
            out.push(TiledRegion {
                c: [c0, c1],
                rows: [r0, r1],
                in_c,
                in_rows: [i0, i1],
                ops: l.ops_per_output() * ((c1 - c0) * (r1 - r0) * l.out_hw[1]) as u64,
                buffers: TileBuffers {
                    input: (in_c[1] - in_c[0]) * (i1 - i0) * l.in_hw[1],
                    ..b
                },
                slot: out.len() % 2,
            });
        }
    }
    out
}

/// Best tiling of one layer. A single tile needs no second copy and is
/// always best when it fits. Otherwise every candidate is double buffered,
/// its footprint grows with the row count, and for a fixed channel count only
/// the tallest feasible tile can win unless the kernel is smaller than its
/// stride.
pub fn plan_layer(l: &DeployLayer, mem: &MemoryHierarchy) -> Result<LayerPlan> {
    let w = l.weight_bytes();
    if w > mem.l2_bytes {
        return Err(Error::Untileable {
            layer: l.name.clone(),
            reason: format!("{w} B of weights exceed the {} B L2", mem.l2_bytes),
        });
    }
    let ho = l.out_hw[0];
    let mut best: Option<(usize, usize)> = None;
    if resident(l, l.c_out, ho) <= mem.l1_bytes {
        best = Some((l.c_out, ho));
    } else {
        let fits = |c: usize, r: usize| 2 * tile_buffers(l, c, r).total() <= mem.l1_bytes;
        let mut offer = |cand: (usize, usize)| {
            if best.is_none_or(|b| better(l, cand, b)) {
                best = Some(cand);
            }
        };
        for c in 1..=l.c_out {
            if !fits(c, 1) {
                break;
            }
            if l.kernel[0] < l.stride[0] {
                (1..=ho).filter(|&r| fits(c, r)).for_each(|r| offer((c, r)));
                continue;
            }
            let (mut lo, mut hi) = (1, ho);
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if fits(c, mid) {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            offer((c, lo));
        }
    }
    let Some((c, r)) = best else {
        return Err(Error::Untileable {
            layer: l.name.clone(),
            reason: format!(
                "a 1-channel, 1-row tile needs {} B of L1, only {} B available",
                resident(l, 1, 1),
                mem.l1_bytes
            ),
        });
    };
    let n = n_tiles(l, c, r);
    let buffers = tile_buffers(l, c, r);
    Ok(LayerPlan {
        layer: l.clone(),
        tile: TileShape {
            channels: c,
            rows: r,
            cols: l.out_hw[1],
        },
        n_tiles: n,
        double_buffered: n > 1,
        buffers,
        l1_bytes: resident(l, c, r),
        tiles: regions(l, c, r),
    })
}

pub fn plan_tiling(net: &DeployNet, mem: &MemoryHierarchy) -> Result<TilingPlan> {
    mem.validate()?;
    Ok(TilingPlan {
        name: net.name.clone(),
        family: net.family,
        hierarchy: *mem,
        layers: net.layers.iter().map(|l| plan_layer(l, mem)).collect::<Result<_>>()?,
    })
}

fn violation(layer: &DeployLayer, reason: String) -> Error {
    Error::Untileable {
        layer: layer.name.clone(),
        reason,
    }
}

/// Walks every schedule and checks that the tiles cover each layer's output
/// exactly once, load the input they read, and that the buffers alive at
/// each pipeline step fit L1. Buffer sizes are recomputed from the tile
/// geometry, not taken from the plan.
pub fn validate_plan(plan: &TilingPlan) -> Result<()> {
    let l1 = plan.hierarchy.l1_bytes;
    for lp in &plan.layers {
        let l = &lp.layer;
        let [ho, wo] = l.out_hw;
        let mut hits = vec![0u8; l.c_out * ho];
        let mut sizes = Vec::with_capacity(lp.tiles.len());
        for t in &lp.tiles {
            if t.c[0] >= t.c[1] || t.c[1] > l.c_out || t.rows[0] >= t.rows[1] || t.rows[1] > ho {
                return Err(violation(l, format!("tile {:?}x{:?} out of range", t.c, t.rows)));
            }
            for c in t.c[0]..t.c[1] {
                for r in t.rows[0]..t.rows[1] {
                    hits[c * ho + r] += 1;
                }
            }
            // rows actually read, accounting for padding
            let (k, s, p) = (l.kernel[0], l.stride[0], l.padding[0]);
            let need_lo = (t.rows[0] * s).saturating_sub(p);
            let need_hi = ((t.rows[1] - 1) * s + k).saturating_sub(p).min(l.in_hw[0]);
            if t.in_rows[0] > need_lo || t.in_rows[1] < need_hi {
                return Err(violation(l, format!("tile rows {:?} do not load input rows {need_lo}..{need_hi}", t.rows)));
            }
            let need_c = if l.channelwise() { t.c } else { [0, l.c_in] };
            if t.in_c[0] > need_c[0] || t.in_c[1] < need_c[1] {
                return Err(violation(l, format!("tile channels {:?} miss input channels {need_c:?}", t.c)));
            }
            let nc = t.c[1] - t.c[0];
            let kv = l.kernel[0] * l.kernel[1];
            let w = match (l.has_weights(), l.channelwise()) {
                (false, _) => 0,
                (true, true) => nc * kv,
                (true, false) => nc * l.c_in * kv,
            };
            let bias = if l.has_weights() { 4 * nc } else { 0 };
            let input = (t.in_c[1] - t.in_c[0]) * (t.in_rows[1] - t.in_rows[0]) * l.in_hw[1];
            let output = nc * (t.rows[1] - t.rows[0]) * wo;
            sizes.push((w + bias + input, output));
        }
        if let Some(i) = hits.iter().position(|&h| h != 1) {
            return Err(violation(
                l,
                format!("output channel {} row {} covered {} times", i / ho, i % ho, hits[i]),
            ));
        }
        for (k, step) in lp.schedule().iter().enumerate() {
            // inbound buffers live from load to compute, outputs from compute to store
            let mut live = 0;
            for i in [step.dma_in, step.compute].into_iter().flatten() {
                live += sizes[i].0;
            }
            for i in [step.compute, step.dma_out].into_iter().flatten() {
                live += sizes[i].1;
            }
            if live > l1 {
                return Err(violation(l, format!("step {k} holds {live} B in a {l1} B L1")));
            }
        }
        if lp.tiles.len() > 1 && !lp.double_buffered {
            return Err(violation(l, "multi-tile layer without double buffering".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::LayerKind;

    fn conv(c_in: usize, c_out: usize, k: usize, s: usize, hw: [usize; 2]) -> DeployLayer {
        DeployLayer::new(0, LayerKind::Conv, c_in, c_out, [k, k], [s, s], [k / 2, k / 2], hw).unwrap()
    }

    #[test]
    fn small_layer_is_one_tile() {
        let l = conv(4, 8, 3, 1, [8, 8]);
        let p = plan_layer(&l, &MemoryHierarchy::default()).unwrap();
        assert_eq!(p.n_tiles, 1);
        assert!(!p.double_buffered);
        assert_eq!(p.l1_bytes, 8 * 36 + 32 + 256 + 512);
    }

    #[test]
    fn oversized_layer_is_untileable() {
        let mem = MemoryHierarchy {
            l1_bytes: 1000,
            ..MemoryHierarchy::default()
        };
        let l = conv(64, 8, 3, 1, [8, 40]);
        match plan_layer(&l, &mem) {
            Err(Error::Untileable { layer, .. }) => assert_eq!(layer, "0:conv"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validator_rejects_a_missing_tile() {
        let l = conv(16, 64, 3, 1, [40, 40]);
        let mem = MemoryHierarchy::default();
        let mut plan = TilingPlan {
            name: "t".into(),
            family: Family::Custom,
            hierarchy: mem,
            layers: vec![plan_layer(&l, &mem).unwrap()],
        };
        validate_plan(&plan).unwrap();
        assert!(plan.layers[0].n_tiles > 1);
        plan.layers[0].tiles.pop();
        assert!(validate_plan(&plan).is_err());
    }
}
