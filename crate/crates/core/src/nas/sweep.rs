//! Lambda sweeps and Pareto fronts.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bind_shared_masks, extract_network, nas_train_step, DEFAULT_TAU, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::tensor::Sgd;
use crate::zoo::{
    count_macs, count_params, epoch_batches, evaluate, train, ArchSpec, Dataset, Network, TrainConfig, OUTPUTS,
};

pub const SWEEP_SCHEMA_VERSION: u32 = 1;

/// Default lambda interval explored by a sweep.
pub const DEFAULT_LAMBDA_RANGE: (f64, f64) = (5e-11, 5e-5);

/// `n` log-spaced values from `lo` to `hi`, both included.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return Err(Error::InvalidArgument(format!("bad log grid [{lo}, {hi}] x {n}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub lambdas: Vec<f64>,
    /// Multiplies every lambda before use.
    pub lambda_scale: f64,
    pub search_epochs: usize,
    pub mask_lr: f32,
    pub tau: f32,
    pub window: f32,
    /// Optimizer and schedule for both the search and the final training.
    pub train: TrainConfig,
    /// Fine-tune the extracted weights instead of training from scratch.
    pub reuse_weights: bool,
    /// Worker threads, 0 lets rayon decide.
    pub threads: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambdas: log_grid(DEFAULT_LAMBDA_RANGE.0, DEFAULT_LAMBDA_RANGE.1, 7).expect("static grid"),
            lambda_scale: 1.0,
            search_epochs: 10,
            mask_lr: 1.0,
            tau: DEFAULT_TAU,
            window: DEFAULT_WINDOW,
            train: TrainConfig::default(),
            reuse_weights: false,
            threads: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) || !(self.lambda_scale >= 0.0) {
            return Err(Error::InvalidArgument("lambdas must be finite and >= 0".into()));
        }
        if !(self.mask_lr.is_finite() && self.mask_lr >= 0.0 && self.window >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bad mask settings (lr={}, tau={}, window={})",
                self.mask_lr, self.tau, self.window
            )));
        }
        Ok(())
    }
}

/// One evaluated architecture of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub arch: ArchSpec,
    pub mae: [f64; OUTPUTS],
    pub r2: [f64; OUTPUTS],
    pub mae_total: f64,
    pub params: usize,
    pub macs: u64,
    pub cycles: Option<u64>,
}

/// Outcome of one lambda: a point, or the error that stopped it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lambda: f64,
    pub point: Option<ParetoPoint>,
    pub error: Option<String>,
    /// Task loss and regularizer of the last search step.
    pub final_task_loss: Option<f64>,
    pub final_reg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub seed_params: usize,
    pub records: Vec<SweepRecord>,
}

impl SweepSummary {
    pub fn points(&self) -> Vec<ParetoPoint> {
        self.records.iter().filter_map(|r| r.point.clone()).collect()
    }
}

type CostFn<'a> = &'a (dyn Fn(&ArchSpec) -> Result<u64> + Sync);

/// Searches every lambda of `cfg` independently (in parallel) from the same
/// seed initialization. `cost` fills [`ParetoPoint::cycles`].
pub fn lambda_sweep(
    seed: &ArchSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &SearchConfig,
    cost: Option<CostFn<'_>>,
) -> Result<SweepSummary> {
    cfg.validate()?;
    seed.validate()?;
    let run = || -> Vec<SweepRecord> {
        cfg.lambdas
            .par_iter()
            .map(|&lambda| search_one(seed, train_set, test_set, cfg, lambda, cost))
            .collect()
    };
    let records = if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)
    } else {
        run()
    };
    Ok(SweepSummary {
        schema_version: SWEEP_SCHEMA_VERSION,
        seed_params: count_params(seed),
        records,
    })
}

fn search_one(
    seed: &ArchSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &SearchConfig,
    lambda: f64,
    cost: Option<CostFn<'_>>,
) -> SweepRecord {
    let mut rec = SweepRecord {
        lambda,
        point: None,
        error: None,
        final_task_loss: None,
        final_reg: None,
    };
    match search_inner(seed, train_set, test_set, cfg, lambda, cost, &mut rec) {
        Ok((p, _)) => rec.point = Some(p),
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Result of a single-lambda search: the final trained network and its record.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub net: Network,
    pub record: SweepRecord,
}

/// Searches one lambda and keeps the trained network. Errors are returned
/// instead of being recorded.
pub fn search_lambda(
    seed: &ArchSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &SearchConfig,
    lambda: f64,
    cost: Option<CostFn<'_>>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    seed.validate()?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let mut record = SweepRecord {
        lambda,
        point: None,
        error: None,
        final_task_loss: None,
        final_reg: None,
    };
    let (p, net) = search_inner(seed, train_set, test_set, cfg, lambda, cost, &mut record)?;
    record.point = Some(p);
    Ok(SearchOutcome { net, record })
}

fn search_inner(
    seed: &ArchSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &SearchConfig,
    lambda: f64,
    cost: Option<CostFn<'_>>,
    rec: &mut SweepRecord,
) -> Result<(ParetoPoint, Network)> {
    let means = train_set.label_means();
    let mut net = Network::init(seed, cfg.train.seed, Some(means))?;
    let mut masks = bind_shared_masks(seed)?;
    for s in &mut masks.states {
        s.tau = cfg.tau;
        s.window = cfg.window;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum);
    let lam = (lambda * cfg.lambda_scale) as f32;
    for _ in 0..cfg.search_epochs {
        for idx in epoch_batches(train_set.len(), cfg.train.batch_size, &mut rng) {
            let (x, y) = train_set.batch(&idx)?;
            let l = nas_train_step(&mut net, &mut opt, &mut masks, x, y, lam, cfg.mask_lr)?;
            rec.final_task_loss = Some(l.task.into());
            rec.final_reg = Some(l.reg.into());
        }
    }
    let pattern = masks.binarized();
    let pruned = extract_network(&net, &masks, &pattern)?;
    let mut net = if cfg.reuse_weights {
        pruned
    } else {
        Network::init(&pruned.arch, cfg.train.seed, Some(means))?
    };
    train(&mut net, train_set, &cfg.train)?;
    let m = evaluate(&net, test_set)?;
    let arch = net.arch.clone();
    let point = ParetoPoint {
        lambda,
        params: count_params(&arch),
        macs: count_macs(&arch, arch.input)?,
        cycles: cost.map(|f| f(&arch)).transpose()?,
        mae: m.mae,
        r2: m.r2,
        mae_total: m.mae_total(),
        arch,
    };
    Ok((point, net))
}

/// Cost used on the x-axis of a front.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostAxis {
    Params,
    Macs,
    Cycles,
}

impl CostAxis {
    pub fn of(self, p: &ParetoPoint) -> Option<u64> {
        match self {
            CostAxis::Params => Some(p.params as u64),
            CostAxis::Macs => Some(p.macs),
            CostAxis::Cycles => p.cycles,
        }
    }
}

/// Points not dominated in (`mae_total`, cost), sorted by cost. Points with
/// equal cost and error collapse to the one with fewer parameters. Points
/// without the requested cost are ignored.
pub fn pareto_front(points: &[ParetoPoint], axis: CostAxis) -> Vec<ParetoPoint> {
    let mut pts: Vec<(u64, &ParetoPoint)> = points
        .iter()
        .filter(|p| p.mae_total.is_finite())
        .filter_map(|p| axis.of(p).map(|c| (c, p)))
        .collect();
    pts.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.mae_total.total_cmp(&b.1.mae_total))
            .then(a.1.params.cmp(&b.1.params))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    let mut best = f64::INFINITY;
    for (_, p) in pts {
        if p.mae_total < best {
            best = p.mae_total;
            front.push(p.clone());
        }
    }
    front
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal samples of size >= 2 ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    schema_version: u32,
    lambda: f64,
    status: String,
    params: Option<usize>,
    macs: Option<u64>,
    cycles: Option<u64>,
    mae_x: Option<f64>,
    mae_y: Option<f64>,
    mae_z: Option<f64>,
    mae_phi: Option<f64>,
    mae_total: Option<f64>,
    r2_x: Option<f64>,
    r2_y: Option<f64>,
    r2_z: Option<f64>,
    r2_phi: Option<f64>,
    error: Option<String>,
}

/// One CSV row per lambda. Architectures are not part of the CSV.
pub fn write_sweep_csv<W: Write>(w: W, summary: &SweepSummary) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in &summary.records {
        let p = r.point.as_ref();
        wr.serialize(Row {
            schema_version: SWEEP_SCHEMA_VERSION,
            lambda: r.lambda,
            status: if p.is_some() { "ok" } else { "failed" }.into(),
            params: p.map(|p| p.params),
            macs: p.map(|p| p.macs),
            cycles: p.and_then(|p| p.cycles),
            mae_x: p.map(|p| p.mae[0]),
            mae_y: p.map(|p| p.mae[1]),
            mae_z: p.map(|p| p.mae[2]),
            mae_phi: p.map(|p| p.mae[3]),
            mae_total: p.map(|p| p.mae_total),
            r2_x: p.map(|p| p.r2[0]),
            r2_y: p.map(|p| p.r2[1]),
            r2_z: p.map(|p| p.r2[2]),
            r2_phi: p.map(|p| p.r2[3]),
            error: r.error.clone(),
        })?;
    }
    wr.flush()?;
    Ok(())
}

/// `(lambda, params, mae_total)` of every successful row.
pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<(f64, usize, f64)>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize::<Row>() {
        let row = row?;
        if row.schema_version != SWEEP_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: row.schema_version,
                expected: SWEEP_SCHEMA_VERSION,
            });
        }
        if let (Some(p), Some(m)) = (row.params, row.mae_total) {
            out.push((row.lambda, p, m));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_frontnet, FrontnetConfig};

    fn point(mae: f64, params: usize, cycles: Option<u64>) -> ParetoPoint {
        ParetoPoint {
            lambda: 0.0,
            arch: build_frontnet(&FrontnetConfig {
                input_hw: [32, 48],
                widths: vec![2; 7],
            })
            .unwrap(),
            mae: [mae; 4],
            r2: [0.0; 4],
            mae_total: mae,
            params,
            macs: params as u64 * 10,
            cycles,
        }
    }

    #[test]
    fn grid_endpoints() {
        let g = log_grid(5e-11, 5e-5, 7).unwrap();
        assert_eq!(g.len(), 7);
        assert!((g[0] / 5e-11 - 1.0).abs() < 1e-12);
        assert!((g[6] / 5e-5 - 1.0).abs() < 1e-12);
        assert!((g[1] / 5e-10 - 1.0).abs() < 1e-9);
        assert!(log_grid(0.0, 1.0, 3).is_err());
    }

    #[test]
    fn front_drops_dominated_and_ties() {
        let pts = vec![
            point(0.5, 100, Some(10)),
            point(0.4, 200, Some(20)),
            point(0.45, 250, Some(25)),
            point(0.4, 150, Some(20)),
            point(0.3, 300, None),
        ];
        let f = pareto_front(&pts, CostAxis::Cycles);
        assert_eq!(f.len(), 2);
        assert_eq!(f[1].params, 150);
        assert_eq!(pareto_front(&pts, CostAxis::Params).len(), 3);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 10.0, 5.0, 1.0]).unwrap();
        assert!(r < -0.9);
    }

    #[test]
    fn csv_round_trip() {
        let s = SweepSummary {
            schema_version: SWEEP_SCHEMA_VERSION,
            seed_params: 1000,
            records: vec![
                SweepRecord {
                    lambda: 1e-9,
                    point: Some(point(0.25, 500, Some(7))),
                    error: None,
                    final_task_loss: Some(1.0),
                    final_reg: Some(500.0),
                },
                SweepRecord {
                    lambda: 1e-3,
                    point: None,
                    error: Some("diverged".into()),
                    final_task_loss: None,
                    final_reg: None,
                },
            ],
        };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &s).unwrap();
        let rows = read_sweep_csv(buf.as_slice()).unwrap();
        assert_eq!(rows, vec![(1e-9, 500, 0.25)]);
    }
}
