//! Differentiable channel search: a small lambda sweep with cycle costs
//! from the deployment model, printed as two Pareto fronts.

use nanonas::deploy::*;
use nanonas::nas::*;
use nanonas::zoo::*;

fn main() -> nanonas::Result<()> {
    let cam = Camera::new(DESK_HW[0], DESK_HW[1]);
    let (train_set, test_set) = generate_dataset(700, 1, &LabelRanges::default(), &cam)?.split(600)?;
    let seed = build_frontnet(&FrontnetConfig::desk().with_widths(vec![8, 8, 8, 16, 16, 32, 32]))?;
    let cfg = SearchConfig {
        lambdas: log_grid(5e-9, 5e-5, 5)?,
        lambda_scale: 100.0,
        search_epochs: 2,
        mask_lr: 1.0,
        train: TrainConfig { epochs: 3, ..TrainConfig::default() },
        ..SearchConfig::default()
    };
    let mem = MemoryHierarchy::default();
    let model = CycleModel::default();
    let cycles = |a: &ArchSpec| Ok(estimate_cycles(&plan_tiling(&DeployNet::from_arch(a)?, &mem)?, &model).total);
    let sweep = lambda_sweep(&seed, &train_set, &test_set, &cfg, Some(&cycles))?;

    println!("seed: {} params", sweep.seed_params);
    for r in &sweep.records {
        match &r.point {
            Some(p) => println!(
                "lambda {:.1e}: {:>6} params {:>9} cycles  MAE {:.3}",
                r.lambda,
                p.params,
                p.cycles.unwrap_or(0),
                p.mae_total
            ),
            None => println!("lambda {:.1e}: {}", r.lambda, r.error.as_deref().unwrap_or("failed")),
        }
    }
    let pts = sweep.points();
    for axis in [CostAxis::Params, CostAxis::Cycles] {
        let front: Vec<String> = pareto_front(&pts, axis).iter().map(|p| format!("{:.1e}", p.lambda)).collect();
        println!("{axis:?} front: {}", front.join(" "));
    }
    write_sweep_csv(std::io::stdout(), &sweep)?;
    Ok(())
}
