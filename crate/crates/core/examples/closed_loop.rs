//! Closed-loop tracking of the moving subject with three estimators: ground
//! truth, a constant guess, and a small trained network.

use nanonas::sim::*;
use nanonas::zoo::*;

fn main() -> nanonas::Result<()> {
    let cam = Camera::new(DESK_HW[0], DESK_HW[1]);
    let ranges = LabelRanges { x: [0.6, 2.2], ..LabelRanges::default() };
    let train_set = generate_dataset(2000, 7, &ranges, &cam)?;
    let arch = build_frontnet(&FrontnetConfig::desk().with_widths(vec![16, 16, 16, 32, 32, 64, 64]))?;
    let mut net = Network::init(&arch, 7, Some(train_set.label_means()))?;
    train(&mut net, &train_set, &TrainConfig { epochs: 15, seed: 7, ..TrainConfig::default() })?;

    let cfg = SimConfig { estimate_hz: 120.0, ..SimConfig::default() };
    let estimators = [
        Estimator::Oracle,
        Estimator::Trivial(train_set.label_means()),
        Estimator::Float(&net),
    ];
    for est in &estimators {
        let ep = run_episode(est, &cfg, 0)?;
        let m = &ep.metrics;
        print!(
            "{:<8} e_xy {:.3} m  e_theta {:.3} rad  completion {:.1}%",
            ep.estimator, m.e_xy, m.e_theta, m.completion
        );
        match ep.lost_at {
            Some(t) => println!("  (lost at {t:.2} s)"),
            None => println!(),
        }
    }

    let ep = run_episode(&Estimator::Float(&net), &cfg, 1)?;
    let path = std::env::temp_dir().join("nanonas_trace.csv");
    write_trace_csv(std::fs::File::create(&path)?, &ep.trace)?;
    println!("{} trace rows written to {}", ep.trace.rows.len(), path.display());
    Ok(())
}
