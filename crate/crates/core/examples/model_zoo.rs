//! Seed architectures, their cost, and a short training run on the
//! synthetic pose dataset.

use nanonas::zoo::*;

fn main() -> nanonas::Result<()> {
    let seeds = [
        build_frontnet(&FrontnetConfig::default())?,
        build_mobilenet(1.0, &MobileNetConfig::default())?,
        build_mobilenet(0.25, &MobileNetConfig::default())?,
    ];
    for a in &seeds {
        println!("{:<16} {:>9} params {:>11} MACs at {:?}", a.name, count_params(a), count_macs(a, a.input)?, a.input);
    }

    let cam = Camera::new(DESK_HW[0], DESK_HW[1]);
    let (train_set, test_set) = generate_dataset(1200, 0, &LabelRanges::default(), &cam)?.split(1000)?;
    let arch = build_frontnet(&FrontnetConfig::desk().with_widths(vec![8, 8, 8, 16, 16, 32, 32]))?;
    let mut net = Network::init(&arch, 0, Some(train_set.label_means()))?;
    let before = evaluate(&net, &test_set)?;
    let log = train(&mut net, &train_set, &TrainConfig { epochs: 6, ..TrainConfig::default() })?;
    let after = evaluate(&net, &test_set)?;
    println!("epoch losses {:.3?}", log.epoch_loss);
    for (k, name) in OUTPUT_NAMES.iter().enumerate() {
        println!("{name:>4}: MAE {:.3} -> {:.3}, R2 {:.2}", before.mae[k], after.mae[k], after.r2[k]);
    }
    Ok(())
}
