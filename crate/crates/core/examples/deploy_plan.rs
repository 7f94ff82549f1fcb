//! Memory fit, L1 tiling and cycle/power estimates for the reference
//! networks, plus the calibration of the cycle model against them.

use nanonas::deploy::*;
use nanonas::zoo::*;

fn main() -> nanonas::Result<()> {
    let mem = MemoryHierarchy::default();
    let model = CycleModel::default();
    for r in reference_networks()? {
        let net = DeployNet::from_arch(&r.arch)?;
        let report = deploy_report(&net, &mem, &model, &OperatingPoint::defaults())?;
        println!("{}", report.to_text());
    }

    let m1 = DeployNet::from_arch(&build_mobilenet(1.0, &MobileNetConfig::default())?)?;
    println!("mobilenet 1.0 seed: {:?}\n", fit_check(&m1, &mem));

    let cal = calibrate(&mem)?;
    println!(
        "calibrated efficiency: frontnet {:.2}, mobilenet {:.2} MAC/cycle",
        cal.model.frontnet_efficiency, cal.model.mobilenet_efficiency
    );
    for row in &cal.rows {
        println!(
            "{:<12} {:>9} cycles (ref {:.1e})  {:>5.1} fps (ref {:.1})",
            row.name, row.cycles, row.cycles_ref, row.fps, row.fps_ref
        );
    }
    Ok(())
}
