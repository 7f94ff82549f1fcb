//! The command-line pipeline driven from code: train, quantize, plan,
//! simulate and report into one directory, then replay a manifest.

use nanonas::cli::*;

fn main() -> nanonas::Result<()> {
    let root = std::env::temp_dir().join("nanonas_pipeline");
    let d = |s: &str| root.join(s);
    let sets: Vec<String> = [
        "data.n_train=600",
        "data.n_test=150",
        "model.widths=[8,8,8,16,16,32,32]",
        "train.epochs=4",
        "quant.train.epochs=1",
        "simulate.seeds=[0,1]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = RunConfig::resolve(None, &sets)?;

    execute(&Job::Train, &cfg, &d("train"))?;
    execute(&Job::Quantize { model: d("train/model.ckpt") }, &cfg, &d("quant"))?;
    execute(&Job::Plan { input: d("quant/model.qgraph") }, &cfg, &d("plan"))?;
    let sim = Job::Simulate { estimator: EstimatorChoice::Model { path: d("quant/model.qgraph") } };
    execute(&sim, &cfg, &d("sim"))?;
    for run in ["train", "quant", "plan", "sim"] {
        let (r, _) = build_report(&d(run))?;
        print!("{}", r.text);
    }

    let r = replay(&d("quant").join(MANIFEST_FILE), &d("quant_replay"))?;
    println!("replay of quantize: {}", if r.identical() { "identical" } else { "differs" });
    Ok(())
}
