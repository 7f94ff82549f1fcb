//! Fake-quantized fine-tuning, export to an integer-only graph, and an
//! accuracy comparison of the three versions.

use nanonas::quant::*;
use nanonas::zoo::*;

fn main() -> nanonas::Result<()> {
    let cam = Camera::new(DESK_HW[0], DESK_HW[1]);
    let (train_set, test_set) = generate_dataset(1200, 0, &LabelRanges::default(), &cam)?.split(1000)?;
    let arch = build_frontnet(&FrontnetConfig::desk().with_widths(vec![8, 8, 8, 16, 16, 32, 32]))?;
    let mut net = Network::init(&arch, 0, Some(train_set.label_means()))?;
    train(&mut net, &train_set, &TrainConfig { epochs: 6, ..TrainConfig::default() })?;

    let mut cfg = QuantConfig::default();
    cfg.train.epochs = 1;
    cfg.train.lr = 3e-4;
    let fq = fake_quantize_train(&net, &train_set, &cfg)?;
    let graph = integerize(&fq)?;
    let report = quantization_report(&net, &fq, &graph, &test_set)?;
    println!("MAE float {:.4}", report.float.mae_total());
    println!("MAE fake-quant {:.4} ({:+.1}%)", report.fake_quant.mae_total(), report.fake_quant_degradation_pct[OUTPUTS]);
    println!("MAE integer {:.4} ({:+.1}%)", report.integer.mae_total(), report.integer_degradation_pct[OUTPUTS]);

    let (codes, stats) = graph.run(test_set.image(0))?;
    println!(
        "image 0: codes {codes:?} -> {:.3?} (truth {:.3?}), {} MACs, {} float ops",
        codes.iter().map(|&c| c as f64 * graph.output_eps).collect::<Vec<_>>(),
        test_set.label(0),
        stats.macs,
        stats.float_ops
    );

    let path = std::env::temp_dir().join("nanonas_example.qgraph");
    save_integer_graph(&path, &graph)?;
    println!("{} bytes of weights written to {}", graph.weight_bytes(), path.display());
    Ok(())
}
