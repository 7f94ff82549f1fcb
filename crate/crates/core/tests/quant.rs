mod common;

use common::{random_images, rng};
use nanonas::quant::*;
use nanonas::tensor::Tensor;
use nanonas::zoo::*;
use proptest::prelude::*;

fn tiny_setup(seed: u64) -> (Network, Dataset, Dataset) {
    let cam = Camera::new(24, 40);
    let data = generate_dataset(400, seed, &LabelRanges::default(), &cam).unwrap();
    let (tr, te) = data.split(300).unwrap();
    let arch = build_frontnet(&FrontnetConfig {
        input_hw: [24, 40],
        widths: vec![8, 8, 8, 16, 16, 16, 16],
    })
    .unwrap();
    let mut net = Network::init(&arch, seed, Some(tr.label_means())).unwrap();
    train(
        &mut net,
        &tr,
        &TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    (net, tr, te)
}

fn quick_cfg(epochs: usize) -> QuantConfig {
    let mut cfg = QuantConfig::default();
    cfg.train.epochs = epochs;
    cfg.train.lr = 3e-4;
    cfg
}

fn codes(fq_out: &Tensor<f64>, eps: f64) -> Vec<i64> {
    fq_out.data().iter().map(|v| (v / eps).round() as i64).collect()
}

#[test]
fn integer_matches_fake_quant_within_one_quantum() {
    let (net, tr, _) = tiny_setup(1);
    let fq = fake_quantize_train(&net, &tr, &quick_cfg(1)).unwrap();
    let g = integerize(&fq).unwrap();
    let mut r = rng(2);
    let x = random_images(100, &net.arch, &mut r);
    let reference = codes(&fq.infer(x.clone()).unwrap(), g.output_eps);
    let per = x.len() / 100;
    for i in 0..100 {
        let (q, stats) = g.run(&x.data()[i * per..(i + 1) * per]).unwrap();
        assert_eq!(stats.float_ops, 0);
        assert_eq!(stats.macs, count_macs(&net.arch, net.arch.input).unwrap());
        for (k, &v) in q.iter().enumerate() {
            assert!((v as i64 - reference[i * 4 + k]).abs() <= 1, "image {i} output {k}");
        }
    }
}

#[test]
fn every_tensor_obeys_the_reconstruction_bound() {
    let (net, tr, _) = tiny_setup(3);
    let fq = fake_quantize_train(&net, &tr, &quick_cfg(1)).unwrap();
    let g = integerize(&fq).unwrap();
    for (j, (l, s)) in g.layers.iter().zip(&g.scales).enumerate() {
        if l.weight.is_empty() {
            continue;
        }
        let w = fq.params.by_name(&format!("{j}.weight")).unwrap();
        for (&t, &q) in w.data().iter().zip(&l.weight) {
            assert!((f64::from(t) - s.eps_w * f64::from(q)).abs() <= s.eps_w / 2.0 * (1.0 + 1e-12));
        }
        let b = fq.params.by_name(&format!("{j}.bias")).unwrap();
        let eb = s.eps_in * s.eps_w;
        for (&t, &q) in b.data().iter().zip(&l.bias) {
            assert!((f64::from(t) - eb * f64::from(q)).abs() <= eb / 2.0 * (1.0 + 1e-12));
        }
    }
    // Activations: every fake-quantized value sits on its grid inside [0, 255 eps].
    let (x, _) = tr.batch(&[0, 1, 2, 3]).unwrap();
    for (j, a) in fq.activations(x).unwrap() {
        let eps = g.scales[j].eps_out;
        for &v in a.data() {
            let q = (v / eps).round();
            assert!((v - q * eps).abs() <= eps * 1e-9 && (0.0..=255.0).contains(&q));
        }
    }
}

#[test]
fn folding_preserves_the_float_function() {
    let (net, tr, _) = tiny_setup(4);
    let fq = FakeQuantNet::from_float(&net, &tr, &QuantConfig::default()).unwrap();
    let (x, _) = tr.batch(&[0, 5, 9]).unwrap();
    let a = net.infer(x.clone()).unwrap();
    let b = fq.infer_float(x).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-4, "{p} vs {q}");
    }
}

#[test]
fn single_linear_layer_matches_fake_quant() {
    let arch = ArchSpec {
        name: "linear".into(),
        family: Family::Custom,
        input: [1, 6, 5],
        output_dim: 4,
        width_multiplier: None,
        layers: vec![LayerSpec::fc(30, 4)],
    };
    let data = generate_dataset(64, 0, &LabelRanges::default(), &Camera::new(6, 5)).unwrap();
    let net = Network::init(&arch, 9, Some(data.label_means())).unwrap();
    let fq = FakeQuantNet::from_float(&net, &data, &QuantConfig::default()).unwrap();
    let g = integerize(&fq).unwrap();
    for i in 0..data.len() {
        let (x, _) = data.batch(&[i]).unwrap();
        let reference = codes(&fq.infer(x).unwrap(), g.output_eps);
        let (q, _) = g.run(data.image(i)).unwrap();
        for k in 0..4 {
            assert!((q[k] as i64 - reference[k]).abs() <= 1);
        }
    }
}

#[test]
fn zero_image_with_zero_biases_gives_zero() {
    let (net, tr, _) = tiny_setup(5);
    let fq = FakeQuantNet::from_float(&net, &tr, &QuantConfig::default()).unwrap();
    let mut g = integerize(&fq).unwrap();
    g.layers.iter_mut().for_each(|l| l.bias.iter_mut().for_each(|b| *b = 0));
    let [c, h, w] = g.input;
    let (q, _) = int_forward(&g, &vec![0u8; c * h * w]).unwrap();
    assert_eq!(q, vec![0; 4]);
    assert!(int_forward(&g, &[0u8; 3]).is_err());
}

#[test]
fn graph_file_round_trip_and_determinism() {
    let (net, tr, _) = tiny_setup(6);
    let fq = FakeQuantNet::from_float(&net, &tr, &QuantConfig::default()).unwrap();
    let g = integerize(&fq).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.qgraph");
    save_integer_graph(&path, &g).unwrap();
    let back = load_integer_graph(&path).unwrap();
    assert_eq!(back, g);
    let a = back.run(tr.image(0)).unwrap();
    let b = g.run(tr.image(0)).unwrap();
    assert_eq!(a, b);
    std::fs::write(&path, b"garbage!garbage").unwrap();
    assert!(load_integer_graph(&path).is_err());
}

#[test]
fn report_covers_all_outputs_and_degrades_monotonically() {
    let (net, tr, te) = tiny_setup(7);
    let fq = fake_quantize_train(&net, &tr, &quick_cfg(0)).unwrap();
    let g = integerize(&fq).unwrap();
    let r = quantization_report(&net, &fq, &g, &te).unwrap();
    assert_eq!(r.fake_quant_degradation_pct.len(), OUTPUTS + 1);
    let tol = 1.05;
    assert!(r.float.mae_total() <= r.fake_quant.mae_total() * tol);
    assert!(r.fake_quant.mae_total() <= r.integer.mae_total() * tol);
    let d = (r.integer.mae_total() - r.fake_quant.mae_total()).abs() / r.fake_quant.mae_total();
    assert!(d <= 0.02, "integer vs fake-quant MAE differ by {d}");
    let same = quantization_report(&net, &fq, &g, &te).unwrap();
    assert_eq!(same, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn requantizer_tracks_its_ratio(ratio in 1e-8f64..100.0, acc in -1_000_000i32..1_000_000) {
        let rq = encode_scale(ratio).unwrap();
        let exact = acc as f64 * decode_scale(rq);
        prop_assert!((rq.apply(acc) as f64 - exact).abs() <= 0.5 + 1e-9);
        prop_assert!((decode_scale(rq) / ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_quantization_is_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 1..40), eps in 0.001f64..0.5) {
        let q = quantize_values(&v, eps, -127.0, 127.0);
        let back: Vec<f64> = q.iter().map(|&k| k as f64 * eps).collect();
        prop_assert_eq!(quantize_values(&back, eps, -127.0, 127.0), q);
    }
}
