mod common;

use nanonas::zoo::*;
use proptest::prelude::*;

/// Kolmogorov-Smirnov p-value of `xs` against U(lo, hi).
fn ks_uniform_p(xs: &mut [f64], lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let lam = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lam * lam).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

#[test]
fn labels_are_uniform_over_their_ranges() {
    let ranges = LabelRanges::default();
    let data = generate_dataset(2000, 21, &ranges, &Camera::new(24, 40)).unwrap();
    for (k, [lo, hi]) in ranges.as_array().into_iter().enumerate() {
        let mut xs: Vec<f64> = (0..data.len()).map(|i| f64::from(data.label(i)[k])).collect();
        let p = ks_uniform_p(&mut xs, lo, hi);
        assert!(p > 0.01, "output {k}: KS p = {p}");
    }
}

#[test]
fn silhouette_shrinks_with_distance_like_a_pinhole() {
    let cam = Camera::new(FULL_HW[0], FULL_HW[1]);
    let area = |x: f64| silhouette_area(&cam, &[x, 0.0, 0.2, 0.3]);
    let xs: Vec<f64> = (0..=10).map(|i| 2.0 + 0.1 * i as f64).collect();
    for w in xs.windows(2) {
        assert!(area(w[1]) < area(w[0]), "x {} -> {}", w[0], w[1]);
    }
    // Unclipped, projected area scales with (x / x')^2.
    for w in xs.windows(2) {
        let ratio = area(w[1]) / area(w[0]);
        let expect = (w[0] / w[1]).powi(2);
        assert!((ratio / expect - 1.0).abs() < 0.05, "ratio {ratio} vs {expect}");
    }
}

#[test]
fn halving_widths_quarters_the_convolutions() {
    let full = build_frontnet(&FrontnetConfig::default()).unwrap();
    let half = build_frontnet(&FrontnetConfig::default().with_widths(vec![16, 16, 16, 32, 32, 64, 64])).unwrap();
    let conv = |a: &ArchSpec| -> usize {
        a.conv_layers()
            .filter(|&i| i > 0)
            .map(|i| a.layers[i].param_count())
            .sum()
    };
    let r = conv(&half) as f64 / conv(&full) as f64;
    assert!((r - 0.25).abs() < 0.01, "{r}");
    let r = count_params(&half) as f64 / count_params(&full) as f64;
    assert!(r > 0.2 && r < 0.3, "{r}");
}

/// Per-output-element MAC count with shapes derived independently.
fn macs_by_loops(a: &ArchSpec) -> u64 {
    let [mut c, mut h, mut w] = a.input;
    let mut total = 0u64;
    for l in &a.layers {
        match l.kind {
            LayerKind::Conv | LayerKind::Pointwise | LayerKind::Depthwise | LayerKind::Pool => {
                let ho = (h + 2 * l.padding[0] - l.kernel[0]) / l.stride[0] + 1;
                let wo = (w + 2 * l.padding[1] - l.kernel[1]) / l.stride[1] + 1;
                if l.kind != LayerKind::Pool {
                    let per = if l.kind == LayerKind::Depthwise { 1 } else { c };
                    for _o in 0..l.c_out {
                        for _y in 0..ho {
                            for _x in 0..wo {
                                for _ci in 0..per {
                                    for _k in 0..l.kernel[0] * l.kernel[1] {
                                        total += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                c = l.c_out;
                h = ho;
                w = wo;
            }
            LayerKind::GlobalPool => {
                h = 1;
                w = 1;
            }
            LayerKind::Fc => {
                for _ in 0..c * h * w * l.c_out {
                    total += 1;
                }
            }
            _ => {}
        }
    }
    total
}

#[test]
fn counts_match_brute_force() {
    for a in [
        build_frontnet(&FrontnetConfig::default()).unwrap(),
        build_frontnet(&FrontnetConfig::desk()).unwrap(),
        build_mobilenet(0.25, &MobileNetConfig::default()).unwrap(),
    ] {
        assert_eq!(count_macs(&a, a.input).unwrap(), macs_by_loops(&a), "{}", a.name);
        let net = Network::init(&a, 0, None).unwrap();
        assert_eq!(count_params(&a), net.params.numel());
    }
}

#[test]
fn arch_json_round_trip_and_version_check() {
    let a = build_mobilenet(0.25, &MobileNetConfig::default()).unwrap();
    let s = a.to_json().unwrap();
    assert_eq!(ArchSpec::from_json(&s).unwrap(), a);
    let bumped = s.replace("\"schema_version\": 1", "\"schema_version\": 99");
    assert!(ArchSpec::from_json(&bumped).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn wider_layers_never_cost_fewer_macs(widths in proptest::collection::vec(1usize..24, 7), k in 0usize..7, extra in 1usize..8) {
        let cfg = FrontnetConfig { input_hw: [48, 80], widths: widths.clone() };
        let a = build_frontnet(&cfg).unwrap();
        let mut wider = widths;
        wider[k] += extra;
        let b = build_frontnet(&FrontnetConfig { input_hw: [48, 80], widths: wider }).unwrap();
        prop_assert!(count_macs(&b, b.input).unwrap() > count_macs(&a, a.input).unwrap());
        prop_assert!(count_params(&b) > count_params(&a));
    }

    #[test]
    fn larger_inputs_never_cost_fewer_macs(dh in 0usize..4, dw in 0usize..4) {
        let a = build_frontnet(&FrontnetConfig::desk()).unwrap();
        let [_, h, w] = a.input;
        let base = count_macs(&a, a.input).unwrap();
        let big = count_macs(&a, [1, h + 16 * dh, w + 16 * dw]).unwrap();
        prop_assert!(big >= base);
    }
}
