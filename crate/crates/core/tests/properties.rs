use optic4f_core::analysis::{aggregate_runs, device_fidelity, mean, throughput, LatencyModel, SsimConfig};
use optic4f_core::dataset::{encode_idx, load_mnist, parse_idx, subsample, synthetic_corpus, IdxKind, IdxTensor};
use optic4f_core::field::SpatialField;
use optic4f_core::fourier::{dft2_centered, idft2_centered};
use optic4f_core::model::{
    adam_step, loss_and_error, AdamState, ConvBackend, ForwardTrace, Hyperparams, ModelParams, Network,
};
use optic4f_core::optics::{optical_convolve, quantize, reference_convolve, DeviceConfig, KernelPreset, SlmConfig};
use optic4f_core::rng::RngStream;
use optic4f_core::trainers::UpdateSet;
use proptest::prelude::*;

fn field_strategy(sizes: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = SpatialField> {
    prop::sample::select(sizes)
        .prop_flat_map(move |n| prop::collection::vec(lo..hi, n * n).prop_map(move |v| SpatialField::new(n, v).unwrap()))
}

fn pair_strategy(sizes: &'static [usize]) -> impl Strategy<Value = (SpatialField, SpatialField)> {
    prop::sample::select(sizes).prop_flat_map(|n| {
        (prop::collection::vec(0.0..1.0, n * n), prop::collection::vec(-1.0..1.0, n * n))
            .prop_map(move |(a, b)| (SpatialField::new(n, a).unwrap(), SpatialField::new(n, b).unwrap()))
    })
}

fn max_abs(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval_holds(field in field_strategy(&[4, 8, 16, 28], -3.0, 3.0)) {
        let spectrum = dft2_centered(&field).unwrap();
        let (a, b) = (field.energy(), spectrum.energy());
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1e-300));
    }

    #[test]
    fn transform_round_trip(field in field_strategy(&[4, 8, 16, 28], -3.0, 3.0)) {
        let back = idft2_centered(&dft2_centered(&field).unwrap()).unwrap();
        let scale = max_abs(field.values().iter().copied()).max(1e-300);
        for (x, y) in field.values().iter().zip(back.values()) {
            prop_assert!((x - y.re).abs() <= 1e-10 * scale && y.im.abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn transform_is_linear((a, b) in pair_strategy(&[4, 8, 16]), alpha in -2.0..2.0f64) {
        let n = a.n();
        let mix = SpatialField::new(n, a.values().iter().zip(b.values()).map(|(x, y)| alpha * x + y).collect()).unwrap();
        let (fa, fb, fm) = (dft2_centered(&a).unwrap(), dft2_centered(&b).unwrap(), dft2_centered(&mix).unwrap());
        for ((x, y), m) in fa.values().iter().zip(fb.values()).zip(fm.values()) {
            prop_assert!((x * alpha + y - m).norm() <= 1e-10 * (1.0 + m.norm()));
        }
    }

    #[test]
    fn transparent_device_is_exact_convolution((image, kernel) in pair_strategy(&[4, 8, 16])) {
        let want = reference_convolve(&image, &kernel).unwrap();
        let got = optical_convolve(&image, &kernel, &DeviceConfig::transparent(), &mut RngStream::new(0)).unwrap();
        let scale = max_abs(want.values().iter().copied()).max(1e-12);
        let err = max_abs(got.values().iter().zip(want.values()).map(|(g, w)| g - w));
        prop_assert!(err <= 1e-9 * scale);
    }

    #[test]
    fn transparent_device_is_linear((x, k) in pair_strategy(&[8]), y_seed in any::<u64>(), a in 0.0..0.5f64, b in 0.0..0.5f64) {
        // a, b ≥ 0 with a + b ≤ 1 keeps the mix a valid SLM amplitude.
        let mut rng = RngStream::new(y_seed);
        let y = SpatialField::from_fn(8, |_, _| rng.uniform(0.0, 1.0)).unwrap();
        let cfg = DeviceConfig::transparent();
        let conv = |f: &SpatialField| optical_convolve(f, &k, &cfg, &mut RngStream::new(0)).unwrap();
        let mix = SpatialField::new(8, x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (cx, cy, cm) = (conv(&x), conv(&y), conv(&mix));
        for ((p, q), m) in cx.values().iter().zip(cy.values()).zip(cm.values()) {
            prop_assert!((a * p + b * q - m).abs() <= 1e-8);
        }
    }

    #[test]
    fn throughput_falls_with_every_latency(setup in 0.1..100.0f64, exposure in 0.0..100.0f64, overhead in 0.0..50.0f64, k in 1u32..16, bump in 0.1..10.0f64) {
        let base = LatencyModel { slm_setup_ms: setup, exposure_ms: exposure, os_overhead_ms: overhead, kernels_per_image: k };
        let t = throughput(&base).unwrap();
        for slower in [
            LatencyModel { slm_setup_ms: setup + bump, ..base.clone() },
            LatencyModel { exposure_ms: exposure + bump, ..base.clone() },
            LatencyModel { os_overhead_ms: overhead + bump, ..base.clone() },
            LatencyModel { kernels_per_image: k + 1, ..base.clone() },
        ] {
            prop_assert!(throughput(&slower).unwrap() < t);
        }
        let doubled = LatencyModel { slm_setup_ms: 2.0 * setup, exposure_ms: 2.0 * exposure, os_overhead_ms: 2.0 * overhead, ..base.clone() };
        prop_assert!((throughput(&doubled).unwrap() - t / 2.0).abs() <= 1e-9 * t);
    }

    #[test]
    fn aggregation_ignores_order(mut accs in prop::collection::vec(0.0..1.0f64, 1..8), seed in any::<u64>()) {
        let a = aggregate_runs(&accs).unwrap();
        RngStream::new(seed).shuffle(&mut accs);
        let b = aggregate_runs(&accs).unwrap();
        prop_assert_eq!(a.mean, b.mean);
        prop_assert_eq!(a.std, b.std);
    }

    #[test]
    fn noisy_device_is_reproducible((image, kernel) in pair_strategy(&[8, 16]), seed in any::<u64>()) {
        let cfg = DeviceConfig::realistic();
        let a = optical_convolve(&image, &kernel, &cfg, &mut RngStream::new(seed)).unwrap();
        let b = optical_convolve(&image, &kernel, &cfg, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quantizer_lands_on_levels(values in prop::collection::vec(-0.5..1.5f64, 1..64), bits in 1u32..=10) {
        let cfg = SlmConfig { bit_depth: bits, quantize: true, value_range: (0.0, 1.0) };
        let levels = ((1u64 << bits) - 1) as f64;
        let q = quantize(&values, &cfg);
        for (&x, &y) in values.iter().zip(&q) {
            prop_assert!((0.0..=1.0).contains(&y));
            prop_assert!(((y * levels) - (y * levels).round()).abs() < 1e-9);
            prop_assert!((y - x.clamp(0.0, 1.0)).abs() <= 0.5 / levels + 1e-12);
        }
        prop_assert_eq!(quantize(&q, &cfg), q);
    }

    #[test]
    fn idx_round_trip(count in 0usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let data: Vec<u8> = (0..count * rows * cols).map(|_| rng.index(256) as u8).collect();
        let tensor = IdxTensor { kind: IdxKind::Images, dims: vec![count, rows, cols], data };
        let bytes = encode_idx(&tensor);
        let parsed = parse_idx(&bytes, IdxKind::Images).unwrap();
        prop_assert_eq!(&parsed, &tensor);
        prop_assert_eq!(encode_idx(&parsed), bytes);
    }

    #[test]
    fn softmax_error_is_loss_gradient(logits in prop::collection::vec(-4.0..4.0f64, 2..8), pick in any::<prop::sample::Index>()) {
        let label = pick.index(logits.len());
        let trace_for = |l: Vec<f64>| ForwardTrace {
            conv_out: vec![],
            act: vec![],
            pooled: vec![],
            pool_argmax: vec![],
            probs: optic4f_core::model::softmax(&l),
            logits: l,
        };
        let (_, e) = loss_and_error(&trace_for(logits.clone()), label).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (loss_and_error(&trace_for(up), label).unwrap().0 - loss_and_error(&trace_for(down), label).unwrap().0) / (2.0 * h);
            prop_assert!((fd - e[i]).abs() <= 1e-6);
        }
    }
}

#[test]
fn device_and_software_backends_agree_when_transparent() {
    let hp = Hyperparams { kernels: 3, classes: 5, ..Hyperparams::default() };
    let mut rng = RngStream::new(21);
    let net = Network::init(hp, 16, &mut rng).unwrap();
    let image = SpatialField::from_fn(16, |_, _| rng.uniform(0.0, 1.0)).unwrap();
    let device = ConvBackend::Device(DeviceConfig::transparent());
    let a = net.forward(&image, &device, &mut RngStream::new(1)).unwrap();
    let b = net.forward(&image, &ConvBackend::Software, &mut RngStream::new(1)).unwrap();
    let c = net.forward(&image, &ConvBackend::Oracle, &mut RngStream::new(1)).unwrap();
    for other in [&b, &c] {
        for (x, y) in a.conv_out.iter().zip(&other.conv_out) {
            assert!(max_abs(x.values().iter().zip(y.values()).map(|(p, q)| p - q)) < 1e-6);
        }
        assert!(max_abs(a.logits.iter().zip(&other.logits).map(|(p, q)| p - q)) < 1e-6);
        assert_eq!(a.pool_argmax, other.pool_argmax);
    }
}

#[test]
fn max_pool_takes_window_maxima() {
    let hp = Hyperparams { kernels: 2, classes: 3, ..Hyperparams::default() };
    let mut rng = RngStream::new(4);
    let net = Network::init(hp, 8, &mut rng).unwrap();
    let image = SpatialField::from_fn(8, |_, _| rng.uniform(0.0, 1.0)).unwrap();
    let trace = net.forward(&image, &ConvBackend::Software, &mut rng).unwrap();
    let m = 4;
    for (k, h) in trace.act.iter().enumerate() {
        for pr in 0..m {
            for pc in 0..m {
                let i = k * m * m + pr * m + pc;
                let window = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dr, dc)| h.get(2 * pr + dr, 2 * pc + dc));
                let max = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(trace.pooled[i], max);
                let idx = trace.pool_argmax[i];
                assert_eq!(h.values()[idx], max);
                assert_eq!((idx / 8) / 2, pr);
                assert_eq!((idx % 8) / 2, pc);
            }
        }
    }
}

#[test]
fn ssim_degrades_monotonically_with_noise() {
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let pool = load_mnist(&dir.join("images-idx3-ubyte.gz"), &dir.join("labels-idx1-ubyte.gz")).unwrap();
    let images: Vec<SpatialField> = pool.into_iter().take(20).map(|s| s.pixels).collect();
    let kernel = KernelPreset::EdgeDetect.build(28, &mut RngStream::new(0)).unwrap();
    let cfg = SsimConfig::default();
    let means: Vec<f64> = [0.0, 0.05, 0.1, 0.2, 0.4]
        .iter()
        .map(|&s| mean(&device_fidelity(&images, &kernel, &DeviceConfig::realistic().with_noise_sigma(s), &cfg, 9).unwrap()))
        .collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
    assert!(means[0] > 0.95 && means[4] < means[0]);
}

#[test]
fn splits_are_disjoint_for_many_seeds() {
    let corpus = synthetic_corpus(400, 1).unwrap();
    for seed in 0..10 {
        let split = subsample(&corpus, 200, 100, seed).unwrap();
        let mut all: Vec<usize> = split.train_indices.iter().chain(&split.test_indices).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 300);
    }
}

#[test]
fn first_adam_step_moves_by_learning_rate() {
    let hp = Hyperparams { kernels: 1, classes: 2, learning_rate: 0.01, ..Hyperparams::default() };
    let mut params = ModelParams::init(&hp, 4, &mut RngStream::new(2)).unwrap();
    let before = params.clone();
    let mut state = AdamState::new(&params);
    let mut grads = UpdateSet::zeros(&params);
    grads.d_kernels[0].iter_mut().enumerate().for_each(|(i, g)| *g = if i % 2 == 0 { 0.3 } else { -2.0 });
    adam_step(&mut params, &mut state, &grads, &hp).unwrap();
    for (i, (a, b)) in params.kernels[0].values().iter().zip(before.kernels[0].values()).enumerate() {
        let expected = if i % 2 == 0 { -0.01 } else { 0.01 };
        assert!((a - b - expected).abs() < 1e-6);
    }
    assert_eq!(params.fc_weights, before.fc_weights);
}

#[test]
fn argmax_is_invariant_to_positive_logit_scaling() {
    let hp = Hyperparams { kernels: 2, classes: 4, ..Hyperparams::default() };
    let mut rng = RngStream::new(8);
    let params = ModelParams::init(&hp, 8, &mut rng).unwrap();
    let mut scaled = params.clone();
    scaled.fc_weights.iter_mut().for_each(|w| *w *= 2.0);
    scaled.fc_bias = vec![0.0; 4];
    let (a, b) = (Network::new(hp.clone(), params).unwrap(), Network::new(hp, scaled).unwrap());
    for _ in 0..10 {
        let image = SpatialField::from_fn(8, |_, _| rng.uniform(0.0, 1.0)).unwrap();
        let ta = a.forward(&image, &ConvBackend::Software, &mut rng).unwrap();
        let tb = b.forward(&image, &ConvBackend::Software, &mut rng).unwrap();
        assert_eq!(optic4f_core::model::argmax(&ta.probs), optic4f_core::model::argmax(&tb.probs));
    }
}
