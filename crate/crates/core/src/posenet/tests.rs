use super::*;
use crate::data::Sample;
use crate::tactsim::ContactParams;

fn tiny_arch() -> Architecture {
    Architecture {
        input_height: 8,
        input_width: 8,
        conv: vec![ConvSpec {
            filters: 2,
            kernel: 3,
            stride: 2,
        }],
        hidden: vec![4],
        outputs: 2,
        binarize: false,
    }
}

fn ranges() -> [Range; 2] {
    [Range(-5.0, 5.0), Range(-45.0, 45.0)]
}

fn noise_image(seed: u64, w: usize, h: usize) -> TactileImage {
    let mut r = rng::rng(seed);
    let px = (0..w * h).map(|_| rng::unit(&mut r) as f32).collect();
    TactileImage::from_pixels(w, h, px).unwrap()
}

fn random_labels(seed: u64, n: usize) -> Vec<[f64; 2]> {
    let mut r = rng::rng(seed);
    (0..n)
        .map(|_| [rng::uniform(&mut r, -5.0, 5.0), rng::uniform(&mut r, -45.0, 45.0)])
        .collect()
}

#[test]
fn standard_architecture_shapes() {
    let a = Architecture::standard(128, 128);
    let layers = a.layers().unwrap();
    match layers[2] {
        Layer::Conv { out_h, out_w, out_c, .. } => assert_eq!((out_h, out_w, out_c), (15, 15, 32)),
        _ => panic!(),
    }
    match layers[3] {
        Layer::Dense { inp, out, .. } => assert_eq!((inp, out), (7200, 64)),
        _ => panic!(),
    }
    let convs = 9 * 16 + 16 + 9 * 16 * 32 + 32 + 9 * 32 * 32 + 32;
    assert_eq!(a.parameter_count().unwrap(), convs + 7200 * 64 + 64 + 64 * 2 + 2);
}

#[test]
fn rejects_impossible_architectures() {
    let mut a = tiny_arch();
    a.conv[0].kernel = 9;
    assert!(matches!(a.layers(), Err(NetError::Architecture(_))));
    let mut a = tiny_arch();
    a.outputs = 0;
    assert!(a.layers().is_err());
    assert!(PoseNet::<f32>::new(tiny_arch(), &ranges()[..1], 0).is_err());
}

#[test]
fn normalizer_round_trip() {
    for r in [Range(-5.0, 5.0), Range(-5.0, -1.0), Range(-30.0, 30.0), Range(0.0, 0.0)] {
        let n = Normalizer::from_range(&r);
        assert_eq!(n.normalize(r.lo()), if r.width() > 0.0 { -1.0 } else { 0.0 });
        for y in [-7.3, -1.0, 0.0, 2.5, 44.0] {
            assert!((n.denormalize(n.normalize(y)) - y).abs() < 1e-12);
        }
    }
}

/// Central finite differences of the loss agree with the analytic gradient
/// for every parameter.
#[test]
fn gradient_matches_finite_differences() {
    let mut arch = tiny_arch();
    arch.conv.push(ConvSpec {
        filters: 2,
        kernel: 2,
        stride: 1,
    });
    let model = PoseNet::<f64>::new(arch, &ranges(), 7).unwrap();
    let imgs: Vec<_> = (0..3).map(|i| noise_image(100 + i, 8, 8)).collect();
    let labels = random_labels(5, 3);
    let batch: Vec<(&TactileImage, &[f64])> = imgs.iter().zip(&labels).map(|(i, l)| (i, &l[..])).collect();
    let (loss, grad) = model.loss_and_gradient(&batch).unwrap();
    assert!((loss - model.loss(&batch).unwrap()).abs() < 1e-12);

    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for (i, &g) in grad.iter().enumerate() {
        let mut plus = model.clone();
        plus.params_mut()[i] += eps;
        let mut minus = model.clone();
        minus.params_mut()[i] -= eps;
        let numeric = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * eps);
        let rel = (numeric - g).abs() / numeric.abs().max(g.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn gradient_vanishes_at_zero_loss() {
    let model = PoseNet::<f64>::new(tiny_arch(), &ranges(), 3).unwrap();
    let imgs: Vec<_> = (0..4).map(|i| noise_image(i, 8, 8)).collect();
    let refs: Vec<_> = imgs.iter().collect();
    let preds = model.predict_batch(&refs).unwrap();
    let batch: Vec<(&TactileImage, &[f64])> = imgs.iter().zip(&preds).map(|(i, p)| (i, &p[..])).collect();
    let (loss, grad) = model.loss_and_gradient(&batch).unwrap();
    assert!(loss < 1e-28);
    assert!(grad.iter().all(|g| g.abs() < 1e-13));
}

#[test]
fn duplicating_a_batch_keeps_the_mean_gradient() {
    let model = PoseNet::<f64>::new(tiny_arch(), &ranges(), 11).unwrap();
    let imgs: Vec<_> = (0..5).map(|i| noise_image(40 + i, 8, 8)).collect();
    let labels = random_labels(9, 5);
    let once: Vec<(&TactileImage, &[f64])> = imgs.iter().zip(&labels).map(|(i, l)| (i, &l[..])).collect();
    let twice: Vec<_> = once.iter().chain(&once).copied().collect();
    let (l1, g1) = model.loss_and_gradient(&once).unwrap();
    let (l2, g2) = model.loss_and_gradient(&twice).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn zero_output_weights_predict_the_range_midpoint() {
    let r = [Range(-5.0, -1.0), Range(-30.0, 30.0)];
    let mut model = PoseNet::<f32>::new(tiny_arch(), &r, 1).unwrap();
    let (w, b) = model.output_layer_mut();
    w.fill(0.0);
    b.fill(0.0);
    let p = model.forward(&noise_image(2, 8, 8)).unwrap();
    assert_eq!(p, vec![-3.0, 0.0]);
}

#[test]
fn rejects_wrong_image_size() {
    let model = PoseNet::<f32>::new(tiny_arch(), &ranges(), 0).unwrap();
    let err = model.forward(&noise_image(0, 9, 8)).unwrap_err();
    assert!(matches!(err, NetError::Shape { got_w: 9, .. }));
}

fn labelled(n: usize, label: impl Fn(usize) -> [f64; 2]) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let [offset, angle] = label(i);
            Sample {
                image: noise_image(1000 + i as u64, 8, 8),
                label: crate::data::Label { offset, angle },
                contact: ContactParams::edge(offset, 0.0, angle),
            }
        })
        .collect()
}

#[test]
fn constant_labels_are_learned() {
    let samples = labelled(64, |_| [1.5, -20.0]);
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 4,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let out = train(&refs, &ranges(), tiny_arch(), &cfg).unwrap();
    let last = *out.history.last().unwrap();
    assert!(last < 1e-3 * out.initial_loss.max(1e-3), "{} -> {last}", out.initial_loss);
    let p = out.model.forward(&samples[0].image).unwrap();
    assert!((p[0] - 1.5).abs() < 0.05 && (p[1] + 20.0).abs() < 0.5, "{p:?}");
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let samples = labelled(40, |i| [i as f64 / 10.0 - 2.0, i as f64 - 20.0]);
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 12,
        ..TrainConfig::default()
    };
    let a = crate::par::with_threads(1, || train(&refs, &ranges(), tiny_arch(), &cfg).unwrap());
    let b = crate::par::with_threads(4, || train(&refs, &ranges(), tiny_arch(), &cfg).unwrap());
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.history, b.history);
    let c = train(&refs, &ranges(), tiny_arch(), &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.model.params(), c.model.params());
}

#[test]
fn small_steps_never_increase_the_loss() {
    let samples = labelled(10, |i| [i as f64 - 4.5, 9.0 * i as f64 - 40.0]);
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 10,
        learning_rate: 1e-4,
        momentum: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&refs, &ranges(), tiny_arch(), &cfg).unwrap();
    // With a full batch each epoch's mean loss is measured before its step.
    let mut prev = out.initial_loss;
    for &l in &out.history {
        assert!(l <= prev + 1e-12, "{prev} -> {l}");
        prev = l;
    }
    assert!(*out.history.last().unwrap() < out.initial_loss);
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let samples = labelled(16, |i| [i as f64 - 8.0, 40.0]);
    let refs: Vec<&Sample> = samples.iter().collect();
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 1e12,
        ..TrainConfig::default()
    };
    let err = train(&refs, &ranges(), tiny_arch(), &cfg).unwrap_err();
    assert!(matches!(err, NetError::Divergence { .. }), "{err}");
}

#[test]
fn report_of_a_perfect_model() {
    // Targets equal to the model's own predictions give zero error.
    let model = PoseNet::<f32>::new(tiny_arch(), &ranges(), 5).unwrap();
    let mut samples = labelled(10, |_| [0.0, 0.0]);
    for s in &mut samples {
        let p = model.forward(&s.image).unwrap();
        s.label.offset = p[0];
        s.label.angle = p[1];
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let rep = evaluate_on(&model, &refs, crate::SensorFamily::Marker, crate::Task::Edge).unwrap();
    assert_eq!(rep.mae, [0.0, 0.0]);
    assert_eq!(rep.range, [10.0, 90.0]);
    assert!((rep.slope[0] - 1.0).abs() < 1e-9);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut arch = tiny_arch();
    arch.binarize = true;
    let model = PoseNet::<f32>::new(arch, &ranges(), 21).unwrap();
    let bytes = encode_checkpoint(&model);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, model);

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x10;
    assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::Checksum)));

    let mut v2 = bytes.clone();
    v2[8] = 2;
    assert!(matches!(decode_checkpoint(&v2), Err(CheckpointError::Version { found: 2 })));
    assert!(matches!(decode_checkpoint(b"NOTAMODEL"), Err(CheckpointError::Magic)));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m/model.bin");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let img = noise_image(3, 8, 8);
    assert_eq!(loaded.forward(&img).unwrap(), model.forward(&img).unwrap());
}

#[test]
fn adaptive_threshold_marks_bright_spots() {
    let flat = TactileImage::new(20, 20, 0.4);
    assert!(adaptive_threshold(&flat, 11, 0.02).pixels().iter().all(|&p| p == 1.0));

    let mut px = vec![0.5f32; 400];
    px[10 * 20 + 10] = 0.0;
    let dark = TactileImage::from_pixels(20, 20, px).unwrap();
    let b = adaptive_threshold(&dark, 11, 0.02);
    assert_eq!(b.get(10, 10), 0.0);
    assert_eq!(b.pixels().iter().filter(|&&p| p == 0.0).count(), 1);
}

#[test]
fn im2col_and_col2im_are_adjoint() {
    // <im2col(x), y> == <x, col2im(y)>
    let (b, h, w, c, k, s) = (2, 7, 6, 3, 3, 2);
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut r = rng::rng(1);
    let x: Vec<f64> = (0..b * h * w * c).map(|_| rng::unit(&mut r)).collect();
    let y: Vec<f64> = (0..b * oh * ow * k * k * c).map(|_| rng::unit(&mut r)).collect();
    let lhs: f64 = im2col(&x, b, h, w, c, oh, ow, k, s).iter().zip(&y).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(&col2im(&y, b, h, w, c, oh, ow, k, s)).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}
