use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::autodiff::{Graph, ParameterSet, Partition};
use crate::nn::{NetInput, Network};
use crate::stethoscope::{step_gradients, AdapterKind, Batch, HeadSpec, Lambda, StethoscopeHead, Targets};

fn bundled() -> IdxDataset {
    let (i, l) = bundled_paths();
    load_idx(&i, &l).unwrap()
}

/// Upper-tail p-value of Pearson's statistic for observed vs expected counts.
fn chi_square_p(observed: &[f64], expected: &[f64], df: f64) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend(d.to_be_bytes());
    }
    v.extend(body);
    v
}

fn write(dir: &std::path::Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
    p
}

#[test]
fn bundled_subset_loads() {
    let ds = bundled();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.image_shape(), (28, 28));
    let mut counts = [0usize; 10];
    for &l in &ds.labels {
        counts[l as usize] += 1;
    }
    assert!(counts.iter().all(|c| *c > 800), "{counts:?}");
    assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    // the marker rows are background in all but a fraction of a percent of digits
    let busy = (0..ds.len()).filter(|&i| ds.pixels(i)[..56].iter().any(|p| *p > 0)).count();
    assert!(busy < 50, "{busy} digits touch the top rows");
}

#[test]
fn raw_idx_parses_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 256) as u8).collect();
    let img = write(dir.path(), "img", &idx_bytes(0x803, &[2, 28, 28], &pixels));
    let lab = write(dir.path(), "lab", &idx_bytes(0x801, &[2], &[3, 7]));
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.labels, vec![3, 7]);
    assert_eq!(ds.images.at(&[1, 0, 1]), f64::from(pixels[785]) / 255.0);
    assert_eq!(ds.pixels(1), pixels[784..].to_vec());

    let bad_magic = write(dir.path(), "bm", &idx_bytes(0x804, &[2, 28, 28], &pixels));
    let err = load_idx(&bad_magic, &lab).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
    let truncated = write(dir.path(), "tr", &idx_bytes(0x803, &[2, 28, 28], &pixels[..100]));
    assert!(matches!(load_idx(&truncated, &lab), Err(Error::Format { .. })));
    let short_header = write(dir.path(), "sh", &[0, 0, 8]);
    assert!(load_idx(&short_header, &lab).is_err());
    let three = write(dir.path(), "l3", &idx_bytes(0x801, &[3], &[1, 2, 3]));
    assert!(load_idx(&img, &three).unwrap_err().to_string().contains("3 labels for 2 images"));
    let big = write(dir.path(), "lb", &idx_bytes(0x801, &[2], &[1, 12]));
    assert!(load_idx(&img, &big).is_err());
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &lab),
        Err(Error::Io { .. })
    ));
}

#[test]
fn hint_quality_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let d = rng.random_range(0..10);
        assert_eq!(sample_hint_digit(d, 1.0, &mut rng).unwrap(), d);
        assert_ne!(sample_hint_digit(d, 0.0, &mut rng).unwrap(), d);
        let v = make_onehot_hint(d, 1.0, &mut rng).unwrap();
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert_eq!(v[d], 1.0);
    }
    assert!(sample_hint_digit(1, 1.5, &mut rng).is_err());
    assert!(sample_hint_digit(1, -0.1, &mut rng).is_err());
    assert!(sample_hint_digit(10, 0.5, &mut rng).is_err());
}

#[test]
fn hint_quality_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut correct = 0;
    let mut wrong = [0.0; 10];
    for _ in 0..n {
        let h = sample_hint_digit(4, 0.7, &mut rng).unwrap();
        if h == 4 {
            correct += 1;
        } else {
            wrong[h] += 1.0;
        }
    }
    let rate = correct as f64 / n as f64;
    // 3σ of a binomial proportion at n = 1e5 is about 0.0043
    assert!((rate - 0.7).abs() < 0.005, "rate {rate}");
    let observed: Vec<f64> = wrong.iter().enumerate().filter(|(d, _)| *d != 4).map(|(_, c)| *c).collect();
    let total: f64 = observed.iter().sum();
    let expected = vec![total / 9.0; 9];
    assert!(chi_square_p(&observed, &expected, 8.0) > 0.01);
}

#[test]
fn pixel_marker_properties() {
    let ds = bundled();
    let img = ds.images.slice_rows(0, 1).reshape(vec![28, 28]).unwrap();
    let mut seen = std::collections::HashSet::new();
    for c in 0..HINT_CLASSES {
        let once = embed_pixel_hint(&img, c).unwrap();
        assert_eq!(embed_pixel_hint(&once, c).unwrap(), once);
        let marker = marker_pixels(c);
        for r in 0..28 {
            for col in 0..28 {
                let v = once.at(&[r, col]);
                if marker.contains(&(r, col)) {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, img.at(&[r, col]));
                }
            }
        }
        assert!(marker.iter().all(|(r, _)| *r < 2));
        let mut key = marker.to_vec();
        key.sort();
        assert!(seen.insert(key), "class {c} repeats a marker");
    }
    let chw = img.clone().reshape(vec![1, 28, 28]).unwrap();
    assert_eq!(embed_pixel_hint(&chw, 42).unwrap().shape(), &[1, 28, 28]);
    assert!(embed_pixel_hint(&img, 100).is_err());
    assert!(embed_pixel_hint(&Tensor::zeros(&[2, 28, 28]), 1).is_err());
}

#[test]
fn hint_classes_follow_digits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let mut j_counts = [0.0; 10];
    for _ in 0..n {
        let c = assign_hint_class(3, &mut rng).unwrap();
        assert!((30..40).contains(&c));
        j_counts[c % 10] += 1.0;
    }
    assert!(chi_square_p(&j_counts, &[n as f64 / 10.0; 10], 9.0) > 0.01);

    let mut agree = 0;
    for _ in 0..n {
        let d = rng.random_range(0..10);
        if hint_class_digit(sample_test_hint_class(&mut rng)) == d {
            agree += 1;
        }
    }
    assert!((agree as f64 / n as f64 - 0.1).abs() < 0.005);
}

#[test]
fn test_hints_are_independent_of_digits() {
    let source = bundled();
    let cfg = HintConfig {
        train_count: 1,
        test_count: 9999,
        ..HintConfig::default()
    };
    let ds = build_hinted_dataset(&source, &cfg).unwrap();
    let test = ds.indices(Split::Test);
    let mut table = vec![0.0; 100];
    let mut rows = [0.0; 10];
    let mut cols = [0.0; 10];
    for &i in &test {
        table[ds.digits[i] * 10 + ds.hints[i]] += 1.0;
        rows[ds.digits[i]] += 1.0;
        cols[ds.hints[i]] += 1.0;
    }
    let n = test.len() as f64;
    let expected: Vec<f64> = (0..100).map(|k| rows[k / 10] * cols[k % 10] / n).collect();
    assert!(chi_square_p(&table, &expected, 81.0) > 0.01);
}

#[test]
fn agreement_accuracy() {
    assert_eq!(hint_agreement_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(hint_agreement_accuracy(&[1, 2, 3], &[0, 0, 0]).unwrap(), 0.0);
    assert!(hint_agreement_accuracy(&[], &[]).is_err());
    assert!(hint_agreement_accuracy(&[1], &[1, 2]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..10)).collect();
    let h: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..10)).collect();
    assert!((hint_agreement_accuracy(&p, &h).unwrap() - 0.1).abs() < 0.005);
}

#[test]
fn hinted_dataset_round_trips() {
    let source = bundled();
    for variant in [HintVariant::OnehotHint, HintVariant::PixelHint] {
        let cfg = HintConfig {
            variant,
            train_count: 300,
            test_count: 100,
            seed: 4,
            ..HintConfig::default()
        };
        let ds = build_hinted_dataset(&source, &cfg).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 300);
        for i in ds.indices(Split::Train) {
            assert_eq!(ds.hint_digit(i), ds.digits[i]);
        }
        if variant == HintVariant::PixelHint {
            let plane = 28 * 28;
            for i in 0..ds.len() {
                for (r, c) in marker_pixels(ds.hints[i]) {
                    assert_eq!(ds.images[i * plane + r * 28 + c], 255);
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let head = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        let col = if variant == HintVariant::OnehotHint { "hint_digit" } else { "hint_class" };
        assert!(head.starts_with(&format!("index,split,digit,{col}\n")));
        assert_eq!(HintedDataset::load(dir.path()).unwrap(), ds);
        assert_eq!(build_hinted_dataset(&source, &cfg).unwrap(), ds);
    }
    let too_many = HintConfig {
        train_count: 10_000,
        test_count: 1,
        ..HintConfig::default()
    };
    assert!(build_hinted_dataset(&source, &too_many).is_err());
}

fn onehot_fixture() -> (OnehotHintNet, ParameterSet, HintedDataset) {
    let mut params = ParameterSet::new();
    let net = OnehotHintNet::new(&mut params, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let cfg = HintConfig {
        train_count: 8,
        test_count: 8,
        q_h: 0.5,
        ..HintConfig::default()
    };
    (net, params, build_hinted_dataset(&bundled(), &cfg).unwrap())
}

#[test]
fn hint_encoder_is_one_scalar() {
    let (net, params, _) = onehot_fixture();
    assert_eq!(params.value(net.hint_scale).len(), 1);
    let hint_params: Vec<_> = params.iter().filter(|(_, p)| p.name.starts_with("hint.")).collect();
    assert_eq!(hint_params.len(), 1);
    assert_eq!(net.tap_info(HINT_ENCODING).unwrap().flat_len(), 10);
    assert_eq!(net.tap_info(crate::nn::PRE_LOGITS).unwrap().flat_len(), 266);
}

#[test]
fn zero_hint_scale_silences_hints() {
    let (net, mut params, ds) = onehot_fixture();
    params.value_mut(net.hint_scale).data_mut()[0] = 0.0;
    let idx: Vec<usize> = (0..8).collect();
    let images = ds.image_tensor(&idx);
    let logits = |hints: Tensor| {
        let mut g = Graph::new();
        let out = net
            .forward(&mut g, &params, &NetInput { images: images.clone(), hints: Some(hints) }, false)
            .unwrap();
        g.forward([]).unwrap();
        g.value(out.logits).clone()
    };
    let mut shifted = Tensor::zeros(&[8, 10]);
    for b in 0..8 {
        shifted.set(&[b, (b + 3) % 10], 1.0);
    }
    assert_eq!(logits(ds.hint_tensor(&idx)), logits(shifted));
    let missing = net.forward(&mut Graph::new(), &params, &NetInput::images(images), false);
    assert!(missing.is_err());
}

#[test]
fn stethoscope_loss_never_reaches_image_encoder() {
    let (net, mut params, ds) = onehot_fixture();
    let mut head = StethoscopeHead::new(HeadSpec {
        lambda: Lambda(-2.0),
        loss: crate::nn::LossKind::SoftmaxCe { classes: 10 },
        attach_layer: HINT_ENCODING.into(),
        adapter: AdapterKind::Dense,
        ..HeadSpec::default()
    });
    head.attach(&net.taps(), &mut params, "steth", &mut ChaCha8Rng::seed_from_u64(6))
        .unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let input = NetInput {
        images: ds.image_tensor(&idx),
        hints: Some(ds.hint_tensor(&idx)),
    };
    let mut g = Graph::new();
    let out = net.forward(&mut g, &params, &input, true).unwrap();
    let logits = head.apply(&mut g, &params, out.tap(HINT_ENCODING).unwrap(), true).unwrap();
    let hints: Vec<usize> = idx.iter().map(|&i| ds.hint_digit(i)).collect();
    let ls = Targets::Classes(hints.clone()).loss(&mut g, logits, None).unwrap();
    g.forward([]).unwrap();
    let grads = g.backward(ls).unwrap();
    for id in net.image_encoder_params() {
        assert!(grads.get(id).unwrap().data().iter().all(|v| *v == 0.0));
    }
    assert_ne!(grads.get(net.hint_scale).unwrap().item(), 0.0);

    // the full adversarial step also leaves the image encoder to the main loss alone
    let batch = Batch {
        input,
        main: Targets::Classes(idx.iter().map(|&i| ds.digits[i]).collect()),
        main_weights: None,
        steth: Some(Targets::Classes(hints)),
        steth_weights: None,
    };
    let with = step_gradients(&net, Some(&head), &params, &batch).unwrap();
    let without = step_gradients(&net, None, &params, &batch).unwrap();
    for id in net.image_encoder_params() {
        assert_eq!(with.theta.get(id), without.theta.get(id));
    }
    assert_ne!(with.theta.get(net.hint_scale), without.theta.get(net.hint_scale));
}

#[test]
fn pixel_model_taps_hidden_layer() {
    let mut params = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = build_toy_model(HintVariant::PixelHint, &mut params, 64, 1.0, &mut rng).unwrap();
    assert_eq!(net.taps().len(), 1);
    assert_eq!(net.tap_info(HIDDEN).unwrap().flat_len(), 64);
    assert_eq!(params.scalar_count(|p| p == Partition::Encoder), 784 * 64 + 64);
    assert_eq!(HintVariant::PixelHint.probe(), (HIDDEN, 100));

    let cfg = HintConfig {
        variant: HintVariant::PixelHint,
        train_count: 16,
        test_count: 4,
        ..HintConfig::default()
    };
    let ds = build_hinted_dataset(&bundled(), &cfg).unwrap();
    let mut head = StethoscopeHead::new(HeadSpec {
        lambda: Lambda(0.0),
        loss: crate::nn::LossKind::SoftmaxCe { classes: 100 },
        attach_layer: HIDDEN.into(),
        hidden_width: 32,
        adapter: AdapterKind::Dense,
        ..HeadSpec::default()
    });
    head.attach(&net.taps(), &mut params, "steth", &mut rng).unwrap();
    let idx: Vec<usize> = (0..16).collect();
    let batch = Batch {
        input: NetInput::images(ds.image_tensor(&idx)),
        main: Targets::Classes(idx.iter().map(|&i| ds.digits[i]).collect()),
        main_weights: None,
        steth: Some(Targets::Classes(idx.iter().map(|&i| ds.hints[i]).collect())),
        steth_weights: None,
    };
    let with = step_gradients(net.as_ref(), Some(&head), &params, &batch).unwrap();
    let without = step_gradients(net.as_ref(), None, &params, &batch).unwrap();
    assert_eq!(with.theta, without.theta);
    assert!(!with.psi.is_empty());
}
