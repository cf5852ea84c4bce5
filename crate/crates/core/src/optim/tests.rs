use super::*;
use crate::autodiff::Partition;

fn one_param(v: f64) -> (ParameterSet, ParamId) {
    let mut ps = ParameterSet::new();
    let id = ps.add("x", Partition::Encoder, Tensor::scalar(v)).unwrap();
    (ps, id)
}

fn grad(id: ParamId, g: f64) -> Gradients {
    let mut gr = Gradients::default();
    gr.insert(id, Tensor::scalar(g));
    gr
}

#[test]
fn first_step_follows_hand_evaluation() {
    let (mut ps, id) = one_param(0.0);
    let mut opt = RmsProp::new(RmsPropConfig::default()).unwrap();
    opt.step(&mut ps, &grad(id, 1.0)).unwrap();
    let want = 0.045 / (0.1f64 + 1.0).sqrt();
    assert!((ps.value(id).item() + want).abs() < 1e-15);
    assert!((want - 0.042905).abs() < 1e-6);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let (mut ps, id) = one_param(1.25);
    let mut opt = RmsProp::new(RmsPropConfig::default()).unwrap();
    opt.step(&mut ps, &grad(id, 0.0)).unwrap();
    assert_eq!(ps.value(id).item(), 1.25);
}

#[test]
fn two_steps_match_scalar_trace() {
    let (mut ps, id) = one_param(0.5);
    let mut opt = RmsProp::new(RmsPropConfig::default()).unwrap();
    let g = 0.3;
    opt.step(&mut ps, &grad(id, g)).unwrap();
    opt.step(&mut ps, &grad(id, g)).unwrap();
    let ms1 = 0.1 * g * g;
    let p1 = 0.5 - 0.045 * g / (ms1 + 1.0f64).sqrt();
    let ms2 = 0.9 * ms1 + 0.1 * g * g;
    let p2 = p1 - 0.045 * g / (ms2 + 1.0f64).sqrt();
    assert!((ps.value(id).item() - p2).abs() < 1e-12);
}

#[test]
fn first_step_is_bounded() {
    for g in [1e-6, 0.1, 5.0, 1e6] {
        let (mut ps, id) = one_param(0.0);
        let mut opt = RmsProp::new(RmsPropConfig::default()).unwrap();
        opt.step(&mut ps, &grad(id, g)).unwrap();
        assert!(ps.value(id).item().abs() <= 0.045 * 10f64.sqrt());
    }
}

#[test]
fn non_finite_gradient_names_parameter() {
    let (mut ps, id) = one_param(0.0);
    let mut opt = RmsProp::new(RmsPropConfig::default()).unwrap();
    let err = opt.step(&mut ps, &grad(id, f64::NAN)).unwrap_err();
    assert!(err.to_string().contains("\"x\""), "{err}");
    assert_eq!(ps.value(id).item(), 0.0);
}

#[test]
fn learning_rate_schedule() {
    let cfg = RmsPropConfig::default();
    let mut opt = RmsProp::new(cfg).unwrap();
    opt.apply_lr_decay(0);
    assert_eq!(opt.learning_rate(), 0.045);
    opt.apply_lr_decay(2);
    assert!((opt.learning_rate() - 0.045 * 0.975 * 0.975).abs() < 1e-15);
    assert!((opt.learning_rate() - 0.042_778_125).abs() < 1e-12);
    let mut iter = 0.045;
    for _ in 0..50 {
        iter *= 0.975;
    }
    assert!((cfg.learning_rate_at(50) / iter - 1.0).abs() < 1e-12);
    opt.apply_lr_decay(50);
    opt.apply_lr_decay(3);
    assert_eq!(opt.learning_rate(), cfg.learning_rate_at(3));
}

#[test]
fn separate_states_do_not_alias() {
    let mut ps = ParameterSet::new();
    let a = ps.add("theta", Partition::Encoder, Tensor::scalar(0.0)).unwrap();
    let b = ps.add("psi", Partition::Stethoscope, Tensor::scalar(0.0)).unwrap();
    let mut theta_opt = RmsProp::new(RmsPropConfig::default()).unwrap();
    let mut psi_opt = RmsProp::new(RmsPropConfig::default()).unwrap();
    theta_opt.step(&mut ps, &grad(a, 1.0)).unwrap();
    let before = theta_opt.accumulator(a).cloned();
    psi_opt.step(&mut ps, &grad(b, 2.0)).unwrap();
    assert_eq!(theta_opt.accumulator(a).cloned(), before);
    assert!(theta_opt.accumulator(b).is_none());
    assert!(psi_opt.accumulator(a).is_none());
}

#[test]
fn invalid_settings_are_rejected() {
    let cfg = RmsPropConfig {
        learning_rate: 0.0,
        ..Default::default()
    };
    assert!(RmsProp::new(cfg).is_err());
}

#[test]
fn sgd_reference_steps() {
    let (mut ps, id) = one_param(1.0);
    sgd_step(&mut ps, &grad(id, 2.0), 0.0).unwrap();
    assert_eq!(ps.value(id).item(), 1.0);
    sgd_step(&mut ps, &grad(id, 2.0 * 1.0), 0.1).unwrap();
    assert!((ps.value(id).item() - 0.8).abs() < 1e-15);
}

#[test]
fn sgd_descends_convex_quadratic_monotonically() {
    // f(x, y) = 3x² + 0.5y²
    let mut ps = ParameterSet::new();
    let id = ps.add("v", Partition::Encoder, Tensor::new(vec![2], vec![2.0, -4.0]).unwrap()).unwrap();
    let f = |v: &[f64]| 3.0 * v[0] * v[0] + 0.5 * v[1] * v[1];
    let mut last = f(ps.value(id).data());
    for _ in 0..100 {
        let v = ps.value(id).data().to_vec();
        let mut g = Gradients::default();
        g.insert(id, Tensor::new(vec![2], vec![6.0 * v[0], v[1]]).unwrap());
        sgd_step(&mut ps, &g, 0.05).unwrap();
        let now = f(ps.value(id).data());
        assert!(now <= last);
        last = now;
    }
    assert!(last < 1e-3);
}
