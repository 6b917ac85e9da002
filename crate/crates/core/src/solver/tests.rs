use candle_core::{DType, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::flow::gaussian_noise;
use crate::ops::{cpu, max_abs_diff};

fn t1(v: &[f64]) -> Tensor {
    Tensor::from_slice(v, v.len(), &cpu()).unwrap()
}

fn vals(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn exp_error(steps: usize, kind: SolverKind, warmup: Warmup) -> f64 {
    let x0 = t1(&[1.0]);
    let out = integrate(&x0, steps, kind, warmup, |x, _| Ok(x.clone())).unwrap();
    (vals(&out)[0] - std::f64::consts::E).abs()
}

/// Least-squares slope of `-log(err)` against `log(steps)`.
fn convergence_slope(kind: SolverKind, warmup: Warmup) -> f64 {
    let pts: Vec<(f64, f64)> = [25usize, 50, 100, 200]
        .iter()
        .map(|&n| ((n as f64).ln(), -exp_error(n, kind, warmup).ln()))
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    num / den
}

#[test]
fn cfg_scalar_example() {
    let g = GuidanceConfig::new(3.5, 0.1, 1.0).unwrap();
    let v = combine_guidance(&t1(&[2.0]), &t1(&[1.0]), 0.5, &g).unwrap();
    assert!((vals(&v)[0] - 4.5).abs() < 1e-12);
}

#[test]
fn cfg_off_or_outside_interval_is_conditional() {
    let (c, u) = (t1(&[2.0, -1.0]), t1(&[1.0, 5.0]));
    let off = GuidanceConfig::new(1.0, 0.1, 1.0).unwrap();
    assert_eq!(vals(&combine_guidance(&c, &u, 0.5, &off).unwrap()), vals(&c));
    let g = GuidanceConfig::new(7.0, 0.3, 0.6).unwrap();
    for t in [0.0, 0.1, 0.29, 0.61, 1.0] {
        assert_eq!(vals(&combine_guidance(&c, &u, t, &g).unwrap()), vals(&c), "t={t}");
    }
    assert_ne!(vals(&combine_guidance(&c, &u, 0.45, &g).unwrap()), vals(&c));
}

#[test]
fn guidance_config_validation() {
    assert!(matches!(GuidanceConfig::new(0.5, 0.1, 1.0), Err(Error::Domain(_))));
    assert!(matches!(GuidanceConfig::new(2.0, 0.5, 0.5), Err(Error::Domain(_))));
    assert!(matches!(GuidanceConfig::new(2.0, -0.1, 0.5), Err(Error::Domain(_))));
    assert!(matches!(GuidanceConfig::new(2.0, 0.2, 1.1), Err(Error::Domain(_))));
    let d = GuidanceConfig::default();
    assert_eq!((d.scale, d.t_lo, d.t_hi), (3.5, 0.1, 1.0));
}

/// Velocity equals the label value broadcast over the sample; the null label is 0.
fn label_field() -> FnField<impl Fn(&Tensor, f64, &[u32]) -> crate::Result<Tensor>> {
    FnField::new(0, |x: &Tensor, _t: f64, labels: &[u32]| {
        let b = x.dims()[0];
        assert_eq!(b, labels.len());
        let per: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let col = Tensor::from_vec(per, (b, 1), x.device())?.to_dtype(x.dtype())?;
        Ok(col.broadcast_as(x.shape())?.contiguous()?)
    })
}

#[test]
fn guided_velocity_uses_null_label_for_uncond() {
    let f = label_field();
    let x = Tensor::zeros((2, 3), DType::F64, &cpu()).unwrap();
    let g = GuidanceConfig::new(3.0, 0.0, 1.0).unwrap();
    let v = guided_velocity(&f, &x, 0.5, &[2, 4], &g).unwrap();
    // uncond = 0, cond = label → 3·label
    assert_eq!(vals(&v), vec![6.0, 6.0, 6.0, 12.0, 12.0, 12.0]);
}

#[test]
fn euler_constant_and_zero_fields() {
    let s = SolverState::new(t1(&[1.0, -2.0]), 0.0);
    let n = euler_step(&s, &t1(&[0.5, 3.0]), 0.25).unwrap();
    assert_eq!(vals(&n.x), vec![1.125, -1.25]);
    assert_eq!(n.t, 0.25);
    assert_eq!(n.history.len(), 1);
    let z = euler_step(&s, &t1(&[0.0, 0.0]), 0.25).unwrap();
    assert_eq!(vals(&z.x), vals(&s.x));
}

#[test]
fn euler_past_one_is_domain_error() {
    let s = SolverState::new(t1(&[0.0]), 0.9);
    assert!(matches!(euler_step(&s, &t1(&[1.0]), 0.2), Err(Error::Domain(_))));
    assert!(matches!(euler_step(&s, &t1(&[1.0]), 0.0), Err(Error::Domain(_))));
    assert!(euler_step(&s, &t1(&[1.0]), 0.1).is_ok());
}

#[test]
fn adams_first_step_matches_euler() {
    let s = SolverState::new(t1(&[0.3, 0.7]), 0.0);
    let v = t1(&[1.5, -0.5]);
    let e = euler_step(&s, &v, 0.1).unwrap();
    for order in [2, 4] {
        let a = adams_step(&s, &v, 0.1, order).unwrap();
        assert_eq!(vals(&a.x), vals(&e.x));
    }
}

#[test]
fn adams_constant_field_is_exact() {
    for order in [2, 4] {
        let mut s = SolverState::new(t1(&[0.25]), 0.0);
        for n in 1..=8 {
            s = adams_step(&s, &t1(&[2.0]), 0.125, order).unwrap();
            assert!((vals(&s.x)[0] - (0.25 + 2.0 * 0.125 * n as f64)).abs() < 1e-12);
        }
        assert_eq!(s.t, 1.0);
    }
}

#[test]
fn adams_rejects_non_uniform_steps() {
    let s = SolverState::new(t1(&[0.0]), 0.0);
    let s = adams_step(&s, &t1(&[1.0]), 0.1, 2).unwrap();
    assert!(matches!(adams_step(&s, &t1(&[1.0]), 0.2, 2), Err(Error::Contract(_))));
}

#[test]
fn coefficients_sum_to_one() {
    for q in 1..=4 {
        assert!((adams_coefficients(q).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn history_respects_order_and_time_order() {
    for (kind, cap) in [(SolverKind::Adams2, 1), (SolverKind::Adams4, 3)] {
        let mut s = SolverState::new(t1(&[1.0]), 0.0);
        let mut field = |x: &Tensor, _t: f64| Ok(x.clone());
        for _ in 0..10 {
            let v = s.x.clone();
            s = advance(&s, &v, 0.1, kind, Warmup::LowerOrder, &mut field).unwrap();
            assert!(s.history.len() <= cap);
            let ts: Vec<f64> = s.history.iter().map(|p| p.0).collect();
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(s.step_index, 10);
    }
}

#[test]
fn euler_converges_first_order() {
    let slope = convergence_slope(SolverKind::Euler, Warmup::LowerOrder);
    assert!((slope - 1.0).abs() <= 0.2, "slope {slope}");
    assert!(exp_error(100, SolverKind::Euler, Warmup::LowerOrder) < 0.02);
}

#[test]
fn adams2_converges_second_order() {
    let slope = convergence_slope(SolverKind::Adams2, Warmup::LowerOrder);
    assert!((slope - 2.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn adams4_converges_fourth_order_with_rk_start() {
    let slope = convergence_slope(SolverKind::Adams4, Warmup::RungeKutta4);
    assert!((slope - 4.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn adams4_lower_order_start_is_limited_by_the_euler_step() {
    let slope = convergence_slope(SolverKind::Adams4, Warmup::LowerOrder);
    assert!((slope - 2.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn rk4_step_is_fourth_order_accurate() {
    let s = SolverState::new(t1(&[1.0]), 0.0);
    let mut f = |x: &Tensor, _t: f64| Ok(x.clone());
    let n = rk4_step(&s, &s.x.clone(), 0.1, &mut f).unwrap();
    let taylor = 1.0 + 0.1 + 0.01 / 2.0 + 0.001 / 6.0 + 0.0001 / 24.0;
    assert!((vals(&n.x)[0] - taylor).abs() < 1e-15);
}

fn zero_field() -> FnField<impl Fn(&Tensor, f64, &[u32]) -> crate::Result<Tensor>> {
    FnField::new(0, |x: &Tensor, _t: f64, _l: &[u32]| Ok(x.zeros_like()?))
}

fn opts(steps: usize, solver: SolverKind) -> SampleOptions {
    SampleOptions {
        steps,
        solver,
        dtype: DType::F64,
        ..SampleOptions::default()
    }
}

#[test]
fn zero_field_returns_initial_noise() {
    let out = sample(&zero_field(), &[1, 2], (1, 4, 4), &opts(5, SolverKind::Adams2), &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let noise = gaussian_noise(&[2, 1, 4, 4], DType::F64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(vals(&out.raw), vals(&noise));
    assert!(!out.diverged);
}

#[test]
fn one_euler_step_follows_the_straight_line() {
    let seed = 11;
    let eps = gaussian_noise(&[1, 1, 2, 2], DType::F64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let target = Tensor::from_slice(&[0.5, -0.25, 0.75, -1.0], (1, 1, 2, 2), &cpu()).unwrap();
    let v = (&target - &eps).unwrap();
    let oracle = FnField::new(0, move |_x: &Tensor, _t: f64, _l: &[u32]| Ok(v.clone()));
    let mut o = opts(1, SolverKind::Euler);
    o.guidance = GuidanceConfig::disabled();
    let out = sample(&oracle, &[0], (1, 2, 2), &o, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert!(max_abs_diff(&out.images, &target).unwrap() < 1e-15);
}

#[test]
fn straight_line_field_reaches_target_with_every_solver() {
    // v(x, t) = (target − x)/(1 − t) transports any x_t onto the line ending at target.
    let target = Tensor::from_slice(&[0.2, -0.4, 0.6, -0.8], (1, 1, 2, 2), &cpu()).unwrap();
    let tg = target.clone();
    let field = FnField::new(0, move |x: &Tensor, t: f64, _l: &[u32]| Ok(((&tg - x)? / (1.0 - t))?));
    for kind in [SolverKind::Euler, SolverKind::Adams2, SolverKind::Adams4] {
        let mut o = opts(10, kind);
        o.guidance = GuidanceConfig::disabled();
        let out = sample(&field, &[0], (1, 2, 2), &o, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(max_abs_diff(&out.images, &target).unwrap() < 1e-9, "{kind}");
    }
}

fn toy_model() -> FnField<impl Fn(&Tensor, f64, &[u32]) -> crate::Result<Tensor>> {
    FnField::new(9, |x: &Tensor, t: f64, labels: &[u32]| {
        let b = x.dims()[0];
        let per: Vec<f64> = labels.iter().map(|&l| (l as f64 * 0.1).sin()).collect();
        let col = Tensor::from_vec(per, (b, 1, 1, 1), x.device())?.to_dtype(x.dtype())?;
        Ok((col.broadcast_sub(&(x * (0.5 + t))?)? + x.sin()?)?)
    })
}

#[test]
fn sampling_is_deterministic() {
    let m = toy_model();
    for kind in [SolverKind::Euler, SolverKind::Adams2, SolverKind::Adams4] {
        let o = opts(12, kind);
        let a = sample(&m, &[1, 3], (2, 4, 4), &o, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample(&m, &[1, 3], (2, 4, 4), &o, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(vals(&a.raw), vals(&b.raw));
    }
}

#[test]
fn recording_does_not_perturb_and_ends_at_clean_estimate() {
    let m = toy_model();
    let mut o = opts(8, SolverKind::Adams2);
    let plain = sample(&m, &[2], (1, 4, 4), &o, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    o.record_trajectory = true;
    let rec = sample(&m, &[2], (1, 4, 4), &o, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(vals(&plain.raw), vals(&rec.raw));
    assert_eq!(rec.trajectory.len(), 8);
    assert!(plain.trajectory.is_empty());
}

#[test]
fn unit_scale_ignores_interval() {
    let m = toy_model();
    let mut a = opts(6, SolverKind::Adams2);
    a.guidance = GuidanceConfig::new(1.0, 0.1, 1.0).unwrap();
    let mut b = a.clone();
    b.guidance = GuidanceConfig::new(1.0, 0.4, 0.6).unwrap();
    let ra = sample(&m, &[4], (1, 4, 4), &a, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let rb = sample(&m, &[4], (1, 4, 4), &b, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(vals(&ra.raw), vals(&rb.raw));
    assert_eq!(ra.evaluations, 6);
}

#[test]
fn unstable_field_is_reported_not_raised() {
    let stiff = FnField::new(0, |x: &Tensor, _t: f64, _l: &[u32]| Ok((x * -400.0)?));
    let mut o = opts(20, SolverKind::Adams4);
    o.guidance = GuidanceConfig::disabled();
    let out = sample(&stiff, &[0], (1, 2, 2), &o, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(out.diverged);
    assert!(out.max_abs > DIVERGENCE_THRESHOLD);
    let imgs = vals(&out.images);
    assert!(imgs.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
}

#[test]
fn zero_steps_rejected() {
    let r = sample(&zero_field(), &[0], (1, 2, 2), &opts(0, SolverKind::Euler), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn solver_names_round_trip() {
    for k in [SolverKind::Euler, SolverKind::Adams2, SolverKind::Adams4] {
        assert_eq!(k.name().parse::<SolverKind>().unwrap(), k);
    }
    assert!("rk45".parse::<SolverKind>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_constant_field_exact_at_any_order(c in -3.0f64..3.0, x0 in -2.0f64..2.0, steps in 1usize..20) {
        for kind in [SolverKind::Euler, SolverKind::Adams2, SolverKind::Adams4] {
            let out = integrate(&t1(&[x0]), steps, kind, Warmup::LowerOrder, |_x, _t| Ok(t1(&[c]))).unwrap();
            prop_assert!((vals(&out)[0] - (x0 + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn prop_cfg_is_affine_in_scale(vc in -5.0f64..5.0, vu in -5.0f64..5.0, w in 1.0f64..10.0, t in 0.0f64..1.0) {
        let g = GuidanceConfig::new(w, 0.0, 1.0).unwrap();
        let v = vals(&combine_guidance(&t1(&[vc]), &t1(&[vu]), t, &g).unwrap())[0];
        prop_assert!((v - (vu + w * (vc - vu))).abs() < 1e-9);
    }
}
