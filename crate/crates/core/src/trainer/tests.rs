use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::HeadKind;
use crate::gradcheck::{check_gradients, randomize};
use crate::ops::scalar;

fn micro() -> TrainConfig {
    let mut c = TrainConfig::tiny();
    c.model.image_h = 8;
    c.model.image_w = 8;
    c.model.patch = 4;
    c.model.hidden = 16;
    c.model.heads = 2;
    c.model.depth = 2;
    c.model.num_classes = 4;
    c.field.channels = 8;
    c.field.out_channels = 8;
    c.repa.teacher_dim = 8;
    c.repa.projector_hidden = 16;
    c.repa.layer = 1;
    c.train.batch_size = 2;
    c
}

fn batch(dtype: DType, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = gaussian_noise(&[2, 3, 8, 8], dtype, &mut rng).unwrap().affine(0.4, 0.0).unwrap().clamp(-1.0, 1.0).unwrap();
    Batch {
        images,
        labels: vec![1, 3],
        indices: vec![0, 1],
    }
}

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

#[test]
fn dropout_extremes() {
    let labels: Vec<u32> = (0..50).map(|i| i % 7).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(dropout_labels(&labels, 0.0, 9, &mut rng).unwrap(), labels);
    assert!(dropout_labels(&labels, 1.0, 9, &mut rng).unwrap().iter().all(|&l| l == 9));
    assert!(matches!(dropout_labels(&labels, 1.5, 9, &mut rng), Err(Error::Domain(_))));
}

#[test]
fn dropout_rate_concentrates() {
    let labels = vec![0u32; 100_000];
    let out = dropout_labels(&labels, 0.1, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let frac = out.iter().filter(|&&l| l == 5).count() as f64 / labels.len() as f64;
    assert!((frac - 0.1).abs() < 0.01, "null fraction {frac}");
}

#[test]
fn repa_identical_and_antipodal() {
    let a = t(&[1.0, 2.0, -1.0, 0.5, 0.0, 3.0], &[1, 2, 3]);
    assert!(scalar(&repa_loss(&a, &a).unwrap()).unwrap().abs() < 1e-12);
    let neg = a.neg().unwrap();
    assert!((scalar(&repa_loss(&a, &neg).unwrap()).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn repa_two_token_hand_oracle() {
    let p = [[1.0, 2.0, 2.0], [0.0, -1.0, 1.0]];
    let q = [[2.0, 0.0, 1.0], [3.0, 1.0, 1.0]];
    let mut expected = 0.0;
    for i in 0..2 {
        let dot: f64 = (0..3).map(|k| p[i][k] * q[i][k]).sum();
        let np = p[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nq = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        expected += 1.0 - dot / (np * nq);
    }
    expected /= 2.0;
    let pt = t(&p.concat(), &[1, 2, 3]);
    let qt = t(&q.concat(), &[1, 2, 3]);
    assert!((scalar(&repa_loss(&pt, &qt).unwrap()).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn repa_zero_vector_is_guarded() {
    let z = t(&[0.0, 0.0], &[1, 1, 2]);
    let a = t(&[1.0, 1.0], &[1, 1, 2]);
    let l = scalar(&repa_loss(&z, &a).unwrap()).unwrap();
    assert!((l - 1.0).abs() < 1e-12);
}

#[test]
fn repa_shape_mismatch_is_contract_error() {
    let a = t(&[1.0, 2.0], &[1, 1, 2]);
    let b = t(&[1.0, 2.0, 3.0], &[1, 1, 3]);
    assert!(matches!(repa_loss(&a, &b), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_repa_teacher_scale_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 12), s in 0.01f64..100.0) {
        let p = t(&vals[..6], &[1, 2, 3]);
        let q = t(&vals[6..], &[1, 2, 3]);
        let l1 = scalar(&repa_loss(&p, &q).unwrap()).unwrap();
        let l2 = scalar(&repa_loss(&p, &(&q * s).unwrap()).unwrap()).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-9);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l1));
    }
}

#[test]
fn zero_repa_weight_total_is_flow() {
    let mut c = micro();
    c.repa.weight = 0.0;
    let tr = Trainer::new(c, DType::F32).unwrap();
    let terms = tr.loss_terms(&batch(DType::F32, 0), 1).unwrap();
    assert_eq!(scalar(&terms.total).unwrap(), scalar(&terms.flow).unwrap());
}

#[test]
fn teacher_features_follow_grid() {
    let c = micro();
    let teacher = RandomConvTeacher::new(3, 8, 1, DType::F32).unwrap();
    let tr = Trainer::new(c, DType::F32).unwrap();
    let grid = tr.model().grid().unwrap();
    let b = batch(DType::F32, 0);
    let f = teacher.features(&b.images, &grid, &b.indices).unwrap();
    assert_eq!(f.dims(), &[2, 4, 8]);
    let again = teacher.features(&b.images, &grid, &b.indices).unwrap();
    assert_eq!(crate::ops::max_abs_diff(&f, &again).unwrap(), 0.0);
}

#[test]
fn precomputed_teacher_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let table = Tensor::arange(0f32, 3.0 * 4.0 * 5.0, &Device::Cpu).unwrap().reshape((3, 4, 5)).unwrap();
    let path = dir.path().join("feats.safetensors");
    PrecomputedTeacher::from_tensor(table.clone()).unwrap().save(&path).unwrap();
    let teacher = PrecomputedTeacher::load(&path).unwrap();
    assert_eq!(teacher.dim(), 5);
    let grid = crate::backbone::PatchGrid::new(8, 8, 4, 3).unwrap();
    let imgs = Tensor::zeros((2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
    let f = teacher.features(&imgs, &grid, &[2, 0]).unwrap();
    let want = Tensor::cat(&[table.get(2).unwrap().unsqueeze(0).unwrap(), table.get(0).unwrap().unsqueeze(0).unwrap()], 0).unwrap();
    assert_eq!(crate::ops::max_abs_diff(&f, &want).unwrap(), 0.0);
    assert!(matches!(teacher.features(&imgs, &grid, &[3, 0]), Err(Error::Data(_))));
}

#[test]
fn training_is_deterministic() {
    let b = batch(DType::F32, 0);
    let run = || {
        let mut tr = Trainer::new(micro(), DType::F32).unwrap();
        (0..3).map(|_| tr.train_step(&b).unwrap()).collect::<Vec<_>>()
    };
    let (a, c) = (run(), run());
    assert!(a.iter().zip(&c).all(|(x, y)| x.same_values(y)));
}

#[test]
fn zero_decay_ema_tracks_params() {
    let mut c = micro();
    c.train.ema_decay = 0.0;
    let mut tr = Trainer::new(c, DType::F32).unwrap();
    let b = batch(DType::F32, 0);
    for _ in 0..3 {
        tr.train_step(&b).unwrap();
        for (name, _) in tr.store().vars() {
            assert_eq!(tr.store().values(&name).unwrap(), tr.ema_store().values(&name).unwrap(), "{name}");
        }
    }
}

#[test]
fn ema_stays_within_parameter_history() {
    let mut c = micro();
    c.train.ema_decay = 0.8;
    let mut tr = Trainer::new(c, DType::F64).unwrap();
    let b = batch(DType::F64, 0);
    let names: Vec<String> = tr.store().vars().into_iter().map(|(n, _)| n).collect();
    let watched: Vec<&String> = names.iter().step_by(5).collect();
    let mut lo: Vec<Vec<f64>> = watched.iter().map(|n| tr.store().values(n).unwrap()).collect();
    let mut hi = lo.clone();
    for _ in 0..12 {
        tr.train_step(&b).unwrap();
        for (k, n) in watched.iter().enumerate() {
            let p = tr.store().values(n).unwrap();
            let e = tr.ema_store().values(n).unwrap();
            for i in 0..p.len() {
                lo[k][i] = lo[k][i].min(p[i]);
                hi[k][i] = hi[k][i].max(p[i]);
                assert!(e[i] >= lo[k][i] - 1e-12 && e[i] <= hi[k][i] + 1e-12, "{n}[{i}]");
            }
        }
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.pnrd");
    let batches: Vec<Batch> = (0..10).map(|i| batch(DType::F32, i)).collect();
    let mut full = Trainer::new(micro(), DType::F32).unwrap();
    let straight: Vec<StepMetrics> = batches.iter().map(|b| full.train_step(b).unwrap()).collect();

    let mut first = Trainer::new(micro(), DType::F32).unwrap();
    let mut split: Vec<StepMetrics> = batches[..5].iter().map(|b| first.train_step(b).unwrap()).collect();
    first.save(&path).unwrap();
    drop(first);
    let mut second = Trainer::load(&path, DType::F32).unwrap();
    assert_eq!(second.step(), 5);
    split.extend(batches[5..].iter().map(|b| second.train_step(b).unwrap()));

    for (a, b) in straight.iter().zip(&split) {
        assert!(a.same_values(b), "{a:?} vs {b:?}");
    }
    for (name, _) in full.store().vars() {
        assert_eq!(full.store().values(&name).unwrap(), second.store().values(&name).unwrap());
        assert_eq!(full.ema_store().values(&name).unwrap(), second.ema_store().values(&name).unwrap());
    }
}

#[test]
fn save_load_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pnrd");
    let mut tr = Trainer::new(micro(), DType::F32).unwrap();
    tr.train_step(&batch(DType::F32, 0)).unwrap();
    tr.save(&path).unwrap();
    let back = Trainer::load(&path, DType::F32).unwrap();
    for (name, _) in tr.store().vars() {
        assert_eq!(tr.store().values(&name).unwrap(), back.store().values(&name).unwrap());
    }
    assert_eq!(back.optimizer().t, 1);
    assert_eq!(back.config(), tr.config());
}

#[test]
fn mismatched_dims_are_rejected_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pnrd");
    Trainer::new(micro(), DType::F32).unwrap().save(&path).unwrap();
    let mut other = micro();
    other.model.hidden = 24;
    let mut tr = Trainer::new(other, DType::F32).unwrap();
    let err = tr.resume(&path, false).unwrap_err().to_string();
    assert!(err.contains("model.hidden"), "{err}");
    let err = tr.resume(&path, true).unwrap_err().to_string();
    assert!(err.contains("dimension mismatch"), "{err}");
}

#[test]
fn corrupted_or_foreign_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pnrd");
    let tr = Trainer::new(micro(), DType::F32).unwrap();
    let bytes = tr.checkpoint().unwrap().to_bytes().unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let e = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
    assert!(e.contains("checksum"), "{e}");

    let mut versioned = bytes.clone();
    versioned[4] = 9;
    let e = Checkpoint::from_bytes(&versioned).unwrap_err().to_string();
    assert!(e.contains("version"), "{e}");

    let e = Checkpoint::from_bytes(b"GIF89a...").unwrap_err().to_string();
    assert!(e.contains("magic"), "{e}");

    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(Trainer::load(&path, DType::F32), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_loss_reports_step_and_components() {
    let mut c = micro();
    c.model.head = HeadKind::Linear;
    let mut tr = Trainer::new(c, DType::F32).unwrap();
    let b = batch(DType::F32, 0);
    tr.train_step(&b).unwrap();
    let w = tr.store().var("head.proj.bias").unwrap();
    w.set(&(w.as_tensor() * f64::NAN).unwrap()).unwrap();
    let e = tr.train_step(&b).unwrap_err().to_string();
    assert!(e.contains("step 2") && e.contains("flow="), "{e}");
}

#[test]
fn non_finite_field_input_reports_step() {
    let mut tr = Trainer::new(micro(), DType::F32).unwrap();
    let mut b = batch(DType::F32, 0);
    b.images = (b.images * f64::NAN).unwrap();
    let e = tr.train_step(&b).unwrap_err();
    assert!(matches!(&e, Error::Numeric(m) if m.contains("step 1")), "{e}");
}

#[test]
fn gradients_match_finite_differences_with_alignment() {
    let mut c = micro();
    c.model.image_h = 4;
    c.model.image_w = 4;
    c.model.patch = 2;
    c.model.hidden = 8;
    c.model.depth = 1;
    c.model.heads = 2;
    c.field.channels = 4;
    c.field.out_channels = 4;
    c.repa.projector_hidden = 8;
    c.repa.teacher_dim = 4;
    c.train.label_dropout = 0.5;
    let tr = Trainer::new(c, DType::F64).unwrap();
    randomize(tr.store(), 0.3, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = Batch {
        images: gaussian_noise(&[2, 3, 4, 4], DType::F64, &mut rng).unwrap().affine(0.5, 0.0).unwrap(),
        labels: vec![0, 2],
        indices: vec![0, 1],
    };
    let report = check_gradients(tr.store(), || Ok(tr.loss_terms(&b, 3)?.total), 1e-5, 6, 1e-6, 0).unwrap();
    let worst = report.worst().unwrap();
    assert!(report.max_rel_error() < 1e-3, "{worst:?}");
    assert_eq!(report.params_checked(), tr.store().len());
}

#[test]
fn loss_decreases_on_two_images() {
    let mut c = micro();
    c.train.lr = 3e-3;
    c.train.label_dropout = 0.0;
    let mut tr = Trainer::new(c, DType::F32).unwrap();
    let b = batch(DType::F32, 0);
    let losses: Vec<f64> = (0..200).map(|_| tr.train_step(&b).unwrap().flow_loss).collect();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "head {head} tail {tail}");
}
