use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat::objectives::*;
use semsplat::{Error, ImageBuf, Quaternion, RelativePose};

fn random_image(seed: u64, w: usize, h: usize, c: usize) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuf::from_vec(w, h, c, (0..w * h * c).map(|_| rng.gen()).collect()).unwrap()
}

/// Sliding-window SSIM computed directly from its definition with an explicit 2D window.
#[allow(clippy::needless_range_loop)]
fn naive_ssim(a: &ImageBuf, b: &ImageBuf) -> f64 {
    let sigma = 1.5f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..a.channels {
        for y0 in 0..=a.height - 11 {
            for x0 in 0..=a.width - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = win[i][j] / total;
                        ma += wgt * a.get(x0 + j, y0 + i, c);
                        mb += wgt * b.get(x0 + j, y0 + i, c);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = win[i][j] / total;
                        let (da, db) =
                            (a.get(x0 + j, y0 + i, c) - ma, b.get(x0 + j, y0 + i, c) - mb);
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn fd_check(f: impl Fn(&ImageBuf) -> f64, at: &ImageBuf, grad: &ImageBuf, probes: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = 1e-4;
    for _ in 0..probes {
        let i = rng.gen_range(0..at.data.len());
        let mut p = at.clone();
        p.data[i] += eps;
        let plus = f(&p);
        p.data[i] -= 2.0 * eps;
        let minus = f(&p);
        let fd = (plus - minus) / (2.0 * eps);
        let an = grad.data[i];
        let scale = fd.abs().max(an.abs());
        if scale > 1e-6 {
            assert!(
                (fd - an).abs() / scale < 1e-3,
                "element {i}: analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn ssim_of_identical_images_is_one() {
    let img = random_image(1, 16, 14, 3);
    assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_of_negated_image_is_below_one() {
    let img = random_image(2, 16, 16, 3);
    let mut neg = img.clone();
    neg.data.iter_mut().for_each(|v| *v = 1.0 - *v);
    assert!(ssim(&img, &neg).unwrap() < 1.0 - 1e-3);
}

#[test]
fn ssim_matches_naive_sliding_window() {
    for seed in 0..4 {
        let a = random_image(seed, 17 + seed as usize, 13, 3);
        let mut b = a.clone();
        let noise = random_image(seed + 50, a.width, a.height, 3);
        for (v, n) in b.data.iter_mut().zip(&noise.data) {
            *v = (*v * 0.6 + n * 0.4).clamp(0.0, 1.0);
        }
        let fast = ssim(&a, &b).unwrap();
        let slow = naive_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-8, "{fast} vs {slow}");
        assert!(
            (ssim(&a, &random_image(seed + 9, a.width, a.height, 3)).unwrap()
                - naive_ssim(&a, &random_image(seed + 9, a.width, a.height, 3)))
            .abs()
                < 1e-8
        );
    }
}

#[test]
fn ssim_rejects_bad_shapes() {
    let a = random_image(1, 16, 16, 3);
    assert!(matches!(
        ssim(&a, &random_image(1, 16, 15, 3)),
        Err(Error::Dimension(_))
    ));
    let small = random_image(1, 10, 16, 1);
    assert!(matches!(ssim(&small, &small), Err(Error::Dimension(_))));
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let x = random_image(3, 14, 15, 2);
    let y = random_image(4, 14, 15, 2);
    let (_, g) = ssim_with_grad(&x, &y).unwrap();
    fd_check(|p| ssim(&x, p).unwrap(), &y, &g, 60);
}

#[test]
fn photometric_examples() {
    let a = random_image(5, 16, 16, 3);
    let b = random_image(6, 16, 16, 3);
    assert_eq!(photometric_loss(&a, &a, 0.15).unwrap(), 0.0);
    let rms = (a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64)
        .sqrt();
    assert_eq!(photometric_loss(&a, &b, 0.0).unwrap(), rms);
    assert_eq!(photometric_loss(&a, &a, 1.0).unwrap(), 0.0);
    let direct = (1.0 - naive_ssim(&a, &b)) / 2.0;
    assert!((photometric_loss(&a, &b, 1.0).unwrap() - direct).abs() < 1e-8);
}

#[test]
fn photometric_gradient_matches_finite_differences() {
    let gt = random_image(7, 16, 12, 3);
    let r = random_image(8, 16, 12, 3);
    for distance in [PhotometricDistance::Rms, PhotometricDistance::Mse] {
        for eta in [0.0, 0.15, 1.0] {
            let (v, g) = photometric_loss_with_grad(&gt, &r, eta, distance).unwrap();
            assert!((v - photometric_loss_with(&gt, &r, eta, distance).unwrap()).abs() < 1e-15);
            fd_check(
                |p| photometric_loss_with(&gt, p, eta, distance).unwrap(),
                &r,
                &g,
                40,
            );
        }
    }
    let (v, g) = photometric_loss_with_grad(&gt, &gt, 0.15, PhotometricDistance::Rms).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.data.iter().all(|x| x.abs() < 1e-12));
}

fn pose(q: [f64; 4], t: [f64; 3]) -> RelativePose {
    RelativePose::new(Quaternion::from_array(q), Vector3::from(t)).unwrap()
}

#[test]
fn pose_loss_examples() {
    let gt = pose([0.9, 0.1, -0.3, 0.2], [0.1, 0.2, 0.3]);
    assert_eq!(pose_loss(&gt, &gt).unwrap(), 0.0);
    let shifted = RelativePose {
        translation: gt.translation + Vector3::new(3.0, 4.0, 0.0),
        ..gt
    };
    assert!((pose_loss(&shifted, &gt).unwrap() - 5.0).abs() < 1e-12);
    let gt = RelativePose::IDENTITY;
    let pred = pose([0.6, 0.8, 0.0, 0.0], [0.0; 3]);
    assert!((pose_loss(&pred, &gt).unwrap() - 0.8f64.sqrt()).abs() < 1e-9);
}

#[test]
fn pose_loss_flags_non_canonical_prediction() {
    let gt = RelativePose::IDENTITY;
    let e = pose_loss_with_grad(
        &Vector3::zeros(),
        &Quaternion::new(-2.0, 0.0, 0.0, 0.0),
        &gt,
    )
    .unwrap();
    assert!(e.canonicalized);
    assert_eq!(e.value, 0.0);
    let e = pose_loss_with_grad(&Vector3::zeros(), &Quaternion::IDENTITY, &gt).unwrap();
    assert!(!e.canonicalized);
    assert!(
        pose_loss_with_grad(&Vector3::zeros(), &Quaternion::new(0.0, 0.0, 0.0, 0.0), &gt).is_err()
    );
}

#[test]
fn pose_loss_gradient_matches_finite_differences() {
    let gt = pose([0.7, -0.2, 0.4, 0.1], [0.3, -0.1, 0.5]);
    let t = Vector3::new(0.1, 0.4, -0.2);
    let q = Quaternion::new(0.8, 0.1, 0.3, -0.2).canonicalize().unwrap();
    let e = pose_loss_with_grad(&t, &q, &gt).unwrap();
    let eps = 1e-4;
    let value = |t: Vector3<f64>, q: [f64; 4]| {
        // Evaluate without re-normalizing: the gradient is taken with respect
        // to the canonical components as given.
        let gq = gt.rotation.to_array();
        let dq: f64 = (0..4).map(|i| (q[i] - gq[i]).powi(2)).sum::<f64>().sqrt();
        (t - gt.translation).norm() + dq
    };
    for k in 0..3 {
        let mut tp = t;
        tp[k] += eps;
        let mut tm = t;
        tm[k] -= eps;
        let fd = (value(tp, q.to_array()) - value(tm, q.to_array())) / (2.0 * eps);
        assert!((fd - e.grad_translation[k]).abs() < 1e-7);
    }
    for k in 0..4 {
        let mut qp = q.to_array();
        qp[k] += eps;
        let mut qm = q.to_array();
        qm[k] -= eps;
        let fd = (value(t, qp) - value(t, qm)) / (2.0 * eps);
        assert!((fd - e.grad_rotation[k]).abs() < 1e-7);
    }
}

fn feature_map(w: usize, h: usize, n: usize, f: impl FnMut(usize) -> Vec<f64>) -> ImageBuf {
    let data = (0..w * h).flat_map(f).collect();
    ImageBuf::from_vec(w, h, n, data).unwrap()
}

#[test]
fn semantic_loss_endpoints() {
    let t = feature_map(4, 3, 3, |p| vec![1.0 + p as f64, 0.5, -0.2]);
    assert!(semantic_loss(&t, &t).unwrap().abs() < 1e-12);
    let orth = feature_map(4, 3, 3, |_| vec![0.0, 0.2, 0.5]);
    let t2 = feature_map(4, 3, 3, |_| vec![2.0, 0.0, 0.0]);
    assert!((semantic_loss(&orth, &t2).unwrap() - 1.0).abs() < 1e-12);
    let anti = feature_map(4, 3, 3, |p| vec![-(1.0 + p as f64), -0.5, 0.2]);
    assert!((semantic_loss(&anti, &t).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn semantic_loss_skips_zero_targets() {
    let pred = feature_map(2, 1, 2, |_| vec![1.0, 0.0]);
    let target = feature_map(2, 1, 2, |p| {
        if p == 0 {
            vec![1.0, 0.0]
        } else {
            vec![0.0, 0.0]
        }
    });
    assert_eq!(semantic_loss(&pred, &target).unwrap(), 0.0);
    let zero = feature_map(2, 1, 2, |_| vec![0.0, 0.0]);
    assert_eq!(semantic_loss(&pred, &zero).unwrap(), 0.0);
    // A zero prediction against a valid target scores cos = 0.
    assert!((semantic_loss(&zero, &pred).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn semantic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred = feature_map(5, 4, 6, |_| {
        (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()
    });
    let target = feature_map(5, 4, 6, |p| {
        if p == 3 {
            vec![0.0; 6]
        } else {
            (0..6).map(|k| ((p * 7 + k * 3) % 5) as f64 - 2.0).collect()
        }
    });
    let (v, g) = semantic_loss_with_grad(&pred, &target).unwrap();
    assert!((v - semantic_loss(&pred, &target).unwrap()).abs() < 1e-15);
    fd_check(|p| semantic_loss(p, &target).unwrap(), &pred, &g, 80);
    assert!(g.pixel(3, 0).iter().all(|&x| x == 0.0));
}

#[test]
fn total_loss_combines_terms() {
    let w = LossWeights::default();
    assert_eq!((w.eta, w.lambda_pose, w.lambda_sem), (0.15, 0.1, 0.1));
    assert_eq!(total_loss(1.0, 0.0, 0.0, &w), 1.0);
    assert!((total_loss(0.5, 1.0, 2.0, &w) - 0.8).abs() < 1e-15);
    let zero = LossWeights {
        lambda_pose: 0.0,
        lambda_sem: 0.0,
        ..w
    };
    assert_eq!(total_loss(0.3, 7.0, 9.0, &zero), 0.3);
    let b = LossBreakdown::new(0.5, 1.0, 2.0, &w);
    assert_eq!(
        b.total,
        b.photo + w.lambda_pose * b.pose + w.lambda_sem * b.sem
    );
}

#[test]
fn loss_weights_validation_lists_every_problem() {
    let w = LossWeights {
        eta: 1.5,
        lambda_pose: -1.0,
        lambda_sem: f64::NAN,
    };
    match w.validate() {
        Err(Error::Config(list)) => assert_eq!(list.len(), 3),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn semantic_loss_ignores_positive_rescaling(seed in 0u64..1000, s1 in 0.01f64..100.0, s2 in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = feature_map(3, 3, 4, |_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = feature_map(3, 3, 4, |_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut a2 = a.clone();
        a2.data.iter_mut().for_each(|v| *v *= s1);
        let mut b2 = b.clone();
        b2.data.iter_mut().for_each(|v| *v *= s2);
        let l1 = semantic_loss(&a, &b).unwrap();
        let l2 = semantic_loss(&a2, &b2).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&l1));
    }

    #[test]
    fn pose_loss_ignores_gt_quaternion_sign(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
        let q = Quaternion::new(w, x, y, z);
        prop_assume!(q.norm() > 0.1);
        let pred = pose([0.5, 0.5, -0.5, 0.5], [0.0, 1.0, 0.0]);
        let gt = RelativePose { rotation: q, translation: Vector3::zeros() };
        let neg = RelativePose { rotation: q.scale(-1.0), translation: Vector3::zeros() };
        let a = pose_loss(&pred, &gt).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, pose_loss(&pred, &neg).unwrap());
    }

    #[test]
    fn photometric_loss_is_nonnegative(seed in 0u64..1000, eta in 0.0f64..1.0) {
        let a = random_image(seed, 12, 12, 3);
        let b = random_image(seed + 1, 12, 12, 3);
        prop_assert!(photometric_loss(&a, &b, eta).unwrap() >= 0.0);
    }
}
