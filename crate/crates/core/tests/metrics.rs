use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat::metrics::*;
use semsplat::synth::{generate_dataset, DatasetSpec, TrajectorySpec};
use semsplat::{Error, ImageBuf};

#[test]
fn psnr_examples() {
    let a = ImageBuf::filled(4, 3, 3, 0.0);
    let b = ImageBuf::filled(4, 3, 3, 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert!(matches!(
        psnr(&a, &ImageBuf::new(3, 4, 3)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn segmentation_examples() {
    let table = vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    for k in 0..3 {
        let f = ImageBuf::from_vec(2, 2, 3, table[k].repeat(4)).unwrap();
        assert_eq!(
            segment_feature_map(&f, &table).unwrap(),
            LabelMap::filled(2, 2, k as i32)
        );
    }
    let zero = ImageBuf::new(2, 2, 3);
    assert_eq!(
        segment_feature_map(&zero, &table).unwrap(),
        LabelMap::filled(2, 2, BACKGROUND)
    );
    // Equal similarity to classes 1 and 2: lowest id wins.
    let tie = ImageBuf::from_vec(1, 1, 3, vec![0.0, 0.5, 0.5]).unwrap();
    assert_eq!(segment_feature_map(&tie, &table).unwrap().data, vec![1]);
    assert!(matches!(
        segment_feature_map(&ImageBuf::new(1, 1, 2), &table),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn noisy_oracle_features_still_decode() {
    let spec = DatasetSpec {
        trajectory: TrajectorySpec {
            width: 48,
            height: 48,
            ..TrajectorySpec::default()
        },
        frames: 4,
        ..DatasetSpec::default()
    };
    let d = generate_dataset(12, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.001, 0.002, 0.005] {
        let mut conf = Confusion::new(d.scene.classes());
        for f in &d.frames {
            let mut noisy = f.feature.clone();
            for v in noisy.data.iter_mut() {
                // Uniform noise with standard deviation sigma.
                *v += sigma * 3f64.sqrt() * rng.gen_range(-1.0..1.0);
            }
            conf.add(
                &segment_feature_map(&noisy, &d.scene.table).unwrap(),
                &f.labels,
            )
            .unwrap();
        }
        let (miou, _) = conf.miou_macc();
        assert!(miou > 0.99, "sigma {sigma}: mIoU {miou}");
    }
}

#[test]
fn miou_examples() {
    let gt = LabelMap {
        width: 4,
        height: 1,
        data: vec![0, 0, 1, 1],
    };
    assert_eq!(miou_macc(&gt, &gt, 2).unwrap(), (1.0, 1.0));
    let constant = LabelMap::filled(4, 1, 0);
    let (miou, macc) = miou_macc(&constant, &gt, 2).unwrap();
    assert!((miou - 0.25).abs() < 1e-15 && (macc - 0.5).abs() < 1e-15);
    // Background ground truth is ignored; background predictions are misses.
    let gt_bg = LabelMap {
        width: 4,
        height: 1,
        data: vec![0, BACKGROUND, 0, 0],
    };
    let pred = LabelMap {
        width: 4,
        height: 1,
        data: vec![0, 0, BACKGROUND, 0],
    };
    let (miou, macc) = miou_macc(&pred, &gt_bg, 2).unwrap();
    assert!((miou - 2.0 / 3.0).abs() < 1e-15 && (macc - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(
        miou_macc(&gt, &LabelMap::filled(4, 1, BACKGROUND), 2).unwrap(),
        (0.0, 0.0)
    );
    assert!(matches!(
        miou_macc(&gt, &LabelMap::filled(2, 2, 0), 2),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn majority_class() {
    let m = LabelMap {
        width: 5,
        height: 1,
        data: vec![2, BACKGROUND, 1, 2, 1],
    };
    assert_eq!(m.majority_class(), Some(1));
    assert_eq!(LabelMap::filled(2, 2, BACKGROUND).majority_class(), None);
}

fn label_pair() -> impl Strategy<Value = (Vec<i32>, Vec<i32>, u64)> {
    (1usize..60).prop_flat_map(|n| {
        (
            proptest::collection::vec(-1i32..4, n),
            proptest::collection::vec(-1i32..4, n),
            any::<u64>(),
        )
    })
}

proptest! {
    #[test]
    fn psnr_is_symmetric(a in proptest::collection::vec(0.0f64..1.0, 12), b in proptest::collection::vec(0.0f64..1.0, 12)) {
        let a = ImageBuf::from_vec(2, 2, 3, a).unwrap();
        let b = ImageBuf::from_vec(2, 2, 3, b).unwrap();
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn metrics_ignore_pixel_order((p, g, seed) in label_pair()) {
        let n = p.len();
        let pred = LabelMap { width: n, height: 1, data: p.clone() };
        let gt = LabelMap { width: n, height: 1, data: g.clone() };
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let pp = LabelMap { width: n, height: 1, data: idx.iter().map(|&i| p[i]).collect() };
        let gp = LabelMap { width: n, height: 1, data: idx.iter().map(|&i| g[i]).collect() };
        let a = miou_macc(&pred, &gt, 4).unwrap();
        let b = miou_macc(&pp, &gp, 4).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a.0) && (0.0..=1.0).contains(&a.1));
        prop_assert!(a.0 <= a.1 + 1e-15);
    }
}
