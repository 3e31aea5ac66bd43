use nalgebra::Vector3;
use semsplat::geometry::rotation_angle_between;
use semsplat::metrics::{miou_macc, segment_feature_map, BACKGROUND};
use semsplat::synth::*;
use semsplat::{Error, GaussianScene};

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        trajectory: TrajectorySpec {
            width: 24,
            height: 20,
            ..TrajectorySpec::default()
        },
        frames: 6,
        ..DatasetSpec::default()
    }
}

#[test]
fn same_seed_same_scene() {
    let spec = SceneSpec::default();
    assert_eq!(
        generate_scene(7, &spec).unwrap(),
        generate_scene(7, &spec).unwrap()
    );
    assert_ne!(
        generate_scene(7, &spec).unwrap(),
        generate_scene(8, &spec).unwrap()
    );
    let a = generate_dataset(7, &small_spec()).unwrap();
    let b = generate_dataset(7, &small_spec()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn scene_respects_spec() {
    let spec = SceneSpec::default();
    let s = generate_scene(3, &spec).unwrap();
    let planes = 6 * spec.plane_grid * spec.plane_grid;
    assert_eq!(
        s.scene.len(),
        planes + spec.objects * spec.gaussians_per_object
    );
    assert_eq!(s.class_ids.len(), s.scene.len());
    s.scene.validate().unwrap();
    let e = spec.half_extent;
    for (g, &k) in s.scene.gaussians.iter().zip(&s.class_ids) {
        assert!(k < spec.classes);
        // Features are the class embeddings bit for bit.
        assert_eq!(g.feat, s.table[k]);
        for (i, half) in e.iter().enumerate() {
            assert!(g.mu[i].abs() <= half + 1e-9, "{:?} outside the room", g.mu);
        }
    }
    // The six room planes use the structural classes.
    assert!(s.class_ids[..planes].iter().all(|&k| k < 3));
    assert!(s.class_ids[planes..].iter().all(|&k| k >= 3));
}

#[test]
fn no_objects_gives_planes_only() {
    let spec = SceneSpec {
        objects: 0,
        ..SceneSpec::default()
    };
    let s = generate_scene(1, &spec).unwrap();
    assert_eq!(s.scene.len(), 6 * spec.plane_grid * spec.plane_grid);
    assert!(s.class_ids.iter().all(|&k| k < 3));
}

#[test]
fn embedding_table_is_orthonormal() {
    for seed in 0..20 {
        for (c, n) in [(7, 8), (3, 3), (16, 16), (5, 32)] {
            let spec = SceneSpec {
                classes: c,
                feature_dim: n,
                objects: 0,
                plane_grid: 1,
                embedding_seed: seed,
                ..SceneSpec::default()
            };
            let s = generate_scene(seed, &spec).unwrap();
            assert_eq!(s.table.len(), c);
            for i in 0..c {
                assert_eq!(s.table[i].len(), n);
                for j in 0..c {
                    let g: f64 = s.table[i].iter().zip(&s.table[j]).map(|(a, b)| a * b).sum();
                    if i == j {
                        assert!((g - 1.0).abs() < 1e-12);
                    } else {
                        assert!(g.abs() <= 0.1, "cos({i},{j}) = {g}");
                        assert!(g.abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn infeasible_specs_are_config_errors() {
    let bad = SceneSpec {
        classes: 9,
        feature_dim: 4,
        plane_grid: 0,
        ..SceneSpec::default()
    };
    match generate_scene(0, &bad) {
        Err(Error::Config(list)) => assert_eq!(list.len(), 2),
        other => panic!("{other:?}"),
    }
    let too_many = SceneSpec {
        classes: 17,
        feature_dim: 17,
        ..SceneSpec::default()
    };
    assert!(matches!(
        generate_scene(0, &too_many),
        Err(Error::Config(_))
    ));
}

#[test]
fn trajectory_steps_are_bounded_and_look_inward() {
    for deg in [0.5, 1.0, 3.0, 10.0] {
        let spec = TrajectorySpec {
            deg_per_frame: deg,
            ..TrajectorySpec::default()
        };
        let center = Vector3::new(0.1, -0.2, 0.3);
        let cams = generate_trajectory(11, 40, &spec, center).unwrap();
        assert_eq!(cams.len(), 40);
        for w in cams.windows(2) {
            let a = rotation_angle_between(&w[0].pose, &w[1].pose);
            assert!(a <= deg.to_radians() + 1e-9, "step {} deg", a.to_degrees());
        }
        for c in &cams {
            c.validate().unwrap();
            let forward = c.pose.rotation_matrix().column(2).into_owned();
            let to_center = (center - c.center()).normalize();
            let angle = forward.dot(&to_center).clamp(-1.0, 1.0).acos();
            assert!(angle.to_degrees() < 5.0);
        }
    }
}

#[test]
fn minimal_trajectory() {
    let cams = generate_trajectory(0, 3, &TrajectorySpec::default(), Vector3::zeros()).unwrap();
    assert_eq!(cams.len(), 3);
    assert!(matches!(
        generate_trajectory(0, 2, &TrajectorySpec::default(), Vector3::zeros()),
        Err(Error::Config(_))
    ));
}

#[test]
fn oracle_maps_decode_to_labels() {
    let d = generate_dataset(5, &small_spec()).unwrap();
    let c = d.scene.classes();
    let mut seen = vec![false; c];
    for f in &d.frames {
        let decoded = segment_feature_map(&f.feature, &d.scene.table).unwrap();
        for (i, (&l, &dl)) in f.labels.data.iter().zip(&decoded.data).enumerate() {
            if l != BACKGROUND {
                assert_eq!(l, dl, "pixel {i}");
                seen[l as usize] = true;
            }
        }
        let (miou, macc) = miou_macc(&decoded, &f.labels, c).unwrap();
        assert_eq!((miou, macc), (1.0, 1.0));
        // The room encloses the camera, so every pixel is covered.
        assert!(f.labels.data.iter().all(|&l| l != BACKGROUND));
    }
    assert!(seen.iter().filter(|&&s| s).count() >= 3, "{seen:?}");
}

#[test]
fn empty_scene_is_all_background() {
    let d = generate_dataset(5, &small_spec()).unwrap();
    let empty = LabeledScene {
        scene: GaussianScene::new(d.scene.scene.feature_dim),
        class_ids: vec![],
        ..d.scene.clone()
    };
    let cams: Vec<_> = d.frames.iter().map(|f| f.camera).collect();
    let frames = render_dataset(&empty, &cams, 0.0, 0).unwrap();
    for f in frames {
        assert!(f.labels.data.iter().all(|&l| l == BACKGROUND));
        assert!(f.rgb.data.iter().all(|&v| v == 0.0));
        assert!(f.feature.data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn feature_noise_leaves_labels_alone() {
    let clean = generate_dataset(9, &small_spec()).unwrap();
    let noisy = generate_dataset(
        9,
        &DatasetSpec {
            feature_noise: 0.05,
            ..small_spec()
        },
    )
    .unwrap();
    for (a, b) in clean.frames.iter().zip(&noisy.frames) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.rgb, b.rgb);
        assert_ne!(a.feature, b.feature);
    }
}

#[test]
fn teacher_recovers_labels_from_rgb() {
    let d = generate_dataset(2, &small_spec()).unwrap();
    let teacher = SemanticTeacher::from_scene(&d.scene);
    assert_eq!(teacher.feature_dim(), d.scene.scene.feature_dim);
    let mut agree = 0usize;
    let mut total = 0usize;
    for f in &d.frames {
        let feats = teacher.features(&f.rgb).unwrap();
        assert_eq!(
            (feats.width, feats.height, feats.channels),
            (f.rgb.width, f.rgb.height, 8)
        );
        let labels = segment_feature_map(&feats, &d.scene.table).unwrap();
        for (a, b) in labels.data.iter().zip(&f.labels.data) {
            total += 1;
            agree += usize::from(a == b);
        }
    }
    // Blending at class borders confuses a color-only teacher, but most
    // pixels are interior.
    assert!(agree as f64 / total as f64 > 0.6, "{agree}/{total}");
    let gray = semsplat::ImageBuf::new(4, 4, 1);
    assert!(matches!(teacher.features(&gray), Err(Error::Dimension(_))));
}

#[test]
fn family_seeds_are_consecutive() {
    let fam = generate_family(20, 3, &small_spec()).unwrap();
    assert_eq!(
        fam.iter().map(|d| d.seed).collect::<Vec<_>>(),
        vec![20, 21, 22]
    );
    assert_eq!(fam[1], generate_dataset(21, &small_spec()).unwrap());
    // One semantic space per family; the embedding seed alone changes it.
    assert!(fam.iter().all(|d| d.scene.table == fam[0].scene.table));
    let other = SceneSpec {
        embedding_seed: 1,
        ..SceneSpec::default()
    };
    assert_ne!(
        generate_scene(20, &other).unwrap().table,
        fam[0].scene.table
    );
}
