use std::fs;
use std::path::Path;

use proptest::prelude::*;
use semsplat::io::*;
use semsplat::metrics::LabelMap;
use semsplat::synth::*;
use semsplat::{Error, ErrorCategory, ImageBuf};

fn tiny_dataset(seed: u64) -> DatasetSequence {
    let spec = DatasetSpec {
        scene: SceneSpec {
            plane_grid: 3,
            objects: 2,
            gaussians_per_object: 3,
            ..SceneSpec::default()
        },
        trajectory: TrajectorySpec {
            width: 12,
            height: 10,
            ..TrajectorySpec::default()
        },
        frames: 4,
        feature_noise: 0.01,
    };
    generate_dataset(seed, &spec).unwrap()
}

fn is_format(e: &Error) -> bool {
    e.category() == ErrorCategory::Format && e.exit_code() == 3
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_round_trip_is_byte_identical() {
    let d = tiny_dataset(4);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    save_dataset(&a, &d).unwrap();
    let loaded = load_dataset(&a).unwrap();
    assert_eq!(loaded, d);
    save_dataset(&b, &loaded).unwrap();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.len(), 2 + 4 * 5);
    assert_eq!(ta, tb);
    assert!(ta.iter().any(|(n, _)| n == "frames/000003.label"));
}

#[test]
fn family_round_trip() {
    let fam = vec![tiny_dataset(1), tiny_dataset(2)];
    let tmp = tempfile::tempdir().unwrap();
    save_family(tmp.path(), &fam).unwrap();
    assert_eq!(load_family(tmp.path()).unwrap(), fam);
    // A single sequence directory loads as a one-element family.
    assert_eq!(
        load_family(&tmp.path().join("seq_001")).unwrap(),
        vec![fam[1].clone()]
    );
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_family(empty.path()), Err(Error::Config(_))));
}

#[test]
fn scene_round_trip_and_corruption() {
    let s = tiny_dataset(3).scene;
    let bytes = encode_scene(&s);
    let back = decode_scene(&bytes).unwrap();
    assert_eq!(back, s);
    assert_eq!(encode_scene(&back), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_scene(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        decode_scene(&bad),
        Err(Error::Format { offset: 4, .. })
    ));
    // Every proper prefix is rejected.
    for cut in 0..bytes.len() {
        let e = decode_scene(&bytes[..cut]).unwrap_err();
        assert!(is_format(&e), "cut {cut}: {e}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(is_format(&decode_scene(&long).unwrap_err()));
    // An opacity outside (0, 1) is caught after decoding.
    let mut bad = bytes.clone();
    let opacity_at = 4 + 4 + 8 + 4 + 4 + 8 * 10;
    bad[opacity_at..opacity_at + 8].copy_from_slice(&2.0f64.to_le_bytes());
    assert!(matches!(
        decode_scene(&bad),
        Err(Error::Format { offset: 24, .. })
    ));
}

#[test]
fn map_round_trip_and_header_checks() {
    let img =
        ImageBuf::from_vec(3, 2, 2, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
    let bytes = encode_map(&img).unwrap();
    assert_eq!(bytes.len(), 16 + 12 * 4);
    assert_eq!(&bytes[..4], b"SSMP");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    assert_eq!(decode_map(&bytes).unwrap(), img);
    for cut in 0..bytes.len() {
        assert!(is_format(&decode_map(&bytes[..cut]).unwrap_err()));
    }
    let mut huge = bytes.clone();
    huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(is_format(&decode_map(&huge).unwrap_err()));
}

#[test]
fn label_maps_reject_non_integers() {
    let labels = LabelMap {
        width: 2,
        height: 2,
        data: vec![-1, 0, 6, 3],
    };
    let map = labels_to_map(&labels);
    assert_eq!(map_to_labels(&map).unwrap(), labels);
    let mut bad = map.clone();
    bad.data[2] = 0.5;
    assert!(matches!(
        map_to_labels(&bad),
        Err(Error::Format { offset: 24, .. })
    ));
    bad.data[2] = -2.0;
    assert!(is_format(&map_to_labels(&bad).unwrap_err()));
}

#[test]
fn ppm_round_trip_and_corruption() {
    let img = quantize_8bit(
        &ImageBuf::from_vec(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap(),
    );
    let bytes = encode_ppm(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
    assert_eq!(decode_ppm(&bytes).unwrap(), img);
    assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()).unwrap(), bytes);
    for cut in 0..bytes.len() {
        assert!(is_format(&decode_ppm(&bytes[..cut]).unwrap_err()));
    }
    assert!(is_format(&decode_ppm(b"P3\n2 2\n255\n").unwrap_err()));
    assert!(is_format(&decode_ppm(b"P6\n2 2\n65535\n").unwrap_err()));
    let commented = b"P6\n# made by hand\n1 1\n255\n\x00\xff\x80";
    assert_eq!(
        decode_ppm(commented).unwrap().data,
        vec![0.0, 1.0, 128.0 / 255.0]
    );
    assert!(matches!(
        encode_ppm(&ImageBuf::new(2, 2, 1)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn camera_text_round_trip_and_corruption() {
    let d = tiny_dataset(6);
    for f in &d.frames {
        let text = encode_camera(&f.camera);
        let back = decode_camera(&text).unwrap();
        assert_eq!(back, f.camera);
        assert_eq!(encode_camera(&back), text);
    }
    let text = encode_camera(&d.frames[0].camera);
    let lines: Vec<&str> = text.lines().collect();
    for n in 0..lines.len() {
        let truncated = lines[..n].join("\n");
        assert!(
            is_format(&decode_camera(&truncated).unwrap_err()),
            "{n} lines"
        );
    }
    let swapped = text.replacen("quaternion ", "quaternion -", 1);
    assert!(is_format(&decode_camera(&swapped).unwrap_err()));
    let junk = format!("{text}extra 1\n");
    assert!(is_format(&decode_camera(&junk).unwrap_err()));
    let bad_size = text.replace("size 12 10", "size 12.5 10");
    assert!(is_format(&decode_camera(&bad_size).unwrap_err()));
    let with_comment = format!("# camera\n{text}");
    assert_eq!(decode_camera(&with_comment).unwrap(), d.frames[0].camera);
}

#[test]
fn corrupted_dataset_files_are_format_errors() {
    let d = tiny_dataset(8);
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let fresh = || {
        let _ = fs::remove_dir_all(&dir);
        save_dataset(&dir, &d).unwrap();
    };
    for file in [
        "scene.bin",
        "frames/000001.ppm",
        "frames/000002.feat",
        "frames/000000.label",
        "frames/000003.depth",
        "frames/000001.cam",
    ] {
        fresh();
        let p = dir.join(file);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let e = load_dataset(&dir).unwrap_err();
        assert!(is_format(&e), "{file}: {e}");
        assert!(
            e.to_string().contains(file.rsplit('/').next().unwrap()),
            "{e}"
        );
    }
    fresh();
    let p = dir.join("manifest.txt");
    let text = fs::read_to_string(&p).unwrap();
    fs::write(&p, text.replace("width=12", "width=13")).unwrap();
    assert!(is_format(&load_dataset(&dir).unwrap_err()));
    fs::write(&p, text.replace("version=1", "version=2")).unwrap();
    assert!(is_format(&load_dataset(&dir).unwrap_err()));
    fs::write(&p, text.replace("seed=8\n", "")).unwrap();
    assert!(is_format(&load_dataset(&dir).unwrap_err()));
    fresh();
    fs::remove_file(dir.join("frames/000002.cam")).unwrap();
    assert!(is_format(&load_dataset(&dir).unwrap_err()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn arbitrary_bytes_never_panic(data in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_map(&data);
        let _ = decode_ppm(&data);
        let _ = decode_scene(&data);
        if let Ok(s) = std::str::from_utf8(&data) {
            let _ = decode_camera(s);
            let _ = parse_key_values(s);
        }
    }

    #[test]
    fn flipped_scene_bytes_never_panic(pos in 0usize..10_000, byte in any::<u8>()) {
        let bytes = encode_scene(&tiny_dataset(3).scene);
        let mut bad = bytes.clone();
        let i = pos % bad.len();
        bad[i] = byte;
        if let Err(e) = decode_scene(&bad) {
            prop_assert!(is_format(&e));
        }
    }
}
