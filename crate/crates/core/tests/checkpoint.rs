use semsplat::checkpoint::*;
use semsplat::model::{Model, ModelConfig};
use semsplat::synth::{generate_scene, SceneSpec, SemanticTeacher};
use semsplat::{Error, ErrorCategory};

fn config() -> ModelConfig {
    ModelConfig {
        width: 8,
        height: 8,
        dim: 8,
        blocks: 1,
        decoder_dim: 8,
        head_hidden: 8,
        ..ModelConfig::default()
    }
}

fn teacher() -> SemanticTeacher {
    SemanticTeacher::from_scene(&generate_scene(0, &SceneSpec::default()).unwrap())
}

fn is_format(e: &Error) -> bool {
    e.category() == ErrorCategory::Format
}

#[test]
fn round_trip_is_byte_identical() {
    for with_teacher in [false, true] {
        let mut m = Model::new(config(), 3).unwrap();
        if with_teacher {
            m = m.with_teacher(teacher());
        }
        let bytes = encode_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..4], b"SSCK");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.teacher.is_some(), with_teacher);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        // Values survive up to f32 rounding.
        for (a, b) in m.params.tensors.iter().zip(&back.params.tensors) {
            assert!((a - b).amax() <= 1e-6 * a.amax().max(1.0));
        }
    }
}

#[test]
fn ablated_configurations_round_trip() {
    let c = ModelConfig {
        semantic_head: false,
        image_shortcut: false,
        ..config()
    };
    let m = Model::new(c, 1).unwrap();
    let back = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
    assert_eq!(back.config, c);
    assert_eq!(back.params.names, m.params.names);
}

#[test]
fn save_and_load_files() {
    let m = Model::new(config(), 4).unwrap().with_teacher(teacher());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.ckpt");
    save_checkpoint(&p, &m).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(
        encode_checkpoint(&back).unwrap(),
        std::fs::read(&p).unwrap()
    );
    std::fs::write(&p, b"SSCK").unwrap();
    let e = load_checkpoint(&p).unwrap_err();
    assert!(is_format(&e) && e.to_string().contains("model.ckpt"), "{e}");
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Io(_))
    ));
}

#[test]
fn corruption_is_reported_as_format_error() {
    let m = Model::new(config(), 2).unwrap().with_teacher(teacher());
    let bytes = encode_checkpoint(&m).unwrap();
    for cut in (0..bytes.len()).filter(|c| *c < 400 || c % 211 == 0) {
        let e = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(is_format(&e), "cut {cut}: {e}");
    }
    let mut long = bytes.clone();
    long.push(1);
    assert!(is_format(&decode_checkpoint(&long).unwrap_err()));

    let mut bad = bytes.clone();
    bad[4] = 7;
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(Error::Format { offset: 4, .. })
    ));

    let text = config_text(&m.config);
    let swap = |from: &str, to: &str| {
        let new_text = text.replace(from, to);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(new_text.len() as u32).to_le_bytes());
        out.extend_from_slice(new_text.as_bytes());
        out.extend_from_slice(&bytes[12 + text.len()..]);
        decode_checkpoint(&out)
    };
    // A different architecture no longer matches the stored arrays.
    assert!(is_format(&swap("dim=8\n", "dim=9\n").unwrap_err()));
    assert!(is_format(&swap("blocks=1", "blocks=2").unwrap_err()));
    assert!(is_format(&swap("patch=4", "patch=3").unwrap_err()));
    assert!(is_format(
        &swap("semantic_head=true", "semantic_head=maybe").unwrap_err()
    ));
    assert!(is_format(&swap("width=8\n", "").unwrap_err()));
    // An unchanged block decodes.
    assert!(swap("", "").is_ok());

    // A NaN in the first array value.
    let first_value = 12 + text.len() + 4 + 4 + "encoder.patch.w".len() + 8;
    let mut nan = bytes.clone();
    nan[first_value..first_value + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(
        matches!(decode_checkpoint(&nan), Err(Error::Format { offset, .. }) if offset == first_value as u64)
    );
}

#[test]
fn non_finite_parameters_cannot_be_saved() {
    let mut m = Model::new(config(), 0).unwrap();
    m.params.tensors[0][0] = f64::INFINITY;
    assert!(matches!(encode_checkpoint(&m), Err(Error::Numeric(_))));
    m.params.tensors[0][0] = 1e300;
    assert!(matches!(encode_checkpoint(&m), Err(Error::Numeric(_))));
}
