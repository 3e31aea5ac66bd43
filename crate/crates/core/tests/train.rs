use semsplat::model::ModelConfig;
use semsplat::sampler::SamplerConfig;
use semsplat::synth::{generate_family, DatasetSequence, DatasetSpec, SceneSpec, TrajectorySpec};
use semsplat::train::*;
use semsplat::Error;

fn family(count: usize, frames: usize, embedding_seed: u64) -> Vec<DatasetSequence> {
    let spec = DatasetSpec {
        trajectory: TrajectorySpec {
            width: 16,
            height: 16,
            ..TrajectorySpec::default()
        },
        scene: SceneSpec {
            embedding_seed,
            ..SceneSpec::default()
        },
        frames,
        ..DatasetSpec::default()
    };
    generate_family(40, count, &spec).unwrap()
}

fn config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        model: ModelConfig {
            width: 16,
            height: 16,
            dim: 8,
            blocks: 1,
            decoder_dim: 8,
            head_hidden: 8,
            ..ModelConfig::default()
        },
        sampler: SamplerConfig {
            gap_max: 8,
            ..SamplerConfig::for_run(steps)
        },
        eval_gap: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn heldout_frames_are_interior_and_spaced() {
    for seed in 0..50 {
        let h = heldout_frames(40, 3, 4, seed);
        assert_eq!(h.len(), 3);
        assert!(h.windows(2).all(|w| w[1] - w[0] > 4), "{h:?}");
        assert!(h.iter().all(|&t| (4..=35).contains(&t)));
        assert_eq!(h, heldout_frames(40, 3, 4, seed));
    }
    assert!(heldout_frames(8, 2, 4, 0).is_empty());
    assert!(heldout_frames(40, 0, 4, 0).is_empty());
}

#[test]
fn family_must_share_a_semantic_space() {
    let mut fam = family(1, 6, 0);
    fam.extend(family(1, 6, 1));
    assert!(matches!(family_teacher(&fam), Err(Error::Config(_))));
    assert!(family_teacher(&family(2, 6, 0)).is_ok());
    assert!(matches!(family_teacher(&[]), Err(Error::Config(_))));
}

#[test]
fn short_run_logs_every_step_and_skips_heldout_frames() {
    let fam = family(2, 24, 0);
    let cfg = config(40);
    let mut seen = 0;
    let report = train(&fam, &cfg, |_, _| seen += 1).unwrap();
    assert_eq!(seen, 40);
    assert_eq!(report.log.len(), 40);
    assert_eq!(report.rejected, 0);
    let held: Vec<Vec<usize>> = (0..2)
        .map(|s| {
            heldout_frames(
                24,
                cfg.heldout_per_sequence,
                cfg.eval_gap,
                cfg.seed + s as u64,
            )
        })
        .collect();
    for l in &report.log {
        let [c1, c2, t] = l.frames;
        assert!(c1 < t && t < c2);
        assert_eq!(l.gap, c2 - c1);
        for f in l.frames {
            assert!(
                !held[l.sequence].contains(&f),
                "step {} used held-out frame {f}",
                l.step
            );
        }
        assert_eq!(
            l.csv_line().split(',').count(),
            StepLog::CSV_HEADER.split(',').count()
        );
        assert!(l.total.is_finite() && l.applied);
    }
    assert!(report.early_average(10).is_finite());

    let eval = evaluate(&report.model, &fam, &cfg).unwrap();
    assert_eq!(eval.views, 2 * cfg.heldout_per_sequence);
    assert!(eval.psnr.is_finite());
    assert!((0.0..=1.0).contains(&eval.miou) && (0.0..=1.0).contains(&eval.majority_miou));
    assert!(eval.majority_class.is_some());
}

#[test]
fn training_is_deterministic() {
    let fam = family(2, 16, 0);
    let cfg = TrainConfig {
        batch: 2,
        ..config(12)
    };
    let a = train(&fam, &cfg, |_, _| {}).unwrap();
    let b = train(&fam, &cfg, |_, _| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn mismatched_sizes_are_config_errors() {
    let fam = family(1, 12, 0);
    let mut cfg = config(5);
    cfg.model.width = 32;
    cfg.model.height = 32;
    assert!(matches!(
        train(&fam, &cfg, |_, _| {}),
        Err(Error::Config(_))
    ));
    let cfg = TrainConfig {
        batch: 0,
        ..config(5)
    };
    assert!(matches!(
        train(&fam, &cfg, |_, _| {}),
        Err(Error::Config(_))
    ));
}
