//! Feed-forward training loop over a scene family, and held-out evaluation.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::metrics::{psnr, segment_feature_map, Confusion};
use crate::model::{relative_cameras, Model, ModelConfig, TrainingTriple};
use crate::nn::{Adam, AdamConfig};
use crate::objectives::LossWeights;
use crate::render::render;
use crate::sampler::{FrameRecord, SamplerConfig, ViewSampler};
use crate::synth::{DatasetSequence, SemanticTeacher};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Triples averaged per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    pub sampler: SamplerConfig,
    /// Interior frames per sequence kept out of training for evaluation.
    pub heldout_per_sequence: usize,
    /// Context frames sit this many frames either side of a held-out target.
    pub eval_gap: usize,
    /// Moving-average window for the loss summaries.
    pub average_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 1,
            seed: 0,
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            sampler: SamplerConfig::for_run(5000),
            heldout_per_sequence: 2,
            eval_gap: 5,
            average_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for r in [
            self.model.validate(),
            self.optimizer.validate(),
            self.weights.validate(),
            self.sampler.validate(),
        ] {
            if let Err(Error::Config(list)) = r {
                bad.extend(list);
            } else if let Err(e) = r {
                bad.push(e.to_string());
            }
        }
        if self.batch == 0 {
            bad.push("train.batch must be positive".into());
        }
        if self.eval_gap == 0 {
            bad.push("train.eval_gap must be positive".into());
        }
        if self.average_window == 0 {
            bad.push("train.average_window must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// One line of the per-step metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub sequence: usize,
    /// Dataset frame indices of the first context, second context and target.
    pub frames: [usize; 3],
    pub photo: f64,
    pub pose: f64,
    pub sem: f64,
    pub total: f64,
    pub theta: f64,
    /// Context gap in dataset frames.
    pub gap: usize,
    pub applied: bool,
}

impl StepLog {
    pub const CSV_HEADER: &'static str =
        "step,sequence,c1,c2,t,photo,pose,sem,total,theta_deg,gap,applied";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3},{},{}",
            self.step,
            self.sequence,
            self.frames[0],
            self.frames[1],
            self.frames[2],
            self.photo,
            self.pose,
            self.sem,
            self.total,
            self.theta.to_degrees(),
            self.gap,
            u8::from(self.applied)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub model: Model,
    pub log: Vec<StepLog>,
    pub rejected: usize,
    /// Sampler proposals turned down by the angle gate.
    pub proposals_rejected: u64,
    pub duration: Duration,
}

impl TrainReport {
    /// Mean total loss over the first `window` applied steps.
    pub fn early_average(&self, window: usize) -> f64 {
        mean(
            self.log
                .iter()
                .filter(|l| l.applied)
                .take(window)
                .map(|l| l.total),
        )
    }

    /// Mean total loss over the last `window` applied steps.
    pub fn final_average(&self, window: usize) -> f64 {
        mean(
            self.log
                .iter()
                .rev()
                .filter(|l| l.applied)
                .take(window)
                .map(|l| l.total),
        )
    }

    /// Mean pose loss over the last `window` applied steps.
    pub fn final_pose(&self, window: usize) -> f64 {
        mean(
            self.log
                .iter()
                .rev()
                .filter(|l| l.applied)
                .take(window)
                .map(|l| l.pose),
        )
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Held-out interior frames of a sequence, fixed by seed. Every held-out
/// frame keeps `eval_gap` training frames on either side.
pub fn heldout_frames(frames: usize, count: usize, eval_gap: usize, seed: u64) -> Vec<usize> {
    if frames < 2 * eval_gap + 1 || count == 0 {
        return Vec::new();
    }
    let lo = eval_gap;
    let hi = frames - 1 - eval_gap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6c64);
    let mut out: Vec<usize> = Vec::new();
    let mut attempts = 0;
    while out.len() < count && attempts < 1000 {
        attempts += 1;
        let t = rng.gen_range(lo..=hi);
        // Keep held-out frames apart so their contexts stay in training.
        if out.iter().all(|&o| o.abs_diff(t) > eval_gap) {
            out.push(t);
        }
    }
    out.sort_unstable();
    out
}

/// The family's shared semantic teacher.
pub fn family_teacher(family: &[DatasetSequence]) -> Result<SemanticTeacher> {
    let first = family
        .first()
        .ok_or_else(|| Error::config("training needs at least one sequence"))?;
    let teacher = SemanticTeacher::from_scene(&first.scene);
    for d in family {
        if SemanticTeacher::from_scene(&d.scene) != teacher {
            return Err(Error::config(format!(
                "sequence {} uses a different class table or palette than sequence {}",
                d.seed, first.seed
            )));
        }
    }
    Ok(teacher)
}

struct Prepared {
    teacher_maps: Vec<Vec<ImageBuf>>,
    records: Vec<Vec<FrameRecord>>,
    heldout: Vec<Vec<usize>>,
}

fn prepare(
    family: &[DatasetSequence],
    cfg: &TrainConfig,
    teacher: &SemanticTeacher,
) -> Result<Prepared> {
    let mut teacher_maps = Vec::new();
    let mut records = Vec::new();
    let mut heldout = Vec::new();
    for (s, d) in family.iter().enumerate() {
        let tr = &d.spec.trajectory;
        if (tr.width, tr.height) != (cfg.model.width, cfg.model.height) {
            return Err(Error::config(format!(
                "sequence {s} is {}x{}, the model expects {}x{}",
                tr.width, tr.height, cfg.model.width, cfg.model.height
            )));
        }
        if d.scene.scene.feature_dim != cfg.model.feature_dim {
            return Err(Error::config(format!(
                "sequence {s} has feature dimension {}, the model expects {}",
                d.scene.scene.feature_dim, cfg.model.feature_dim
            )));
        }
        teacher_maps.push(
            d.frames
                .iter()
                .map(|f| teacher.features(&f.rgb))
                .collect::<Result<Vec<_>>>()?,
        );
        let held = heldout_frames(
            d.frames.len(),
            cfg.heldout_per_sequence,
            cfg.eval_gap,
            cfg.seed.wrapping_add(s as u64),
        );
        let rec: Vec<FrameRecord> = d
            .frames
            .iter()
            .enumerate()
            .filter(|(i, _)| !held.contains(i))
            .map(|(i, f)| FrameRecord {
                index: i,
                pose: f.camera.pose,
                payload: i,
            })
            .collect();
        if rec.len() < 3 {
            return Err(Error::config(format!(
                "sequence {s} has fewer than 3 training frames"
            )));
        }
        records.push(rec);
        heldout.push(held);
    }
    Ok(Prepared {
        teacher_maps,
        records,
        heldout,
    })
}

/// Seed of the view sampler in a run seeded with `seed`.
pub fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x7361_6d70
}

/// Train a fresh model on `family`. `on_step` sees every log line together
/// with the model as updated by that step.
pub fn train(
    family: &[DatasetSequence],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &Model),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let teacher = family_teacher(family)?;
    let prep = prepare(family, cfg, &teacher)?;
    let mut model = Model::new(cfg.model, cfg.seed)?.with_teacher(teacher);
    let mut adam = Adam::new(cfg.optimizer, &model.params);
    let mut sampler = ViewSampler::new(cfg.sampler, sampler_seed(cfg.seed))?;
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7365_7100);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut rejected = 0;
    for step in 1..=cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = pick.gen_range(0..family.len());
            let rec = &prep.records[s];
            let tri = sampler.sample(rec)?;
            let (i1, i2, it) = (rec[tri.c1].payload, rec[tri.c2].payload, rec[tri.t].payload);
            let frames = &family[s].frames;
            let (target_camera, context_pose) =
                relative_cameras(&frames[i1].camera, &frames[i2].camera, &frames[it].camera)?;
            picks.push((s, tri, [i1, i2, it], target_camera, context_pose));
        }
        let batch: Vec<TrainingTriple> = picks
            .iter()
            .map(|&(s, _, [i1, i2, it], target_camera, context_pose)| {
                let frames = &family[s].frames;
                let maps = &prep.teacher_maps[s];
                TrainingTriple {
                    context_rgb: [&frames[i1].rgb, &frames[i2].rgb],
                    context_sem: [&maps[i1], &maps[i2]],
                    target_rgb: &frames[it].rgb,
                    target_sem: &frames[it].feature,
                    target_camera,
                    context_pose,
                }
            })
            .collect();
        let out = model.training_step_batch(&batch, &mut adam, &cfg.weights)?;
        if out.applied {
            sampler.record_and_check_stability(out.losses.pose);
        } else {
            rejected += 1;
        }
        let (s, tri, frames) = (picks[0].0, picks[0].1, picks[0].2);
        let line = StepLog {
            step,
            sequence: s,
            frames,
            photo: out.losses.photo,
            pose: out.losses.pose,
            sem: out.losses.sem,
            total: out.losses.total,
            theta: tri.theta,
            gap: frames[1] - frames[0],
            applied: out.applied,
        };
        on_step(&line, &model);
        log.push(line);
    }
    Ok(TrainReport {
        model,
        log,
        rejected,
        proposals_rejected: sampler.proposals_rejected,
        duration: start.elapsed(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub views: usize,
    pub psnr: f64,
    pub miou: f64,
    pub macc: f64,
    /// mIoU of predicting the ground truth's majority class everywhere.
    pub majority_miou: f64,
    pub majority_class: Option<i32>,
    pub pose_loss: f64,
    /// Mean inference time per pair.
    pub infer_seconds: f64,
}

/// Reconstruct each held-out target from its two context frames and score
/// the rendered view against the ground truth.
pub fn evaluate(
    model: &Model,
    family: &[DatasetSequence],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let teacher = model
        .teacher
        .clone()
        .ok_or_else(|| Error::NotInitialized("model has no semantic teacher".into()))?;
    let prep = prepare(family, cfg, &teacher)?;
    let classes = family[0].scene.classes();
    let table = &family[0].scene.table;
    let mut conf = Confusion::new(classes);
    let mut psnrs = Vec::new();
    let mut poses = Vec::new();
    let mut times = Vec::new();
    let mut gt_labels = Vec::new();
    for (s, d) in family.iter().enumerate() {
        for &t in &prep.heldout[s] {
            let (a, b) = (t - cfg.eval_gap, t + cfg.eval_gap);
            let (target_camera, context_pose) = relative_cameras(
                &d.frames[a].camera,
                &d.frames[b].camera,
                &d.frames[t].camera,
            )?;
            let (pred, took) = model.infer(&d.frames[a].rgb, &d.frames[b].rgb)?;
            times.push(took.as_secs_f64());
            let out = render(&pred.scene, &target_camera, [0.0; 3])?;
            psnrs.push(psnr(&d.frames[t].rgb, &out.rgb)?);
            poses.push(crate::objectives::pose_loss(&pred.pose, &context_pose)?);
            conf.add(
                &segment_feature_map(&out.feature, table)?,
                &d.frames[t].labels,
            )?;
            gt_labels.push(d.frames[t].labels.clone());
        }
    }
    if psnrs.is_empty() {
        return Err(Error::config("no held-out frames to evaluate"));
    }
    let (miou, macc) = conf.miou_macc();
    let all = crate::metrics::LabelMap {
        width: gt_labels.iter().map(|l| l.data.len()).sum(),
        height: 1,
        data: gt_labels
            .iter()
            .flat_map(|l| l.data.iter().copied())
            .collect(),
    };
    let majority_class = all.majority_class();
    let majority_miou = match majority_class {
        Some(k) => {
            let constant = crate::metrics::LabelMap::filled(all.width, 1, k);
            crate::metrics::miou_macc(&constant, &all, classes)?.0
        }
        None => 0.0,
    };
    Ok(EvalReport {
        views: psnrs.len(),
        psnr: mean(psnrs.iter().copied()),
        miou,
        macc,
        majority_miou,
        majority_class,
        pose_loss: mean(poses.iter().copied()),
        infer_seconds: mean(times.iter().copied()),
    })
}
