//! The acceptance suite: eight pass/fail checks with pinned tolerances.
//!
//! Criteria 1 to 4 run in a single-threaded rayon pool, which is also the
//! setting their runtime limits refer to. Criterion 7 reruns them with eight
//! threads and compares fingerprints of every number they produced.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fit::fit_scene;
use crate::geometry::{rotation_angle_between, Quaternion, RelativePose};
use crate::gradcheck::{random_scene, render_gradient_suite, test_camera, SceneRegime};
use crate::image::ImageBuf;
use crate::model::Model;
use crate::objectives::{
    photometric_loss, pose_loss, semantic_loss, total_loss, LossBreakdown, LossWeights,
};
use crate::render::{render, render_reference};
use crate::sampler::{FrameRecord, SamplerConfig, ViewSampler};
use crate::synth::{
    decode_scene, encode_scene, generate_dataset, generate_scene, load_dataset, save_dataset,
    DatasetSpec, SceneSpec, SemanticTeacher, TrajectorySpec,
};
use crate::train::{evaluate, train};

pub const RENDER_TOLERANCE: f64 = 1e-5;
pub const POSE_HAND_CASE_TOLERANCE: f64 = 1e-9;
pub const FIT_MIN_PSNR: f64 = 30.0;
pub const TRAIN_MIN_REDUCTION: f64 = 0.8;
pub const TRAIN_MAX_POSE: f64 = 0.05;
pub const SAMPLER_DRAWS: usize = 10_000;
pub const SAMPLER_MAX_FALLBACK_RATE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "{} criterion {} ({}): {} [{:.1} s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AcceptanceReport {
    pub results: Vec<CriterionResult>,
}

impl AcceptanceReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

pub const TITLES: [&str; 8] = [
    "rasterizer oracle equivalence",
    "gradient suite",
    "loss-stack exactness",
    "per-scene fitting",
    "feed-forward toy training",
    "sampler properties",
    "determinism across thread counts",
    "format round-trips",
];

/// FNV-1a over the bit patterns of a stream of numbers.
#[derive(Clone, Copy, Debug)]
struct Fingerprint(u64);

impl Fingerprint {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn add(&mut self, v: f64) {
        for b in v.to_bits().to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn add_all<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.add(*v);
        }
    }
}

/// Outcome of one criterion plus the fingerprint used by the determinism check.
type Outcome = (bool, String, u64);

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Numeric(format!("cannot build a {threads}-thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let cam = test_camera(64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut fp = Fingerprint::new();
    for seed in 0..100u64 {
        let count = rng.gen_range(1..=64);
        let scene = random_scene(seed, count, 4, &cam, SceneRegime::General);
        let bg = [rng.gen(), rng.gen(), rng.gen()];
        let a = render(&scene, &cam, bg)?;
        let b = render_reference(&scene, &cam, bg)?;
        for (x, y) in [
            (&a.rgb, &b.rgb),
            (&a.feature, &b.feature),
            (&a.alpha, &b.alpha),
            (&a.depth, &b.depth),
        ] {
            worst = worst.max(x.max_abs_diff(y));
            fp.add_all(&x.data);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < RENDER_TOLERANCE && secs < 60.0;
    Ok((
        ok,
        format!("100 scenes, max |tiled - reference| = {worst:.3e} (< 1e-5), {secs:.1} s (< 60 s)"),
        fp.0,
    ))
}

fn criterion_2() -> Result<Outcome> {
    let start = Instant::now();
    let report = render_gradient_suite(0, 20, 8, 32, 4)?;
    let secs = start.elapsed().as_secs_f64();
    let mut fp = Fingerprint::new();
    let mut parts = Vec::new();
    for (class, r) in &report.classes {
        fp.add(r.max_rel_error);
        fp.add(r.compared as f64);
        parts.push(format!(
            "{} {}/{} max {:.1e}",
            class.name(),
            r.compared - r.failures,
            r.compared,
            r.max_rel_error
        ));
    }
    let ok = report.passed() && report.classes.iter().all(|(_, r)| r.compared > 0) && secs < 300.0;
    Ok((
        ok,
        format!("{}; {secs:.1} s (< 300 s)", parts.join(", ")),
        fp.0,
    ))
}

fn criterion_3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = ImageBuf::from_vec(16, 16, 3, (0..16 * 16 * 3).map(|_| rng.gen()).collect())?;
    let photo_same = photometric_loss(&img, &img, 0.15)?;

    let n = 4;
    let base: Vec<f64> = (0..8 * 8 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = ImageBuf::from_vec(8, 8, n, base.clone())?;
    let neg = ImageBuf::from_vec(8, 8, n, base.iter().map(|v| -v).collect())?;
    // Per pixel, a vector orthogonal to the target: swap pairs with a sign flip.
    let mut orth = f.clone();
    for p in 0..64 {
        let px = orth.pixel_mut(p % 8, p / 8);
        let (a, b, c, d) = (px[0], px[1], px[2], px[3]);
        px.copy_from_slice(&[-b, a, -d, c]);
    }
    let sem = [
        semantic_loss(&f, &f)?,
        semantic_loss(&orth, &f)?,
        semantic_loss(&neg, &f)?,
    ];

    let hand = pose_loss(
        &RelativePose::new(Quaternion::new(0.6, 0.8, 0.0, 0.0), Vector3::zeros())?,
        &RelativePose::IDENTITY,
    )?;

    let w = LossWeights::default();
    let (p, q, s) = (0.4375, 1.25, 0.625);
    let combined = LossBreakdown::new(p, q, s, &w);
    let exact = w.eta == 0.15
        && w.lambda_pose == 0.1
        && w.lambda_sem == 0.1
        && combined.total == p + 0.1 * q + 0.1 * s
        && total_loss(p, q, s, &w) == combined.total;

    let sem_ok =
        sem[0].abs() < 1e-12 && (sem[1] - 1.0).abs() < 1e-12 && (sem[2] - 2.0).abs() < 1e-12;
    let pose_ok = (hand - 0.8f64.sqrt()).abs() < POSE_HAND_CASE_TOLERANCE;
    let ok = photo_same == 0.0 && sem_ok && pose_ok && exact;
    let mut fp = Fingerprint::new();
    fp.add_all(&[photo_same, sem[0], sem[1], sem[2], hand, combined.total]);
    Ok((
        ok,
        format!(
            "photometric(I,I) = {photo_same}, semantic endpoints = [{:.1e}, {:.12}, {:.12}], pose hand case = {hand:.12} (sqrt 0.8 within 1e-9), weights (0.15, 0.1, 0.1) recombine {}",
            sem[0],
            sem[1],
            sem[2],
            if exact { "exactly" } else { "inexactly" }
        ),
        fp.0,
    ))
}

fn criterion_4() -> Result<Outcome> {
    let c = ExperimentConfig::fit_preset();
    let data = generate_dataset(c.dataset_seed, &c.dataset)?;
    let train_idx = c.fit_train_frames(data.frames.len());
    let report = fit_scene(&data, &train_idx, &c.fit_heldout, &c.fit)?;
    let secs = report.duration.as_secs_f64();
    let held = report
        .heldout_psnr
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let mut fp = Fingerprint::new();
    fp.add_all(report.losses.iter().map(|(_, l)| l));
    fp.add_all(&report.heldout_psnr);
    let ok = train_idx.len() == 8
        && c.fit.gaussians == 512
        && c.fit.steps <= 2000
        && held >= FIT_MIN_PSNR
        && secs < 600.0;
    Ok((
        ok,
        format!(
            "{} gaussians, {} views, {} steps: held-out PSNR {held:.2} dB (>= 30), train {:.2} dB, {secs:.1} s (< 600 s)",
            c.fit.gaussians,
            train_idx.len(),
            c.fit.steps,
            report.train_psnr
        ),
        fp.0,
    ))
}

fn criterion_5() -> Result<(bool, String)> {
    let c = ExperimentConfig::default();
    let family = c.family()?;
    let mut random = c.train;
    random.sampler.curriculum = false;
    let (guided, baseline) = rayon::join(
        || train(&family, &c.train, |_, _| {}),
        || train(&family, &random, |_, _| {}),
    );
    let (guided, baseline) = (guided?, baseline?);
    let w = c.train.average_window;
    let early = guided.early_average(w);
    let last = guided.final_average(w);
    let reduction = 1.0 - last / early;
    let pose = guided.final_pose(w);
    let eval = evaluate(&guided.model, &family, &c.train)?;
    let base_last = baseline.final_average(w);
    let checks = [
        reduction >= TRAIN_MIN_REDUCTION,
        pose < TRAIN_MAX_POSE,
        eval.miou > eval.majority_miou,
        last <= base_last,
    ];
    let mark = |b: bool| if b { "ok" } else { "MISS" };
    Ok((
        checks.iter().all(|&b| b),
        format!(
            "{} scenes at {}x{}, {} steps: loss {early:.4} -> {last:.4} ({:.1}% reduction, >= 80%: {}); final pose {pose:.4} (< 0.05: {}); held-out mIoU {:.3} vs majority {:.3} ({}); guided {last:.4} vs random {base_last:.4} ({}, angle gate rejected {} proposals)",
            family.len(),
            c.dataset.trajectory.width,
            c.dataset.trajectory.height,
            c.train.steps,
            100.0 * reduction,
            mark(checks[0]),
            mark(checks[1]),
            eval.miou,
            eval.majority_miou,
            mark(checks[2]),
            mark(checks[3]),
            guided.proposals_rejected,
        ),
    ))
}

/// Sampler draws on a synthetic orbit, with a constant pose loss fed back so
/// θ keeps advancing through its whole range.
fn sampler_stream(seed: u64) -> Result<(Vec<FrameRecord>, Vec<crate::sampler::Triple>)> {
    let traj = TrajectorySpec::default();
    let cams = crate::synth::generate_trajectory(seed, 60, &traj, Vector3::zeros())?;
    let frames: Vec<FrameRecord> = cams
        .iter()
        .enumerate()
        .map(|(i, c)| FrameRecord {
            index: i,
            pose: c.pose,
            payload: i,
        })
        .collect();
    let cfg = SamplerConfig::for_run(SAMPLER_DRAWS as u64);
    let mut s = ViewSampler::new(cfg, seed)?;
    let mut out = Vec::with_capacity(SAMPLER_DRAWS);
    for _ in 0..SAMPLER_DRAWS {
        out.push(s.sample(&frames)?);
        s.record_and_check_stability(0.5);
    }
    Ok((frames, out))
}

fn criterion_6() -> Result<(bool, String)> {
    let start = Instant::now();
    let (frames, draws) = sampler_stream(6)?;
    let (_, again) = sampler_stream(6)?;
    let mut violations = 0;
    let mut bad_gap = 0;
    let mut bad_t = 0;
    let mut monotone = true;
    let mut fallbacks = 0;
    for (i, t) in draws.iter().enumerate() {
        if t.fallback {
            fallbacks += 1;
        } else {
            let worst = [(t.c1, t.c2), (t.c1, t.t), (t.c2, t.t)]
                .iter()
                .map(|&(a, b)| rotation_angle_between(&frames[a].pose, &frames[b].pose))
                .fold(0.0, f64::max);
            if worst >= t.theta {
                violations += 1;
            }
        }
        if !(2..=t.max_gap).contains(&t.gap()) {
            bad_gap += 1;
        }
        if !(t.c1 < t.t && t.t < t.c2) {
            bad_t += 1;
        }
        if i > 0 && t.theta < draws[i - 1].theta {
            monotone = false;
        }
    }
    let reproducible = draws == again;
    let rate = fallbacks as f64 / draws.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    let ok = violations == 0
        && bad_gap == 0
        && bad_t == 0
        && monotone
        && rate < SAMPLER_MAX_FALLBACK_RATE
        && reproducible
        && secs < 10.0;
    Ok((
        ok,
        format!(
            "{} draws: {violations} angle violations, {bad_gap} gap and {bad_t} interior violations, theta monotone {monotone} (final {:.0} deg), fallback rate {:.3}% (< 1%), reproducible {reproducible}, {secs:.2} s (< 10 s)",
            draws.len(),
            draws.last().map_or(0.0, |t| t.theta.to_degrees()),
            100.0 * rate
        ),
    ))
}

fn scratch_dir(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    std::env::temp_dir().join(format!("semsplat-{tag}-{}-{nanos}", std::process::id()))
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
                out.push((rel, fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// True when `f` returned a data-format error (exit code 3) without panicking.
fn rejects<T>(f: impl FnOnce() -> Result<T>) -> bool {
    matches!(catch_unwind(AssertUnwindSafe(f)), Ok(Err(e)) if e.exit_code() == 3)
}

/// Damaged variants of a file: wrong leading bytes, truncation into the
/// header or body, trailing junk. Dropping only a final newline is not
/// damage for the text formats, so cuts stop short of the last byte.
fn corruptions(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut head = bytes.to_vec();
    for b in head.iter_mut().take(4) {
        *b ^= 0xa5;
    }
    out.push(head);
    for cut in [1, 4, 8, bytes.len() / 2] {
        out.push(bytes[..cut.min(bytes.len())].to_vec());
    }
    let mut long = bytes.to_vec();
    long.extend_from_slice(b"junk");
    out.push(long);
    out
}

fn criterion_8() -> Result<(bool, String)> {
    let mut notes = Vec::new();
    let mut ok = true;

    let scene = generate_scene(8, &SceneSpec::default())?;
    let a = encode_scene(&scene);
    let scene_rt = encode_scene(&decode_scene(&a)?) == a;
    let scene_bad = corruptions(&a)
        .iter()
        .filter(|c| !rejects(|| decode_scene(c)))
        .count();
    ok &= scene_rt && scene_bad == 0;
    notes.push(format!(
        "scene round trip {scene_rt}, {scene_bad} corruptions accepted"
    ));

    let spec = DatasetSpec {
        frames: 4,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(8, &spec)?;
    let root = scratch_dir("acceptance");
    let result = (|| -> Result<(bool, usize, usize)> {
        let (d1, d2) = (root.join("a"), root.join("b"));
        save_dataset(&d1, &data)?;
        let loaded = load_dataset(&d1)?;
        save_dataset(&d2, &loaded)?;
        let same = dir_bytes(&d1)? == dir_bytes(&d2)? && loaded == data;
        let mut tried = 0;
        let mut accepted = 0;
        for (rel, bytes) in dir_bytes(&d1)? {
            for bad in corruptions(&bytes) {
                let p = d2.join(&rel);
                fs::write(&p, &bad)?;
                tried += 1;
                if !rejects(|| load_dataset(&d2)) {
                    accepted += 1;
                }
                fs::write(&p, &bytes)?;
            }
        }
        Ok((same, tried, accepted))
    })();
    let _ = fs::remove_dir_all(&root);
    let (data_rt, tried, data_bad) = result?;
    ok &= data_rt && data_bad == 0;
    notes.push(format!(
        "dataset round trip {data_rt}, {data_bad} of {tried} corruptions accepted"
    ));

    let model = Model::new(ExperimentConfig::default().train.model, 8)?
        .with_teacher(SemanticTeacher::from_scene(&scene));
    let c = encode_checkpoint(&model)?;
    let ckpt_rt = encode_checkpoint(&decode_checkpoint(&c)?)? == c;
    let ckpt_bad = corruptions(&c)
        .iter()
        .filter(|b| !rejects(|| decode_checkpoint(b)))
        .count();
    ok &= ckpt_rt && ckpt_bad == 0;
    notes.push(format!(
        "checkpoint round trip {ckpt_rt}, {ckpt_bad} corruptions accepted"
    ));
    Ok((ok, notes.join("; ")))
}

fn outcome(id: u8, r: Result<(bool, String)>, start: Instant) -> CriterionResult {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionResult {
        id,
        title: TITLES[id as usize - 1],
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn fingerprinted(id: u8) -> Result<Outcome> {
    match id {
        1 => criterion_1(),
        2 => criterion_2(),
        3 => criterion_3(),
        _ => criterion_4(),
    }
}

/// Run the selected criteria (all when `only` is empty), reporting each
/// result as soon as it is known.
pub fn run_acceptance(
    only: &[u8],
    mut on_result: impl FnMut(&CriterionResult),
) -> Result<AcceptanceReport> {
    if let Some(bad) = only.iter().find(|&&i| !(1..=8).contains(&i)) {
        return Err(Error::config(format!(
            "no acceptance criterion {bad}; criteria are 1 to 8"
        )));
    }
    let wanted = |i: u8| only.is_empty() || only.contains(&i);
    let mut report = AcceptanceReport::default();
    let mut push = |r: CriterionResult, report: &mut AcceptanceReport| {
        on_result(&r);
        report.results.push(r);
    };
    let mut single = [None, None, None, None];
    for id in 1..=4u8 {
        if wanted(id) || wanted(7) {
            let start = Instant::now();
            let r = in_pool(1, || fingerprinted(id)).and_then(|r| r);
            single[id as usize - 1] = r.as_ref().ok().map(|o| o.2);
            if wanted(id) {
                push(outcome(id, r.map(|(ok, d, _)| (ok, d)), start), &mut report);
            }
        }
    }
    if wanted(5) {
        let start = Instant::now();
        push(outcome(5, criterion_5(), start), &mut report);
    }
    if wanted(6) {
        let start = Instant::now();
        push(outcome(6, criterion_6(), start), &mut report);
    }
    if wanted(7) {
        let start = Instant::now();
        let r = (|| -> Result<(bool, String)> {
            let mut same = Vec::new();
            for id in 1..=4u8 {
                let multi = in_pool(8, || fingerprinted(id))??.2;
                let one = single[id as usize - 1].ok_or_else(|| {
                    Error::Numeric(format!("criterion {id} failed to run single-threaded"))
                })?;
                same.push((id, one == multi));
            }
            let ok = same.iter().all(|&(_, s)| s);
            let detail = same
                .iter()
                .map(|(id, s)| {
                    format!(
                        "criterion {id} {}",
                        if *s { "identical" } else { "DIFFERS" }
                    )
                })
                .collect::<Vec<_>>()
                .join(", ");
            Ok((ok, format!("1 vs 8 threads: {detail}")))
        })();
        push(outcome(7, r, start), &mut report);
    }
    if wanted(8) {
        let start = Instant::now();
        push(outcome(8, criterion_8(), start), &mut report);
    }
    Ok(report)
}
