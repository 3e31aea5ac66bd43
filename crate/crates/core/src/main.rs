use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use semsplat::acceptance::run_acceptance;
use semsplat::checkpoint::{load_checkpoint, save_checkpoint};
use semsplat::config::ExperimentConfig;
use semsplat::fit::fit_scene;
use semsplat::gradcheck::{render_gradient_suite, ParamClass};
use semsplat::io;
use semsplat::metrics::{psnr, segment_feature_map, Confusion};
use semsplat::model::relative_cameras;
use semsplat::objectives::ssim;
use semsplat::render::render;
use semsplat::sampler::{FrameRecord, ViewSampler, DRY_RUN_HEADER};
use semsplat::synth::{
    decode_scene, encode_scene, load_dataset, save_family, DatasetSequence, LabeledScene,
};
use semsplat::train::{evaluate, heldout_frames, sampler_seed, train, EvalReport, StepLog};
use semsplat::{Error, ImageBuf, RenderOutput, Result};

#[derive(Parser)]
#[command(
    name = "semsplat",
    version,
    about = "Semantic Gaussian splatting: fitting, feed-forward training and evaluation"
)]
struct Cli {
    /// Worker threads (0 = one per core). Use 1 to reproduce a run bit for bit.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file. Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; created if missing. Receives the resolved config and all outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene family with ground-truth frames.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides dataset.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize a gaussian set against the frames of one sequence.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        /// Sequence of the family to fit.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
    },
    /// Train the feed-forward model.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render a scene file, or a model reconstruction, at a camera.
    Render {
        /// Output directory for `frames/NNNNNN.{ppm,feat,depth,label}`.
        #[arg(long)]
        out: PathBuf,
        /// Scene file written by `synth` or `fit`.
        #[arg(long, requires = "camera", conflicts_with = "checkpoint")]
        scene: Option<PathBuf>,
        /// Camera file (`.cam`). Output is named after its file stem.
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Model checkpoint; needs --dataset and --frames.
        #[arg(long, requires_all = ["dataset", "frames"])]
        checkpoint: Option<PathBuf>,
        /// Dataset directory of a single sequence.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Context, target and context frame: `a,t,b`.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
    },
    /// Score renders against a dataset, or a checkpoint on its held-out views.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset directory of a single sequence (with --pred).
        #[arg(long, requires = "pred", conflicts_with = "checkpoint")]
        dataset: Option<PathBuf>,
        /// Directory holding `frames/NNNNNN.{ppm,feat,label}` predictions.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Model checkpoint, scored on the held-out views of the configured family.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit the view sampler's triples without training, as `step,c1,c2,t,theta_deg,gap,fallback`.
    SampleDryRun {
        #[command(flatten)]
        run: RunArgs,
        /// Draws; defaults to train.steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Constant pose loss fed back after every draw.
        #[arg(long, default_value_t = 0.5)]
        loss: f64,
        /// Sequence whose frames are sampled.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
    },
    /// Finite-difference check of the renderer gradients.
    GradCheck {
        /// Output directory for `gradcheck.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random scenes to check.
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 8)]
        gaussians: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        feature_dim: usize,
    },
    /// Run the acceptance criteria and print one PASS/FAIL line each.
    Acceptance {
        /// Output directory for `acceptance.txt`.
        #[arg(long)]
        out: PathBuf,
        /// Criteria to run, e.g. `1,3,8`. All when omitted.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

fn main() -> ExitCode {
    let defaults = format!(
        "Config files hold `[section]` headers and `key = value` lines; `#` starts a comment.\n\
         Defaults:\n\n{}",
        ExperimentConfig::default().to_text()
    );
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Config(list) => {
                    eprintln!("error [config]: {} problem(s)", list.len());
                    for item in list {
                        eprintln!("  {item}");
                    }
                }
                other => eprintln!("error [{}]: {other}", other.category()),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { run, seed } => synth(run, seed),
        Command::Fit { run, sequence } => fit(run, sequence),
        Command::Train { run } => train_cmd(run),
        Command::Render {
            out,
            scene,
            camera,
            checkpoint,
            dataset,
            frames,
        } => render_cmd(&out, scene, camera, checkpoint, dataset, frames),
        Command::Eval {
            run,
            dataset,
            pred,
            checkpoint,
        } => eval_cmd(run, dataset, pred, checkpoint),
        Command::SampleDryRun {
            run,
            steps,
            loss,
            sequence,
        } => dry_run(run, steps, loss, sequence),
        Command::GradCheck {
            out,
            seed,
            scenes,
            gaussians,
            size,
            feature_dim,
        } => grad_check(&out, seed, scenes, gaussians, size, feature_dim),
        Command::Acceptance { out, only } => acceptance(&out, &only),
    }
}

fn config_error(msg: String) -> Error {
    Error::Config(vec![msg])
}

/// Load the config and open the run directory with the resolved config echoed into it.
fn open_run(run: &RunArgs) -> Result<ExperimentConfig> {
    let cfg = match &run.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    fs::create_dir_all(&run.out)?;
    fs::write(run.out.join("config.txt"), cfg.to_text())?;
    Ok(cfg)
}

fn require_runnable(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.runnable {
        Ok(())
    } else {
        Err(config_error(
            "experiment.runnable = false: this config records reference values and is not meant to run here".into(),
        ))
    }
}

fn write_seeds(out: &Path, seeds: &[(&str, u64)]) -> Result<()> {
    let text: String = seeds.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(out.join("seed.txt"), text)?;
    Ok(())
}

fn finish(out: &Path, summary: &str) -> Result<()> {
    fs::write(out.join("summary.txt"), summary)?;
    print!("{summary}");
    Ok(())
}

fn synth(run: RunArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = open_run(&run)?;
    if let Some(s) = seed {
        cfg.dataset_seed = s;
        fs::write(run.out.join("config.txt"), cfg.to_text())?;
    }
    require_runnable(&cfg)?;
    let family = semsplat::synth::generate_family(cfg.dataset_seed, cfg.scenes, &cfg.dataset)?;
    let dir = run.out.join("dataset");
    save_family(&dir, &family)?;
    write_seeds(&run.out, &[("dataset_seed", cfg.dataset_seed)])?;
    let mut s = String::new();
    let _ = writeln!(s, "dataset: {}", dir.display());
    for (i, d) in family.iter().enumerate() {
        let _ = writeln!(
            s,
            "seq_{i:03}: seed {}, {} frames, {} gaussians, {} classes",
            d.seed,
            d.frames.len(),
            d.scene.scene.len(),
            d.scene.classes()
        );
    }
    finish(&run.out, &s)
}

/// Label each fitted gaussian with its nearest class so the result can be stored as a scene file.
fn label_fitted(scene: semsplat::GaussianScene, like: &LabeledScene) -> LabeledScene {
    let class_ids = scene
        .gaussians
        .iter()
        .map(|g| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (k, row) in like.table.iter().enumerate() {
                let dot: f64 = row.iter().zip(&g.feat).map(|(a, b)| a * b).sum();
                if dot > best.0 {
                    best = (dot, k);
                }
            }
            best.1
        })
        .collect();
    LabeledScene {
        scene,
        class_ids,
        table: like.table.clone(),
        palette: like.palette.clone(),
    }
}

fn write_render(dir: &Path, stem: &str, out: &RenderOutput, table: &[Vec<f64>]) -> Result<()> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    let base = frames.join(stem);
    io::write_ppm(&base.with_extension("ppm"), &out.rgb)?;
    io::write_map(&base.with_extension("feat"), &out.feature)?;
    io::write_map(&base.with_extension("depth"), &out.depth)?;
    let labels = segment_feature_map(&out.feature, table)?;
    io::write_map(&base.with_extension("label"), &io::labels_to_map(&labels))?;
    Ok(())
}

fn fit(run: RunArgs, sequence: usize) -> Result<()> {
    let cfg = open_run(&run)?;
    require_runnable(&cfg)?;
    let family = cfg.family()?;
    let data = family.get(sequence).ok_or_else(|| {
        config_error(format!(
            "--sequence {sequence}: the family has {} sequences",
            family.len()
        ))
    })?;
    let train_frames = cfg.fit_train_frames(data.frames.len());
    let report = fit_scene(data, &train_frames, &cfg.fit_heldout, &cfg.fit)?;
    write_seeds(
        &run.out,
        &[
            ("dataset_seed", cfg.dataset_seed),
            ("fit_seed", cfg.fit.seed),
        ],
    )?;

    let mut csv = String::from("step,loss\n");
    for (step, loss) in &report.losses {
        let _ = writeln!(csv, "{step},{loss}");
    }
    fs::write(run.out.join("metrics.csv"), csv)?;
    let mut held = String::from("frame,psnr\n");
    for (f, p) in cfg.fit_heldout.iter().zip(&report.heldout_psnr) {
        let _ = writeln!(held, "{f},{p}");
    }
    fs::write(run.out.join("heldout.csv"), held)?;

    let labeled = label_fitted(report.scene, &data.scene);
    fs::write(run.out.join("scene.bin"), encode_scene(&labeled))?;
    for &f in &cfg.fit_heldout {
        let out = render(&labeled.scene, &data.frames[f].camera, [0.0; 3])?;
        write_render(&run.out, &format!("{f:06}"), &out, &labeled.table)?;
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        "fit: {} gaussians, {} steps, {:.1} s",
        labeled.scene.len(),
        cfg.fit.steps,
        report.duration.as_secs_f64()
    );
    let _ = writeln!(
        s,
        "final loss {:.6}",
        report.losses.last().map_or(f64::NAN, |l| l.1)
    );
    let _ = writeln!(s, "train PSNR {:.2} dB", report.train_psnr);
    for (f, p) in cfg.fit_heldout.iter().zip(&report.heldout_psnr) {
        let _ = writeln!(s, "held-out frame {f}: PSNR {p:.2} dB");
    }
    finish(&run.out, &s)
}

fn eval_summary(e: &EvalReport) -> String {
    let majority = e
        .majority_class
        .map_or("none".to_string(), |k| k.to_string());
    format!(
        "views {}\nPSNR {:.3} dB\nmIoU {:.4}\nmAcc {:.4}\nmajority-class mIoU {:.4} (class {majority})\npose loss {:.5}\ninference {:.4} s per pair\n",
        e.views, e.psnr, e.miou, e.macc, e.majority_miou, e.pose_loss, e.infer_seconds
    )
}

const EVAL_HEADER: &str = "step,views,psnr,miou,macc,majority_miou,pose_loss";

fn eval_line(step: u64, e: &EvalReport) -> String {
    format!(
        "{step},{},{},{},{},{},{}\n",
        e.views, e.psnr, e.miou, e.macc, e.majority_miou, e.pose_loss
    )
}

fn train_cmd(run: RunArgs) -> Result<()> {
    let cfg = open_run(&run)?;
    require_runnable(&cfg)?;
    let family = cfg.family()?;
    write_seeds(
        &run.out,
        &[
            ("dataset_seed", cfg.dataset_seed),
            ("train_seed", cfg.train.seed),
        ],
    )?;
    let mut csv = format!("{}\n", StepLog::CSV_HEADER);
    let mut evals = format!("{EVAL_HEADER}\n");
    let mut eval_error = None;
    let report = train(&family, &cfg.train, |line, model| {
        csv.push_str(&line.csv_line());
        csv.push('\n');
        if line.step % 100 == 0 {
            log::info!(
                "step {} total {:.5} pose {:.5}",
                line.step,
                line.total,
                line.pose
            );
        }
        if cfg.eval_every > 0 && line.step % cfg.eval_every == 0 && eval_error.is_none() {
            match evaluate(model, &family, &cfg.train) {
                Ok(e) => evals.push_str(&eval_line(line.step, &e)),
                Err(e) => eval_error = Some(e),
            }
        }
    })?;
    if let Some(e) = eval_error {
        return Err(e);
    }
    fs::write(run.out.join("metrics.csv"), csv)?;
    if report.rejected as u64 == cfg.train.steps {
        return Err(Error::Numeric(
            "every training step produced a non-finite loss".into(),
        ));
    }
    let ck = run.out.join("checkpoint.bin");
    save_checkpoint(&ck, &report.model)?;
    // Score the stored parameters so the checkpoint reproduces these numbers exactly.
    let e = evaluate(&load_checkpoint(&ck)?, &family, &cfg.train)?;
    evals.push_str(&eval_line(cfg.train.steps, &e));
    fs::write(run.out.join("eval.csv"), evals)?;

    let w = cfg.train.average_window;
    let (early, last) = (report.early_average(w), report.final_average(w));
    let mut s = String::new();
    let _ = writeln!(
        s,
        "train: {} sequences, {} steps, {:.1} s",
        family.len(),
        cfg.train.steps,
        report.duration.as_secs_f64()
    );
    let _ = writeln!(
        s,
        "total loss (mean of {w}) {early:.5} -> {last:.5} ({:.1}% lower)",
        100.0 * (1.0 - last / early)
    );
    let _ = writeln!(
        s,
        "final pose loss (mean of {w}) {:.5}",
        report.final_pose(w)
    );
    let _ = writeln!(
        s,
        "skipped steps {}, sampler proposals rejected {}",
        report.rejected, report.proposals_rejected
    );
    s.push_str("held-out evaluation:\n");
    s.push_str(&eval_summary(&e));
    finish(&run.out, &s)
}

fn render_cmd(
    out: &Path,
    scene: Option<PathBuf>,
    camera: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    frames: Option<Vec<usize>>,
) -> Result<()> {
    fs::create_dir_all(out)?;
    if let (Some(scene), Some(camera)) = (scene, camera) {
        let s = decode_scene(&fs::read(&scene)?)?;
        let cam = io::read_camera(&camera)?;
        let stem = camera
            .file_stem()
            .map_or("render".into(), |s| s.to_string_lossy().into_owned());
        let r = render(&s.scene, &cam, [0.0; 3])?;
        write_render(out, &stem, &r, &s.table)?;
        println!(
            "wrote {}",
            out.join("frames")
                .join(stem)
                .with_extension("ppm")
                .display()
        );
        return Ok(());
    }
    let (Some(checkpoint), Some(dataset), Some(frames)) = (checkpoint, dataset, frames) else {
        return Err(config_error(
            "render needs --scene with --camera, or --checkpoint with --dataset and --frames"
                .into(),
        ));
    };
    let [a, t, b] = <[usize; 3]>::try_from(frames)
        .map_err(|f| config_error(format!("--frames: need `a,t,b`, got {f:?}")))?;
    let model = load_checkpoint(&checkpoint)?;
    let data = load_dataset(&dataset)?;
    let n = data.frames.len();
    if a.max(t).max(b) >= n || a == b {
        return Err(config_error(format!(
            "--frames {a},{t},{b}: need distinct contexts below {n}"
        )));
    }
    let f = &data.frames;
    let (target, _) = relative_cameras(&f[a].camera, &f[b].camera, &f[t].camera)?;
    let (pred, took) = model.infer(&f[a].rgb, &f[b].rgb)?;
    let r = render(&pred.scene, &target, [0.0; 3])?;
    write_render(out, &format!("{t:06}"), &r, &data.scene.table)?;
    println!(
        "frame {t} from ({a}, {b}): PSNR {:.2} dB, inference {:.4} s",
        psnr(&f[t].rgb, &r.rgb)?,
        took.as_secs_f64()
    );
    Ok(())
}

/// Per-frame scores of prediction files against a dataset. Labels come from
/// `.label` when present, otherwise from decoding `.feat` with the scene's class table.
fn score_predictions(data: &DatasetSequence, pred: &Path) -> Result<(String, String)> {
    let mut conf = Confusion::new(data.scene.classes());
    let mut csv = String::from("frame,psnr,ssim\n");
    let (mut psnrs, mut ssims) = (Vec::new(), Vec::new());
    for (i, f) in data.frames.iter().enumerate() {
        let base = pred.join("frames").join(format!("{i:06}"));
        let rgb_path = base.with_extension("ppm");
        if !rgb_path.exists() {
            continue;
        }
        let rgb = io::read_ppm(&rgb_path)?;
        let label_path = base.with_extension("label");
        let labels = if label_path.exists() {
            io::map_to_labels(&io::read_map(&label_path)?)?
        } else {
            let feat: ImageBuf = io::read_map(&base.with_extension("feat"))?;
            segment_feature_map(&feat, &data.scene.table)?
        };
        let (p, q) = (psnr(&f.rgb, &rgb)?, ssim(&f.rgb, &rgb)?);
        conf.add(&labels, &f.labels)?;
        let _ = writeln!(csv, "{i},{p},{q}");
        psnrs.push(p);
        ssims.push(q);
    }
    if psnrs.is_empty() {
        return Err(config_error(format!(
            "{} has no frames/NNNNNN.ppm matching the dataset",
            pred.display()
        )));
    }
    let (miou, macc) = conf.miou_macc();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = format!(
        "views {}\nPSNR {:.3} dB\nSSIM {:.4}\nmIoU {miou:.4}\nmAcc {macc:.4}\n",
        psnrs.len(),
        mean(&psnrs),
        mean(&ssims)
    );
    Ok((csv, summary))
}

fn eval_cmd(
    run: RunArgs,
    dataset: Option<PathBuf>,
    pred: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let cfg = open_run(&run)?;
    match (dataset, pred, checkpoint) {
        (Some(dataset), Some(pred), None) => {
            let data = load_dataset(&dataset)?;
            let (csv, summary) = score_predictions(&data, &pred)?;
            fs::write(run.out.join("metrics.csv"), csv)?;
            finish(&run.out, &summary)
        }
        (None, None, Some(checkpoint)) => {
            require_runnable(&cfg)?;
            let model = load_checkpoint(&checkpoint)?;
            let family = cfg.family()?;
            write_seeds(
                &run.out,
                &[
                    ("dataset_seed", cfg.dataset_seed),
                    ("train_seed", cfg.train.seed),
                ],
            )?;
            let e = evaluate(&model, &family, &cfg.train)?;
            fs::write(
                run.out.join("metrics.csv"),
                format!("{EVAL_HEADER}\n{}", eval_line(0, &e)),
            )?;
            finish(&run.out, &eval_summary(&e))
        }
        _ => Err(config_error(
            "eval needs --dataset with --pred, or --checkpoint".into(),
        )),
    }
}

fn dry_run(run: RunArgs, steps: Option<u64>, loss: f64, sequence: usize) -> Result<()> {
    let cfg = open_run(&run)?;
    if !(loss.is_finite() && loss >= 0.0) {
        return Err(config_error(format!(
            "--loss {loss}: must be finite and non-negative"
        )));
    }
    let family = cfg.family()?;
    let data = family.get(sequence).ok_or_else(|| {
        config_error(format!(
            "--sequence {sequence}: the family has {} sequences",
            family.len()
        ))
    })?;
    let t = &cfg.train;
    let held = heldout_frames(
        data.frames.len(),
        t.heldout_per_sequence,
        t.eval_gap,
        t.seed + sequence as u64,
    );
    let records: Vec<FrameRecord> = data
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
    let mut sampler = ViewSampler::new(t.sampler, sampler_seed(t.seed))?;
    let mut csv = format!("{DRY_RUN_HEADER}\n");
    for step in 1..=steps.unwrap_or(t.steps) {
        let tri = sampler.sample(&records)?;
        csv.push_str(&tri.csv_line(step, &records));
        csv.push('\n');
        sampler.record_and_check_stability(loss);
    }
    write_seeds(
        &run.out,
        &[
            ("dataset_seed", cfg.dataset_seed),
            ("sampler_seed", sampler_seed(t.seed)),
        ],
    )?;
    fs::write(run.out.join("samples.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn grad_check(
    out: &Path,
    seed: u64,
    scenes: usize,
    gaussians: usize,
    size: usize,
    feature_dim: usize,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let report = render_gradient_suite(seed, scenes, gaussians, size, feature_dim)?;
    let mut csv = String::from("class,compared,failures,max_rel_error\n");
    let mut s = String::new();
    for class in ParamClass::ALL {
        if let Some((_, r)) = report.classes.iter().find(|(c, _)| *c == class) {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                class.name(),
                r.compared,
                r.failures,
                r.max_rel_error
            );
            let _ = writeln!(
                s,
                "{:<9} {:>5} compared, {:>3} failed, max relative error {:.2e}",
                class.name(),
                r.compared,
                r.failures,
                r.max_rel_error
            );
        }
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    let _ = writeln!(s, "{verdict}");
    fs::write(out.join("gradcheck.csv"), csv)?;
    write_seeds(out, &[("seed", seed)])?;
    finish(out, &s)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Acceptance(
            "finite-difference gradient check failed".into(),
        ))
    }
}

fn acceptance(out: &Path, only: &[u8]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut lines = String::new();
    let report = run_acceptance(only, |r| {
        let line = r.line();
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    })?;
    fs::write(out.join("acceptance.txt"), lines)?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.id.to_string())
            .collect();
        Err(Error::Acceptance(format!(
            "criteria {} failed",
            failed.join(", ")
        )))
    }
}
