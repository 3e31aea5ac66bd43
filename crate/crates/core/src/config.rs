//! Experiment configuration: flat `key = value` text grouped in `[sections]`.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Parsing collects every problem (unknown section or key, unparsable value,
//! out-of-range setting) before reporting, so one run shows them all.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::sampler::SamplerConfig;
use crate::synth::{generate_family, load_family, DatasetSequence, DatasetSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Refuse to run. Used by reference files documenting settings that do
    /// not fit on a workstation.
    pub runnable: bool,
    /// Load the dataset family from here instead of generating it.
    pub dataset_path: Option<PathBuf>,
    pub dataset_seed: u64,
    pub scenes: usize,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub fit: FitConfig,
    /// Frames the fit command holds out; the rest are fitted.
    pub fit_heldout: Vec<usize>,
    /// Evaluate every this many training steps (0: only at the end).
    pub eval_every: u64,
    /// Ramp length of the gap schedule; `None` means half the step budget.
    pub ramp_steps: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetSpec {
            frames: 60,
            ..DatasetSpec::default()
        };
        let mut c = Self {
            runnable: true,
            dataset_path: None,
            dataset_seed: 100,
            scenes: 5,
            dataset,
            train: TrainConfig::default(),
            fit: FitConfig::default(),
            fit_heldout: vec![4],
            eval_every: 0,
            ramp_steps: None,
        };
        c.sync();
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str, bad: &mut Vec<String>) -> Option<T> {
    match v.parse() {
        Ok(x) => Some(x),
        Err(_) => {
            bad.push(format!("{key} = {v:?}: cannot parse value"));
            None
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str, bad: &mut Vec<String>) -> Option<Vec<T>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    for part in v.split(',') {
        out.push(parse(key, part.trim(), bad)?);
    }
    Some(out)
}

impl ExperimentConfig {
    /// The per-scene fitting setup: one 64×64 sequence of 9 frames 5° apart,
    /// 512 gaussians fitted to 8 of them, the middle frame held out.
    pub fn fit_preset() -> Self {
        let mut c = Self {
            dataset_seed: 1,
            scenes: 1,
            ..Self::default()
        };
        c.dataset.frames = 9;
        c.dataset.trajectory.width = 64;
        c.dataset.trajectory.height = 64;
        c.dataset.trajectory.deg_per_frame = 5.0;
        c.sync();
        c
    }

    /// The dataset family: loaded from `dataset.path` when set, generated otherwise.
    pub fn family(&self) -> Result<Vec<DatasetSequence>> {
        match &self.dataset_path {
            Some(p) => load_family(p),
            None => generate_family(self.dataset_seed, self.scenes, &self.dataset),
        }
    }

    /// Frames the fit command trains on: every frame not held out.
    pub fn fit_train_frames(&self, frames: usize) -> Vec<usize> {
        (0..frames)
            .filter(|i| !self.fit_heldout.contains(i))
            .collect()
    }

    /// Parse a config file. Unknown keys and bad values are all reported
    /// together in one config error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut bad = Vec::new();
        let mut section = String::new();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    bad.push(format!("line {}: unknown section [{section}]", n + 1));
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bad.push(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    n + 1
                ));
                continue;
            };
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            if seen.contains(&key) {
                bad.push(format!("{key}: set more than once"));
            }
            seen.push(key.clone());
            c.set(&key, v.trim(), &mut bad);
        }
        if let Err(Error::Config(list)) = c.validate() {
            bad.extend(list);
        }
        if bad.is_empty() {
            Ok(c)
        } else {
            Err(Error::Config(bad))
        }
    }

    fn set(&mut self, key: &str, v: &str, bad: &mut Vec<String>) {
        let d = &mut self.dataset;
        let m = &mut self.train.model;
        let s = &mut self.train.sampler;
        let o = &mut self.train.optimizer;
        let w = &mut self.train.weights;
        let f = &mut self.fit;
        macro_rules! put {
            ($field:expr) => {
                if let Some(x) = parse(key, v, bad) {
                    $field = x;
                }
            };
        }
        macro_rules! deg {
            ($field:expr) => {
                if let Some(x) = parse::<f64>(key, v, bad) {
                    $field = x.to_radians();
                }
            };
        }
        match key {
            "experiment.runnable" => put!(self.runnable),
            "experiment.eval_every" => put!(self.eval_every),
            "dataset.path" => self.dataset_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "dataset.seed" => put!(self.dataset_seed),
            "dataset.scenes" => put!(self.scenes),
            "dataset.frames" => put!(d.frames),
            "dataset.width" => put!(d.trajectory.width),
            "dataset.height" => put!(d.trajectory.height),
            "dataset.fov_deg" => put!(d.trajectory.fov_deg),
            "dataset.radius" => put!(d.trajectory.radius),
            "dataset.deg_per_frame" => put!(d.trajectory.deg_per_frame),
            "dataset.feature_noise" => put!(d.feature_noise),
            "dataset.half_extent" => {
                if let Some(e) = list::<f64>(key, v, bad) {
                    match <[f64; 3]>::try_from(e) {
                        Ok(a) => d.scene.half_extent = a,
                        Err(_) => bad.push(format!("{key}: needs exactly 3 values")),
                    }
                }
            }
            "dataset.plane_grid" => put!(d.scene.plane_grid),
            "dataset.objects" => put!(d.scene.objects),
            "dataset.gaussians_per_object" => put!(d.scene.gaussians_per_object),
            "dataset.classes" => put!(d.scene.classes),
            "dataset.feature_dim" => put!(d.scene.feature_dim),
            "dataset.color_jitter" => put!(d.scene.color_jitter),
            "dataset.embedding_seed" => put!(d.scene.embedding_seed),
            "model.patch" => put!(m.patch),
            "model.dim" => put!(m.dim),
            "model.blocks" => put!(m.blocks),
            "model.decoder_dim" => put!(m.decoder_dim),
            "model.head_hidden" => put!(m.head_hidden),
            "model.init_depth" => put!(m.init_depth),
            "model.nominal_fov_deg" => put!(m.nominal_fov_deg),
            "model.scale_min" => put!(m.scale_min),
            "model.scale_max" => put!(m.scale_max),
            "model.semantic_head" => put!(m.semantic_head),
            "model.image_shortcut" => put!(m.image_shortcut),
            "model.semantic_shortcut" => put!(m.semantic_shortcut),
            "loss.eta" => put!(w.eta),
            "loss.lambda_pose" => put!(w.lambda_pose),
            "loss.lambda_sem" => put!(w.lambda_sem),
            "optimizer.lr" => put!(o.lr),
            "optimizer.beta1" => put!(o.beta1),
            "optimizer.beta2" => put!(o.beta2),
            "optimizer.eps" => put!(o.eps),
            "sampler.curriculum" => put!(s.curriculum),
            "sampler.theta0_deg" => deg!(s.theta0),
            "sampler.delta_theta_deg" => deg!(s.delta_theta),
            "sampler.theta_max_deg" => deg!(s.theta_max),
            "sampler.window" => put!(s.window),
            "sampler.stability_frac" => put!(s.stability_frac),
            "sampler.gap_min" => put!(s.gap_min),
            "sampler.gap_max" => put!(s.gap_max),
            "sampler.ramp_steps" => {
                if v == "auto" {
                    self.ramp_steps = None;
                } else if let Some(x) = parse(key, v, bad) {
                    self.ramp_steps = Some(x);
                }
            }
            "sampler.max_attempts" => put!(s.max_attempts),
            "train.steps" => put!(self.train.steps),
            "train.batch" => put!(self.train.batch),
            "train.seed" => put!(self.train.seed),
            "train.heldout_per_sequence" => put!(self.train.heldout_per_sequence),
            "train.eval_gap" => put!(self.train.eval_gap),
            "train.average_window" => put!(self.train.average_window),
            "fit.gaussians" => put!(f.gaussians),
            "fit.steps" => put!(f.steps),
            "fit.seed" => put!(f.seed),
            "fit.feature_weight" => put!(f.feature_weight),
            "fit.init_radius_px" => put!(f.init_radius_px),
            "fit.init_opacity" => put!(f.init_opacity),
            "fit.lr_position" => put!(f.lr_position),
            "fit.lr_position_final" => put!(f.lr_position_final),
            "fit.lr_rotation" => put!(f.lr_rotation),
            "fit.lr_scale" => put!(f.lr_scale),
            "fit.lr_opacity" => put!(f.lr_opacity),
            "fit.lr_color" => put!(f.lr_color),
            "fit.lr_feature" => put!(f.lr_feature),
            "fit.log_every" => put!(f.log_every),
            "fit.heldout" => {
                if let Some(l) = list(key, v, bad) {
                    self.fit_heldout = l;
                }
            }
            _ => bad.push(format!("{key}: unknown key")),
        }
        self.sync();
    }

    /// Copy dataset-derived sizes into the model and resolve the ramp.
    fn sync(&mut self) {
        let m = &mut self.train.model;
        m.width = self.dataset.trajectory.width;
        m.height = self.dataset.trajectory.height;
        m.feature_dim = self.dataset.scene.feature_dim;
        self.train.sampler.ramp_steps = self.ramp_steps.unwrap_or(self.train.steps / 2);
    }

    /// Every range check at once. Paths are checked for existence here.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut take = |r: Result<()>| match r {
            Err(Error::Config(list)) => bad.extend(list),
            Err(e) => bad.push(e.to_string()),
            Ok(()) => {}
        };
        take(self.dataset.scene.validate());
        take(self.dataset.trajectory.validate());
        take(self.train.validate());
        take(self.fit.validate());
        if self.dataset.frames < 3 {
            bad.push(format!(
                "dataset.frames = {} must be at least 3",
                self.dataset.frames
            ));
        }
        if self.scenes == 0 {
            bad.push("dataset.scenes must be positive".into());
        }
        if !(self.dataset.feature_noise >= 0.0 && self.dataset.feature_noise.is_finite()) {
            bad.push("dataset.feature_noise must be finite and >= 0".into());
        }
        if let Some(p) = &self.dataset_path {
            if !p.exists() {
                bad.push(format!(
                    "dataset.path = {}: no such file or directory",
                    p.display()
                ));
            }
        }
        for &h in &self.fit_heldout {
            if h >= self.dataset.frames {
                bad.push(format!(
                    "fit.heldout: frame {h} is past dataset.frames = {}",
                    self.dataset.frames
                ));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Canonical text form; parsing it yields this configuration again.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let m = &self.train.model;
        let s: &SamplerConfig = &self.train.sampler;
        let o = &self.train.optimizer;
        let w = &self.train.weights;
        let f = &self.fit;
        let e = d.scene.half_extent;
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut t = String::new();
        let mut sec = |name: &str, items: Vec<(&str, String)>| {
            let _ = writeln!(t, "[{name}]");
            for (k, v) in items {
                let _ = writeln!(t, "{k} = {v}");
            }
            t.push('\n');
        };
        sec(
            "experiment",
            vec![
                ("runnable", self.runnable.to_string()),
                ("eval_every", self.eval_every.to_string()),
            ],
        );
        sec(
            "dataset",
            vec![
                (
                    "path",
                    self.dataset_path
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default(),
                ),
                ("seed", self.dataset_seed.to_string()),
                ("scenes", self.scenes.to_string()),
                ("frames", d.frames.to_string()),
                ("width", d.trajectory.width.to_string()),
                ("height", d.trajectory.height.to_string()),
                ("fov_deg", format!("{:?}", d.trajectory.fov_deg)),
                ("radius", format!("{:?}", d.trajectory.radius)),
                ("deg_per_frame", format!("{:?}", d.trajectory.deg_per_frame)),
                ("feature_noise", format!("{:?}", d.feature_noise)),
                ("half_extent", format!("{:?},{:?},{:?}", e[0], e[1], e[2])),
                ("plane_grid", d.scene.plane_grid.to_string()),
                ("objects", d.scene.objects.to_string()),
                (
                    "gaussians_per_object",
                    d.scene.gaussians_per_object.to_string(),
                ),
                ("classes", d.scene.classes.to_string()),
                ("feature_dim", d.scene.feature_dim.to_string()),
                ("color_jitter", format!("{:?}", d.scene.color_jitter)),
                ("embedding_seed", d.scene.embedding_seed.to_string()),
            ],
        );
        sec(
            "model",
            vec![
                ("patch", m.patch.to_string()),
                ("dim", m.dim.to_string()),
                ("blocks", m.blocks.to_string()),
                ("decoder_dim", m.decoder_dim.to_string()),
                ("head_hidden", m.head_hidden.to_string()),
                ("init_depth", format!("{:?}", m.init_depth)),
                ("nominal_fov_deg", format!("{:?}", m.nominal_fov_deg)),
                ("scale_min", format!("{:?}", m.scale_min)),
                ("scale_max", format!("{:?}", m.scale_max)),
                ("semantic_head", m.semantic_head.to_string()),
                ("image_shortcut", m.image_shortcut.to_string()),
                ("semantic_shortcut", m.semantic_shortcut.to_string()),
            ],
        );
        sec(
            "loss",
            vec![
                ("eta", format!("{:?}", w.eta)),
                ("lambda_pose", format!("{:?}", w.lambda_pose)),
                ("lambda_sem", format!("{:?}", w.lambda_sem)),
            ],
        );
        sec(
            "optimizer",
            vec![
                ("lr", format!("{:?}", o.lr)),
                ("beta1", format!("{:?}", o.beta1)),
                ("beta2", format!("{:?}", o.beta2)),
                ("eps", format!("{:?}", o.eps)),
            ],
        );
        sec(
            "sampler",
            vec![
                ("curriculum", s.curriculum.to_string()),
                ("theta0_deg", fmt_deg(s.theta0)),
                ("delta_theta_deg", fmt_deg(s.delta_theta)),
                ("theta_max_deg", fmt_deg(s.theta_max)),
                ("window", s.window.to_string()),
                ("stability_frac", format!("{:?}", s.stability_frac)),
                ("gap_min", s.gap_min.to_string()),
                ("gap_max", s.gap_max.to_string()),
                (
                    "ramp_steps",
                    self.ramp_steps
                        .map_or("auto".to_string(), |r| r.to_string()),
                ),
                ("max_attempts", s.max_attempts.to_string()),
            ],
        );
        sec(
            "train",
            vec![
                ("steps", self.train.steps.to_string()),
                ("batch", self.train.batch.to_string()),
                ("seed", self.train.seed.to_string()),
                (
                    "heldout_per_sequence",
                    self.train.heldout_per_sequence.to_string(),
                ),
                ("eval_gap", self.train.eval_gap.to_string()),
                ("average_window", self.train.average_window.to_string()),
            ],
        );
        sec(
            "fit",
            vec![
                ("gaussians", f.gaussians.to_string()),
                ("steps", f.steps.to_string()),
                ("seed", f.seed.to_string()),
                ("feature_weight", format!("{:?}", f.feature_weight)),
                ("init_radius_px", format!("{:?}", f.init_radius_px)),
                ("init_opacity", format!("{:?}", f.init_opacity)),
                ("lr_position", format!("{:?}", f.lr_position)),
                ("lr_position_final", format!("{:?}", f.lr_position_final)),
                ("lr_rotation", format!("{:?}", f.lr_rotation)),
                ("lr_scale", format!("{:?}", f.lr_scale)),
                ("lr_opacity", format!("{:?}", f.lr_opacity)),
                ("lr_color", format!("{:?}", f.lr_color)),
                ("lr_feature", format!("{:?}", f.lr_feature)),
                ("log_every", f.log_every.to_string()),
                ("heldout", join(&self.fit_heldout)),
            ],
        );
        t.pop();
        t
    }
}

const SECTIONS: [&str; 8] = [
    "experiment",
    "dataset",
    "model",
    "loss",
    "optimizer",
    "sampler",
    "train",
    "fit",
];

/// Shortest decimal degree value that converts back to exactly `rad`, so
/// echoed configs read "15" rather than "14.999999999999998".
fn fmt_deg(rad: f64) -> String {
    let deg = rad.to_degrees();
    (0..17)
        .map(|p| format!("{deg:.p$}"))
        .find(|t| t.parse::<f64>().is_ok_and(|x| x.to_radians() == rad))
        .map(|t| if t.contains('.') { t } else { format!("{t}.0") })
        .unwrap_or_else(|| format!("{deg:?}"))
}
