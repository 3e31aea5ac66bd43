//! Curriculum view sampler.
//!
//! Draws (context 1, context 2, target) frame triples from an ordered
//! sequence. The context gap widens on a fixed schedule, and every triple must
//! keep all pairwise rotation angles below a threshold θ. θ grows by Δθ each
//! time the recent pose loss stops changing.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_between, CameraView, RelativePose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Initial angle threshold, radians.
    pub theta0: f64,
    pub delta_theta: f64,
    pub theta_max: f64,
    /// Sliding loss window length.
    pub window: usize,
    /// Relative change between window halves below which the loss counts as stable.
    pub stability_frac: f64,
    pub gap_min: usize,
    pub gap_max: usize,
    /// Steps over which the gap limit ramps from `gap_min` to `gap_max`.
    pub ramp_steps: u64,
    pub max_attempts: usize,
    /// When false the angle threshold is fixed at π: plain random sampling at
    /// the scheduled gap.
    pub curriculum: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            theta0: 15f64.to_radians(),
            delta_theta: 5f64.to_radians(),
            theta_max: std::f64::consts::PI,
            window: 100,
            stability_frac: 0.05,
            gap_min: 4,
            gap_max: 40,
            ramp_steps: 2500,
            max_attempts: 1000,
            curriculum: true,
        }
    }
}

impl SamplerConfig {
    /// Default configuration with the gap ramp spanning half of `total_steps`.
    pub fn for_run(total_steps: u64) -> Self {
        Self {
            ramp_steps: total_steps / 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.theta0 > 0.0 && self.theta0 <= self.theta_max) {
            bad.push("sampler.theta0 must lie in (0, theta_max]".to_string());
        }
        if !(self.delta_theta >= 0.0 && self.delta_theta.is_finite()) {
            bad.push("sampler.delta_theta must be finite and >= 0".to_string());
        }
        if !(self.theta_max > 0.0 && self.theta_max <= std::f64::consts::PI + 1e-12) {
            bad.push("sampler.theta_max must lie in (0, 180] degrees".to_string());
        }
        if self.window < 2 || !self.window.is_multiple_of(2) {
            bad.push("sampler.window must be an even number >= 2".to_string());
        }
        if !(self.stability_frac >= 0.0 && self.stability_frac.is_finite()) {
            bad.push("sampler.stability_frac must be finite and >= 0".to_string());
        }
        if self.gap_min < 2 {
            bad.push("sampler.gap_min must be >= 2".to_string());
        }
        if self.gap_max < self.gap_min {
            bad.push("sampler.gap_max must be >= gap_min".to_string());
        }
        if self.max_attempts == 0 {
            bad.push("sampler.max_attempts must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// One frame of a sequence as seen by the sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    /// Camera-to-world pose.
    pub pose: RelativePose,
    /// Image id in the dataset.
    pub payload: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub theta: f64,
    pub delta_theta: f64,
    pub loss_window: VecDeque<f64>,
    pub step: u64,
}

/// A drawn triple, as positions into the frame slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triple {
    pub c1: usize,
    pub c2: usize,
    pub t: usize,
    /// θ in force when the triple was drawn.
    pub theta: f64,
    pub max_gap: usize,
    /// No proposal met the angle constraint; this is the best one seen.
    pub fallback: bool,
}

impl Triple {
    pub fn gap(&self) -> usize {
        self.c2 - self.c1
    }

    /// `step,c1,c2,t,theta_deg,gap,fallback` audit line.
    pub fn csv_line(&self, step: u64, frames: &[FrameRecord]) -> String {
        format!(
            "{},{},{},{},{:.6},{},{}",
            step,
            frames[self.c1].index,
            frames[self.c2].index,
            frames[self.t].index,
            self.theta.to_degrees(),
            self.gap(),
            u8::from(self.fallback)
        )
    }
}

pub const DRY_RUN_HEADER: &str = "step,c1,c2,t,theta_deg,gap,fallback";

/// Maximum context gap at `step`: a linear ramp from `gap_min` to `gap_max`.
pub fn schedule_max_gap(step: u64, cfg: &SamplerConfig) -> usize {
    let gap = if cfg.ramp_steps == 0 || step >= cfg.ramp_steps {
        cfg.gap_max
    } else {
        let span = (cfg.gap_max - cfg.gap_min) as u128;
        cfg.gap_min + (span * step as u128 / cfg.ramp_steps as u128) as usize
    };
    gap.max(2)
}

#[derive(Clone, Debug)]
pub struct ViewSampler {
    pub config: SamplerConfig,
    pub state: SamplerState,
    /// Proposals turned down by the angle gate so far.
    pub proposals_rejected: u64,
    rng: ChaCha8Rng,
}

impl ViewSampler {
    pub fn new(config: SamplerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let theta = if config.curriculum {
            config.theta0
        } else {
            std::f64::consts::PI
        };
        Ok(Self {
            config,
            state: SamplerState {
                theta,
                delta_theta: config.delta_theta,
                loss_window: VecDeque::with_capacity(config.window),
                step: 0,
            },
            proposals_rejected: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Record a pose loss. Returns true when the window was stable and θ advanced.
    pub fn record_and_check_stability(&mut self, pose_loss: f64) -> bool {
        if !pose_loss.is_finite() {
            log::warn!("sampler: ignoring non-finite pose loss");
            return false;
        }
        let w = self.config.window;
        if self.state.loss_window.len() == w {
            self.state.loss_window.pop_front();
        }
        self.state.loss_window.push_back(pose_loss);
        if !self.config.curriculum || self.state.loss_window.len() < w {
            return false;
        }
        let half = w / 2;
        let first = self.state.loss_window.iter().take(half).sum::<f64>() / half as f64;
        let second = self.state.loss_window.iter().skip(half).sum::<f64>() / half as f64;
        if (second - first).abs() <= self.config.stability_frac * first {
            self.state.theta =
                (self.state.theta + self.state.delta_theta).min(self.config.theta_max);
            self.state.loss_window.clear();
            log::debug!(
                "sampler: theta advanced to {:.2} deg at step {}",
                self.state.theta.to_degrees(),
                self.state.step
            );
            true
        } else {
            false
        }
    }

    /// Draw a triple and advance the step counter.
    pub fn sample(&mut self, frames: &[FrameRecord]) -> Result<Triple> {
        let n = frames.len();
        if n < 3 {
            return Err(Error::Dimension(format!(
                "sampling needs at least 3 frames, got {n}"
            )));
        }
        let max_gap = schedule_max_gap(self.state.step, &self.config);
        let upper = max_gap.min(n - 1);
        let theta = self.state.theta;
        let mut best: Option<(f64, usize, usize, usize)> = None;
        let mut accepted = None;
        for _ in 0..self.config.max_attempts {
            let gap = self.rng.gen_range(2..=upper);
            let c1 = self.rng.gen_range(0..=n - 1 - gap);
            let c2 = c1 + gap;
            let t = self.rng.gen_range(c1 + 1..=c2 - 1);
            let worst = [(c1, c2), (c1, t), (c2, t)]
                .iter()
                .map(|&(a, b)| rotation_angle_between(&frames[a].pose, &frames[b].pose))
                .fold(0.0, f64::max);
            if worst < theta {
                accepted = Some((c1, c2, t));
                break;
            }
            self.proposals_rejected += 1;
            if best.is_none_or(|b| worst < b.0) {
                best = Some((worst, c1, c2, t));
            }
        }
        let triple = match accepted {
            Some((c1, c2, t)) => Triple {
                c1,
                c2,
                t,
                theta,
                max_gap,
                fallback: false,
            },
            None => {
                let (worst, c1, c2, t) = best.unwrap();
                log::warn!(
                    "sampler: no triple under {:.2} deg after {} attempts; using best ({:.2} deg)",
                    theta.to_degrees(),
                    self.config.max_attempts,
                    worst.to_degrees()
                );
                Triple {
                    c1,
                    c2,
                    t,
                    theta,
                    max_gap,
                    fallback: true,
                }
            }
        };
        self.state.step += 1;
        Ok(triple)
    }
}

/// Rescale camera translations so the context baseline is exactly 1.
/// Returns the scaled cameras and the factor applied.
pub fn normalize_pair_scale(
    c1: &CameraView,
    c2: &CameraView,
    t: &CameraView,
) -> Result<([CameraView; 3], f64)> {
    let baseline = (c2.pose.translation - c1.pose.translation).norm();
    if !(baseline > 0.0 && baseline.is_finite()) {
        return Err(Error::DegenerateBaseline(baseline));
    }
    let s = 1.0 / baseline;
    let scaled = [c1, c2, t].map(|c| {
        let mut pose = c.pose;
        pose.translation *= s;
        c.with_pose(pose)
    });
    Ok((scaled, s))
}
