//! Offline dataset pipeline: returns-to-go, episode filtering, window
//! sampling, per-step weights and distribution statistics.

mod io;

pub use io::{
    read_manifest, read_trajectories, read_windows, write_trajectories, write_windows, Manifest, WINDOW_MAGIC,
    WINDOW_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::trajmod::{LossMode, RtgTrajectory};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub policy: String,
    pub seed: u64,
    pub episode: u64,
}

/// One episode, stored as parallel arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub states: Vec<[f32; STATE_DIM]>,
    pub actions: Vec<[f32; ACTION_DIM]>,
    pub rewards: Vec<f32>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    /// Array lengths agree and every state/action value is in `[-1, 1]`.
    pub fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        if self.states.len() != n || self.actions.len() != n {
            return Err(Error::Corrupt(format!(
                "episode {}: {} states, {} actions, {n} rewards",
                self.meta.episode,
                self.states.len(),
                self.actions.len()
            )));
        }
        let in_range = |v: &f32| (-1.0..=1.0).contains(v);
        if !self.states.iter().flatten().all(in_range) || !self.actions.iter().flatten().all(in_range) {
            return Err(Error::Corrupt(format!(
                "episode {}: state or action outside [-1, 1]",
                self.meta.episode
            )));
        }
        Ok(())
    }
}

/// Suffix sums of rewards, computed as `rtg[t] = rtg[t+1] + r[t]`.
pub fn compute_rtg(traj: &Trajectory) -> Result<RtgTrajectory> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let n = traj.len();
    let mut rtgs = vec![0.0f32; n];
    let mut acc = 0.0f32;
    for t in (0..n).rev() {
        acc += traj.rewards[t];
        rtgs[t] = acc;
    }
    RtgTrajectory::new(
        0,
        STATE_DIM,
        ACTION_DIM,
        traj.states.iter().flatten().copied().collect(),
        traj.actions.iter().flatten().copied().collect(),
        traj.rewards.clone(),
        rtgs,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
}

/// Keeps episodes whose return is at least `epsilon`.
pub fn filter_trajectories(dataset: &[Trajectory], epsilon: f64) -> (Vec<Trajectory>, FilterReport) {
    let kept: Vec<Trajectory> = dataset
        .iter()
        .filter(|t| t.total_return() >= epsilon)
        .cloned()
        .collect();
    let report = FilterReport {
        kept: kept.len(),
        dropped: dataset.len() - kept.len(),
    };
    (kept, report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdTarget {
    Reward,
    #[default]
    Rtg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    /// Episodes with return below this are dropped.
    pub epsilon: f64,
    /// Weight of below-threshold steps under `v2` and `v3`.
    pub beta: f32,
    pub step_threshold: f32,
    pub step_threshold_target: ThresholdTarget,
    pub mode: LossMode,
    pub window: usize,
    pub stride: usize,
    /// Uniformly subsample to at most this many windows.
    pub max_windows: Option<usize>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            beta: 0.5,
            step_threshold: 0.5,
            step_threshold_target: ThresholdTarget::Rtg,
            mode: LossMode::V3,
            window: 20,
            stride: 1,
            max_windows: None,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::config("curation.epsilon", "must be nonnegative"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("curation.beta", "must lie in (0, 1]"));
        }
        if !self.step_threshold.is_finite() {
            return Err(Error::config("curation.step_threshold", "must be finite"));
        }
        if self.window == 0 {
            return Err(Error::config("curation.window", "must be at least 1"));
        }
        if self.window > u16::MAX as usize {
            return Err(Error::config("curation.window", "must fit the window file format (<= 65535)"));
        }
        if self.stride == 0 {
            return Err(Error::config("curation.stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Curation disabled: keep every episode, plain loss.
    pub fn uncurated(&self) -> Self {
        Self {
            epsilon: 0.0,
            mode: LossMode::None,
            ..self.clone()
        }
    }
}

/// A training window cut from an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    /// Index of the source episode in its dataset.
    pub episode: u32,
    pub traj: RtgTrajectory,
    pub weights: Vec<f32>,
}

impl TrajectoryWindow {
    pub fn start(&self) -> usize {
        self.traj.start
    }

    pub fn len(&self) -> usize {
        self.traj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj.is_empty()
    }
}

/// Per-step loss weights of `traj` under `cfg`.
pub fn assign_step_weights(traj: &RtgTrajectory, cfg: &CurationConfig) -> Vec<f32> {
    let values = match cfg.step_threshold_target {
        ThresholdTarget::Reward => &traj.rewards,
        ThresholdTarget::Rtg => &traj.rtgs,
    };
    values
        .iter()
        .map(|&v| {
            let below = v < cfg.step_threshold;
            match cfg.mode {
                LossMode::None => 1.0,
                LossMode::V1 => {
                    if below {
                        0.0
                    } else {
                        1.0
                    }
                }
                LossMode::V2 | LossMode::V3 => {
                    if below {
                        cfg.beta
                    } else {
                        1.0
                    }
                }
            }
        })
        .collect()
}

/// Windows of length `cfg.window` starting at `0, stride, 2·stride, ..`
/// in every episode. Returns-to-go come from the whole episode.
pub fn sample_windows(dataset: &[Trajectory], cfg: &CurationConfig, exec: Exec) -> Result<Vec<TrajectoryWindow>> {
    cfg.validate()?;
    if let Some(t) = dataset.iter().find(|t| t.len() < cfg.window) {
        return Err(Error::Window(format!(
            "window {} exceeds episode length {}",
            cfg.window,
            t.len()
        )));
    }
    if dataset.len() > u32::MAX as usize {
        return Err(Error::Window("too many episodes for 32-bit ids".into()));
    }
    let per_episode = par::map_indexed(exec, dataset.len(), |i| -> Result<Vec<TrajectoryWindow>> {
        let full = compute_rtg(&dataset[i])?;
        let last_start = full.len() - cfg.window;
        if last_start > u16::MAX as usize {
            return Err(Error::Window("window start exceeds 65535".into()));
        }
        Ok((0..=last_start)
            .step_by(cfg.stride)
            .map(|s| {
                let traj = full.slice(s, s + cfg.window);
                let weights = assign_step_weights(&traj, cfg);
                TrajectoryWindow {
                    episode: i as u32,
                    traj,
                    weights,
                }
            })
            .collect())
    });
    let mut out = Vec::new();
    for w in per_episode {
        out.extend(w?);
    }
    Ok(out)
}

/// Uniform sample of `target` windows without replacement, in source order.
pub fn subsample(windows: Vec<TrajectoryWindow>, target: usize, seed: u64) -> Vec<TrajectoryWindow> {
    if target >= windows.len() {
        return windows;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, windows.len(), target).into_vec();
    idx.sort_unstable();
    let mut keep = vec![false; windows.len()];
    for i in idx {
        keep[i] = true;
    }
    windows
        .into_iter()
        .zip(keep)
        .filter_map(|(w, k)| k.then_some(w))
        .collect()
}

/// Filter, window and optionally subsample.
pub fn curate(dataset: &[Trajectory], cfg: &CurationConfig, seed: u64, exec: Exec) -> Result<(Vec<TrajectoryWindow>, FilterReport)> {
    let (kept, report) = filter_trajectories(dataset, cfg.epsilon);
    let windows = sample_windows(&kept, cfg, exec)?;
    let windows = match cfg.max_windows {
        Some(n) => subsample(windows, n, seed),
        None => windows,
    };
    Ok((windows, report))
}

/// Fixed-width histogram whose bins cover `[min, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], width: f64) -> Self {
        assert!(width > 0.0, "bin width must be positive");
        if values.is_empty() {
            return Self {
                lo: 0.0,
                width,
                counts: Vec::new(),
            };
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = (min / width).floor() * width;
        let bin = |v: f64| ((v - lo) / width).floor() as usize;
        let mut counts = vec![0; bin(max) + 1];
        for &v in values {
            counts[bin(v)] += 1;
        }
        Self { lo, width, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Count in bins lying entirely below `x`.
    pub fn mass_below(&self, x: f64) -> usize {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| self.lo + (*i as f64 + 1.0) * self.width <= x)
            .map(|(_, c)| c)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo + i as f64 * self.width;
            s.push_str(&format!("{lo},{},{c}\n", lo + self.width));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub episodes: usize,
    pub windows: usize,
    pub episode_returns: Histogram,
    pub initial_rtgs: Histogram,
    /// Fraction of episodes with return below epsilon.
    pub below_epsilon: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub initial_rtg_mean: f64,
    pub initial_rtg_std: f64,
}

pub fn dataset_stats(dataset: &[Trajectory], windows: &[TrajectoryWindow], epsilon: f64, bin_width: f64) -> DatasetStats {
    let returns: Vec<f64> = dataset.iter().map(Trajectory::total_return).collect();
    let initial: Vec<f64> = windows.iter().map(|w| w.traj.rtgs[0] as f64).collect();
    let below = returns.iter().filter(|&&r| r < epsilon).count();
    let (return_mean, return_std) = crate::rollout::mean_std(&returns);
    let (initial_rtg_mean, initial_rtg_std) = crate::rollout::mean_std(&initial);
    DatasetStats {
        episodes: dataset.len(),
        windows: windows.len(),
        episode_returns: Histogram::new(&returns, bin_width),
        initial_rtgs: Histogram::new(&initial, bin_width),
        below_epsilon: if returns.is_empty() {
            0.0
        } else {
            below as f64 / returns.len() as f64
        },
        return_mean,
        return_std,
        initial_rtg_mean,
        initial_rtg_std,
    }
}
