//! Supervised training over trajectory windows.

mod ablation;
mod checkpoint;

pub use ablation::{ablation_run, scale_sweep, AblationBase, AblationRow, AblationSpec, ScaleSweep, ABLATION_CSV_HEADER};
pub use checkpoint::{
    checkpoint_bytes, checkpoint_digest, config_mismatch, load_checkpoint, load_tensors, parse_checkpoint, read_checkpoint,
    save_checkpoint, save_params, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::vocab::{COMPACT_PROMPT, MAZE_PROMPT};
use crate::data::TrajectoryWindow;
use crate::env::{Baselines, MazeConfig};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rollout::{evaluate, EvalReport, EvalSetup, ModelPolicy};
use crate::tensor::{batch_gradients, clip_grad_norm, AdamW, AdamWConfig, ParamStore};
use crate::trajmod::{DecisionModel, LossMode, RtgTrajectory};

/// Task description placed around the trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// One-line description, cheap at desk scale.
    #[default]
    Compact,
    /// The full maze task description.
    Full,
}

impl PromptKind {
    pub fn text(self) -> &'static str {
        match self {
            PromptKind::Compact => COMPACT_PROMPT,
            PromptKind::Full => MAZE_PROMPT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub epochs: usize,
    /// Fixed optimizer step budget; overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub warmup_steps: usize,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_rtg: f64,
    /// Loss normalisation; defaults to the curation mode.
    pub mode: Option<LossMode>,
    /// Checkpoint to start from instead of random initialisation.
    pub init: Option<PathBuf>,
    pub grad_clip: f32,
    pub weight_decay: f32,
    pub prompt: PromptKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            epochs: 1,
            max_steps: Some(2000),
            warmup_steps: 100,
            eval_every: 200,
            eval_episodes: 10,
            eval_rtg: 250.0,
            mode: None,
            init: None,
            grad_clip: 1.0,
            weight_decay: 0.01,
            prompt: PromptKind::Compact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("training.lr", "must be positive"));
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return Err(Error::config("training.epochs", "must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("training.grad_clip", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("training.weight_decay", "must be nonnegative"));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(Error::config("training.eval_episodes", "must be at least 1 when evaluating"));
        }
        if !self.eval_rtg.is_finite() {
            return Err(Error::config("training.eval_rtg", "must be finite"));
        }
        Ok(())
    }

    pub fn total_steps(&self, windows: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * windows.div_ceil(self.batch_size))
    }
}

/// Linear warmup to `peak`, then cosine decay reaching 0 after `total` steps.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f32) -> f32 {
    if step < warmup {
        return peak * (step + 1) as f32 / warmup as f32;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    (peak as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}

/// One training example: a window padded to the batch window size.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub traj: RtgTrajectory,
    pub weights: Vec<f32>,
}

/// Pads each window to `window` steps with zero-weight rows after its
/// real steps. The causal mask keeps padding invisible to real steps.
pub fn make_batch(windows: &[&TrajectoryWindow], window: usize) -> Result<Vec<BatchItem>> {
    if windows.is_empty() {
        return Err(Error::Empty("batch"));
    }
    windows
        .iter()
        .map(|w| {
            let n = w.len();
            if n > window {
                return Err(Error::Window(format!("window of {n} steps exceeds W = {window}")));
            }
            let mut t = w.traj.clone();
            let pad = window - n;
            t.states.extend(std::iter::repeat(0.0).take(pad * t.state_dim));
            t.actions.extend(std::iter::repeat(0.0).take(pad * t.action_dim));
            t.rewards.extend(std::iter::repeat(0.0).take(pad));
            t.rtgs.extend(std::iter::repeat(0.0).take(pad));
            let mut weights = w.weights.clone();
            weights.extend(std::iter::repeat(0.0).take(pad));
            Ok(BatchItem { traj: t, weights })
        })
        .collect()
}

/// Mean window loss and its gradient. Windows whose weights are all zero
/// are skipped.
pub fn batch_step_grads(
    model: &DecisionModel,
    prompt: &[u32],
    items: &[BatchItem],
    mode: LossMode,
    window: usize,
    exec: Exec,
) -> Result<Option<(f64, crate::tensor::GradStore)>> {
    let bg = batch_gradients(exec, &model.params, items, |g, item| {
        match model.window_loss(g, prompt, &item.traj, &item.weights, mode, window) {
            Ok(l) => Ok(Some(l)),
            Err(Error::DegenerateWindow) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    if bg.count == 0 {
        return Ok(None);
    }
    let mut grads = bg.grads;
    grads.scale(1.0 / bg.count as f32);
    Ok(Some((bg.loss_sum / bg.count as f64, grads)))
}

/// Mean loss over `items` without gradients.
pub fn batch_loss(model: &DecisionModel, prompt: &[u32], items: &[BatchItem], mode: LossMode, window: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for item in items {
        let mut g = crate::tensor::Graph::<f32>::no_grad(&model.params);
        match model.window_loss(&mut g, prompt, &item.traj, &item.weights, mode, window) {
            Ok(l) => {
                total += g.value(l).data()[0] as f64;
                n += 1;
            }
            Err(Error::DegenerateWindow) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(Error::DegenerateWindow);
    }
    Ok(total / n as f64)
}

/// Environment evaluation performed during training.
#[derive(Clone, Debug)]
pub struct TrainEval {
    pub maze: MazeConfig,
    pub baselines: Baselines,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub config: TrainConfig,
    pub mode: LossMode,
    pub window: usize,
    pub seed: u64,
    pub exec: Exec,
    pub eval: Option<TrainEval>,
    /// Directory receiving `metrics.csv` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f32,
    pub eval: Option<(f64, f64, f64)>,
}

pub const METRICS_HEADER: &str = "step,loss,lr,eval_return_mean,eval_return_std,eval_score";

pub fn metrics_csv(rows: &[MetricsRow], config_hash: &str, seed: u64) -> String {
    let mut s = format!("# config_hash={config_hash} seed={seed}\n{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.8},{:.8e}", r.step, r.loss, r.lr));
        match r.eval {
            Some((m, sd, sc)) => s.push_str(&format!(",{m:.4},{sd:.4},{sc:.4}\n")),
            None => s.push_str(",,,\n"),
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<(usize, EvalReport)>,
    pub best_return: Option<f64>,
    pub best_score: Option<f64>,
    pub best_step: Option<usize>,
    /// Parameters at the best evaluation (final parameters without evaluation).
    pub best_params: ParamStore,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.loss)
    }
}

/// Trains `model` in place. Batches are drawn from a seeded shuffle that
/// is redrawn every epoch.
pub fn train(model: &mut DecisionModel, windows: &[TrajectoryWindow], opts: &TrainOptions) -> Result<TrainReport> {
    let cfg = &opts.config;
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Empty("training windows"));
    }
    let prompt = model.vocab.tokenize(cfg.prompt.text());
    let total = cfg.total_steps(windows.len());
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut metrics = Vec::with_capacity(total);
    let mut evals = Vec::new();
    let mut best: Option<(f64, f64, usize)> = None;
    let mut best_params = model.params.clone();

    for step in 0..total {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(windows.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&windows[order[cursor]]);
            cursor += 1;
        }
        let items = make_batch(&picked, opts.window)?;
        let lr = lr_at(step, total, cfg.warmup_steps, cfg.lr);
        let loss = match batch_step_grads(model, &prompt, &items, opts.mode, opts.window, opts.exec)? {
            Some((loss, mut grads)) => {
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Diverged { step: step as u64 });
                }
                clip_grad_norm(&mut grads, cfg.grad_clip);
                opt.step(&mut model.params, &grads, lr)?;
                loss
            }
            None => f64::NAN,
        };
        let mut row = MetricsRow {
            step,
            loss,
            lr,
            eval: None,
        };
        let due = cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == total);
        if let (true, Some(ev)) = (due, &opts.eval) {
            let policy = ModelPolicy {
                model,
                prompt: prompt.clone(),
                window: opts.window,
            };
            let setup = EvalSetup {
                maze: &ev.maze,
                baselines: &ev.baselines,
                max_steps: ev.maze.max_steps,
                seed: ev.seed,
                exec: opts.exec,
            };
            let rep = evaluate(&policy, &setup, cfg.eval_rtg, cfg.eval_episodes)?;
            row.eval = Some((rep.return_mean, rep.return_std, rep.score_mean));
            if best.map_or(true, |(b, _, _)| rep.return_mean > b) {
                best = Some((rep.return_mean, rep.score_mean, step + 1));
                best_params = model.params.clone();
            }
            evals.push((step + 1, rep));
        }
        metrics.push(row);
    }
    if opts.eval.is_none() || cfg.eval_every == 0 {
        best_params = model.params.clone();
    }
    let report = TrainReport {
        steps: total,
        metrics,
        evals,
        best_return: best.map(|b| b.0),
        best_score: best.map(|b| b.1),
        best_step: best.map(|b| b.2),
        best_params,
    };
    if let Some(dir) = &opts.out_dir {
        write_outputs(dir, model, &report, opts)?;
    }
    Ok(report)
}

fn write_outputs(dir: &Path, model: &DecisionModel, report: &TrainReport, opts: &TrainOptions) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = metrics_csv(&report.metrics, &opts.config_hash, opts.seed);
    let path = dir.join("metrics.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let meta = CheckpointMeta {
        global_step: report.best_step.unwrap_or(report.steps) as u64,
        config_hash: opts.config_hash.clone(),
        seed: opts.seed,
    };
    save_params(&dir.join("best.ckpt"), &model.config, &report.best_params, &meta)?;
    let last = CheckpointMeta {
        global_step: report.steps as u64,
        ..meta
    };
    save_params(&dir.join("last.ckpt"), &model.config, &model.params, &last)
}
