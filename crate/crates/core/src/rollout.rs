//! Return-conditioned rollouts in the maze and evaluation statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Trajectory, TrajectoryMeta};
use crate::env::{self, Action, Baselines, MazeConfig, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::trajmod::{DecisionModel, RtgTrajectory};

/// Something that picks the action for the last row of a context.
pub trait Policy: Sync {
    /// Most recent timesteps kept in context.
    fn window(&self) -> usize;

    /// `context`'s last row holds the current return-to-go and state; its
    /// action entry is a zero placeholder.
    fn act(&self, context: &RtgTrajectory, rng: &mut ChaCha8Rng) -> Result<Action>;

    fn id(&self) -> String;
}

/// Drives a trained [`DecisionModel`].
pub struct ModelPolicy<'a> {
    pub model: &'a DecisionModel,
    pub prompt: Vec<u32>,
    pub window: usize,
}

impl Policy for ModelPolicy<'_> {
    fn window(&self) -> usize {
        self.window
    }

    fn act(&self, context: &RtgTrajectory, _rng: &mut ChaCha8Rng) -> Result<Action> {
        let a = self.model.act(&self.prompt, context, self.window)?;
        if a.len() != ACTION_DIM {
            return Err(Error::Dimension(format!(
                "model emits {}-D actions, environment expects {ACTION_DIM}",
                a.len()
            )));
        }
        Ok([a[0], a[1]])
    }

    fn id(&self) -> String {
        "model".into()
    }
}

/// Uniform actions in `[-1, 1]^2`.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn window(&self) -> usize {
        1
    }

    fn act(&self, _context: &RtgTrajectory, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
    }

    fn id(&self) -> String {
        "random".into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub initial_rtg: f64,
    pub achieved_return: f64,
    pub steps: usize,
    pub success: bool,
    pub trajectory: Trajectory,
    /// Return-to-go fed to the policy at each step.
    pub context_rtgs: Vec<f64>,
    /// Largest number of timesteps ever held in context.
    pub max_context_steps: usize,
}

/// One episode. The return-to-go starts at `initial_rtg` and drops by each
/// reward received; it is never clamped.
pub fn rollout(policy: &dyn Policy, cfg: &MazeConfig, initial_rtg: f64, max_steps: usize, seed: u64) -> Result<RolloutResult> {
    if !initial_rtg.is_finite() {
        return Err(Error::config("evaluation.initial_rtg", "must be finite"));
    }
    if max_steps == 0 {
        return Err(Error::config("evaluation.max_steps", "must be at least 1"));
    }
    let window = policy.window().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = cfg.start_state(&mut rng);
    let mut rtg = initial_rtg;

    let mut states: Vec<f32> = Vec::new();
    let mut actions: Vec<f32> = Vec::new();
    let mut rewards: Vec<f32> = Vec::new();
    let mut rtgs: Vec<f32> = Vec::new();
    let mut traj = Trajectory {
        meta: TrajectoryMeta {
            policy: policy.id(),
            seed,
            episode: 0,
        },
        states: Vec::with_capacity(max_steps),
        actions: Vec::with_capacity(max_steps),
        rewards: Vec::with_capacity(max_steps),
    };
    let mut context_rtgs = Vec::with_capacity(max_steps);
    let mut max_context = 0;

    for t in 0..max_steps {
        states.extend(state.to_array());
        actions.extend([0.0; ACTION_DIM]);
        rewards.push(0.0);
        rtgs.push(rtg as f32);
        context_rtgs.push(rtg);
        let from = (t + 1).saturating_sub(window);
        let context = RtgTrajectory::new(
            from,
            STATE_DIM,
            ACTION_DIM,
            states[from * STATE_DIM..].to_vec(),
            actions[from * ACTION_DIM..].to_vec(),
            rewards[from..].to_vec(),
            rtgs[from..].to_vec(),
        )?;
        max_context = max_context.max(context.len());
        let mut action = policy.act(&context, &mut rng)?;
        for a in &mut action {
            *a = a.clamp(-1.0, 1.0);
        }
        let (next, r) = env::step(state, action, cfg)?;
        actions[t * ACTION_DIM..].copy_from_slice(&action);
        rewards[t] = r;
        traj.states.push(state.to_array());
        traj.actions.push(action);
        traj.rewards.push(r);
        rtg -= r as f64;
        state = next;
    }
    let achieved = traj.total_return();
    Ok(RolloutResult {
        initial_rtg,
        achieved_return: achieved,
        steps: traj.len(),
        success: achieved > 0.0,
        trajectory: traj,
        context_rtgs,
        max_context_steps: max_context,
    })
}

/// Mean and population standard deviation; `(0, 0)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub results: Vec<RolloutResult>,
    pub return_mean: f64,
    pub return_std: f64,
    pub score_mean: f64,
    pub score_std: f64,
}

impl EvalReport {
    pub fn count(&self) -> usize {
        self.results.len()
    }

    /// `Return μ±σ | Score μ±σ`.
    pub fn summary(&self) -> String {
        format!(
            "Return {:.2}±{:.2} | Score {:.2}±{:.2} | episodes {}",
            self.return_mean,
            self.return_std,
            self.score_mean,
            self.score_std,
            self.count()
        )
    }
}

/// Settings shared by every evaluation episode.
#[derive(Clone, Copy, Debug)]
pub struct EvalSetup<'a> {
    pub maze: &'a MazeConfig,
    pub baselines: &'a Baselines,
    pub max_steps: usize,
    pub seed: u64,
    pub exec: Exec,
}

/// `episodes` independent rollouts; episode `i` uses seed `seed + i`.
pub fn evaluate(policy: &dyn Policy, setup: &EvalSetup<'_>, initial_rtg: f64, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::config("evaluation.episodes", "must be at least 1"));
    }
    let results: Vec<RolloutResult> = par::map_indexed(setup.exec, episodes, |i| {
        rollout(
            policy,
            setup.maze,
            initial_rtg,
            setup.max_steps,
            setup.seed.wrapping_add(i as u64),
        )
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let returns: Vec<f64> = results.iter().map(|r| r.achieved_return).collect();
    let scores = returns
        .iter()
        .map(|&r| env::normalized_score(r, setup.baselines.r_random, setup.baselines.r_expert))
        .collect::<Result<Vec<_>>>()?;
    let (return_mean, return_std) = mean_std(&returns);
    let (score_mean, score_std) = mean_std(&scores);
    Ok(EvalReport {
        results,
        return_mean,
        return_std,
        score_mean,
        score_std,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub commanded: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub score_mean: f64,
    pub score_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Rank correlation of commanded vs achieved mean return.
    pub spearman: Option<f64>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("commanded_rtg,return_mean,return_std,score_mean,score_std\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4}\n",
                r.commanded, r.return_mean, r.return_std, r.score_mean, r.score_std
            ));
        }
        s
    }
}

pub fn rtg_sweep(policy: &dyn Policy, setup: &EvalSetup<'_>, rtgs: &[f64], episodes: usize) -> Result<SweepTable> {
    if rtgs.is_empty() {
        return Err(Error::Empty("rtg list"));
    }
    let mut rows = Vec::with_capacity(rtgs.len());
    for &c in rtgs {
        let rep = evaluate(policy, setup, c, episodes)?;
        rows.push(SweepRow {
            commanded: c,
            return_mean: rep.return_mean,
            return_std: rep.return_std,
            score_mean: rep.score_mean,
            score_std: rep.score_std,
        });
    }
    let achieved: Vec<f64> = rows.iter().map(|r| r.return_mean).collect();
    let spearman = spearman(rtgs, &achieved);
    Ok(SweepTable { rows, spearman })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `None` when either side is constant or the
/// lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// `from, from + step, ..` up to and including `to`.
pub fn rtg_range(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(to >= from) {
        return Err(Error::config("sweep", "need step > 0 and to >= from"));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| from + i as f64 * step).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Always pushes toward `+x`, never reaching the goal.
    struct Constant;
    impl Policy for Constant {
        fn window(&self) -> usize {
            3
        }
        fn act(&self, _c: &RtgTrajectory, _r: &mut ChaCha8Rng) -> Result<Action> {
            Ok([1.0, 0.0])
        }
        fn id(&self) -> String {
            "const".into()
        }
    }

    #[test]
    fn rtg_constant_without_reward() {
        let cfg = MazeConfig::default();
        let r = rollout(&Constant, &cfg, 120.0, 50, 0).unwrap();
        assert!(r.context_rtgs.iter().all(|&x| x == 120.0));
        assert_eq!(r.achieved_return, 0.0);
        assert!(!r.success);
        assert_eq!(r.max_context_steps, 3);
    }

    #[test]
    fn rtg_decrements_by_reward() {
        let cfg = MazeConfig {
            start: [-0.8, 0.8],
            start_jitter: 0.0,
            ..Default::default()
        };
        struct Still;
        impl Policy for Still {
            fn window(&self) -> usize {
                2
            }
            fn act(&self, _c: &RtgTrajectory, _r: &mut ChaCha8Rng) -> Result<Action> {
                Ok([0.0, 0.0])
            }
            fn id(&self) -> String {
                "still".into()
            }
        }
        let r = rollout(&Still, &cfg, 5.0, 4, 0).unwrap();
        assert_eq!(r.context_rtgs, vec![5.0, 4.0, 3.0, 2.0]);
        assert_eq!(r.achieved_return, 4.0);
    }

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[10.0, 30.0, 20.0, 20.0]), vec![1.0, 4.0, 2.5, 2.5]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 6.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), None);
    }

    #[test]
    fn rtg_range_counts() {
        assert_eq!(rtg_range(100.0, 300.0, 20.0).unwrap().len(), 11);
        assert_eq!(rtg_range(100.0, 100.0, 20.0).unwrap(), vec![100.0]);
        assert!(rtg_range(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
