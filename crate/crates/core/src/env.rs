//! Continuous U-maze with point-mass dynamics and scripted data policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Trajectory, TrajectoryMeta};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x_min: f32,
    pub x_max: f32,
    pub y_min: f32,
    pub y_max: f32,
}

impl Rect {
    /// Strict interior test; the boundary is free space.
    pub fn contains_strict(&self, x: f32, y: f32) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeConfig {
    pub walls: Vec<Rect>,
    pub start: [f32; 2],
    /// Half-width of the uniform start perturbation per axis.
    pub start_jitter: f32,
    pub goal: [f32; 2],
    pub goal_radius: f32,
    pub dt: f32,
    pub decay: f32,
    pub max_steps: usize,
    /// Expert path; the last waypoint should be the goal.
    pub waypoints: Vec<[f32; 2]>,
    pub kp: f32,
    pub kd: f32,
    /// Distance at which the expert moves on to the next waypoint.
    pub waypoint_radius: f32,
}

impl Default for MazeConfig {
    fn default() -> Self {
        Self {
            walls: vec![Rect {
                x_min: -1.0,
                x_max: 0.4,
                y_min: -0.1,
                y_max: 0.1,
            }],
            start: [-0.8, -0.8],
            start_jitter: 0.05,
            goal: [-0.8, 0.8],
            goal_radius: 0.1,
            dt: 0.1,
            decay: 0.95,
            max_steps: 300,
            waypoints: vec![[0.7, -0.7], [0.7, 0.7], [-0.8, 0.8]],
            kp: 3.0,
            kd: 1.0,
            waypoint_radius: 0.15,
        }
    }
}

fn in_unit(v: f32) -> bool {
    (-1.0..=1.0).contains(&v)
}

impl MazeConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.walls.iter().enumerate() {
            let ok = [w.x_min, w.x_max, w.y_min, w.y_max].iter().all(|&v| in_unit(v))
                && w.x_min < w.x_max
                && w.y_min < w.y_max;
            if !ok {
                return Err(Error::config(
                    format!("maze.walls[{i}]"),
                    "must be a nonempty rectangle inside [-1, 1]^2",
                ));
            }
        }
        if !(self.goal_radius > 0.0) {
            return Err(Error::config("maze.goal_radius", "must be positive"));
        }
        if !self.goal.iter().all(|&v| in_unit(v)) || self.blocked(self.goal[0], self.goal[1]) {
            return Err(Error::config("maze.goal", "must lie in free space inside [-1, 1]^2"));
        }
        if !self.start.iter().all(|&v| in_unit(v)) || self.blocked(self.start[0], self.start[1]) {
            return Err(Error::config("maze.start", "must lie in free space inside [-1, 1]^2"));
        }
        if !(self.start_jitter >= 0.0) {
            return Err(Error::config("maze.start_jitter", "must be nonnegative"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("maze.dt", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::config("maze.decay", "must lie in [0, 1]"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("maze.max_steps", "must be positive"));
        }
        if self.waypoints.is_empty() {
            return Err(Error::config("maze.waypoints", "must list at least the goal"));
        }
        Ok(())
    }

    /// Outside the arena or strictly inside a wall.
    pub fn blocked(&self, x: f32, y: f32) -> bool {
        !in_unit(x) || !in_unit(y) || self.walls.iter().any(|w| w.contains_strict(x, y))
    }

    pub fn in_goal(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.goal[0], y - self.goal[1]);
        (dx * dx + dy * dy).sqrt() <= self.goal_radius
    }

    /// Start position perturbed uniformly by `start_jitter`, at rest.
    pub fn start_state(&self, rng: &mut impl Rng) -> State {
        let j = self.start_jitter;
        let mut pos = self.start;
        if j > 0.0 {
            for p in &mut pos {
                *p = (*p + rng.random_range(-j..=j)).clamp(-1.0, 1.0);
            }
        }
        if self.blocked(pos[0], pos[1]) {
            pos = self.start;
        }
        State { pos, vel: [0.0; 2] }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::config::hash_json(self)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct State {
    pub pos: [f32; 2],
    pub vel: [f32; 2],
}

impl State {
    pub fn to_array(self) -> [f32; STATE_DIM] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn from_array(a: [f32; STATE_DIM]) -> Self {
        Self {
            pos: [a[0], a[1]],
            vel: [a[2], a[3]],
        }
    }
}

pub type Action = [f32; ACTION_DIM];

/// One transition. Velocity integrates the action and is clipped; each
/// position axis moves separately and a blocked move is cancelled along
/// with that velocity component.
pub fn step(state: State, action: Action, cfg: &MazeConfig) -> Result<(State, f32)> {
    if !state.to_array().iter().all(|&v| in_unit(v)) {
        return Err(Error::Env(format!("state {:?} outside [-1, 1]", state.to_array())));
    }
    if !action.iter().all(|&v| in_unit(v)) {
        return Err(Error::Env(format!("action {action:?} outside [-1, 1]")));
    }
    let mut vel = [0.0f32; 2];
    for k in 0..2 {
        vel[k] = (cfg.decay * state.vel[k] + cfg.dt * action[k]).clamp(-1.0, 1.0);
    }
    let mut pos = state.pos;
    for k in 0..2 {
        let mut next = pos;
        next[k] = pos[k] + cfg.dt * vel[k];
        if cfg.blocked(next[0], next[1]) {
            vel[k] = 0.0;
        } else {
            pos = next;
        }
    }
    let reward = if cfg.in_goal(pos[0], pos[1]) { 1.0 } else { 0.0 };
    Ok((State { pos, vel }, reward))
}

/// Waypoint-following PD controller.
#[derive(Clone, Debug, Default)]
pub struct Expert {
    next: usize,
}

impl Expert {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn waypoint(&self) -> usize {
        self.next
    }

    pub fn action(&mut self, state: &State, cfg: &MazeConfig) -> Action {
        let last = cfg.waypoints.len() - 1;
        while self.next < last {
            let wp = cfg.waypoints[self.next];
            let d = ((wp[0] - state.pos[0]).powi(2) + (wp[1] - state.pos[1]).powi(2)).sqrt();
            if d > cfg.waypoint_radius {
                break;
            }
            self.next += 1;
        }
        expert_action(state, cfg, cfg.waypoints[self.next])
    }
}

/// PD control toward `waypoint`.
pub fn expert_action(state: &State, cfg: &MazeConfig, waypoint: [f32; 2]) -> Action {
    let mut a = [0.0f32; 2];
    for k in 0..2 {
        a[k] = (cfg.kp * (waypoint[k] - state.pos[k]) - cfg.kd * state.vel[k]).clamp(-1.0, 1.0);
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CollectPolicy {
    Expert,
    /// Expert plus `N(0, sigma^2)` per component, clipped.
    Noisy { sigma: f32 },
    /// Expert scaled by a per-episode gain drawn from `[min_gain, 1]`,
    /// plus `N(0, sigma^2)` noise: slower episodes earn less.
    Graded { sigma: f32, min_gain: f32 },
    Random,
}

impl CollectPolicy {
    pub fn id(&self) -> String {
        match self {
            CollectPolicy::Expert => "expert".into(),
            CollectPolicy::Noisy { sigma } => format!("noisy({sigma})"),
            CollectPolicy::Graded { sigma, min_gain } => format!("graded({sigma},{min_gain})"),
            CollectPolicy::Random => "random".into(),
        }
    }
}

/// RNG of episode `episode` under `seed`: one ChaCha stream per episode.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Runs one fixed-length episode.
pub fn run_episode(cfg: &MazeConfig, policy: CollectPolicy, seed: u64, episode: u64) -> Result<Trajectory> {
    let mut rng = episode_rng(seed, episode);
    let mut state = cfg.start_state(&mut rng);
    let mut expert = Expert::new();
    let gain = match policy {
        CollectPolicy::Graded { min_gain, .. } => {
            if !(0.0..=1.0).contains(&min_gain) {
                return Err(Error::config("collection.min_gain", "must lie in [0, 1]"));
            }
            rng.random_range(min_gain..=1.0)
        }
        _ => 1.0,
    };
    let noise = match policy {
        CollectPolicy::Noisy { sigma } | CollectPolicy::Graded { sigma, .. } if sigma > 0.0 => {
            Some(Normal::new(0.0f32, sigma).map_err(|e| Error::config("collection.sigma", e.to_string()))?)
        }
        _ => None,
    };
    let n = cfg.max_steps;
    let mut traj = Trajectory {
        meta: TrajectoryMeta {
            policy: policy.id(),
            seed,
            episode,
        },
        states: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let action = match policy {
            CollectPolicy::Random => [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
            CollectPolicy::Expert | CollectPolicy::Noisy { .. } | CollectPolicy::Graded { .. } => {
                let mut a = expert.action(&state, cfg);
                for v in &mut a {
                    *v *= gain;
                }
                if let Some(dist) = &noise {
                    for v in &mut a {
                        *v = (*v + dist.sample(&mut rng)).clamp(-1.0, 1.0);
                    }
                }
                a
            }
        };
        let (next, r) = step(state, action, cfg)?;
        traj.states.push(state.to_array());
        traj.actions.push(action);
        traj.rewards.push(r);
        state = next;
    }
    Ok(traj)
}

/// `episodes` trajectories; episode `i` uses stream `i` of `seed`.
pub fn collect(cfg: &MazeConfig, policy: CollectPolicy, episodes: usize, seed: u64, exec: Exec) -> Result<Vec<Trajectory>> {
    if episodes == 0 {
        return Err(Error::Empty("episode count"));
    }
    cfg.validate()?;
    par::map_indexed(exec, episodes, |i| run_episode(cfg, policy, seed, i as u64))
        .into_iter()
        .collect()
}

/// `100·(ret − r_random)/(r_expert − r_random)`.
pub fn normalized_score(ret: f64, r_random: f64, r_expert: f64) -> Result<f64> {
    if !(r_expert > r_random) {
        return Err(Error::config(
            "evaluation.r_expert",
            format!("must exceed r_random ({r_expert} <= {r_random})"),
        ));
    }
    Ok(100.0 * (ret - r_random) / (r_expert - r_random))
}

/// Monte Carlo reference returns for score normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baselines {
    pub r_random: f64,
    pub r_random_std: f64,
    pub r_expert: f64,
    pub r_expert_std: f64,
}

/// Mean and population std of episode returns.
pub fn return_stats(trajs: &[Trajectory]) -> (f64, f64) {
    let rets: Vec<f64> = trajs.iter().map(Trajectory::total_return).collect();
    crate::rollout::mean_std(&rets)
}

pub fn baselines(cfg: &MazeConfig, episodes: usize, seed: u64, exec: Exec) -> Result<Baselines> {
    let random = collect(cfg, CollectPolicy::Random, episodes, seed, exec)?;
    let expert = collect(cfg, CollectPolicy::Expert, episodes, seed, exec)?;
    let (r_random, r_random_std) = return_stats(&random);
    let (r_expert, r_expert_std) = return_stats(&expert);
    Ok(Baselines {
        r_random,
        r_random_std,
        r_expert,
        r_expert_std,
    })
}
