//! Trajectories as an input modality.
//!
//! Each timestep contributes three embeddings, (return-to-go, state,
//! action), produced by bias-free linear projections plus a learned timestep
//! embedding shared by the three. The interleaved stream is spliced into the
//! prompt between `<|traj_begin|>` and `<|traj_end|>`, and actions are read
//! out from the hidden state at each state token through an affine head
//! squashed by `tanh`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{normal_tensor, Backbone, BackboneOutput, ModelConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Text,
    Rtg,
    State,
    Action,
}

/// A slice of an episode annotated with returns-to-go.
///
/// Rows are stored flat: `states[t * state_dim..(t + 1) * state_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RtgTrajectory {
    /// Global timestep of the first row within the source episode.
    pub start: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub rtgs: Vec<f32>,
}

impl RtgTrajectory {
    pub fn new(
        start: usize,
        state_dim: usize,
        action_dim: usize,
        states: Vec<f32>,
        actions: Vec<f32>,
        rewards: Vec<f32>,
        rtgs: Vec<f32>,
    ) -> Result<Self> {
        let t = rewards.len();
        if states.len() != t * state_dim || actions.len() != t * action_dim || rtgs.len() != t {
            return Err(Error::Dimension(format!(
                "trajectory arrays disagree: {} rewards, {} rtgs, {} state values (dim {state_dim}), {} action values (dim {action_dim})",
                t,
                rtgs.len(),
                states.len(),
                actions.len()
            )));
        }
        Ok(Self {
            start,
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            rtgs,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    /// Rows `from..to`, keeping the global timestep offset.
    pub fn slice(&self, from: usize, to: usize) -> Self {
        Self {
            start: self.start + from,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: self.states[from * self.state_dim..to * self.state_dim].to_vec(),
            actions: self.actions[from * self.action_dim..to * self.action_dim].to_vec(),
            rewards: self.rewards[from..to].to_vec(),
            rtgs: self.rtgs[from..to].to_vec(),
        }
    }

    /// The last `w` rows (or all of them).
    pub fn tail(&self, w: usize) -> Self {
        let n = self.len();
        self.slice(n.saturating_sub(w), n)
    }
}

/// Layout of a prompt with trajectory rows spliced in.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    /// `[len x d_model]` on the graph that built it.
    pub embeddings: Var,
    pub kinds: Vec<TokenKind>,
    /// Global timestep of each trajectory position, `None` for text.
    pub timesteps: Vec<Option<usize>>,
    /// Positions of the state tokens; the hidden state there predicts `a_t`.
    pub action_target_positions: Vec<usize>,
    /// Row-major `[T x action_dim]`.
    pub action_targets: Vec<f32>,
    pub step_weights: Vec<f32>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Range of trajectory positions.
    pub fn trajectory_span(&self) -> std::ops::Range<usize> {
        let first = self.kinds.iter().position(|k| *k != TokenKind::Text).unwrap_or(0);
        let n = self.kinds.iter().filter(|k| **k != TokenKind::Text).count();
        first..first + n
    }
}

/// Index of the begin marker in `prompt`. The prompt must hold exactly one
/// begin marker immediately followed by exactly one end marker.
pub fn splice_point(prompt: &[u32], vocab: &Vocabulary) -> Result<usize> {
    let (b, e) = (vocab.traj_begin_id(), vocab.traj_end_id());
    let begins: Vec<usize> = prompt.iter().enumerate().filter(|(_, &t)| t == b).map(|(i, _)| i).collect();
    let ends: Vec<usize> = prompt.iter().enumerate().filter(|(_, &t)| t == e).map(|(i, _)| i).collect();
    match (begins.as_slice(), ends.as_slice()) {
        ([bi], [ei]) if ei > bi => {
            if *ei != bi + 1 {
                return Err(Error::Placeholder(format!(
                    "{} token(s) between <|traj_begin|> and <|traj_end|>",
                    ei - bi - 1
                )));
            }
            Ok(*bi)
        }
        ([_], [_]) => Err(Error::Placeholder("<|traj_end|> precedes <|traj_begin|>".into())),
        _ => Err(Error::Placeholder(format!(
            "expected one placeholder pair, found {} begin and {} end markers",
            begins.len(),
            ends.len()
        ))),
    }
}

/// Token kinds of a fused sequence with `t` steps spliced after `begin`.
pub fn fused_kinds(prompt_len: usize, begin: usize, t: usize) -> Vec<TokenKind> {
    let mut kinds = vec![TokenKind::Text; begin + 1];
    for _ in 0..t {
        kinds.extend([TokenKind::Rtg, TokenKind::State, TokenKind::Action]);
    }
    kinds.extend(std::iter::repeat(TokenKind::Text).take(prompt_len - begin - 1));
    kinds
}

/// Whether trajectory positions form one contiguous run of
/// `(Rtg, State, Action)` triplets.
pub fn kinds_are_regular(kinds: &[TokenKind]) -> bool {
    let span: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k != TokenKind::Text)
        .map(|(i, _)| i)
        .collect();
    if span.is_empty() {
        return true;
    }
    let contiguous = span.windows(2).all(|w| w[1] == w[0] + 1);
    let pattern = [TokenKind::Rtg, TokenKind::State, TokenKind::Action];
    contiguous && span.len() % 3 == 0 && span.iter().enumerate().all(|(j, &i)| kinds[i] == pattern[j % 3])
}

/// Projections of (rtg, state, action) into the model width.
#[derive(Clone, Debug)]
pub struct TrajEncoder {
    config: ModelConfig,
    w_rtg: ParamId,
    w_state: ParamId,
    w_action: ParamId,
    timestep: ParamId,
}

impl TrajEncoder {
    /// Registers parameters under `traj.*`.
    pub fn new(config: &ModelConfig, params: &mut ParamStore, rng: &mut impl rand::Rng) -> Self {
        let d = config.d_model;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            config: config.clone(),
            w_rtg: params.add("traj.rtg.w", normal_tensor(rng, &[1, d], fan(1))),
            w_state: params.add(
                "traj.state.w",
                normal_tensor(rng, &[config.state_dim, d], fan(config.state_dim)),
            ),
            w_action: params.add(
                "traj.action.w",
                normal_tensor(rng, &[config.action_dim, d], fan(config.action_dim)),
            ),
            timestep: params.add("traj.timestep", normal_tensor(rng, &[config.max_timestep, d], 0.02)),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_rtg, self.w_state, self.w_action, self.timestep]
    }

    /// `[3T x d_model]` rows ordered `(R̂_t, s_t, a_t)` for each step.
    pub fn encode<T: Element>(&self, g: &mut Graph<'_, T>, traj: &RtgTrajectory, window: usize) -> Result<Var> {
        let n = traj.len();
        if n == 0 {
            return Err(Error::Window("trajectory window has no steps".into()));
        }
        if n > window {
            return Err(Error::Window(format!("{n} steps exceed window size {window}")));
        }
        if traj.state_dim != self.config.state_dim || traj.action_dim != self.config.action_dim {
            return Err(Error::Dimension(format!(
                "trajectory dims (state {}, action {}) do not match model (state {}, action {})",
                traj.state_dim, traj.action_dim, self.config.state_dim, self.config.action_dim
            )));
        }
        let cast = |v: &[f32]| v.iter().map(|&x| T::from_f64(x as f64)).collect::<Vec<T>>();
        let scale = self.config.rtg_scale as f64;
        let rtg: Vec<T> = traj.rtgs.iter().map(|&r| T::from_f64(r as f64 / scale)).collect();
        let rtg = g.constant(Tensor::new([n, 1], rtg)?);
        let states = g.constant(Tensor::new([n, traj.state_dim], cast(&traj.states))?);
        let actions = g.constant(Tensor::new([n, traj.action_dim], cast(&traj.actions))?);

        let w = g.param(self.w_rtg);
        let r = g.matmul(rtg, w)?;
        let w = g.param(self.w_state);
        let s = g.matmul(states, w)?;
        let w = g.param(self.w_action);
        let a = g.matmul(actions, w)?;

        let cap = self.config.max_timestep - 1;
        let idx: Vec<usize> = (0..n).map(|t| (traj.start + t).min(cap)).collect();
        let table = g.param(self.timestep);
        let te = g.gather_rows(table, &idx)?;
        let r = g.add(r, te)?;
        let s = g.add(s, te)?;
        let a = g.add(a, te)?;
        Ok(g.interleave_rows(&[r, s, a])?)
    }
}

/// Affine map from hidden states to actions, squashed into `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ActionHead {
    w: ParamId,
    b: ParamId,
}

impl ActionHead {
    pub fn new(config: &ModelConfig, params: &mut ParamStore, rng: &mut impl rand::Rng) -> Self {
        Self {
            w: params.add("head.w", normal_tensor(rng, &[config.d_model, config.action_dim], 0.02)),
            b: params.add("head.b", Tensor::zeros([config.action_dim])),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    /// Row `t` is the action predicted from `hidden[action_target_positions[t]]`.
    pub fn predict<T: Element>(&self, g: &mut Graph<'_, T>, hidden: Var, fused: &FusedSequence) -> Result<Var> {
        let rows = g.shape(hidden)[0];
        if rows != fused.len() {
            return Err(Error::Dimension(format!(
                "hidden has {rows} rows but the fused sequence has {}",
                fused.len()
            )));
        }
        let h = g.gather_rows(hidden, &fused.action_target_positions)?;
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(h, w)?;
        let y = g.add_row(y, b)?;
        Ok(g.tanh(y))
    }
}

/// Splices `traj_emb` (`[3T x d]`) into the embedded prompt right after the
/// begin marker. Targets and weights are attached for the loss.
pub fn fuse<T: Element>(
    g: &mut Graph<'_, T>,
    backbone: &Backbone,
    vocab: &Vocabulary,
    prompt: &[u32],
    traj: &RtgTrajectory,
    traj_emb: Var,
    step_weights: &[f32],
) -> Result<FusedSequence> {
    let n = traj.len();
    if n == 0 {
        return Err(Error::Window("cannot fuse an empty trajectory".into()));
    }
    if g.shape(traj_emb)[0] != 3 * n {
        return Err(Error::Dimension(format!(
            "trajectory embedding has {} rows, expected {}",
            g.shape(traj_emb)[0],
            3 * n
        )));
    }
    if step_weights.len() != n {
        return Err(Error::Dimension(format!(
            "{} step weights for {n} steps",
            step_weights.len()
        )));
    }
    let begin = splice_point(prompt, vocab)?;
    let head = backbone.embed_tokens(g, &prompt[..=begin])?;
    let tail = backbone.embed_tokens(g, &prompt[begin + 1..])?;
    let embeddings = g.concat_rows(&[head, traj_emb, tail])?;

    let kinds = fused_kinds(prompt.len(), begin, n);
    let mut timesteps = vec![None; kinds.len()];
    for t in 0..n {
        for j in 0..3 {
            timesteps[begin + 1 + 3 * t + j] = Some(traj.start + t);
        }
    }
    Ok(FusedSequence {
        embeddings,
        kinds,
        timesteps,
        action_target_positions: (0..n).map(|t| begin + 2 + 3 * t).collect(),
        action_targets: traj.actions.clone(),
        step_weights: step_weights.to_vec(),
    })
}

/// How per-step weights enter the action loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Plain mean; weights only mask padding.
    #[default]
    None,
    /// Hard 0/1 mask.
    V1,
    /// Down-weighted steps, normalised by `max(1, D·Σw)`.
    V2,
    /// Down-weighted steps, weighted mean per window.
    V3,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::None => "none",
            LossMode::V1 => "v1",
            LossMode::V2 => "v2",
            LossMode::V3 => "v3",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LossMode::None),
            "v1" => Ok(LossMode::V1),
            "v2" => Ok(LossMode::V2),
            "v3" => Ok(LossMode::V3),
            other => Err(Error::config("loss mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Per-element coefficients `c` such that the loss is `Σ c·(pred - target)²`.
///
/// With `sse_t` the squared error of step `t` summed over the `D` action
/// components: `none` and `v3` give `Σ w_t·sse_t / (D·Σw)`; `v1` and `v2`
/// give `Σ w_t·sse_t / max(1, D·Σw)`.
pub fn loss_coefficients(weights: &[f32], action_dim: usize, mode: LossMode) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWindow);
    }
    let d = action_dim as f64;
    let denom = match mode {
        LossMode::None | LossMode::V3 => d * total,
        LossMode::V1 | LossMode::V2 => (d * total).max(1.0),
    };
    Ok(weights
        .iter()
        .flat_map(|&w| std::iter::repeat(w as f64 / denom).take(action_dim))
        .collect())
}

/// Weighted action loss of `pred` (`[T x D]`) against row-major `target`.
pub fn weighted_mse<T: Element>(
    g: &mut Graph<'_, T>,
    pred: Var,
    target: &[f32],
    weights: &[f32],
    mode: LossMode,
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    let (n, d) = (shape[0], shape[1]);
    if target.len() != n * d || weights.len() != n {
        return Err(Error::Dimension(format!(
            "prediction [{n} x {d}] vs {} target values and {} weights",
            target.len(),
            weights.len()
        )));
    }
    let coef: Vec<T> = loss_coefficients(weights, d, mode)?
        .into_iter()
        .map(T::from_f64)
        .collect();
    let target = g.constant(Tensor::new([n, d], target.iter().map(|&x| T::from_f64(x as f64)).collect())?);
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.weighted_sum(sq, &coef)?)
}

/// Everything a forward pass over one window produces.
#[derive(Clone, Debug)]
pub struct WindowForward {
    pub fused: FusedSequence,
    pub backbone: BackboneOutput,
    /// `[T x action_dim]` predictions.
    pub actions: Var,
}

/// The full model: backbone, trajectory encoder and action head sharing one
/// parameter store.
#[derive(Clone, Debug)]
pub struct DecisionModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub backbone: Backbone,
    pub encoder: TrajEncoder,
    pub head: ActionHead,
    pub params: ParamStore,
}

impl DecisionModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::standard();
        if config.vocab_size < vocab.len() {
            return Err(Error::config(
                "model.vocab_size",
                format!("must be at least {} (standard vocabulary)", vocab.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(config, &mut params, &mut rng);
        let encoder = TrajEncoder::new(config, &mut params, &mut rng);
        let head = ActionHead::new(config, &mut params, &mut rng);
        debug_assert_eq!(params.num_elements(), config.param_count());
        Ok(Self {
            config: config.clone(),
            vocab,
            backbone,
            encoder,
            head,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }

    /// Encode, fuse, run the backbone and read out actions.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        prompt: &[u32],
        traj: &RtgTrajectory,
        weights: &[f32],
        window: usize,
    ) -> Result<WindowForward> {
        let emb = self.encoder.encode(g, traj, window)?;
        let fused = fuse(g, &self.backbone, &self.vocab, prompt, traj, emb, weights)?;
        let out = self.backbone.forward(g, fused.embeddings, true)?;
        let actions = self.head.predict(g, out.output, &fused)?;
        Ok(WindowForward {
            fused,
            backbone: out,
            actions,
        })
    }

    /// Weighted action loss of one window.
    pub fn window_loss<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        prompt: &[u32],
        traj: &RtgTrajectory,
        weights: &[f32],
        mode: LossMode,
        window: usize,
    ) -> Result<Var> {
        let fw = self.forward(g, prompt, traj, weights, window)?;
        weighted_mse(g, fw.actions, &fw.fused.action_targets, weights, mode)
    }

    /// Row-major `[T x action_dim]` predictions without gradient tracking.
    pub fn predict(&self, prompt: &[u32], traj: &RtgTrajectory, window: usize) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::no_grad(&self.params);
        let ones = vec![1.0; traj.len()];
        let fw = self.forward(&mut g, prompt, traj, &ones, window)?;
        Ok(g.value(fw.actions).data().to_vec())
    }

    /// Action for the last row of `traj`. Its action entry is a placeholder:
    /// the causal mask hides it from the state token that predicts it.
    pub fn act(&self, prompt: &[u32], traj: &RtgTrajectory, window: usize) -> Result<Vec<f32>> {
        let all = self.predict(prompt, traj, window)?;
        let d = self.config.action_dim;
        Ok(all[all.len() - d..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_positions: 64,
            max_timestep: 16,
            ..Default::default()
        }
    }

    fn traj(n: usize, start: usize) -> RtgTrajectory {
        let states = (0..n * 4).map(|i| ((i as f32) * 0.37).sin()).collect();
        let actions = (0..n * 2).map(|i| ((i as f32) * 0.71).cos() * 0.5).collect();
        let rewards: Vec<f32> = (0..n).map(|i| (i % 2) as f32).collect();
        let mut rtgs = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            acc += rewards[t];
            rtgs[t] = acc;
        }
        RtgTrajectory::new(start, 4, 2, states, actions, rewards, rtgs).unwrap()
    }

    #[test]
    fn encode_orders_rtg_state_action() {
        let m = DecisionModel::new(&cfg(), 0).unwrap();
        let mut g = Graph::<f32>::no_grad(&m.params);
        let e = m.encoder.encode(&mut g, &traj(1, 0), 20).unwrap();
        assert_eq!(g.shape(e), &[3, 8]);
        // Row 1 is the state projection plus the timestep row.
        let ws = m.params.get(m.encoder.w_state);
        let te = m.params.get(m.encoder.timestep);
        let tr = traj(1, 0);
        for c in 0..8 {
            let expect: f32 = (0..4).map(|k| tr.states[k] * ws.data()[k * 8 + c]).sum::<f32>() + te.data()[c];
            assert!((g.value(e).row(1)[c] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn encode_rejects_bad_windows() {
        let m = DecisionModel::new(&cfg(), 0).unwrap();
        let mut g = Graph::<f32>::no_grad(&m.params);
        assert!(matches!(m.encoder.encode(&mut g, &traj(5, 0), 4), Err(Error::Window(_))));
        let empty = RtgTrajectory::new(0, 4, 2, vec![], vec![], vec![], vec![]).unwrap();
        assert!(matches!(m.encoder.encode(&mut g, &empty, 4), Err(Error::Window(_))));
        let odd = RtgTrajectory::new(0, 3, 2, vec![0.0; 3], vec![0.0; 2], vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(m.encoder.encode(&mut g, &odd, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn timestep_index_is_capped() {
        let m = DecisionModel::new(&cfg(), 0).unwrap();
        let mut g = Graph::<f32>::no_grad(&m.params);
        let late = traj(2, 100);
        let e = m.encoder.encode(&mut g, &late, 4).unwrap();
        assert!(g.value(e).is_finite());
    }

    #[test]
    fn splice_point_validation() {
        let v = Vocabulary::standard();
        let (b, e) = (v.traj_begin_id(), v.traj_end_id());
        assert_eq!(splice_point(&[7, b, e, 9], &v).unwrap(), 1);
        assert!(matches!(splice_point(&[7, 9], &v), Err(Error::Placeholder(_))));
        assert!(matches!(splice_point(&[b, e, b, e], &v), Err(Error::Placeholder(_))));
        assert!(matches!(splice_point(&[b, 7, e], &v), Err(Error::Placeholder(_))));
        assert!(matches!(splice_point(&[e, b], &v), Err(Error::Placeholder(_))));
    }

    #[test]
    fn kinds_pattern() {
        let k = fused_kinds(4, 1, 2);
        assert_eq!(k.len(), 10);
        assert!(kinds_are_regular(&k));
        let mut bad = k.clone();
        bad.swap(2, 3);
        assert!(!kinds_are_regular(&bad));
    }

    #[test]
    fn coefficients_by_mode() {
        let c = loss_coefficients(&[0.5, 1.0], 1, LossMode::V2).unwrap();
        // per-step errors [1, 3]
        let loss: f64 = c[0] * 1.0 + c[1] * 3.0;
        assert!((loss - 3.5 / 1.5).abs() < 1e-12);
        assert!(matches!(
            loss_coefficients(&[0.0, 0.0], 2, LossMode::V1),
            Err(Error::DegenerateWindow)
        ));
        let none = loss_coefficients(&[1.0; 3], 2, LossMode::None).unwrap();
        let v1 = loss_coefficients(&[1.0; 3], 2, LossMode::V1).unwrap();
        assert_eq!(none, v1);
    }

    #[test]
    fn loss_mode_parses() {
        assert_eq!("v3".parse::<LossMode>().unwrap(), LossMode::V3);
        assert!("v4".parse::<LossMode>().is_err());
    }

    #[test]
    fn param_count_matches_store() {
        let c = cfg();
        let m = DecisionModel::new(&c, 1).unwrap();
        assert_eq!(m.param_count(), c.param_count());
    }
}
