//! Representation analyses: text vs trajectory-modal embeddings, layerwise
//! similarity, PCA coordinates and attention probes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Vocabulary;
use crate::data::{compute_rtg, Trajectory};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::{Graph, Tensor, Var};
use crate::trajmod::{splice_point, weighted_mse, DecisionModel, LossMode, RtgTrajectory};

/// How a trajectory reaches the backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Numbers written out as digit tokens inside the prompt.
    PromptText,
    /// Learned (rtg, state, action) embeddings spliced into the prompt.
    #[default]
    TrajModal,
}

impl Representation {
    pub fn as_str(self) -> &'static str {
        match self {
            Representation::PromptText => "prompt-text",
            Representation::TrajModal => "traj-modal",
        }
    }
}

/// Pooled hidden state of one trajectory at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSample {
    pub trajectory: usize,
    pub mode: Representation,
    pub layer: usize,
    pub vector: Vec<f32>,
}

/// Fixed three-decimal rendering; rounds to zero without a sign.
pub fn format_number(v: f32) -> String {
    let s = format!("{:.3}", v);
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0.000".into()
    } else {
        s
    }
}

/// Token ids of a text-serialized window: per step
/// `rtg,s0,s1,s2,s3,a0,a1;`, plus the index of the comma that precedes the
/// first action number of every step.
pub fn serialize_with_targets(traj: &RtgTrajectory, vocab: &Vocabulary) -> (Vec<u32>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut targets = Vec::with_capacity(traj.len());
    let comma = vocab.tokenize(",");
    let semi = vocab.tokenize(";");
    for t in 0..traj.len() {
        let mut nums = vec![traj.rtgs[t]];
        nums.extend_from_slice(traj.state(t));
        let n_pre = nums.len();
        nums.extend_from_slice(traj.action(t));
        for (i, v) in nums.iter().enumerate() {
            ids.extend(vocab.tokenize(&format_number(*v)));
            if i + 1 < nums.len() {
                if i + 1 == n_pre {
                    targets.push(ids.len());
                }
                ids.extend(&comma);
            }
        }
        ids.extend(&semi);
    }
    (ids, targets)
}

/// Upper bound on text tokens for `window` steps whose returns-to-go stay
/// below `max_return`: states and actions take at most six tokens each.
pub fn text_token_bound(window: usize, max_return: usize) -> usize {
    let rtg_tokens = max_return.max(1).to_string().len() + 4;
    window * (rtg_tokens + 6 * 6 + 7)
}

pub fn serialize_as_text(traj: &RtgTrajectory, vocab: &Vocabulary) -> Vec<u32> {
    serialize_with_targets(traj, vocab).0
}

/// Inverse of [`serialize_as_text`]: one row of numbers per step.
pub fn parse_text(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<Vec<f64>>> {
    let text = vocab.detokenize(ids);
    text.split(';')
        .filter(|s| !s.is_empty())
        .map(|step| {
            step.split(',')
                .map(|n| {
                    n.parse::<f64>()
                        .map_err(|_| Error::Analysis(format!("not a number: {n:?}")))
                })
                .collect()
        })
        .collect()
}

/// Prompt with `content` inserted between the placeholders; returns the ids
/// and the index of the first inserted token.
fn splice_text(prompt: &[u32], content: &[u32], vocab: &Vocabulary) -> Result<(Vec<u32>, usize)> {
    let begin = splice_point(prompt, vocab)?;
    let mut ids = prompt[..=begin].to_vec();
    ids.extend_from_slice(content);
    ids.extend_from_slice(&prompt[begin + 1..]);
    Ok((ids, begin + 1))
}

/// Forward pass of the text-serialized window. Returns all hidden states,
/// the content span and the action predictions.
pub fn text_forward(
    g: &mut Graph<'_, f32>,
    model: &DecisionModel,
    prompt: &[u32],
    traj: &RtgTrajectory,
) -> Result<(Vec<Var>, std::ops::Range<usize>, Var)> {
    let (content, targets) = serialize_with_targets(traj, &model.vocab);
    let (ids, first) = splice_text(prompt, &content, &model.vocab)?;
    let x = model.backbone.embed_tokens(g, &ids)?;
    let out = model.backbone.forward(g, x, true)?;
    let rows: Vec<usize> = targets.iter().map(|t| first + t).collect();
    let h = g.gather_rows(out.output, &rows)?;
    let w = g.param(model.head.param_ids()[0]);
    let b = g.param(model.head.param_ids()[1]);
    let y = g.matmul(h, w)?;
    let y = g.add_row(y, b)?;
    let actions = g.tanh(y);
    Ok((out.hidden, first..first + content.len(), actions))
}

/// Action loss of the text-serialized baseline on one window.
pub fn text_window_loss(
    g: &mut Graph<'_, f32>,
    model: &DecisionModel,
    prompt: &[u32],
    traj: &RtgTrajectory,
    weights: &[f32],
    mode: LossMode,
) -> Result<Var> {
    let (_, _, actions) = text_forward(g, model, prompt, traj)?;
    weighted_mse(g, actions, &traj.actions, weights, mode)
}

fn mean_rows(t: &Tensor, rows: std::ops::Range<usize>) -> Vec<f32> {
    let d = t.cols();
    let mut acc = vec![0.0f64; d];
    let n = rows.len().max(1) as f64;
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(t.row(r)) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| (v / n) as f32).collect()
}

/// Mean-pooled hidden states over the trajectory positions, for every layer
/// (input stream first). Result is indexed `[layer][trajectory]`.
pub fn embed_trajectories(
    model: &DecisionModel,
    prompt: &[u32],
    trajs: &[RtgTrajectory],
    mode: Representation,
    exec: Exec,
) -> Result<Vec<Vec<EmbeddingSample>>> {
    if trajs.is_empty() {
        return Err(Error::Empty("trajectory set"));
    }
    let per_traj = par::map_slice(exec, trajs, |traj| -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::<f32>::no_grad(&model.params);
        let (hidden, span) = match mode {
            Representation::TrajModal => {
                let ones = vec![1.0; traj.len()];
                let fw = model.forward(&mut g, prompt, traj, &ones, traj.len())?;
                (fw.backbone.hidden, fw.fused.trajectory_span())
            }
            Representation::PromptText => {
                let (h, span, _) = text_forward(&mut g, model, prompt, traj)?;
                (h, span)
            }
        };
        Ok(hidden.iter().map(|&h| mean_rows(g.value(h), span.clone())).collect())
    });
    let per_traj: Vec<Vec<Vec<f32>>> = per_traj.into_iter().collect::<Result<_>>()?;
    let layers = per_traj[0].len();
    Ok((0..layers)
        .map(|l| {
            per_traj
                .iter()
                .enumerate()
                .map(|(i, v)| EmbeddingSample {
                    trajectory: i,
                    mode,
                    layer: l,
                    vector: v[l].clone(),
                })
                .collect()
        })
        .collect())
}

/// One `window`-step segment per trajectory at a seeded random offset, for
/// the first `n` trajectories long enough to hold it.
pub fn sample_segments(trajs: &[Trajectory], n: usize, window: usize, seed: u64) -> Result<Vec<RtgTrajectory>> {
    if window == 0 {
        return Err(Error::Window("segment window must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for t in trajs.iter().filter(|t| t.len() >= window) {
        if out.len() == n {
            break;
        }
        let rtg = compute_rtg(t)?;
        let start = rng.random_range(0..=t.len() - window);
        out.push(rtg.slice(start, start + window));
    }
    if out.len() < n {
        return Err(Error::Analysis(format!(
            "only {} trajectories hold a {window}-step segment, need {n}",
            out.len()
        )));
    }
    Ok(out)
}

/// Pairwise cosine similarities; exactly symmetric.
pub fn cosine_similarity_matrix(vectors: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    if vectors.len() < 2 {
        return Err(Error::Analysis("need at least two vectors".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Analysis("vectors differ in dimension".into()));
    }
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Analysis(format!("vector {i} is zero; cosine similarity undefined")));
    }
    let n = vectors.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Mean of the off-diagonal entries.
pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (n * (n - 1)) as f64
}

/// Mean off-diagonal cosine similarity per layer; entry 0 is the input
/// stream, entry `l` the output of block `l`.
pub fn layerwise_mean_similarity(
    model: &DecisionModel,
    prompt: &[u32],
    trajs: &[RtgTrajectory],
    mode: Representation,
    exec: Exec,
) -> Result<Vec<f64>> {
    let layers = embed_trajectories(model, prompt, trajs, mode, exec)?;
    layers
        .iter()
        .map(|samples| {
            let vs: Vec<Vec<f32>> = samples.iter().map(|s| s.vector.clone()).collect();
            Ok(mean_off_diagonal(&cosine_similarity_matrix(&vs)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `n x 2` projections.
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    pub explained_ratio: [f64; 2],
}

fn top_eigen(cov: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let d = cov.len();
    // Deterministic, non-symmetric start so no eigenvector is missed by symmetry.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let mut w = vec![0.0; d];
        for (i, row) in cov.iter().enumerate() {
            w[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (v.iter().map(|x| x / (d as f64).sqrt()).collect(), 0.0);
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        lambda = norm;
        if delta < 1e-12 {
            break;
        }
    }
    // Sign convention: largest-magnitude entry positive.
    let k = (0..d)
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        .unwrap_or(0);
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (v, lambda)
}

/// Top two principal components by power iteration with deflation.
pub fn pca_project(vectors: &[Vec<f32>]) -> Result<Pca> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::Analysis("PCA needs at least three points".into()));
    }
    let d = vectors[0].len();
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x as f64 / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
        .collect();
    let mut cov = vec![vec![0.0f64; d]; d];
    for c in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += c[i] * c[j] / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    if trace <= 1e-24 {
        return Err(Error::Analysis("all points coincide (rank 0)".into()));
    }
    let (v1, l1) = top_eigen(&cov);
    for i in 0..d {
        for j in 0..d {
            cov[i][j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = top_eigen(&cov);
    let l2 = l2.max(0.0);
    let coords = centered
        .iter()
        .map(|c| {
            [
                c.iter().zip(&v1).map(|(a, b)| a * b).sum(),
                c.iter().zip(&v2).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    Ok(Pca {
        coords,
        components: [v1, v2],
        explained_variance: [l1, l2],
        explained_ratio: [l1 / trace, l2 / trace],
    })
}

/// First-layer attention of `text`, averaged over heads: `[L x L]`.
pub fn attention_probe(model: &DecisionModel, text: &str) -> Result<Tensor> {
    let ids = model.vocab.tokenize(text);
    if ids.is_empty() {
        return Err(Error::Analysis("probe text has no tokens".into()));
    }
    let mut g = Graph::<f32>::no_grad(&model.params);
    let x = model.backbone.embed_tokens(&mut g, &ids)?;
    let emb = g.value(x).clone();
    let maps = model.backbone.attention_map(&model.params, &emb, 0, true)?;
    let (h, l) = (maps.shape()[0], maps.shape()[1]);
    let mut avg = vec![0.0f32; l * l];
    for head in 0..h {
        for (a, &v) in avg.iter_mut().zip(&maps.data()[head * l * l..(head + 1) * l * l]) {
            *a += v / h as f32;
        }
    }
    Ok(Tensor::new([l, l], avg)?)
}

/// `# key=value ..` comment line for CSV outputs.
pub fn csv_comment(fields: &[(&str, String)]) -> String {
    let body: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", body.join(" "))
}

pub fn matrix_csv(comment: &str, m: &[Vec<f64>]) -> String {
    let mut s = comment.to_string();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn pca_csv(comment: &str, pca: &Pca) -> String {
    let mut s = comment.to_string();
    s.push_str(&format!(
        "# explained_ratio={:.6},{:.6}\nindex,pc1,pc2\n",
        pca.explained_ratio[0], pca.explained_ratio[1]
    ));
    for (i, c) in pca.coords.iter().enumerate() {
        s.push_str(&format!("{i},{:.6},{:.6}\n", c[0], c[1]));
    }
    s
}

pub fn layerwise_csv(comment: &str, values: &[f64]) -> String {
    let mut s = comment.to_string();
    s.push_str("layer,mean_similarity\n");
    for (l, v) in values.iter().enumerate() {
        s.push_str(&format!("{l},{v:.6}\n"));
    }
    s
}
