//! Toy next-token pretraining on procedurally generated token streams.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Backbone, Vocabulary};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::{batch_gradients, clip_grad_norm, AdamW, AdamWConfig, Graph, ParamStore};

/// Sequences of `len` tokens mixing two structures: a short motif repeated
/// to fill the sequence, and a copy task (`segment <bos> segment <bos> ..`).
pub fn synthetic_corpus(vocab: &Vocabulary, sequences: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Content tokens: everything after the special ids.
    let pool: Vec<u32> = (5..vocab.len() as u32).collect();
    let bos = vocab.bos_id();
    (0..sequences)
        .map(|i| {
            let mut seq = Vec::with_capacity(len);
            if i % 2 == 0 {
                let m = rng.random_range(2..=6);
                let motif: Vec<u32> = (0..m).map(|_| *pool.choose(&mut rng).unwrap()).collect();
                seq.extend(motif.iter().cycle().take(len));
            } else {
                let k = rng.random_range(3..=8);
                let seg: Vec<u32> = (0..k).map(|_| *pool.choose(&mut rng).unwrap()).collect();
                while seq.len() < len {
                    seq.extend(&seg);
                    seq.push(bos);
                }
                seq.truncate(len);
            }
            seq
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Fraction of the corpus held out for evaluation.
    pub heldout_fraction: f64,
    pub exec: Exec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            heldout_fraction: 0.2,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub train_losses: Vec<f64>,
}

fn sequence_loss(backbone: &Backbone, g: &mut Graph<'_, f32>, seq: &[u32]) -> Result<Option<crate::tensor::Var>> {
    if seq.len() < 2 {
        return Ok(None);
    }
    let x = backbone.embed_tokens(g, &seq[..seq.len() - 1])?;
    let out = backbone.forward(g, x, true)?;
    let logits = backbone.lm_logits(g, out.output)?;
    let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    Ok(Some(g.cross_entropy(logits, &targets)?))
}

/// Mean next-token cross entropy over `corpus`.
pub fn corpus_loss(backbone: &Backbone, params: &ParamStore, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for seq in corpus {
        let mut g = Graph::<f32>::no_grad(params);
        if let Some(l) = sequence_loss(backbone, &mut g, seq)? {
            total += g.value(l).data()[0] as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok(total / n as f64)
}

/// Trains the backbone (through its tied LM head) for `steps` optimizer
/// steps. Only backbone parameters change; weight decay is off so unused
/// parameters in the same store are untouched.
pub fn synthetic_pretrain(
    backbone: &Backbone,
    params: &mut ParamStore,
    corpus: &[Vec<u32>],
    steps: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if corpus.is_empty() || corpus.iter().all(|s| s.len() < 2) {
        return Err(Error::Empty("corpus"));
    }
    let n_held = ((corpus.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, corpus.len());
    let (train, heldout) = if corpus.len() > 1 {
        let split = corpus.len() - n_held.min(corpus.len() - 1);
        corpus.split_at(split)
    } else {
        (corpus, corpus)
    };
    let initial = corpus_loss(backbone, params, heldout)?;
    let mut opt = AdamW::new(
        params,
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&Vec<u32>> = (0..cfg.batch_size.max(1))
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        let bg = batch_gradients(cfg.exec, params, &batch, |g, seq| sequence_loss(backbone, g, seq))?;
        if bg.count == 0 {
            continue;
        }
        let mut grads = bg.grads;
        grads.scale(1.0 / bg.count as f32);
        let loss = bg.loss_sum / bg.count as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step as u64 });
        }
        clip_grad_norm(&mut grads, 1.0);
        opt.step(params, &grads, cfg.lr)?;
        losses.push(loss);
    }
    let final_loss = corpus_loss(backbone, params, heldout)?;
    Ok(PretrainReport {
        steps,
        initial_heldout_loss: initial,
        final_heldout_loss: final_loss,
        train_losses: losses,
    })
}
