//! Finite-difference gradient checks shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajllm::backbone::ModelConfig;
use trajllm::tensor::{Graph, ParamStore, Tape, Tensor, Var};
use trajllm::trajmod::{DecisionModel, LossMode, RtgTrajectory};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Analytic/numeric pairs below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub type OpFn = fn(&mut Tape<f64>, &[Var]) -> Var;

/// A differentiable op applied to random inputs of the given shapes.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: OpFn,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum of the op output with fixed random weights: a scalar loss
/// that exercises every output entry.
fn op_loss(case: &OpCase, inputs: &[Tensor<f64>], weights_seed: u64, grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w: Vec<f64> = (0..tape.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = tape.weighted_sum(out, &w).unwrap();
    let value = tape.value(loss).data()[0];
    if !grad {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    (value, grads)
}

/// Largest relative error between analytic and central-difference gradients
/// over every input entry.
pub fn check_op(case: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    let wseed = seed.wrapping_mul(31).wrapping_add(7);
    let (_, analytic) = op_loss(case, &inputs, wseed, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (op_loss(case, &plus, wseed, false).0 - op_loss(case, &minus, wseed, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][k], numeric));
        }
    }
    worst
}

/// Every differentiable tape operation, with inputs sized to exercise
/// broadcasting, masking and repeated indices.
pub fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &[&[usize]], build: OpFn) -> OpCase {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build,
        }
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_bt", &[&[3, 4], &[5, 4]], |t, v| t.matmul_bt(v[0], v[1]).unwrap()),
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("add_row", &[&[3, 4], &[1, 4]], |t, v| t.add_row(v[0], v[1]).unwrap()),
        case("scale", &[&[3, 4]], |t, v| t.scale(v[0], -1.7)),
        case("gelu", &[&[3, 4]], |t, v| {
            let x = t.scale(v[0], 3.0);
            t.gelu(x)
        }),
        case("tanh", &[&[3, 4]], |t, v| {
            let x = t.scale(v[0], 2.0);
            t.tanh(x)
        }),
        case("softmax", &[&[3, 5]], |t, v| {
            let x = t.scale(v[0], 3.0);
            t.softmax(x)
        }),
        case("causal_softmax", &[&[4, 4]], |t, v| {
            let x = t.scale(v[0], 3.0);
            t.causal_softmax(x).unwrap()
        }),
        case("layer_norm", &[&[3, 5], &[1, 5], &[1, 5]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        }),
        case("slice_cols", &[&[3, 6]], |t, v| t.slice_cols(v[0], 1, 3).unwrap()),
        case("concat_cols", &[&[3, 2], &[3, 4]], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        case("concat_rows", &[&[2, 3], &[4, 3]], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        case("gather_rows", &[&[4, 3]], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]).unwrap()),
        case("interleave_rows", &[&[3, 2], &[3, 2], &[3, 2]], |t, v| {
            t.interleave_rows(&[v[0], v[1], v[2]]).unwrap()
        }),
        case("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
        case("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        case("weighted_sum", &[&[3, 4]], |t, v| {
            let w: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) / 4.0).collect();
            t.weighted_sum(v[0], &w).unwrap()
        }),
        case("cross_entropy", &[&[3, 6]], |t, v| {
            let x = t.scale(v[0], 3.0);
            t.cross_entropy(x, &[5, 0, 2]).unwrap()
        }),
    ]
}

pub fn tiny_model_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers,
        n_heads: 2,
        max_positions: 48,
        ..Default::default()
    }
}

pub fn random_window(rng: &mut ChaCha8Rng, t: usize) -> (RtgTrajectory, Vec<f32>) {
    let states = (0..4 * t).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actions = (0..2 * t).map(|_| rng.random_range(-0.9..0.9)).collect();
    let rewards: Vec<f32> = (0..t).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let mut rtgs = vec![0.0f32; t];
    let mut acc = rng.random_range(0.0..5.0f32).round();
    for i in (0..t).rev() {
        acc += rewards[i];
        rtgs[i] = acc;
    }
    let mut weights: Vec<f32> = (0..t).map(|_| [0.0, 0.2, 1.0][rng.random_range(0..3)]).collect();
    weights[t - 1] = 0.2;
    let traj = RtgTrajectory::new(rng.random_range(0..50), 4, 2, states, actions, rewards, rtgs).unwrap();
    (traj, weights)
}

fn model_loss(model: &DecisionModel, params: &ParamStore, prompt: &[u32], traj: &RtgTrajectory, w: &[f32], mode: LossMode) -> f64 {
    let mut g = Graph::<f64>::no_grad(params);
    let l = model.window_loss(&mut g, prompt, traj, w, mode, traj.len()).unwrap();
    g.value(l).data()[0]
}

/// End-to-end check of the window loss: `per_tensor` random entries of
/// every parameter tensor. Parameters are stored in f32, so the step is the
/// exactly representable difference of the perturbed values.
pub fn check_model(seed: u64, mode: LossMode, per_tensor: usize) -> (f64, usize) {
    let model = DecisionModel::new(&tiny_model_config(2), seed).unwrap();
    let prompt = model.vocab.tokenize("go <|traj_begin|><|traj_end|> act");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let (traj, w) = random_window(&mut rng, 3);

    let mut g = Graph::<f64>::new(&model.params);
    let l = model.window_loss(&mut g, &prompt, &traj, &w, mode, traj.len()).unwrap();
    g.backward(l).unwrap();
    let ids: Vec<_> = model.params.iter().map(|(id, _, _)| id).collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.param_var(id)
                .and_then(|v| g.grad(v).map(|s| s.to_vec()))
                .unwrap_or_else(|| vec![0.0; model.params.get(id).numel()])
        })
        .collect();
    drop(g);

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (slot, &id) in ids.iter().enumerate() {
        let n = model.params.get(id).numel();
        for _ in 0..per_tensor.min(n) {
            let k = rng.random_range(0..n);
            let p = model.params.get(id).data()[k];
            let plus = p + FD_STEP as f32;
            let minus = p - FD_STEP as f32;
            let mut ps = model.params.clone();
            ps.get_mut(id).data_mut()[k] = plus;
            let lp = model_loss(&model, &ps, &prompt, &traj, &w, mode);
            ps.get_mut(id).data_mut()[k] = minus;
            let lm = model_loss(&model, &ps, &prompt, &traj, &w, mode);
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            worst = worst.max(rel_err(analytic[slot][k], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}
