use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use super::{Element, Tape, Tensor, TensorError, Var};
use crate::par::{self, Exec};

type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of `f32` parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_param",
                lhs: self.tensors[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[i] = value;
        Ok(())
    }
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    grads: Vec<Vec<f32>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.grads[id.0]
    }

    pub fn as_slices(&self) -> &[Vec<f32>] {
        &self.grads
    }

    pub fn as_slices_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.grads
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f32) {
        self.grads
            .iter_mut()
            .flatten()
            .for_each(|g| *g *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

/// A tape bound to a parameter store. Each parameter becomes a
/// gradient-tracking leaf the first time it is used.
pub struct Graph<'p, T: Element = f32> {
    tape: Tape<T>,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_tape(params, Tape::new())
    }

    /// Inference-only graph.
    pub fn no_grad(params: &'p ParamStore) -> Self {
        Self::with_tape(params, Tape::no_grad())
    }

    fn with_tape(params: &'p ParamStore, tape: Tape<T>) -> Self {
        Self {
            tape,
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).cast::<T>();
        let v = self.tape.leaf(value, true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients of every parameter after `backward`; unused parameters get zeros.
    pub fn param_grads(&self) -> GradStore {
        let mut out = GradStore::zeros_like(self.params);
        for (slot, bound) in out.grads.iter_mut().zip(&self.bound) {
            if let Some(g) = bound.and_then(|v| self.tape.grad(v)) {
                for (o, &x) in slot.iter_mut().zip(g) {
                    *o = x.as_f64() as f32;
                }
            }
        }
        out
    }
}

impl<T: Element> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Element> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

/// Summed gradients of a batch of independent per-item losses.
#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub grads: GradStore,
    pub loss_sum: f64,
    /// Items that produced a loss.
    pub count: usize,
}

/// Runs `loss_fn` on each item in its own graph (in parallel when `exec`
/// allows), back-propagates, and sums gradients in item order. Items for
/// which `loss_fn` returns `None` are skipped.
pub fn batch_gradients<I, E, F>(exec: Exec, params: &ParamStore, items: &[I], loss_fn: F) -> Result<BatchGrad, E>
where
    I: Sync,
    E: Send + From<TensorError>,
    F: Fn(&mut Graph<'_, f32>, &I) -> Result<Option<Var>, E> + Sync + Send,
{
    let per_item = par::map_slice(exec, items, |item| -> Result<Option<(GradStore, f64)>, E> {
        let mut g = Graph::<f32>::new(params);
        let Some(loss) = loss_fn(&mut g, item)? else {
            return Ok(None);
        };
        let value = g.value(loss).data()[0] as f64;
        g.backward(loss)?;
        Ok(Some((g.param_grads(), value)))
    });
    let mut out = BatchGrad {
        grads: GradStore::zeros_like(params),
        loss_sum: 0.0,
        count: 0,
    };
    for r in per_item {
        if let Some((grads, loss)) = r? {
            out.grads.add_assign(&grads);
            out.loss_sum += loss;
            out.count += 1;
        }
    }
    Ok(out)
}
