//! Named parameter storage and per-graph parameter binding.

use std::collections::HashMap;
use std::sync::Arc;

use kvlp_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Group {
    /// Uni-modal encoders (patch/token embeddings and their transformer stacks).
    Encoder,
    /// Fusion module, projections and heads.
    Rest,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub path: String,
    pub value: Arc<Tensor<T>>,
    pub group: Group,
    pub decay: bool,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_path: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_path: HashMap::new(),
        }
    }

    fn insert(&mut self, path: &str, value: Tensor<T>, group: Group, decay: bool, trainable: bool) -> ParamId {
        assert!(!self.by_path.contains_key(path), "duplicate parameter path {path}");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            path: path.to_string(),
            value: Arc::new(value),
            group,
            decay,
            trainable,
        });
        self.by_path.insert(path.to_string(), id);
        id
    }

    pub fn add(&mut self, path: &str, value: Tensor<T>, group: Group, decay: bool) -> ParamId {
        self.insert(path, value, group, decay, true)
    }

    /// Registers a tensor that is stored and checkpointed but never updated.
    pub fn add_frozen(&mut self, path: &str, value: Tensor<T>) -> ParamId {
        self.insert(path, value, Group::Rest, false, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    /// Mutable access; clones the tensor only if a graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value(id).shape() {
            return Err(Error::Argument(format!(
                "shape {:?} for parameter {} of shape {:?}",
                value.shape(),
                self.params[id.0].path,
                self.value(id).shape()
            )));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    path: p.path.clone(),
                    value: Arc::new(p.value.cast()),
                    group: p.group,
                    decay: p.decay,
                    trainable: p.trainable,
                })
                .collect(),
            by_path: self.by_path.clone(),
        }
    }
}

/// Per-parameter gradients gathered from one or more graphs.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n: usize) -> Self {
        Grads {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.slots[id.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.slots.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Recording context for one forward pass: a graph plus the lazily bound
/// parameters it uses.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    frozen_groups: Vec<Group>,
    /// Captured attention maps (head-averaged), keyed by site name, when enabled.
    pub attention: Option<Vec<(String, Tensor<T>)>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            frozen_groups: Vec::new(),
            attention: None,
        }
    }

    /// Parameters in these groups are bound without gradients.
    pub fn freeze_group(mut self, group: Group) -> Self {
        self.frozen_groups.push(group);
        self
    }

    pub fn capture_attention(mut self) -> Self {
        self.attention = Some(Vec::new());
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = if param.trainable && !self.frozen_groups.contains(&param.group) {
            self.g.param(param.value.clone())
        } else {
            self.g.frozen(param.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        Ok(self.g.constant(t)?)
    }

    pub fn record_attention(&mut self, site: impl FnOnce() -> String, weights: Tensor<T>) {
        if let Some(maps) = &mut self.attention {
            maps.push((site(), weights));
        }
    }

    pub fn is_capturing(&self) -> bool {
        self.attention.is_some()
    }

    /// Runs backward from `loss` and adds every bound parameter's gradient
    /// into `grads`.
    pub fn backward_into(&mut self, loss: Var, grads: &mut Grads<T>) -> Result<()> {
        self.g.backward(loss)?;
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.g.grad(*v) {
                    grads.accumulate(ParamId(i), g);
                }
            }
        }
        Ok(())
    }
}
