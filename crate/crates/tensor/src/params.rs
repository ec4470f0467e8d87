use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter storage. Ids stay stable when entries are removed.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<Option<Param<T>>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Some(Param { name, value, trainable }));
        Ok(id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param<T>> {
        let p = self.entries.get_mut(id.0)?.take()?;
        self.by_name.remove(&p.name);
        Some(p)
    }

    /// Slot count including removed entries; valid ids are below this.
    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        self.entries[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.param(id).value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].as_mut().expect("parameter was removed").value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.param(id).name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.param(id).trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].as_mut().expect("parameter was removed").trainable = trainable;
    }

    /// Sets every entry's trainable flag from a predicate on its name.
    pub fn set_trainable_by(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.entries.iter_mut().flatten() {
            p.trainable = pred(&p.name);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn element_count(&self) -> usize {
        self.iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn trainable_element_count(&self) -> usize {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Records every parameter on `graph`; trainable ones as gradient leaves.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        self.bind_with(graph, |_, p| p.trainable)
    }

    pub fn bind_with<'g>(
        &self,
        graph: &'g Graph<T>,
        requires_grad: impl Fn(ParamId, &Param<T>) -> bool,
    ) -> Bound<'g, T> {
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.as_ref().map(|p| {
                    let rg = requires_grad(ParamId(i), p);
                    graph.leaf(p.value.clone(), rg)
                })
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on one graph.
pub struct Bound<'g, T: Element> {
    vars: Vec<Option<Var<'g, T>>>,
}

impl<'g, T: Element> Bound<'g, T> {
    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0].expect("parameter was removed")
    }

    /// Lifts a backward result into per-parameter gradients.
    pub fn grads(&self, grads: &mut Gradients<T>) -> ParamGrads<T> {
        ParamGrads(self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect())
    }
}

/// Gradients aligned with [`ParamSet`] ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T>(pub Vec<Option<Tensor<T>>>);

impl<T: Element> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    /// Elementwise accumulation; call in a fixed order for reproducible sums.
    pub fn accumulate(&mut self, other: ParamGrads<T>) -> Result<()> {
        if self.0.len() < other.0.len() {
            self.0.resize_with(other.0.len(), || None);
        }
        for (slot, g) in self.0.iter_mut().zip(other.0) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.add_assign(&g)?,
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for g in self.0.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flatten().flat_map(|g| g.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.all_finite())
    }
}
