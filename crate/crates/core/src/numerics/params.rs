use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::graph::{Gradients, Graph, Var};
use crate::numerics::tensor::{Real, Tensor};

/// Index of an entry in a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<E> {
    pub name: String,
    pub value: Tensor<E>,
    /// `false` for running statistics, which are state but not optimized.
    pub trainable: bool,
}

/// Named, ordered collection of one network's tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<E> {
    entries: Vec<Entry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Real> ParameterSet<E> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<E>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<E>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return shape_err(
                "set",
                format!("{}: {:?} vs {:?}", slot.name, slot.value.shape(), value.shape()),
            );
        }
        slot.value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn cast<F: Real>(&self) -> ParameterSet<F> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Same names, shapes and order.
    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return shape_err(
                "parameter sets",
                format!("{} vs {} entries", self.entries.len(), other.entries.len()),
            );
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return shape_err(
                    "parameter sets",
                    format!("{} {:?} vs {} {:?}", a.name, a.value.shape(), b.name, b.value.shape()),
                );
            }
        }
        Ok(())
    }

    /// Element-wise `self = keep * self + (1 - keep) * other` over every entry.
    pub fn blend_from(&mut self, other: &Self, keep: E) -> Result<()> {
        self.check_congruent(other)?;
        let take = E::one() - keep;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *x = keep * *x + take * y;
            }
        }
        Ok(())
    }

    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max))
    }
}

/// Parameter allocator handed to module constructors.
pub struct Init<'a, E> {
    params: &'a mut ParameterSet<E>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, E: Real> Init<'a, E> {
    pub fn new(params: &'a mut ParameterSet<E>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
        }
    }

    /// Child allocator whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> Init<'_, E> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            params: self.params,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `(-sqrt(1/fan_in), sqrt(1/fan_in))`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| E::lit(self.rng.random_range(-bound..bound)))
            .collect();
        let name = self.full_name(name);
        self.params.insert(&name, Tensor::new(shape, data)?, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        let name = self.full_name(name);
        self.params.insert(&name, Tensor::full(shape, E::lit(v)), true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        let name = self.full_name(name);
        self.params.insert(&name, Tensor::full(shape, E::lit(v)), false)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// A parameter set placed on a graph for one forward pass.
///
/// Trainable entries become leaves, running statistics become constants.
/// Blocks that update running statistics in training mode record the new
/// values here; [`Binding::commit`] writes them back.
pub struct Binding<E> {
    vars: Vec<Var>,
    pending: Vec<(ParamId, Tensor<E>)>,
    train: bool,
}

impl<E: Real> Binding<E> {
    pub fn new(g: &mut Graph<E>, params: &ParameterSet<E>, train: bool) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.leaf(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Self {
            vars,
            pending: Vec::new(),
            train,
        }
    }

    /// Binds every entry as a constant, e.g. for frozen evaluation.
    pub fn frozen(g: &mut Graph<E>, params: &ParameterSet<E>) -> Self {
        let vars = params.entries.iter().map(|e| g.constant(e.value.clone())).collect();
        Self {
            vars,
            pending: Vec::new(),
            train: false,
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn record(&mut self, id: ParamId, value: Tensor<E>) {
        self.pending.push((id, value));
    }

    pub fn commit(&mut self, params: &mut ParameterSet<E>) -> Result<()> {
        for (id, v) in self.pending.drain(..) {
            params.set(id, v)?;
        }
        Ok(())
    }

    /// Per-entry gradients; `None` for running statistics and unused entries.
    pub fn grads(&self, grads: &mut Gradients<E>) -> Vec<Option<Tensor<E>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
