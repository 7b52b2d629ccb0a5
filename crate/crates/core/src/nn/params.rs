use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named, ordered collection of network parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: IndexMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total element count of trainable tensors whose name satisfies `keep`.
    pub fn count_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && keep(&e.name))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Copies every tensor whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(id) = other.id(&e.name) {
                let src = other.value(id);
                if src.shape() == e.value.shape() {
                    e.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Named tensors in insertion order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}

/// Scoped parameter registration with deterministic initialisation.
///
/// Convolutions and linear maps use fan-in scaled normals (`sqrt(2/fan_in)`
/// and `sqrt(1/fan_in)` standard deviations); batch-norm affine starts at
/// `(1, 0)` with running statistics `(0, 1)`.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

/// Parameters and buffers of one batch-normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<R>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.push(scope);
        let out = f(self);
        self.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value, kind)
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| lit(dist.sample(rng)))
    }

    /// Convolution weight `(cout, cin_per_group, k, k)`.
    pub fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) -> Result<ParamId> {
        let fan_in = cin_per_group * k * k;
        let w = self.normal(vec![cout, cin_per_group, k, k], (2.0 / fan_in as f64).sqrt());
        self.tensor(name, w, ParamKind::Trainable)
    }

    pub fn linear(&mut self, name: &str, out: usize, input: usize, bias: bool) -> Result<LinearParams> {
        let w = self.normal(vec![out, input], (1.0 / input as f64).sqrt());
        let weight = self.tensor(&format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(self.tensor(&format!("{name}.bias"), Tensor::zeros(vec![out]), ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(LinearParams { weight, bias })
    }

    pub fn bias(&mut self, name: &str, len: usize) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(vec![len]), ParamKind::Trainable)
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.tensor(&format!("{name}.weight"), Tensor::ones(vec![channels]), ParamKind::Trainable)?,
            beta: self.tensor(&format!("{name}.bias"), Tensor::zeros(vec![channels]), ParamKind::Trainable)?,
            running_mean: self.tensor(
                &format!("{name}.running_mean"),
                Tensor::zeros(vec![channels]),
                ParamKind::Buffer,
            )?,
            running_var: self.tensor(
                &format!("{name}.running_var"),
                Tensor::ones(vec![channels]),
                ParamKind::Buffer,
            )?,
        })
    }
}
