//! Parameter storage with name bindings.
//!
//! A [`ParamSet`] owns every array of a model in numbered slots. Each
//! network reads its parameters through a [`Binding`] from its local names
//! (`up1.w`) to slots. Two bindings that map a name to the same slot share
//! that storage: a write through one is visible through the other, and
//! gradients from both accumulate into it.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type Binding = IndexMap<String, usize>;

/// Standard deviation of the Gaussian used for weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Gaussian,
    Zeros,
    Ones,
}

/// A parameter or buffer a layer needs, before allocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Running statistics are stored like parameters but never receive
    /// gradients.
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slot; panics on a duplicate name.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> usize {
        let name = name.into();
        assert!(self.slot(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        self.names.len() - 1
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.slot(name).map(|s| &self.tensors[s])
    }

    pub fn is_trainable(&self, slot: usize) -> bool {
        self.trainable[slot]
    }

    /// Replaces a slot's values, keeping its shape.
    pub fn assign(&mut self, slot: usize, values: Tensor<T>) -> Result<()> {
        if values.shape() != self.tensors[slot].shape() {
            return Err(Error::Param {
                name: self.names[slot].clone(),
                message: format!(
                    "shape {:?} does not match {:?}",
                    values.shape(),
                    self.tensors[slot].shape()
                ),
            });
        }
        self.tensors[slot] = values;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
        }
    }

    /// Allocates and initializes declared parameters in declaration order.
    pub fn from_decls(decls: &[ParamDecl], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut set = Self::new();
        for d in decls {
            let n: usize = d.shape.iter().product();
            let data = match d.init {
                Init::Gaussian => (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            set.push(d.name.clone(), Tensor::from_vec(&d.shape, data), d.trainable);
        }
        set
    }

    pub fn identity_binding(&self) -> Binding {
        self.names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect()
    }
}

/// Read access to a network's parameters through its binding.
#[derive(Clone, Copy)]
pub struct ParamView<'a, T> {
    pub set: &'a ParamSet<T>,
    pub binding: &'a Binding,
}

impl<'a, T: Real> ParamView<'a, T> {
    pub fn new(set: &'a ParamSet<T>, binding: &'a Binding) -> Self {
        Self { set, binding }
    }

    pub fn slot(&self, local: &str) -> usize {
        *self
            .binding
            .get(local)
            .unwrap_or_else(|| panic!("network parameter {local} is not bound"))
    }

    pub fn get(&self, local: &str) -> &'a Tensor<T> {
        self.set.get(self.slot(local))
    }
}

/// Gradient accumulators, one per slot, allocated on first touch.
///
/// Only slots marked as wanted are accumulated; backward passes skip the
/// parameter-gradient work for everything else.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    wanted: Vec<bool>,
}

impl<T: Real> Grads<T> {
    pub fn new(set: &ParamSet<T>, wanted_slots: &[usize]) -> Self {
        let mut wanted = vec![false; set.len()];
        for &s in wanted_slots {
            wanted[s] = set.is_trainable(s);
        }
        Self {
            grads: vec![None; set.len()],
            wanted,
        }
    }

    /// Gradients for every trainable slot.
    pub fn all(set: &ParamSet<T>) -> Self {
        let slots: Vec<usize> = (0..set.len()).collect();
        Self::new(set, &slots)
    }

    pub fn wants(&self, slot: usize) -> bool {
        self.wanted[slot]
    }

    /// Mutable accumulator for `slot`, zero-initialized with `shape`.
    pub fn entry(&mut self, slot: usize, shape: &[usize]) -> &mut Tensor<T> {
        self.grads[slot].get_or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn get(&self, slot: usize) -> Option<&Tensor<T>> {
        self.grads[slot].as_ref()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn touched(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

/// Parameters of a single network, keyed by local name.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub params: ParamSet<f32>,
    pub seed: u64,
}

impl NetworkParams {
    pub fn binding(&self) -> Binding {
        self.params.identity_binding()
    }
}

/// Two networks whose tied parameters share storage.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledParams {
    pub params: ParamSet<f32>,
    pub view_a: Binding,
    pub view_b: Binding,
}

/// Merges two networks into one store, aliasing every name in `tie_list`.
///
/// Untied slots are renamed `<prefix_a>.<name>` / `<prefix_b>.<name>`;
/// tied ones `<prefix_tied>.<name>` and take their initial value from `a`.
pub fn tie_parameters(
    a: &NetworkParams,
    b: &NetworkParams,
    tie_list: &[String],
    prefixes: [&str; 3],
) -> Result<CoupledParams> {
    let [pa, pb, pt] = prefixes;
    for name in tie_list {
        let ta = a.params.by_name(name);
        let tb = b.params.by_name(name);
        match (ta, tb) {
            (Some(x), Some(y)) if x.shape() == y.shape() => {}
            (Some(x), Some(y)) => {
                return Err(Error::Param {
                    name: name.clone(),
                    message: format!("cannot tie shapes {:?} and {:?}", x.shape(), y.shape()),
                })
            }
            _ => {
                return Err(Error::Param {
                    name: name.clone(),
                    message: "tied parameter missing from one network".into(),
                })
            }
        }
    }
    let tied = |n: &str| tie_list.iter().any(|t| t == n);
    let mut params = ParamSet::new();
    let mut view_a = Binding::new();
    let mut view_b = Binding::new();
    for (slot, name) in a.params.names().iter().enumerate() {
        let prefix = if tied(name) { pt } else { pa };
        let s = params.push(
            format!("{prefix}.{name}"),
            a.params.get(slot).clone(),
            a.params.is_trainable(slot),
        );
        view_a.insert(name.clone(), s);
    }
    for (slot, name) in b.params.names().iter().enumerate() {
        let s = if tied(name) {
            view_a[name.as_str()]
        } else {
            params.push(
                format!("{pb}.{name}"),
                b.params.get(slot).clone(),
                b.params.is_trainable(slot),
            )
        };
        view_b.insert(name.clone(), s);
    }
    Ok(CoupledParams {
        params,
        view_a,
        view_b,
    })
}
