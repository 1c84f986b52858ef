use std::ops::Index;

use histosynth_autograd::{Real, Tape, Tensor, Var};
use sha2::{Digest, Sha256};

/// Handle into a [`Store`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot(pub(crate) usize);

/// Named, ordered collection of tensors. Networks keep their trainable
/// weights in one store and non-trainable buffers (power-iteration vectors,
/// running statistics) in another.
#[derive(Clone, Debug, PartialEq)]
pub struct Store<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for Store<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Store<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Slot {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate tensor name {name}");
        self.names.push(name);
        self.values.push(value);
        Slot(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, s: Slot) -> &Tensor<T> {
        &self.values[s.0]
    }

    pub fn get_mut(&mut self, s: Slot) -> &mut Tensor<T> {
        &mut self.values[s.0]
    }

    pub fn name(&self, s: Slot) -> &str {
        &self.names[s.0]
    }

    pub fn find(&self, name: &str) -> Option<Slot> {
        self.names.iter().position(|n| n == name).map(Slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Store with identical layout and zero values.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Store<U> {
        Store {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Replace every value with the same-named tensor of `other`; layouts
    /// must match exactly.
    pub fn assign_from(&mut self, other: &Store<T>) -> Result<(), String> {
        if self.names != other.names {
            return Err("tensor names differ".into());
        }
        for ((name, dst), src) in self.names.iter().zip(&mut self.values).zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(format!("{name}: shape {:?} vs {:?}", dst.shape(), src.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Record every tensor on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect(),
        }
    }
}

/// Tape variables for every tensor of a [`Store`], indexable by [`Slot`].
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Bind externally created variables, in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<'t, T: Real> Index<Slot> for Bound<'t, T> {
    type Output = Var<'t, T>;
    fn index(&self, s: Slot) -> &Var<'t, T> {
        &self.vars[s.0]
    }
}
