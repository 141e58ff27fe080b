//! Named parameter collections and their binding into a [`Graph`].
//!
//! Every learnable or frozen tensor lives under a slash-separated path such as
//! `text/layers/0/wq` or `prompt_gen/query_tokens`. The same paths key the
//! optimizer moments, the EMA shadow and the checkpoint archive.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Mat<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, m: Mat<T>) {
        self.tensors.insert(path.into(), m);
    }

    pub fn get(&self, path: &str) -> Result<&Mat<T>> {
        self.tensors.get(path).ok_or_else(|| Error::Shape(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Mat<T>> {
        self.tensors.get_mut(path).ok_or_else(|| Error::Shape(format!("missing parameter {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Paths in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat<T>)> {
        self.tensors.iter_mut()
    }

    /// Copy of every tensor whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites tensors present in `other`; shapes must match.
    pub fn update_from(&mut self, other: &Self) -> Result<()> {
        for (k, v) in &other.tensors {
            let dst = self.get_mut(k)?;
            if dst.shape() != v.shape() {
                return Err(Error::Shape(format!("{k}: {:?} vs {:?}", dst.shape(), v.shape())));
            }
            *dst = v.clone();
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Mat::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Binds every tensor under `prefix` as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, prefix: &str, requires_grad: impl Fn(&str) -> bool) -> Bound {
        let mut vars = HashMap::new();
        for (k, v) in self.tensors.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            vars.insert(k.clone(), g.leaf(v.clone(), requires_grad(k)));
        }
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamSet`] slice.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::Shape(format!("parameter {path} is not bound")))
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
