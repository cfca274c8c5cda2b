use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// A learnable tensor with its gradient and Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let z = Tensor::zeros(value.shape());
        Param {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
        }
    }
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    /// Number of optimizer updates applied so far.
    pub adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of learnable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn entries(&self) -> Vec<ParamEntry> {
        self.iter()
            .map(|(n, p)| ParamEntry {
                name: n.to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>) -> Bound {
        Bound::from_values(
            tape,
            self.params.iter().map(|(n, p)| (n.clone(), p.value.cast())),
        )
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_frozen<S: Scalar>(&self, tape: &mut Tape<S>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, p)| (n.clone(), tape.constant(p.value.cast())))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of the bound parameters into the `grad` buffers.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients<f32>) {
        for (name, p) in self.params.iter_mut() {
            let Some(var) = bound.vars.get(name) else {
                continue;
            };
            if let Some(g) = grads.get(*var) {
                for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Writes `params/<name>.ntf`, and with `moments` also `moments/<name>.{m,v}.ntf`.
    pub fn save(&self, dir: &Path, moments: bool) -> Result<()> {
        let pdir = dir.join("params");
        std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mdir = dir.join("moments");
        if moments {
            std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        }
        for (name, p) in &self.params {
            p.value.save(pdir.join(format!("{name}.ntf")))?;
            if moments {
                p.m.save(mdir.join(format!("{name}.m.ntf")))?;
                p.v.save(mdir.join(format!("{name}.v.ntf")))?;
            }
        }
        Ok(())
    }

    /// Reads the tensors listed in `entries` from a directory written by [`save`](Self::save).
    /// Moments are loaded when present and left at zero otherwise.
    pub fn load(dir: &Path, entries: &[ParamEntry]) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in entries {
            let path = dir.join("params").join(format!("{}.ntf", e.name));
            let value = Tensor::load(&path)?;
            if value.shape() != e.shape.as_slice() {
                return Err(Error::Format {
                    path,
                    msg: format!("shape {:?}, manifest says {:?}", value.shape(), e.shape),
                });
            }
            let mut p = Param::new(value);
            let mpath = dir.join("moments").join(format!("{}.m.ntf", e.name));
            if mpath.exists() {
                p.m = Tensor::load(&mpath)?;
                p.v = Tensor::load(dir.join("moments").join(format!("{}.v.ntf", e.name)))?;
                if p.m.shape() != e.shape.as_slice() || p.v.shape() != e.shape.as_slice() {
                    return Err(Error::Format {
                        path: mpath,
                        msg: "moment shape differs from parameter".into(),
                    });
                }
            }
            store.params.insert(e.name.clone(), p);
        }
        Ok(store)
    }
}

/// Parameter handles on one tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_values<S: Scalar>(
        tape: &mut Tape<S>,
        values: impl IntoIterator<Item = (String, Tensor<S>)>,
    ) -> Self {
        let vars = values
            .into_iter()
            .map(|(n, t)| (n, tape.leaf(t)))
            .collect();
        Bound { vars }
    }

    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.register("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut s = ParamStore::new();
        s.register("x.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1))
            .unwrap();
        s.register("x.bias", Tensor::from_fn(&[2], |i| -(i as f32)))
            .unwrap();
        s.get_mut("x.bias").unwrap().m.data_mut()[1] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), true).unwrap();
        let back = ParamStore::load(dir.path(), &s.entries()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["x.weight", "x.bias"]);
    }
}
