use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distribution a parameter was drawn from at initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitSpec {
    /// Uniform in `[-bound, bound]`, `bound = sqrt(1 / fan_in)`.
    Uniform { bound: f64 },
    Constant(f64),
    /// Restored from a checkpoint.
    Loaded,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub init: InitSpec,
}

/// Named parameter tensors in a fixed, deterministic order.
#[derive(Clone, Debug, Default)]
pub struct LayerParams {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, init: InitSpec) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            init,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &*self.entries[i].value)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &*e.value)
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, replacement has {:?}",
                self.entries[i].value.shape(),
                value.shape()
            )));
        }
        self.entries[i].value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to every tensor in order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            f(i, Arc::make_mut(&mut e.value));
        }
    }

    /// Registers every tensor as a parameter leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g, '_> {
        Bound {
            params: self,
            vars: self
                .entries
                .iter()
                .map(|e| graph.param_shared(Arc::clone(&e.value)))
                .collect(),
        }
    }

    /// True when both hold the same names, shapes and bit-identical values.
    pub fn bit_equal(&self, other: &LayerParams) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Parameters registered on one computation record.
pub struct Bound<'g, 'p> {
    params: &'p LayerParams,
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g, '_> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }
}

/// Draws parameters with the default scheme: uniform `±sqrt(1/fan_in)`
/// weights and biases, unit norm scales, zero norm shifts.
pub struct ParamBuilder<'r, R: Rng> {
    params: LayerParams,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ParamBuilder {
            params: LayerParams::new(),
            rng,
        }
    }

    pub fn finish(self) -> LayerParams {
        self.params
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.params.insert(name, t, InitSpec::Uniform { bound })
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.params
            .insert(name, Tensor::full(shape, value), InitSpec::Constant(value))
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        let fan_in = c_in * k * k;
        self.uniform(&format!("{name}.w"), &[c_out, c_in, k, k], fan_in)?;
        self.uniform(&format!("{name}.b"), &[c_out], fan_in)
    }

    pub fn zero_conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
        self.constant(&format!("{name}.w"), &[c_out, c_in, k, k], 0.0)?;
        self.constant(&format!("{name}.b"), &[c_out], 0.0)
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<()> {
        self.uniform(&format!("{name}.w"), &[out, inp], inp)?;
        self.uniform(&format!("{name}.b"), &[out], inp)
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.constant(&format!("{name}.scale"), &[c], 1.0)?;
        self.constant(&format!("{name}.shift"), &[c], 0.0)
    }
}

impl<'g, 'p> Bound<'g, 'p> {
    /// Pairs `vars` (one per entry, in order) with the names of `params`.
    pub fn from_vars(params: &'p LayerParams, vars: Vec<Var<'g>>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Config(format!(
                "{} variables supplied for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        Ok(Bound { params, vars })
    }
}

/// [`crate::autodiff::finite_diff_check`] over every tensor of `params`.
pub fn finite_diff_check_params<F>(params: &LayerParams, f: F, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g, '_>) -> Result<Var<'g>>,
{
    let tensors: Vec<Tensor> = params.tensors().cloned().collect();
    crate::autodiff::finite_diff_check_many(
        |g, vars| f(g, &Bound::from_vars(params, vars.to_vec())?),
        &tensors,
        step,
    )
}
