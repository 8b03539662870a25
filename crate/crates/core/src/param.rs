//! Learnable parameters and their storage.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// How a parameter is initialized when a [`ParamBuilder`] is materialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Kaiming-uniform on fan-in: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    /// Unit-gain uniform on fan-in: `b = sqrt(3 / fan_in)`.
    LecunUniform { fan_in: usize },
    /// Uniform in `[-bound, bound)`.
    Uniform { bound: f64 },
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Declares parameters without allocating them. Models register their
/// weights here; [`ParamBuilder::build`] then materializes a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Run `f` with `name` pushed onto the naming scope.
    pub fn scope<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn build(&self, rng: &mut Rng) -> ParamStore {
        let params = self
            .specs
            .iter()
            .map(|s| {
                let value = match s.init {
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::KaimingUniform { fan_in } => {
                        let b = (6.0 / fan_in.max(1) as f64).sqrt();
                        Tensor::from_fn(&s.shape, |_| rng.range(-b, b))
                    }
                    Init::LecunUniform { fan_in } => {
                        let b = (3.0 / fan_in.max(1) as f64).sqrt();
                        Tensor::from_fn(&s.shape, |_| rng.range(-b, b))
                    }
                    Init::Uniform { bound } => Tensor::from_fn(&s.shape, |_| rng.range(-bound, bound)),
                };
                Parameter {
                    name: s.name.clone(),
                    grad: Tensor::zeros(&s.shape),
                    value,
                }
            })
            .collect();
        ParamStore { params }
    }
}

/// Owns every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn from_params(params: Vec<Parameter>) -> Self {
        ParamStore { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add a set of gradients (as returned by a backward pass) into `grad`.
    pub fn accumulate(&mut self, grads: &crate::tape::ParamGrads) {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Set every value of every parameter to zero.
    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
