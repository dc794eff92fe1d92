//! Parameter declaration and storage.
//!
//! Layers declare their parameters into a [`Layout`] at construction time;
//! the layout alone answers parameter-count questions. A [`ParamStore`]
//! holds the actual values in declaration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
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

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn param_count(&self) -> u64 {
        self.specs.iter().map(|s| s.numel() as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    layout: Layout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Samples every parameter from one seeded stream, in declaration order.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|spec| match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Constant(c) => Tensor::full(&spec.shape, T::from_f64(c)),
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
                }
            })
            .collect();
        ParamStore {
            layout: layout.clone(),
            tensors,
        }
    }

    pub fn zeros(layout: &Layout) -> Self {
        ParamStore {
            layout: layout.clone(),
            tensors: layout.specs.iter().map(|s| Tensor::zeros(&s.shape)).collect(),
        }
    }

    /// Wraps existing values; fails unless they match the layout exactly.
    pub fn from_tensors(layout: &Layout, tensors: Vec<Tensor<T>>) -> Result<Self, String> {
        if tensors.len() != layout.len() {
            return Err(format!(
                "expected {} parameter arrays, got {}",
                layout.len(),
                tensors.len()
            ));
        }
        for (spec, t) in layout.specs.iter().zip(&tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(format!(
                    "parameter `{}`: expected shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                ));
            }
        }
        Ok(ParamStore {
            layout: layout.clone(),
            tensors,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    /// Registers every parameter as a leaf of `g`; the result is indexed by
    /// [`ParamId::index`].
    pub fn attach(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
