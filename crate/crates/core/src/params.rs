//! Named parameter storage and seeded initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether decoupled weight decay applies (false for norms, biases, tokens).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Real> {
    params: Vec<ParamTensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(ParamTensor {
            name,
            value,
            grad,
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Replaces a value in place, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Checkpoint {
                name: p.name.clone(),
                detail: format!("shape {:?} does not match {:?}", value.shape(), p.value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }
}

/// Seeded initializer: truncated normal (±2σ) for projections, zeros and
/// ones for biases and norm affines.
pub struct Init {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: 0.02,
        }
    }

    pub fn trunc_normal<T: Real>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<T> {
        let std = self.std;
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
    }

    pub fn uniform<T: Real>(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("a", Tensor::zeros(vec![2]), true).unwrap();
        assert!(ps.add("a", Tensor::zeros(vec![2]), true).is_err());
    }

    #[test]
    fn grad_shape_follows_value() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Tensor::zeros(vec![3, 4]), true).unwrap();
        assert_eq!(ps.get(id).grad.shape(), &[3, 4]);
        assert_eq!(ps.num_scalars(), 12);
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let a: Tensor<f64> = Init::new(7).trunc_normal(vec![1000]);
        let b: Tensor<f64> = Init::new(7).trunc_normal(vec![1000]);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }
}
