//! Named trainable parameters and their gradient buffers.

use std::collections::HashMap;

use rand::Rng;

use super::matrix::Matrix;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Handle into a [`ParamSet`]; stable for the life of the set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Matrix<S>,
    pub grad: Matrix<S>,
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean uniform with half-width 1/sqrt(fan_in): projection weights,
    /// preserves the scale of unit-variance inputs.
    FanIn(usize),
    /// Zero-mean uniform with unit variance (half-width sqrt(3)): embedding
    /// rows, which are activations rather than weights.
    UnitVariance,
    /// Zero-mean uniform with an explicit half-width.
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSet<S: Scalar> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::from_fn(rows, cols, |_, _| S::ONE),
            Init::FanIn(fan_in) => {
                let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
                Matrix::uniform(rows, cols, scale, rng)
            }
            Init::UnitVariance => Matrix::uniform(rows, cols, 3f64.sqrt(), rng),
            Init::Uniform(scale) => Matrix::uniform(rows, cols, scale, rng),
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: Matrix::zeros(rows, cols),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<S> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::ZERO);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Matrix<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() {
            return Err(Error::dim("accumulate_grad", p.grad.shape(), grad.shape()));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad.data().iter()) {
            *g += *d;
        }
        Ok(())
    }

    /// Global L2 norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for p in &self.params {
            for g in p.grad.data() {
                let v = g.to_f64();
                sq += v * v;
            }
        }
        sq.sqrt()
    }

    /// Convert every value to another precision; gradients reset to zero.
    pub fn convert<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in &self.params {
            let id = ParamId(out.params.len());
            out.params.push(Parameter {
                name: p.name.clone(),
                value: p.value.map(|v| T::from_f64(v.to_f64())),
                grad: Matrix::zeros(p.value.rows(), p.value.cols()),
            });
            out.by_name.insert(p.name.clone(), id);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn register_and_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.register("w", 2, 3, Init::FanIn(3), &mut rng);
        assert_eq!(ps.get(id).value.shape(), (2, 3));
        let g = Matrix::from_fn(2, 3, |_, _| 1.0);
        ps.accumulate_grad(id, &g).unwrap();
        assert!(ps.grad_norm() > 0.0);
        ps.zero_grads();
        assert_eq!(ps.grad_norm(), 0.0);
    }

    #[test]
    fn fan_in_scale_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps: ParamSet<f32> = ParamSet::new();
        let id = ps.register("w", 16, 16, Init::FanIn(16), &mut rng);
        let bound = 1.0 / 4.0;
        assert!(ps.get(id).value.data().iter().all(|v| v.abs() <= bound));
    }
}
