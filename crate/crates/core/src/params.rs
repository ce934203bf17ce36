//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn uniform(path: impl Into<String>, shape: impl Into<Vec<usize>>, fan_in: usize) -> Self {
        ParamSpec {
            path: path.into(),
            shape: shape.into(),
            init: Init::Uniform { fan_in },
        }
    }

    pub fn constant(path: impl Into<String>, shape: impl Into<Vec<usize>>, value: f64) -> Self {
        ParamSpec {
            path: path.into(),
            shape: shape.into(),
            init: Init::Constant(value),
        }
    }
}

/// Every learnable tensor of the network, keyed by a dotted path such as
/// `block0.joint.attn.wq`. Iteration order is the lexical order of paths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkParams {
    tensors: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeded initialisation; specs are drawn in the order given.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Constant(v) => vec![v; n],
            };
            let t = Tensor::new(spec.shape.clone(), data)
                .expect("parameter specs have positive dims")
                .with_grad();
            tensors.insert(spec.path.clone(), t);
        }
        NetworkParams { tensors }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar parameters whose path does not start with any of `prefixes`.
    pub fn count_excluding(&self, prefixes: &[&str]) -> usize {
        self.tensors
            .iter()
            .filter(|(p, _)| !prefixes.iter().any(|pre| p.starts_with(pre)))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Path of the first parameter (in path order) holding a non-finite
    /// value or gradient.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors.iter().find_map(|(p, t)| {
            let bad_grad = t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()));
            (!t.is_finite() || bad_grad).then(|| p.clone())
        })
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(p, t)| (p.clone(), tape.leaf(t)))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients collected on `tape` into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (path, var) in &bound.vars {
            if let Some(g) = tape.grad(*var) {
                self.get_mut(path)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Parameters registered on one tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{path}`")))
    }

    /// Variant of [`Bound::get`] that yields `None` for absent parameters.
    pub fn try_get(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let specs = vec![
            ParamSpec::uniform("a", [4, 25], 25),
            ParamSpec::constant("b", [3], 0.5),
        ];
        let p1 = NetworkParams::init(&specs, 9);
        let p2 = NetworkParams::init(&specs, 9);
        let p3 = NetworkParams::init(&specs, 10);
        assert_eq!(p1, p2);
        assert_ne!(p1.get("a").unwrap().data(), p3.get("a").unwrap().data());
        assert!(p1.get("a").unwrap().data().iter().all(|v| v.abs() <= 0.2));
        assert_eq!(p1.get("b").unwrap().data(), &[0.5; 3]);
        assert_eq!(p1.count(), 103);
        assert_eq!(p1.count_excluding(&["a"]), 3);
    }

    #[test]
    fn grads_flow_back_into_params() {
        let mut params = NetworkParams::init(&[ParamSpec::constant("w", [2], 3.0)], 0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let w = bound.get("w").unwrap();
        let sq = tape.square(w);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        params.accumulate_grads(&tape, &bound).unwrap();
        assert_eq!(params.get("w").unwrap().grad().unwrap(), &[6.0, 6.0]);
        assert!(params.first_non_finite().is_none());
        params.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
        assert_eq!(params.first_non_finite().as_deref(), Some("w"));
    }
}
