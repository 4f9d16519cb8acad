use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Which side of the privacy partition a tensor lives on. `Federated`
/// tensors are aggregated by the server; `Private` tensors never leave the
/// client that owns them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Federated,
    Private,
}

impl ParamTag {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            ParamTag::Federated => 0,
            ParamTag::Private => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ParamTag::Federated),
            1 => Ok(ParamTag::Private),
            other => Err(Error::Format(format!("unknown parameter tag byte {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub tag: ParamTag,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix, tag: ParamTag) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamTensor {
            name: name.into(),
            value,
            grad,
            tag,
        }
    }
}

/// Named tensors in sorted-name order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, tag: ParamTag) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Schema(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name.clone(), ParamTensor::new(name, value, tag));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .map(|t| &t.value)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.tensors
            .get_mut(name)
            .map(|t| &mut t.value)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .map(|t| &t.grad)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.tensors
            .get_mut(name)
            .map(|t| &mut t.grad)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn names_with_tag(&self, tag: ParamTag) -> Vec<String> {
        self.iter().filter(|t| t.tag == tag).map(|t| t.name.clone()).collect()
    }

    /// Copy of the tensors carrying `tag`, with zeroed grads.
    pub fn subset(&self, tag: ParamTag) -> ParamSet {
        let tensors = self
            .iter()
            .filter(|t| t.tag == tag)
            .map(|t| (t.name.clone(), ParamTensor::new(t.name.clone(), t.value.clone(), t.tag)))
            .collect();
        ParamSet { tensors }
    }

    pub fn federated(&self) -> ParamSet {
        self.subset(ParamTag::Federated)
    }

    /// Same names and tags.
    pub fn is_partition_compatible(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.name == b.name && a.tag == b.tag)
    }

    /// Same names, tags and shapes; returns a descriptive schema error otherwise.
    pub fn check_schema(&self, other: &ParamSet) -> Result<()> {
        if !self.is_partition_compatible(other) {
            let mine: Vec<_> = self.names().collect();
            let theirs: Vec<_> = other.names().collect();
            return Err(Error::Schema(format!("tensor sets differ: {mine:?} vs {theirs:?}")));
        }
        for (a, b) in self.iter().zip(other.iter()) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::Schema(format!(
                    "tensor {:?} has shape {:?} vs {:?}",
                    a.name,
                    a.value.shape(),
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Overwrites every tensor of `src` into `self` by name. Shapes and tags must agree.
    pub fn copy_values_from(&mut self, src: &ParamSet) -> Result<()> {
        for t in src.iter() {
            let dst = self
                .tensors
                .get_mut(&t.name)
                .ok_or_else(|| Error::Schema(format!("missing tensor {:?}", t.name)))?;
            if dst.tag != t.tag {
                return Err(Error::Schema(format!("tag mismatch on {:?}", t.name)));
            }
            dst.value.check_same_shape(&t.value).map_err(|e| Error::Schema(format!("{}: {e}", t.name)))?;
            dst.value.clone_from(&t.value);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.grad.scale(s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.iter().map(|t| t.grad.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn value_norm(&self) -> f64 {
        self.iter().map(|t| t.value.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|t| t.value.len()).sum()
    }

    /// Bitwise equality of names, tags and values.
    pub fn values_bit_eq(&self, other: &ParamSet) -> bool {
        self.is_partition_compatible(other)
            && self.iter().zip(other.iter()).all(|(a, b)| a.value.bit_eq(&b.value))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|t| t.value.is_finite() && t.grad.is_finite())
    }
}

/// Global-norm clipping across every gradient in the set. Returns the
/// applied scale factor (1.0 when nothing was clipped).
pub fn clip_gradients(params: &mut ParamSet, threshold: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > threshold {
        let scale = threshold / norm;
        params.scale_grads(scale);
        scale
    } else {
        1.0
    }
}

/// Plain SGD: `value -= lr * grad`, then grads are reset to zero.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Param(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    for t in params.iter_mut() {
        for (v, g) in t.value.data_mut().iter_mut().zip(t.grad.data_mut()) {
            *v -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn set_with_grads(grads: &[Vec<f64>]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (i, g) in grads.iter().enumerate() {
            let name = format!("t{i}");
            ps.insert(&name, Matrix::zeros(1, g.len()), ParamTag::Federated).unwrap();
            ps.grad_mut(&name).unwrap().data_mut().copy_from_slice(g);
        }
        ps
    }

    #[test]
    fn duplicate_names_rejected_and_order_sorted() {
        let mut ps = ParamSet::new();
        ps.insert("b", Matrix::zeros(1, 1), ParamTag::Federated).unwrap();
        ps.insert("a", Matrix::zeros(1, 1), ParamTag::Private).unwrap();
        assert!(ps.insert("a", Matrix::zeros(1, 1), ParamTag::Private).is_err());
        assert_eq!(ps.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(ps.federated().names().collect::<Vec<_>>(), vec!["b"]);
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let mut ps = set_with_grads(&[vec![1.5, 2.0]]);
        assert_eq!(clip_gradients(&mut ps, 5.0), 1.0);
        assert_eq!(ps.grad("t0").unwrap().data(), &[1.5, 2.0]);
    }

    #[test]
    fn clip_halves_norm_ten_vector() {
        let mut ps = set_with_grads(&[vec![10.0, 0.0]]);
        assert_eq!(clip_gradients(&mut ps, 5.0), 0.5);
        assert_eq!(ps.grad("t0").unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn clip_is_global_across_tensors() {
        let mut ps = set_with_grads(&[vec![3.0, 4.0], vec![12.0], vec![-1.0, 2.0, 0.5]]);
        let pre: f64 = [9.0, 16.0, 144.0, 1.0, 4.0, 0.25f64].iter().sum::<f64>().sqrt();
        clip_gradients(&mut ps, 5.0);
        assert!((ps.grad_norm() - pre.min(5.0)).abs() < 1e-9);
    }

    #[test]
    fn sgd_arithmetic_and_reset() {
        let mut ps = ParamSet::new();
        ps.insert("w", Matrix::new(1, 2, vec![1.0, 1.0]).unwrap(), ParamTag::Federated).unwrap();
        ps.grad_mut("w").unwrap().data_mut().copy_from_slice(&[2.0, 0.0]);
        sgd_step(&mut ps, 0.01).unwrap();
        assert_eq!(ps.value("w").unwrap().data(), &[0.98, 1.0]);
        assert_eq!(ps.grad("w").unwrap().data(), &[0.0, 0.0]);
        assert!(sgd_step(&mut ps, f64::NAN).is_err());
    }

    #[test]
    fn two_small_steps_equal_one_double_step() {
        let g = [0.7, -1.3, 2.2];
        let mk = || {
            let mut ps = ParamSet::new();
            ps.insert("w", Matrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap(), ParamTag::Federated).unwrap();
            ps
        };
        let mut a = mk();
        for _ in 0..2 {
            a.grad_mut("w").unwrap().data_mut().copy_from_slice(&g);
            sgd_step(&mut a, 0.01).unwrap();
        }
        let mut b = mk();
        b.grad_mut("w").unwrap().data_mut().copy_from_slice(&g);
        sgd_step(&mut b, 0.02).unwrap();
        for (x, y) in a.value("w").unwrap().data().iter().zip(b.value("w").unwrap().data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent(seed in any::<u64>(), threshold in 0.1f64..10.0) {
            let mut rng = seeded(seed);
            let grads: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-1e3..1e3)).collect())
                .collect();
            let mut once = set_with_grads(&grads);
            clip_gradients(&mut once, threshold);
            let mut twice = once.clone();
            clip_gradients(&mut twice, threshold);
            for (a, b) in once.iter().zip(twice.iter()) {
                for (x, y) in a.grad.data().iter().zip(b.grad.data()) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
            prop_assert!(once.is_finite());
        }

        #[test]
        fn zero_lr_is_identity(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let vals: Vec<f64> = (0..6).map(|_| rng.random_range(-1e3..1e3)).collect();
            let mut ps = ParamSet::new();
            ps.insert("w", Matrix::new(2, 3, vals).unwrap(), ParamTag::Federated).unwrap();
            for g in ps.grad_mut("w").unwrap().data_mut() {
                *g = rng.random_range(-1e3..1e3);
            }
            let before = ps.clone();
            sgd_step(&mut ps, 0.0).unwrap();
            prop_assert!(ps.values_bit_eq(&before));
        }
    }
}
