//! Dense f64 tensor value type.
//!
//! `Tensor` is the single numeric currency of the crate: action chunks,
//! noise, velocities and scores are all flat f64 tensors of rank 0..=2.
//! Instances are immutable after construction and every constructor and
//! operation rejects non-finite entries, so a `Tensor` in hand is finite.
//!
//! Differentiable ops live on the tape in [`crate::autodiff`]; the methods
//! here are the plain (untracked) ops used by samplers, combiners and
//! environments.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Build a tensor, checking the shape/length contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> CoreResult<Self> {
        if numel(&shape) != data.len() {
            return Err(CoreError::Shape {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("new")?;
        Ok(t)
    }

    /// Rank-1 tensor from a value list.
    pub fn from_vec(data: Vec<f64>) -> CoreResult<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> CoreResult<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Standard-normal sample of the given shape.
    pub fn standard_normal(shape: Vec<usize>, rng: &mut Rng) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizer updates. Everything else treats tensors
    /// as immutable after construction.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> CoreResult<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(CoreError::Contract(alloc::format!(
                "item() on tensor of {} elements",
                self.data.len()
            )))
        }
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> CoreResult<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::Numeric { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> CoreResult<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(CoreError::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> CoreResult<Tensor> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> CoreResult<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> CoreResult<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> CoreResult<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> CoreResult<Tensor> {
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a * k).collect(),
        };
        t.check_finite("scale")?;
        Ok(t)
    }

    pub fn dot(&self, other: &Tensor) -> CoreResult<f64> {
        self.same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|&a| a * a).sum())
    }

    /// Clamp entries to `[lo, hi]`, returning the result and how many
    /// entries were clipped.
    pub fn clamp(&self, lo: f64, hi: f64) -> (Tensor, usize) {
        let mut clipped = 0;
        let data = self
            .data
            .iter()
            .map(|&a| {
                if a < lo {
                    clipped += 1;
                    lo
                } else if a > hi {
                    clipped += 1;
                    hi
                } else {
                    a
                }
            })
            .collect();
        (
            Tensor {
                shape: self.shape.clone(),
                data,
            },
            clipped,
        )
    }

    /// Re-validate invariants, e.g. after deserializing.
    pub fn validate(&self) -> CoreResult<()> {
        if numel(&self.shape) != self.data.len() {
            return Err(CoreError::Shape {
                op: "validate",
                left: self.shape.clone(),
                right: vec![self.data.len()],
            });
        }
        self.check_finite("validate")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn new_checks_shape_product() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, CoreError::Shape { .. }));
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        // empty shape = rank-0 scalar
        assert!(Tensor::new(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::from_vec(vec![1.0, f64::NAN]).unwrap_err();
        assert_eq!(err, CoreError::Numeric { op: "new" });
        let err = Tensor::from_vec(vec![f64::INFINITY]).unwrap_err();
        assert_eq!(err, CoreError::Numeric { op: "new" });
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2]);
        let b = Tensor::zeros(vec![3]);
        match a.add(&b).unwrap_err() {
            CoreError::Shape { op, left, right } => {
                assert_eq!(op, "add");
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn clamp_counts_clipped_entries() {
        let t = Tensor::from_vec(vec![-5.0, 0.0, 5.0]).unwrap();
        let (c, n) = t.clamp(-3.0, 3.0);
        assert_eq!(c.data(), &[-3.0, 0.0, 3.0]);
        assert_eq!(n, 2);
    }

    #[test]
    fn standard_normal_is_seed_deterministic() {
        let mut r1 = Rng::seed_from_u64(3);
        let mut r2 = Rng::seed_from_u64(3);
        let a = Tensor::standard_normal(vec![16], &mut r1);
        let b = Tensor::standard_normal(vec![16], &mut r2);
        assert_eq!(a, b);
    }
}
