//! Flat parameter vectors shared by models, updates, and aggregates.

use serde::{Deserialize, Serialize};

use crate::nn::NnError;

/// A flat array of model parameters or update deltas.
///
/// Values are stored at wire precision (`f32`); arithmetic that combines
/// vectors accumulates in `f64` and rounds once at the end.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f32>);

impl ParamVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Rounds each `f64` to the nearest `f32`.
    pub fn from_f64(values: &[f64]) -> Self {
        Self(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), NnError> {
        if self.dim() != expected {
            return Err(NnError::Shape {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }

    /// `self - other`, computed in f64 and rounded.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, NnError> {
        other.check_dim(self.dim())?;
        Ok(Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)) as f32)
                .collect(),
        ))
    }

    /// `self + other`, computed in f64 and rounded.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector, NnError> {
        other.check_dim(self.dim())?;
        Ok(Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| (f64::from(a) + f64::from(b)) as f32)
                .collect(),
        ))
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// L2 norm of the sub-vector at `indices`.
    pub fn restricted_l2_norm(&self, indices: &[usize]) -> f64 {
        indices
            .iter()
            .map(|&i| {
                let v = f64::from(self.0[i]);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f32>> for ParamVector {
    fn from(values: Vec<f32>) -> Self {
        Self(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_sub_round_trip_on_representable_values() {
        let a = ParamVector::new(vec![1.5, -2.25, 0.0]);
        let b = ParamVector::new(vec![0.5, 0.25, 4.0]);
        let d = a.sub(&b).unwrap();
        assert_eq!(d.as_slice(), &[1.0, -2.5, -4.0]);
        assert_eq!(b.add(&d).unwrap(), a);
    }

    #[test]
    fn mismatched_dims_are_shape_errors() {
        let a = ParamVector::zeros(3);
        let b = ParamVector::zeros(4);
        assert!(matches!(
            a.sub(&b),
            Err(NnError::Shape {
                expected: 3,
                actual: 4
            })
        ));
    }

    #[test]
    fn restricted_norm_never_exceeds_full_norm() {
        let v = ParamVector::new(vec![3.0, 4.0, 12.0]);
        assert_eq!(v.l2_norm(), 13.0);
        assert_eq!(v.restricted_l2_norm(&[0, 1]), 5.0);
        assert_eq!(v.restricted_l2_norm(&[0, 1, 2]), v.l2_norm());
    }
}
