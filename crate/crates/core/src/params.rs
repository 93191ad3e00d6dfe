use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat vector of model parameters. The unit that clients send back and that
/// the server averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    /// Largest `|a - b| / max(|a|, |b|, floor)` over coordinates.
    pub fn max_relative_diff(&self, other: &ParamVector, floor: f64) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Elementwise `theta * w + (1 - theta) * w2`. `theta` may lie outside `[0, 1]`.
///
/// The endpoints are exact: `theta = 1` gives `w` and `theta = 0` gives `w2`
/// bit for bit.
pub fn interpolate(w: &ParamVector, w2: &ParamVector, theta: f64) -> Result<ParamVector> {
    check_len(w.len(), w2.len())?;
    let rest = 1.0 - theta;
    Ok(ParamVector(
        w.iter()
            .zip(w2.iter())
            .map(|(a, b)| theta * a + rest * b)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let w = ParamVector::from(vec![0.1, -3.7, 1e-300, 5.5]);
        let w2 = ParamVector::from(vec![2.2, 0.3, -7.0, 1e10]);
        assert_eq!(interpolate(&w, &w2, 1.0).unwrap(), w);
        assert_eq!(interpolate(&w, &w2, 0.0).unwrap(), w2);

        let a = ParamVector::from(vec![2.0, 0.0]);
        let b = ParamVector::from(vec![0.0, 2.0]);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn interpolate_extrapolates() {
        let a = ParamVector::from(vec![1.0]);
        let b = ParamVector::from(vec![0.0]);
        assert_eq!(interpolate(&a, &b, -0.2).unwrap().as_slice(), &[-0.2]);
        assert_eq!(interpolate(&a, &b, 1.2).unwrap().as_slice(), &[1.2]);
    }

    #[test]
    fn interpolate_rejects_length_mismatch() {
        let a = ParamVector::zeros(3);
        let b = ParamVector::zeros(2);
        assert!(matches!(
            interpolate(&a, &b, 0.5),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn axpy_and_scale() {
        let mut a = ParamVector::from(vec![1.0, 2.0]);
        a.axpy(-0.5, &ParamVector::from(vec![2.0, 2.0])).unwrap();
        assert_eq!(a.as_slice(), &[0.0, 1.0]);
        a.scale(3.0);
        assert_eq!(a.as_slice(), &[0.0, 3.0]);
        assert!(a.axpy(1.0, &ParamVector::zeros(5)).is_err());
    }
}
