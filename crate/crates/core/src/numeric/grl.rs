//! Gradient reversal: identity forward, `-λ · g` backward.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GrlCoefficient(f64);

impl GrlCoefficient {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Validation(format!(
                "reversal coefficient {lambda} outside [0, 1]"
            )));
        }
        Ok(GrlCoefficient(lambda))
    }

    pub const fn one() -> Self {
        GrlCoefficient(1.0)
    }

    pub const fn zero() -> Self {
        GrlCoefficient(0.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for GrlCoefficient {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        GrlCoefficient::new(v)
    }
}

impl From<GrlCoefficient> for f64 {
    fn from(c: GrlCoefficient) -> f64 {
        c.0
    }
}

pub fn grl_forward(input: &Matrix) -> Matrix {
    input.clone()
}

pub fn grl_backward(coeff: GrlCoefficient, upstream: &Matrix) -> Matrix {
    let l = coeff.value();
    upstream.map(|g| -l * g)
}
