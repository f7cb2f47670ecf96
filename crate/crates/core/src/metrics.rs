use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::math;

/// `||G_hat - G||_F^2 / ||G||_F^2`.
pub fn nmse(g_hat: &ComplexMatrix, g: &ComplexMatrix) -> Result<f64> {
    if g_hat.shape() != g.shape() {
        return Err(Error::shape("nmse", format!("{:?} vs {:?}", g_hat.shape(), g.shape())));
    }
    let den = g.frobenius_sqr();
    if !(den > 0.0) {
        return Err(Error::Undefined("reference channel is zero".into()));
    }
    Ok(g_hat.sub(g)?.frobenius_sqr() / den)
}

/// Mean, sample standard deviation and count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Undefined("no samples".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(Summary {
        mean,
        std: math::sqrt(var),
        count: values.len(),
    })
}

/// Mean NMSE over paired estimates.
pub fn mean_nmse(pairs: &[(ComplexMatrix, ComplexMatrix)]) -> Result<f64> {
    let v: Vec<f64> = pairs.iter().map(|(a, b)| nmse(a, b)).collect::<Result<_>>()?;
    Ok(summarize(&v)?.mean)
}
