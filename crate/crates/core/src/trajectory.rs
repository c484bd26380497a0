use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `horizon × dim` action sequence, row-major. Rows are planar velocity commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTrajectory {
    pub horizon: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ActionTrajectory {
    pub fn new(horizon: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if horizon == 0 || dim == 0 {
            return Err(Error::contract("trajectory needs horizon ≥ 1 and dim ≥ 1"));
        }
        if data.len() != horizon * dim {
            return Err(Error::dim(format!(
                "{horizon}×{dim} trajectory from {} values",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("trajectory has non-finite entries"));
        }
        Ok(Self { horizon, dim, data })
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            horizon,
            dim,
            data: vec![0.0; horizon * dim],
        }
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn steps(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.horizon == other.horizon
            && self.dim == other.dim
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn mse(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }
}
