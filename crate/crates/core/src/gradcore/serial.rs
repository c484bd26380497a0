use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One named tensor as stored on disk. Values are widened to `f64`, which is
/// exact for both supported scalar types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn of<S: Scalar>(name: &str, t: &Tensor<S>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let t = Tensor::<S>::from_f64(&self.shape, &self.data)
            .map_err(|e| Error::Format(format!("tensor `{}`: {e}", self.name)))?;
        // Narrowing must not lose bits, or the round trip would be silent.
        if t.data().iter().zip(&self.data).any(|(a, b)| a.to_f64_lossy().to_bits() != b.to_bits()) {
            return Err(Error::Format(format!(
                "tensor `{}` is not representable as {}",
                self.name,
                S::NAME
            )));
        }
        Ok(t)
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.iter().map(|(_, n, t)| TensorRecord::of(n, t)).collect()
    }

    /// Overwrites every parameter from `records`, which must name exactly the
    /// registered parameters in registration order with matching shapes.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Format(format!(
                "{} tensors on disk, {} parameters registered",
                records.len(),
                self.len()
            )));
        }
        let ids: Vec<_> = self.ids().collect();
        let mut fresh = Vec::with_capacity(ids.len());
        for (id, r) in ids.iter().zip(records) {
            if self.name(*id) != r.name || self.get(*id).shape() != r.shape.as_slice() {
                return Err(Error::Format(format!(
                    "expected `{}` {:?}, found `{}` {:?}",
                    self.name(*id),
                    self.get(*id).shape(),
                    r.name,
                    r.shape
                )));
            }
            fresh.push(r.to_tensor::<S>()?);
        }
        for (id, t) in ids.into_iter().zip(fresh) {
            *self.get_mut(id) = t;
        }
        Ok(())
    }
}
