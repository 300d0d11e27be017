//! Named parameter buffers living outside any tape.
//!
//! A [`ParamSet`] is the durable state of a model: plain f64 arrays keyed by
//! name, in sorted-name order everywhere (iteration, checksums, checkpoint
//! manifests), plus gradient accumulators filled from tape backward passes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::tensor::Tape;

/// One named parameter array with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn from_data(data: Vec<f64>, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let n = data.len();
        Param { shape: shape.to_vec(), data, grad: vec![0.0; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_data(vec![0.0; shape.iter().product()], shape)
    }

    pub fn filled(value: f64, shape: &[usize]) -> Self {
        Self::from_data(vec![value; shape.iter().product()], shape)
    }
}

/// Sorted collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    inner: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, param: Param) -> Result<()> {
        if self.inner.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.inner.insert(name.to_string(), param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.inner
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.inner
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.inner.contains_key(name)
    }

    /// Iterate in sorted-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.inner.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.inner.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn coordinate_count(&self) -> usize {
        self.inner.values().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.inner.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add the tape's parameter gradients into the accumulators.
    /// Names bound on the tape must exist here.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, grad) in tape.param_grads() {
            let p = self.get_mut(name)?;
            if p.grad.len() != grad.len() {
                return Err(Error::Contract(format!(
                    "gradient length mismatch for {name:?}: {} vs {}",
                    p.grad.len(),
                    grad.len()
                )));
            }
            for (a, g) in p.grad.iter_mut().zip(grad) {
                *a += g;
            }
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and little-endian data bytes, in sorted
    /// order. Used for the frozen-teacher invariant.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (name, p) in &self.inner {
            h.update(name.as_bytes());
            h.update(&[0]);
            for &d in &p.shape {
                h.update(&(d as u64).to_le_bytes());
            }
            for &v in &p.data {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    /// True when every data value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.values().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Param::zeros(&[2])).unwrap();
        assert!(ps.insert("w", Param::zeros(&[2])).is_err());
    }

    #[test]
    fn checksum_tracks_data_changes() {
        let mut ps = ParamSet::new();
        ps.insert("w", Param::from_data(vec![1.0, 2.0], &[2])).unwrap();
        let before = ps.checksum();
        ps.get_mut("w").unwrap().data[0] = 1.5;
        assert_ne!(before, ps.checksum());
        ps.get_mut("w").unwrap().data[0] = 1.0;
        assert_eq!(before, ps.checksum());
    }

    #[test]
    fn grads_accumulate_from_tape() {
        let mut ps = ParamSet::new();
        ps.insert("x", Param::from_data(vec![2.0], &[1])).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param("x", ps.get("x").unwrap()).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.reduce_sum(sq, 0).unwrap();
            tape.backward(loss).unwrap();
            ps.accumulate_grads(&tape).unwrap();
        }
        assert_eq!(ps.get("x").unwrap().grad, vec![8.0]); // 2 passes of d(x^2) = 4
    }
}
