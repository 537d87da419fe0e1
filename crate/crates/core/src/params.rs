use std::ops::{Deref, DerefMut};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::real::Real;

/// Flat vector of model parameters (or of anything shaped like them:
/// gradients, optimizer moments, deltas).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector<T>(Vec<T>);

impl<T: Real> ParamVector<T> {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![T::zero(); len])
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm, accumulated left to right.
    pub fn norm(&self) -> T {
        squared_norm(std::iter::once(self.as_slice())).sqrt()
    }

    pub fn check_len(&self, what: &str, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::length_mismatch(what, expected, self.len()));
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.bits_u64() == b.bits_u64())
    }

    /// Short hex digest of the exact bit patterns; used to compare trajectories.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for x in &self.0 {
            hasher.update(x.bits_u64().to_le_bytes());
        }
        let out = hasher.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * T::PRECISION.width());
        for &x in &self.0 {
            x.to_le_bytes_vec(&mut out);
        }
        out
    }
}

impl<T> Deref for ParamVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for ParamVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T> From<Vec<T>> for ParamVector<T> {
    fn from(v: Vec<T>) -> Self {
        ParamVector(v)
    }
}

/// Sum of squares over consecutive slices with one running accumulator, so a
/// vector split into contiguous pieces yields the same bits as the whole.
pub fn squared_norm<'a, T: Real>(pieces: impl IntoIterator<Item = &'a [T]>) -> T {
    let mut acc = T::zero();
    for piece in pieces {
        for &x in piece {
            acc += x * x;
        }
    }
    acc
}
