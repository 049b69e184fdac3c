//! Flat parameter vectors and the additive deltas exchanged between workers.

use std::collections::HashMap;

use crate::scalar::Scalar;

/// Flat dense array of model parameters; the unit of cache state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    /// Element-wise addition of a delta. Panics if a sparse index is out of
    /// range or a dense delta has a different dimension.
    pub fn add_delta(&mut self, delta: &ParamDelta<T>) {
        match delta {
            ParamDelta::Dense(d) => {
                assert_eq!(d.len(), self.values.len(), "delta dimension mismatch");
                for (v, d) in self.values.iter_mut().zip(d.iter()) {
                    *v += *d;
                }
            }
            ParamDelta::Sparse(entries) => {
                for &(idx, d) in entries {
                    self.values[idx] += d;
                }
            }
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| *a * *b)
            .sum()
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    /// All values finite?
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a hash over the exact bit patterns; equal iff trajectories are
    /// bit-identical.
    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv1a_init();
        for v in &self.values {
            h = fnv1a_u64(h, v.bits());
        }
        h
    }
}

/// A parameter update: dense vector or sparse index -> value pairs.
///
/// Sparse entries are sorted by index with unique indices, so applying a
/// delta is deterministic regardless of how it was accumulated.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamDelta<T> {
    Dense(Vec<T>),
    Sparse(Vec<(usize, T)>),
}

impl<T: Scalar> ParamDelta<T> {
    pub fn zeros_dense(dim: usize) -> Self {
        ParamDelta::Dense(vec![T::zero(); dim])
    }

    pub fn nnz(&self) -> usize {
        match self {
            ParamDelta::Dense(d) => d.len(),
            ParamDelta::Sparse(e) => e.len(),
        }
    }

    /// Largest index touched, if any.
    pub fn max_index(&self) -> Option<usize> {
        match self {
            ParamDelta::Dense(d) => d.len().checked_sub(1),
            ParamDelta::Sparse(e) => e.last().map(|&(i, _)| i),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ParamDelta::Dense(d) => d.iter().all(|v| v.is_finite()),
            ParamDelta::Sparse(e) => e.iter().all(|(_, v)| v.is_finite()),
        }
    }

    pub fn scale(&mut self, factor: T) {
        match self {
            ParamDelta::Dense(d) => {
                for v in d.iter_mut() {
                    *v *= factor;
                }
            }
            ParamDelta::Sparse(e) => {
                for (_, v) in e.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    pub fn densify(&self, dim: usize) -> Vec<T> {
        match self {
            ParamDelta::Dense(d) => {
                assert_eq!(d.len(), dim);
                d.clone()
            }
            ParamDelta::Sparse(e) => {
                let mut out = vec![T::zero(); dim];
                for &(i, v) in e {
                    out[i] += v;
                }
                out
            }
        }
    }
}

/// Accumulates sparse contributions, merging repeated indices, then emits a
/// canonical sorted [`ParamDelta::Sparse`].
pub struct SparseBuilder<T> {
    entries: HashMap<usize, T>,
}

impl<T: Scalar> SparseBuilder<T> {
    pub fn new() -> Self {
        Self {
            entries: HashMap::new(),
        }
    }

    pub fn add(&mut self, index: usize, value: T) {
        *self.entries.entry(index).or_insert_with(T::zero) += value;
    }

    /// Current accumulated value at an index (zero if untouched).
    pub fn get(&self, index: usize) -> T {
        self.entries.get(&index).copied().unwrap_or_else(T::zero)
    }

    pub fn finish(self) -> ParamDelta<T> {
        let mut entries: Vec<(usize, T)> = self.entries.into_iter().collect();
        entries.sort_unstable_by_key(|&(i, _)| i);
        ParamDelta::Sparse(entries)
    }
}

impl<T: Scalar> Default for SparseBuilder<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub(crate) fn fnv1a_init() -> u64 {
    FNV_OFFSET
}

pub(crate) fn fnv1a_u64(mut h: u64, v: u64) -> u64 {
    for byte in v.to_le_bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a over a byte string; stable across platforms and releases.
pub fn fnv1a_str(s: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for byte in s.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_apply_matches_densified_apply() {
        let mut builder = SparseBuilder::new();
        builder.add(3, 2.0);
        builder.add(0, -1.0);
        builder.add(3, 0.5);
        let delta = builder.finish();
        assert_eq!(
            delta,
            ParamDelta::Sparse(vec![(0, -1.0f64), (3, 2.5f64)])
        );

        let mut a = ParamVector::from_vec(vec![1.0f64; 5]);
        let mut b = a.clone();
        a.add_delta(&delta);
        b.add_delta(&ParamDelta::Dense(delta.densify(5)));
        assert_eq!(a, b);
    }

    #[test]
    fn fingerprint_detects_single_bit_change() {
        let a = ParamVector::from_vec(vec![1.0f64, 2.0, 3.0]);
        let mut b = a.clone();
        b.as_mut_slice()[1] = 2.0 + f64::EPSILON * 2.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }

    #[test]
    fn works_at_f32() {
        let mut v = ParamVector::<f32>::zeros(3);
        v.add_delta(&ParamDelta::Sparse(vec![(2, 1.5f32)]));
        assert_eq!(v.as_slice(), &[0.0, 0.0, 1.5f32]);
    }
}
