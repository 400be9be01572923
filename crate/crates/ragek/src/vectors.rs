//! Dense and sparse gradient vector types and parameter-server aggregation.
//!
//! A [`GradientVector`] is a flat, length-`d` view of a gradient (or of the
//! parameter vector itself). A [`SparseUpdate`] is the on-wire payload a
//! client sends in a global round: the coordinates it was asked for and the
//! values it reports on them.

use crate::error::{Error, Result};

/// Dense length-`d` vector of 64-bit reals. All entries stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in vector".into()));
        }
        Ok(GradientVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        GradientVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &GradientVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::structural(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

/// Sparse client payload: values on the round's requested indices.
///
/// Indices are strictly increasing, all below `dim`, and always a subset of
/// the `requested` set the parameter server asked for.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    dim: usize,
    entries: Vec<(usize, f64)>,
    requested: Vec<usize>,
}

impl SparseUpdate {
    /// Builds an update, checking the structural invariants. `requested`
    /// must be sorted ascending; entries are sorted internally.
    pub fn new(dim: usize, mut entries: Vec<(usize, f64)>, requested: Vec<usize>) -> Result<Self> {
        entries.sort_by_key(|&(i, _)| i);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::structural(format!("duplicate index {}", w[0].0)));
            }
        }
        for w in requested.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::structural("requested set not strictly increasing"));
            }
        }
        if let Some(&(i, _)) = entries.last() {
            if i >= dim {
                return Err(Error::structural(format!("index {i} out of range for dim {dim}")));
            }
        }
        if let Some(&i) = requested.last() {
            if i >= dim {
                return Err(Error::structural(format!(
                    "requested index {i} out of range for dim {dim}"
                )));
            }
        }
        for &(i, _) in &entries {
            if requested.binary_search(&i).is_err() {
                return Err(Error::structural(format!("entry index {i} not in requested set")));
            }
        }
        Ok(SparseUpdate {
            dim,
            entries,
            requested,
        })
    }

    /// Restriction of a dense vector to an index set (the index set becomes
    /// both the support and the requested set).
    pub fn from_dense(g: &GradientVector, indices: &[usize]) -> Result<Self> {
        let entries = indices.iter().map(|&i| (i, g.values()[i])).collect();
        SparseUpdate::new(g.dim(), entries, indices.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    /// Support of the update, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|&(i, _)| i).collect()
    }

    pub fn requested(&self) -> &[usize] {
        &self.requested
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum()
    }
}

/// Expands a sparse update to a dense vector (zeros off the support).
pub fn densify(u: &SparseUpdate) -> GradientVector {
    let mut out = GradientVector::zeros(u.dim());
    for &(i, v) in u.entries() {
        out.values_mut()[i] = v;
    }
    out
}

/// Coordinate-wise sum of sparse updates, folded in the given order.
///
/// The fold order is part of the determinism contract: floating-point
/// addition is not associative, and runs must be bit-reproducible. Callers
/// pass updates in ascending client order.
pub fn aggregate(updates: &[SparseUpdate], dim: usize) -> Result<GradientVector> {
    let mut out = GradientVector::zeros(dim);
    for u in updates {
        if u.dim() != dim {
            return Err(Error::structural(format!(
                "dimension mismatch: update has {}, expected {dim}",
                u.dim()
            )));
        }
        for &(i, v) in u.entries() {
            out.values_mut()[i] += v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(dim: usize, entries: &[(usize, f64)]) -> SparseUpdate {
        let requested: Vec<usize> = entries.iter().map(|&(i, _)| i).collect();
        SparseUpdate::new(dim, entries.to_vec(), requested).unwrap()
    }

    #[test]
    fn densify_places_values() {
        let u = update(4, &[(1, 2.5)]);
        assert_eq!(densify(&u).values(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn densify_empty() {
        let u = update(3, &[]);
        assert_eq!(densify(&u).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn densify_multiple_entries() {
        let u = update(4, &[(0, -1.0), (3, 4.0)]);
        assert_eq!(densify(&u).values(), &[-1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn aggregate_sums_coordinatewise() {
        let us = vec![update(3, &[(0, 1.0)]), update(3, &[(0, 2.0), (2, -1.0)])];
        assert_eq!(aggregate(&us, 3).unwrap().values(), &[3.0, 0.0, -1.0]);
    }

    #[test]
    fn aggregate_empty_is_zero() {
        assert_eq!(aggregate(&[], 3).unwrap().values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregate_single_update() {
        let us = vec![update(2, &[(1, 5.0)])];
        assert_eq!(aggregate(&us, 2).unwrap().values(), &[0.0, 5.0]);
    }

    #[test]
    fn aggregate_rejects_dim_mismatch() {
        let us = vec![update(2, &[(1, 5.0)])];
        assert!(aggregate(&us, 3).is_err());
    }

    #[test]
    fn rejects_duplicate_index() {
        assert!(SparseUpdate::new(4, vec![(1, 1.0), (1, 2.0)], vec![1]).is_err());
    }

    #[test]
    fn rejects_out_of_range_index() {
        assert!(SparseUpdate::new(2, vec![(2, 1.0)], vec![2]).is_err());
    }

    #[test]
    fn rejects_entry_outside_requested() {
        assert!(SparseUpdate::new(4, vec![(1, 1.0)], vec![0, 2]).is_err());
    }

    #[test]
    fn non_finite_dense_rejected() {
        assert!(GradientVector::new(vec![1.0, f64::NAN]).is_err());
    }
}
