//! Gradient compression operators: top-k, rTop-k, and the age-based rAge-k,
//! plus compression-factor analytics.
//!
//! All three keep at most `k` coordinates of the input. top-k keeps the `k`
//! largest magnitudes. rTop-k draws a uniformly random `k`-subset of the `r`
//! largest magnitudes. rAge-k picks, out of the `r` largest magnitudes, the
//! `k` coordinates the parameter server has heard from least recently.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aging::{age_update, select_top_age, AgeVector};
use crate::error::{Error, Result};
use crate::vectors::{GradientVector, SparseUpdate};

/// Which compression operator a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsifierKind {
    TopK { k: usize },
    RTopK { r: usize, k: usize },
    RAgeK { r: usize, k: usize },
}

impl SparsifierKind {
    pub fn k(&self) -> usize {
        match *self {
            SparsifierKind::TopK { k } => k,
            SparsifierKind::RTopK { k, .. } => k,
            SparsifierKind::RAgeK { k, .. } => k,
        }
    }

    /// Candidate budget; equals `k` for plain top-k.
    pub fn r(&self) -> usize {
        match *self {
            SparsifierKind::TopK { k } => k,
            SparsifierKind::RTopK { r, .. } => r,
            SparsifierKind::RAgeK { r, .. } => r,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SparsifierKind::TopK { .. } => "top_k",
            SparsifierKind::RTopK { .. } => "r_top_k",
            SparsifierKind::RAgeK { .. } => "r_age_k",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let (r, k) = (self.r(), self.k());
        if k < 1 || k > r || r > dim {
            return Err(Error::parameter(format!(
                "budgets must satisfy 1 <= k <= r <= d, got k={k}, r={r}, d={dim}"
            )));
        }
        Ok(())
    }
}

/// Compression-factor analytics for one gradient vector.
///
/// `beta` is the measured ratio of the largest magnitude to the `r`-th
/// largest. `gamma_paper` uses the linear-beta denominator
/// `k/(k+(r-k)β+(d-r))`; `gamma_safe` uses `β²` in the same place, which is
/// the exponent the energy argument actually yields. Only `gamma_safe` is
/// asserted by the contraction tests; `gamma_paper` is reported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub beta: f64,
    pub gamma_paper: f64,
    pub gamma_safe: f64,
    /// `||Comp(g)||²/||g||²` for the worst-case rAge-k selection (the
    /// smallest-magnitude k-subset of the top-r candidates).
    pub retained_energy_fraction: f64,
}

/// The `r` indices of largest magnitude, ascending. Magnitude ties break
/// toward the lower index.
pub fn top_r_indices(g: &GradientVector, r: usize) -> Result<Vec<usize>> {
    if r < 1 || r > g.dim() {
        return Err(Error::parameter(format!(
            "r must be in [1, {}], got {r}",
            g.dim()
        )));
    }
    let mut order: Vec<usize> = (0..g.dim()).collect();
    order.sort_by(|&i, &j| {
        g.values()[j]
            .abs()
            .partial_cmp(&g.values()[i].abs())
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut top: Vec<usize> = order.into_iter().take(r).collect();
    top.sort_unstable();
    Ok(top)
}

/// Keeps the `k` largest-magnitude coordinates.
pub fn top_k_sparsify(g: &GradientVector, k: usize) -> Result<SparseUpdate> {
    let support = top_r_indices(g, k)?;
    SparseUpdate::from_dense(g, &support)
}

/// Keeps a uniformly random `k`-subset of the `r` largest-magnitude
/// coordinates, drawn from the caller's seeded generator.
pub fn r_top_k_sparsify(
    g: &GradientVector,
    r: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<SparseUpdate> {
    if k < 1 || k > r {
        return Err(Error::parameter(format!("need 1 <= k <= r, got k={k}, r={r}")));
    }
    let candidates = top_r_indices(g, r)?;
    let mut picked = sample_without_replacement(&candidates, k, rng);
    picked.sort_unstable();
    SparseUpdate::from_dense(g, &picked)
}

/// Partial Fisher-Yates over a candidate list.
fn sample_without_replacement(pool: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// The rAge-k operator: out of the top-`r` magnitude candidates, keep the
/// `k` with the largest age. Ties break toward larger magnitude, then lower
/// index, so that uniform ages reduce rAge-k to plain top-k.
///
/// Returns the sparse update together with the post-round age vector (all
/// coordinates aged by one, then the selected set reset to zero).
pub fn r_age_k_sparsify(
    g: &GradientVector,
    a: &AgeVector,
    r: usize,
    k: usize,
) -> Result<(SparseUpdate, AgeVector)> {
    if a.dim() != g.dim() {
        return Err(Error::parameter(format!(
            "age vector dim {} does not match gradient dim {}",
            a.dim(),
            g.dim()
        )));
    }
    if k < 1 || k > r {
        return Err(Error::parameter(format!("need 1 <= k <= r, got k={k}, r={r}")));
    }
    let candidates: Vec<(usize, f64)> = top_r_indices(g, r)?
        .into_iter()
        .map(|i| (i, g.values()[i]))
        .collect();
    let selected = select_top_age(a, &candidates, k);
    let update = SparseUpdate::from_dense(g, &selected)?;
    let aged = age_update(a, &selected)?;
    Ok((update, aged))
}

/// Measures beta and the compression factors for one vector and budget pair.
pub fn compression_stats(g: &GradientVector, r: usize, k: usize) -> Result<CompressionStats> {
    if k < 1 || k > r || r > g.dim() {
        return Err(Error::parameter(format!(
            "budgets must satisfy 1 <= k <= r <= d, got k={k}, r={r}, d={}",
            g.dim()
        )));
    }
    let d = g.dim();
    let mut mags: Vec<f64> = g.values().iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let largest = mags[0];
    let rth = mags[r - 1];
    if rth == 0.0 {
        return Err(Error::Degenerate(
            "r-th largest magnitude is zero; beta undefined".into(),
        ));
    }
    let beta = largest / rth;
    let gamma_paper = k as f64 / (k as f64 + (r - k) as f64 * beta + (d - r) as f64);
    let gamma_safe = k as f64 / (k as f64 + (r - k) as f64 * beta * beta + (d - r) as f64);

    // Worst case for rAge-k: age state steers selection to the k smallest
    // magnitudes among the top-r candidates.
    let worst_retained: f64 = mags[r - k..r].iter().map(|m| m * m).sum();
    let total = g.norm_sq();
    let retained_energy_fraction = if total == 0.0 { 1.0 } else { worst_retained / total };

    Ok(CompressionStats {
        beta,
        gamma_paper,
        gamma_safe,
        retained_energy_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn top_r_distinct_magnitudes() {
        assert_eq!(top_r_indices(&gv(&[5.0, -4.0, 3.0, 2.0, 1.0]), 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn top_r_ties_prefer_lower_index() {
        assert_eq!(top_r_indices(&gv(&[1.0, 1.0, 1.0, 1.0]), 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn top_r_ignores_sign() {
        assert_eq!(top_r_indices(&gv(&[0.0, -7.0, 0.0]), 1).unwrap(), vec![1]);
    }

    #[test]
    fn top_r_rejects_out_of_range() {
        assert!(top_r_indices(&gv(&[1.0]), 2).is_err());
        assert!(top_r_indices(&gv(&[1.0]), 0).is_err());
    }

    #[test]
    fn top_k_keeps_original_values() {
        let u = top_k_sparsify(&gv(&[5.0, -4.0, 3.0]), 2).unwrap();
        assert_eq!(u.entries(), &[(0, 5.0), (1, -4.0)]);
    }

    #[test]
    fn top_k_single() {
        let u = top_k_sparsify(&gv(&[0.0, 0.0, 9.0]), 1).unwrap();
        assert_eq!(u.entries(), &[(2, 9.0)]);
    }

    #[test]
    fn top_k_identity_when_k_equals_d() {
        let u = top_k_sparsify(&gv(&[2.0, 2.0]), 2).unwrap();
        assert_eq!(u.entries(), &[(0, 2.0), (1, 2.0)]);
    }

    #[test]
    fn r_top_k_degenerates_to_top_k() {
        let g = gv(&[5.0, -4.0, 3.0, 2.0, 1.0]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = r_top_k_sparsify(&g, 3, 3, &mut rng).unwrap();
            assert_eq!(u.entries(), top_k_sparsify(&g, 3).unwrap().entries());
        }
    }

    #[test]
    fn r_top_k_uniform_over_subsets() {
        // C(3,2) = 3 subsets of {0,1,2}; frequencies within 3 sigma of 1/3.
        let g = gv(&[5.0, -4.0, 3.0, 2.0, 1.0]);
        let trials = 10_000usize;
        let mut counts = std::collections::HashMap::new();
        for seed in 0..trials as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = r_top_k_sparsify(&g, 3, 2, &mut rng).unwrap();
            *counts.entry(u.indices()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        let p = 1.0 / 3.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (_, c) in counts {
            assert!((c as f64 - trials as f64 * p).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn r_top_k_deterministic_per_seed() {
        let g = gv(&[5.0, -4.0, 3.0, 2.0, 1.0]);
        let a = r_top_k_sparsify(&g, 3, 2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = r_top_k_sparsify(&g, 3, 2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn r_age_k_hand_trace() {
        // Index 1 wins on age 7; the age-0 tie between 0 and 2 goes to 0 on
        // magnitude. Ages increment then reset on the selection.
        let g = gv(&[5.0, -4.0, 3.0, 2.0, 1.0]);
        let a = AgeVector::from_ages(vec![0, 7, 0, 9, 1], 0);
        let (u, a2) = r_age_k_sparsify(&g, &a, 3, 2).unwrap();
        assert_eq!(u.entries(), &[(0, 5.0), (1, -4.0)]);
        assert_eq!(a2.ages(), &[0, 0, 1, 10, 2]);
    }

    #[test]
    fn r_age_k_full_budget_resets_all() {
        let g = gv(&[1.0, -2.0, 3.0]);
        let a = AgeVector::from_ages(vec![4, 5, 6], 0);
        let (u, a2) = r_age_k_sparsify(&g, &a, 3, 3).unwrap();
        assert_eq!(u.indices(), vec![0, 1, 2]);
        assert_eq!(a2.ages(), &[0, 0, 0]);
    }

    #[test]
    fn r_age_k_uniform_ages_reduce_to_top_k() {
        let g = gv(&[5.0, -4.0, 3.0, 2.0, 1.0]);
        let a = AgeVector::from_ages(vec![3; 5], 0);
        let (u, _) = r_age_k_sparsify(&g, &a, 4, 2).unwrap();
        assert_eq!(u.entries(), top_k_sparsify(&g, 2).unwrap().entries());
    }

    #[test]
    fn r_age_k_rejects_dim_mismatch() {
        let g = gv(&[1.0, 2.0]);
        let a = AgeVector::zeros(3, 0);
        assert!(r_age_k_sparsify(&g, &a, 2, 1).is_err());
    }

    #[test]
    fn stats_k_equals_r_gives_k_over_d() {
        let g = gv(&[4.0, 2.0, 2.0, 1.0, 1.0]);
        let s = compression_stats(&g, 2, 2).unwrap();
        assert_eq!(s.gamma_paper, 2.0 / 5.0);
        assert_eq!(s.gamma_safe, 2.0 / 5.0);
    }

    #[test]
    fn stats_mnist_budgets() {
        // k=10, r=75, d=39760, beta=2 -> gamma_paper = 10/39825.
        let mut v = vec![0.0; 39760];
        // 75 candidates: largest 2, the rest 1 -> beta = 2; tail below 1.
        v[0] = 2.0;
        for x in v.iter_mut().take(75).skip(1) {
            *x = 1.0;
        }
        for (j, x) in v.iter_mut().enumerate().skip(75) {
            *x = 0.5 / (j as f64 + 1.0);
        }
        let s = compression_stats(&GradientVector::new(v).unwrap(), 75, 10).unwrap();
        assert!((s.beta - 2.0).abs() < 1e-12);
        assert!((s.gamma_paper - 10.0 / 39825.0).abs() < 1e-15);
    }

    #[test]
    fn stats_worst_case_energy() {
        let g = gv(&[4.0, 2.0, 2.0, 1.0, 1.0]);
        let s = compression_stats(&g, 3, 1).unwrap();
        assert!((s.beta - 2.0).abs() < 1e-12);
        assert!((s.retained_energy_fraction - 4.0 / 26.0).abs() < 1e-12);
    }

    #[test]
    fn stats_degenerate_rth_zero() {
        let g = gv(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            compression_stats(&g, 2, 1),
            Err(crate::error::Error::Degenerate(_))
        ));
    }

    #[test]
    fn projection_energy_identity() {
        let g = gv(&[3.0, -1.0, 4.0, 1.0, -5.0]);
        let u = top_k_sparsify(&g, 2).unwrap();
        let kept = u.norm_sq();
        let residual: f64 = g
            .values()
            .iter()
            .enumerate()
            .filter(|(i, _)| !u.indices().contains(i))
            .map(|(_, v)| v * v)
            .sum();
        assert!((kept + residual - g.norm_sq()).abs() < 1e-12);
    }
}
