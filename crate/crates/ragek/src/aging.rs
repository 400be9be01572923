//! Per-cluster age vectors and per-client frequency vectors.
//!
//! The parameter server keeps one age vector per cluster. Coordinate `j`
//! counts the rounds since an update on index `j` was last received from any
//! member of the cluster: requested indices reset to 0, everything else ages
//! by one per global round. Frequency vectors count, per client, how often
//! each index has been requested; they are the clustering feature and are
//! never reset.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Per-cluster staleness tracker, one non-negative counter per coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgeVector {
    ages: Vec<u64>,
    cluster_id: usize,
}

impl AgeVector {
    pub fn zeros(dim: usize, cluster_id: usize) -> Self {
        AgeVector {
            ages: vec![0; dim],
            cluster_id,
        }
    }

    pub fn from_ages(ages: Vec<u64>, cluster_id: usize) -> Self {
        AgeVector { ages, cluster_id }
    }

    pub fn dim(&self) -> usize {
        self.ages.len()
    }

    pub fn ages(&self) -> &[u64] {
        &self.ages
    }

    pub fn cluster_id(&self) -> usize {
        self.cluster_id
    }

    pub fn set_cluster_id(&mut self, id: usize) {
        self.cluster_id = id;
    }

    pub fn sum(&self) -> u64 {
        self.ages.iter().sum()
    }

    /// Checkpoint layout: u64 LE dimension, then the counters as u64 LE.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_counters(w, &self.ages)
    }

    pub fn read_from(r: &mut impl Read, cluster_id: usize) -> Result<Self> {
        Ok(AgeVector {
            ages: read_counters(r)?,
            cluster_id,
        })
    }
}

/// Per-client request counter over coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyVector {
    counts: Vec<u64>,
    client_id: usize,
}

impl FrequencyVector {
    pub fn zeros(dim: usize, client_id: usize) -> Self {
        FrequencyVector {
            counts: vec![0; dim],
            client_id,
        }
    }

    pub fn from_counts(counts: Vec<u64>, client_id: usize) -> Self {
        FrequencyVector { counts, client_id }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn sum(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    pub fn dot(&self, other: &FrequencyVector) -> u128 {
        self.counts
            .iter()
            .zip(&other.counts)
            .map(|(&a, &b)| a as u128 * b as u128)
            .sum()
    }

    /// Checkpoint layout: u64 LE dimension, then the counters as u64 LE.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_counters(w, &self.counts)
    }

    pub fn read_from(r: &mut impl Read, client_id: usize) -> Result<Self> {
        Ok(FrequencyVector {
            counts: read_counters(r)?,
            client_id,
        })
    }
}

fn write_counters(w: &mut impl Write, values: &[u64]) -> Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_counters(r: &mut impl Read) -> Result<Vec<u64>> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    let dim = u64::from_le_bytes(buf) as usize;
    let mut out = Vec::with_capacity(dim);
    for _ in 0..dim {
        r.read_exact(&mut buf)?;
        out.push(u64::from_le_bytes(buf));
    }
    Ok(out)
}

fn check_indices(requested: &[usize], dim: usize) -> Result<()> {
    for &j in requested {
        if j >= dim {
            return Err(Error::structural(format!("index {j} out of range for dim {dim}")));
        }
    }
    Ok(())
}

/// One round of the age protocol: requested indices reset to zero, all
/// other coordinates age by one.
///
/// ```
/// use ragek::aging::{age_update, AgeVector};
///
/// let a = AgeVector::from_ages(vec![3, 0, 5, 1], 0);
/// let next = age_update(&a, &[2])?;
/// assert_eq!(next.ages(), &[4, 1, 0, 2]);
/// # Ok::<(), ragek::error::Error>(())
/// ```
pub fn age_update(a: &AgeVector, requested: &[usize]) -> Result<AgeVector> {
    check_indices(requested, a.dim())?;
    let mut ages: Vec<u64> = a.ages.iter().map(|&v| v + 1).collect();
    for &j in requested {
        ages[j] = 0;
    }
    Ok(AgeVector {
        ages,
        cluster_id: a.cluster_id,
    })
}

/// Increments the request counters on the given index set.
pub fn record_request(f: &FrequencyVector, requested: &[usize]) -> Result<FrequencyVector> {
    check_indices(requested, f.dim())?;
    let mut counts = f.counts.clone();
    for &j in requested {
        counts[j] += 1;
    }
    Ok(FrequencyVector {
        counts,
        client_id: f.client_id,
    })
}

/// Merges two cluster age vectors coordinate-wise by minimum.
///
/// Age measures staleness of the freshest update from any cluster member,
/// so the smaller age wins for the merged source.
pub fn merge_age_vectors(into: &AgeVector, from: &AgeVector) -> Result<AgeVector> {
    if into.dim() != from.dim() {
        return Err(Error::structural(format!(
            "dimension mismatch: {} vs {}",
            into.dim(),
            from.dim()
        )));
    }
    let ages = into
        .ages
        .iter()
        .zip(&from.ages)
        .map(|(&a, &b)| a.min(b))
        .collect();
    Ok(AgeVector {
        ages,
        cluster_id: into.cluster_id,
    })
}

/// Greedy sequential assignment of disjoint request sets within a cluster.
///
/// `candidates` holds, per client in ascending client-id order, the client's
/// reported top-`r` indices with the gradient magnitude observed on each.
/// Clients are processed in order; each takes the `k` highest-age indices
/// from its candidates that no earlier client has claimed this round
/// (tie-break: larger magnitude, then lower index). When fewer than `k`
/// unclaimed candidates remain, the client takes all of them.
///
/// ```
/// use ragek::aging::{assign_disjoint_requests, AgeVector};
///
/// let a = AgeVector::from_ages(vec![9, 8, 7, 6], 0);
/// let candidates = vec![
///     vec![(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)],
///     vec![(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)],
/// ];
/// let sets = assign_disjoint_requests(&a, &candidates, 2)?;
/// assert_eq!(sets, vec![vec![0, 1], vec![2, 3]]);
/// # Ok::<(), ragek::error::Error>(())
/// ```
pub fn assign_disjoint_requests(
    a: &AgeVector,
    candidates: &[Vec<(usize, f64)>],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut taken = vec![false; a.dim()];
    let mut out = Vec::with_capacity(candidates.len());
    for cand in candidates {
        check_indices(&cand.iter().map(|&(i, _)| i).collect::<Vec<_>>(), a.dim())?;
        let free: Vec<(usize, f64)> = cand.iter().filter(|&&(i, _)| !taken[i]).copied().collect();
        let selected = select_top_age(a, &free, k.min(free.len()));
        for &i in &selected {
            taken[i] = true;
        }
        out.push(selected);
    }
    Ok(out)
}

/// Picks the `k` highest-age candidates; ties broken by larger magnitude,
/// then lower index. Result is ascending.
pub fn select_top_age(a: &AgeVector, candidates: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = candidates.to_vec();
    ranked.sort_by(|&(i1, m1), &(i2, m2)| {
        a.ages[i2]
            .cmp(&a.ages[i1])
            .then(m2.abs().partial_cmp(&m1.abs()).unwrap())
            .then(i1.cmp(&i2))
    });
    let mut selected: Vec<usize> = ranked.iter().take(k).map(|&(i, _)| i).collect();
    selected.sort_unstable();
    selected
}
