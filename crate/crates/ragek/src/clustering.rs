//! Frequency-vector similarity, a from-scratch DBSCAN, and the periodic
//! reclustering policy with its age-vector merge/reset side effects.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::aging::{merge_age_vectors, AgeVector, FrequencyVector};
use crate::error::{Error, Result};

/// Directed similarity: the inner product of the two frequency vectors
/// normalized by the first client's self-inner-product. Asymmetric by
/// construction.
pub fn similarity(f1: &FrequencyVector, f2: &FrequencyVector) -> Result<f64> {
    let denom = f1.dot(f1);
    if denom == 0 {
        return Err(Error::Degenerate(
            "zero frequency vector has no similarity".into(),
        ));
    }
    Ok(f1.dot(f2) as f64 / denom as f64)
}

/// Pairwise directed similarities for all clients, row = requesting client.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Clients with an all-zero frequency vector get similarity 0 to every
    /// client: no affinity evidence yet.
    pub fn from_frequencies(freqs: &[FrequencyVector]) -> Self {
        let n = freqs.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            if freqs[i].is_zero() {
                continue;
            }
            for j in 0..n {
                values[i * n + j] = similarity(&freqs[i], &freqs[j]).unwrap();
            }
        }
        SimilarityMatrix { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Symmetric distance matrix in [0,1], zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::structural("distance matrix shape mismatch"));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::structural("distance diagonal must be zero"));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || (v - values[j * n + i]).abs() > 0.0 {
                    return Err(Error::structural("distance matrix must be symmetric and finite"));
                }
            }
        }
        Ok(DistanceMatrix { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Conservative symmetrization: two clients are near only if both directed
/// similarities agree. Similarities above 1 are clipped so distances stay in
/// [0,1].
pub fn similarity_to_distance(s: &SimilarityMatrix) -> DistanceMatrix {
    let n = s.n;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let m = s.get(i, j).min(s.get(j, i)).min(1.0);
            values[i * n + j] = 1.0 - m;
        }
    }
    DistanceMatrix { n, values }
}

/// DBSCAN output: clusters of density-connected points plus a noise set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbscanResult {
    pub clusters: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

/// Density-based clustering on a precomputed distance matrix.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are grown from cores in ascending index order;
/// border points go to the first cluster that reaches them.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_pts: usize) -> Result<DbscanResult> {
    if eps <= 0.0 || min_pts < 1 {
        return Err(Error::parameter(format!(
            "need eps > 0 and min_pts >= 1, got eps={eps}, min_pts={min_pts}"
        )));
    }
    let n = dist.n();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for seed in 0..n {
        if label[seed].is_some() || !core[seed] {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        let mut queue = std::collections::VecDeque::from([seed]);
        label[seed] = Some(id);
        while let Some(p) = queue.pop_front() {
            members.push(p);
            if !core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(id);
                    queue.push_back(q);
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    let noise: Vec<usize> = (0..n).filter(|&i| label[i].is_none()).collect();
    Ok(DbscanResult { clusters, noise })
}

/// Partition of clients into clusters, each with one age vector. Noise
/// clients are singleton clusters flagged as unclustered.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    clusters: BTreeMap<usize, Cluster>,
    assignment: BTreeMap<usize, usize>,
    noise: BTreeSet<usize>,
    next_id: usize,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub members: BTreeSet<usize>,
    pub age: AgeVector,
}

impl ClusterState {
    /// Every client starts as its own unclustered singleton with a fresh
    /// age vector.
    pub fn singletons(num_clients: usize, dim: usize) -> Self {
        let mut clusters = BTreeMap::new();
        let mut assignment = BTreeMap::new();
        let mut noise = BTreeSet::new();
        for c in 0..num_clients {
            clusters.insert(
                c,
                Cluster {
                    members: BTreeSet::from([c]),
                    age: AgeVector::zeros(dim, c),
                },
            );
            assignment.insert(c, c);
            noise.insert(c);
        }
        ClusterState {
            clusters,
            assignment,
            noise,
            next_id: num_clients,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clusters(&self) -> &BTreeMap<usize, Cluster> {
        &self.clusters
    }

    pub fn cluster_of(&self, client: usize) -> usize {
        self.assignment[&client]
    }

    pub fn noise(&self) -> &BTreeSet<usize> {
        &self.noise
    }

    pub fn age_of_cluster(&self, cluster_id: usize) -> &AgeVector {
        &self.clusters[&cluster_id].age
    }

    pub fn set_age(&mut self, cluster_id: usize, age: AgeVector) {
        self.clusters.get_mut(&cluster_id).unwrap().age = age;
    }

    /// Cluster label per client, ascending client id.
    pub fn labels(&self) -> Vec<usize> {
        self.assignment.values().copied().collect()
    }

    /// Member sets, sorted by smallest member, for partition comparisons.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut parts: Vec<Vec<usize>> = self
            .clusters
            .values()
            .map(|c| c.members.iter().copied().collect())
            .collect();
        parts.sort();
        parts
    }
}

/// Applies one reclustering pass: Eq.-of-frequencies similarity, distance
/// conversion, DBSCAN, and the age merge/reset bookkeeping.
///
/// A client's cluster identity is preserved exactly when its new cluster has
/// the same member set as its old one; preserved members contribute their
/// old cluster's age vector to the coordinate-wise-minimum merge, everyone
/// else contributes a reset (all-zero) vector.
pub fn recluster(
    state: &ClusterState,
    freqs: &[FrequencyVector],
    eps: f64,
    min_pts: usize,
) -> Result<ClusterState> {
    let sim = SimilarityMatrix::from_frequencies(freqs);
    let dist = similarity_to_distance(&sim);
    let result = dbscan(&dist, eps, min_pts)?;
    rebuild_state(state, &result)
}

fn rebuild_state(state: &ClusterState, result: &DbscanResult) -> Result<ClusterState> {
    let dim = state.dim;
    let mut groups: Vec<(BTreeSet<usize>, bool)> = result
        .clusters
        .iter()
        .map(|m| (m.iter().copied().collect::<BTreeSet<_>>(), false))
        .collect();
    for &i in &result.noise {
        groups.push((BTreeSet::from([i]), true));
    }
    groups.sort_by_key(|(m, _)| *m.first().unwrap());

    let mut clusters = BTreeMap::new();
    let mut assignment = BTreeMap::new();
    let mut noise = BTreeSet::new();
    let mut next_id = state.next_id;

    for (members, is_noise) in groups {
        // Identity preserved iff some member's old cluster had exactly this
        // member set; reuse its id so labels stay stable across rounds.
        let representative = *members.first().unwrap();
        let old_id = state.assignment[&representative];
        let preserved = state.clusters[&old_id].members == members;
        let id = if preserved {
            old_id
        } else {
            let id = next_id;
            next_id += 1;
            id
        };

        let mut age = None;
        for &m in &members {
            let old = &state.clusters[&state.assignment[&m]];
            let contribution = if old.members == members {
                old.age.clone()
            } else {
                AgeVector::zeros(dim, id)
            };
            age = Some(match age {
                None => contribution,
                Some(acc) => merge_age_vectors(&acc, &contribution)?,
            });
        }
        let mut age = age.expect("clusters are non-empty");
        age.set_cluster_id(id);

        for &m in &members {
            assignment.insert(m, id);
            if is_noise {
                noise.insert(m);
            }
        }
        clusters.insert(id, Cluster { members, age });
    }

    Ok(ClusterState {
        clusters,
        assignment,
        noise,
        next_id,
        dim,
    })
}

/// Writes an n-by-n matrix as CSV with client-id headers, row-major.
pub fn write_matrix_csv(
    path: &Path,
    get: impl Fn(usize, usize) -> f64,
    n: usize,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..n).map(|i| format!("client_{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{}", get(i, j))).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn freq(counts: &[u64], id: usize) -> FrequencyVector {
        FrequencyVector::from_counts(counts.to_vec(), id)
    }

    #[test]
    fn similarity_self_is_one() {
        let f = freq(&[2, 0, 1], 0);
        assert_eq!(similarity(&f, &f).unwrap(), 1.0);
    }

    #[test]
    fn similarity_hand_example() {
        let f1 = freq(&[2, 0, 1], 0);
        let f2 = freq(&[1, 1, 0], 1);
        assert_eq!(similarity(&f1, &f2).unwrap(), 0.4);
        assert_eq!(similarity(&f2, &f1).unwrap(), 1.0);
    }

    #[test]
    fn similarity_zero_vector_errors() {
        let z = FrequencyVector::zeros(3, 0);
        let f = freq(&[1, 0, 0], 1);
        assert!(similarity(&z, &f).is_err());
    }

    #[test]
    fn distance_conversion() {
        let f1 = freq(&[2, 0, 1], 0);
        let f2 = freq(&[1, 1, 0], 1);
        let s = SimilarityMatrix::from_frequencies(&[f1, f2]);
        let d = similarity_to_distance(&s);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(0, 1), 0.6);
        assert_eq!(d.get(1, 0), 0.6);
    }

    #[test]
    fn distance_identical_and_orthogonal() {
        let f1 = freq(&[1, 1, 0], 0);
        let f2 = freq(&[1, 1, 0], 1);
        let f3 = freq(&[0, 0, 5], 2);
        let s = SimilarityMatrix::from_frequencies(&[f1, f2, f3]);
        let d = similarity_to_distance(&s);
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(0, 2), 1.0);
    }

    fn dist_from(n: usize, entries: &[(usize, usize, f64)], default: f64) -> DistanceMatrix {
        let mut values = vec![default; n * n];
        for i in 0..n {
            values[i * n + i] = 0.0;
        }
        for &(i, j, v) in entries {
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
        DistanceMatrix::from_values(n, values).unwrap()
    }

    #[test]
    fn dbscan_single_blob() {
        let d = dist_from(4, &[], 0.0);
        let r = dbscan(&d, 0.1, 2).unwrap();
        assert_eq!(r.clusters, vec![vec![0, 1, 2, 3]]);
        assert!(r.noise.is_empty());
    }

    #[test]
    fn dbscan_two_pairs_one_outlier() {
        let d = dist_from(5, &[(0, 1, 0.05), (2, 3, 0.05)], 0.9);
        let r = dbscan(&d, 0.1, 2).unwrap();
        assert_eq!(r.clusters, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(r.noise, vec![4]);
    }

    #[test]
    fn dbscan_min_pts_one_gives_components() {
        let d = dist_from(4, &[(0, 1, 0.05), (2, 3, 0.05)], 0.9);
        let r = dbscan(&d, 0.1, 1).unwrap();
        assert_eq!(r.clusters, vec![vec![0, 1], vec![2, 3]]);
        assert!(r.noise.is_empty());
    }

    #[test]
    fn recluster_merging_singletons_resets_age() {
        let mut state = ClusterState::singletons(2, 3);
        state.set_age(0, AgeVector::from_ages(vec![4, 4, 4], 0));
        state.set_age(1, AgeVector::from_ages(vec![2, 2, 2], 1));
        // Identical nonzero frequencies -> distance 0 -> one pair.
        let f0 = freq(&[3, 0, 0], 0);
        let f1 = freq(&[3, 0, 0], 1);
        let next = recluster(&state, &[f0, f1], 0.3, 2).unwrap();
        assert_eq!(next.partition(), vec![vec![0, 1]]);
        let id = next.cluster_of(0);
        assert_eq!(next.age_of_cluster(id).ages(), &[0, 0, 0]);
    }

    #[test]
    fn recluster_identical_partition_keeps_ages() {
        let state = ClusterState::singletons(2, 2);
        let f0 = freq(&[3, 0], 0);
        let f1 = freq(&[3, 0], 1);
        let paired = recluster(&state, &[f0.clone(), f1.clone()], 0.3, 2).unwrap();
        let id = paired.cluster_of(0);
        let mut paired = paired;
        paired.set_age(id, AgeVector::from_ages(vec![5, 1], id));
        let again = recluster(&paired, &[f0, f1], 0.3, 2).unwrap();
        assert_eq!(again.partition(), paired.partition());
        assert_eq!(again.cluster_of(0), id);
        assert_eq!(again.age_of_cluster(id).ages(), &[5, 1]);
    }

    #[test]
    fn recluster_split_resets_both_singletons() {
        // Pair breaks apart: both clients changed cluster identity, so both
        // new singletons start from zero age.
        let state = ClusterState::singletons(2, 2);
        let f_same0 = freq(&[3, 0], 0);
        let f_same1 = freq(&[3, 0], 1);
        let mut paired = recluster(&state, &[f_same0, f_same1], 0.3, 2).unwrap();
        let id = paired.cluster_of(0);
        paired.set_age(id, AgeVector::from_ages(vec![5, 1], id));
        let f_apart0 = freq(&[6, 0], 0);
        let f_apart1 = freq(&[0, 6], 1);
        let split = recluster(&paired, &[f_apart0, f_apart1], 0.3, 2).unwrap();
        assert_eq!(split.partition(), vec![vec![0], vec![1]]);
        assert_eq!(split.noise().len(), 2);
        for c in [0, 1] {
            assert_eq!(split.age_of_cluster(split.cluster_of(c)).ages(), &[0, 0]);
        }
    }

    #[test]
    fn recluster_zero_frequency_clients_stay_noise() {
        let state = ClusterState::singletons(3, 2);
        let z0 = FrequencyVector::zeros(2, 0);
        let z1 = FrequencyVector::zeros(2, 1);
        let z2 = FrequencyVector::zeros(2, 2);
        let next = recluster(&state, &[z0, z1, z2], 0.3, 2).unwrap();
        assert_eq!(next.partition(), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(next.noise().len(), 3);
        // Unchanged singleton identity keeps the (zero) age vectors and ids.
        assert_eq!(next.cluster_of(1), 1);
    }
}
