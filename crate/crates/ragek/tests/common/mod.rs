//! Shared helpers for integration tests: an independent DBSCAN reference
//! and the adjusted Rand index.
#![allow(dead_code)] // not every test target uses every helper

use std::collections::BTreeSet;

/// Brute-force DBSCAN over a full distance matrix. Core points are those
/// with at least `min_pts` neighbors within `eps` (self included); clusters
/// are the connected components of cores under eps-adjacency, created in
/// order of their smallest core index; a border point joins the earliest
/// created adjacent component.
pub fn dbscan_reference(
    dist: &[Vec<f64>],
    eps: f64,
    min_pts: usize,
) -> (Vec<BTreeSet<usize>>, BTreeSet<usize>) {
    let n = dist.len();
    let within = |i: usize, j: usize| dist[i][j] <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| within(i, j)).count() >= min_pts)
        .collect();

    // Connected components of the core-core adjacency graph, by repeated
    // closure from the smallest unassigned core.
    let mut component: Vec<Option<usize>> = vec![None; n];
    let mut components: Vec<BTreeSet<usize>> = Vec::new();
    for start in 0..n {
        if !core[start] || component[start].is_some() {
            continue;
        }
        let id = components.len();
        let mut members = BTreeSet::from([start]);
        loop {
            let mut grew = false;
            for i in 0..n {
                if core[i]
                    && component[i].is_none()
                    && !members.contains(&i)
                    && members.iter().any(|&m| within(m, i))
                {
                    members.insert(i);
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        for &m in &members {
            component[m] = Some(id);
        }
        components.push(members);
    }

    // Border points: non-core within eps of some core.
    for i in 0..n {
        if core[i] {
            continue;
        }
        let adjacent = (0..n)
            .filter(|&j| core[j] && within(i, j))
            .map(|j| component[j].unwrap())
            .min();
        if let Some(id) = adjacent {
            component[i] = Some(id);
            components[id].insert(i);
        }
    }

    let noise = (0..n).filter(|&i| component[i].is_none()).collect();
    (components, noise)
}

/// Adjusted Rand index between two partitions given as label vectors.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |&m| m + 1);
    let kb = b.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for i in 0..n {
        table[a[i]][b[i]] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) / 2;
    let sum_ij: u64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: u64 = (0..ka)
        .map(|i| choose2(table[i].iter().sum::<u64>()))
        .sum();
    let sum_b: u64 = (0..kb)
        .map(|j| choose2((0..ka).map(|i| table[i][j]).sum::<u64>()))
        .sum();
    let total = choose2(n as u64) as f64;
    let expected = sum_a as f64 * sum_b as f64 / total;
    let max_index = (sum_a + sum_b) as f64 / 2.0;
    if (max_index - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (sum_ij as f64 - expected) / (max_index - expected)
}

#[allow(dead_code)]
pub fn labels_from_partition(partition: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut labels = vec![0usize; n];
    for (id, members) in partition.iter().enumerate() {
        for &m in members {
            labels[m] = id;
        }
    }
    labels
}
