//! Non-i.i.d. data provisioning: synthetic Gaussian-mixture classification
//! data, label-shard partitioning across clients, MNIST IDX ingestion, and
//! seeded epoch batching.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::Batch;

/// A full labeled dataset, features flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// One client's local slice of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: Dataset,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.data.features.clone(),
            labels: self.data.labels.clone(),
            input_dim: self.data.input_dim,
        }
    }
}

/// Which class labels each client holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    /// Index = client id; value = that client's class labels.
    pub class_assignment: Vec<Vec<usize>>,
}

impl ShardPlan {
    pub fn num_clients(&self) -> usize {
        self.class_assignment.len()
    }

    /// The MNIST experiment layout: ten clients in five pairs, each pair
    /// sharing two consecutive digit labels.
    pub fn five_pairs() -> Self {
        ShardPlan {
            class_assignment: (0..10).map(|c| vec![(c / 2) * 2, (c / 2) * 2 + 1]).collect(),
        }
    }

    /// The CIFAR experiment layout on six clients: pairs holding labels
    /// {0,1,2}, {3,4,5}, {6,7,8,9}.
    pub fn cifar_pairs() -> Self {
        let groups = [vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8, 9]];
        ShardPlan {
            class_assignment: (0..6).map(|c| groups[c / 2].clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_assignment.iter().any(|c| c.is_empty()) {
            return Err(Error::validation("every client needs at least one class"));
        }
        Ok(())
    }
}

/// Gaussian-mixture classification data: each class mean is drawn once from
/// the seeded generator and scaled by `separation`; samples add
/// unit-variance isotropic noise. Deterministic for a fixed seed.
pub fn synth_generate(
    num_classes: usize,
    input_dim: usize,
    per_class_count: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if separation < 0.0 {
        return Err(Error::parameter("separation must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| separation * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
                .collect()
        })
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class_count * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class_count);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class_count {
            for &m in mean {
                let noise: f64 = normal.sample(&mut rng);
                features.push(m + noise);
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        features,
        labels,
        input_dim,
        num_classes,
    })
}

/// Splits the source dataset across clients per the shard plan.
///
/// Clients sharing a class receive disjoint, near-even random splits of that
/// class's samples (counts differ by at most one). With `overlapping` set,
/// every client assigned a class receives all of its samples instead.
pub fn shard(
    data: &Dataset,
    plan: &ShardPlan,
    seed: u64,
    overlapping: bool,
) -> Result<Vec<ClientDataset>> {
    plan.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in data.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    for classes in &plan.class_assignment {
        for &c in classes {
            if !by_class.contains_key(&c) {
                return Err(Error::parameter(format!("class {c} absent from dataset")));
            }
        }
    }

    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); plan.num_clients()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Classes in ascending order, clients in ascending order: determinism.
    let mut class_clients: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (client, classes) in plan.class_assignment.iter().enumerate() {
        for &c in classes {
            class_clients.entry(c).or_default().push(client);
        }
    }
    for (&class, clients) in &class_clients {
        let mut idx = by_class[&class].clone();
        idx.shuffle(&mut rng);
        if overlapping {
            for &client in clients {
                per_client[client].extend(&idx);
            }
        } else {
            for (pos, &sample) in idx.iter().enumerate() {
                per_client[clients[pos % clients.len()]].push(sample);
            }
        }
    }

    Ok(per_client
        .into_iter()
        .enumerate()
        .map(|(client_id, mut idx)| {
            idx.sort_unstable();
            let mut features = Vec::with_capacity(idx.len() * data.input_dim);
            let mut labels = Vec::with_capacity(idx.len());
            for &i in &idx {
                features.extend_from_slice(data.sample(i));
                labels.push(data.labels[i]);
            }
            ClientDataset {
                client_id,
                data: Dataset {
                    features,
                    labels,
                    input_dim: data.input_dim,
                    num_classes: data.num_classes,
                },
            }
        })
        .collect())
}

/// Contents of an IDX file: either an image tensor (features scaled to
/// [0,1] by dividing by 255) or a label vector.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxContent {
    /// (count, rows, cols, features flattened row-major).
    Images(usize, usize, usize, Vec<f64>),
    Labels(Vec<usize>),
}

/// Reads a big-endian IDX file (the MNIST container format).
pub fn read_idx(path: &Path) -> Result<IdxContent> {
    let bytes = std::fs::read(path)?;
    read_idx_bytes(&bytes)
}

pub fn read_idx_bytes(bytes: &[u8]) -> Result<IdxContent> {
    let fail = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.into(),
    };
    if bytes.len() < 4 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(0, "bad magic: first two bytes must be zero"));
    }
    if bytes[2] != 0x08 {
        return Err(fail(2, "unsupported type byte (only unsigned byte data)"));
    }
    let rank = bytes[3] as usize;
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(fail(bytes.len(), "truncated dimension header"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 4 + 4 * i;
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let expected: usize = dims.iter().product();
    if bytes.len() != header_len + expected {
        return Err(fail(bytes.len().min(header_len + expected), "data length mismatch"));
    }
    let data = &bytes[header_len..];
    match rank {
        1 => Ok(IdxContent::Labels(data.iter().map(|&b| b as usize).collect())),
        3 => Ok(IdxContent::Images(
            dims[0],
            dims[1],
            dims[2],
            data.iter().map(|&b| b as f64 / 255.0).collect(),
        )),
        _ => Err(fail(3, "unsupported rank (expected 1 or 3)")),
    }
}

/// Writes an unsigned-byte image tensor in IDX layout.
pub fn write_idx_images(w: &mut impl Write, rows: usize, cols: usize, images: &[u8]) -> Result<()> {
    let count = images.len() / (rows * cols);
    w.write_all(&[0, 0, 0x08, 3])?;
    for dim in [count, rows, cols] {
        w.write_all(&(dim as u32).to_be_bytes())?;
    }
    w.write_all(images)?;
    Ok(())
}

/// Writes an unsigned-byte label vector in IDX layout.
pub fn write_idx_labels(w: &mut impl Write, labels: &[u8]) -> Result<()> {
    w.write_all(&[0, 0, 0x08, 1])?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    Ok(())
}

/// Epoch batching without replacement: a fresh shuffled permutation per
/// epoch from the client's own seeded generator.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    /// Next batch of up to `batch_size` samples; reshuffles when the epoch
    /// is exhausted.
    pub fn next_batch(&mut self, ds: &ClientDataset, batch_size: usize) -> Batch {
        debug_assert_eq!(self.order.len(), ds.len());
        let n = self.order.len();
        let take = batch_size.min(n);
        let mut picked = Vec::with_capacity(take);
        for _ in 0..take {
            if self.cursor == n {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let mut features = Vec::with_capacity(take * ds.data.input_dim);
        let mut labels = Vec::with_capacity(take);
        for &i in &picked {
            features.extend_from_slice(ds.data.sample(i));
            labels.push(ds.data.labels[i]);
        }
        Batch {
            features,
            labels,
            input_dim: ds.data.input_dim,
        }
    }
}

/// Nearest-class-mean classifier accuracy; test oracle for synthetic data.
pub fn nearest_mean_accuracy(train: &Dataset, eval: &Dataset) -> f64 {
    let mut sums = vec![vec![0.0; train.input_dim]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for i in 0..train.len() {
        let y = train.labels[i];
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(train.sample(i)) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    let mut correct = 0usize;
    for i in 0..eval.len() {
        let x = eval.sample(i);
        let pred = sums
            .iter()
            .enumerate()
            .map(|(c, mean)| {
                let d: f64 = mean.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
                (c, d)
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        if pred == eval.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / eval.len() as f64
}

/// Seeds a per-client generator for batching or rTop-k draws.
pub fn client_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A deterministic stream split: derives independent sub-seeds from one
/// master seed so that, e.g., adding clients does not reshuffle data
/// generation. SplitMix64 over the master seed and a stream tag.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = master ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ b as u64);
    }
    splitmix64(h ^ index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
