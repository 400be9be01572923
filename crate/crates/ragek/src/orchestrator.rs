//! The end-to-end training loop: client local steps, the global-round
//! handshake, server-side aggregation and broadcast, periodic reclustering,
//! and communication-cost accounting.
//!
//! One iteration `t` is a single local descent step on every client. Every
//! `H` iterations the global round runs: clients report gradients (for
//! rAge-k, first their top-`r` index sets), the server selects and collects
//! sparse updates, steps the global model, and broadcasts it. Every `M`
//! iterations the server reclusters clients from their request-frequency
//! vectors.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::aging::{
    age_update, assign_disjoint_requests, record_request, select_top_age, FrequencyVector,
};
use crate::clustering::{
    recluster, similarity_to_distance, ClusterState, DistanceMatrix, SimilarityMatrix,
};
use crate::config::{DataSource, RunConfig};
use crate::data::{
    client_rng, derive_seed, read_idx, shard, synth_generate, Batcher, ClientDataset, Dataset,
    IdxContent,
};
use crate::error::{Error, Result};
use crate::learner::{
    apply_update, evaluate, loss_and_gradient, Batch, ModelState, OptimizerState,
};
use crate::sparsifiers::{r_top_k_sparsify, top_k_sparsify, top_r_indices, SparsifierKind};
use crate::vectors::{aggregate, GradientVector, SparseUpdate};

/// Cumulative communication cost for one client, in bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientLedger {
    /// Phase-1 uplink: the top-r index report (rAge-k only).
    pub uplink_index_bits: u64,
    /// Phase-2 uplink: the sparse value payload (index + value per entry).
    pub uplink_payload_bits: u64,
    /// Full-model broadcasts received.
    pub downlink_bits: u64,
}

impl ClientLedger {
    pub fn uplink_total(&self) -> u64 {
        self.uplink_index_bits + self.uplink_payload_bits
    }
}

/// Communication accounting for a run. Uplink per global round per client
/// is `r*ceil(log2 d)` (rAge-k index report) plus
/// `|requested|*(ceil(log2 d) + value_bits)` for the payload; the broadcast
/// costs `d*value_bits` downlink.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommLedger {
    pub index_bits_per_coord: u64,
    pub value_bits: u64,
    pub per_client: Vec<ClientLedger>,
}

impl CommLedger {
    fn new(num_clients: usize, dim: usize, value_bits: u32) -> Self {
        CommLedger {
            index_bits_per_coord: ceil_log2(dim),
            value_bits: value_bits as u64,
            per_client: vec![ClientLedger::default(); num_clients],
        }
    }

    pub fn total_uplink(&self) -> u64 {
        self.per_client.iter().map(|c| c.uplink_total()).sum()
    }

    pub fn total_downlink(&self) -> u64 {
        self.per_client.iter().map(|c| c.downlink_bits).sum()
    }
}

pub fn ceil_log2(d: usize) -> u64 {
    if d <= 1 {
        0
    } else {
        (64 - (d as u64 - 1).leading_zeros()) as u64
    }
}

/// Per-global-round metrics, one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub t: usize,
    pub per_client_loss: Vec<f64>,
    pub per_client_accuracy: Vec<f64>,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    pub cluster_labels: Vec<usize>,
    /// This round's totals across clients.
    pub phase1_bits: u64,
    pub payload_bits: u64,
    pub broadcast_bits: u64,
    /// Running totals across clients.
    pub cumulative_uplink_bits: u64,
    pub cumulative_downlink_bits: u64,
}

/// Snapshot taken at each recluster event; source of the heatmap CSVs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReclusterEvent {
    pub t: usize,
    pub similarity: Vec<Vec<f64>>,
    pub distance: Vec<Vec<f64>>,
    pub partition: Vec<Vec<usize>>,
}

/// Per-round audit data for invariant checks; kept only when
/// `record_details` is set and never serialized.
#[derive(Debug, Clone, Default)]
pub struct RoundAudit {
    pub t: usize,
    /// Requested index set per client, ascending client order.
    pub requested: Vec<Vec<usize>>,
    /// (cluster id, members, ages) before the round's age update.
    pub age_before: Vec<(usize, Vec<usize>, Vec<u64>)>,
    /// Same clusters after the update.
    pub age_after: Vec<(usize, Vec<usize>, Vec<u64>)>,
    /// Per-client frequency sums after the round.
    pub freq_sums: Vec<u64>,
    /// Global model after the round's server step.
    pub theta: Vec<f64>,
}

/// Everything a run produces.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub dim: usize,
    pub rounds: Vec<RoundMetrics>,
    pub recluster_events: Vec<ReclusterEvent>,
    pub final_partition: Vec<Vec<usize>>,
    pub ledger: CommLedger,
    pub final_mean_accuracy: f64,
    pub final_mean_loss: f64,
    #[serde(skip)]
    pub audits: Vec<RoundAudit>,
    #[serde(skip)]
    pub final_model: Option<ModelState>,
    #[serde(skip)]
    pub final_frequencies: Vec<FrequencyVector>,
    #[serde(skip)]
    pub final_cluster_state: Option<ClusterState>,
}

struct Client {
    dataset: ClientDataset,
    eval_batch: Batch,
    model: ModelState,
    optimizer: OptimizerState,
    batcher: Batcher,
    sparsifier_rng: rand_chacha::ChaCha8Rng,
    frequency: FrequencyVector,
}

/// Builds the training datasets for all clients from the config's source.
pub fn provision_data(config: &RunConfig) -> Result<Vec<ClientDataset>> {
    let dataset = match &config.data.source {
        DataSource::Synthetic {
            num_classes,
            input_dim,
            per_class_count,
            separation,
        } => synth_generate(
            *num_classes,
            *input_dim,
            *per_class_count,
            *separation,
            derive_seed(config.master_seed, "data", 0),
        )?,
        DataSource::Idx { images, labels } => {
            let imgs = read_idx(images)?;
            let lbls = read_idx(labels)?;
            let (count, rows, cols, features) = match imgs {
                IdxContent::Images(n, r, c, f) => (n, r, c, f),
                _ => {
                    return Err(Error::Format {
                        offset: 3,
                        message: "image file does not contain an image tensor".into(),
                    })
                }
            };
            let labels = match lbls {
                IdxContent::Labels(l) => l,
                _ => {
                    return Err(Error::Format {
                        offset: 3,
                        message: "label file does not contain a label vector".into(),
                    })
                }
            };
            if labels.len() != count {
                return Err(Error::structural("image/label count mismatch"));
            }
            let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
            Dataset {
                features,
                labels,
                input_dim: rows * cols,
                num_classes,
            }
        }
    };
    let plan = config.shard_plan(dataset.num_classes);
    if plan.num_clients() != config.num_clients {
        return Err(Error::validation("shard plan does not cover all clients"));
    }
    shard(
        &dataset,
        &plan,
        derive_seed(config.master_seed, "shard", 0),
        config.data.overlapping,
    )
}

/// Runs the full simulation. Deterministic given the config (including its
/// master seed): two calls produce identical reports.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    let mut config = config.clone();
    config.resolve()?;
    let spec = config.model_spec()?;
    let dim = spec.param_count();
    let scale = config.aggregation_scale.expect("resolved");
    let datasets = provision_data(&config)?;

    let mut init_rng = client_rng(derive_seed(config.master_seed, "init", 0));
    let mut global_model = ModelState::init(spec.clone(), &mut init_rng);
    let mut ps_optimizer = OptimizerState::new(config.ps_optimizer, dim);

    let mut clients: Vec<Client> = datasets
        .into_iter()
        .enumerate()
        .map(|(i, dataset)| {
            if dataset.is_empty() {
                return Err(Error::validation(format!("client {i} received no data")));
            }
            Ok(Client {
                eval_batch: dataset.as_batch(),
                model: global_model.clone(),
                optimizer: OptimizerState::new(config.client_optimizer, dim),
                batcher: Batcher::new(
                    dataset.len(),
                    derive_seed(config.master_seed, "batch", i as u64),
                ),
                sparsifier_rng: client_rng(derive_seed(config.master_seed, "sparsifier", i as u64)),
                frequency: FrequencyVector::zeros(dim, i),
                dataset,
            })
        })
        .collect::<Result<_>>()?;

    let mut cluster_state = ClusterState::singletons(config.num_clients, dim);
    let mut ledger = CommLedger::new(config.num_clients, dim, config.value_bits);
    let mut rounds = Vec::new();
    let mut recluster_events = Vec::new();
    let mut audits = Vec::new();

    for t in 1..=config.total_iters {
        // Local iteration on every client.
        for client in &mut clients {
            let batch = client.batcher.next_batch(&client.dataset, config.batch_size);
            let (_, g) = loss_and_gradient(&client.model, &batch)?;
            apply_update(&mut client.model, &mut client.optimizer, &g)?;
        }

        if t % config.local_iters_per_round == 0 {
            let round = global_round(
                t,
                &config,
                &mut clients,
                &mut cluster_state,
                &mut global_model,
                &mut ps_optimizer,
                &mut ledger,
                scale,
            )?;
            rounds.push(round.0);
            if config.record_details {
                audits.push(round.1);
            }
        }

        if t % config.recluster_period == 0
            && matches!(config.sparsifier, SparsifierKind::RAgeK { .. })
        {
            let freqs: Vec<FrequencyVector> =
                clients.iter().map(|c| c.frequency.clone()).collect();
            let sim = SimilarityMatrix::from_frequencies(&freqs);
            let dist = similarity_to_distance(&sim);
            cluster_state = recluster(&cluster_state, &freqs, config.eps, config.min_pts)?;
            recluster_events.push(ReclusterEvent {
                t,
                similarity: matrix_rows(|i, j| sim.get(i, j), config.num_clients),
                distance: matrix_rows(|i, j| dist.get(i, j), config.num_clients),
                partition: cluster_state.partition(),
            });
        }
    }

    let (final_mean_accuracy, final_mean_loss) = rounds
        .last()
        .map(|r| (r.mean_accuracy, r.mean_loss))
        .unwrap_or((0.0, 0.0));
    Ok(RunReport {
        dim,
        rounds,
        recluster_events,
        final_partition: cluster_state.partition(),
        ledger,
        final_mean_accuracy,
        final_mean_loss,
        audits,
        final_model: Some(global_model),
        final_frequencies: clients.iter().map(|c| c.frequency.clone()).collect(),
        final_cluster_state: Some(cluster_state),
        config,
    })
}

fn matrix_rows(get: impl Fn(usize, usize) -> f64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| get(i, j)).collect())
        .collect()
}

/// The gradient a client reports for sparsification: its loss gradient at
/// the current local parameters on a fresh batch.
fn gradient_for_report(client: &mut Client, batch_size: usize) -> Result<GradientVector> {
    let batch = client.batcher.next_batch(&client.dataset, batch_size);
    let (_, g) = loss_and_gradient(&client.model, &batch)?;
    Ok(g)
}

#[allow(clippy::too_many_arguments)]
fn global_round(
    t: usize,
    config: &RunConfig,
    clients: &mut [Client],
    cluster_state: &mut ClusterState,
    global_model: &mut ModelState,
    ps_optimizer: &mut OptimizerState,
    ledger: &mut CommLedger,
    scale: f64,
) -> Result<(RoundMetrics, RoundAudit)> {
    let dim = global_model.dim();
    let idx_bits = ledger.index_bits_per_coord;
    let value_bits = ledger.value_bits;
    let mut audit = RoundAudit {
        t,
        ..Default::default()
    };
    if config.record_details {
        audit.age_before = snapshot_ages(cluster_state);
    }

    let gradients: Vec<GradientVector> = clients
        .iter_mut()
        .map(|c| gradient_for_report(c, config.batch_size))
        .collect::<Result<_>>()?;

    let mut phase1_bits = 0u64;
    let updates: Vec<SparseUpdate> = match config.sparsifier {
        SparsifierKind::TopK { k } => gradients
            .iter()
            .map(|g| top_k_sparsify(g, k))
            .collect::<Result<_>>()?,
        SparsifierKind::RTopK { r, k } => gradients
            .iter()
            .zip(clients.iter_mut())
            .map(|(g, c)| r_top_k_sparsify(g, r, k, &mut c.sparsifier_rng))
            .collect::<Result<_>>()?,
        SparsifierKind::RAgeK { r, k } => {
            // Phase 1: every client reports its top-r index set.
            phase1_bits = clients.len() as u64 * r as u64 * idx_bits;
            for ledger_entry in ledger.per_client.iter_mut() {
                ledger_entry.uplink_index_bits += r as u64 * idx_bits;
            }
            let candidates: Vec<Vec<(usize, f64)>> = gradients
                .iter()
                .map(|g| {
                    Ok(top_r_indices(g, r)?
                        .into_iter()
                        .map(|i| (i, g.values()[i]))
                        .collect())
                })
                .collect::<Result<_>>()?;

            // Per cluster, the server picks the stalest candidates; with
            // two or more members the requested sets are kept disjoint.
            let mut requested: Vec<Vec<usize>> = vec![Vec::new(); clients.len()];
            let cluster_ids: Vec<usize> = cluster_state.clusters().keys().copied().collect();
            for cluster_id in &cluster_ids {
                let members: Vec<usize> = cluster_state.clusters()[cluster_id]
                    .members
                    .iter()
                    .copied()
                    .collect();
                let age = cluster_state.age_of_cluster(*cluster_id);
                if config.disjoint_assignment && members.len() >= 2 {
                    let member_candidates: Vec<Vec<(usize, f64)>> =
                        members.iter().map(|&m| candidates[m].clone()).collect();
                    let sets = assign_disjoint_requests(age, &member_candidates, k)?;
                    for (m, set) in members.iter().zip(sets) {
                        requested[*m] = set;
                    }
                } else {
                    for &m in &members {
                        requested[m] = select_top_age(age, &candidates[m], k);
                    }
                }
            }

            // Phase 2: clients answer on the requested indices; the server
            // ages each cluster once using the union of member requests.
            for cluster_id in &cluster_ids {
                let members = &cluster_state.clusters()[cluster_id].members;
                let union: BTreeSet<usize> = members
                    .iter()
                    .flat_map(|&m| requested[m].iter().copied())
                    .collect();
                let union: Vec<usize> = union.into_iter().collect();
                let aged = age_update(cluster_state.age_of_cluster(*cluster_id), &union)?;
                cluster_state.set_age(*cluster_id, aged);
            }
            for (i, client) in clients.iter_mut().enumerate() {
                client.frequency = record_request(&client.frequency, &requested[i])?;
            }

            gradients
                .iter()
                .zip(&requested)
                .map(|(g, req)| SparseUpdate::from_dense(g, req))
                .collect::<Result<_>>()?
        }
    };

    let mut payload_bits = 0u64;
    for (entry, update) in ledger.per_client.iter_mut().zip(&updates) {
        let bits = update.requested().len() as u64 * (idx_bits + value_bits);
        entry.uplink_payload_bits += bits;
        payload_bits += bits;
    }

    let mut aggregated = aggregate(&updates, dim)?;
    aggregated.scale(scale);
    apply_update(global_model, ps_optimizer, &aggregated)?;

    // Broadcast: every client adopts the new global model.
    let broadcast_bits = clients.len() as u64 * dim as u64 * value_bits;
    for entry in ledger.per_client.iter_mut() {
        entry.downlink_bits += dim as u64 * value_bits;
    }
    for client in clients.iter_mut() {
        client.model.set_theta(global_model.theta().clone())?;
        if config.reset_local_optimizer {
            client.optimizer.reset();
        }
    }

    let mut per_client_loss = Vec::with_capacity(clients.len());
    let mut per_client_accuracy = Vec::with_capacity(clients.len());
    for client in clients.iter() {
        let (acc, loss) = evaluate(global_model, &client.eval_batch)?;
        per_client_accuracy.push(acc);
        per_client_loss.push(loss);
    }
    let n = clients.len() as f64;
    let mean_loss = per_client_loss.iter().sum::<f64>() / n;
    let mean_accuracy = per_client_accuracy.iter().sum::<f64>() / n;

    if config.record_details {
        audit.requested = updates.iter().map(|u| u.requested().to_vec()).collect();
        audit.age_after = snapshot_ages(cluster_state);
        audit.freq_sums = clients.iter().map(|c| c.frequency.sum()).collect();
        audit.theta = global_model.theta().values().to_vec();
    }

    let metrics = RoundMetrics {
        t,
        per_client_loss,
        per_client_accuracy,
        mean_loss,
        mean_accuracy,
        cluster_labels: cluster_state.labels(),
        phase1_bits,
        payload_bits,
        broadcast_bits,
        cumulative_uplink_bits: ledger.total_uplink(),
        cumulative_downlink_bits: ledger.total_downlink(),
    };
    Ok((metrics, audit))
}

fn snapshot_ages(state: &ClusterState) -> Vec<(usize, Vec<usize>, Vec<u64>)> {
    state
        .clusters()
        .iter()
        .map(|(&id, c)| {
            (
                id,
                c.members.iter().copied().collect(),
                c.age.ages().to_vec(),
            )
        })
        .collect()
}

/// Writes the per-round metrics as CSV. Formatting is the shortest exact
/// decimal per value, so identical runs produce byte-identical files.
pub fn write_metrics_csv(report: &RunReport, w: &mut impl Write) -> Result<()> {
    let n = report.config.num_clients;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("loss_client_{i}")));
    header.extend((0..n).map(|i| format!("acc_client_{i}")));
    header.push("mean_loss".into());
    header.push("mean_acc".into());
    header.extend((0..n).map(|i| format!("cluster_client_{i}")));
    header.extend(
        [
            "phase1_bits",
            "payload_bits",
            "broadcast_bits",
            "cum_uplink_bits",
            "cum_downlink_bits",
        ]
        .map(String::from),
    );
    writeln!(w, "{}", header.join(","))?;
    for r in &report.rounds {
        let mut row = vec![r.t.to_string()];
        row.extend(r.per_client_loss.iter().map(|v| format!("{v}")));
        row.extend(r.per_client_accuracy.iter().map(|v| format!("{v}")));
        row.push(format!("{}", r.mean_loss));
        row.push(format!("{}", r.mean_accuracy));
        row.extend(r.cluster_labels.iter().map(|v| v.to_string()));
        for bits in [
            r.phase1_bits,
            r.payload_bits,
            r.broadcast_bits,
            r.cumulative_uplink_bits,
            r.cumulative_downlink_bits,
        ] {
            row.push(bits.to_string());
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Serialized server state: frequency vectors plus the cluster partition
/// and age vectors. Backs the `heatmap` subcommand.
pub fn write_server_state(report: &RunReport, w: &mut impl Write) -> Result<()> {
    w.write_all(b"RGKS")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(report.final_frequencies.len() as u64).to_le_bytes())?;
    for f in &report.final_frequencies {
        f.write_to(w)?;
    }
    let state = report
        .final_cluster_state
        .as_ref()
        .ok_or_else(|| Error::structural("report holds no cluster state"))?;
    w.write_all(&(state.clusters().len() as u64).to_le_bytes())?;
    for (&id, cluster) in state.clusters() {
        w.write_all(&(id as u64).to_le_bytes())?;
        w.write_all(&(cluster.members.len() as u64).to_le_bytes())?;
        for &m in &cluster.members {
            w.write_all(&(m as u64).to_le_bytes())?;
        }
        cluster.age.write_to(w)?;
    }
    Ok(())
}

/// Reads back the frequency vectors stored by [`write_server_state`].
pub fn read_frequencies(r: &mut impl Read) -> Result<Vec<FrequencyVector>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"RGKS" {
        return Err(Error::Format {
            offset: 0,
            message: "bad server-state magic".into(),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != 1 {
        return Err(Error::Format {
            offset: 4,
            message: "unsupported server-state version".into(),
        });
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    (0..n).map(|i| FrequencyVector::read_from(r, i)).collect()
}

/// Writes every artifact of a finished run into `dir`: the resolved
/// config, metrics CSV, JSON report, model checkpoint, server state, and
/// per-recluster similarity/distance matrices.
pub fn write_run_artifacts(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), report.config.to_toml_string())?;

    let mut metrics = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(report, &mut metrics)?;
    metrics.flush()?;

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::structural(format!("report serialization failed: {e}")))?;
    std::fs::write(dir.join("report.json"), json)?;

    if let Some(model) = &report.final_model {
        let mut ckpt = std::io::BufWriter::new(std::fs::File::create(dir.join("checkpoint.bin"))?);
        model.write_checkpoint(&mut ckpt)?;
        ckpt.flush()?;
    }
    let mut state = std::io::BufWriter::new(std::fs::File::create(dir.join("state.bin"))?);
    write_server_state(report, &mut state)?;
    state.flush()?;

    for event in &report.recluster_events {
        let n = report.config.num_clients;
        crate::clustering::write_matrix_csv(
            &dir.join(format!("similarity_t{}.csv", event.t)),
            |i, j| event.similarity[i][j],
            n,
        )?;
        crate::clustering::write_matrix_csv(
            &dir.join(format!("distance_t{}.csv", event.t)),
            |i, j| event.distance[i][j],
            n,
        )?;
    }
    Ok(())
}

/// Re-emits similarity and distance CSVs from a stored server state.
pub fn emit_heatmaps(state_path: &Path, out_dir: &Path) -> Result<()> {
    let bytes = std::fs::read(state_path)?;
    let freqs = read_frequencies(&mut bytes.as_slice())?;
    let sim = SimilarityMatrix::from_frequencies(&freqs);
    let dist: DistanceMatrix = similarity_to_distance(&sim);
    std::fs::create_dir_all(out_dir)?;
    let n = freqs.len();
    crate::clustering::write_matrix_csv(&out_dir.join("similarity.csv"), |i, j| sim.get(i, j), n)?;
    crate::clustering::write_matrix_csv(&out_dir.join("distance.csv"), |i, j| dist.get(i, j), n)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, ModelConfig};
    use crate::learner::OptimizerKind;

    pub(crate) fn small_config(sparsifier: SparsifierKind) -> RunConfig {
        let mut config = RunConfig {
            master_seed: 11,
            num_clients: 4,
            total_iters: 8,
            local_iters_per_round: 2,
            recluster_period: 4,
            batch_size: 8,
            eps: 0.3,
            min_pts: 2,
            aggregation_scale: None,
            disjoint_assignment: true,
            reset_local_optimizer: false,
            value_bits: 64,
            record_details: true,
            sparsifier,
            model: ModelConfig {
                layer_sizes: vec![6, 5, 4],
            },
            client_optimizer: OptimizerKind::Sgd { eta: 0.05 },
            ps_optimizer: OptimizerKind::Sgd { eta: 0.05 },
            data: DataConfig {
                source: DataSource::Synthetic {
                    num_classes: 4,
                    input_dim: 6,
                    per_class_count: 12,
                    separation: 3.0,
                },
                shard_classes: Some(vec![vec![0, 1], vec![0, 1], vec![2, 3], vec![2, 3]]),
                overlapping: false,
            },
        };
        config.resolve().unwrap();
        config
    }

    #[test]
    fn round_cadence() {
        let report = run(&small_config(SparsifierKind::RAgeK { r: 10, k: 3 })).unwrap();
        assert_eq!(report.rounds.len(), 4); // T/H
        assert_eq!(report.recluster_events.len(), 2); // T/M
    }

    #[test]
    fn deterministic_reports() {
        let config = small_config(SparsifierKind::RAgeK { r: 10, k: 3 });
        let a = run(&config).unwrap();
        let b = run(&config).unwrap();
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_metrics_csv(&a, &mut csv_a).unwrap();
        write_metrics_csv(&b, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(
            a.final_model.as_ref().unwrap().theta(),
            b.final_model.as_ref().unwrap().theta()
        );
    }

    #[test]
    fn aggregated_support_within_requests() {
        let report = run(&small_config(SparsifierKind::RAgeK { r: 10, k: 3 })).unwrap();
        for audit in &report.audits {
            let all_requested: BTreeSet<usize> =
                audit.requested.iter().flatten().copied().collect();
            assert!(!all_requested.is_empty());
            // k=3 per client at most.
            for set in &audit.requested {
                assert!(set.len() <= 3);
            }
        }
    }

    #[test]
    fn frequency_conservation() {
        let config = small_config(SparsifierKind::RAgeK { r: 10, k: 3 });
        let report = run(&config).unwrap();
        for (round_index, audit) in report.audits.iter().enumerate() {
            for (client, &sum) in audit.freq_sums.iter().enumerate() {
                let requested_so_far: usize = report.audits[..=round_index]
                    .iter()
                    .map(|a| a.requested[client].len())
                    .sum();
                assert_eq!(sum as usize, requested_so_far);
            }
        }
    }

    #[test]
    fn rtopk_has_no_phase1_bits() {
        let report = run(&small_config(SparsifierKind::RTopK { r: 10, k: 3 })).unwrap();
        for round in &report.rounds {
            assert_eq!(round.phase1_bits, 0);
        }
        for entry in &report.ledger.per_client {
            assert_eq!(entry.uplink_index_bits, 0);
        }
    }

    #[test]
    fn ragek_uplink_exceeds_rtopk_by_index_report() {
        let ragek = run(&small_config(SparsifierKind::RAgeK { r: 10, k: 3 })).unwrap();
        let rtopk = run(&small_config(SparsifierKind::RTopK { r: 10, k: 3 })).unwrap();
        let idx_bits = ragek.ledger.index_bits_per_coord;
        for (a, b) in ragek
            .ledger
            .per_client
            .iter()
            .zip(&rtopk.ledger.per_client)
        {
            // Full-size requested sets here, so the payloads match and the
            // difference is exactly the per-round index report.
            let rounds = ragek.rounds.len() as u64;
            assert_eq!(
                a.uplink_total() - b.uplink_total(),
                rounds * 10 * idx_bits
            );
        }
    }

    #[test]
    fn degenerate_single_client_full_budget() {
        let mut config = small_config(SparsifierKind::TopK { k: 49 });
        config.num_clients = 1;
        config.total_iters = 1;
        config.local_iters_per_round = 1;
        config.recluster_period = 1;
        config.data.shard_classes = Some(vec![vec![0, 1, 2, 3]]);
        config.aggregation_scale = None;
        config.resolve().unwrap();
        // d = 6*5+5+5*4+4 = 59; k=d means the update is the full gradient.
        config.sparsifier = SparsifierKind::TopK { k: 59 };
        let report = run(&config).unwrap();
        assert_eq!(report.rounds.len(), 1);
        assert_eq!(report.ledger.per_client[0].uplink_payload_bits, 59 * (6 + 64));
    }

    #[test]
    fn server_state_roundtrip() {
        let report = run(&small_config(SparsifierKind::RAgeK { r: 10, k: 3 })).unwrap();
        let mut buf = Vec::new();
        write_server_state(&report, &mut buf).unwrap();
        let freqs = read_frequencies(&mut buf.as_slice()).unwrap();
        assert_eq!(freqs, report.final_frequencies);
    }
}
