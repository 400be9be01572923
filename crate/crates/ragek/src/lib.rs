//! Simulation framework for communication-efficient federated learning with
//! age-based gradient sparsification.
//!
//! The parameter server keeps a per-cluster *age vector* counting, per model
//! coordinate, the rounds since it last received an update on that
//! coordinate. Each global round, clients report their `r`
//! largest-magnitude gradient indices; the server requests the `k` stalest
//! of them, resets their age, and aggregates the returned sparse values.
//! Request frequencies double as a clustering feature: clients whose
//! requested coordinates overlap are grouped by DBSCAN, and co-clustered
//! clients get disjoint request sets so a cluster covers more coordinates
//! per round.
//!
//! ```
//! use ragek::aging::AgeVector;
//! use ragek::sparsifiers::r_age_k_sparsify;
//! use ragek::vectors::GradientVector;
//!
//! let g = GradientVector::new(vec![5.0, -4.0, 3.0, 2.0, 1.0])?;
//! let age = AgeVector::from_ages(vec![0, 7, 0, 9, 1], 0);
//! let (update, next_age) = r_age_k_sparsify(&g, &age, 3, 2)?;
//! assert_eq!(update.entries(), &[(0, 5.0), (1, -4.0)]);
//! assert_eq!(next_age.ages(), &[0, 0, 1, 10, 2]);
//! # Ok::<(), ragek::error::Error>(())
//! ```

pub mod aging;
pub mod clustering;
pub mod data;
pub mod error;
pub mod learner;
pub mod sparsifiers;
pub mod vectors;
pub mod cli;
pub mod config;
pub mod orchestrator;
