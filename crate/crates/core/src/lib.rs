//! Auditing toolkit for continually retrained clinical risk classifiers.
//!
//! The crate simulates chronological retraining of a weekly risk model and
//! measures, per retraining phase, predictive performance, subgroup fairness,
//! prediction stability, arbitrariness, Rashomon-set multiplicity and the
//! effect of distance-based conformal abstention.
//!
//! Module map:
//!
//! * [`dataio`]: CSV ingestion, validation, protected-attribute binarization,
//!   chronological batching and holdout sampling.
//! * [`cgmfeat`]: raw CGM traces to daily metrics, glycemic events and
//!   labeled weekly observations.
//! * [`synthgen`]: synthetic cohorts with controllable drift.
//! * [`learner`]: logistic regression and Gaussian naive Bayes.
//! * [`engine`]: retraining strategies, evaluation schemas, bootstrap and
//!   Rashomon ensembles, and the prediction ledger.
//! * [`metrics`]: AUC, fairness gaps, self-consistency, flips, multiplicity.
//! * [`abstain`]: kNN-distance split-conformal abstention.
//! * [`report`]: per-phase reports and seed aggregation into summary tables.

#![deny(unsafe_code)]

pub mod abstain;
pub mod cgmfeat;
pub mod dataio;
pub mod engine;
pub mod error;
pub mod kv;
pub mod learner;
pub mod metrics;
pub mod report;
pub mod seed;
pub mod synthgen;

pub use error::{Error, Result};
