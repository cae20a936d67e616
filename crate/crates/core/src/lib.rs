//! A desk-scale laboratory for multi-modal missing-data imputation.
//!
//! The crate pairs a synthetic two-modality cohort generator (risk-factor
//! vectors plus longitudinal image patches with a planted cross-modal
//! signal) with a family of imputers — mean fill, last observation carried
//! forward, nuclear-norm soft-impute, and adversarial encoder-decoder
//! imputation with an optional conditional latent space and class
//! regularization — and evaluates them through a downstream two-path risk
//! classifier, AUC, and paired bootstrap tests.
//!
//! Modules:
//! - [`data`]: records, masks, datasets, merge rule, persistence.
//! - [`synthgen`]: seeded cohort generator with planted signal.
//! - [`missingness`]: MCAR/MAR/MNAR simulators and fake-mask sampling.
//! - [`baseline`]: mean, LOCF and soft-impute comparators.
//! - [`diff`]: reverse-mode autodiff, layers, Adam, gradient checker.
//! - [`adversarial`]: the adversarial imputers and their training loop.
//! - [`downstream`]: risk model, AUC, bootstrap significance.
//! - [`harness`]: experiment grid/sweep orchestration, reports, config.

pub mod adversarial;
pub mod baseline;
pub mod certify;
pub mod data;
pub mod diff;
pub mod downstream;
pub mod harness;
pub mod missingness;
pub mod rng;
pub mod stats;
pub mod synthgen;
