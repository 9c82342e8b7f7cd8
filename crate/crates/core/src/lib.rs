//! Privacy-preserving data publishing over encrypted tables.
//!
//! A data owner encrypts a table and hands it to an untrusted evaluator
//! (party 1) which, with the help of a key holder (party 2), detects
//! identifying attributes, masks them, perturbs values under differential
//! privacy and k-anonymizes quasi-identifying attributes. Both parties are
//! honest but curious; party 1 never holds the secret key and party 2 only
//! ever sees blinded or polynomial-masked values.
//!
//! Module map:
//!
//! - [`she`]: somewhat-homomorphic encryption interface plus an exact
//!   rational-arithmetic simulation backend with multiplicative depth
//!   tracking.
//! - [`datamodel`]: schemas, plain and encrypted tables, CSV ingestion and
//!   the far-apart integer encoding of category hierarchies.
//! - [`twoparty`]: party states, message transcripts, seeded permutations,
//!   the leakage auditor and the masked-output recovery analysis.
//! - [`vulnerability`]: direct-identifier detection and the pruned lattice
//!   search for minimal quasi-identifier sets.
//! - [`masking`]: value-replacement operators for direct identifiers.
//! - [`dp`]: Laplace and binary mechanisms evaluated on ciphertexts with
//!   encrypted domain bounds.
//! - [`kanon`]: the secure clustering pipeline (cluster, suppress, merge,
//!   anonymize) and its plaintext reference implementation.
//! - [`metrics`]: information-loss and re-identification risk measures over
//!   released tables.
//! - [`session`]: one-call protocol sessions bundling party setup, dispatch
//!   and transcript capture.

pub mod datamodel;
pub mod dp;
pub mod error;
pub mod kanon;
pub mod masking;
pub mod metrics;
pub mod session;
pub mod she;
pub mod twoparty;
pub mod vulnerability;

pub use error::Error;
