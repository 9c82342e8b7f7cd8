//! On-disk artifacts passed between subcommands. Everything is JSON except
//! the released table, which is CSV. Ciphertexts travel as hex of their
//! length-prefixed binary form. Maps are kept sorted so repeated runs with
//! the same seeds produce byte-identical files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use encanon::datamodel::{CipherTable, Schema};
use encanon::kanon::AnonReport;
use encanon::she::{Ciphertext, PublicKey, SecretKey};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::CliError;

pub const ARTIFACT_VERSION: u32 = 1;

/// Key material for one run. Holding pk and sk in one file mirrors the
/// simulated setting where the operator plays both parties.
#[derive(Serialize, Deserialize)]
pub struct KeyFile {
    pub version: u32,
    pub nonce_seed: u64,
    pub pk: PublicKey,
    pub sk: SecretKey,
}

/// An encrypted table plus the token maps needed to render tokenized
/// columns at release time.
#[derive(Serialize, Deserialize)]
pub struct TableFile {
    pub version: u32,
    pub key_id: u64,
    pub schema: Schema,
    pub token_maps: BTreeMap<usize, Vec<String>>,
    pub rows: Vec<Vec<String>>,
}

/// Identifier scan results with columns spelled out by name.
#[derive(Serialize, Deserialize)]
pub struct ScanFile {
    pub version: u32,
    pub k: usize,
    pub max_combo: usize,
    pub direct: Vec<String>,
    pub minimal_quasi: Vec<Vec<String>>,
    pub lattice_evaluated: usize,
    pub lattice_pruned: usize,
    pub lattice_total: usize,
}

/// Serializable copy of the anonymization run report.
#[derive(Serialize, Deserialize)]
pub struct RunReport {
    pub iterations: usize,
    pub repairs: usize,
    pub suppressed_clusters: Vec<usize>,
    pub suppressed_rows: usize,
    pub merges: Vec<(usize, usize)>,
    pub final_cluster_sizes: Vec<usize>,
}

impl From<&AnonReport> for RunReport {
    fn from(r: &AnonReport) -> Self {
        RunReport {
            iterations: r.iterations,
            repairs: r.repairs,
            suppressed_clusters: r.suppressed_clusters.clone(),
            suppressed_rows: r.suppressed_rows,
            merges: r.merges.clone(),
            final_cluster_sizes: r.final_cluster_sizes.clone(),
        }
    }
}

/// Anonymization output: the generalized table, the encrypted drop flags
/// and the run report.
#[derive(Serialize, Deserialize)]
pub struct BundleFile {
    pub version: u32,
    pub table: TableFile,
    pub drop_flags: Vec<String>,
    pub report: RunReport,
}

pub fn cipher_hex(c: &Ciphertext) -> String {
    hex::encode(c.to_bytes())
}

pub fn cipher_from_hex(s: &str) -> Result<Ciphertext, CliError> {
    let bytes = hex::decode(s)
        .map_err(|e| CliError::Config(format!("bad ciphertext encoding: {e}")))?;
    let (c, used) = Ciphertext::from_bytes(&bytes)
        .map_err(|e| CliError::Config(format!("bad ciphertext: {e}")))?;
    if used != bytes.len() {
        return Err(CliError::Config("trailing bytes after ciphertext".into()));
    }
    Ok(c)
}

pub fn to_table_file(table: &CipherTable, token_maps: &HashMap<usize, Vec<String>>) -> TableFile {
    TableFile {
        version: ARTIFACT_VERSION,
        key_id: table.key_id,
        schema: table.schema.clone(),
        token_maps: token_maps.iter().map(|(k, v)| (*k, v.clone())).collect(),
        rows: table
            .rows
            .iter()
            .map(|row| row.iter().map(cipher_hex).collect())
            .collect(),
    }
}

pub fn from_table_file(file: &TableFile) -> Result<(CipherTable, HashMap<usize, Vec<String>>), CliError> {
    let mut rows = Vec::with_capacity(file.rows.len());
    for row in &file.rows {
        rows.push(row.iter().map(|s| cipher_from_hex(s)).collect::<Result<Vec<_>, _>>()?);
    }
    let table = CipherTable {
        schema: file.schema.clone(),
        key_id: file.key_id,
        rows,
    };
    let token_maps = file.token_maps.iter().map(|(k, v)| (*k, v.clone())).collect();
    Ok((table, token_maps))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Protocol(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Protocol(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, version: u32) -> Result<T, CliError>
where
    T: Versioned,
{
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: T = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if value.version() != version {
        return Err(CliError::Config(format!(
            "{}: version {} not supported, expected {version}",
            path.display(),
            value.version()
        )));
    }
    Ok(value)
}

/// Artifact files carry their format version so stale files fail loudly.
pub trait Versioned {
    fn version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn version(&self) -> u32 {
                self.version
            }
        })*
    };
}

versioned!(KeyFile, TableFile, ScanFile, BundleFile);
