//! Workflow phases shared by the subcommands. `pipeline` chains them inside
//! one process; the stepwise commands run one phase each and exchange
//! artifacts on disk. Released values, scan results and metrics come out
//! identical either way. Ciphertext bytes do not, because every process
//! restarts the encryption nonce stream.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use encanon::datamodel::{
    encrypt_table, load_csv, pad_dictionary, CipherTable, ColumnKind, EncryptedDictionary,
    PlainTable,
};
use encanon::dp::{binary_encrypted, laplace_encrypted, DpBounds};
use encanon::kanon::AnonOutcome;
use encanon::masking::{mask_column, MaskRule};
use encanon::metrics::{self, MetricsReport};
use encanon::session::{run_audited_session, SessionProtocol, SessionResult};
use encanon::she::{Ciphertext, KeyPair, SchemeParams, SheScheme, SimBackend};
use encanon::twoparty::{AuditReport, Transcript};
use encanon::vulnerability::IdentifierScan;
use num::{BigRational, ToPrimitive, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::artifacts::{KeyFile, ScanFile, ARTIFACT_VERSION};
use crate::config::{DpMechanism, Loaded};
use crate::CliError;

pub const DETECT_SESSION: u64 = 1;
pub const ANON_SESSION: u64 = 2;

/// Per-phase seeds drawn from the master seed in a fixed order, so one
/// phase can be rerun without disturbing the draws of the others.
pub struct Seeds {
    pub nonce: u64,
    pub key: u64,
    pub detect: u64,
    pub mask: u64,
    pub dp: u64,
    pub anon: u64,
}

pub fn derive_seeds(master: u64) -> Seeds {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    Seeds {
        nonce: rng.next_u64(),
        key: rng.next_u64(),
        detect: rng.next_u64(),
        mask: rng.next_u64(),
        dp: rng.next_u64(),
        anon: rng.next_u64(),
    }
}

pub fn keygen(seeds: &Seeds) -> (SimBackend, KeyPair) {
    let scheme = SimBackend::new(seeds.nonce);
    let keys = scheme.keygen(SchemeParams::default(), seeds.key);
    (scheme, keys)
}

pub fn key_file(seeds: &Seeds, keys: &KeyPair) -> KeyFile {
    KeyFile {
        version: ARTIFACT_VERSION,
        nonce_seed: seeds.nonce,
        pk: keys.pk.clone(),
        sk: keys.sk.clone(),
    }
}

/// Rebuilds the backend and key pair of an earlier `keygen` run. The nonce
/// stream starts over, so fresh ciphertexts differ from that run's bytes
/// while decrypting to the same values.
pub fn reopen(file: &KeyFile) -> (SimBackend, KeyPair) {
    let scheme = SimBackend::new(file.nonce_seed);
    let keys = KeyPair {
        pk: file.pk.clone(),
        sk: file.sk.clone(),
    };
    (scheme, keys)
}

/// Input data problems are config-class failures: the config names the
/// file, so a missing column or a bad cell means the config and the data
/// disagree.
pub fn load_input(loaded: &Loaded) -> Result<PlainTable, CliError> {
    let file = File::open(&loaded.data_path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", loaded.data_path.display())))?;
    load_csv(file, &loaded.schema, &loaded.hierarchies)
        .map_err(|e| CliError::Config(format!("{}: {e}", loaded.data_path.display())))
}

pub fn encrypt(scheme: &SimBackend, keys: &KeyPair, plain: &PlainTable) -> CipherTable {
    encrypt_table(scheme, &keys.pk, plain)
}

pub fn check_key(table: &CipherTable, keys: &KeyPair) -> Result<(), CliError> {
    if table.key_id != keys.pk.key_id() {
        return Err(CliError::Protocol(format!(
            "table was encrypted under key {:#x}, loaded key is {:#x}",
            table.key_id,
            keys.pk.key_id()
        )));
    }
    Ok(())
}

fn audit_gate(what: &str, audit: &AuditReport) -> Result<(), CliError> {
    if audit.is_clean() {
        return Ok(());
    }
    let first = &audit.findings[0];
    Err(CliError::Protocol(format!(
        "{what} audit raised {} finding(s); first: {:?} {} ({}); \
         the table must be the agreed encryption of the input data",
        audit.findings.len(),
        first.tag,
        first.rule,
        first.detail
    )))
}

pub struct DetectOutput {
    pub scan: IdentifierScan,
    pub transcript: Transcript,
}

pub fn detect(
    scheme: &SimBackend,
    keys: &KeyPair,
    table: &CipherTable,
    plain: &PlainTable,
    loaded: &Loaded,
    seeds: &Seeds,
) -> Result<DetectOutput, CliError> {
    let protocol = SessionProtocol::Detect {
        k: loaded.cfg.identify.k,
        max_combo: loaded.cfg.identify.max_combo,
    };
    let (result, transcript, audit) = run_audited_session(
        scheme,
        keys,
        table,
        plain,
        &protocol,
        DETECT_SESSION,
        (seeds.detect, seeds.nonce),
    )?;
    audit_gate("identifier scan", &audit)?;
    let SessionResult::Detect(scan) = result else {
        unreachable!("detect protocol returns a scan");
    };
    Ok(DetectOutput { scan, transcript })
}

pub fn scan_file(scan: &IdentifierScan, loaded: &Loaded) -> ScanFile {
    let name = |i: usize| loaded.column_name(i).to_string();
    ScanFile {
        version: ARTIFACT_VERSION,
        k: loaded.cfg.identify.k,
        max_combo: loaded.cfg.identify.max_combo,
        direct: scan
            .direct
            .iter()
            .enumerate()
            .filter(|(_, &d)| d)
            .map(|(i, _)| name(i))
            .collect(),
        minimal_quasi: scan
            .minimal_quasi
            .iter()
            .map(|set| set.iter().map(|&i| name(i)).collect())
            .collect(),
        lattice_evaluated: scan.stats.evaluated,
        lattice_pruned: scan.stats.pruned,
        lattice_total: scan.stats.total,
    }
}

/// Detected direct identifiers no treatment covers: not masked, not noised
/// and not generalized as a quasi column. Releasing such a column would
/// hand out row-level identities, so the pipeline refuses while the
/// stepwise commands only warn.
pub fn uncovered_direct(scan: &IdentifierScan, loaded: &Loaded) -> Vec<String> {
    scan.direct
        .iter()
        .enumerate()
        .filter(|&(i, &d)| {
            d && !loaded.masks.iter().any(|(m, _)| *m == i)
                && !loaded.dp.iter().any(|p| p.column == i)
                && !loaded.quasi.contains(&i)
        })
        .map(|(i, _)| loaded.column_name(i).to_string())
        .collect()
}

fn build_dictionary(
    scheme: &SimBackend,
    keys: &KeyPair,
    idx: usize,
    token_maps: &mut HashMap<usize, Vec<String>>,
    loaded: &Loaded,
    n_rows: usize,
) -> Result<EncryptedDictionary, CliError> {
    let path = &loaded.dictionary_paths[&idx];
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::Config(format!("{}: {e}", path.display()));
    let values: Vec<BigRational> = match &loaded.schema.columns[idx].kind {
        // String entries get fresh token codes past the input's own, so the
        // release maps masked cells back to dictionary words.
        ColumnKind::Tokenized => {
            let words: Vec<String> = serde_json::from_str(&text).map_err(bad)?;
            if words.is_empty() {
                return Err(CliError::Config(format!("{} is empty", path.display())));
            }
            let map = token_maps.entry(idx).or_default();
            let base = map.len() as i64;
            let codes = (0..words.len())
                .map(|i| BigRational::from_integer((base + i as i64).into()))
                .collect();
            map.extend(words);
            codes
        }
        ColumnKind::Numeric => {
            let nums: Vec<i64> = serde_json::from_str(&text).map_err(bad)?;
            if nums.is_empty() {
                return Err(CliError::Config(format!("{} is empty", path.display())));
            }
            nums.iter()
                .map(|&v| BigRational::from_integer(v.into()))
                .collect()
        }
        ColumnKind::Categorical { .. } => {
            unreachable!("dictionary masks on categorical columns fail validation")
        }
    };
    let mut dict = EncryptedDictionary {
        entries: values.iter().map(|v| scheme.enc(&keys.pk, v)).collect(),
        declared_kind: loaded.column_name(idx).to_string(),
    };
    // Pad to the row count so the sampled entry index says nothing about
    // the dictionary's true size.
    pad_dictionary(scheme, &keys.pk, &mut dict, n_rows)?;
    Ok(dict)
}

pub fn mask(
    scheme: &SimBackend,
    keys: &KeyPair,
    table: &mut CipherTable,
    token_maps: &mut HashMap<usize, Vec<String>>,
    loaded: &Loaded,
    seed: u64,
) -> Result<(), CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = table.n_rows();
    for (idx, rule) in &loaded.masks {
        let dict = if matches!(rule, MaskRule::Dictionary) {
            Some(build_dictionary(scheme, keys, *idx, token_maps, loaded, n)?)
        } else {
            None
        };
        let mut cells: Vec<Ciphertext> = table.rows.iter().map(|r| r[*idx].clone()).collect();
        mask_column(scheme, &keys.pk, &mut cells, rule, dict.as_ref(), &mut rng)?;
        for (row, cell) in table.rows.iter_mut().zip(cells) {
            row[*idx] = cell;
        }
    }
    Ok(())
}

pub fn dp(
    scheme: &SimBackend,
    keys: &KeyPair,
    table: &mut CipherTable,
    loaded: &Loaded,
    seed: u64,
) -> Result<(), CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for plan in &loaded.dp {
        let bounds = DpBounds::new(
            scheme.enc(&keys.pk, &BigRational::from_integer(plan.lower.into())),
            scheme.enc(&keys.pk, &BigRational::from_integer(plan.upper.into())),
            plan.epsilon,
        )?;
        for row in table.rows.iter_mut() {
            let cell = &row[plan.column];
            row[plan.column] = match plan.mechanism {
                DpMechanism::Laplace => laplace_encrypted(scheme, &keys.pk, cell, &bounds, &mut rng)?,
                DpMechanism::Binary => binary_encrypted(scheme, &keys.pk, cell, &bounds, &mut rng)?,
            };
        }
    }
    Ok(())
}

pub struct AnonOutput {
    pub outcome: AnonOutcome,
    pub transcript: Transcript,
}

/// Runs the anonymization protocol on the working table. `plain` is the
/// untreated input and backs the leakage audit; masks and noise never touch
/// quasi columns, so the audited quasi-derived payloads still line up.
pub fn anonymize(
    scheme: &SimBackend,
    keys: &KeyPair,
    table: &CipherTable,
    plain: &PlainTable,
    loaded: &Loaded,
    seeds: &Seeds,
) -> Result<AnonOutput, CliError> {
    let protocol = SessionProtocol::Anonymize {
        config: loaded.anon_config(),
        hierarchies: loaded.hierarchies.clone(),
    };
    let (result, transcript, audit) = run_audited_session(
        scheme,
        keys,
        table,
        plain,
        &protocol,
        ANON_SESSION,
        (seeds.anon, seeds.nonce),
    )?;
    audit_gate("anonymization", &audit)?;
    let SessionResult::Anonymize(outcome) = result else {
        unreachable!("anonymize protocol returns an outcome");
    };
    Ok(AnonOutput { outcome, transcript })
}

/// Decrypted release: every row as exact rationals plus its drop flag.
pub struct Release {
    pub values: Vec<Vec<BigRational>>,
    pub dropped: Vec<bool>,
}

pub fn decrypt_release(
    scheme: &SimBackend,
    keys: &KeyPair,
    table: &CipherTable,
    drop_flags: &[Ciphertext],
) -> Result<Release, CliError> {
    check_key(table, keys)?;
    if drop_flags.len() != table.n_rows() {
        return Err(CliError::Protocol(format!(
            "{} drop flags for {} rows",
            drop_flags.len(),
            table.n_rows()
        )));
    }
    let dec = |c: &Ciphertext| {
        scheme
            .dec(&keys.sk, c)
            .map_err(|e| CliError::Protocol(format!("decryption failed: {e}")))
    };
    let mut values = Vec::with_capacity(table.n_rows());
    for row in &table.rows {
        values.push(row.iter().map(dec).collect::<Result<Vec<_>, _>>()?);
    }
    let mut dropped = Vec::with_capacity(drop_flags.len());
    for flag in drop_flags {
        dropped.push(!dec(flag)?.is_zero());
    }
    Ok(Release { values, dropped })
}

fn render_cell(
    value: &BigRational,
    idx: usize,
    loaded: &Loaded,
    token_maps: &HashMap<usize, Vec<String>>,
) -> String {
    // Injected values can land outside a token map or hierarchy, so every
    // branch falls back to the numeric literal.
    let literal = || {
        if value.is_integer() {
            value.to_integer().to_string()
        } else {
            value.to_string()
        }
    };
    let code = || value.is_integer().then(|| value.to_integer().to_i64()).flatten();
    match &loaded.schema.columns[idx].kind {
        ColumnKind::Numeric => {
            if loaded.cfg.output.release_rounding {
                value.round().to_integer().to_string()
            } else {
                literal()
            }
        }
        ColumnKind::Tokenized => code()
            .and_then(|c| usize::try_from(c).ok())
            .and_then(|c| token_maps.get(&idx).and_then(|m| m.get(c)))
            .cloned()
            .unwrap_or_else(literal),
        ColumnKind::Categorical { hierarchy } => {
            let h = &loaded.hierarchies[hierarchy];
            // The generalization level is whatever the release chose per
            // class, so search every level for the node carrying this code.
            code()
                .and_then(|c| (0..=h.height()).find_map(|lvl| h.node_by_code(lvl, c)))
                .map(|node| node.label.clone())
                .unwrap_or_else(literal)
        }
    }
}

/// Writes retained rows as CSV, one column per schema entry.
pub fn write_release_csv(
    path: &Path,
    release: &Release,
    token_maps: &HashMap<usize, Vec<String>>,
    loaded: &Loaded,
) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::Protocol(format!("cannot write {}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(file);
    let io_err = |e: csv::Error| CliError::Protocol(format!("cannot write {}: {e}", path.display()));
    w.write_record(loaded.schema.columns.iter().map(|c| c.name.as_str()))
        .map_err(io_err)?;
    for (row, &drop) in release.values.iter().zip(&release.dropped) {
        if drop {
            continue;
        }
        let fields: Vec<String> = (0..row.len())
            .map(|i| render_cell(&row[i], i, loaded, token_maps))
            .collect();
        w.write_record(&fields).map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| CliError::Protocol(format!("cannot write {}: {e}", path.display())))
}

pub fn compute_metrics(
    release: &Release,
    original: Option<&PlainTable>,
    loaded: &Loaded,
) -> Result<MetricsReport, CliError> {
    let original_rats: Option<Vec<Vec<BigRational>>> = original.map(|p| {
        p.rows
            .iter()
            .map(|r| r.iter().map(|&v| BigRational::from_integer(v.into())).collect())
            .collect()
    });
    Ok(metrics::report(
        &release.values,
        original_rats.as_deref(),
        &loaded.schema,
        &loaded.hierarchies,
        &loaded.quasi,
        &release.dropped,
    )?)
}

/// One JSONL file: a header line per session followed by its message
/// records, sessions in run order.
pub fn write_transcripts(path: &Path, transcripts: &[&Transcript]) -> Result<(), CliError> {
    let err = |e: std::io::Error| CliError::Protocol(format!("cannot write {}: {e}", path.display()));
    let mut out = File::create(path).map_err(err)?;
    for t in transcripts {
        let header = serde_json::json!({
            "session_id": t.session_id,
            "decision_seed": t.rng_seeds.0,
            "nonce_seed": t.rng_seeds.1,
            "messages": t.messages.len(),
        });
        writeln!(out, "{header}").map_err(err)?;
        t.write_jsonl(&mut out).map_err(err)?;
    }
    Ok(())
}
