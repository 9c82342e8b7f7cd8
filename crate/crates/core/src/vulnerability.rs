//! Identifier vulnerability scanning over encrypted tables.
//!
//! Party 1 ships, per attribute, an N by N matrix of blinded pairwise
//! differences. Party 2 decrypts only the zero pattern: which pairs of rows
//! agree on that attribute. Equality counts below the threshold k mark
//! direct identifiers; combinations of attributes are then walked as a
//! lattice, pruned by the fact that any superset of a quasi-identifier is
//! one too.

use num::{BigRational, Zero};

use crate::datamodel::{CipherTable, PlainTable};
use crate::error::{Error, Result};
use crate::she::SheScheme;
use crate::twoparty::{
    audit_leakage, sample_signed_blinder, AuditReport, Channel, Direction, P1Handle, P2Handle,
    Payload, RawValues, ReferenceTrace, StepTag,
};

/// Per-attribute equality patterns: `patterns[i][u][v]` is true when rows u
/// and v agree on attribute i. Symmetric with a true diagonal.
pub type EqualityPatterns = Vec<Vec<Vec<bool>>>;

/// Blinded pairwise differences for one attribute, as sent to party 2.
pub fn masked_diff_matrix<S: SheScheme>(
    p1: &mut P1Handle<S>,
    table: &CipherTable,
    attr: usize,
    zero_blinder_fault: bool,
) -> Result<Vec<Vec<crate::she::Ciphertext>>> {
    let n = table.n_rows();
    let mut matrix = Vec::with_capacity(n);
    for u in 0..n {
        let mut row = Vec::with_capacity(n);
        for v in 0..n {
            let diff = crate::she::sub(p1.scheme, &p1.pk, &table.rows[u][attr], &table.rows[v][attr])?;
            // Sign-randomized so the decrypted matrix does not even reveal
            // which of the two values is larger.
            let r = if zero_blinder_fault {
                0
            } else {
                sample_signed_blinder(&mut p1.rng)
            };
            row.push(p1.scheme.mult(&p1.pk, &diff, &p1.enc_int(r))?);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

/// Raw differences behind `masked_diff_matrix`, for the leakage auditor.
pub fn raw_diff_matrix(plain: &PlainTable, attr: usize) -> Vec<Vec<BigRational>> {
    let n = plain.n_rows();
    (0..n)
        .map(|u| {
            (0..n)
                .map(|v| BigRational::from_integer((plain.rows[u][attr] - plain.rows[v][attr]).into()))
                .collect()
        })
        .collect()
}

/// Party 2 side: which entries decrypt to zero.
pub fn zero_pattern<S: SheScheme>(
    p2: &P2Handle<S>,
    matrix: &[Vec<crate::she::Ciphertext>],
) -> Result<Vec<Vec<bool>>> {
    matrix
        .iter()
        .map(|row| {
            row.iter()
                .map(|c| Ok(p2.dec(c)?.is_zero()))
                .collect::<Result<Vec<bool>>>()
        })
        .collect()
}

/// Equality patterns straight from plaintext, the oracle the encrypted path
/// must match.
pub fn plain_patterns(plain: &PlainTable) -> EqualityPatterns {
    let n = plain.n_rows();
    (0..plain.schema.width())
        .map(|attr| {
            (0..n)
                .map(|u| {
                    (0..n)
                        .map(|v| plain.rows[u][attr] == plain.rows[v][attr])
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// An attribute is a direct identifier when some of its values appears in
/// fewer than k rows (the row itself counts).
pub fn detect_direct(patterns: &EqualityPatterns, k: usize) -> Vec<bool> {
    patterns
        .iter()
        .map(|pattern| {
            pattern
                .iter()
                .any(|row| row.iter().filter(|&&b| b).count() < k)
        })
        .collect()
}

/// Rows matching row j on every attribute in the combination.
pub fn combo_match_count(patterns: &EqualityPatterns, attrs: &[usize], j: usize) -> usize {
    let n = patterns[attrs[0]].len();
    (0..n)
        .filter(|&l| attrs.iter().all(|&i| patterns[i][j][l]))
        .count()
}

fn combo_is_quasi(patterns: &EqualityPatterns, attrs: &[usize], k: usize) -> bool {
    let n = patterns[attrs[0]].len();
    (0..n).any(|j| combo_match_count(patterns, attrs, j) < k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Quasi,
    Safe,
    /// Skipped: superset of an already known quasi-identifier.
    PrunedQuasi,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LatticeStats {
    pub evaluated: usize,
    pub pruned: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct QuasiScan {
    /// Minimal quasi-identifier attribute sets, each sorted, in discovery
    /// order.
    pub minimal: Vec<Vec<usize>>,
    pub stats: LatticeStats,
}

/// Breadth-first walk of attribute combinations of the non-direct columns,
/// smallest first. Single columns are safe by construction (a quasi
/// singleton is a direct identifier); the walk starts at pairs. With
/// pruning on, supersets of found quasi-identifiers are never evaluated,
/// which cannot change the minimal sets because quasi-ness is monotone
/// under supersets.
pub fn detect_quasi(
    patterns: &EqualityPatterns,
    k: usize,
    direct: &[bool],
    max_combo: usize,
    prune: bool,
) -> QuasiScan {
    let candidates: Vec<usize> = (0..patterns.len()).filter(|&i| !direct[i]).collect();
    let mut minimal: Vec<Vec<usize>> = Vec::new();
    let mut stats = LatticeStats::default();

    let max_size = max_combo.min(candidates.len());
    for size in 2..=max_size {
        let mut indices: Vec<usize> = (0..size).collect();
        loop {
            let attrs: Vec<usize> = indices.iter().map(|&i| candidates[i]).collect();
            stats.total += 1;
            let covered = minimal.iter().any(|q| q.iter().all(|a| attrs.contains(a)));
            if covered && prune {
                stats.pruned += 1;
            } else {
                stats.evaluated += 1;
                if combo_is_quasi(patterns, &attrs, k) && !covered {
                    minimal.push(attrs);
                }
            }
            // Next combination of `candidates` in lexicographic order.
            let mut i = size;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                indices[i] += 1;
                if indices[i] <= candidates.len() - (size - i) {
                    for j in i + 1..size {
                        indices[j] = indices[j - 1] + 1;
                    }
                    break;
                }
            }
            if i == 0 && indices[0] > candidates.len() - size {
                break;
            }
        }
    }
    QuasiScan { minimal, stats }
}

/// Combined scan result as learned by party 1.
#[derive(Debug, Clone)]
pub struct IdentifierScan {
    pub direct: Vec<bool>,
    pub minimal_quasi: Vec<Vec<usize>>,
    pub stats: LatticeStats,
}

/// Full identification protocol: party 1 sends blinded difference matrices,
/// party 2 returns direct-identifier flags and then walks the lattice over
/// its cached zero patterns. When `plain` is given, the raw differences are
/// recorded in the reference trace for auditing.
pub fn detect_identifiers_protocol<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    table: &CipherTable,
    k: usize,
    max_combo: usize,
    plain: Option<&PlainTable>,
    trace: Option<&mut ReferenceTrace>,
) -> Result<IdentifierScan> {
    let n = table.n_rows();
    let d = table.schema.width();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("k = {k} outside 1..={n}")));
    }
    if let (Some(trace), Some(plain)) = (&trace, plain) {
        debug_assert!(plain.n_rows() == n);
        let _ = trace;
    }
    let mut trace = trace;

    ch.send(
        Direction::P1ToP2,
        StepTag::DiRequest,
        Payload::Ints(vec![k as i64, d as i64, n as i64]),
    );

    let zero_fault = ch.faults.zero_di_blinder;
    let mut patterns: EqualityPatterns = Vec::with_capacity(d);
    for attr in 0..d {
        let matrix = masked_diff_matrix(p1, table, attr, zero_fault)?;
        if let (Some(trace), Some(plain)) = (trace.as_deref_mut(), plain) {
            trace.push(
                StepTag::DiMaskedMatrix,
                RawValues::DiMatrix(raw_diff_matrix(plain, attr)),
            );
        }
        let msg = ch.send(
            Direction::P1ToP2,
            StepTag::DiMaskedMatrix,
            Payload::CipherMatrix(matrix),
        );
        let Payload::CipherMatrix(sent) = &msg.payload else {
            unreachable!()
        };
        patterns.push(zero_pattern(p2, sent)?);
    }

    let direct = detect_direct(&patterns, k);
    ch.send(
        Direction::P2ToP1,
        StepTag::DiFlags,
        Payload::Flags(direct.clone()),
    );

    ch.send(
        Direction::P1ToP2,
        StepTag::QuasiRequest,
        Payload::Ints(vec![k as i64, max_combo as i64]),
    );
    let scan = detect_quasi(&patterns, k, &direct, max_combo, true);
    ch.send(
        Direction::P2ToP1,
        StepTag::QuasiSets,
        Payload::IntSets(scan.minimal.clone()),
    );

    Ok(IdentifierScan {
        direct,
        minimal_quasi: scan.minimal,
        stats: scan.stats,
    })
}

/// Convenience wrapper for tests and the pipeline: runs the protocol and
/// audits its transcript in one go.
pub fn scan_and_audit<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    table: &CipherTable,
    plain: &PlainTable,
    k: usize,
    max_combo: usize,
) -> Result<(IdentifierScan, AuditReport)> {
    let mut trace = ReferenceTrace::new();
    let scan = detect_identifiers_protocol(p1, p2, ch, table, k, max_combo, Some(plain), Some(&mut trace))?;
    let report = audit_leakage(ch.transcript(), p1.scheme, trace);
    Ok((scan, report))
}
