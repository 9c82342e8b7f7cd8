//! k-anonymization of encrypted tables by secure clustering.
//!
//! Party 1 clusters the rows of an encrypted table around k' = n/k centres,
//! suppresses or merges clusters that stay below k members and publishes
//! per-cluster representatives: numeric columns get the cluster mean,
//! categorical columns the lowest hierarchy node covering the cluster.
//! Party 2 answers comparison queries over polynomial-masked, permuted
//! vectors and performs the divisions behind blinded aggregates; the only
//! plaintext it hands back are one-hot flags and the sanctioned size
//! reveals. [`plain_kanonymize`] recomputes the whole pipeline from the
//! plaintext with an identically seeded decision stream, which pins the
//! protocol's outputs in tests and produces the reference trace the
//! leakage auditor pairs with the transcript.

use std::collections::HashMap;

use num::{BigInt, BigRational, One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{CipherTable, ColumnKind, Hierarchy, HierarchyNode, PlainTable, Schema};
use crate::error::{Error, Result};
use crate::she::{eval_poly, one, sub, Ciphertext, MaskingPolynomial, PublicKey, SheScheme};
use crate::twoparty::{
    sample_blinder, sample_signed_blinder, Channel, Direction, P1Handle, P2Handle, Payload,
    Permutation, RawValues, ReferenceTrace, StepTag,
};

/// Degree budget for every masking polynomial drawn here. The deepest
/// masked values sit at multiplicative depth 5, so degree 5 lands exactly
/// on the scheme's default depth limit of 10.
const POLY_DEGREE_CAP: u32 = 5;

/// How an undersized cluster picks the cluster it merges into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReassignStrategy {
    /// Nearest centre to the small cluster's centre.
    ClusterToCluster,
    /// Nearest centre to any member point of the small cluster.
    PointToCluster,
    /// Nearest member point of another cluster to any member point.
    PointToPoint,
}

/// Clustering parameters for one anonymization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnonConfig {
    /// Minimum equivalence class size of the released table.
    pub k: usize,
    /// Assignment and centre-update passes before small clusters are
    /// flagged.
    pub rounds: usize,
    /// Fraction of rows that may be suppressed outright, in [0, 1].
    pub suppression_threshold: f64,
    pub strategy: ReassignStrategy,
    /// Column indices the clustering and release generalize over.
    pub quasi_columns: Vec<usize>,
}

/// Per-row encrypted one-hot cluster membership, n rows by m clusters.
pub type AssignmentMatrix = Vec<Vec<Ciphertext>>;

/// Encrypted cluster centres over the quasi columns, m clusters by d.
pub type ClusterCenters = Vec<Vec<Ciphertext>>;

/// Party 1's working view of the clustering between protocol phases.
#[derive(Debug)]
pub struct Clusters {
    /// Original cluster indices, stable across suppression and merges.
    pub ids: Vec<usize>,
    pub assign: AssignmentMatrix,
    pub centers: ClusterCenters,
    pub counts: Vec<Ciphertext>,
    /// Revealed size for clusters still below k, None once compliant.
    pub flagged: Vec<Option<usize>>,
}

#[derive(Debug)]
pub struct RccOutcome {
    pub centers: ClusterCenters,
    pub counts: Vec<Ciphertext>,
}

/// Which flagged clusters to drop, chosen smallest first within the row
/// budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuppressionPlan {
    /// Cluster positions in ascending order.
    pub clusters: Vec<usize>,
    pub rows: usize,
}

/// An ancestor found by the hierarchy walk: the level is public, the node
/// code stays encrypted.
#[derive(Debug)]
pub struct AncestorHandle {
    pub level: u32,
    pub code: Ciphertext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnonReport {
    pub iterations: usize,
    /// Times an empty cluster was re-seeded during the rounds.
    pub repairs: usize,
    pub suppressed_clusters: Vec<usize>,
    pub suppressed_rows: usize,
    /// (from, into) original cluster ids in merge order.
    pub merges: Vec<(usize, usize)>,
    pub final_cluster_sizes: Vec<usize>,
}

#[derive(Debug)]
pub struct AnonOutcome {
    pub table: CipherTable,
    /// Per row: encrypts 1 when the row belongs to a suppressed cluster
    /// and must be dropped by the key holder at release time.
    pub drop_flags: Vec<Ciphertext>,
    pub report: AnonReport,
}

/// Everything the plaintext mirror computes about a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainOutcome {
    /// Final original cluster id per row, None for suppressed rows.
    pub assignments: Vec<Option<usize>>,
    pub centroids: Vec<Vec<BigRational>>,
    pub anonymized: Vec<Vec<BigRational>>,
    pub dropped: Vec<bool>,
    pub merges: Vec<(usize, usize)>,
    pub repairs: usize,
    pub suppressed_clusters: Vec<usize>,
    pub final_sizes: Vec<usize>,
}

fn rat(v: i64) -> BigRational {
    BigRational::from_integer(v.into())
}

/// First position holding the strict extremum.
fn scan_extremum(values: &[BigRational], find_max: bool) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        let better = if find_max {
            v > &values[best]
        } else {
            v < &values[best]
        };
        if better {
            best = i;
        }
    }
    best
}

/// Original index of the element sitting at `position` after `apply`.
fn source_index(perm: &Permutation, position: usize) -> usize {
    let mut flags = vec![false; perm.size()];
    flags[position] = true;
    perm.invert(&flags)
        .expect("lengths match")
        .iter()
        .position(|&b| b)
        .expect("one flag set")
}

/// Exceeds any squared distance over `width` i64-ranged coordinates, so
/// selector-padded candidate vectors never pick a padding slot.
fn distance_pad(width: usize) -> BigRational {
    BigRational::from_integer((BigInt::one() << 140) * BigInt::from(width as u64 + 1))
}

/// Strictly above every leaf code of the hierarchy.
fn code_pad(hier: &Hierarchy) -> i64 {
    hier.nodes_at(0)
        .iter()
        .map(|n| n.code)
        .max()
        .expect("hierarchies have leaves")
        + 1
}

/// Mask draw shared by both parties' transcripts and the plaintext mirror:
/// polynomial first, then permutation. Under the identity fault the draws
/// are still consumed so the decision stream stays aligned.
fn drawn_mask(
    rng: &mut ChaCha20Rng,
    identity_fault: bool,
    len: usize,
) -> (MaskingPolynomial, Permutation) {
    let poly = MaskingPolynomial::random(rng, POLY_DEGREE_CAP);
    let perm = Permutation::sample(rng, len);
    if identity_fault {
        (MaskingPolynomial::identity(), Permutation::identity(len))
    } else {
        (poly, perm)
    }
}

/// Blinder pair for one aggregate row: a positive count factor u and a
/// sign-randomized sum factor v with |v| != u, so the division party 2
/// returns never equals the true mean and its sign stays hidden.
fn draw_blinder_pair(rng: &mut impl Rng) -> (u64, i64) {
    let u = sample_blinder(rng);
    let m = loop {
        let m = sample_blinder(rng);
        if m != u {
            break m;
        }
    };
    let v = if rng.gen::<bool>() {
        m as i64
    } else {
        -(m as i64)
    };
    (u, v)
}

/// Decoy cluster size in [1, k-1], indistinguishable from a real flagged
/// count.
fn draw_fake_size(rng: &mut impl Rng, k: usize) -> i64 {
    debug_assert!(k >= 2);
    rng.gen_range(1..=k as i64 - 1)
}

fn validate_config(
    schema: &Schema,
    n: usize,
    hierarchies: &HashMap<String, Hierarchy>,
    cfg: &AnonConfig,
) -> Result<usize> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if cfg.k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if cfg.k > n {
        return Err(Error::Unsatisfiable {
            retained: n,
            k: cfg.k,
        });
    }
    if cfg.rounds == 0 {
        return Err(Error::InvalidParameter(
            "clustering needs at least one round".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.suppression_threshold) {
        return Err(Error::InvalidParameter(format!(
            "suppression threshold {} outside [0, 1]",
            cfg.suppression_threshold
        )));
    }
    if cfg.quasi_columns.is_empty() {
        return Err(Error::InvalidParameter("no quasi columns selected".into()));
    }
    let mut seen = vec![false; schema.width()];
    for &c in &cfg.quasi_columns {
        if c >= schema.width() {
            return Err(Error::InvalidParameter(format!(
                "quasi column {c} outside schema"
            )));
        }
        if seen[c] {
            return Err(Error::InvalidParameter(format!(
                "quasi column {c} listed twice"
            )));
        }
        seen[c] = true;
        match &schema.columns[c].kind {
            ColumnKind::Numeric => {}
            ColumnKind::Categorical { hierarchy } => {
                if !hierarchies.contains_key(hierarchy) {
                    return Err(Error::Hierarchy(format!(
                        "no hierarchy named {hierarchy:?} loaded"
                    )));
                }
            }
            ColumnKind::Tokenized => {
                return Err(Error::InvalidParameter(format!(
                    "column {c} is tokenized and cannot be generalized"
                )));
            }
        }
    }
    Ok(n / cfg.k)
}

fn dot<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    a: &[Ciphertext],
    b: &[Ciphertext],
) -> Result<Ciphertext> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut acc: Option<Ciphertext> = None;
    for (x, y) in a.iter().zip(b) {
        let term = scheme.mult(pk, x, y)?;
        acc = Some(match acc {
            Some(s) => scheme.add(pk, &s, &term)?,
            None => term,
        });
    }
    acc.ok_or(Error::EmptyInput)
}

/// Squared Euclidean distance between two encrypted coordinate vectors.
pub fn sq_dist<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    a: &[Ciphertext],
    b: &[Ciphertext],
) -> Result<Ciphertext> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut acc: Option<Ciphertext> = None;
    for (x, y) in a.iter().zip(b) {
        let d = sub(scheme, pk, x, y)?;
        let sq = scheme.mult(pk, &d, &d)?;
        acc = Some(match acc {
            Some(s) => scheme.add(pk, &s, &sq)?,
            None => sq,
        });
    }
    acc.ok_or(Error::EmptyInput)
}

/// Distances from every row to every centre over the quasi columns.
pub fn sed_matrix<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    table: &CipherTable,
    quasi: &[usize],
    centers: &ClusterCenters,
) -> Result<Vec<Vec<Ciphertext>>> {
    let mut out = Vec::with_capacity(table.n_rows());
    for row in &table.rows {
        let coords: Vec<Ciphertext> = quasi.iter().map(|&c| row[c].clone()).collect();
        let dists = centers
            .iter()
            .map(|c| sq_dist(scheme, pk, &coords, c))
            .collect::<Result<Vec<_>>>()?;
        out.push(dists);
    }
    Ok(out)
}

/// Ships the masked, permuted vector and returns the permuted position of
/// the extremum as party 2 sees it.
fn extremum_exchange<S: SheScheme>(
    p1: &P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    values: &[Ciphertext],
    poly: &MaskingPolynomial,
    perm: &Permutation,
    find_max: bool,
) -> Result<usize> {
    let masked = values
        .iter()
        .map(|c| Ok(eval_poly(p1.scheme, &p1.pk, poly, c)?))
        .collect::<Result<Vec<_>>>()?;
    let sent = perm.apply(&masked)?;
    let tag = if find_max {
        StepTag::MaxIndexMaskedVector
    } else {
        StepTag::MinIndexMaskedVector
    };
    ch.send(Direction::P1ToP2, tag, Payload::Cipher(sent.clone()));
    let dec = sent.iter().map(|c| p2.dec(c)).collect::<Result<Vec<_>>>()?;
    Ok(scan_extremum(&dec, find_max))
}

fn extremum_onehot<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    values: &[Ciphertext],
    find_max: bool,
) -> Result<Vec<Ciphertext>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let identity = ch.faults.identity_min_index;
    let (poly, perm) = drawn_mask(&mut p1.rng, identity, values.len());
    let pos = extremum_exchange(p1, p2, ch, values, &poly, &perm, find_max)?;
    let onehot: Vec<Ciphertext> = (0..values.len())
        .map(|i| p2.enc(&rat((i == pos) as i64)))
        .collect();
    let tag = if find_max {
        StepTag::MaxIndexOneHot
    } else {
        StepTag::MinIndexOneHot
    };
    ch.send(Direction::P2ToP1, tag, Payload::Cipher(onehot.clone()));
    perm.invert(&onehot)
}

/// Encrypted one-hot marker of the minimum. Party 2 learns only a masked
/// permuted vector, party 1 neither the values nor which index won.
/// Inputs must be non-negative: the mask's coefficients are positive, so
/// it preserves order on [0, inf) but not below. Every vector compared in
/// this module (distances, counts, padded codes) satisfies that.
pub fn compute_min_index<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    values: &[Ciphertext],
) -> Result<Vec<Ciphertext>> {
    extremum_onehot(p1, p2, ch, values, false)
}

/// As [`compute_min_index`], marking the maximum.
pub fn compute_max_index<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    values: &[Ciphertext],
) -> Result<Vec<Ciphertext>> {
    extremum_onehot(p1, p2, ch, values, true)
}

/// Minimum search where party 1 is allowed to learn the winning index:
/// party 2 replies with plaintext flags instead of fresh ciphertexts.
pub fn min_index_plain_reply<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    values: &[Ciphertext],
) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let identity = ch.faults.identity_min_index;
    let (poly, perm) = drawn_mask(&mut p1.rng, identity, values.len());
    let pos = extremum_exchange(p1, p2, ch, values, &poly, &perm, false)?;
    let mut flags = vec![false; values.len()];
    flags[pos] = true;
    ch.send(
        Direction::P2ToP1,
        StepTag::MinIndexFlags,
        Payload::Flags(flags.clone()),
    );
    let orig = perm.invert(&flags)?;
    Ok(orig.iter().position(|&b| b).expect("reply is one-hot"))
}

/// Blinded zero test: party 2 sees the difference times a sign-randomized
/// blinder and reports only whether it is zero.
fn eq_probe<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    diff: &Ciphertext,
) -> Result<bool> {
    let r = sample_signed_blinder(&mut p1.rng);
    let probe = p1.scheme.mult(&p1.pk, diff, &p1.enc_int(r))?;
    ch.send(
        Direction::P1ToP2,
        StepTag::CaDifference,
        Payload::Cipher(vec![probe.clone()]),
    );
    let equal = p2.dec(&probe)?.is_zero();
    ch.send(
        Direction::P2ToP1,
        StepTag::CaEqFlags,
        Payload::Flags(vec![equal]),
    );
    Ok(equal)
}

/// Fresh centres as exact means. Party 1 ships per-cluster aggregates
/// blinded as (count*u, sum*v); party 2 flags empty clusters, divides the
/// rest and returns fresh encryptions party 1 unblinds with u/v. Errors
/// with the first empty cluster's position.
pub fn recompute_centers<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    assign: &[Vec<Ciphertext>],
    table: &CipherTable,
    quasi: &[usize],
) -> Result<RccOutcome> {
    let n = assign.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let m = assign[0].len();
    let scheme = p1.scheme;
    let pk = p1.pk.clone();

    let mut counts = Vec::with_capacity(m);
    let mut sums: Vec<Vec<Ciphertext>> = Vec::with_capacity(m);
    for j in 0..m {
        let mut count = p1.enc_int(0);
        for row in assign {
            count = scheme.add(&pk, &count, &row[j])?;
        }
        counts.push(count);
        let mut per_col = Vec::with_capacity(quasi.len());
        for &c in quasi {
            let mut acc = p1.enc_int(0);
            for (i, row) in assign.iter().enumerate() {
                let term = scheme.mult(&pk, &row[j], &table.rows[i][c])?;
                acc = scheme.add(&pk, &acc, &term)?;
            }
            per_col.push(acc);
        }
        sums.push(per_col);
    }

    let unit_fault = ch.faults.unit_rcc_blinders;
    let mut pairs = Vec::with_capacity(m);
    for _ in 0..m {
        pairs.push(draw_blinder_pair(&mut p1.rng));
    }
    if unit_fault {
        pairs = vec![(1u64, 1i64); m];
    }
    let perm = Permutation::sample(&mut p1.rng, m);

    let mut blinded = Vec::with_capacity(m);
    for j in 0..m {
        let (u, v) = pairs[j];
        let eu = p1.enc_int(u as i64);
        let ev = p1.enc_int(v);
        let mut row = vec![scheme.mult(&pk, &counts[j], &eu)?];
        for s in &sums[j] {
            row.push(scheme.mult(&pk, s, &ev)?);
        }
        blinded.push(row);
    }
    let sent = perm.apply(&blinded)?;
    ch.send(
        Direction::P1ToP2,
        StepTag::RccBlindedAggregates,
        Payload::CipherMatrix(sent.clone()),
    );

    let mut dec_rows = Vec::with_capacity(m);
    for row in &sent {
        let mut dr = Vec::with_capacity(row.len());
        for c in row {
            dr.push(p2.dec(c)?);
        }
        dec_rows.push(dr);
    }
    let empty: Vec<bool> = dec_rows.iter().map(|r| r[0].is_zero()).collect();
    ch.send(
        Direction::P2ToP1,
        StepTag::RccEmptyFlags,
        Payload::Flags(empty.clone()),
    );
    if empty.iter().any(|&e| e) {
        let orig = perm.invert(&empty)?;
        let j = orig.iter().position(|&e| e).expect("some flag set");
        return Err(Error::EmptyCluster(j));
    }

    let divisions: Vec<Vec<Ciphertext>> = dec_rows
        .iter()
        .map(|r| r[1..].iter().map(|s| p2.enc(&(s / &r[0]))).collect())
        .collect();
    ch.send(
        Direction::P2ToP1,
        StepTag::RccDivisions,
        Payload::CipherMatrix(divisions.clone()),
    );

    let back = perm.invert(&divisions)?;
    let mut centers = Vec::with_capacity(m);
    for (j, row) in back.iter().enumerate() {
        let (u, v) = pairs[j];
        let ratio = scheme.enc(&pk, &BigRational::new(BigInt::from(u), BigInt::from(v)));
        let unblinded = row
            .iter()
            .map(|c| Ok(scheme.mult(&pk, c, &ratio)?))
            .collect::<Result<Vec<_>>>()?;
        centers.push(unblinded);
    }
    Ok(RccOutcome { centers, counts })
}

/// Which clusters hold fewer than k rows. The counts and the threshold k
/// travel under the same polynomial mask, the threshold appended last, so
/// party 2 can compare without seeing either.
pub fn non_k_clusters<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    counts: &[Ciphertext],
    k: usize,
) -> Result<Vec<bool>> {
    if counts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let identity = ch.faults.identity_min_index;
    let (poly, perm) = drawn_mask(&mut p1.rng, identity, counts.len());
    let masked = counts
        .iter()
        .map(|c| Ok(eval_poly(p1.scheme, &p1.pk, &poly, c)?))
        .collect::<Result<Vec<_>>>()?;
    let mut payload = perm.apply(&masked)?;
    payload.push(eval_poly(p1.scheme, &p1.pk, &poly, &p1.enc_int(k as i64))?);
    ch.send(
        Direction::P1ToP2,
        StepTag::NonKMaskedCounts,
        Payload::Cipher(payload.clone()),
    );
    let dec = payload
        .iter()
        .map(|c| p2.dec(c))
        .collect::<Result<Vec<_>>>()?;
    let (masked_counts, mark) = dec.split_at(dec.len() - 1);
    let flags: Vec<bool> = masked_counts.iter().map(|c| c < &mark[0]).collect();
    ch.send(
        Direction::P2ToP1,
        StepTag::NonKFlags,
        Payload::Flags(flags.clone()),
    );
    perm.invert(&flags)
}

/// Sanctioned size reveal: the included clusters' counts, padded with
/// decoy sizes in [1, k-1] up to `pad_to` and permuted, go to party 2 in
/// the clear. Returns the included clusters' sizes in original order.
pub fn reveal_sizes<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    counts: &[Ciphertext],
    include: &[bool],
    pad_to: usize,
    k: usize,
) -> Result<Vec<usize>> {
    let real: Vec<usize> = include
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(j, _)| j)
        .collect();
    if real.is_empty() || pad_to < real.len() {
        return Err(Error::InvalidParameter(
            "size reveal needs at least one included cluster".into(),
        ));
    }
    let mut cells: Vec<Ciphertext> = real.iter().map(|&j| counts[j].clone()).collect();
    for _ in real.len()..pad_to {
        let fake = draw_fake_size(&mut p1.rng, k);
        cells.push(p1.enc_int(fake));
    }
    let perm = Permutation::sample(&mut p1.rng, pad_to);
    let sent = perm.apply(&cells)?;
    ch.send(
        Direction::P1ToP2,
        StepTag::SuppressSizes,
        Payload::Cipher(sent.clone()),
    );
    let mut reply = Vec::with_capacity(pad_to);
    for c in &sent {
        let v = p2.dec(c)?;
        reply.push(v.to_integer().to_i64().ok_or_else(|| {
            Error::InvalidParameter("cluster size out of i64 range".into())
        })?);
    }
    ch.send(
        Direction::P2ToP1,
        StepTag::SuppressSizesReply,
        Payload::Ints(reply.clone()),
    );
    let orig = perm.invert(&reply)?;
    Ok(orig[..real.len()].iter().map(|&v| v as usize).collect())
}

/// Greedy suppression, smallest clusters first, while the cumulative row
/// count stays within floor(threshold * n). The budget is computed on the
/// exact rational value of the threshold.
pub fn suppress_clusters(
    flagged_sizes: &[(usize, usize)],
    threshold: f64,
    n_rows: usize,
) -> Result<SuppressionPlan> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "suppression threshold {threshold} outside [0, 1]"
        )));
    }
    let th = BigRational::from_float(threshold)
        .ok_or_else(|| Error::InvalidParameter("threshold is not finite".into()))?;
    let budget = (th * rat(n_rows as i64))
        .floor()
        .to_integer()
        .to_usize()
        .expect("budget within usize");
    let mut order: Vec<(usize, usize)> = flagged_sizes.iter().map(|&(j, s)| (s, j)).collect();
    order.sort_unstable();
    let mut clusters = Vec::new();
    let mut rows = 0usize;
    for (size, j) in order {
        if rows + size > budget {
            break;
        }
        rows += size;
        clusters.push(j);
    }
    clusters.sort_unstable();
    Ok(SuppressionPlan { clusters, rows })
}

/// Distance from the flagged cluster `j` to every target under the chosen
/// strategy. Point-based strategies pad non-member slots beyond any real
/// distance and reduce each target to its encrypted minimum first.
fn merge_distances<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    state: &Clusters,
    table: &CipherTable,
    quasi: &[usize],
    j: usize,
    targets: &[usize],
    strategy: ReassignStrategy,
) -> Result<Vec<Ciphertext>> {
    let scheme = p1.scheme;
    let pk = p1.pk.clone();
    let n = table.n_rows();
    match strategy {
        ReassignStrategy::ClusterToCluster => targets
            .iter()
            .map(|&t| sq_dist(scheme, &pk, &state.centers[j], &state.centers[t]))
            .collect(),
        ReassignStrategy::PointToCluster => {
            let pad = scheme.enc(&pk, &distance_pad(quasi.len()));
            let unit = one(scheme, &pk);
            let rows_q: Vec<Vec<Ciphertext>> = table
                .rows
                .iter()
                .map(|r| quasi.iter().map(|&c| r[c].clone()).collect())
                .collect();
            let mut minima = Vec::with_capacity(targets.len());
            for &t in targets {
                let mut cands = Vec::with_capacity(n);
                for i in 0..n {
                    let d = sq_dist(scheme, &pk, &rows_q[i], &state.centers[t])?;
                    let inside = scheme.mult(&pk, &state.assign[i][j], &d)?;
                    let gate = sub(scheme, &pk, &unit, &state.assign[i][j])?;
                    let outside = scheme.mult(&pk, &gate, &pad)?;
                    cands.push(scheme.add(&pk, &inside, &outside)?);
                }
                let oh = compute_min_index(p1, p2, ch, &cands)?;
                minima.push(dot(scheme, &pk, &oh, &cands)?);
            }
            Ok(minima)
        }
        ReassignStrategy::PointToPoint => {
            let pad = scheme.enc(&pk, &distance_pad(quasi.len()));
            let unit = one(scheme, &pk);
            let rows_q: Vec<Vec<Ciphertext>> = table
                .rows
                .iter()
                .map(|r| quasi.iter().map(|&c| r[c].clone()).collect())
                .collect();
            let mut pair = vec![Vec::with_capacity(n); n];
            for i in 0..n {
                for i2 in 0..n {
                    pair[i].push(sq_dist(scheme, &pk, &rows_q[i], &rows_q[i2])?);
                }
            }
            let mut minima = Vec::with_capacity(targets.len());
            for &t in targets {
                let mut cands = Vec::with_capacity(n * n);
                for i in 0..n {
                    for i2 in 0..n {
                        let sel = scheme.mult(&pk, &state.assign[i][j], &state.assign[i2][t])?;
                        let inside = scheme.mult(&pk, &sel, &pair[i][i2])?;
                        let gate = sub(scheme, &pk, &unit, &sel)?;
                        let outside = scheme.mult(&pk, &gate, &pad)?;
                        cands.push(scheme.add(&pk, &inside, &outside)?);
                    }
                }
                let oh = compute_min_index(p1, p2, ch, &cands)?;
                minima.push(dot(scheme, &pk, &oh, &cands)?);
            }
            Ok(minima)
        }
    }
}

/// Merges every cluster still below k into its nearest neighbour, smallest
/// first, recomputing centres after each merge. Party 1 learns the merge
/// target through a sanctioned plaintext reply because it performs the
/// column addition itself.
pub fn reassign_clusters<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    state: &mut Clusters,
    table: &CipherTable,
    quasi: &[usize],
    k: usize,
    strategy: ReassignStrategy,
) -> Result<Vec<(usize, usize)>> {
    let scheme = p1.scheme;
    let pk = p1.pk.clone();
    let mut merges = Vec::new();
    loop {
        let picked = state
            .flagged
            .iter()
            .enumerate()
            .filter_map(|(c, f)| f.map(|s| (s, c)))
            .min();
        let Some((sj, j)) = picked else { break };
        if state.ids.len() == 1 {
            return Err(Error::Unsatisfiable { retained: sj, k });
        }
        let targets: Vec<usize> = (0..state.ids.len()).filter(|&t| t != j).collect();
        let dists = merge_distances(p1, p2, ch, state, table, quasi, j, &targets, strategy)?;
        let pos = min_index_plain_reply(p1, p2, ch, &dists)?;
        let t = targets[pos];
        merges.push((state.ids[j], state.ids[t]));
        for row in &mut state.assign {
            row[t] = scheme.add(&pk, &row[t], &row[j])?;
        }
        state.flagged[t] = match state.flagged[t] {
            Some(st) if st + sj < k => Some(st + sj),
            _ => None,
        };
        state.ids.remove(j);
        state.flagged.remove(j);
        state.counts.remove(j);
        state.centers.remove(j);
        for row in &mut state.assign {
            row.remove(j);
        }
        let rcc = recompute_centers(p1, p2, ch, &state.assign, table, quasi)?;
        state.centers = rcc.centers;
        state.counts = rcc.counts;
    }
    Ok(merges)
}

/// Encrypted code of the level node nearest to `value`, found by a secure
/// minimum over squared code distances.
fn nearest_node_code<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    nodes: &[HierarchyNode],
    value: &Ciphertext,
) -> Result<Ciphertext> {
    let scheme = p1.scheme;
    let pk = p1.pk.clone();
    let mut dists = Vec::with_capacity(nodes.len());
    for node in nodes {
        let d = sub(scheme, &pk, value, &p1.enc_int(node.code))?;
        dists.push(scheme.mult(&pk, &d, &d)?);
    }
    let oh = compute_min_index(p1, p2, ch, &dists)?;
    let codes: Vec<Ciphertext> = nodes.iter().map(|nd| p1.enc_int(nd.code)).collect();
    dot(scheme, &pk, &oh, &codes)
}

/// Walks the hierarchy upward from `start_level` until the nearest nodes
/// of both encrypted leaf codes coincide. The far-apart code layout makes
/// the nearest level node the true ancestor, so the first match is the
/// lowest common one at or above the start level.
pub fn common_ancestor<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    hier: &Hierarchy,
    a: &Ciphertext,
    b: &Ciphertext,
    start_level: u32,
) -> Result<AncestorHandle> {
    if start_level == 0 {
        return Err(Error::InvalidParameter(
            "ancestor walk starts at level 1".into(),
        ));
    }
    let scheme = p1.scheme;
    let pk = p1.pk.clone();
    for level in start_level..=hier.height() {
        let nodes = hier.nodes_at(level);
        if nodes.len() == 1 {
            return Ok(AncestorHandle {
                level,
                code: p1.enc_int(nodes[0].code),
            });
        }
        let ca = nearest_node_code(p1, p2, ch, nodes, a)?;
        let cb = nearest_node_code(p1, p2, ch, nodes, b)?;
        let diff = sub(scheme, &pk, &ca, &cb)?;
        if eq_probe(p1, p2, ch, &diff)? {
            return Ok(AncestorHandle { level, code: ca });
        }
    }
    let root = &hier.nodes_at(hier.height())[0];
    Ok(AncestorHandle {
        level: hier.height(),
        code: p1.enc_int(root.code),
    })
}

/// Folds [`common_ancestor`] over a list of encrypted leaf codes. Node
/// codes sit inside their own leaf range, so an accumulated ancestor can
/// re-enter the walk as a value.
pub fn common_ancestor_fold<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    hier: &Hierarchy,
    values: &[Ciphertext],
) -> Result<AncestorHandle> {
    if values.len() < 2 {
        return Err(Error::InvalidParameter(
            "ancestor fold needs at least two values".into(),
        ));
    }
    let mut acc = common_ancestor(p1, p2, ch, hier, &values[0], &values[1], 1)?;
    for v in &values[2..] {
        if acc.level == hier.height() {
            break;
        }
        acc = common_ancestor(p1, p2, ch, hier, &acc.code, v, acc.level.max(1))?;
    }
    Ok(acc)
}

/// Representative code for one cluster of one categorical column: the
/// cluster's extreme leaf codes are found by selector-padded secure
/// min/max, an equality probe short-circuits single-value clusters to the
/// leaf itself, anything else walks to the lowest common ancestor. Leaf
/// ranges are contiguous, so the ancestor of the extremes covers every
/// member.
fn categorical_representative<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    hier: &Hierarchy,
    member: &[Ciphertext],
    cells: &[Ciphertext],
) -> Result<Ciphertext> {
    let scheme = p1.scheme;
    let pk = p1.pk.clone();
    let pad = scheme.enc(&pk, &rat(code_pad(hier)));
    let unit = one(scheme, &pk);
    let mut min_c = Vec::with_capacity(cells.len());
    let mut max_c = Vec::with_capacity(cells.len());
    for (sel, cell) in member.iter().zip(cells) {
        let inside = scheme.mult(&pk, sel, cell)?;
        let gate = sub(scheme, &pk, &unit, sel)?;
        let outside = scheme.mult(&pk, &gate, &pad)?;
        min_c.push(scheme.add(&pk, &inside, &outside)?);
        // Leaf codes are non-negative, so zeroing non-members never beats
        // a member under max.
        max_c.push(inside);
    }
    let min_oh = compute_min_index(p1, p2, ch, &min_c)?;
    let min_v = dot(scheme, &pk, &min_oh, &min_c)?;
    let max_oh = compute_max_index(p1, p2, ch, &max_c)?;
    let max_v = dot(scheme, &pk, &max_oh, &max_c)?;
    let diff = sub(scheme, &pk, &max_v, &min_v)?;
    if eq_probe(p1, p2, ch, &diff)? {
        return Ok(min_v);
    }
    Ok(common_ancestor(p1, p2, ch, hier, &min_v, &max_v, 1)?.code)
}

/// Publishes the table: numeric quasi columns become the cluster mean,
/// categorical ones the cluster's ancestor code, all other columns are
/// copied through. Rows outside every cluster (suppressed) get zeroed
/// quasi cells and are dropped at release via the outcome's flags.
pub fn anonymize_clusters<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    table: &CipherTable,
    hierarchies: &HashMap<String, Hierarchy>,
    quasi: &[usize],
    state: &Clusters,
) -> Result<CipherTable> {
    let n = table.n_rows();
    let m = state.ids.len();
    let scheme = p1.scheme;
    let pk = p1.pk.clone();
    let mut rows = table.rows.clone();
    for (l, &col) in quasi.iter().enumerate() {
        match &table.schema.columns[col].kind {
            ColumnKind::Numeric => {
                let reps: Vec<Ciphertext> =
                    (0..m).map(|j| state.centers[j][l].clone()).collect();
                for i in 0..n {
                    rows[i][col] = dot(scheme, &pk, &state.assign[i], &reps)?;
                }
            }
            ColumnKind::Categorical { hierarchy } => {
                let hier = hierarchies.get(hierarchy).ok_or_else(|| {
                    Error::Hierarchy(format!("no hierarchy named {hierarchy:?} loaded"))
                })?;
                let cells: Vec<Ciphertext> =
                    table.rows.iter().map(|r| r[col].clone()).collect();
                let mut reps = Vec::with_capacity(m);
                for j in 0..m {
                    let member: Vec<Ciphertext> =
                        state.assign.iter().map(|r| r[j].clone()).collect();
                    reps.push(categorical_representative(p1, p2, ch, hier, &member, &cells)?);
                }
                for i in 0..n {
                    rows[i][col] = dot(scheme, &pk, &state.assign[i], &reps)?;
                }
            }
            ColumnKind::Tokenized => {
                return Err(Error::InvalidParameter(format!(
                    "column {col} is tokenized and cannot be generalized"
                )));
            }
        }
    }
    Ok(CipherTable {
        schema: table.schema.clone(),
        key_id: table.key_id,
        rows,
    })
}

/// Full pipeline: cluster for `rounds` passes (re-seeding empty clusters
/// at the farthest point, at most 4k' times), flag clusters below k,
/// suppress the smallest within the row budget, merge the rest and publish
/// representatives.
pub fn secure_kanonymize<S: SheScheme>(
    p1: &mut P1Handle<S>,
    p2: &P2Handle<S>,
    ch: &mut Channel,
    table: &CipherTable,
    hierarchies: &HashMap<String, Hierarchy>,
    cfg: &AnonConfig,
) -> Result<AnonOutcome> {
    let n = table.n_rows();
    let kp = validate_config(&table.schema, n, hierarchies, cfg)?;
    let quasi = &cfg.quasi_columns;
    let scheme = p1.scheme;
    let pk = p1.pk.clone();

    let picks = rand::seq::index::sample(&mut p1.rng, n, kp).into_vec();
    let mut centers: ClusterCenters = picks
        .iter()
        .map(|&i| quasi.iter().map(|&c| table.rows[i][c].clone()).collect())
        .collect();

    let mut assign: AssignmentMatrix = Vec::new();
    let mut counts: Vec<Ciphertext> = Vec::new();
    let mut repairs = 0usize;
    for _round in 0..cfg.rounds {
        loop {
            let dists = sed_matrix(scheme, &pk, table, quasi, &centers)?;
            let mut fresh = Vec::with_capacity(n);
            for row_d in &dists {
                fresh.push(compute_min_index(p1, p2, ch, row_d)?);
            }
            match recompute_centers(p1, p2, ch, &fresh, table, quasi) {
                Ok(rcc) => {
                    centers = rcc.centers;
                    counts = rcc.counts;
                    assign = fresh;
                    break;
                }
                Err(Error::EmptyCluster(j)) => {
                    repairs += 1;
                    if repairs > 4 * kp {
                        return Err(Error::EmptyCluster(j));
                    }
                    let mut own = Vec::with_capacity(n);
                    for i in 0..n {
                        own.push(dot(scheme, &pk, &fresh[i], &dists[i])?);
                    }
                    let far = compute_max_index(p1, p2, ch, &own)?;
                    centers[j] = quasi
                        .iter()
                        .map(|&c| {
                            let col: Vec<Ciphertext> =
                                table.rows.iter().map(|r| r[c].clone()).collect();
                            dot(scheme, &pk, &far, &col)
                        })
                        .collect::<Result<_>>()?;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let flags = non_k_clusters(p1, p2, ch, &counts, cfg.k)?;
    let mut state = Clusters {
        ids: (0..kp).collect(),
        assign,
        centers,
        counts,
        flagged: vec![None; kp],
    };
    let mut drop_flags: Vec<Ciphertext> = (0..n).map(|_| p1.enc_int(0)).collect();
    let mut suppressed_clusters = Vec::new();
    let mut suppressed_rows = 0usize;
    let mut merges = Vec::new();

    if flags.iter().any(|&f| f) {
        let flagged_pos: Vec<usize> = flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(j, _)| j)
            .collect();
        let sizes = reveal_sizes(p1, p2, ch, &state.counts, &flags, kp, cfg.k)?;
        let flagged_sizes: Vec<(usize, usize)> =
            flagged_pos.iter().copied().zip(sizes).collect();
        let plan = suppress_clusters(&flagged_sizes, cfg.suppression_threshold, n)?;
        suppressed_rows = plan.rows;
        for &j in &plan.clusters {
            for i in 0..n {
                drop_flags[i] = scheme.add(&pk, &drop_flags[i], &state.assign[i][j])?;
            }
        }
        if n - suppressed_rows < cfg.k {
            return Err(Error::Unsatisfiable {
                retained: n - suppressed_rows,
                k: cfg.k,
            });
        }
        for &(j, s) in &flagged_sizes {
            if !plan.clusters.contains(&j) {
                state.flagged[j] = Some(s);
            }
        }
        for &j in plan.clusters.iter().rev() {
            state.ids.remove(j);
            state.flagged.remove(j);
            state.counts.remove(j);
            state.centers.remove(j);
            for row in &mut state.assign {
                row.remove(j);
            }
        }
        suppressed_clusters = plan.clusters;
        merges = reassign_clusters(p1, p2, ch, &mut state, table, quasi, cfg.k, cfg.strategy)?;
    }

    let m = state.ids.len();
    let include = vec![true; m];
    let final_cluster_sizes = reveal_sizes(p1, p2, ch, &state.counts, &include, m, cfg.k)?;
    let out = anonymize_clusters(p1, p2, ch, table, hierarchies, quasi, &state)?;
    Ok(AnonOutcome {
        table: out,
        drop_flags,
        report: AnonReport {
            iterations: cfg.rounds,
            repairs,
            suppressed_clusters,
            suppressed_rows,
            merges,
            final_cluster_sizes,
        },
    })
}

/// Plaintext mirror state: decision stream and the reference trace it
/// records for the auditor.
struct Mirror {
    rng: ChaCha20Rng,
    trace: ReferenceTrace,
}

struct MirrorState {
    ids: Vec<usize>,
    member: Vec<Vec<bool>>,
    centers: Vec<Vec<BigRational>>,
    counts: Vec<usize>,
    flagged: Vec<Option<usize>>,
}

impl Mirror {
    /// Same draw order as the protocol's masked exchanges; returns the
    /// original index of the extremum. The mask is order-preserving, so
    /// scanning raw permuted values reproduces party 2's scan exactly,
    /// ties included.
    fn mask_scan(&mut self, values: &[BigRational], find_max: bool) -> usize {
        let (_poly, perm) = drawn_mask(&mut self.rng, false, values.len());
        let permuted = perm.apply(values).expect("lengths match");
        let tag = if find_max {
            StepTag::MaxIndexMaskedVector
        } else {
            StepTag::MinIndexMaskedVector
        };
        self.trace.push(
            tag,
            RawValues::Masked {
                permuted_raw: permuted.clone(),
            },
        );
        source_index(&perm, scan_extremum(&permuted, find_max))
    }

    fn eq_probe(&mut self, diff: BigRational) -> bool {
        let _ = sample_signed_blinder(&mut self.rng);
        let zero = diff.is_zero();
        self.trace
            .push(StepTag::CaDifference, RawValues::BlindedDifference { raw: diff });
        zero
    }

    fn rcc(
        &mut self,
        member: &[Vec<bool>],
        vals: &[Vec<BigRational>],
        quasi: &[usize],
    ) -> Result<(Vec<Vec<BigRational>>, Vec<usize>)> {
        let m = member[0].len();
        let mut counts = vec![0usize; m];
        let mut sums = vec![vec![BigRational::zero(); quasi.len()]; m];
        for (i, row) in member.iter().enumerate() {
            for (j, &inc) in row.iter().enumerate() {
                if inc {
                    counts[j] += 1;
                    for (l, &c) in quasi.iter().enumerate() {
                        sums[j][l] = sums[j][l].clone() + &vals[i][c];
                    }
                }
            }
        }
        for _ in 0..m {
            let _ = draw_blinder_pair(&mut self.rng);
        }
        let perm = Permutation::sample(&mut self.rng, m);
        let raw_rows: Vec<Vec<BigRational>> = (0..m)
            .map(|j| {
                let mut r = vec![rat(counts[j] as i64)];
                r.extend(sums[j].iter().cloned());
                r
            })
            .collect();
        self.trace.push(
            StepTag::RccBlindedAggregates,
            RawValues::Aggregates {
                permuted_rows: perm.apply(&raw_rows)?,
            },
        );
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyCluster(j));
        }
        let centers = (0..m)
            .map(|j| {
                sums[j]
                    .iter()
                    .map(|s| s / rat(counts[j] as i64))
                    .collect()
            })
            .collect();
        Ok((centers, counts))
    }

    fn non_k(&mut self, counts: &[usize], k: usize) -> Result<Vec<bool>> {
        let (_poly, perm) = drawn_mask(&mut self.rng, false, counts.len());
        let raw: Vec<BigRational> = counts.iter().map(|&c| rat(c as i64)).collect();
        self.trace.push(
            StepTag::NonKMaskedCounts,
            RawValues::MaskedWithThreshold {
                permuted_raw: perm.apply(&raw)?,
                threshold: rat(k as i64),
            },
        );
        Ok(counts.iter().map(|&c| c < k).collect())
    }

    /// The size reveal itself is sanctioned plaintext; only its decoy and
    /// permutation draws must be consumed.
    fn reveal_draws(&mut self, real: usize, pad_to: usize, k: usize) {
        for _ in real..pad_to {
            let _ = draw_fake_size(&mut self.rng, k);
        }
        let _ = Permutation::sample(&mut self.rng, pad_to);
    }

    fn nearest_code(&mut self, nodes: &[HierarchyNode], v: &BigRational) -> i64 {
        let dists: Vec<BigRational> = nodes
            .iter()
            .map(|nd| {
                let d = v - rat(nd.code);
                &d * &d
            })
            .collect();
        nodes[self.mask_scan(&dists, false)].code
    }

    fn common_ancestor(
        &mut self,
        hier: &Hierarchy,
        a: &BigRational,
        b: &BigRational,
        start_level: u32,
    ) -> (u32, BigRational) {
        for level in start_level..=hier.height() {
            let nodes = hier.nodes_at(level);
            if nodes.len() == 1 {
                return (level, rat(nodes[0].code));
            }
            let ca = self.nearest_code(nodes, a);
            let cb = self.nearest_code(nodes, b);
            if self.eq_probe(rat(ca - cb)) {
                return (level, rat(ca));
            }
        }
        let root = &hier.nodes_at(hier.height())[0];
        (hier.height(), rat(root.code))
    }

    fn categorical_rep(
        &mut self,
        hier: &Hierarchy,
        member: &[bool],
        codes: &[BigRational],
    ) -> BigRational {
        let pad = rat(code_pad(hier));
        let min_c: Vec<BigRational> = codes
            .iter()
            .zip(member)
            .map(|(v, &inc)| if inc { v.clone() } else { pad.clone() })
            .collect();
        let max_c: Vec<BigRational> = codes
            .iter()
            .zip(member)
            .map(|(v, &inc)| if inc { v.clone() } else { BigRational::zero() })
            .collect();
        let min_v = min_c[self.mask_scan(&min_c, false)].clone();
        let max_v = max_c[self.mask_scan(&max_c, true)].clone();
        if self.eq_probe(&max_v - &min_v) {
            return min_v;
        }
        self.common_ancestor(hier, &min_v, &max_v, 1).1
    }
}

fn plain_sq_dist(a: &[BigRational], b: &[BigRational]) -> BigRational {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            &d * &d
        })
        .sum()
}

fn mirror_merge_distances(
    mir: &mut Mirror,
    state: &MirrorState,
    vals: &[Vec<BigRational>],
    quasi: &[usize],
    j: usize,
    targets: &[usize],
    strategy: ReassignStrategy,
) -> Vec<BigRational> {
    let n = vals.len();
    let row_q = |i: usize| -> Vec<BigRational> {
        quasi.iter().map(|&c| vals[i][c].clone()).collect()
    };
    match strategy {
        ReassignStrategy::ClusterToCluster => targets
            .iter()
            .map(|&t| plain_sq_dist(&state.centers[j], &state.centers[t]))
            .collect(),
        ReassignStrategy::PointToCluster => {
            let pad = distance_pad(quasi.len());
            targets
                .iter()
                .map(|&t| {
                    let cands: Vec<BigRational> = (0..n)
                        .map(|i| {
                            if state.member[i][j] {
                                plain_sq_dist(&row_q(i), &state.centers[t])
                            } else {
                                pad.clone()
                            }
                        })
                        .collect();
                    cands[mir.mask_scan(&cands, false)].clone()
                })
                .collect()
        }
        ReassignStrategy::PointToPoint => {
            let pad = distance_pad(quasi.len());
            targets
                .iter()
                .map(|&t| {
                    let mut cands = Vec::with_capacity(n * n);
                    for i in 0..n {
                        for i2 in 0..n {
                            cands.push(if state.member[i][j] && state.member[i2][t] {
                                plain_sq_dist(&row_q(i), &row_q(i2))
                            } else {
                                pad.clone()
                            });
                        }
                    }
                    cands[mir.mask_scan(&cands, false)].clone()
                })
                .collect()
        }
    }
}

/// Reference run of the whole pipeline on the plaintext. Seeded with party
/// 1's decision seed it makes exactly the draws the protocol makes, in the
/// same order, so its outcome is what the encrypted run must decrypt to
/// and its trace holds the raw values behind every masked message.
pub fn plain_kanonymize(
    plain: &PlainTable,
    hierarchies: &HashMap<String, Hierarchy>,
    cfg: &AnonConfig,
    seed: u64,
) -> Result<(PlainOutcome, ReferenceTrace)> {
    let n = plain.n_rows();
    let kp = validate_config(&plain.schema, n, hierarchies, cfg)?;
    let quasi = &cfg.quasi_columns;
    let vals: Vec<Vec<BigRational>> = plain
        .rows
        .iter()
        .map(|r| r.iter().map(|&v| rat(v)).collect())
        .collect();
    let mut mir = Mirror {
        rng: ChaCha20Rng::seed_from_u64(seed),
        trace: ReferenceTrace::new(),
    };

    let picks = rand::seq::index::sample(&mut mir.rng, n, kp).into_vec();
    let mut centers: Vec<Vec<BigRational>> = picks
        .iter()
        .map(|&i| quasi.iter().map(|&c| vals[i][c].clone()).collect())
        .collect();

    let mut member: Vec<Vec<bool>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut repairs = 0usize;
    for _round in 0..cfg.rounds {
        loop {
            let dists: Vec<Vec<BigRational>> = vals
                .iter()
                .map(|row| {
                    let coords: Vec<BigRational> =
                        quasi.iter().map(|&c| row[c].clone()).collect();
                    centers.iter().map(|c| plain_sq_dist(&coords, c)).collect()
                })
                .collect();
            let assigned: Vec<usize> = dists.iter().map(|d| mir.mask_scan(d, false)).collect();
            let fresh: Vec<Vec<bool>> = assigned
                .iter()
                .map(|&j| (0..kp).map(|c| c == j).collect())
                .collect();
            match mir.rcc(&fresh, &vals, quasi) {
                Ok((c, ct)) => {
                    centers = c;
                    counts = ct;
                    member = fresh;
                    break;
                }
                Err(Error::EmptyCluster(j)) => {
                    repairs += 1;
                    if repairs > 4 * kp {
                        return Err(Error::EmptyCluster(j));
                    }
                    let own: Vec<BigRational> = (0..n)
                        .map(|i| dists[i][assigned[i]].clone())
                        .collect();
                    let far = mir.mask_scan(&own, true);
                    centers[j] = quasi.iter().map(|&c| vals[far][c].clone()).collect();
                }
                Err(e) => return Err(e),
            }
        }
    }

    let flags = mir.non_k(&counts, cfg.k)?;
    let mut state = MirrorState {
        ids: (0..kp).collect(),
        member,
        centers,
        counts,
        flagged: vec![None; kp],
    };
    let mut dropped = vec![false; n];
    let mut suppressed_clusters = Vec::new();
    let mut merges = Vec::new();

    if flags.iter().any(|&f| f) {
        let flagged_sizes: Vec<(usize, usize)> = flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(j, _)| (j, state.counts[j]))
            .collect();
        mir.reveal_draws(flagged_sizes.len(), kp, cfg.k);
        let plan = suppress_clusters(&flagged_sizes, cfg.suppression_threshold, n)?;
        for &j in &plan.clusters {
            for (i, row) in state.member.iter().enumerate() {
                if row[j] {
                    dropped[i] = true;
                }
            }
        }
        if n - plan.rows < cfg.k {
            return Err(Error::Unsatisfiable {
                retained: n - plan.rows,
                k: cfg.k,
            });
        }
        for &(j, s) in &flagged_sizes {
            if !plan.clusters.contains(&j) {
                state.flagged[j] = Some(s);
            }
        }
        for &j in plan.clusters.iter().rev() {
            state.ids.remove(j);
            state.flagged.remove(j);
            state.counts.remove(j);
            state.centers.remove(j);
            for row in &mut state.member {
                row.remove(j);
            }
        }
        suppressed_clusters = plan.clusters;

        loop {
            let picked = state
                .flagged
                .iter()
                .enumerate()
                .filter_map(|(c, f)| f.map(|s| (s, c)))
                .min();
            let Some((sj, j)) = picked else { break };
            if state.ids.len() == 1 {
                return Err(Error::Unsatisfiable {
                    retained: sj,
                    k: cfg.k,
                });
            }
            let targets: Vec<usize> = (0..state.ids.len()).filter(|&t| t != j).collect();
            let dists =
                mirror_merge_distances(&mut mir, &state, &vals, quasi, j, &targets, cfg.strategy);
            let t = targets[mir.mask_scan(&dists, false)];
            merges.push((state.ids[j], state.ids[t]));
            for row in &mut state.member {
                row[t] |= row[j];
            }
            state.flagged[t] = match state.flagged[t] {
                Some(st) if st + sj < cfg.k => Some(st + sj),
                _ => None,
            };
            state.ids.remove(j);
            state.flagged.remove(j);
            state.counts.remove(j);
            state.centers.remove(j);
            for row in &mut state.member {
                row.remove(j);
            }
            let (c, ct) = mir.rcc(&state.member, &vals, quasi)?;
            state.centers = c;
            state.counts = ct;
        }
    }

    let m = state.ids.len();
    mir.reveal_draws(m, m, cfg.k);
    let final_sizes = state.counts.clone();

    let cluster_of: Vec<Option<usize>> = state
        .member
        .iter()
        .map(|row| row.iter().position(|&b| b))
        .collect();
    let mut anonymized = vals.clone();
    for (l, &col) in quasi.iter().enumerate() {
        match &plain.schema.columns[col].kind {
            ColumnKind::Numeric => {
                for i in 0..n {
                    anonymized[i][col] = match cluster_of[i] {
                        Some(p) => state.centers[p][l].clone(),
                        None => BigRational::zero(),
                    };
                }
            }
            ColumnKind::Categorical { hierarchy } => {
                let hier = hierarchies.get(hierarchy).ok_or_else(|| {
                    Error::Hierarchy(format!("no hierarchy named {hierarchy:?} loaded"))
                })?;
                let codes: Vec<BigRational> = vals.iter().map(|r| r[col].clone()).collect();
                let mut reps = Vec::with_capacity(m);
                for j in 0..m {
                    let member: Vec<bool> = state.member.iter().map(|r| r[j]).collect();
                    reps.push(mir.categorical_rep(hier, &member, &codes));
                }
                for i in 0..n {
                    anonymized[i][col] = match cluster_of[i] {
                        Some(p) => reps[p].clone(),
                        None => BigRational::zero(),
                    };
                }
            }
            ColumnKind::Tokenized => {
                return Err(Error::InvalidParameter(format!(
                    "column {col} is tokenized and cannot be generalized"
                )));
            }
        }
    }

    let assignments: Vec<Option<usize>> = cluster_of
        .iter()
        .map(|c| c.map(|p| state.ids[p]))
        .collect();
    Ok((
        PlainOutcome {
            assignments,
            centroids: state.centers,
            anonymized,
            dropped,
            merges,
            repairs,
            suppressed_clusters,
            final_sizes,
        },
        mir.trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{encode_hierarchy, encrypt_table, ColumnSpec, TreeSpec};
    use crate::she::{KeyPair, SchemeParams, SimBackend};
    use crate::twoparty::{audit_leakage, AuditReport, Transcript};

    fn tree(label: &str, children: Vec<TreeSpec>) -> TreeSpec {
        TreeSpec {
            label: label.to_string(),
            children,
        }
    }

    fn leaf(label: &str) -> TreeSpec {
        tree(label, vec![])
    }

    /// Leaves a=50, b=60, c=170, d=180; mids ab=55, cd=175; root 115.
    fn two_level() -> Hierarchy {
        encode_hierarchy(
            &tree(
                "root",
                vec![
                    tree("ab", vec![leaf("a"), leaf("b")]),
                    tree("cd", vec![leaf("c"), leaf("d")]),
                ],
            ),
            100,
        )
        .unwrap()
    }

    fn deep() -> Hierarchy {
        encode_hierarchy(
            &tree(
                "root",
                vec![
                    tree(
                        "l",
                        vec![
                            tree("ll", vec![leaf("x1"), leaf("x2"), leaf("x3")]),
                            tree("lr", vec![leaf("y1")]),
                        ],
                    ),
                    tree("r", vec![tree("rl", vec![leaf("z1"), leaf("z2")])]),
                ],
            ),
            50,
        )
        .unwrap()
    }

    fn numeric_table(cols: Vec<Vec<i64>>) -> PlainTable {
        let n = cols[0].len();
        let schema = Schema {
            columns: (0..cols.len())
                .map(|i| ColumnSpec {
                    name: format!("a{i}"),
                    kind: ColumnKind::Numeric,
                })
                .collect(),
        };
        let rows = (0..n).map(|r| cols.iter().map(|c| c[r]).collect()).collect();
        PlainTable {
            schema,
            rows,
            token_maps: HashMap::new(),
        }
    }

    fn cat_table(hier_name: &str, codes: Vec<i64>) -> PlainTable {
        let schema = Schema {
            columns: vec![ColumnSpec {
                name: "cat".into(),
                kind: ColumnKind::Categorical {
                    hierarchy: hier_name.into(),
                },
            }],
        };
        PlainTable {
            schema,
            rows: codes.into_iter().map(|c| vec![c]).collect(),
            token_maps: HashMap::new(),
        }
    }

    fn setup(seed: u64) -> (SimBackend, KeyPair) {
        let b = SimBackend::new(seed);
        let keys = b.keygen(SchemeParams::default(), 1);
        (b, keys)
    }

    fn cfg(k: usize, rounds: usize, th: f64, quasi: Vec<usize>) -> AnonConfig {
        AnonConfig {
            k,
            rounds,
            suppression_threshold: th,
            strategy: ReassignStrategy::ClusterToCluster,
            quasi_columns: quasi,
        }
    }

    fn max_payload_depth(t: &Transcript) -> u32 {
        let mut depth = 0;
        for msg in &t.messages {
            match &msg.payload {
                Payload::Cipher(v) => {
                    for c in v {
                        depth = depth.max(c.depth());
                    }
                }
                Payload::CipherMatrix(m) => {
                    for row in m {
                        for c in row {
                            depth = depth.max(c.depth());
                        }
                    }
                }
                _ => {}
            }
        }
        depth
    }

    #[derive(Debug)]
    struct Run {
        cells: Vec<Vec<BigRational>>,
        dropped: Vec<bool>,
        report: AnonReport,
        mirror: PlainOutcome,
        audit: AuditReport,
        max_depth: u32,
    }

    /// Runs the protocol and its mirror on the same seed, decrypts the
    /// outputs and audits the transcript against the mirror's trace.
    fn run_both(
        plain: &PlainTable,
        hiers: &HashMap<String, Hierarchy>,
        cfg: &AnonConfig,
        p1_seed: u64,
        identity_fault: bool,
        unit_fault: bool,
    ) -> Result<Run> {
        let b = SimBackend::new(p1_seed.wrapping_mul(31).wrapping_add(7));
        let keys = b.keygen(SchemeParams::default(), 1);
        let table = encrypt_table(&b, &keys.pk, plain);
        let mut p1 = P1Handle::new(&b, keys.pk.clone(), p1_seed);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut ch = Channel::new(1, (p1_seed, 0));
        ch.faults.identity_min_index = identity_fault;
        ch.faults.unit_rcc_blinders = unit_fault;
        let out = secure_kanonymize(&mut p1, &p2, &mut ch, &table, hiers, cfg)?;
        let (mirror, trace) = plain_kanonymize(plain, hiers, cfg, p1_seed)?;
        let audit = audit_leakage(ch.transcript(), &b, trace);
        let mut max_depth = max_payload_depth(ch.transcript());
        let mut cells = Vec::new();
        for row in &out.table.rows {
            let mut r = Vec::new();
            for c in row {
                max_depth = max_depth.max(c.depth());
                r.push(b.dec(&keys.sk, c).unwrap());
            }
            cells.push(r);
        }
        let dropped: Vec<bool> = out
            .drop_flags
            .iter()
            .map(|c| !b.dec(&keys.sk, c).unwrap().is_zero())
            .collect();
        Ok(Run {
            cells,
            dropped,
            report: out.report,
            mirror,
            audit,
            max_depth,
        })
    }

    fn assert_run_matches(run: &Run) {
        assert_eq!(run.cells, run.mirror.anonymized);
        assert_eq!(run.dropped, run.mirror.dropped);
        assert_eq!(run.report.merges, run.mirror.merges);
        assert_eq!(run.report.repairs, run.mirror.repairs);
        assert_eq!(
            run.report.suppressed_clusters,
            run.mirror.suppressed_clusters
        );
        assert_eq!(run.report.final_cluster_sizes, run.mirror.final_sizes);
        assert!(run.max_depth <= 10, "depth {} over limit", run.max_depth);
    }

    /// Smallest equivalence class over the quasi columns of retained rows.
    fn min_class_size(run: &Run, quasi: &[usize]) -> usize {
        let mut classes: HashMap<String, usize> = HashMap::new();
        for (i, row) in run.cells.iter().enumerate() {
            if run.dropped[i] {
                continue;
            }
            let key: Vec<String> = quasi.iter().map(|&c| row[c].to_string()).collect();
            *classes.entry(key.join("|")).or_insert(0) += 1;
        }
        classes.values().copied().min().unwrap_or(0)
    }

    #[test]
    fn masked_scan_marks_a_minimal_value() {
        let (b, keys) = setup(3);
        let mut p1 = P1Handle::new(&b, keys.pk.clone(), 5);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for case in 0..120 {
            let len = rng.gen_range(1..=8);
            let raw: Vec<i64> = (0..len).map(|_| rng.gen_range(0..200)).collect();
            let cells: Vec<Ciphertext> = raw.iter().map(|&v| p1.enc_int(v)).collect();
            let mut ch = Channel::new(case, (5, 3));
            let find_max = case % 2 == 0;
            let oh = extremum_onehot(&mut p1, &p2, &mut ch, &cells, find_max).unwrap();
            let marks: Vec<bool> = oh
                .iter()
                .map(|c| !b.dec(&keys.sk, c).unwrap().is_zero())
                .collect();
            assert_eq!(marks.iter().filter(|&&m| m).count(), 1);
            let idx = marks.iter().position(|&m| m).unwrap();
            let best = if find_max {
                *raw.iter().max().unwrap()
            } else {
                *raw.iter().min().unwrap()
            };
            assert_eq!(raw[idx], best);
            // Tie-free vectors pin the exact index.
            if raw.iter().filter(|&&v| v == best).count() == 1 {
                let expect = raw.iter().position(|&v| v == best).unwrap();
                assert_eq!(idx, expect);
            }
        }
    }

    #[test]
    fn frozen_mask_and_permutation_walkthrough() {
        let (b, keys) = setup(11);
        let p1 = P1Handle::new(&b, keys.pk.clone(), 1);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut ch = Channel::new(1, (1, 11));
        let cells: Vec<Ciphertext> = [9, 4, 16].iter().map(|&v| p1.enc_int(v)).collect();
        let poly = MaskingPolynomial::new(vec![1, 2]).unwrap();
        let perm = Permutation::from_one_based(&[3, 1, 2]).unwrap();
        let pos = extremum_exchange(&p1, &p2, &mut ch, &cells, &poly, &perm, false).unwrap();
        // Masked values 2x+1 are [19, 9, 33]; permuted [33, 19, 9]; the
        // strict minimum 9 sits at permuted position 2.
        assert_eq!(pos, 2);
        let msg = &ch.transcript().messages[0];
        assert_eq!(msg.tag, StepTag::MinIndexMaskedVector);
        let Payload::Cipher(sent) = &msg.payload else {
            panic!("expected ciphertext payload")
        };
        let dec: Vec<BigRational> = sent.iter().map(|c| b.dec(&keys.sk, c).unwrap()).collect();
        assert_eq!(dec, vec![rat(33), rat(19), rat(9)]);
        // Undoing the permutation sends position 2 back to index 1.
        let mut flags = vec![false; 3];
        flags[pos] = true;
        let orig = perm.invert(&flags).unwrap();
        assert_eq!(orig.iter().position(|&f| f), Some(1));
        assert_eq!(source_index(&perm, pos), 1);
    }

    #[test]
    fn tie_break_is_uniform_over_permutations() {
        let (b, keys) = setup(17);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut first = 0usize;
        for seed in 0..400 {
            let mut p1 = P1Handle::new(&b, keys.pk.clone(), seed);
            let mut ch = Channel::new(seed, (seed, 17));
            let cells = vec![p1.enc_int(4), p1.enc_int(4)];
            let oh = compute_min_index(&mut p1, &p2, &mut ch, &cells).unwrap();
            if !b.dec(&keys.sk, &oh[0]).unwrap().is_zero() {
                first += 1;
            }
        }
        assert!(
            (140..=260).contains(&first),
            "tie broke to index 0 in {first} of 400 runs"
        );
    }

    #[test]
    fn sed_matrix_matches_plain_squares() {
        let (b, keys) = setup(19);
        let p1 = P1Handle::new(&b, keys.pk.clone(), 2);
        let plain = numeric_table(vec![vec![0, 3, 5]]);
        let table = encrypt_table(&b, &keys.pk, &plain);
        let centers = vec![vec![p1.enc_int(0)], vec![p1.enc_int(4)]];
        let dists = sed_matrix(&b, &keys.pk, &table, &[0], &centers).unwrap();
        let dec: Vec<Vec<BigRational>> = dists
            .iter()
            .map(|r| r.iter().map(|c| b.dec(&keys.sk, c).unwrap()).collect())
            .collect();
        assert_eq!(
            dec,
            vec![
                vec![rat(0), rat(16)],
                vec![rat(9), rat(1)],
                vec![rat(25), rat(1)],
            ]
        );
        for row in &dists {
            for c in row {
                assert!(c.depth() <= 3);
            }
        }
    }

    #[test]
    fn rcc_recovers_exact_means() {
        let (b, keys) = setup(23);
        let mut p1 = P1Handle::new(&b, keys.pk.clone(), 4);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut ch = Channel::new(1, (4, 23));
        let plain = numeric_table(vec![vec![2, 4, 10, 12]]);
        let table = encrypt_table(&b, &keys.pk, &plain);
        let onehot = |j: usize, m: usize| -> Vec<Ciphertext> {
            (0..m).map(|c| p1.enc_int((c == j) as i64)).collect()
        };
        let assign: Vec<Vec<Ciphertext>> =
            vec![onehot(0, 2), onehot(0, 2), onehot(1, 2), onehot(1, 2)];
        let rcc = recompute_centers(&mut p1, &p2, &mut ch, &assign, &table, &[0]).unwrap();
        assert_eq!(b.dec(&keys.sk, &rcc.centers[0][0]).unwrap(), rat(3));
        assert_eq!(b.dec(&keys.sk, &rcc.centers[1][0]).unwrap(), rat(11));
        assert_eq!(b.dec(&keys.sk, &rcc.counts[0]).unwrap(), rat(2));
        assert_eq!(b.dec(&keys.sk, &rcc.counts[1]).unwrap(), rat(2));
        let tags: Vec<StepTag> = ch.transcript().messages.iter().map(|m| m.tag).collect();
        assert_eq!(
            tags,
            vec![
                StepTag::RccBlindedAggregates,
                StepTag::RccEmptyFlags,
                StepTag::RccDivisions,
            ]
        );
        // The shipped aggregates are blinded: no cell equals its raw value.
        let Payload::CipherMatrix(sent) = &ch.transcript().messages[0].payload else {
            panic!("expected matrix payload")
        };
        let raws = [
            [rat(2), rat(6)],
            [rat(2), rat(22)],
        ];
        for row in sent {
            let count = b.dec(&keys.sk, &row[0]).unwrap();
            let sum = b.dec(&keys.sk, &row[1]).unwrap();
            for raw in &raws {
                assert!(count != raw[0] || sum != raw[1]);
            }
        }
    }

    #[test]
    fn rcc_flags_first_empty_cluster() {
        let (b, keys) = setup(29);
        let mut p1 = P1Handle::new(&b, keys.pk.clone(), 6);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut ch = Channel::new(1, (6, 29));
        let plain = numeric_table(vec![vec![1, 9]]);
        let table = encrypt_table(&b, &keys.pk, &plain);
        let assign = vec![
            vec![p1.enc_int(1), p1.enc_int(0), p1.enc_int(0)],
            vec![p1.enc_int(0), p1.enc_int(0), p1.enc_int(1)],
        ];
        match recompute_centers(&mut p1, &p2, &mut ch, &assign, &table, &[0]) {
            Err(Error::EmptyCluster(1)) => {}
            other => panic!("expected empty cluster 1, got {other:?}"),
        }
        // The flag reply is on the wire before the run aborts.
        assert!(ch
            .transcript()
            .messages
            .iter()
            .any(|m| m.tag == StepTag::RccEmptyFlags));
    }

    #[test]
    fn non_k_flags_strictly_below_k() {
        let (b, keys) = setup(31);
        let p2 = P2Handle::new(&b, keys.clone());
        let flags_for = |counts: &[i64], k: usize, seed: u64| -> Vec<bool> {
            let mut p1 = P1Handle::new(&b, keys.pk.clone(), seed);
            let mut ch = Channel::new(seed, (seed, 31));
            let cells: Vec<Ciphertext> = counts.iter().map(|&v| p1.enc_int(v)).collect();
            non_k_clusters(&mut p1, &p2, &mut ch, &cells, k).unwrap()
        };
        assert_eq!(flags_for(&[3, 1, 5], 2, 1), vec![false, true, false]);
        assert_eq!(flags_for(&[3, 1, 5], 1, 2), vec![false, false, false]);
        // Exactly k is compliant.
        assert_eq!(flags_for(&[2], 2, 3), vec![false]);
        assert_eq!(flags_for(&[5, 2, 1, 4], 5, 4), vec![false, true, true, true]);
    }

    #[test]
    fn size_reveal_pads_with_fakes() {
        let (b, keys) = setup(37);
        let mut p1 = P1Handle::new(&b, keys.pk.clone(), 9);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut ch = Channel::new(1, (9, 37));
        let counts = vec![p1.enc_int(1), p1.enc_int(2), p1.enc_int(3)];
        let k = 4;
        let sizes =
            reveal_sizes(&mut p1, &p2, &mut ch, &counts, &[true, false, true], 3, k).unwrap();
        assert_eq!(sizes, vec![1, 3]);
        let Payload::Cipher(sent) = &ch.transcript().messages[0].payload else {
            panic!("expected ciphertext payload")
        };
        assert_eq!(sent.len(), 3);
        let Payload::Ints(reply) = &ch.transcript().messages[1].payload else {
            panic!("expected plaintext reply")
        };
        let mut vals = reply.clone();
        vals.sort_unstable();
        // One decoy in [1, k-1] hides among the real sizes 1 and 3.
        let fake: Vec<i64> = {
            let mut v = vals.clone();
            for real in [1, 3] {
                let p = v.iter().position(|&x| x == real).unwrap();
                v.remove(p);
            }
            v
        };
        assert_eq!(fake.len(), 1);
        assert!((1..k as i64).contains(&fake[0]));
    }

    #[test]
    fn suppression_respects_budget() {
        // Budget floor(0.5 * 18) = 9: sizes 3 and 5 fit, 12 does not.
        let plan = suppress_clusters(&[(0, 12), (1, 3), (2, 5)], 0.5, 18).unwrap();
        assert_eq!(plan.clusters, vec![1, 2]);
        assert_eq!(plan.rows, 8);
        let none = suppress_clusters(&[(0, 1), (1, 1)], 0.0, 10).unwrap();
        assert!(none.clusters.is_empty());
        assert_eq!(none.rows, 0);
        // Ten percent of 200 rows is exactly 20.
        let exact = suppress_clusters(&[(4, 20)], 0.1, 200).unwrap();
        assert_eq!(exact.clusters, vec![4]);
        let over = suppress_clusters(&[(4, 21)], 0.1, 200).unwrap();
        assert!(over.clusters.is_empty());
        // Ties on size fall back to the lower position.
        let tie = suppress_clusters(&[(7, 2), (3, 2)], 0.5, 8).unwrap();
        assert_eq!(plan_rows(&tie), (vec![3, 7], 4));
        assert!(suppress_clusters(&[(0, 1)], -0.1, 10).is_err());
        assert!(suppress_clusters(&[(0, 1)], 1.5, 10).is_err());
    }

    fn plan_rows(p: &SuppressionPlan) -> (Vec<usize>, usize) {
        (p.clusters.clone(), p.rows)
    }

    fn craft_state(
        p1: &P1Handle<SimBackend>,
        membership: &[usize],
        m: usize,
        plain: &PlainTable,
        quasi: &[usize],
        k: usize,
    ) -> Clusters {
        let n = membership.len();
        let assign: AssignmentMatrix = membership
            .iter()
            .map(|&j| (0..m).map(|c| p1.enc_int((c == j) as i64)).collect())
            .collect();
        let mut counts = vec![0usize; m];
        let mut sums = vec![vec![BigRational::zero(); quasi.len()]; m];
        for i in 0..n {
            counts[membership[i]] += 1;
            for (l, &c) in quasi.iter().enumerate() {
                sums[membership[i]][l] =
                    sums[membership[i]][l].clone() + rat(plain.rows[i][c]);
            }
        }
        let centers: ClusterCenters = (0..m)
            .map(|j| {
                sums[j]
                    .iter()
                    .map(|s| p1.scheme.enc(&p1.pk, &(s / rat(counts[j].max(1) as i64))))
                    .collect()
            })
            .collect();
        let enc_counts: Vec<Ciphertext> =
            counts.iter().map(|&c| p1.enc_int(c as i64)).collect();
        Clusters {
            ids: (0..m).collect(),
            assign,
            centers,
            counts: enc_counts,
            flagged: counts
                .iter()
                .map(|&c| if c < k { Some(c) } else { None })
                .collect(),
        }
    }

    #[test]
    fn reassign_merges_smallest_first() {
        let (b, keys) = setup(41);
        let mut p1 = P1Handle::new(&b, keys.pk.clone(), 12);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut ch = Channel::new(1, (12, 41));
        let plain = numeric_table(vec![vec![0, 1, 10, 10, 10, 10, 10]]);
        let table = encrypt_table(&b, &keys.pk, &plain);
        let mut state = craft_state(&p1, &[0, 1, 2, 2, 2, 2, 2], 3, &plain, &[0], 3);
        let merges = reassign_clusters(
            &mut p1,
            &p2,
            &mut ch,
            &mut state,
            &table,
            &[0],
            3,
            ReassignStrategy::ClusterToCluster,
        )
        .unwrap();
        // Cluster 0 (centre 0) is nearer to 1 (centre 1) than to 2 (centre
        // 10); the merged pair is still below k and joins cluster 2.
        assert_eq!(merges, vec![(0, 1), (1, 2)]);
        assert_eq!(state.ids, vec![2]);
        assert!(state.flagged[0].is_none());
        assert_eq!(b.dec(&keys.sk, &state.counts[0]).unwrap(), rat(7));
        assert_eq!(
            b.dec(&keys.sk, &state.centers[0][0]).unwrap(),
            BigRational::new(51.into(), 7.into())
        );
        assert!(ch
            .transcript()
            .messages
            .iter()
            .any(|m| m.tag == StepTag::MinIndexFlags));
    }

    #[test]
    fn reassign_strategies_agree_on_singletons() {
        let plain = numeric_table(vec![vec![0, 1, 10]]);
        let mut all = Vec::new();
        for strategy in [
            ReassignStrategy::ClusterToCluster,
            ReassignStrategy::PointToCluster,
            ReassignStrategy::PointToPoint,
        ] {
            let (b, keys) = setup(43);
            let mut p1 = P1Handle::new(&b, keys.pk.clone(), 14);
            let p2 = P2Handle::new(&b, keys.clone());
            let mut ch = Channel::new(1, (14, 43));
            let table = encrypt_table(&b, &keys.pk, &plain);
            let mut state = craft_state(&p1, &[0, 1, 2], 3, &plain, &[0], 2);
            let merges = reassign_clusters(
                &mut p1, &p2, &mut ch, &mut state, &table, &[0], 2, strategy,
            )
            .unwrap();
            assert!(state.flagged.iter().all(|f| f.is_none()));
            all.push(merges);
        }
        assert_eq!(all[0], all[1]);
        assert_eq!(all[0], all[2]);
        assert_eq!(all[0], vec![(0, 1), (2, 1)]);
    }

    #[test]
    fn reassign_unsatisfiable_when_single_cluster() {
        let (b, keys) = setup(47);
        let mut p1 = P1Handle::new(&b, keys.pk.clone(), 15);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut ch = Channel::new(1, (15, 47));
        let plain = numeric_table(vec![vec![3, 4]]);
        let table = encrypt_table(&b, &keys.pk, &plain);
        let mut state = craft_state(&p1, &[0, 0], 1, &plain, &[0], 5);
        match reassign_clusters(
            &mut p1,
            &p2,
            &mut ch,
            &mut state,
            &table,
            &[0],
            5,
            ReassignStrategy::ClusterToCluster,
        ) {
            Err(Error::Unsatisfiable { retained: 2, k: 5 }) => {}
            other => panic!("expected unsatisfiable, got {other:?}"),
        }
    }

    #[test]
    fn numeric_anonymization_publishes_means() {
        let plain = numeric_table(vec![vec![18, 18, 19, 19]]);
        let run = run_both(&plain, &HashMap::new(), &cfg(4, 2, 0.0, vec![0]), 21, false, false)
            .unwrap();
        assert_run_matches(&run);
        let mean = BigRational::new(37.into(), 2.into());
        for row in &run.cells {
            assert_eq!(row[0], mean);
        }
        assert_eq!(run.report.final_cluster_sizes, vec![4]);
        assert!(run.audit.is_clean(), "findings: {:?}", run.audit.findings);
    }

    #[test]
    fn categorical_representatives_follow_the_hierarchy() {
        let hier = two_level();
        let mut hiers = HashMap::new();
        hiers.insert("grade".to_string(), hier);
        let rep_for = |codes: Vec<i64>, membership: &[usize], m: usize| -> Vec<BigRational> {
            let (b, keys) = setup(53);
            let mut p1 = P1Handle::new(&b, keys.pk.clone(), 18);
            let p2 = P2Handle::new(&b, keys.clone());
            let mut ch = Channel::new(1, (18, 53));
            let plain = cat_table("grade", codes);
            let table = encrypt_table(&b, &keys.pk, &plain);
            let state = craft_state(&p1, membership, m, &plain, &[0], 1);
            let out =
                anonymize_clusters(&mut p1, &p2, &mut ch, &table, &hiers, &[0], &state).unwrap();
            out.rows
                .iter()
                .map(|r| b.dec(&keys.sk, &r[0]).unwrap())
                .collect()
        };
        // Same leaf twice: the leaf itself survives.
        assert_eq!(rep_for(vec![50, 50], &[0, 0], 1), vec![rat(50), rat(50)]);
        // Siblings generalize to their parent.
        assert_eq!(rep_for(vec![50, 60], &[0, 0], 1), vec![rat(55), rat(55)]);
        // Leaves of different subtrees go to the root.
        assert_eq!(rep_for(vec![50, 170], &[0, 0], 1), vec![rat(115), rat(115)]);
        assert_eq!(
            rep_for(vec![50, 60, 170], &[0, 0, 0], 1),
            vec![rat(115), rat(115), rat(115)]
        );
        // Two clusters resolve independently.
        assert_eq!(
            rep_for(vec![50, 60, 170, 180], &[0, 0, 1, 1], 2),
            vec![rat(55), rat(55), rat(175), rat(175)]
        );
    }

    #[test]
    fn common_ancestor_walks() {
        let hier = two_level();
        let (b, keys) = setup(59);
        let mut p1 = P1Handle::new(&b, keys.pk.clone(), 20);
        let p2 = P2Handle::new(&b, keys.clone());
        let mut ch = Channel::new(1, (20, 59));
        let ca = |p1: &mut P1Handle<SimBackend>, ch: &mut Channel, x: i64, y: i64| {
            let a = p1.enc_int(x);
            let bb = p1.enc_int(y);
            let h = common_ancestor(p1, &p2, ch, &hier, &a, &bb, 1).unwrap();
            (h.level, b.dec(&keys.sk, &h.code).unwrap())
        };
        assert_eq!(ca(&mut p1, &mut ch, 50, 60), (1, rat(55)));
        assert_eq!(ca(&mut p1, &mut ch, 50, 170), (2, rat(115)));
        // Equal inputs stop at their level-1 parent.
        assert_eq!(ca(&mut p1, &mut ch, 50, 50), (1, rat(55)));
        let a = p1.enc_int(50);
        let bb = p1.enc_int(60);
        assert!(common_ancestor(&mut p1, &p2, &mut ch, &hier, &a, &bb, 0).is_err());
    }

    /// Lowest level at or above 1 where all codes share an ancestor.
    fn plain_lca(h: &Hierarchy, codes: &[i64]) -> (u32, i64) {
        for level in 1..=h.height() {
            let anc: Vec<i64> = codes
                .iter()
                .map(|&c| h.ancestor_of(c, level).unwrap().code)
                .collect();
            if anc.windows(2).all(|w| w[0] == w[1]) {
                return (level, anc[0]);
            }
        }
        let root = &h.nodes_at(h.height())[0];
        (h.height(), root.code)
    }

    #[test]
    fn ancestor_fold_matches_plain_lca() {
        for (hier, seed) in [(two_level(), 61u64), (deep(), 67u64)] {
            let (b, keys) = setup(seed);
            let p2 = P2Handle::new(&b, keys.clone());
            let leaves: Vec<i64> = hier.nodes_at(0).iter().map(|n| n.code).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            for case in 0..25 {
                let len = rng.gen_range(2..=4);
                let codes: Vec<i64> = (0..len)
                    .map(|_| leaves[rng.gen_range(0..leaves.len())])
                    .collect();
                let mut p1 = P1Handle::new(&b, keys.pk.clone(), seed + case);
                let mut ch = Channel::new(case, (seed + case, seed));
                let cells: Vec<Ciphertext> = codes.iter().map(|&c| p1.enc_int(c)).collect();
                let fold =
                    common_ancestor_fold(&mut p1, &p2, &mut ch, &hier, &cells).unwrap();
                let lo = p1.enc_int(*codes.iter().min().unwrap());
                let hi = p1.enc_int(*codes.iter().max().unwrap());
                let pair =
                    common_ancestor(&mut p1, &p2, &mut ch, &hier, &lo, &hi, 1).unwrap();
                let (level, code) = plain_lca(&hier, &codes);
                assert_eq!(fold.level, level);
                assert_eq!(b.dec(&keys.sk, &fold.code).unwrap(), rat(code));
                assert_eq!(pair.level, level);
                assert_eq!(b.dec(&keys.sk, &pair.code).unwrap(), rat(code));
            }
        }
    }

    #[test]
    fn end_to_end_matches_mirror_on_people() {
        let ages = vec![18, 18, 19, 19, 18, 20, 20];
        let zips = vec![13122, 13122, 13122, 13122, 13121, 13121, 13121];
        let plain = numeric_table(vec![ages, zips]);
        let cfg = cfg(2, 2, 0.2, vec![0, 1]);
        let run = run_both(&plain, &HashMap::new(), &cfg, 101, false, false).unwrap();
        assert_run_matches(&run);
        assert!(run.audit.is_clean(), "findings: {:?}", run.audit.findings);
        assert!(run.audit.value_checks > 0);
        assert!(min_class_size(&run, &[0, 1]) >= 2);
        for size in &run.report.final_cluster_sizes {
            assert!(*size >= 2);
        }
    }

    #[test]
    fn end_to_end_random_tables_match_mirror() {
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        for case in 0..5u64 {
            let n = rng.gen_range(24..=40);
            let k = [2, 3, 5][case as usize % 3];
            let cols = vec![
                (0..n).map(|_| rng.gen_range(0..40)).collect::<Vec<i64>>(),
                (0..n).map(|_| rng.gen_range(0..800)).collect::<Vec<i64>>(),
            ];
            let plain = numeric_table(cols);
            let cfg = cfg(k, 2, 0.25, vec![0, 1]);
            let run = run_both(&plain, &HashMap::new(), &cfg, 300 + case, false, false).unwrap();
            assert_run_matches(&run);
            assert!(run.audit.is_clean(), "findings: {:?}", run.audit.findings);
            assert!(min_class_size(&run, &[0, 1]) >= k);
        }
    }

    #[test]
    fn end_to_end_with_categorical_quasi_column() {
        let mut hiers = HashMap::new();
        hiers.insert("grade".to_string(), two_level());
        let mut rng = ChaCha20Rng::seed_from_u64(73);
        let leaves = [50i64, 60, 170, 180];
        let n = 16;
        let schema = Schema {
            columns: vec![
                ColumnSpec {
                    name: "age".into(),
                    kind: ColumnKind::Numeric,
                },
                ColumnSpec {
                    name: "grade".into(),
                    kind: ColumnKind::Categorical {
                        hierarchy: "grade".into(),
                    },
                },
            ],
        };
        let rows: Vec<Vec<i64>> = (0..n)
            .map(|_| {
                vec![
                    rng.gen_range(20..60),
                    leaves[rng.gen_range(0..leaves.len())],
                ]
            })
            .collect();
        let plain = PlainTable {
            schema,
            rows,
            token_maps: HashMap::new(),
        };
        let cfg = cfg(3, 2, 0.25, vec![0, 1]);
        let run = run_both(&plain, &hiers, &cfg, 501, false, false).unwrap();
        assert_run_matches(&run);
        assert!(run.audit.is_clean(), "findings: {:?}", run.audit.findings);
        assert!(min_class_size(&run, &[0, 1]) >= 3);
        // Published grades are hierarchy node codes.
        let h = two_level();
        let codes: Vec<i64> = (0..=h.height())
            .flat_map(|l| h.nodes_at(l).iter().map(|nd| nd.code))
            .collect();
        for (i, row) in run.cells.iter().enumerate() {
            if !run.dropped[i] {
                let v = row[1].to_integer().to_i64().unwrap();
                assert!(codes.contains(&v), "not a node code: {v}");
            }
        }
    }

    #[test]
    fn point_strategies_run_end_to_end() {
        let mut rng = ChaCha20Rng::seed_from_u64(79);
        for (strategy, seed) in [
            (ReassignStrategy::PointToCluster, 601u64),
            (ReassignStrategy::PointToPoint, 602u64),
        ] {
            let n = 10;
            let plain = numeric_table(vec![(0..n)
                .map(|_| rng.gen_range(0..30))
                .collect::<Vec<i64>>()]);
            let cfg = AnonConfig {
                k: 3,
                rounds: 1,
                suppression_threshold: 0.0,
                strategy,
                quasi_columns: vec![0],
            };
            let run = run_both(&plain, &HashMap::new(), &cfg, seed, false, false).unwrap();
            assert_run_matches(&run);
            assert!(run.audit.is_clean(), "findings: {:?}", run.audit.findings);
            assert!(min_class_size(&run, &[0]) >= 3);
        }
    }

    #[test]
    fn k_equals_n_collapses_to_global_mean() {
        let plain = numeric_table(vec![vec![1, 2, 3, 4, 10]]);
        let run = run_both(&plain, &HashMap::new(), &cfg(5, 2, 0.0, vec![0]), 83, false, false)
            .unwrap();
        assert_run_matches(&run);
        let mean = BigRational::new(20.into(), 5.into());
        for row in &run.cells {
            assert_eq!(row[0], mean);
        }
        assert_eq!(run.report.final_cluster_sizes, vec![5]);
    }

    #[test]
    fn k1_keeps_distinct_rows_intact() {
        let plain = numeric_table(vec![vec![5, 17, 40, 86, 200]]);
        let run = run_both(&plain, &HashMap::new(), &cfg(1, 2, 0.0, vec![0]), 89, false, false)
            .unwrap();
        assert_run_matches(&run);
        for (i, row) in run.cells.iter().enumerate() {
            assert_eq!(row[0], rat(plain.rows[i][0]));
            assert!(!run.dropped[i]);
        }
    }

    #[test]
    fn oversized_k_is_unsatisfiable() {
        let plain = numeric_table(vec![vec![1, 2, 3, 4, 5]]);
        match run_both(&plain, &HashMap::new(), &cfg(9, 2, 0.0, vec![0]), 97, false, false) {
            Err(Error::Unsatisfiable { retained: 5, k: 9 }) => {}
            other => panic!("expected unsatisfiable, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_columns() {
        let plain = numeric_table(vec![vec![1, 2]]);
        let bad = |c: &AnonConfig| run_both(&plain, &HashMap::new(), c, 1, false, false).err();
        assert!(matches!(
            bad(&cfg(2, 2, 0.0, vec![])),
            Some(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            bad(&cfg(2, 2, 0.0, vec![3])),
            Some(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            bad(&cfg(2, 2, 0.0, vec![0, 0])),
            Some(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            bad(&cfg(2, 0, 0.0, vec![0])),
            Some(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            bad(&cfg(0, 2, 0.0, vec![0])),
            Some(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            bad(&cfg(2, 2, 1.5, vec![0])),
            Some(Error::InvalidParameter(_))
        ));
        // A categorical quasi column without its hierarchy loaded.
        let cat = cat_table("grade", vec![50, 60]);
        assert!(matches!(
            run_both(&cat, &HashMap::new(), &cfg(2, 2, 0.0, vec![0]), 1, false, false).err(),
            Some(Error::Hierarchy(_))
        ));
    }

    #[test]
    fn empty_cluster_repair_reseeds_and_completes() {
        // Duplicate values force both initial centres onto the same point;
        // ties then starve one cluster until a re-seed or a lucky split.
        let plain = numeric_table(vec![vec![5, 5]]);
        let cfg = cfg(1, 1, 0.0, vec![0]);
        let mut seen_repair = false;
        for seed in 0..100 {
            match run_both(&plain, &HashMap::new(), &cfg, 1000 + seed, false, false) {
                Ok(run) => {
                    assert_run_matches(&run);
                    assert!(run.audit.is_clean(), "findings: {:?}", run.audit.findings);
                    assert_eq!(run.cells[0][0], rat(5));
                    assert_eq!(run.cells[1][0], rat(5));
                    if run.report.repairs > 0 {
                        seen_repair = true;
                        break;
                    }
                }
                Err(Error::EmptyCluster(_)) => {}
                Err(e) => panic!("unexpected error: {e:?}"),
            }
        }
        assert!(seen_repair, "no run exercised the repair path");
    }

    #[test]
    fn identity_mask_fault_is_flagged() {
        let plain = numeric_table(vec![vec![1, 2, 100, 200]]);
        let run = run_both(&plain, &HashMap::new(), &cfg(2, 1, 0.0, vec![0]), 111, true, false)
            .unwrap();
        assert!(!run.audit.is_clean());
        assert!(run
            .audit
            .findings
            .iter()
            .any(|f| f.rule == "unmasked"));
        // Outputs still agree: the fault only removes the masking.
        assert_eq!(run.cells, run.mirror.anonymized);
    }

    #[test]
    fn unit_blinder_fault_is_flagged() {
        let plain = numeric_table(vec![vec![1, 2, 100, 200]]);
        let run = run_both(&plain, &HashMap::new(), &cfg(2, 1, 0.0, vec![0]), 113, false, true)
            .unwrap();
        assert!(!run.audit.is_clean());
        assert!(run
            .audit
            .findings
            .iter()
            .any(|f| f.rule == "unmasked" && f.tag == StepTag::RccBlindedAggregates));
        assert_eq!(run.cells, run.mirror.anonymized);
    }
}
