//! Two-party protocol harness: typed messages between the evaluator (party 1,
//! holds the public key and the encrypted table) and the key holder (party 2,
//! holds the secret key), transcript capture, seeded permutations, and the
//! leakage auditor that checks what party 2 actually gets to see.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::Write;

use num::bigint::Sign;
use num::{BigInt, BigRational, BigUint, One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::she::{Ciphertext, KeyPair, PublicKey, SecretKey, SheScheme};

/// Blinders multiply values party 2 will decrypt; 1 would pass them through
/// unchanged and 0 would fake an equality, so both are excluded.
pub const BLINDER_MIN: u64 = 2;
pub const BLINDER_MAX: u64 = 1 << 32;

pub fn sample_blinder(rng: &mut impl Rng) -> u64 {
    rng.gen_range(BLINDER_MIN..=BLINDER_MAX)
}

/// Blinder with a random sign, for difference probes where a positive
/// factor would leak the order of the two operands.
pub fn sample_signed_blinder(rng: &mut impl Rng) -> i64 {
    let magnitude = sample_blinder(rng) as i64;
    if rng.gen::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    P1ToP2,
    P2ToP1,
}

/// Every protocol step a message may belong to. The auditor rejects
/// anything outside this list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum StepTag {
    KeySetup,
    DiRequest,
    DiMaskedMatrix,
    DiFlags,
    QuasiRequest,
    QuasiSets,
    MinIndexMaskedVector,
    MaxIndexMaskedVector,
    MinIndexOneHot,
    MaxIndexOneHot,
    MinIndexFlags,
    RccBlindedAggregates,
    RccDivisions,
    RccEmptyFlags,
    NonKMaskedCounts,
    NonKFlags,
    SuppressSizes,
    SuppressSizesReply,
    CaDifference,
    CaEqFlags,
}

#[derive(Debug, Clone)]
pub enum Payload {
    Key(PublicKey),
    Cipher(Vec<Ciphertext>),
    CipherMatrix(Vec<Vec<Ciphertext>>),
    Flags(Vec<bool>),
    FlagMatrix(Vec<Vec<bool>>),
    Ints(Vec<i64>),
    IntSets(Vec<Vec<usize>>),
}

impl Payload {
    /// Canonical byte encoding used for digests. With `normalized` set,
    /// ciphertext nonces are zeroed so two runs that differ only in
    /// encryption randomness digest identically.
    fn canonical_bytes(&self, normalized: bool) -> Vec<u8> {
        let mut out = Vec::new();
        let ct_bytes = |c: &Ciphertext| {
            if normalized {
                c.normalized_bytes()
            } else {
                c.to_bytes()
            }
        };
        match self {
            Payload::Key(pk) => {
                out.push(0);
                out.extend_from_slice(&pk.key_id().to_le_bytes());
                out.extend_from_slice(&pk.params().plaintext_modulus_hint.to_bytes_le());
                out.extend_from_slice(&pk.params().max_depth.to_le_bytes());
            }
            Payload::Cipher(v) => {
                out.push(1);
                out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                for c in v {
                    out.extend_from_slice(&ct_bytes(c));
                }
            }
            Payload::CipherMatrix(m) => {
                out.push(2);
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                for row in m {
                    out.extend_from_slice(&(row.len() as u32).to_le_bytes());
                    for c in row {
                        out.extend_from_slice(&ct_bytes(c));
                    }
                }
            }
            Payload::Flags(v) => {
                out.push(3);
                out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                out.extend(v.iter().map(|&b| b as u8));
            }
            Payload::FlagMatrix(m) => {
                out.push(4);
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                for row in m {
                    out.extend_from_slice(&(row.len() as u32).to_le_bytes());
                    out.extend(row.iter().map(|&b| b as u8));
                }
            }
            Payload::Ints(v) => {
                out.push(5);
                out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::IntSets(m) => {
                out.push(6);
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                for row in m {
                    out.extend_from_slice(&(row.len() as u32).to_le_bytes());
                    for x in row {
                        out.extend_from_slice(&(*x as u64).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn digest_hex(&self, normalized: bool) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes(normalized)))
    }

    pub fn byte_len(&self) -> usize {
        self.canonical_bytes(false).len()
    }

    fn is_plaintext(&self) -> bool {
        matches!(
            self,
            Payload::Flags(_) | Payload::FlagMatrix(_) | Payload::Ints(_) | Payload::IntSets(_)
        )
    }
}

#[derive(Debug, Clone)]
pub struct Message {
    pub seq_no: u64,
    pub direction: Direction,
    pub tag: StepTag,
    pub payload: Payload,
}

#[derive(Serialize)]
struct TranscriptRecord<'a> {
    seq_no: u64,
    direction: Direction,
    step_tag: StepTag,
    payload_digest: &'a str,
    payload_len: usize,
}

/// Ordered log of every inter-party message in one session.
#[derive(Debug, Clone)]
pub struct Transcript {
    pub session_id: u64,
    /// (party 1 decision seed, encryption nonce seed).
    pub rng_seeds: (u64, u64),
    pub messages: Vec<Message>,
}

impl Transcript {
    pub fn new(session_id: u64, rng_seeds: (u64, u64)) -> Self {
        Transcript {
            session_id,
            rng_seeds,
            messages: Vec::new(),
        }
    }

    fn record_lines(&self, normalized: bool) -> Vec<String> {
        self.messages
            .iter()
            .map(|m| {
                let digest = m.payload.digest_hex(normalized);
                serde_json::to_string(&TranscriptRecord {
                    seq_no: m.seq_no,
                    direction: m.direction,
                    step_tag: m.tag,
                    payload_digest: &digest,
                    payload_len: m.payload.byte_len(),
                })
                .expect("record serializes")
            })
            .collect()
    }

    /// One JSON object per message.
    pub fn records(&self) -> Vec<String> {
        self.record_lines(false)
    }

    /// Same records with nonce-independent digests.
    pub fn normalized_records(&self) -> Vec<String> {
        self.record_lines(true)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for line in self.records() {
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Deliberate protocol misbehaviors for negative tests of the auditor.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultPlan {
    /// Use blinder 1 for the aggregate counts, leaving them unblinded.
    pub unit_rcc_blinders: bool,
    /// Use the identity permutation and the identity polynomial in the
    /// minimum-index exchange.
    pub identity_min_index: bool,
    /// Use blinder 0 in the direct-identifier difference matrices.
    pub zero_di_blinder: bool,
}

/// In-process synchronous channel; appends every message to the transcript
/// with a strictly increasing sequence number.
#[derive(Debug)]
pub struct Channel {
    transcript: Transcript,
    next_seq: u64,
    pub faults: FaultPlan,
}

impl Channel {
    pub fn new(session_id: u64, rng_seeds: (u64, u64)) -> Self {
        Channel {
            transcript: Transcript::new(session_id, rng_seeds),
            next_seq: 1,
            faults: FaultPlan::default(),
        }
    }

    pub fn send(&mut self, direction: Direction, tag: StepTag, payload: Payload) -> &Message {
        let msg = Message {
            seq_no: self.next_seq,
            direction,
            tag,
            payload,
        };
        self.next_seq += 1;
        self.transcript.messages.push(msg);
        self.transcript.messages.last().unwrap()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

/// Party 1 state: evaluator side. Holds no secret key by construction, so
/// decryption is impossible from this handle.
pub struct P1Handle<'a, S: SheScheme> {
    pub scheme: &'a S,
    pub pk: PublicKey,
    /// Drives all of party 1's protocol decisions (polynomials,
    /// permutations, blinders).
    pub rng: ChaCha20Rng,
}

impl<'a, S: SheScheme> P1Handle<'a, S> {
    pub fn new(scheme: &'a S, pk: PublicKey, seed: u64) -> Self {
        P1Handle {
            scheme,
            pk,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn enc_int(&self, v: i64) -> Ciphertext {
        self.scheme.enc(&self.pk, &BigRational::from_integer(v.into()))
    }
}

/// Party 2 state: key holder. The secret key never leaves this handle.
pub struct P2Handle<'a, S: SheScheme> {
    pub scheme: &'a S,
    pub pk: PublicKey,
    sk: SecretKey,
}

impl<'a, S: SheScheme> P2Handle<'a, S> {
    pub fn new(scheme: &'a S, keys: KeyPair) -> Self {
        P2Handle {
            scheme,
            pk: keys.pk,
            sk: keys.sk,
        }
    }

    pub fn dec(&self, c: &Ciphertext) -> Result<BigRational> {
        Ok(self.scheme.dec(&self.sk, c)?)
    }

    pub fn enc(&self, v: &BigRational) -> Ciphertext {
        self.scheme.enc(&self.pk, v)
    }
}

/// Seeded bijection on 0..size. Applying it moves the element at `map[i]`
/// to position i.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(size: usize) -> Self {
        Permutation {
            map: (0..size).collect(),
        }
    }

    /// Fisher-Yates shuffle of the identity mapping.
    pub fn sample(rng: &mut impl Rng, size: usize) -> Self {
        let mut map: Vec<usize> = (0..size).collect();
        for i in (1..size).rev() {
            let j = rng.gen_range(0..=i);
            map.swap(i, j);
        }
        Permutation { map }
    }

    /// Builds from a 1-based mapping, e.g. [3,1,2] sends [a,b,c] to [c,a,b].
    pub fn from_one_based(map: &[usize]) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in map {
            if m == 0 || m > map.len() || seen[m - 1] {
                return Err(Error::InvalidParameter(format!(
                    "not a bijection: {map:?}"
                )));
            }
            seen[m - 1] = true;
        }
        Ok(Permutation {
            map: map.iter().map(|&m| m - 1).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.map.len()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn apply<T: Clone>(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.map.len() {
            return Err(Error::SizeMismatch {
                expected: self.map.len(),
                got: v.len(),
            });
        }
        Ok(self.map.iter().map(|&m| v[m].clone()).collect())
    }

    /// Inverse of `apply`: invert(apply(v)) = v.
    pub fn invert<T: Clone>(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.map.len() {
            return Err(Error::SizeMismatch {
                expected: self.map.len(),
                got: v.len(),
            });
        }
        let mut out = v.to_vec();
        for (i, &m) in self.map.iter().enumerate() {
            out[m] = v[i].clone();
        }
        Ok(out)
    }

    /// Position the element originally at `index` lands on after `apply`.
    pub fn position_of(&self, index: usize) -> usize {
        self.map.iter().position(|&m| m == index).unwrap()
    }
}

/// Expected pre-masking values, recorded by the trusted reference run and
/// paired with transcript messages tag by tag in order.
#[derive(Debug, Clone)]
pub enum RawValues {
    /// Raw pairwise differences behind a masked difference matrix.
    DiMatrix(Vec<Vec<BigRational>>),
    /// Raw values in the same (permuted) order as the message payload.
    Masked { permuted_raw: Vec<BigRational> },
    /// As `Masked`, with the unmasked comparison threshold appended last
    /// in the payload.
    MaskedWithThreshold {
        permuted_raw: Vec<BigRational>,
        threshold: BigRational,
    },
    /// Raw aggregate rows [count, sum_1..sum_d] in payload (permuted) order.
    Aggregates { permuted_rows: Vec<Vec<BigRational>> },
    /// Raw difference behind a single blinded-difference probe.
    BlindedDifference { raw: BigRational },
}

#[derive(Debug, Default)]
pub struct ReferenceTrace {
    queues: HashMap<StepTag, VecDeque<RawValues>>,
}

impl ReferenceTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: StepTag, raw: RawValues) {
        self.queues.entry(tag).or_default().push_back(raw);
    }

    /// None if this tag was never traced (structural-only audit); an inner
    /// None if traced but exhausted (pairing error).
    fn pop(&mut self, tag: StepTag) -> Option<Option<RawValues>> {
        self.queues.get_mut(&tag).map(|q| q.pop_front())
    }
}

#[derive(Debug, Clone)]
pub struct AuditFinding {
    pub seq_no: u64,
    pub tag: StepTag,
    pub rule: &'static str,
    pub detail: String,
}

#[derive(Debug)]
pub struct AuditReport {
    pub findings: Vec<AuditFinding>,
    pub messages_checked: usize,
    /// Number of decrypted-vs-raw comparisons performed; zero when the
    /// backend exposes no plaintext oracle.
    pub value_checks: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

struct TagRule {
    direction: Direction,
    /// Sanctioned plaintext payloads: protocol parameters P1 publishes or
    /// the flag/size replies P2 is allowed to reveal.
    plaintext_ok: bool,
}

fn tag_rule(tag: StepTag) -> TagRule {
    use Direction::*;
    use StepTag::*;
    let (direction, plaintext_ok) = match tag {
        KeySetup => (P2ToP1, false),
        DiRequest => (P1ToP2, true),
        DiMaskedMatrix => (P1ToP2, false),
        DiFlags => (P2ToP1, true),
        QuasiRequest => (P1ToP2, true),
        QuasiSets => (P2ToP1, true),
        MinIndexMaskedVector => (P1ToP2, false),
        MaxIndexMaskedVector => (P1ToP2, false),
        MinIndexOneHot => (P2ToP1, false),
        MaxIndexOneHot => (P2ToP1, false),
        MinIndexFlags => (P2ToP1, true),
        RccBlindedAggregates => (P1ToP2, false),
        RccDivisions => (P2ToP1, false),
        RccEmptyFlags => (P2ToP1, true),
        NonKMaskedCounts => (P1ToP2, false),
        NonKFlags => (P2ToP1, true),
        SuppressSizes => (P1ToP2, false),
        SuppressSizesReply => (P2ToP1, true),
        CaDifference => (P1ToP2, false),
        CaEqFlags => (P2ToP1, true),
    };
    TagRule {
        direction,
        plaintext_ok,
    }
}

fn payload_shape_ok(tag: StepTag, payload: &Payload) -> bool {
    use Payload::*;
    use StepTag::*;
    match (tag, payload) {
        (KeySetup, Key(_)) => true,
        (DiRequest, Ints(v)) => v.len() == 3,
        (DiMaskedMatrix, CipherMatrix(m)) => {
            !m.is_empty() && m.iter().all(|r| r.len() == m.len())
        }
        (DiFlags, Flags(v)) => !v.is_empty(),
        (QuasiRequest, Ints(v)) => v.len() == 2,
        (QuasiSets, IntSets(_)) => true,
        (MinIndexMaskedVector | MaxIndexMaskedVector, Cipher(v)) => !v.is_empty(),
        (MinIndexOneHot | MaxIndexOneHot, Cipher(v)) => !v.is_empty(),
        (MinIndexFlags, Flags(v)) => v.iter().filter(|&&b| b).count() == 1,
        (RccBlindedAggregates, CipherMatrix(m)) => {
            !m.is_empty() && m.iter().all(|r| r.len() >= 2 && r.len() == m[0].len())
        }
        (RccDivisions, CipherMatrix(m)) => !m.is_empty(),
        (RccEmptyFlags, Flags(_)) => true,
        (NonKMaskedCounts, Cipher(v)) => v.len() >= 2,
        (NonKFlags, Flags(_)) => true,
        (SuppressSizes, Cipher(v)) => !v.is_empty(),
        (SuppressSizesReply, Ints(_)) => true,
        (CaDifference, Cipher(v)) => v.len() == 1,
        (CaEqFlags, Flags(v)) => v.len() == 1,
        _ => false,
    }
}

/// Checks a transcript against the step whitelist and, where the backend
/// reveals plaintexts and the reference trace supplies raw values, verifies
/// that everything party 2 decrypts was actually masked or blinded.
pub fn audit_leakage<S: SheScheme>(
    transcript: &Transcript,
    scheme: &S,
    mut reference: ReferenceTrace,
) -> AuditReport {
    let mut findings = Vec::new();
    let mut value_checks = 0usize;
    let mut last_seq = 0u64;

    for msg in &transcript.messages {
        if msg.seq_no <= last_seq {
            findings.push(AuditFinding {
                seq_no: msg.seq_no,
                tag: msg.tag,
                rule: "seq_order",
                detail: format!("seq_no {} after {}", msg.seq_no, last_seq),
            });
        }
        last_seq = last_seq.max(msg.seq_no);

        let rule = tag_rule(msg.tag);
        if msg.direction != rule.direction {
            findings.push(AuditFinding {
                seq_no: msg.seq_no,
                tag: msg.tag,
                rule: "direction",
                detail: format!("{:?} flows {:?}", msg.tag, msg.direction),
            });
        }
        if !payload_shape_ok(msg.tag, &msg.payload) {
            findings.push(AuditFinding {
                seq_no: msg.seq_no,
                tag: msg.tag,
                rule: "shape",
                detail: "payload shape violates step arity rules".to_string(),
            });
            continue;
        }
        if msg.payload.is_plaintext() && !rule.plaintext_ok {
            findings.push(AuditFinding {
                seq_no: msg.seq_no,
                tag: msg.tag,
                rule: "plaintext",
                detail: "unsanctioned plaintext payload".to_string(),
            });
        }

        if msg.direction == Direction::P1ToP2 {
            value_check(msg, scheme, &mut reference, &mut findings, &mut value_checks);
        }
    }

    AuditReport {
        findings,
        messages_checked: transcript.messages.len(),
        value_checks,
    }
}

fn reveal<S: SheScheme>(scheme: &S, c: &Ciphertext) -> Option<BigRational> {
    scheme.audit_reveal(c)
}

fn value_check<S: SheScheme>(
    msg: &Message,
    scheme: &S,
    reference: &mut ReferenceTrace,
    findings: &mut Vec<AuditFinding>,
    value_checks: &mut usize,
) {
    let raw = match reference.pop(msg.tag) {
        None => return,
        Some(None) => {
            findings.push(AuditFinding {
                seq_no: msg.seq_no,
                tag: msg.tag,
                rule: "pairing",
                detail: "no reference values left for this step".to_string(),
            });
            return;
        }
        Some(Some(raw)) => raw,
    };
    let finding = |rule: &'static str, detail: String| AuditFinding {
        seq_no: msg.seq_no,
        tag: msg.tag,
        rule,
        detail,
    };

    // Multiplicative blinding: dec == 0 must happen exactly where raw == 0
    // (the zero pattern carries the protocol's information); elsewhere dec
    // must differ from raw.
    let mut check_blinded_cell =
        |dec: &BigRational, raw: &BigRational, pos: String, out: &mut Vec<AuditFinding>| {
            *value_checks += 1;
            if dec.is_zero() != raw.is_zero() {
                out.push(finding("zero_pattern", format!("{pos}: zeroness flipped")));
            } else if !raw.is_zero() && dec == raw {
                out.push(finding("unmasked", format!("{pos}: value equals raw")));
            }
        };

    match (&msg.payload, raw) {
        (Payload::CipherMatrix(m), RawValues::DiMatrix(raw)) => {
            if m.len() != raw.len() {
                findings.push(finding("pairing", "matrix size mismatch".to_string()));
                return;
            }
            for (i, row) in m.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    if let Some(dec) = reveal(scheme, c) {
                        check_blinded_cell(&dec, &raw[i][j], format!("({i},{j})"), findings);
                    }
                }
            }
        }
        (Payload::Cipher(v), RawValues::Masked { permuted_raw }) => {
            check_masked_vector(v, &permuted_raw, scheme, findings, &finding, value_checks);
        }
        (
            Payload::Cipher(v),
            RawValues::MaskedWithThreshold {
                permuted_raw,
                threshold,
            },
        ) => {
            let (counts, mark) = v.split_at(v.len() - 1);
            check_masked_vector(
                counts,
                &permuted_raw,
                scheme,
                findings,
                &finding,
                value_checks,
            );
            if let Some(dec) = reveal(scheme, &mark[0]) {
                *value_checks += 1;
                if dec == threshold {
                    findings.push(finding("unmasked", "threshold equals raw k".to_string()));
                }
            }
        }
        (Payload::CipherMatrix(m), RawValues::Aggregates { permuted_rows }) => {
            if m.len() != permuted_rows.len() {
                findings.push(finding("pairing", "aggregate rows mismatch".to_string()));
                return;
            }
            for (i, row) in m.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    if let Some(dec) = reveal(scheme, c) {
                        check_blinded_cell(&dec, &permuted_rows[i][j], format!("({i},{j})"), findings);
                    }
                }
            }
        }
        (Payload::Cipher(v), RawValues::BlindedDifference { raw }) => {
            if let Some(dec) = reveal(scheme, &v[0]) {
                check_blinded_cell(&dec, &raw, "difference".to_string(), findings);
            }
        }
        _ => findings.push(finding("pairing", "reference shape mismatch".to_string())),
    }
}

/// Polynomial masking has no sanctioned zero channel: an honest mask with a
/// nonzero constant term moves every value, zero included, so any cell that
/// decrypts to its raw value is a finding.
fn check_masked_vector(
    v: &[Ciphertext],
    permuted_raw: &[BigRational],
    scheme: &impl SheScheme,
    findings: &mut Vec<AuditFinding>,
    finding: &dyn Fn(&'static str, String) -> AuditFinding,
    value_checks: &mut usize,
) {
    if v.len() != permuted_raw.len() {
        findings.push(finding("pairing", "vector length mismatch".to_string()));
        return;
    }
    let mut decs = Vec::with_capacity(v.len());
    for (i, c) in v.iter().enumerate() {
        if let Some(dec) = reveal(scheme, c) {
            *value_checks += 1;
            if dec == permuted_raw[i] {
                findings.push(finding("unmasked", format!("[{i}]: value equals raw")));
            }
            decs.push(dec);
        }
    }
    // The masked multiset must move away from the raw one; a pure
    // permutation with no masking leaves it intact.
    if decs.len() == v.len() {
        let mut a = decs;
        let mut b = permuted_raw.to_vec();
        a.sort();
        b.sort();
        if a == b {
            findings.push(finding(
                "unmasked",
                "multiset of values equals raw multiset".to_string(),
            ));
        }
    }
}

/// Number of candidate tuples for the p+1 smallest plaintext values hidden
/// behind a degree-p masking polynomial, when each value lies in a domain
/// of size 2^n_bits: C(2^n_bits, p+1).
pub fn candidate_count(n_bits: u32, p: u32) -> BigUint {
    let n = BigUint::one() << n_bits;
    let k = p as u64 + 1;
    let mut result = BigUint::one();
    for i in 0..k {
        result = result * (&n - BigUint::from(i)) / BigUint::from(i + 1);
    }
    result
}

/// Base-2 logarithm of a positive big natural, within ~1e-9.
pub fn log2_biguint(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 53 {
        let v: u64 = x.try_into().ok().map(|v: u64| v).unwrap_or(1);
        return (v as f64).log2();
    }
    let shift = bits - 53;
    let top: u64 = (x >> shift).try_into().unwrap();
    (top as f64).log2() + shift as f64
}

fn solve_square_system(
    mut a: Vec<Vec<BigRational>>,
    mut b: Vec<BigRational>,
) -> Option<Vec<BigRational>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot);
        b.swap(col, pivot);
        let inv = a[col][col].recip();
        for x in a[col].iter_mut() {
            *x *= &inv;
        }
        b[col] *= &inv;
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for c2 in 0..n {
                    let t = &a[col][c2] * &f;
                    a[r][c2] -= t;
                }
                let t = &b[col] * &f;
                b[r] -= t;
            }
        }
    }
    Some(b)
}

fn eval_int_poly(coeffs: &[BigInt], x: u64) -> BigInt {
    let x = BigInt::from(x);
    let mut acc = BigInt::ZERO;
    for c in coeffs.iter().rev() {
        acc = acc * &x + c;
    }
    acc
}

/// Exhaustively counts (distances, coefficients) assignments consistent
/// with a sorted sequence of polynomial outputs, assuming a degree-p
/// polynomial with natural coefficients and distances in [0, 2^n_bits).
/// A count above 1 demonstrates that the outputs do not pin down the
/// plaintexts. Toy scales only.
pub fn brute_force_recovery(
    outputs: &[i64],
    n_bits: u32,
    p: u32,
    budget: u64,
) -> Result<u64> {
    if outputs.is_empty() {
        return Ok(0);
    }
    if outputs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "outputs must be strictly increasing".to_string(),
        ));
    }
    let space = candidate_count(n_bits, p);
    if space > BigUint::from(budget) {
        return Err(Error::ParameterTooLarge {
            space: space.to_string(),
            budget,
        });
    }
    let unknowns = p as usize + 1;
    if outputs.len() < unknowns {
        return Err(Error::InvalidParameter(format!(
            "need at least {unknowns} outputs to constrain a degree-{p} polynomial"
        )));
    }
    if n_bits == 0 || n_bits > 24 {
        return Err(Error::InvalidParameter(
            "n_bits outside enumerable range".to_string(),
        ));
    }
    let domain = 1u64 << n_bits;

    let rhs: Vec<BigRational> = outputs[..unknowns]
        .iter()
        .map(|&y| BigRational::from_integer(y.into()))
        .collect();
    let mut consistent = 0u64;
    let mut tuple = (0..unknowns as u64).collect::<Vec<u64>>();
    loop {
        if let Some(coeffs) = coefficients_for(&tuple, &rhs) {
            if extends_to_remaining(&coeffs, outputs, unknowns, tuple[unknowns - 1], domain) {
                consistent += 1;
            }
        }
        // Next strictly increasing tuple over [0, domain).
        let mut i = unknowns;
        loop {
            if i == 0 {
                return Ok(consistent);
            }
            i -= 1;
            tuple[i] += 1;
            if tuple[i] <= domain - (unknowns - i) as u64 {
                for j in i + 1..unknowns {
                    tuple[j] = tuple[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Solves the Vandermonde system for the guessed smallest distances and
/// returns the coefficients if they are all naturals.
fn coefficients_for(tuple: &[u64], rhs: &[BigRational]) -> Option<Vec<BigInt>> {
    let n = tuple.len();
    let matrix: Vec<Vec<BigRational>> = tuple
        .iter()
        .map(|&d| {
            let mut row = Vec::with_capacity(n);
            let d = BigRational::from_integer(d.into());
            let mut pow = BigRational::one();
            for _ in 0..n {
                row.push(pow.clone());
                pow *= &d;
            }
            row
        })
        .collect();
    let solution = solve_square_system(matrix, rhs.to_vec())?;
    let mut coeffs = Vec::with_capacity(n);
    for c in solution {
        if !c.is_integer() || c.numer().sign() == Sign::Minus {
            return None;
        }
        coeffs.push(c.to_integer());
    }
    Some(coeffs)
}

/// The outputs beyond the guessed smallest distances must each have a
/// larger preimage in the domain. Natural coefficients make the polynomial
/// nondecreasing, so binary search suffices.
fn extends_to_remaining(
    coeffs: &[BigInt],
    outputs: &[i64],
    start: usize,
    mut prev: u64,
    domain: u64,
) -> bool {
    for &y in &outputs[start..] {
        let target = BigInt::from(y);
        let (mut lo, mut hi) = (prev + 1, domain);
        let mut found = None;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let v = eval_int_poly(coeffs, mid);
            if v < target {
                lo = mid + 1;
            } else {
                if v == target {
                    found = Some(mid);
                }
                hi = mid;
            }
        }
        match found {
            Some(d) => prev = d,
            None => return false,
        }
    }
    true
}
