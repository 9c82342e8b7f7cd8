//! Somewhat-homomorphic encryption over exact rational plaintexts.
//!
//! The scheme interface exposes exactly the five algorithms the protocols
//! rely on: key generation, encryption, decryption, addition and
//! multiplication. [`SimBackend`] is a simulation: ciphertexts carry the
//! plaintext as an exact big rational plus a fresh 128-bit nonce, so all
//! homomorphic identities hold bit-exactly while non-determinism of real
//! encryption is preserved. Multiplicative depth is tracked per ciphertext
//! and enforced against [`SchemeParams::max_depth`].
//!
//! Nothing outside this module reads a ciphertext's payload; audits go
//! through [`SheScheme::audit_reveal`], which real backends leave
//! unimplemented.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use num::bigint::Sign;
use num::{BigInt, BigRational, BigUint, One, Signed, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SheError {
    #[error("ciphertext belongs to key {got:#x}, expected {expected:#x}")]
    KeyMismatch { expected: u64, got: u64 },
    #[error("multiplicative depth {depth} exceeds limit {limit}")]
    DepthExceeded { depth: u32, limit: u32 },
    #[error("malformed ciphertext bytes: {0}")]
    Malformed(String),
    #[error("invalid masking polynomial: {0}")]
    InvalidPolynomial(String),
}

/// Public parameters of a scheme instance.
///
/// `plaintext_modulus_hint` is advisory: the simulation is exact, but a
/// backend with a real plaintext modulus would wrap values beyond it, so the
/// backend counts every intermediate plaintext whose magnitude exceeds the
/// hint (see [`SimBackend::hint_overflows`]).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SchemeParams {
    pub plaintext_modulus_hint: BigUint,
    pub max_depth: u32,
    pub security_bits: u32,
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            plaintext_modulus_hint: BigUint::from(1_099_511_627_689u64),
            max_depth: 10,
            security_bits: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PublicKey {
    key_id: u64,
    params: SchemeParams,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SecretKey {
    key_id: u64,
    params: SchemeParams,
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub pk: PublicKey,
    pub sk: SecretKey,
}

impl PublicKey {
    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }
}

impl SecretKey {
    pub fn key_id(&self) -> u64 {
        self.key_id
    }
}

/// An encrypted rational. The payload is private to this module; holders of
/// a ciphertext can only combine it homomorphically or ship it to the key
/// holder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    key_id: u64,
    value: BigRational,
    nonce: u128,
    depth: u32,
}

impl Ciphertext {
    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn nonce(&self) -> u128 {
        self.nonce
    }

    /// Length-prefixed binary encoding: everything except the nonce is
    /// deterministic for a fixed plaintext and depth.
    pub fn to_bytes(&self) -> Vec<u8> {
        let num = self.value.numer().to_signed_bytes_le();
        let den = self.value.denom().to_biguint().unwrap().to_bytes_le();
        let body_len = 8 + 4 + num.len() + 4 + den.len() + 16 + 4;
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.extend_from_slice(&self.key_id.to_le_bytes());
        out.extend_from_slice(&(num.len() as u32).to_le_bytes());
        out.extend_from_slice(&num);
        out.extend_from_slice(&(den.len() as u32).to_le_bytes());
        out.extend_from_slice(&den);
        out.extend_from_slice(&self.nonce.to_le_bytes());
        out.extend_from_slice(&self.depth.to_le_bytes());
        out
    }

    /// Same encoding as `to_bytes` with the nonce zeroed, for comparing
    /// protocol runs that should agree on everything except nonces.
    pub fn normalized_bytes(&self) -> Vec<u8> {
        let mut c = self.clone();
        c.nonce = 0;
        c.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), SheError> {
        let err = |m: &str| SheError::Malformed(m.to_string());
        if bytes.len() < 4 {
            return Err(err("truncated length prefix"));
        }
        let body_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let total = 4 + body_len;
        if bytes.len() < total {
            return Err(err("truncated record"));
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8], SheError> {
            if pos + n > total {
                return Err(SheError::Malformed("field overruns record".to_string()));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let key_id = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let num_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let num = BigInt::from_signed_bytes_le(take(num_len)?);
        let den_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let den = BigUint::from_bytes_le(take(den_len)?);
        let nonce = u128::from_le_bytes(take(16)?.try_into().unwrap());
        let depth = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if pos != total {
            return Err(err("trailing bytes inside record"));
        }
        if den.is_zero() {
            return Err(err("zero denominator"));
        }
        let value = BigRational::new(num, BigInt::from_biguint(Sign::Plus, den));
        Ok((
            Ciphertext {
                key_id,
                value,
                nonce,
                depth,
            },
            total,
        ))
    }
}

/// The five scheme algorithms. Protocol code is generic over this trait;
/// only the simulation backend implements `audit_reveal`, so leakage audits
/// against a real backend degrade to structural checks.
pub trait SheScheme {
    fn keygen(&self, params: SchemeParams, seed: u64) -> KeyPair;
    fn enc(&self, pk: &PublicKey, m: &BigRational) -> Ciphertext;
    fn dec(&self, sk: &SecretKey, c: &Ciphertext) -> Result<BigRational, SheError>;
    fn add(&self, pk: &PublicKey, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, SheError>;
    fn mult(&self, pk: &PublicKey, a: &Ciphertext, b: &Ciphertext)
        -> Result<Ciphertext, SheError>;

    /// Plaintext view for the leakage auditor. `None` means the backend
    /// cannot reveal values and only structural audits are possible.
    fn audit_reveal(&self, _c: &Ciphertext) -> Option<BigRational> {
        None
    }
}

/// Exact-arithmetic simulation backend. One instance per thread of
/// execution; the nonce stream is seeded so whole runs are reproducible.
#[derive(Debug)]
pub struct SimBackend {
    nonce_rng: Mutex<ChaCha20Rng>,
    hint_overflows: AtomicU64,
}

impl SimBackend {
    pub fn new(nonce_seed: u64) -> Self {
        SimBackend {
            nonce_rng: Mutex::new(ChaCha20Rng::seed_from_u64(nonce_seed)),
            hint_overflows: AtomicU64::new(0),
        }
    }

    /// How many produced ciphertexts held a plaintext with magnitude beyond
    /// `plaintext_modulus_hint`. A real mod-p backend would have wrapped
    /// those values.
    pub fn hint_overflows(&self) -> u64 {
        self.hint_overflows.load(Ordering::Relaxed)
    }

    fn mint(&self, key_id: u64, hint: &BigUint, value: BigRational, depth: u32) -> Ciphertext {
        let exceeds = {
            let bound = BigInt::from_biguint(Sign::Plus, hint.clone()) * value.denom();
            value.numer().abs() > bound
        };
        if exceeds {
            self.hint_overflows.fetch_add(1, Ordering::Relaxed);
        }
        let nonce = self.nonce_rng.lock().unwrap().gen::<u128>();
        Ciphertext {
            key_id,
            value,
            nonce,
            depth,
        }
    }

    fn check_pair(pk: &PublicKey, a: &Ciphertext, b: &Ciphertext) -> Result<(), SheError> {
        for c in [a, b] {
            if c.key_id != pk.key_id {
                return Err(SheError::KeyMismatch {
                    expected: pk.key_id,
                    got: c.key_id,
                });
            }
        }
        Ok(())
    }
}

impl SheScheme for SimBackend {
    fn keygen(&self, params: SchemeParams, seed: u64) -> KeyPair {
        let key_id = ChaCha20Rng::seed_from_u64(seed).next_u64();
        KeyPair {
            pk: PublicKey {
                key_id,
                params: params.clone(),
            },
            sk: SecretKey { key_id, params },
        }
    }

    fn enc(&self, pk: &PublicKey, m: &BigRational) -> Ciphertext {
        self.mint(pk.key_id, &pk.params.plaintext_modulus_hint, m.clone(), 0)
    }

    fn dec(&self, sk: &SecretKey, c: &Ciphertext) -> Result<BigRational, SheError> {
        if c.key_id != sk.key_id {
            return Err(SheError::KeyMismatch {
                expected: sk.key_id,
                got: c.key_id,
            });
        }
        Ok(c.value.clone())
    }

    fn add(&self, pk: &PublicKey, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, SheError> {
        Self::check_pair(pk, a, b)?;
        Ok(self.mint(
            pk.key_id,
            &pk.params.plaintext_modulus_hint,
            &a.value + &b.value,
            a.depth.max(b.depth),
        ))
    }

    fn mult(
        &self,
        pk: &PublicKey,
        a: &Ciphertext,
        b: &Ciphertext,
    ) -> Result<Ciphertext, SheError> {
        Self::check_pair(pk, a, b)?;
        let depth = a.depth.max(b.depth) + 1;
        if depth > pk.params.max_depth {
            return Err(SheError::DepthExceeded {
                depth,
                limit: pk.params.max_depth,
            });
        }
        Ok(self.mint(
            pk.key_id,
            &pk.params.plaintext_modulus_hint,
            &a.value * &b.value,
            depth,
        ))
    }

    fn audit_reveal(&self, c: &Ciphertext) -> Option<BigRational> {
        Some(c.value.clone())
    }
}

/// Strictly increasing polynomial with natural coefficients, used to mask
/// values whose order (but not magnitude) the key holder may learn.
/// Invariant: some coefficient of degree >= 1 is positive, so the map is
/// injective and order-preserving on non-negative inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingPolynomial {
    coeffs: Vec<u64>,
}

impl MaskingPolynomial {
    pub const PROTOCOL_COEFF_MAX: u64 = 1 << 16;
    pub const PROTOCOL_DEGREE_RANGE: (u32, u32) = (2, 5);

    /// Coefficients in ascending degree order.
    pub fn new(coeffs: Vec<u64>) -> Result<Self, SheError> {
        if coeffs.len() < 2 || coeffs.iter().skip(1).all(|&a| a == 0) {
            return Err(SheError::InvalidPolynomial(
                "needs a positive coefficient of degree >= 1".to_string(),
            ));
        }
        Ok(MaskingPolynomial { coeffs })
    }

    /// The polynomial x, the degenerate mask that hides nothing. Used by
    /// audits and fault-injection tests.
    pub fn identity() -> Self {
        MaskingPolynomial { coeffs: vec![0, 1] }
    }

    /// Fresh protocol mask: degree 2..=5 clamped to `max_degree` (which is
    /// the remaining depth budget of the values being masked), coefficients
    /// uniform in [1, 2^16].
    pub fn random(rng: &mut impl Rng, max_degree: u32) -> Self {
        let (lo, hi) = Self::PROTOCOL_DEGREE_RANGE;
        let hi = hi.min(max_degree).max(lo);
        let degree = rng.gen_range(lo..=hi);
        let coeffs = (0..=degree)
            .map(|_| rng.gen_range(1..=Self::PROTOCOL_COEFF_MAX))
            .collect();
        MaskingPolynomial { coeffs }
    }

    pub fn degree(&self) -> u32 {
        (self.coeffs.len() - 1) as u32
    }

    pub fn coeffs(&self) -> &[u64] {
        &self.coeffs
    }

    pub fn is_identity(&self) -> bool {
        self.coeffs == [0, 1]
    }

    pub fn eval_plain(&self, x: &BigRational) -> BigRational {
        let mut acc = BigRational::zero();
        for &a in self.coeffs.iter().rev() {
            acc = acc * x + BigRational::from_integer(BigInt::from(a));
        }
        acc
    }
}

/// Horner evaluation on a ciphertext; costs exactly `poly.degree()`
/// multiplications of depth.
pub fn eval_poly<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    poly: &MaskingPolynomial,
    c: &Ciphertext,
) -> Result<Ciphertext, SheError> {
    let coeffs = poly.coeffs();
    let enc_u64 = |v: u64| scheme.enc(pk, &BigRational::from_integer(BigInt::from(v)));
    let mut acc = enc_u64(*coeffs.last().unwrap());
    for &a in coeffs.iter().rev().skip(1) {
        acc = scheme.mult(pk, &acc, c)?;
        acc = scheme.add(pk, &acc, &enc_u64(a))?;
    }
    Ok(acc)
}

pub fn enc_int<S: SheScheme>(scheme: &S, pk: &PublicKey, v: i64) -> Ciphertext {
    scheme.enc(pk, &BigRational::from_integer(BigInt::from(v)))
}

/// Negation; costs one multiplication of depth.
pub fn neg<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    c: &Ciphertext,
) -> Result<Ciphertext, SheError> {
    scheme.mult(pk, c, &enc_int(scheme, pk, -1))
}

/// a - b as add(a, -b); costs one multiplication of depth on b's side.
pub fn sub<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    a: &Ciphertext,
    b: &Ciphertext,
) -> Result<Ciphertext, SheError> {
    let nb = neg(scheme, pk, b)?;
    scheme.add(pk, a, &nb)
}

pub fn one<S: SheScheme>(scheme: &S, pk: &PublicKey) -> Ciphertext {
    scheme.enc(pk, &BigRational::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (SimBackend, KeyPair) {
        let backend = SimBackend::new(7);
        let keys = backend.keygen(SchemeParams::default(), 42);
        (backend, keys)
    }

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn roundtrip_rationals() {
        let (s, k) = setup();
        for m in [rat(-3, 2), rat(0, 1), rat(7, 1), rat(1, 3), rat(-12345678901, 997)] {
            let c = s.enc(&k.pk, &m);
            assert_eq!(s.dec(&k.sk, &c).unwrap(), m);
            assert_eq!(c.depth(), 0);
        }
    }

    #[test]
    fn add_and_mult_match_plain() {
        let (s, k) = setup();
        let two = enc_int(&s, &k.pk, 2);
        let three = enc_int(&s, &k.pk, 3);
        let sum = s.add(&k.pk, &two, &three).unwrap();
        let prod = s.mult(&k.pk, &two, &three).unwrap();
        assert_eq!(s.dec(&k.sk, &sum).unwrap(), rat(5, 1));
        assert_eq!(s.dec(&k.sk, &prod).unwrap(), rat(6, 1));
        assert_eq!(sum.depth(), 0);
        assert_eq!(prod.depth(), 1);

        let a = s.enc(&k.pk, &rat(1, 3));
        let b = s.enc(&k.pk, &rat(1, 6));
        let half = s.add(&k.pk, &a, &b).unwrap();
        assert_eq!(s.dec(&k.sk, &half).unwrap(), rat(1, 2));
    }

    #[test]
    fn mult_by_zero_is_exact_zero() {
        let (s, k) = setup();
        let z = enc_int(&s, &k.pk, 0);
        let v = s.enc(&k.pk, &rat(22, 7));
        let p = s.mult(&k.pk, &v, &z).unwrap();
        assert!(s.dec(&k.sk, &p).unwrap().is_zero());
    }

    #[test]
    fn depth_limit_boundary() {
        let (s, k) = setup();
        let mut c = enc_int(&s, &k.pk, 1);
        let one = enc_int(&s, &k.pk, 1);
        for _ in 0..10 {
            c = s.mult(&k.pk, &c, &one).unwrap();
        }
        assert_eq!(c.depth(), 10);
        let err = s.mult(&k.pk, &c, &one).unwrap_err();
        assert_eq!(err, SheError::DepthExceeded { depth: 11, limit: 10 });
        // Additions never raise depth.
        let sum = s.add(&k.pk, &c, &c).unwrap();
        assert_eq!(sum.depth(), 10);
    }

    #[test]
    fn key_mismatch_is_rejected() {
        let (s, k1) = setup();
        let k2 = s.keygen(SchemeParams::default(), 43);
        let c = enc_int(&s, &k1.pk, 9);
        assert!(matches!(
            s.dec(&k2.sk, &c),
            Err(SheError::KeyMismatch { .. })
        ));
        let d = enc_int(&s, &k2.pk, 1);
        assert!(matches!(
            s.add(&k1.pk, &c, &d),
            Err(SheError::KeyMismatch { .. })
        ));
    }

    #[test]
    fn keygen_deterministic_per_seed() {
        let (s, _) = setup();
        let a = s.keygen(SchemeParams::default(), 5).pk.key_id();
        let b = s.keygen(SchemeParams::default(), 5).pk.key_id();
        let c = s.keygen(SchemeParams::default(), 6).pk.key_id();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn equal_plaintexts_encrypt_distinctly() {
        let (s, k) = setup();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let c = enc_int(&s, &k.pk, 4);
            assert!(seen.insert(c.to_bytes()), "serialized ciphertexts collide");
        }
    }

    #[test]
    fn serialization_roundtrip() {
        let (s, k) = setup();
        let c = s.enc(&k.pk, &rat(-355, 113));
        let bytes = c.to_bytes();
        let (back, consumed) = Ciphertext::from_bytes(&bytes).unwrap();
        assert_eq!(consumed, bytes.len());
        assert_eq!(back, c);
        assert!(Ciphertext::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn serialization_stable_except_nonce() {
        let k1 = SimBackend::new(1).keygen(SchemeParams::default(), 42);
        let a = SimBackend::new(10).enc(&k1.pk, &rat(9, 4));
        let b = SimBackend::new(11).enc(&k1.pk, &rat(9, 4));
        let (da, _) = Ciphertext::from_bytes(&a.to_bytes()).unwrap();
        let (db, _) = Ciphertext::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(da.value, db.value);
        assert_eq!(da.key_id, db.key_id);
        assert_eq!(da.depth, db.depth);
        assert_ne!(da.nonce, db.nonce);
    }

    #[test]
    fn hint_overflow_counter() {
        let s = SimBackend::new(3);
        let params = SchemeParams {
            plaintext_modulus_hint: BigUint::from(100u32),
            ..SchemeParams::default()
        };
        let k = s.keygen(params, 1);
        enc_int(&s, &k.pk, 99);
        assert_eq!(s.hint_overflows(), 0);
        enc_int(&s, &k.pk, 1000);
        assert_eq!(s.hint_overflows(), 1);
        let big = enc_int(&s, &k.pk, 60);
        s.mult(&k.pk, &big, &big).unwrap();
        assert_eq!(s.hint_overflows(), 2);
    }

    #[test]
    fn eval_poly_squares_plus_one() {
        let (s, k) = setup();
        let poly = MaskingPolynomial::new(vec![1, 0, 1]).unwrap();
        let x = enc_int(&s, &k.pk, 4);
        let y = eval_poly(&s, &k.pk, &poly, &x).unwrap();
        assert_eq!(s.dec(&k.sk, &y).unwrap(), rat(17, 1));
        assert_eq!(y.depth(), 2);
    }

    #[test]
    fn eval_poly_preserves_order() {
        let (s, k) = setup();
        let poly = MaskingPolynomial::new(vec![1, 2]).unwrap();
        let inputs = [9i64, 4, 16];
        let out: Vec<BigRational> = inputs
            .iter()
            .map(|&v| {
                let c = enc_int(&s, &k.pk, v);
                s.dec(&k.sk, &eval_poly(&s, &k.pk, &poly, &c).unwrap())
                    .unwrap()
            })
            .collect();
        assert_eq!(out, vec![rat(19, 1), rat(9, 1), rat(33, 1)]);
        // Same relative order as the inputs.
        assert!(out[1] < out[0] && out[0] < out[2]);
    }

    #[test]
    fn eval_poly_depth_budget() {
        let (s, k) = setup();
        let poly = MaskingPolynomial::new(vec![3, 1, 1, 1, 1, 1]).unwrap();
        let mut c = enc_int(&s, &k.pk, 2);
        let one = enc_int(&s, &k.pk, 1);
        for _ in 0..6 {
            c = s.mult(&k.pk, &c, &one).unwrap();
        }
        // Depth 6 plus degree 5 exceeds the budget of 10.
        assert!(matches!(
            eval_poly(&s, &k.pk, &poly, &c),
            Err(SheError::DepthExceeded { .. })
        ));
        let shallow = enc_int(&s, &k.pk, 2);
        let y = eval_poly(&s, &k.pk, &poly, &shallow).unwrap();
        assert_eq!(y.depth(), poly.degree());
    }

    #[test]
    fn masking_polynomial_constructor() {
        assert!(MaskingPolynomial::new(vec![5]).is_err());
        assert!(MaskingPolynomial::new(vec![5, 0]).is_err());
        assert!(MaskingPolynomial::new(vec![0, 1]).is_ok());
        assert!(MaskingPolynomial::identity().is_identity());

        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..50 {
            let p = MaskingPolynomial::random(&mut rng, 5);
            assert!((2..=5).contains(&p.degree()));
            assert!(p
                .coeffs()
                .iter()
                .all(|&a| (1..=MaskingPolynomial::PROTOCOL_COEFF_MAX).contains(&a)));
            assert!(!p.is_identity());
        }
        let clamped = MaskingPolynomial::random(&mut rng, 3);
        assert!(clamped.degree() <= 3);
    }

    proptest! {
        #[test]
        fn homomorphic_identities(a in -2000i64..2000, b in -2000i64..2000, d in 1i64..50) {
            let (s, k) = setup();
            let ra = rat(a, d);
            let rb = rat(b, d);
            let ca = s.enc(&k.pk, &ra);
            let cb = s.enc(&k.pk, &rb);
            let sum = s.dec(&k.sk, &s.add(&k.pk, &ca, &cb).unwrap()).unwrap();
            let prod = s.dec(&k.sk, &s.mult(&k.pk, &ca, &cb).unwrap()).unwrap();
            prop_assert_eq!(sum, &ra + &rb);
            prop_assert_eq!(prod, &ra * &rb);
        }

        #[test]
        fn masking_poly_strictly_increasing(seed in 0u64..500, x in 0i64..100_000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let p = MaskingPolynomial::random(&mut rng, 5);
            let fx = p.eval_plain(&rat(x, 1));
            let fy = p.eval_plain(&rat(x + 1, 1));
            prop_assert!(fx < fy);
            // Natural coefficients with a constant term of at least one keep
            // the mask strictly above its input.
            prop_assert!(fx > rat(x, 1));
        }
    }
}
