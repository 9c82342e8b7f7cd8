//! Differential-privacy mechanisms evaluated over ciphertexts: Laplace
//! noise scaled by an encrypted diameter, and the binary (randomized
//! response) mechanism. The only real-valued pieces, ln and exp, are
//! evaluated once per draw in plaintext fixed-point arithmetic and stored
//! as exact rationals, so every homomorphic step stays exact.

use num::{BigInt, BigRational, One, Signed, Zero};
use rand::Rng;

use crate::error::{Error, Result};
use crate::she::{Ciphertext, PublicKey, SheScheme};

/// Fixed-point transcendentals at 64 fractional bits with a 96-bit guard.
mod fixedpoint {
    use num::{BigInt, BigRational, One, Signed, Zero};
    use std::sync::OnceLock;

    const GUARD_BITS: u32 = 96;
    const OUT_BITS: u32 = 64;

    fn guard_one() -> BigInt {
        BigInt::one() << GUARD_BITS
    }

    /// atanh series sum for 0 <= z < 1/2, z scaled by 2^GUARD_BITS.
    fn atanh_guard(z: &BigInt) -> BigInt {
        let z2 = (z * z) >> GUARD_BITS;
        let mut term = z.clone();
        let mut acc = z.clone();
        let mut k = 1u32;
        loop {
            term = (&term * &z2) >> GUARD_BITS;
            if term.is_zero() {
                return acc;
            }
            k += 2;
            let contrib = &term / BigInt::from(k);
            if contrib.is_zero() {
                return acc;
            }
            acc += contrib;
        }
    }

    fn ln2_guard() -> &'static BigInt {
        static LN2: OnceLock<BigInt> = OnceLock::new();
        // ln 2 = 2 atanh(1/3).
        LN2.get_or_init(|| BigInt::from(2) * atanh_guard(&(guard_one() / BigInt::from(3))))
    }

    fn round_to_out(v: &BigInt) -> BigRational {
        let down = GUARD_BITS - OUT_BITS;
        let half = BigInt::one() << (down - 1);
        let adjusted = if v.is_negative() { v - half } else { v + half };
        BigRational::new(adjusted >> down, BigInt::one() << OUT_BITS)
    }

    /// ln of a rational in (0, 1], rounded to 64 fractional bits. The
    /// result is an exact rational <= 0.
    pub fn ln_unit_interval(x: &BigRational) -> BigRational {
        assert!(x.is_positive() && *x <= BigRational::one(), "ln domain");
        // x = m / 2^e with m in [1, 2).
        let mut e = 0u32;
        let two = BigRational::from_integer(2.into());
        let mut m = x.clone();
        while m < BigRational::one() {
            m *= &two;
            e += 1;
        }
        // z = (m-1)/(m+1) in [0, 1/3).
        let z = (&m - BigRational::one()) / (&m + BigRational::one());
        let z_guard = (z.numer() << GUARD_BITS) / z.denom();
        let ln_m = BigInt::from(2) * atanh_guard(&z_guard);
        let guard = ln_m - BigInt::from(e) * ln2_guard();
        round_to_out(&guard)
    }

    /// e^x for x >= 0, rounded to 64 fractional bits.
    pub fn exp_nonneg(x: &BigRational) -> BigRational {
        assert!(!x.is_negative(), "exp domain");
        // Halve into [0, 1/2], run the Taylor series, square back up.
        let mut halvings = 0u32;
        let half = BigRational::new(1.into(), 2.into());
        let mut y = x.clone();
        while y > half {
            y /= &two_rat();
            halvings += 1;
        }
        let y_guard = (y.numer() << GUARD_BITS) / y.denom();
        let mut term = guard_one();
        let mut acc = guard_one();
        let mut k = 1u64;
        loop {
            term = ((&term * &y_guard) >> GUARD_BITS) / BigInt::from(k);
            if term.is_zero() {
                break;
            }
            acc += &term;
            k += 1;
        }
        for _ in 0..halvings {
            acc = (&acc * &acc) >> GUARD_BITS;
        }
        round_to_out(&acc)
    }

    fn two_rat() -> BigRational {
        BigRational::from_integer(2.into())
    }

}

/// Encrypted, data-independent lower and upper bounds for one column, with
/// the privacy parameter.
#[derive(Debug, Clone)]
pub struct DpBounds {
    pub l_star: Ciphertext,
    pub u_star: Ciphertext,
    pub epsilon: f64,
}

impl DpBounds {
    pub fn new(l_star: Ciphertext, u_star: Ciphertext, epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "epsilon {epsilon} must be a finite nonnegative number"
            )));
        }
        Ok(DpBounds {
            l_star,
            u_star,
            epsilon,
        })
    }
}

/// One inverse-CDF draw for Laplace noise: a uniform r in (-1/2, 1/2) and
/// the exact rational factor -(1/eps) sgn(r) ln(1 - 2|r|), so that
/// diameter * factor is Laplace(0, diameter/eps) noise.
#[derive(Debug, Clone)]
pub struct LaplaceDraw {
    pub r: BigRational,
    pub factor: BigRational,
}

/// Grid resolution of the uniform draw.
const R_BITS: u32 = 53;

impl LaplaceDraw {
    pub fn sample(epsilon: f64, rng: &mut impl Rng) -> Result<Self> {
        let half_grid: i64 = 1 << R_BITS;
        let r = loop {
            let step = rng.gen_range(-(half_grid - 1)..=(half_grid - 1));
            let r = BigRational::new(step.into(), BigInt::from(half_grid) << 1);
            // The endpoints hit the log singularity; the grid above cannot
            // produce them, this is a guard for other grids.
            if (&r + &r).abs() != BigRational::one() {
                break r;
            }
        };
        Ok(LaplaceDraw {
            factor: Self::factor_from_r(&r, epsilon)?,
            r,
        })
    }

    /// Factor for a given r; exposed so frozen-value tests can pin r.
    pub fn factor_from_r(r: &BigRational, epsilon: f64) -> Result<BigRational> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "laplace needs positive epsilon, got {epsilon}"
            )));
        }
        if r.is_zero() {
            return Ok(BigRational::zero());
        }
        let arg = BigRational::one() - (r + r).abs();
        let ln_val = fixedpoint::ln_unit_interval(&arg);
        let eps = BigRational::from_float(epsilon).expect("finite");
        // -(1/eps) sgn(r) ln(arg); ln(arg) <= 0 so the sign of the factor
        // follows the sign of r.
        let sign = if r.is_positive() {
            BigRational::one()
        } else {
            -BigRational::one()
        };
        Ok(-sign * ln_val / eps)
    }
}

/// Encrypted diameter u - l.
pub fn diam_star<S: SheScheme>(scheme: &S, pk: &PublicKey, bounds: &DpBounds) -> Result<Ciphertext> {
    Ok(crate::she::sub(scheme, pk, &bounds.u_star, &bounds.l_star)?)
}

/// Adds Laplace(0, (u-l)/eps) noise to the cell without decrypting
/// anything: the draw factor is plaintext, the diameter stays encrypted.
pub fn laplace_encrypted<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    cell: &Ciphertext,
    bounds: &DpBounds,
    rng: &mut impl Rng,
) -> Result<Ciphertext> {
    let draw = LaplaceDraw::sample(bounds.epsilon, rng)?;
    let diam = diam_star(scheme, pk, bounds)?;
    let noise = scheme.mult(pk, &diam, &scheme.enc(pk, &draw.factor))?;
    Ok(scheme.add(pk, cell, &noise)?)
}

/// Plaintext mirror of `laplace_encrypted`; consumes the same draws.
pub fn laplace_plain(
    value: &BigRational,
    l: &BigRational,
    u: &BigRational,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<BigRational> {
    let draw = LaplaceDraw::sample(epsilon, rng)?;
    Ok(value + (u - l) * draw.factor)
}

/// Probability of keeping the value in the binary mechanism,
/// e^eps / (1 + e^eps), as an exact rational of the fixed-point e^eps.
pub fn binary_keep_probability(epsilon: f64) -> Result<BigRational> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "binary mechanism needs nonnegative epsilon, got {epsilon}"
        )));
    }
    let e = fixedpoint::exp_nonneg(&BigRational::from_float(epsilon).expect("finite"));
    Ok(&e / (BigRational::one() + &e))
}

fn binary_draw(rng: &mut impl Rng) -> BigRational {
    let grid: i64 = 1 << R_BITS;
    BigRational::new(rng.gen_range(0..=grid).into(), grid.into())
}

/// Binary mechanism for two-valued columns: keeps the cell with probability
/// e^eps/(1+e^eps), otherwise replaces it by l + u - value, flipping one
/// bound to the other.
pub fn binary_encrypted<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    cell: &Ciphertext,
    bounds: &DpBounds,
    rng: &mut impl Rng,
) -> Result<Ciphertext> {
    let keep = binary_keep_probability(bounds.epsilon)?;
    if binary_draw(rng) <= keep {
        // Re-randomize so kept and flipped cells are indistinguishable.
        let zero = scheme.enc(pk, &BigRational::zero());
        return Ok(scheme.add(pk, cell, &zero)?);
    }
    let negated = scheme.mult(pk, cell, &scheme.enc(pk, &-BigRational::one()))?;
    let ends = scheme.add(pk, &bounds.l_star, &bounds.u_star)?;
    Ok(scheme.add(pk, &negated, &ends)?)
}

/// Plaintext mirror of `binary_encrypted`; consumes the same draws.
pub fn binary_plain(
    value: &BigRational,
    l: &BigRational,
    u: &BigRational,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<BigRational> {
    let keep = binary_keep_probability(epsilon)?;
    if binary_draw(rng) <= keep {
        Ok(value.clone())
    } else {
        Ok(l + u - value)
    }
}
