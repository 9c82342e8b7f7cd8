//! Masking operators that replace encrypted cell values with fictional
//! ones: dictionary draws, constant shifts, bounded noise, full
//! randomization and fixed redaction. All run at party 1 without seeing
//! any plaintext.

use num::BigRational;
use rand::Rng;

use crate::datamodel::EncryptedDictionary;
use crate::error::{Error, Result};
use crate::she::{Ciphertext, PublicKey, SheScheme};

/// Scale of the uniform noise grid inside a bound; fine enough that the
/// draw behaves continuously at test sample sizes.
const NOISE_GRID: i64 = 1 << 32;

/// Replaces the cell with a uniformly chosen, re-randomized dictionary
/// entry. The input cell does not influence the output.
pub fn mask_dictionary<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    _cell: &Ciphertext,
    dict: &EncryptedDictionary,
    rng: &mut impl Rng,
) -> Result<Ciphertext> {
    if dict.entries.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let pick = rng.gen_range(0..dict.entries.len());
    let zero = scheme.enc(pk, &BigRational::from_integer(0.into()));
    Ok(scheme.add(pk, &dict.entries[pick], &zero)?)
}

/// Adds a constant to the cell.
pub fn mask_shift<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    cell: &Ciphertext,
    shift: i64,
) -> Result<Ciphertext> {
    let s = scheme.enc(pk, &BigRational::from_integer(shift.into()));
    Ok(scheme.add(pk, cell, &s)?)
}

/// The uniform offset both the encrypted operator and its plaintext mirror
/// draw; sharing it keeps the two paths exactly equal under a shared rng.
pub fn noise_offset(fraction: f64, magnitude_bound: i64, rng: &mut impl Rng) -> Result<BigRational> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "noise fraction {fraction} outside (0,1)"
        )));
    }
    if magnitude_bound <= 0 {
        return Err(Error::InvalidParameter(
            "noise bound must be positive".to_string(),
        ));
    }
    let bound = BigRational::from_float(fraction).expect("finite")
        * BigRational::from_integer(magnitude_bound.into());
    let step = rng.gen_range(-NOISE_GRID..=NOISE_GRID);
    Ok(bound * BigRational::new(step.into(), NOISE_GRID.into()))
}

/// Adds uniform noise within `fraction` of a per-column magnitude bound.
/// Party 1 cannot see the true value, so the bound stands in for it; with
/// the bound set to the value itself this is the plain-domain rule
/// "replace v by a uniform draw from [v - v*x, v + v*x]".
pub fn mask_noise<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    cell: &Ciphertext,
    fraction: f64,
    magnitude_bound: i64,
    rng: &mut impl Rng,
) -> Result<Ciphertext> {
    let delta = noise_offset(fraction, magnitude_bound, rng)?;
    let d = scheme.enc(pk, &delta);
    Ok(scheme.add(pk, cell, &d)?)
}

/// Replaces the cell with a uniform integer from [lo, hi].
pub fn mask_random<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    _cell: &Ciphertext,
    lo: i64,
    hi: i64,
    rng: &mut impl Rng,
) -> Result<Ciphertext> {
    if lo > hi {
        return Err(Error::InvalidParameter(format!("empty range [{lo},{hi}]")));
    }
    let v = rng.gen_range(lo..=hi);
    Ok(scheme.enc(pk, &BigRational::from_integer(v.into())))
}

/// Replaces the cell with a fixed value.
pub fn redact<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    _cell: &Ciphertext,
    fixed: i64,
) -> Result<Ciphertext> {
    Ok(scheme.enc(pk, &BigRational::from_integer(fixed.into())))
}

/// One masking rule as configured per column.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum MaskRule {
    /// Uniform draw from the column's encrypted dictionary.
    Dictionary,
    Shift { amount: i64 },
    Noise { fraction: f64, bound: i64 },
    Random { lo: i64, hi: i64 },
    Redact { value: i64 },
}

/// Applies one rule down a column.
pub fn mask_column<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    cells: &mut [Ciphertext],
    rule: &MaskRule,
    dict: Option<&EncryptedDictionary>,
    rng: &mut impl Rng,
) -> Result<()> {
    for cell in cells.iter_mut() {
        *cell = match rule {
            MaskRule::Dictionary => {
                let dict = dict.ok_or(Error::EmptyDictionary)?;
                mask_dictionary(scheme, pk, cell, dict, rng)?
            }
            MaskRule::Shift { amount } => mask_shift(scheme, pk, cell, *amount)?,
            MaskRule::Noise { fraction, bound } => {
                mask_noise(scheme, pk, cell, *fraction, *bound, rng)?
            }
            MaskRule::Random { lo, hi } => mask_random(scheme, pk, cell, *lo, *hi, rng)?,
            MaskRule::Redact { value } => redact(scheme, pk, cell, *value)?,
        };
    }
    Ok(())
}
