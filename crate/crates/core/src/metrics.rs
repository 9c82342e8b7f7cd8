//! Risk and utility metrics over a released table.
//!
//! Everything here is computed from the plaintext release: the partition
//! of retained rows into equivalence classes (rows equal on the quasi
//! columns), the generalization level of categorical cells and the spread
//! of the numeric cells behind each published centroid. The owner runs
//! these after decryption to decide whether a release is safe enough and
//! how much utility it kept.

use std::collections::HashMap;

use num::{BigRational, One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::datamodel::{ColumnKind, Hierarchy, HierarchyNode, Schema};
use crate::error::{Error, Result};

/// Partition of the retained row indices by their quasi-column tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceClasses {
    /// Row indices per class, classes in first-appearance order.
    pub classes: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
}

impl EquivalenceClasses {
    pub fn total_rows(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn min_size(&self) -> Option<usize> {
        self.sizes.iter().copied().min()
    }
}

/// A metric as an exact rational plus a floating-point rendering for
/// reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalStat {
    pub exact: String,
    pub value: f64,
}

fn stat(r: &BigRational) -> RationalStat {
    RationalStat {
        exact: r.to_string(),
        value: r.to_f64().unwrap_or(f64::NAN),
    }
}

/// Everything the CLI prints about one release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: usize,
    pub suppressed: usize,
    pub class_count: usize,
    pub min_class_size: usize,
    pub aecs: RationalStat,
    pub discernibility: u64,
    pub precision: RationalStat,
    pub generalized_loss: RationalStat,
    pub reid_risk: RationalStat,
}

fn rat(v: i64) -> BigRational {
    BigRational::from_integer(v.into())
}

fn check_lens(rows: &[Vec<BigRational>], quasi: &[usize], dropped: &[bool]) -> Result<usize> {
    if dropped.len() != rows.len() {
        return Err(Error::SizeMismatch {
            expected: rows.len(),
            got: dropped.len(),
        });
    }
    if quasi.is_empty() {
        return Err(Error::InvalidParameter("no quasi columns selected".into()));
    }
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    for &c in quasi {
        if rows.is_empty() || c >= width {
            return Err(Error::InvalidParameter(format!(
                "quasi column {c} outside table"
            )));
        }
    }
    Ok(width)
}

/// Groups retained rows by equality of their quasi-column tuples.
pub fn equivalence_classes(
    rows: &[Vec<BigRational>],
    quasi: &[usize],
    dropped: &[bool],
) -> Result<EquivalenceClasses> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_lens(rows, quasi, dropped)?;
    let mut index: HashMap<Vec<BigRational>, usize> = HashMap::new();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if dropped[i] {
            continue;
        }
        let key: Vec<BigRational> = quasi.iter().map(|&c| row[c].clone()).collect();
        match index.get(&key) {
            Some(&p) => classes[p].push(i),
            None => {
                index.insert(key, classes.len());
                classes.push(vec![i]);
            }
        }
    }
    let sizes = classes.iter().map(|c| c.len()).collect();
    Ok(EquivalenceClasses { classes, sizes })
}

/// Average equivalence class size.
pub fn aecs(ec: &EquivalenceClasses) -> Result<BigRational> {
    if ec.classes.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(rat(ec.total_rows() as i64) / rat(ec.classes.len() as i64))
}

/// Discernibility penalty: squared class sizes plus a full-table penalty
/// for every suppressed row.
pub fn discernibility(ec: &EquivalenceClasses, suppressed: usize, n_rows: usize) -> u64 {
    let grouped: u64 = ec.sizes.iter().map(|&s| (s as u64) * (s as u64)).sum();
    grouped + (n_rows as u64) * (suppressed as u64)
}

/// Worst-case re-identification probability: one over the smallest class.
pub fn reid_risk(ec: &EquivalenceClasses) -> Result<BigRational> {
    let min = ec.min_size().ok_or(Error::EmptyInput)?;
    Ok(BigRational::new(1.into(), (min as i64).into()))
}

/// Node holding `code` at the lowest level that has it.
fn level_of(hier: &Hierarchy, code: i64) -> Option<(u32, &HierarchyNode)> {
    (0..=hier.height()).find_map(|l| hier.node_by_code(l, code).map(|n| (l, n)))
}

fn code_of(cell: &BigRational, col: usize) -> Result<i64> {
    if !cell.is_integer() {
        return Err(Error::Hierarchy(format!(
            "column {col}: {cell} is not a hierarchy node code"
        )));
    }
    cell.to_integer()
        .to_i64()
        .ok_or_else(|| Error::Hierarchy(format!("column {col}: code out of range")))
}

/// One minus the average generalization ratio (node level over hierarchy
/// height) of the categorical quasi cells. A table with only leaf values
/// scores 1, a table generalized to the roots scores 0.
pub fn cat_precision(
    rows: &[Vec<BigRational>],
    schema: &Schema,
    hierarchies: &HashMap<String, Hierarchy>,
    quasi: &[usize],
    dropped: &[bool],
) -> Result<BigRational> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_lens(rows, quasi, dropped)?;
    let mut total = BigRational::zero();
    let mut cells = 0usize;
    for &col in quasi {
        let ColumnKind::Categorical { hierarchy } = &schema.columns[col].kind else {
            continue;
        };
        let hier = hierarchies
            .get(hierarchy)
            .ok_or_else(|| Error::Hierarchy(format!("no hierarchy named {hierarchy:?} loaded")))?;
        for (i, row) in rows.iter().enumerate() {
            if dropped[i] {
                continue;
            }
            cells += 1;
            if hier.height() == 0 {
                continue;
            }
            let code = code_of(&row[col], col)?;
            let (level, _) = level_of(hier, code).ok_or_else(|| {
                Error::Hierarchy(format!("column {col}: {code} is not a node code"))
            })?;
            total += BigRational::new((level as i64).into(), (hier.height() as i64).into());
        }
    }
    if cells == 0 {
        return Ok(BigRational::one());
    }
    Ok(BigRational::one() - total / rat(cells as i64))
}

/// Average information loss per quasi cell. A categorical cell published
/// as a node covering c of the hierarchy's L leaves loses (c-1)/(L-1); a
/// numeric cell published as a centroid loses the spread of its class's
/// original values over the column's full range. Without the original
/// table every centroid is a zero-width interval and numeric cells lose
/// nothing.
pub fn generalized_loss(
    anonymized: &[Vec<BigRational>],
    original: Option<&[Vec<BigRational>]>,
    schema: &Schema,
    hierarchies: &HashMap<String, Hierarchy>,
    quasi: &[usize],
    dropped: &[bool],
) -> Result<BigRational> {
    if anonymized.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_lens(anonymized, quasi, dropped)?;
    if let Some(orig) = original {
        if orig.len() != anonymized.len() {
            return Err(Error::SizeMismatch {
                expected: anonymized.len(),
                got: orig.len(),
            });
        }
    }
    let src = original.unwrap_or(anonymized);
    let ec = equivalence_classes(anonymized, quasi, dropped)?;
    let mut total = BigRational::zero();
    let mut cells = 0usize;
    for &col in quasi {
        match &schema.columns[col].kind {
            ColumnKind::Categorical { hierarchy } => {
                let hier = hierarchies.get(hierarchy).ok_or_else(|| {
                    Error::Hierarchy(format!("no hierarchy named {hierarchy:?} loaded"))
                })?;
                let leaves = hier.total_leaves();
                for (i, row) in anonymized.iter().enumerate() {
                    if dropped[i] {
                        continue;
                    }
                    cells += 1;
                    if leaves <= 1 {
                        continue;
                    }
                    let code = code_of(&row[col], col)?;
                    let (_, node) = level_of(hier, code).ok_or_else(|| {
                        Error::Hierarchy(format!("column {col}: {code} is not a node code"))
                    })?;
                    total += BigRational::new(
                        (node.leaf_count as i64 - 1).into(),
                        (leaves as i64 - 1).into(),
                    );
                }
            }
            ColumnKind::Numeric => {
                let col_vals: Vec<&BigRational> = src.iter().map(|r| &r[col]).collect();
                let lo = col_vals.iter().min().expect("nonempty");
                let hi = col_vals.iter().max().expect("nonempty");
                let width = *hi - *lo;
                for class in &ec.classes {
                    let members: Vec<&BigRational> =
                        class.iter().map(|&i| &src[i][col]).collect();
                    let clo = members.iter().min().expect("classes are nonempty");
                    let chi = members.iter().max().expect("classes are nonempty");
                    cells += class.len();
                    if !width.is_zero() {
                        let ratio = (*chi - *clo) / &width;
                        total += ratio * rat(class.len() as i64);
                    }
                }
            }
            ColumnKind::Tokenized => {
                return Err(Error::InvalidParameter(format!(
                    "column {col} is tokenized and has no loss measure"
                )));
            }
        }
    }
    if cells == 0 {
        return Ok(BigRational::zero());
    }
    Ok(total / rat(cells as i64))
}

/// Sample uniques scaled to the population by the inverse sampling
/// fraction (the hypergeometric mean made an estimator). Experimental: it
/// assumes every sample unique is population-unique, so it overestimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationEstimate {
    pub sample_uniques: usize,
    pub estimated_population_uniques: BigRational,
}

pub fn population_estimate(
    ec: &EquivalenceClasses,
    population: usize,
) -> Result<PopulationEstimate> {
    let n = ec.total_rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if population < n {
        return Err(Error::InvalidParameter(format!(
            "population {population} smaller than sample {n}"
        )));
    }
    let uniques = ec.sizes.iter().filter(|&&s| s == 1).count();
    Ok(PopulationEstimate {
        sample_uniques: uniques,
        estimated_population_uniques: rat(uniques as i64) * rat(population as i64)
            / rat(n as i64),
    })
}

/// Assembles the full report the CLI emits.
pub fn report(
    anonymized: &[Vec<BigRational>],
    original: Option<&[Vec<BigRational>]>,
    schema: &Schema,
    hierarchies: &HashMap<String, Hierarchy>,
    quasi: &[usize],
    dropped: &[bool],
) -> Result<MetricsReport> {
    let n = anonymized.len();
    let suppressed = dropped.iter().filter(|&&d| d).count();
    let ec = equivalence_classes(anonymized, quasi, dropped)?;
    Ok(MetricsReport {
        rows: n,
        suppressed,
        class_count: ec.classes.len(),
        min_class_size: ec.min_size().unwrap_or(0),
        aecs: stat(&aecs(&ec)?),
        discernibility: discernibility(&ec, suppressed, n),
        precision: stat(&cat_precision(anonymized, schema, hierarchies, quasi, dropped)?),
        generalized_loss: stat(&generalized_loss(
            anonymized,
            original,
            schema,
            hierarchies,
            quasi,
            dropped,
        )?),
        reid_risk: stat(&reid_risk(&ec)?),
    })
}
