//! Tables, schemas and the integer encoding of category hierarchies.
//!
//! All cell values are integers before encryption: numeric cells are rounded,
//! categorical cells become leaf codes of their hierarchy and free-text cells
//! become dictionary indices assigned by the data owner. Hierarchy codes are
//! laid out so that two leaves of the same subtree are always strictly closer
//! than two leaves of different subtrees at the same level, which lets the
//! protocols find a value's ancestor by nearest-code search.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use num::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::she::{Ciphertext, PublicKey, SheScheme};

/// Spacing of sibling leaves inside one lowest-level block.
const LEAF_PITCH: i64 = 10;

/// Default minimum code distance between distinct subtrees.
pub const DEFAULT_GAP: i64 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ColumnKind {
    /// Rounded to the nearest integer at ingestion.
    Numeric,
    /// Values are leaves of a named hierarchy.
    Categorical { hierarchy: String },
    /// Free text mapped to dictionary indices in first-occurrence order.
    Tokenized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }
}

/// Owner-side table of encoded integers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainTable {
    pub schema: Schema,
    pub rows: Vec<Vec<i64>>,
    /// Per tokenized column: index -> original string.
    pub token_maps: HashMap<usize, Vec<String>>,
}

impl PlainTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = i64> + '_ {
        self.rows.iter().map(move |r| r[idx])
    }
}

/// Evaluator-side table of cell ciphertexts.
#[derive(Debug, Clone)]
pub struct CipherTable {
    pub schema: Schema,
    pub key_id: u64,
    pub rows: Vec<Vec<Ciphertext>>,
}

impl CipherTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Rounds to the nearest integer, ties away from zero.
pub fn round_numeric(x: f64) -> Result<i64> {
    if !x.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "numeric cell is not finite: {x}"
        )));
    }
    let r = x.round();
    if r < i64::MIN as f64 || r > i64::MAX as f64 {
        return Err(Error::InvalidParameter(format!(
            "numeric cell out of range: {x}"
        )));
    }
    Ok(r as i64)
}

/// Nested tree description as read from hierarchy files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSpec {
    pub label: String,
    #[serde(default)]
    pub children: Vec<TreeSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyNode {
    pub label: String,
    pub code: i64,
    /// 0 for leaves, `height` for the root.
    pub level: u32,
    /// Inclusive code range of the node's descendant leaves.
    pub leaf_range: (i64, i64),
    pub leaf_count: usize,
}

/// A uniform-height hierarchy with far-apart integer codes.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    gap: i64,
    /// `levels[0]` are the leaves in left-to-right order, `levels[height]`
    /// is the single root.
    levels: Vec<Vec<HierarchyNode>>,
    leaf_by_label: HashMap<String, usize>,
}

impl Hierarchy {
    pub fn height(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn gap(&self) -> i64 {
        self.gap
    }

    pub fn total_leaves(&self) -> usize {
        self.levels[0].len()
    }

    pub fn nodes_at(&self, level: u32) -> &[HierarchyNode] {
        &self.levels[level as usize]
    }

    pub fn leaf_code(&self, label: &str) -> Option<i64> {
        self.leaf_by_label
            .get(label)
            .map(|&i| self.levels[0][i].code)
    }

    pub fn node_by_code(&self, level: u32, code: i64) -> Option<&HierarchyNode> {
        self.levels
            .get(level as usize)?
            .iter()
            .find(|n| n.code == code)
    }

    /// The level-`level` ancestor of a leaf code.
    pub fn ancestor_of(&self, leaf_code: i64, level: u32) -> Option<&HierarchyNode> {
        self.levels.get(level as usize)?.iter().find(|n| {
            let (lo, hi) = n.leaf_range;
            (lo..=hi).contains(&leaf_code)
        })
    }

    /// Nearest node of a level by absolute code distance. Unique by
    /// construction for any value inside the code span of some node.
    pub fn nearest_at(&self, value: i64, level: u32) -> &HierarchyNode {
        self.levels[level as usize]
            .iter()
            .min_by_key(|n| (n.code - value).abs())
            .expect("levels are never empty")
    }
}

struct Layout {
    /// Cell width per level.
    cell: Vec<i64>,
}

fn checked_mul(a: i64, b: i64) -> Result<i64> {
    a.checked_mul(b)
        .ok_or_else(|| Error::Hierarchy("code overflow".to_string()))
}

fn checked_add(a: i64, b: i64) -> Result<i64> {
    a.checked_add(b)
        .ok_or_else(|| Error::Hierarchy("code overflow".to_string()))
}

/// Pads ragged branches with single-child chain nodes so every leaf sits at
/// depth `height`.
fn normalize(spec: &TreeSpec, height: u32) -> TreeSpec {
    if spec.children.is_empty() {
        let mut node = spec.clone();
        for _ in 0..height {
            node = TreeSpec {
                label: spec.label.clone(),
                children: vec![node],
            };
        }
        node
    } else {
        TreeSpec {
            label: spec.label.clone(),
            children: spec
                .children
                .iter()
                .map(|c| normalize(c, height - 1))
                .collect(),
        }
    }
}

fn tree_height(spec: &TreeSpec) -> u32 {
    spec.children
        .iter()
        .map(|c| tree_height(c) + 1)
        .max()
        .unwrap_or(0)
}

fn max_children_per_level(spec: &TreeSpec, level: u32, acc: &mut Vec<usize>) {
    let idx = level as usize;
    if acc[idx] < spec.children.len() {
        acc[idx] = spec.children.len();
    }
    for c in &spec.children {
        max_children_per_level(c, level - 1, acc);
    }
}

/// Assigns integer codes to a hierarchy.
///
/// Leaves of one block sit `LEAF_PITCH` apart; subtrees at level l occupy
/// uniform cells and are separated by at least `max(gap, widest subtree)`,
/// with children centred in their parent cell. An internal node's code is
/// the floor midpoint of its descendant leaf codes. This keeps, at every
/// level, any intra-subtree leaf distance strictly below any cross-subtree
/// one, and makes the nearest level-l node of any leaf its true ancestor.
pub fn encode_hierarchy(spec: &TreeSpec, gap: i64) -> Result<Hierarchy> {
    if gap <= LEAF_PITCH {
        return Err(Error::Hierarchy(format!(
            "gap must exceed the leaf pitch {LEAF_PITCH}"
        )));
    }
    let height = tree_height(spec);
    let spec = normalize(spec, height);

    // Bottom-up cell widths.
    let mut widest = vec![0usize; height as usize + 1];
    if height > 0 {
        max_children_per_level(&spec, height, &mut widest);
    }
    let mut cell = vec![LEAF_PITCH];
    for level in 1..=height as usize {
        let packed = checked_mul(widest[level] as i64, cell[level - 1])?;
        let g = gap.max(packed);
        cell.push(checked_add(packed, g)?);
    }
    let layout = Layout { cell };

    // Top-down placement, bottom-up codes.
    let mut levels: Vec<Vec<HierarchyNode>> = vec![Vec::new(); height as usize + 1];
    place(&spec, height, 0, &layout, &mut levels)?;

    let mut leaf_by_label = HashMap::new();
    for (i, leaf) in levels[0].iter().enumerate() {
        if leaf_by_label.insert(leaf.label.clone(), i).is_some() {
            return Err(Error::Hierarchy(format!(
                "duplicate leaf label {:?}",
                leaf.label
            )));
        }
    }

    Ok(Hierarchy {
        gap,
        levels,
        leaf_by_label,
    })
}

/// Returns the placed node's (leaf range, leaf count).
fn place(
    spec: &TreeSpec,
    level: u32,
    base: i64,
    layout: &Layout,
    levels: &mut Vec<Vec<HierarchyNode>>,
) -> Result<(i64, i64, usize)> {
    if level == 0 {
        levels[0].push(HierarchyNode {
            label: spec.label.clone(),
            code: base,
            level: 0,
            leaf_range: (base, base),
            leaf_count: 1,
        });
        return Ok((base, base, 1));
    }
    let child_cell = layout.cell[level as usize - 1];
    let packed = checked_mul(spec.children.len() as i64, child_cell)?;
    // The root has no siblings; its children start at the base directly.
    let start = if level == (levels.len() - 1) as u32 {
        base
    } else {
        checked_add(base, (layout.cell[level as usize] - packed) / 2)?
    };
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    let mut count = 0usize;
    for (i, child) in spec.children.iter().enumerate() {
        let child_base = checked_add(start, checked_mul(i as i64, child_cell)?)?;
        let (clo, chi, cnt) = place(child, level - 1, child_base, layout, levels)?;
        lo = lo.min(clo);
        hi = hi.max(chi);
        count += cnt;
    }
    let code = lo + (hi - lo) / 2;
    levels[level as usize].push(HierarchyNode {
        label: spec.label.clone(),
        code,
        level,
        leaf_range: (lo, hi),
        leaf_count: count,
    });
    Ok((lo, hi, count))
}

pub fn load_hierarchy(path: &Path, gap: i64) -> Result<Hierarchy> {
    let text = std::fs::read_to_string(path)?;
    let spec: TreeSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Hierarchy(format!("{}: {e}", path.display())))?;
    encode_hierarchy(&spec, gap)
}

/// Reads a CSV with a header row matching the schema column names.
pub fn load_csv<R: Read>(
    reader: R,
    schema: &Schema,
    hierarchies: &HashMap<String, Hierarchy>,
) -> Result<PlainTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = rdr.headers().map_err(|e| Error::Parse {
            row: 0,
            col: String::new(),
            msg: e.to_string(),
        })?;
        let names: Vec<&str> = headers.iter().collect();
        let expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        if names != expected {
            return Err(Error::Parse {
                row: 0,
                col: String::new(),
                msg: format!("header {names:?} does not match schema {expected:?}"),
            });
        }
    }

    let mut token_maps: HashMap<usize, Vec<String>> = HashMap::new();
    let mut token_index: HashMap<usize, HashMap<String, i64>> = HashMap::new();
    for (i, col) in schema.columns.iter().enumerate() {
        if matches!(col.kind, ColumnKind::Tokenized) {
            token_maps.insert(i, Vec::new());
            token_index.insert(i, HashMap::new());
        }
    }

    let mut rows = Vec::new();
    for (row_no, record) in rdr.records().enumerate() {
        let row_no = row_no + 1;
        let record = record.map_err(|e| Error::Parse {
            row: row_no,
            col: String::new(),
            msg: e.to_string(),
        })?;
        if record.len() != schema.width() {
            return Err(Error::Parse {
                row: row_no,
                col: String::new(),
                msg: format!("expected {} fields, got {}", schema.width(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(schema.width());
        for (i, col) in schema.columns.iter().enumerate() {
            let raw = record.get(i).unwrap().trim();
            let value = match &col.kind {
                ColumnKind::Numeric => {
                    let x: f64 = raw.parse().map_err(|_| Error::Parse {
                        row: row_no,
                        col: col.name.clone(),
                        msg: format!("not a number: {raw:?}"),
                    })?;
                    round_numeric(x).map_err(|e| Error::Parse {
                        row: row_no,
                        col: col.name.clone(),
                        msg: e.to_string(),
                    })?
                }
                ColumnKind::Categorical { hierarchy } => {
                    let h = hierarchies.get(hierarchy).ok_or_else(|| {
                        Error::Hierarchy(format!("no hierarchy named {hierarchy:?} loaded"))
                    })?;
                    h.leaf_code(raw).ok_or_else(|| Error::UnknownCategory {
                        col: col.name.clone(),
                        value: raw.to_string(),
                    })?
                }
                ColumnKind::Tokenized => {
                    let index = token_index.get_mut(&i).unwrap();
                    match index.get(raw) {
                        Some(&v) => v,
                        None => {
                            let map = token_maps.get_mut(&i).unwrap();
                            let v = map.len() as i64;
                            map.push(raw.to_string());
                            index.insert(raw.to_string(), v);
                            v
                        }
                    }
                }
            };
            row.push(value);
        }
        rows.push(row);
    }

    Ok(PlainTable {
        schema: schema.clone(),
        rows,
        token_maps,
    })
}

/// Cell-wise encryption of an encoded table.
pub fn encrypt_table<S: SheScheme>(scheme: &S, pk: &PublicKey, table: &PlainTable) -> CipherTable {
    let rows = table
        .rows
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| scheme.enc(pk, &BigRational::from_integer(v.into())))
                .collect()
        })
        .collect();
    CipherTable {
        schema: table.schema.clone(),
        key_id: pk.key_id(),
        rows,
    }
}

/// Replacement values for one column, encrypted by the data owner.
#[derive(Debug, Clone)]
pub struct EncryptedDictionary {
    pub entries: Vec<Ciphertext>,
    pub declared_kind: String,
}

/// Appends re-randomized copies of existing entries (round robin) until the
/// dictionary holds at least `target_min` values. The plaintext multiset is
/// preserved up to duplication; every appended ciphertext carries a fresh
/// nonce.
pub fn pad_dictionary<S: SheScheme>(
    scheme: &S,
    pk: &PublicKey,
    dict: &mut EncryptedDictionary,
    target_min: usize,
) -> Result<()> {
    if dict.entries.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let zero = scheme.enc(pk, &BigRational::from_integer(0.into()));
    let mut src = 0usize;
    while dict.entries.len() < target_min {
        let fresh = scheme.add(pk, &dict.entries[src], &zero)?;
        dict.entries.push(fresh);
        src = (src + 1) % dict.entries.len();
    }
    Ok(())
}
