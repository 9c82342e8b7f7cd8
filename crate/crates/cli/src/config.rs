//! Versioned TOML configuration and its static checks. Every subcommand
//! loads the same file, so a config that validates once validates for the
//! whole workflow. Unknown keys are rejected everywhere.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use encanon::datamodel::{load_hierarchy, ColumnKind, ColumnSpec, Hierarchy, Schema};
use encanon::kanon::{AnonConfig, ReassignStrategy};
use encanon::masking::MaskRule;
use serde::Deserialize;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub input: InputSection,
    #[serde(rename = "column")]
    pub columns: Vec<ColumnSection>,
    #[serde(default, rename = "hierarchy")]
    pub hierarchies: HashMap<String, HierarchySection>,
    #[serde(default, rename = "dictionary")]
    pub dictionaries: HashMap<String, DictionarySection>,
    pub identify: IdentifySection,
    #[serde(default, rename = "mask")]
    pub masks: Vec<MaskSection>,
    #[serde(default, rename = "dp")]
    pub dp: Vec<DpSection>,
    pub anon: AnonSection,
    pub output: OutputSection,
    #[serde(default)]
    pub seeds: SeedsSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    pub data: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSection {
    pub name: String,
    /// numeric, tokenized or categorical.
    pub kind: String,
    /// Hierarchy name, required for categorical columns.
    #[serde(default)]
    pub hierarchy: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchySection {
    pub path: PathBuf,
    pub gap: i64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionarySection {
    pub path: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifySection {
    pub k: usize,
    pub max_combo: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub column: String,
    /// dictionary, shift, noise, random or redact.
    pub op: String,
    #[serde(default)]
    pub amount: Option<i64>,
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub bound: Option<i64>,
    #[serde(default)]
    pub lo: Option<i64>,
    #[serde(default)]
    pub hi: Option<i64>,
    #[serde(default)]
    pub value: Option<i64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub column: String,
    /// laplace or binary.
    pub mechanism: String,
    pub epsilon: f64,
    pub lower: i64,
    pub upper: i64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnonSection {
    pub k: usize,
    pub rounds: usize,
    pub suppression_threshold: f64,
    pub strategy: ReassignStrategy,
    pub quasi: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "default_true")]
    pub release_rounding: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub master: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection { master: 1 }
    }
}

/// Which noise mechanism a dp plan applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpMechanism {
    Laplace,
    Binary,
}

/// One dp plan resolved to a column index.
#[derive(Debug, Clone)]
pub struct DpPlan {
    pub column: usize,
    pub mechanism: DpMechanism,
    pub epsilon: f64,
    pub lower: i64,
    pub upper: i64,
}

/// A validated configuration with paths resolved, hierarchies loaded and
/// column names turned into indexes.
pub struct Loaded {
    pub cfg: PipelineConfig,
    pub schema: Schema,
    pub hierarchies: HashMap<String, Hierarchy>,
    pub data_path: PathBuf,
    pub dictionary_paths: HashMap<usize, PathBuf>,
    pub output_dir: PathBuf,
    pub quasi: Vec<usize>,
    pub masks: Vec<(usize, MaskRule)>,
    pub dp: Vec<DpPlan>,
}

impl Loaded {
    pub fn anon_config(&self) -> AnonConfig {
        AnonConfig {
            k: self.cfg.anon.k,
            rounds: self.cfg.anon.rounds,
            suppression_threshold: self.cfg.anon.suppression_threshold,
            strategy: self.cfg.anon.strategy,
            quasi_columns: self.quasi.clone(),
        }
    }

    pub fn column_name(&self, idx: usize) -> &str {
        &self.schema.columns[idx].name
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Resolves a config-relative path and checks the file exists.
fn resolve(base: &Path, p: &Path, what: &str) -> Result<PathBuf, CliError> {
    let full = if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    };
    if !full.is_file() {
        return Err(bad(format!("{what} {} does not exist", full.display())));
    }
    Ok(full)
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    let cfg: PipelineConfig =
        toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    if cfg.version != CONFIG_VERSION {
        return Err(bad(format!(
            "config version {} not supported, expected {CONFIG_VERSION}",
            cfg.version
        )));
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    validate(cfg, &base)
}

fn validate(cfg: PipelineConfig, base: &Path) -> Result<Loaded, CliError> {
    if cfg.columns.is_empty() {
        return Err(bad("no columns declared"));
    }

    // Schema: names unique, kinds known, categorical columns point at a
    // declared hierarchy.
    let mut seen = HashSet::new();
    let mut columns = Vec::with_capacity(cfg.columns.len());
    for c in &cfg.columns {
        if !seen.insert(c.name.clone()) {
            return Err(bad(format!("column {:?} declared twice", c.name)));
        }
        let kind = match c.kind.as_str() {
            "numeric" => {
                if c.hierarchy.is_some() {
                    return Err(bad(format!("column {:?}: numeric takes no hierarchy", c.name)));
                }
                ColumnKind::Numeric
            }
            "tokenized" => {
                if c.hierarchy.is_some() {
                    return Err(bad(format!(
                        "column {:?}: tokenized takes no hierarchy",
                        c.name
                    )));
                }
                ColumnKind::Tokenized
            }
            "categorical" => {
                let h = c.hierarchy.clone().ok_or_else(|| {
                    bad(format!("column {:?}: categorical needs a hierarchy", c.name))
                })?;
                if !cfg.hierarchies.contains_key(&h) {
                    return Err(bad(format!(
                        "column {:?} references undeclared hierarchy {h:?}",
                        c.name
                    )));
                }
                ColumnKind::Categorical { hierarchy: h }
            }
            other => {
                return Err(bad(format!("column {:?}: unknown kind {other:?}", c.name)));
            }
        };
        columns.push(ColumnSpec {
            name: c.name.clone(),
            kind,
        });
    }
    let schema = Schema { columns };
    let index_of = |name: &str| -> Result<usize, CliError> {
        schema
            .column_index(name)
            .ok_or_else(|| bad(format!("unknown column {name:?}")))
    };

    let data_path = resolve(base, &cfg.input.data, "input file")?;
    let mut hierarchies = HashMap::new();
    for (name, h) in &cfg.hierarchies {
        let p = resolve(base, &h.path, "hierarchy file")?;
        let loaded = load_hierarchy(&p, h.gap)
            .map_err(|e| bad(format!("hierarchy {name:?}: {e}")))?;
        hierarchies.insert(name.clone(), loaded);
    }
    let mut dictionary_paths = HashMap::new();
    for (name, d) in &cfg.dictionaries {
        let idx = index_of(name)?;
        dictionary_paths.insert(idx, resolve(base, &d.path, "dictionary file")?);
    }

    if cfg.identify.k == 0 {
        return Err(bad("identify.k must be at least 1"));
    }
    if cfg.identify.max_combo == 0 {
        return Err(bad("identify.max_combo must be at least 1"));
    }

    // Anonymization plan.
    if cfg.anon.quasi.is_empty() {
        return Err(bad("anon.quasi must name at least one column"));
    }
    let mut quasi = Vec::with_capacity(cfg.anon.quasi.len());
    for name in &cfg.anon.quasi {
        let idx = index_of(name)?;
        if quasi.contains(&idx) {
            return Err(bad(format!("anon.quasi lists {name:?} twice")));
        }
        if matches!(schema.columns[idx].kind, ColumnKind::Tokenized) {
            return Err(bad(format!(
                "anon.quasi column {name:?} is tokenized and cannot be generalized"
            )));
        }
        quasi.push(idx);
    }
    if cfg.anon.k == 0 {
        return Err(bad("anon.k must be at least 1"));
    }
    if cfg.anon.rounds == 0 {
        return Err(bad("anon.rounds must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.anon.suppression_threshold) {
        return Err(bad("anon.suppression_threshold must lie in [0, 1]"));
    }

    // Masking plans: one rule per column, parameters exactly matching the
    // operation.
    let mut masks = Vec::with_capacity(cfg.masks.len());
    for m in &cfg.masks {
        let idx = index_of(&m.column)?;
        if masks.iter().any(|(i, _)| *i == idx) {
            return Err(bad(format!("column {:?} masked twice", m.column)));
        }
        let rule = mask_rule(m)?;
        if matches!(rule, MaskRule::Dictionary) {
            if !dictionary_paths.contains_key(&idx) {
                return Err(bad(format!(
                    "mask on {:?} draws from a dictionary but none is declared",
                    m.column
                )));
            }
            if matches!(schema.columns[idx].kind, ColumnKind::Categorical { .. }) {
                return Err(bad(format!(
                    "dictionary mask on categorical column {:?} would leave its hierarchy",
                    m.column
                )));
            }
        }
        masks.push((idx, rule));
    }

    // Dp plans.
    let mut dp = Vec::with_capacity(cfg.dp.len());
    for d in &cfg.dp {
        let idx = index_of(&d.column)?;
        if dp.iter().any(|p: &DpPlan| p.column == idx) {
            return Err(bad(format!("column {:?} noised twice", d.column)));
        }
        if !matches!(schema.columns[idx].kind, ColumnKind::Numeric) {
            return Err(bad(format!("dp column {:?} must be numeric", d.column)));
        }
        let mechanism = match d.mechanism.as_str() {
            "laplace" => DpMechanism::Laplace,
            "binary" => DpMechanism::Binary,
            other => return Err(bad(format!("unknown dp mechanism {other:?}"))),
        };
        if !d.epsilon.is_finite() || d.epsilon < 0.0 {
            return Err(bad(format!("dp epsilon {} must be finite and >= 0", d.epsilon)));
        }
        if mechanism == DpMechanism::Laplace && d.epsilon == 0.0 {
            return Err(bad("laplace noise needs epsilon > 0"));
        }
        if d.lower > d.upper {
            return Err(bad(format!(
                "dp bounds on {:?} are empty: {} > {}",
                d.column, d.lower, d.upper
            )));
        }
        dp.push(DpPlan {
            column: idx,
            mechanism,
            epsilon: d.epsilon,
            lower: d.lower,
            upper: d.upper,
        });
    }

    // The three treatment sets must not overlap: a masked column is
    // fiction, a noised one is perturbed, a quasi one is generalized;
    // applying two treatments to one column silently undoes one of them.
    for (idx, _) in &masks {
        if quasi.contains(idx) {
            return Err(bad(format!(
                "column {:?} is both masked and a quasi-identifier",
                schema.columns[*idx].name
            )));
        }
    }
    for p in &dp {
        if quasi.contains(&p.column) {
            return Err(bad(format!(
                "column {:?} is both noised and a quasi-identifier",
                schema.columns[p.column].name
            )));
        }
        if masks.iter().any(|(i, _)| *i == p.column) {
            return Err(bad(format!(
                "column {:?} is both masked and noised",
                schema.columns[p.column].name
            )));
        }
    }

    let output_dir = if cfg.output.dir.is_absolute() {
        cfg.output.dir.clone()
    } else {
        base.join(&cfg.output.dir)
    };

    Ok(Loaded {
        cfg,
        schema,
        hierarchies,
        data_path,
        dictionary_paths,
        output_dir,
        quasi,
        masks,
        dp,
    })
}

fn mask_rule(m: &MaskSection) -> Result<MaskRule, CliError> {
    let mut allowed: HashSet<&str> = HashSet::new();
    let rule = match m.op.as_str() {
        "dictionary" => MaskRule::Dictionary,
        "shift" => {
            allowed.insert("amount");
            MaskRule::Shift {
                amount: m
                    .amount
                    .ok_or_else(|| bad(format!("mask shift on {:?} needs amount", m.column)))?,
            }
        }
        "noise" => {
            allowed.extend(["fraction", "bound"]);
            MaskRule::Noise {
                fraction: m.fraction.ok_or_else(|| {
                    bad(format!("mask noise on {:?} needs fraction", m.column))
                })?,
                bound: m
                    .bound
                    .ok_or_else(|| bad(format!("mask noise on {:?} needs bound", m.column)))?,
            }
        }
        "random" => {
            allowed.extend(["lo", "hi"]);
            MaskRule::Random {
                lo: m
                    .lo
                    .ok_or_else(|| bad(format!("mask random on {:?} needs lo", m.column)))?,
                hi: m
                    .hi
                    .ok_or_else(|| bad(format!("mask random on {:?} needs hi", m.column)))?,
            }
        }
        "redact" => {
            allowed.insert("value");
            MaskRule::Redact {
                value: m
                    .value
                    .ok_or_else(|| bad(format!("mask redact on {:?} needs value", m.column)))?,
            }
        }
        other => return Err(bad(format!("unknown mask op {other:?}"))),
    };
    let stray = [
        ("amount", m.amount.is_some()),
        ("fraction", m.fraction.is_some()),
        ("bound", m.bound.is_some()),
        ("lo", m.lo.is_some()),
        ("hi", m.hi.is_some()),
        ("value", m.value.is_some()),
    ]
    .into_iter()
    .find(|(name, set)| *set && !allowed.contains(name));
    if let Some((name, _)) = stray {
        return Err(bad(format!(
            "mask {} on {:?} does not take {name}",
            m.op, m.column
        )));
    }
    Ok(rule)
}
