//! Command-line front end: one subcommand per workflow phase plus
//! `pipeline`, which chains them all in a single process. Artifacts land in
//! the config's output directory unless overridden, so the default calls
//! chain without any path plumbing.

mod artifacts;
mod config;
mod phases;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use encanon::kanon::ReassignStrategy;
use encanon::masking::MaskRule;

use artifacts::{
    cipher_from_hex, cipher_hex, from_table_file, read_json, to_table_file, write_json,
    BundleFile, KeyFile, TableFile, ARTIFACT_VERSION,
};
use config::{DpMechanism, Loaded};
use phases::Seeds;

const KEYS_NAME: &str = "keys.json";
const TABLE_NAME: &str = "table.etb.json";
const SCAN_NAME: &str = "scan.json";
const BUNDLE_NAME: &str = "bundle.json";
const RELEASE_NAME: &str = "anonymized.csv";
const METRICS_NAME: &str = "metrics.json";

/// Failure classes with fixed exit codes: bad configuration or inputs exit
/// 2, protocol failures (including a dirty leakage audit) exit 3 and an
/// unsatisfiable anonymity constraint exits 4.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Protocol(String),
    Unsatisfiable(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Protocol(_) => 3,
            CliError::Unsatisfiable(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Protocol(m) | CliError::Unsatisfiable(m) => m,
        }
    }
}

impl From<encanon::Error> for CliError {
    fn from(e: encanon::Error) -> Self {
        match e {
            encanon::Error::Unsatisfiable { .. } => CliError::Unsatisfiable(e.to_string()),
            other => CliError::Protocol(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "encanon",
    version,
    about = "Privacy-preserving release of encrypted tables"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed override; defaults to seeds.master from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the key pair and nonce seed for a run.
    Keygen {
        #[command(flatten)]
        common: Common,
        /// Key file path, defaults to keys.json in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encrypt the input table cell by cell.
    Encrypt {
        #[command(flatten)]
        common: Common,
        /// Key file, defaults to keys.json in the output directory.
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Table file path, defaults to table.etb.json in the output
        /// directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find direct identifiers and minimal quasi-identifier sets.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Encrypted table to scan, defaults to table.etb.json.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Scan file path, defaults to scan.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the session transcript as JSONL.
        #[arg(long)]
        dump_transcript: Option<PathBuf>,
    },
    /// Apply the configured masking rules to the encrypted table.
    Mask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Table to update, defaults to table.etb.json.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Output path, defaults to the input table path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply the configured noise mechanisms to the encrypted table.
    Dp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Table to update, defaults to table.etb.json.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Output path, defaults to the input table path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster and generalize the quasi columns under the k constraint.
    Anonymize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Table to anonymize, defaults to table.etb.json.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Bundle path, defaults to bundle.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the session transcript as JSONL.
        #[arg(long)]
        dump_transcript: Option<PathBuf>,
    },
    /// Decrypt a bundle, drop suppressed rows and write the release CSV.
    Finalize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Bundle to decrypt, defaults to bundle.json.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Release path, defaults to anonymized.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Utility and risk metrics of a release bundle.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Bundle to score, defaults to bundle.json.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Report path, defaults to metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every phase in order inside one process.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Print the plan and write nothing.
        #[arg(long)]
        dry_run: bool,
        /// Also write both session transcripts as JSONL.
        #[arg(long)]
        dump_transcript: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn setup(common: &Common) -> Result<(Loaded, Seeds), CliError> {
    let loaded = config::load(&common.config)?;
    let master = common.seed.unwrap_or(loaded.cfg.seeds.master);
    let seeds = phases::derive_seeds(master);
    Ok((loaded, seeds))
}

fn artifact_path(loaded: &Loaded, explicit: Option<&PathBuf>, name: &str) -> PathBuf {
    explicit
        .cloned()
        .unwrap_or_else(|| loaded.output_dir.join(name))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                CliError::Protocol(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    Ok(())
}

fn write_artifact<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    write_json(path, value)
}

fn load_key_file(loaded: &Loaded, explicit: Option<&PathBuf>) -> Result<KeyFile, CliError> {
    read_json(&artifact_path(loaded, explicit, KEYS_NAME), ARTIFACT_VERSION)
}

fn load_table(
    loaded: &Loaded,
    explicit: Option<&PathBuf>,
) -> Result<(PathBuf, encanon::datamodel::CipherTable, HashMap<usize, Vec<String>>), CliError> {
    let path = artifact_path(loaded, explicit, TABLE_NAME);
    let file: TableFile = read_json(&path, ARTIFACT_VERSION)?;
    if file.schema != loaded.schema {
        return Err(CliError::Config(format!(
            "{} was built for a different schema",
            path.display()
        )));
    }
    let (table, maps) = from_table_file(&file)?;
    Ok((path, table, maps))
}

fn load_bundle(
    loaded: &Loaded,
    explicit: Option<&PathBuf>,
) -> Result<
    (
        encanon::datamodel::CipherTable,
        HashMap<usize, Vec<String>>,
        Vec<encanon::she::Ciphertext>,
        artifacts::RunReport,
    ),
    CliError,
> {
    let path = artifact_path(loaded, explicit, BUNDLE_NAME);
    let file: BundleFile = read_json(&path, ARTIFACT_VERSION)?;
    if file.table.schema != loaded.schema {
        return Err(CliError::Config(format!(
            "{} was built for a different schema",
            path.display()
        )));
    }
    let (table, maps) = from_table_file(&file.table)?;
    let flags = file
        .drop_flags
        .iter()
        .map(|s| cipher_from_hex(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((table, maps, flags, file.report))
}

fn print_scan(scan: &artifacts::ScanFile) {
    let list = |v: &[String]| {
        if v.is_empty() {
            "none".to_string()
        } else {
            v.join(", ")
        }
    };
    println!("direct identifiers: {}", list(&scan.direct));
    if scan.minimal_quasi.is_empty() {
        println!("minimal quasi-identifier sets: none");
    } else {
        for set in &scan.minimal_quasi {
            println!("minimal quasi-identifier set: ({})", set.join(", "));
        }
    }
    println!(
        "lattice: {} of {} sets evaluated, {} pruned",
        scan.lattice_evaluated, scan.lattice_total, scan.lattice_pruned
    );
}

fn strategy_name(s: ReassignStrategy) -> &'static str {
    match s {
        ReassignStrategy::ClusterToCluster => "cluster_to_cluster",
        ReassignStrategy::PointToCluster => "point_to_cluster",
        ReassignStrategy::PointToPoint => "point_to_point",
    }
}

fn describe_rule(rule: &MaskRule) -> String {
    match rule {
        MaskRule::Dictionary => "dictionary".to_string(),
        MaskRule::Shift { amount } => format!("shift by {amount}"),
        MaskRule::Noise { fraction, bound } => {
            format!("noise fraction {fraction} bounded by {bound}")
        }
        MaskRule::Random { lo, hi } => format!("random in [{lo}, {hi}]"),
        MaskRule::Redact { value } => format!("redact to {value}"),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Keygen { common, out } => {
            let (loaded, seeds) = setup(common)?;
            let (_, keys) = phases::keygen(&seeds);
            let path = artifact_path(&loaded, out.as_ref(), KEYS_NAME);
            write_artifact(&path, &phases::key_file(&seeds, &keys))?;
            println!("keys -> {}", path.display());
            Ok(())
        }
        Cmd::Encrypt { common, keys, out } => {
            let (loaded, _) = setup(common)?;
            let key_file = load_key_file(&loaded, keys.as_ref())?;
            let (scheme, keys) = phases::reopen(&key_file);
            let plain = phases::load_input(&loaded)?;
            let table = phases::encrypt(&scheme, &keys, &plain);
            let path = artifact_path(&loaded, out.as_ref(), TABLE_NAME);
            write_artifact(&path, &to_table_file(&table, &plain.token_maps))?;
            println!(
                "encrypted {} rows x {} columns -> {}",
                table.n_rows(),
                loaded.schema.width(),
                path.display()
            );
            Ok(())
        }
        Cmd::Detect {
            common,
            keys,
            table,
            out,
            dump_transcript,
        } => {
            let (loaded, seeds) = setup(common)?;
            let key_file = load_key_file(&loaded, keys.as_ref())?;
            let (scheme, keys) = phases::reopen(&key_file);
            let (_, table, _) = load_table(&loaded, table.as_ref())?;
            phases::check_key(&table, &keys)?;
            let plain = phases::load_input(&loaded)?;
            let det = phases::detect(&scheme, &keys, &table, &plain, &loaded, &seeds)?;
            let scan = phases::scan_file(&det.scan, &loaded);
            print_scan(&scan);
            let uncovered = phases::uncovered_direct(&det.scan, &loaded);
            if !uncovered.is_empty() {
                println!(
                    "warning: direct identifier(s) without any treatment: {}",
                    uncovered.join(", ")
                );
            }
            let path = artifact_path(&loaded, out.as_ref(), SCAN_NAME);
            write_artifact(&path, &scan)?;
            println!("scan -> {}", path.display());
            if let Some(tp) = dump_transcript {
                ensure_parent(tp)?;
                phases::write_transcripts(tp, &[&det.transcript])?;
                println!("transcript -> {}", tp.display());
            }
            Ok(())
        }
        Cmd::Mask {
            common,
            keys,
            table,
            out,
        } => {
            let (loaded, seeds) = setup(common)?;
            let key_file = load_key_file(&loaded, keys.as_ref())?;
            let (scheme, keys) = phases::reopen(&key_file);
            let (in_path, mut table, mut maps) = load_table(&loaded, table.as_ref())?;
            phases::check_key(&table, &keys)?;
            phases::mask(&scheme, &keys, &mut table, &mut maps, &loaded, seeds.mask)?;
            let path = out.clone().unwrap_or(in_path);
            write_artifact(&path, &to_table_file(&table, &maps))?;
            println!("masked {} column(s) -> {}", loaded.masks.len(), path.display());
            Ok(())
        }
        Cmd::Dp {
            common,
            keys,
            table,
            out,
        } => {
            let (loaded, seeds) = setup(common)?;
            let key_file = load_key_file(&loaded, keys.as_ref())?;
            let (scheme, keys) = phases::reopen(&key_file);
            let (in_path, mut table, maps) = load_table(&loaded, table.as_ref())?;
            phases::check_key(&table, &keys)?;
            phases::dp(&scheme, &keys, &mut table, &loaded, seeds.dp)?;
            let path = out.clone().unwrap_or(in_path);
            write_artifact(&path, &to_table_file(&table, &maps))?;
            println!("noised {} column(s) -> {}", loaded.dp.len(), path.display());
            Ok(())
        }
        Cmd::Anonymize {
            common,
            keys,
            table,
            out,
            dump_transcript,
        } => {
            let (loaded, seeds) = setup(common)?;
            let key_file = load_key_file(&loaded, keys.as_ref())?;
            let (scheme, keys) = phases::reopen(&key_file);
            let (_, table, maps) = load_table(&loaded, table.as_ref())?;
            phases::check_key(&table, &keys)?;
            let plain = phases::load_input(&loaded)?;
            let anon = phases::anonymize(&scheme, &keys, &table, &plain, &loaded, &seeds)?;
            let report = &anon.outcome.report;
            println!(
                "clusters: {} released, {} merge(s), {} repair(s), {} row(s) suppressed",
                report.final_cluster_sizes.len(),
                report.merges.len(),
                report.repairs,
                report.suppressed_rows
            );
            let bundle = BundleFile {
                version: ARTIFACT_VERSION,
                table: to_table_file(&anon.outcome.table, &maps),
                drop_flags: anon.outcome.drop_flags.iter().map(cipher_hex).collect(),
                report: report.into(),
            };
            let path = artifact_path(&loaded, out.as_ref(), BUNDLE_NAME);
            write_artifact(&path, &bundle)?;
            println!("bundle -> {}", path.display());
            if let Some(tp) = dump_transcript {
                ensure_parent(tp)?;
                phases::write_transcripts(tp, &[&anon.transcript])?;
                println!("transcript -> {}", tp.display());
            }
            Ok(())
        }
        Cmd::Finalize {
            common,
            keys,
            bundle,
            out,
        } => {
            let (loaded, _) = setup(common)?;
            let key_file = load_key_file(&loaded, keys.as_ref())?;
            let (scheme, keys) = phases::reopen(&key_file);
            let (table, maps, flags, _) = load_bundle(&loaded, bundle.as_ref())?;
            let release = phases::decrypt_release(&scheme, &keys, &table, &flags)?;
            let path = artifact_path(&loaded, out.as_ref(), RELEASE_NAME);
            ensure_parent(&path)?;
            phases::write_release_csv(&path, &release, &maps, &loaded)?;
            let kept = release.dropped.iter().filter(|&&d| !d).count();
            println!(
                "released {kept} of {} rows -> {}",
                release.dropped.len(),
                path.display()
            );
            Ok(())
        }
        Cmd::Metrics {
            common,
            keys,
            bundle,
            out,
        } => {
            let (loaded, _) = setup(common)?;
            let key_file = load_key_file(&loaded, keys.as_ref())?;
            let (scheme, keys) = phases::reopen(&key_file);
            let (table, _, flags, _) = load_bundle(&loaded, bundle.as_ref())?;
            let release = phases::decrypt_release(&scheme, &keys, &table, &flags)?;
            let plain = phases::load_input(&loaded)?;
            let report = phases::compute_metrics(&release, Some(&plain), &loaded)?;
            println!(
                "classes: {}, min size {}, re-identification risk {}",
                report.class_count, report.min_class_size, report.reid_risk.value
            );
            let path = artifact_path(&loaded, out.as_ref(), METRICS_NAME);
            write_artifact(&path, &report)?;
            println!("metrics -> {}", path.display());
            Ok(())
        }
        Cmd::Pipeline {
            common,
            dry_run,
            dump_transcript,
        } => pipeline(common, *dry_run, dump_transcript.as_ref()),
    }
}

fn print_plan(loaded: &Loaded, master: u64) {
    println!("plan (dry run, nothing written):");
    println!("  keygen     master seed {master}");
    println!(
        "  encrypt    {} ({} columns)",
        loaded.data_path.display(),
        loaded.schema.width()
    );
    println!(
        "  detect     k={}, column sets up to {}",
        loaded.cfg.identify.k, loaded.cfg.identify.max_combo
    );
    if loaded.masks.is_empty() {
        println!("  mask       (no rules)");
    }
    for (idx, rule) in &loaded.masks {
        println!(
            "  mask       {}: {}",
            loaded.column_name(*idx),
            describe_rule(rule)
        );
    }
    if loaded.dp.is_empty() {
        println!("  dp         (no rules)");
    }
    for plan in &loaded.dp {
        let mech = match plan.mechanism {
            DpMechanism::Laplace => "laplace",
            DpMechanism::Binary => "binary",
        };
        println!(
            "  dp         {}: {mech} epsilon {} on [{}, {}]",
            loaded.column_name(plan.column),
            plan.epsilon,
            plan.lower,
            plan.upper
        );
    }
    let quasi: Vec<&str> = loaded.quasi.iter().map(|&i| loaded.column_name(i)).collect();
    println!(
        "  anonymize  k={} {}, quasi: {}",
        loaded.cfg.anon.k,
        strategy_name(loaded.cfg.anon.strategy),
        quasi.join(", ")
    );
    println!(
        "  finalize   -> {} ({})",
        loaded.output_dir.join(RELEASE_NAME).display(),
        if loaded.cfg.output.release_rounding {
            "rounded"
        } else {
            "exact"
        }
    );
    println!(
        "  metrics    -> {}",
        loaded.output_dir.join(METRICS_NAME).display()
    );
}

fn pipeline(
    common: &Common,
    dry_run: bool,
    dump_transcript: Option<&PathBuf>,
) -> Result<(), CliError> {
    let (loaded, seeds) = setup(common)?;
    let master = common.seed.unwrap_or(loaded.cfg.seeds.master);
    if dry_run {
        print_plan(&loaded, master);
        return Ok(());
    }

    let dir = &loaded.output_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Protocol(format!("cannot create {}: {e}", dir.display())))?;

    let (scheme, keys) = phases::keygen(&seeds);
    let keys_path = dir.join(KEYS_NAME);
    write_json(&keys_path, &phases::key_file(&seeds, &keys))?;
    println!("keys -> {}", keys_path.display());

    let plain = phases::load_input(&loaded)?;
    let mut table = phases::encrypt(&scheme, &keys, &plain);
    let mut maps = plain.token_maps.clone();

    let det = phases::detect(&scheme, &keys, &table, &plain, &loaded, &seeds)?;
    let scan = phases::scan_file(&det.scan, &loaded);
    print_scan(&scan);
    let scan_path = dir.join(SCAN_NAME);
    write_json(&scan_path, &scan)?;
    println!("scan -> {}", scan_path.display());
    let uncovered = phases::uncovered_direct(&det.scan, &loaded);
    if !uncovered.is_empty() {
        return Err(CliError::Protocol(format!(
            "direct identifier(s) without any treatment: {}",
            uncovered.join(", ")
        )));
    }

    phases::mask(&scheme, &keys, &mut table, &mut maps, &loaded, seeds.mask)?;
    phases::dp(&scheme, &keys, &mut table, &loaded, seeds.dp)?;

    let anon = phases::anonymize(&scheme, &keys, &table, &plain, &loaded, &seeds)?;
    let report = &anon.outcome.report;
    println!(
        "clusters: {} released, {} merge(s), {} repair(s), {} row(s) suppressed",
        report.final_cluster_sizes.len(),
        report.merges.len(),
        report.repairs,
        report.suppressed_rows
    );
    let bundle = BundleFile {
        version: ARTIFACT_VERSION,
        table: to_table_file(&anon.outcome.table, &maps),
        drop_flags: anon.outcome.drop_flags.iter().map(cipher_hex).collect(),
        report: report.into(),
    };
    let bundle_path = dir.join(BUNDLE_NAME);
    write_json(&bundle_path, &bundle)?;
    println!("bundle -> {}", bundle_path.display());

    let release = phases::decrypt_release(&scheme, &keys, &anon.outcome.table, &anon.outcome.drop_flags)?;
    let release_path = dir.join(RELEASE_NAME);
    phases::write_release_csv(&release_path, &release, &maps, &loaded)?;
    let kept = release.dropped.iter().filter(|&&d| !d).count();
    println!(
        "release -> {} ({kept} of {} rows)",
        release_path.display(),
        release.dropped.len()
    );

    let metrics = phases::compute_metrics(&release, Some(&plain), &loaded)?;
    let metrics_path = dir.join(METRICS_NAME);
    write_json(&metrics_path, &metrics)?;
    println!(
        "metrics -> {} (min class {}, risk {})",
        metrics_path.display(),
        metrics.min_class_size,
        metrics.reid_risk.value
    );

    if let Some(tp) = dump_transcript {
        ensure_parent(tp)?;
        phases::write_transcripts(tp, &[&det.transcript, &anon.transcript])?;
        println!("transcript -> {}", tp.display());
    }
    Ok(())
}
