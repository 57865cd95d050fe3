//! Command-line front end: `vulmatch prep|diff|sign|match|eval|report`.
//!
//! Exit status is 0 on success, 1 on internal failure and 2 on bad input.
//! Data goes to files or standard output, diagnostics to standard error.
//! `VULMATCH_LOG` sets the log filter (`warn` by default).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::binmodel::{load_function_dir, BinaryFunction, FUNC_SCHEMA};
use crate::diffcore::{diff_sources, parse_unified_diff, PatchSite, SitesDocument};
use crate::evalharness::{evaluate, load_cases, render_report};
use crate::matcher::{rank_functions, MatchOptions, MatchReport, DEFAULT_PATCH_THRESHOLD, MATCH_SCHEMA};
use crate::sigdb::{CveRecord, DbError, SignatureDatabase, DB_SCHEMA};
use crate::siggen::generate_signatures;
use crate::source_prep::{prepare_source, PrepError};

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (formats: vulmatch-func/1, vulmatch-db/1, vulmatch-match/1)"
);

#[derive(Debug, Parser)]
#[command(name = "vulmatch", version = VERSION, about = "Source-guided binary vulnerability signatures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tag functions with the no-inline attribute before compiling.
    Prep(PrepArgs),
    /// Diff two source versions and classify the patch sites.
    Diff(DiffArgs),
    /// Build signatures for one function pair and append them to a database.
    Sign(SignArgs),
    /// Score query functions against a signature database.
    Match(MatchArgs),
    /// Compute top-1 and mismatch scores over evaluation cases.
    Eval(EvalArgs),
    /// Render the side-by-side report for a match result.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long)]
    pub source: PathBuf,
    /// Comma-separated function names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub functions: Vec<String>,
    #[arg(long, conflicts_with = "out")]
    pub in_place: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[arg(long, required_unless_present = "patch", requires = "new")]
    pub old: Option<PathBuf>,
    #[arg(long, requires = "old")]
    pub new: Option<PathBuf>,
    /// Read sites from an existing unified diff instead.
    #[arg(long, conflicts_with_all = ["old", "new"])]
    pub patch: Option<PathBuf>,
    #[arg(long)]
    pub emit_sites: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SignArgs {
    #[arg(long)]
    pub cve: String,
    #[arg(long)]
    pub func: String,
    #[arg(long)]
    pub vuln_bin: PathBuf,
    #[arg(long)]
    pub patched_bin: PathBuf,
    #[arg(long)]
    pub old_src: PathBuf,
    #[arg(long)]
    pub new_src: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    /// File label used in the line tables (defaults to the --old-src path).
    #[arg(long)]
    pub source_file: Option<String>,
    #[arg(long, default_value = "unknown")]
    pub project: String,
    /// Version label recorded as affected (defaults to the vulnerable binary id).
    #[arg(long)]
    pub affected_version: Option<String>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Directory of function documents.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub cve: Option<String>,
    #[arg(long, default_value_t = DEFAULT_PATCH_THRESHOLD)]
    pub patch_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Entries per ranking that keep full alignments.
    #[arg(long, default_value_t = 10)]
    pub detail_top: usize,
    /// Score on one thread.
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_PATCH_THRESHOLD)]
    pub patch_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub result: PathBuf,
    /// Text report; the JSON sidecar is written next to it with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cve: Option<String>,
    /// Ranked entries to include per (CVE, function) group.
    #[arg(long, default_value_t = 1)]
    pub top: usize,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or input files: exit 2.
    Input(String),
    /// Anything else: exit 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn db_error(e: DbError) -> CliError {
    match e {
        DbError::Io { .. } => CliError::Internal(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn read_text(p: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))
}

fn write_text(p: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(p, text).map_err(|e| CliError::Internal(format!("{}: {e}", p.display())))
}

fn check_threshold(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(input(format!("--{name} must be in (0, 1], got {v}")))
    }
}

pub fn run_prep(a: &PrepArgs) -> Result<(), CliError> {
    let text = read_text(&a.source)?;
    let names: Vec<&str> = a.functions.iter().map(String::as_str).collect();
    let tagged = prepare_source(&text, &names).map_err(|e: PrepError| input(e))?;
    for name in &tagged.already_tagged {
        warn!("{name} is already tagged");
    }
    match (&a.out, a.in_place) {
        (Some(out), _) => write_text(out, &tagged.text),
        (None, true) => write_text(&a.source, &tagged.text),
        (None, false) => {
            print!("{}", tagged.text);
            Ok(())
        }
    }
}

fn describe_sites(sites: &[PatchSite]) -> String {
    let range = |v: &[crate::diffcore::NumberedLine]| match (v.first(), v.last()) {
        (Some(a), Some(b)) => format!("{}-{}", a.line, b.line),
        _ => "-".to_owned(),
    };
    let mut s = String::new();
    for site in sites {
        let kind = format!("{:?}", site.kind).to_lowercase();
        let _ = writeln!(s, "{kind} old {} new {}", range(&site.old_lines), range(&site.new_lines));
        for l in &site.old_lines {
            let _ = writeln!(s, "-{:>5} {}", l.line, l.text);
        }
        for l in &site.new_lines {
            let _ = writeln!(s, "+{:>5} {}", l.line, l.text);
        }
    }
    s
}

pub fn run_diff(a: &DiffArgs) -> Result<(), CliError> {
    let sites = match (&a.patch, &a.old, &a.new) {
        (Some(p), _, _) => parse_unified_diff(&read_text(p)?).map_err(input)?.sites,
        (None, Some(o), Some(n)) => diff_sources(&read_text(o)?, &read_text(n)?).1,
        _ => return Err(input("give --old and --new, or --patch")),
    };
    if let Some(out) = &a.emit_sites {
        let doc = SitesDocument { sites: sites.clone() };
        let mut json = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Internal(e.to_string()))?;
        json.push('\n');
        write_text(out, &json)?;
    }
    print!("{}", describe_sites(&sites));
    Ok(())
}

pub fn run_sign(a: &SignArgs) -> Result<(), CliError> {
    let vuln = BinaryFunction::load_path(&a.vuln_bin).map_err(input)?;
    let patched = BinaryFunction::load_path(&a.patched_bin).map_err(input)?;
    if vuln.name != a.func {
        return Err(input(format!(
            "--func {} does not match the vulnerable function {}",
            a.func, vuln.name
        )));
    }
    let old = read_text(&a.old_src)?;
    let new = read_text(&a.new_src)?;
    let file = a
        .source_file
        .clone()
        .unwrap_or_else(|| a.old_src.display().to_string());
    let generated = generate_signatures(&vuln, &patched, &old, &new, &file, &a.cve).map_err(input)?;
    for d in &generated.diagnostics {
        warn!("{d}");
    }
    let mut db = SignatureDatabase::load_or_default(&a.db).map_err(db_error)?;
    db.upsert_record(CveRecord::single(
        &a.cve,
        &a.project,
        &file,
        &a.func,
        a.affected_version.as_deref().unwrap_or(&vuln.binary_id),
    ));
    let n = generated.signatures.len();
    db.add_signatures(generated.signatures).map_err(db_error)?;
    db.save(&a.db).map_err(db_error)?;
    info!("added {n} signature(s) for {} / {}", a.cve, a.func);
    Ok(())
}

pub fn run_match(a: &MatchArgs) -> Result<(), CliError> {
    check_threshold("patch-threshold", a.patch_threshold)?;
    let db = SignatureDatabase::load(&a.db).map_err(db_error)?;
    let queries = load_function_dir(&a.query).map_err(input)?;
    let opts = MatchOptions {
        patch_threshold: a.patch_threshold,
        cve: a.cve.clone(),
        parallel: !a.serial,
        detail_top: a.detail_top,
    };
    let report = rank_functions(&db, &queries, &opts).map_err(db_error)?;
    write_text(&a.out, &report.to_json())
}

pub fn run_eval(a: &EvalArgs) -> Result<(), CliError> {
    check_threshold("patch-threshold", a.patch_threshold)?;
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(input(format!("--alpha must be in (0, 1), got {}", a.alpha)));
    }
    let db = SignatureDatabase::load(&a.db).map_err(db_error)?;
    let cases = load_cases(&a.cases).map_err(input)?;
    let metrics = evaluate(&cases, &db, a.alpha, a.patch_threshold).map_err(input)?;
    let mut json = serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Internal(e.to_string()))?;
    json.push('\n');
    write_text(&a.out, &json)?;
    println!(
        "cases={} top1={:.3} mismatch={:.3} alpha={}",
        cases.len(),
        metrics.top1,
        metrics.mismatch,
        a.alpha
    );
    Ok(())
}

pub fn run_report(a: &ReportArgs) -> Result<(), CliError> {
    let report = MatchReport::from_json(&read_text(&a.result)?).map_err(input)?;
    let mut text = String::new();
    let mut sidecar = Vec::new();
    for r in &report.rankings {
        if a.cve.as_deref().is_some_and(|c| c != r.cve_id) {
            continue;
        }
        for e in r.entries.iter().take(a.top) {
            for res in &e.results {
                let sig = report
                    .signature_for(res)
                    .ok_or_else(|| input(format!("result refers to a signature missing from {}", a.result.display())))?;
                let rendered = render_report(res, sig);
                if !text.is_empty() {
                    text.push_str("\n----\n\n");
                }
                text.push_str(&rendered.text);
                sidecar.push(rendered.json);
            }
        }
    }
    if sidecar.is_empty() {
        return Err(input("nothing to report: no detailed results matched the selection"));
    }
    write_text(&a.out, &text)?;
    let mut json = serde_json::to_string_pretty(&sidecar).map_err(|e| CliError::Internal(e.to_string()))?;
    json.push('\n');
    write_text(&a.out.with_extension("json"), &json)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prep(a) => run_prep(a),
        Command::Diff(a) => run_diff(a),
        Command::Sign(a) => run_sign(a),
        Command::Match(a) => run_match(a),
        Command::Eval(a) => run_eval(a),
        Command::Report(a) => run_report(a),
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("VULMATCH_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Parse `argv` (program name first), run, and return the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("vulmatch: {e}");
            e.exit_code()
        }
    }
}

/// Schema identifiers of every file format the tool reads or writes.
pub fn schema_versions() -> [&'static str; 3] {
    [FUNC_SCHEMA, DB_SCHEMA, MATCH_SCHEMA]
}
