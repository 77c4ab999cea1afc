//! Command surface shared by the `surro` binary and by library users who
//! want file-in, file-out runs: long-format CSV ingestion, flat key-value
//! settings, result emission and run manifests.
//!
//! Panel CSV header: `subject_id,time,arm,outcome,surrogate[,x_<name>...]`.
//! Empty outcome/surrogate cells are missing. Covariates must be constant
//! within a subject.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bootstrap::{self, percentile_interval, validity_test, BootstrapConfig};
use crate::comparators::{self, BenchMethod, BenchmarkConfig};
use crate::design::{
    self, BasisKind, ConditionalConfig, DiscountConfig, EffectGroup, ModelOptions, Panel, Subject, SubjectSeries,
    SurrogateBasis,
};
use crate::dlm_core;
use crate::error::{Error, Result};
use crate::estimators::{self, PteConfig};
use crate::homogeneity::{self, MsdConfig, TauMode};
use crate::simgen::{self, GammaReading, GenConfig, TrajectoryKind};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEED_ENV: &str = "SURRO_SEED";

pub const COMMANDS: [&str; 7] = ["simulate", "fit", "pte", "bootstrap", "test-homogeneity", "lag-sweep", "benchmark"];

/// Exit code for a failure class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numerical(_) => 4,
    }
}

/// `surro: error[<kind>]: <message>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = match e {
        Error::Config(m) | Error::Data(m) | Error::Numerical(m) | Error::Io(m) => m,
    };
    format!("surro: error[{}]: {}", e.kind(), msg.replace(['\n', '\r'], " "))
}

// ---------------------------------------------------------------- panels

#[derive(Debug, Deserialize)]
struct RawRow {
    subject_id: String,
    time: String,
    arm: String,
    outcome: String,
    surrogate: String,
}

pub fn ingest_csv(path: &Path) -> Result<Panel> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    ingest_reader(f)
}

fn parse_cell(s: &str, line: usize, col: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| Error::data(format!("row {line}, column {col}: '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data(format!("row {line}, column {col}: non-finite value")));
    }
    Ok(Some(v))
}

/// Rows are numbered from 1 for the header, so the first record is row 2.
pub fn ingest_reader<R: Read>(reader: R) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::data(format!("header: {e}")))?.clone();
    for need in ["subject_id", "time", "arm", "outcome", "surrogate"] {
        if !headers.iter().any(|h| h == need) {
            return Err(Error::data(format!("header lacks required column '{need}'")));
        }
    }
    let cov_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(j, h)| h.strip_prefix("x_").map(|n| (j, n.to_string())))
        .collect();
    for (j, h) in headers.iter().enumerate() {
        let known = ["subject_id", "time", "arm", "outcome", "surrogate"].contains(&h) || h.starts_with("x_");
        if !known {
            return Err(Error::data(format!("column {} '{h}' is not part of the schema", j + 1)));
        }
    }
    struct Acc {
        arm: u8,
        cov: Vec<f64>,
        cells: BTreeMap<usize, (Option<f64>, Option<f64>)>,
    }
    let mut subjects: HashMap<String, Acc> = HashMap::new();
    let mut t_max = 0usize;
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::data(format!("row {line}: {e}")))?;
        let raw: RawRow = rec.deserialize(Some(&headers)).map_err(|e| Error::data(format!("row {line}: {e}")))?;
        if raw.subject_id.is_empty() {
            return Err(Error::data(format!("row {line}, column subject_id: empty id")));
        }
        let t: usize =
            raw.time.parse().map_err(|_| Error::data(format!("row {line}, column time: '{}' is not an integer >= 0", raw.time)))?;
        let arm: u8 = match raw.arm.as_str() {
            "0" => 0,
            "1" => 1,
            a => return Err(Error::data(format!("row {line}, column arm: '{a}' is not 0 or 1"))),
        };
        let y = parse_cell(&raw.outcome, line, "outcome")?;
        let s = parse_cell(&raw.surrogate, line, "surrogate")?;
        let cov: Vec<f64> = cov_cols
            .iter()
            .map(|(j, n)| {
                parse_cell(rec.get(*j).unwrap_or(""), line, &format!("x_{n}"))?
                    .ok_or_else(|| Error::data(format!("row {line}, column x_{n}: covariates cannot be missing")))
            })
            .collect::<Result<_>>()?;
        let acc = subjects.entry(raw.subject_id.clone()).or_insert_with(|| Acc { arm, cov: cov.clone(), cells: BTreeMap::new() });
        if acc.arm != arm {
            return Err(Error::data(format!("row {line}: subject '{}' changes arm", raw.subject_id)));
        }
        if acc.cov != cov {
            return Err(Error::data(format!("row {line}: covariates of subject '{}' vary over time", raw.subject_id)));
        }
        if acc.cells.insert(t, (y, s)).is_some() {
            return Err(Error::data(format!("row {line}: duplicate (subject '{}', time {t})", raw.subject_id)));
        }
        t_max = t_max.max(t);
    }
    if subjects.is_empty() {
        return Err(Error::data("panel file has no rows"));
    }
    let n_times = t_max + 1;
    let series = subjects
        .into_iter()
        .map(|(id, acc)| {
            let mut outcome = vec![None; n_times];
            let mut surrogate = vec![None; n_times];
            for (t, (y, s)) in acc.cells {
                outcome[t] = y;
                surrogate[t] = s;
            }
            SubjectSeries { subject: Subject { id, arm: acc.arm, covariates: acc.cov }, outcome, surrogate }
        })
        .collect();
    Panel::new(cov_cols.into_iter().map(|c| c.1).collect(), n_times, series)
}

/// Long-format CSV, one row per subject and time; fully missing cells are
/// still written so the grid is explicit.
pub fn panel_table(panel: &Panel) -> Table {
    let mut columns: Vec<String> = ["subject_id", "time", "arm", "outcome", "surrogate"].map(String::from).to_vec();
    columns.extend(panel.covariate_names().iter().map(|n| format!("x_{n}")));
    let mut rows = Vec::new();
    for i in 0..panel.n_subjects() {
        let s = panel.subject(i);
        for t in 0..panel.n_times() {
            let mut r = vec![s.id.clone(), t.to_string(), s.arm.to_string(), opt(panel.outcome(i, t)), opt(panel.surrogate(i, t))];
            r.extend(s.covariates.iter().map(|c| num(*c)));
            rows.push(r);
        }
    }
    Table { columns, rows }
}

pub fn write_panel_csv(panel: &Panel, path: &Path) -> Result<()> {
    write_csv(&panel_table(panel), path)
}

// ---------------------------------------------------------------- output

/// 17 significant digits; empty for NaN and infinities.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn flag(b: bool) -> String {
    (if b { "1" } else { "0" }).to_string()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

/// A command's result: a JSON body and its plot-ready table.
#[derive(Debug, Clone)]
pub struct Results {
    pub command: String,
    pub seed: Option<u64>,
    pub body: Value,
    pub table: Table,
}

impl Results {
    /// Versioned envelope; the manifest is referenced, not embedded, so the
    /// file is byte-identical across reruns.
    pub fn envelope(&self) -> Value {
        json!({
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "seed": self.seed,
            "manifest": MANIFEST_FILE,
            "result": self.body,
        })
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(format!("{}: {e}", path.display()))
}

fn write_json(v: &Value, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::numerical(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

fn write_csv(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(&table.columns).map_err(|e| io_err(path, e))?;
    for r in &table.rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn emit_results(results: &Results, format: Format, path: &Path) -> Result<()> {
    match format {
        Format::Json => write_json(&results.envelope(), path),
        Format::Csv => write_csv(&results.table, path),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::numerical(e.to_string()))
}

// ---------------------------------------------------------------- settings

/// Flat key-value settings. Keys are the long flag names without dashes
/// prefix (`max-lag`, `b`, ...). Files hold `key = value` lines; `#` starts
/// a comment.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Settings(pub BTreeMap<String, String>);

impl Settings {
    pub fn parse(text: &str) -> Result<Settings> {
        let mut m = BTreeMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key = value", k + 1)))?;
            m.insert(key.trim().trim_start_matches("--").to_string(), val.trim().to_string());
        }
        Ok(Settings(m))
    }

    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Settings::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    /// `self` overridden by `flags`.
    pub fn merged(&self, flags: &Settings) -> Settings {
        let mut m = self.0.clone();
        m.extend(flags.0.clone());
        Settings(m)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::config(format!("--{key}: cannot parse '{v}'"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.0.get(key).map(|s| s.as_str()) {
            None | Some("false") | Some("0") | Some("no") => Ok(false),
            Some("true") | Some("1") | Some("yes") | Some("") => Ok(true),
            Some(v) => Err(Error::config(format!("--{key}: expected true or false, got '{v}'"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| Error::config(format!("--{key}: cannot parse '{p}'"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::config(format!("--{key} is required")))
    }

    /// Explicit `seed`, else the SURRO_SEED environment variable, else 1.
    pub fn seed(&self) -> Result<u64> {
        if let Some(s) = self.get::<u64>("seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| Error::config(format!("{SEED_ENV}: cannot parse '{v}'"))),
            Err(_) => Ok(1),
        }
    }
}

fn parse_enum<T>(key: &str, v: &str, table: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    table.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        Error::config(format!("--{key}: '{v}' is not one of {}", names.join(", ")))
    })
}

const TRAJECTORIES: [(&str, TrajectoryKind); 7] = [
    ("monotone", TrajectoryKind::Monotone),
    ("parabola", TrajectoryKind::Parabola),
    ("random-walk", TrajectoryKind::RandomWalk),
    ("seasonal", TrajectoryKind::Seasonal),
    ("step", TrajectoryKind::Step),
    ("quadratic", TrajectoryKind::Quadratic),
    ("constant", TrajectoryKind::Constant),
];

fn trajectory(s: &Settings, key: &str, default: TrajectoryKind) -> Result<TrajectoryKind> {
    match s.0.get(key) {
        None => Ok(default),
        Some(v) => parse_enum(key, v, &TRAJECTORIES),
    }
}

/// Model configuration shared by fit, pte, bootstrap, test-homogeneity and lag-sweep.
pub fn pte_config(s: &Settings) -> Result<PteConfig> {
    let kind = match s.list::<f64>("bins")? {
        Some(edges) if !edges.is_empty() => BasisKind::Bins { edges },
        _ => BasisKind::Linear,
    };
    let conditional = ConditionalConfig {
        max_lag: s.get_or("max-lag", 0)?,
        basis: SurrogateBasis { kind, per_arm: s.flag("per-arm")? },
        covariates: s.list::<String>("covariates")?.unwrap_or_default(),
    };
    let mut discounts = DiscountConfig { shared: s.get_or("discount", 0.95)?, subject: s.get_or("subject-discount", 0.95)?, ..Default::default() };
    for (key, g) in [
        ("discount-intercept", EffectGroup::Intercept),
        ("discount-treatment", EffectGroup::Treatment),
        ("discount-surrogate", EffectGroup::Surrogate),
    ] {
        if let Some(d) = s.get::<f64>(key)? {
            discounts.overrides.insert(g, d);
        }
    }
    let mut options = ModelOptions::with_discounts(discounts);
    if let Some(k) = s.get::<f64>("kappa")? {
        options.kappa = k;
    }
    options.validate()?;
    Ok(PteConfig { conditional, options })
}

fn boot_config(s: &Settings, seed: u64, default_b: usize) -> Result<BootstrapConfig> {
    Ok(BootstrapConfig {
        replicates: s.get_or("b", default_b)?,
        level: s.get_or("level", 0.95)?,
        seed,
        stratified: !s.flag("unstratified")?,
    })
}

/// Generator configuration for `simulate` and `benchmark`.
pub fn gen_config(s: &Settings, seed: u64) -> Result<GenConfig> {
    let years: f64 = s.get_or("years", 1.0)?;
    let t_max = match s.get::<usize>("t")? {
        Some(t) => t,
        None => {
            let steps = years * simgen::STEPS_PER_YEAR as f64;
            if !(steps >= 1.0) || (steps - steps.round()).abs() > 1e-9 {
                return Err(Error::config(format!("--years {years} is not a positive whole number of quarters")));
            }
            steps.round() as usize
        }
    };
    let mut base = GenConfig::new(s.get_or("n", 300)?, t_max);
    base.seed = seed;
    if let Some(v) = s.get("alpha-shape")? {
        base.alpha_shape = v;
    }
    if let Some(v) = s.get("df-tau")? {
        base.df_tau = v;
    }
    if let Some(v) = s.get::<f64>("v")? {
        base.v = v;
        base.w = 0.2 * v;
    }
    if let Some(v) = s.get("w")? {
        base.w = v;
    }
    if let Some(v) = s.get("phi1")? {
        base.phi1 = v;
    }
    if let Some(v) = s.get("phi2")? {
        base.phi2 = v;
    }
    if let Some(v) = s.list("beta")? {
        base.beta = v;
    }
    if let Some(v) = s.get("gamma2")? {
        base.gamma2 = v;
    }
    if let Some(v) = s.get("sign")? {
        base.sign = v;
    }
    if let Some(v) = s.get("missing")? {
        base.missing = v;
    }
    if let Some(v) = s.0.get("gamma-reading") {
        base.gamma_reading = parse_enum("gamma-reading", v, &[("rate", GammaReading::Rate), ("product", GammaReading::Product)])?;
    }
    let mut c = if let Some(id) = s.get::<u8>("scenario")? {
        simgen::scenario(id, t_max as f64 / simgen::STEPS_PER_YEAR as f64, &base)?
    } else {
        let target: f64 = s.get_or("target", 0.75)?;
        let h1 = trajectory(s, "h1", trajectory(s, "trajectory", TrajectoryKind::Monotone)?)?;
        let h2 = trajectory(s, "h2", trajectory(s, "trajectory", TrajectoryKind::Monotone)?)?;
        simgen::calibrate(target, h1, h2, &base)?
    };
    if let Some(v) = s.get("gamma1")? {
        c.gamma1 = v;
    }
    c.validate()?;
    Ok(c)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per phase.
    pub timings: Vec<(String, f64)>,
    pub created_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct Run {
    command: String,
    out: PathBuf,
    seed: Option<u64>,
    settings: Settings,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    timings: Vec<(String, f64)>,
    clock: Instant,
}

impl Run {
    fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.push((name.to_string(), (now - self.clock).as_secs_f64()));
        self.clock = now;
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn emit(&mut self, stem: &str, results: &Results) -> Result<()> {
        for (ext, f) in [("json", Format::Json), ("csv", Format::Csv)] {
            let name = format!("{stem}.{ext}");
            emit_results(results, f, &self.out.join(&name))?;
            self.outputs.push(name);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunSummary> {
        self.phase("emit");
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), sha256_file(&self.out.join(name))?);
        }
        let manifest = RunManifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: SCHEMA_VERSION,
            seed: self.seed,
            config: self.settings.0.clone(),
            inputs: self.inputs,
            outputs,
            timings: self.timings,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        write_json(&to_value(&manifest)?, &self.out.join(MANIFEST_FILE))?;
        let mut files: Vec<PathBuf> = self.outputs.iter().map(|n| self.out.join(n)).collect();
        files.push(self.out.join(MANIFEST_FILE));
        Ok(RunSummary { manifest, files })
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub files: Vec<PathBuf>,
}

// ---------------------------------------------------------------- commands

/// Run a subcommand with already-merged settings. Outputs go to the `out`
/// directory (default `.`). A `threads` setting caps the worker pool.
pub fn run(command: &str, settings: &Settings) -> Result<RunSummary> {
    if !COMMANDS.contains(&command) {
        return Err(Error::config(format!("unknown command '{command}'; expected one of {}", COMMANDS.join(", "))));
    }
    let threads: usize = settings.get_or("threads", 0)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| run_inner(command, settings))
}

fn run_inner(command: &str, settings: &Settings) -> Result<RunSummary> {
    let out = PathBuf::from(settings.0.get("out").map(|s| s.as_str()).unwrap_or("."));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let uses_seed = !matches!(command, "fit" | "pte");
    let mut run = Run {
        command: command.to_string(),
        seed: if uses_seed { Some(settings.seed()?) } else { None },
        out,
        settings: settings.clone(),
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
        timings: Vec::new(),
        clock: Instant::now(),
    };
    match command {
        "simulate" => cmd_simulate(&mut run)?,
        "benchmark" => cmd_benchmark(&mut run)?,
        _ => {
            let path: PathBuf = settings.require::<String>("panel")?.into();
            let panel = ingest_csv(&path)?;
            run.input(&path)?;
            run.phase("ingest");
            match command {
                "fit" => cmd_fit(&mut run, &panel)?,
                "pte" => cmd_pte(&mut run, &panel)?,
                "bootstrap" => cmd_bootstrap(&mut run, &panel)?,
                "test-homogeneity" => cmd_homogeneity(&mut run, &panel)?,
                "lag-sweep" => cmd_lag_sweep(&mut run, &panel)?,
                _ => unreachable!(),
            }
        }
    }
    run.finish()
}

fn results(run: &Run, body: Value, table: Table) -> Results {
    Results { command: run.command.clone(), seed: run.seed, body, table }
}

fn cmd_simulate(run: &mut Run) -> Result<()> {
    let cfg = gen_config(&run.settings, run.seed.unwrap_or(1))?;
    let (panel, truth) = simgen::generate_panel(&cfg)?;
    run.phase("simulate");
    write_panel_csv(&panel, &run.out.join("panel.csv"))?;
    run.outputs.push("panel.csv".into());
    let table = Table {
        columns: ["t", "delta", "delta_r", "lpte", "cpte"].map(String::from).to_vec(),
        rows: (0..truth.delta.len())
            .map(|t| vec![t.to_string(), num(truth.delta[t]), num(truth.delta_r[t]), num(truth.lpte[t]), num(truth.cpte[t])])
            .collect(),
    };
    let body = json!({ "generator": to_value(&cfg)?, "truth": to_value(&truth)? });
    let r = results(run, body, table);
    run.emit("truth", &r)
}

fn cmd_fit(run: &mut Run, panel: &Panel) -> Result<()> {
    let cfg = pte_config(&run.settings)?;
    let model = run.settings.0.get("model").cloned().unwrap_or_else(|| "conditional".into());
    let spec = match model.as_str() {
        "marginal" => design::build_marginal(panel, &cfg.conditional.covariates, &cfg.options)?,
        "conditional" => design::build_conditional(panel, &cfg.conditional, &cfg.options)?,
        m => return Err(Error::config(format!("--model: '{m}' is not marginal or conditional"))),
    };
    let fit = dlm_core::fit(&spec)?;
    run.phase("fit");
    let names: Vec<String> = fit.layout.names()[..fit.layout.shared_dim()].to_vec();
    let mut columns = vec!["t".to_string()];
    for n in &names {
        columns.push(n.clone());
        columns.push(format!("{n}_sd"));
    }
    let mut paths = serde_json::Map::new();
    for (k, n) in names.iter().enumerate() {
        let sd: Vec<f64> = fit.shared.iter().map(|b| b.cov[(k, k)].max(0.0).sqrt()).collect();
        paths.insert(n.clone(), json!({ "mean": fit.paths[n], "sd": sd }));
    }
    let rows = (0..fit.n_times())
        .map(|t| {
            let mut r = vec![t.to_string()];
            for (k, n) in names.iter().enumerate() {
                r.push(num(fit.paths[n][t]));
                r.push(num(fit.shared[t].cov[(k, k)].max(0.0).sqrt()));
            }
            r
        })
        .collect();
    let body = json!({ "model": model, "states": names, "paths": paths, "log": to_value(&fit.log)? });
    let r = results(run, body, Table { columns, rows });
    run.emit("fit", &r)
}

fn pte_table(res: &estimators::PteResult, extra: Option<&[bootstrap::IntervalEstimate]>) -> Table {
    let mut columns: Vec<String> =
        ["t", "delta", "delta_r", "lpte", "cpte", "lpte_flag", "cpte_flag"].map(String::from).to_vec();
    if extra.is_some() {
        columns.extend(["se", "ci_low", "ci_high"].map(String::from));
    }
    let rows = (0..res.lpte.len())
        .map(|t| {
            let mut r = vec![
                t.to_string(),
                num(res.delta.values[t]),
                num(res.delta_r.values[t]),
                num(res.lpte[t]),
                num(res.cpte[t]),
                flag(res.lpte_flagged[t]),
                flag(res.cpte_flagged[t]),
            ];
            if let Some(iv) = extra {
                r.extend([num(iv[t].se), num(iv[t].ci_low), num(iv[t].ci_high)]);
            }
            r
        })
        .collect();
    Table { columns, rows }
}

fn cmd_pte(run: &mut Run, panel: &Panel) -> Result<()> {
    let cfg = pte_config(&run.settings)?;
    let a = estimators::analyze(panel, &cfg)?;
    let dominance = estimators::check_surrogate_dominance(panel);
    run.phase("fit");
    let body = json!({
        "pte": to_value(&a.result)?,
        "dominance": to_value(&dominance)?,
        "panel": to_value(&design::validate_panel(panel))?,
        "config": to_value(&cfg)?,
    });
    let r = results(run, body, pte_table(&a.result, None));
    run.emit("pte", &r)
}

fn cmd_bootstrap(run: &mut Run, panel: &Panel) -> Result<()> {
    let cfg = pte_config(&run.settings)?;
    let boot = boot_config(&run.settings, run.seed.unwrap_or(1), 2000)?;
    let threshold: f64 = run.settings.get_or("threshold", 0.75)?;
    let alpha: f64 = run.settings.get_or("alpha", 0.05)?;
    let (_, b) = bootstrap::bootstrap_panel(panel, &cfg, &boot)?;
    run.phase("bootstrap");
    let vi = percentile_interval(b.point.pte, &b.draws.pte, 1.0 - 2.0 * alpha);
    let decision = validity_test(&vi, threshold, alpha)?;
    let body = json!({
        "point": to_value(&b.point)?,
        "pte": to_value(&b.pte)?,
        "lpte": to_value(&b.lpte)?,
        "cpte": to_value(&b.cpte)?,
        "delta": to_value(&b.delta)?,
        "delta_r": to_value(&b.delta_r)?,
        "validity": { "interval": to_value(&vi)?, "decision": to_value(&decision)? },
        "replicates": boot.replicates,
        "level": boot.level,
        "stratified": boot.stratified,
        "n_undefined": b.n_undefined,
        "unreliable": b.unreliable,
        "warnings": b.warnings,
        "config": to_value(&cfg)?,
    });
    let r = results(run, body, pte_table(&b.point, Some(&b.cpte)));
    run.emit("bootstrap", &r)
}

fn cmd_homogeneity(run: &mut Run, panel: &Panel) -> Result<()> {
    let cfg = pte_config(&run.settings)?;
    let seed = run.seed.unwrap_or(1);
    let boot = boot_config(&run.settings, seed, 2000)?;
    let (a, b) = bootstrap::bootstrap_panel(panel, &cfg, &boot)?;
    run.phase("bootstrap");
    let tau_mode = match run.settings.0.get("tau-mode").map(|s| s.as_str()) {
        None => TauMode::Reestimate,
        Some(v) => parse_enum("tau-mode", v, &[("reestimate", TauMode::Reestimate), ("fixed", TauMode::Fixed)])?,
    };
    let msd_cfg = MsdConfig {
        alpha: run.settings.get_or("alpha", 0.05)?,
        n_null_draws: run.settings.get_or("null-draws", homogeneity::DEFAULT_NULL_DRAWS)?,
        seed,
        tau_mode,
    };
    let diff = homogeneity::delta_diff(&a.result.delta_r, &a.result.delta, &b.draws)?;
    let msd = homogeneity::msd_test(&diff, &b.draws, &msd_cfg)?;
    let wald = if run.settings.flag("wald")? { Some(homogeneity::wald_test(&diff, &b.draws, msd_cfg.alpha)?) } else { None };
    run.phase("test");
    let table = Table {
        columns: ["t", "delta", "delta_r", "delta_diff", "sigma", "standardized"].map(String::from).to_vec(),
        rows: (0..diff.values.len())
            .map(|t| {
                vec![
                    t.to_string(),
                    num(a.result.delta.values[t]),
                    num(a.result.delta_r.values[t]),
                    num(diff.values[t]),
                    num(diff.sigma[t]),
                    num(diff.values[t] / diff.sigma[t]),
                ]
            })
            .collect(),
    };
    let body = json!({
        "diff": to_value(&diff)?,
        "msd": to_value(&msd)?,
        "wald": wald.as_ref().map(to_value).transpose()?,
        "replicates": boot.replicates,
        "config": to_value(&cfg)?,
    });
    let r = results(run, body, table);
    run.emit("homogeneity", &r)
}

fn cmd_lag_sweep(run: &mut Run, panel: &Panel) -> Result<()> {
    let cfg = pte_config(&run.settings)?;
    let report = design::validate_panel(panel);
    let cap = report.lag_cap(estimators::DOMINANCE_MIN_PER_ARM).unwrap_or(0).min(panel.t_max());
    let max_k: usize = run.settings.get_or("max-k", cap)?;
    if max_k > panel.t_max() {
        return Err(Error::config(format!("--max-k {max_k} exceeds T = {}", panel.t_max())));
    }
    let b: usize = run.settings.get_or("b", 0)?;
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for k in 0..=max_k {
        let mut c = cfg.clone();
        c.conditional.max_lag = k;
        let (res, iv, dropped) = if b > 0 {
            let boot = boot_config(&run.settings, run.seed.unwrap_or(1), b)?;
            let (a, bs) = bootstrap::bootstrap_panel(panel, &c, &boot)?;
            (a.result, Some(bs.pte), a.conditional.log.dropped_cells)
        } else {
            let a = estimators::analyze(panel, &c)?;
            (a.result, None, a.conditional.log.dropped_cells)
        };
        rows.push(vec![
            k.to_string(),
            num(res.pte),
            flag(!res.pte_defined()),
            iv.map(|i| num(i.se)).unwrap_or_default(),
            iv.map(|i| num(i.ci_low)).unwrap_or_default(),
            iv.map(|i| num(i.ci_high)).unwrap_or_default(),
            dropped.to_string(),
        ]);
        entries.push(json!({ "k": k, "pte": res.pte, "cpte": res.cpte, "interval": iv, "dropped_cells": dropped }));
        run.phase(&format!("k={k}"));
    }
    let table = Table {
        columns: ["k", "pte", "pte_flag", "se", "ci_low", "ci_high", "dropped_cells"].map(String::from).to_vec(),
        rows,
    };
    let body = json!({ "sweep": entries, "max_k": max_k, "config": to_value(&cfg)? });
    let r = results(run, body, table);
    run.emit("lag_sweep", &r)
}

fn cmd_benchmark(run: &mut Run) -> Result<()> {
    let s = &run.settings;
    let seed = run.seed.unwrap_or(1);
    let base = gen_config(s, seed)?;
    let mut cfg = BenchmarkConfig::new(base);
    cfg.pte = pte_config(s)?;
    cfg.trajectory = trajectory(s, "trajectory", TrajectoryKind::Monotone)?;
    if let Some(t) = s.list("targets")? {
        cfg.targets = t;
    }
    cfg.replications = s.get_or("reps", cfg.replications)?;
    cfg.bootstrap = boot_config(s, seed, 300)?;
    cfg.threshold = s.get_or("threshold", cfg.threshold)?;
    cfg.alpha = s.get_or("alpha", cfg.alpha)?;
    if let Some(ms) = s.list::<String>("methods")? {
        cfg.methods = ms
            .iter()
            .map(|m| parse_enum("methods", m, &[("ssm", BenchMethod::Ssm), ("ols", BenchMethod::Ols), ("diff", BenchMethod::Diff)]))
            .collect::<Result<_>>()?;
    }
    let report = comparators::run_benchmark(&cfg)?;
    run.phase("benchmark");
    let method = |m: BenchMethod| match m {
        BenchMethod::Ssm => "ssm",
        BenchMethod::Ols => "ols",
        BenchMethod::Diff => "diff",
    };
    let table = Table {
        columns: ["method", "target", "true_pte", "n_defined", "mean_pte", "bias", "sd", "coverage", "rejection_rate"]
            .map(String::from)
            .to_vec(),
        rows: report
            .rows
            .iter()
            .map(|r| {
                vec![
                    method(r.method).to_string(),
                    num(r.target),
                    num(r.true_pte),
                    r.n_defined.to_string(),
                    num(r.mean_pte),
                    num(r.bias),
                    num(r.sd),
                    num(r.coverage),
                    num(r.rejection_rate),
                ]
            })
            .collect(),
    };
    let body = json!({ "report": to_value(&report)?, "config": to_value(&cfg)? });
    let r = results(run, body, table);
    run.emit("benchmark", &r)
}
