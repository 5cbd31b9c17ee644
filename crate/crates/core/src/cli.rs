//! Command-line front end: `generate`, `solve-basin`, `path`, `mc`,
//! `verify-all` and `run --config`.
//!
//! Exit status is 0 on success, 2 for malformed input files or arguments, 3
//! when a path endpoint violates one of the path conditions and 1 for a
//! refuted bound or any other error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::basins::{extract_sign_pattern, singleton_basin_oracle, solve_basin_value, DEFAULT_TOL};
use crate::datasets::{
    gen_clustered, gen_fullrank, gen_lowrank_realizable, gen_singleton_hardness, ClusteredSpec, FullRankSpec,
    LowRankSpec, SingletonHardnessSpec,
};
use crate::error::{Error, Result};
use crate::init::InitKind;
use crate::io::{read_dataset, read_params, write_dataset, write_params};
use crate::montecarlo::{appc_local_minima_census, run_bound_experiment, trials_csv, BoundSpec, MCReport, Verdict};
use crate::nets::{LossKind, NetParams};
use crate::paths::{build_monotone_path, PathSpec};
use crate::rng::dataset_stream;

#[derive(Debug, Parser)]
#[command(name = "relu-landscape", version, about = "Basin values, monotone paths and Monte Carlo bound checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetKind {
    Singleton,
    Fullrank,
    Clustered,
    Lowrank,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Squared,
    CrossEntropy,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Squared => LossKind::Squared,
            LossArg::CrossEntropy => LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Gaussian,
    Sphere,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    /// Number of clusters.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    /// Teacher width for low-rank data.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Norm bound for low-rank teachers.
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
    #[arg(long, default_value_t = 5)]
    pub points_per_cluster: usize,
    #[arg(long, default_value_t = 0.1)]
    pub radius_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub min_center_norm: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "squared")]
    pub loss: LossArg,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PathArgs {
    #[arg(long)]
    pub start: PathBuf,
    #[arg(long)]
    pub end: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "squared")]
    pub loss: LossArg,
    #[arg(long, default_value_t = 1000)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(BoundSpec::IDS))]
    pub bound: String,
    /// TOML or JSON file overriding the experiment's default parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub trials: u64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub init: InitArg,
    /// Gaussian standard deviation or sphere radius.
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Reduced trial counts.
    #[arg(long)]
    pub quick: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one of the special datasets.
    Generate(GenerateArgs),
    /// Basin value of the basin containing the given parameters.
    SolveBasin(SolveArgs),
    /// Strictly decreasing path between two parameter files.
    Path(PathArgs),
    /// Monte Carlo check of one bound.
    Mc(McArgs),
    /// Run the default suite of checks.
    VerifyAll(VerifyArgs),
    /// Run a command described by a TOML config file.
    Run(RunArgs),
}

/// Failure of a command together with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } | Error::Json(_) => 2,
            Error::Condition1 { .. } | Error::Condition2 { .. } | Error::NoImprovement { .. } => 3,
            _ => 1,
        };
        let message = match &e {
            Error::Condition1 { .. } => format!("path condition 1 (scalability) violated: {e}"),
            Error::Condition2 { .. } => format!("path condition 2 (start above the zero predictor) violated: {e}"),
            _ => e.to_string(),
        };
        Failure { code, message }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn out_dir(common: &Common) -> Result<Option<PathBuf>> {
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
    }
    Ok(common.out.clone())
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn emit(common: &Common, report: &impl Serialize) -> Result<()> {
    match out_dir(common)? {
        Some(dir) => write_json(&dir, "report.json", report),
        None => {
            println!("{}", serde_json::to_string_pretty(report)?);
            Ok(())
        }
    }
}

fn generate(args: &GenerateArgs) -> CmdResult {
    let mut rng;
    let (data, meta, teacher) = match args.kind {
        DatasetKind::Singleton => {
            let (d, m) = gen_singleton_hardness(&SingletonHardnessSpec {
                d: args.d,
                eps: args.eps,
                loss: LossKind::Squared,
            })?;
            (d, m, None)
        }
        DatasetKind::Fullrank => {
            rng = dataset_stream(args.common.seed, "fullrank");
            let (d, m) = gen_fullrank(&FullRankSpec { m: args.m, d: args.d, targets: None }, &mut rng)?;
            (d, m, None)
        }
        DatasetKind::Clustered => {
            rng = dataset_stream(args.common.seed, "clustered");
            let spec = ClusteredSpec {
                d: args.d,
                k: args.k,
                points_per_cluster: args.points_per_cluster,
                min_center_norm: args.min_center_norm,
                radius_fraction: args.radius_fraction,
                gamma: args.gamma,
                ..ClusteredSpec::default()
            };
            let (d, m) = gen_clustered(&spec, &mut rng)?;
            (d, m, None)
        }
        DatasetKind::Lowrank => {
            rng = dataset_stream(args.common.seed, "lowrank");
            let spec = LowRankSpec {
                d: args.d,
                m: args.m,
                rank: args.rank,
                teacher_width: args.n,
                b: args.b,
            };
            let (d, t, m) = gen_lowrank_realizable(&spec, &mut rng)?;
            (d, m, Some(t))
        }
    };
    match out_dir(&args.common)? {
        Some(dir) => {
            write_dataset(&dir.join("dataset.csv"), &data)?;
            let mut meta = meta;
            if let Some(t) = teacher {
                write_params(&dir.join("params.json"), &NetParams::TwoLayer(t))?;
                meta.teacher_file = Some("params.json".into());
            }
            write_json(&dir, "report.json", &meta)?;
        }
        None => print!("{}", crate::io::dataset_to_csv(&data)),
    }
    Ok(())
}

fn solve(args: &SolveArgs) -> CmdResult {
    let data = read_dataset(&args.data)?;
    let params = match read_params(&args.params)? {
        NetParams::TwoLayer(p) => p,
        NetParams::Deep(_) => {
            return Err(Error::Invalid("basin values are defined for two-layer parameters".into()).into())
        }
    };
    let loss = LossKind::from(args.loss);
    let pattern = extract_sign_pattern(&params, &data)?;
    let result = solve_basin_value(&pattern, &data, loss, args.tol)?;
    let oracle = if crate::basins::is_singleton_dataset(&data) {
        singleton_basin_oracle(&pattern, &data, loss).ok()
    } else {
        None
    };
    let report = json!({
        "pattern_hash": format!("{:016x}", pattern.hash64()),
        "boundary": pattern.boundary(),
        "result": result,
        "gap": result.gap(),
        "singleton_oracle": oracle,
    });
    emit(&args.common, &report)?;
    if let Some(dir) = &args.common.out {
        write_params(&dir.join("params.json"), &NetParams::TwoLayer(result.params(&pattern)))?;
    }
    Ok(())
}

fn path(args: &PathArgs) -> CmdResult {
    let data = read_dataset(&args.data)?;
    let start = read_params(&args.start)?;
    let end = read_params(&args.end)?;
    let spec = PathSpec {
        grid: args.grid,
        eps: args.eps,
        ..PathSpec::straight(start, end)
    };
    let result = build_monotone_path(&spec, args.loss.into(), &data)?;
    let verdict = json!({
        "monotone": result.monotone,
        "max_violation": result.max_violation,
        "l0": result.l0,
        "l_zero": result.l_zero,
        "l1": result.l1,
        "final_scale": result.final_scale,
        "samples": result.samples.len() + result.final_segment.len(),
    });
    match out_dir(&args.common)? {
        Some(dir) => {
            write_json(&dir, "report.json", &verdict)?;
            fs::write(dir.join("path.csv"), result.to_csv()).map_err(Error::from)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&verdict).map_err(Error::from)?),
    }
    if !result.monotone {
        return Err(Failure {
            code: 1,
            message: format!("path is not strictly decreasing (max violation {:e})", result.max_violation),
        });
    }
    Ok(())
}

/// Default parameters of `id` overridden by the fields of a TOML or JSON file.
pub fn load_bound_spec(id: &str, overrides: Option<&Path>) -> Result<BoundSpec> {
    let Some(path) = overrides else {
        return apply_overrides(id, Value::Object(Default::default()), id);
    };
    let text = fs::read_to_string(path)?;
    let over: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}: line {}", path.display(), e.line()), e.to_string()))?
    } else {
        let t: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::parse(path.display().to_string(), e.to_string()))?;
        serde_json::to_value(t)?
    };
    apply_overrides(id, over, &path.display().to_string())
}

/// Default parameters of `id` with the fields of `over` replaced. Unknown
/// fields are parse errors reported at `location`.
pub fn apply_overrides(id: &str, over: Value, location: &str) -> Result<BoundSpec> {
    let base = BoundSpec::default_for(id).ok_or_else(|| Error::Invalid(format!("unknown bound {id:?}")))?;
    let mut merged = serde_json::to_value(&base)?;
    let (Value::Object(m), Value::Object(o)) = (&mut merged, over) else {
        return Err(Error::parse(location, "expected a table of parameters"));
    };
    for (k, v) in o {
        if k == "bound" {
            continue;
        }
        if !m.contains_key(&k) {
            return Err(Error::parse(location, format!("unknown field {k:?} for bound {id}")));
        }
        m.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| Error::parse(location, e.to_string()))
}

fn init_kind(init: InitArg, scale: f64) -> InitKind {
    match init {
        InitArg::Gaussian => InitKind::GaussianIid { scale },
        InitArg::Sphere => InitKind::UniformSphere { radius: scale },
    }
}

fn mc(args: &McArgs) -> CmdResult {
    let spec = load_bound_spec(&args.bound, args.params.as_deref())?;
    let kind = init_kind(args.init, args.init_scale);
    let run = run_bound_experiment(&spec, &kind, args.trials, args.common.seed, args.common.workers)?;
    emit(&args.common, &json!({ "spec": spec, "report": run.report }))?;
    if let Some(dir) = &args.common.out {
        fs::write(dir.join("trials.csv"), trials_csv(&run.outcomes)).map_err(Error::from)?;
        if let Some(data) = &run.dataset {
            write_dataset(&dir.join("dataset.csv"), data)?;
        }
    }
    refuted_check(std::slice::from_ref(&run.report))
}

fn refuted_check(reports: &[MCReport]) -> CmdResult {
    let refuted: Vec<&str> = reports
        .iter()
        .filter(|r| r.verdict == Verdict::Refuted)
        .map(|r| r.bound_id.as_str())
        .collect();
    if refuted.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("REFUTED: {}", refuted.join(", ")),
        })
    }
}

/// The default suite: experiment and trial count. `quick` divides the
/// counts so the suite finishes in well under a minute.
pub fn default_suite(quick: bool) -> Vec<(BoundSpec, u64)> {
    let scale = |full: u64, q: u64| if quick { q } else { full };
    let mut suite = vec![
        (BoundSpec::default_for("prop1").unwrap(), scale(10_000, 1_000)),
        (
            BoundSpec::Prop1 {
                input_dim: 4,
                hidden: vec![6, 3],
                m: 10,
                loss: LossKind::CrossEntropy,
                outputs: 3,
            },
            scale(10_000, 1_000),
        ),
        (BoundSpec::default_for("thm3").unwrap(), scale(10_000, 1_000)),
        (BoundSpec::default_for("thm5").unwrap(), scale(2_000, 200)),
        (BoundSpec::default_for("thm6").unwrap(), scale(500, 100)),
        (BoundSpec::default_for("thm4").unwrap(), scale(200, 100)),
        (BoundSpec::default_for("thm7").unwrap(), scale(10_000, 1_000)),
        (BoundSpec::default_for("noisy").unwrap(), scale(100_000, 10_000)),
    ];
    for d in [3, 5, 10] {
        for delta in [0.1, 0.5, 1.0] {
            suite.push((BoundSpec::Cap { d, delta }, scale(1_000_000, 20_000)));
        }
    }
    suite
}

fn verify_all(args: &VerifyArgs) -> CmdResult {
    let kind = InitKind::GaussianIid { scale: 1.0 };
    let mut reports = Vec::new();
    let mut lines = Vec::new();
    for (spec, trials) in default_suite(args.quick) {
        let run = run_bound_experiment(&spec, &kind, trials, args.common.seed, args.common.workers)?;
        let r = &run.report;
        lines.push(format!(
            "{:<6} trials={:<8} estimate={:.5} limits=[{:.5}, {:.5}] bound={:.5} {:?}",
            r.bound_id, r.trials, r.estimate, r.lower_limit, r.upper_limit, r.bound, r.verdict
        ));
        reports.push(run.report);
    }
    let census = appc_local_minima_census(16, 0.1)?;
    lines.push(format!(
        "census d=16 tail={}/{} bound={:.5} holds={}",
        census.tail_numerator, census.tail_denominator, census.bound, census.holds
    ));
    for l in &lines {
        eprintln!("{l}");
    }
    let summary = json!({
        "quick": args.quick,
        "seed": args.common.seed,
        "reports": reports,
        "census": { "d": 16, "eps": 0.1, "tail": census.tail_probability, "bound": census.bound, "holds": census.holds },
    });
    emit(&args.common, &summary)?;
    if !census.holds {
        return Err(Failure {
            code: 1,
            message: "census tail exceeds its bound".into(),
        });
    }
    refuted_check(&reports)
}

/// Turns a TOML config into an argument vector: `command` names the
/// subcommand, `seed`, `workers` and `out` are global, and the table named
/// after the command holds its flags.
pub fn config_to_args(text: &str) -> Result<Vec<String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse("config", e.to_string()))?;
    let command = table
        .get("command")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::parse("config", "missing string field `command`"))?
        .to_string();
    if command == "run" {
        return Err(Error::parse("config: command", "a config cannot run another config"));
    }
    let mut args = vec!["relu-landscape".to_string(), command.clone()];
    let mut push = |key: &str, v: &toml::Value| -> Result<()> {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            toml::Value::Boolean(true) => args.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => args.extend([flag, s.clone()]),
            toml::Value::Integer(i) => args.extend([flag, i.to_string()]),
            toml::Value::Float(f) => args.extend([flag, format!("{f:?}")]),
            other => {
                return Err(Error::parse(
                    format!("config: {key}"),
                    format!("expected a scalar, found {}", other.type_str()),
                ))
            }
        }
        Ok(())
    };
    for (key, v) in &table {
        match key.as_str() {
            "command" => {}
            "seed" | "workers" | "out" => push(key, v)?,
            k if k == command || k == command.replace('-', "_") => {
                let block = v
                    .as_table()
                    .ok_or_else(|| Error::parse(format!("config: {k}"), "expected a table"))?;
                for (bk, bv) in block {
                    push(bk, bv)?;
                }
            }
            other => return Err(Error::parse(format!("config: {other}"), "unknown field")),
        }
    }
    Ok(args)
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::SolveBasin(a) => solve(&a),
        Command::Path(a) => path(&a),
        Command::Mc(a) => mc(&a),
        Command::VerifyAll(a) => verify_all(&a),
        Command::Run(a) => {
            let text = fs::read_to_string(&a.config).map_err(Error::from)?;
            let args = config_to_args(&text).map_err(|e| match e {
                Error::Parse { location, message } => Error::Parse {
                    location: format!("{}: {location}", a.config.display()),
                    message,
                },
                other => other,
            })?;
            let cli = Cli::try_parse_from(&args).map_err(|e| Failure {
                code: 2,
                message: format!("{}: {}", a.config.display(), e.render()),
            })?;
            dispatch(cli)
        }
    }
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_becomes_arguments() {
        let args = config_to_args(
            "command = \"mc\"\nseed = 7\n[mc]\nbound = \"thm3\"\ntrials = 100\ninit_scale = 0.5\n",
        )
        .unwrap();
        assert_eq!(&args[..2], ["relu-landscape", "mc"]);
        let mut pairs: Vec<(&str, &str)> =
            args[2..].chunks(2).map(|c| (c[0].as_str(), c[1].as_str())).collect();
        pairs.sort();
        assert_eq!(
            pairs,
            [("--bound", "thm3"), ("--init-scale", "0.5"), ("--seed", "7"), ("--trials", "100")]
        );
        assert!(Cli::try_parse_from(&args).is_ok());
    }

    #[test]
    fn config_errors_name_the_field() {
        match config_to_args("command = \"mc\"\nbogus = 1\n") {
            Err(Error::Parse { location, .. }) => assert!(location.contains("bogus")),
            other => panic!("{other:?}"),
        }
        assert!(config_to_args("seed = 1\n").is_err());
    }

    #[test]
    fn suite_covers_every_bound() {
        let suite = default_suite(true);
        for id in BoundSpec::IDS {
            assert!(suite.iter().any(|(s, _)| s.id() == id), "{id}");
        }
    }
}
