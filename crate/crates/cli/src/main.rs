use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use flexsum::ev::{self, SampleConfig, Scenario};
use flexsum::experiments::{self, SweepConfig};
use flexsum::inner::{self, InnerMethod, TransformResult};
use flexsum::outer::{self, OuterMethod, OuterResult};
use flexsum::polytope::{battery_to_hpolytope, BaseSet};
use flexsum::{disaggregation, lp, oracle2d};
use nalgebra::{DMatrix, DVector};

const SPLIT_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "flexsum", version, about = "Inner and outer approximations of aggregate flexibility sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an EV fleet scenario.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        /// Plug every EV in for the whole horizon.
        #[arg(long)]
        homogenize_windows: bool,
        /// Clock label of period 0, e.g. 15:00.
        #[arg(long)]
        origin: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute an inner approximation of the aggregate set.
    Inner {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        method: InnerMethod,
        #[arg(long)]
        out: PathBuf,
        /// Drop containment certificates from the output.
        #[arg(long)]
        no_certificates: bool,
    },
    /// Compute an outer approximation of the aggregate set.
    Outer {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        method: OuterMethod,
        #[arg(long, default_value_t = outer::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_certificates: bool,
    },
    /// Print the volume ratio of an inner result against an outer result.
    Ratio {
        #[arg(long)]
        inner: PathBuf,
        #[arg(long)]
        outer: PathBuf,
    },
    /// Split an aggregate profile into individual profiles.
    Disaggregate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        result: PathBuf,
        /// JSON array or comma/newline separated numbers.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Minimum-peak aggregate profile and its grouped disaggregation.
    PeakDemo {
        #[arg(long)]
        scenario: PathBuf,
        /// Inner result to use; solved with the structure method when absent.
        #[arg(long)]
        result: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        group_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Volume ratio sweep over heterogeneity levels.
    Sweep {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 15)]
        n: usize,
        #[arg(long, default_value_t = 12)]
        t: usize,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long, default_value_t = experiments::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = outer::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Exact Minkowski sum of a two-period scenario.
    Oracle2d {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        inner: Option<PathBuf>,
        #[arg(long)]
        outer: Option<PathBuf>,
    },
    /// Disaggregate random points of an inner result and report violations.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        result: PathBuf,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Core(flexsum::Error),
    Io { path: PathBuf, source: std::io::Error },
    Json { path: PathBuf, source: serde_json::Error },
    Input(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Json { path, source } => write!(f, "{}: malformed JSON: {source}", path.display()),
            CliError::Input(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<flexsum::Error> for CliError {
    fn from(e: flexsum::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_solver_failure() => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if let Err(e) = apply_env() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn apply_env() -> CliResult<()> {
    if let Ok(raw) = std::env::var("FLEXSUM_LP_TOL") {
        let tol: f64 = raw.trim().parse().map_err(|_| CliError::Input(format!("FLEXSUM_LP_TOL: not a number: {raw:?}")))?;
        if !(tol > 0.0) {
            return Err(CliError::Input("FLEXSUM_LP_TOL must be positive".into()));
        }
        lp::set_default_tol(tol);
    }
    Ok(())
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Generate { n, t, delta, sigma, seed, homogenize_windows, origin, out } => {
            let mut cfg = SampleConfig::new(n, t, delta, sigma, seed).homogenized(homogenize_windows);
            if let Some(label) = origin {
                cfg.origin_min = ev::parse_clock(&label)?;
            }
            let scenario = ev::sample(&cfg)?;
            write_json(&out, &scenario)?;
            println!("wrote {} EVs over {} periods to {}", scenario.len(), scenario.horizon, out.display());
        }
        Command::Inner { scenario, method, out, no_certificates } => {
            let scenario: Scenario = read_json(&scenario)?;
            let mut result = inner::solve(method, &scenario.models, &scenario.base)?;
            if no_certificates {
                result = result.without_certificates();
            }
            println!("objective {}", result.objective);
            write_json(&out, &result)?;
        }
        Command::Outer { scenario, method, epsilon, out, no_certificates } => {
            let scenario: Scenario = read_json(&scenario)?;
            let mut result = outer::solve(method, &scenario.models, &scenario.base, epsilon)?;
            if no_certificates {
                result = result.without_certificates();
            }
            println!("trace {}", result.z.trace());
            write_json(&out, &result)?;
        }
        Command::Ratio { inner, outer } => {
            let inner: TransformResult = read_json(&inner)?;
            let outer: OuterResult = read_json(&outer)?;
            println!("{}", experiments::ratio_of(&inner, &outer)?);
        }
        Command::Disaggregate { scenario, result, profile, out } => {
            let scenario: Scenario = read_json(&scenario)?;
            let result: TransformResult = read_json(&result)?;
            let u = read_profile(&profile)?;
            let parts = disaggregation::disaggregate(&result, &scenario.base, &u, SPLIT_TOL)?;
            write_text(&out, &profiles_csv(&parts))?;
        }
        Command::PeakDemo { scenario, result, group_size, out } => {
            let scenario: Scenario = read_json(&scenario)?;
            let result = match result {
                Some(path) => read_json(&path)?,
                None => inner::solve(InnerMethod::Structure, &scenario.models, &scenario.base)?,
            };
            let peak = experiments::peak_power_profile(&result, &scenario.base)?;
            let groups = experiments::group_disaggregation(&scenario, &result, &peak.u, group_size, SPLIT_TOL)?;
            write_text(&out, &experiments::peak_demo_csv(&peak.u, scenario.delta, &groups))?;
            println!("peak {}", peak.peak);
        }
        Command::Sweep { seed, n, t, delta, sigmas, trials, epsilon, out, summary } => {
            let mut cfg = SweepConfig::new(n, t, delta, seed);
            if let Some(sigmas) = sigmas {
                cfg.sigmas = sigmas;
            }
            cfg.trials = trials;
            cfg.epsilon = epsilon;
            let table = experiments::heterogeneity_sweep(&cfg)?;
            write_text(&out, &table.to_csv())?;
            let summary_csv = table.summary_csv();
            match summary {
                Some(path) => write_text(&path, &summary_csv)?,
                None => print!("{summary_csv}"),
            }
        }
        Command::Oracle2d { scenario, out, inner, outer } => {
            let scenario: Scenario = read_json(&scenario)?;
            if scenario.horizon != 2 {
                return Err(CliError::Input(format!("oracle2d needs T = 2, scenario has T = {}", scenario.horizon)));
            }
            let sets: Vec<_> = scenario.models.iter().map(battery_to_hpolytope).collect();
            let (verts, area) = oracle2d::exact_sum(&sets)?;
            let mut csv = String::from("x,y\n");
            for v in &verts {
                csv.push_str(&format!("{},{}\n", v.x, v.y));
            }
            write_text(&out, &csv)?;
            println!("sum_area {area}");
            if let Some(path) = inner {
                let r: TransformResult = read_json(&path)?;
                println!("inner_area {}", image_area(&scenario.base, &r.map)?);
            }
            if let Some(path) = outer {
                let r: OuterResult = read_json(&path)?;
                println!("outer_area {}", image_area(&scenario.base, &r.q_map)?);
            }
        }
        Command::Validate { scenario, result, samples, seed } => {
            let scenario: Scenario = read_json(&scenario)?;
            let result: TransformResult = read_json(&result)?;
            let report = experiments::validate_disaggregation(&scenario, &result, samples, seed, SPLIT_TOL)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
    }
    Ok(())
}

/// Area of `map·U₀` from the base polygon and `|det map|`.
fn image_area(base: &BaseSet, map: &DMatrix<f64>) -> CliResult<f64> {
    if map.shape() != (2, 2) {
        return Err(CliError::Input("expected a 2x2 map".into()));
    }
    let verts = oracle2d::vertices_of_hpolygon(&base.polytope, 1e-12)?;
    Ok(map.determinant().abs() * oracle2d::polygon_area(&verts))
}

fn profiles_csv(parts: &[DVector<f64>]) -> String {
    let t = parts.first().map_or(0, |p| p.len());
    let mut out = String::from("ev");
    for k in 0..t {
        out.push_str(&format!(",{k}"));
    }
    out.push('\n');
    for (i, p) in parts.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in p.iter() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    write_text(path, &(text + "\n"))
}

/// Reads a profile given as a JSON array or as numbers separated by commas,
/// whitespace or newlines. A non-numeric first line is treated as a header.
fn read_profile(path: &Path) -> CliResult<DVector<f64>> {
    let text = read_text(path)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        let values: Vec<f64> = serde_json::from_str(trimmed)
            .map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
        return Ok(DVector::from_vec(values));
    }
    let mut lines = trimmed.lines().peekable();
    if let Some(first) = lines.peek() {
        if first.split(',').next().is_some_and(|tok| tok.trim().parse::<f64>().is_err()) {
            lines.next();
        }
    }
    let mut values = Vec::new();
    for (k, line) in lines.enumerate() {
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()) {
            let v = tok
                .parse()
                .map_err(|_| CliError::Input(format!("{}: line {}: not a number: {tok:?}", path.display(), k + 1)))?;
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(CliError::Input(format!("{}: empty profile", path.display())));
    }
    Ok(DVector::from_vec(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_formats() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("p.json");
        fs::write(&json, "[1.5, -2, 3]").unwrap();
        assert_eq!(read_profile(&json).unwrap().as_slice(), &[1.5, -2.0, 3.0]);
        let csv = dir.path().join("p.csv");
        fs::write(&csv, "u\n1.5\n-2\n3\n").unwrap();
        assert_eq!(read_profile(&csv).unwrap().as_slice(), &[1.5, -2.0, 3.0]);
        fs::write(&csv, "1.5,-2,3\n").unwrap();
        assert_eq!(read_profile(&csv).unwrap().as_slice(), &[1.5, -2.0, 3.0]);
        fs::write(&csv, "1.5,x\n").unwrap();
        assert!(read_profile(&csv).is_err());
    }

    #[test]
    fn help_and_bad_args() {
        assert_eq!(run(["flexsum", "--help"]), 0);
        assert_eq!(run(["flexsum", "inner", "--method", "nope"]), 1);
        assert_eq!(run(["flexsum", "generate", "--n", "3", "--t", "4", "--sigma", "0"]), 1);
    }

    #[test]
    fn solver_errors_exit_two() {
        let e = CliError::Core(flexsum::Error::Solver { context: "x".into(), status: lp::LpStatus::Infeasible });
        assert_eq!(e.exit_code(), 2);
        assert_eq!(CliError::Core(flexsum::Error::Singular).exit_code(), 1);
    }

    #[test]
    fn csv_layout() {
        let csv = profiles_csv(&[DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])]);
        assert_eq!(csv, "ev,0,1\n0,1,2\n1,3,4\n");
    }
}
