//! The `symscatter` command line: estimation on CSV data, simulation runs,
//! U-statistic decompositions and pair-design dumps.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures.
//! Errors are reported on stderr as one JSON object.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use symscatter::linalg::{shape_normalize, SpdMatrix};
use symscatter::pairs::{Dataset, PairScheme};
use symscatter::scatter::{
    averaged_randomized_estimator, symmetrized_scatter, ScatterFunctional, SolverOptions,
};
use symscatter::sim::{run_experiment, summarize, ExperimentConfig, ExperimentRow, RunOptions};
use symscatter::ustat::{
    decompose, predict_variance, tyler_influence_kernel, ClippedNorm, DifferenceKernel,
    OuterProduct,
};

#[derive(Debug, Parser)]
#[command(name = "symscatter", version, about = "Symmetrized M-estimators of scatter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate scatter from a CSV dataset and print it as JSON.
    Estimate(EstimateArgs),
    /// Run a Monte-Carlo experiment described by a JSON config.
    Simulate(SimulateArgs),
    /// Hoeffding decomposition of a kernel on a CSV dataset, as JSON.
    Decompose(DecomposeArgs),
    /// Print the index pairs (1-based) of a design as CSV.
    Pairs(PairsArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV file, one observation per row.
    data: PathBuf,
    /// The first CSV line is a header.
    #[arg(long)]
    header: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FunctionalArg {
    Tyler,
    M,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    Complete,
    Balanced,
    Randomized,
}

#[derive(Debug, Args)]
struct SchemeArgs {
    #[arg(long, value_enum, default_value = "complete")]
    scheme: SchemeArg,
    /// Pair depth for balanced and randomized designs.
    #[arg(long)]
    d: Option<usize>,
    /// Seed of the randomized design.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SchemeArgs {
    fn scheme(&self) -> Result<PairScheme, CliError> {
        let depth = || {
            self.d
                .ok_or_else(|| CliError::Usage("--d is required for this scheme".into()))
        };
        Ok(match self.scheme {
            SchemeArg::Complete => PairScheme::Complete,
            SchemeArg::Balanced => PairScheme::Balanced { d: depth()? },
            SchemeArg::Randomized => PairScheme::RandomizedCycles {
                d: depth()?,
                seed: self.seed,
            },
        })
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_enum, default_value = "tyler")]
    functional: FunctionalArg,
    /// `ν` of `ρ_ν(s) = (ν + q) log(s + ν)` for the M-functional.
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// With the randomized scheme, average the `d` single-cycle estimates
    /// instead of pooling their pairs.
    #[arg(long)]
    average: bool,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Output CSV, one row per replication, depth and design.
    #[arg(long)]
    rows: PathBuf,
    /// Output summary JSON.
    #[arg(long)]
    summary: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Record per-row wall-clock times (makes the rows file run dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KernelArg {
    /// `min(‖z‖, cap)`.
    ClippedNorm,
    /// `vech(z zᵀ)`.
    OuterProduct,
    /// Tyler's influence function at the identity, `vech`.
    TylerInfluence,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_enum)]
    kernel: KernelArg,
    #[arg(long, default_value_t = 2.0)]
    cap: f64,
    /// Balanced depths for which to predict `n Var(U)`.
    #[arg(long, value_delimiter = ',')]
    d: Vec<usize>,
}

#[derive(Debug, Args)]
struct PairsArgs {
    #[arg(long)]
    n: usize,
    #[command(flatten)]
    scheme: SchemeArgs,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        json!({ "error": { "kind": kind, "message": message } })
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Runs the command line `argv` (including the program name), writing
/// results to `out` and errors to `err`. Returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let error = CliError::Usage(e.render().to_string().trim().to_string());
            let _ = writeln!(err, "{}", error.to_json());
            return error.code();
        }
    };
    let result = match cli.command {
        Command::Estimate(args) => estimate(&args, out),
        Command::Simulate(args) => simulate(&args),
        Command::Decompose(args) => decomposition(&args, out),
        Command::Pairs(args) => pairs(&args, out),
    };
    match result {
        Ok(()) => 0,
        Err(error) => {
            let _ = writeln!(err, "{}", error.to_json());
            error.code()
        }
    }
}

/// Reads a numeric CSV with one observation per row.
pub fn read_dataset(path: &Path, header: bool) -> Result<Dataset, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("{}: {e}", path.display()))?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|_| format!("{}: row {}: not a number: {field:?}", path.display(), k + 1))
            })
            .collect::<Result<Vec<f64>, String>>()?;
        rows.push(row);
    }
    Dataset::from_rows(&rows).map_err(|e| format!("{}: {e}", path.display()))
}

fn matrix_rows(m: &SpdMatrix) -> Vec<Vec<f64>> {
    let q = m.dim();
    (0..q).map(|i| (0..q).map(|j| m.get(i, j)).collect()).collect()
}

fn write_json(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, value).map_err(runtime)?;
    writeln!(out).map_err(runtime)
}

fn estimate(args: &EstimateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let scheme = args.scheme.scheme()?;
    let functional = match args.functional {
        FunctionalArg::Tyler => ScatterFunctional::Tyler,
        FunctionalArg::M => ScatterFunctional::MType { nu: args.nu },
    };
    let opts = SolverOptions {
        tol: args.tol,
        max_iter: args.max_iter,
    };
    let data = read_dataset(&args.input.data, args.input.header).map_err(CliError::Runtime)?;
    scheme.validate(data.n()).map_err(|e| CliError::Usage(e.to_string()))?;

    let (estimate, iterations, residual) = match (scheme, args.average) {
        (PairScheme::RandomizedCycles { d, seed }, true) => {
            let m = averaged_randomized_estimator(&data, d, &functional, &opts, seed).map_err(runtime)?;
            (m, None, None)
        }
        (_, true) => {
            return Err(CliError::Usage("--average requires --scheme randomized".into()));
        }
        (scheme, false) => {
            let report = symmetrized_scatter(&data, &scheme, &functional, &opts).map_err(runtime)?;
            (report.estimate, Some(report.iterations), Some(report.residual))
        }
    };
    let shape = shape_normalize(&estimate);
    write_json(
        out,
        &json!({
            "functional": functional,
            "scheme": scheme,
            "averaged": args.average,
            "n": data.n(),
            "q": data.q(),
            "pairs": scheme.pair_count(data.n()),
            "iterations": iterations,
            "residual": residual,
            "estimate": matrix_rows(&estimate),
            "shape": matrix_rows(&shape),
        }),
    )
}

/// Writes rows as CSV with header
/// `rep,d,scheme,approx_error,est_error,full_error,runtime_ms`.
pub fn write_rows(rows: &[ExperimentRow], out: impl Write) -> io::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "rep",
        "d",
        "scheme",
        "approx_error",
        "est_error",
        "full_error",
        "runtime_ms",
    ])?;
    for r in rows {
        writer.write_record([
            r.rep.to_string(),
            r.d.to_string(),
            r.scheme.as_str().to_string(),
            r.approx_error.to_string(),
            r.est_error.to_string(),
            r.full_error.to_string(),
            r.runtime_ms.to_string(),
        ])?;
    }
    writer.flush()
}

fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.config.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.config.display())))?;
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if config.d_values.is_empty() || config.schemes.is_empty() {
        return Err(CliError::Usage("config has no d_values or schemes; nothing to compare".into()));
    }
    let options = RunOptions {
        workers: args.workers.max(1),
        timing: args.timing,
    };
    let rows = run_experiment(&config, options).map_err(runtime)?;
    let file = File::create(&args.rows)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.rows.display())))?;
    write_rows(&rows, BufWriter::new(file)).map_err(runtime)?;
    let summary = summarize(&rows).map_err(runtime)?;
    let mut file = File::create(&args.summary)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.summary.display())))?;
    write_json(&mut file, &summary)
}

fn decomposition(args: &DecomposeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let data = read_dataset(&args.input.data, args.input.header).map_err(CliError::Runtime)?;
    let clipped = ClippedNorm { cap: args.cap };
    let tyler = tyler_influence_kernel();
    let (name, kernel): (&str, &dyn DifferenceKernel) = match args.kernel {
        KernelArg::ClippedNorm => ("clipped-norm", &clipped),
        KernelArg::OuterProduct => ("outer-product", &OuterProduct),
        KernelArg::TylerInfluence => ("tyler-influence", &tyler),
    };
    let dec = decompose(&data, kernel).map_err(runtime)?;
    let n = data.n();
    let mut schemes = vec![PairScheme::Complete];
    schemes.extend(args.d.iter().map(|&d| PairScheme::Balanced { d }));
    let mut predictions = Vec::new();
    for scheme in schemes {
        let p = predict_variance(&dec, &scheme, n).map_err(|e| CliError::Usage(e.to_string()))?;
        predictions.push(json!({ "scheme": scheme, "predicted": rows_of(&p.predicted) }));
    }
    write_json(
        out,
        &json!({
            "kernel": name,
            "n": n,
            "q": data.q(),
            "r": dec.output_dim(),
            "f0": dec.f0,
            "gamma1": rows_of(&dec.gamma1),
            "gamma2": rows_of(&dec.gamma2),
            "predictions": predictions,
        }),
    )
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn pairs(args: &PairsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let scheme = args.scheme.scheme()?;
    let pairs = scheme.pairs(args.n).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["i", "j"]).map_err(runtime)?;
    for (i, j) in pairs {
        writer
            .write_record([(i + 1).to_string(), (j + 1).to_string()])
            .map_err(runtime)?;
    }
    writer.flush().map_err(runtime)
}
