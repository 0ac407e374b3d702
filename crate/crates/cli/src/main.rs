//! `peerfx` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or invalid parameter, 2 data error,
//! 3 numerical failure.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{ConfigFile, Output, Provenance};
use peerfx::estimators::{estimate, MomentSpec, MomentTag};
use peerfx::identification::report_for_dataset;
use peerfx::io::{read_dataset_path, read_size_counts, write_dataset};
use peerfx::montecarlo::{gen_group_uncertainty, gen_missing_data, run_mc, Execution, McDesign, Truth, Variant};
use peerfx::rng::ReplicationKey;
use peerfx::sampling::deconvolve_exact;

const DEFAULT_SEED: u64 = 1;
const DEFAULT_OUT_DIR: &str = "peerfx-out";

/// A usage error: bad flags, config or arguments.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "peerfx", version, about = "Peer effects with missing group members and uncertain groups")]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed (default 1).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw one dataset from a Monte-Carlo design and write it as CSV.
    Simulate {
        #[arg(long, value_enum)]
        design: Option<Design>,
        /// Sampling probability (missing-data) or room probability (uncertainty).
        #[arg(long)]
        point: Option<f64>,
        /// Target observed sample size.
        #[arg(long)]
        m: Option<u64>,
        /// Replication index; with the same seed, point and m this is the dataset of `mc` replication `rep`.
        #[arg(long)]
        rep: Option<u64>,
        #[arg(long, allow_hyphen_values = true)]
        gamma: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        beta: Option<f64>,
        /// Output CSV (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate peer effects from a dataset CSV.
    Estimate {
        #[arg(long, value_enum)]
        estimator: Option<Estimator>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        impose_beta_zero: Option<bool>,
        /// Upper bound of the true group size (unknown-size estimators).
        #[arg(long)]
        nbar: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output JSON (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover the sampling probability and true size distribution from an observed size histogram.
    Deconvolve {
        /// CSV with columns size,count.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the identification conditions for a dataset.
    Idcheck {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo table.
    Mc {
        #[arg(long)]
        table: Option<u8>,
        #[arg(long)]
        m: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated design values (defaults to the table's grid).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Run replications on the calling thread.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        sequential: Option<bool>,
        /// Output directory.
        #[arg(long, env = "PEERFX_OUT_DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Design {
    MissingData,
    Uncertainty,
    UncertaintyFe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Estimator {
    Missspecified,
    Known,
    Unknown,
    #[value(name = "unknown-p")]
    #[serde(rename = "unknown-p")]
    UnknownP,
    Room,
    Floor,
    /// Known true groups in the uncertainty design.
    #[value(name = "known-group")]
    #[serde(rename = "known-group")]
    KnownGroup,
    Uncertain,
}

impl Estimator {
    fn tag(self) -> MomentTag {
        match self {
            Estimator::Missspecified => MomentTag::Missspecified,
            Estimator::Known => MomentTag::Known,
            Estimator::Unknown => MomentTag::Unknown,
            Estimator::UnknownP => MomentTag::UnknownParametric,
            Estimator::Room => MomentTag::Room,
            Estimator::Floor => MomentTag::Floor,
            Estimator::KnownGroup => MomentTag::UncertainKnownPsiCase,
            Estimator::Uncertain => MomentTag::Uncertain,
        }
    }
}

fn parse_enum<T: ValueEnum>(name: &str, value: &str) -> anyhow::Result<T> {
    T::from_str(value, false).map_err(|_| Usage(format!("invalid value {value:?} for {name}")).into())
}

fn required<T>(v: Option<T>, flag: &str) -> anyhow::Result<T> {
    v.ok_or_else(|| Usage(format!("missing required option --{flag}")).into())
}

fn input_file(path: Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
    let path = required(path, flag)?;
    if !path.is_file() {
        return Err(peerfx::Error::Data(format!("input file not found: {}", path.display())).into());
    }
    Ok(path)
}

fn output_file(path: &Option<PathBuf>) -> anyhow::Result<()> {
    if let Some(p) = path {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !parent.is_dir() {
                return Err(Usage(format!("output directory does not exist: {}", parent.display())).into());
            }
        }
    }
    Ok(())
}

fn sink(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| peerfx::Error::Data(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(path: &Option<PathBuf>, value: &T) -> anyhow::Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn execution(threads: Option<usize>, sequential: bool) -> anyhow::Result<Execution> {
    Ok(match (sequential, threads) {
        (true, _) | (false, Some(1)) => Execution::Sequential,
        (false, Some(0)) => return Err(Usage("--threads must be at least 1".into()).into()),
        (false, Some(t)) => Execution::ParallelWith { threads: t },
        (false, None) => Execution::Parallel,
    })
}

#[derive(Serialize)]
struct SimulateConfig {
    design: Design,
    point: f64,
    m: u64,
    rep: u64,
    gamma: f64,
    delta: f64,
    beta: f64,
    seed: u64,
}

#[derive(Serialize)]
struct EstimateConfig {
    estimator: Estimator,
    impose_beta_zero: bool,
    nbar: Option<u64>,
    data: PathBuf,
}

#[derive(Serialize)]
struct PathConfig {
    input: PathBuf,
}

#[derive(Serialize)]
struct McConfig {
    table: u8,
    m: u64,
    reps: usize,
    grid: Vec<f64>,
    seed: u64,
}

#[derive(Serialize, serde::Deserialize, Debug, PartialEq)]
struct DeconvolveResult {
    rho: f64,
    /// Probability of true size `n`, for `n = 1..=nbar`.
    q: Vec<f64>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg: ConfigFile = config::load(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let threads = cli.threads.or(cfg.threads);

    match cli.command {
        Command::Simulate { design, point, m, rep, gamma, delta, beta, out } => {
            let s = cfg.simulate;
            let design = match design {
                Some(d) => d,
                None => match s.design {
                    Some(d) => parse_enum("design", &d)?,
                    None => Design::MissingData,
                },
            };
            let out = out.or(s.out);
            output_file(&out)?;
            let d = Truth::default();
            let c = SimulateConfig {
                design,
                point: point.or(s.point).unwrap_or(1.0),
                m: m.or(s.m).unwrap_or(1600),
                rep: rep.or(s.rep).unwrap_or(0),
                gamma: gamma.or(s.gamma).unwrap_or(d.gamma),
                delta: delta.or(s.delta).unwrap_or(d.delta),
                beta: beta.or(s.beta).unwrap_or(d.beta),
                seed,
            };
            let truth = Truth { gamma: c.gamma, delta: c.delta, beta: c.beta };
            let key = ReplicationKey::new(seed, (c.point * 1e6).round() as u64, c.rep);
            let (_, data) = match design {
                Design::MissingData => gen_missing_data(c.point, c.m, &truth, &key)?,
                Design::Uncertainty => gen_group_uncertainty(c.point, c.m, &truth, &key, false)?,
                Design::UncertaintyFe => gen_group_uncertainty(c.point, c.m, &truth, &key, true)?,
            };
            let prov = Provenance::new("simulate", Some(seed), &c);
            let mut w = sink(&out)?;
            w.write_all(prov.comment_lines().as_bytes())?;
            write_dataset(&data, &mut w)?;
            w.flush()?;
        }
        Command::Estimate { estimator, impose_beta_zero, nbar, data, out } => {
            let s = cfg.estimate;
            let estimator = match estimator {
                Some(e) => e,
                None => parse_enum("estimator", &required(s.estimator, "estimator")?)?,
            };
            let data = input_file(data.or(s.data), "data")?;
            let out = out.or(s.out);
            output_file(&out)?;
            let c = EstimateConfig {
                estimator,
                impose_beta_zero: impose_beta_zero.or(s.impose_beta_zero).unwrap_or(false),
                nbar: nbar.or(s.nbar),
                data,
            };
            let dataset = read_dataset_path(&c.data)?;
            let mut spec = MomentSpec::new(estimator.tag(), c.impose_beta_zero);
            spec.nbar = c.nbar;
            let result = estimate(&dataset, &spec)?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            write_json(&out, &Output { provenance: Provenance::new("estimate", None, &c), result })?;
        }
        Command::Deconvolve { counts, out } => {
            let s = cfg.deconvolve;
            let input = input_file(counts.or(s.counts), "counts")?;
            let out = out.or(s.out);
            output_file(&out)?;
            let counts = read_size_counts(File::open(&input)?)?;
            let total: u64 = counts.iter().sum();
            let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
            let d = deconvolve_exact(&p)?;
            let result = DeconvolveResult { rho: d.rho, q: d.q.probabilities().to_vec() };
            let c = PathConfig { input };
            write_json(&out, &Output { provenance: Provenance::new("deconvolve", None, &c), result })?;
        }
        Command::Idcheck { data, out } => {
            let s = cfg.idcheck;
            let input = input_file(data.or(s.data), "data")?;
            let out = out.or(s.out);
            output_file(&out)?;
            let dataset = read_dataset_path(&input)?;
            let result = report_for_dataset(&dataset, None)?;
            let c = PathConfig { input };
            write_json(&out, &Output { provenance: Provenance::new("idcheck", None, &c), result })?;
        }
        Command::Mc { table, m, reps, grid, sequential, out } => {
            let s = cfg.mc;
            let variant = Variant::from_table(required(table.or(s.table), "table")?)?;
            let dir = out.or(s.out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
            let exec = execution(threads, sequential.or(s.sequential).unwrap_or(false))?;
            let c = McConfig {
                table: variant.table(),
                m: m.or(s.m).unwrap_or(1600),
                reps: reps.or(s.reps).unwrap_or(100),
                grid: grid.or(s.grid).unwrap_or_else(|| variant.default_grid()),
                seed,
            };
            let design = McDesign {
                grid: c.grid.clone(),
                ..McDesign::table(variant, c.m, c.reps, seed)
            };
            design.validate()?;
            std::fs::create_dir_all(&dir)
                .map_err(|e| peerfx::Error::Data(format!("cannot create output directory {}: {e}", dir.display())))?;
            let report = run_mc(&design, exec)?;
            let prov = Provenance::new("mc", Some(seed), &c);
            let stem = dir.join(format!("table{}_m{}", c.table, c.m));
            write_text(&stem.with_extension("csv"), &(prov.comment_lines() + &report.to_csv()))?;
            write_text(&with_suffix(&stem, "_draws.csv"), &(prov.comment_lines() + &report.draws_csv()))?;
            let md = report.to_markdown();
            write_text(
                &stem.with_extension("md"),
                &format!("<!-- {} -->\n\n{md}", prov.comment_lines().trim_end().replace('\n', " ")),
            )?;
            write_json(&Some(with_suffix(&stem, "_provenance.json")), &prov)?;
            print!("{md}");
            if !report.failures.is_empty() {
                let path = with_suffix(&stem, "_failures.csv");
                write_text(&path, &(prov.comment_lines() + &report.failures_csv()))?;
                eprintln!("{} estimator fits failed; details in {}", report.failures.len(), path.display());
            }
        }
    }
    Ok(())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| peerfx::Error::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<peerfx::Error>() {
        Some(peerfx::Error::InvalidParameter(_)) => 1,
        Some(peerfx::Error::Numerical(_)) => 3,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
