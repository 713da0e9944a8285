//! Command-line driver: one subcommand per pipeline stage, file-based handoff,
//! and a JSON run manifest next to every primary output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::complexity::{
    binarize, compute_proximity, compute_rca, export_product_space, load_proximity_csv, phi_histogram,
    write_edges_csv, write_histogram_csv, RcaMatrix,
};
use crate::error::{Error, Result};
use crate::gravity::{
    build_dataset, correlation_matrix, load_concordance_csv, read_reports_json, regression_table_csv,
    run_split_regressions, summary_stats, trend_table_reports, write_correlation_csv,
    write_reports_json, write_summary_csv, write_trend_csv, AssemblySource, DatasetOptions, DatasetReport,
    ExporterThresholds, FitOptions, LallCategory, RegressionReport, Split, StandardizationSpec, TrendRow,
    ZeroPolicy,
};
use crate::ingest::{
    filter_countries, load_country_csv, load_dyad_csv, load_trade_csv, reconcile, write_rejects_csv,
    FilterConfig, ReconcilePolicy, TradeSchema, TradeTensor, Vocabulary, DEFAULT_EXCLUDED,
};
use crate::numeric::{fmt_significant, YearRange};
use crate::oracle::{generate_world, write_world, Geometry, SyntheticWorldConfig, DEFAULT_PLANTED_BETA};
use crate::relatedness::{compute_relatedness, load_relatedness_csv, DistanceWeights, EvaluationSet};

const DEFAULT_PERIODS: [&str; 3] = ["2000-2006", "2007-2012", "2012-2015"];

#[derive(Debug, Parser)]
#[command(
    name = "tradespace",
    version,
    about = "Product space, trade relatedness and extended gravity regressions",
    args_override_self = true
)]
pub struct Cli {
    /// Worker threads for compute stages; 1 runs sequentially. Output does not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// TOML file of default flag values: top-level keys for global flags, one
    /// table per subcommand (e.g. `[gravity] split = "lall"`). Flags given on
    /// the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Parse, clean and reconcile raw trade rows into one value per cell.
    Ingest(IngestArgs),
    /// Revealed comparative advantage over a pooled window.
    Rca(RcaArgs),
    /// Product-space proximity from the binarized RCA matrix.
    Proximity(ProximityArgs),
    /// Product, importer and exporter relatedness of every active cell.
    Relatedness(RelatednessArgs),
    /// Extended gravity regressions, optionally split by period, exporter class or technology.
    Gravity(GravityArgs),
    /// Descriptive statistics and correlation matrix of the regression sample.
    Summary(SummaryArgs),
    /// Sophistication trend of coefficients across the five technology categories.
    Trend(TrendArgs),
    /// Generate a seeded synthetic world in the ingest file formats.
    Synth(SynthArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Rca(_) => "rca",
            Command::Proximity(_) => "proximity",
            Command::Relatedness(_) => "relatedness",
            Command::Gravity(_) => "gravity",
            Command::Summary(_) => "summary",
            Command::Trend(_) => "trend",
            Command::Synth(_) => "synth",
        }
    }
}

const SUBCOMMANDS: [&str; 8] = ["ingest", "rca", "proximity", "relatedness", "gravity", "summary", "trend", "synth"];

fn parse_policy(s: &str) -> std::result::Result<ReconcilePolicy, String> {
    s.parse()
}

fn parse_years(s: &str) -> std::result::Result<YearRange, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Raw trade CSV (`year,origin,destination,product,value,reporter`).
    #[arg(long)]
    pub trade: PathBuf,
    /// Reconciled trade CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Rejected-rows report [default: rejects.csv beside --out].
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// How to combine exporter and importer reports of the same cell:
    /// importer-priority, exporter-priority, max or mean.
    #[arg(long, default_value = "importer-priority", value_parser = parse_policy)]
    pub policy: ReconcilePolicy,
    /// Apply the country filter (needs --countries).
    #[arg(long)]
    pub filter: bool,
    /// Country CSV used by the filter.
    #[arg(long)]
    pub countries: Option<PathBuf>,
    #[arg(long, default_value_t = 1.2e6, value_parser = parse_positive)]
    pub min_population: f64,
    #[arg(long, default_value_t = 2000)]
    pub population_year: i32,
    /// Minimum exports plus imports in --trade-year.
    #[arg(long, default_value_t = 1e9, value_parser = parse_positive)]
    pub min_trade: f64,
    #[arg(long, default_value_t = 2008)]
    pub trade_year: i32,
    /// Countries always removed by the filter.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EXCLUDED.map(String::from))]
    pub exclude: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct RcaArgs {
    /// Reconciled trade CSV.
    #[arg(long)]
    pub trade: PathBuf,
    /// Pooled window, e.g. 2000-2015 [default: every year in the data].
    #[arg(long, value_parser = parse_years)]
    pub window: Option<YearRange>,
    /// Output CSV `origin,product,rca`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProximityArgs {
    #[arg(long)]
    pub trade: PathBuf,
    /// RCA window [default: every year in the data].
    #[arg(long, value_parser = parse_years)]
    pub window: Option<YearRange>,
    /// RCA at or above this counts as an advantage.
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    pub threshold: f64,
    /// Only pairs with φ at or above this are written.
    #[arg(long, default_value_t = 0.0)]
    pub cutoff: f64,
    /// Output CSV `product_i,product_j,phi`.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional histogram CSV of φ.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RelatednessArgs {
    #[arg(long)]
    pub trade: PathBuf,
    /// Proximity CSV from the `proximity` stage.
    #[arg(long)]
    pub proximity: PathBuf,
    /// Dyad CSV with distances for every country pair.
    #[arg(long)]
    pub dyads: PathBuf,
    /// Years to evaluate [default: every year in the data].
    #[arg(long, value_parser = parse_years)]
    pub years: Option<YearRange>,
    /// Evaluate every cell with positive denominators, not only active flows.
    #[arg(long)]
    pub dense: bool,
    /// Output CSV `year,origin,product,destination,omega,omega_d,omega_o`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum SplitKind {
    /// One pooled fit per period.
    None,
    /// Same as `none`: each period is its own estimation sample.
    Period,
    /// New, nascent and experienced exporters within each period.
    Exporter,
    /// The five technology categories within each period, plus the trend test.
    Lall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ZeroArg {
    /// Drop cells that vanish at t + horizon.
    Drop,
    /// Keep them with response ln(1 + x).
    Log1p,
}

impl From<ZeroArg> for ZeroPolicy {
    fn from(z: ZeroArg) -> Self {
        match z {
            ZeroArg::Drop => ZeroPolicy::Drop,
            ZeroArg::Log1p => ZeroPolicy::Log1p,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub trade: PathBuf,
    /// Relatedness CSV from the `relatedness` stage.
    #[arg(long)]
    pub relatedness: PathBuf,
    /// Country CSV (`code,year,population,gdp_per_capita`).
    #[arg(long)]
    pub countries: PathBuf,
    /// Dyad CSV.
    #[arg(long)]
    pub dyads: PathBuf,
    /// Years between the regressors and the response.
    #[arg(long, default_value_t = 2)]
    pub horizon: i32,
    #[arg(long, value_enum, default_value_t = ZeroArg::Drop)]
    pub zeros: ZeroArg,
}

#[derive(Debug, Args, Serialize)]
pub struct GravityArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    /// Estimation periods (repeatable).
    #[arg(long = "period", value_parser = parse_years, default_values_t = DEFAULT_PERIODS.map(|p| p.parse::<YearRange>().expect("valid default period")))]
    pub periods: Vec<YearRange>,
    #[arg(long, value_enum, default_value_t = SplitKind::None)]
    pub split: SplitKind,
    /// Concordance CSV `hs4,sitc3,category` (required by --split lall).
    #[arg(long)]
    pub concordance: Option<PathBuf>,
    /// RCA window for exporter classes [default: each period's start year].
    #[arg(long, value_parser = parse_years)]
    pub rca_window: Option<YearRange>,
    /// RCA below this marks a new exporter.
    #[arg(long, default_value_t = 0.2, value_parser = parse_positive)]
    pub new_below: f64,
    /// RCA above this marks an experienced exporter.
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    pub experienced_above: f64,
    /// Fit on raw regressors instead of z-scores.
    #[arg(long)]
    pub no_standardize: bool,
    /// Also z-score the response.
    #[arg(long)]
    pub standardize_response: bool,
    /// Regression results JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Regression table CSV.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Trend CSV for --split lall [default: beside --out].
    #[arg(long)]
    pub trend: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SummaryArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    #[arg(long, value_parser = parse_years, default_value = "2000-2006")]
    pub period: YearRange,
    /// Summary statistics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Correlation matrix CSV.
    #[arg(long)]
    pub correlation: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrendArgs {
    /// Regression JSON holding the five technology-category results.
    #[arg(long)]
    pub regressions: PathBuf,
    /// Trend CSV `variable,slope,se,p,significant`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long = "n-countries", default_value_t = 12)]
    pub n_countries: usize,
    #[arg(long = "n-products", default_value_t = 10)]
    pub n_products: usize,
    #[arg(long = "n-years", default_value_t = 7)]
    pub n_years: usize,
    #[arg(long, default_value_t = 2000)]
    pub start_year: i32,
    #[arg(long, default_value_t = 2)]
    pub horizon: usize,
    /// Probability that an (origin, product, destination) cell trades.
    #[arg(long, default_value_t = 0.6)]
    pub sparsity: f64,
    /// Standard deviation of the log-scale noise.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Directory for trade.csv, countries.csv, dyads.csv, proximity.csv, lall.csv and planted.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    version: &'static str,
    config: serde_json::Value,
    config_hash: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    counts: BTreeMap<String, u64>,
    wall_time_seconds: f64,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Inputs, outputs and counts of one stage run.
struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    counts: BTreeMap<String, u64>,
    manifest: PathBuf,
}

impl Run {
    fn new(manifest: PathBuf) -> Self {
        Run {
            inputs: Vec::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
            manifest,
        }
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn count(&mut self, key: &str, n: usize) {
        self.counts.insert(key.to_string(), n as u64);
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(command: &Command, run: &Run, started: Instant) -> Result<()> {
    let config = serde_json::to_value(command)?;
    let canonical = serde_json::to_string(&config)?;
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hex::encode(Sha256::digest(canonical.as_bytes())),
        config,
        inputs: run.inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        outputs: run.outputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        counts: run.counts.clone(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let mut out = create(&run.manifest)?;
    serde_json::to_writer_pretty(&mut out, &manifest)?;
    out.write_all(b"\n").map_err(|e| Error::io(&run.manifest, e))?;
    out.flush().map_err(|e| Error::io(&run.manifest, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing input file (run the upstream stage first)"),
        ))
    }
}

/// Loads a trade CSV and reconciles it; stage outputs are already one row per cell.
fn load_tensor(path: &Path, run: &mut Run) -> Result<TradeTensor> {
    require(path)?;
    run.input(path);
    let loaded = load_trade_csv(path, &TradeSchema::default(), &Vocabulary::default())?;
    if !loaded.rejects.is_empty() {
        log::warn!("{}: {} rows rejected", path.display(), loaded.rejects.len());
    }
    let (tensor, _) = reconcile(&loaded.records, ReconcilePolicy::default())?;
    log::info!("{}: {} cells over {} years", path.display(), tensor.n_cells(), tensor.slices().len());
    Ok(tensor)
}

fn full_window(tensor: &TradeTensor) -> Result<YearRange> {
    let years: Vec<i32> = tensor.years().collect();
    match (years.first(), years.last()) {
        (Some(&a), Some(&b)) => YearRange::new(a, b),
        _ => Err(Error::Empty("trade data has no flows".into())),
    }
}

fn run_ingest(args: &IngestArgs, run: &mut Run) -> Result<()> {
    require(&args.trade)?;
    run.input(&args.trade);
    let loaded = load_trade_csv(&args.trade, &TradeSchema::default(), &Vocabulary::default())?;
    run.count("records", loaded.records.len());
    run.count("rejected_rows", loaded.rejects.len());
    run.count("zero_rows", loaded.zero_rows);
    let (mut tensor, audit) = reconcile(&loaded.records, args.policy)?;
    run.count("exporter_only_cells", audit.exporter_only);
    run.count("importer_only_cells", audit.importer_only);
    run.count("both_reported_cells", audit.both);
    run.count("discrepant_cells", audit.discrepant_both);
    if args.filter {
        let path = args.countries.as_ref().expect("checked by validate");
        require(path)?;
        run.input(path);
        let meta = load_country_csv(path)?;
        let rules = FilterConfig {
            min_population: args.min_population,
            population_year: args.population_year,
            min_trade: args.min_trade,
            trade_year: args.trade_year,
            excluded: args.exclude.clone(),
        };
        let (kept, report) = filter_countries(&tensor, &meta, &rules)?;
        for (code, reason) in &report.removed {
            log::info!("removed {code}: {reason:?}");
        }
        run.count("removed_countries", report.removed.len());
        run.count("removed_cells", report.removed_cells);
        tensor = kept;
    }
    tensor.write_csv(create(&args.out)?)?;
    run.output(&args.out);
    run.count("cells", tensor.n_cells());
    let rejects = args
        .rejects
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("rejects.csv"));
    write_rejects_csv(create(&rejects)?, &loaded.rejects)?;
    run.output(&rejects);
    Ok(())
}

fn write_rca_csv(path: &Path, rca: &RcaMatrix) -> Result<usize> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["origin", "product", "rca"])?;
    let mut rows = 0;
    for (o, country) in rca.countries().iter().enumerate() {
        for (p, product) in rca.products().iter().enumerate() {
            if let Some(v) = rca.get(o, p) {
                w.write_record([country.as_str(), product.as_str(), fmt_significant(v, 10).as_str()])?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

fn run_rca(args: &RcaArgs, run: &mut Run) -> Result<()> {
    let tensor = load_tensor(&args.trade, run)?;
    let window = match args.window {
        Some(w) => w,
        None => full_window(&tensor)?,
    };
    let rca = compute_rca(&tensor, window)?;
    let rows = write_rca_csv(&args.out, &rca)?;
    run.output(&args.out);
    run.count("rows", rows);
    Ok(())
}

fn run_proximity(args: &ProximityArgs, run: &mut Run) -> Result<()> {
    let tensor = load_tensor(&args.trade, run)?;
    let window = match args.window {
        Some(w) => w,
        None => full_window(&tensor)?,
    };
    let m = binarize(&compute_rca(&tensor, window)?, args.threshold)?;
    let phi = compute_proximity(&m);
    let edges = export_product_space(&phi, args.cutoff)?;
    write_edges_csv(create(&args.out)?, &edges)?;
    run.output(&args.out);
    run.count("products", phi.len());
    run.count("pairs", edges.len());
    if let Some(path) = &args.histogram {
        write_histogram_csv(create(path)?, &phi_histogram(&phi, args.bins)?)?;
        run.output(path);
    }
    Ok(())
}

fn run_relatedness(args: &RelatednessArgs, run: &mut Run) -> Result<()> {
    let tensor = load_tensor(&args.trade, run)?;
    require(&args.proximity)?;
    run.input(&args.proximity);
    let phi = load_proximity_csv(&args.proximity)?;
    require(&args.dyads)?;
    run.input(&args.dyads);
    let dyads = load_dyad_csv(&args.dyads)?;
    let weights = DistanceWeights::from_dyads(tensor.countries(), &dyads)?;
    let years: Vec<i32> = match args.years {
        Some(range) => tensor.years().filter(|y| range.contains(*y)).collect(),
        None => tensor.years().collect(),
    };
    let eval = if args.dense { EvaluationSet::Dense } else { EvaluationSet::Active };
    let rel = compute_relatedness(&tensor, &phi, &weights, &years, eval)?;
    for code in rel.skipped_products() {
        log::warn!("product {code} has no proximity to any other product; skipped");
    }
    rel.write_csv(create(&args.out)?)?;
    run.output(&args.out);
    run.count("cells", rel.len());
    run.count("skipped_products", rel.skipped_products().len());
    Ok(())
}

struct Sample {
    tensor: TradeTensor,
    relatedness: crate::relatedness::RelatednessTensor,
    countries: crate::ingest::CountryTable,
    dyads: crate::ingest::DyadTable,
    options: DatasetOptions,
}

fn load_sample(args: &SampleArgs, run: &mut Run) -> Result<Sample> {
    let tensor = load_tensor(&args.trade, run)?;
    for path in [&args.relatedness, &args.countries, &args.dyads] {
        require(path)?;
        run.input(path);
    }
    Ok(Sample {
        relatedness: load_relatedness_csv(&args.relatedness, &tensor)?,
        countries: load_country_csv(&args.countries)?,
        dyads: load_dyad_csv(&args.dyads)?,
        tensor,
        options: DatasetOptions {
            horizon: args.horizon,
            zeros: args.zeros.into(),
        },
    })
}

fn count_report(run: &mut Run, prefix: &str, report: &DatasetReport) {
    run.count(&format!("{prefix}candidates"), report.candidates);
    run.count(&format!("{prefix}rows"), report.rows);
    run.count(&format!("{prefix}exits"), report.exits);
    run.count(&format!("{prefix}missing_relatedness"), report.missing_relatedness);
}

fn write_trend(path: &Path, rows: &[TrendRow], run: &mut Run) -> Result<()> {
    write_trend_csv(create(path)?, rows)?;
    run.output(path);
    Ok(())
}

/// `dir/stem_suffix.ext` for per-period trend files.
fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{suffix}"),
    };
    path.with_file_name(name)
}

fn run_gravity(args: &GravityArgs, run: &mut Run) -> Result<()> {
    let sample = load_sample(&args.sample, run)?;
    let fit = FitOptions {
        standardize: !args.no_standardize,
        standardize_response: args.standardize_response,
    };
    let concordance = match (args.split, &args.concordance) {
        (SplitKind::Lall, Some(path)) => {
            require(path)?;
            run.input(path);
            let c = load_concordance_csv(path)?;
            let coverage = c.coverage(sample.tensor.products());
            run.count("unmapped_products", coverage.unmapped.len());
            run.count("excluded_products", coverage.excluded);
            Some(c)
        }
        _ => None,
    };
    let thresholds = ExporterThresholds {
        new_below: args.new_below,
        experienced_above: args.experienced_above,
    };

    let multi = args.periods.len() > 1;
    let mut reports = Vec::new();
    let mut trends = Vec::new();
    for &period in &args.periods {
        let prefix = if multi { format!("{period}/") } else { String::new() };
        match args.split {
            SplitKind::None | SplitKind::Period => {
                // Streamed: rows are regenerated per pass, never materialized.
                let source = AssemblySource::new(
                    &sample.tensor,
                    &sample.relatedness,
                    &sample.countries,
                    &sample.dyads,
                    period,
                    sample.options,
                )?;
                let spec = if fit.standardize {
                    StandardizationSpec::fit(&source, fit.standardize_response)?
                } else {
                    StandardizationSpec::identity()
                };
                let result = crate::gravity::fit_source(&source, &spec)?;
                let report = source.scan(&mut |_| Ok(()))?;
                count_report(run, &prefix, &report);
                reports.push(RegressionReport::new(&period.to_string(), &result));
            }
            SplitKind::Exporter | SplitKind::Lall => {
                let dataset = build_dataset(
                    &sample.tensor,
                    &sample.relatedness,
                    &sample.countries,
                    &sample.dyads,
                    period,
                    sample.options,
                )?;
                count_report(run, &prefix, &dataset.report);
                let rca;
                let split = if args.split == SplitKind::Exporter {
                    let window = args.rca_window.unwrap_or(YearRange::single(period.start));
                    rca = compute_rca(&sample.tensor, window)?;
                    Split::ExporterClass { rca: &rca, thresholds }
                } else {
                    Split::Lall {
                        concordance: concordance.as_ref().expect("checked above"),
                    }
                };
                let outcome = run_split_regressions(&dataset, &split, &fit)?;
                for cell in &outcome.skipped {
                    log::warn!("{period} {}: skipped ({}, n = {})", cell.key, cell.reason, cell.n);
                }
                let cells: Vec<RegressionReport> = outcome
                    .results
                    .iter()
                    .map(|(key, result)| RegressionReport::new(&format!("{prefix}{key}"), result))
                    .collect();
                // Trends come from the reported figures so `trend` on the JSON reproduces them.
                if args.split == SplitKind::Lall {
                    if cells.len() == LallCategory::RANKED.len() {
                        trends.push((period, trend_table_reports(&cells)?));
                    } else {
                        log::warn!("{period}: fewer than five technology categories fitted; no trend test");
                    }
                }
                reports.extend(cells);
            }
        }
    }
    run.count("regressions", reports.len());
    write_reports_json(create(&args.out)?, &reports)?;
    run.output(&args.out);
    if let Some(path) = &args.table {
        regression_table_csv(create(path)?, &reports)?;
        run.output(path);
    }
    if args.split == SplitKind::Lall {
        let base = args.trend.clone().unwrap_or_else(|| args.out.with_extension("trend.csv"));
        for (period, rows) in &trends {
            let path = if multi { suffixed(&base, &period.to_string()) } else { base.clone() };
            write_trend(&path, rows, run)?;
        }
    }
    Ok(())
}

fn run_summary(args: &SummaryArgs, run: &mut Run) -> Result<()> {
    let sample = load_sample(&args.sample, run)?;
    let dataset = build_dataset(
        &sample.tensor,
        &sample.relatedness,
        &sample.countries,
        &sample.dyads,
        args.period,
        sample.options,
    )?;
    count_report(run, "", &dataset.report);
    write_summary_csv(create(&args.out)?, &summary_stats(&dataset.rows)?)?;
    run.output(&args.out);
    if let Some(path) = &args.correlation {
        write_correlation_csv(create(path)?, &correlation_matrix(&dataset.rows)?)?;
        run.output(path);
    }
    Ok(())
}

/// Groups reports by the prefix before `/` and keeps groups holding all five
/// technology categories, in rank order.
fn lall_groups(reports: &[RegressionReport]) -> Vec<(String, Vec<RegressionReport>)> {
    let mut groups: BTreeMap<String, Vec<&RegressionReport>> = BTreeMap::new();
    for r in reports {
        let (prefix, key) = r.split_key.rsplit_once('/').unwrap_or(("", r.split_key.as_str()));
        if LallCategory::from_code(key).and_then(|c| c.rank()).is_some() {
            groups.entry(prefix.to_string()).or_default().push(r);
        }
    }
    groups
        .into_iter()
        .filter_map(|(prefix, members)| {
            let ordered: Option<Vec<RegressionReport>> = LallCategory::RANKED
                .iter()
                .map(|cat| {
                    members
                        .iter()
                        .find(|r| r.split_key.rsplit('/').next() == Some(cat.code()))
                        .map(|r| (*r).clone())
                })
                .collect();
            ordered.map(|o| (prefix, o))
        })
        .collect()
}

fn run_trend(args: &TrendArgs, run: &mut Run) -> Result<()> {
    require(&args.regressions)?;
    run.input(&args.regressions);
    let file = File::open(&args.regressions).map_err(|e| Error::io(&args.regressions, e))?;
    let reports = read_reports_json(file)?;
    let groups = lall_groups(&reports);
    if groups.is_empty() {
        return Err(Error::Empty(format!(
            "{} holds no complete set of PP, RB, LT, MT, HT results",
            args.regressions.display()
        )));
    }
    let multi = groups.len() > 1;
    for (prefix, members) in &groups {
        let rows = trend_table_reports(members)?;
        let path = if multi { suffixed(&args.out, prefix) } else { args.out.clone() };
        write_trend(&path, &rows, run)?;
    }
    run.count("groups", groups.len());
    Ok(())
}

fn run_synth(args: &SynthArgs, run: &mut Run) -> Result<()> {
    let config = SyntheticWorldConfig {
        n_countries: args.n_countries,
        n_products: args.n_products,
        n_years: args.n_years,
        start_year: args.start_year,
        horizon: args.horizon,
        geometry: Geometry::Sphere,
        planted_beta: DEFAULT_PLANTED_BETA,
        noise_sigma: args.noise,
        sparsity: args.sparsity,
        seed: args.seed,
    };
    let world = generate_world(&config)?;
    let files = write_world(&world, &args.out_dir)?;
    for path in [&files.trade, &files.countries, &files.dyads, &files.proximity, &files.concordance, &files.planted] {
        run.output(path);
    }
    run.count("cells", world.tensor.n_cells());
    Ok(())
}

fn manifest_for(command: &Command) -> PathBuf {
    match command {
        Command::Ingest(a) => manifest_path(&a.out),
        Command::Rca(a) => manifest_path(&a.out),
        Command::Proximity(a) => manifest_path(&a.out),
        Command::Relatedness(a) => manifest_path(&a.out),
        Command::Gravity(a) => manifest_path(&a.out),
        Command::Summary(a) => manifest_path(&a.out),
        Command::Trend(a) => manifest_path(&a.out),
        Command::Synth(a) => a.out_dir.join("manifest.json"),
    }
}

fn execute(command: &Command) -> Result<()> {
    let started = Instant::now();
    let mut run = Run::new(manifest_for(command));
    match command {
        Command::Ingest(a) => run_ingest(a, &mut run)?,
        Command::Rca(a) => run_rca(a, &mut run)?,
        Command::Proximity(a) => run_proximity(a, &mut run)?,
        Command::Relatedness(a) => run_relatedness(a, &mut run)?,
        Command::Gravity(a) => run_gravity(a, &mut run)?,
        Command::Summary(a) => run_summary(a, &mut run)?,
        Command::Trend(a) => run_trend(a, &mut run)?,
        Command::Synth(a) => run_synth(a, &mut run)?,
    }
    for (key, n) in &run.counts {
        log::info!("{key}: {n}");
    }
    write_manifest(command, &run, started)
}

fn flag_present(args: &[OsString], flag: &str) -> bool {
    let eq = format!("{flag}=");
    args.iter().any(|a| a.to_str().is_some_and(|s| s == flag || s.starts_with(&eq)))
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn toml_flags(table: &toml::Table, args: &[OsString], out: &mut Vec<OsString>) -> std::result::Result<(), String> {
    for (key, value) in table {
        if value.is_table() {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        if flag_present(args, &flag) {
            continue;
        }
        let scalar = |v: &toml::Value| -> std::result::Result<String, String> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(f.to_string()),
                other => Err(format!("unsupported value for `{key}`: {other}")),
            }
        };
        match value {
            toml::Value::Boolean(true) => out.push(flag.into()),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                for item in items {
                    out.push(flag.clone().into());
                    out.push(scalar(item)?.into());
                }
            }
            v => {
                out.push(flag.into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(())
}

/// Splices defaults from the `--config` file into the argument list, skipping
/// any flag already given explicitly.
fn merge_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
    let Some(sub_at) = args
        .iter()
        .position(|a| a.to_str().is_some_and(|s| SUBCOMMANDS.contains(&s)))
    else {
        return Ok(args);
    };
    let mut global = Vec::new();
    toml_flags(&table, &args, &mut global)?;
    let mut local = Vec::new();
    if let Some(sub) = table.get(args[sub_at].to_string_lossy().as_ref()) {
        let sub = sub
            .as_table()
            .ok_or_else(|| format!("{}: `{}` must be a table", path.display(), args[sub_at].to_string_lossy()))?;
        toml_flags(sub, &args, &mut local)?;
    }
    let mut merged = Vec::with_capacity(args.len() + global.len() + local.len());
    merged.push(args[0].clone());
    merged.extend(global);
    merged.extend_from_slice(&args[1..=sub_at]);
    merged.extend(local);
    merged.extend_from_slice(&args[sub_at + 1..]);
    Ok(merged)
}

fn usage_error(kind: ErrorKind, message: impl std::fmt::Display) -> i32 {
    let err = Cli::command().error(kind, message);
    let _ = err.print();
    err.exit_code()
}

/// Runs the CLI on `args` (program name first) and returns the exit code:
/// 0 success, 1 data error, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match merge_config(args) {
        Ok(a) => a,
        Err(message) => return usage_error(ErrorKind::InvalidValue, message),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return err.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage_error(ErrorKind::InvalidValue, "--threads must be at least 1");
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build();
        return match pool {
            Ok(pool) => pool.install(|| finish(&cli.command)),
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        };
    }
    finish(&cli.command)
}

/// Flag combinations clap cannot express.
fn validate(command: &Command) -> Option<String> {
    match command {
        Command::Ingest(a) if a.filter && a.countries.is_none() => Some("--filter needs --countries".into()),
        Command::Gravity(a) if a.split == SplitKind::Lall && a.concordance.is_none() => {
            Some("--split lall needs --concordance".into())
        }
        Command::Gravity(a) if a.new_below > a.experienced_above => {
            Some("--new-below must not exceed --experienced-above".into())
        }
        Command::Gravity(a) if a.periods.is_empty() => Some("at least one --period is required".into()),
        Command::Proximity(a) if a.bins == 0 => Some("--bins must be at least 1".into()),
        _ => None,
    }
}

fn finish(command: &Command) -> i32 {
    if let Some(message) = validate(command) {
        return usage_error(ErrorKind::ArgumentConflict, message);
    }
    match execute(command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
