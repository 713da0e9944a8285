//! Loading, reconciliation and filtering of raw bilateral trade flows and the
//! country / dyad covariate tables.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::YearRange;

pub const DEFAULT_EXCLUDED: [&str; 3] = ["IRQ", "TCD", "MAC"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reporter {
    Exporter,
    Importer,
}

impl FromStr for Reporter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exporter" | "export" | "x" => Ok(Reporter::Exporter),
            "importer" | "import" | "m" => Ok(Reporter::Importer),
            other => Err(format!("unknown reporter `{other}`")),
        }
    }
}

impl fmt::Display for Reporter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reporter::Exporter => "exporter",
            Reporter::Importer => "importer",
        })
    }
}

/// One reported flow before reconciliation.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeFlowRecord {
    pub year: i32,
    pub origin: String,
    pub destination: String,
    pub product: String,
    pub value: f64,
    pub reporter: Reporter,
}

/// Column names of the trade CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeSchema {
    pub year: String,
    pub origin: String,
    pub destination: String,
    pub product: String,
    pub value: String,
    pub reporter: String,
}

impl Default for TradeSchema {
    fn default() -> Self {
        TradeSchema {
            year: "year".into(),
            origin: "origin".into(),
            destination: "destination".into(),
            product: "product".into(),
            value: "value".into(),
            reporter: "reporter".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    BadProductCode,
    BadCountryCode,
    UnknownCountry,
    UnknownProduct,
    SelfFlow,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::BadProductCode => "bad_product_code",
            RejectReason::BadCountryCode => "bad_country_code",
            RejectReason::UnknownCountry => "unknown_country",
            RejectReason::UnknownProduct => "unknown_product",
            RejectReason::SelfFlow => "self_flow",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    pub line: u64,
    pub reason: RejectReason,
    pub raw: String,
}

/// Optional closed vocabularies; codes outside them are rejected.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    pub countries: Option<HashSet<String>>,
    pub products: Option<HashSet<String>>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedTrade {
    pub records: Vec<TradeFlowRecord>,
    pub rejects: Vec<RejectedRow>,
    pub zero_rows: usize,
}

pub fn is_country_code(s: &str) -> bool {
    s.len() == 3 && s.bytes().all(|b| b.is_ascii_uppercase())
}

pub fn is_product_code(s: &str) -> bool {
    s.len() == 4 && s.bytes().all(|b| b.is_ascii_digit())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn column(headers: &csv::StringRecord, name: &str, source: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::parse(source, 1, format!("header is missing column `{name}`")))
}

pub fn load_trade_csv(
    path: impl AsRef<Path>,
    schema: &TradeSchema,
    vocabulary: &Vocabulary,
) -> Result<LoadedTrade> {
    let path = path.as_ref();
    read_trade_csv(open(path)?, schema, vocabulary, &path.display().to_string())
}

/// Parses trade rows. Malformed rows abort with the offending line number;
/// rows with invalid or unknown codes go to `rejects`; zero values are dropped.
pub fn read_trade_csv<R: Read>(
    reader: R,
    schema: &TradeSchema,
    vocabulary: &Vocabulary,
    source_name: &str,
) -> Result<LoadedTrade> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx_year = column(&headers, &schema.year, source_name)?;
    let idx_origin = column(&headers, &schema.origin, source_name)?;
    let idx_dest = column(&headers, &schema.destination, source_name)?;
    let idx_product = column(&headers, &schema.product, source_name)?;
    let idx_value = column(&headers, &schema.value, source_name)?;
    let idx_reporter = column(&headers, &schema.reporter, source_name)?;

    let mut out = LoadedTrade::default();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(Error::parse(source_name, line, e.to_string())),
        }
        if row.len() != headers.len() {
            return Err(Error::parse(
                source_name,
                line,
                format!("expected {} fields, found {}", headers.len(), row.len()),
            ));
        }
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let year: i32 = field(idx_year)
            .parse()
            .map_err(|_| Error::parse(source_name, line, format!("bad year `{}`", field(idx_year))))?;
        let value: f64 = field(idx_value).parse().map_err(|_| {
            Error::parse(source_name, line, format!("bad value `{}`", field(idx_value)))
        })?;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::parse(
                source_name,
                line,
                format!("trade value must be finite and non-negative, got {value}"),
            ));
        }
        let reporter: Reporter = field(idx_reporter)
            .parse()
            .map_err(|e: String| Error::parse(source_name, line, e))?;
        let origin = field(idx_origin);
        let destination = field(idx_dest);
        let product = field(idx_product);

        let reject = if !is_product_code(product) {
            Some(RejectReason::BadProductCode)
        } else if !is_country_code(origin) || !is_country_code(destination) {
            Some(RejectReason::BadCountryCode)
        } else if vocabulary
            .countries
            .as_ref()
            .is_some_and(|v| !v.contains(origin) || !v.contains(destination))
        {
            Some(RejectReason::UnknownCountry)
        } else if vocabulary.products.as_ref().is_some_and(|v| !v.contains(product)) {
            Some(RejectReason::UnknownProduct)
        } else if origin == destination {
            Some(RejectReason::SelfFlow)
        } else {
            None
        };
        if let Some(reason) = reject {
            out.rejects.push(RejectedRow {
                line,
                reason,
                raw: row.iter().collect::<Vec<_>>().join(","),
            });
            continue;
        }
        if value == 0.0 {
            out.zero_rows += 1;
            continue;
        }
        out.records.push(TradeFlowRecord {
            year,
            origin: origin.to_string(),
            destination: destination.to_string(),
            product: product.to_string(),
            value,
            reporter,
        });
    }
    Ok(out)
}

pub fn write_rejects_csv<W: Write>(writer: W, rejects: &[RejectedRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["line", "reason", "raw"])?;
    for r in rejects {
        w.write_record([r.line.to_string().as_str(), r.reason.code(), r.raw.as_str()])?;
    }
    w.flush().map_err(|e| Error::io("rejects", e))?;
    Ok(())
}

/// A positive flow addressed by dense country/product indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow {
    pub origin: u32,
    pub product: u32,
    pub destination: u32,
    pub value: f64,
}

impl Flow {
    #[inline]
    pub fn key(&self) -> (u32, u32, u32) {
        (self.origin, self.product, self.destination)
    }
}

/// Dense marginals of one year: `x_od`, `x_op`, `x_pd` and the world total.
#[derive(Debug, Clone, PartialEq)]
pub struct YearMarginals {
    n_countries: usize,
    n_products: usize,
    od: Vec<f64>,
    op: Vec<f64>,
    pd: Vec<f64>,
    total: f64,
}

impl YearMarginals {
    fn compute(flows: &[Flow], n_countries: usize, n_products: usize) -> Self {
        let mut m = YearMarginals {
            n_countries,
            n_products,
            od: vec![0.0; n_countries * n_countries],
            op: vec![0.0; n_countries * n_products],
            pd: vec![0.0; n_products * n_countries],
            total: 0.0,
        };
        for f in flows {
            let (o, p, d) = (f.origin as usize, f.product as usize, f.destination as usize);
            m.od[o * n_countries + d] += f.value;
            m.op[o * n_products + p] += f.value;
            m.pd[p * n_countries + d] += f.value;
            m.total += f.value;
        }
        m
    }

    #[inline]
    pub fn x_od(&self, o: u32, d: u32) -> f64 {
        self.od[o as usize * self.n_countries + d as usize]
    }

    #[inline]
    pub fn x_op(&self, o: u32, p: u32) -> f64 {
        self.op[o as usize * self.n_products + p as usize]
    }

    #[inline]
    pub fn x_pd(&self, p: u32, d: u32) -> f64 {
        self.pd[p as usize * self.n_countries + d as usize]
    }

    pub fn total(&self) -> f64 {
        self.total
    }
}

/// All flows of one calendar year, sorted by (origin, product, destination).
#[derive(Debug, Clone, PartialEq)]
pub struct YearSlice {
    year: i32,
    flows: Vec<Flow>,
    marginals: YearMarginals,
}

impl YearSlice {
    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn marginals(&self) -> &YearMarginals {
        &self.marginals
    }

    pub fn value(&self, o: u32, p: u32, d: u32) -> Option<f64> {
        self.flows
            .binary_search_by(|f| f.key().cmp(&(o, p, d)))
            .ok()
            .map(|i| self.flows[i].value)
    }

    /// Exports of `o` summed over destinations.
    pub fn exports(&self, o: u32) -> f64 {
        let n_products = self.marginals.n_products as u32;
        (0..n_products).map(|p| self.marginals.x_op(o, p)).sum()
    }

    /// Imports of `d` summed over origins.
    pub fn imports(&self, d: u32) -> f64 {
        let n_countries = self.marginals.n_countries as u32;
        (0..n_countries).map(|o| self.marginals.x_od(o, d)).sum()
    }
}

/// Reconciled trade panel: `(year, origin, product, destination) -> USD`.
///
/// Only strictly positive values are stored. Country and product codes are
/// frozen into sorted vocabularies and addressed by dense indices; marginals
/// are computed once per year when the tensor is built.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeTensor {
    countries: Vec<String>,
    products: Vec<String>,
    years: Vec<YearSlice>,
}

impl TradeTensor {
    /// Builds a tensor from coded cells. Duplicate cells are summed; zero
    /// values are dropped.
    pub fn from_cells<I, S>(cells: I) -> Result<Self>
    where
        I: IntoIterator<Item = (i32, S, S, S, f64)>,
        S: AsRef<str>,
    {
        let mut map: BTreeMap<(i32, String, String, String), f64> = BTreeMap::new();
        for (year, o, p, d, v) in cells {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "trade value must be finite and non-negative, got {v}"
                )));
            }
            if o.as_ref() == d.as_ref() {
                return Err(Error::InvalidArgument(format!(
                    "self flow for {} in {year}",
                    o.as_ref()
                )));
            }
            if v > 0.0 {
                *map.entry((
                    year,
                    o.as_ref().to_string(),
                    p.as_ref().to_string(),
                    d.as_ref().to_string(),
                ))
                .or_insert(0.0) += v;
            }
        }
        let mut countries = BTreeSet::new();
        let mut products = BTreeSet::new();
        for (_, o, p, d) in map.keys() {
            countries.insert(o.clone());
            countries.insert(d.clone());
            products.insert(p.clone());
        }
        let countries: Vec<String> = countries.into_iter().collect();
        let products: Vec<String> = products.into_iter().collect();
        let c_idx: HashMap<&str, u32> = countries
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i as u32))
            .collect();
        let p_idx: HashMap<&str, u32> = products
            .iter()
            .enumerate()
            .map(|(i, p)| (p.as_str(), i as u32))
            .collect();
        let mut by_year: BTreeMap<i32, Vec<Flow>> = BTreeMap::new();
        for ((year, o, p, d), v) in map {
            by_year.entry(year).or_default().push(Flow {
                origin: c_idx[o.as_str()],
                product: p_idx[p.as_str()],
                destination: c_idx[d.as_str()],
                value: v,
            });
        }
        Ok(Self::from_indexed(countries, products, by_year))
    }

    /// Builds a tensor from flows already expressed in the given vocabularies.
    /// Zero flows are dropped; duplicates are summed.
    pub fn from_indexed(
        countries: Vec<String>,
        products: Vec<String>,
        by_year: BTreeMap<i32, Vec<Flow>>,
    ) -> Self {
        let (nc, np) = (countries.len(), products.len());
        let years = by_year
            .into_iter()
            .filter_map(|(year, mut flows)| {
                flows.retain(|f| f.value > 0.0);
                flows.sort_by_key(Flow::key);
                flows.dedup_by(|later, kept| {
                    if later.key() == kept.key() {
                        kept.value += later.value;
                        true
                    } else {
                        false
                    }
                });
                if flows.is_empty() {
                    return None;
                }
                let marginals = YearMarginals::compute(&flows, nc, np);
                Some(YearSlice {
                    year,
                    flows,
                    marginals,
                })
            })
            .collect();
        TradeTensor {
            countries,
            products,
            years,
        }
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.years.iter().map(|y| y.year)
    }

    pub fn slices(&self) -> &[YearSlice] {
        &self.years
    }

    pub fn year(&self, year: i32) -> Option<&YearSlice> {
        self.years
            .binary_search_by_key(&year, |y| y.year)
            .ok()
            .map(|i| &self.years[i])
    }

    pub fn country_index(&self, code: &str) -> Option<u32> {
        self.countries
            .binary_search_by(|c| c.as_str().cmp(code))
            .ok()
            .map(|i| i as u32)
    }

    pub fn product_index(&self, code: &str) -> Option<u32> {
        self.products
            .binary_search_by(|c| c.as_str().cmp(code))
            .ok()
            .map(|i| i as u32)
    }

    pub fn value(&self, year: i32, o: u32, p: u32, d: u32) -> Option<f64> {
        self.year(year).and_then(|y| y.value(o, p, d))
    }

    pub fn n_cells(&self) -> usize {
        self.years.iter().map(|y| y.flows.len()).sum()
    }

    pub fn total_value(&self) -> f64 {
        crate::numeric::exact_sum(self.years.iter().flat_map(|y| y.flows.iter().map(|f| f.value)))
    }

    /// Recomputes marginals from entries and checks them against the cached copies.
    pub fn marginals_consistent(&self) -> bool {
        self.years.iter().all(|y| {
            YearMarginals::compute(&y.flows, self.countries.len(), self.products.len())
                == y.marginals
        })
    }

    /// Keeps only the given years.
    pub fn restrict_years(&self, window: YearRange) -> TradeTensor {
        TradeTensor {
            countries: self.countries.clone(),
            products: self.products.clone(),
            years: self
                .years
                .iter()
                .filter(|y| window.contains(y.year))
                .cloned()
                .collect(),
        }
    }

    /// Iterates `(year, origin, product, destination, value)` with codes.
    pub fn iter_coded(&self) -> impl Iterator<Item = (i32, &str, &str, &str, f64)> + '_ {
        self.years.iter().flat_map(move |y| {
            y.flows.iter().map(move |f| {
                (
                    y.year,
                    self.countries[f.origin as usize].as_str(),
                    self.products[f.product as usize].as_str(),
                    self.countries[f.destination as usize].as_str(),
                    f.value,
                )
            })
        })
    }

    /// Writes the reconciled cells in the trade CSV layout, one exporter-side row per cell.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["year", "origin", "destination", "product", "value", "reporter"])?;
        for (year, o, p, d, v) in self.iter_coded() {
            w.write_record([
                year.to_string().as_str(),
                o,
                d,
                p,
                v.to_string().as_str(),
                "exporter",
            ])?;
        }
        w.flush().map_err(|e| Error::io("trade tensor", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReconcilePolicy {
    #[default]
    ImporterPriority,
    ExporterPriority,
    Max,
    Mean,
}

impl FromStr for ReconcilePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "importer-priority" | "importer" => Ok(ReconcilePolicy::ImporterPriority),
            "exporter-priority" | "exporter" => Ok(ReconcilePolicy::ExporterPriority),
            "max" => Ok(ReconcilePolicy::Max),
            "mean" => Ok(ReconcilePolicy::Mean),
            other => Err(format!("unknown reconciliation policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconcileAudit {
    pub exporter_only: usize,
    pub importer_only: usize,
    /// Cells reported by both sides (agreeing or not).
    pub both: usize,
    /// Subset of `both` where the two reports differ.
    pub discrepant_both: usize,
}

/// Merges exporter and importer reports into one value per cell.
///
/// Repeated rows for the same cell and reporter side are summed before the
/// policy is applied. The merge is an order-independent reduction.
pub fn reconcile(
    records: &[TradeFlowRecord],
    policy: ReconcilePolicy,
) -> Result<(TradeTensor, ReconcileAudit)> {
    type Sides = (Option<f64>, Option<f64>);
    let mut cells: BTreeMap<(i32, &str, &str, &str), Sides> = BTreeMap::new();
    for r in records {
        let entry = cells
            .entry((r.year, &r.origin, &r.product, &r.destination))
            .or_default();
        let slot = match r.reporter {
            Reporter::Exporter => &mut entry.0,
            Reporter::Importer => &mut entry.1,
        };
        *slot = Some(slot.unwrap_or(0.0) + r.value);
    }
    let mut audit = ReconcileAudit::default();
    let mut out = Vec::with_capacity(cells.len());
    for ((year, o, p, d), sides) in cells {
        let value = match sides {
            (Some(x), None) => {
                audit.exporter_only += 1;
                x
            }
            (None, Some(m)) => {
                audit.importer_only += 1;
                m
            }
            (Some(x), Some(m)) => {
                audit.both += 1;
                if x != m {
                    audit.discrepant_both += 1;
                }
                match policy {
                    ReconcilePolicy::ImporterPriority => m,
                    ReconcilePolicy::ExporterPriority => x,
                    ReconcilePolicy::Max => x.max(m),
                    ReconcilePolicy::Mean => 0.5 * (x + m),
                }
            }
            (None, None) => unreachable!("cell created without a report"),
        };
        out.push((year, o, p, d, value));
    }
    Ok((TradeTensor::from_cells(out)?, audit))
}

/// Population and GDP per capita of one country in one year.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CountryYear {
    pub population: Option<f64>,
    pub gdp_per_capita: Option<f64>,
}

/// Country covariates keyed by `(code, year)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountryTable {
    rows: HashMap<(String, i32), CountryYear>,
}

impl CountryTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, code: &str, year: i32, population: f64, gdp_per_capita: f64) {
        self.rows.insert(
            (code.to_string(), year),
            CountryYear {
                population: Some(population),
                gdp_per_capita: Some(gdp_per_capita),
            },
        );
    }

    pub fn get(&self, code: &str, year: i32) -> Option<&CountryYear> {
        self.rows.get(&(code.to_string(), year))
    }

    pub fn population(&self, code: &str, year: i32) -> Result<f64> {
        self.get(code, year)
            .and_then(|r| r.population)
            .ok_or_else(|| Error::MissingMeta(format!("population of {code} in {year}")))
    }

    pub fn gdp_per_capita(&self, code: &str, year: i32) -> Result<f64> {
        self.get(code, year)
            .and_then(|r| r.gdp_per_capita)
            .ok_or_else(|| Error::MissingMeta(format!("gdp per capita of {code} in {year}")))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut keys: Vec<_> = self.rows.keys().collect();
        keys.sort();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["code", "year", "population", "gdp_per_capita"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for key in keys {
            let r = &self.rows[key];
            w.write_record([
                key.0.clone(),
                key.1.to_string(),
                opt(r.population),
                opt(r.gdp_per_capita),
            ])?;
        }
        w.flush().map_err(|e| Error::io("country table", e))?;
        Ok(())
    }
}

fn parse_positive(field: &str, what: &str, source: &str, line: u64) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(source, line, format!("bad {what} `{field}`")))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::parse(source, line, format!("{what} must be positive, got {v}")));
    }
    Ok(Some(v))
}

pub fn load_country_csv(path: impl AsRef<Path>) -> Result<CountryTable> {
    let path = path.as_ref();
    read_country_csv(open(path)?, &path.display().to_string())
}

/// Reads `code,year,population,gdp_per_capita`. Empty cells are missing values.
pub fn read_country_csv<R: Read>(reader: R, source_name: &str) -> Result<CountryTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let i_code = column(&headers, "code", source_name)?;
    let i_year = column(&headers, "year", source_name)?;
    let i_pop = column(&headers, "population", source_name)?;
    let i_gdp = column(&headers, "gdp_per_capita", source_name)?;
    let mut table = CountryTable::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        if !rdr
            .read_record(&mut row)
            .map_err(|e| Error::parse(source_name, line, e.to_string()))?
        {
            break;
        }
        let f = |i: usize| row.get(i).unwrap_or("").trim();
        let code = f(i_code);
        if !is_country_code(code) {
            return Err(Error::parse(source_name, line, format!("bad country code `{code}`")));
        }
        let year: i32 = f(i_year)
            .parse()
            .map_err(|_| Error::parse(source_name, line, format!("bad year `{}`", f(i_year))))?;
        let population = parse_positive(f(i_pop), "population", source_name, line)?;
        let gdp_per_capita = parse_positive(f(i_gdp), "gdp_per_capita", source_name, line)?;
        table.rows.insert(
            (code.to_string(), year),
            CountryYear {
                population,
                gdp_per_capita,
            },
        );
    }
    Ok(table)
}

/// Time-invariant attributes of a country pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DyadInfo {
    pub distance_km: f64,
    pub border: bool,
    pub colony: bool,
    pub language: bool,
    pub lang_proximity: f64,
}

/// Symmetric dyad covariates; `(a, b)` and `(b, a)` address the same entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DyadTable {
    rows: HashMap<(String, String), DyadInfo>,
}

fn dyad_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl DyadTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: &str, b: &str, info: DyadInfo) -> Result<()> {
        if a == b {
            return Err(Error::InvalidArgument(format!("dyad {a}-{b} pairs a country with itself")));
        }
        if !(info.distance_km.is_finite() && info.distance_km > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "distance for {a}-{b} must be positive, got {}",
                info.distance_km
            )));
        }
        if !(info.lang_proximity.is_finite() && info.lang_proximity >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "language proximity for {a}-{b} must be non-negative"
            )));
        }
        self.rows.insert(dyad_key(a, b), info);
        Ok(())
    }

    pub fn get(&self, a: &str, b: &str) -> Option<&DyadInfo> {
        self.rows.get(&dyad_key(a, b))
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64> {
        self.get(a, b)
            .map(|d| d.distance_km)
            .ok_or_else(|| Error::MissingDistance(a.to_string(), b.to_string()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut keys: Vec<_> = self.rows.keys().collect();
        keys.sort();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "country_a",
            "country_b",
            "distance_km",
            "border",
            "colony",
            "language",
            "lang_proximity",
        ])?;
        let b = |v: bool| if v { "1" } else { "0" };
        for key in keys {
            let r = &self.rows[key];
            w.write_record([
                key.0.as_str(),
                key.1.as_str(),
                r.distance_km.to_string().as_str(),
                b(r.border),
                b(r.colony),
                b(r.language),
                r.lang_proximity.to_string().as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("dyad table", e))?;
        Ok(())
    }
}

pub fn load_dyad_csv(path: impl AsRef<Path>) -> Result<DyadTable> {
    let path = path.as_ref();
    read_dyad_csv(open(path)?, &path.display().to_string())
}

/// Reads `country_a,country_b,distance_km,border,colony,language,lang_proximity`.
/// Both orientations may be present but must agree.
pub fn read_dyad_csv<R: Read>(reader: R, source_name: &str) -> Result<DyadTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = [
        "country_a",
        "country_b",
        "distance_km",
        "border",
        "colony",
        "language",
        "lang_proximity",
    ]
    .iter()
    .map(|c| column(&headers, c, source_name))
    .collect::<Result<_>>()?;
    let mut table = DyadTable::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        if !rdr
            .read_record(&mut row)
            .map_err(|e| Error::parse(source_name, line, e.to_string()))?
        {
            break;
        }
        let f = |i: usize| row.get(cols[i]).unwrap_or("").trim();
        let (a, b) = (f(0), f(1));
        if !is_country_code(a) || !is_country_code(b) {
            return Err(Error::parse(source_name, line, format!("bad country pair `{a}-{b}`")));
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            f(i).parse()
                .map_err(|_| Error::parse(source_name, line, format!("bad {what} `{}`", f(i))))
        };
        let flag = |i: usize, what: &str| -> Result<bool> {
            match f(i) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::parse(
                    source_name,
                    line,
                    format!("{what} must be 0 or 1, got `{other}`"),
                )),
            }
        };
        let info = DyadInfo {
            distance_km: num(2, "distance_km")?,
            border: flag(3, "border")?,
            colony: flag(4, "colony")?,
            language: flag(5, "language")?,
            lang_proximity: if f(6).is_empty() { 0.0 } else { num(6, "lang_proximity")? },
        };
        if let Some(existing) = table.get(a, b) {
            if *existing != info {
                return Err(Error::parse(
                    source_name,
                    line,
                    format!("dyad {a}-{b} disagrees with its reverse orientation"),
                ));
            }
        }
        table
            .insert(a, b, info)
            .map_err(|e| Error::parse(source_name, line, e.to_string()))?;
    }
    Ok(table)
}

/// Country exclusion rules applied after reconciliation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_population: f64,
    /// Year at which population is evaluated.
    pub population_year: i32,
    pub min_trade: f64,
    /// Year whose exports plus imports are compared against `min_trade`.
    pub trade_year: i32,
    pub excluded: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_population: 1.2e6,
            population_year: 2000,
            min_trade: 1e9,
            trade_year: 2008,
            excluded: DEFAULT_EXCLUDED.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemovalReason {
    ExclusionList,
    Population,
    TradeVolume,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub removed: Vec<(String, RemovalReason)>,
    pub removed_cells: usize,
    pub removed_value: f64,
}

/// Drops countries on the exclusion list, below the population floor, or
/// below the trade-volume floor, together with every flow they take part in.
pub fn filter_countries(
    tensor: &TradeTensor,
    meta: &CountryTable,
    rules: &FilterConfig,
) -> Result<(TradeTensor, FilterReport)> {
    let trade_slice = tensor
        .year(rules.trade_year)
        .ok_or(Error::MissingYear(rules.trade_year))?;
    let excluded: HashSet<&str> = rules.excluded.iter().map(String::as_str).collect();
    let mut removed = Vec::new();
    for (i, code) in tensor.countries().iter().enumerate() {
        if excluded.contains(code.as_str()) {
            removed.push((code.clone(), RemovalReason::ExclusionList));
            continue;
        }
        let population = meta.population(code, rules.population_year)?;
        if population < rules.min_population {
            removed.push((code.clone(), RemovalReason::Population));
            continue;
        }
        let volume = trade_slice.exports(i as u32) + trade_slice.imports(i as u32);
        if volume < rules.min_trade {
            removed.push((code.clone(), RemovalReason::TradeVolume));
        }
    }
    let gone: HashSet<&str> = removed.iter().map(|(c, _)| c.as_str()).collect();
    let mut kept = Vec::with_capacity(tensor.n_cells());
    let mut report = FilterReport::default();
    let mut removed_value = crate::numeric::ExactSum::new();
    for (year, o, p, d, v) in tensor.iter_coded() {
        if gone.contains(o) || gone.contains(d) {
            report.removed_cells += 1;
            removed_value.add(v);
        } else {
            kept.push((year, o, p, d, v));
        }
    }
    report.removed = removed;
    report.removed_value = removed_value.value();
    Ok((TradeTensor::from_cells(kept)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<LoadedTrade> {
        read_trade_csv(text.as_bytes(), &TradeSchema::default(), &Vocabulary::default(), "t.csv")
    }

    const HEADER: &str = "year,origin,destination,product,value,reporter\n";

    #[test]
    fn parses_a_trade_row() {
        let loaded = parse(&format!("{HEADER}2003,KOR,CHL,6201,152000,exporter\n")).unwrap();
        assert_eq!(
            loaded.records,
            vec![TradeFlowRecord {
                year: 2003,
                origin: "KOR".into(),
                destination: "CHL".into(),
                product: "6201".into(),
                value: 152000.0,
                reporter: Reporter::Exporter,
            }]
        );
    }

    #[test]
    fn negative_value_is_a_parse_error_with_line() {
        let err = parse(&format!("{HEADER}2003,KOR,CHL,6201,1,exporter\n2003,KOR,CHL,6202,-5,exporter\n"))
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn short_product_code_is_rejected_not_dropped() {
        let loaded = parse(&format!("{HEADER}2003,KOR,CHL,62,10,exporter\n")).unwrap();
        assert!(loaded.records.is_empty());
        assert_eq!(loaded.rejects.len(), 1);
        assert_eq!(loaded.rejects[0].reason, RejectReason::BadProductCode);
        assert_eq!(loaded.rejects[0].line, 2);
    }

    #[test]
    fn zero_rows_are_dropped_and_unknown_codes_rejected() {
        let vocab = Vocabulary {
            countries: Some(["KOR", "CHL"].iter().map(|s| s.to_string()).collect()),
            products: None,
        };
        let text = format!(
            "{HEADER}2003,KOR,CHL,6201,0,exporter\n2003,KOR,XXX,6201,3,importer\n2003,KOR,KOR,6201,3,importer\n"
        );
        let loaded =
            read_trade_csv(text.as_bytes(), &TradeSchema::default(), &vocab, "t.csv").unwrap();
        assert_eq!(loaded.zero_rows, 1);
        let reasons: Vec<_> = loaded.rejects.iter().map(|r| r.reason).collect();
        assert_eq!(reasons, vec![RejectReason::UnknownCountry, RejectReason::SelfFlow]);
        let mut buf = Vec::new();
        write_rejects_csv(&mut buf, &loaded.rejects).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("line,reason,raw\n3,unknown_country,"));
    }

    #[test]
    fn missing_header_column_is_reported() {
        let err = parse("year,origin,destination,product,value\n2003,KOR,CHL,6201,1\n").unwrap_err();
        assert!(err.to_string().contains("reporter"));
    }

    fn rec(o: &str, d: &str, v: f64, reporter: Reporter) -> TradeFlowRecord {
        TradeFlowRecord {
            year: 2001,
            origin: o.into(),
            destination: d.into(),
            product: "0101".into(),
            value: v,
            reporter,
        }
    }

    #[test]
    fn reconciliation_policies() {
        let records = vec![
            rec("AAA", "BBB", 100.0, Reporter::Exporter),
            rec("AAA", "BBB", 120.0, Reporter::Importer),
            rec("AAA", "CCC", 100.0, Reporter::Exporter),
            rec("BBB", "CCC", 100.0, Reporter::Exporter),
            rec("BBB", "CCC", 100.0, Reporter::Importer),
            rec("CCC", "AAA", 7.0, Reporter::Importer),
        ];
        let (t, audit) = reconcile(&records, ReconcilePolicy::default()).unwrap();
        let idx = |c: &str| t.country_index(c).unwrap();
        assert_eq!(t.value(2001, idx("AAA"), 0, idx("BBB")), Some(120.0));
        assert_eq!(t.value(2001, idx("AAA"), 0, idx("CCC")), Some(100.0));
        assert_eq!(t.value(2001, idx("BBB"), 0, idx("CCC")), Some(100.0));
        assert_eq!(t.value(2001, idx("CCC"), 0, idx("AAA")), Some(7.0));
        assert_eq!(
            audit,
            ReconcileAudit {
                exporter_only: 1,
                importer_only: 1,
                both: 2,
                discrepant_both: 1
            }
        );
        let value_under = |policy| {
            let (t, _) = reconcile(&records, policy).unwrap();
            t.value(2001, idx("AAA"), 0, idx("BBB")).unwrap()
        };
        assert_eq!(value_under(ReconcilePolicy::ExporterPriority), 100.0);
        assert_eq!(value_under(ReconcilePolicy::Max), 120.0);
        assert_eq!(value_under(ReconcilePolicy::Mean), 110.0);
    }

    #[test]
    fn reconcile_is_idempotent() {
        let records = vec![
            rec("AAA", "BBB", 100.0, Reporter::Exporter),
            rec("AAA", "BBB", 120.0, Reporter::Importer),
            rec("CCC", "AAA", 7.0, Reporter::Importer),
        ];
        let (t, _) = reconcile(&records, ReconcilePolicy::Mean).unwrap();
        let expanded: Vec<_> = t
            .iter_coded()
            .map(|(year, o, p, d, v)| TradeFlowRecord {
                year,
                origin: o.into(),
                destination: d.into(),
                product: p.into(),
                value: v,
                reporter: Reporter::Importer,
            })
            .collect();
        let (again, audit) = reconcile(&expanded, ReconcilePolicy::Mean).unwrap();
        assert_eq!(again, t);
        assert_eq!(audit.importer_only, t.n_cells());
    }

    #[test]
    fn marginals_match_entries() {
        let t = TradeTensor::from_cells(vec![
            (2001, "AAA", "0101", "BBB", 1.0),
            (2001, "AAA", "0102", "BBB", 2.0),
            (2001, "BBB", "0101", "AAA", 4.0),
            (2002, "AAA", "0101", "BBB", 8.0),
        ])
        .unwrap();
        assert!(t.marginals_consistent());
        let y = t.year(2001).unwrap();
        assert_eq!(y.marginals().x_od(0, 1), 3.0);
        assert_eq!(y.marginals().x_op(0, 0), 1.0);
        assert_eq!(y.marginals().x_pd(0, 0), 4.0);
        assert_eq!(y.marginals().total(), 7.0);
        assert_eq!(y.exports(0), 3.0);
        assert_eq!(y.imports(0), 4.0);
    }

    fn filter_fixture() -> (TradeTensor, CountryTable) {
        let t = TradeTensor::from_cells(vec![
            (2008, "BIG", "0101", "MID", 5e9),
            (2008, "MID", "0101", "BIG", 5e9),
            (2008, "SML", "0101", "BIG", 1e9),
            (2008, "BIG", "0101", "LOW", 0.9e9),
            (2008, "IRQ", "0101", "BIG", 9e9),
        ])
        .unwrap();
        let mut meta = CountryTable::new();
        meta.insert("BIG", 2000, 50e6, 1e4);
        meta.insert("MID", 2000, 2e6, 1e4);
        meta.insert("SML", 2000, 1.0e6, 1e4);
        meta.insert("LOW", 2000, 3e6, 1e4);
        (t, meta)
    }

    #[test]
    fn filter_applies_population_trade_and_exclusion_rules() {
        let (t, meta) = filter_fixture();
        let (kept, report) = filter_countries(&t, &meta, &FilterConfig::default()).unwrap();
        assert_eq!(kept.countries(), &["BIG".to_string(), "MID".to_string()]);
        let mut removed = report.removed.clone();
        removed.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(
            removed,
            vec![
                ("IRQ".to_string(), RemovalReason::ExclusionList),
                ("LOW".to_string(), RemovalReason::TradeVolume),
                ("SML".to_string(), RemovalReason::Population),
            ]
        );
        assert_eq!(kept.total_value(), t.total_value() - report.removed_value);
    }

    #[test]
    fn filter_errors_on_missing_meta_and_missing_year() {
        let (t, mut meta) = filter_fixture();
        meta.rows.remove(&("MID".to_string(), 2000));
        let err = filter_countries(&t, &meta, &FilterConfig::default()).unwrap_err();
        assert!(err.to_string().contains("MID"));
        let rules = FilterConfig {
            trade_year: 2009,
            ..FilterConfig::default()
        };
        assert!(matches!(
            filter_countries(&t, &meta, &rules),
            Err(Error::MissingYear(2009))
        ));
    }

    #[test]
    fn dyad_table_is_symmetric_and_validated() {
        let text = "country_a,country_b,distance_km,border,colony,language,lang_proximity\n\
                    AAA,BBB,100,1,0,1,0\nBBB,AAA,100,1,0,1,0\n";
        let table = read_dyad_csv(text.as_bytes(), "d.csv").unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table.distance("BBB", "AAA").unwrap(), 100.0);
        assert!(matches!(table.distance("AAA", "CCC"), Err(Error::MissingDistance(..))));

        let asym = "country_a,country_b,distance_km,border,colony,language,lang_proximity\n\
                    AAA,BBB,100,1,0,1,0\nBBB,AAA,120,1,0,1,0\n";
        assert!(read_dyad_csv(asym.as_bytes(), "d.csv").is_err());
        let bad_flag = "country_a,country_b,distance_km,border,colony,language,lang_proximity\n\
                        AAA,BBB,100,2,0,1,0\n";
        assert!(read_dyad_csv(bad_flag.as_bytes(), "d.csv").is_err());
    }

    #[test]
    fn country_table_parses_missing_values() {
        let text = "code,year,population,gdp_per_capita\nAAA,2000,5000000,\nBBB,2000,0,10\n";
        let err = read_country_csv(text.as_bytes(), "c.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let ok = "code,year,population,gdp_per_capita\nAAA,2000,5000000,\n";
        let table = read_country_csv(ok.as_bytes(), "c.csv").unwrap();
        assert_eq!(table.population("AAA", 2000).unwrap(), 5e6);
        assert!(table.gdp_per_capita("AAA", 2000).is_err());
    }
}
