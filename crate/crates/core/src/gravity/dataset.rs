use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::N_REGRESSORS;
use crate::error::{Error, Result};
use crate::ingest::{CountryTable, DyadTable, TradeTensor};
use crate::numeric::YearRange;
use crate::relatedness::RelatednessTensor;

const CHUNK: usize = 1 << 16;

/// One regression row keyed by `(t, o, p, d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityObservation {
    pub year: i32,
    pub origin: u32,
    pub product: u32,
    pub destination: u32,
    pub response: f64,
    pub regressors: [f64; N_REGRESSORS],
}

impl GravityObservation {
    pub fn is_finite(&self) -> bool {
        self.response.is_finite() && self.regressors.iter().all(|v| v.is_finite())
    }
}

/// How cells that vanish at `t + horizon` are treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZeroPolicy {
    /// Keep only cells positive at both `t` and `t + horizon`.
    #[default]
    Drop,
    /// Keep every cell positive at `t`; the response becomes `ln(1 + x)`.
    Log1p,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub horizon: i32,
    pub zeros: ZeroPolicy,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            horizon: 2,
            zeros: ZeroPolicy::Drop,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetReport {
    /// Positive cells at a base year `t`.
    pub candidates: usize,
    pub rows: usize,
    /// Cells absent at `t + horizon` (dropped under [`ZeroPolicy::Drop`]).
    pub exits: usize,
    /// Cells without relatedness values (for example isolated products).
    pub missing_relatedness: usize,
}

impl DatasetReport {
    fn merge(&mut self, other: &DatasetReport) {
        self.candidates += other.candidates;
        self.rows += other.rows;
        self.exits += other.exits;
        self.missing_relatedness += other.missing_relatedness;
    }
}

/// Base years `t` of a period such that `t + horizon` stays inside it.
pub fn pooled_base_years(period: YearRange, horizon: i32) -> impl Iterator<Item = i32> {
    period.start..=(period.end - horizon)
}

/// A re-iterable, ordered stream of regression rows.
pub trait RowSource: Sync {
    /// Visits every row exactly once, in a fixed order, chunk by chunk.
    fn for_each_chunk(&self, f: &mut dyn FnMut(&[GravityObservation]) -> Result<()>) -> Result<()>;
}

impl RowSource for [GravityObservation] {
    fn for_each_chunk(&self, f: &mut dyn FnMut(&[GravityObservation]) -> Result<()>) -> Result<()> {
        self.chunks(CHUNK).try_for_each(f)
    }
}

impl RowSource for Vec<GravityObservation> {
    fn for_each_chunk(&self, f: &mut dyn FnMut(&[GravityObservation]) -> Result<()>) -> Result<()> {
        self.as_slice().for_each_chunk(f)
    }
}

/// Pooled rows of one period.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityDataset {
    pub period: YearRange,
    pub countries: Vec<String>,
    pub products: Vec<String>,
    pub rows: Vec<GravityObservation>,
    pub report: DatasetReport,
}

/// Assembles rows year by year from the trade tensor and covariate tables
/// without materializing the whole period.
pub struct AssemblySource<'a> {
    tensor: &'a TradeTensor,
    relatedness: &'a RelatednessTensor,
    countries: &'a CountryTable,
    dyads: Vec<Option<[f64; 5]>>,
    period: YearRange,
    options: DatasetOptions,
}

impl<'a> AssemblySource<'a> {
    pub fn new(
        tensor: &'a TradeTensor,
        relatedness: &'a RelatednessTensor,
        countries: &'a CountryTable,
        dyads: &'a DyadTable,
        period: YearRange,
        options: DatasetOptions,
    ) -> Result<Self> {
        if options.horizon < 1 || period.len() as i32 <= options.horizon {
            return Err(Error::InvalidArgument(format!(
                "period {period} is too short for a {}-year horizon",
                options.horizon
            )));
        }
        if relatedness.countries() != tensor.countries() || relatedness.products() != tensor.products() {
            return Err(Error::InvalidArgument(
                "relatedness was computed over a different vocabulary than the trade tensor".into(),
            ));
        }
        let codes = tensor.countries();
        let n = codes.len();
        let mut dyad_cov = vec![None; n * n];
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                dyad_cov[a * n + b] = dyads.get(&codes[a], &codes[b]).map(|info| {
                    let flag = |v: bool| if v { 1.0 } else { 0.0 };
                    [
                        info.distance_km.ln(),
                        flag(info.border),
                        flag(info.colony),
                        flag(info.language),
                        info.lang_proximity.ln_1p(),
                    ]
                });
            }
        }
        Ok(AssemblySource {
            tensor,
            relatedness,
            countries,
            dyads: dyad_cov,
            period,
            options,
        })
    }

    /// Rows of base year `t`, in tensor cell order.
    pub fn rows_for_year(&self, t: i32) -> Result<(Vec<GravityObservation>, DatasetReport)> {
        let mut report = DatasetReport::default();
        let Some(slice) = self.tensor.year(t) else {
            return Ok((Vec::new(), report));
        };
        let future = self.tensor.year(t + self.options.horizon);
        let codes = self.tensor.countries();
        let n = codes.len();
        let covariate = |code: &str| -> Result<(f64, f64)> {
            Ok((
                self.countries.gdp_per_capita(code, t)?.ln(),
                self.countries.population(code, t)?.ln(),
            ))
        };
        let country_cov: Vec<Option<(f64, f64)>> = codes.iter().map(|c| covariate(c).ok()).collect();
        let marginals = slice.marginals();

        let chunks: Vec<Result<(Vec<GravityObservation>, DatasetReport)>> = slice
            .flows()
            .par_chunks(CHUNK)
            .map(|flows| {
                let mut rows = Vec::with_capacity(flows.len());
                let mut rep = DatasetReport::default();
                for f in flows {
                    rep.candidates += 1;
                    let later = future.and_then(|y| y.value(f.origin, f.product, f.destination));
                    let response = match (later, self.options.zeros) {
                        (Some(x), ZeroPolicy::Drop) => x.ln(),
                        (None, ZeroPolicy::Drop) => {
                            rep.exits += 1;
                            continue;
                        }
                        (x, ZeroPolicy::Log1p) => {
                            if x.is_none() {
                                rep.exits += 1;
                            }
                            x.unwrap_or(0.0).ln_1p()
                        }
                    };
                    let Some(rel) = self.relatedness.get(t, f.origin, f.product, f.destination) else {
                        rep.missing_relatedness += 1;
                        continue;
                    };
                    let (o, d) = (f.origin as usize, f.destination as usize);
                    let missing_country = |c: usize| {
                        covariate(&codes[c]).err().unwrap_or_else(|| {
                            Error::MissingMeta(format!("covariates of {} in {t}", codes[c]))
                        })
                    };
                    let (gdp_o, pop_o) = country_cov[o].ok_or_else(|| missing_country(o))?;
                    let (gdp_d, pop_d) = country_cov[d].ok_or_else(|| missing_country(d))?;
                    let dyad = self.dyads[o * n + d].ok_or_else(|| {
                        Error::MissingMeta(format!("dyad covariates of {}-{}", codes[o], codes[d]))
                    })?;
                    let obs = GravityObservation {
                        year: t,
                        origin: f.origin,
                        product: f.product,
                        destination: f.destination,
                        response,
                        regressors: [
                            rel.omega,
                            rel.omega_importer,
                            rel.omega_exporter,
                            f.value.ln(),
                            marginals.x_op(f.origin, f.product).ln(),
                            marginals.x_pd(f.product, f.destination).ln(),
                            dyad[0],
                            gdp_o,
                            gdp_d,
                            pop_o,
                            pop_d,
                            dyad[1],
                            dyad[2],
                            dyad[3],
                            dyad[4],
                        ],
                    };
                    if !obs.is_finite() {
                        return Err(Error::Invariant(format!(
                            "non-finite regression row for ({t}, {}, {}, {})",
                            codes[o], self.tensor.products()[f.product as usize], codes[d]
                        )));
                    }
                    rows.push(obs);
                    rep.rows += 1;
                }
                Ok((rows, rep))
            })
            .collect();

        let mut rows = Vec::new();
        for chunk in chunks {
            let (r, rep) = chunk?;
            rows.extend(r);
            report.merge(&rep);
        }
        Ok((rows, report))
    }

    /// Visits every row and returns the assembly counts.
    pub fn scan(&self, f: &mut dyn FnMut(&[GravityObservation]) -> Result<()>) -> Result<DatasetReport> {
        let mut report = DatasetReport::default();
        for t in pooled_base_years(self.period, self.options.horizon) {
            let (rows, rep) = self.rows_for_year(t)?;
            report.merge(&rep);
            rows.as_slice().for_each_chunk(f)?;
        }
        Ok(report)
    }

    pub fn collect(&self) -> Result<GravityDataset> {
        let mut rows = Vec::new();
        let report = self.scan(&mut |chunk| {
            rows.extend_from_slice(chunk);
            Ok(())
        })?;
        Ok(GravityDataset {
            period: self.period,
            countries: self.tensor.countries().to_vec(),
            products: self.tensor.products().to_vec(),
            rows,
            report,
        })
    }
}

impl RowSource for AssemblySource<'_> {
    fn for_each_chunk(&self, f: &mut dyn FnMut(&[GravityObservation]) -> Result<()>) -> Result<()> {
        self.scan(f).map(|_| ())
    }
}

/// Pools one row per `(t, o, p, d)` over every base year of `period`.
pub fn build_dataset(
    tensor: &TradeTensor,
    relatedness: &RelatednessTensor,
    countries: &CountryTable,
    dyads: &DyadTable,
    period: YearRange,
    options: DatasetOptions,
) -> Result<GravityDataset> {
    AssemblySource::new(tensor, relatedness, countries, dyads, period, options)?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::ProximityMatrix;
    use crate::ingest::DyadInfo;
    use crate::relatedness::{compute_relatedness, DistanceWeights, EvaluationSet};

    fn fixture() -> (TradeTensor, CountryTable, DyadTable, ProximityMatrix) {
        let mut cells = Vec::new();
        for year in 2000..=2006 {
            cells.push((year, "AAA", "0001", "BBB", 100.0 + year as f64));
            cells.push((year, "AAA", "0002", "BBB", 50.0));
            cells.push((year, "BBB", "0001", "CCC", 20.0));
            if year < 2003 {
                cells.push((year, "CCC", "0002", "AAA", 10.0));
            }
        }
        let t = TradeTensor::from_cells(cells).unwrap();
        let mut countries = CountryTable::new();
        for c in ["AAA", "BBB", "CCC"] {
            for year in 2000..=2006 {
                countries.insert(c, year, 5e6, 2e4);
            }
        }
        let mut dyads = DyadTable::new();
        for (a, b, d) in [("AAA", "BBB", 100.0), ("AAA", "CCC", 200.0), ("BBB", "CCC", 300.0)] {
            dyads
                .insert(
                    a,
                    b,
                    DyadInfo {
                        distance_km: d,
                        border: a == "AAA",
                        colony: false,
                        language: true,
                        lang_proximity: 0.0,
                    },
                )
                .unwrap();
        }
        let phi = ProximityMatrix::from_dense(
            vec!["0001".into(), "0002".into()],
            vec![0.0, 0.5, 0.5, 0.0],
        )
        .unwrap();
        (t, countries, dyads, phi)
    }

    #[test]
    fn base_years_of_a_period() {
        let years: Vec<i32> = pooled_base_years("2000-2006".parse().unwrap(), 2).collect();
        assert_eq!(years, vec![2000, 2001, 2002, 2003, 2004]);
    }

    #[test]
    fn rows_require_both_endpoints_by_default() {
        let (t, countries, dyads, phi) = fixture();
        let w = DistanceWeights::from_dyads(t.countries(), &dyads).unwrap();
        let years: Vec<i32> = t.years().collect();
        let rel = compute_relatedness(&t, &phi, &w, &years, EvaluationSet::Active).unwrap();
        let period = "2000-2006".parse().unwrap();
        let ds = build_dataset(&t, &rel, &countries, &dyads, period, DatasetOptions::default()).unwrap();
        // 3 cells in each of 5 base years, plus CCC→AAA at 2000 (present at 2002); exits at 2001 and 2002.
        assert_eq!(ds.report.candidates, 3 * 5 + 3);
        assert_eq!(ds.report.exits, 2);
        assert_eq!(ds.rows.len(), 16);
        let row = ds.rows.iter().find(|r| r.year == 2000 && r.origin == 0 && r.product == 0).unwrap();
        assert_eq!(row.response, 2102.0f64.ln());
        assert_eq!(row.regressors[3], 2100.0f64.ln());
        assert_eq!(row.regressors[6], 100.0f64.ln());
        assert_eq!(row.regressors[11], 1.0);
        // lang_proximity 0 enters as ln(1 + 0) = 0.
        assert_eq!(row.regressors[14], 0.0);

        let log1p = DatasetOptions {
            zeros: ZeroPolicy::Log1p,
            ..DatasetOptions::default()
        };
        let ds = build_dataset(&t, &rel, &countries, &dyads, period, log1p).unwrap();
        assert_eq!(ds.rows.len(), 18);
        assert!(ds.rows.iter().any(|r| r.response == 0.0));
    }

    #[test]
    fn missing_covariates_name_the_key() {
        let (t, mut countries, dyads, phi) = fixture();
        let w = DistanceWeights::from_dyads(t.countries(), &dyads).unwrap();
        let years: Vec<i32> = t.years().collect();
        let rel = compute_relatedness(&t, &phi, &w, &years, EvaluationSet::Active).unwrap();
        countries = {
            let mut c = CountryTable::new();
            for code in ["AAA", "BBB"] {
                for year in 2000..=2006 {
                    c.insert(code, year, 5e6, 2e4);
                }
            }
            let _ = countries;
            c
        };
        let err = build_dataset(&t, &rel, &countries, &dyads, "2000-2006".parse().unwrap(), DatasetOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("CCC"), "{err}");
    }

    #[test]
    fn short_period_is_rejected() {
        let (t, countries, dyads, phi) = fixture();
        let w = DistanceWeights::from_dyads(t.countries(), &dyads).unwrap();
        let rel = compute_relatedness(&t, &phi, &w, &[2000], EvaluationSet::Active).unwrap();
        assert!(build_dataset(&t, &rel, &countries, &dyads, "2000-2002".parse().unwrap(), DatasetOptions::default()).is_ok());
        assert!(build_dataset(&t, &rel, &countries, &dyads, "2000-2001".parse().unwrap(), DatasetOptions::default()).is_err());
    }
}
