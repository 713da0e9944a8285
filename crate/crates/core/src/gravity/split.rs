use serde::{Deserialize, Serialize};

use super::classify::{classify_exporter_with, map_lall, Concordance, ExporterClass, ExporterThresholds, LallCategory};
use super::dataset::{GravityDataset, GravityObservation};
use super::ols::{fit_source, RegressionResult};
use super::standardize::StandardizationSpec;
use super::N_REGRESSORS;
use crate::complexity::RcaMatrix;
use crate::error::{Error, Result};
use crate::numeric::YearRange;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Z-score continuous regressors within each estimation sample.
    pub standardize: bool,
    /// Also z-score the response.
    pub standardize_response: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            standardize: true,
            standardize_response: false,
        }
    }
}

/// How a pooled dataset is partitioned into estimation samples.
#[derive(Debug, Clone)]
pub enum Split<'a> {
    None,
    /// Rows whose base year and horizon year both fall inside the period.
    Period { periods: Vec<YearRange>, horizon: i32 },
    /// By RCA class of the (origin, product) pair; `rca` must share the dataset's vocabularies.
    ExporterClass { rca: &'a RcaMatrix, thresholds: ExporterThresholds },
    /// By technology category of the product; excluded products are dropped.
    Lall { concordance: &'a Concordance },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub key: String,
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitOutcome {
    /// Results in split order (periods as given, classes and categories by rank).
    pub results: Vec<(String, RegressionResult)>,
    pub specs: Vec<(String, StandardizationSpec)>,
    pub skipped: Vec<SkippedCell>,
    /// Products dropped because the concordance does not cover them.
    pub unmapped_products: Vec<String>,
}

/// Standardizes within `rows` (per options) and fits.
pub fn fit_sample(rows: &[GravityObservation], options: &FitOptions) -> Result<(RegressionResult, StandardizationSpec)> {
    let spec = if options.standardize {
        StandardizationSpec::fit(rows, options.standardize_response)?
    } else {
        StandardizationSpec::identity()
    };
    Ok((fit_source(rows, &spec)?, spec))
}

pub fn run_split_regressions(dataset: &GravityDataset, split: &Split<'_>, options: &FitOptions) -> Result<SplitOutcome> {
    let mut cells: Vec<(String, Vec<GravityObservation>)> = Vec::new();
    let mut outcome = SplitOutcome::default();
    match split {
        Split::None => cells.push((dataset.period.to_string(), dataset.rows.clone())),
        Split::Period { periods, horizon } => {
            for period in periods {
                let rows = dataset
                    .rows
                    .iter()
                    .filter(|r| r.year >= period.start && r.year + horizon <= period.end)
                    .copied()
                    .collect();
                cells.push((period.to_string(), rows));
            }
        }
        Split::ExporterClass { rca, thresholds } => {
            if rca.countries() != dataset.countries.as_slice() || rca.products() != dataset.products.as_slice() {
                return Err(Error::InvalidArgument(
                    "RCA matrix and dataset use different vocabularies".into(),
                ));
            }
            let mut by_class: Vec<Vec<GravityObservation>> = vec![Vec::new(); 3];
            for r in &dataset.rows {
                let value = rca.get(r.origin as usize, r.product as usize).unwrap_or(0.0);
                let class = classify_exporter_with(value, thresholds)?;
                by_class[class as usize].push(*r);
            }
            for (class, rows) in ExporterClass::ALL.iter().zip(by_class) {
                cells.push((class.key().to_string(), rows));
            }
        }
        Split::Lall { concordance } => {
            let categories: Vec<Option<LallCategory>> = dataset
                .products
                .iter()
                .map(|p| map_lall(p, concordance).ok())
                .collect();
            outcome.unmapped_products = dataset
                .products
                .iter()
                .zip(&categories)
                .filter(|(_, c)| c.is_none())
                .map(|(p, _)| p.clone())
                .collect();
            for code in &outcome.unmapped_products {
                log::warn!("product {code} is not in the concordance; dropped from the technology split");
            }
            let mut by_rank: Vec<Vec<GravityObservation>> = vec![Vec::new(); 5];
            for r in &dataset.rows {
                if let Some(rank) = categories[r.product as usize].and_then(|c| c.rank()) {
                    by_rank[rank - 1].push(*r);
                }
            }
            for (cat, rows) in LallCategory::RANKED.iter().zip(by_rank) {
                cells.push((cat.code().to_string(), rows));
            }
        }
    }

    for (key, rows) in cells {
        let k = N_REGRESSORS + 1;
        if rows.len() <= k {
            log::warn!("split cell {key} has {} rows (need more than {k}); skipped", rows.len());
            outcome.skipped.push(SkippedCell {
                key,
                n: rows.len(),
                reason: "undersized".into(),
            });
            continue;
        }
        match fit_sample(&rows, options) {
            Ok((result, spec)) => {
                outcome.specs.push((key.clone(), spec));
                outcome.results.push((key, result));
            }
            Err(e @ (Error::Singular(_) | Error::ZeroVariance(_))) => {
                log::warn!("split cell {key} could not be fitted: {e}");
                outcome.skipped.push(SkippedCell {
                    key,
                    n: rows.len(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(outcome)
}
