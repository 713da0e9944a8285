//! Product, importer and exporter relatedness of active trade cells.
//!
//! All three measures share one shape: a weighted average, over the *other*
//! products (or destinations, or origins), of the share of a trade total that
//! already flows through them. Self terms are always excluded.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::ProximityMatrix;
use crate::error::{Error, Result};
use crate::ingest::{DyadTable, Flow, TradeTensor, YearSlice};
use crate::numeric::fmt_significant;

const BOUND_SLACK: f64 = 1e-12;

/// Row-stochastic inverse-distance weights `w_cc' = (1/D_cc') / Σ_{c''≠c} 1/D_cc''`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceWeights {
    countries: Vec<String>,
    weights: Vec<f64>,
}

impl DistanceWeights {
    /// Weights over `countries`; every pair must have a distance in `dyads`.
    pub fn from_dyads(countries: &[String], dyads: &DyadTable) -> Result<Self> {
        let n = countries.len();
        let mut inverse = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    inverse[i * n + j] = 1.0 / dyads.distance(&countries[i], &countries[j])?;
                }
            }
        }
        Self::from_inverse(countries.to_vec(), inverse)
    }

    fn from_inverse(countries: Vec<String>, mut inverse: Vec<f64>) -> Result<Self> {
        let n = countries.len();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "distance weights need at least two countries".into(),
            ));
        }
        for row in inverse.chunks_mut(n) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= total);
        }
        Ok(DistanceWeights {
            countries,
            weights: inverse,
        })
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    #[inline]
    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.weights[from * self.countries.len() + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        let n = self.countries.len();
        &self.weights[from * n..(from + 1) * n]
    }
}

/// Which `(o, p, d)` cells get relatedness values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvaluationSet {
    /// Cells with a positive flow in the evaluated year.
    #[default]
    Active,
    /// Every cell whose denominators are positive.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellValue {
    pub origin: u32,
    pub product: u32,
    pub destination: u32,
    pub value: f64,
}

impl CellValue {
    fn key(&self) -> (u32, u32, u32) {
        (self.origin, self.product, self.destination)
    }
}

fn year_slice(tensor: &TradeTensor, year: i32) -> Result<&YearSlice> {
    tensor.year(year).ok_or(Error::MissingYear(year))
}

/// Consecutive runs of `items` sharing `key`.
fn runs<T, K: PartialEq>(items: &[T], key: impl Fn(&T) -> K) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=items.len() {
        if i == items.len() || key(&items[i]) != key(&items[start]) {
            if start < i {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

fn finish(mut cells: Vec<CellValue>, measure: &str) -> Result<Vec<CellValue>> {
    cells.sort_by_key(CellValue::key);
    if let Some(bad) = cells
        .iter()
        .find(|c| !(c.value >= 0.0 && c.value <= 1.0 + BOUND_SLACK))
    {
        return Err(Error::Invariant(format!(
            "{measure} = {} outside [0,1] at cell ({}, {}, {})",
            bad.value, bad.origin, bad.product, bad.destination
        )));
    }
    Ok(cells)
}

/// Tensor product index → proximity index for products with `φ_p > 0`.
fn usable_products(tensor: &TradeTensor, phi: &ProximityMatrix) -> (Vec<Option<usize>>, Vec<String>) {
    let index: HashMap<&str, usize> = phi
        .products()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let mut skipped = Vec::new();
    let map = tensor
        .products()
        .iter()
        .map(|code| match index.get(code.as_str()) {
            Some(&i) if phi.marginal(i) > 0.0 => Some(i),
            _ => {
                skipped.push(code.clone());
                None
            }
        })
        .collect();
    (map, skipped)
}

/// Isolated products (no proximity to any other product) are reported in the
/// second return value and get no values.
pub fn product_relatedness(
    tensor: &TradeTensor,
    phi: &ProximityMatrix,
    year: i32,
    eval: EvaluationSet,
) -> Result<(Vec<CellValue>, Vec<String>)> {
    let slice = year_slice(tensor, year)?;
    let (phi_index, skipped) = usable_products(tensor, phi);
    for code in &skipped {
        log::warn!("product {code} has no proximity mass; product relatedness skipped");
    }
    let mut by_dyad: Vec<Flow> = slice.flows().to_vec();
    by_dyad.sort_by_key(|f| (f.origin, f.destination, f.product));
    let groups = runs(&by_dyad, |f| (f.origin, f.destination));
    let n_products = tensor.products().len() as u32;

    let cells = groups
        .par_iter()
        .flat_map_iter(|range| {
            let basket = &by_dyad[range.clone()];
            let (o, d) = (basket[0].origin, basket[0].destination);
            let x_od = slice.marginals().x_od(o, d);
            let targets: Vec<u32> = match eval {
                EvaluationSet::Active => basket.iter().map(|f| f.product).collect(),
                EvaluationSet::Dense => (0..n_products).collect(),
            };
            let phi_index = &phi_index;
            targets.into_iter().filter_map(move |p| {
                let pi = phi_index[p as usize]?;
                let mut acc = 0.0;
                for f in basket {
                    if f.product == p {
                        continue;
                    }
                    if let Some(qi) = phi_index[f.product as usize] {
                        acc += phi.get(pi, qi) * f.value;
                    }
                }
                Some(CellValue {
                    origin: o,
                    product: p,
                    destination: d,
                    value: acc / (phi.marginal(pi) * x_od),
                })
            })
        })
        .collect();
    Ok((finish(cells, "product relatedness")?, skipped))
}

fn check_weights(tensor: &TradeTensor, weights: &DistanceWeights) -> Result<()> {
    if weights.countries() != tensor.countries() {
        return Err(Error::InvalidArgument(
            "distance weights were built for a different country vocabulary".into(),
        ));
    }
    Ok(())
}

/// `Ω^(d)_opd = Σ_{d'≠d} w_dd' · x_opd' / x_op`.
pub fn importer_relatedness(
    tensor: &TradeTensor,
    weights: &DistanceWeights,
    year: i32,
    eval: EvaluationSet,
) -> Result<Vec<CellValue>> {
    check_weights(tensor, weights)?;
    let slice = year_slice(tensor, year)?;
    let flows = slice.flows();
    let groups = runs(flows, |f| (f.origin, f.product));
    let n_countries = tensor.countries().len() as u32;
    let cells = groups
        .par_iter()
        .flat_map_iter(|range| {
            let group = &flows[range.clone()];
            let (o, p) = (group[0].origin, group[0].product);
            let x_op = slice.marginals().x_op(o, p);
            let targets: Vec<u32> = match eval {
                EvaluationSet::Active => group.iter().map(|f| f.destination).collect(),
                EvaluationSet::Dense => (0..n_countries).filter(|&d| d != o).collect(),
            };
            targets.into_iter().map(move |d| {
                let row = weights.row(d as usize);
                let acc: f64 = group
                    .iter()
                    .filter(|f| f.destination != d)
                    .map(|f| row[f.destination as usize] * f.value)
                    .sum();
                CellValue {
                    origin: o,
                    product: p,
                    destination: d,
                    value: acc / x_op,
                }
            })
        })
        .collect();
    finish(cells, "importer relatedness")
}

/// `Ω^(o)_opd = Σ_{o'≠o} w_oo' · x_o'pd / x_pd`.
pub fn exporter_relatedness(
    tensor: &TradeTensor,
    weights: &DistanceWeights,
    year: i32,
    eval: EvaluationSet,
) -> Result<Vec<CellValue>> {
    check_weights(tensor, weights)?;
    let slice = year_slice(tensor, year)?;
    let mut by_market: Vec<Flow> = slice.flows().to_vec();
    by_market.sort_by_key(|f| (f.product, f.destination, f.origin));
    let groups = runs(&by_market, |f| (f.product, f.destination));
    let n_countries = tensor.countries().len() as u32;
    let cells = groups
        .par_iter()
        .flat_map_iter(|range| {
            let group = &by_market[range.clone()];
            let (p, d) = (group[0].product, group[0].destination);
            let x_pd = slice.marginals().x_pd(p, d);
            let targets: Vec<u32> = match eval {
                EvaluationSet::Active => group.iter().map(|f| f.origin).collect(),
                EvaluationSet::Dense => (0..n_countries).filter(|&o| o != d).collect(),
            };
            targets.into_iter().map(move |o| {
                let row = weights.row(o as usize);
                let acc: f64 = group
                    .iter()
                    .filter(|f| f.origin != o)
                    .map(|f| row[f.origin as usize] * f.value)
                    .sum();
                CellValue {
                    origin: o,
                    product: p,
                    destination: d,
                    value: acc / x_pd,
                }
            })
        })
        .collect();
    finish(cells, "exporter relatedness")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelatednessCell {
    pub year: i32,
    pub origin: u32,
    pub product: u32,
    pub destination: u32,
    pub omega: f64,
    pub omega_importer: f64,
    pub omega_exporter: f64,
}

impl RelatednessCell {
    fn key(&self) -> (i32, u32, u32, u32) {
        (self.year, self.origin, self.product, self.destination)
    }
}

/// The three measures for every evaluated cell, keyed by tensor indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RelatednessTensor {
    countries: Vec<String>,
    products: Vec<String>,
    cells: Vec<RelatednessCell>,
    skipped_products: Vec<String>,
}

impl RelatednessTensor {
    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn cells(&self) -> &[RelatednessCell] {
        &self.cells
    }

    pub fn skipped_products(&self) -> &[String] {
        &self.skipped_products
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, year: i32, o: u32, p: u32, d: u32) -> Option<&RelatednessCell> {
        self.cells
            .binary_search_by(|c| c.key().cmp(&(year, o, p, d)))
            .ok()
            .map(|i| &self.cells[i])
    }

    pub fn years(&self) -> Vec<i32> {
        let mut years: Vec<i32> = self.cells.iter().map(|c| c.year).collect();
        years.dedup();
        years
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["year", "origin", "product", "destination", "omega", "omega_d", "omega_o"])?;
        for c in &self.cells {
            w.write_record([
                c.year.to_string().as_str(),
                &self.countries[c.origin as usize],
                &self.products[c.product as usize],
                &self.countries[c.destination as usize],
                &fmt_significant(c.omega, 10),
                &fmt_significant(c.omega_importer, 10),
                &fmt_significant(c.omega_exporter, 10),
            ])?;
        }
        w.flush().map_err(|e| Error::io("relatedness", e))?;
        Ok(())
    }
}

/// Evaluates all three measures for `years` and keeps the cells where every
/// measure is defined.
pub fn compute_relatedness(
    tensor: &TradeTensor,
    phi: &ProximityMatrix,
    weights: &DistanceWeights,
    years: &[i32],
    eval: EvaluationSet,
) -> Result<RelatednessTensor> {
    let mut cells = Vec::new();
    let mut skipped_products = Vec::new();
    for &year in years {
        let (omega, skipped) = product_relatedness(tensor, phi, year, eval)?;
        let importer = importer_relatedness(tensor, weights, year, eval)?;
        let exporter = exporter_relatedness(tensor, weights, year, eval)?;
        skipped_products = skipped;
        let importer: HashMap<(u32, u32, u32), f64> =
            importer.iter().map(|c| (c.key(), c.value)).collect();
        let exporter: HashMap<(u32, u32, u32), f64> =
            exporter.iter().map(|c| (c.key(), c.value)).collect();
        for w in omega {
            let key = w.key();
            if let (Some(&di), Some(&oi)) = (importer.get(&key), exporter.get(&key)) {
                cells.push(RelatednessCell {
                    year,
                    origin: w.origin,
                    product: w.product,
                    destination: w.destination,
                    omega: w.value,
                    omega_importer: di,
                    omega_exporter: oi,
                });
            }
        }
    }
    cells.sort_by_key(RelatednessCell::key);
    Ok(RelatednessTensor {
        countries: tensor.countries().to_vec(),
        products: tensor.products().to_vec(),
        cells,
        skipped_products,
    })
}

/// Wraps cells computed elsewhere (for example by a reference implementation).
pub fn relatedness_from_cells(
    tensor: &TradeTensor,
    mut cells: Vec<RelatednessCell>,
    skipped_products: Vec<String>,
) -> RelatednessTensor {
    cells.sort_by_key(RelatednessCell::key);
    RelatednessTensor {
        countries: tensor.countries().to_vec(),
        products: tensor.products().to_vec(),
        cells,
        skipped_products,
    }
}

pub fn load_relatedness_csv(path: impl AsRef<Path>, tensor: &TradeTensor) -> Result<RelatednessTensor> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_relatedness_csv(file, tensor, &path.display().to_string())
}

/// Reads relatedness rows, resolving codes against the tensor's vocabularies.
pub fn read_relatedness_csv<R: Read>(
    reader: R,
    tensor: &TradeTensor,
    source_name: &str,
) -> Result<RelatednessTensor> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut cells = Vec::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        if !rdr
            .read_record(&mut row)
            .map_err(|e| Error::parse(source_name, line, e.to_string()))?
        {
            break;
        }
        if row.len() != 7 {
            return Err(Error::parse(source_name, line, format!("expected 7 fields, found {}", row.len())));
        }
        let country = |s: &str| {
            tensor
                .country_index(s)
                .ok_or_else(|| Error::parse(source_name, line, format!("unknown country `{s}`")))
        };
        let number = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(source_name, line, format!("bad number `{s}`")))
        };
        cells.push(RelatednessCell {
            year: row[0]
                .parse()
                .map_err(|_| Error::parse(source_name, line, format!("bad year `{}`", &row[0])))?,
            origin: country(&row[1])?,
            product: tensor
                .product_index(&row[2])
                .ok_or_else(|| Error::parse(source_name, line, format!("unknown product `{}`", &row[2])))?,
            destination: country(&row[3])?,
            omega: number(&row[4])?,
            omega_importer: number(&row[5])?,
            omega_exporter: number(&row[6])?,
        });
    }
    Ok(relatedness_from_cells(tensor, cells, Vec::new()))
}
