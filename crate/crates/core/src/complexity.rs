//! Revealed comparative advantage, the binary advantage matrix and the
//! product-space proximity matrix.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::TradeTensor;
use crate::numeric::{fmt_fixed, YearRange};

/// Balassa index over a pooled year window.
#[derive(Debug, Clone, PartialEq)]
pub struct RcaMatrix {
    countries: Vec<String>,
    products: Vec<String>,
    window: YearRange,
    values: Vec<f64>,
    exporting: Vec<bool>,
}

impl RcaMatrix {
    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn window(&self) -> YearRange {
        self.window
    }

    /// `None` for countries with no exports in the window.
    pub fn get(&self, o: usize, p: usize) -> Option<f64> {
        self.exporting[o].then(|| self.values[o * self.products.len() + p])
    }

    pub fn is_exporting(&self, o: usize) -> bool {
        self.exporting[o]
    }
}

/// `RCA_op = (x_op / Σ_p x_op) / (Σ_o x_op / Σ_op x_op)`, all sums pooled over `window`.
pub fn compute_rca(tensor: &TradeTensor, window: YearRange) -> Result<RcaMatrix> {
    let (nc, np) = (tensor.countries().len(), tensor.products().len());
    let mut x_op = vec![0.0f64; nc * np];
    let mut any = false;
    for slice in tensor.slices().iter().filter(|s| window.contains(s.year())) {
        for f in slice.flows() {
            x_op[f.origin as usize * np + f.product as usize] += f.value;
            any = true;
        }
    }
    if !any {
        return Err(Error::Empty(format!("no trade flows in {window}")));
    }
    let country_total: Vec<f64> = (0..nc).map(|o| x_op[o * np..(o + 1) * np].iter().sum()).collect();
    let product_total: Vec<f64> = (0..np).map(|p| (0..nc).map(|o| x_op[o * np + p]).sum()).collect();
    let world: f64 = country_total.iter().sum();

    let mut values = vec![0.0; nc * np];
    for o in 0..nc {
        if country_total[o] <= 0.0 {
            continue;
        }
        for p in 0..np {
            let x = x_op[o * np + p];
            if x > 0.0 {
                values[o * np + p] = (x / country_total[o]) / (product_total[p] / world);
            }
        }
    }
    Ok(RcaMatrix {
        countries: tensor.countries().to_vec(),
        products: tensor.products().to_vec(),
        window,
        values,
        exporting: country_total.iter().map(|&t| t > 0.0).collect(),
    })
}

/// Binary country × product matrix `M_op = [RCA_op ≥ threshold]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageMatrix {
    countries: Vec<String>,
    products: Vec<String>,
    threshold: f64,
    cells: Vec<bool>,
}

impl AdvantageMatrix {
    /// Builds a matrix directly from a row-major country × product grid.
    pub fn from_cells(
        countries: Vec<String>,
        products: Vec<String>,
        cells: Vec<bool>,
        threshold: f64,
    ) -> Result<Self> {
        if cells.len() != countries.len() * products.len() {
            return Err(Error::InvalidArgument(format!(
                "advantage grid has {} cells, expected {}",
                cells.len(),
                countries.len() * products.len()
            )));
        }
        Ok(AdvantageMatrix {
            countries,
            products,
            threshold,
            cells,
        })
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn get(&self, o: usize, p: usize) -> bool {
        self.cells[o * self.products.len() + p]
    }

    /// Number of countries with advantage in `p`.
    pub fn ubiquity(&self, p: usize) -> usize {
        (0..self.countries.len()).filter(|&o| self.get(o, p)).count()
    }
}

pub fn binarize(rca: &RcaMatrix, threshold: f64) -> Result<AdvantageMatrix> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "binarization threshold must be positive, got {threshold}"
        )));
    }
    let np = rca.products.len();
    let cells = (0..rca.countries.len() * np)
        .map(|i| rca.exporting[i / np] && rca.values[i] >= threshold)
        .collect();
    Ok(AdvantageMatrix {
        countries: rca.countries.clone(),
        products: rca.products.clone(),
        threshold,
        cells,
    })
}

/// Symmetric product × product proximity with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityMatrix {
    products: Vec<String>,
    phi: Vec<f64>,
    marginals: Vec<f64>,
}

impl ProximityMatrix {
    /// Validates and wraps a dense row-major matrix.
    pub fn from_dense(products: Vec<String>, phi: Vec<f64>) -> Result<Self> {
        let n = products.len();
        if phi.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "proximity matrix has {} entries, expected {}",
                phi.len(),
                n * n
            )));
        }
        for i in 0..n {
            if phi[i * n + i] != 0.0 {
                return Err(Error::Invariant(format!("non-zero diagonal for {}", products[i])));
            }
            for j in 0..n {
                let v = phi[i * n + j];
                if !(0.0..=1.0).contains(&v) || v != phi[j * n + i] {
                    return Err(Error::Invariant(format!(
                        "proximity {}-{} = {v} is asymmetric or outside [0,1]",
                        products[i], products[j]
                    )));
                }
            }
        }
        let marginals = (0..n).map(|i| phi[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(ProximityMatrix {
            products,
            phi,
            marginals,
        })
    }

    pub fn products(&self) -> &[String] {
        &self.products
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.phi[i * self.products.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.products.len();
        &self.phi[i * n..(i + 1) * n]
    }

    /// `φ_p = Σ_p' φ_pp'`.
    #[inline]
    pub fn marginal(&self, i: usize) -> f64 {
        self.marginals[i]
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.products.iter().position(|p| p == code)
    }

    /// Applies `f` to every entry, keeping the matrix symmetric.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_dense(self.products.clone(), self.phi.iter().map(|&v| if v == 0.0 { 0.0 } else { f(v) }).collect())
    }
}

/// `φ_ij = |{o: M_oi ∧ M_oj}| / max(ubiquity_i, ubiquity_j)` for `i ≠ j`.
///
/// Products are packed as country bitsets so each pair costs a handful of
/// word-wise AND + popcount operations.
pub fn compute_proximity(m: &AdvantageMatrix) -> ProximityMatrix {
    let (nc, np) = (m.countries.len(), m.products.len());
    let words = nc.div_ceil(64).max(1);
    let mut bits = vec![0u64; np * words];
    for o in 0..nc {
        for p in 0..np {
            if m.get(o, p) {
                bits[p * words + o / 64] |= 1 << (o % 64);
            }
        }
    }
    let ubiquity: Vec<u32> = (0..np)
        .map(|p| bits[p * words..(p + 1) * words].iter().map(|w| w.count_ones()).sum())
        .collect();

    let mut phi = vec![0.0f64; np * np];
    phi.par_chunks_mut(np.max(1)).enumerate().for_each(|(i, row)| {
        let bi = &bits[i * words..(i + 1) * words];
        for (j, slot) in row.iter_mut().enumerate() {
            if i == j {
                continue;
            }
            let denom = ubiquity[i].max(ubiquity[j]);
            if denom == 0 || ubiquity[i].min(ubiquity[j]) == 0 {
                continue;
            }
            let bj = &bits[j * words..(j + 1) * words];
            let joint: u32 = bi.iter().zip(bj).map(|(a, b)| (a & b).count_ones()).sum();
            *slot = joint as f64 / denom as f64;
        }
    });
    let marginals = (0..np).map(|i| phi[i * np..(i + 1) * np].iter().sum()).collect();
    ProximityMatrix {
        products: m.products.clone(),
        phi,
        marginals,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub product_i: String,
    pub product_j: String,
    pub phi: f64,
}

/// Upper-triangle edges with `φ ≥ cutoff`.
pub fn export_product_space(phi: &ProximityMatrix, cutoff: f64) -> Result<Vec<Edge>> {
    if cutoff.is_nan() || cutoff < 0.0 {
        return Err(Error::InvalidArgument(format!("cutoff must be non-negative, got {cutoff}")));
    }
    let n = phi.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let v = phi.get(i, j);
            if v >= cutoff {
                edges.push(Edge {
                    product_i: phi.products[i].clone(),
                    product_j: phi.products[j].clone(),
                    phi: v,
                });
            }
        }
    }
    Ok(edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub cumulative_fraction: f64,
}

/// Distribution of the upper-triangle φ values over `bins` equal-width bins
/// on `[0, 1]`; the last bin is closed on the right.
pub fn phi_histogram(phi: &ProximityMatrix, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let n = phi.len();
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let b = ((phi.get(i, j) * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
            total += 1;
        }
    }
    let mut cumulative = 0usize;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| {
            cumulative += count;
            HistogramBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count,
                cumulative_fraction: if total == 0 { 0.0 } else { cumulative as f64 / total as f64 },
            }
        })
        .collect())
}

pub fn write_edges_csv<W: Write>(writer: W, edges: &[Edge]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["product_i", "product_j", "phi"])?;
    for e in edges {
        w.write_record([e.product_i.as_str(), e.product_j.as_str(), fmt_fixed(e.phi, 6).as_str()])?;
    }
    w.flush().map_err(|e| Error::io("edges", e))?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(writer: W, bins: &[HistogramBin]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bin_lower", "bin_upper", "count", "cumulative_fraction"])?;
    for b in bins {
        w.write_record([
            fmt_fixed(b.lower, 6),
            fmt_fixed(b.upper, 6),
            b.count.to_string(),
            fmt_fixed(b.cumulative_fraction, 6),
        ])?;
    }
    w.flush().map_err(|e| Error::io("histogram", e))?;
    Ok(())
}

pub fn load_proximity_csv(path: impl AsRef<Path>) -> Result<ProximityMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_proximity_csv(file, &path.display().to_string())
}

/// Reads `product_i,product_j,phi` triplets. Pairs absent from the file have
/// φ = 0; the product vocabulary is every code mentioned.
pub fn read_proximity_csv<R: Read>(reader: R, source_name: &str) -> Result<ProximityMatrix> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut triplets = Vec::new();
    let mut codes = BTreeSet::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        if !rdr
            .read_record(&mut row)
            .map_err(|e| Error::parse(source_name, line, e.to_string()))?
        {
            break;
        }
        let (a, b, v) = (row.get(0).unwrap_or(""), row.get(1).unwrap_or(""), row.get(2).unwrap_or(""));
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::parse(source_name, line, format!("bad phi `{v}`")))?;
        if a == b || !(0.0..=1.0).contains(&v) {
            return Err(Error::parse(source_name, line, format!("invalid proximity {a}-{b} = {v}")));
        }
        codes.insert(a.trim().to_string());
        codes.insert(b.trim().to_string());
        triplets.push((a.trim().to_string(), b.trim().to_string(), v));
    }
    let products: Vec<String> = codes.into_iter().collect();
    let index: HashMap<&str, usize> = products.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let n = products.len();
    let mut phi = vec![0.0; n * n];
    for (a, b, v) in &triplets {
        let (i, j) = (index[a.as_str()], index[b.as_str()]);
        phi[i * n + j] = *v;
        phi[j * n + i] = *v;
    }
    ProximityMatrix::from_dense(products, phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn rca_single_country_single_product_is_one() {
        let t = TradeTensor::from_cells(vec![(2000, "AAA", "0101", "BBB", 5.0)]).unwrap();
        let rca = compute_rca(&t, YearRange::single(2000)).unwrap();
        let a = t.country_index("AAA").unwrap() as usize;
        assert_eq!(rca.get(a, 0), Some(1.0));
        // BBB never exports.
        assert_eq!(rca.get(1 - a, 0), None);
    }

    #[test]
    fn rca_hand_example() {
        let t = TradeTensor::from_cells(vec![
            (2000, "AAA", "0001", "CCC", 100.0),
            (2000, "BBB", "0001", "CCC", 100.0),
            (2000, "BBB", "0002", "CCC", 100.0),
        ])
        .unwrap();
        let rca = compute_rca(&t, YearRange::single(2000)).unwrap();
        assert!((rca.get(0, 0).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(rca.get(0, 1), Some(0.0));
    }

    #[test]
    fn rca_window_pools_years_and_rejects_empty_windows() {
        let t = TradeTensor::from_cells(vec![
            (2000, "AAA", "0001", "CCC", 100.0),
            (2001, "BBB", "0002", "CCC", 100.0),
        ])
        .unwrap();
        let pooled = compute_rca(&t, "2000-2001".parse().unwrap()).unwrap();
        assert_eq!(pooled.get(0, 0), Some(2.0));
        assert!(matches!(compute_rca(&t, YearRange::single(1999)), Err(Error::Empty(_))));
    }

    #[test]
    fn binarize_boundary_is_inclusive() {
        let t = TradeTensor::from_cells(vec![(2000, "AAA", "0101", "BBB", 5.0)]).unwrap();
        let rca = compute_rca(&t, YearRange::single(2000)).unwrap();
        let m = binarize(&rca, 1.0).unwrap();
        assert!(m.get(0, 0));
        assert!(!binarize(&rca, 1.01).unwrap().get(0, 0));
        assert!(binarize(&rca, 0.0).is_err());
    }

    #[test]
    fn proximity_examples() {
        // p0 by {A,B}; p1 by {B,C,D}; p2 by {A,B}; p3 by nobody; p4 by {C,D}.
        let grid = [
            [1, 0, 1, 0, 0],
            [1, 1, 1, 0, 0],
            [0, 1, 0, 0, 1],
            [0, 1, 0, 0, 1],
        ];
        let cells = grid.iter().flatten().map(|&v| v == 1).collect();
        let m = AdvantageMatrix::from_cells(names("C", 4), names("P", 5), cells, 1.0).unwrap();
        let phi = compute_proximity(&m);
        assert_eq!(phi.get(0, 1), 1.0 / 3.0);
        assert_eq!(phi.get(0, 2), 1.0);
        assert_eq!(phi.get(0, 4), 0.0);
        assert_eq!(phi.get(0, 3), 0.0);
        assert_eq!(phi.get(0, 0), 0.0);
        assert_eq!(phi.marginal(3), 0.0);
        assert_eq!(phi.get(1, 0), phi.get(0, 1));
    }

    #[test]
    fn product_space_export_and_histogram() {
        let phi = ProximityMatrix::from_dense(
            names("P", 3),
            vec![0.0, 1.0 / 3.0, 0.5, 1.0 / 3.0, 0.0, 0.0, 0.5, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(export_product_space(&phi, 0.0).unwrap().len(), 3);
        assert!(export_product_space(&phi, 1.01).unwrap().is_empty());
        let edges = export_product_space(&phi, 0.3).unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!((edges[0].product_i.as_str(), edges[0].product_j.as_str()), ("P0", "P1"));
        let mut buf = Vec::new();
        write_edges_csv(&mut buf, &edges).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "product_i,product_j,phi\nP0,P1,0.333333\nP0,P2,0.500000\n"
        );
        assert!(export_product_space(&phi, -0.1).is_err());

        let hist = phi_histogram(&phi, 4).unwrap();
        assert_eq!(hist.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1, 1, 0]);
        assert_eq!(hist[3].cumulative_fraction, 1.0);
    }

    #[test]
    fn proximity_csv_round_trip_fills_missing_pairs_with_zero() {
        let text = "product_i,product_j,phi\n0101,0102,0.250000\n0102,0103,1.000000\n";
        let phi = read_proximity_csv(text.as_bytes(), "p.csv").unwrap();
        assert_eq!(phi.products(), &["0101", "0102", "0103"]);
        assert_eq!(phi.get(1, 0), 0.25);
        assert_eq!(phi.get(0, 2), 0.0);
        assert_eq!(phi.marginal(1), 1.25);
        let bad = "product_i,product_j,phi\n0101,0102,1.5\n";
        assert!(read_proximity_csv(bad.as_bytes(), "p.csv").is_err());
    }

    #[test]
    fn from_dense_rejects_asymmetry() {
        assert!(ProximityMatrix::from_dense(names("P", 2), vec![0.0, 0.5, 0.4, 0.0]).is_err());
        assert!(ProximityMatrix::from_dense(names("P", 2), vec![0.1, 0.5, 0.5, 0.0]).is_err());
    }
}
