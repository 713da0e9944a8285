//! Seeded synthetic worlds and naive reference implementations.
//!
//! Everything here is deliberately slow and literal: dense loops, no sparsity
//! shortcuts, no shared arithmetic with the production path. Test suites
//! compare the production modules against these functions.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::complexity::{export_product_space, write_edges_csv, ProximityMatrix};
use crate::error::{Error, Result};
use crate::gravity::{
    coefficient_names, Coefficient, GravityObservation, LallCategory, RegressionResult, N_REGRESSORS,
    SPECIAL_SITC3,
};
use crate::ingest::{CountryTable, DyadInfo, DyadTable, Flow, TradeTensor};
use crate::relatedness::{relatedness_from_cells, RelatednessCell, RelatednessTensor};

const EARTH_RADIUS_KM: f64 = 6371.0;
const MIN_SEPARATION_KM: f64 = 1.0;

/// City locations of the synthetic countries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    /// Uniform random points on the sphere.
    Sphere,
    /// Fixed `(latitude, longitude)` pairs in degrees, one per country.
    Fixture(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub n_countries: usize,
    pub n_products: usize,
    pub n_years: usize,
    pub start_year: i32,
    pub horizon: usize,
    pub geometry: Geometry,
    /// Intercept followed by the regressor coefficients, on the raw scale.
    pub planted_beta: [f64; N_REGRESSORS + 1],
    pub noise_sigma: f64,
    /// Probability that an `(o, p, d)` cell is active.
    pub sparsity: f64,
    pub seed: u64,
}

/// A plausible, stable data-generating process.
pub const DEFAULT_PLANTED_BETA: [f64; N_REGRESSORS + 1] = [
    1.0,  // intercept
    3.0,  // omega
    2.0,  // omega_d
    2.0,  // omega_o
    0.6,  // log_x_opd
    0.1,  // log_x_op
    0.1,  // log_x_pd
    -0.3, // log_distance
    0.1,  // log_gdp_o
    0.1,  // log_gdp_d
    0.05, // log_pop_o
    0.05, // log_pop_d
    0.3,  // border
    0.2,  // colony
    0.2,  // language
    0.1,  // log_lang_proximity
];

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_countries: 12,
            n_products: 10,
            n_years: 7,
            start_year: 2000,
            horizon: 2,
            geometry: Geometry::Sphere,
            planted_beta: DEFAULT_PLANTED_BETA,
            noise_sigma: 1.0,
            sparsity: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_countries < 2 {
            return bad(format!("a world needs at least 2 countries, got {}", self.n_countries));
        }
        if self.n_countries > 26 * 26 * 26 || self.n_products == 0 || self.n_products > 9999 {
            return bad(format!(
                "unsupported world size {} countries x {} products",
                self.n_countries, self.n_products
            ));
        }
        if self.horizon == 0 || self.n_years <= self.horizon {
            return bad(format!("{} years cannot host a {}-year horizon", self.n_years, self.horizon));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad(format!("sparsity must lie in (0, 1], got {}", self.sparsity));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if let Geometry::Fixture(points) = &self.geometry {
            if points.len() != self.n_countries {
                return bad(format!("fixture has {} cities for {} countries", points.len(), self.n_countries));
            }
        }
        Ok(())
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.start_year..=self.start_year + self.n_years as i32 - 1
    }
}

/// A generated world plus the proximity matrix its dynamics used.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SyntheticWorldConfig,
    pub tensor: TradeTensor,
    pub countries: CountryTable,
    pub dyads: DyadTable,
    pub phi: ProximityMatrix,
}

pub fn country_code(i: usize) -> String {
    let letter = |k: usize| (b'A' + (k % 26) as u8) as char;
    [letter(i / 676), letter(i / 26), letter(i)].iter().collect()
}

pub fn product_code(i: usize) -> String {
    format!("{:04}", i + 1)
}

fn great_circle_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

fn place_cities(config: &SyntheticWorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    match &config.geometry {
        Geometry::Fixture(points) => {
            for i in 0..points.len() {
                for j in 0..i {
                    if great_circle_km(points[i], points[j]) < MIN_SEPARATION_KM {
                        return Err(Error::InvalidArgument(format!(
                            "fixture cities {i} and {j} coincide"
                        )));
                    }
                }
            }
            Ok(points.clone())
        }
        Geometry::Sphere => {
            let mut points: Vec<(f64, f64)> = Vec::with_capacity(config.n_countries);
            while points.len() < config.n_countries {
                let lat = (2.0 * rng.random::<f64>() - 1.0).asin().to_degrees();
                let lon = 360.0 * rng.random::<f64>() - 180.0;
                if points.iter().all(|&p| great_circle_km(p, (lat, lon)) >= MIN_SEPARATION_KM) {
                    points.push((lat, lon));
                }
            }
            Ok(points)
        }
    }
}

/// Dense `o × p × d` value cube of one year.
#[derive(Debug, Clone)]
struct Cube {
    nc: usize,
    np: usize,
    x: Vec<f64>,
}

impl Cube {
    fn zeros(nc: usize, np: usize) -> Self {
        Cube { nc, np, x: vec![0.0; nc * np * nc] }
    }

    fn at(&self, o: usize, p: usize, d: usize) -> f64 {
        self.x[(o * self.np + p) * self.nc + d]
    }

    fn set(&mut self, o: usize, p: usize, d: usize, v: f64) {
        self.x[(o * self.np + p) * self.nc + d] = v;
    }
}

/// The three measures of one cell, literally transcribed. `None` where a
/// denominator vanishes or the product has no proximity to any other.
fn naive_cell(x: &Cube, phi: &[Vec<f64>], w: &[Vec<f64>], o: usize, p: usize, d: usize) -> Option<[f64; 3]> {
    let (nc, np) = (x.nc, x.np);
    let mut x_od = 0.0;
    for q in 0..np {
        x_od += x.at(o, q, d);
    }
    let mut x_op = 0.0;
    for e in 0..nc {
        x_op += x.at(o, p, e);
    }
    let mut x_pd = 0.0;
    for s in 0..nc {
        x_pd += x.at(s, p, d);
    }
    let mut phi_p = 0.0;
    for q in 0..np {
        if q != p {
            phi_p += phi[p][q];
        }
    }
    if !(x_od > 0.0 && x_op > 0.0 && x_pd > 0.0 && phi_p > 0.0) {
        return None;
    }
    let mut omega = 0.0;
    for q in 0..np {
        if q != p {
            omega += phi[p][q] / phi_p * (x.at(o, q, d) / x_od);
        }
    }
    let mut omega_d = 0.0;
    for e in 0..nc {
        if e != d {
            omega_d += w[d][e] * (x.at(o, p, e) / x_op);
        }
    }
    let mut omega_o = 0.0;
    for s in 0..nc {
        if s != o {
            omega_o += w[o][s] * (x.at(s, p, d) / x_pd);
        }
    }
    Some([omega, omega_d, omega_o])
}

fn naive_weights(distance: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = distance.len();
    let mut w = vec![vec![0.0; n]; n];
    for c in 0..n {
        let mut total = 0.0;
        for k in 0..n {
            if k != c {
                total += 1.0 / distance[c][k];
            }
        }
        for k in 0..n {
            if k != c {
                w[c][k] = (1.0 / distance[c][k]) / total;
            }
        }
    }
    w
}

/// φ from the pooled RCA of `cubes`, binarized at 1.
fn naive_proximity(cubes: &[&Cube]) -> Vec<Vec<f64>> {
    let (nc, np) = (cubes[0].nc, cubes[0].np);
    let mut x_op = vec![vec![0.0; np]; nc];
    for cube in cubes {
        for (o, row) in x_op.iter_mut().enumerate() {
            for (p, v) in row.iter_mut().enumerate() {
                for d in 0..nc {
                    *v += cube.at(o, p, d);
                }
            }
        }
    }
    let x_o: Vec<f64> = x_op.iter().map(|r| r.iter().sum()).collect();
    let x_p: Vec<f64> = (0..np).map(|p| x_op.iter().map(|r| r[p]).sum()).collect();
    let x: f64 = x_o.iter().sum();
    let m: Vec<Vec<bool>> = (0..nc)
        .map(|o| {
            (0..np)
                .map(|p| x_o[o] > 0.0 && x_p[p] > 0.0 && (x_op[o][p] / x_o[o]) / (x_p[p] / x) >= 1.0)
                .collect()
        })
        .collect();
    let mut phi = vec![vec![0.0; np]; np];
    for i in 0..np {
        for j in 0..np {
            if i == j {
                continue;
            }
            let (mut both, mut ui, mut uj) = (0usize, 0usize, 0usize);
            for row in &m {
                both += (row[i] && row[j]) as usize;
                ui += row[i] as usize;
                uj += row[j] as usize;
            }
            if ui > 0 && uj > 0 {
                let a = both as f64 / ui as f64;
                let b = both as f64 / uj as f64;
                phi[i][j] = a.min(b);
            }
        }
    }
    phi
}

/// Draws a world: the first `horizon` years are log-normal on a random
/// support; every later year `t` is the planted model applied to the
/// regressors computed from year `t - horizon`, plus Gaussian noise.
pub fn generate_world(config: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (nc, np) = (config.n_countries, config.n_products);
    let countries: Vec<String> = (0..nc).map(country_code).collect();
    let products: Vec<String> = (0..np).map(product_code).collect();
    let std_normal: Normal<f64> = Normal::new(0.0, 1.0).expect("valid normal");

    let cities = place_cities(config, &mut rng)?;
    let mut distance = vec![vec![0.0; nc]; nc];
    let mut dyads = DyadTable::new();
    let mut flags = Vec::new();
    for a in 0..nc {
        for b in a + 1..nc {
            let km = great_circle_km(cities[a], cities[b]);
            distance[a][b] = km;
            distance[b][a] = km;
            let f = [rng.random::<f64>() < 0.15, rng.random::<f64>() < 0.1, rng.random::<f64>() < 0.2];
            flags.push(((a, b), km, f, rng.random::<f64>()));
        }
    }
    // Every dummy varies whenever there are at least two pairs.
    if flags.len() >= 2 {
        for k in 0..3 {
            if flags.iter().all(|f| f.2[k] == flags[0].2[k]) {
                flags[0].2[k] = !flags[0].2[k];
            }
        }
    }
    let mut dyad_cov = vec![vec![[0.0; 5]; nc]; nc];
    for ((a, b), km, f, lang) in flags {
        let info = DyadInfo {
            distance_km: km,
            border: f[0],
            colony: f[1],
            language: f[2],
            lang_proximity: lang,
        };
        dyads.insert(&countries[a], &countries[b], info)?;
        let flag = |v: bool| if v { 1.0 } else { 0.0 };
        let cov = [km.ln(), flag(f[0]), flag(f[1]), flag(f[2]), lang.ln_1p()];
        dyad_cov[a][b] = cov;
        dyad_cov[b][a] = cov;
    }

    let years: Vec<i32> = config.years().collect();
    let mut meta = CountryTable::new();
    let mut country_cov: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(years.len()); nc];
    for (c, code) in countries.iter().enumerate() {
        let mut pop = (16.0 + 1.5 * std_normal.sample(&mut rng)).exp();
        let mut gdp = (9.0 + 1.0 * std_normal.sample(&mut rng)).exp();
        for &year in &years {
            meta.insert(code, year, pop, gdp);
            country_cov[c].push((gdp.ln(), pop.ln()));
            pop *= (0.01 + 0.02 * std_normal.sample(&mut rng)).exp();
            gdp *= (0.02 + 0.05 * std_normal.sample(&mut rng)).exp();
        }
    }

    let mut cubes: Vec<Cube> = Vec::with_capacity(years.len());
    let active: Vec<bool> = (0..nc * np * nc).map(|_| rng.random::<f64>() < config.sparsity).collect();
    for _ in 0..config.horizon {
        let mut cube = Cube::zeros(nc, np);
        for o in 0..nc {
            for p in 0..np {
                for d in 0..nc {
                    if o != d && active[(o * np + p) * nc + d] {
                        cube.set(o, p, d, (10.0 + 2.0 * std_normal.sample(&mut rng)).exp());
                    }
                }
            }
        }
        cubes.push(cube);
    }

    let base_refs: Vec<&Cube> = cubes.iter().collect();
    let phi_raw = naive_proximity(&base_refs);
    let phi_rounded: Vec<Vec<f64>> = phi_raw
        .iter()
        .map(|row| row.iter().map(|v| (v * 1e6).round() / 1e6).collect())
        .collect();
    let weights = naive_weights(&distance);
    let beta = &config.planted_beta;

    for step in config.horizon..years.len() {
        let base = step - config.horizon;
        let prev = &cubes[base];
        let mut next = Cube::zeros(nc, np);
        for o in 0..nc {
            for p in 0..np {
                let mut x_op = 0.0;
                for e in 0..nc {
                    x_op += prev.at(o, p, e);
                }
                for d in 0..nc {
                    let x = prev.at(o, p, d);
                    if x <= 0.0 {
                        continue;
                    }
                    let mut x_pd = 0.0;
                    for s in 0..nc {
                        x_pd += prev.at(s, p, d);
                    }
                    let rel = naive_cell(prev, &phi_rounded, &weights, o, p, d).unwrap_or([0.0; 3]);
                    let (gdp_o, pop_o) = country_cov[o][base];
                    let (gdp_d, pop_d) = country_cov[d][base];
                    let dy = dyad_cov[o][d];
                    let regressors = [
                        rel[0], rel[1], rel[2], x.ln(), x_op.ln(), x_pd.ln(), dy[0], gdp_o, gdp_d, pop_o, pop_d,
                        dy[1], dy[2], dy[3], dy[4],
                    ];
                    let mut y = beta[0];
                    for (b, r) in beta[1..].iter().zip(regressors) {
                        y += b * r;
                    }
                    if config.noise_sigma > 0.0 {
                        y += config.noise_sigma * std_normal.sample(&mut rng);
                    }
                    let v = y.exp();
                    if !(v.is_finite() && v > 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "planted model is explosive: ln x = {y} in year {}",
                            years[step]
                        )));
                    }
                    next.set(o, p, d, v);
                }
            }
        }
        cubes.push(next);
    }

    let mut by_year: BTreeMap<i32, Vec<Flow>> = BTreeMap::new();
    for (&year, cube) in years.iter().zip(&cubes) {
        let flows = by_year.entry(year).or_default();
        for o in 0..nc {
            for p in 0..np {
                for d in 0..nc {
                    let v = cube.at(o, p, d);
                    if v > 0.0 {
                        flows.push(Flow {
                            origin: o as u32,
                            product: p as u32,
                            destination: d as u32,
                            value: v,
                        });
                    }
                }
            }
        }
    }
    let tensor = TradeTensor::from_indexed(countries, products.clone(), by_year);
    let phi = ProximityMatrix::from_dense(products, phi_rounded.concat())?;
    Ok(SyntheticWorld {
        config: config.clone(),
        tensor,
        countries: meta,
        dyads,
        phi,
    })
}

/// Eqs. of the three relatedness measures by nested loops over a dense copy
/// of the year, for every active cell. Weights come straight from the dyad
/// distances over the tensor's countries.
pub fn brute_force_relatedness(
    tensor: &TradeTensor,
    phi: &ProximityMatrix,
    dyads: &DyadTable,
    year: i32,
) -> Result<RelatednessTensor> {
    let slice = tensor.year(year).ok_or(Error::MissingYear(year))?;
    let countries = tensor.countries();
    let products = tensor.products();
    let (nc, np) = (countries.len(), products.len());
    let mut cube = Cube::zeros(nc, np);
    for f in slice.flows() {
        cube.set(f.origin as usize, f.product as usize, f.destination as usize, f.value);
    }
    let index: HashMap<&str, usize> = phi.products().iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let mut phi_dense = vec![vec![0.0; np]; np];
    for (a, pa) in products.iter().enumerate() {
        for (b, pb) in products.iter().enumerate() {
            if let (Some(&i), Some(&j)) = (index.get(pa.as_str()), index.get(pb.as_str())) {
                phi_dense[a][b] = phi.get(i, j);
            }
        }
    }
    let mut distance = vec![vec![0.0; nc]; nc];
    for a in 0..nc {
        for b in 0..nc {
            if a != b {
                distance[a][b] = dyads.distance(&countries[a], &countries[b])?;
            }
        }
    }
    let weights = naive_weights(&distance);
    let mut cells = Vec::new();
    for o in 0..nc {
        for p in 0..np {
            for d in 0..nc {
                if cube.at(o, p, d) <= 0.0 {
                    continue;
                }
                if let Some([omega, omega_d, omega_o]) = naive_cell(&cube, &phi_dense, &weights, o, p, d) {
                    cells.push(RelatednessCell {
                        year,
                        origin: o as u32,
                        product: p as u32,
                        destination: d as u32,
                        omega,
                        omega_importer: omega_d,
                        omega_exporter: omega_o,
                    });
                }
            }
        }
    }
    let skipped = products
        .iter()
        .enumerate()
        .filter(|(p, _)| phi_dense[*p].iter().sum::<f64>() <= 0.0)
        .map(|(_, code)| code.clone())
        .collect();
    Ok(relatedness_from_cells(tensor, cells, skipped))
}

/// Textbook least squares: dense design with an intercept, explicit
/// Gauss-Jordan inversion of `X'X` with full pivoting.
pub fn brute_force_ols(rows: &[GravityObservation]) -> Result<RegressionResult> {
    let names = coefficient_names();
    let k = N_REGRESSORS + 1;
    let n = rows.len();
    if n <= k {
        return Err(Error::Undersized { n, k });
    }
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| std::iter::once(1.0).chain(r.regressors.iter().copied()).collect())
        .collect();
    let y: Vec<f64> = rows.iter().map(|r| r.response).collect();

    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for (row, &yi) in x.iter().zip(&y) {
        for a in 0..k {
            xty[a] += row[a] * yi;
            for b in 0..k {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    let scale: Vec<f64> = (0..k).map(|a| xtx[a][a].sqrt()).collect();
    if let Some(a) = (0..k).find(|&a| !(scale[a] > 0.0)) {
        return Err(Error::Singular(vec![names[a].clone()]));
    }
    // Work on the unit-diagonal matrix D^-1/2 X'X D^-1/2.
    let mut a: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| xtx[i][j] / (scale[i] * scale[j])).collect())
        .collect();
    let inv_scaled = gauss_jordan_inverse(&mut a).map_err(|cols| Error::Singular(cols.iter().map(|&c| names[c].clone()).collect()))?;
    let inv: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| inv_scaled[i][j] / (scale[i] * scale[j])).collect())
        .collect();
    let mut beta: Vec<f64> = (0..k).map(|i| (0..k).map(|j| inv[i][j] * xty[j]).sum()).collect();
    // One refinement step against the gradient recomputed from the raw rows.
    let mut grad = vec![0.0; k];
    for (row, &yi) in x.iter().zip(&y) {
        let e = yi - row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        for a in 0..k {
            grad[a] += row[a] * e;
        }
    }
    for i in 0..k {
        beta[i] += (0..k).map(|j| inv[i][j] * grad[j]).sum::<f64>();
    }

    let mut rss = 0.0;
    for (row, &yi) in x.iter().zip(&y) {
        let fit: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        rss += (yi - fit) * (yi - fit);
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let df = (n - k) as f64;
    let sigma2 = rss / df;
    let t_dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let coefficients = (0..k)
        .map(|i| {
            let se = (sigma2 * inv[i][i]).sqrt();
            let t = if se > 0.0 { beta[i] / se } else { f64::INFINITY.copysign(beta[i]) };
            Coefficient {
                name: names[i].clone(),
                beta: beta[i],
                se,
                t,
                p: (2.0 * t_dist.cdf(-t.abs())).min(1.0),
            }
        })
        .collect();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 0.0 };
    Ok(RegressionResult {
        coefficients,
        n,
        k,
        r_squared,
        adj_r_squared: 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / df,
        resid_se: sigma2.sqrt(),
        rss,
        tss,
    })
}

/// Inverts `a` in place by full-pivot Gauss-Jordan elimination. On failure
/// returns the columns that never found a usable pivot.
fn gauss_jordan_inverse(a: &mut [Vec<f64>]) -> std::result::Result<Vec<Vec<f64>>, Vec<usize>> {
    const TOL: f64 = 1e-10;
    let k = a.len();
    let mut inv: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut row_used = vec![false; k];
    let mut col_used = vec![false; k];
    let mut pivot_of_col = vec![0usize; k];
    for _ in 0..k {
        let mut best = (0.0, 0, 0);
        for r in 0..k {
            if row_used[r] {
                continue;
            }
            for c in 0..k {
                if !col_used[c] && a[r][c].abs() > best.0 {
                    best = (a[r][c].abs(), r, c);
                }
            }
        }
        if best.0 < TOL {
            return Err((0..k).filter(|&c| !col_used[c]).collect());
        }
        let (_, r, c) = best;
        row_used[r] = true;
        col_used[c] = true;
        pivot_of_col[c] = r;
        let p = a[r][c];
        for j in 0..k {
            a[r][j] /= p;
            inv[r][j] /= p;
        }
        for i in 0..k {
            if i != r && a[i][c] != 0.0 {
                let f = a[i][c];
                for j in 0..k {
                    a[i][j] -= f * a[r][j];
                    inv[i][j] -= f * inv[r][j];
                }
            }
        }
    }
    // After elimination `a` is a permutation: row pivot_of_col[c] holds the
    // solution for variable c.
    Ok((0..k).map(|c| inv[pivot_of_col[c]].clone()).collect())
}

/// Largest `|x_j'e| / (‖x_j‖ ‖e‖)` over the design columns, for the given
/// coefficients (intercept first).
pub fn residual_orthogonality(rows: &[GravityObservation], beta: &[f64]) -> f64 {
    let k = N_REGRESSORS + 1;
    let column = |r: &GravityObservation, j: usize| if j == 0 { 1.0 } else { r.regressors[j - 1] };
    let resid: Vec<f64> = rows
        .iter()
        .map(|r| r.response - (0..k).map(|j| beta[j] * column(r, j)).sum::<f64>())
        .collect();
    let e_norm = resid.iter().map(|e| e * e).sum::<f64>().sqrt();
    if e_norm == 0.0 {
        return 0.0;
    }
    (0..k)
        .map(|j| {
            let dot: f64 = rows.iter().zip(&resid).map(|(r, e)| column(r, j) * e).sum();
            let norm = rows.iter().map(|r| column(r, j).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                0.0
            } else {
                dot.abs() / (norm * e_norm)
            }
        })
        .fold(0.0, f64::max)
}

/// Paths written by [`write_world`].
#[derive(Debug, Clone, PartialEq)]
pub struct WorldFiles {
    pub trade: PathBuf,
    pub countries: PathBuf,
    pub dyads: PathBuf,
    pub proximity: PathBuf,
    pub concordance: PathBuf,
    pub planted: PathBuf,
}

#[derive(Debug, Serialize)]
struct PlantedFile<'a> {
    config: &'a SyntheticWorldConfig,
    planted: BTreeMap<String, f64>,
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Technology category of synthetic product `i`, cycling through the ranks.
pub fn synthetic_category(i: usize) -> LallCategory {
    LallCategory::RANKED[i % LallCategory::RANKED.len()]
}

/// Writes the world in the ingest formats. Every cell is reported by its
/// exporter; roughly a quarter are also reported, identically, by the importer.
pub fn write_world(world: &SyntheticWorld, dir: &Path) -> Result<WorldFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = WorldFiles {
        trade: dir.join("trade.csv"),
        countries: dir.join("countries.csv"),
        dyads: dir.join("dyads.csv"),
        proximity: dir.join("proximity.csv"),
        concordance: dir.join("lall.csv"),
        planted: dir.join("planted.json"),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(world.config.seed ^ 0x5eed);
    let mut w = csv::Writer::from_writer(create(&files.trade)?);
    w.write_record(["year", "origin", "destination", "product", "value", "reporter"])?;
    for (year, o, p, d, v) in world.tensor.iter_coded() {
        let value = v.to_string();
        let year = year.to_string();
        w.write_record([year.as_str(), o, d, p, value.as_str(), "exporter"])?;
        if rng.random::<f64>() < 0.25 {
            w.write_record([year.as_str(), o, d, p, value.as_str(), "importer"])?;
        }
    }
    w.flush().map_err(|e| Error::io(&files.trade, e))?;

    world.countries.write_csv(create(&files.countries)?)?;
    world.dyads.write_csv(create(&files.dyads)?)?;
    write_edges_csv(create(&files.proximity)?, &export_product_space(&world.phi, 0.0)?)?;

    let mut w = csv::Writer::from_writer(create(&files.concordance)?);
    w.write_record(["hs4", "sitc3", "category"])?;
    let mut sitc = 100;
    for (i, code) in world.tensor.products().iter().enumerate() {
        while SPECIAL_SITC3.contains(&format!("{sitc:03}").as_str()) {
            sitc += 1;
        }
        w.write_record([code.as_str(), &format!("{sitc:03}"), synthetic_category(i).code()])?;
        sitc += 1;
    }
    w.flush().map_err(|e| Error::io(&files.concordance, e))?;

    let planted = PlantedFile {
        config: &world.config,
        planted: coefficient_names().into_iter().zip(world.config.planted_beta).collect(),
    };
    let mut out = create(&files.planted)?;
    serde_json::to_writer_pretty(&mut out, &planted)?;
    out.write_all(b"\n").map_err(|e| Error::io(&files.planted, e))?;
    out.flush().map_err(|e| Error::io(&files.planted, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            n_countries: 5,
            n_products: 4,
            n_years: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small(42)).unwrap();
        let b = generate_world(&small(42)).unwrap();
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.countries, b.countries);
        assert_eq!(a.dyads, b.dyads);
        let c = generate_world(&small(43)).unwrap();
        assert_ne!(a.tensor, c.tensor);
    }

    #[test]
    fn full_density_counts_cells() {
        let config = SyntheticWorldConfig {
            n_countries: 4,
            n_products: 3,
            sparsity: 1.0,
            ..small(1)
        };
        let world = generate_world(&config).unwrap();
        for slice in world.tensor.slices() {
            assert_eq!(slice.flows().len(), 36);
        }
    }

    #[test]
    fn coincident_fixture_is_rejected() {
        let config = SyntheticWorldConfig {
            n_countries: 2,
            geometry: Geometry::Fixture(vec![(10.0, 20.0), (10.0, 20.0)]),
            ..small(1)
        };
        assert!(generate_world(&config).is_err());
    }

    #[test]
    fn single_exporter_has_no_exporter_relatedness() {
        let tensor = TradeTensor::from_cells(vec![
            (2000, "AAA", "0001", "BBB", 5.0),
            (2000, "AAA", "0002", "BBB", 3.0),
            (2000, "AAA", "0001", "CCC", 2.0),
        ])
        .unwrap();
        let phi = ProximityMatrix::from_dense(
            vec!["0001".into(), "0002".into()],
            vec![0.0, 0.5, 0.5, 0.0],
        )
        .unwrap();
        let mut dyads = DyadTable::new();
        for (a, b, km) in [("AAA", "BBB", 100.0), ("AAA", "CCC", 200.0), ("BBB", "CCC", 300.0)] {
            dyads
                .insert(a, b, DyadInfo { distance_km: km, border: false, colony: false, language: false, lang_proximity: 0.0 })
                .unwrap();
        }
        let rel = brute_force_relatedness(&tensor, &phi, &dyads, 2000).unwrap();
        assert_eq!(rel.len(), 3);
        assert!(rel.cells().iter().all(|c| c.omega_exporter == 0.0));
    }

    #[test]
    fn single_product_world_has_no_product_relatedness() {
        let tensor = TradeTensor::from_cells(vec![(2000, "AAA", "0001", "BBB", 5.0), (2000, "BBB", "0001", "AAA", 1.0)]).unwrap();
        let phi = ProximityMatrix::from_dense(vec!["0001".into()], vec![0.0]).unwrap();
        let mut dyads = DyadTable::new();
        dyads
            .insert("AAA", "BBB", DyadInfo { distance_km: 10.0, border: true, colony: false, language: false, lang_proximity: 0.0 })
            .unwrap();
        let rel = brute_force_relatedness(&tensor, &phi, &dyads, 2000).unwrap();
        assert!(rel.cells().iter().all(|c| c.omega == 0.0));
        assert_eq!(rel.skipped_products(), ["0001".to_string()]);
    }

    #[test]
    fn dense_ols_intercept_only_mean_and_duplicate_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rows: Vec<GravityObservation> = (0..40)
            .map(|_| {
                let mut regressors = [0.0; N_REGRESSORS];
                for r in regressors.iter_mut() {
                    *r = rng.random::<f64>();
                }
                GravityObservation { year: 2000, origin: 0, product: 0, destination: 1, response: 2.0, regressors }
            })
            .collect();
        let fit = brute_force_ols(&rows).unwrap();
        assert!((fit.coefficients[0].beta - 2.0).abs() < 1e-9);
        for row in &mut rows {
            row.regressors[5] = row.regressors[4];
        }
        assert!(matches!(brute_force_ols(&rows), Err(Error::Singular(_))));
    }
}
