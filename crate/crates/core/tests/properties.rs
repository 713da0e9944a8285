use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tradespace::complexity::{binarize, compute_proximity, compute_rca, AdvantageMatrix};
use tradespace::gravity::{
    coefficient_names, fit_ols, trend_test, GravityObservation, OlsAccumulator, N_REGRESSORS,
};
use tradespace::ingest::{Flow, TradeTensor};
use tradespace::numeric::YearRange;
use tradespace::oracle::{country_code, generate_world, product_code, SyntheticWorldConfig};
use tradespace::relatedness::{compute_relatedness, DistanceWeights, EvaluationSet, RelatednessTensor};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn world(seed: u64, nc: usize, np: usize) -> tradespace::oracle::SyntheticWorld {
    generate_world(&SyntheticWorldConfig {
        n_countries: nc,
        n_products: np,
        n_years: 3,
        sparsity: 0.6,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn full_window(t: &TradeTensor) -> YearRange {
    let years: Vec<i32> = t.years().collect();
    YearRange::new(years[0], *years.last().unwrap()).unwrap()
}

fn relatedness_with_own_phi(t: &TradeTensor, dyads: &tradespace::ingest::DyadTable) -> RelatednessTensor {
    let phi = compute_proximity(&binarize(&compute_rca(t, full_window(t)).unwrap(), 1.0).unwrap());
    let weights = DistanceWeights::from_dyads(t.countries(), dyads).unwrap();
    let years: Vec<i32> = t.years().collect();
    compute_relatedness(t, &phi, &weights, &years, EvaluationSet::Active).unwrap()
}

fn remap(t: &TradeTensor, country: &[u32], product: &[u32], scale: f64) -> TradeTensor {
    let mut countries = vec![String::new(); country.len()];
    for (old, &new) in country.iter().enumerate() {
        countries[new as usize] = t.countries()[old].clone();
    }
    let mut products = vec![String::new(); product.len()];
    for (old, &new) in product.iter().enumerate() {
        products[new as usize] = t.products()[old].clone();
    }
    let by_year: BTreeMap<i32, Vec<Flow>> = t
        .slices()
        .iter()
        .map(|s| {
            let flows = s
                .flows()
                .iter()
                .map(|f| Flow {
                    origin: country[f.origin as usize],
                    product: product[f.product as usize],
                    destination: country[f.destination as usize],
                    value: f.value * scale,
                })
                .collect();
            (s.year(), flows)
        })
        .collect();
    TradeTensor::from_indexed(countries, products, by_year)
}

fn labelled(t: &TradeTensor, r: &RelatednessTensor) -> BTreeMap<(i32, String, String, String), [f64; 3]> {
    r.cells()
        .iter()
        .map(|c| {
            (
                (
                    c.year,
                    t.countries()[c.origin as usize].clone(),
                    t.products()[c.product as usize].clone(),
                    t.countries()[c.destination as usize].clone(),
                ),
                [c.omega, c.omega_importer, c.omega_exporter],
            )
        })
        .collect()
}

fn rows(seed: u64, n: usize) -> Vec<GravityObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut regressors = [0.0; N_REGRESSORS];
            for r in regressors.iter_mut() {
                *r = rng.random_range(-3.0..3.0) * 10f64.powi(rng.random_range(-2..3));
            }
            GravityObservation {
                year: 2000,
                origin: 0,
                product: 0,
                destination: 1,
                response: rng.random_range(0.0..20.0),
                regressors,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn proximity_matches_min_conditional_counts(
        cells in prop::collection::vec(any::<bool>(), 6 * 9),
    ) {
        let (nc, np) = (6, 9);
        let m = AdvantageMatrix::from_cells(
            (0..nc).map(country_code).collect(),
            (0..np).map(product_code).collect(),
            cells.clone(),
            1.0,
        ).unwrap();
        let phi = compute_proximity(&m);
        let has = |c: usize, p: usize| cells[c * np + p];
        for i in 0..np {
            for j in 0..np {
                let ui = (0..nc).filter(|&c| has(c, i)).count() as f64;
                let uj = (0..nc).filter(|&c| has(c, j)).count() as f64;
                let both = (0..nc).filter(|&c| has(c, i) && has(c, j)).count() as f64;
                let expected = if i == j || ui == 0.0 || uj == 0.0 { 0.0 } else { (both / ui).min(both / uj) };
                prop_assert_eq!(phi.get(i, j), expected);
            }
        }
    }

    #[test]
    fn relatedness_is_equivariant_under_relabelling(seed in 0u64..10_000, shuffle in any::<u64>()) {
        let w = world(seed, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        let mut country: Vec<u32> = (0..6).collect();
        let mut product: Vec<u32> = (0..7).collect();
        country.shuffle(&mut rng);
        product.shuffle(&mut rng);
        let permuted = remap(&w.tensor, &country, &product, 1.0);
        let a = labelled(&w.tensor, &relatedness_with_own_phi(&w.tensor, &w.dyads));
        let b = labelled(&permuted, &relatedness_with_own_phi(&permuted, &w.dyads));
        prop_assert_eq!(a.len(), b.len());
        for (key, va) in &a {
            let vb = &b[key];
            for k in 0..3 {
                prop_assert!(close(va[k], vb[k], 1e-12), "{:?}: {:?} vs {:?}", key, va, vb);
            }
        }
    }

    #[test]
    fn relatedness_ignores_the_currency_unit(seed in 0u64..10_000, log_scale in -6.0f64..6.0) {
        let w = world(seed, 5, 6);
        let identity_c: Vec<u32> = (0..5).collect();
        let identity_p: Vec<u32> = (0..6).collect();
        let scaled = remap(&w.tensor, &identity_c, &identity_p, 10f64.powf(log_scale));
        let weights = DistanceWeights::from_dyads(w.tensor.countries(), &w.dyads).unwrap();
        let years: Vec<i32> = w.tensor.years().collect();
        let a = compute_relatedness(&w.tensor, &w.phi, &weights, &years, EvaluationSet::Active).unwrap();
        let b = compute_relatedness(&scaled, &w.phi, &weights, &years, EvaluationSet::Active).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.cells().iter().zip(b.cells()) {
            prop_assert!(close(x.omega, y.omega, 1e-12));
            prop_assert!(close(x.omega_importer, y.omega_importer, 1e-12));
            prop_assert!(close(x.omega_exporter, y.omega_exporter, 1e-12));
        }
    }

    #[test]
    fn trend_slope_ignores_a_common_shift(
        coefs in prop::array::uniform5(-1.0f64..1.0),
        ses in prop::array::uniform5(0.001f64..0.1),
        shift in -10.0f64..10.0,
    ) {
        let base: Vec<(f64, f64)> = coefs.iter().zip(ses).map(|(&c, s)| (c, s)).collect();
        let moved: Vec<(f64, f64)> = base.iter().map(|&(c, s)| (c + shift, s)).collect();
        let a = trend_test(&base).unwrap();
        let b = trend_test(&moved).unwrap();
        prop_assert_eq!(a.slope.signum(), b.slope.signum());
        prop_assert!((a.slope - b.slope).abs() <= 1e-9);
        prop_assert!((a.p - b.p).abs() <= 1e-6);
    }

    #[test]
    fn streaming_fit_is_partition_invariant(seed in any::<u64>(), parts in 1usize..8) {
        let data = rows(seed, 300);
        let one_shot = fit_ols(&data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut accs: Vec<OlsAccumulator> = (0..parts).map(|_| OlsAccumulator::new(N_REGRESSORS)).collect();
        for i in order {
            let r = &data[i];
            accs[rng.random_range(0..parts)].add(&r.regressors, r.response);
        }
        let mut merged = accs.pop().unwrap();
        for a in accs.iter().rev() {
            merged.merge(a);
        }
        let streamed = merged.finish(&coefficient_names()).unwrap();
        prop_assert_eq!(streamed, one_shot);
    }
}
