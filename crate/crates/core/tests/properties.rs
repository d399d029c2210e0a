use approx::assert_relative_eq;
use madenc::analysis::gaussian_energy;
use madenc::clustering::{GmmModel, KMeansModel};
use madenc::dataio::{default_region_names, make_folds, DatasetManifest, RegionSample};
use madenc::encoding::{encode_bow, encode_fv, encode_vlad};
use madenc::mesh::{compute_mads, concatenate, MadSet, NeighborhoodSpec};
use madenc::store::{parse_matrix_csv, matrix_csv};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn gmm(k: usize, d: usize) -> impl Strategy<Value = GmmModel> {
    (
        prop::collection::vec(0.1f64..1.0, k),
        matrix(k, d),
        prop::collection::vec(0.2f64..3.0, k * d),
    )
        .prop_map(move |(w, means, var)| {
            let s: f64 = w.iter().sum();
            GmmModel {
                weights: DVector::from_iterator(k, w.iter().map(|x| x / s)),
                means,
                variances: DMatrix::from_row_slice(k, d, &var),
                seed: 0,
                variance_floor: 0.0,
                ll_trace: vec![],
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fisher_vectors_have_unit_norm((g, a) in (1usize..4, 1usize..5, 1usize..9)
        .prop_flat_map(|(k, d, n)| (gmm(k, d), matrix(n, d)))) {
        let fv = encode_fv(&g, &a).unwrap();
        prop_assert_eq!(fv.values.len(), 2 * g.k() * g.dim());
        let norm = fv.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bow_counts_every_descriptor_once((c, a) in (1usize..5, 1usize..4, 1usize..12)
        .prop_flat_map(|(k, d, n)| (matrix(k, d), matrix(n, d)))) {
        let km = KMeansModel { centroids: c, seed: 0, inertia_trace: vec![] };
        let h = encode_bow(&km, &a).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), a.nrows());
        let v = encode_vlad(&km, &a, false).unwrap();
        let d = km.dim();
        for (k, &count) in h.counts.iter().enumerate() {
            if count == 0 {
                prop_assert!(v.values[k * d..(k + 1) * d].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn energy_decomposes_the_frobenius_norm(x in (1usize..4, 1usize..4, 1usize..6)
        .prop_flat_map(|(k, d, n)| matrix(n, 2 * k * d).prop_map(move |m| (m, k, d))),
        shift in 0usize..6) {
        let (m, k, d) = x;
        let r = gaussian_energy(&m, k, d).unwrap();
        let total: f64 = m.iter().map(|v| v * v).sum();
        let blocks: f64 = r.energies.iter().map(|e| e * e).sum();
        assert_relative_eq!(blocks, total, max_relative = 1e-12, epsilon = 1e-300);
        for w in r.order.windows(2) {
            prop_assert!(r.energies[w[0]] >= r.energies[w[1]]);
        }
        let n = m.nrows();
        let rotated = DMatrix::from_fn(n, m.ncols(), |i, j| m[((i + shift) % n, j)]);
        prop_assert_eq!(gaussian_energy(&rotated, k, d).unwrap().order, r.order);
    }

    #[test]
    fn matrix_csv_round_trips_bits(m in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c))) {
        let text = matrix_csv(&m);
        let back = parse_matrix_csv(std::path::Path::new("mem"), &text).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn descriptor_support_is_the_neighbourhood(seed in 0u64..1000, r in 3usize..9, p_frac in 0.0f64..1.0) {
        use rand::Rng;
        let p = 1 + ((r - 2) as f64 * p_frac) as usize;
        let mut rng = madenc::seed::rng(seed);
        let series = DMatrix::from_fn(r, 30, |_, _| rng.random_range(-1.0..1.0));
        let s = RegionSample::new("s", 1, series, default_region_names(r)).unwrap();
        let set = compute_mads(&s, &NeighborhoodSpec::new(p)).unwrap();
        for i in 0..r {
            prop_assert_eq!(set.weights[(i, i)], 0.0);
            prop_assert!(set.weights.row(i).iter().filter(|v| **v != 0.0).count() <= p);
        }
        let flat = concatenate(&set);
        let back = MadSet::from_concatenated("s", 1, &flat, r).unwrap();
        prop_assert_eq!(back.weights, set.weights);
    }

    #[test]
    fn folds_are_balanced_and_disjoint(n_subjects in 2usize..30, n_folds in 2usize..10, seed in 0u64..100) {
        prop_assume!(n_folds <= n_subjects);
        let names = default_region_names(2);
        let samples = (0..n_subjects)
            .map(|s| RegionSample::new(format!("s{s}"), 1, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), names.clone()).unwrap())
            .collect();
        let m = DatasetManifest::new(samples, names).unwrap();
        let plan = make_folds(&m, n_folds, seed).unwrap();
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = vec![0; n_subjects];
        for k in 0..n_folds {
            for i in plan.split(&m, k).unwrap().1 {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}
