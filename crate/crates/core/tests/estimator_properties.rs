use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use symscatter::linalg::{Cholesky, SpdMatrix};
use symscatter::pairs::{sample_permutation, Dataset, PairScheme};
use symscatter::scatter::{
    check_existence, symmetrized_scatter, ExistenceVerdict, ScatterFunctional, SolverOptions,
    WeightedSample, DEFAULT_EXISTENCE_CAP,
};

fn dataset(n: usize, q: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * q).map(|_| rng.sample(StandardNormal)).collect();
    Dataset::from_flat(n, q, values).unwrap()
}

fn whitened_gap(a: &SpdMatrix, b: &SpdMatrix) -> f64 {
    let w = Cholesky::factor(b.as_sym()).unwrap().whiten(a.as_sym());
    (w.as_matrix() - DMatrix::<f64>::identity(a.dim(), a.dim())).norm()
}

fn functionals() -> [ScatterFunctional; 3] {
    [
        ScatterFunctional::Tyler,
        ScatterFunctional::MType { nu: 1.0 },
        ScatterFunctional::MType { nu: 5.0 },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equivariance(seed in any::<u64>(), entries in prop::collection::vec(-0.4f64..0.4, 9)) {
        let b = DMatrix::from_row_slice(3, 3, &entries) + DMatrix::identity(3, 3);
        let data = dataset(25, 3, seed);
        let opts = SolverOptions::default();
        for f in functionals() {
            for scheme in [PairScheme::Complete, PairScheme::Balanced { d: 4 }] {
                let base = symmetrized_scatter(&data, &scheme, &f, &opts).unwrap().estimate;
                let moved = symmetrized_scatter(&data.transformed(&b), &scheme, &f, &opts).unwrap().estimate;
                let mut target = base.congruence(&b).unwrap();
                if f == ScatterFunctional::Tyler {
                    target = symscatter::shape_normalize(&target);
                }
                prop_assert!(whitened_gap(&moved, &target) <= 1e-8);
            }
        }
    }

    #[test]
    fn relabeling_does_not_change_complete_estimate(seed in any::<u64>()) {
        let data = dataset(15, 2, seed);
        let perm = sample_permutation(15, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let opts = SolverOptions::default();
        for f in functionals() {
            let a = symmetrized_scatter(&data, &PairScheme::Complete, &f, &opts).unwrap().estimate;
            let b = symmetrized_scatter(&data.permuted(&perm), &PairScheme::Complete, &f, &opts).unwrap().estimate;
            prop_assert!(whitened_gap(&a, &b) <= 1e-8);
        }
    }

    #[test]
    fn negated_sample_is_bit_identical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<f64> = (0..40 * 3).map(|_| rng.sample(StandardNormal)).collect();
        let sample = WeightedSample::uniform(3, points).unwrap();
        let opts = SolverOptions::default();
        for f in functionals() {
            let a = f.solve(&sample, &opts).unwrap();
            let b = f.solve(&sample.negated(), &opts).unwrap();
            prop_assert_eq!(a.estimate, b.estimate);
        }
    }

    #[test]
    fn sign_flip_of_data_leaves_estimate(seed in any::<u64>()) {
        let data = dataset(12, 3, seed);
        let flipped = data.transformed(&(-DMatrix::<f64>::identity(3, 3)));
        let opts = SolverOptions::default();
        for f in functionals() {
            let a = symmetrized_scatter(&data, &PairScheme::Complete, &f, &opts).unwrap().estimate;
            let b = symmetrized_scatter(&flipped, &PairScheme::Complete, &f, &opts).unwrap().estimate;
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn objective_path_never_increases(seed in any::<u64>()) {
        let data = dataset(20, 4, seed);
        let opts = SolverOptions::default();
        for f in functionals() {
            let report = symmetrized_scatter(&data, &PairScheme::Balanced { d: 3 }, &f, &opts).unwrap();
            prop_assert!(report.converged);
            for w in report.objective_path.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
            }
        }
    }
}

#[test]
fn generic_samples_pass_existence() {
    let data = dataset(30, 3, 9);
    let diffs = symscatter::pair_differences(&data, &PairScheme::Balanced { d: 1 }).unwrap();
    let sample = WeightedSample::uniform(3, diffs).unwrap();
    for f in functionals() {
        assert_eq!(check_existence(&sample, &f, DEFAULT_EXISTENCE_CAP), ExistenceVerdict::HeuristicPass);
    }
    let small = WeightedSample::uniform(3, dataset(8, 3, 10).as_flat().to_vec()).unwrap();
    for f in functionals() {
        assert_eq!(check_existence(&small, &f, DEFAULT_EXISTENCE_CAP), ExistenceVerdict::Pass);
    }
}

#[test]
fn concentrated_samples_fail_existence() {
    // half of the mass on the first coordinate axis
    let mut points = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..10 {
        if k % 2 == 0 {
            points.extend([rng.sample::<f64, _>(StandardNormal), 0.0, 0.0]);
        } else {
            points.extend((0..3).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
    }
    let sample = WeightedSample::uniform(3, points).unwrap();
    match check_existence(&sample, &ScatterFunctional::Tyler, DEFAULT_EXISTENCE_CAP) {
        ExistenceVerdict::Fail(w) => {
            assert_eq!(w.dim, 1);
            assert!((w.mass - 0.5).abs() < 1e-12);
        }
        other => panic!("expected a failure, got {other:?}"),
    }
    // the M-type bound for lines is (ν + 1)/(ν + 3) = 0.5 at ν = 1
    assert!(check_existence(&sample, &ScatterFunctional::MType { nu: 1.0 }, DEFAULT_EXISTENCE_CAP).is_fail());
    assert!(!check_existence(&sample, &ScatterFunctional::MType { nu: 3.0 }, DEFAULT_EXISTENCE_CAP).is_fail());
}
