use lossatlas_core::autodiff::{Objective, Quadratic};
use lossatlas_core::global::{cka, mode_connectivity, train_connector, ConnectorConfig, CurveSpec, FeatureMatrix};
use lossatlas_core::model::ParamVector;
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, d), |_| StandardNormal.sample(rng))
}

fn fm(a: Array2<f64>) -> FeatureMatrix {
    FeatureMatrix::new(a, 0, "").unwrap()
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let g = gaussian(rng, d, d);
    let q = DMatrix::from_fn(d, d, |i, j| g[[i, j]]).qr().q();
    Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)])
}

#[test]
fn independent_features_stay_below_monte_carlo_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut values = Vec::new();
    for _ in 0..100 {
        let f = fm(gaussian(&mut rng, 512, 8));
        let g = fm(gaussian(&mut rng, 512, 8));
        values.push(cka(&f, &g).unwrap());
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    println!("independent CKA over 100 draws: mean {mean:.4}, max {max:.4}");
    assert!(max < 0.15);
}

#[test]
fn orthogonal_and_scaling_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let f = gaussian(&mut rng, 100, 6);
        let g = gaussian(&mut rng, 100, 4) + f.slice(ndarray::s![.., 0..4]);
        let q = random_orthogonal(&mut rng, 6);
        let base = cka(&fm(f.clone()), &fm(g.clone())).unwrap();
        assert!((cka(&fm(f.dot(&q)), &fm(g.clone())).unwrap() - base).abs() <= 1e-8);
        assert!((cka(&fm(f.clone()), &fm(f.dot(&q))).unwrap() - 1.0).abs() <= 1e-8);
        assert!((cka(&fm(&f * 3.7), &fm(g.clone())).unwrap() - base).abs() <= 1e-8);
        assert!((cka(&fm(f.clone()), &fm(&f * 0.01)).unwrap() - 1.0).abs() <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn cka_in_unit_interval_and_symmetric(seed in any::<u64>(), m in 2usize..40, d1 in 1usize..6, d2 in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = fm(gaussian(&mut rng, m, d1));
        let g = fm(gaussian(&mut rng, m, d2));
        let a = cka(&f, &g).unwrap();
        let b = cka(&g, &f).unwrap();
        prop_assert!((-1e-8..=1.0 + 1e-8).contains(&a));
        prop_assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn trained_connector_no_worse_than_straight_line_on_convex_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..5 {
        let g = gaussian(&mut rng, 10, 10);
        let q = Quadratic::new(g.t().dot(&g) + Array2::<f64>::eye(10)).unwrap();
        let a = ParamVector::flat(gaussian(&mut rng, 1, 10).into_raw_vec_and_offset().0);
        let b = ParamVector::flat(gaussian(&mut rng, 1, 10).into_raw_vec_and_offset().0);
        let line = CurveSpec::midpoint(&a, &b).unwrap();
        let trained = train_connector(&q, &a, &b, &ConnectorConfig { steps: 300, learning_rate: 0.01, seed: trial }).unwrap();
        let ml = mode_connectivity(&line, &q, 25).unwrap();
        let mt = mode_connectivity(&trained, &q, 25).unwrap();
        let max = |r: &lossatlas_core::global::McResult| r.curve_losses.iter().map(|x| x.1).fold(f64::MIN, f64::max);
        assert!(max(&mt) <= max(&ml) + 1e-6);
        assert!(ml.mc <= mt.mc + 1e-6, "{} vs {}", ml.mc, mt.mc);
        assert!(q.loss(&trained.point(0.5)).unwrap() <= q.loss(&line.point(0.5)).unwrap());
    }
}
