use cpsm::adjust::{adjust_posterior, adjust_with_ratios, ConditionalRatios};
use cpsm::eval::{approximation_error, balanced_accuracy, binary_posterior};
use cpsm::softmax::{fit_hard_traced, fit_soft_weighted, log_likelihood, log_likelihood_gradient, predict_proba};
use cpsm::synth::{generate_pair, SynthConfig};
use cpsm::{FeatureBlock, FitConfig, LabeledDataset, PosteriorMatrix, SoftTargets, SoftmaxParams};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * (rng.random::<f64>() * 2.0 - 1.0))
}

fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, k), |_| rng.random::<f64>() + 0.01);
    for mut row in m.outer_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

fn random_params(rng: &mut ChaCha8Rng, k: usize, d: usize) -> SoftmaxParams {
    let b = Array1::from_shape_fn(k - 1, |_| rng.random::<f64>() * 4.0 - 2.0);
    SoftmaxParams::new(k, b, gaussian_matrix(rng, k - 1, d, 2.0)).unwrap()
}

fn flatten(p: &SoftmaxParams) -> Vec<f64> {
    p.intercepts().iter().chain(p.slopes().iter()).copied().collect()
}

fn unflatten(like: &SoftmaxParams, v: &[f64]) -> SoftmaxParams {
    let nb = like.n_classes() - 1;
    let b = Array1::from(v[..nb].to_vec());
    let w = Array2::from_shape_vec(like.slopes().raw_dim(), v[nb..].to_vec()).unwrap();
    SoftmaxParams::new(like.n_classes(), b, w).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predicted_rows_are_stochastic(seed in any::<u64>(), k in 2usize..5, d in 0usize..5, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, k, d);
        let f = gaussian_matrix(&mut rng, n, d, 50.0);
        let post = predict_proba(&params, f.view()).unwrap();
        for row in post.probs().outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), k in 2usize..5, d in 0usize..5, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_params(&mut rng, k, d);
        let f = gaussian_matrix(&mut rng, n, d, 1.5);
        let t = SoftTargets::new(simplex_rows(&mut rng, n, k)).unwrap();
        let analytic = flatten(&log_likelihood_gradient(&params, f.view(), &t).unwrap());
        let theta = flatten(&params);
        let h = 1e-6;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..theta.len() {
            let mut up = theta.clone();
            up[i] += h;
            let mut down = theta.clone();
            down[i] -= h;
            let fd = (log_likelihood(&unflatten(&params, &up), f.view(), &t).unwrap()
                - log_likelihood(&unflatten(&params, &down), f.view(), &t).unwrap())
                / (2.0 * h);
            num += (fd - analytic[i]).powi(2);
            den += analytic[i].powi(2);
        }
        prop_assert!(num.sqrt() <= 1e-5 * den.sqrt().max(1e-3));
    }

    #[test]
    fn fit_traces_never_decrease(seed in any::<u64>(), k in 2usize..4, d in 0usize..4, n in 5usize..60, l2 in prop_oneof![Just(0.0), Just(1.0)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = gaussian_matrix(&mut rng, n, d, 3.0);
        let t = SoftTargets::new(simplex_rows(&mut rng, n, k)).unwrap();
        let cfg = FitConfig { max_iters: 100, l2_penalty: l2, ..FitConfig::default() };
        let out = fit_soft_weighted(f.view(), &t, None, &cfg, None).unwrap();
        for w in out.objective_trace.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn reference_class_choice_is_irrelevant(seed in any::<u64>(), k in 2usize..5, d in 0usize..4, shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Array1::from_shape_fn(k, |_| rng.random::<f64>() * 2.0 - 1.0);
        let w = gaussian_matrix(&mut rng, k, d, 1.0);
        let f = gaussian_matrix(&mut rng, 10, d, 2.0);
        let a = predict_proba(&SoftmaxParams::from_full_rows(b.view(), w.view()).unwrap(), f.view()).unwrap();
        let offset = Array1::from_shape_fn(d, |_| shift);
        let b2 = b.mapv(|v| v + shift);
        let w2 = &w + &offset;
        let c = predict_proba(&SoftmaxParams::from_full_rows(b2.view(), w2.view()).unwrap(), f.view()).unwrap();
        prop_assert!(approximation_error(&a, &c).unwrap() < 1e-12);
    }

    #[test]
    fn ratio_scale_per_row_cancels(seed in any::<u64>(), k in 2usize..5, n in 1usize..20, scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PosteriorMatrix::new(simplex_rows(&mut rng, n, k)).unwrap();
        let r = Array2::from_shape_fn((n, k), |_| rng.random::<f64>() * 5.0 + 0.01);
        let a = adjust_with_ratios(&p, r.view()).unwrap();
        let b = adjust_with_ratios(&p, (&r * scale).view()).unwrap();
        for (x, y) in a.posterior.probs().iter().zip(b.posterior.probs().iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_matches_bayes_on_discrete_joints(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.random::<f64>() * 0.98 + 0.01;
        // p(x=1|y,z), p(y=1|z), q(y=1|z) for binary x, y, z.
        let px: [[f64; 2]; 2] = [[u(), u()], [u(), u()]];
        let py = [u(), u()];
        let qy = [u(), u()];
        let bern = |p: f64, v: usize| if v == 1 { p } else { 1.0 - p };
        let mut src = Vec::new();
        let mut num = Vec::new();
        let mut den = Vec::new();
        let mut expected = Vec::new();
        for z in 0..2 {
            for x in 0..2 {
                let joint = |prior: &[f64; 2]| -> [f64; 2] {
                    let a = bern(px[0][z], x) * prior[z];
                    let b = bern(px[1][z], x) * (1.0 - prior[z]);
                    [a / (a + b), b / (a + b)]
                };
                src.extend(joint(&py));
                expected.extend(joint(&qy));
                num.extend([qy[z], 1.0 - qy[z]]);
                den.extend([py[z], 1.0 - py[z]]);
            }
        }
        let m = |v: Vec<f64>| PosteriorMatrix::new(Array2::from_shape_vec((4, 2), v).unwrap()).unwrap();
        let ratios = ConditionalRatios::new(m(num), m(den)).unwrap();
        let out = adjust_posterior(&m(src), &ratios).unwrap();
        for (a, b) in out.posterior.probs().iter().zip(expected.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_accuracy_ignores_label_names(seed in any::<u64>(), n in 4usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        truth[..3].copy_from_slice(&[1, 2, 3]);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        let perm = [3usize, 1, 2];
        let relabel = |v: &[usize]| v.iter().map(|&l| perm[l - 1]).collect::<Vec<_>>();
        let a = balanced_accuracy(&truth, &pred, 3).unwrap();
        let b = balanced_accuracy(&relabel(&truth), &relabel(&pred), 3).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn approximation_error_triangle(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || binary_posterior(&(0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>()).unwrap();
        let (a, b, c) = (draw(), draw(), draw());
        let ab = approximation_error(&a, &b).unwrap();
        let bc = approximation_error(&b, &c).unwrap();
        let ac = approximation_error(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_seed_deterministic(seed in 0u64..1000, k in 0.0f64..5.0) {
        let cfg = SynthConfig { n_source: 200, n_target: 200, shift_slope: k, seed, ..SynthConfig::default() };
        let a = generate_pair(&cfg).unwrap();
        let b = generate_pair(&cfg).unwrap();
        prop_assert_eq!(a.source, b.source);
        prop_assert_eq!(a.target, b.target);
    }

    #[test]
    fn hard_fits_are_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 100;
        let x = gaussian_matrix(&mut rng, n, 3, 2.0);
        let y: Vec<usize> = (0..n).map(|i| if x[[i, 0]] + rng.random::<f64>() > 0.5 { 1 } else { 2 }).collect();
        let data = LabeledDataset::new(Array2::zeros((n, 0)), x, y, 2).unwrap();
        let a = fit_hard_traced(&data, FeatureBlock::Joint, &FitConfig::default()).unwrap();
        let b = fit_hard_traced(&data, FeatureBlock::Joint, &FitConfig::default()).unwrap();
        prop_assert_eq!(a.params, b.params);
        prop_assert_eq!(a.objective_trace, b.objective_trace);
    }
}
