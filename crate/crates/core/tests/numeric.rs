use proptest::prelude::*;
use xdiff_core::numeric::{Activation, AdamConfig, AdamState, FeedForwardNet, SeededRng};

fn objective(net: &FeedForwardNet, x: &[f64], u: &[f64]) -> f64 {
    net.forward(x).unwrap().iter().zip(u).map(|(a, b)| a * b).sum()
}

/// Largest relative error between analytic and central-difference gradients.
fn worst_error(net: &mut FeedForwardNet, x: &[f64], u: &[f64]) -> f64 {
    let grads = net.backward(x, u).unwrap();
    let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    let n_slices = net.param_slices().len();
    for s in 0..n_slices {
        let len = net.param_slices()[s].len();
        for j in 0..len {
            let orig = net.param_slices()[s][j];
            net.param_slices_mut()[s][j] = orig + h;
            let up = objective(net, x, u);
            net.param_slices_mut()[s][j] = orig - h;
            let down = objective(net, x, u);
            net.param_slices_mut()[s][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
            idx += 1;
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_match_finite_differences(seed in 0u64..10_000,
                                          depth in 0usize..3,
                                          width in 1usize..6,
                                          act in 0usize..4) {
        let mut rng = SeededRng::new(seed);
        let input = 1 + rng.index(5);
        let output = 1 + rng.index(4);
        let hidden = vec![width; depth];
        let mut net = FeedForwardNet::mlp(input, &hidden, output, Activation::ALL[act], &mut rng);
        let x = rng.normal_vec(input);
        let u = rng.normal_vec(output);
        let e = worst_error(&mut net, &x, &u);
        prop_assert!(e < 1e-4, "relative error {e}");
    }

    #[test]
    fn batched_gradients_sum_single_sample_gradients(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        let net = FeedForwardNet::mlp(3, &[4], 2, Activation::Tanh, &mut rng);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(3)).collect();
        let us: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(2)).collect();
        let flat: Vec<f64> = xs.concat();
        let x = ndarray::Array2::from_shape_vec((3, 3), flat).unwrap();
        let u = ndarray::Array2::from_shape_vec((3, 2), us.concat()).unwrap();
        let (_, cache) = net.forward_train(x.view()).unwrap();
        let batched = net.backward_batch(&cache, u.view()).unwrap();
        let mut summed = vec![0.0; net.param_count()];
        for (xi, ui) in xs.iter().zip(&us) {
            let g = net.backward(xi, ui).unwrap();
            for (acc, v) in summed.iter_mut().zip(g.slices().iter().flat_map(|s| s.iter())) {
                *acc += v;
            }
        }
        let b: Vec<f64> = batched.slices().iter().flat_map(|s| s.iter().copied()).collect();
        for (p, q) in b.iter().zip(&summed) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut x = vec![3.0, -2.0];
    let mut adam = AdamState::new(&[2], AdamConfig::default());
    for _ in 0..2000 {
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        adam.step(vec![&mut x[..]], vec![&g[..]], 0.01).unwrap();
    }
    assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
}
