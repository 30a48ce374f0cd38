use fpn::tensor::{conv2d, grad_check, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;
use support::naive_conv;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn conv2d_matches_nested_loops_on_random_shapes() {
    assert_eq!(support::conv2d_sweep(1, 150), Ok(150));
}

#[test]
fn conv2d_f32_agrees_with_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 2 * 3 * 8 * 8);
    let wt = random(&mut rng, 4 * 3 * 9);
    let (want, _, _) = naive_conv(&x, (2, 3, 8, 8), &wt, (4, 3), &[0.0; 4], 1, 1);
    let xt = Tensor::<f32>::from_f64(&x, &[2, 3, 8, 8]).unwrap();
    let wtt = Tensor::<f32>::from_f64(&wt, &[4, 3, 3, 3]).unwrap();
    let got = conv2d(&xt, &wtt, None, 1, 1).unwrap();
    assert_eq!(got.shape(), &[2, 4, 8, 8]);
    for (g, e) in got.to_f64_vec().iter().zip(&want) {
        assert!((g - e).abs() < 1e-5, "{g} vs {e}");
    }
}

#[test]
fn squared_conv_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::leaf(random(&mut rng, 2 * 3 * 6 * 6), &[2, 3, 6, 6]).unwrap();
    let w = Tensor::<f64>::from_vec(random(&mut rng, 4 * 3 * 9), &[4, 3, 3, 3]).unwrap();
    let err = grad_check(|x| Ok(conv2d(x, &w, None, 1, 1)?.square().sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn add_pair_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::<f64>::leaf(random(&mut rng, 128), &[2, 4, 4, 4]).unwrap();
    let b = Tensor::<f64>::leaf(random(&mut rng, 128), &[2, 4, 4, 4]).unwrap();
    let err_a = grad_check(|a| Ok(a.add(&b)?.square().sum()), &a, 1e-5).unwrap();
    let err_b = grad_check(|b| Ok(a.add(b)?.square().sum()), &b, 1e-5).unwrap();
    assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
}

#[test]
fn upsample_sum_gradient_is_four() {
    let x = Tensor::<f64>::leaf(vec![0.3, -1.0, 2.0, 0.5, 0.0, 7.0], &[1, 1, 2, 3]).unwrap();
    x.nearest_upsample2x().unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0; 6]);
    let err = grad_check(|x| Ok(x.nearest_upsample2x()?.sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn pure_ops_are_bit_identical_across_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::<f32>::from_f64(&random(&mut rng, 64), &[4, 16]).unwrap();
    let b = Tensor::<f32>::from_f64(&random(&mut rng, 64), &[4, 16]).unwrap();
    let bits = |t: Tensor<f32>| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.add(&b).unwrap()), bits(a.add(&b).unwrap()));
    assert_eq!(bits(a.relu()), bits(a.relu()));
    assert_eq!(bits(a.sigmoid()), bits(a.sigmoid()));
}

#[test]
fn sgd_momentum_two_steps() {
    use fpn::tensor::{ParamStore, Sgd};
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", vec![0.0], &[1]).unwrap();
    let mut opt = Sgd::new(0.9, 0.0);
    let mut seen = Vec::new();
    for _ in 0..2 {
        p.set_grad(Some(vec![1.0]));
        opt.step(&store, 1.0).unwrap();
        seen.push(p.to_vec()[0]);
    }
    assert!((seen[0] + 1.0).abs() < 1e-12 && (seen[1] + 2.9).abs() < 1e-12, "{seen:?}");
}

proptest! {
    #[test]
    fn upsample_then_subsample_is_identity(h in 1usize..6, w in 1usize..6, c in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_vec(random(&mut rng, c * h * w), &[1, c, h, w]).unwrap();
        let back = x.nearest_upsample2x().unwrap().max_subsample2x().unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn subsample_takes_block_maxima(h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random(&mut rng, 4 * h * w);
        let x = Tensor::<f64>::from_vec(data.clone(), &[1, 1, 2 * h, 2 * w]).unwrap();
        let y = x.max_subsample2x().unwrap().to_vec();
        for i in 0..h {
            for j in 0..w {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(a, b)| data[(2 * i + a) * 2 * w + 2 * j + b])
                    .fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(y[i * w + j], m);
            }
        }
    }
}
