//! Reverse-mode autodiff on a tiny conv net, then a finite-difference check
//! of the same graph in 64-bit.

use fpn::tensor::{conv2d, grad_check, init_normal, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fpn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // random values: patterned inputs put ties under the max and zeros under the relu
    let x = Tensor::<f64>::leaf(init_normal(&[1, 2, 6, 6], 1.0, &mut rng), &[1, 2, 6, 6])?;
    let w = Tensor::<f64>::leaf(init_normal(&[3, 2, 3, 3], 0.5, &mut rng), &[3, 2, 3, 3])?;

    let f = |x: &Tensor<f64>| -> fpn::Result<Tensor<f64>> {
        let y = conv2d(x, &w, None, 1, 1)?.relu();
        Ok(y.max_subsample2x()?.square().sum())
    };
    let y = f(&x)?;
    y.backward()?;
    println!("f(x) = {:.6}", y.item()?);
    let g = x.grad().expect("x requires grad");
    println!(
        "df/dx[0..6] = {:?}",
        g[..6].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
    );

    let err = grad_check(f, &x, 1e-5)?;
    println!("max relative error against central differences: {err:.2e}");
    Ok(())
}
