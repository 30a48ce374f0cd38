//! Central-difference gradient verification.

use super::Tensor;
use crate::error::{Error, Result};

/// Largest relative disagreement between the autodiff gradient of `f` at `x`
/// and central differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`, measured per
/// coordinate as `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `x` must be a leaf that requires a gradient; its values are restored
/// after every probe.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_at(f, x, eps, None)
}

/// [`grad_check`] restricted to the listed coordinates (all when `None`).
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_ladder(f, x, &[eps], coords)
}

/// Like [`grad_check_at`], but each coordinate is scored by its best
/// agreement over several step sizes. Deep compositions need this: a large
/// step can straddle a ReLU or max kink, while a small one drowns
/// coordinates with tiny gradients in rounding noise.
pub fn grad_check_ladder<F>(f: F, x: &Tensor<f64>, steps: &[f64], coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if steps.is_empty() {
        return Err(Error::InvalidArgument("no step sizes".into()));
    }
    if let Some(eps) = steps.iter().find(|&&e| !(e > 0.0 && e <= 1e-2)) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside (0, 1e-2]")));
    }
    if !x.is_leaf() || !x.requires_grad() {
        return Err(Error::InvalidArgument("grad_check needs a leaf tensor requiring grad".into()));
    }
    x.set_grad(None);
    let y = f(x)?;
    if y.numel() != 1 {
        return Err(Error::InvalidShape {
            op: "grad_check",
            shape: y.shape().to_vec(),
            reason: "function must return a scalar".into(),
        });
    }
    y.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    x.set_grad(None);

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => {
            if let Some(&bad) = c.iter().find(|&&i| i >= x.numel()) {
                return Err(Error::InvalidArgument(format!("coordinate {bad} out of range")));
            }
            c
        }
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let a = analytic[i];
        let orig = x.data()[i];
        let mut best = f64::INFINITY;
        for &eps in steps {
            x.data_mut()[i] = orig + eps;
            let plus = f(x).and_then(|t| t.item());
            x.data_mut()[i] = orig - eps;
            let minus = f(x).and_then(|t| t.item());
            x.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            best = best.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}
