use super::ops::sigmoid;
use super::{Float, Tensor};
use crate::error::{Error, Result};

fn target_len<T: Float>(op: &'static str, x: &Tensor<T>, len: usize) -> Result<()> {
    if x.numel() != len {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![len],
        });
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    /// Mean softmax cross-entropy of N×K logits against class indices.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (n, k) = match *self.shape() {
            [n, k] if n == labels.len() => (n, k),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    lhs: self.shape().to_vec(),
                    rhs: vec![labels.len()],
                })
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let x = self.data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, row) in x.chunks(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            total += denom.ln() + max - row[labels[i]];
        }
        drop(x);
        let inv_n = T::one() / T::lit(n as f64);
        let labels = labels.to_vec();
        Tensor::from_op(
            vec![total * inv_n],
            &[1],
            vec![self.clone()],
            Box::new(move |g| {
                let s = g[0] * inv_n;
                let mut dx: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= s;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean binary cross-entropy of probabilities against targets in [0, 1].
    /// Probabilities are clamped away from 0 and 1 before taking logs.
    pub fn binary_cross_entropy(&self, targets: &[T]) -> Result<Tensor<T>> {
        target_len("binary_cross_entropy", self, targets.len())?;
        let eps = T::lit(1e-12);
        let p: Vec<T> = self.data().iter().map(|&p| p.max(eps).min(T::one() - eps)).collect();
        let n = T::lit(p.len() as f64);
        let loss: T = p
            .iter()
            .zip(targets)
            .map(|(&p, &y)| -(y * p.ln() + (T::one() - y) * (T::one() - p).ln()))
            .sum();
        let y = targets.to_vec();
        Tensor::from_op(
            vec![loss / n],
            &[1],
            vec![self.clone()],
            Box::new(move |g| {
                let s = g[0] / n;
                vec![Some(p.iter().zip(&y).map(|(&p, &y)| s * (p - y) / (p * (T::one() - p))).collect())]
            }),
        )
    }

    /// Mean binary cross-entropy applied to logits, numerically stable for
    /// large magnitudes.
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Tensor<T>> {
        target_len("bce_with_logits", self, targets.len())?;
        let x = self.to_vec();
        let n = T::lit(x.len() as f64);
        // max(x,0) − x·y + ln(1 + e^{−|x|})
        let loss: T = x
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let y = targets.to_vec();
        Tensor::from_op(
            vec![loss / n],
            &[1],
            vec![self.clone()],
            Box::new(move |g| {
                let s = g[0] / n;
                vec![Some(x.iter().zip(&y).map(|(&x, &y)| s * (sigmoid(x) - y)).collect())]
            }),
        )
    }

    /// Summed smooth-L1 distance: `0.5·d²` when `|d| < 1`, else `|d| − 0.5`.
    pub fn smooth_l1(&self, targets: &[T]) -> Result<Tensor<T>> {
        target_len("smooth_l1", self, targets.len())?;
        let half = T::lit(0.5);
        let d: Vec<T> = self.data().iter().zip(targets).map(|(&p, &t)| p - t).collect();
        let loss: T = d
            .iter()
            .map(|&d| if d.abs() < T::one() { half * d * d } else { d.abs() - half })
            .sum();
        Tensor::from_op(
            vec![loss],
            &[1],
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    d.iter()
                        .map(|&d| {
                            let slope = if d.abs() < T::one() { d } else { d.signum() };
                            g[0] * slope
                        })
                        .collect(),
                )]
            }),
        )
    }
}
