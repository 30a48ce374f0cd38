use super::{Float, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn nchw<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected N×C×H×W".into(),
        }),
    }
}

impl<T: Float> Tensor<T> {
    fn map_unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + Send + Sync + 'static) -> Tensor<T> {
        let x = self.to_vec();
        let y: Vec<T> = x.iter().map(|&v| f(v)).collect();
        if !self.requires_grad() || !super::grad_enabled() {
            return Tensor::from_vec(y, self.shape()).expect("unary op preserves a valid shape");
        }
        let y_saved = y.clone();
        Tensor::from_op(
            y,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g| {
                // df(input, output)
                vec![Some(
                    g.iter().zip(x.iter().zip(&y_saved)).map(|(&g, (&x, &y))| g * df(x, y)).collect(),
                )]
            }),
        )
        .expect("unary op preserves a valid shape")
    }

    /// Element-wise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        )
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let a = self.to_vec();
        let b = other.to_vec();
        let data = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        Tensor::from_op(
            data,
            self.shape(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(&b).map(|(&g, &y)| g * y).collect()),
                    Some(g.iter().zip(&a).map(|(&g, &x)| g * x).collect()),
                ]
            }),
        )
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map_unary(move |x| x * s, move |_, _| s)
    }

    pub fn square(&self) -> Tensor<T> {
        self.map_unary(|x| x * x, |x, _| x + x)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map_unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map_unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], &[1], vec![self.clone()], Box::new(move |g| vec![Some(vec![g[0]; n])])).expect("scalar shape")
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Nearest-neighbour ×2 upsampling: `out[n,c,y,x] = in[n,c,y/2,x/2]`.
    pub fn nearest_upsample2x(&self) -> Result<Tensor<T>> {
        let [n, c, h, w] = nchw("nearest_upsample2x", self)?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        drop(x);
        Tensor::from_op(
            out,
            &[n, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dp[(y / 2) * w + xx / 2] += gp[y * ow + xx];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// 2×2 max pooling with stride 2; output extents are `floor(H/2)×floor(W/2)`.
    /// Ties resolve to the first element in row-major order.
    pub fn max_subsample2x(&self) -> Result<Tensor<T>> {
        let [n, c, h, w] = nchw("max_subsample2x", self)?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidShape {
                op: "max_subsample2x",
                shape: self.shape().to_vec(),
                reason: "spatial extents must be at least 2".into(),
            });
        }
        let x = self.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + y * ow + xx;
                    out[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
        drop(x);
        let len = n * c * h * w;
        Tensor::from_op(
            out,
            &[n, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); len];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `x·Wᵀ + b` for `x` of shape N×in, `W` of shape out×in, `b` of shape out.
    pub fn fully_connected(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (n, fin) = match *self.shape() {
            [n, f] => (n, f),
            _ => {
                return Err(Error::InvalidShape {
                    op: "fully_connected",
                    shape: self.shape().to_vec(),
                    reason: "expected N×in input".into(),
                })
            }
        };
        let fout = match *weight.shape() {
            [o, i] if i == fin => o,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "fully_connected",
                    lhs: self.shape().to_vec(),
                    rhs: weight.shape().to_vec(),
                })
            }
        };
        if let Some(b) = bias {
            if b.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "fully_connected bias",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let x = self.to_vec();
        let wv = weight.to_vec();
        let mut out = vec![T::zero(); n * fout];
        T::gemm(n, fin, fout, &x, false, &wv, true, T::zero(), &mut out);
        if let Some(b) = bias {
            let bv = b.data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv.iter()).for_each(|(o, &b)| *o += b);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let (need_x, need_w, need_b) = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.is_some_and(Tensor::requires_grad),
        );
        let has_bias = bias.is_some();
        Tensor::from_op(
            out,
            &[n, fout],
            parents,
            Box::new(move |g| {
                let dx = need_x.then(|| {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, g, false, &wv, false, T::zero(), &mut dx);
                    dx
                });
                let dw = need_w.then(|| {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, g, true, &x, false, T::zero(), &mut dw);
                    dw
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(need_b.then(|| {
                        let mut db = vec![T::zero(); fout];
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        db
                    }));
                }
                grads
            }),
        )
    }

    /// Picks elements by flat row-major index into a 1-D tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let len = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {len} elements"
            )));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather needs at least one index".into()));
        }
        let x = self.data();
        let out = indices.iter().map(|&i| x[i]).collect();
        drop(x);
        let idx = indices.to_vec();
        Tensor::from_op(
            out,
            &[indices.len()],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); len];
                for (&i, &gv) in idx.iter().zip(g) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Rows of an R×F matrix picked (or repeated) by index.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor<T>> {
        let (r, f) = match *self.shape() {
            [r, f] => (r, f),
            _ => {
                return Err(Error::InvalidShape {
                    op: "select_rows",
                    shape: self.shape().to_vec(),
                    reason: "expected a matrix".into(),
                })
            }
        };
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::InvalidArgument(format!("select_rows indices invalid for {r} rows")));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(rows.len() * f);
        for &i in rows {
            out.extend_from_slice(&x[i * f..(i + 1) * f]);
        }
        drop(x);
        let rows = rows.to_vec();
        Tensor::from_op(
            out,
            &[rows.len(), f],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); r * f];
                for (o, &i) in rows.iter().enumerate() {
                    dx[i * f..(i + 1) * f]
                        .iter_mut()
                        .zip(&g[o * f..(o + 1) * f])
                        .for_each(|(d, &v)| *d += v);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            data.extend_from_slice(&p.data());
            sizes.push(p.numel());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
        Tensor::from_op(
            data,
            &shape,
            parts.to_vec(),
            Box::new(move |g| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let part = g[off..off + s].to_vec();
                        off += s;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(data, shape).unwrap()
    }

    #[test]
    fn upsample_definition() {
        let x = t(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
        let y = x.nearest_upsample2x().unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.to_vec(), vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
        let one = t(&[5.], &[1, 1, 1, 1]).nearest_upsample2x().unwrap();
        assert_eq!(one.to_vec(), vec![5.; 4]);
    }

    #[test]
    fn add_identity_and_values() {
        let a = t(&[1., 2.], &[1, 2]);
        let b = t(&[3., 4.], &[1, 2]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4., 6.]);
        let z = Tensor::zeros(&[1, 2]).unwrap();
        assert_eq!(a.add(&z).unwrap().to_vec(), a.to_vec());
        assert!(matches!(a.add(&t(&[1.], &[1])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_points() {
        let x = t(&[-1., 2.], &[2]);
        assert_eq!(x.relu().to_vec(), vec![0., 2.]);
    }

    #[test]
    fn max_subsample_ties_go_to_first() {
        let x = Tensor::<f64>::leaf(vec![1., 1., 1., 1.], &[1, 1, 2, 2]).unwrap();
        let y = x.max_subsample2x().unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1., 0., 0., 0.]);
    }

    #[test]
    fn max_subsample_rejects_unit_extent() {
        let x = t(&[1.], &[1, 1, 1, 1]);
        assert!(x.max_subsample2x().is_err());
    }

    #[test]
    fn fully_connected_shape_errors() {
        let x = t(&[1., 2.], &[1, 2]);
        let w = t(&[1., 2., 3.], &[1, 3]);
        assert!(matches!(x.fully_connected(&w, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gather_scatters_gradient() {
        let x = Tensor::<f64>::leaf(vec![1., 2., 3.], &[3]).unwrap();
        let y = x.gather(&[2, 0, 2]).unwrap();
        assert_eq!(y.to_vec(), vec![3., 1., 3.]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1., 0., 2.]);
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        let x = Tensor::<f64>::leaf(vec![3.], &[1]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.]);
    }
}
