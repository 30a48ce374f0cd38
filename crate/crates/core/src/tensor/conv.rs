//! 2-D convolution via im2col and a single GEMM per image.

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image (C×H×W) into a (C·Kh·Kw) × (Ho·Wo) matrix.
fn im2col<T: Float>(img: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.col_cols();
    for ch in 0..g.c {
        let plane = &img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
fn col2im<T: Float>(col: &[T], g: &Geometry, img: &mut [T]) {
    let cols = g.col_cols();
    for ch in 0..g.c {
        let plane = &mut img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an N×C×H×W input with an O×C×Kh×Kw kernel.
///
/// Output extents are `floor((H + 2·padding − Kh)/stride) + 1` (same for W).
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        lhs: input.shape().to_vec(),
        rhs: weight.shape().to_vec(),
    };
    let [n, c, h, w] = match *input.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(mismatch()),
    };
    let [o, wc, kh, kw] = match *weight.shape() {
        [o, i, kh, kw] => [o, i, kh, kw],
        _ => return Err(mismatch()),
    };
    if wc != c || h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(mismatch());
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
    };
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let x = input.to_vec();
    let wv = weight.to_vec();
    let mut out = vec![T::zero(); n * o * cols];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for b in 0..n {
        let img = &x[b * c * h * w..(b + 1) * c * h * w];
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        T::gemm(
            o,
            rows,
            cols,
            &wv,
            false,
            src,
            false,
            T::zero(),
            &mut out[b * o * cols..(b + 1) * o * cols],
        );
    }
    if let Some(bt) = bias {
        let bv = bt.data();
        for (i, chunk) in out.chunks_mut(cols).enumerate() {
            let bval = bv[i % o];
            chunk.iter_mut().for_each(|v| *v += bval);
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    parents.extend(bias.cloned());
    let need_x = input.requires_grad();
    let need_w = weight.requires_grad();
    let need_b = bias.is_some_and(Tensor::requires_grad);
    let has_bias = bias.is_some();
    if !(need_x || need_w || need_b) || !super::grad_enabled() {
        return Tensor::from_vec(out, &[n, o, g.oh, g.ow]);
    }
    Tensor::from_op(
        out,
        &[n, o, g.oh, g.ow],
        parents,
        Box::new(move |grad| {
            let mut dx = need_x.then(|| vec![T::zero(); n * c * h * w]);
            let mut dw = need_w.then(|| vec![T::zero(); o * rows]);
            let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
            let mut dcol = vec![T::zero(); if need_x { rows * cols } else { 0 }];
            for b in 0..n {
                let gb = &grad[b * o * cols..(b + 1) * o * cols];
                let img = &x[b * c * h * w..(b + 1) * c * h * w];
                if let Some(dw) = dw.as_mut() {
                    let src: &[T] = if g.is_pointwise() {
                        img
                    } else {
                        im2col(img, &g, &mut col);
                        &col
                    };
                    // dW += dOut · colᵀ
                    T::gemm(o, cols, rows, gb, false, src, true, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dimg = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                    if g.is_pointwise() {
                        T::gemm(rows, o, cols, &wv, true, gb, false, T::one(), dimg);
                    } else {
                        T::gemm(rows, o, cols, &wv, true, gb, false, T::zero(), &mut dcol);
                        col2im(&dcol, &g, dimg);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need_b.then(|| {
                    let mut db = vec![T::zero(); o];
                    for (i, chunk) in grad.chunks(cols).enumerate() {
                        db[i % o] += chunk.iter().copied().sum();
                    }
                    db
                }));
            }
            grads
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_ones() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![9.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_f64(&[1., 2., 3., 4.], &[1, 1, 2, 2]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1.], &[1, 1, 1, 1]).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap().to_vec(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]).unwrap();
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 1, 5, 5]).unwrap();
        assert!(conv2d(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn strided_output_extent() {
        let x = Tensor::<f32>::zeros(&[1, 1, 7, 6]).unwrap();
        let w = Tensor::<f32>::zeros(&[2, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 3]);
    }
}
