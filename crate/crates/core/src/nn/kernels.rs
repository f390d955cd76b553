//! Loop kernels shared by the forward and backward passes.
//!
//! All reductions run in a fixed order so results are bit-reproducible.

use super::arch::ConvGeom;
use crate::tensor::Scalar;

/// Four consecutive [`axpy`] calls fused into one pass over `y`, with the same
/// per-element rounding order.
#[inline]
pub fn axpy4<T: Scalar>(alpha: [T; 4], x: [&[T]; 4], y: &mut [T]) {
    let n = y.len();
    let [x0, x1, x2, x3] = x.map(|r| &r[..n]);
    for i in 0..n {
        y[i] = (((y[i] + alpha[0] * x0[i]) + alpha[1] * x1[i]) + alpha[2] * x2[i]) + alpha[3] * x3[i];
    }
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y += sum_j coef[j] * mat[j]`, where `mat[j]` is the `j`-th row of width
/// `y.len()` starting at column `col` of a row-major matrix with `stride`
/// columns. Terms are added in index order, so dropping zero coefficients
/// leaves the result bitwise unchanged.
#[inline]
pub fn gemv_rows<T: Scalar>(coef: &[T], mat: &[T], stride: usize, col: usize, y: &mut [T]) {
    let w = y.len();
    let row = |j: usize| &mat[j * stride + col..j * stride + col + w];
    let mut j = 0;
    while j + 4 <= coef.len() {
        axpy4([coef[j], coef[j + 1], coef[j + 2], coef[j + 3]], [row(j), row(j + 1), row(j + 2), row(j + 3)], y);
        j += 4;
    }
    for j in j..coef.len() {
        axpy(coef[j], row(j), y);
    }
}

/// Unfolds sample `r` of a batch into columns `r * out_pixels ..` of a
/// `[C * kh * kw, stride]` column matrix.
pub fn im2col_batch<T: Scalar>(input: &[T], g: &ConvGeom, cols: &mut [T], stride: usize, r: usize) {
    let npix = g.out_pixels();
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    let mut kk = 0;
    for c in 0..g.in_ch {
        let plane = &input[c * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[kk * stride + r * npix..][..npix];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * g.out_w + ox] = if y >= 0 && y < ih && x >= 0 && x < iw {
                            plane[y as usize * g.in_w + x as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                kk += 1;
            }
        }
    }
}

/// Unfolds one `[C, H, W]` sample into `[out_pixels, C * kh * kw]` patches.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, patches: &mut [T]) {
    let k = g.patch_len();
    debug_assert_eq!(patches.len(), g.out_pixels() * k);
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut patches[(oy * g.out_w + ox) * k..][..k];
            let mut idx = 0;
            for c in 0..g.in_ch {
                let plane = &input[c * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ky in 0..g.kernel_h {
                    let y = (oy * g.stride + ky) as isize - g.padding as isize;
                    for kx in 0..g.kernel_w {
                        let x = (ox * g.stride + kx) as isize - g.padding as isize;
                        row[idx] = if y >= 0 && y < ih && x >= 0 && x < iw {
                            plane[y as usize * g.in_w + x as usize]
                        } else {
                            T::zero()
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `grad_input`.
pub fn col2im_add<T: Scalar>(patches: &[T], g: &ConvGeom, grad_input: &mut [T]) {
    let k = g.patch_len();
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &patches[(oy * g.out_w + ox) * k..][..k];
            let mut idx = 0;
            for c in 0..g.in_ch {
                let base = c * g.in_h * g.in_w;
                for ky in 0..g.kernel_h {
                    let y = (oy * g.stride + ky) as isize - g.padding as isize;
                    for kx in 0..g.kernel_w {
                        let x = (ox * g.stride + kx) as isize - g.padding as isize;
                        if y >= 0 && y < ih && x >= 0 && x < iw {
                            grad_input[base + y as usize * g.in_w + x as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}
