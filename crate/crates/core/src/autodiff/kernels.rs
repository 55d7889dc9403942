//! Slice-level kernels behind the heavier tape operations.

use super::{gemm, MatView, Scalar};

/// Unfolds one `[c, h, w]` plane stack into a `[c·9, h·w]` matrix of 3×3
/// neighbourhoods with zero padding 1. Row `ci·9 + ky·3 + kx` holds input
/// pixel `(y + ky − 1, x + kx − 1)` at column `y·w + x`.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(x.len(), c * hw);
    debug_assert_eq!(cols.len(), c * 9 * hw);
    let zero = T::zero();
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let d = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        d.fill(zero);
                        continue;
                    }
                    let s = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            d[0] = zero;
                            d[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => d.copy_from_slice(s),
                        _ => {
                            d[..w - 1].copy_from_slice(&s[1..]);
                            d[w - 1] = zero;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the planes.
pub fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(dx.len(), c * hw);
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[y * w..(y + 1) * w];
                    let d = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (a, b) in d[..w - 1].iter_mut().zip(&s[1..]) {
                                *a = *a + *b;
                            }
                        }
                        1 => {
                            for (a, b) in d.iter_mut().zip(s) {
                                *a = *a + *b;
                            }
                        }
                        _ => {
                            for (a, b) in d[1..].iter_mut().zip(&s[..w - 1]) {
                                *a = *a + *b;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn conv3x3_forward<T: Scalar>(
    d: &ConvDims,
    x: &[T],
    k: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let hw = d.h * d.w;
    let kk = d.cin * 9;
    let mut cols = vec![T::zero(); kk * hw];
    for n in 0..d.n {
        im2col(&x[n * d.cin * hw..(n + 1) * d.cin * hw], d.cin, d.h, d.w, &mut cols);
        let o = &mut out[n * d.cout * hw..(n + 1) * d.cout * hw];
        gemm(MatView::new(k, d.cout, kk), MatView::new(&cols, kk, hw), T::zero(), o);
        for (co, row) in o.chunks_exact_mut(hw).enumerate() {
            let b = bias[co];
            row.iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

/// Accumulates whichever of `dx`, `dk`, `db` are requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<T: Scalar>(
    d: &ConvDims,
    x: &[T],
    k: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let hw = d.h * d.w;
    let kk = d.cin * 9;
    let mut cols = vec![T::zero(); kk * hw];
    for n in 0..d.n {
        let g = &dout[n * d.cout * hw..(n + 1) * d.cout * hw];
        if let Some(dk) = dk.as_deref_mut() {
            im2col(&x[n * d.cin * hw..(n + 1) * d.cin * hw], d.cin, d.h, d.w, &mut cols);
            gemm(
                MatView::new(g, d.cout, hw),
                MatView::new(&cols, kk, hw).t(),
                T::one(),
                dk,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                MatView::new(k, d.cout, kk).t(),
                MatView::new(g, d.cout, hw),
                T::zero(),
                &mut cols,
            );
            col2im_add(&cols, d.cin, d.h, d.w, &mut dx[n * d.cin * hw..(n + 1) * d.cin * hw]);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in g.chunks_exact(hw).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
    }
}
