//! im2col-based convolution kernels shared by the tape's forward and
//! backward passes. One sample at a time: the column buffer for a whole
//! batch of 5x5x128 convolutions would dwarf the activations themselves.

use crate::autodiff::scalar::{gemm_a_bt, gemm_at_b, gemm_rowmajor, Scalar};

/// Static geometry of one conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unpacks one sample's C x H x W block into a (C*kh*kw) x (oh*ow) column
/// matrix, zero-filling out-of-bounds taps.
fn im2col<F: Scalar>(x: &[F], d: &ConvDims, cols: &mut [F]) {
    let ohw = d.oh * d.ow;
    debug_assert_eq!(x.len(), d.cin * d.h * d.w);
    debug_assert_eq!(cols.len(), d.cin * d.kh * d.kw * ohw);
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * ohw;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let out_row = &mut cols[row + oy * d.ow..row + (oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, out) in out_row.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        *out = if ix < 0 || ix >= d.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one sample's input gradient.
fn col2im_accumulate<F: Scalar>(cols: &[F], d: &ConvDims, dx: &mut [F]) {
    let ohw = d.oh * d.ow;
    for c in 0..d.cin {
        let plane_off = c * d.h * d.w;
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * ohw;
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * d.ow..row + (oy + 1) * d.ow];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dx[plane_off + iy as usize * d.w + ix as usize] =
                            dx[plane_off + iy as usize * d.w + ix as usize] + g;
                    }
                }
            }
        }
    }
}

/// Batched forward: y[n,o,oy,ox] = bias[o] + sum_{c,ky,kx} x * kernel.
pub fn conv2d_forward<F: Scalar>(x: &[F], kernel: &[F], bias: &[F], d: &ConvDims, y: &mut [F]) {
    let ckk = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let mut cols = vec![F::zero(); ckk * ohw];
    for n in 0..d.n {
        let xs = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
        im2col(xs, d, &mut cols);
        let ys = &mut y[n * d.cout * ohw..(n + 1) * d.cout * ohw];
        gemm_rowmajor(d.cout, ckk, ohw, F::one(), kernel, &cols, F::zero(), ys);
        for o in 0..d.cout {
            let b = bias[o];
            for v in &mut ys[o * ohw..(o + 1) * ohw] {
                *v = *v + b;
            }
        }
    }
}

/// Batched backward. Accumulates into dx, dkernel, dbias; any of the three
/// may be None when that gradient is not required.
pub fn conv2d_backward<F: Scalar>(
    x: &[F],
    kernel: &[F],
    d: &ConvDims,
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dkernel: Option<&mut [F]>,
    mut dbias: Option<&mut [F]>,
) {
    let ckk = d.cin * d.kh * d.kw;
    let ohw = d.oh * d.ow;
    let mut cols = vec![F::zero(); ckk * ohw];
    let mut dcols = vec![F::zero(); ckk * ohw];
    for n in 0..d.n {
        let dys = &dy[n * d.cout * ohw..(n + 1) * d.cout * ohw];
        if dkernel.is_some() || dx.is_some() {
            let xs = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
            im2col(xs, d, &mut cols);
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            // dW += dY (cout x ohw) * cols^T (ohw x ckk)
            gemm_a_bt(d.cout, ohw, ckk, F::one(), dys, &cols, F::one(), dk);
        }
        if let Some(dxs) = dx.as_deref_mut() {
            // dcols = W^T (ckk x cout) * dY (cout x ohw)
            gemm_at_b(ckk, d.cout, ohw, F::one(), kernel, dys, F::zero(), &mut dcols);
            let slice = &mut dxs[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
            col2im_accumulate(&dcols, d, slice);
        }
        if let Some(db) = dbias.as_deref_mut() {
            for o in 0..d.cout {
                let mut s = F::zero();
                for &g in &dys[o * ohw..(o + 1) * ohw] {
                    s = s + g;
                }
                db[o] = db[o] + s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_floor_formula() {
        assert_eq!(out_extent(64, 5, 2, 2), Some(32));
        assert_eq!(out_extent(32, 3, 2, 1), Some(16));
        assert_eq!(out_extent(3, 2, 1, 0), Some(2));
        assert_eq!(out_extent(1, 3, 1, 0), None);
        assert_eq!(out_extent(1, 3, 2, 1), Some(1));
    }

    #[test]
    fn im2col_identity_kernel_geometry() {
        // 1 channel, 3x3 input, 1x1 kernel, stride 1: cols == input.
        let d = ConvDims {
            n: 1,
            cin: 1,
            h: 3,
            w: 3,
            cout: 1,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            oh: 3,
            ow: 3,
        };
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut cols = vec![0.0; 9];
        im2col(&x, &d, &mut cols);
        assert_eq!(cols, x);
    }
}
