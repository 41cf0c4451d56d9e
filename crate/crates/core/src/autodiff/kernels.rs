//! Raw numeric kernels shared by the forward and backward rules.

/// Strided matrix view for [`gemm`]: `(row_stride, col_stride)`.
pub(crate) type Strides = (isize, isize);

/// `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`; `c` is
/// row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_beta(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // Bounds of the strided operands.
    assert!(max_index(m, k, sa) < a.len());
    assert!(max_index(k, n, sb) < b.len());
    // SAFETY: the strides and extents above address only elements inside
    // `a`, `b` and the first `m*n` entries of `c`, which is row-major.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · b`; `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], sa: Strides, b: &[f32], sb: Strides, c: &mut [f32]) {
    gemm_beta(m, k, n, a, sa, b, sb, 0.0, c);
}

fn max_index(rows: usize, cols: usize, s: Strides) -> usize {
    (rows as isize - 1) as usize * s.0 as usize + (cols as isize - 1) as usize * s.1 as usize
}

/// Geometry of a 2-D convolution over a batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn input_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad`
/// falls inside `0..w`.
#[inline]
fn valid_range(kj: usize, g: &ConvGeom) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `C_in×H×W` sample into a `(C_in·k·k) × (H'·W')` column
/// matrix. Every entry of `cols` is written.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(kj, g);
                for oy in 0..g.h_out {
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..][..g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (o, ix) in out_row[lo..hi].iter_mut().zip((first..).step_by(g.stride)) {
                            *o = src_row[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds column gradients onto one sample's `dx`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(kj, g);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                    let src_row = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    for (v, ix) in src_row.iter().zip((first..).step_by(g.stride)) {
                        dst_row[ix] += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_row(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    fn naive_im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut cols = Vec::new();
        for c in 0..g.c_in {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    for oy in 0..g.h_out {
                        for ox in 0..g.w_out {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            let inside = (0..g.h as isize).contains(&iy) && (0..g.w as isize).contains(&ix);
                            cols.push(if inside {
                                x[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_naive_unfold() {
        for (h, w, k, stride, pad) in [(5, 4, 3, 1, 1), (7, 6, 3, 2, 1), (4, 4, 1, 1, 0), (3, 5, 3, 3, 2), (6, 6, 5, 2, 0), (2, 2, 3, 1, 2)] {
            let g = ConvGeom {
                c_in: 2,
                h,
                w,
                c_out: 1,
                k,
                stride,
                pad,
                h_out: (h + 2 * pad - k) / stride + 1,
                w_out: (w + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f32> = (0..g.input_len()).map(|v| v as f32 + 1.0).collect();
            let mut cols = vec![f32::NAN; g.patch_len() * g.positions()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, naive_im2col(&x, &g), "{h}x{w} k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 4,
            c_out: 1,
            k: 3,
            stride: 2,
            pad: 1,
            h_out: 3,
            w_out: 2,
        };
        let x: Vec<f32> = (0..40).map(|v| (v as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..g.patch_len() * g.positions())
            .map(|v| (v as f32 * 0.11).cos())
            .collect();
        let mut cols = vec![f32::NAN; y.len()];
        im2col(&x, &g, &mut cols);
        let mut dx = vec![0.0; x.len()];
        col2im(&y, &g, &mut dx);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
