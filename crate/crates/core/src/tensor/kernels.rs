//! Raw slice kernels. Every reduction runs in a fixed order so results do
//! not depend on the thread count; parallelism only splits independent rows.

use rayon::prelude::*;

use super::Real;

const PAR_MIN_WORK: usize = 1 << 16;
const ROW_BLOCK: usize = 64;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn gemm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// `c += a · b`.
pub fn gemm_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    strided(a, (k as isize, 1), b, (n as isize, 1), c, m, k, n);
}

/// `c += aᵀ · b` with `a[k×m]`, `b[k×n]`, `c[m×n]`.
pub fn gemm_tn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], k: usize, m: usize, n: usize) {
    strided(a, (1, m as isize), b, (n as isize, 1), c, m, k, n);
}

/// `c += a · bᵀ` with `a[m×k]`, `b[n×k]`, `c[m×n]`.
pub fn gemm_nt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    strided(a, (k as isize, 1), b, (1, k as isize), c, m, k, n);
}

/// Rows of `c` go out in fixed-size blocks, so the split never depends on
/// the thread count and each row is computed identically either way.
#[allow(clippy::too_many_arguments)]
fn strided<F: Real>(
    a: &[F],
    sa: (isize, isize),
    b: &[F],
    sb: (isize, isize),
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let block = |(i, cb): (usize, &mut [F])| {
        let r0 = i * ROW_BLOCK;
        let rows = cb.len() / n;
        F::gemm_acc(
            rows,
            k,
            n,
            (&a[r0 * sa.0 as usize..], sa.0, sa.1),
            (b, sb.0, sb.1),
            (cb, n as isize),
        );
    };
    if m * k * n >= PAR_MIN_WORK && m > ROW_BLOCK && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        c.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    }
}

pub fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn sum<F: Real>(a: &[F]) -> F {
    a.iter().fold(F::zero(), |acc, &v| acc + v)
}

pub fn sum_sq<F: Real>(a: &[F]) -> F {
    a.iter().fold(F::zero(), |acc, &v| acc + v * v)
}

pub fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Geometry of a square-kernel, stride-1, same-padded convolution over a
/// position-major feature map `[h·w × channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub cin: usize,
}

impl ConvGeom {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn source(&self, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
        let pad = self.kernel / 2;
        let sy = (y + ky).checked_sub(pad)?;
        let sx = (x + kx).checked_sub(pad)?;
        (sy < self.height && sx < self.width).then_some(sy * self.width + sx)
    }
}

pub fn im2col<F: Real>(x: &[F], g: ConvGeom) -> Vec<F> {
    let pl = g.patch_len();
    let mut cols = vec![F::zero(); g.positions() * pl];
    for y in 0..g.height {
        for xx in 0..g.width {
            let dst = &mut cols[(y * g.width + xx) * pl..][..pl];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.source(y, xx, ky, kx) {
                        let off = (ky * g.kernel + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src * g.cin..(src + 1) * g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back to positions.
pub fn col2im_acc<F: Real>(cols: &[F], g: ConvGeom, dx: &mut [F]) {
    let pl = g.patch_len();
    for y in 0..g.height {
        for xx in 0..g.width {
            let src_row = &cols[(y * g.width + xx) * pl..][..pl];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(dst) = g.source(y, xx, ky, kx) {
                        let off = (ky * g.kernel + kx) * g.cin;
                        add_into(
                            &mut dx[dst * g.cin..(dst + 1) * g.cin],
                            &src_row[off..off + g.cin],
                        );
                    }
                }
            }
        }
    }
}

/// 2×2 average pooling of a `[h·w × c]` map.
pub fn avg_pool2<F: Real>(x: &[F], h: usize, w: usize, c: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::lit(0.25);
    let mut out = vec![F::zero(); oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            let o = &mut out[(y * ow + xx) * c..][..c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                add_into(o, &x[s..s + c]);
            }
            o.iter_mut().for_each(|v| *v = *v * quarter);
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of a `[h·w × c]` map.
pub fn upsample2<F: Real>(x: &[F], h: usize, w: usize, c: usize) -> Vec<F> {
    let ow = w * 2;
    let mut out = vec![F::zero(); 4 * h * w * c];
    for y in 0..2 * h {
        for xx in 0..ow {
            let s = ((y / 2) * w + xx / 2) * c;
            out[(y * ow + xx) * c..][..c].copy_from_slice(&x[s..s + c]);
        }
    }
    out
}
