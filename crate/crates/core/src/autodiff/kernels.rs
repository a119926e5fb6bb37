//! Raw buffer kernels shared by the forward and backward passes.

use super::Real;

/// Row-major `C (m×n) = op(A) (m×k) * op(B) (k×n) [+ C]`.
///
/// `ta` means `a` is stored as `k×m`; `tb` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Geometry of a strided, dilated, zero-padded 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub len_in: usize,
    pub len_out: usize,
}

impl ConvGeom {
    pub fn output_len(
        len_in: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        let padded = len_in + 2 * padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds `x (cin×len_in)` into columns `(cin·kernel)×len_out`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.cin * g.kernel * g.len_out];
    for ci in 0..g.cin {
        let row_in = &x[ci * g.len_in..(ci + 1) * g.len_in];
        for k in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + k) * g.len_out..(ci * g.kernel + k + 1) * g.len_out];
            let offset = (k * g.dilation) as isize - g.padding as isize;
            for (t, dst) in row.iter_mut().enumerate() {
                let src = (t * g.stride) as isize + offset;
                if src >= 0 && (src as usize) < g.len_in {
                    *dst = row_in[src as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub(crate) fn col2im_add<T: Real>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    for ci in 0..g.cin {
        for k in 0..g.kernel {
            let row = &dcols[(ci * g.kernel + k) * g.len_out..(ci * g.kernel + k + 1) * g.len_out];
            let offset = (k * g.dilation) as isize - g.padding as isize;
            let dst = &mut dx[ci * g.len_in..(ci + 1) * g.len_in];
            for (t, &v) in row.iter().enumerate() {
                let src = (t * g.stride) as isize + offset;
                if src >= 0 && (src as usize) < g.len_in {
                    dst[src as usize] += v;
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` for a depthwise tap at `offset`.
#[inline]
fn tap_range(offset: isize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len_in as isize - offset).clamp(0, len_out as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn depthwise_forward<T: Real>(
    x: &[T],
    w: &[T],
    channels: usize,
    len_in: usize,
    kernel: usize,
    dilation: usize,
    padding: usize,
    len_out: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); channels * len_out];
    for c in 0..channels {
        let xr = &x[c * len_in..(c + 1) * len_in];
        let yr = &mut out[c * len_out..(c + 1) * len_out];
        for k in 0..kernel {
            let wk = w[c * kernel + k];
            let offset = (k * dilation) as isize - padding as isize;
            let (lo, hi) = tap_range(offset, len_in, len_out);
            let src = (lo as isize + offset) as usize;
            for (y, &xv) in yr[lo..hi].iter_mut().zip(&xr[src..src + (hi - lo)]) {
                *y += wk * xv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward<T: Real>(
    grad: &[T],
    x: &[T],
    w: &[T],
    channels: usize,
    len_in: usize,
    kernel: usize,
    dilation: usize,
    padding: usize,
    len_out: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    for c in 0..channels {
        let gr = &grad[c * len_out..(c + 1) * len_out];
        let xr = &x[c * len_in..(c + 1) * len_in];
        for k in 0..kernel {
            let offset = (k * dilation) as isize - padding as isize;
            let (lo, hi) = tap_range(offset, len_in, len_out);
            let src = (lo as isize + offset) as usize;
            let n = hi - lo;
            if let Some(dw) = dw.as_deref_mut() {
                let mut acc = T::zero();
                for (&g, &xv) in gr[lo..hi].iter().zip(&xr[src..src + n]) {
                    acc += g * xv;
                }
                dw[c * kernel + k] += acc;
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wk = w[c * kernel + k];
                let dxr = &mut dx[c * len_in..(c + 1) * len_in];
                for (d, &g) in dxr[src..src + n].iter_mut().zip(&gr[lo..hi]) {
                    *d += wk * g;
                }
            }
        }
    }
}

/// Overlap-adds columns `(cout·kernel)×frames` into `cout×((frames-1)·stride+kernel)`.
pub(crate) fn overlap_add<T: Real>(
    cols: &[T],
    cout: usize,
    kernel: usize,
    stride: usize,
    frames: usize,
) -> Vec<T> {
    let len_out = (frames - 1) * stride + kernel;
    let mut out = vec![T::zero(); cout * len_out];
    for co in 0..cout {
        let dst = &mut out[co * len_out..(co + 1) * len_out];
        for k in 0..kernel {
            let row = &cols[(co * kernel + k) * frames..(co * kernel + k + 1) * frames];
            for (t, &v) in row.iter().enumerate() {
                dst[t * stride + k] += v;
            }
        }
    }
    out
}

/// Adjoint of [`overlap_add`].
pub(crate) fn overlap_gather<T: Real>(
    grad: &[T],
    cout: usize,
    kernel: usize,
    stride: usize,
    frames: usize,
) -> Vec<T> {
    let len_out = (frames - 1) * stride + kernel;
    let mut cols = vec![T::zero(); cout * kernel * frames];
    for co in 0..cout {
        let src = &grad[co * len_out..(co + 1) * len_out];
        for k in 0..kernel {
            let row = &mut cols[(co * kernel + k) * frames..(co * kernel + k + 1) * frames];
            for (t, v) in row.iter_mut().enumerate() {
                *v = src[t * stride + k];
            }
        }
    }
    cols
}
