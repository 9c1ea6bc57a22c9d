//! Numeric kernels behind the graph primitives. All buffers are row-major f64.

/// `c = a * b + beta * c` for an `m x k` by `k x n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() >= m * n);
    // SAFETY: the extents above bound every index dgemm touches, and `c`
    // does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub ksize: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.ksize * self.ksize
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `cin x h x w` image into a `(cin*k*k) x (h*w)` matrix with SAME zero padding.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, col: &mut [f64]) {
    let pad = g.ksize / 2;
    let hw = g.pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = (ci * g.ksize + ky) * g.ksize + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let line = &mut dst[y * g.w..(y + 1) * g.w];
                    if sy < 0 || sy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (g.w as isize - shift).min(g.w as isize) as usize;
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let s0 = (lo as isize + shift) as usize;
                    line[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image gradient.
pub(crate) fn col2im_add(col: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let pad = g.ksize / 2;
    let hw = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = (ci * g.ksize + ky) * g.ksize + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let line = &src[y * g.w..(y + 1) * g.w];
                    let dst = &mut plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (g.w as isize - shift).min(g.w as isize) as usize;
                    let s0 = (lo as isize + shift) as usize;
                    for (d, v) in dst[s0..s0 + hi - lo].iter_mut().zip(&line[lo..hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Per-segment standardization used by group norm and weight standardization.
///
/// `x` is split into `segments` equal contiguous runs; each run is normalized to
/// zero mean and unit (biased) variance. Returns the inverse standard deviations.
pub(crate) fn standardize(x: &[f64], segments: usize, eps: f64, out: &mut [f64]) -> Vec<f64> {
    let m = x.len() / segments;
    let mut inv = Vec::with_capacity(segments);
    for s in 0..segments {
        let seg = &x[s * m..(s + 1) * m];
        let mean = seg.iter().sum::<f64>() / m as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (o, v) in out[s * m..(s + 1) * m].iter_mut().zip(seg) {
            *o = (v - mean) * inv_std;
        }
        inv.push(inv_std);
    }
    inv
}

/// Backward of [`standardize`] given the normalized values and upstream gradient;
/// overwrites `dx`.
pub(crate) fn standardize_backward(
    xhat: &[f64],
    inv: &[f64],
    dxhat: &[f64],
    dx: &mut [f64],
) {
    let segments = inv.len();
    let m = xhat.len() / segments;
    let mf = m as f64;
    for s in 0..segments {
        let r = s * m..(s + 1) * m;
        let (xh, dh) = (&xhat[r.clone()], &dxhat[r.clone()]);
        let sum_d: f64 = dh.iter().sum();
        let sum_dx: f64 = dh.iter().zip(xh).map(|(d, x)| d * x).sum();
        let k = inv[s] / mf;
        for ((o, d), x) in dx[r].iter_mut().zip(dh).zip(xh) {
            *o = k * (mf * d - sum_d - x * sum_dx);
        }
    }
}

pub(crate) fn log_softmax_row(logits: &[f64], probs: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    max + z.ln()
}
