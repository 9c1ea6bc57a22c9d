//! Low-frequency constraint: keep DFT bins within a radius of the centered zero
//! frequency, per channel, while staying inside the feasible box.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::perturbation::{Patch, PerturbationSpec};
use crate::tensor::Tensor;

const MAX_ITERATIONS: usize = 20_000;
const TOLERANCE: f64 = 1e-11;

/// Reusable band-limiting operator for `[C, H, W]` perturbations.
pub struct LowPass {
    channels: usize,
    h: usize,
    w: usize,
    cutoff: f64,
    mask: Vec<bool>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// Signed frequency of DFT bin `k` of an `n`-point transform, centered on zero.
fn centered(k: usize, n: usize) -> f64 {
    ((k + n / 2) % n) as f64 - (n / 2) as f64
}

/// Radius beyond which the mask keeps every bin.
pub fn all_pass_radius(h: usize, w: usize) -> f64 {
    (std::f64::consts::SQRT_2 * h.max(w) as f64 / 2.0).ceil()
}

impl LowPass {
    pub fn new(shape: &[usize], cutoff: f64) -> Result<Self> {
        let [channels, h, w] = match *shape {
            [c, h, w] => [c, h, w],
            ref s => return Err(Error::shape("low_pass", format!("expected [C, H, W], got {s:?}"))),
        };
        if !(cutoff >= 0.0) {
            return Err(Error::invalid(format!("cutoff {cutoff} must be non-negative")));
        }
        let mut mask = vec![false; h * w];
        for ky in 0..h {
            for kx in 0..w {
                let (dy, dx) = (centered(ky, h), centered(kx, w));
                mask[ky * w + kx] = (dy * dy + dx * dx).sqrt() <= cutoff;
            }
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            channels,
            h,
            w,
            cutoff,
            mask,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        })
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    fn transform(&self, buf: &mut [Complex<f64>], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.h, self.w);
        rows.process(buf);
        let mut t = vec![Complex::default(); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        cols.process(&mut t);
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = t[x * h + y];
            }
        }
    }

    /// Orthogonal projection onto band-limited signals: mask every channel's
    /// spectrum and keep the real part of the inverse transform.
    pub fn filter(&self, values: &[f64]) -> Vec<f64> {
        let plane = self.h * self.w;
        assert_eq!(values.len(), self.channels * plane, "low-pass input length");
        let scale = 1.0 / plane as f64;
        let mut out = Vec::with_capacity(values.len());
        let mut buf = vec![Complex::default(); plane];
        for ch in values.chunks(plane) {
            for (b, &v) in buf.iter_mut().zip(ch) {
                *b = Complex::new(v, 0.0);
            }
            self.transform(&mut buf, &self.row_fwd, &self.col_fwd);
            for (b, &keep) in buf.iter_mut().zip(&self.mask) {
                if !keep {
                    *b = Complex::default();
                }
            }
            self.transform(&mut buf, &self.row_inv, &self.col_inv);
            out.extend(buf.iter().map(|c| c.re * scale));
        }
        out
    }

    /// Closest point to `values` that is both band-limited and inside `[lo, hi]`.
    /// When the filtered signal already lies in the box it is returned as is;
    /// otherwise Dykstra's alternating projections refine it.
    pub fn project(&self, values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        let y = self.filter(values);
        if y.iter().all(|v| (lo..=hi).contains(v)) {
            return y;
        }
        let mut x = values.to_vec();
        let mut q = vec![0.0; x.len()];
        for _ in 0..MAX_ITERATIONS {
            let y = self.filter(&x);
            let mut moved: f64 = 0.0;
            let mut gap: f64 = 0.0;
            for ((xi, qi), yi) in x.iter_mut().zip(q.iter_mut()).zip(&y) {
                let next = (yi + *qi).clamp(lo, hi);
                *qi += yi - next;
                moved = moved.max((next - *xi).abs());
                gap = gap.max((next - yi).abs());
                *xi = next;
            }
            if moved < TOLERANCE && gap < 1e-9 {
                break;
            }
        }
        x
    }

    /// Band-limits a feasible perturbation, keeping it feasible.
    pub fn apply(&self, patch: &Patch, spec: &PerturbationSpec) -> Patch {
        let (lo, hi) = spec.bounds();
        let data = self.project(patch.data(), lo, hi);
        Patch::from_tensor_unchecked(Tensor::from_parts(patch.shape().to_vec(), data))
    }
}

/// One-shot [`LowPass::apply`].
pub fn low_pass(patch: &Patch, cutoff: f64, spec: &PerturbationSpec) -> Result<Patch> {
    Ok(LowPass::new(patch.shape(), cutoff)?.apply(patch, spec))
}
