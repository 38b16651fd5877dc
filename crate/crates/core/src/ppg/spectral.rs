use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::ingest::LatentTensor;

/// Normalized radial frequency of DFT bin `(ky, kx)` on an `h x w` grid: each
/// axis frequency is scaled so Nyquist is 1, and the radius is divided by
/// sqrt(2) so the corner bin sits at exactly 1.
pub fn radial_frequency(ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let axis = |k: usize, n: usize| {
        if n < 2 {
            0.0
        } else {
            k.min(n - k) as f64 / (n as f64 / 2.0)
        }
    };
    let (fy, fx) = (axis(ky, h), axis(kx, w));
    (fy * fy + fx * fx).sqrt() / std::f64::consts::SQRT_2
}

/// Keeps, per channel, only the 2-D DFT coefficients whose normalized radial
/// frequency is at most `cutoff`, and returns the real part of the inverse.
pub fn low_frequency_project(z: &LatentTensor, cutoff: f64) -> Result<LatentTensor> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "low-frequency cutoff must be in (0, 1], got {cutoff}"
        )));
    }
    let (h, w) = (z.height(), z.width());
    let mut planner = FftPlanner::<f64>::new();
    let row_fwd = planner.plan_fft_forward(w);
    let row_inv = planner.plan_fft_inverse(w);
    let col_fwd = planner.plan_fft_forward(h);
    let col_inv = planner.plan_fft_inverse(h);
    let mut out = Vec::with_capacity(z.data().len());
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for c in 0..z.channels() {
        let mut buf: Vec<Complex<f64>> = z.channel(c).iter().map(|&v| Complex::new(f64::from(v), 0.0)).collect();
        for row in buf.chunks_exact_mut(w) {
            row_fwd.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col_fwd.process(&mut column);
            for (y, v) in column.iter_mut().enumerate() {
                if radial_frequency(y, x, h, w) > cutoff {
                    *v = Complex::new(0.0, 0.0);
                }
            }
            col_inv.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        for row in buf.chunks_exact_mut(w) {
            row_inv.process(row);
        }
        let norm = (h * w) as f64;
        out.extend(buf.iter().map(|v| (v.re / norm) as f32));
    }
    LatentTensor::new(z.geometry(), out)
}
