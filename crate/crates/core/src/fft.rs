//! Batched 2D FFTs over row-major complex planes.
//!
//! Both directions are unnormalized; callers scale inverse results by
//! `1 / (height * width)` where needed.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Transforms every consecutive plane of `data` in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Unnormalized inverse transform of every plane in place.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, true);
    }

    /// Inverse transform scaled by `1/N`, so `inverse_normalized(forward(x)) == x`.
    pub fn inverse_normalized(&self, data: &mut [Complex64]) {
        self.run(data, true);
        let scale = 1.0 / self.plane_len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        assert_eq!(data.len() % n, 0, "buffer is not a whole number of planes");
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        let scratch_len = row
            .get_inplace_scratch_len()
            .max(col.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
        let mut column = vec![Complex64::new(0.0, 0.0); n];
        for plane in data.chunks_exact_mut(n) {
            row.process_with_scratch(plane, &mut scratch);
            // columns: transpose, transform as rows, transpose back
            for r in 0..h {
                for c in 0..w {
                    column[c * h + r] = plane[r * w + c];
                }
            }
            col.process_with_scratch(&mut column, &mut scratch);
            for c in 0..w {
                for r in 0..h {
                    plane[r * w + c] = column[c * h + r];
                }
            }
        }
    }
}
