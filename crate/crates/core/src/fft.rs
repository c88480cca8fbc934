//! Multi-dimensional FFT on the periodic lattice.
//!
//! Transforms follow the lattice-dynamics convention
//! `f̂(θ) = Σ_x f(x) e^{iθ·x}` with inverse `f(x) = N^{-d} Σ_θ e^{-iθ·x} f̂(θ)`.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::grid::LatticeSpec;

#[derive(Clone)]
pub struct TorusFft {
    dim: usize,
    side: usize,
    // rustfft's "inverse" carries the e^{+i} sign of our forward transform
    plus: Arc<dyn Fft<f64>>,
    minus: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for TorusFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TorusFft")
            .field("dim", &self.dim)
            .field("side", &self.side)
            .finish()
    }
}

impl TorusFft {
    pub fn new(dim: usize, side: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dim,
            side,
            plus: planner.plan_fft_inverse(side),
            minus: planner.plan_fft_forward(side),
        }
    }

    pub fn for_lattice(lattice: &LatticeSpec) -> Self {
        Self::new(lattice.dim, lattice.side)
    }

    pub fn len(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In place `f ↦ f̂`, `f̂(θ) = Σ_x f(x) e^{iθ·x}`.
    pub fn to_fourier(&self, data: &mut [Complex64]) {
        self.apply(&self.plus, data);
    }

    /// In place `f̂ ↦ f`, including the `N^{-d}` normalisation.
    pub fn from_fourier(&self, data: &mut [Complex64]) {
        self.apply(&self.minus, data);
        let scale = 1.0 / self.len() as f64;
        for z in data.iter_mut() {
            *z *= scale;
        }
    }

    /// Forward transform of a real array.
    pub fn real_to_fourier(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.to_fourier(&mut buf);
        buf
    }

    fn apply(&self, plan: &Arc<dyn Fft<f64>>, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len(), "buffer does not match torus size");
        let n = self.side;
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        // last axis is contiguous
        plan.process_with_scratch(data, &mut scratch);
        if self.dim == 1 {
            return;
        }
        let total = data.len();
        let mut lines = vec![Complex64::default(); total];
        for axis in 0..self.dim - 1 {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            let block = stride * n;
            let mut line = 0;
            for outer in (0..total).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for j in 0..n {
                        lines[line * n + j] = data[base + j * stride];
                    }
                    line += 1;
                }
            }
            plan.process_with_scratch(&mut lines, &mut scratch);
            let mut line = 0;
            for outer in (0..total).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for j in 0..n {
                        data[base + j * stride] = lines[line * n + j];
                    }
                    line += 1;
                }
            }
        }
    }
}
