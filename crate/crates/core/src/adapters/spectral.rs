//! 2-D discrete Fourier transforms of real matrices via row/column FFTs.
//!
//! Conventions on an `R×C` grid, with `θ = 2π(p·u/R + q·v/C)`:
//! forward `F[u,v] = Σ x[p,q]·e^{-iθ}`, inverse `x[p,q] = (1/RC)·Σ F[u,v]·e^{+iθ}`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::numerics::Scalar;

fn transform<T: Scalar>(grid: &mut [Complex<T>], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    row_fft.process(grid);
    let mut column = vec![Complex::new(T::zero(), T::zero()); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            column[c * rows + r] = grid[r * cols + c];
        }
    }
    col_fft.process(&mut column);
    for r in 0..rows {
        for c in 0..cols {
            grid[r * cols + c] = column[c * rows + r];
        }
    }
}

/// `Re(IDFT2(S))` for a spectrum that is zero except `S[entries[j]] = coeffs[j]`.
pub fn sparse_idft2_real<T: Scalar>(
    entries: &[(usize, usize)],
    coeffs: &[T],
    rows: usize,
    cols: usize,
) -> Vec<T> {
    let zero = Complex::new(T::zero(), T::zero());
    let mut grid = vec![zero; rows * cols];
    for (&(u, v), &c) in entries.iter().zip(coeffs) {
        grid[u * cols + v].re += c;
    }
    idft2_complex_real(grid, rows, cols)
}

/// `Re(IDFT2(S))` of a dense complex spectrum stored row-major.
pub fn idft2_real<T: Scalar>(spectrum: &[Complex<T>], rows: usize, cols: usize) -> Vec<T> {
    idft2_complex_real(spectrum.to_vec(), rows, cols)
}

fn idft2_complex_real<T: Scalar>(mut grid: Vec<Complex<T>>, rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(grid.len(), rows * cols, "spectrum size");
    transform(&mut grid, rows, cols, true);
    let norm = T::from_usize(rows * cols).unwrap();
    grid.into_iter().map(|z| z.re / norm).collect()
}

/// Unnormalized forward `DFT2` of a real matrix.
pub fn dft2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<Complex<T>> {
    assert_eq!(x.len(), rows * cols, "matrix size");
    let mut grid: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    transform(&mut grid, rows, cols, false);
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_entry_spreads_uniformly() {
        let w = sparse_idft2_real(&[(0, 0)], &[1.0f64], 4, 4);
        assert!(w.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn forward_then_inverse_is_identity() {
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.7).sin()).collect();
        let back = idft2_real(&dft2(&x, 3, 5), 3, 5);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let w = sparse_idft2_real(&[(0, 0)], &[2.0f32], 2, 2);
        assert!(w.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
