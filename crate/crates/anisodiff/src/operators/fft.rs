//! Thin N-dimensional FFT layer over rustfft: axis-by-axis complex
//! transforms with a shared plan cache.

use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::grid::Field;

static PLANNER: Lazy<Mutex<FftPlanner<f64>>> = Lazy::new(|| Mutex::new(FftPlanner::new()));

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = PLANNER.lock().unwrap();
    if forward {
        planner.plan_fft_forward(n)
    } else {
        planner.plan_fft_inverse(n)
    }
}

/// In-place unnormalized transform along every axis (row-major layout, last
/// axis fastest). The inverse pass applies the 1/len normalization.
pub(crate) fn fft_all_axes(data: &mut [Complex<f64>], dims: &[usize], forward: bool) {
    let total = data.len();
    debug_assert_eq!(total, dims.iter().product::<usize>());
    for axis in 0..dims.len() {
        let n = dims[axis];
        let fft = plan(n, forward);
        let stride: usize = dims[axis + 1..].iter().product();
        let block = stride * n;
        let mut line = vec![Complex::default(); n];
        for outer in 0..total / block {
            for inner in 0..stride {
                let base = outer * block + inner;
                for (j, slot) in line.iter_mut().enumerate() {
                    *slot = data[base + j * stride];
                }
                fft.process(&mut line);
                for (j, slot) in line.iter().enumerate() {
                    data[base + j * stride] = *slot;
                }
            }
        }
    }
    if !forward {
        let scale = 1.0 / total as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// Forward transform of a real field into the complex mode array.
pub(crate) fn forward(field: &Field) -> Vec<Complex<f64>> {
    let mut hat: Vec<Complex<f64>> = field.data.iter().map(|v| Complex::new(*v, 0.0)).collect();
    fft_all_axes(&mut hat, field.grid.dims(), true);
    hat
}

/// Inverse transform, taking the real part (imaginary residue is roundoff
/// for conjugate-symmetric inputs).
pub(crate) fn inverse_real(mut hat: Vec<Complex<f64>>, dims: &[usize]) -> Vec<f64> {
    fft_all_axes(&mut hat, dims, false);
    hat.into_iter().map(|c| c.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::grid::PeriodicGrid;

    #[test]
    fn round_trip_identity() {
        let grid = PeriodicGrid::new(vec![16, 8], vec![1.0, 1.0]).unwrap();
        let f = Field::from_fn(grid.clone(), |x| (7.0 * x[0]).sin() + x[1] * x[1]).unwrap();
        let hat = forward(&f);
        let back = inverse_real(hat, grid.dims());
        for (a, b) in f.data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn single_mode_lands_in_one_bin() {
        let n = 32;
        let grid = PeriodicGrid::new(vec![n], vec![2.0 * std::f64::consts::PI]).unwrap();
        let f = Field::from_fn(grid, |x| (3.0 * x[0]).cos()).unwrap();
        let hat = forward(&f);
        // cos splits into modes +-3 with amplitude n/2 each.
        for (k, v) in hat.iter().enumerate() {
            let expected = if k == 3 || k == n - 3 { n as f64 / 2.0 } else { 0.0 };
            assert!(
                (v.norm() - expected).abs() < 1e-9,
                "mode {k}: {} vs {expected}",
                v.norm()
            );
        }
    }

    #[test]
    fn constant_field_concentrates_in_dc_mode() {
        let grid = PeriodicGrid::new(vec![64], vec![5.0]).unwrap();
        let f = Field::from_fn(grid, |_| 2.5).unwrap();
        let hat = forward(&f);
        assert!((hat[0].re - 2.5 * 64.0).abs() < 1e-12);
        for v in &hat[1..] {
            assert!(v.norm() < 1e-12);
        }
    }
}
