//! Fast transforms on periodic grids.
//!
//! Thin wrapper around `rustfft` providing cached plans, real-input
//! forward/inverse transforms and the signed wavenumber layout used by the
//! spectral calculus. Grids are power-of-two sized so every transform hits
//! the radix-2 path.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

struct PlanPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plan_cache() -> &'static Mutex<HashMap<usize, Arc<PlanPair>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<PlanPair>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn plans(n: usize) -> Arc<PlanPair> {
    let mut cache = plan_cache().lock().unwrap();
    cache
        .entry(n)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Arc::new(PlanPair {
                forward: planner.plan_fft_forward(n),
                inverse: planner.plan_fft_inverse(n),
            })
        })
        .clone()
}

/// Signed wavenumber of DFT bin `j` on an `n`-point grid: `0, 1, ..., n/2, -(n/2-1), ..., -1`.
/// The Nyquist bin `j = n/2` maps to `+n/2`.
pub fn wavenumber(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Forward DFT of real samples, unnormalized (sum convention).
pub fn forward(values: &[f64], dim: usize, n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut buf, dim, n, true);
    buf
}

/// Inverse DFT returning the real part, normalized by 1/N.
pub fn inverse_real(modes: &[Complex64], dim: usize, n: usize) -> Vec<f64> {
    let mut buf = modes.to_vec();
    transform(&mut buf, dim, n, false);
    let norm = 1.0 / buf.len() as f64;
    buf.iter().map(|c| c.re * norm).collect()
}

fn transform(buf: &mut [Complex64], dim: usize, n: usize, fwd: bool) {
    let pair = plans(n);
    let fft = if fwd { &pair.forward } else { &pair.inverse };
    match dim {
        1 => {
            debug_assert_eq!(buf.len(), n);
            fft.process(buf);
        }
        2 => {
            debug_assert_eq!(buf.len(), n * n);
            // rows (contiguous), then columns via transpose
            for row in buf.chunks_exact_mut(n) {
                fft.process(row);
            }
            transpose_square(buf, n);
            for row in buf.chunks_exact_mut(n) {
                fft.process(row);
            }
            transpose_square(buf, n);
        }
        _ => unreachable!("grid dim is 1 or 2"),
    }
}

fn transpose_square(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_1d() {
        let n = 16;
        let values: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let modes = forward(&values, 1, n);
        let back = inverse_real(&modes, 1, n);
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn roundtrip_2d() {
        let n = 8;
        let values: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let modes = forward(&values, 2, n);
        let back = inverse_real(&modes, 2, n);
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn pure_mode_lands_in_one_bin() {
        let n = 32;
        let values: Vec<f64> = (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64;
                (2.0 * std::f64::consts::PI * 3.0 * x).cos()
            })
            .collect();
        let modes = forward(&values, 1, n);
        // cos splits into bins 3 and n-3 with magnitude n/2 each (phase from
        // the cell-center offset).
        assert!((modes[3].norm() - n as f64 / 2.0).abs() < 1e-10);
        assert!((modes[n - 3].norm() - n as f64 / 2.0).abs() < 1e-10);
        for (j, m) in modes.iter().enumerate() {
            if j != 3 && j != n - 3 {
                assert!(m.norm() < 1e-10, "bin {j} should be empty");
            }
        }
    }

    #[test]
    fn wavenumber_layout() {
        assert_eq!(wavenumber(0, 8), 0);
        assert_eq!(wavenumber(3, 8), 3);
        assert_eq!(wavenumber(4, 8), 4);
        assert_eq!(wavenumber(5, 8), -3);
        assert_eq!(wavenumber(7, 8), -1);
    }
}
