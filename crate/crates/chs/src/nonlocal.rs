//! The nonlocal operators built from a certified kernel: fast periodic
//! convolution, the Laplacian surrogate B, the pair-difference operator S
//! and the squared-difference (Ponce) functional.
//!
//! All of them share one discretization: the kernel's nonzero samples at
//! grid-node offsets double as the offset quadrature for pair-space
//! integrals, so the convolution route and the offset-streaming route agree
//! to rounding, not merely to quadrature error. Pair fields are only
//! materialized when small; contractions stream over offsets in a fixed
//! order so results are bit-reproducible.

use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::fft;
use crate::mollifier::DiscreteKernel;
use crate::torus_field::{inner, Field, PeriodicGrid, TWO_PI};

/// Materialization budget for pair fields, in f64 samples.
const PAIR_BUDGET: usize = 1 << 23;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("field grid does not match the operator grid")]
    GridMismatch,
    #[error("pair field of {samples} samples exceeds the materialization budget; stream instead")]
    PairTooLarge { samples: usize },
    #[error("mode {0:?} is at or above the Nyquist frequency")]
    ModeAboveNyquist(Vec<i64>),
}

/// Precomputed modal multipliers of the kernel (transform of samples times
/// the cell volume), i.e. the discrete Fourier symbol of `omega *`.
#[derive(Debug, Clone)]
pub struct ConvolutionPlan {
    grid: PeriodicGrid,
    multipliers: Vec<Complex64>,
}

impl ConvolutionPlan {
    pub fn new(kernel: &DiscreteKernel) -> Self {
        let grid = kernel.grid();
        let mut multipliers = fft::forward(kernel.values().values(), grid.dim(), grid.n());
        let vol = grid.cell_volume();
        for m in multipliers.iter_mut() {
            *m *= vol;
        }
        Self { grid, multipliers }
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    /// Symbol of the convolution at flat mode index `idx`; real up to
    /// rounding by even symmetry of the kernel.
    pub fn multiplier(&self, idx: usize) -> Complex64 {
        self.multipliers[idx]
    }

    pub fn apply(&self, f: &Field) -> Result<Field, OpError> {
        if f.grid() != self.grid {
            return Err(OpError::GridMismatch);
        }
        let mut modes = f.modes();
        for (m, w) in modes.iter_mut().zip(&self.multipliers) {
            *m *= w;
        }
        Ok(Field::from_modes(self.grid, &modes))
    }
}

/// One offset cell of the pair quadrature: the circular shift in cells, the
/// minimal-image displacement, the kernel sample and its quadrature weight
/// `omega(y) h^dim`.
#[derive(Debug, Clone, Copy)]
pub struct OffsetEntry {
    pub shift: [i64; 2],
    pub y: [f64; 2],
    pub omega: f64,
    pub weight: f64,
}

/// Grid offsets inside the kernel support with their quadrature weights;
/// the discrete counterpart of the y-integral in pair-space functionals.
#[derive(Debug, Clone)]
pub struct OffsetQuadrature {
    grid: PeriodicGrid,
    entries: Vec<OffsetEntry>,
}

impl OffsetQuadrature {
    pub fn new(kernel: &DiscreteKernel) -> Self {
        let grid = kernel.grid();
        let n = grid.n() as i64;
        let vol = grid.cell_volume();
        let mut entries = Vec::new();
        for (idx, &omega) in kernel.values().values().iter().enumerate() {
            if omega == 0.0 {
                continue;
            }
            let y = grid.node_offset(idx);
            let shift = match grid.dim() {
                1 => {
                    let i = idx as i64;
                    [if i >= n / 2 { i - n } else { i }, 0]
                }
                _ => {
                    let i0 = (idx / grid.n()) as i64;
                    let i1 = (idx % grid.n()) as i64;
                    [
                        if i0 >= n / 2 { i0 - n } else { i0 },
                        if i1 >= n / 2 { i1 - n } else { i1 },
                    ]
                }
            };
            entries.push(OffsetEntry {
                shift,
                y,
                omega,
                weight: omega * vol,
            });
        }
        Self { grid, entries }
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    pub fn entries(&self) -> &[OffsetEntry] {
        &self.entries
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }
}

/// Kernel plus the derived machinery, built once and shared.
#[derive(Debug, Clone)]
pub struct NonlocalOperator {
    kernel: DiscreteKernel,
    plan: ConvolutionPlan,
    quad: OffsetQuadrature,
}

impl NonlocalOperator {
    pub fn new(kernel: DiscreteKernel) -> Self {
        let plan = ConvolutionPlan::new(&kernel);
        let quad = OffsetQuadrature::new(&kernel);
        Self { kernel, plan, quad }
    }

    pub fn kernel(&self) -> &DiscreteKernel {
        &self.kernel
    }

    pub fn plan(&self) -> &ConvolutionPlan {
        &self.plan
    }

    pub fn quadrature(&self) -> &OffsetQuadrature {
        &self.quad
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.kernel.grid()
    }

    pub fn eps(&self) -> f64 {
        self.kernel.eps()
    }

    pub fn eps_eff(&self) -> f64 {
        self.kernel.eps_eff()
    }

    pub fn c_eff(&self) -> f64 {
        self.kernel.c_eff()
    }

    /// omega * f by fast transform, O(N log N).
    pub fn convolve(&self, f: &Field) -> Result<Field, OpError> {
        self.plan.apply(f)
    }

    /// B[f] = (f - omega * f) / eps_eff^2; self-adjoint, annihilates
    /// constants.
    pub fn b_eps(&self, f: &Field) -> Result<Field, OpError> {
        let smoothed = self.convolve(f)?;
        let inv = 1.0 / (self.eps_eff() * self.eps_eff());
        f.axpy(inv, &smoothed, -inv).map_err(|_| OpError::GridMismatch)
    }

    /// Modal symbol of B at flat mode index: (1 - w_hat) / eps_eff^2.
    pub fn b_mode_symbol(&self, idx: usize) -> f64 {
        (1.0 - self.plan.multipliers[idx].re) / (self.eps_eff() * self.eps_eff())
    }

    /// Per-mode diffusion constant (1 - w_hat(2 pi k)) / (eps^2 |2 pi k|^2),
    /// the measured normalization of the surrogate operator. Zero for the
    /// constant mode by convention.
    pub fn symbol_probe(&self, mode: &[i64]) -> Result<f64, OpError> {
        let grid = self.grid();
        let n = grid.n() as i64;
        let mut q2 = 0.0;
        let mut idx = 0usize;
        for (axis, &k) in mode.iter().enumerate() {
            if k.abs() >= n / 2 {
                return Err(OpError::ModeAboveNyquist(mode.to_vec()));
            }
            let j = k.rem_euclid(n) as usize;
            idx = if axis == 0 { j } else { idx * grid.n() + j };
            q2 += (TWO_PI * k as f64).powi(2);
        }
        if grid.dim() == 2 && mode.len() == 1 {
            idx *= grid.n();
        }
        if q2 == 0.0 {
            return Ok(0.0);
        }
        Ok(self.b_mode_symbol(idx) / q2)
    }

    /// One offset slice of the pair operator:
    /// sqrt(omega(y_j)) / (sqrt(2) eps) (f(x - y_j) - f(x)).
    pub fn s_eps_slice(&self, f: &Field, entry: &OffsetEntry) -> Result<Field, OpError> {
        if f.grid() != self.grid() {
            return Err(OpError::GridMismatch);
        }
        let shifted = crate::torus_field::shift_cells(f, &entry.shift[..f.grid().dim()]);
        let c = entry.omega.sqrt() / (std::f64::consts::SQRT_2 * self.eps_eff());
        shifted.axpy(c, f, -c).map_err(|_| OpError::GridMismatch)
    }

    /// Fully materialized pair field, one slice per offset. Refused beyond a
    /// memory budget; use the streaming contractions instead.
    pub fn s_eps(&self, f: &Field) -> Result<Vec<Field>, OpError> {
        let samples = self.quad.entries.len() * f.len();
        if samples > PAIR_BUDGET {
            return Err(OpError::PairTooLarge { samples });
        }
        self.quad
            .entries
            .iter()
            .map(|e| self.s_eps_slice(f, e))
            .collect()
    }

    /// Pair-space inner product <S f, S g> with measure dx dy, streamed over
    /// offsets in fixed order.
    pub fn s_pair_inner(&self, f: &Field, g: &Field) -> Result<f64, OpError> {
        if f.grid() != self.grid() || g.grid() != self.grid() {
            return Err(OpError::GridMismatch);
        }
        let vol = self.grid().cell_volume();
        let inv = 1.0 / (2.0 * self.eps_eff() * self.eps_eff());
        let mut acc = 0.0;
        for e in &self.quad.entries {
            let fs = crate::torus_field::shift_cells(f, &e.shift[..f.grid().dim()]);
            let gs = crate::torus_field::shift_cells(g, &e.shift[..g.grid().dim()]);
            let mut s = 0.0;
            for i in 0..f.len() {
                s += (fs.values()[i] - f.values()[i]) * (gs.values()[i] - g.values()[i]);
            }
            acc += e.weight * inv * s * vol;
        }
        Ok(acc)
    }

    /// Graded squared-difference functional
    /// int int |f(x) - f(x-y)|^2 / eps^2 omega(y) dx dy = 2 <S f, S f>.
    pub fn ponce_functional(&self, f: &Field) -> Result<f64, OpError> {
        Ok(2.0 * self.s_pair_inner(f, f)?)
    }

    /// Cross pair term int int omega/eps^2 (f(x)-f(x-y))(g(x)-g(x-y)),
    /// equal to 2 <S f, S g>.
    pub fn pair_diff_inner(&self, f: &Field, g: &Field) -> Result<f64, OpError> {
        Ok(2.0 * self.s_pair_inner(f, g)?)
    }
}

/// Direct O(N^2) circular convolution, the summation oracle for the fast
/// path. Slow on purpose; test and audit use only.
pub fn convolve_direct(kernel: &DiscreteKernel, f: &Field) -> Result<Field, OpError> {
    if f.grid() != kernel.grid() {
        return Err(OpError::GridMismatch);
    }
    let grid = f.grid();
    let n = grid.n();
    let vol = grid.cell_volume();
    let k = kernel.values().values();
    let v = f.values();
    let values: Vec<f64> = match grid.dim() {
        1 => (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    s += k[j] * v[(i + n - j) % n];
                }
                s * vol
            })
            .collect(),
        _ => (0..grid.len())
            .map(|idx| {
                let i0 = idx / n;
                let i1 = idx % n;
                let mut s = 0.0;
                for j0 in 0..n {
                    let r0 = (i0 + n - j0) % n;
                    for j1 in 0..n {
                        s += k[j0 * n + j1] * v[r0 * n + (i1 + n - j1) % n];
                    }
                }
                s * vol
            })
            .collect(),
    };
    Ok(Field::from_values(grid, values).expect("finite"))
}

/// <B f, g> evaluated the adjoint way round is the same number; convenience
/// used by the audit surface.
pub fn b_inner(op: &NonlocalOperator, f: &Field, g: &Field) -> Result<f64, OpError> {
    let bf = op.b_eps(f)?;
    inner(&bf, g).map_err(|_| OpError::GridMismatch)
}
