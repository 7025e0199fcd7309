//! Uniform periodic grids on the flat torus and scalar fields on them.
//!
//! The torus has side length 1 in every axis. Samples live at cell centers
//! `x_i = (i + 1/2) h` with `h = 1/n`; 2D fields are stored row-major with
//! axis 0 slowest, so `(i0, i1)` maps to `values[i0 * n + i1]`.
//!
//! Fields are immutable values after construction and every operation is a
//! pure function, so they can be shared freely across threads.

use rand::Rng;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::fft;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Mass tolerance for states produced by solvers.
pub const MASS_TOL: f64 = 1e-10;
/// Negativity tolerance for states produced by solvers.
pub const NEG_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid dimension must be 1 or 2, got {0}")]
    BadDim(usize),
    #[error("grid size must be a power of two >= 8, got {0}")]
    BadSize(usize),
    #[error("sample count {got} does not match grid ({want})")]
    SampleCount { got: usize, want: usize },
    #[error("field contains a non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("state mass {mass} deviates from 1 beyond {tol}")]
    MassDeviation { mass: f64, tol: f64 },
    #[error("state minimum {min} below -{tol}")]
    Negative { min: f64, tol: f64 },
}

/// Uniform grid on the unit d-torus, d in {1, 2}, with n cells per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodicGrid {
    dim: usize,
    n: usize,
}

impl PeriodicGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self, FieldError> {
        if dim != 1 && dim != 2 {
            return Err(FieldError::BadDim(dim));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(FieldError::BadSize(n));
        }
        Ok(Self { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Cell spacing, exactly 1/n.
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Total number of cells, n^dim.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell volume h^dim (the quadrature weight).
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    /// Center coordinates of the flat index `idx`.
    pub fn center(&self, idx: usize) -> [f64; 2] {
        let h = self.h();
        match self.dim {
            1 => [(idx as f64 + 0.5) * h, 0.0],
            _ => {
                let i0 = idx / self.n;
                let i1 = idx % self.n;
                [(i0 as f64 + 0.5) * h, (i1 as f64 + 0.5) * h]
            }
        }
    }

    /// Displacement of grid node `idx` interpreted with minimal image, i.e.
    /// mapped into [-1/2, 1/2) per axis. Node coordinates are `i * h`, the
    /// natural positions of circular-shift offsets.
    pub fn node_offset(&self, idx: usize) -> [f64; 2] {
        let wrap = |i: usize| {
            let y = i as f64 * self.h();
            if y >= 0.5 {
                y - 1.0
            } else {
                y
            }
        };
        match self.dim {
            1 => [wrap(idx), 0.0],
            _ => [wrap(idx / self.n), wrap(idx % self.n)],
        }
    }

    /// Flat index of the mirror image about x = 1/2 in every axis
    /// (cell i maps to n-1-i).
    pub fn mirror_index(&self, idx: usize) -> usize {
        match self.dim {
            1 => self.n - 1 - idx,
            _ => {
                let i0 = idx / self.n;
                let i1 = idx % self.n;
                (self.n - 1 - i0) * self.n + (self.n - 1 - i1)
            }
        }
    }
}

/// How derivatives are discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiffMethod {
    /// Exact per Fourier mode below Nyquist.
    #[default]
    Spectral,
    /// Second-order centered differences with periodic wrap.
    Centered,
}

/// Scalar samples on a periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

impl Field {
    pub fn from_values(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != grid.len() {
            return Err(FieldError::SampleCount {
                got: values.len(),
                want: grid.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: PeriodicGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Sample a function of the cell-center coordinates.
    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|i| {
                let c = grid.center(i);
                f(&c[..grid.dim()])
            })
            .collect();
        Self { grid, values }
    }

    /// Random real trigonometric polynomial with modes up to `max_mode` per
    /// axis and coefficients uniform in [-amplitude, amplitude].
    pub fn random_band_limited(
        grid: PeriodicGrid,
        max_mode: usize,
        amplitude: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut terms: Vec<(f64, f64, [i64; 2], f64)> = Vec::new();
        let kmax = max_mode as i64;
        match grid.dim() {
            1 => {
                for k in 1..=kmax {
                    let a = rng.gen_range(-amplitude..amplitude);
                    let phase = rng.gen_range(0.0..TWO_PI);
                    terms.push((a, phase, [k, 0], 0.0));
                }
            }
            _ => {
                for k0 in -kmax..=kmax {
                    for k1 in 1..=kmax {
                        let a = rng.gen_range(-amplitude..amplitude);
                        let phase = rng.gen_range(0.0..TWO_PI);
                        terms.push((a, phase, [k0, k1], 0.0));
                    }
                }
            }
        }
        Self::from_fn(grid, |x| {
            let mut v = 0.0;
            for (a, phase, k, _) in &terms {
                let mut arg = *phase;
                for (d, xi) in x.iter().enumerate() {
                    arg += TWO_PI * k[d] as f64 * xi;
                }
                v += a * arg.cos();
            }
            v
        })
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Self, FieldError> {
        check_grids(self, other)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// a*self + b*other.
    pub fn axpy(&self, a: f64, other: &Field, b: f64) -> Result<Self, FieldError> {
        self.zip_with(other, |x, y| a * x + b * y)
    }

    /// Mirror image x -> 1-x in every axis.
    pub fn mirror(&self) -> Self {
        let values = (0..self.values.len())
            .map(|i| self.values[self.grid.mirror_index(i)])
            .collect();
        Self {
            grid: self.grid,
            values,
        }
    }

    /// Modal coefficients (unnormalized DFT of the samples).
    pub fn modes(&self) -> Vec<Complex64> {
        fft::forward(&self.values, self.grid.dim(), self.grid.n())
    }

    pub fn from_modes(grid: PeriodicGrid, modes: &[Complex64]) -> Self {
        Self {
            grid,
            values: fft::inverse_real(modes, grid.dim(), grid.n()),
        }
    }

    /// Resample onto a coarser (or finer) grid of the same dimension by
    /// trigonometric interpolation, exact for content below the coarser
    /// Nyquist frequency. Accounts for the cell-center offset of both grids.
    pub fn resample(&self, target: PeriodicGrid) -> Result<Field, FieldError> {
        if target.dim() != self.grid.dim() {
            return Err(FieldError::GridMismatch);
        }
        if target.n() == self.grid.n() {
            return Ok(self.clone());
        }
        let ns = self.grid.n();
        let nt = target.n();
        let dim = self.grid.dim();
        let src = self.modes();
        let mut dst = vec![Complex64::new(0.0, 0.0); target.len()];
        // centers differ by (h_t - h_s)/2 per axis
        let delta = 0.5 * (target.h() - self.grid.h());
        let norm = (nt as f64 / ns as f64).powi(dim as i32);
        let keep = ns.min(nt) as i64 / 2;
        let copy_mode = |k: i64| -> Option<(usize, usize)> {
            if k.abs() >= keep && k != 0 {
                return None;
            }
            let js = if k >= 0 { k as usize } else { (k + ns as i64) as usize };
            let jt = if k >= 0 { k as usize } else { (k + nt as i64) as usize };
            Some((js, jt))
        };
        match dim {
            1 => {
                for k in -(keep - 1)..keep {
                    if let Some((js, jt)) = copy_mode(k) {
                        let phase = Complex64::from_polar(1.0, TWO_PI * k as f64 * delta);
                        dst[jt] = src[js] * phase * norm;
                    }
                }
            }
            _ => {
                for k0 in -(keep - 1)..keep {
                    for k1 in -(keep - 1)..keep {
                        if let (Some((js0, jt0)), Some((js1, jt1))) =
                            (copy_mode(k0), copy_mode(k1))
                        {
                            let phase = Complex64::from_polar(
                                1.0,
                                TWO_PI * (k0 + k1) as f64 * delta,
                            );
                            dst[jt0 * nt + jt1] = src[js0 * ns + js1] * phase * norm;
                        }
                    }
                }
            }
        }
        Ok(Field::from_modes(target, &dst))
    }
}

fn check_grids(a: &Field, b: &Field) -> Result<(), FieldError> {
    if a.grid != b.grid {
        return Err(FieldError::GridMismatch);
    }
    Ok(())
}

/// Midpoint quadrature: h^dim * sum of samples. Exact for trigonometric
/// polynomials below the Nyquist degree.
pub fn integrate(f: &Field) -> f64 {
    f.values.iter().sum::<f64>() * f.grid.cell_volume()
}

/// L2 inner product <f, g> = integral of f*g.
pub fn inner(f: &Field, g: &Field) -> Result<f64, FieldError> {
    check_grids(f, g)?;
    let s: f64 = f
        .values
        .iter()
        .zip(&g.values)
        .map(|(&a, &b)| a * b)
        .sum();
    Ok(s * f.grid.cell_volume())
}

/// Gradient with the requested discretization; one component per axis.
pub fn gradient_with(f: &Field, method: DiffMethod) -> Vec<Field> {
    match method {
        DiffMethod::Spectral => spectral_derivative(f, false),
        DiffMethod::Centered => centered_gradient(f),
    }
}

/// Spectral gradient (the default).
pub fn gradient(f: &Field) -> Vec<Field> {
    gradient_with(f, DiffMethod::Spectral)
}

/// Spectral Laplacian, symbol -(2 pi k)^2 per mode.
pub fn laplacian(f: &Field) -> Field {
    let grid = f.grid;
    let n = grid.n();
    let mut modes = f.modes();
    match grid.dim() {
        1 => {
            for (j, m) in modes.iter_mut().enumerate() {
                let k = fft::wavenumber(j, n) as f64;
                *m *= -(TWO_PI * k).powi(2);
            }
        }
        _ => {
            for j0 in 0..n {
                let k0 = fft::wavenumber(j0, n) as f64;
                for j1 in 0..n {
                    let k1 = fft::wavenumber(j1, n) as f64;
                    modes[j0 * n + j1] *= -(TWO_PI * TWO_PI) * (k0 * k0 + k1 * k1);
                }
            }
        }
    }
    Field::from_modes(grid, &modes)
}

/// Divergence of a vector field (one component per axis), spectral.
pub fn divergence(components: &[Field]) -> Field {
    let grid = components[0].grid;
    let mut out = Field::zeros(grid);
    for (axis, comp) in components.iter().enumerate() {
        let d = derivative_axis(comp, axis);
        out = out.axpy(1.0, &d, 1.0).expect("same grid");
    }
    out
}

fn spectral_derivative(f: &Field, _second: bool) -> Vec<Field> {
    (0..f.grid.dim()).map(|axis| derivative_axis(f, axis)).collect()
}

/// Spectral partial derivative along one axis; the Nyquist mode is zeroed so
/// the result of differentiating a real field stays real and odd-symmetric.
pub fn derivative_axis(f: &Field, axis: usize) -> Field {
    let grid = f.grid;
    let n = grid.n();
    let mut modes = f.modes();
    let sym = |j: usize| -> Complex64 {
        let k = fft::wavenumber(j, n);
        if k.unsigned_abs() as usize == n / 2 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(0.0, TWO_PI * k as f64)
        }
    };
    match grid.dim() {
        1 => {
            for (j, m) in modes.iter_mut().enumerate() {
                *m *= sym(j);
            }
        }
        _ => {
            for j0 in 0..n {
                for j1 in 0..n {
                    let j = if axis == 0 { j0 } else { j1 };
                    modes[j0 * n + j1] *= sym(j);
                }
            }
        }
    }
    Field::from_modes(grid, &modes)
}

fn centered_gradient(f: &Field) -> Vec<Field> {
    let grid = f.grid;
    let n = grid.n();
    let inv2h = 0.5 / grid.h();
    let mut out = Vec::with_capacity(grid.dim());
    match grid.dim() {
        1 => {
            let v = &f.values;
            let values = (0..n)
                .map(|i| (v[(i + 1) % n] - v[(i + n - 1) % n]) * inv2h)
                .collect();
            out.push(Field { grid, values });
        }
        _ => {
            for axis in 0..2 {
                let v = &f.values;
                let values = (0..grid.len())
                    .map(|idx| {
                        let i0 = idx / n;
                        let i1 = idx % n;
                        let (p, m) = if axis == 0 {
                            (((i0 + 1) % n) * n + i1, ((i0 + n - 1) % n) * n + i1)
                        } else {
                            (i0 * n + (i1 + 1) % n, i0 * n + (i1 + n - 1) % n)
                        };
                        (v[p] - v[m]) * inv2h
                    })
                    .collect();
                out.push(Field { grid, values });
            }
        }
    }
    out
}

/// x -> f(x - offset) by phase-shift interpolation; exact on band-limited
/// fields and an exact circular shift for grid-aligned offsets.
pub fn shift_sample(f: &Field, offset: &[f64]) -> Field {
    let grid = f.grid;
    let n = grid.n();
    let mut modes = f.modes();
    match grid.dim() {
        1 => {
            let s = offset[0];
            for (j, m) in modes.iter_mut().enumerate() {
                let k = fft::wavenumber(j, n) as f64;
                *m *= Complex64::from_polar(1.0, -TWO_PI * k * s);
            }
        }
        _ => {
            let (s0, s1) = (offset[0], *offset.get(1).unwrap_or(&0.0));
            for j0 in 0..n {
                let k0 = fft::wavenumber(j0, n) as f64;
                for j1 in 0..n {
                    let k1 = fft::wavenumber(j1, n) as f64;
                    modes[j0 * n + j1] *=
                        Complex64::from_polar(1.0, -TWO_PI * (k0 * s0 + k1 * s1));
                }
            }
        }
    }
    Field::from_modes(grid, &modes)
}

/// Exact circular shift by whole cells; `shift[axis]` counts cells, positive
/// meaning the same displacement as `shift_sample` with offset `shift * h`.
pub fn shift_cells(f: &Field, shift: &[i64]) -> Field {
    let grid = f.grid;
    let n = grid.n() as i64;
    let wrap = |i: i64| -> usize { (i.rem_euclid(n)) as usize };
    let values = match grid.dim() {
        1 => (0..grid.len())
            .map(|i| f.values[wrap(i as i64 - shift[0])])
            .collect(),
        _ => (0..grid.len())
            .map(|idx| {
                let i0 = (idx / grid.n()) as i64;
                let i1 = (idx % grid.n()) as i64;
                let s1 = *shift.get(1).unwrap_or(&0);
                f.values[wrap(i0 - shift[0]) * grid.n() + wrap(i1 - s1)]
            })
            .collect(),
    };
    Field { grid, values }
}

/// L1, L2 and H1 norms; the seminorm uses the spectral gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub h1_seminorm: f64,
    pub h1: f64,
}

pub fn norms(f: &Field) -> Norms {
    let l1 = integrate(&f.map(f64::abs));
    let l2 = inner(f, f).expect("same grid").sqrt();
    let grad = gradient(f);
    let mut semi_sq = 0.0;
    for g in &grad {
        semi_sq += inner(g, g).expect("same grid");
    }
    let h1_seminorm = semi_sq.sqrt();
    Norms {
        l1,
        l2,
        h1_seminorm,
        h1: (l2 * l2 + semi_sq).sqrt(),
    }
}

/// The pair (rho, eta) at a simulation time.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub rho: Field,
    pub eta: Field,
    pub time: f64,
}

impl State {
    pub fn new(rho: Field, eta: Field, time: f64) -> Result<Self, FieldError> {
        check_grids(&rho, &eta)?;
        Ok(Self { rho, eta, time })
    }

    /// Floor at zero and rescale both species to unit mass.
    pub fn normalized(rho: Field, eta: Field) -> Result<Self, FieldError> {
        check_grids(&rho, &eta)?;
        let fix = |f: &Field| {
            let clipped = f.map(|v| v.max(0.0));
            let mass = integrate(&clipped);
            clipped.map(|v| v / mass)
        };
        Ok(Self {
            rho: fix(&rho),
            eta: fix(&eta),
            time: 0.0,
        })
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.rho.grid()
    }

    /// Solver-facing invariants: unit masses within `MASS_TOL`, minima above
    /// `-NEG_TOL`.
    pub fn validate(&self) -> Result<(), FieldError> {
        for f in [&self.rho, &self.eta] {
            let mass = integrate(f);
            if (mass - 1.0).abs() > MASS_TOL {
                return Err(FieldError::MassDeviation {
                    mass,
                    tol: MASS_TOL,
                });
            }
            let min = f.min();
            if min < -NEG_TOL {
                return Err(FieldError::Negative { min, tol: NEG_TOL });
            }
        }
        Ok(())
    }
}
