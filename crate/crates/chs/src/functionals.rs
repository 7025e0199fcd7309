//! System parameters, energies, entropy, dissipation functionals, chemical
//! potentials and the positivity/convexity certificates.
//!
//! The nonlocal energy has two evaluation routes that agree to rounding at
//! the discrete level: a convolution form in tilde coordinates, O(N log N),
//! and the pair-difference double sum over the offset quadrature. The pair
//! form is also the numerically friendly route for first-variation checks
//! because it avoids the large cancellations of the tilde form.

use thiserror::Error;

use crate::nonlocal::{NonlocalOperator, OpError};
use crate::torus_field::{gradient, inner, integrate, laplacian, Field, State};

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("kappa must be positive, got {0}")]
    KappaNotPositive(f64),
    #[error("gamma must be positive, got {0}")]
    GammaNotPositive(f64),
    #[error("theory mode requires kappa > alpha^2 (kappa = {kappa}, alpha = {alpha})")]
    KappaBelowAlphaSquared { kappa: f64, alpha: f64 },
    #[error("eps must be positive, got {0}")]
    EpsNotPositive(f64),
}

/// Coupling constants of the two-species system. `kappa`/`gamma` weigh the
/// first species' self terms, `alpha`/`beta` the cross terms; the second
/// species' self coefficients are fixed to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl SystemParams {
    pub fn validate(&self, theory_mode: bool) -> Result<(), ParamsError> {
        if self.kappa <= 0.0 {
            return Err(ParamsError::KappaNotPositive(self.kappa));
        }
        if self.gamma <= 0.0 {
            return Err(ParamsError::GammaNotPositive(self.gamma));
        }
        if self.eps <= 0.0 {
            return Err(ParamsError::EpsNotPositive(self.eps));
        }
        if theory_mode && self.kappa <= self.alpha * self.alpha {
            return Err(ParamsError::KappaBelowAlphaSquared {
                kappa: self.kappa,
                alpha: self.alpha,
            });
        }
        Ok(())
    }
}

/// Derived coefficients of the rewritten system; always recomputed from the
/// scale they are asked for, never stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TildeCoefficients {
    pub kappa_t: f64,
    pub alpha_t: f64,
    pub c_t: f64,
}

impl TildeCoefficients {
    pub fn new(p: &SystemParams, eps: f64) -> Self {
        let inv = 1.0 / (eps * eps);
        Self {
            kappa_t: p.kappa * inv - p.gamma,
            alpha_t: p.alpha * inv - p.beta,
            c_t: inv - 1.0,
        }
    }
}

fn local_quadratic(s: &State, p: &SystemParams) -> f64 {
    let mut acc = 0.0;
    for i in 0..s.rho.len() {
        let r = s.rho.values()[i];
        let e = s.eta.values()[i];
        acc += 0.5 * p.gamma * r * r + 0.5 * e * e + p.beta * r * e;
    }
    acc * s.grid().cell_volume()
}

/// Nonlocal energy, convolution form in tilde coordinates.
pub fn energy_nonlocal(
    s: &State,
    p: &SystemParams,
    op: &NonlocalOperator,
) -> Result<f64, OpError> {
    let t = TildeCoefficients::new(p, op.eps_eff());
    let conv_rho = op.convolve(&s.rho)?;
    let conv_eta = op.convolve(&s.eta)?;
    let vol = s.grid().cell_volume();
    let mut quad = 0.0;
    let mut conv = 0.0;
    for i in 0..s.rho.len() {
        let r = s.rho.values()[i];
        let e = s.eta.values()[i];
        quad += 0.5 * t.kappa_t * r * r + 0.5 * t.c_t * e * e + t.alpha_t * r * e;
        conv += 0.5 * (t.kappa_t + p.gamma) * conv_rho.values()[i] * r
            + 0.5 * (t.c_t + 1.0) * conv_eta.values()[i] * e
            + (t.alpha_t + p.beta) * conv_eta.values()[i] * r;
    }
    Ok((quad - conv) * vol)
}

/// Nonlocal energy, pair-difference double sum over the offset quadrature.
/// Cross-validates the convolution form and is the route used by
/// first-variation probes.
pub fn energy_nonlocal_pairwise(
    s: &State,
    p: &SystemParams,
    op: &NonlocalOperator,
) -> Result<f64, OpError> {
    let pair_rr = op.pair_diff_inner(&s.rho, &s.rho)?;
    let pair_ee = op.pair_diff_inner(&s.eta, &s.eta)?;
    let pair_re = op.pair_diff_inner(&s.rho, &s.eta)?;
    Ok(0.25 * (p.kappa * pair_rr + pair_ee) + 0.5 * p.alpha * pair_re - local_quadratic(s, p))
}

/// Small-scale limit of the nonlocal energy; the gradient terms carry the
/// kernel's measured diffusion constant so the limit matches either moment
/// normalization.
pub fn energy_local(s: &State, p: &SystemParams, c_eff: f64) -> f64 {
    let grad_rho = gradient(&s.rho);
    let grad_eta = gradient(&s.eta);
    let mut grad_part = 0.0;
    for a in 0..s.grid().dim() {
        let gr = &grad_rho[a];
        let ge = &grad_eta[a];
        for i in 0..gr.len() {
            let dr = gr.values()[i];
            let de = ge.values()[i];
            grad_part += 0.5 * p.kappa * dr * dr + 0.5 * de * de + p.alpha * dr * de;
        }
    }
    grad_part * s.grid().cell_volume() * c_eff - local_quadratic(s, p)
}

/// Boltzmann entropy with the 0 log 0 = 0 convention; the log argument is
/// floored at 1e-300 so states that touch zero stay finite.
pub fn entropy(s: &State) -> f64 {
    let term = |x: f64| x * (x.max(1e-300).ln() - 1.0);
    let mut acc = 0.0;
    for i in 0..s.rho.len() {
        acc += term(s.rho.values()[i]) + term(s.eta.values()[i]);
    }
    acc * s.grid().cell_volume()
}

/// First variations of the nonlocal energy.
pub fn chemical_potentials(
    s: &State,
    p: &SystemParams,
    op: &NonlocalOperator,
) -> Result<(Field, Field), OpError> {
    let b_rho = op.b_eps(&s.rho)?;
    let b_eta = op.b_eps(&s.eta)?;
    let build = |bs: (&Field, f64, &Field, f64), ls: (&Field, f64, &Field, f64)| {
        let mut v = Vec::with_capacity(bs.0.len());
        for i in 0..bs.0.len() {
            v.push(
                bs.1 * bs.0.values()[i] + bs.3 * bs.2.values()[i] + ls.1 * ls.0.values()[i]
                    + ls.3 * ls.2.values()[i],
            );
        }
        Field::from_values(s.grid(), v).expect("finite")
    };
    let mu_rho = build(
        (&b_rho, p.kappa, &b_eta, p.alpha),
        (&s.rho, -p.gamma, &s.eta, -p.beta),
    );
    let mu_eta = build(
        (&b_rho, p.alpha, &b_eta, 1.0),
        (&s.rho, -p.beta, &s.eta, -1.0),
    );
    Ok((mu_rho, mu_eta))
}

/// Local variant: -c_eff Laplacian in place of the nonlocal surrogate.
pub fn chemical_potentials_local(s: &State, p: &SystemParams, c_eff: f64) -> (Field, Field) {
    let lap_rho = laplacian(&s.rho);
    let lap_eta = laplacian(&s.eta);
    let mu_rho = Field::from_values(
        s.grid(),
        (0..s.rho.len())
            .map(|i| {
                -c_eff * (p.kappa * lap_rho.values()[i] + p.alpha * lap_eta.values()[i])
                    - p.gamma * s.rho.values()[i]
                    - p.beta * s.eta.values()[i]
            })
            .collect(),
    )
    .expect("finite");
    let mu_eta = Field::from_values(
        s.grid(),
        (0..s.eta.len())
            .map(|i| {
                -c_eff * (p.alpha * lap_rho.values()[i] + lap_eta.values()[i])
                    - p.beta * s.rho.values()[i]
                    - s.eta.values()[i]
            })
            .collect(),
    )
    .expect("finite");
    (mu_rho, mu_eta)
}

/// Instantaneous integrand of the entropy dissipation: weighted pair terms
/// of the gradients minus the local quadratic gradient terms. Pair terms go
/// through the offset quadrature.
pub fn entropy_dissipation(
    s: &State,
    p: &SystemParams,
    op: &NonlocalOperator,
) -> Result<f64, OpError> {
    let grad_rho = gradient(&s.rho);
    let grad_eta = gradient(&s.eta);
    let mut pair_rr = 0.0;
    let mut pair_ee = 0.0;
    let mut pair_re = 0.0;
    let mut local = 0.0;
    for a in 0..s.grid().dim() {
        pair_rr += op.pair_diff_inner(&grad_rho[a], &grad_rho[a])?;
        pair_ee += op.pair_diff_inner(&grad_eta[a], &grad_eta[a])?;
        pair_re += op.pair_diff_inner(&grad_rho[a], &grad_eta[a])?;
        for i in 0..grad_rho[a].len() {
            let dr = grad_rho[a].values()[i];
            let de = grad_eta[a].values()[i];
            local += p.gamma * dr * dr + de * de + 2.0 * p.beta * dr * de;
        }
    }
    local *= s.grid().cell_volume();
    Ok(0.5 * (p.kappa * pair_rr + pair_ee) + p.alpha * pair_re - local)
}

/// Instantaneous energy dissipation flux: int rho |grad mu_rho|^2 +
/// int eta |grad mu_eta|^2 for the given potentials.
pub fn energy_dissipation_flux(s: &State, mu_rho: &Field, mu_eta: &Field) -> f64 {
    let gr = gradient(mu_rho);
    let ge = gradient(mu_eta);
    let mut acc = 0.0;
    for a in 0..s.grid().dim() {
        for i in 0..s.rho.len() {
            acc += s.rho.values()[i] * gr[a].values()[i] * gr[a].values()[i]
                + s.eta.values()[i] * ge[a].values()[i] * ge[a].values()[i];
        }
    }
    acc * s.grid().cell_volume()
}

/// Admissibility of the shifted interaction matrix [[kappa - delta, alpha],
/// [alpha, 1 - delta]]; its smallest eigenvalue is the coercivity constant
/// of the energy lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityCertificate {
    pub delta: f64,
    pub admissible: bool,
    pub lambda_min: f64,
}

pub fn positivity_certificate(p: &SystemParams, delta: f64) -> PositivityCertificate {
    let a = p.kappa - delta;
    let d = 1.0 - delta;
    let det = a * d - p.alpha * p.alpha;
    let tr = a + d;
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    PositivityCertificate {
        delta,
        admissible: a > 0.0 && det > 0.0,
        lambda_min: 0.5 * (tr - disc),
    }
}

/// Sylvester conditions for convexity of the tilde quadratic form, plus the
/// largest admissible scale found by bisection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityCertificate {
    pub convex: bool,
    pub tilde: TildeCoefficients,
    /// Largest eps at which both conditions hold, to 1e-6; `None` when no
    /// positive eps is admissible.
    pub eps0: Option<f64>,
}

fn sylvester_holds(p: &SystemParams, eps: f64) -> bool {
    let t = TildeCoefficients::new(p, eps);
    t.kappa_t > 0.0 && t.kappa_t * t.c_t - t.alpha_t * t.alpha_t > 0.0
}

pub fn convexity_certificate(p: &SystemParams) -> ConvexityCertificate {
    let tilde = TildeCoefficients::new(p, p.eps);
    let convex = sylvester_holds(p, p.eps);
    let mut lo = 1e-6;
    let eps0 = if !sylvester_holds(p, lo) {
        None
    } else {
        let mut hi = lo;
        let mut steps = 0;
        while sylvester_holds(p, hi) && steps < 64 {
            lo = hi;
            hi *= 2.0;
            steps += 1;
        }
        if steps == 64 {
            Some(lo)
        } else {
            while hi - lo > 1e-6 {
                let mid = 0.5 * (lo + hi);
                if sylvester_holds(p, mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Some(lo)
        }
    };
    ConvexityCertificate {
        convex,
        tilde,
        eps0,
    }
}

/// Per-state record written to diagnostics CSV files; field order is the
/// column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub time: f64,
    pub mass_rho: f64,
    pub mass_eta: f64,
    pub min_rho: f64,
    pub min_eta: f64,
    pub energy_nonlocal: f64,
    pub energy_local: f64,
    pub entropy: f64,
    pub entropy_dissipation: f64,
    pub energy_dissipation_flux: f64,
    pub ponce_rho: f64,
    pub ponce_eta: f64,
}

impl Diagnostics {
    pub fn compute(
        s: &State,
        p: &SystemParams,
        op: &NonlocalOperator,
    ) -> Result<Self, OpError> {
        let (mu_rho, mu_eta) = chemical_potentials(s, p, op)?;
        Ok(Self {
            time: s.time,
            mass_rho: integrate(&s.rho),
            mass_eta: integrate(&s.eta),
            min_rho: s.rho.min(),
            min_eta: s.eta.min(),
            energy_nonlocal: energy_nonlocal(s, p, op)?,
            energy_local: energy_local(s, p, op.c_eff()),
            entropy: entropy(s),
            entropy_dissipation: entropy_dissipation(s, p, op)?,
            energy_dissipation_flux: energy_dissipation_flux(s, &mu_rho, &mu_eta),
            ponce_rho: op.ponce_functional(&s.rho)?,
            ponce_eta: op.ponce_functional(&s.eta)?,
        })
    }

    pub fn csv_header() -> &'static str {
        "time,mass_rho,mass_eta,min_rho,min_eta,energy_nonlocal,energy_local,entropy,\
         entropy_dissipation,energy_dissipation_flux,ponce_rho,ponce_eta"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.time,
            self.mass_rho,
            self.mass_eta,
            self.min_rho,
            self.min_eta,
            self.energy_nonlocal,
            self.energy_local,
            self.entropy,
            self.entropy_dissipation,
            self.energy_dissipation_flux,
            self.ponce_rho,
            self.ponce_eta
        )
    }
}
