//! Sub-solvers of the fixed-point map and the damped Picard driver.
//!
//! One outer step maps `(ũ, ln θ̃)` to
//! 1. `ρ = C(ũ)`: linear continuity equation with artificial diffusion,
//! 2. `u = M(ρ, ũ, θ̃)`: linear momentum system, viscous operator at `θ̃`,
//! 3. `ln θ = Θ(ρ, ũ)`: Kirchhoff-transformed temperature equation.
//!
//! Step 3 is solved implicitly in `θ` by Newton's method (the explicit map
//! `θ̃ ↦ θ` is stiff through the `ζ∂tθ̃` and `δ/θ̃` sources); its fixed points
//! coincide with those of the explicit map [`solve_temperature`].
//!
//! Every equation carries the homotopy parameter `λ` on the terms it scales:
//! inertia, convection, pressure and all sources of the momentum equation;
//! `∂t`/transport terms, sources and boundary flux of the temperature equation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::constitutive::{spow, ConstitutiveParams};
use crate::discretization::{
    time_frequency, Discretization, DomainSpec, FieldKind, PeriodicField,
};
use crate::error::{Error, Result};
use crate::kirchhoff::KirchhoffSpec;

/// Regularization and discretization parameters of the approximate scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApproxParams {
    pub n_t: usize,
    pub n_x: usize,
    pub tau: f64,
    pub zeta: f64,
    pub eps: f64,
    pub delta: f64,
    pub gamma_reg: f64,
    pub b_exp: f64,
    pub lambda: f64,
}

impl ApproxParams {
    /// Default schedule for a given adiabatic exponent.
    pub fn defaults(gamma: f64) -> Self {
        let delta = 1e-2;
        Self {
            n_t: 2,
            n_x: 3,
            tau: 1e-3,
            zeta: delta,
            eps: delta * delta,
            delta,
            gamma_reg: (2.0 * gamma).max(4.0),
            b_exp: 6.0,
            lambda: 1.0,
        }
    }

    pub fn validate(&self, gamma: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_t == 0 || self.n_x == 0 {
            return bad("N_t and N_x must be positive".into());
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return bad(format!("tau = {} must be nonnegative", self.tau));
        }
        if !(self.zeta > 0.0) {
            return bad(format!("zeta = {} must be positive", self.zeta));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta = {} must be positive", self.delta));
        }
        if !(self.eps > 0.0) || self.eps > self.delta * self.delta * (1.0 + 1e-12) {
            return bad(format!("eps = {} must lie in (0, delta²]", self.eps));
        }
        if !(self.gamma_reg >= 2.0 * gamma) {
            return bad(format!("Gamma = {} must be at least 2γ = {}", self.gamma_reg, 2.0 * gamma));
        }
        if !(self.b_exp >= 2.0) {
            return bad(format!("B = {} must be at least 2", self.b_exp));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda = {} must lie in [0, 1]", self.lambda));
        }
        Ok(())
    }
}

/// Iteration controls of the Picard driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Controls {
    /// Damping `ω ∈ (0, 1]`.
    pub omega: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Number of uniform λ-steps; 0 or 1 iterates directly at the target λ.
    pub lambda_steps: usize,
    /// Tolerance of the inner temperature Newton solve.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for Controls {
    fn default() -> Self {
        Self { omega: 0.5, tol: 1e-8, max_iter: 200, lambda_steps: 5, inner_tol: 1e-13, inner_max_iter: 40 }
    }
}

impl Controls {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::Parameter(format!("omega = {} must lie in (0, 1]", self.omega)));
        }
        if !(self.tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::Parameter("tolerances must be positive".into()));
        }
        if self.max_iter == 0 || self.inner_max_iter == 0 {
            return Err(Error::Parameter("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a solve needs: parameters, grid and tabulated data.
#[derive(Debug, Clone)]
pub struct Problem {
    pub constitutive: ConstitutiveParams,
    pub domain: DomainSpec,
    pub approx: ApproxParams,
    pub disc: Discretization,
    pub kirchhoff: KirchhoffSpec,
    /// Nodal forcing components.
    pub forcing: [DMatrix<f64>; 3],
    /// Diagonal of the temperature operator `τ(ω_k²+1) + |k|²` in coefficient order.
    temp_diag: DVector<f64>,
}

impl Problem {
    pub fn new(constitutive: ConstitutiveParams, domain: DomainSpec, approx: ApproxParams) -> Result<Self> {
        constitutive.validate()?;
        domain.validate()?;
        approx.validate(constitutive.gamma)?;
        let disc = crate::discretization::build_bases(&domain, approx.n_t, approx.n_x)?;
        let kirchhoff = KirchhoffSpec::cubic(constitutive.kappa0, approx.delta, approx.b_exp)?;
        let forcing = std::array::from_fn(|c| {
            disc.sample(|t, x| domain.forcing.eval(t, x, domain.period, domain.lengths)[c])
        });
        let nts = disc.spec.n_time(FieldKind::ScalarNeumann);
        let nsp = disc.spec.n_space();
        let temp_diag = DVector::from_fn(nts * nsp, |i, _| {
            let (k, l) = (i / nsp, i % nsp);
            let w = time_frequency(k, domain.period);
            approx.tau * (w * w + 1.0) + disc.lap_s[l]
        });
        Ok(Self { constitutive, domain, approx, disc, kirchhoff, forcing, temp_diag })
    }

    /// Copy with a different homotopy parameter.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut p = self.clone();
        p.approx.lambda = lambda;
        p.approx.validate(p.constitutive.gamma)?;
        Ok(p)
    }

    pub fn mean_density(&self) -> f64 {
        self.domain.mean_density()
    }

    /// Coefficients left undetermined by the temperature operator: for `τ = 0`
    /// the spatial mean of every time mode (pure Neumann problem per mode).
    pub fn null_modes(&self) -> Vec<usize> {
        (0..self.temp_diag.len()).filter(|&i| self.temp_diag[i] == 0.0).collect()
    }

    /// Total pressure `p(ρ,θ) + δ(ρ^Γ + ρ²)`.
    #[inline]
    pub fn total_pressure(&self, rho: f64, theta: f64) -> f64 {
        self.constitutive.pressure_ext(rho, theta)
            + self.approx.delta * (spow(rho, self.approx.gamma_reg) + rho * rho)
    }

    /// `εδ(Γ|ρ|^{Γ−2} + 2)` multiplying `|∇ρ|²` in the temperature sources.
    #[inline]
    pub fn density_dissipation_weight(&self, rho: f64) -> f64 {
        let g = self.approx.gamma_reg;
        self.approx.eps * self.approx.delta * (g * rho.abs().powf(g - 2.0) + 2.0)
    }
}

/// Nodal data of a scalar field and its gradient.
#[derive(Debug, Clone)]
pub struct ScalarNodal {
    pub val: DMatrix<f64>,
    pub grad: [DMatrix<f64>; 3],
}

impl ScalarNodal {
    pub fn new(disc: &Discretization, f: &PeriodicField) -> Self {
        Self { val: disc.values(f, 0), grad: std::array::from_fn(|j| disc.gradient(f, 0, j)) }
    }

    pub fn grad_sq(&self) -> DMatrix<f64> {
        self.grad[0].component_mul(&self.grad[0])
            + self.grad[1].component_mul(&self.grad[1])
            + self.grad[2].component_mul(&self.grad[2])
    }
}

/// Nodal data of a velocity field: components, time derivatives and `∂_j u_c`.
#[derive(Debug, Clone)]
pub struct VelocityNodal {
    pub val: [DMatrix<f64>; 3],
    pub dt: [DMatrix<f64>; 3],
    /// `grad[c][j] = ∂_j u_c`.
    pub grad: [[DMatrix<f64>; 3]; 3],
    pub div: DMatrix<f64>,
}

impl VelocityNodal {
    pub fn new(disc: &Discretization, u: &PeriodicField) -> Self {
        let grad: [[DMatrix<f64>; 3]; 3] =
            std::array::from_fn(|c| std::array::from_fn(|j| disc.gradient(u, c, j)));
        let div = &grad[0][0] + &grad[1][1] + &grad[2][2];
        Self {
            val: std::array::from_fn(|c| disc.values(u, c)),
            dt: std::array::from_fn(|c| disc.time_derivative(u, c)),
            grad,
            div,
        }
    }

    /// `(∇u+∇uᵀ):∇u − ⅔(div u)²`, the μ-part of `S:∇u` per unit viscosity.
    pub fn shear_density(&self) -> DMatrix<f64> {
        let mut out = -(2.0 / 3.0) * self.div.component_mul(&self.div);
        for c in 0..3 {
            for j in 0..3 {
                out += (&self.grad[c][j] + &self.grad[j][c]).component_mul(&self.grad[c][j]);
            }
        }
        out
    }
}

fn sup(v: &DVector<f64>) -> f64 {
    v.amax()
}

fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Solver(format!("non-finite values in {what}")))
    }
}

fn check_field(problem: &Problem, f: &PeriodicField, kind: FieldKind) -> Result<()> {
    if f.basis != problem.disc.spec || f.kind != kind {
        return Err(Error::Contract("field does not live in the problem's basis".into()));
    }
    Ok(())
}

/// Solve `A x = b` by LU and report the mixed relative residual `‖Ax−b‖_∞ / max(1, ‖b‖_∞)`.
fn lu_solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<(DVector<f64>, f64)> {
    let lu = a.clone().lu();
    let mut x = lu.solve(b).ok_or_else(|| Error::Solver(format!("singular {what} system")))?;
    // One step of iterative refinement.
    let r = b - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    check_finite(&x, what)?;
    let res = sup(&(a * &x - b)) / sup(b).max(1.0);
    Ok((x, res))
}

// ---------------------------------------------------------------------------
// Continuity

#[derive(Debug, Clone)]
pub struct ContinuitySolution {
    pub rho: PeriodicField,
    pub residual: f64,
    /// `max_t |∫_Ω ρ(t) − M₀| / M₀`.
    pub mass_error: f64,
}

/// Galerkin matrix of `∂tρ + div(ρũ) − εΔρ + ερ` in the cosine basis.
fn continuity_matrix(problem: &Problem, u: &VelocityNodal) -> DMatrix<f64> {
    let d = &problem.disc;
    let nts = d.ts.ncols();
    let nsp = d.spec.n_space();
    let eps = problem.approx.eps;
    let w = d.wt * d.wx;
    let mut a = DMatrix::zeros(nts * nsp, nts * nsp);
    // ∬ ∂tρ ψ: (Dt ⊗ I) with Dt[k,k'] = ∫ a_k a_k'' (bases are orthonormal).
    let dt = d.ts.transpose() * &d.ts_d * d.wt;
    for k in 0..nts {
        for kp in 0..nts {
            if dt[(k, kp)] != 0.0 {
                for l in 0..nsp {
                    a[(k * nsp + l, kp * nsp + l)] += dt[(k, kp)];
                }
            }
        }
    }
    for k in 0..nts {
        for l in 0..nsp {
            a[(k * nsp + l, k * nsp + l)] += eps * (d.lap_s[l] + 1.0);
        }
    }
    // ∬ div(ρũ) ψ = −∬ ρ ũ·∇ψ.
    for j in 0..3 {
        let v = &u.val[j] * (-w);
        a += Discretization::st_gram(&d.ts, &d.gs[j], &d.ts, &d.bs, &v);
    }
    a
}

/// `ρ = C(ũ)`, optionally with an extra nodal source on the right-hand side.
pub fn solve_continuity(
    problem: &Problem,
    u_tilde: &PeriodicField,
    source: Option<&DMatrix<f64>>,
) -> Result<ContinuitySolution> {
    check_field(problem, u_tilde, FieldKind::Velocity)?;
    let d = &problem.disc;
    let un = VelocityNodal::new(d, u_tilde);
    let a = continuity_matrix(problem, &un);
    let m = problem.mean_density();
    let mut rhs_nodal = DMatrix::from_element(d.n_tq(), d.n_xq(), problem.approx.eps * m);
    if let Some(s) = source {
        d.check_nodal(s)?;
        rhs_nodal += s;
    }
    let b = Discretization::pack(FieldKind::ScalarNeumann, &[d.test_scalar(&rhs_nodal, false, None)]);
    let (x, residual) = lu_solve(&a, &b, "continuity")?;
    let rho = PeriodicField::from_coeffs(FieldKind::ScalarNeumann, d.spec, x)?;
    let m0 = m * d.spec.volume();
    let mass_error = if source.is_none() {
        d.space_integrals(&d.values(&rho, 0)).iter().map(|v| (v - m0).abs()).fold(0.0, f64::max) / m0
    } else {
        0.0
    };
    Ok(ContinuitySolution { rho, residual, mass_error })
}

// ---------------------------------------------------------------------------
// Momentum

#[derive(Debug, Clone)]
pub struct MomentumSolution {
    pub u: PeriodicField,
    /// Residual of the computed `u`.
    pub residual: f64,
    /// Residual of the input `ũ` in the same system (fixed-point diagnostic).
    pub incoming_residual: f64,
}

/// Add a `(k,l)×(k',l')` Gram block into the `(c, c')` component block.
fn scatter_velocity(a: &mut DMatrix<f64>, g: &DMatrix<f64>, c: usize, cp: usize, ntv: usize, nsp: usize) {
    for k in 0..ntv {
        for kp in 0..ntv {
            let src = g.view((k * nsp, kp * nsp), (nsp, nsp));
            let mut dst = a.view_mut((k * 3 * nsp + c * nsp, kp * 3 * nsp + cp * nsp), (nsp, nsp));
            dst += src;
        }
    }
}

/// Galerkin system of the momentum equation at temperature `θ̃`.
fn momentum_system(
    problem: &Problem,
    rho: &ScalarNodal,
    u: &VelocityNodal,
    theta: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = &problem.disc;
    let cp = &problem.constitutive;
    let (eps, lam, zeta) = (problem.approx.eps, problem.approx.lambda, problem.approx.zeta);
    let ntv = d.tv.ncols();
    let nsp = d.spec.n_space();
    let n = ntv * 3 * nsp;
    let w = d.wt * d.wx;
    let wmu = theta.map(|t| w * cp.mu(t));
    let wlam = theta.map(|t| w * (cp.eta(t) - 2.0 / 3.0 * cp.mu(t)));

    let mut a = DMatrix::zeros(n, n);
    let mut lap = Discretization::st_gram(&d.tv, &d.gv[0], &d.tv, &d.gv[0], &wmu);
    for j in 1..3 {
        lap += Discretization::st_gram(&d.tv, &d.gv[j], &d.tv, &d.gv[j], &wmu);
    }
    let wz = DMatrix::from_element(d.n_tq(), d.n_xq(), w * zeta);
    let dtm = Discretization::st_gram(&d.tv, &d.bv, &d.tv_d, &d.bv, &wz);
    for c in 0..3 {
        scatter_velocity(&mut a, &lap, c, c, ntv, nsp);
        scatter_velocity(&mut a, &dtm, c, c, ntv, nsp);
        for c2 in 0..3 {
            // μ ∂_c u_{c2} ∂_{c2} w_c  and  (η−⅔μ) ∂_{c2} u_{c2} ∂_c w_c.
            let g1 = Discretization::st_gram(&d.tv, &d.gv[c2], &d.tv, &d.gv[c], &wmu);
            let g2 = Discretization::st_gram(&d.tv, &d.gv[c], &d.tv, &d.gv[c2], &wlam);
            scatter_velocity(&mut a, &(g1 + g2), c, c2, ntv, nsp);
        }
    }

    let m = problem.mean_density();
    let th = theta;
    let ptot = DMatrix::from_fn(d.n_tq(), d.n_xq(), |i, q| problem.total_pressure(rho.val[(i, q)], th[(i, q)]));
    let blocks: Vec<DMatrix<f64>> = (0..3)
        .map(|c| {
            let mut r = d.test_velocity(&rho.val.component_mul(&u.val[c]), true, None);
            for j in 0..3 {
                let flux = rho.val.component_mul(&u.val[c]).component_mul(&u.val[j]);
                r += d.test_velocity(&flux, false, Some(j));
            }
            r += d.test_velocity(&ptot, false, Some(c));
            let mut src = rho.val.component_mul(&problem.forcing[c]);
            for j in 0..3 {
                src -= eps * rho.grad[j].component_mul(&u.grad[c][j]);
            }
            src += (0.5 * eps) * rho.val.map(|r| m - r).component_mul(&u.val[c]);
            r += d.test_velocity(&src, false, None);
            r * lam
        })
        .collect();
    (a, Discretization::pack(FieldKind::Velocity, &blocks))
}

/// `u = M(ρ, ũ, θ̃)`.
pub fn solve_momentum(
    problem: &Problem,
    rho: &PeriodicField,
    u_tilde: &PeriodicField,
    log_theta_tilde: &PeriodicField,
) -> Result<MomentumSolution> {
    check_field(problem, rho, FieldKind::ScalarNeumann)?;
    check_field(problem, u_tilde, FieldKind::Velocity)?;
    check_field(problem, log_theta_tilde, FieldKind::ScalarNeumann)?;
    let d = &problem.disc;
    let theta = d.values(log_theta_tilde, 0).map(f64::exp);
    let (a, b) = momentum_system(problem, &ScalarNodal::new(d, rho), &VelocityNodal::new(d, u_tilde), &theta);
    let incoming_residual = sup(&(&a * &u_tilde.coeffs - &b)) / sup(&b).max(1.0);
    let (x, residual) = lu_solve(&a, &b, "momentum")?;
    Ok(MomentumSolution { u: PeriodicField::from_coeffs(FieldKind::Velocity, d.spec, x)?, residual, incoming_residual })
}

// ---------------------------------------------------------------------------
// Temperature

/// Extra source for the transformed temperature equation (manufactured tests).
#[derive(Debug, Clone)]
pub struct TemperatureSource {
    /// Interior nodal values, added to the right-hand side.
    pub interior: DMatrix<f64>,
    /// Face-nodal values, added to the boundary flux.
    pub boundary: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct TemperatureSolution {
    pub log_theta: PeriodicField,
    /// Kirchhoff variable `Z` in the scalar basis.
    pub z: PeriodicField,
    pub min_theta: f64,
    /// For `τ = 0`: the compatibility defect `max_k |R_{k,0}|` (0 otherwise).
    pub compat_defect: f64,
}

/// Fixed data of the temperature equation for given `(ρ, ũ)`.
struct TemperatureData<'a> {
    problem: &'a Problem,
    rho: ScalarNodal,
    u: VelocityNodal,
    /// `S:∇ũ` split as `μ(θ)·shear + η(θ)·div²`.
    shear: DMatrix<f64>,
    div_sq: DMatrix<f64>,
    /// `εδ(Γ|ρ|^{Γ−2}+2)|∇ρ|²`.
    rho_diss: DMatrix<f64>,
    extra: Option<DVector<f64>>,
}

impl<'a> TemperatureData<'a> {
    fn new(problem: &'a Problem, rho: &PeriodicField, u: &PeriodicField, source: Option<&TemperatureSource>) -> Result<Self> {
        let d = &problem.disc;
        let rho = ScalarNodal::new(d, rho);
        let u = VelocityNodal::new(d, u);
        let shear = u.shear_density();
        let div_sq = u.div.component_mul(&u.div);
        let rho_diss = rho.val.map(|r| problem.density_dissipation_weight(r)).component_mul(&rho.grad_sq());
        let extra = match source {
            None => None,
            Some(s) => {
                d.check_nodal(&s.interior)?;
                if s.boundary.nrows() != d.n_tq() || s.boundary.ncols() != d.n_bq() {
                    return Err(Error::Contract("boundary source does not live on the face grid".into()));
                }
                let m = d.test_scalar(&s.interior, false, None) + d.test_scalar_boundary(&s.boundary);
                Some(Discretization::pack(FieldKind::ScalarNeumann, &[m]))
            }
        };
        Ok(Self { problem, rho, u, shear, div_sq, rho_diss, extra })
    }

    /// Right-hand side `R(θ)` in coefficient order.
    fn rhs(&self, theta: &DMatrix<f64>, theta_b: &DMatrix<f64>) -> DVector<f64> {
        let p = self.problem;
        let d = &p.disc;
        let cp = &p.constitutive;
        let lam = p.approx.lambda;
        let (zeta, delta, th0) = (p.approx.zeta, p.approx.delta, p.domain.theta0);
        let re = self.rho.val.zip_map(theta, |r, t| cp.energy_density_ext(r, t));
        let mut m = d.test_scalar(&(theta * zeta + &re), true, None);
        for j in 0..3 {
            m += d.test_scalar(&re.component_mul(&self.u.val[j]), false, Some(j));
        }
        let mut src = DMatrix::from_fn(d.n_tq(), d.n_xq(), |i, q| {
            let (r, t) = (self.rho.val[(i, q)], theta[(i, q)]);
            cp.mu(t) * self.shear[(i, q)] + cp.eta(t) * self.div_sq[(i, q)]
                - cp.pressure_ext(r, t) * self.u.div[(i, q)]
                + delta / t
        });
        src += &self.rho_diss;
        m += d.test_scalar(&src, false, None);
        let flux = theta_b.map(|t| cp.d(t) * (th0 - t));
        m += d.test_scalar_boundary(&flux);
        let mut v = Discretization::pack(FieldKind::ScalarNeumann, &[m * lam]);
        if let Some(e) = &self.extra {
            v += e;
        }
        v
    }

    /// `∂R/∂g` for `θ = e^g`, `g` in the scalar basis.
    fn rhs_jacobian(&self, theta: &DMatrix<f64>, theta_b: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.problem;
        let d = &p.disc;
        let cp = &p.constitutive;
        let lam = p.approx.lambda;
        let (zeta, delta, th0) = (p.approx.zeta, p.approx.delta, p.domain.theta0);
        let w = d.wt * d.wx * lam;
        let ret = self.rho.val.zip_map(theta, |r, t| cp.energy_density_dtheta(r, t) * t * w);
        let vt = &ret + theta * (zeta * w);
        let mut jac = Discretization::st_gram(&d.ts_d, &d.bs, &d.ts, &d.bs, &vt);
        for j in 0..3 {
            let v = ret.component_mul(&self.u.val[j]);
            jac += Discretization::st_gram(&d.ts, &d.gs[j], &d.ts, &d.bs, &v);
        }
        let v0 = DMatrix::from_fn(d.n_tq(), d.n_xq(), |i, q| {
            let (r, t) = (self.rho.val[(i, q)], theta[(i, q)]);
            let ds = cp.mu_dtheta(t) * self.shear[(i, q)] + cp.eta_dtheta(t) * self.div_sq[(i, q)]
                - cp.pressure_dtheta(r, t) * self.u.div[(i, q)]
                - delta / (t * t);
            ds * t * w
        });
        jac += Discretization::st_gram(&d.ts, &d.bs, &d.ts, &d.bs, &v0);
        let vb = DMatrix::from_fn(d.n_tq(), d.n_bq(), |i, q| {
            let t = theta_b[(i, q)];
            (cp.d_dtheta(t) * (th0 - t) - cp.d(t)) * t * d.wt * d.wb[q] * lam
        });
        jac += Discretization::st_gram(&d.ts, &d.bb, &d.ts, &d.bb, &vb);
        jac
    }
}

/// Nodal and face values of `θ = e^g`.
fn theta_nodal(d: &Discretization, g: &PeriodicField) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let th = d.values(g, 0).map(f64::exp);
    let tb = d.boundary_trace(g)?.map(f64::exp);
    if !th.iter().chain(tb.iter()).all(|t| t.is_finite() && *t > 0.0) {
        return Err(Error::Solver("temperature overflowed".into()));
    }
    Ok((th, tb))
}

/// Nodal `Φ⁻¹(Z)` followed by L² projection; also returns `1/Φ'` at the nodes.
fn invert_and_project(problem: &Problem, z: &PeriodicField) -> Result<(PeriodicField, DMatrix<f64>)> {
    let d = &problem.disc;
    let zn = d.values(z, 0);
    let mut pre = DMatrix::zeros(zn.nrows(), zn.ncols());
    let mut inv_der = DMatrix::zeros(zn.nrows(), zn.ncols());
    for i in 0..zn.nrows() {
        for q in 0..zn.ncols() {
            let g = problem.kirchhoff.inverse(zn[(i, q)])?;
            pre[(i, q)] = g;
            inv_der[(i, q)] = 1.0 / problem.kirchhoff.derivative(g);
        }
    }
    Ok((d.project_scalar(&pre)?, inv_der))
}

fn z_field(problem: &Problem, r: &DVector<f64>, null_values: &[f64]) -> Result<PeriodicField> {
    let mut z = r.component_div(&problem.temp_diag.map(|v| if v == 0.0 { 1.0 } else { v }));
    for (&i, &v) in problem.null_modes().iter().zip(null_values) {
        z[i] = v;
    }
    PeriodicField::from_coeffs(FieldKind::ScalarNeumann, problem.disc.spec, z)
}

/// Null-mode coefficients of `P Φ(g)`.
fn phi_null_values(problem: &Problem, g: &PeriodicField) -> Vec<f64> {
    let d = &problem.disc;
    let phi = d.values(g, 0).map(|x| problem.kirchhoff.value(x));
    let c = Discretization::pack(FieldKind::ScalarNeumann, &[d.test_scalar(&phi, false, None)]);
    problem.null_modes().iter().map(|&i| c[i]).collect()
}

/// Explicit temperature map `ln θ = P Φ⁻¹(Z(ρ, ũ, θ̃))`.
///
/// For `τ = 0` the spatial means of `Z` are not determined by the equation;
/// they are taken from `Φ(ln θ̃)` and the defect of the compatibility
/// conditions `R_{k,0} = 0` is reported.
pub fn solve_temperature(
    problem: &Problem,
    rho: &PeriodicField,
    u_tilde: &PeriodicField,
    log_theta_tilde: &PeriodicField,
    source: Option<&TemperatureSource>,
) -> Result<TemperatureSolution> {
    check_field(problem, rho, FieldKind::ScalarNeumann)?;
    check_field(problem, u_tilde, FieldKind::Velocity)?;
    check_field(problem, log_theta_tilde, FieldKind::ScalarNeumann)?;
    let d = &problem.disc;
    let data = TemperatureData::new(problem, rho, u_tilde, source)?;
    let (th, tb) = theta_nodal(d, log_theta_tilde)?;
    let r = data.rhs(&th, &tb);
    check_finite(&r, "temperature right-hand side")?;
    let null = problem.null_modes();
    let compat_defect = null.iter().map(|&i| r[i].abs()).fold(0.0, f64::max);
    let z = z_field(problem, &r, &phi_null_values(problem, log_theta_tilde))?;
    let (log_theta, _) = invert_and_project(problem, &z)?;
    let min_theta = d.values(&log_theta, 0).min().exp();
    Ok(TemperatureSolution { log_theta, z, min_theta, compat_defect })
}

#[derive(Debug, Clone)]
pub struct ImplicitTemperature {
    pub log_theta: PeriodicField,
    pub z: PeriodicField,
    /// `‖Θ(seed) − seed‖_∞ / max(1, ‖seed‖_∞)`: fixed-point residual of the seed.
    pub seed_residual: f64,
    /// Final residual in units of the scales used by the stopping test.
    pub residual: f64,
    pub iterations: usize,
}

/// Solve `g = P Φ⁻¹(L⁻¹ R(e^g))` for the log-temperature by damped Newton.
///
/// For `τ = 0` the unknowns are augmented by the spatial means `c_k` of `Z`
/// and the equations `R_{k,0}(g) = 0` (solvability of the pure Neumann
/// problem of every time mode).
pub fn solve_temperature_implicit(
    problem: &Problem,
    rho: &PeriodicField,
    u_tilde: &PeriodicField,
    seed: &PeriodicField,
    source: Option<&TemperatureSource>,
    tol: f64,
    max_iter: usize,
) -> Result<ImplicitTemperature> {
    check_field(problem, seed, FieldKind::ScalarNeumann)?;
    let d = &problem.disc;
    let data = TemperatureData::new(problem, rho, u_tilde, source)?;
    let n = seed.coeffs.len();
    let null = problem.null_modes();
    let na = null.len();
    let ldiag_inv = problem.temp_diag.map(|v| if v == 0.0 { 0.0 } else { 1.0 / v });

    // Residual F(g, c) = P Φ⁻¹(Z) − g (and R_00 when augmented).
    struct Eval {
        f: DVector<f64>,
        z: PeriodicField,
        inv_der: DMatrix<f64>,
        theta: DMatrix<f64>,
        theta_b: DMatrix<f64>,
        /// Scale of the compatibility rows: `max(1, ‖R‖_∞)`.
        r_scale: f64,
    }
    let eval = |g: &PeriodicField, c: &[f64]| -> Result<Eval> {
        let (theta, theta_b) = theta_nodal(d, g)?;
        let r = data.rhs(&theta, &theta_b);
        check_finite(&r, "temperature right-hand side")?;
        let z = z_field(problem, &r, c)?;
        let (proj, inv_der) = invert_and_project(problem, &z)?;
        let mut f = DVector::zeros(n + na);
        f.rows_mut(0, n).copy_from(&(&proj.coeffs - &g.coeffs));
        for (a, &i) in null.iter().enumerate() {
            f[n + a] = r[i];
        }
        Ok(Eval { f, z, inv_der, theta, theta_b, r_scale: r.amax().max(1.0) })
    };
    let scale = |g: &PeriodicField| g.coeffs.amax().max(1.0);
    let norm = |f: &DVector<f64>| f.amax();
    // ‖F‖ in units of the tolerance: g-rows against ‖g‖, compatibility rows against ‖R‖.
    let excess = |e: &Eval, g: &PeriodicField| {
        let main = e.f.rows(0, n).amax() / scale(g);
        let aug = if na > 0 { e.f.rows(n, na).amax() / e.r_scale } else { 0.0 };
        main.max(aug)
    };

    let mut g = seed.clone();
    let mut c = phi_null_values(problem, seed);
    let mut cur = eval(&g, &c)?;
    let seed_residual = norm(&cur.f.rows(0, n).into_owned()) / scale(&g);
    let mut iterations = 0;
    let mut last = f64::INFINITY;
    while excess(&cur, &g) > tol {
        // Round-off plateau just above the tolerance.
        let now = excess(&cur, &g);
        if now <= 100.0 * tol && now > 0.5 * last {
            break;
        }
        last = now;
        if iterations >= max_iter {
            return Err(Error::Solver(format!(
                "temperature Newton did not converge in {max_iter} iterations (residual {:.3e})",
                norm(&cur.f)
            )));
        }
        iterations += 1;
        // J = P diag(1/Φ') Ψ L⁻¹ dR/dg − I.
        let w = d.wt * d.wx;
        let pdp = Discretization::st_gram(&d.ts, &d.bs, &d.ts, &d.bs, &(&cur.inv_der * w));
        let dr = data.rhs_jacobian(&cur.theta, &cur.theta_b);
        let mut ldr = dr.clone();
        for (i, mut row) in ldr.row_iter_mut().enumerate() {
            row *= ldiag_inv[i];
        }
        let mut jac = DMatrix::zeros(n + na, n + na);
        jac.view_mut((0, 0), (n, n)).copy_from(&(&pdp * ldr - DMatrix::identity(n, n)));
        for (a, &i) in null.iter().enumerate() {
            jac.view_mut((0, n + a), (n, 1)).copy_from(&pdp.column(i));
            jac.view_mut((n + a, 0), (1, n)).copy_from(&dr.row(i));
        }
        let step = jac
            .lu()
            .solve(&(-&cur.f))
            .ok_or_else(|| Error::Solver("singular temperature Jacobian".into()))?;
        check_finite(&step, "temperature Newton step")?;
        // Backtracking on ‖F‖_∞.
        let f0 = norm(&cur.f);
        let mut t = 1.0;
        loop {
            let mut gt = g.clone();
            gt.coeffs += step.rows(0, n) * t;
            let ct: Vec<f64> = c.iter().enumerate().map(|(a, v)| v + t * step[n + a]).collect();
            match eval(&gt, &ct) {
                Ok(e) if norm(&e.f) < (1.0 - 1e-4 * t) * f0 || t < 1e-3 => {
                    g = gt;
                    c = ct;
                    cur = e;
                    break;
                }
                _ if t < 1e-3 => {
                    return Err(Error::Solver("temperature line search failed".into()));
                }
                _ => t *= 0.5,
            }
        }
    }
    let residual = excess(&cur, &g);
    // Report the field consistent with the returned g.
    let log_theta = g;
    Ok(ImplicitTemperature { log_theta, z: cur.z, seed_residual, residual, iterations })
}

// ---------------------------------------------------------------------------
// Fixed point

/// One row of the iteration history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub lambda: f64,
    pub iteration: usize,
    /// Combined mixed relative update of `(u, ln θ)`.
    pub update: f64,
    pub res_continuity: f64,
    pub res_momentum: f64,
    pub res_temperature: f64,
    pub min_rho: f64,
}

#[derive(Debug, Clone)]
pub struct ApproxState {
    pub rho: PeriodicField,
    pub u: PeriodicField,
    pub log_theta: PeriodicField,
    pub lambda: f64,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    pub min_rho: f64,
    pub min_theta: f64,
    /// `max_t |∫ρ − M₀| / M₀`.
    pub mass_error: f64,
    /// `min ρ ≥ −10⁻⁶ m`.
    pub density_ok: bool,
}

impl ApproxState {
    pub fn accepted(&self) -> bool {
        self.converged && self.density_ok
    }
}

/// Result of applying the map once.
#[derive(Debug, Clone)]
pub struct MapOutput {
    pub rho: PeriodicField,
    pub u: PeriodicField,
    pub log_theta: PeriodicField,
    pub res_continuity: f64,
    pub res_momentum: f64,
    pub res_temperature: f64,
    pub mass_error: f64,
}

/// `T(ũ, ln θ̃)` with the implicit temperature step, at `problem.approx.lambda`.
pub fn apply_map(problem: &Problem, u_tilde: &PeriodicField, log_theta_tilde: &PeriodicField, controls: &Controls) -> Result<MapOutput> {
    let cont = solve_continuity(problem, u_tilde, None)?;
    let mom = solve_momentum(problem, &cont.rho, u_tilde, log_theta_tilde)?;
    let temp = solve_temperature_implicit(
        problem,
        &cont.rho,
        u_tilde,
        log_theta_tilde,
        None,
        controls.inner_tol,
        controls.inner_max_iter,
    )?;
    Ok(MapOutput {
        rho: cont.rho,
        u: mom.u,
        log_theta: temp.log_theta,
        res_continuity: cont.residual,
        res_momentum: mom.incoming_residual,
        res_temperature: temp.seed_residual,
        mass_error: cont.mass_error,
    })
}

/// `(ρ, u, θ) = (m, 0, 1)`.
pub fn trivial_state(problem: &Problem) -> ApproxState {
    let spec = problem.disc.spec;
    ApproxState {
        rho: PeriodicField::constant(spec, problem.mean_density()),
        u: PeriodicField::zeros(FieldKind::Velocity, spec),
        log_theta: PeriodicField::zeros(FieldKind::ScalarNeumann, spec),
        lambda: 0.0,
        trace: Vec::new(),
        converged: true,
        min_rho: problem.mean_density(),
        min_theta: 1.0,
        mass_error: 0.0,
        density_ok: true,
    }
}

fn rel_update(new: &PeriodicField, old: &PeriodicField) -> f64 {
    (&new.coeffs - &old.coeffs).amax() / old.coeffs.amax().max(1.0)
}

/// Damped Picard iteration with λ-continuation up to `problem.approx.lambda`.
///
/// The returned state is the last iterate whose three residuals and whose
/// update were all within `tol`; on failure the last iterate is returned with
/// `converged = false`.
pub fn fixed_point(problem: &Problem, initial: Option<&ApproxState>, controls: &Controls) -> Result<ApproxState> {
    controls.validate()?;
    let target = problem.approx.lambda;
    let start = initial.cloned().unwrap_or_else(|| trivial_state(problem));
    check_field(problem, &start.u, FieldKind::Velocity)?;
    check_field(problem, &start.log_theta, FieldKind::ScalarNeumann)?;
    let steps = controls.lambda_steps.max(1);
    let mut u = start.u;
    let mut g = start.log_theta;
    let mut trace = Vec::new();
    let m = problem.mean_density();

    for s in 1..=steps {
        let lambda = target * s as f64 / steps as f64;
        let prob = problem.with_lambda(lambda)?;
        let mut done = false;
        for it in 0..controls.max_iter {
            let out = apply_map(&prob, &u, &g, controls)?;
            let update = rel_update(&out.u, &u).max(rel_update(&out.log_theta, &g));
            let min_rho = prob.disc.values(&out.rho, 0).min();
            let rec = IterationRecord {
                lambda,
                iteration: it,
                update,
                res_continuity: out.res_continuity,
                res_momentum: out.res_momentum,
                res_temperature: out.res_temperature,
                min_rho,
            };
            if !update.is_finite() || !min_rho.is_finite() || !out.res_momentum.is_finite() {
                return Err(Error::Solver(format!("NaN detected at lambda = {lambda}, iteration {it}: {rec:?}")));
            }
            trace.push(rec);
            let tol = controls.tol;
            if update <= tol && out.res_continuity <= tol && out.res_momentum <= tol && out.res_temperature <= tol {
                if s == steps {
                    // Accept the incoming iterate: its residuals were just verified.
                    let min_theta = prob.disc.values(&g, 0).min().exp();
                    return Ok(ApproxState {
                        rho: out.rho,
                        u,
                        log_theta: g,
                        lambda,
                        trace,
                        converged: true,
                        min_rho,
                        min_theta,
                        mass_error: out.mass_error,
                        density_ok: min_rho >= -1e-6 * m,
                    });
                }
                done = true;
                break;
            }
            let om = controls.omega;
            u.coeffs = &u.coeffs * (1.0 - om) + &out.u.coeffs * om;
            g.coeffs = &g.coeffs * (1.0 - om) + &out.log_theta.coeffs * om;
        }
        if !done {
            let cont = solve_continuity(&prob, &u, None)?;
            let min_rho = prob.disc.values(&cont.rho, 0).min();
            let min_theta = prob.disc.values(&g, 0).min().exp();
            return Ok(ApproxState {
                rho: cont.rho,
                u,
                log_theta: g,
                lambda,
                trace,
                converged: false,
                min_rho,
                min_theta,
                mass_error: cont.mass_error,
                density_ok: min_rho >= -1e-6 * m,
            });
        }
    }
    unreachable!("the last continuation step always returns")
}
