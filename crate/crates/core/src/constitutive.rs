//! Pointwise thermodynamic and transport laws of the heat-conducting gas.
//!
//! Pressure, internal energy and entropy follow
//!
//! ```text
//! p = ρ^γ + ρθ + (a/3)θ⁴,   e = ρ^{γ−1}/(γ−1) + c_v θ + aθ⁴/ρ,   s = ln(θ^{c_v}/ρ) + (4a/3)θ³/ρ
//! ```
//!
//! and the transport coefficients are the minimal affine / cubic members of
//! the admissible growth classes.  The solvers work with the sign-extended
//! helpers (`pressure_ext`, `energy_density_ext`) because Galerkin densities
//! may dip slightly below zero between quadrature nodes.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary heat-transfer law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryVariant {
    /// Radiative boundary, `d ~ 1 + θ³`.
    TempDependent,
    /// Constant heat-transfer coefficient.
    TempIndependent,
}

impl BoundaryVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryVariant::TempDependent => "temp_dependent",
            BoundaryVariant::TempIndependent => "temp_independent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "temp_dependent" | "dependent" | "radiation" => Ok(BoundaryVariant::TempDependent),
            "temp_independent" | "independent" | "no_radiation" => {
                Ok(BoundaryVariant::TempIndependent)
            }
            other => Err(Error::Parameter(format!("unknown boundary variant `{other}`"))),
        }
    }
}

/// Material constants of the gas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstitutiveParams {
    pub gamma: f64,
    pub c_v: f64,
    pub a_rad: f64,
    pub mu0: f64,
    pub eta0: f64,
    pub kappa0: f64,
    pub d0: f64,
    pub d_variant: BoundaryVariant,
}

impl Default for ConstitutiveParams {
    fn default() -> Self {
        Self {
            gamma: 5.0 / 3.0,
            c_v: 1.0,
            a_rad: 1.0,
            mu0: 1.0,
            eta0: 0.0,
            kappa0: 1.0,
            d0: 1.0,
            d_variant: BoundaryVariant::TempDependent,
        }
    }
}

/// Signed power `sign(x)|x|^p`.
#[inline]
pub fn spow(x: f64, p: f64) -> f64 {
    if x >= 0.0 {
        x.powf(p)
    } else {
        -(-x).powf(p)
    }
}

impl ConstitutiveParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.gamma, self.c_v, self.a_rad, self.mu0, self.eta0, self.kappa0, self.d0,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Parameter("non-finite constitutive constant".into()));
        }
        if !(self.gamma > 1.0) {
            return Err(Error::Parameter(format!("gamma = {} must exceed 1", self.gamma)));
        }
        if !(self.c_v > 0.0) {
            return Err(Error::Parameter("c_v must be positive".into()));
        }
        if self.a_rad < 0.0 {
            return Err(Error::Parameter("a_rad must be non-negative".into()));
        }
        if !(self.mu0 > 0.0) || !(self.kappa0 > 0.0) || !(self.d0 > 0.0) {
            return Err(Error::Parameter("mu0, kappa0 and d0 must be positive".into()));
        }
        if self.eta0 < 0.0 {
            return Err(Error::Parameter("eta0 must be non-negative".into()));
        }
        Ok(())
    }

    /// Threshold on γ of the existence regime matching the boundary law.
    pub fn regime_threshold(&self) -> f64 {
        match self.d_variant {
            BoundaryVariant::TempDependent => 23.0 / 15.0,
            BoundaryVariant::TempIndependent => 8.0 / 5.0,
        }
    }

    /// Whether γ lies in the proven regime; runs outside it are allowed but flagged.
    pub fn regime_ok(&self) -> bool {
        match self.d_variant {
            BoundaryVariant::TempDependent => 15.0 * self.gamma - 23.0 > 0.0,
            BoundaryVariant::TempIndependent => 5.0 * self.gamma - 8.0 > 0.0,
        }
    }

    /// `p(ρ, θ)` extended to negative ρ by the signed power.
    #[inline]
    pub fn pressure_ext(&self, rho: f64, theta: f64) -> f64 {
        let t2 = theta * theta;
        spow(rho, self.gamma) + rho * theta + self.a_rad / 3.0 * t2 * t2
    }

    /// `∂p/∂θ`.
    #[inline]
    pub fn pressure_dtheta(&self, rho: f64, theta: f64) -> f64 {
        rho + 4.0 / 3.0 * self.a_rad * theta * theta * theta
    }

    /// Energy density `ρe`, defined for every ρ.
    #[inline]
    pub fn energy_density_ext(&self, rho: f64, theta: f64) -> f64 {
        let t2 = theta * theta;
        spow(rho, self.gamma) / (self.gamma - 1.0) + self.c_v * rho * theta + self.a_rad * t2 * t2
    }

    /// `∂(ρe)/∂θ`.
    #[inline]
    pub fn energy_density_dtheta(&self, rho: f64, theta: f64) -> f64 {
        self.c_v * rho + 4.0 * self.a_rad * theta * theta * theta
    }

    /// `∂(ρe)/∂ρ`.
    #[inline]
    pub fn energy_density_drho(&self, rho: f64, theta: f64) -> f64 {
        self.gamma / (self.gamma - 1.0) * spow(rho, self.gamma - 1.0).abs() + self.c_v * theta
    }

    /// Entropy density `ρs`; requires ρ > 0.
    #[inline]
    pub fn entropy_density(&self, rho: f64, theta: f64) -> f64 {
        rho * (self.c_v * theta.ln() - rho.ln()) + 4.0 / 3.0 * self.a_rad * theta.powi(3)
    }

    #[inline]
    pub fn mu(&self, theta: f64) -> f64 {
        self.mu0 * (1.0 + theta)
    }

    #[inline]
    pub fn mu_dtheta(&self, _theta: f64) -> f64 {
        self.mu0
    }

    #[inline]
    pub fn eta(&self, theta: f64) -> f64 {
        self.eta0 * (1.0 + theta)
    }

    #[inline]
    pub fn eta_dtheta(&self, _theta: f64) -> f64 {
        self.eta0
    }

    #[inline]
    pub fn kappa(&self, theta: f64) -> f64 {
        self.kappa0 * (1.0 + theta * theta * theta)
    }

    /// Boundary heat-transfer coefficient `d(θ)`.
    #[inline]
    pub fn d(&self, theta: f64) -> f64 {
        match self.d_variant {
            BoundaryVariant::TempDependent => 1.5 * self.d0 * (1.0 + theta * theta * theta),
            BoundaryVariant::TempIndependent => self.d0,
        }
    }

    #[inline]
    pub fn d_dtheta(&self, theta: f64) -> f64 {
        match self.d_variant {
            BoundaryVariant::TempDependent => 4.5 * self.d0 * theta * theta,
            BoundaryVariant::TempIndependent => 0.0,
        }
    }

    /// Upper growth constant `C` with `d < C(1+θ³)` in the radiative case.
    pub fn d_upper_constant(&self) -> f64 {
        2.0 * self.d0
    }

    /// Upper constant `κ̄` with `κ ≤ κ̄(1+θ³)`.
    pub fn kappa_bar(&self) -> f64 {
        self.kappa0
    }
}

/// Internal equations of state needed by the Gibbs oracle.
pub trait Thermodynamics {
    fn pressure(&self, rho: f64, theta: f64) -> f64;
    fn internal_energy(&self, rho: f64, theta: f64) -> f64;
    fn entropy(&self, rho: f64, theta: f64) -> f64;
}

impl Thermodynamics for ConstitutiveParams {
    fn pressure(&self, rho: f64, theta: f64) -> f64 {
        self.pressure_ext(rho, theta)
    }

    fn internal_energy(&self, rho: f64, theta: f64) -> f64 {
        rho.powf(self.gamma - 1.0) / (self.gamma - 1.0)
            + self.c_v * theta
            + self.a_rad * theta.powi(4) / rho
    }

    fn entropy(&self, rho: f64, theta: f64) -> f64 {
        self.c_v * theta.ln() - rho.ln() + 4.0 / 3.0 * self.a_rad * theta.powi(3) / rho
    }
}

/// Pressure, specific internal energy and specific entropy at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermoEval {
    pub p: f64,
    /// `None` in vacuum.
    pub e: Option<f64>,
    /// `None` in vacuum.
    pub s: Option<f64>,
}

pub fn thermo_eval(rho: f64, theta: f64, params: &ConstitutiveParams) -> Result<ThermoEval> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::Domain(format!("density {rho} must be non-negative")));
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::Domain(format!("temperature {theta} must be positive")));
    }
    let p = params.pressure_ext(rho, theta);
    if rho == 0.0 {
        return Ok(ThermoEval { p, e: None, s: None });
    }
    Ok(ThermoEval {
        p,
        e: Some(params.internal_energy(rho, theta)),
        s: Some(params.entropy(rho, theta)),
    })
}

/// Finite-difference defects of `θDs = De + pD(1/ρ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsResidual {
    pub r_theta: f64,
    pub r_rho: f64,
    /// Sum of magnitudes of the terms entering `r_theta`.
    pub scale_theta: f64,
    /// Sum of magnitudes of the terms entering `r_rho`.
    pub scale_rho: f64,
}

impl GibbsResidual {
    /// Residuals normalised by the size of the terms they balance.
    pub fn relative(&self) -> (f64, f64) {
        (
            self.r_theta.abs() / self.scale_theta.max(f64::MIN_POSITIVE),
            self.r_rho.abs() / self.scale_rho.max(f64::MIN_POSITIVE),
        )
    }
}

/// Central-difference Gibbs residuals.
///
/// `h` is a relative step: the partials in ρ and θ use increments `hρ` and
/// `hθ`, which keeps the truncation error uniform over many decades.
pub fn gibbs_residual<T: Thermodynamics>(
    model: &T,
    rho: f64,
    theta: f64,
    h: f64,
) -> Result<GibbsResidual> {
    if !(h > 0.0) || h >= 1.0 {
        return Err(Error::Parameter(format!("finite-difference step {h} must lie in (0, 1)")));
    }
    if !(rho > 0.0) || !(theta > 0.0) {
        return Err(Error::Domain("Gibbs residual needs rho > 0 and theta > 0".into()));
    }
    let ht = h * theta;
    let hr = h * rho;
    let ds_dt = (model.entropy(rho, theta + ht) - model.entropy(rho, theta - ht)) / (2.0 * ht);
    let de_dt = (model.internal_energy(rho, theta + ht) - model.internal_energy(rho, theta - ht))
        / (2.0 * ht);
    let ds_dr = (model.entropy(rho + hr, theta) - model.entropy(rho - hr, theta)) / (2.0 * hr);
    let de_dr = (model.internal_energy(rho + hr, theta) - model.internal_energy(rho - hr, theta))
        / (2.0 * hr);
    let dv_dr = (1.0 / (rho + hr) - 1.0 / (rho - hr)) / (2.0 * hr);
    let p = model.pressure(rho, theta);
    Ok(GibbsResidual {
        r_theta: theta * ds_dt - de_dt,
        r_rho: theta * ds_dr - de_dr - p * dv_dr,
        scale_theta: (theta * ds_dt).abs() + de_dt.abs(),
        scale_rho: (theta * ds_dr).abs() + de_dr.abs() + (p * dv_dr).abs(),
    })
}

/// Transport coefficients at one temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transport {
    pub mu: f64,
    pub eta: f64,
    pub kappa: f64,
    pub d: f64,
}

/// The coefficients are homogeneous in space, so no position argument is needed.
pub fn transport_eval(theta: f64, params: &ConstitutiveParams) -> Result<Transport> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::Domain(format!("temperature {theta} must be positive")));
    }
    Ok(Transport {
        mu: params.mu(theta),
        eta: params.eta(theta),
        kappa: params.kappa(theta),
        d: params.d(theta),
    })
}

/// Newtonian stress `μ(∇u + ∇uᵀ − ⅔ div u I) + η div u I`.
#[inline]
pub fn stress(mu: f64, eta: f64, grad_u: &Matrix3<f64>) -> Matrix3<f64> {
    let div = grad_u.trace();
    (grad_u + grad_u.transpose()) * mu + Matrix3::identity() * ((eta - 2.0 / 3.0 * mu) * div)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dissipation {
    pub stress: Matrix3<f64>,
    pub sigma_density: f64,
}

/// Stress and entropy production `(1/θ)(S:∇u + κ|∇θ|²/θ)`.
pub fn dissipation_eval(
    theta: f64,
    grad_u: &Matrix3<f64>,
    grad_theta: &Vector3<f64>,
    params: &ConstitutiveParams,
) -> Result<Dissipation> {
    let tr = transport_eval(theta, params)?;
    let s = stress(tr.mu, tr.eta, grad_u);
    let viscous = s.component_mul(grad_u).sum();
    let sigma = (viscous + tr.kappa * grad_theta.norm_squared() / theta) / theta;
    Ok(Dissipation { stress: s, sigma_density: sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p_default() -> ConstitutiveParams {
        ConstitutiveParams { a_rad: 3.0, ..Default::default() }
    }

    #[test]
    fn point_values() {
        let t = thermo_eval(1.0, 1.0, &p_default()).unwrap();
        assert!((t.p - 3.0).abs() < 1e-14);
        assert!((t.e.unwrap() - 5.5).abs() < 1e-14);
        assert!((t.s.unwrap() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn vacuum_keeps_only_radiation_pressure() {
        let t = thermo_eval(0.0, 2.0, &p_default()).unwrap();
        assert!((t.p - 16.0).abs() < 1e-13);
        assert!(t.e.is_none() && t.s.is_none());
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(thermo_eval(-1.0, 1.0, &p_default()), Err(Error::Domain(_))));
        assert!(matches!(thermo_eval(1.0, 0.0, &p_default()), Err(Error::Domain(_))));
        assert!(matches!(transport_eval(-1.0, &p_default()), Err(Error::Domain(_))));
        assert!(matches!(
            gibbs_residual(&p_default(), 1.0, 1.0, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn gibbs_small_at_sample_points() {
        for &(r, t) in &[(1.0, 1.0), (2.0, 0.5)] {
            let g = gibbs_residual(&p_default(), r, t, 1e-4).unwrap();
            assert!(g.r_theta.abs() <= 1e-6 && g.r_rho.abs() <= 1e-6, "{g:?}");
        }
    }

    struct Shifted(ConstitutiveParams);
    impl Thermodynamics for Shifted {
        fn pressure(&self, r: f64, t: f64) -> f64 {
            self.0.pressure(r, t) + 1.0
        }
        fn internal_energy(&self, r: f64, t: f64) -> f64 {
            self.0.internal_energy(r, t)
        }
        fn entropy(&self, r: f64, t: f64) -> f64 {
            self.0.entropy(r, t)
        }
    }

    #[test]
    fn pressure_offset_shows_up_in_density_residual() {
        let g = gibbs_residual(&Shifted(p_default()), 1.0, 1.0, 1e-4).unwrap();
        assert!((g.r_rho.abs() - 1.0).abs() <= 1e-4);
        assert!(g.r_theta.abs() <= 1e-6);
    }

    #[test]
    fn transport_defaults() {
        let p = p_default();
        let tr = transport_eval(1.0, &p).unwrap();
        assert_eq!((tr.mu, tr.kappa, tr.d), (2.0, 2.0, 3.0));
        assert!(2.0 < tr.d && tr.d < p.d_upper_constant() * 2.0);
        let low = transport_eval(1e-12, &p).unwrap();
        assert!((low.mu - p.mu0).abs() < 1e-11 && (low.kappa - p.kappa0).abs() < 1e-11);
        let q = ConstitutiveParams { d_variant: BoundaryVariant::TempIndependent, ..p };
        assert_eq!(transport_eval(7.0, &q).unwrap().d, q.d0);
    }

    fn contract(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += a[(i, j)] * b[(i, j)];
            }
        }
        s
    }

    #[test]
    fn dissipation_examples() {
        let p = p_default();
        let z = dissipation_eval(1.0, &Matrix3::zeros(), &Vector3::zeros(), &p).unwrap();
        assert_eq!(z.sigma_density, 0.0);
        assert_eq!(z.stress, Matrix3::zeros());
        let dil = dissipation_eval(1.0, &Matrix3::identity(), &Vector3::zeros(), &p).unwrap();
        assert!(dil.stress.norm() < 1e-14 && dil.sigma_density.abs() < 1e-14);
        // simple shear: S = μ(E12 + E21), S:∇u = μ = 2
        let mut g = Matrix3::zeros();
        g[(0, 1)] = 1.0;
        let sh = dissipation_eval(1.0, &g, &Vector3::zeros(), &p).unwrap();
        let mut brute = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                brute[(i, j)] = 2.0 * (g[(i, j)] + g[(j, i)]);
            }
        }
        assert!((sh.stress - brute).norm() < 1e-14);
        assert!((contract(&brute, &g) - 2.0).abs() < 1e-14);
        assert!((sh.sigma_density - 2.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn gibbs_vanishes_over_decades(lr in -3.0f64..3.0, lt in -3.0f64..3.0) {
            let (r, t) = (10f64.powf(lr), 10f64.powf(lt));
            let g = gibbs_residual(&p_default(), r, t, 1e-5).unwrap();
            let (a, b) = g.relative();
            prop_assert!(a <= 1e-6 && b <= 1e-6, "{:?}", g);
        }

        #[test]
        fn sigma_is_nonnegative(
            gu in proptest::collection::vec(-10.0f64..10.0, 9),
            gt in proptest::collection::vec(-10.0f64..10.0, 3),
            theta in 1e-3f64..1e3,
            eta0 in 0.0f64..5.0,
        ) {
            let p = ConstitutiveParams { eta0, ..p_default() };
            let g = Matrix3::from_row_slice(&gu);
            let d = dissipation_eval(theta, &g, &Vector3::from_row_slice(&gt), &p).unwrap();
            prop_assert!(d.sigma_density >= -1e-12 * (1.0 + g.norm_squared()) * p.mu(theta) / theta);
        }

        #[test]
        fn monotone_in_temperature(r in 1e-3f64..1e3, t in 1e-3f64..1e2, dt in 1e-6f64..1.0) {
            let p = p_default();
            let a = thermo_eval(r, t, &p).unwrap();
            let b = thermo_eval(r, t + dt, &p).unwrap();
            prop_assert!(b.p >= a.p && b.e.unwrap() >= a.e.unwrap());
        }

        #[test]
        fn transport_bounds(t in 1e-4f64..1e3) {
            let p = p_default();
            let tr = transport_eval(t, &p).unwrap();
            let c3 = 1.0 + t * t * t;
            prop_assert!(p.mu0 * (1.0 + t) <= tr.mu);
            prop_assert!(p.kappa0 * c3 <= tr.kappa && tr.kappa <= p.kappa_bar() * c3);
            prop_assert!(p.d0 * c3 < tr.d && tr.d < p.d_upper_constant() * c3);
        }
    }
}
