//! Exponent arithmetic of the a-priori estimates.
//!
//! The pressure estimate tests the momentum equation with
//! `B[ρ^{γ(a−1)} − mean]`, and the admissible Bogovskii exponents `a > 1`
//! form an open window whose upper end is the minimum of three terms.
//! Every inequality of the estimate chain is evaluated here on closed forms,
//! strictly and without tolerance; equality at a boundary is *not* admissible.

use serde::{Deserialize, Serialize};

use crate::constitutive::BoundaryVariant;

/// Which estimate chain applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExponentCase {
    /// Radiative boundary heat transfer.
    Radiation,
    /// Temperature-independent boundary coefficient.
    NoRadiation,
}

impl ExponentCase {
    pub fn from_variant(v: BoundaryVariant) -> Self {
        match v {
            BoundaryVariant::TempDependent => ExponentCase::Radiation,
            BoundaryVariant::TempIndependent => ExponentCase::NoRadiation,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ExponentCase::Radiation => "radiation",
            ExponentCase::NoRadiation => "no_radiation",
        }
    }
}

/// The term attaining the minimum of the window's upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BindingTerm {
    /// `(5γ−3)/(3γ)`, from `p_i < γ`.
    Interpolation,
    /// `1 + (−5+√D_A)/(30γ)`, from the convective quadratic.
    Discriminant,
    /// `(γ+1)/γ`, from `γ(a−1) ≤ 1`.
    Renormalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentWindow {
    pub gamma: f64,
    pub case: ExponentCase,
    /// Exclusive lower end, always 1.
    pub a_low: f64,
    /// Exclusive upper end; `None` when the window is empty (or, in the
    /// no-radiation case, where `a` is fixed rather than ranging).
    pub a_high: Option<f64>,
    pub binding_term: Option<BindingTerm>,
    pub a_chosen: Option<f64>,
    pub admissible: bool,
    /// γ ≥ 2 in the no-radiation case lies outside the covered range.
    pub out_of_scope: bool,
}

impl ExponentWindow {
    pub fn is_empty(&self) -> bool {
        !self.admissible
    }

    pub fn width(&self) -> f64 {
        match self.a_high {
            Some(h) => h - self.a_low,
            None => 0.0,
        }
    }

    pub fn contains(&self, a: f64) -> bool {
        match (self.case, self.a_high) {
            (ExponentCase::Radiation, Some(h)) => a > self.a_low && a < h,
            (ExponentCase::NoRadiation, _) => {
                self.admissible && self.a_chosen.is_some_and(|c| (a - c).abs() <= 1e-12 * c)
            }
            _ => false,
        }
    }
}

/// `D_A = 5(180γ² − 456γ + 281)`.
pub fn discriminant(gamma: f64) -> f64 {
    5.0 * (180.0 * gamma * gamma - 456.0 * gamma + 281.0)
}

/// `(5γ−3)/(3γ)`: the interpolation bound, and the fixed exponent without radiation.
pub fn interpolation_bound(gamma: f64) -> f64 {
    (5.0 * gamma - 3.0) / (3.0 * gamma)
}

/// `1 + (−5+√D_A)/(30γ)`, evaluated through the factorisation
/// `D_A − 25 = 60(15γ−23)(γ−1)` so that the sign near γ = 23/15 is exact.
pub fn discriminant_bound(gamma: f64) -> f64 {
    let num = 2.0 * (15.0 * gamma - 23.0) * (gamma - 1.0);
    1.0 + num / ((discriminant(gamma).max(0.0).sqrt() + 5.0) * gamma)
}

/// `(γ+1)/γ`.
pub fn renormalization_bound(gamma: f64) -> f64 {
    (gamma + 1.0) / gamma
}

pub fn a_window(gamma: f64, case: ExponentCase) -> ExponentWindow {
    match case {
        ExponentCase::Radiation => {
            let terms = [
                (BindingTerm::Interpolation, interpolation_bound(gamma)),
                (BindingTerm::Discriminant, discriminant_bound(gamma)),
                (BindingTerm::Renormalization, renormalization_bound(gamma)),
            ];
            let (binding, high) = terms
                .iter()
                .copied()
                .fold((terms[0].0, f64::INFINITY), |acc, t| if t.1 < acc.1 { t } else { acc });
            // Nonempty iff γ > 23/15: the discriminant term exceeds 1 exactly
            // then, and the other two exceed 1 for every γ > 3/2.
            let admissible = gamma > 1.0 && 15.0 * gamma - 23.0 > 0.0 && high > 1.0;
            ExponentWindow {
                gamma,
                case,
                a_low: 1.0,
                a_high: admissible.then_some(high),
                binding_term: admissible.then_some(binding),
                a_chosen: admissible.then_some(0.5 * (1.0 + high)),
                admissible,
                out_of_scope: false,
            }
        }
        ExponentCase::NoRadiation => {
            let a = interpolation_bound(gamma);
            // aγ = (5γ−3)/3 > 5/3  ⟺  γ > 8/5
            let admissible = gamma > 1.0 && 5.0 * gamma - 8.0 > 0.0;
            ExponentWindow {
                gamma,
                case,
                a_low: 1.0,
                a_high: None,
                binding_term: None,
                a_chosen: admissible.then_some(a),
                admissible,
                out_of_scope: gamma >= 2.0,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationExponents {
    pub p_i: f64,
    pub alpha: f64,
    /// `1 < p_i < γ`.
    pub valid: bool,
}

/// `p_i = (3/2)(1+γ(a−1))` and `α = γ/(γ−1)·(3γa−3γ+1)/(3γa−3γ+3)`.
pub fn interpolation_exponents(gamma: f64, a: f64) -> InterpolationExponents {
    let ga = gamma * (a - 1.0);
    let p_i = 1.5 * (1.0 + ga);
    let alpha = gamma / (gamma - 1.0) * (3.0 * ga + 1.0) / (3.0 * ga + 3.0);
    InterpolationExponents { p_i, alpha, valid: p_i > 1.0 && p_i < gamma }
}

/// Convective quadratic `15A² + A(5−30γ) + 33γ − 23` in `A = aγ`.
pub fn convective_quadratic(gamma: f64, a: f64) -> f64 {
    let aa = a * gamma;
    15.0 * aa * aa + aa * (5.0 - 30.0 * gamma) + 33.0 * gamma - 23.0
}

/// Power of `sup E` produced by the convective term of the pressure estimate.
pub fn convective_exponent(gamma: f64, a: f64) -> f64 {
    let ie = interpolation_exponents(gamma, a);
    let aa = a * gamma;
    ie.alpha * (1.0 + gamma * (a - 1.0)) * (5.0 * aa - 5.0) / (gamma * (5.0 * aa - 6.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub strict_ok: bool,
    /// Power of `sup E` this inequality controls, when it is an energy bound.
    pub energy_exponent: Option<f64>,
}

impl ChainEntry {
    fn lt(id: &str, lhs: f64, rhs: f64, energy_exponent: Option<f64>) -> Self {
        Self { id: id.to_string(), lhs, rhs, strict_ok: lhs < rhs, energy_exponent }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub gamma: f64,
    pub a: f64,
    pub case: ExponentCase,
    pub entries: Vec<ChainEntry>,
    pub p_i: f64,
    pub alpha: f64,
    pub beta: f64,
    pub admissible: bool,
    pub out_of_scope: bool,
}

impl ChainReport {
    pub fn entry(&self, id: &str) -> Option<&ChainEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut s = format!(
            "gamma = {:.12}  a = {:.12}  case = {}\n{:<28} {:>22} {:>22}  ok\n",
            self.gamma,
            self.a,
            self.case.as_str(),
            "inequality",
            "lhs",
            "rhs"
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{:<28} {:>22.15e} {:>22.15e}  {}\n",
                e.id,
                e.lhs,
                e.rhs,
                if e.strict_ok { "yes" } else { "NO" }
            ));
        }
        s.push_str(&format!(
            "p_i = {:.12}  alpha = {:.12}  beta = {:.12}  admissible = {}{}\n",
            self.p_i,
            self.alpha,
            self.beta,
            self.admissible,
            if self.out_of_scope { "  (outside covered range)" } else { "" }
        ));
        s
    }
}

/// Evaluate every strict inequality of the estimate chain at `(γ, a)`.
///
/// In the no-radiation case the exponent is forced to `(5γ−3)/(3γ)`; the
/// supplied `a` is checked against it as one more entry.
pub fn estimate_chain_report(gamma: f64, a: f64, case: ExponentCase) -> ChainReport {
    let g1 = gamma - 1.0;
    let mut entries = Vec::new();
    let ie = interpolation_exponents(gamma, a);
    match case {
        ExponentCase::Radiation => {
            let kin = 1.0 / (5.0 * g1) + 1.0 / (3.0 * g1);
            entries.push(ChainEntry::lt("kinetic_absorb", kin, 1.0, Some(kin)));
            let t4 = 4.0 / 3.0 * gamma / (5.0 * g1);
            entries.push(ChainEntry::lt("theta4_absorb", t4, gamma, Some(t4 / gamma)));
            let rt = 8.0 * gamma / (45.0 * g1);
            entries.push(ChainEntry::lt("rho_theta_absorb", rt, gamma, Some(rt / gamma)));
            entries.push(ChainEntry::lt("a_above_one", 1.0, a, None));
            let w = a_window(gamma, case);
            entries.push(ChainEntry::lt(
                "a_below_window",
                a,
                w.a_high.unwrap_or_else(|| interpolation_bound(gamma).min(discriminant_bound(gamma))),
                None,
            ));
            entries.push(ChainEntry::lt("p_i_above_one", 1.0, ie.p_i, None));
            entries.push(ChainEntry::lt("p_i_below_gamma", ie.p_i, gamma, None));
            entries.push(ChainEntry::lt("renormalization_power", gamma * (a - 1.0), 1.0, None));
            let aa = a * gamma;
            entries.push(ChainEntry::lt("convective_denominator", 6.0, 5.0 * aa, None));
            entries.push(ChainEntry::lt("convective_quadratic", convective_quadratic(gamma, a), 0.0, None));
            let ce = convective_exponent(gamma, a);
            entries.push(ChainEntry::lt("convective_exponent", ce, 1.0, Some(ce)));
            let th = 0.25 + 1.0 / (5.0 * g1);
            entries.push(ChainEntry::lt("theta4_pressure", th, 1.0, Some(th)));
            let rtp = 1.0 / (9.0 * g1) + 1.0 / (15.0 * g1);
            entries.push(ChainEntry::lt("rho_theta_pressure", rtp, 1.0, Some(rtp)));
            entries.push(ChainEntry::lt("forcing", 0.5, 1.0, Some(0.5)));
        }
        ExponentCase::NoRadiation => {
            let a_fix = interpolation_bound(gamma);
            let aa = (5.0 * gamma - 3.0) / 3.0;
            entries.push(ChainEntry::lt("a_above_one", 1.0, a_fix, None));
            entries.push(ChainEntry::lt("a_gamma_threshold", 5.0 / 3.0, aa, None));
            let young = 4.0 * aa / (6.0 * (aa - 1.0));
            entries.push(ChainEntry::lt("young_absorb", young, aa, Some(young / aa)));
            let conv = 1.0 / gamma + (2.0 * gamma - 3.0) / (3.0 * gamma);
            entries.push(ChainEntry::lt("convective_exponent", conv, 1.0, Some(conv)));
            let dt = 1.0 / gamma + a_fix - 1.0;
            entries.push(ChainEntry::lt("time_derivative_exponent", dt, 1.0, Some(dt)));
            entries.push(ChainEntry::lt("forcing", 0.5, 1.0, Some(0.5)));
            let dev = (a - a_fix).abs();
            entries.push(ChainEntry::lt("a_matches_fixed", dev, f64::MIN_POSITIVE, None));
        }
    }
    let beta = entries
        .iter()
        .filter_map(|e| e.energy_exponent)
        .fold(f64::NEG_INFINITY, f64::max);
    let admissible = entries.iter().all(|e| e.strict_ok) && beta < 1.0;
    ChainReport {
        gamma,
        a,
        case,
        entries,
        p_i: ie.p_i,
        alpha: ie.alpha,
        beta,
        admissible,
        out_of_scope: case == ExponentCase::NoRadiation && gamma >= 2.0,
    }
}
