//! Kirchhoff transform in log-temperature.
//!
//! `Φ(g) = ∫₀^g (κ(e^z)e^z + δe^{(B+1)z} + δ) dz` turns the regularized heat
//! flux into a linear Laplacian of `Z = Φ(ln θ)`.  For the cubic conductivity
//! the integral has a closed form; other conductivities go through adaptive
//! Gauss–Kronrod quadrature.  Since `Φ' ≥ δ`, the inverse is Lipschitz with
//! constant `1/δ`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Heat conductivity as a function of temperature.
#[derive(Clone)]
pub enum Conductivity {
    /// `κ(θ) = κ₀(1+θ³)`.
    Cubic { kappa0: f64 },
    /// Any positive continuous law.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Conductivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Conductivity::Cubic { kappa0 } => write!(f, "Cubic {{ kappa0: {kappa0} }}"),
            Conductivity::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Conductivity {
    pub fn eval(&self, theta: f64) -> f64 {
        match self {
            Conductivity::Cubic { kappa0 } => kappa0 * (1.0 + theta * theta * theta),
            Conductivity::Custom(k) => k(theta),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KirchhoffSpec {
    pub delta: f64,
    pub b_exp: f64,
    pub conductivity: Conductivity,
}

/// Largest argument of `exp` that stays finite.
const EXP_MAX: f64 = 709.0;

impl KirchhoffSpec {
    pub fn new(delta: f64, b_exp: f64, conductivity: Conductivity) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Parameter(format!("delta = {delta} must be positive")));
        }
        if !(b_exp >= 2.0) || !b_exp.is_finite() {
            return Err(Error::Parameter(format!("B = {b_exp} must be at least 2")));
        }
        if let Conductivity::Cubic { kappa0 } = conductivity {
            if !(kappa0 > 0.0) {
                return Err(Error::Parameter("kappa0 must be positive".into()));
            }
        }
        Ok(Self { delta, b_exp, conductivity })
    }

    pub fn cubic(kappa0: f64, delta: f64, b_exp: f64) -> Result<Self> {
        Self::new(delta, b_exp, Conductivity::Cubic { kappa0 })
    }

    /// Regularized conductivity `κ_δ(θ) = κ(θ) + δθ^B + δ/θ`.
    pub fn kappa_delta(&self, theta: f64) -> f64 {
        self.conductivity.eval(theta) + self.delta * theta.powf(self.b_exp) + self.delta / theta
    }

    fn check_range(&self, g: f64) -> Result<()> {
        let top = (self.b_exp + 1.0).max(4.0) * g;
        if !g.is_finite() || top > EXP_MAX || g < -EXP_MAX {
            return Err(Error::Range(format!("Kirchhoff argument {g} overflows")));
        }
        Ok(())
    }

    /// `Φ'(g) = κ(e^g)e^g + δe^{(B+1)g} + δ` without range checks.
    #[inline]
    pub fn derivative(&self, g: f64) -> f64 {
        let eg = g.exp();
        self.conductivity.eval(eg) * eg + self.delta * ((self.b_exp + 1.0) * g).exp() + self.delta
    }

    /// `Φ(g)` without range checks.
    pub fn value(&self, g: f64) -> f64 {
        let b1 = self.b_exp + 1.0;
        let reg = self.delta * ((b1 * g).exp_m1() / b1 + g);
        match &self.conductivity {
            Conductivity::Cubic { kappa0 } => {
                kappa0 * (g.exp_m1() + (4.0 * g).exp_m1() / 4.0) + reg
            }
            Conductivity::Custom(k) => {
                let f = |z: f64| {
                    let e = z.exp();
                    k(e) * e
                };
                reg + adaptive_gk15(&f, 0.0, g, 1e-13)
            }
        }
    }

    /// Inverse of `Φ` by bracketing and safeguarded Newton.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::Range(format!("cannot invert non-finite value {y}")));
        }
        let tol = 1e-10 * y.abs().max(1.0);
        // Φ(g) − δg is increasing and vanishes at 0, so the root lies between
        // 0 and y/δ; widen geometrically if rounding puts it outside.
        let (mut lo, mut hi) = ((y / self.delta).min(0.0) - 1.0, (y / self.delta).max(0.0) + 1.0);
        hi = hi.min(EXP_MAX / (self.b_exp + 1.0).max(4.0));
        let mut widen = 0;
        while self.value(lo) > y {
            lo = 2.0 * lo - 1.0;
            widen += 1;
            if widen > 60 || lo < -EXP_MAX * 1e3 {
                return Err(Error::Range(format!("no bracket below for Φ⁻¹({y})")));
            }
        }
        if self.value(hi) < y {
            return Err(Error::Range(format!("Φ⁻¹({y}) exceeds the representable range")));
        }
        let mut g = if y > 0.0 {
            // exponential tail dominates for large y
            let guess = ((self.b_exp + 1.0) * y / self.delta).ln() / (self.b_exp + 1.0);
            if guess > lo && guess < hi { guess } else { 0.5 * (lo + hi) }
        } else {
            (y / self.derivative(0.0)).clamp(lo, hi)
        };
        // Stop on the Newton step, not on |Φ(g) − y|: where Φ' ≈ δ a residual
        // test leaves an error of tol/δ in g.
        for _ in 0..200 {
            let r = self.value(g) - y;
            if r == 0.0 {
                return Ok(g);
            }
            if r > 0.0 {
                hi = g;
            } else {
                lo = g;
            }
            let step = r / self.derivative(g);
            if step.abs() <= 1e-15 * g.abs().max(1.0) && r.abs() <= tol {
                return Ok(g - step);
            }
            let mut next = g - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if next == g || hi - lo <= 4.0 * f64::EPSILON * g.abs().max(1.0) {
                // bracket collapsed to adjacent floats
                return Ok(if (self.value(lo) - y).abs() < (self.value(hi) - y).abs() {
                    lo
                } else {
                    hi
                });
            }
            g = next;
        }
        Err(Error::Solver(format!("Φ⁻¹({y}) did not converge")))
    }
}

/// `(Φ(g), Φ'(g))` with overflow detection.
pub fn phi_eval(g: f64, spec: &KirchhoffSpec) -> Result<(f64, f64)> {
    spec.check_range(g)?;
    Ok((spec.value(g), spec.derivative(g)))
}

pub fn phi_inverse(y: f64, spec: &KirchhoffSpec) -> Result<f64> {
    spec.inverse(y)
}

const GK_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_WK[7] * fc;
    let mut gs = GK_WG[3] * fc;
    for i in 0..7 {
        let x = h * GK_X[i];
        let s = f(c - x) + f(c + x);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            gs += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - gs) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) integration with relative tolerance `rtol`.
pub fn adaptive_gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rtol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (whole, err) = gk15(f, a, b);
    let mut stack = vec![(a, b, whole, err)];
    let mut total = 0.0;
    let mut guard = 0;
    while let Some((lo, hi, val, err)) = stack.pop() {
        guard += 1;
        if err <= rtol * whole.abs().max(1e-300) * ((hi - lo) / (b - a)).abs().max(1e-6)
            || guard > 20_000
            || (hi - lo).abs() < 1e-12 * (b - a).abs()
        {
            total += val;
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(f, lo, mid);
        let (v2, e2) = gk15(f, mid, hi);
        stack.push((lo, mid, v1, e1));
        stack.push((mid, hi, v2, e2));
    }
    total
}
