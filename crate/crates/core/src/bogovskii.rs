//! Discrete right inverse of the divergence on the box.
//!
//! At each time node, `B[f]` is the minimum-norm least-squares solution of
//! `div Φ = f` over the Dirichlet velocity space.  The spatial sine basis is
//! orthonormal in `∫∇:∇`, so minimum coefficient norm means minimum `‖∇Φ‖`.
//! On the tensor sine basis `∂_c Φ_c` of different components fall in
//! different cosine/sine families, so the divergence is injective and the
//! minimum-norm branch is only a guard.
//!
//! Time slices are kept nodal; `∂tΦ` is the derivative of their
//! trigonometric interpolant.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::discretization::{Discretization, FieldKind, PeriodicField};
use crate::error::{Error, Result};

/// Relative singular-value cutoff defining the numerical rank.
const RANK_TOL: f64 = 1e-10;

/// Per-slice least-squares inverse of `√w·div`.
#[derive(Debug, Clone)]
pub struct BogovskiiOperator {
    /// `(3·n_space) × n_xq`: nodal data → spatial coefficients.
    pinv: DMatrix<f64>,
    pub rank: usize,
    pub n_unknowns: usize,
    /// `‖∇B[f]‖ ≤ C_N ‖f‖` in L²(Ω): reciprocal smallest retained singular value.
    pub c_n: f64,
}

/// `B[f]` with time slices kept at the quadrature nodes.
#[derive(Debug, Clone)]
pub struct BogovskiiField {
    /// Row `i`: spatial coefficients `(component, mode)` at time node `i`.
    pub slices: DMatrix<f64>,
    pub n_space: usize,
    pub period: f64,
}

#[derive(Debug, Clone)]
pub struct BogovskiiResult {
    pub field: BogovskiiField,
    /// `‖div Φ − f‖ / ‖f‖` in L²(Ω) per time node (absolute when `f = 0`).
    pub slice_residuals: Vec<f64>,
    /// Same over `S¹ × Ω`.
    pub residual: f64,
    /// The normal equations were rank deficient and the minimum-norm solution was taken.
    pub regularized: bool,
    pub rank: usize,
}

impl BogovskiiOperator {
    pub fn new(disc: &Discretization) -> Result<Self> {
        let nsp = disc.spec.n_space();
        let nq = disc.n_xq();
        let sw = disc.wx.sqrt();
        let mut a = DMatrix::zeros(nq, 3 * nsp);
        for c in 0..3 {
            a.view_mut((0, c * nsp), (nq, nsp)).copy_from(&(&disc.gv[c] * sw));
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(Error::Solver("SVD of the divergence failed".into())),
        };
        let mut pinv = DMatrix::zeros(3 * nsp, nq);
        let mut rank = 0;
        let mut smin = f64::INFINITY;
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > RANK_TOL * smax {
                rank += 1;
                smin = smin.min(s);
                pinv += vt.row(k).transpose() * (u.column(k).transpose() * (sw / s));
            }
        }
        let c_n = if rank == 0 { 0.0 } else { 1.0 / smin };
        Ok(Self { pinv, rank, n_unknowns: 3 * nsp, c_n })
    }

    /// `B[f]` for nodal `f` (`n_tq × n_xq`) with zero spatial mean at every time node.
    pub fn apply(&self, disc: &Discretization, f: &DMatrix<f64>) -> Result<BogovskiiResult> {
        disc.check_nodal(f)?;
        let vol = disc.spec.volume();
        let tol_mean = 1e-12 * f.amax().max(1.0);
        for (i, m) in disc.space_integrals(f).iter().enumerate() {
            if (m / vol).abs() > tol_mean {
                return Err(Error::Precondition(format!(
                    "right-hand side has spatial mean {:.3e} at time node {i}",
                    m / vol
                )));
            }
        }
        let slices = (&self.pinv * f.transpose()).transpose();
        let field = BogovskiiField { slices, n_space: disc.spec.n_space(), period: disc.spec.period };
        let div = field.divergence(disc);
        let r = &div - f;
        let mut slice_residuals = Vec::with_capacity(f.nrows());
        for i in 0..f.nrows() {
            let num = r.row(i).norm();
            let den = f.row(i).norm();
            slice_residuals.push(if den > 0.0 { num / den } else { num });
        }
        let den = f.norm();
        let residual = if den > 0.0 { r.norm() / den } else { r.norm() };
        Ok(BogovskiiResult {
            field,
            slice_residuals,
            residual,
            regularized: self.rank < self.n_unknowns,
            rank: self.rank,
        })
    }
}

/// `B[f]` for a scalar field whose spatial mean vanishes at every time.
pub fn bogovskii_solve(disc: &Discretization, f: &PeriodicField) -> Result<BogovskiiResult> {
    if f.kind != FieldKind::ScalarNeumann || f.basis != disc.spec {
        return Err(Error::Contract("Bogovskii data must be a scalar field on this grid".into()));
    }
    BogovskiiOperator::new(disc)?.apply(disc, &disc.values(f, 0))
}

/// Fourier differentiation matrix on `n` (odd) equispaced nodes of `[0, period)`.
pub fn periodic_diff_matrix(n: usize, period: f64) -> DMatrix<f64> {
    assert!(n % 2 == 1, "trigonometric interpolation needs an odd node count");
    let scale = 2.0 * PI / period;
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            let k = i as f64 - j as f64;
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            0.5 * sign / (k * PI / n as f64).sin() * scale
        }
    })
}

impl BogovskiiField {
    fn component(&self, c: usize) -> DMatrix<f64> {
        self.slices.columns(c * self.n_space, self.n_space).into_owned()
    }

    /// Nodal `Φ_c`.
    pub fn values(&self, disc: &Discretization, c: usize) -> DMatrix<f64> {
        self.component(c) * disc.bv.transpose()
    }

    /// Nodal `∂_j Φ_c`.
    pub fn gradient(&self, disc: &Discretization, c: usize, j: usize) -> DMatrix<f64> {
        self.component(c) * disc.gv[j].transpose()
    }

    pub fn divergence(&self, disc: &Discretization) -> DMatrix<f64> {
        (0..3).map(|c| self.gradient(disc, c, c)).fold(
            DMatrix::zeros(self.slices.nrows(), disc.n_xq()),
            |a, b| a + b,
        )
    }

    /// Nodal `∂tΦ_c` of the trigonometric interpolant in time.
    pub fn time_derivative(&self, disc: &Discretization, c: usize) -> DMatrix<f64> {
        periodic_diff_matrix(self.slices.nrows(), self.period) * self.values(disc, c)
    }

    /// `‖∇Φ‖` in L²(S¹×Ω) (coefficients are ∇-orthonormal per slice).
    pub fn grad_norm(&self, disc: &Discretization) -> f64 {
        (self.slices.norm_squared() * disc.wt).sqrt()
    }

    /// Spatial coefficient vector at time node `i`.
    pub fn slice(&self, i: usize) -> DVector<f64> {
        self.slices.row(i).transpose()
    }
}
