//! Tensor trigonometric bases on `S¹ × Ω`, quadrature and field calculus.
//!
//! Ω is the box `[0,ℓ₁]×[0,ℓ₂]×[0,ℓ₃]`.  Scalars (density, Kirchhoff
//! variable, log-temperature) use the Neumann cosine family, velocities the
//! Dirichlet sine family.  In time every unknown uses the orthonormal
//! goniometric family `1/√L, √(2/L)cos(2πkt/L), √(2/L)sin(2πkt/L)`; the
//! velocity omits the constant mode.
//!
//! Quadrature: `4N_t+1` uniform nodes in time and `2N_x` midpoint nodes per
//! axis.  Both rules integrate every product of two basis functions (and
//! their derivatives) exactly, and remain exact for the cubic and quartic
//! products that appear when the discrete energy identity is derived
//! (e.g. `∂t(ρ|u|²)` in time, `(ρu⊗u):∇u` in space).
//!
//! Nodal fields are stored as `(time node) × (space node)` matrices.  Space
//! nodes are ordered `(i₁, i₂, i₃)` row-major, spatial modes `(k₁, k₂, k₃)`
//! likewise, and coefficient vectors are time-mode major:
//! scalar `kt·n_sp + l`, velocity `kt·3n_sp + c·n_sp + l`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on unknowns per field.
pub const DEFAULT_MAX_DOFS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    /// Cosine family, homogeneous Neumann data; rank 1.
    ScalarNeumann,
    /// Sine family, homogeneous Dirichlet data; rank 3.
    Velocity,
}

/// Mode counts and geometry shared by every field of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub n_t: usize,
    pub n_x: usize,
    pub period: f64,
    pub lengths: [f64; 3],
}

impl BasisSpec {
    pub fn n_time(&self, kind: FieldKind) -> usize {
        match kind {
            FieldKind::ScalarNeumann => 2 * self.n_t + 1,
            FieldKind::Velocity => 2 * self.n_t,
        }
    }

    pub fn n_space(&self) -> usize {
        self.n_x * self.n_x * self.n_x
    }

    pub fn n_comp(kind: FieldKind) -> usize {
        match kind {
            FieldKind::ScalarNeumann => 1,
            FieldKind::Velocity => 3,
        }
    }

    pub fn dim(&self, kind: FieldKind) -> usize {
        self.n_time(kind) * Self::n_comp(kind) * self.n_space()
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Per-axis wave numbers `(k₁,k₂,k₃)` of spatial mode `l`.
    pub fn space_mode(&self, l: usize, kind: FieldKind) -> [usize; 3] {
        let n = self.n_x;
        let k = [l / (n * n), (l / n) % n, l % n];
        match kind {
            FieldKind::ScalarNeumann => k,
            FieldKind::Velocity => [k[0] + 1, k[1] + 1, k[2] + 1],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_t < 1 || self.n_x < 1 {
            return Err(Error::Parameter("N_t and N_x must be at least 1".into()));
        }
        if !(self.period > 0.0) || self.lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Parameter("period and box lengths must be positive".into()));
        }
        Ok(())
    }
}

/// Body force.  All profiles oscillate as `sin(2πt/L)` and have sup-norm `amplitude`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Forcing {
    Zero,
    /// `A sin(2πt/L) e₁`.
    Uniform { amplitude: f64 },
    /// `A sin(2πt/L) sin(πx₂/ℓ₂) e₁`.
    Shear { amplitude: f64 },
}

impl Forcing {
    pub fn sup_norm(&self) -> f64 {
        match self {
            Forcing::Zero => 0.0,
            Forcing::Uniform { amplitude } | Forcing::Shear { amplitude } => amplitude.abs(),
        }
    }

    pub fn eval(&self, t: f64, x: [f64; 3], period: f64, lengths: [f64; 3]) -> [f64; 3] {
        let s = (2.0 * PI * t / period).sin();
        match *self {
            Forcing::Zero => [0.0; 3],
            Forcing::Uniform { amplitude } => [amplitude * s, 0.0, 0.0],
            Forcing::Shear { amplitude } => {
                [amplitude * s * (PI * x[1] / lengths[1]).sin(), 0.0, 0.0]
            }
        }
    }
}

/// Physical data of the periodic problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub period: f64,
    pub lengths: [f64; 3],
    /// Total mass `M₀`.
    pub mass: f64,
    /// Constant boundary temperature `Θ₀`.
    pub theta0: f64,
    pub forcing: Forcing,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            period: 1.0,
            lengths: [1.0; 3],
            mass: 1.0,
            theta0: 1.0,
            forcing: Forcing::Uniform { amplitude: 1e-2 },
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) || self.lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Parameter("period and box lengths must be positive".into()));
        }
        if !(self.mass > 0.0) || !(self.theta0 > 0.0) {
            return Err(Error::Parameter("mass and boundary temperature must be positive".into()));
        }
        if !self.forcing.sup_norm().is_finite() {
            return Err(Error::Parameter("forcing must be bounded".into()));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Mean density `m = M₀/|Ω|`.
    pub fn mean_density(&self) -> f64 {
        self.mass / self.volume()
    }

    pub fn boundary_area(&self) -> f64 {
        let [a, b, c] = self.lengths;
        2.0 * (a * b + b * c + a * c)
    }
}

/// Orthonormal time function with scalar index `kt` and its derivative.
pub fn time_mode(kt: usize, t: f64, period: f64) -> (f64, f64) {
    if kt == 0 {
        return (1.0 / period.sqrt(), 0.0);
    }
    let k = ((kt + 1) / 2) as f64;
    let w = 2.0 * PI * k / period;
    let c = (2.0 / period).sqrt();
    if kt % 2 == 1 {
        (c * (w * t).cos(), -c * w * (w * t).sin())
    } else {
        (c * (w * t).sin(), c * w * (w * t).cos())
    }
}

/// Angular frequency `2πk/L` of scalar time index `kt`.
pub fn time_frequency(kt: usize, period: f64) -> f64 {
    2.0 * PI * ((kt + 1) / 2) as f64 / period
}

/// L²-normalized cosine `cos(kπx/ℓ)` and its derivative.
pub fn cos_mode(k: usize, x: f64, len: f64) -> (f64, f64) {
    if k == 0 {
        return (1.0 / len.sqrt(), 0.0);
    }
    let w = k as f64 * PI / len;
    let c = (2.0 / len).sqrt();
    (c * (w * x).cos(), -c * w * (w * x).sin())
}

/// L²-normalized sine `sin(kπx/ℓ)` and its derivative.
pub fn sin_mode(k: usize, x: f64, len: f64) -> (f64, f64) {
    let w = k as f64 * PI / len;
    let c = (2.0 / len).sqrt();
    (c * (w * x).sin(), c * w * (w * x).cos())
}

/// Coefficients of a scalar or velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicField {
    pub kind: FieldKind,
    pub basis: BasisSpec,
    pub coeffs: DVector<f64>,
}

const MAGIC: &[u8; 4] = b"PFLD";
const FORMAT_VERSION: u32 = 1;

impl PeriodicField {
    pub fn zeros(kind: FieldKind, basis: BasisSpec) -> Self {
        Self { kind, basis, coeffs: DVector::zeros(basis.dim(kind)) }
    }

    pub fn from_coeffs(kind: FieldKind, basis: BasisSpec, coeffs: DVector<f64>) -> Result<Self> {
        if coeffs.len() != basis.dim(kind) {
            return Err(Error::Contract(format!(
                "coefficient length {} does not match basis dimension {}",
                coeffs.len(),
                basis.dim(kind)
            )));
        }
        Ok(Self { kind, basis, coeffs })
    }

    /// Scalar field equal to `value` everywhere.
    pub fn constant(basis: BasisSpec, value: f64) -> Self {
        let mut f = Self::zeros(FieldKind::ScalarNeumann, basis);
        f.add_constant(value);
        f
    }

    /// Add a constant to a scalar field (touches only the (0,0) mode).
    pub fn add_constant(&mut self, value: f64) {
        assert_eq!(self.kind, FieldKind::ScalarNeumann, "constants live in the scalar basis");
        self.coeffs[0] += value * (self.basis.period * self.basis.volume()).sqrt();
    }

    /// Value of the (0,0) mode expressed as a space–time mean.
    pub fn mean(&self) -> f64 {
        match self.kind {
            FieldKind::ScalarNeumann => {
                self.coeffs[0] / (self.basis.period * self.basis.volume()).sqrt()
            }
            FieldKind::Velocity => 0.0,
        }
    }

    pub fn index(&self, kt: usize, comp: usize, l: usize) -> usize {
        let ns = self.basis.n_space();
        kt * BasisSpec::n_comp(self.kind) * ns + comp * ns + l
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.amax()
    }

    /// Coefficient block of one component as `(time mode) × (space mode)`.
    pub fn component_matrix(&self, comp: usize) -> DMatrix<f64> {
        let nt = self.basis.n_time(self.kind);
        let ns = self.basis.n_space();
        DMatrix::from_fn(nt, ns, |k, l| self.coeffs[self.index(k, comp, l)])
    }

    pub fn set_component_matrix(&mut self, comp: usize, m: &DMatrix<f64>) {
        for k in 0..m.nrows() {
            for l in 0..m.ncols() {
                let i = self.index(k, comp, l);
                self.coeffs[i] = m[(k, l)];
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.coeffs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.kind {
            FieldKind::ScalarNeumann => 0,
            FieldKind::Velocity => 1,
        });
        out.extend_from_slice(&(self.basis.n_t as u32).to_le_bytes());
        out.extend_from_slice(&(self.basis.n_x as u32).to_le_bytes());
        out.extend_from_slice(&self.basis.period.to_le_bytes());
        for l in self.basis.lengths {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&(self.coeffs.len() as u64).to_le_bytes());
        for c in self.coeffs.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Io("truncated field file".into()));
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        if take(4)? != MAGIC {
            return Err(Error::Io("not a field file".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Io(format!("unsupported field format version {version}")));
        }
        let kind = match take(1)?[0] {
            0 => FieldKind::ScalarNeumann,
            1 => FieldKind::Velocity,
            k => return Err(Error::Io(format!("unknown field kind {k}"))),
        };
        let n_t = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n_x = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let f = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
        let period = f(take(8)?);
        let lengths = [f(take(8)?), f(take(8)?), f(take(8)?)];
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let basis = BasisSpec { n_t, n_x, period, lengths };
        if n != basis.dim(kind) {
            return Err(Error::Io("coefficient count does not match header".into()));
        }
        let mut coeffs = DVector::zeros(n);
        for i in 0..n {
            coeffs[i] = f(take(8)?);
        }
        Ok(Self { kind, basis, coeffs })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Pointwise differential operator for [`Discretization::field_calculus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldOp {
    Eval,
    Grad,
    Div,
    TimeDeriv,
    BoundaryTrace,
}

/// Quadrature grid plus tabulated basis functions for one [`BasisSpec`].
#[derive(Debug, Clone)]
pub struct Discretization {
    pub spec: BasisSpec,
    /// Time nodes and the (uniform) time weight.
    pub t_nodes: Vec<f64>,
    pub wt: f64,
    /// Midpoint nodes per axis.
    pub axis_nodes: [Vec<f64>; 3],
    /// Interior nodes and the (uniform) space weight.
    pub x_nodes: Vec<[f64; 3]>,
    pub wx: f64,
    /// Face nodes with their weights.
    pub b_nodes: Vec<[f64; 3]>,
    pub wb: DVector<f64>,
    /// Scalar time basis values / derivatives: `n_tq × (2N_t+1)`.
    pub ts: DMatrix<f64>,
    pub ts_d: DMatrix<f64>,
    /// Velocity time basis: `n_tq × 2N_t`.
    pub tv: DMatrix<f64>,
    pub tv_d: DMatrix<f64>,
    /// Cosine basis and gradients: `n_xq × N_x³`.
    pub bs: DMatrix<f64>,
    pub gs: [DMatrix<f64>; 3],
    /// Cosine basis on the faces: `n_bq × N_x³`.
    pub bb: DMatrix<f64>,
    /// H¹₀-orthonormalized sine basis and gradients.
    pub bv: DMatrix<f64>,
    pub gv: [DMatrix<f64>; 3],
    /// Map from raw sine coefficients to the orthonormalized basis.
    pub v_transform: DMatrix<f64>,
    /// Squared cosine wave numbers `|k|²` (eigenvalues of −Δ).
    pub lap_s: DVector<f64>,
}

impl Discretization {
    pub fn new(spec: BasisSpec) -> Result<Self> {
        Self::with_cap(spec, DEFAULT_MAX_DOFS)
    }

    pub fn with_cap(spec: BasisSpec, max_dofs: usize) -> Result<Self> {
        spec.validate()?;
        let vdim = spec.dim(FieldKind::Velocity);
        if vdim > max_dofs || spec.dim(FieldKind::ScalarNeumann) > max_dofs {
            return Err(Error::Resource(format!(
                "velocity space of dimension {vdim} exceeds the cap {max_dofs}"
            )));
        }
        let period = spec.period;
        let n_tq = 4 * spec.n_t + 1;
        let wt = period / n_tq as f64;
        let t_nodes: Vec<f64> = (0..n_tq).map(|i| i as f64 * wt).collect();
        let nts = spec.n_time(FieldKind::ScalarNeumann);
        let ts = DMatrix::from_fn(n_tq, nts, |i, k| time_mode(k, t_nodes[i], period).0);
        let ts_d = DMatrix::from_fn(n_tq, nts, |i, k| time_mode(k, t_nodes[i], period).1);
        let tv = ts.columns(1, nts - 1).into_owned();
        let tv_d = ts_d.columns(1, nts - 1).into_owned();

        let m = 2 * spec.n_x;
        let axis_nodes: [Vec<f64>; 3] = std::array::from_fn(|a| {
            let h = spec.lengths[a] / m as f64;
            (0..m).map(|i| (i as f64 + 0.5) * h).collect()
        });
        let wx = spec.volume() / (m * m * m) as f64;
        let mut x_nodes = Vec::with_capacity(m * m * m);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    x_nodes.push([axis_nodes[0][i], axis_nodes[1][j], axis_nodes[2][k]]);
                }
            }
        }
        let mut b_nodes = Vec::with_capacity(6 * m * m);
        let mut wb = Vec::with_capacity(6 * m * m);
        for a in 0..3 {
            let (b, c) = ((a + 1) % 3, (a + 2) % 3);
            let w = spec.lengths[b] * spec.lengths[c] / (m * m) as f64;
            for side in [0.0, spec.lengths[a]] {
                for i in 0..m {
                    for j in 0..m {
                        let mut p = [0.0; 3];
                        p[a] = side;
                        p[b] = axis_nodes[b][i];
                        p[c] = axis_nodes[c][j];
                        b_nodes.push(p);
                        wb.push(w);
                    }
                }
            }
        }

        let nsp = spec.n_space();
        let tab = |pts: &[[f64; 3]], kind: FieldKind, deriv: Option<usize>| {
            DMatrix::from_fn(pts.len(), nsp, |q, l| {
                let k = spec.space_mode(l, kind);
                let mut v = 1.0;
                for a in 0..3 {
                    let (f, df) = match kind {
                        FieldKind::ScalarNeumann => cos_mode(k[a], pts[q][a], spec.lengths[a]),
                        FieldKind::Velocity => sin_mode(k[a], pts[q][a], spec.lengths[a]),
                    };
                    v *= if deriv == Some(a) { df } else { f };
                }
                v
            })
        };
        let bs = tab(&x_nodes, FieldKind::ScalarNeumann, None);
        let gs = std::array::from_fn(|j| tab(&x_nodes, FieldKind::ScalarNeumann, Some(j)));
        let bb = tab(&b_nodes, FieldKind::ScalarNeumann, None);
        let bv_raw = tab(&x_nodes, FieldKind::Velocity, None);
        let gv_raw: [DMatrix<f64>; 3] =
            std::array::from_fn(|j| tab(&x_nodes, FieldKind::Velocity, Some(j)));

        // Orthonormalize the sine family under ∫∇b:∇b' via Cholesky of its Gram matrix.
        let mut gram = DMatrix::zeros(nsp, nsp);
        for g in &gv_raw {
            gram += g.transpose() * g * wx;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Solver("velocity Gram matrix is not positive definite".into()))?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(nsp, nsp))
            .ok_or_else(|| Error::Solver("singular Cholesky factor".into()))?;
        let v_transform = l_inv.transpose();
        let bv = &bv_raw * &v_transform;
        let gv = std::array::from_fn(|j| &gv_raw[j] * &v_transform);

        let lap_s = DVector::from_fn(nsp, |l, _| {
            let k = spec.space_mode(l, FieldKind::ScalarNeumann);
            (0..3).map(|a| (k[a] as f64 * PI / spec.lengths[a]).powi(2)).sum()
        });

        Ok(Self {
            spec,
            t_nodes,
            wt,
            axis_nodes,
            x_nodes,
            wx,
            b_nodes,
            wb: DVector::from_vec(wb),
            ts,
            ts_d,
            tv,
            tv_d,
            bs,
            gs,
            bb,
            bv,
            gv,
            v_transform,
            lap_s,
        })
    }

    pub fn n_tq(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn n_xq(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn n_bq(&self) -> usize {
        self.b_nodes.len()
    }

    fn check(&self, f: &PeriodicField) -> Result<()> {
        if f.basis != self.spec {
            return Err(Error::Contract("field basis differs from the discretization".into()));
        }
        Ok(())
    }

    fn time_tab(&self, kind: FieldKind, deriv: bool) -> &DMatrix<f64> {
        match (kind, deriv) {
            (FieldKind::ScalarNeumann, false) => &self.ts,
            (FieldKind::ScalarNeumann, true) => &self.ts_d,
            (FieldKind::Velocity, false) => &self.tv,
            (FieldKind::Velocity, true) => &self.tv_d,
        }
    }

    fn space_tab(&self, kind: FieldKind, grad: Option<usize>) -> &DMatrix<f64> {
        match (kind, grad) {
            (FieldKind::ScalarNeumann, None) => &self.bs,
            (FieldKind::ScalarNeumann, Some(j)) => &self.gs[j],
            (FieldKind::Velocity, None) => &self.bv,
            (FieldKind::Velocity, Some(j)) => &self.gv[j],
        }
    }

    fn synth(&self, f: &PeriodicField, comp: usize, dt: bool, grad: Option<usize>) -> DMatrix<f64> {
        let c = f.component_matrix(comp);
        self.time_tab(f.kind, dt) * c * self.space_tab(f.kind, grad).transpose()
    }

    /// Nodal values of component `comp`.
    pub fn values(&self, f: &PeriodicField, comp: usize) -> DMatrix<f64> {
        self.synth(f, comp, false, None)
    }

    pub fn time_derivative(&self, f: &PeriodicField, comp: usize) -> DMatrix<f64> {
        self.synth(f, comp, true, None)
    }

    /// Nodal `∂_j` of component `comp`.
    pub fn gradient(&self, f: &PeriodicField, comp: usize, j: usize) -> DMatrix<f64> {
        self.synth(f, comp, false, Some(j))
    }

    pub fn divergence(&self, f: &PeriodicField) -> DMatrix<f64> {
        let mut d = self.gradient(f, 0, 0);
        d += self.gradient(f, 1, 1);
        d += self.gradient(f, 2, 2);
        d
    }

    /// Nodal Laplacian of a scalar field.
    pub fn laplacian(&self, f: &PeriodicField) -> DMatrix<f64> {
        let mut c = f.component_matrix(0);
        for (l, mut col) in c.column_iter_mut().enumerate() {
            col *= -self.lap_s[l];
        }
        &self.ts * c * self.bs.transpose()
    }

    /// Face values of a scalar field: `n_tq × n_bq`, weights in [`Self::wb`].
    pub fn boundary_trace(&self, f: &PeriodicField) -> Result<DMatrix<f64>> {
        self.check(f)?;
        if f.kind != FieldKind::ScalarNeumann {
            return Err(Error::Contract("boundary traces are taken of scalar fields".into()));
        }
        Ok(&self.ts * f.component_matrix(0) * self.bb.transpose())
    }

    /// `∬ F` over `S¹ × Ω` for nodal `F`.
    pub fn integrate(&self, f: &DMatrix<f64>) -> Result<f64> {
        self.check_nodal(f)?;
        Ok(f.sum() * self.wt * self.wx)
    }

    /// `∬ F` over `S¹ × ∂Ω` for face-nodal `F`.
    pub fn integrate_boundary(&self, f: &DMatrix<f64>) -> Result<f64> {
        if f.nrows() != self.n_tq() || f.ncols() != self.n_bq() {
            return Err(Error::Contract("face field does not live on this grid".into()));
        }
        Ok((f * &self.wb).sum() * self.wt)
    }

    /// `∫_Ω F(t_i)` at each time node.
    pub fn space_integrals(&self, f: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(f.nrows(), |i, _| f.row(i).sum() * self.wx)
    }

    pub fn check_nodal(&self, f: &DMatrix<f64>) -> Result<()> {
        if f.nrows() != self.n_tq() || f.ncols() != self.n_xq() {
            return Err(Error::Contract(format!(
                "nodal field is {}×{}, grid is {}×{}",
                f.nrows(),
                f.ncols(),
                self.n_tq(),
                self.n_xq()
            )));
        }
        Ok(())
    }

    /// Nodal samples of a closure `f(t, x)`.
    pub fn sample(&self, f: impl Fn(f64, [f64; 3]) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_tq(), self.n_xq(), |i, q| f(self.t_nodes[i], self.x_nodes[q]))
    }

    /// `∬ F ψ` against scalar test functions (or their time derivative /
    /// gradient), returned as a `(time mode) × (space mode)` matrix.
    pub fn test_scalar(&self, f: &DMatrix<f64>, dt: bool, grad: Option<usize>) -> DMatrix<f64> {
        self.time_tab(FieldKind::ScalarNeumann, dt).transpose()
            * (f * (self.wt * self.wx))
            * self.space_tab(FieldKind::ScalarNeumann, grad)
    }

    /// `∬_∂ F ψ` against scalar test functions for face-nodal `F`.
    pub fn test_scalar_boundary(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        let mut fw = f * self.wt;
        for (q, mut col) in fw.column_iter_mut().enumerate() {
            col *= self.wb[q];
        }
        self.ts.transpose() * fw * &self.bb
    }

    /// `∬ F w` against one component of the velocity test functions.
    pub fn test_velocity(&self, f: &DMatrix<f64>, dt: bool, grad: Option<usize>) -> DMatrix<f64> {
        self.time_tab(FieldKind::Velocity, dt).transpose()
            * (f * (self.wt * self.wx))
            * self.space_tab(FieldKind::Velocity, grad)
    }

    /// Flatten `(time mode) × (space mode)` blocks (one per component) into a coefficient vector.
    pub fn pack(kind: FieldKind, blocks: &[DMatrix<f64>]) -> DVector<f64> {
        let nt = blocks[0].nrows();
        let ns = blocks[0].ncols();
        let nc = BasisSpec::n_comp(kind);
        DVector::from_fn(nt * nc * ns, |i, _| {
            let k = i / (nc * ns);
            let c = (i / ns) % nc;
            blocks[c][(k, i % ns)]
        })
    }

    /// L² projection of nodal data onto the scalar space.
    pub fn project_scalar(&self, f: &DMatrix<f64>) -> Result<PeriodicField> {
        self.check_nodal(f)?;
        let c = self.test_scalar(f, false, None);
        PeriodicField::from_coeffs(
            FieldKind::ScalarNeumann,
            self.spec,
            Self::pack(FieldKind::ScalarNeumann, &[c]),
        )
    }

    /// L² mass matrix of the orthonormalized spatial sine family.
    pub fn velocity_mass(&self) -> DMatrix<f64> {
        self.bv.transpose() * &self.bv * self.wx
    }

    /// L² projection of nodal vector data onto the velocity space.
    pub fn project_velocity(&self, f: [&DMatrix<f64>; 3]) -> Result<PeriodicField> {
        let mass = self.velocity_mass();
        let chol = mass
            .cholesky()
            .ok_or_else(|| Error::Solver("velocity mass matrix not positive definite".into()))?;
        let mut blocks = Vec::with_capacity(3);
        for fc in f {
            self.check_nodal(fc)?;
            let rhs = self.test_velocity(fc, false, None);
            blocks.push(chol.solve(&rhs.transpose()).transpose());
        }
        PeriodicField::from_coeffs(
            FieldKind::Velocity,
            self.spec,
            Self::pack(FieldKind::Velocity, &blocks),
        )
    }

    /// Space–time weighted Gram matrix
    /// `A[(k,l),(k',l')] = Σ_{t,x} v(t,x) lt(t,k) lx(x,l) rt(t,k') rx(x,l')`.
    ///
    /// Quadrature weights must already be folded into `v`.
    pub fn st_gram(
        lt: &DMatrix<f64>,
        lx: &DMatrix<f64>,
        rt: &DMatrix<f64>,
        rx: &DMatrix<f64>,
        v: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let (nlt, nlx, nrt, nrx) = (lt.ncols(), lx.ncols(), rt.ncols(), rx.ncols());
        let mut out = DMatrix::zeros(nlt * nlx, nrt * nrx);
        let mut scaled = rx.clone();
        for tq in 0..v.nrows() {
            for q in 0..rx.nrows() {
                let w = v[(tq, q)];
                for l in 0..nrx {
                    scaled[(q, l)] = w * rx[(q, l)];
                }
            }
            let s = lx.transpose() * &scaled;
            for k in 0..nlt {
                let a = lt[(tq, k)];
                if a == 0.0 {
                    continue;
                }
                for kp in 0..nrt {
                    let c = a * rt[(tq, kp)];
                    if c == 0.0 {
                        continue;
                    }
                    let mut blk = out.view_mut((k * nlx, kp * nrx), (nlx, nrx));
                    blk.zip_apply(&s, |o, x| *o += c * x);
                }
            }
        }
        out
    }

    /// Pointwise evaluation with analytic differentiation of the basis.
    ///
    /// Returns one value for `Eval`/`Div`/`TimeDeriv` of a scalar, three for
    /// `Grad` of a scalar or `Eval`/`TimeDeriv` of a velocity, nine
    /// (row-major `∂_j u_c` at `3c+j`) for `Grad` of a velocity.
    pub fn field_calculus(
        &self,
        f: &PeriodicField,
        op: FieldOp,
        points: &[(f64, [f64; 3])],
    ) -> Result<Vec<Vec<f64>>> {
        self.check(f)?;
        let spec = self.spec;
        let nsp = spec.n_space();
        let ntime = spec.n_time(f.kind);
        let offset = match f.kind {
            FieldKind::ScalarNeumann => 0,
            FieldKind::Velocity => 1,
        };
        let mut out = Vec::with_capacity(points.len());
        for &(t, x) in points {
            let slack = 1e-12;
            let inside = (0..3).all(|a| {
                x[a] >= -slack * spec.lengths[a] && x[a] <= (1.0 + slack) * spec.lengths[a]
            });
            if !inside || !t.is_finite() {
                return Err(Error::Domain(format!("point {x:?} lies outside the box")));
            }
            if op == FieldOp::BoundaryTrace {
                let on_face = (0..3).any(|a| {
                    x[a].abs() <= slack * spec.lengths[a]
                        || (x[a] - spec.lengths[a]).abs() <= slack * spec.lengths[a]
                });
                if !on_face {
                    return Err(Error::Domain(format!("point {x:?} is not on a face")));
                }
            }
            let time: Vec<(f64, f64)> =
                (0..ntime).map(|k| time_mode(k + offset, t, spec.period)).collect();
            // spatial basis values and gradients at x
            let mut sv = vec![0.0; nsp];
            let mut sg = vec![[0.0; 3]; nsp];
            for l in 0..nsp {
                let k = spec.space_mode(l, f.kind);
                let fs: Vec<(f64, f64)> = (0..3)
                    .map(|a| match f.kind {
                        FieldKind::ScalarNeumann => cos_mode(k[a], x[a], spec.lengths[a]),
                        FieldKind::Velocity => sin_mode(k[a], x[a], spec.lengths[a]),
                    })
                    .collect();
                sv[l] = fs[0].0 * fs[1].0 * fs[2].0;
                sg[l] = [fs[0].1 * fs[1].0 * fs[2].0, fs[0].0 * fs[1].1 * fs[2].0, fs[0].0 * fs[1].0 * fs[2].1];
            }
            if f.kind == FieldKind::Velocity {
                let tr = &self.v_transform;
                let raw_v = sv.clone();
                let raw_g = sg.clone();
                for l in 0..nsp {
                    sv[l] = (0..nsp).map(|r| raw_v[r] * tr[(r, l)]).sum();
                    for j in 0..3 {
                        sg[l][j] = (0..nsp).map(|r| raw_g[r][j] * tr[(r, l)]).sum();
                    }
                }
            }
            let ncomp = BasisSpec::n_comp(f.kind);
            let comp_val = |c: usize, dt: bool, g: Option<usize>| -> f64 {
                let mut s = 0.0;
                for k in 0..ntime {
                    let a = if dt { time[k].1 } else { time[k].0 };
                    for l in 0..nsp {
                        let b = match g {
                            None => sv[l],
                            Some(j) => sg[l][j],
                        };
                        s += f.coeffs[f.index(k, c, l)] * a * b;
                    }
                }
                s
            };
            let v = match (op, f.kind) {
                (FieldOp::Eval | FieldOp::BoundaryTrace, _) => {
                    (0..ncomp).map(|c| comp_val(c, false, None)).collect()
                }
                (FieldOp::TimeDeriv, _) => (0..ncomp).map(|c| comp_val(c, true, None)).collect(),
                (FieldOp::Grad, _) => {
                    let mut g = Vec::with_capacity(3 * ncomp);
                    for c in 0..ncomp {
                        for j in 0..3 {
                            g.push(comp_val(c, false, Some(j)));
                        }
                    }
                    g
                }
                (FieldOp::Div, FieldKind::Velocity) => {
                    vec![(0..3).map(|c| comp_val(c, false, Some(c))).sum()]
                }
                (FieldOp::Div, FieldKind::ScalarNeumann) => {
                    return Err(Error::Contract("divergence of a scalar field".into()))
                }
            };
            out.push(v);
        }
        Ok(out)
    }
}

/// Build the grid and tabulated bases for a domain.
pub fn build_bases(domain: &DomainSpec, n_t: usize, n_x: usize) -> Result<Discretization> {
    domain.validate()?;
    Discretization::new(BasisSpec { n_t, n_x, period: domain.period, lengths: domain.lengths })
}

/// Row-major flattening `(t, x) ↦ t·n_x + x` of a nodal field.
pub fn flatten(f: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(f.len(), f.transpose().iter().copied())
}

pub fn unflatten(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disc(nt: usize, nx: usize, lengths: [f64; 3]) -> Discretization {
        Discretization::new(BasisSpec { n_t: nt, n_x: nx, period: 1.3, lengths }).unwrap()
    }

    #[test]
    fn dimension_bookkeeping() {
        let b = BasisSpec { n_t: 1, n_x: 1, period: 1.0, lengths: [1.0; 3] };
        assert_eq!(b.dim(FieldKind::Velocity), 3 * 2 * 1);
        assert_eq!(b.dim(FieldKind::ScalarNeumann), 3);
        let too_big = BasisSpec { n_t: 8, n_x: 12, period: 1.0, lengths: [1.0; 3] };
        assert!(matches!(Discretization::new(too_big), Err(Error::Resource(_))));
    }

    #[test]
    fn velocity_gram_is_identity() {
        let d = disc(2, 2, [1.0, 0.7, 1.4]);
        // time part is orthonormal; spatial H¹₀ Gram after orthonormalization
        let tg = d.tv.transpose() * &d.tv * d.wt;
        assert!((tg - DMatrix::identity(4, 4)).amax() < 1e-12);
        let mut g = DMatrix::zeros(8, 8);
        for j in 0..3 {
            g += d.gv[j].transpose() * &d.gv[j] * d.wx;
        }
        assert!((g - DMatrix::identity(8, 8)).amax() < 1e-10);
    }

    #[test]
    fn scalar_products_exact() {
        let d = disc(3, 3, [1.0, 2.0, 0.5]);
        let nts = d.ts.ncols();
        let tg = d.ts.transpose() * &d.ts * d.wt;
        assert!((tg - DMatrix::identity(nts, nts)).amax() < 1e-12);
        let sg = d.bs.transpose() * &d.bs * d.wx;
        assert!((sg - DMatrix::identity(27, 27)).amax() < 1e-12);
        // −Δ is diagonal with eigenvalues |k|²
        let mut k = DMatrix::zeros(27, 27);
        for j in 0..3 {
            k += d.gs[j].transpose() * &d.gs[j] * d.wx;
        }
        assert!((k - DMatrix::from_diagonal(&d.lap_s)).amax() < 1e-10);
    }

    #[test]
    fn constant_has_one_coefficient() {
        let d = disc(2, 2, [1.0; 3]);
        let f = d.project_scalar(&DMatrix::from_element(d.n_tq(), d.n_xq(), 2.5)).unwrap();
        assert!((f.mean() - 2.5).abs() < 1e-13);
        assert!(f.coeffs.iter().skip(1).all(|c| c.abs() < 1e-13));
        let g = PeriodicField::constant(d.spec, 2.5);
        assert!((d.values(&g, 0).add_scalar(-2.5)).amax() < 1e-13);
        for j in 0..3 {
            assert!(d.gradient(&g, 0, j).amax() < 1e-13);
        }
    }

    #[test]
    fn integrals() {
        let l = [1.0, 2.0, 0.5];
        let d = disc(2, 2, l);
        let one = DMatrix::from_element(d.n_tq(), d.n_xq(), 1.0);
        assert!((d.integrate(&one).unwrap() - 1.3).abs() < 1e-13);
        let f = d.sample(|t, x| {
            (2.0 * PI * t / 1.3).sin().powi(2) * (PI * x[0] / l[0]).cos().powi(2)
        });
        assert!((d.integrate(&f).unwrap() - 1.3 / 2.0 * 0.5 * 2.0 * 0.5).abs() < 1e-13);
        let odd = d.sample(|t, _| (2.0 * PI * t / 1.3).sin());
        assert!(d.integrate(&odd).unwrap().abs() < 1e-14);
        let bad = DMatrix::zeros(2, 2);
        assert!(matches!(d.integrate(&bad), Err(Error::Contract(_))));
        let b1 = DMatrix::from_element(d.n_tq(), d.n_bq(), 1.0);
        let area = 2.0 * (2.0 + 1.0 + 0.5);
        assert!((d.integrate_boundary(&b1).unwrap() - 1.3 * area).abs() < 1e-12);
    }

    #[test]
    fn pointwise_calculus() {
        let l = [1.0, 1.0, 1.0];
        let d = disc(1, 2, l);
        // single velocity mode in component 0, time mode cos
        let mut u = PeriodicField::zeros(FieldKind::Velocity, d.spec);
        let idx = u.index(0, 0, 0);
        u.coeffs[idx] = 1.0;
        let nu = d.v_transform[(0, 0)];
        let pts = [(0.3, [0.2, 0.4, 0.7]), (0.9, [0.5, 0.1, 0.3])];
        let div = d.field_calculus(&u, FieldOp::Div, &pts).unwrap();
        for (p, v) in pts.iter().zip(&div) {
            let (a, _) = time_mode(1, p.0, 1.3);
            let s = 2f64.sqrt().powi(3);
            let expect = a * nu * s * PI * (PI * p.1[0]).cos() * (PI * p.1[1]).sin() * (PI * p.1[2]).sin();
            assert!((v[0] - expect).abs() < 1e-12);
        }
        let outside = [(0.0, [1.5, 0.5, 0.5])];
        assert!(matches!(d.field_calculus(&u, FieldOp::Eval, &outside), Err(Error::Domain(_))));
        // time derivative of a cos mode
        let mut s = PeriodicField::zeros(FieldKind::ScalarNeumann, d.spec);
        let i1 = s.index(1, 0, 0);
        s.coeffs[i1] = 1.0;
        let v = d.field_calculus(&s, FieldOp::TimeDeriv, &[(0.2, [0.5; 3])]).unwrap();
        let w = 2.0 * PI / 1.3;
        let expect = -(2.0 / 1.3f64).sqrt() * w * (w * 0.2).sin();
        assert!((v[0][0] - expect).abs() < 1e-12);
        assert!(d.field_calculus(&s, FieldOp::BoundaryTrace, &[(0.2, [0.5; 3])]).is_err());
        assert!(d.field_calculus(&s, FieldOp::BoundaryTrace, &[(0.2, [0.0, 0.5, 0.5])]).is_ok());
    }

    #[test]
    fn nodal_matches_pointwise() {
        let d = disc(2, 2, [1.0, 0.8, 1.2]);
        let mut u = PeriodicField::zeros(FieldKind::Velocity, d.spec);
        for (i, c) in u.coeffs.iter_mut().enumerate() {
            *c = ((i * 37 % 11) as f64 - 5.0) / 7.0;
        }
        let pts: Vec<_> = (0..d.n_xq()).step_by(7).map(|q| (d.t_nodes[1], d.x_nodes[q])).collect();
        let g = d.field_calculus(&u, FieldOp::Grad, &pts).unwrap();
        let nod = d.gradient(&u, 1, 2);
        for (i, q) in (0..d.n_xq()).step_by(7).enumerate() {
            assert!((g[i][3 + 2] - nod[(1, q)]).abs() < 1e-10);
        }
    }

    #[test]
    fn discrete_integration_by_parts() {
        let d = disc(2, 3, [1.0, 0.6, 1.1]);
        let mut u = PeriodicField::zeros(FieldKind::Velocity, d.spec);
        for (i, c) in u.coeffs.iter_mut().enumerate() {
            *c = (i as f64 * 0.37).sin();
        }
        let mut q = PeriodicField::zeros(FieldKind::ScalarNeumann, d.spec);
        for (i, c) in q.coeffs.iter_mut().enumerate() {
            *c = (i as f64 * 0.91).cos();
        }
        let div = d.divergence(&u);
        let qv = d.values(&q, 0);
        let mut s = d.integrate(&div.component_mul(&qv)).unwrap();
        for j in 0..3 {
            s += d.integrate(&d.values(&u, j).component_mul(&d.gradient(&q, 0, j))).unwrap();
        }
        assert!(s.abs() < 1e-9, "{s}");
    }

    #[test]
    fn serialization_roundtrip() {
        let d = disc(1, 2, [1.0, 2.0, 3.0]);
        let mut f = PeriodicField::zeros(FieldKind::Velocity, d.spec);
        for (i, c) in f.coeffs.iter_mut().enumerate() {
            *c = i as f64 * 0.25 - 1.0;
        }
        let g = PeriodicField::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(f, g);
        assert!(PeriodicField::from_bytes(&f.to_bytes()[..20]).is_err());
    }

    #[test]
    fn gram_matches_dense_kronecker() {
        let d = disc(1, 2, [1.0; 3]);
        let v = d.sample(|t, x| 1.0 + t * x[0] + x[2] * x[2]) * (d.wt * d.wx);
        let a = Discretization::st_gram(&d.ts, &d.bs, &d.ts_d, &d.gs[1], &v);
        let psi = d.ts.kronecker(&d.bs);
        let psi_r = d.ts_d.kronecker(&d.gs[1]);
        let dense = psi.transpose() * DMatrix::from_diagonal(&flatten(&v)) * psi_r;
        assert!((a - dense).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn grad_matches_analytic(kx in 0usize..3, ky in 0usize..3, kz in 0usize..3, kt in 0usize..5) {
            let l = [1.0, 0.9, 1.3];
            let d = disc(2, 3, l);
            let mut f = PeriodicField::zeros(FieldKind::ScalarNeumann, d.spec);
            let lidx = (kx * 3 + ky) * 3 + kz;
            let i = f.index(kt, 0, lidx);
            f.coeffs[i] = 1.0;
            let gx = d.gradient(&f, 0, 0);
            for (ti, &t) in d.t_nodes.iter().enumerate() {
                for q in (0..d.n_xq()).step_by(13) {
                    let x = d.x_nodes[q];
                    let a = time_mode(kt, t, 1.3).0;
                    let e = a * cos_mode(kx, x[0], l[0]).1 * cos_mode(ky, x[1], l[1]).0 * cos_mode(kz, x[2], l[2]).0;
                    prop_assert!((gx[(ti, q)] - e).abs() < 1e-10);
                }
            }
        }
    }
}
