//! Boundary integral operators on star-shaped surfaces.
//!
//! The weakly singular scalar operators `S`, `K` and `K*` are assembled with a rotated
//! polar quadrature: for every target ring the unit parameter sphere is re-parametrized
//! in polar coordinates centred at the target direction, which cancels the `1/|x−y|`
//! singularity against the polar area element. Because the grid rings are invariant
//! under azimuthal rotation, the rotated nodes and the basis tables are shared by every
//! target in a ring, and the kernel application reduces to one real matrix product per
//! ring.
//!
//! The MNP operator `M` and its adjoint `M*` are applied through their scalar
//! reductions (`M[curl⃗V] = curl⃗ K[V]`, `M*[∇X] = −∇ K[X]`), and the symmetrizers
//! `N` and `Q` through `curl⃗ S curl` and `∇ S div`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::specfun::{
    cross_rc, dot, gauss_legendre, sh_degree_order, sh_len, CVec3, HarmonicTable, Vec3, C64,
};
use crate::surface::{geometry_from_table, weighted_gram, Flavor, ShCoeffs, SurfaceGrid, TangentField};

const FOUR_PI: f64 = 4.0 * PI;

/// Operator selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    /// Laplace single layer with kernel `−1/(4π|x−y|)`.
    S,
    /// Double layer (the L²-adjoint of `K*`).
    K,
    /// Neumann–Poincaré operator.
    Kstar,
    /// Second-order frequency correction of `M`.
    Mk2,
    /// First-order cross-coupling correction.
    L1,
    /// Second-order cross-coupling correction.
    L2,
    /// Helmholtz single layer.
    Sk,
}

impl OperatorKind {
    fn name(self) -> &'static str {
        match self {
            OperatorKind::S => "S",
            OperatorKind::K => "K",
            OperatorKind::Kstar => "Kstar",
            OperatorKind::Mk2 => "Mk2",
            OperatorKind::L1 => "L1",
            OperatorKind::L2 => "L2",
            OperatorKind::Sk => "Sk",
        }
    }
}

/// Sizes of the rotated polar rule: Gauss–Legendre in the polar angle, trapezoid in azimuth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarRule {
    pub n_alpha: usize,
    pub n_beta: usize,
}

impl PolarRule {
    /// Default rule for a grid and a truncation degree.
    pub fn for_grid(grid: &SurfaceGrid, l: usize) -> Self {
        let base = grid.l_quad.max(l);
        if grid.is_sphere() {
            PolarRule {
                n_alpha: base + 12,
                n_beta: base + l + 8,
            }
        } else {
            PolarRule {
                n_alpha: base + 4 * grid.l_geo + 16,
                n_beta: 2 * base + 4 * grid.l_geo + 16,
            }
        }
    }

    /// Identifier recorded in artifact headers.
    pub fn scheme_id(&self) -> String {
        format!("rotated-polar-gl{}x{}", self.n_alpha, self.n_beta)
    }

    fn validate(&self) -> Result<()> {
        if self.n_alpha < 2 || self.n_beta < 3 {
            return Err(Error::invalid("quadrature", "polar rule needs n_alpha ≥ 2 and n_beta ≥ 3"));
        }
        Ok(())
    }

    /// Local nodes around the north pole and their weights (including `sin α`).
    fn local_nodes(&self) -> (Vec<Vec3>, Vec<f64>) {
        let (xa, wa) = gauss_legendre(self.n_alpha);
        let wb = 2.0 * PI / self.n_beta as f64;
        let mut pts = Vec::with_capacity(self.n_alpha * self.n_beta);
        let mut wts = Vec::with_capacity(self.n_alpha * self.n_beta);
        for (x, w) in xa.iter().zip(&wa) {
            let a = 0.5 * PI * (x + 1.0);
            let (sa, ca) = a.sin_cos();
            for j in 0..self.n_beta {
                let b = (j as f64 + 0.5) * wb;
                let (sb, cb) = b.sin_cos();
                pts.push([sa * cb, sa * sb, ca]);
                wts.push(0.5 * PI * w * sa * wb);
            }
        }
        (pts, wts)
    }
}

/// Dense coefficient-space operator.
///
/// For the scalar kinds (`S`, `K`, `Kstar`, `Sk`) `entries` maps a coefficient vector of
/// length `(L+1)²` to the coefficients of the image (Galerkin matrix composed with the
/// inverse mass matrix). For the correction kinds (`Mk2`, `L1`, `L2`) the input is the
/// potential `V` of a curl field `curl⃗V` and the output stacks the potentials `[X; V]` of
/// the Helmholtz decomposition of the image, so the matrix has `2(L+1)²` rows.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    pub kind: OperatorKind,
    pub l: usize,
    pub entries: DMatrix<C64>,
    /// Raw Galerkin matrix `⟨Y_a, Op Y_b⟩_{L²(∂D)}` (scalar kinds only).
    pub galerkin: Option<DMatrix<C64>>,
    pub grid_id: u64,
    pub scheme: String,
}

impl OperatorMatrix {
    /// Apply to a coefficient vector (scalar kinds).
    pub fn apply(&self, c: &ShCoeffs) -> Result<ShCoeffs> {
        if self.is_correction() {
            return Err(Error::KindMismatch {
                expected: "scalar operator".into(),
                found: self.kind.name().into(),
            });
        }
        let v = c.resized(self.l).as_dvector();
        let out = &self.entries * v;
        ShCoeffs::from_vec(self.l, out.iter().copied().collect())
    }

    /// Apply a correction operator to the curl field `curl⃗V`.
    pub fn apply_curl(&self, v: &ShCoeffs) -> Result<TangentField> {
        if !self.is_correction() {
            return Err(Error::KindMismatch {
                expected: "correction operator".into(),
                found: self.kind.name().into(),
            });
        }
        let nb = sh_len(self.l);
        let out = &self.entries * v.resized(self.l).as_dvector();
        let x = ShCoeffs::from_vec(self.l, out.rows(0, nb).iter().copied().collect())?;
        let vv = ShCoeffs::from_vec(self.l, out.rows(nb, nb).iter().copied().collect())?;
        TangentField::new(x, vv, Flavor::Curl)
    }

    pub fn is_correction(&self) -> bool {
        matches!(self.kind, OperatorKind::Mk2 | OperatorKind::L1 | OperatorKind::L2)
    }

    /// Multiply every entry by a scalar.
    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.entries *= s;
        if let Some(g) = out.galerkin.as_mut() {
            *g *= s;
        }
        out
    }

    /// JSON export `{kind, L, rows: [[re, im, re, im, ...], ...]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f64>> = (0..self.entries.nrows())
            .map(|i| {
                (0..self.entries.ncols())
                    .flat_map(|j| {
                        let z = self.entries[(i, j)];
                        [z.re, z.im]
                    })
                    .collect()
            })
            .collect();
        json!({ "kind": self.kind.name(), "L": self.l, "rows": rows })
    }
}

/// Material parameters and frequency data for the scattering problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub eps_e: C64,
    pub mu_e: C64,
    pub eps_c: C64,
    pub mu_c: C64,
    pub omega: f64,
    pub delta: f64,
}

impl MaterialConfig {
    /// `ε_e = μ_e = 1`, `ε_c = μ_c = −τ`.
    pub fn from_tau(tau: f64, omega: f64, delta: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if (tau - 1.0).abs() < 1e-14 {
            return Err(Error::invalid("tau", "tau = 1 makes the contrast singular"));
        }
        let m = MaterialConfig {
            eps_e: C64::new(1.0, 0.0),
            mu_e: C64::new(1.0, 0.0),
            eps_c: C64::new(-tau, 0.0),
            mu_c: C64::new(-tau, 0.0),
            omega,
            delta,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(Error::invalid("omega", "must be positive"));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::invalid("delta", "must be non-negative"));
        }
        if (self.mu_e - self.mu_c).norm() < 1e-14 {
            return Err(Error::invalid("mu_c", "must differ from mu_e"));
        }
        if (self.eps_e - self.eps_c).norm() < 1e-14 {
            return Err(Error::invalid("eps_c", "must differ from eps_e"));
        }
        Ok(())
    }

    /// Exterior wavenumber `ω√(ε_e μ_e)` (principal root).
    pub fn k_e(&self) -> C64 {
        (self.eps_e * self.mu_e).sqrt() * self.omega
    }

    /// Interior wavenumber `ω√(ε_c μ_c)` (principal root).
    pub fn k_c(&self) -> C64 {
        (self.eps_c * self.mu_c).sqrt() * self.omega
    }

    /// The contrast parameter `τ` when the material is of the `−τ` form.
    pub fn tau(&self) -> Option<f64> {
        let one = C64::new(1.0, 0.0);
        if self.eps_e == one && self.mu_e == one && self.eps_c == self.mu_c && self.eps_c.im == 0.0 {
            Some(-self.eps_c.re)
        } else {
            None
        }
    }

    /// Constant `C_j` of the cross-coupling corrections acting on curl fields:
    /// `i^{j+1}(k_c^{j+1} − k_e^{j+1}) / (4π ω (j−1)!)`.
    pub fn l_constant(&self, j: u32) -> C64 {
        let ij = C64::new(0.0, 1.0).powu(j + 1);
        let fact: f64 = (1..j).map(|k| k as f64).product();
        ij * (self.k_c().powu(j + 1) - self.k_e().powu(j + 1)) / (FOUR_PI * self.omega * fact)
    }
}

// ---------------------------------------------------------------------------------------
// Ring-batched polar assembly
// ---------------------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum ScalarKernel {
    S,
    K,
    Kstar,
    Sk(C64),
}

#[derive(Clone, Copy, PartialEq)]
enum VecKernel {
    /// `ν_x × ∫ φ / |x−y|`.
    InvDist,
    /// `ν_x × ∫ φ`.
    Plain,
    /// `(1/8π) ν_x × ∫ (x−y)/|x−y| × φ`.
    M2,
}

/// Geometry of a source quadrature point in the target-rotated frame.
struct SourcePoint {
    y: Vec3,
    nu: Vec3,
    rho: f64,
    /// Polar weight × Jacobian.
    wj: f64,
}

#[inline]
fn rot_y(c: f64, s: f64, v: &Vec3) -> Vec3 {
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

/// `R_z(φ) v`.
#[inline]
fn rot_z(c: f64, s: f64, v: &[C64; 3]) -> CVec3 {
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]]
}

#[inline]
fn phase(m: i64, p: usize, np: usize) -> C64 {
    let k = (p as i64 * m).rem_euclid(np as i64) as f64;
    C64::from_polar(1.0, 2.0 * PI * k / np as f64)
}

/// Shared per-ring data: rotated nodes and geometry tables.
struct Ring {
    u: Vec<Vec3>,
    w: Vec<f64>,
    geo: Vec<HarmonicTable>,
}

impl Ring {
    fn new(grid: &SurfaceGrid, t: usize, local: &(Vec<Vec3>, Vec<f64>)) -> Self {
        let (c, s) = (grid.cos_t[t], grid.sin_t[t]);
        let u: Vec<Vec3> = local.0.iter().map(|v| rot_y(c, s, v)).collect();
        let geo = if grid.is_sphere() {
            Vec::new()
        } else {
            u.iter().map(|d| HarmonicTable::new(grid.l_geo, d, true)).collect()
        };
        Ring { u, w: local.1.clone(), geo }
    }

    /// Source geometry for the target at azimuth index `p`.
    fn sources(&self, grid: &SurfaceGrid, p: usize) -> Vec<SourcePoint> {
        if let Some(r) = grid.sphere_radius() {
            return self
                .u
                .iter()
                .zip(&self.w)
                .map(|(u, w)| SourcePoint {
                    y: [r * u[0], r * u[1], r * u[2]],
                    nu: *u,
                    rho: r,
                    wj: w * r * r,
                })
                .collect();
        }
        let a: Vec<C64> = grid
            .radius_coeffs
            .coeffs
            .iter()
            .enumerate()
            .map(|(k, ak)| {
                let (_, m) = sh_degree_order(k);
                ak * phase(m, p, grid.n_phi)
            })
            .collect();
        self.u
            .iter()
            .zip(&self.w)
            .zip(&self.geo)
            .map(|((u, w), g)| {
                let pg = geometry_from_table(&a, &g.y, &g.grad, *u);
                SourcePoint {
                    y: pg.position,
                    nu: pg.normal,
                    rho: pg.rho,
                    wj: w * pg.jac,
                }
            })
            .collect()
    }
}

/// Target position and normal rotated into the ring frame.
fn target_rotated(grid: &SurfaceGrid, t: usize, p: usize) -> (Vec3, Vec3) {
    let i = t * grid.n_phi + p;
    let r = grid.rho[i];
    let x0 = [r * grid.sin_t[t], 0.0, r * grid.cos_t[t]];
    let (s, c) = grid.phi[p].sin_cos();
    let n = grid.normals[i];
    (x0, [c * n[0] + s * n[1], -s * n[0] + c * n[1], n[2]])
}

/// Real basis table `[Re Y_b | Im Y_b]` (interleaved) over the ring nodes.
fn basis_table(u: &[Vec3], l: usize, grad: bool) -> (DMatrix<f64>, [DMatrix<f64>; 3]) {
    let nb = sh_len(l);
    let q = u.len();
    let mut b = DMatrix::<f64>::zeros(q, 2 * nb);
    let mut g = [
        DMatrix::<f64>::zeros(if grad { q } else { 0 }, 2 * nb),
        DMatrix::<f64>::zeros(if grad { q } else { 0 }, 2 * nb),
        DMatrix::<f64>::zeros(if grad { q } else { 0 }, 2 * nb),
    ];
    for (qi, d) in u.iter().enumerate() {
        let tab = HarmonicTable::new(l, d, grad);
        for k in 0..nb {
            b[(qi, 2 * k)] = tab.y[k].re;
            b[(qi, 2 * k + 1)] = tab.y[k].im;
            if grad {
                for c in 0..3 {
                    g[c][(qi, 2 * k)] = tab.grad[k][c].re;
                    g[c][(qi, 2 * k + 1)] = tab.grad[k][c].im;
                }
            }
        }
    }
    (b, g)
}

fn check_resolution(grid: &SurfaceGrid, l: usize) -> Result<()> {
    if l > grid.l_quad {
        return Err(Error::Resolution {
            requested: l,
            available: grid.l_quad,
        });
    }
    Ok(())
}

/// Nodal images `Op[Y_b](x_i)` for a list of scalar kernels (each `N × nb`).
fn scalar_images(
    grid: &SurfaceGrid,
    l: usize,
    rule: PolarRule,
    kernels: &[ScalarKernel],
) -> Result<Vec<DMatrix<C64>>> {
    check_resolution(grid, l)?;
    rule.validate()?;
    let nb = sh_len(l);
    let np = grid.n_phi;
    let nk = kernels.len();
    let local = rule.local_nodes();
    let sphere = grid.is_sphere();
    let complex = kernels.iter().any(|k| matches!(k, ScalarKernel::Sk(_)));
    let ms: Vec<i64> = (0..nb).map(|b| sh_degree_order(b).1).collect();

    let rings: Vec<Vec<DMatrix<C64>>> = (0..grid.n_theta)
        .into_par_iter()
        .map(|t| {
            let ring = Ring::new(grid, t, &local);
            let (bt, _) = basis_table(&ring.u, l, false);
            let targets: Vec<usize> = if sphere { vec![0] } else { (0..np).collect() };
            let q = ring.u.len();
            let nrow = targets.len() * nk;
            let mut kre = DMatrix::<f64>::zeros(nrow, q);
            let mut kim = DMatrix::<f64>::zeros(if complex { nrow } else { 0 }, q);
            for (ti, &p) in targets.iter().enumerate() {
                let src = ring.sources(grid, p);
                let (x0, nu0) = target_rotated(grid, t, p);
                for (qi, sp) in src.iter().enumerate() {
                    let d = [x0[0] - sp.y[0], x0[1] - sp.y[1], x0[2] - sp.y[2]];
                    let r = dot(&d, &d).sqrt();
                    let r3 = r * r * r;
                    for (ki, k) in kernels.iter().enumerate() {
                        let row = ti * nk + ki;
                        match k {
                            ScalarKernel::S => kre[(row, qi)] = -sp.wj / (FOUR_PI * r),
                            ScalarKernel::Kstar => kre[(row, qi)] = dot(&d, &nu0) * sp.wj / (FOUR_PI * r3),
                            ScalarKernel::K => kre[(row, qi)] = -dot(&d, &sp.nu) * sp.wj / (FOUR_PI * r3),
                            ScalarKernel::Sk(kk) => {
                                let g = -(C64::new(0.0, 1.0) * kk * r).exp() * sp.wj / (FOUR_PI * r);
                                kre[(row, qi)] = g.re;
                                kim[(row, qi)] = g.im;
                            }
                        }
                    }
                }
            }
            let re = &kre * &bt;
            let im = if complex { Some(&kim * &bt) } else { None };
            let mut out = vec![DMatrix::<C64>::zeros(np, nb); nk];
            for p in 0..np {
                let ti = if sphere { 0 } else { p };
                for (ki, o) in out.iter_mut().enumerate() {
                    let row = ti * nk + ki;
                    for b in 0..nb {
                        let mut z = C64::new(re[(row, 2 * b)], re[(row, 2 * b + 1)]);
                        if let Some(im) = &im {
                            z += C64::new(-im[(row, 2 * b + 1)], im[(row, 2 * b)]);
                        }
                        o[(p, b)] = z * phase(ms[b], p, np);
                    }
                }
            }
            out
        })
        .collect();

    let n = grid.len();
    let mut imgs = vec![DMatrix::<C64>::zeros(n, nb); nk];
    for (t, ring) in rings.into_iter().enumerate() {
        for (ki, m) in ring.into_iter().enumerate() {
            imgs[ki].rows_mut(t * np, np).copy_from(&m);
        }
    }
    Ok(imgs)
}

/// Nodal images of vector kernels applied to the curl fields `curl⃗Y_b`.
/// Returns, for each kernel, the three Cartesian component matrices (`N × nb`).
fn vector_images(
    grid: &SurfaceGrid,
    l: usize,
    rule: PolarRule,
    kernels: &[VecKernel],
) -> Result<Vec<[DMatrix<C64>; 3]>> {
    check_resolution(grid, l)?;
    rule.validate()?;
    let nb = sh_len(l);
    let np = grid.n_phi;
    let nk = kernels.len();
    let local = rule.local_nodes();
    let sphere = grid.is_sphere();
    let ms: Vec<i64> = (0..nb).map(|b| sh_degree_order(b).1).collect();

    let rings: Vec<Vec<[DMatrix<C64>; 3]>> = (0..grid.n_theta)
        .into_par_iter()
        .map(|t| {
            let ring = Ring::new(grid, t, &local);
            let (_, gt) = basis_table(&ring.u, l, true);
            let targets: Vec<usize> = if sphere { vec![0] } else { (0..np).collect() };
            let q = ring.u.len();
            let nrow = targets.len() * nk * 3;
            let mut kd = [
                DMatrix::<f64>::zeros(nrow, q),
                DMatrix::<f64>::zeros(nrow, q),
                DMatrix::<f64>::zeros(nrow, q),
            ];
            let mut nus = Vec::with_capacity(targets.len());
            for (ti, &p) in targets.iter().enumerate() {
                let src = ring.sources(grid, p);
                let (x0, nu0) = target_rotated(grid, t, p);
                nus.push(nu0);
                for (qi, sp) in src.iter().enumerate() {
                    let d = [x0[0] - sp.y[0], x0[1] - sp.y[1], x0[2] - sp.y[2]];
                    let r = dot(&d, &d).sqrt();
                    // curl⃗Y(y) = C ∇_S Y(u) with C = −[ν]_× / ρ.
                    let n = &sp.nu;
                    let cm = [
                        [0.0, n[2], -n[1]],
                        [-n[2], 0.0, n[0]],
                        [n[1], -n[0], 0.0],
                    ];
                    for (ki, k) in kernels.iter().enumerate() {
                        let (km, scale): ([[f64; 3]; 3], f64) = match k {
                            VecKernel::InvDist => ([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.0 / r),
                            VecKernel::Plain => ([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1.0),
                            VecKernel::M2 => {
                                let h = [d[0] / r, d[1] / r, d[2] / r];
                                (
                                    [[0.0, -h[2], h[1]], [h[2], 0.0, -h[0]], [-h[1], h[0], 0.0]],
                                    1.0 / (8.0 * PI),
                                )
                            }
                        };
                        let f = scale * sp.wj / sp.rho;
                        for c in 0..3 {
                            let row = (ti * nk + ki) * 3 + c;
                            for dd in 0..3 {
                                let a = km[c][0] * cm[0][dd] + km[c][1] * cm[1][dd] + km[c][2] * cm[2][dd];
                                kd[dd][(row, qi)] = f * a;
                            }
                        }
                    }
                }
            }
            let res = &kd[0] * &gt[0] + &kd[1] * &gt[1] + &kd[2] * &gt[2];
            let mut out: Vec<[DMatrix<C64>; 3]> = (0..nk)
                .map(|_| std::array::from_fn(|_| DMatrix::<C64>::zeros(np, nb)))
                .collect();
            for p in 0..np {
                let ti = if sphere { 0 } else { p };
                let nu0 = nus[ti];
                let (s, c) = grid.phi[p].sin_cos();
                for (ki, o) in out.iter_mut().enumerate() {
                    let row0 = (ti * nk + ki) * 3;
                    for b in 0..nb {
                        let v: CVec3 = std::array::from_fn(|cc| {
                            C64::new(res[(row0 + cc, 2 * b)], res[(row0 + cc, 2 * b + 1)])
                        });
                        let w = cross_rc(&nu0, &v);
                        let w = rot_z(c, s, &w);
                        let ph = phase(ms[b], p, np);
                        for cc in 0..3 {
                            o[cc][(p, b)] = w[cc] * ph;
                        }
                    }
                }
            }
            out
        })
        .collect();

    let n = grid.len();
    let mut imgs: Vec<[DMatrix<C64>; 3]> = (0..nk)
        .map(|_| std::array::from_fn(|_| DMatrix::<C64>::zeros(n, nb)))
        .collect();
    for (t, ring) in rings.into_iter().enumerate() {
        for (ki, m) in ring.into_iter().enumerate() {
            for c in 0..3 {
                imgs[ki][c].rows_mut(t * np, np).copy_from(&m[c]);
            }
        }
    }
    Ok(imgs)
}

fn invert_hermitian(m: &DMatrix<C64>, what: &str) -> Result<DMatrix<C64>> {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    match h.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => Err(Error::NotPositiveDefinite(format!("{what} is not positive definite"))),
    }
}

// ---------------------------------------------------------------------------------------
// Scalar operators
// ---------------------------------------------------------------------------------------

/// `S`, `K`, `K*` at one truncation degree, with their nodal images and the mass matrix.
#[derive(Debug, Clone)]
pub struct ScalarOperators {
    pub l: usize,
    pub s: OperatorMatrix,
    pub k: OperatorMatrix,
    pub kstar: OperatorMatrix,
    /// `⟨Y_a, Y_b⟩_{L²(∂D)}`.
    pub mass: DMatrix<C64>,
    pub mass_inv: DMatrix<C64>,
    /// `Y_b(x̂_i)`, one row per node.
    pub basis: DMatrix<C64>,
    /// `S[Y_b](x_i)`.
    pub img_s: DMatrix<C64>,
    /// `K[Y_b](x_i)`.
    pub img_k: DMatrix<C64>,
    /// `K*[Y_b](x_i)`.
    pub img_kstar: DMatrix<C64>,
    pub area_weights: Vec<f64>,
    pub rule: PolarRule,
}

impl ScalarOperators {
    /// Coefficients (degree `l`) of `S[f]` for node samples `f`.
    pub fn apply_s_nodes(&self, f: &[C64]) -> DVector<C64> {
        self.project_adjoint(&self.img_s, f)
    }

    /// Coefficients of `K*[f]` for node samples `f`.
    pub fn apply_kstar_nodes(&self, f: &[C64]) -> DVector<C64> {
        self.project_adjoint(&self.img_k, f)
    }

    /// Coefficients of `K[f]` for node samples `f`.
    pub fn apply_k_nodes(&self, f: &[C64]) -> DVector<C64> {
        self.project_adjoint(&self.img_kstar, f)
    }

    /// `W⁻¹ ⟨A† Y_a, f⟩` using the image of the adjoint operator.
    fn project_adjoint(&self, adj_img: &DMatrix<C64>, f: &[C64]) -> DVector<C64> {
        let fw = DVector::from_iterator(f.len(), f.iter().zip(&self.area_weights).map(|(v, w)| v * *w));
        &self.mass_inv * (adj_img.adjoint() * fw)
    }

    /// Project node samples onto the harmonic basis of degree `l` in `L²(∂D)`.
    pub fn project_nodes(&self, f: &[C64]) -> DVector<C64> {
        self.project_adjoint(&self.basis, f)
    }
}

/// Assemble one scalar operator.
pub fn assemble_scalar(kind: OperatorKind, grid: &SurfaceGrid, l: usize) -> Result<OperatorMatrix> {
    let kernel = match kind {
        OperatorKind::S => ScalarKernel::S,
        OperatorKind::K => ScalarKernel::K,
        OperatorKind::Kstar => ScalarKernel::Kstar,
        other => {
            return Err(Error::KindMismatch {
                expected: "S, K or Kstar".into(),
                found: other.name().into(),
            })
        }
    };
    let rule = PolarRule::for_grid(grid, l);
    let img = scalar_images(grid, l, rule, &[kernel])?.remove(0);
    let basis = grid.basis_at_nodes(l)?;
    let mass = weighted_gram(&basis, &basis, &grid.area_weights);
    let mass_inv = invert_hermitian(&mass, "mass matrix")?;
    Ok(galerkin_operator(kind, l, grid, &rule, &basis, &img, &mass_inv))
}

/// Assemble the Helmholtz single layer `S^k` (kernel `−e^{ik|x−y|}/(4π|x−y|)`).
pub fn assemble_helmholtz_single_layer(grid: &SurfaceGrid, l: usize, k: C64) -> Result<OperatorMatrix> {
    let rule = PolarRule::for_grid(grid, l);
    let img = scalar_images(grid, l, rule, &[ScalarKernel::Sk(k)])?.remove(0);
    let basis = grid.basis_at_nodes(l)?;
    let mass = weighted_gram(&basis, &basis, &grid.area_weights);
    let mass_inv = invert_hermitian(&mass, "mass matrix")?;
    Ok(galerkin_operator(OperatorKind::Sk, l, grid, &rule, &basis, &img, &mass_inv))
}

fn galerkin_operator(
    kind: OperatorKind,
    l: usize,
    grid: &SurfaceGrid,
    rule: &PolarRule,
    basis: &DMatrix<C64>,
    img: &DMatrix<C64>,
    mass_inv: &DMatrix<C64>,
) -> OperatorMatrix {
    let g = weighted_gram(basis, img, &grid.area_weights);
    OperatorMatrix {
        kind,
        l,
        entries: mass_inv * &g,
        galerkin: Some(g),
        grid_id: grid.id,
        scheme: rule.scheme_id(),
    }
}

/// Assemble `S`, `K` and `K*` together (one pass over the polar rule).
pub fn assemble_all(grid: &SurfaceGrid, l: usize) -> Result<ScalarOperators> {
    assemble_all_with_rule(grid, l, PolarRule::for_grid(grid, l))
}

/// As [`assemble_all`] with an explicit quadrature rule.
pub fn assemble_all_with_rule(grid: &SurfaceGrid, l: usize, rule: PolarRule) -> Result<ScalarOperators> {
    let mut imgs = scalar_images(grid, l, rule, &[ScalarKernel::S, ScalarKernel::K, ScalarKernel::Kstar])?;
    let img_kstar = imgs.pop().unwrap_or_default();
    let img_k = imgs.pop().unwrap_or_default();
    let img_s = imgs.pop().unwrap_or_default();
    let basis = grid.basis_at_nodes(l)?;
    let mass = weighted_gram(&basis, &basis, &grid.area_weights);
    let mass_inv = invert_hermitian(&mass, "mass matrix")?;
    let s = galerkin_operator(OperatorKind::S, l, grid, &rule, &basis, &img_s, &mass_inv);
    let k = galerkin_operator(OperatorKind::K, l, grid, &rule, &basis, &img_k, &mass_inv);
    let kstar = galerkin_operator(OperatorKind::Kstar, l, grid, &rule, &basis, &img_kstar, &mass_inv);
    Ok(ScalarOperators {
        l,
        s,
        k,
        kstar,
        mass,
        mass_inv,
        basis,
        img_s,
        img_k,
        img_kstar,
        area_weights: grid.area_weights.clone(),
        rule,
    })
}

fn expect_kind(op: &OperatorMatrix, kind: OperatorKind) -> Result<()> {
    if op.kind != kind {
        return Err(Error::KindMismatch {
            expected: kind.name().into(),
            found: op.kind.name().into(),
        });
    }
    Ok(())
}

/// Potential of `M[curl⃗V]`, i.e. `K[V]` with the mean coefficient removed.
pub fn mnp_curl_apply(v: &ShCoeffs, k_mat: &OperatorMatrix) -> Result<ShCoeffs> {
    expect_kind(k_mat, OperatorKind::K)?;
    Ok(k_mat.apply(&v.clone().into_mean_free())?.into_mean_free())
}

/// Potential of `M*[∇X]`, i.e. `−K[X]` with the mean coefficient removed.
pub fn mnp_grad_apply(x: &ShCoeffs, k_mat: &OperatorMatrix) -> Result<ShCoeffs> {
    expect_kind(k_mat, OperatorKind::K)?;
    Ok(k_mat
        .apply(&x.clone().into_mean_free())?
        .scaled(C64::new(-1.0, 0.0))
        .into_mean_free())
}

fn check_ops_degree(ops: &ScalarOperators, l: usize) -> Result<()> {
    if l > ops.l {
        return Err(Error::Resolution {
            requested: l,
            available: ops.l,
        });
    }
    Ok(())
}

/// `N[g] = curl⃗ S[curl g]` for a curl-trace field, computed from node samples.
pub fn apply_n(g: &TangentField, ops: &ScalarOperators, grid: &SurfaceGrid) -> Result<TangentField> {
    if g.flavor != Flavor::Curl {
        return Err(Error::KindMismatch {
            expected: "curl-trace field".into(),
            found: "div-trace field".into(),
        });
    }
    check_ops_degree(ops, g.l())?;
    let nodes = grid.tangent_field_nodes(g)?;
    let c = grid.scal_curl_nodes(&nodes)?;
    let v = ops.apply_s_nodes(&c);
    let v = ShCoeffs::from_vec(ops.l, v.iter().copied().collect())?.into_mean_free();
    Ok(TangentField::curl(v))
}

/// `Q[f] = ∇ S[div f]` for a div-trace field, computed from node samples.
pub fn apply_q(f: &TangentField, ops: &ScalarOperators, grid: &SurfaceGrid) -> Result<TangentField> {
    if f.flavor != Flavor::Div {
        return Err(Error::KindMismatch {
            expected: "div-trace field".into(),
            found: "curl-trace field".into(),
        });
    }
    check_ops_degree(ops, f.l())?;
    let nodes = grid.tangent_field_nodes(f)?;
    let d = grid.div_nodes(&nodes)?;
    let x = ops.apply_s_nodes(&d);
    let x = ShCoeffs::from_vec(ops.l, x.iter().copied().collect())?.into_mean_free();
    Ok(TangentField::gradient(x))
}

// ---------------------------------------------------------------------------------------
// Helmholtz projection of node fields
// ---------------------------------------------------------------------------------------

/// L²-orthogonal projection of tangential node fields onto `∇Y_a ⊕ curl⃗Y_a`, `1 ≤ n ≤ L`.
#[derive(Debug, Clone)]
pub struct HelmholtzProjector {
    pub l: usize,
    grad: [DMatrix<C64>; 3],
    curl: [DMatrix<C64>; 3],
    stiffness_inv: DMatrix<C64>,
    weights: Vec<f64>,
}

impl HelmholtzProjector {
    pub fn new(grid: &SurfaceGrid, l: usize) -> Result<Self> {
        check_resolution(grid, l)?;
        let nb = sh_len(l);
        let n = grid.len();
        let mut grad: [DMatrix<C64>; 3] = std::array::from_fn(|_| DMatrix::zeros(n, nb - 1));
        let mut curl: [DMatrix<C64>; 3] = std::array::from_fn(|_| DMatrix::zeros(n, nb - 1));
        let cols: Vec<(Vec<CVec3>, Vec<CVec3>)> = (1..nb)
            .into_par_iter()
            .map(|b| {
                let (nn, m) = sh_degree_order(b);
                let c = ShCoeffs::unit(l, nn, m);
                let g = grid.surface_grad(&c)?;
                let cu = grid.vec_curl(&c)?;
                Ok((g, cu))
            })
            .collect::<Result<Vec<_>>>()?;
        for (j, (g, cu)) in cols.into_iter().enumerate() {
            for i in 0..n {
                for d in 0..3 {
                    grad[d][(i, j)] = g[i][d];
                    curl[d][(i, j)] = cu[i][d];
                }
            }
        }
        let w = &grid.area_weights;
        let stiff = weighted_gram(&grad[0], &grad[0], w)
            + weighted_gram(&grad[1], &grad[1], w)
            + weighted_gram(&grad[2], &grad[2], w);
        let stiffness_inv = invert_hermitian(&stiff, "stiffness matrix")?;
        Ok(HelmholtzProjector {
            l,
            grad,
            curl,
            stiffness_inv,
            weights: w.clone(),
        })
    }

    /// Potentials `(X, V)` of the projection of `f`, given as three component columns.
    pub fn project_columns(&self, f: &[DMatrix<C64>; 3]) -> (DMatrix<C64>, DMatrix<C64>) {
        let mut fw: [DMatrix<C64>; 3] = f.clone();
        for c in 0..3 {
            for (i, wi) in self.weights.iter().enumerate() {
                for j in 0..fw[c].ncols() {
                    fw[c][(i, j)] *= *wi;
                }
            }
        }
        let rg = self.grad[0].adjoint() * &fw[0] + self.grad[1].adjoint() * &fw[1] + self.grad[2].adjoint() * &fw[2];
        let rc = self.curl[0].adjoint() * &fw[0] + self.curl[1].adjoint() * &fw[1] + self.curl[2].adjoint() * &fw[2];
        (&self.stiffness_inv * rg, &self.stiffness_inv * rc)
    }

    /// Helmholtz potentials of a single node field.
    pub fn project(&self, f: &[CVec3], flavor: Flavor) -> Result<TangentField> {
        let n = f.len();
        let cols: [DMatrix<C64>; 3] = std::array::from_fn(|c| DMatrix::from_iterator(n, 1, f.iter().map(|v| v[c])));
        let (x, v) = self.project_columns(&cols);
        let pad = |m: DMatrix<C64>| {
            let mut c = vec![C64::new(0.0, 0.0)];
            c.extend(m.iter().copied());
            ShCoeffs::from_vec(self.l, c).map(|s| s.into_mean_free())
        };
        TangentField::new(pad(x)?, pad(v)?, flavor)
    }
}

// ---------------------------------------------------------------------------------------
// Frequency corrections
// ---------------------------------------------------------------------------------------

/// Material-independent correction kernels on curl fields, projected to `[X; V]` potentials.
#[derive(Debug, Clone)]
pub struct CorrectionBases {
    pub l: usize,
    /// `ν × ∫ curl⃗Y_b / |x−y|`.
    pub inv_dist: DMatrix<C64>,
    /// `ν × ∫ curl⃗Y_b`.
    pub plain: DMatrix<C64>,
    /// `(1/8π) ν × ∫ (x−y)/|x−y| × curl⃗Y_b`; `M^k_2 = k²·m2`.
    pub m2: DMatrix<C64>,
    pub grid_id: u64,
    pub scheme: String,
}

impl CorrectionBases {
    pub fn assemble(grid: &SurfaceGrid, l: usize) -> Result<Self> {
        let rule = PolarRule::for_grid(grid, l);
        let imgs = vector_images(grid, l, rule, &[VecKernel::InvDist, VecKernel::Plain, VecKernel::M2])?;
        let proj = HelmholtzProjector::new(grid, l)?;
        let nb = sh_len(l);
        let to_matrix = |img: &[DMatrix<C64>; 3]| {
            let (x, v) = proj.project_columns(img);
            let mut m = DMatrix::<C64>::zeros(2 * nb, nb);
            // Column 0 (curl⃗Y_0 = 0) stays zero.
            for b in 1..nb {
                for a in 1..nb {
                    m[(a, b)] = x[(a - 1, b)];
                    m[(nb + a, b)] = v[(a - 1, b)];
                }
            }
            m
        };
        Ok(CorrectionBases {
            l,
            inv_dist: to_matrix(&imgs[0]),
            plain: to_matrix(&imgs[1]),
            m2: to_matrix(&imgs[2]),
            grid_id: grid.id,
            scheme: rule.scheme_id(),
        })
    }

    fn wrap(&self, kind: OperatorKind, m: DMatrix<C64>) -> OperatorMatrix {
        OperatorMatrix {
            kind,
            l: self.l,
            entries: m,
            galerkin: None,
            grid_id: self.grid_id,
            scheme: self.scheme.clone(),
        }
    }

    /// `M^k_2` for a given wavenumber.
    pub fn mk2(&self, k: C64) -> OperatorMatrix {
        self.wrap(OperatorKind::Mk2, &self.m2 * (k * k))
    }

    /// `L_1 = C_1 ν × ∫ φ/|x−y|` on curl fields.
    pub fn l1(&self, materials: &MaterialConfig) -> OperatorMatrix {
        self.wrap(OperatorKind::L1, &self.inv_dist * materials.l_constant(1))
    }

    /// `L_2 = C_2 ν × ∫ φ` on curl fields.
    pub fn l2(&self, materials: &MaterialConfig) -> OperatorMatrix {
        self.wrap(OperatorKind::L2, &self.plain * materials.l_constant(2))
    }
}

/// Assemble one correction block: `Mk2` at the exterior wavenumber, or `L1`/`L2`.
pub fn assemble_correction(
    kind: OperatorKind,
    grid: &SurfaceGrid,
    materials: &MaterialConfig,
    l: usize,
) -> Result<OperatorMatrix> {
    materials.validate()?;
    let bases = CorrectionBases::assemble(grid, l)?;
    match kind {
        OperatorKind::Mk2 => Ok(bases.mk2(materials.k_e())),
        OperatorKind::L1 => Ok(bases.l1(materials)),
        OperatorKind::L2 => Ok(bases.l2(materials)),
        other => Err(Error::KindMismatch {
            expected: "Mk2, L1 or L2".into(),
            found: other.name().into(),
        }),
    }
}

// ---------------------------------------------------------------------------------------
// Off-boundary evaluation
// ---------------------------------------------------------------------------------------

/// Which layer potential to evaluate off the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    /// `S^k[f](x)` (scalar density).
    S,
    /// `∇S^k[f](x)` (scalar density).
    GradS,
    /// `∇×S⃗^k[φ](x)` (tangential density).
    CurlSVec,
    /// `∇×∇×S⃗^k[φ](x)` (tangential density).
    CurlCurlSVec,
}

/// A density for off-boundary evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Density<'a> {
    Scalar(&'a ShCoeffs),
    Tangent(&'a TangentField),
}

/// Result of an off-boundary evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue {
    Scalar(C64),
    Vector(CVec3),
}

/// Samples of the Helmholtz kernel and its derivatives.
struct KernelSample {
    g: C64,
    /// `∇_x G`.
    grad: CVec3,
    /// `G''` and `G'/R` (Hessian = `G'' r̂r̂ + (G'/R)(I − r̂r̂)`).
    g2: C64,
    g1r: C64,
    rh: Vec3,
}

#[inline]
fn kernel_sample(k: C64, x: &Vec3, y: &Vec3) -> KernelSample {
    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    let r = dot(&d, &d).sqrt();
    let rh = [d[0] / r, d[1] / r, d[2] / r];
    let ikr = C64::new(0.0, 1.0) * k * r;
    let e = ikr.exp();
    let g = -e / (FOUR_PI * r);
    let g1 = -e * (ikr - 1.0) / (FOUR_PI * r * r);
    let g2 = -e * (-(k * k) * r * r - 2.0 * ikr + 2.0) / (FOUR_PI * r * r * r);
    KernelSample {
        g,
        grad: [g1 * rh[0], g1 * rh[1], g1 * rh[2]],
        g2,
        g1r: g1 / r,
        rh,
    }
}

#[inline]
fn hess_apply(s: &KernelSample, v: &CVec3) -> CVec3 {
    let rv = v[0] * s.rh[0] + v[1] * s.rh[1] + v[2] * s.rh[2];
    std::array::from_fn(|c| s.g2 * s.rh[c] * rv + s.g1r * (v[c] - s.rh[c] * rv))
}

/// Off-surface evaluator with density samples cached at the grid nodes.
///
/// Several densities can be evaluated in one pass; kernel values are computed once per
/// node and point.
#[derive(Debug, Clone)]
pub struct OffSurfaceEvaluator<'g> {
    grid: &'g SurfaceGrid,
    scalars: Vec<Vec<C64>>,
    fields: Vec<Vec<CVec3>>,
    guard: f64,
}

impl<'g> OffSurfaceEvaluator<'g> {
    pub fn new(grid: &'g SurfaceGrid) -> Self {
        OffSurfaceEvaluator {
            grid,
            scalars: Vec::new(),
            fields: Vec::new(),
            guard: 3.0 * grid.max_node_spacing(),
        }
    }

    /// Distance below which evaluation is refused.
    pub fn guard(&self) -> f64 {
        self.guard
    }

    /// Add a scalar density; returns its slot.
    pub fn push_scalar(&mut self, c: &ShCoeffs) -> Result<usize> {
        self.scalars.push(self.grid.sh_synthesis(c)?);
        Ok(self.scalars.len() - 1)
    }

    /// Add a tangential density; returns its slot.
    pub fn push_field(&mut self, f: &TangentField) -> Result<usize> {
        self.fields.push(self.grid.tangent_field_nodes(f)?);
        Ok(self.fields.len() - 1)
    }

    /// Add a tangential density given by node samples.
    pub fn push_field_nodes(&mut self, f: Vec<CVec3>) -> Result<usize> {
        if f.len() != self.grid.len() {
            return Err(Error::invalid("density", "node count does not match the grid"));
        }
        self.fields.push(f);
        Ok(self.fields.len() - 1)
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    fn check_distance(&self, x: &Vec3) -> Result<()> {
        let d = self.grid.tubular_distance(x);
        if !(d > self.guard) {
            let h = self.guard / 3.0;
            return Err(Error::NearBoundary {
                distance: d,
                guard: self.guard,
                estimated_error: (-PI * d / h.max(1e-300)).exp(),
            });
        }
        Ok(())
    }

    /// `(∇×S⃗^k[φ_s](x), ∇×∇×S⃗^k[φ_s](x))` for every stored tangential density `s`.
    pub fn curl_fields(&self, k: C64, x: &Vec3) -> Result<Vec<(CVec3, CVec3)>> {
        self.check_distance(x)?;
        let z = C64::new(0.0, 0.0);
        let mut out = vec![([z; 3], [z; 3]); self.fields.len()];
        for (i, (y, w)) in self.grid.positions.iter().zip(&self.grid.area_weights).enumerate() {
            let ks = kernel_sample(k, x, y);
            for (f, o) in self.fields.iter().zip(out.iter_mut()) {
                let phi = f[i];
                let c1 = crate::specfun::cross_cc(&ks.grad, &phi);
                let h = hess_apply(&ks, &phi);
                for c in 0..3 {
                    o.0[c] += c1[c] * *w;
                    o.1[c] += (h[c] + k * k * ks.g * phi[c]) * *w;
                }
            }
        }
        Ok(out)
    }

    /// Like [`Self::curl_fields`] with a separate wavenumber `ks[s]` for each density.
    pub fn curl_fields_each(&self, ks: &[C64], x: &Vec3) -> Result<Vec<(CVec3, CVec3)>> {
        if ks.len() != self.fields.len() {
            return Err(Error::invalid("k", "one wavenumber per stored density is required"));
        }
        self.check_distance(x)?;
        let z = C64::new(0.0, 0.0);
        let mut out = vec![([z; 3], [z; 3]); self.fields.len()];
        for (i, (y, w)) in self.grid.positions.iter().zip(&self.grid.area_weights).enumerate() {
            for ((f, o), &k) in self.fields.iter().zip(out.iter_mut()).zip(ks) {
                let ks = kernel_sample(k, x, y);
                let phi = f[i];
                let c1 = crate::specfun::cross_cc(&ks.grad, &phi);
                let h = hess_apply(&ks, &phi);
                for c in 0..3 {
                    o.0[c] += c1[c] * *w;
                    o.1[c] += (h[c] + k * k * ks.g * phi[c]) * *w;
                }
            }
        }
        Ok(out)
    }

    /// `(S^k[f](x), ∇S^k[f](x))` for every stored scalar density.
    pub fn scalar_fields(&self, k: C64, x: &Vec3) -> Result<Vec<(C64, CVec3)>> {
        self.check_distance(x)?;
        let z = C64::new(0.0, 0.0);
        let mut out = vec![(z, [z; 3]); self.scalars.len()];
        for (i, (y, w)) in self.grid.positions.iter().zip(&self.grid.area_weights).enumerate() {
            let ks = kernel_sample(k, x, y);
            for (f, o) in self.scalars.iter().zip(out.iter_mut()) {
                let v = f[i] * *w;
                o.0 += ks.g * v;
                for c in 0..3 {
                    o.1[c] += ks.grad[c] * v;
                }
            }
        }
        Ok(out)
    }

    /// `∇·S⃗^k[φ](x)` for every stored tangential density.
    pub fn div_fields(&self, k: C64, x: &Vec3) -> Result<Vec<C64>> {
        self.check_distance(x)?;
        let mut out = vec![C64::new(0.0, 0.0); self.fields.len()];
        for (i, (y, w)) in self.grid.positions.iter().zip(&self.grid.area_weights).enumerate() {
            let ks = kernel_sample(k, x, y);
            for (f, o) in self.fields.iter().zip(out.iter_mut()) {
                let phi = f[i];
                *o += (ks.grad[0] * phi[0] + ks.grad[1] * phi[1] + ks.grad[2] * phi[2]) * *w;
            }
        }
        Ok(out)
    }
}

/// Evaluate a layer potential at a point off the surface by direct node quadrature.
///
/// Points within three node spacings of the surface are refused with
/// [`Error::NearBoundary`]; use [`near_boundary_eval`] there.
pub fn offboundary_eval(
    density: Density<'_>,
    k: C64,
    x: &Vec3,
    which: PotentialKind,
    grid: &SurfaceGrid,
) -> Result<FieldValue> {
    let mut ev = OffSurfaceEvaluator::new(grid);
    match (density, which) {
        (Density::Scalar(c), PotentialKind::S | PotentialKind::GradS) => {
            ev.push_scalar(c)?;
            let (s, g) = ev.scalar_fields(k, x)?[0];
            Ok(if which == PotentialKind::S {
                FieldValue::Scalar(s)
            } else {
                FieldValue::Vector(g)
            })
        }
        (Density::Tangent(f), PotentialKind::CurlSVec | PotentialKind::CurlCurlSVec) => {
            ev.push_field(f)?;
            let (c1, c2) = ev.curl_fields(k, x)?[0];
            Ok(FieldValue::Vector(if which == PotentialKind::CurlSVec { c1 } else { c2 }))
        }
        (Density::Scalar(_), _) => Err(Error::KindMismatch {
            expected: "tangential density".into(),
            found: "scalar density".into(),
        }),
        (Density::Tangent(_), _) => Err(Error::KindMismatch {
            expected: "scalar density".into(),
            found: "tangential density".into(),
        }),
    }
}

/// Evaluate `S^k[f](x)` and `∇S^k[f](x)` for a scalar density at any point, including
/// points close to the surface, with a polar rule centred at the radial foot point of `x`
/// whose polar nodes are graded towards the centre.
pub fn near_boundary_eval(c: &ShCoeffs, k: C64, x: &Vec3, grid: &SurfaceGrid, n_alpha: usize) -> Result<(C64, CVec3)> {
    let r = crate::specfun::norm3(x);
    if !(r > 0.0) {
        return Err(Error::invalid("x", "the origin has no radial foot point"));
    }
    let (ct, st, phi) = crate::specfun::polar_angles(x);
    let lc = c.l.max(grid.l_geo);
    let n_beta = 2 * lc + 2 * grid.l_geo + 16;
    let (xa, wa) = gauss_legendre(n_alpha);
    let (sp, cp) = phi.sin_cos();
    let mut s = C64::new(0.0, 0.0);
    let mut g = [C64::new(0.0, 0.0); 3];
    let wb = 2.0 * PI / n_beta as f64;
    for (xi, wi) in xa.iter().zip(&wa) {
        // α = π s², s ∈ (0, 1): clusters nodes at the foot point.
        let sv = 0.5 * (xi + 1.0);
        let a = PI * sv * sv;
        let da = PI * 2.0 * sv * 0.5 * wi;
        let (sa, ca) = a.sin_cos();
        for j in 0..n_beta {
            let b = (j as f64 + 0.5) * wb;
            let (sb, cb) = b.sin_cos();
            let loc = [sa * cb, sa * sb, ca];
            let u1 = rot_y(ct, st, &loc);
            let u = [cp * u1[0] - sp * u1[1], sp * u1[0] + cp * u1[1], u1[2]];
            let pg = grid.geometry_at(&u);
            let tab = HarmonicTable::new(c.l, &u, false);
            let f: C64 = c.coeffs.iter().zip(&tab.y).map(|(a, y)| a * y).sum();
            let w = da * wb * sa * pg.jac;
            let ks = kernel_sample(k, x, &pg.position);
            s += ks.g * f * w;
            for cc in 0..3 {
                g[cc] += ks.grad[cc] * f * w;
            }
        }
    }
    Ok((s, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::sh_index;

    fn max_offdiag_and_diag_err(a: &DMatrix<C64>, diag: impl Fn(usize) -> f64) -> (f64, f64) {
        let mut off: f64 = 0.0;
        let mut de: f64 = 0.0;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if i == j {
                    de = de.max((a[(i, j)] - diag(i)).norm());
                } else {
                    off = off.max(a[(i, j)].norm());
                }
            }
        }
        (off, de)
    }

    #[test]
    fn unit_sphere_spectra() {
        let grid = SurfaceGrid::sphere(1.0, 10).unwrap();
        let ops = assemble_all(&grid, 10).unwrap();
        let deg = |i: usize| sh_degree_order(i).0 as f64;
        let (o, d) = max_offdiag_and_diag_err(&ops.s.entries, |i| -1.0 / (2.0 * deg(i) + 1.0));
        assert!(o < 1e-8 && d < 1e-8, "S: {o:e} {d:e}");
        let (o, d) = max_offdiag_and_diag_err(&ops.kstar.entries, |i| 0.5 / (2.0 * deg(i) + 1.0));
        assert!(o < 1e-8 && d < 1e-8, "K*: {o:e} {d:e}");
        let (o, d) = max_offdiag_and_diag_err(&ops.k.entries, |i| 0.5 / (2.0 * deg(i) + 1.0));
        assert!(o < 1e-8 && d < 1e-8, "K: {o:e} {d:e}");
    }

    #[test]
    fn radius_two_sphere_scales_s() {
        let grid = SurfaceGrid::sphere(2.0, 6).unwrap();
        let s = assemble_scalar(OperatorKind::S, &grid, 6).unwrap();
        let e = s.entries[(sh_index(3, 1), sh_index(3, 1))];
        assert!((e.re + 2.0 / 7.0).abs() < 1e-9, "{e}");
    }

    #[test]
    fn perturbed_sphere_gauss_identity_and_duality() {
        let grid = SurfaceGrid::perturbed_sphere(0.05, 2, 0, 16).unwrap();
        let ops = assemble_all(&grid, 8).unwrap();
        // K[1] = 1/2 on a closed surface.
        let k1 = ops.img_k.column(0);
        let want = 0.5 / (4.0 * PI).sqrt();
        let err = k1.iter().map(|z| (z - want).norm()).fold(0.0, f64::max);
        assert!(err < 1e-8, "K[1] error {err:e}");
        // Galerkin of K is the adjoint of the Galerkin of K*.
        let gk = ops.k.galerkin.as_ref().unwrap();
        let gks = ops.kstar.galerkin.as_ref().unwrap();
        let r = (gk - gks.adjoint()).norm() / gk.norm();
        assert!(r < 1e-8, "duality residual {r:e}");
        // S symmetric.
        let gs = ops.s.galerkin.as_ref().unwrap();
        let r = (gs - gs.adjoint()).norm() / gs.norm();
        assert!(r < 1e-8, "S symmetry residual {r:e}");
    }

    #[test]
    fn kind_mismatch_rejected() {
        let grid = SurfaceGrid::sphere(1.0, 4).unwrap();
        let ops = assemble_all(&grid, 4).unwrap();
        let v = ShCoeffs::unit(4, 2, 0);
        assert!(matches!(mnp_curl_apply(&v, &ops.s), Err(Error::KindMismatch { .. })));
        assert!(assemble_scalar(OperatorKind::Mk2, &grid, 4).is_err());
    }
}
