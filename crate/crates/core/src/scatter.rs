//! The scaled boundary-integral scattering system, dipole excitation, and resonance
//! diagnostics.
//!
//! Densities `(ψ̃, ωφ̃)` are represented on the curl subspace by their curl potentials of
//! degree `≤ L`. Each block of the system maps a curl potential to the `[X; V]` Helmholtz
//! potentials of its image, so block matrices have `2·nb` rows and `nb` columns. The
//! order-0 part acts on curl potentials as `λ(τ) I − K` (since `M[curl⃗V] = curl⃗(K V)`);
//! the frequency corrections add `δ`-weighted kernels whose images carry a gradient part.
//! Linear solves are Petrov–Galerkin on the curl components.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::{assemble_all, CorrectionBases, HelmholtzProjector, MaterialConfig, OffSurfaceEvaluator, ScalarOperators};
use crate::specfun::{cross_cc, norm3, sh_len, CVec3, Vec3, C64};
use crate::spectral::{field_spectrum, working_norm, SpectralOperator};
use crate::surface::{Flavor, ShCoeffs, SurfaceGrid, TangentField};

const FOUR_PI: f64 = 4.0 * std::f64::consts::PI;

/// `G(k; x, y) = −e^{ik|x−y|}/(4π|x−y|)`.
pub fn green(k: C64, x: &Vec3, y: &Vec3) -> C64 {
    let r = norm3(&[x[0] - y[0], x[1] - y[1], x[2] - y[2]]);
    -(C64::new(0.0, 1.0) * k * r).exp() / (FOUR_PI * r)
}

/// `(G, ∇_x G, ∇_x∇_x G)` at `x`.
fn green_derivatives(k: C64, x: &Vec3, y: &Vec3) -> (C64, CVec3, [CVec3; 3]) {
    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    let r = norm3(&d);
    let rh = [d[0] / r, d[1] / r, d[2] / r];
    let ikr = C64::new(0.0, 1.0) * k * r;
    let e = ikr.exp();
    let g = -e / (FOUR_PI * r);
    let g1 = -e * (ikr - 1.0) / (FOUR_PI * r * r);
    let g2 = -e * (-(k * k) * r * r - 2.0 * ikr + 2.0) / (FOUR_PI * r * r * r);
    let grad = std::array::from_fn(|a| g1 * rh[a]);
    let hess = std::array::from_fn(|a| {
        std::array::from_fn(|b| {
            let id = if a == b { 1.0 } else { 0.0 };
            g2 * rh[a] * rh[b] + g1 / r * (id - rh[a] * rh[b])
        })
    });
    (g, grad, hess)
}

/// `(λ_μ, λ_ε) = ((μ_c+μ_e)/(2(μ_e−μ_c)), (ε_c+ε_e)/(2(ε_e−ε_c)))`.
pub fn contrast_parameters(m: &MaterialConfig) -> (C64, C64) {
    (
        (m.mu_c + m.mu_e) / (2.0 * (m.mu_e - m.mu_c)),
        (m.eps_c + m.eps_e) / (2.0 * (m.eps_e - m.eps_c)),
    )
}

/// The scaled system `𝒜(δ) = 𝒜(0) + 𝓑(δ)` truncated at a given order in `δ`.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub l: usize,
    pub order: u8,
    pub materials: MaterialConfig,
    /// `blocks[r][c]`: map from the curl potential of unknown `c` to the `[X; V]`
    /// potentials of equation `r` (`2·nb × nb`).
    pub blocks: [[DMatrix<C64>; 2]; 2],
    /// Eigenvalues of `M` on curl fields (for resonance detection).
    pub eigenvalues: Vec<f64>,
    pub grid_id: u64,
    pub scheme: String,
}

fn embed_v(m: &DMatrix<C64>, nb: usize) -> DMatrix<C64> {
    let mut out = DMatrix::<C64>::zeros(2 * nb, nb);
    out.view_mut((nb, 0), (nb, nb)).copy_from(m);
    out
}

/// Assemble the system, building operators and correction kernels on `grid` at degree `l`.
pub fn assemble_system(grid: &SurfaceGrid, materials: &MaterialConfig, order: u8, l: usize) -> Result<BlockSystem> {
    let ops = assemble_all(grid, l)?;
    let bases = if order > 0 { Some(CorrectionBases::assemble(grid, l)?) } else { None };
    assemble_system_with(&ops, bases.as_ref(), materials, order)
}

/// Assemble the system from precomputed operators (reusable across `(δ, τ)` sweeps).
pub fn assemble_system_with(
    ops: &ScalarOperators,
    bases: Option<&CorrectionBases>,
    materials: &MaterialConfig,
    order: u8,
) -> Result<BlockSystem> {
    materials.validate()?;
    if order > 2 {
        return Err(Error::invalid("order", "must be 0, 1 or 2"));
    }
    let l = ops.l;
    let nb = sh_len(l);
    let (lam_mu, lam_eps) = contrast_parameters(materials);
    // Order 0: λ I − K on mean-free curl potentials.
    let mut k = ops.k.entries.clone();
    for i in 0..nb {
        k[(0, i)] = C64::new(0.0, 0.0);
        k[(i, 0)] = C64::new(0.0, 0.0);
    }
    let mut id = DMatrix::<C64>::identity(nb, nb);
    id[(0, 0)] = C64::new(0.0, 0.0);
    let d_mu = embed_v(&(&id * lam_mu - &k), nb);
    let d_eps = embed_v(&(&id * lam_eps - &k), nb);
    let z = DMatrix::<C64>::zeros(2 * nb, nb);
    let mut blocks = [[d_mu, z.clone()], [z, d_eps]];
    if order > 0 {
        let b = bases.ok_or_else(|| Error::invalid("order", "frequency corrections require correction kernels"))?;
        if b.l != l {
            return Err(Error::invalid("L", "correction kernels and operators differ in degree"));
        }
        let delta = C64::new(materials.delta, 0.0);
        let (dm, de) = (materials.mu_e - materials.mu_c, materials.eps_e - materials.eps_c);
        let mut off = b.l1(materials).entries * delta;
        if order > 1 {
            let (kc, ke) = (materials.k_c(), materials.k_e());
            let m_mu = (b.mk2(kc).entries * materials.mu_c - b.mk2(ke).entries * materials.mu_e) / dm;
            let m_eps = (b.mk2(kc).entries * materials.eps_c - b.mk2(ke).entries * materials.eps_e) / de;
            let d2 = delta * delta;
            blocks[0][0] += m_mu * d2;
            blocks[1][1] += m_eps * d2;
            off += b.l2(materials).entries * d2;
        }
        blocks[0][1] += &off / dm;
        blocks[1][0] += &off / de;
    }
    let eigenvalues = field_spectrum(ops, SpectralOperator::MCurl)?.eigenvalues;
    Ok(BlockSystem {
        l,
        order,
        materials: *materials,
        blocks,
        eigenvalues,
        grid_id: ops.k.grid_id,
        scheme: ops.k.scheme.clone(),
    })
}

fn curl_potential(f: &TangentField, l: usize) -> Result<DVector<C64>> {
    if f.l() != l {
        return Err(Error::invalid("density", format!("degree {} differs from the system degree {l}", f.l())));
    }
    let scale = f.v.norm().max(1e-300);
    if f.x.norm() > 1e-10 * scale {
        return Err(Error::KindMismatch {
            expected: "curl field".into(),
            found: "field with a gradient part".into(),
        });
    }
    let mut v = f.v.as_dvector();
    v[0] = C64::new(0.0, 0.0);
    Ok(v)
}

fn split_xv(out: &DVector<C64>, l: usize) -> Result<TangentField> {
    let nb = sh_len(l);
    let x = ShCoeffs::from_vec(l, out.rows(0, nb).iter().copied().collect())?;
    let v = ShCoeffs::from_vec(l, out.rows(nb, nb).iter().copied().collect())?;
    TangentField::new(x, v, Flavor::Curl)
}

impl BlockSystem {
    pub fn nb(&self) -> usize {
        sh_len(self.l)
    }

    /// `𝒜(δ)(ψ, ωφ)`; both inputs must be curl fields of the system degree.
    pub fn apply(&self, psi: &TangentField, omega_phi: &TangentField) -> Result<(TangentField, TangentField)> {
        let a = curl_potential(psi, self.l)?;
        let b = curl_potential(omega_phi, self.l)?;
        let r0 = &self.blocks[0][0] * &a + &self.blocks[0][1] * &b;
        let r1 = &self.blocks[1][0] * &a + &self.blocks[1][1] * &b;
        Ok((split_xv(&r0, self.l)?, split_xv(&r1, self.l)?))
    }

    /// Curl-component system matrix (`2(nb−1)` square) used for solves.
    pub fn curl_matrix(&self) -> DMatrix<C64> {
        let nb = self.nb();
        let m = nb - 1;
        let mut a = DMatrix::<C64>::zeros(2 * m, 2 * m);
        for r in 0..2 {
            for c in 0..2 {
                a.view_mut((r * m, c * m), (m, m))
                    .copy_from(&self.blocks[r][c].view((nb + 1, 1), (m, m)));
            }
        }
        a
    }

    /// Spectral norm of `𝓑(δ)` (all blocks minus their order-0 part).
    pub fn correction_norm(&self, order0: &BlockSystem) -> f64 {
        let nb = self.nb();
        let mut d = DMatrix::<C64>::zeros(4 * nb, 2 * nb);
        for r in 0..2 {
            for c in 0..2 {
                d.view_mut((r * 2 * nb, c * nb), (2 * nb, nb))
                    .copy_from(&(&self.blocks[r][c] - &order0.blocks[r][c]));
            }
        }
        d.singular_values().max()
    }
}

/// Scaled incident traces `(ν×Ẽ/(μ_e−μ_c), iν×H̃/(ε_e−ε_c))` of a dipole.
#[derive(Debug, Clone)]
pub struct RhsVector {
    pub e: TangentField,
    pub h: TangentField,
    /// `‖grad part‖ / ‖ν×Ẽ‖` in the working norm.
    pub gradient_fraction: f64,
    /// Working norms of the unscaled traces `ν×Ẽ` and `ν×H̃`.
    pub e_trace_norm: f64,
    pub h_trace_norm: f64,
}

/// Scaled dipole fields `(Ẽ(x̃), H̃(x̃))` for a source at `s̃` with moment `p`.
pub fn dipole_fields(source: &Vec3, p: &Vec3, materials: &MaterialConfig, x: &Vec3) -> (CVec3, CVec3) {
    let ke = materials.k_e();
    let delta = materials.delta;
    let (g, grad, hess) = green_derivatives(ke * delta, x, source);
    let pc: CVec3 = p.map(|v| C64::new(v, 0.0));
    let i = C64::new(0.0, 1.0);
    let e = std::array::from_fn(|a| {
        let hp: C64 = (0..3).map(|b| hess[a][b] * p[b]).sum();
        -hp / (ke * ke) - g * p[a] * delta * delta
    });
    let curl = cross_cc(&grad, &pc);
    let h = std::array::from_fn(|a| i * delta / (materials.omega * materials.mu_e) * curl[a]);
    (e, h)
}

/// Project the scaled dipole traces onto degree-`l` Helmholtz potentials.
pub fn dipole_incident_trace(source: &Vec3, p: &Vec3, materials: &MaterialConfig, grid: &SurfaceGrid, l: usize) -> Result<RhsVector> {
    materials.validate()?;
    let r = norm3(source);
    if r == 0.0 || r <= grid.rho_at(source) || r <= grid.max_rho() * (1.0 + 1e-12) && grid.tubular_distance(source) < 1e-9 {
        return Err(Error::invalid("source", "the dipole must lie outside the particle"));
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("p", "dipole moment must be finite"));
    }
    let (ne, nh): (Vec<CVec3>, Vec<CVec3>) = grid
        .positions
        .par_iter()
        .zip(&grid.normals)
        .map(|(x, n)| {
            let (e, h) = dipole_fields(source, p, materials, x);
            let nc: CVec3 = n.map(|v| C64::new(v, 0.0));
            (cross_cc(&nc, &e), cross_cc(&nc, &h))
        })
        .unzip();
    let proj = HelmholtzProjector::new(grid, l)?;
    let te = proj.project(&ne, Flavor::Curl)?;
    let th = proj.project(&nh, Flavor::Curl)?;
    let e_trace_norm = working_norm(&te);
    let h_trace_norm = working_norm(&th);
    let grad_part = TangentField::new(te.x.clone(), ShCoeffs::zeros(l), Flavor::Curl)?;
    let gradient_fraction = if e_trace_norm > 0.0 { working_norm(&grad_part) / e_trace_norm } else { 0.0 };
    let se = C64::new(1.0, 0.0) / (materials.mu_e - materials.mu_c);
    let sh = C64::new(0.0, 1.0) / (materials.eps_e - materials.eps_c);
    Ok(RhsVector {
        e: TangentField::new(te.x.scaled(se), te.v.scaled(se), Flavor::Curl)?,
        h: TangentField::new(th.x.scaled(sh), th.v.scaled(sh), Flavor::Curl)?,
        gradient_fraction,
        e_trace_norm,
        h_trace_norm,
    })
}

/// Solution of the scaled system.
#[derive(Debug, Clone)]
pub struct ScatterSolution {
    pub psi: TangentField,
    pub omega_phi: TangentField,
    /// Ratio of extreme singular values of the solved matrix.
    pub condition: f64,
    /// Working norm of `(ψ̃, ωφ̃)`.
    pub norm: f64,
}

/// Solve `𝒜(δ)(ψ̃, ωφ̃) = rhs` on the curl subspace.
pub fn solve_scatter(system: &BlockSystem, rhs: &RhsVector) -> Result<ScatterSolution> {
    let (lam_mu, lam_eps) = contrast_parameters(&system.materials);
    for lam in [lam_mu, lam_eps] {
        if lam.im.abs() < 1e-12 {
            if let Some(&ev) = system.eigenvalues.iter().find(|&&e| (e - lam.re).abs() < 1e-12) {
                return Err(Error::Resonance {
                    parameter: system.materials.tau().unwrap_or(f64::NAN),
                    eigenvalue: ev,
                });
            }
        }
    }
    let l = system.l;
    let nb = system.nb();
    let m = nb - 1;
    if rhs.e.l() != l || rhs.h.l() != l {
        return Err(Error::invalid("rhs", "degree differs from the system degree"));
    }
    let a = system.curl_matrix();
    let mut b = DVector::<C64>::zeros(2 * m);
    for i in 0..m {
        b[i] = rhs.e.v.coeffs[i + 1];
        b[m + i] = rhs.h.v.coeffs[i + 1];
    }
    let sv = a.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let x = a
        .lu()
        .solve(&b)
        .ok_or(Error::IllConditioned { condition })?;
    let mk = |off: usize| -> Result<TangentField> {
        let mut c = vec![C64::new(0.0, 0.0)];
        c.extend(x.rows(off, m).iter().copied());
        Ok(TangentField::curl(ShCoeffs::from_vec(l, c)?))
    };
    let psi = mk(0)?;
    let omega_phi = mk(m)?;
    let norm = working_norm(&psi).hypot(working_norm(&omega_phi));
    Ok(ScatterSolution {
        psi,
        omega_phi,
        condition,
        norm,
    })
}

/// `‖𝒜(δ)(φ, ωφ)‖` in the working norm for a curl mode `φ` scaled to unit working norm.
pub fn weak_resonance_indicator(system: &BlockSystem, mode: &TangentField) -> Result<f64> {
    let n = working_norm(mode);
    if n == 0.0 {
        return Err(Error::invalid("mode", "must be nonzero"));
    }
    let phi = TangentField::new(mode.x.scaled(C64::new(1.0 / n, 0.0)), mode.v.scaled(C64::new(1.0 / n, 0.0)), Flavor::Curl)?;
    let w = system.materials.omega;
    let wphi = TangentField::new(phi.x.scaled(C64::new(w, 0.0)), phi.v.scaled(C64::new(w, 0.0)), Flavor::Curl)?;
    let (r0, r1) = system.apply(&phi, &wphi)?;
    Ok(working_norm(&r0).hypot(working_norm(&r1)))
}

/// Total fields `(E, H)` at `x` from densities `(ψ, φ)` on the grid, plus the incident
/// field outside the particle when supplied.
pub fn eval_scattered_fields(
    psi: &TangentField,
    phi: &TangentField,
    x: &Vec3,
    materials: &MaterialConfig,
    grid: &SurfaceGrid,
    incident: Option<(CVec3, CVec3)>,
) -> Result<(CVec3, CVec3)> {
    materials.validate()?;
    let r = norm3(x);
    let inside = r == 0.0 || r < grid.rho_at(x);
    let (mu, k) = if inside {
        (materials.mu_c, materials.k_c())
    } else {
        (materials.mu_e, materials.k_e())
    };
    let mut ev = OffSurfaceEvaluator::new(grid);
    ev.push_field(psi)?;
    ev.push_field(phi)?;
    let f = ev.curl_fields(k, x)?;
    let ((c1p, c2p), (c1f, c2f)) = (f[0], f[1]);
    let i = C64::new(0.0, 1.0);
    let w = materials.omega;
    let mut e: CVec3 = std::array::from_fn(|a| mu * c1p[a] + c2f[a]);
    let mut h: CVec3 = std::array::from_fn(|a| -i / w * c2p[a] - i / (w * mu) * k * k * c1f[a]);
    if let (false, Some((ei, hi))) = (inside, incident) {
        for a in 0..3 {
            e[a] += ei[a];
            h[a] += hi[a];
        }
    }
    Ok((e, h))
}

/// Sweep configuration: materials are built from `τ` with `ε_c = μ_c = −τ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub omega: f64,
    pub tau_list: Vec<f64>,
    pub delta_list: Vec<f64>,
    pub order: u8,
    pub source: SourceConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub s: Vec3,
    pub p: Vec3,
}

/// One row of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub delta: f64,
    /// Indicator of the curl eigenmode nearest to `λ(τ)`.
    pub indicator: f64,
    pub solution_norm: f64,
    pub condition: f64,
}

/// Solve over the `(τ, δ)` grid; resonant points report an infinite solution norm.
pub fn sweep(grid: &SurfaceGrid, l: usize, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.tau_list.is_empty() || cfg.delta_list.is_empty() {
        return Err(Error::invalid("tau_list", "tau and delta lists must be non-empty"));
    }
    let ops = assemble_all(grid, l)?;
    let bases = if cfg.order > 0 { Some(CorrectionBases::assemble(grid, l)?) } else { None };
    let modes = field_spectrum(&ops, SpectralOperator::MCurl)?;
    let jobs: Vec<(f64, f64)> = cfg
        .tau_list
        .iter()
        .flat_map(|&t| cfg.delta_list.iter().map(move |&d| (t, d)))
        .collect();
    jobs.par_iter()
        .map(|&(tau, delta)| {
            let mat = MaterialConfig::from_tau(tau, cfg.omega, delta)?;
            let sys = assemble_system_with(&ops, bases.as_ref(), &mat, cfg.order)?;
            let lam = crate::plasmon::contrast_parameter(tau);
            let j = modes
                .eigenvalues
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - lam).abs().total_cmp(&(b.1 - lam).abs()))
                .map(|(j, _)| j)
                .unwrap_or(0);
            let indicator = weak_resonance_indicator(&sys, &modes.field(j)?)?;
            let rhs = dipole_incident_trace(&cfg.source.s, &cfg.source.p, &mat, grid, l)?;
            let (solution_norm, condition) = match solve_scatter(&sys, &rhs) {
                Ok(s) => (s.norm, s.condition),
                Err(Error::Resonance { .. }) => (f64::INFINITY, f64::INFINITY),
                Err(e) => return Err(e),
            };
            Ok(SweepRow {
                tau,
                delta,
                indicator,
                solution_norm,
                condition,
            })
        })
        .collect()
}

/// CSV rendering `tau,delta,indicator,solution_norm,condition`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("tau,delta,indicator,solution_norm,condition\n");
    for r in rows {
        s.push_str(&format!(
            "{:.15e},{:.15e},{:.15e},{:.15e},{:.15e}\n",
            r.tau, r.delta, r.indicator, r.solution_norm, r.condition
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mie::SphereMode;

    fn sphere_system(tau: f64, delta: f64, order: u8) -> (SurfaceGrid, BlockSystem) {
        let g = SurfaceGrid::sphere(1.0, 12).unwrap();
        let m = MaterialConfig::from_tau(tau, 1.0, delta).unwrap();
        let s = assemble_system(&g, &m, order, 6).unwrap();
        (g, s)
    }

    #[test]
    fn order_zero_diagonal_on_sphere() {
        let (_, sys) = sphere_system(0.3, 0.1, 0);
        let lam_t = crate::plasmon::contrast_parameter(0.3);
        for n in 1..=6 {
            let phi = SphereMode::new(2, n, 1, 1.0).unwrap().density(6).unwrap();
            let (r0, r1) = sys.apply(&phi, &phi).unwrap();
            let f = C64::new(lam_t - 1.0 / (2.0 * (2 * n + 1) as f64), 0.0);
            for r in [r0, r1] {
                let d: f64 = r.v.coeffs.iter().zip(&phi.v.coeffs).map(|(a, b)| (a - b * f).norm_sqr()).sum::<f64>().sqrt();
                assert!(d < 1e-8 * phi.v.norm() && r.x.norm() < 1e-12, "n={n}: {d:e}");
            }
        }
    }

    #[test]
    fn green_scaling() {
        let k = C64::new(1.3, 0.0);
        let (x, y) = ([0.3, -0.2, 0.9], [-0.5, 0.4, 0.1]);
        let d = 0.07;
        let xs = x.map(|v| v / d);
        let ys = y.map(|v| v / d);
        let a = green(k, &x, &y);
        let b = green(k * d, &xs, &ys) / d;
        assert!((a - b).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn zero_rhs_and_resonance() {
        let (g, sys) = sphere_system(0.3, 0.1, 0);
        let mut rhs = dipole_incident_trace(&[0.0, 0.0, 3.0], &[0.0, 0.0, 0.0], &sys.materials, &g, 6).unwrap();
        assert_eq!(rhs.e_trace_norm, 0.0);
        rhs.gradient_fraction = 0.0;
        let sol = solve_scatter(&sys, &rhs).unwrap();
        assert_eq!(sol.norm, 0.0);
        let (_, res) = sphere_system(0.5, 0.1, 0);
        assert!(matches!(solve_scatter(&res, &rhs), Err(Error::Resonance { .. })));
        assert!(dipole_incident_trace(&[0.0, 0.0, 0.5], &[0.0, 0.0, 1.0], &sys.materials, &g, 6).is_err());
    }

    #[test]
    fn equal_wavenumbers_remove_coupling() {
        let g = SurfaceGrid::sphere(1.0, 12).unwrap();
        let m = MaterialConfig {
            eps_e: C64::new(1.0, 0.0),
            mu_e: C64::new(1.0, 0.0),
            eps_c: C64::new(0.5, 0.0),
            mu_c: C64::new(2.0, 0.0),
            omega: 1.0,
            delta: 0.1,
        };
        let s = assemble_system(&g, &m, 2, 4).unwrap();
        assert!(s.blocks[0][1].iter().all(|z| z.norm() < 1e-14));
        assert!(s.blocks[1][0].iter().all(|z| z.norm() < 1e-14));
    }
}
